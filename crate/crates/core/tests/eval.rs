use hdr_core::config::RunConfig;
use hdr_core::data::{write_synthetic_corpus, Dataset, Split, SyntheticSpec};
use hdr_core::eval::{evaluate, psnr, Domain, Variant};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn test_split(dir: &std::path::Path) -> Dataset {
    let m = write_synthetic_corpus(dir, &SyntheticSpec::default(), 4, 1, 21).unwrap();
    Dataset::load(&m, Split::Test).unwrap()
}

#[test]
fn raw_ldr_psnr_falls_as_noise_grows() {
    let dir = tempfile::tempdir().unwrap();
    let data = test_split(dir.path());
    let mut last = f64::INFINITY;
    for sigma in [0.0, 0.01, 0.05, 0.2] {
        let mut cfg = RunConfig::desk();
        cfg.sensor.noise_sigma = sigma;
        let rep = evaluate(&cfg, &[Variant::raw_ldr()], &data, None).unwrap();
        let p = rep.aggregate("ldr").unwrap().psnr_l;
        assert!(p <= last, "sigma {sigma}: {p} after {last}");
        last = p;
    }
}

#[test]
fn written_report_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let data = test_split(&dir.path().join("corpus"));
    let cfg = RunConfig::desk();
    let mut bytes = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        std::fs::create_dir_all(&out).unwrap();
        let rep = evaluate(&cfg, &[Variant::raw_ldr()], &data, None).unwrap();
        let files = rep.write(&out, "metrics").unwrap();
        bytes.push(files.iter().map(|f| std::fs::read(f).unwrap()).collect::<Vec<_>>());
    }
    assert_eq!(bytes[0], bytes[1]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn psnr_ignores_pixel_order(seed in any::<u64>(), n in 1usize..200) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f32> = (0..n).map(|_| r.random_range(0.0..4.0)).collect();
        let y: Vec<f32> = (0..n).map(|_| r.random_range(0.0..4.0)).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let xp: Vec<f32> = perm.iter().map(|&i| x[i]).collect();
        let yp: Vec<f32> = perm.iter().map(|&i| y[i]).collect();
        for d in [Domain::Linear, Domain::Gamma] {
            let (a, b) = (psnr(&x, &y, d, 1.0), psnr(&xp, &yp, d, 1.0));
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }
    }
}
