use hdr_core::config::RunConfig;
use hdr_core::optics::{
    lens_phase, phase_delay, propagate, simulate_psf, star_psf, transfer_function, HeightMap, OpticsConfig,
    OpticsModel,
};
use hdr_tensor::{grad_check, Complex, Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> OpticsConfig {
    OpticsConfig {
        sim_grid: 32,
        sim_pitch_m: 4e-6,
        doe_aperture_m: 100e-6,
        lens_aperture_m: 90e-6,
        focal_length_m: 2e-3,
        doe_to_lens_m: 0.2e-3,
        lens_to_sensor_m: 2e-3,
        sensor_pitch_m: 8e-6,
        psf_crop: 7,
        max_height_m: None,
        ..RunConfig::desk().optics
    }
}

fn random_height(cfg: &OpticsConfig, seed: u64) -> HeightMap {
    let max = cfg.max_height().unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    HeightMap {
        values: (0..cfg.sim_grid * cfg.sim_grid).map(|_| r.random_range(0.0..max)).collect(),
        grid: cfg.sim_grid,
        pitch_m: cfg.sim_pitch_m,
    }
}

#[test]
fn transmissions_are_pure_phase() {
    let cfg = small();
    let h = random_height(&cfg, 1);
    for &l in &cfg.wavelengths_m {
        for t in phase_delay(&h, l, &cfg).unwrap().into_iter().chain(lens_phase(l, &cfg)) {
            let m = t.norm();
            assert!(m == 0.0 || (m - 1.0).abs() < 1e-15, "modulus {m}");
        }
    }
}

#[test]
fn transfer_function_is_unit_modulus_or_zero() {
    for d in [0.0, 1e-4, 2e-3] {
        let h = transfer_function(32, 4e-6, 550e-9, d).unwrap();
        assert!(h.iter().all(|c| c.norm() == 0.0 || (c.norm() - 1.0).abs() < 1e-14));
    }
    assert!(transfer_function(32, 4e-6, 550e-9, -1.0).is_err());
}

#[test]
fn propagation_is_linear() {
    let cfg = small();
    let n = cfg.sim_grid;
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let mut field = || -> Vec<Complex<f64>> {
        (0..n * n).map(|_| Complex::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0))).collect()
    };
    let (f, h) = (field(), field());
    let (a, b) = (Complex::new(0.7, -0.2), Complex::new(-1.3, 0.4));
    let mut g = Graph::<f64>::new();
    let run = |g: &mut Graph<f64>, v: Vec<Complex<f64>>| {
        let x = g.complex_constant(Tensor::new(vec![n, n], v).unwrap());
        let y = propagate(g, x, 1e-3, 550e-9, &cfg).unwrap();
        g.complex(y).to_vec()
    };
    let combo: Vec<Complex<f64>> = f.iter().zip(&h).map(|(x, y)| a * x + b * y).collect();
    let lhs = run(&mut g, combo);
    let (pf, ph) = (run(&mut g, f), run(&mut g, h));
    for i in 0..n * n {
        assert!((lhs[i] - (a * pf[i] + b * ph[i])).norm() < 1e-10);
    }
}

#[test]
fn constant_height_offset_leaves_the_psf_unchanged() {
    let cfg = small();
    let h = random_height(&cfg, 3);
    let mut shifted = h.clone();
    shifted.values.iter_mut().for_each(|v| *v += 0.3e-6);
    let (a, b) = (simulate_psf(&h, &cfg).unwrap(), simulate_psf(&shifted, &cfg).unwrap());
    for (x, y) in a.kernels.iter().zip(&b.kernels) {
        assert!((x - y).abs() < 1e-9);
    }
}

#[test]
fn psf_energy_gradient_matches_finite_differences() {
    let cfg = small();
    let model = OpticsModel::new(&cfg).unwrap();
    // heights in micrometers so the step is well scaled
    let h: Tensor<f64> = Tensor::new(vec![32, 32], random_height(&cfg, 4).values.iter().map(|v| v * 1e6).collect()).unwrap();
    let rep = grad_check(
        |g, v| {
            let m = g.scale(v[0], 1e-6)?;
            let psf = model.psf(g, m).map_err(|e| hdr_tensor::TensorError::Contract {
                op: "psf",
                msg: e.to_string(),
            })?;
            g.sum(psf)
        },
        &[h],
        1e-6,
        1e-6,
    )
    .unwrap();
    assert!(rep.max_rel_err < 1e-3, "{rep:?}");
}

#[test]
fn flat_doe_psf_is_centered_and_within_unit_energy() {
    let cfg = RunConfig::desk().optics;
    let psf = simulate_psf(&HeightMap::zeros(&cfg), &cfg).unwrap();
    let k = cfg.psf_crop;
    for c in 0..3 {
        let ch = psf.channel(c);
        let e: f64 = ch.iter().sum();
        assert!(e > 0.5 && e <= 1.0 + 1e-9, "energy {e}");
        let peak = ch.iter().copied().enumerate().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap().0;
        assert_eq!(peak, (k / 2) * k + k / 2);
    }
}

#[test]
fn star_psf_has_eightfold_symmetry() {
    let size = 21;
    let s = star_psf(8, 4.0, 0.2, size).unwrap();
    let ch = s.channel(1);
    let at = |y: usize, x: usize| ch[y * size + x];
    let max = ch.iter().copied().fold(0.0, f64::max);
    for y in 0..size {
        for x in 0..size {
            // quarter turn and mirror images land on the same pattern
            assert!((at(y, x) - at(x, size - 1 - y)).abs() < 1e-12 * max);
            assert!((at(y, x) - at(y, size - 1 - x)).abs() < 1e-12 * max);
            assert!((at(y, x) - at(x, y)).abs() < 1e-12 * max);
        }
    }
    assert!(at(10, 15) > 0.0 && at(15, 15) > 0.0 && at(12, 15) < at(10, 15));
    assert_eq!(s.channel(0), s.channel(2));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn psf_is_nonnegative_and_never_gains_energy(seed in any::<u64>()) {
        let cfg = small();
        let psf = simulate_psf(&random_height(&cfg, seed), &cfg).unwrap();
        for c in 0..3 {
            prop_assert!(psf.channel(c).iter().all(|&v| v >= 0.0));
            prop_assert!(psf.channel(c).iter().sum::<f64>() <= 1.0 + 1e-9);
        }
    }
}
