//! `hdr`: simulate PSFs, train, evaluate and reconstruct.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 data or I/O
//! error, 3 numeric failure. `HDR_DETERMINISTIC` (0/1) overrides the
//! config's `deterministic` flag. `HDR_THREADS` is validated, but every stage
//! runs on the calling thread whatever its value.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hdr_core::checkpoint::{self, Checkpoint};
use hdr_core::config::RunConfig;
use hdr_core::data::{
    self, load_hdr, saturation_histogram, write_synthetic_corpus, Dataset, Format, Manifest, ManifestEntry, Split,
    SyntheticSpec,
};
use hdr_core::eval::{decode, evaluate, Variant};
use hdr_core::image::write_preview_png;
use hdr_core::optics::{simulate_psf, star_psf, HeightMap};
use hdr_core::sensor::expose;
use hdr_core::training::{run_training, Mode};
use hdr_core::{Error, Result};

#[derive(Parser)]
#[command(name = "hdr", version, about = "Learned diffractive optics for single-shot HDR imaging")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate the PSF of a height map (flat DOE by default).
    SimulatePsf {
        #[arg(long)]
        config: PathBuf,
        /// Height map PFM in meters.
        #[arg(long, conflicts_with = "checkpoint")]
        height: Option<PathBuf>,
        /// Take the height map from an e2e_doe checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train per the config; writes metrics.csv and checkpoints to --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an identical config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score checkpoints (and the raw LDR baseline) on the test split.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        /// Repeatable; each checkpoint is one variant named after its mode
        /// unless given as NAME=PATH.
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_ldr_baseline: bool,
    },
    /// Decode one LDR capture (PFM or Radiance) into an HDR PFM.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Directory for EV previews.
        #[arg(long)]
        previews: Option<PathBuf>,
    },
    /// Write a star-shaped baseline PSF as a 3-channel PFM.
    GenStarPsf {
        #[arg(long, default_value_t = 8)]
        streaks: usize,
        #[arg(long, default_value_t = 3.0)]
        falloff: f64,
        #[arg(long, default_value_t = 0.5)]
        core_weight: f64,
        #[arg(long, default_value_t = 21)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Saturation histogram of the exposure-normalized dataset as CSV.
    DatasetStats {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 48)]
        bins: usize,
    },
    /// Generate the procedural HDR corpus with a manifest.
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 48)]
        train: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Build a manifest from HDR files, verifying that each decodes.
    MakeManifest {
        /// Files or directories (scanned for .hdr/.rgbe/.pic/.pfm).
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Every k-th file (sorted order) goes to the test split.
        #[arg(long, default_value_t = 4)]
        test_every: usize,
        #[arg(long, default_value = "user")]
        tag: String,
    },
}

fn env_overrides(cfg: &mut RunConfig) -> Result<()> {
    if let Ok(v) = std::env::var("HDR_DETERMINISTIC") {
        cfg.deterministic = match v.as_str() {
            "1" | "true" => true,
            "0" | "false" => false,
            _ => return Err(Error::config("HDR_DETERMINISTIC", format!("expected 0 or 1, got {v:?}"))),
        };
    }
    if let Ok(v) = std::env::var("HDR_THREADS") {
        match v.parse::<usize>() {
            Ok(1) => {}
            Ok(n) if n > 1 => eprintln!("HDR_THREADS={n}: running single-threaded"),
            _ => return Err(Error::config("HDR_THREADS", format!("expected a positive integer, got {v:?}"))),
        }
    }
    Ok(())
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    env_overrides(&mut cfg)?;
    Ok(cfg)
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn simulate(config: &Path, height: Option<&Path>, ckpt: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let h = match (height, ckpt) {
        (Some(p), _) => {
            if !p.exists() {
                return Err(Error::data(p, "height map file not found"));
            }
            HeightMap::read(p, &cfg.optics)?
        }
        (None, Some(c)) => {
            let ck = checkpoint::load(c)?;
            if ck.state.mode != Mode::E2eDoe {
                return Err(Error::config("checkpoint", format!("{} checkpoint has no height map", ck.state.mode)));
            }
            let o = ck.state.optic.as_ref().expect("e2e_doe stores heights");
            let mut h = HeightMap::zeros(&cfg.optics);
            if o.len() != h.values.len() {
                return Err(Error::config("optics.sim_grid", "checkpoint height map does not match the grid"));
            }
            h.values = o.data().iter().map(|&v| v as f64).collect();
            h
        }
        (None, None) => HeightMap::zeros(&cfg.optics),
    };
    let psf = simulate_psf(&h, &cfg.optics)?;
    mkdir(out)?;
    psf.write(out, "psf")?;
    h.write(out, "height", cfg.optics.max_height()?)?;
    let report = out.join("energy.csv");
    let mut s = String::from("channel,wavelength_m,energy\n");
    for (c, e) in psf.energy.iter().enumerate() {
        s.push_str(&format!("{},{},{}\n", ["r", "g", "b"][c], cfg.optics.wavelengths_m[c], e));
    }
    std::fs::write(&report, &s).map_err(|e| Error::io(&report, e))?;
    print!("{s}");
    Ok(())
}

fn train(config: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let manifest = Manifest::load(&cfg.data.manifest)?;
    let data = Dataset::load(&manifest, Split::Train)?;
    let state = match resume {
        Some(p) => {
            let ck = checkpoint::load(p)?;
            if ck.manifest.config_sha256 != cfg.hash() {
                return Err(Error::config("<document>", format!("{} was written with a different config", p.display())));
            }
            Some(ck.state)
        }
        None => None,
    };
    mkdir(out)?;
    let cfg_copy = out.join("config.toml");
    std::fs::write(&cfg_copy, cfg.to_toml()).map_err(|e| Error::io(&cfg_copy, e))?;
    let res = run_training(&cfg, &data, Some(out), state, &mut |r, _| {
        if r.step % 50 == 0 {
            eprintln!("step {:>6} epoch {:>4} data {:.5} reg {:.5} lr {:.3e}", r.step, r.epoch, r.data_loss, r.reg_loss, r.lr);
        }
        Ok(())
    })?;
    println!("trained {} steps; checkpoint {}", res.state.step, out.join("final.ckpt").display());
    Ok(())
}

fn variant_arg(spec: &str) -> Result<(Option<String>, PathBuf)> {
    Ok(match spec.split_once('=') {
        Some((n, p)) if !n.is_empty() && !n.contains('/') => (Some(n.to_string()), PathBuf::from(p)),
        _ => (None, PathBuf::from(spec)),
    })
}

fn eval_cmd(config: &Path, ckpts: &[String], out: &Path, no_ldr: bool) -> Result<()> {
    let cfg = load_config(config)?;
    let manifest = Manifest::load(&cfg.data.manifest)?;
    let test = Dataset::load(&manifest, Split::Test)?;
    let mut variants = Vec::new();
    if !no_ldr {
        variants.push(Variant::raw_ldr());
    }
    for spec in ckpts {
        let (name, path) = variant_arg(spec)?;
        let ck = checkpoint::load(&path)?;
        let name = name.unwrap_or_else(|| ck.state.mode.to_string());
        if variants.iter().any(|v: &Variant| v.name == name) {
            return Err(Error::config("checkpoint", format!("duplicate variant name {name:?}; use NAME=PATH")));
        }
        variants.push(Variant::from_checkpoint(&name, &ck, Some(checkpoint::file_sha256(&path)?))?);
    }
    mkdir(out)?;
    let report = evaluate(&cfg, &variants, &test, Some(&out.join("previews")))?;
    report.write(out, "report")?;
    for a in &report.aggregates {
        let sat = a.psnr_sat_l.map_or("null".to_string(), |v| format!("{v:.3}"));
        println!("{:<20} psnr_l {:>8.3}  psnr_gamma {:>8.3}  sat_psnr_l {sat}", a.variant, a.psnr_l, a.psnr_gamma);
    }
    Ok(())
}

fn reconstruct(ckpt: &Path, input: &Path, out: &Path, previews: Option<&Path>) -> Result<()> {
    let Checkpoint { manifest, state } = checkpoint::load(ckpt)?;
    let format = Format::from_path(input).unwrap_or(Format::Pfm);
    let y = load_hdr(input, format)?;
    if y.data.iter().any(|&v| v > 1.0) {
        eprintln!("{}: values above 1 are outside the LDR range", input.display());
    }
    let x = decode(&manifest.config.net, &state.params, &y)?;
    data::save_hdr(out, &x)?;
    if let Some(dir) = previews {
        mkdir(dir)?;
        let stem = input.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
        write_preview_png(&y, 0.0, &dir.join(format!("{stem}_measurement_ev+0.png")))?;
        for s in &manifest.config.eval.preview_stops {
            write_preview_png(&x, *s, &dir.join(format!("{stem}_{}_ev{s:+}.png", state.mode)))?;
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn stats(config: &Path, split: &str, out: &Path, bins: usize) -> Result<()> {
    let cfg = load_config(config)?;
    let split: Split = split.parse().map_err(|e: String| Error::config("split", e))?;
    let manifest = Manifest::load(&cfg.data.manifest)?;
    let d = Dataset::load(&manifest, split)?;
    let mut normalized = Vec::new();
    for (id, img) in d.ids.iter().zip(&d.images) {
        let e = expose(img, cfg.data.target_fraction)?;
        if e.degenerate {
            eprintln!("{id}: exposure is degenerate");
        }
        normalized.push((id.clone(), e.image));
    }
    let h = saturation_histogram(normalized.iter().map(|(i, m)| (i.clone(), m)), 1e-4, 1e3, bins);
    mkdir(out)?;
    data::stats::write_histogram_csv(&h, out, "saturation")?;
    let outside = h.per_image.iter().filter(|(_, f)| !(0.01..=0.02).contains(f)).count();
    println!("{} images, {} pixels; {} outside [0.01, 0.02] saturated", h.per_image.len(), h.total(), outside);
    Ok(())
}

fn make_manifest(inputs: &[PathBuf], out: &Path, test_every: usize, tag: &str) -> Result<()> {
    if test_every == 0 {
        return Err(Error::config("test_every", "must be positive"));
    }
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let rd = std::fs::read_dir(p).map_err(|e| Error::io(p, e))?;
            for e in rd {
                let f = e.map_err(|e| Error::io(p, e))?.path();
                if Format::from_path(&f).is_some() {
                    files.push(f);
                }
            }
        } else {
            files.push(p.clone());
        }
    }
    files.sort();
    files.dedup();
    let mut m = Manifest::default();
    for (i, f) in files.into_iter().enumerate() {
        let format = Format::from_path(&f).ok_or_else(|| Error::data(&f, "unknown extension"))?;
        let path = std::fs::canonicalize(&f).map_err(|e| Error::io(&f, e))?;
        m.entries.push(ManifestEntry {
            path,
            format,
            split: if (i + 1) % test_every == 0 { Split::Test } else { Split::Train },
            tag: tag.to_string(),
        });
    }
    m.verify()?;
    m.save(out)?;
    println!("{} entries -> {}", m.entries.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::SimulatePsf {
            config,
            height,
            checkpoint,
            out,
        } => simulate(&config, height.as_deref(), checkpoint.as_deref(), &out),
        Cmd::Train { config, out, resume } => train(&config, &out, resume.as_deref()),
        Cmd::Evaluate {
            config,
            checkpoints,
            out,
            no_ldr_baseline,
        } => eval_cmd(&config, &checkpoints, &out, no_ldr_baseline),
        Cmd::Reconstruct {
            checkpoint,
            input,
            out,
            previews,
        } => reconstruct(&checkpoint, &input, &out, previews.as_deref()),
        Cmd::GenStarPsf {
            streaks,
            falloff,
            core_weight,
            size,
            out,
        } => {
            let psf = star_psf(streaks, falloff, core_weight, size)?;
            data::pfm::write_pfm(&out, &psf.to_image())?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Cmd::DatasetStats {
            config,
            split,
            out,
            bins,
        } => stats(&config, &split, &out, bins),
        Cmd::GenSynthetic {
            out,
            count,
            train,
            size,
            seed,
        } => {
            let spec = SyntheticSpec {
                size,
                ..SyntheticSpec::default()
            };
            let m = write_synthetic_corpus(&out, &spec, count, train.min(count), seed)?;
            println!("{} scenes -> {}", m.entries.len(), out.join("manifest.tsv").display());
            Ok(())
        }
        Cmd::MakeManifest {
            inputs,
            out,
            test_every,
            tag,
        } => make_manifest(&inputs, &out, test_every, &tag),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
