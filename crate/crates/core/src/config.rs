//! Run configuration: TOML with `desk` and `paper` presets.
//!
//! A config file names a preset and overrides any subset of its keys; the
//! merged document is then checked field by field, so errors carry the full
//! key path (`train.mode`, `optics.sim_pitch_m`, ...).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::AugmentSpec;
use crate::decoder::UNetConfig;
use crate::error::{Error, Result};
use crate::optics::{OpticsConfig, RefractiveIndex};
use crate::sensor::{Boundary, SensorConfig};
use crate::training::{AdamConfig, Mode, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Desk,
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Relative paths resolve against the config file's directory.
    pub manifest: PathBuf,
    pub crop_size: usize,
    /// Fraction of saturated pixels each exposure targets.
    pub target_fraction: f64,
    pub augment: AugmentSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub peak: f64,
    /// Ground truth is clipped to this before metrics.
    pub hdr_cap: f64,
    pub seed: u64,
    pub previews: bool,
    /// EV offsets for reconstruction previews; the measurement is shown at 0 EV.
    pub preview_stops: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            peak: 1.0,
            hdr_cap: 64.0,
            seed: 1234,
            previews: true,
            preview_stops: vec![-1.0, -3.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub deterministic: bool,
    pub optics: OpticsConfig,
    pub sensor: SensorConfig,
    pub net: UNetConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

const WAVELENGTHS: [f64; 3] = [640e-9, 550e-9, 460e-9];

impl RunConfig {
    /// Desk scale: 128-sample optics grid, 64x64 crops, width-16 U-Net.
    pub fn desk() -> Self {
        Self {
            preset: Preset::Desk,
            deterministic: true,
            optics: OpticsConfig {
                wavelengths_m: WAVELENGTHS,
                refractive_index: RefractiveIndex::default(),
                doe_aperture_m: 0.55e-3,
                lens_aperture_m: 0.5e-3,
                focal_length_m: 10e-3,
                doe_to_lens_m: 1e-3,
                lens_to_sensor_m: 10e-3,
                sim_grid: 128,
                sim_pitch_m: 8e-6,
                sensor_pitch_m: 16e-6,
                max_height_m: None,
                psf_crop: 21,
            },
            sensor: SensorConfig {
                noise_sigma: 0.005,
                seed: 0,
                boundary: Boundary::Reflect,
            },
            net: UNetConfig {
                zero_init_head: true,
                ..UNetConfig::default()
            },
            train: TrainConfig {
                mode: Mode::E2eDoe,
                batch_size: 8,
                lr_init: 1e-3,
                lr_decay: 0.995,
                epochs: 500,
                max_steps: Some(3000),
                gamma: 0.5,
                epsilon: 1e-3,
                nu: 1e9,
                adam: AdamConfig::default(),
                seed: 0,
                height_lr_scale: 1e-4,
                height_init_fraction: 0.25,
                checkpoint_every: 500,
                psf_path: None,
                warm_start: None,
            },
            data: DataConfig {
                manifest: PathBuf::from("data/manifest.tsv"),
                crop_size: 64,
                target_fraction: 0.015,
                augment: AugmentSpec::default(),
            },
            eval: EvalConfig::default(),
        }
    }

    /// Full-scale hyperparameters: batch 8, lr 1e-4, 100 epochs, gamma 1/2,
    /// nu 1e9, 320x320 crops, width 64, 5 scales.
    pub fn paper() -> Self {
        let mut c = Self::desk();
        c.preset = Preset::Paper;
        c.optics = OpticsConfig {
            wavelengths_m: WAVELENGTHS,
            refractive_index: RefractiveIndex::default(),
            doe_aperture_m: 5e-3,
            lens_aperture_m: 5e-3,
            focal_length_m: 35e-3,
            doe_to_lens_m: 10e-3,
            lens_to_sensor_m: 35e-3,
            sim_grid: 2048,
            sim_pitch_m: 3e-6,
            sensor_pitch_m: 4.3e-6,
            max_height_m: None,
            psf_crop: 101,
        };
        c.sensor.noise_sigma = 0.01;
        c.net = UNetConfig {
            scales: 5,
            base_width: 64,
            zero_init_head: false,
            ..UNetConfig::default()
        };
        c.train.batch_size = 8;
        c.train.lr_init = 1e-4;
        c.train.lr_decay = 0.97;
        c.train.epochs = 100;
        c.train.max_steps = None;
        c.train.gamma = 0.5;
        c.train.nu = 1e9;
        c.train.height_lr_scale = 1.0;
        c.train.checkpoint_every = 5000;
        c.data.crop_size = 320;
        c
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self::desk(),
            Preset::Paper => Self::paper(),
        }
    }

    /// Parses TOML text: preset defaults overlaid with the document's keys.
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("<document>", e.to_string()))?;
        let preset = match user.get("preset") {
            None => Preset::Desk,
            Some(v) => Preset::deserialize(v.clone()).map_err(|e| Error::config("preset", e.to_string()))?,
        };
        let mut merged = match toml::Value::try_from(Self::preset(preset)) {
            Ok(toml::Value::Table(t)) => t,
            _ => unreachable!("presets serialize to tables"),
        };
        merge(&mut merged, user);
        let cfg: Self = serde_path_to_error::deserialize(toml::Value::Table(merged)).map_err(|e| {
            let key = e.path().to_string();
            Error::config(key, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; relative paths inside resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let abs = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        abs(&mut cfg.data.manifest);
        if let Some(p) = cfg.train.psf_path.as_mut() {
            abs(p);
        }
        if let Some(p) = cfg.train.warm_start.as_mut() {
            abs(p);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML serialization.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.optics.validate()?;
        self.sensor.validate()?;
        self.net.validate()?;
        self.train.validate()?;
        self.data.augment.validate()?;
        let crop = self.data.crop_size;
        if crop == 0 || crop % self.net.divisor() != 0 {
            return Err(Error::config(
                "data.crop_size",
                format!("{crop} is not divisible by 2^(scales-1) = {}", self.net.divisor()),
            ));
        }
        if self.optics.psf_crop > crop {
            return Err(Error::config(
                "optics.psf_crop",
                format!("{} exceeds the {crop} pixel crop", self.optics.psf_crop),
            ));
        }
        if !(0.01..=0.02).contains(&self.data.target_fraction) {
            return Err(Error::config("data.target_fraction", "must lie in [0.01, 0.02]"));
        }
        match (self.train.mode, &self.train.psf_path) {
            (Mode::FixedPsf, None) => {
                return Err(Error::config("train.psf_path", "fixed_psf mode needs a PSF file"));
            }
            (m, Some(_)) if m != Mode::FixedPsf => {
                return Err(Error::config("train.psf_path", format!("only used in fixed_psf mode, not {m}")));
            }
            _ => {}
        }
        if !(self.eval.peak > 0.0) || !(self.eval.hdr_cap > 0.0) {
            return Err(Error::config("eval.peak", "peak and hdr_cap must be positive"));
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
