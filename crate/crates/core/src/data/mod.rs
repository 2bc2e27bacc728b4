//! HDR ingestion, augmentation and exposure-normalized training pairs.

pub mod augment;
pub mod manifest;
pub mod pfm;
pub mod rgbe;
pub mod stats;
pub mod synthetic;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use augment::{augment, AugmentParams, AugmentSpec};
pub use manifest::{Format, Manifest, ManifestEntry, Split};
pub use stats::{saturation_histogram, Histogram};
pub use synthetic::{synthetic_scene, SyntheticSpec};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::sensor::expose;

pub fn load_hdr(path: &Path, format: Format) -> Result<Image> {
    let img = match format {
        Format::Pfm => pfm::read_pfm(path)?,
        Format::Rgbe => rgbe::read_rgbe(path)?,
    };
    if img.channels != 3 {
        return Err(Error::data(path, format!("expected RGB, found {} channel(s)", img.channels)));
    }
    if img.data.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::data(path, "contains negative or non-finite radiance"));
    }
    Ok(img)
}

pub fn save_hdr(path: &Path, img: &Image) -> Result<()> {
    match Format::from_path(path) {
        Some(Format::Rgbe) => rgbe::write_rgbe(path, img),
        _ => pfm::write_pfm(path, img),
    }
}

/// Mixes a base seed with stream indices (splitmix64 finalizer per word).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    parts.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

/// Everything needed to regenerate a sample from its source image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub source: String,
    pub crop_top: usize,
    pub crop_left: usize,
    pub scale: f64,
    pub hue_deg: f64,
    pub sat: f64,
    pub target_fraction: f64,
    pub achieved_fraction: f64,
    pub exposure: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    /// Exposure-normalized ground truth.
    pub x: Image,
    pub meta: SampleMeta,
}

/// Exposes an augmented image to `fraction` saturated pixels. Returns
/// `Ok(None)` when the exposure is degenerate and the sample must be dropped.
pub fn make_pair(x_aug: &Image, fraction: f64, params: &AugmentParams, source: &str, seed: u64) -> Result<Option<SamplePair>> {
    if !(0.01..=0.02).contains(&fraction) {
        return Err(Error::config(
            "train.target_fraction",
            format!("{fraction} is outside [0.01, 0.02]"),
        ));
    }
    let e = expose(x_aug, fraction)?;
    if e.degenerate {
        return Ok(None);
    }
    Ok(Some(SamplePair {
        x: e.image,
        meta: SampleMeta {
            source: source.to_string(),
            crop_top: params.crop_top,
            crop_left: params.crop_left,
            scale: params.scale,
            hue_deg: params.hue_deg,
            sat: params.sat,
            target_fraction: fraction,
            achieved_fraction: e.achieved_fraction,
            exposure: e.scale,
            seed,
        },
    }))
}

/// Augments then exposes; `Ok(None)` for samples that must be skipped.
pub fn sample(src: &Image, id: &str, spec: &AugmentSpec, crop: usize, fraction: f64, seed: u64) -> Result<Option<SamplePair>> {
    let (x, p) = match augment(src, spec, crop, seed) {
        Ok(v) => v,
        Err(Error::Numeric(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    make_pair(&x, fraction, &p, id, seed)
}

/// Rebuilds a sample exactly from its logged metadata.
pub fn replay(src: &Image, meta: &SampleMeta, crop: usize) -> Result<Option<SamplePair>> {
    let p = AugmentParams {
        scale: meta.scale,
        crop_top: meta.crop_top,
        crop_left: meta.crop_left,
        hue_deg: meta.hue_deg,
        sat: meta.sat,
    };
    make_pair(&augment::apply(src, &p, crop), meta.target_fraction, &p, &meta.source, meta.seed)
}

pub fn write_sample_log(path: &Path, metas: &[SampleMeta]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .delimiter(b'\t')
        .from_path(path)
        .map_err(|e| Error::data(path, e.to_string()))?;
    for m in metas {
        w.serialize(m).map_err(|e| Error::data(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_sample_log(path: &Path) -> Result<Vec<SampleMeta>> {
    let mut r = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .from_path(path)
        .map_err(|e| Error::data(path, e.to_string()))?;
    r.deserialize()
        .map(|m| m.map_err(|e| Error::data(path, e.to_string())))
        .collect()
}

/// Source images of one split, decoded into memory.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub paths: Vec<PathBuf>,
    pub images: Vec<Image>,
}

impl Dataset {
    pub fn load(manifest: &Manifest, split: Split) -> Result<Self> {
        let mut d = Dataset::default();
        for e in manifest.split(split) {
            let id = e
                .path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| e.path.display().to_string());
            d.images.push(load_hdr(&e.path, e.format)?);
            d.ids.push(id);
            d.paths.push(e.path.clone());
        }
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Writes `count` synthetic scenes as PFM plus a manifest whose first
/// `train` entries are the training split and the rest the test split.
pub fn write_synthetic_corpus(dir: &Path, spec: &SyntheticSpec, count: usize, train: usize, seed: u64) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut m = Manifest::default();
    for i in 0..count {
        let path = dir.join(format!("scene_{i:04}.pfm"));
        pfm::write_pfm(&path, &synthetic_scene(spec, derive_seed(seed, &[i as u64])))?;
        m.entries.push(ManifestEntry {
            path,
            format: Format::Pfm,
            split: if i < train { Split::Train } else { Split::Test },
            tag: "synthetic".into(),
        });
    }
    m.save(&dir.join("manifest.tsv"))?;
    Ok(m)
}
