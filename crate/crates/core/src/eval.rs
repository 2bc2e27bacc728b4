//! PSNR metrics, variant evaluation and report files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use hdr_tensor::{Graph, PadMode, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{derive_seed, Dataset};
use crate::decoder::{unet_forward, UNetConfig, UNetParams};
use crate::error::{Error, Result};
use crate::image::{write_preview_png, Image};
use crate::sensor::{expose, gaussian_noise};
use crate::training::{measure, OpticsContext};

/// Returned for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Linear,
    /// Both images pass through `v^(1/2)` first.
    Gamma,
}

fn to_domain(v: f64, d: Domain) -> f64 {
    match d {
        Domain::Linear => v,
        Domain::Gamma => v.max(0.0).sqrt(),
    }
}

fn psnr_from_sse(sse: f64, n: usize, peak: f64) -> f64 {
    let mse = sse / n as f64;
    if mse == 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB)
}

/// `10 log10(peak² / MSE)` over every element, capped at [`PSNR_CAP_DB`].
pub fn psnr(x: &[f32], xhat: &[f32], domain: Domain, peak: f64) -> f64 {
    assert_eq!(x.len(), xhat.len(), "psnr operands differ in size");
    let sse: f64 = x
        .iter()
        .zip(xhat)
        .map(|(&a, &b)| (to_domain(a as f64, domain) - to_domain(b as f64, domain)).powi(2))
        .sum();
    psnr_from_sse(sse, x.len(), peak)
}

/// PSNR over the pixels (all channels) where `mask` is set; `None` if empty.
pub fn psnr_masked(x: &Image, xhat: &Image, mask: &[bool], domain: Domain, peak: f64) -> Option<f64> {
    let n = x.pixels();
    assert_eq!(mask.len(), n);
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return None;
    }
    let mut sse = 0.0;
    for c in 0..x.channels {
        for i in (0..n).filter(|&i| mask[i]) {
            let a = to_domain(x.data[c * n + i] as f64, domain);
            let b = to_domain(xhat.data[c * n + i] as f64, domain);
            sse += (a - b).powi(2);
        }
    }
    Some(psnr_from_sse(sse, count * x.channels, peak))
}

/// Pixels where any channel of the LDR reference reached 1.
pub fn saturated_mask(ldr_reference: &Image) -> Vec<bool> {
    ldr_reference.channel_max().iter().map(|&v| v >= 1.0).collect()
}

pub fn saturated_region_psnr(x: &Image, xhat: &Image, ldr_reference: &Image, peak: f64) -> Option<f64> {
    psnr_masked(x, xhat, &saturated_mask(ldr_reference), Domain::Linear, peak)
}

/// A capture PSF plus an optional decoder.
#[derive(Clone, Debug)]
pub struct Variant {
    pub name: String,
    /// `(3, K, K)`; `None` is the delta PSF.
    pub psf: Option<Tensor<f32>>,
    pub net: Option<(UNetConfig, UNetParams<f32>)>,
    pub checkpoint_sha256: Option<String>,
}

impl Variant {
    /// The clipped measurement itself, with no decoding.
    pub fn raw_ldr() -> Self {
        Self {
            name: "ldr".into(),
            psf: None,
            net: None,
            checkpoint_sha256: None,
        }
    }

    pub fn from_checkpoint(name: &str, ck: &Checkpoint, sha256: Option<String>) -> Result<Self> {
        let cfg = &ck.manifest.config;
        let psf = OpticsContext::new(cfg)?.psf_tensor(&ck.state)?;
        Ok(Self {
            name: name.to_string(),
            psf,
            net: Some((cfg.net.clone(), ck.state.params.clone())),
            checkpoint_sha256: sha256,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub variant: String,
    pub id: String,
    pub psnr_l: f64,
    pub psnr_gamma: f64,
    pub psnr_sat_l: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub variant: String,
    pub images: usize,
    pub psnr_l: f64,
    pub psnr_gamma: f64,
    /// Mean over images with a non-empty saturated mask.
    pub psnr_sat_l: Option<f64>,
    pub sat_images: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub config_sha256: String,
    pub seed: u64,
    pub checkpoints: Vec<(String, String)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<ImageMetrics>,
    pub aggregates: Vec<Aggregate>,
    pub meta: ReportMeta,
}

impl MetricsReport {
    pub fn aggregate(&self, variant: &str) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.variant == variant)
    }

    /// Writes `{stem}.csv` (per image), `{stem}_summary.csv` and `{stem}_meta.toml`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
        let per = dir.join(format!("{stem}.csv"));
        let sum = dir.join(format!("{stem}_summary.csv"));
        let meta = dir.join(format!("{stem}_meta.toml"));
        write_csv(&per, &self.rows)?;
        write_csv(&sum, &self.aggregates)?;
        let mut t = format!("config_sha256 = \"{}\"\nseed = {}\n", self.meta.config_sha256, self.meta.seed);
        for (v, h) in &self.meta.checkpoints {
            let _ = writeln!(t, "[checkpoints.{v}]\nsha256 = \"{h}\"");
        }
        std::fs::write(&meta, t).map_err(|e| Error::io(&meta, e))?;
        Ok(vec![per, sum, meta])
    }
}

fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::data(path, e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::data(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Runs the variant on one linear measurement-space scene `x (3, H, W)`.
/// Returns `(measurement, reconstruction)`.
pub fn reconstruct_scene(cfg: &RunConfig, v: &Variant, x: &Image, noise_seed: u64) -> Result<(Image, Image)> {
    let mut g = Graph::<f32>::new();
    let (h, w) = (x.height, x.width);
    let xt = Tensor::new(vec![1, 3, h, w], x.data.clone())?;
    let xv = g.constant(xt);
    let psf = v.psf.clone().map(|p| g.constant(p));
    let noise = (cfg.sensor.noise_sigma > 0.0).then(|| gaussian_noise(&[1, 3, h, w], cfg.sensor.noise_sigma, noise_seed));
    let y = measure(&mut g, xv, psf, cfg, noise)?;
    let meas = Image::new(3, h, w, g.real(y).to_vec());
    let rec = match &v.net {
        None => meas.clone(),
        Some((ncfg, params)) => decode(ncfg, params, &meas)?,
    };
    Ok((meas, rec))
}

/// Decoder inference on a single `(3, H, W)` image; sizes the network cannot
/// take are reflect-padded on the bottom/right and cropped back.
pub fn decode(ncfg: &UNetConfig, params: &UNetParams<f32>, y: &Image) -> Result<Image> {
    let mut g = Graph::<f32>::new();
    let (h, w) = (y.height, y.width);
    let d = ncfg.divisor();
    let (ph, pw) = (h.div_ceil(d) * d - h, w.div_ceil(d) * d - w);
    let mut yv = g.constant(Tensor::new(vec![1, y.channels, h, w], y.data.clone())?);
    if ph > 0 || pw > 0 {
        if ph >= h || pw >= w {
            return Err(Error::Numeric(format!("{h}x{w} image is too small to pad to a multiple of {d}")));
        }
        eprintln!("padding {h}x{w} input by ({ph}, {pw}) to fit the decoder");
        yv = g.pad2d(yv, [0, ph, 0, pw], PadMode::Reflect)?;
    }
    let leaves = params.leaves(&mut g, false);
    let mut stats = params.stats.clone();
    let out = unet_forward(&mut g, ncfg, yv, &leaves, &mut stats, false)?;
    let out = if ph > 0 || pw > 0 { g.crop2d(out, 0, 0, h, w)? } else { out };
    let img = Image::new(y.channels, h, w, g.real(out).to_vec());
    if !img.is_finite() {
        return Err(Error::Numeric("decoder produced non-finite values".into()));
    }
    Ok(img)
}

/// Evaluates every variant on the test split with shared exposures and
/// noise. The saturated region of each image is taken from the
/// conventional (delta-PSF, noise-free) capture so all variants are scored
/// on the same pixels.
pub fn evaluate(cfg: &RunConfig, variants: &[Variant], test: &Dataset, preview_dir: Option<&Path>) -> Result<MetricsReport> {
    if test.is_empty() {
        return Err(Error::data(&cfg.data.manifest, "test split is empty"));
    }
    let e = &cfg.eval;
    let mut rows = Vec::new();
    for (i, (id, src)) in test.ids.iter().zip(&test.images).enumerate() {
        let exp = expose(src, cfg.data.target_fraction)?;
        if exp.degenerate {
            eprintln!("{id}: exposure is degenerate (achieved {:.4})", exp.achieved_fraction);
        }
        let x = &exp.image;
        let gt = x.map(|v| v.min(e.hdr_cap as f32));
        let reference = x.map(|v| v.clamp(0.0, 1.0));
        let mask = saturated_mask(&reference);
        let noise_seed = derive_seed(e.seed, &[i as u64]);
        for v in variants {
            let (meas, rec) = reconstruct_scene(cfg, v, x, noise_seed)?;
            rows.push(ImageMetrics {
                variant: v.name.clone(),
                id: id.clone(),
                psnr_l: psnr(&gt.data, &rec.data, Domain::Linear, e.peak),
                psnr_gamma: psnr(&gt.data, &rec.data, Domain::Gamma, e.peak),
                psnr_sat_l: psnr_masked(&gt, &rec, &mask, Domain::Linear, e.peak),
            });
            if let (Some(dir), true) = (preview_dir, e.previews) {
                std::fs::create_dir_all(dir).map_err(|err| Error::io(dir, err))?;
                write_preview_png(&meas, 0.0, &dir.join(format!("{id}_{}-measurement_ev+0.png", v.name)))?;
                for &s in &e.preview_stops {
                    write_preview_png(&rec, s, &dir.join(format!("{id}_{}_ev{s:+}.png", v.name)))?;
                }
            }
        }
    }
    let aggregates = variants
        .iter()
        .map(|v| {
            let r: Vec<&ImageMetrics> = rows.iter().filter(|r| r.variant == v.name).collect();
            let sat: Vec<f64> = r.iter().filter_map(|r| r.psnr_sat_l).collect();
            Aggregate {
                variant: v.name.clone(),
                images: r.len(),
                psnr_l: mean(r.iter().map(|r| r.psnr_l)).unwrap_or(f64::NAN),
                psnr_gamma: mean(r.iter().map(|r| r.psnr_gamma)).unwrap_or(f64::NAN),
                psnr_sat_l: mean(sat.iter().copied()),
                sat_images: sat.len(),
            }
        })
        .collect();
    Ok(MetricsReport {
        rows,
        aggregates,
        meta: ReportMeta {
            config_sha256: cfg.hash(),
            seed: e.seed,
            checkpoints: variants
                .iter()
                .filter_map(|v| v.checkpoint_sha256.clone().map(|h| (v.name.clone(), h)))
                .collect(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_hand_values() {
        let x = vec![0.5f32; 16];
        assert_eq!(psnr(&x, &x, Domain::Linear, 1.0), PSNR_CAP_DB);
        let y: Vec<f32> = x.iter().map(|v| v + 0.1).collect();
        assert!((psnr(&x, &y, Domain::Linear, 1.0) - 20.0).abs() < 1e-5);
        let g = psnr(&[1.0], &[0.25], Domain::Gamma, 1.0);
        assert!((g - 20.0 * 2f64.log10()).abs() < 1e-9, "{g}");
    }

    #[test]
    fn masked_psnr_conventions() {
        let x = Image::new(1, 1, 4, vec![0.0, 1.0, 2.0, 3.0]);
        let xh = Image::new(1, 1, 4, vec![0.0, 1.5, 2.0, 2.0]);
        assert_eq!(psnr_masked(&x, &xh, &[false; 4], Domain::Linear, 1.0), None);
        let full = psnr_masked(&x, &xh, &[true; 4], Domain::Linear, 1.0).unwrap();
        assert!((full - psnr(&x.data, &xh.data, Domain::Linear, 1.0)).abs() < 1e-12);
        // pixels 1 and 3: residuals 0.5 and 1 -> MSE 0.625
        let two = psnr_masked(&x, &xh, &[false, true, false, true], Domain::Linear, 1.0).unwrap();
        assert!((two - 10.0 * (1.0f64 / 0.625).log10()).abs() < 1e-12);
    }

    #[test]
    fn saturated_region_uses_the_reference_clip() {
        let x = Image::new(1, 1, 3, vec![0.2, 4.0, 1.0]);
        let reference = x.map(|v| v.clamp(0.0, 1.0));
        let xh = Image::new(1, 1, 3, vec![0.2, 3.0, 1.0]);
        let p = saturated_region_psnr(&x, &xh, &reference, 1.0).unwrap();
        assert!((p - 10.0 * (2.0f64).log10()).abs() < 1e-12);
    }
}
