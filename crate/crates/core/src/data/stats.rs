//! Log-spaced value histogram and per-image saturation fractions.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::sensor::saturated_fraction;

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    /// `bins + 1` edges; bin 0 also takes values below the first edge and
    /// the last bin values above the last.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub per_image: Vec<(String, f64)>,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Histogram of per-pixel channel maxima over `[lo, hi]` with `bins`
/// log-spaced bins.
pub fn saturation_histogram<'a>(
    images: impl IntoIterator<Item = (String, &'a Image)>,
    lo: f64,
    hi: f64,
    bins: usize,
) -> Histogram {
    assert!(lo > 0.0 && hi > lo && bins > 0);
    let (llo, lhi) = (lo.ln(), hi.ln());
    let step = (lhi - llo) / bins as f64;
    let edges = (0..=bins).map(|i| (llo + step * i as f64).exp()).collect();
    let mut counts = vec![0u64; bins];
    let mut per_image = Vec::new();
    for (id, img) in images {
        for v in img.channel_max() {
            let b = if v as f64 <= lo {
                0
            } else {
                (((v as f64).ln() - llo) / step).floor().clamp(0.0, (bins - 1) as f64) as usize
            };
            counts[b] += 1;
        }
        per_image.push((id, saturated_fraction(img)));
    }
    Histogram {
        edges,
        counts,
        per_image,
    }
}

#[derive(Serialize)]
struct BinRow {
    lo: f64,
    hi: f64,
    count: u64,
}

#[derive(Serialize)]
struct ImageRow<'a> {
    id: &'a str,
    saturated_fraction: f64,
}

/// Writes `{stem}_hist.csv` and `{stem}_images.csv`.
pub fn write_histogram_csv(h: &Histogram, dir: &Path, stem: &str) -> Result<()> {
    let hist = dir.join(format!("{stem}_hist.csv"));
    let mut w = csv::Writer::from_path(&hist).map_err(|e| Error::data(&hist, e.to_string()))?;
    for (i, &count) in h.counts.iter().enumerate() {
        w.serialize(BinRow {
            lo: h.edges[i],
            hi: h.edges[i + 1],
            count,
        })
        .map_err(|e| Error::data(&hist, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&hist, e))?;
    let imgs = dir.join(format!("{stem}_images.csv"));
    let mut w = csv::Writer::from_path(&imgs).map_err(|e| Error::data(&imgs, e.to_string()))?;
    for (id, f) in &h.per_image {
        w.serialize(ImageRow {
            id,
            saturated_fraction: *f,
        })
        .map_err(|e| Error::data(&imgs, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&imgs, e))
}
