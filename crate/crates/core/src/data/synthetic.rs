//! Procedural HDR scenes: smooth colored texture plus bright emitters.
//!
//! Emitters are nearly flat-topped (20% falloff at the rim) so their peak
//! radiance cannot be inferred from the clipped LDR footprint alone; the
//! slight slope keeps pixel values distinct for exposure ranking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::image::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub size: usize,
    pub emitters: [usize; 2],
    pub radius_px: [f64; 2],
    pub amplitude: [f64; 2],
    pub background: [f64; 2],
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            size: 64,
            emitters: [3, 8],
            radius_px: [1.5, 4.0],
            amplitude: [2.0, 30.0],
            background: [0.05, 0.6],
        }
    }
}

/// Sum of a few random low-frequency cosines, rescaled to `[0, 1]`.
fn smooth_field(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n * n];
    for _ in 0..4 {
        let fx = rng.random_range(0.3..2.5) / n as f64;
        let fy = rng.random_range(0.3..2.5) / n as f64;
        let ph = rng.random_range(0.0..std::f64::consts::TAU);
        let a = rng.random_range(0.3..1.0);
        for y in 0..n {
            for x in 0..n {
                v[y * n + x] += a * (std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) + ph).cos();
            }
        }
    }
    let (lo, hi) = v.iter().fold((f64::MAX, f64::MIN), |(l, h), &x| (l.min(x), h.max(x)));
    v.iter().map(|x| (x - lo) / (hi - lo).max(1e-12)).collect()
}

pub fn synthetic_scene(spec: &SyntheticSpec, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.size;
    let [blo, bhi] = spec.background;
    let mut img = Image::zeros(3, n, n);
    let base = smooth_field(&mut rng, n);
    for c in 0..3 {
        let tint = smooth_field(&mut rng, n);
        let p = img.plane_mut(c);
        for i in 0..n * n {
            let t = 0.6 * base[i] + 0.4 * tint[i];
            p[i] = (blo + (bhi - blo) * t) as f32;
        }
    }
    let count = rng.random_range(spec.emitters[0]..=spec.emitters[1]);
    for _ in 0..count {
        let r = rng.random_range(spec.radius_px[0]..=spec.radius_px[1]);
        let cy = rng.random_range(0.0..n as f64);
        let cx = rng.random_range(0.0..n as f64);
        let (la, ha) = (spec.amplitude[0].ln(), spec.amplitude[1].ln());
        let amp = rng.random_range(la..=ha).exp();
        let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.6..=1.0));
        let disc = rng.random_bool(0.5);
        for y in 0..n {
            for x in 0..n {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let rho2 = if disc {
                    (dy * dy + dx * dx) / (r * r)
                } else {
                    (dy / r).powi(2).max((dx / (0.6 * r)).powi(2))
                };
                if rho2 <= 1.0 {
                    let a = amp * (1.0 - 0.2 * rho2);
                    for (c, k) in color.iter().enumerate() {
                        img.data[(c * n + y) * n + x] += (a * k) as f32;
                    }
                }
            }
        }
    }
    img
}
