//! Rescale, crop, hue and saturation augmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Rec. 709 luma weights.
pub const LUMA: [f32; 3] = [0.2126, 0.7152, 0.0722];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSpec {
    pub scale_range: [f64; 2],
    pub hue_jitter_deg: f64,
    pub sat_range: [f64; 2],
    pub enable_scale: bool,
    pub enable_hue: bool,
    pub enable_sat: bool,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            scale_range: [1.0, 1.25],
            hue_jitter_deg: 18.0,
            sat_range: [0.8, 1.25],
            enable_scale: true,
            enable_hue: true,
            enable_sat: true,
        }
    }
}

impl AugmentSpec {
    pub fn identity() -> Self {
        Self {
            scale_range: [1.0, 1.0],
            hue_jitter_deg: 0.0,
            sat_range: [1.0, 1.0],
            enable_scale: false,
            enable_hue: false,
            enable_sat: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [a, b] = self.scale_range;
        if !(a > 0.0 && a <= b) {
            return Err(Error::config("data.augment.scale_range", "need 0 < lo <= hi"));
        }
        let [a, b] = self.sat_range;
        if !(a >= 0.0 && a <= b) {
            return Err(Error::config("data.augment.sat_range", "need 0 <= lo <= hi"));
        }
        if !(self.hue_jitter_deg >= 0.0) {
            return Err(Error::config("data.augment.hue_jitter_deg", "must be >= 0"));
        }
        Ok(())
    }
}

/// The concrete transform drawn for one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub scale: f64,
    pub crop_top: usize,
    pub crop_left: usize,
    pub hue_deg: f64,
    pub sat: f64,
}

impl AugmentParams {
    pub fn draw(spec: &AugmentSpec, h: usize, w: usize, crop: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = if spec.enable_scale {
            rng.random_range(spec.scale_range[0]..=spec.scale_range[1])
        } else {
            1.0
        };
        let (sh, sw) = scaled_dims(h, w, scale);
        if sh < crop || sw < crop {
            return Err(Error::Numeric(format!(
                "image {h}x{w} at scale {scale:.3} is smaller than the {crop} crop"
            )));
        }
        let crop_top = rng.random_range(0..=sh - crop);
        let crop_left = rng.random_range(0..=sw - crop);
        let hue_deg = if spec.enable_hue {
            rng.random_range(-spec.hue_jitter_deg..=spec.hue_jitter_deg)
        } else {
            0.0
        };
        let sat = if spec.enable_sat {
            rng.random_range(spec.sat_range[0]..=spec.sat_range[1])
        } else {
            1.0
        };
        Ok(Self {
            scale,
            crop_top,
            crop_left,
            hue_deg,
            sat,
        })
    }
}

fn scaled_dims(h: usize, w: usize, s: f64) -> (usize, usize) {
    ((h as f64 * s).round() as usize, (w as f64 * s).round() as usize)
}

/// Bilinear resize with pixel-center alignment.
pub fn rescale(img: &Image, s: f64) -> Image {
    if s == 1.0 {
        return img.clone();
    }
    let (oh, ow) = scaled_dims(img.height, img.width, s);
    let (sy, sx) = (img.height as f64 / oh as f64, img.width as f64 / ow as f64);
    let taps = |o: usize, ratio: f64, n: usize| {
        let p = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = p.floor() as usize;
        (i0, (i0 + 1).min(n - 1), (p - i0 as f64) as f32)
    };
    let mut out = Image::zeros(img.channels, oh, ow);
    for c in 0..img.channels {
        let src = img.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..oh {
            let (y0, y1, ty) = taps(y, sy, img.height);
            for x in 0..ow {
                let (x0, x1, tx) = taps(x, sx, img.width);
                let top = src[y0 * img.width + x0] * (1.0 - tx) + src[y0 * img.width + x1] * tx;
                let bot = src[y1 * img.width + x0] * (1.0 - tx) + src[y1 * img.width + x1] * tx;
                dst[y * ow + x] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    out
}

/// Rotates chroma `(R - Y, B - Y)` by `hue_deg` and scales it by `sat`,
/// keeping luma `Y` fixed; negative results clamp to 0.
pub fn hue_saturation(img: &Image, hue_deg: f64, sat: f64) -> Image {
    assert_eq!(img.channels, 3, "hue rotation needs RGB");
    let (s, c) = (hue_deg.to_radians().sin(), hue_deg.to_radians().cos());
    let n = img.pixels();
    let mut out = img.clone();
    for i in 0..n {
        let [r, g, b] = [0, 1, 2].map(|k| img.data[k * n + i] as f64);
        let y = LUMA[0] as f64 * r + LUMA[1] as f64 * g + LUMA[2] as f64 * b;
        let (cr, cb) = (r - y, b - y);
        let (cr2, cb2) = (sat * (c * cr - s * cb), sat * (s * cr + c * cb));
        let (r2, b2) = (y + cr2, y + cb2);
        let g2 = (y - LUMA[0] as f64 * r2 - LUMA[2] as f64 * b2) / LUMA[1] as f64;
        out.data[i] = r2.max(0.0) as f32;
        out.data[n + i] = g2.max(0.0) as f32;
        out.data[2 * n + i] = b2.max(0.0) as f32;
    }
    out
}

pub fn apply(img: &Image, p: &AugmentParams, crop: usize) -> Image {
    let scaled = rescale(img, p.scale);
    let cropped = scaled.crop(p.crop_top, p.crop_left, crop, crop);
    if p.hue_deg == 0.0 && p.sat == 1.0 {
        return cropped.map(|v| v.max(0.0));
    }
    hue_saturation(&cropped, p.hue_deg, p.sat)
}

/// Draws transform parameters from `seed` and applies them.
pub fn augment(img: &Image, spec: &AugmentSpec, crop: usize, seed: u64) -> Result<(Image, AugmentParams)> {
    let p = AugmentParams::draw(spec, img.height, img.width, crop, seed)?;
    Ok((apply(img, &p, crop), p))
}
