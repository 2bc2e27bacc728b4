//! Sensor image formation `y = clip01(h * x + η)` and exposure normalization.

use std::rc::Rc;

use hdr_tensor::{ConvAlgo, Graph, PadMode, Padding, Scalar, Separable, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    Reflect,
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorConfig {
    /// Read-noise standard deviation in normalized sensor units.
    pub noise_sigma: f64,
    pub seed: u64,
    pub boundary: Boundary,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.01,
            seed: 0,
            boundary: Boundary::Reflect,
        }
    }
}

impl SensorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("sensor.noise_sigma", "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Convolves every `(H, W)` plane of `x (B, C, H, W)` with the matching
/// channel of `psf (C, K, K)`; same-size output.
///
/// The forward pass runs through the FFT. The PSF is flipped (convolution,
/// not correlation) and spread onto a block-diagonal `(C, C, K, K)` kernel;
/// the backward pass of that layer is direct, so pixels whose whole
/// footprint receives no upstream gradient get exactly zero.
pub fn convolve_psf<T: Scalar>(g: &mut Graph<T>, x: Var, psf: Var, boundary: Boundary) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    let ks = g.shape(psf).to_vec();
    if xs.len() != 4 || ks.len() != 3 || ks[0] != xs[1] || ks[1] != ks[2] {
        return Err(hdr_tensor::TensorError::ShapeMismatch {
            op: "convolve_psf",
            lhs: xs,
            rhs: ks,
        }
        .into());
    }
    let (c, h, w, k) = (xs[1], xs[2], xs[3], ks[1]);
    if k > h || k > w {
        return Err(hdr_tensor::TensorError::Contract {
            op: "convolve_psf",
            msg: format!("{k}x{k} kernel is larger than the {h}x{w} image"),
        }
        .into());
    }
    let r = k / 2;
    let mode = match boundary {
        Boundary::Reflect => PadMode::Reflect,
        Boundary::Zero => PadMode::Zero,
    };
    let anti: Vec<T> = (0..k * k).map(|i| if i / k + i % k == k - 1 { T::one() } else { T::zero() }).collect();
    let flip = Rc::new(Separable::new(anti.clone(), anti, (k, k), (k, k))?);
    let flipped = g.resample2d(psf, flip)?;
    let per_out = g.reshape(flipped, &[c, 1, k, k])?;
    let eye = g.constant(Tensor::from_fn(vec![c, c, 1, 1], |i| if i / c == i % c { T::one() } else { T::zero() }));
    let kernel = g.mul(per_out, eye)?;
    let xp = g.pad2d(x, [r, r, r, r], mode)?;
    Ok(g.conv2d_with(xp, kernel, None, 1, Padding::Valid, ConvAlgo::Fft)?)
}

/// Zero-mean Gaussian draw of the given shape.
pub fn gaussian_noise<T: Scalar>(shape: &[usize], sigma: f64, seed: u64) -> Tensor<T> {
    if sigma == 0.0 {
        return Tensor::zeros(shape.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    Tensor::from_fn(shape.to_vec(), |_| T::of_f64(normal.sample(&mut rng)))
}

/// `clip01(h * x + η)`; the noise enters as a constant.
pub fn capture<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    psf: Var,
    boundary: Boundary,
    noise: Option<Tensor<T>>,
) -> Result<Var> {
    let blurred = convolve_psf(g, x, psf, boundary)?;
    let y = match noise {
        Some(n) => {
            let n = g.constant(n);
            g.add(blurred, n)?
        }
        None => blurred,
    };
    Ok(g.clip01(y)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Exposure {
    pub image: Image,
    /// Multiplier applied to the raw image.
    pub scale: f64,
    pub target_fraction: f64,
    pub achieved_fraction: f64,
    /// The requested fraction could not be realized within one pixel.
    pub degenerate: bool,
}

/// Scales `raw` so that the fraction of pixels whose channel maximum is at
/// least 1 matches `target_fraction`.
pub fn expose(raw: &Image, target_fraction: f64) -> Result<Exposure> {
    if !(0.0..=1.0).contains(&target_fraction) {
        return Err(Error::config("train.target_fraction", format!("{target_fraction} is not a fraction")));
    }
    if raw.data.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Numeric("expose: raw image must be finite and nonnegative".into()));
    }
    let n = raw.pixels();
    let cmax = raw.channel_max();
    let mut sorted = cmax.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let t = ((target_fraction * n as f64).round() as usize).clamp(1, n);
    let v = sorted[t - 1];
    if v <= 0.0 {
        return Ok(Exposure {
            image: raw.clone(),
            scale: 1.0,
            target_fraction,
            achieved_fraction: cmax.iter().filter(|&&m| m >= 1.0).count() as f64 / n as f64,
            degenerate: true,
        });
    }
    // dividing by the order statistic maps it to exactly 1.0
    let image = raw.map(|x| x / v);
    let achieved = image.channel_max().iter().filter(|&&m| m >= 1.0).count();
    Ok(Exposure {
        image,
        scale: 1.0 / v as f64,
        target_fraction,
        achieved_fraction: achieved as f64 / n as f64,
        degenerate: achieved.abs_diff(t) > 1,
    })
}

/// Fraction of pixels with channel max `>= 1`.
pub fn saturated_fraction(img: &Image) -> f64 {
    let m = img.channel_max();
    m.iter().filter(|&&v| v >= 1.0).count() as f64 / m.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expose_hits_the_order_statistic() {
        let vals: Vec<f32> = (1..=100).map(|i| i as f32 / 100.0).collect();
        let img = Image::new(1, 10, 10, vals);
        let e = expose(&img, 0.02).unwrap();
        assert_eq!(e.image.data.iter().filter(|&&v| v >= 1.0).count(), 2);
        assert!((e.scale - 1.0 / 0.99).abs() < 1e-6);
        assert!(!e.degenerate);
    }

    #[test]
    fn expose_flags_constant_images() {
        let img = Image::new(3, 4, 4, vec![0.3; 48]);
        assert!(expose(&img, 0.015).unwrap().degenerate);
        let black = Image::zeros(3, 4, 4);
        assert!(expose(&black, 0.015).unwrap().degenerate);
    }

    #[test]
    fn noise_is_seeded() {
        let a = gaussian_noise::<f32>(&[2, 3], 0.1, 7);
        let b = gaussian_noise::<f32>(&[2, 3], 0.1, 7);
        let c = gaussian_noise::<f32>(&[2, 3], 0.1, 8);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
