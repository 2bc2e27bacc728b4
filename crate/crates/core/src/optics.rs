//! Fourier-optics model of a DOE in front of a thin lens.
//!
//! A unit plane wave passes the DOE (phase delay inside its circular
//! aperture), propagates to the lens, picks up the thin-lens phase inside the
//! lens aperture and propagates to the sensor. The squared modulus, binned to
//! sensor pixels, is the PSF.

use std::f64::consts::PI;
use std::path::Path;
use std::rc::Rc;

use hdr_tensor::{Complex, Graph, Scalar, Separable, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::data::pfm::{read_pfm, write_pfm};
use crate::error::{Error, Result};
use crate::image::{write_gray16_png, Image};

/// Cauchy dispersion `n(λ) = a + b / λ_nm²`, valid on `[min_nm, max_nm]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefractiveIndex {
    pub a: f64,
    pub b_nm2: f64,
    pub min_nm: f64,
    pub max_nm: f64,
}

impl Default for RefractiveIndex {
    /// PDMS.
    fn default() -> Self {
        Self {
            a: 1.3997,
            b_nm2: 4583.0,
            min_nm: 380.0,
            max_nm: 1000.0,
        }
    }
}

impl RefractiveIndex {
    pub fn at(&self, wavelength_m: f64) -> Result<f64> {
        let nm = wavelength_m * 1e9;
        if !(self.min_nm..=self.max_nm).contains(&nm) {
            return Err(Error::config(
                "optics.wavelengths_m",
                format!(
                    "{nm:.1} nm is outside the refractive index range [{}, {}] nm",
                    self.min_nm, self.max_nm
                ),
            ));
        }
        Ok(self.a + self.b_nm2 / (nm * nm))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpticsConfig {
    /// R, G, B.
    pub wavelengths_m: [f64; 3],
    pub refractive_index: RefractiveIndex,
    pub doe_aperture_m: f64,
    pub lens_aperture_m: f64,
    pub focal_length_m: f64,
    pub doe_to_lens_m: f64,
    pub lens_to_sensor_m: f64,
    pub sim_grid: usize,
    pub sim_pitch_m: f64,
    pub sensor_pitch_m: f64,
    /// Defaults to one full wave of phase at the longest wavelength.
    pub max_height_m: Option<f64>,
    pub psf_crop: usize,
}

impl OpticsConfig {
    pub fn max_height(&self) -> Result<f64> {
        match self.max_height_m {
            Some(h) => Ok(h),
            None => {
                let lr = self.wavelengths_m.iter().copied().fold(0.0, f64::max);
                Ok(lr / (self.refractive_index.at(lr)? - 1.0))
            }
        }
    }

    /// Grid extent on the DOE plane.
    pub fn extent_m(&self) -> f64 {
        self.sim_grid as f64 * self.sim_pitch_m
    }

    /// Number of whole sensor pixels spanned by the simulation grid.
    pub fn sensor_pixels(&self) -> usize {
        (self.extent_m() / self.sensor_pitch_m + 1e-9).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("doe_aperture_m", self.doe_aperture_m),
            ("lens_aperture_m", self.lens_aperture_m),
            ("focal_length_m", self.focal_length_m),
            ("doe_to_lens_m", self.doe_to_lens_m),
            ("lens_to_sensor_m", self.lens_to_sensor_m),
            ("sim_pitch_m", self.sim_pitch_m),
            ("sensor_pitch_m", self.sensor_pitch_m),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("optics.{k}"), format!("must be positive, got {v}")));
            }
        }
        for &l in &self.wavelengths_m {
            if !(l > 0.0) {
                return Err(Error::config("optics.wavelengths_m", "wavelengths must be positive"));
            }
            self.refractive_index.at(l)?;
        }
        if self.sim_grid < 2 {
            return Err(Error::config("optics.sim_grid", "grid must have at least 2 samples"));
        }
        let lmin = self.wavelengths_m.iter().copied().fold(f64::INFINITY, f64::min);
        let nyquist = lmin * self.lens_to_sensor_m / self.lens_aperture_m;
        if self.sim_pitch_m > nyquist * (1.0 + 1e-12) {
            return Err(Error::config(
                "optics.sim_pitch_m",
                format!(
                    "{:.3e} m undersamples the lens phase at the aperture edge; need <= {nyquist:.3e} m",
                    self.sim_pitch_m
                ),
            ));
        }
        let extent = self.extent_m();
        for (k, d) in [("doe_aperture_m", self.doe_aperture_m), ("lens_aperture_m", self.lens_aperture_m)] {
            if d > extent {
                return Err(Error::config(
                    format!("optics.{k}"),
                    format!("aperture {d:.3e} m exceeds the grid extent {extent:.3e} m"),
                ));
            }
        }
        if self.psf_crop % 2 == 0 || self.psf_crop == 0 {
            return Err(Error::config("optics.psf_crop", "must be odd"));
        }
        if self.psf_crop > self.sensor_pixels() {
            return Err(Error::config(
                "optics.psf_crop",
                format!("{} exceeds the {} sensor pixels covered by the grid", self.psf_crop, self.sensor_pixels()),
            ));
        }
        if let Some(h) = self.max_height_m {
            if !(h > 0.0) {
                return Err(Error::config("optics.max_height_m", "must be positive"));
            }
        }
        Ok(())
    }
}

/// Real `N x N` height profile in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct HeightMap {
    pub values: Vec<f64>,
    pub grid: usize,
    pub pitch_m: f64,
}

impl HeightMap {
    pub fn zeros(cfg: &OpticsConfig) -> Self {
        Self {
            values: vec![0.0; cfg.sim_grid * cfg.sim_grid],
            grid: cfg.sim_grid,
            pitch_m: cfg.sim_pitch_m,
        }
    }

    fn check(&self, cfg: &OpticsConfig) -> Result<()> {
        if self.grid != cfg.sim_grid || self.values.len() != self.grid * self.grid {
            return Err(Error::config(
                "optics.sim_grid",
                format!("height map is {0}x{0}, config expects {1}x{1}", self.grid, cfg.sim_grid),
            ));
        }
        if (self.pitch_m - cfg.sim_pitch_m).abs() > 1e-9 * cfg.sim_pitch_m {
            return Err(Error::config("optics.sim_pitch_m", "height map pitch differs from the simulation pitch"));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("height map contains non-finite values".into()));
        }
        Ok(())
    }
}

/// Clamps every height into `[0, max]`.
pub fn project_height(values: &mut [f64], max: f64) {
    for v in values {
        *v = v.clamp(0.0, max);
    }
}

/// Per-channel PSF at sensor pitch.
#[derive(Clone, Debug, PartialEq)]
pub struct PsfStack {
    /// `(3, K, K)` row-major.
    pub kernels: Vec<f64>,
    pub size: usize,
    /// Per-channel sum before normalization.
    pub energy: [f64; 3],
}

impl PsfStack {
    pub fn from_kernels(kernels: Vec<f64>, size: usize) -> Self {
        let n = size * size;
        let mut energy = [0.0; 3];
        for (c, e) in energy.iter_mut().enumerate() {
            *e = kernels[c * n..(c + 1) * n].iter().sum();
        }
        Self { kernels, size, energy }
    }

    pub fn normalized(&self) -> Self {
        let n = self.size * self.size;
        let mut k = self.kernels.clone();
        for c in 0..3 {
            let s = self.energy[c];
            k[c * n..(c + 1) * n].iter_mut().for_each(|v| *v /= s);
        }
        Self {
            kernels: k,
            size: self.size,
            energy: self.energy,
        }
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.size * self.size;
        &self.kernels[c * n..(c + 1) * n]
    }

    /// One-hot center kernel in every channel.
    pub fn delta(size: usize) -> Self {
        let n = size * size;
        let mut k = vec![0.0; 3 * n];
        for c in 0..3 {
            k[c * n + (size / 2) * size + size / 2] = 1.0;
        }
        Self::from_kernels(k, size)
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(vec![3, self.size, self.size], |i| T::of_f64(self.kernels[i]))
    }
}

/// Sample coordinate `(i - N/2) * pitch`.
fn coord(i: usize, n: usize, pitch: f64) -> f64 {
    (i as f64 - (n / 2) as f64) * pitch
}

/// 1 inside the centered disc of diameter `diameter_m`, else 0.
pub fn aperture_mask(diameter_m: f64, grid: usize, pitch_m: f64) -> Vec<f64> {
    let r2 = (diameter_m / 2.0).powi(2);
    let mut m = vec![0.0; grid * grid];
    for y in 0..grid {
        let v = coord(y, grid, pitch_m);
        for x in 0..grid {
            let u = coord(x, grid, pitch_m);
            if u * u + v * v <= r2 {
                m[y * grid + x] = 1.0;
            }
        }
    }
    m
}

/// Thin-lens transmission `A_l exp(-i k r² / 2g)`.
pub fn lens_phase(wavelength_m: f64, cfg: &OpticsConfig) -> Vec<Complex<f64>> {
    let n = cfg.sim_grid;
    let k = 2.0 * PI / wavelength_m;
    let ap = aperture_mask(cfg.lens_aperture_m, n, cfg.sim_pitch_m);
    let mut out = vec![Complex::new(0.0, 0.0); n * n];
    for y in 0..n {
        let v = coord(y, n, cfg.sim_pitch_m);
        for x in 0..n {
            let u = coord(x, n, cfg.sim_pitch_m);
            let i = y * n + x;
            if ap[i] > 0.0 {
                out[i] = Complex::from_polar(1.0, -k / (2.0 * cfg.focal_length_m) * (u * u + v * v));
            }
        }
    }
    out
}

/// DOE transmission `A_φ exp(i k (n(λ)-1) φ)` evaluated directly.
pub fn phase_delay(h: &HeightMap, wavelength_m: f64, cfg: &OpticsConfig) -> Result<Vec<Complex<f64>>> {
    h.check(cfg)?;
    let k = 2.0 * PI / wavelength_m * (cfg.refractive_index.at(wavelength_m)? - 1.0);
    let ap = aperture_mask(cfg.doe_aperture_m, cfg.sim_grid, cfg.sim_pitch_m);
    Ok(h.values
        .iter()
        .zip(&ap)
        .map(|(&phi, &a)| if a > 0.0 { Complex::from_polar(1.0, k * phi) } else { Complex::new(0.0, 0.0) })
        .collect())
}

/// Band-limited angular-spectrum transfer function in FFT order.
pub fn transfer_function(grid: usize, pitch_m: f64, wavelength_m: f64, d: f64) -> Result<Vec<Complex<f64>>> {
    if d < 0.0 {
        return Err(Error::config("optics", format!("negative propagation distance {d}")));
    }
    let extent = grid as f64 * pitch_m;
    let du = 1.0 / extent;
    let u_limit = 1.0 / (wavelength_m * ((2.0 * du * d).powi(2) + 1.0).sqrt());
    let nyquist = 1.0 / (2.0 * pitch_m);
    if u_limit < 0.1 * nyquist {
        return Err(Error::config(
            "optics.sim_grid",
            format!(
                "band limit {u_limit:.3e} 1/m at distance {d} m is below 10% of Nyquist; enlarge the grid"
            ),
        ));
    }
    let freq = |i: usize| {
        let s = if i < grid.div_ceil(2) { i as f64 } else { i as f64 - grid as f64 };
        s * du
    };
    let inv_l2 = 1.0 / (wavelength_m * wavelength_m);
    let mut h = vec![Complex::new(0.0, 0.0); grid * grid];
    for y in 0..grid {
        let fy = freq(y);
        for x in 0..grid {
            let fx = freq(x);
            let arg = inv_l2 - fx * fx - fy * fy;
            if arg < 0.0 || fx.abs() > u_limit || fy.abs() > u_limit {
                continue;
            }
            h[y * grid + x] = Complex::from_polar(1.0, 2.0 * PI * d * arg.sqrt());
        }
    }
    Ok(h)
}

/// Propagates a complex field over the last two axes by distance `d`.
/// `d = 0` returns the input node itself.
pub fn propagate<T: Scalar>(
    g: &mut Graph<T>,
    field: Var,
    d: f64,
    wavelength_m: f64,
    cfg: &OpticsConfig,
) -> Result<Var> {
    if d == 0.0 {
        return Ok(field);
    }
    let h = transfer_function(cfg.sim_grid, cfg.sim_pitch_m, wavelength_m, d)?;
    let n = cfg.sim_grid;
    let h = g.complex_constant(Tensor::new(vec![n, n], cast_complex(&h))?);
    let s = g.fft2(field)?;
    let s = g.mul(s, h)?;
    Ok(g.ifft2(s)?)
}

fn cast_complex<T: Scalar>(v: &[Complex<f64>]) -> Vec<Complex<T>> {
    v.iter().map(|c| Complex::new(T::of_f64(c.re), T::of_f64(c.im))).collect()
}

/// Area-weighted binning from `n` samples of pitch `p_in` onto `k` pixels of
/// pitch `p_out`, both grids centered at index `len/2`; the output window is
/// centered on the sensor's center pixel.
pub fn binning_matrix(n: usize, p_in: f64, k: usize, p_out: f64) -> Vec<f64> {
    let mut w = vec![0.0; k * n];
    for m in 0..k {
        let center = (m as f64 - (k / 2) as f64) * p_out;
        let (lo, hi) = (center - p_out / 2.0, center + p_out / 2.0);
        for i in 0..n {
            let x = coord(i, n, p_in);
            let overlap = (hi.min(x + p_in / 2.0) - lo.max(x - p_in / 2.0)).max(0.0);
            w[m * n + i] = overlap / p_in;
        }
    }
    w
}

/// Precomputed constants for repeated PSF simulation.
pub struct OpticsModel {
    pub cfg: OpticsConfig,
    doe_aperture: Vec<f64>,
    aperture_energy: f64,
    /// `k (n(λ) - 1)` per channel, radians per meter of height.
    phase_per_m: [f64; 3],
    lens: Vec<Vec<Complex<f64>>>,
    transfer_doe: Vec<Vec<Complex<f64>>>,
    transfer_lens: Vec<Vec<Complex<f64>>>,
    binning: Vec<f64>,
}

impl OpticsModel {
    pub fn new(cfg: &OpticsConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.sim_grid;
        let doe_aperture = aperture_mask(cfg.doe_aperture_m, n, cfg.sim_pitch_m);
        let aperture_energy: f64 = doe_aperture.iter().sum();
        if aperture_energy == 0.0 {
            return Err(Error::config("optics.doe_aperture_m", "aperture covers no samples"));
        }
        let mut phase_per_m = [0.0; 3];
        let mut lens = Vec::new();
        let mut transfer_doe = Vec::new();
        let mut transfer_lens = Vec::new();
        for (c, &l) in cfg.wavelengths_m.iter().enumerate() {
            phase_per_m[c] = 2.0 * PI / l * (cfg.refractive_index.at(l)? - 1.0);
            lens.push(lens_phase(l, cfg));
            transfer_doe.push(transfer_function(n, cfg.sim_pitch_m, l, cfg.doe_to_lens_m)?);
            transfer_lens.push(transfer_function(n, cfg.sim_pitch_m, l, cfg.lens_to_sensor_m)?);
        }
        let binning = binning_matrix(n, cfg.sim_pitch_m, cfg.psf_crop, cfg.sensor_pitch_m);
        Ok(Self {
            cfg: cfg.clone(),
            doe_aperture,
            aperture_energy,
            phase_per_m,
            lens,
            transfer_doe,
            transfer_lens,
            binning,
        })
    }

    pub fn grid(&self) -> usize {
        self.cfg.sim_grid
    }

    /// Builds the `(3, K, K)` PSF from a `(N, N)` height node. Kernels are
    /// scaled by the energy entering the DOE aperture, so each sums to at most 1.
    pub fn psf<T: Scalar>(&self, g: &mut Graph<T>, height: Var) -> Result<Var> {
        let n = self.grid();
        if g.shape(height) != [n, n] {
            return Err(Error::config(
                "optics.sim_grid",
                format!("height node has shape {:?}, expected [{n}, {n}]", g.shape(height)),
            ));
        }
        let stack3 = |v: &[Vec<Complex<f64>>]| -> Tensor<Complex<T>> {
            let flat: Vec<Complex<f64>> = v.iter().flatten().copied().collect();
            Tensor::new(vec![3, n, n], cast_complex(&flat)).expect("stacked constant")
        };
        let k = g.constant(Tensor::from_fn(vec![3, 1, 1], |c| T::of_f64(self.phase_per_m[c])));
        let phase = g.mul(height, k)?;
        let t = g.exp_i(phase)?;
        let ap: Vec<Complex<f64>> = self.doe_aperture.iter().map(|&a| Complex::new(a, 0.0)).collect();
        let ap = g.complex_constant(Tensor::new(vec![n, n], cast_complex(&ap))?);
        let field = g.mul(t, ap)?;
        let field = self.propagate_stack(g, field, &self.transfer_doe, self.cfg.doe_to_lens_m, stack3)?;
        let lens = g.complex_constant(stack3(&self.lens));
        let field = g.mul(field, lens)?;
        let field = self.propagate_stack(g, field, &self.transfer_lens, self.cfg.lens_to_sensor_m, stack3)?;
        let intensity = g.abs_sq(field)?;
        let kk = self.cfg.psf_crop;
        let b: Vec<T> = self.binning.iter().map(|&v| T::of_f64(v)).collect();
        let sep = Rc::new(Separable::new(b.clone(), b, (n, n), (kk, kk))?);
        let binned = g.resample2d(intensity, sep)?;
        let psf = g.scale(binned, T::of_f64(1.0 / self.aperture_energy))?;
        let total: f64 = g.real(intensity).iter().map(|v| v.as_f64()).sum::<f64>() / self.aperture_energy;
        if !(total >= 1e-12) {
            return Err(Error::config(
                "optics",
                format!("propagated energy fraction {total:.3e} is below 1e-12; check apertures and grid"),
            ));
        }
        Ok(psf)
    }

    fn propagate_stack<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        field: Var,
        h: &[Vec<Complex<f64>>],
        d: f64,
        stack3: impl Fn(&[Vec<Complex<f64>>]) -> Tensor<Complex<T>>,
    ) -> Result<Var> {
        if d == 0.0 {
            return Ok(field);
        }
        let h = g.complex_constant(stack3(h));
        let s = g.fft2(field)?;
        let s = g.mul(s, h)?;
        Ok(g.ifft2(s)?)
    }

    /// Forward-only PSF of a height map, evaluated in double precision.
    pub fn simulate(&self, h: &HeightMap) -> Result<PsfStack> {
        h.check(&self.cfg)?;
        let mut g = Graph::<f64>::new();
        let n = self.grid();
        let hv = g.constant(Tensor::new(vec![n, n], h.values.clone())?);
        let psf = self.psf(&mut g, hv)?;
        Ok(PsfStack::from_kernels(g.real(psf).to_vec(), self.cfg.psf_crop))
    }
}

/// Convenience wrapper around [`OpticsModel::simulate`].
pub fn simulate_psf(h: &HeightMap, cfg: &OpticsConfig) -> Result<PsfStack> {
    OpticsModel::new(cfg)?.simulate(h)
}

/// Softmax-parameterized kernels, `(3, K, K)` logits to `(3, K, K)` PSF.
pub fn unconstrained_psf<T: Scalar>(g: &mut Graph<T>, logits: Var) -> Result<Var> {
    Ok(g.softmax2(logits)?)
}

/// Divides each kernel by its own sum.
pub fn normalize_psf<T: Scalar>(g: &mut Graph<T>, psf: Var) -> Result<Var> {
    let s = g.sum_last2(psf)?;
    Ok(g.div(psf, s)?)
}

impl HeightMap {
    /// Single-channel image of the heights in meters.
    pub fn to_image(&self) -> Image {
        Image::new(1, self.grid, self.grid, self.values.iter().map(|&v| v as f32).collect())
    }

    pub fn from_image(img: &Image, pitch_m: f64) -> Result<Self> {
        if img.channels != 1 || img.height != img.width {
            return Err(Error::Numeric(format!(
                "height map must be a single-channel square image, got {}x{}x{}",
                img.channels, img.height, img.width
            )));
        }
        Ok(Self {
            values: img.data.iter().map(|&v| v as f64).collect(),
            grid: img.height,
            pitch_m,
        })
    }

    /// Reads a height PFM and checks it against `cfg`.
    pub fn read(path: &Path, cfg: &OpticsConfig) -> Result<Self> {
        let img = read_pfm(path)?;
        let h = Self::from_image(&img, cfg.sim_pitch_m).map_err(|e| Error::data(path, e.to_string()))?;
        h.check(cfg)?;
        Ok(h)
    }

    /// Writes `{stem}.pfm` and a 16-bit PNG preview spanning `[0, max]`.
    pub fn write(&self, dir: &Path, stem: &str, max: f64) -> Result<()> {
        let img = self.to_image();
        write_pfm(&dir.join(format!("{stem}.pfm")), &img)?;
        write_gray16_png(&img.data, self.grid, self.grid, 0.0, max as f32, &dir.join(format!("{stem}.png")))
    }
}

impl PsfStack {
    pub fn to_image(&self) -> Image {
        Image::new(3, self.size, self.size, self.kernels.iter().map(|&v| v as f32).collect())
    }

    /// Writes `{stem}.pfm` plus per-channel log-scaled 16-bit previews
    /// `{stem}_log_{r,g,b}.png` covering six decades below each peak.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        write_pfm(&dir.join(format!("{stem}.pfm")), &self.to_image())?;
        for (c, tag) in ["r", "g", "b"].iter().enumerate() {
            let ch = self.channel(c);
            let peak = ch.iter().copied().fold(0.0, f64::max).max(1e-30);
            let logv: Vec<f32> = ch.iter().map(|&v| (v.max(peak * 1e-6) / peak).log10() as f32).collect();
            write_gray16_png(&logv, self.size, self.size, -6.0, 0.0, &dir.join(format!("{stem}_log_{tag}.png")))?;
        }
        Ok(())
    }
}

/// Star-shaped baseline PSF: `core_weight` at the center and the remaining
/// mass spread over `streaks` radial lines with weight `exp(-r / falloff)`.
/// Identical in every channel; each channel sums to 1.
pub fn star_psf(streaks: usize, falloff: f64, core_weight: f64, size: usize) -> Result<PsfStack> {
    if streaks < 2 {
        return Err(Error::config("streaks", "need at least 2 streaks"));
    }
    if !(falloff > 0.0 && falloff.is_finite()) {
        return Err(Error::config("falloff", "must be positive"));
    }
    if !(0.0..=1.0).contains(&core_weight) {
        return Err(Error::config("core_weight", "must lie in [0, 1]"));
    }
    if size < 3 || size % 2 == 0 {
        return Err(Error::config("size", "must be odd and at least 3"));
    }
    let c = (size / 2) as f64;
    let n = size * size;
    let mut k = vec![0.0; n];
    let mut streak = vec![0.0; n];
    // bilinear deposits at quarter-pixel spacing along each ray
    let samples = ((c - 1.0) * 4.0) as usize;
    for s in 0..streaks {
        let th = std::f64::consts::TAU * s as f64 / streaks as f64;
        let (sn, cs) = th.sin_cos();
        for i in 1..=samples {
            let r = i as f64 * 0.25;
            let w = (-r / falloff).exp();
            let (y, x) = (c + r * sn, c + r * cs);
            let (y0, x0) = (y.floor(), x.floor());
            let (ty, tx) = (y - y0, x - x0);
            for (dy, wy) in [(0usize, 1.0 - ty), (1, ty)] {
                for (dx, wx) in [(0usize, 1.0 - tx), (1, tx)] {
                    let (yy, xx) = (y0 as usize + dy, x0 as usize + dx);
                    if yy < size && xx < size {
                        streak[yy * size + xx] += w * wy * wx;
                    }
                }
            }
        }
    }
    let total: f64 = streak.iter().sum();
    let center = (size / 2) * size + size / 2;
    if total > 0.0 {
        for (o, v) in k.iter_mut().zip(&streak) {
            *o = (1.0 - core_weight) * v / total;
        }
        k[center] += core_weight;
    } else {
        k[center] = 1.0;
    }
    let kernels: Vec<f64> = (0..3).flat_map(|_| k.iter().copied()).collect();
    Ok(PsfStack::from_kernels(kernels, size))
}
