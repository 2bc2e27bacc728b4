//! Losses, Adam, and the training loop for the four PSF modes.

use std::fmt;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use hdr_tensor::{Graph, Padding, Scalar, Tensor, TensorError, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{derive_seed, pfm, sample, Dataset, SamplePair};
use crate::decoder::{init_params, unet_forward, UNetParams};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::optics::{normalize_psf, unconstrained_psf, OpticsModel};
use crate::sensor::{capture, gaussian_noise};

/// Stream tags for [`derive_seed`].
const TAG_INIT: u64 = 1;
const TAG_HEIGHT: u64 = 2;
const TAG_EPOCH: u64 = 3;
const TAG_SAMPLE: u64 = 4;
const TAG_NOISE: u64 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Learned DOE height map.
    E2eDoe,
    /// Learned softmax-parameterized kernels.
    E2eUnconstrained,
    /// PSF loaded from a file and held fixed.
    FixedPsf,
    /// Delta PSF: the decoder sees the plain clipped image.
    LdrUnet,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::E2eDoe, Mode::E2eUnconstrained, Mode::FixedPsf, Mode::LdrUnet];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::E2eDoe => "e2e_doe",
            Mode::E2eUnconstrained => "e2e_unconstrained",
            Mode::FixedPsf => "fixed_psf",
            Mode::LdrUnet => "ldr_unet",
        }
    }

    /// Whether the optical parameters are optimized.
    pub fn learns_optics(self) -> bool {
        matches!(self, Mode::E2eDoe | Mode::E2eUnconstrained)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config("train.mode", format!("unknown mode {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub batch_size: usize,
    pub lr_init: f64,
    /// Per-epoch exponential decay factor.
    pub lr_decay: f64,
    pub epochs: u64,
    /// Stops early once this many steps have run.
    pub max_steps: Option<u64>,
    pub gamma: f64,
    pub epsilon: f64,
    pub nu: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Learning-rate multiplier for the height map.
    pub height_lr_scale: f64,
    /// Initial heights are uniform in `[0, height_init_fraction * max_height]`.
    pub height_init_fraction: f64,
    /// Zero disables periodic checkpoints.
    pub checkpoint_every: u64,
    /// PSF file for `fixed_psf` mode (3-channel PFM, odd square).
    pub psf_path: Option<PathBuf>,
    /// Checkpoint whose decoder weights initialize the run.
    pub warm_start: Option<PathBuf>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, m: &str| Err(Error::config(format!("train.{k}"), m));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma", "must lie in (0, 1]");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon", "must be positive");
        }
        if !(self.lr_init > 0.0 && self.lr_decay > 0.0 && self.height_lr_scale > 0.0) {
            return bad("lr_init", "learning rates and decay must be positive");
        }
        if !(self.nu >= 0.0) {
            return bad("nu", "must be nonnegative");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return bad("adam", "need betas in [0, 1) and eps > 0");
        }
        if !(0.0..=1.0).contains(&self.height_init_fraction) {
            return bad("height_init_fraction", "must lie in [0, 1]");
        }
        Ok(())
    }
}

fn contract(op: &'static str, msg: impl Into<String>) -> Error {
    TensorError::Contract { op, msg: msg.into() }.into()
}

/// `‖(x + ε)^γ − (x̂ + ε)^γ‖₂` over the whole batch.
pub fn data_loss<T: Scalar>(g: &mut Graph<T>, x: Var, xhat: Var, gamma: f64, eps: f64) -> Result<Var> {
    if g.shape(x) != g.shape(xhat) {
        return Err(TensorError::ShapeMismatch {
            op: "data_loss",
            lhs: g.shape(x).to_vec(),
            rhs: g.shape(xhat).to_vec(),
        }
        .into());
    }
    for v in [x, xhat] {
        if g.real(v).iter().any(|&a| a < T::zero()) {
            return Err(contract("data_loss", "inputs must be nonnegative"));
        }
    }
    let mut compress = |v: Var| -> Result<Var> {
        let s = g.add_scalar(v, T::of_f64(eps))?;
        Ok(g.powf(s, T::of_f64(gamma))?)
    };
    let (a, b) = (compress(x)?, compress(xhat)?);
    let r = g.sub(a, b)?;
    let r2 = g.square(r)?;
    let s = g.sum(r2)?;
    if g.item(s) == T::zero() {
        // the norm has no derivative at a zero residual; 0 is a subgradient
        return Ok(g.scale(s, T::zero())?);
    }
    Ok(g.sqrt(s)?)
}

pub const LAPLACIAN: [f64; 9] = [0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0];

/// `ν ‖D ∗ φ‖₂²` with the 5-point Laplacian over the valid region.
pub fn reg_loss<T: Scalar>(g: &mut Graph<T>, phi: Var, nu: f64) -> Result<Var> {
    let s = g.shape(phi).to_vec();
    if s.len() != 2 || s[0] < 3 || s[1] < 3 {
        return Err(contract("reg_loss", format!("need a 2-D map of at least 3x3, got {s:?}")));
    }
    let p = g.reshape(phi, &[1, 1, s[0], s[1]])?;
    let k = g.constant(Tensor::from_fn(vec![1, 1, 3, 3], |i| T::of_f64(LAPLACIAN[i])));
    let d = g.conv2d(p, k, None, 1, Padding::Valid)?;
    let d2 = g.square(d)?;
    let sum = g.sum(d2)?;
    Ok(g.scale(sum, T::of_f64(nu))?)
}

/// `lr_init · lr_decay^epoch`.
pub fn lr_schedule(epoch: u64, cfg: &TrainConfig) -> f64 {
    cfg.lr_init * cfg.lr_decay.powf(epoch as f64)
}

/// Adam with bias correction over several parameter groups.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig, sizes: &[usize]) -> Self {
        Self {
            cfg,
            t: 0,
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    /// One update; `lrs[i]` is the learning rate of group `i`.
    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[&[T]], lrs: &[f64]) {
        assert!(params.len() == self.m.len() && grads.len() == self.m.len() && lrs.len() == self.m.len());
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powf(self.t as f64);
        let bc2 = 1.0 - c.beta2.powf(self.t as f64);
        let (b1, b2, eps) = (T::of_f64(c.beta1), T::of_f64(c.beta2), T::of_f64(c.eps));
        let (nb1, nb2) = (T::of_f64(1.0 - c.beta1), T::of_f64(1.0 - c.beta2));
        let (ibc1, ibc2) = (T::of_f64(1.0 / bc1), T::of_f64(1.0 / bc2));
        for (i, p) in params.iter_mut().enumerate() {
            let lr = T::of_f64(lrs[i]);
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], grads[i]);
            assert_eq!(p.len(), g.len());
            for j in 0..p.len() {
                m[j] = b1 * m[j] + nb1 * g[j];
                v[j] = b2 * v[j] + nb2 * g[j] * g[j];
                p[j] -= lr * (m[j] * ibc1) / ((v[j] * ibc2).sqrt() + eps);
            }
        }
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub mode: Mode,
    pub params: UNetParams<f32>,
    /// Height map `(N, N)` in meters (`e2e_doe`), logits `(3, K, K)`
    /// (`e2e_unconstrained`), the fixed PSF `(3, K, K)` (`fixed_psf`), or
    /// nothing (`ldr_unet`).
    pub optic: Option<Tensor<f32>>,
    pub adam: Adam<f32>,
    pub step: u64,
    pub epoch: u64,
    /// Position within the current epoch's permutation.
    pub cursor: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub data_loss: f64,
    pub reg_loss: f64,
    pub total: f64,
    /// Fraction of measured pixels whose channel max reached 1.
    pub sat_frac: f64,
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: u64,
    pub data_loss: f64,
    pub reg_loss: f64,
    pub total: f64,
    pub lr: f64,
    pub sat_frac: f64,
    pub sec_per_step: f64,
}

/// Stacks sample images into a `(B, 3, H, W)` tensor.
pub fn batch_tensor(samples: &[&Image]) -> Result<Tensor<f32>> {
    let first = samples.first().ok_or_else(|| contract("batch_tensor", "empty batch"))?;
    let (c, h, w) = (first.channels, first.height, first.width);
    let mut data = Vec::with_capacity(samples.len() * c * h * w);
    for s in samples {
        if (s.channels, s.height, s.width) != (c, h, w) {
            return Err(contract("batch_tensor", "samples differ in shape"));
        }
        data.extend_from_slice(&s.data);
    }
    Ok(Tensor::new(vec![samples.len(), c, h, w], data)?)
}

/// Image formation; `psf == None` is the delta PSF, applied exactly.
pub fn measure<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    psf: Option<Var>,
    cfg: &RunConfig,
    noise: Option<Tensor<T>>,
) -> Result<Var> {
    match psf {
        Some(p) => capture(g, x, p, cfg.sensor.boundary, noise),
        None => {
            let y = match noise {
                Some(n) => {
                    let n = g.constant(n);
                    g.add(x, n)?
                }
                None => x,
            };
            Ok(g.clip01(y)?)
        }
    }
}

/// Optics state for a run: the simulator (only in `e2e_doe`) and height bound.
pub struct OpticsContext {
    pub model: Option<OpticsModel>,
    pub max_height: f64,
}

impl OpticsContext {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let model = match cfg.train.mode {
            Mode::E2eDoe => Some(OpticsModel::new(&cfg.optics)?),
            _ => None,
        };
        Ok(Self {
            model,
            max_height: cfg.optics.max_height()?,
        })
    }

    /// Adds the optical parameter as a leaf and returns it with the capture
    /// PSF it induces.
    pub fn psf_node(
        &self,
        g: &mut Graph<f32>,
        mode: Mode,
        optic: Option<&Tensor<f32>>,
        requires_grad: bool,
    ) -> Result<(Option<Var>, Option<Var>)> {
        let need = |o: Option<&Tensor<f32>>| {
            o.cloned()
                .ok_or_else(|| Error::config("train.mode", format!("{mode} state has no optical parameters")))
        };
        Ok(match mode {
            Mode::E2eDoe => {
                let h = g.leaf(need(optic)?, requires_grad);
                let model = self.model.as_ref().expect("e2e_doe builds the optics model");
                let p = model.psf(g, h)?;
                (Some(h), Some(normalize_psf(g, p)?))
            }
            Mode::E2eUnconstrained => {
                let l = g.leaf(need(optic)?, requires_grad);
                (Some(l), Some(unconstrained_psf(g, l)?))
            }
            Mode::FixedPsf => {
                let p = g.constant(need(optic)?);
                (None, Some(p))
            }
            Mode::LdrUnet => (None, None),
        })
    }

    /// The capture PSF as a plain tensor; `None` for the delta PSF.
    pub fn psf_tensor(&self, state: &TrainState) -> Result<Option<Tensor<f32>>> {
        let mut g = Graph::new();
        let (_, p) = self.psf_node(&mut g, state.mode, state.optic.as_ref(), false)?;
        Ok(p.map(|p| g.to_tensor(p)))
    }
}

/// Reads a 3-channel odd square PSF and normalizes every channel to unit sum.
pub fn load_psf(path: &Path) -> Result<Tensor<f32>> {
    let img = pfm::read_pfm(path)?;
    if img.channels != 3 || img.height != img.width || img.height % 2 == 0 {
        return Err(Error::data(
            path,
            format!("PSF must be 3-channel, odd and square; got {}x{}x{}", img.channels, img.height, img.width),
        ));
    }
    let n = img.pixels();
    let mut data = img.data.clone();
    for c in 0..3 {
        let ch = &mut data[c * n..(c + 1) * n];
        if ch.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::data(path, "PSF entries must be finite and nonnegative"));
        }
        let s: f64 = ch.iter().map(|&v| v as f64).sum();
        if !(s > 0.0) {
            return Err(Error::data(path, format!("PSF channel {c} sums to zero")));
        }
        ch.iter_mut().for_each(|v| *v = (*v as f64 / s) as f32);
    }
    Ok(Tensor::new(vec![3, img.height, img.width], data)?)
}

pub struct Trainer<'a> {
    pub cfg: &'a RunConfig,
    pub optics: OpticsContext,
    pub data: &'a Dataset,
    /// Where diagnostics go when a step produces a non-finite loss.
    pub dump_dir: Option<PathBuf>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a RunConfig, data: &'a Dataset) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::data(&cfg.data.manifest, "training split is empty"));
        }
        Ok(Self {
            cfg,
            optics: OpticsContext::new(cfg)?,
            data,
            dump_dir: None,
        })
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.data.len().div_ceil(self.cfg.train.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        let full = self.cfg.train.epochs * self.steps_per_epoch();
        self.cfg.train.max_steps.map_or(full, |m| m.min(full))
    }

    pub fn init_state(&self) -> Result<TrainState> {
        let t = &self.cfg.train;
        let mut params = init_params::<f32>(&self.cfg.net, derive_seed(t.seed, &[TAG_INIT]));
        if let Some(p) = &t.warm_start {
            let ck = checkpoint::load(p)?;
            check_params_compatible(&params, &ck.state.params, p)?;
            params = ck.state.params;
        }
        let k = self.cfg.optics.psf_crop;
        let optic = match t.mode {
            Mode::E2eDoe => {
                let n = self.cfg.optics.sim_grid;
                let hi = t.height_init_fraction * self.optics.max_height;
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(t.seed, &[TAG_HEIGHT]));
                Some(Tensor::from_fn(vec![n, n], |_| {
                    if hi > 0.0 {
                        rng.random_range(0.0..hi) as f32
                    } else {
                        0.0
                    }
                }))
            }
            Mode::E2eUnconstrained => {
                // 90% of each kernel's mass starts at the center
                let c = (9.0 * (k * k - 1) as f64).ln() as f32;
                let center = (k / 2) * k + k / 2;
                Some(Tensor::from_fn(vec![3, k, k], |i| if i % (k * k) == center { c } else { 0.0 }))
            }
            Mode::FixedPsf => {
                let path = t.psf_path.as_ref().expect("validated");
                let psf = load_psf(path)?;
                if psf.shape()[1] > self.cfg.data.crop_size {
                    return Err(Error::config("train.psf_path", "PSF is larger than the crop"));
                }
                Some(psf)
            }
            Mode::LdrUnet => None,
        };
        let mut sizes: Vec<usize> = params.values.iter().map(|v| v.len()).collect();
        if t.mode.learns_optics() {
            sizes.push(optic.as_ref().map_or(0, |o| o.len()));
        }
        Ok(TrainState {
            mode: t.mode,
            params,
            optic,
            adam: Adam::new(t.adam, &sizes),
            step: 0,
            epoch: 0,
            cursor: 0,
        })
    }

    /// Rejects a state that does not fit this run's configuration.
    pub fn check_state(&self, s: &TrainState) -> Result<()> {
        if s.mode != self.cfg.train.mode {
            return Err(Error::config(
                "train.mode",
                format!("checkpoint was trained in {} mode, config asks for {}", s.mode, self.cfg.train.mode),
            ));
        }
        let fresh = init_params::<f32>(&self.cfg.net, 0);
        check_params_compatible(&fresh, &s.params, Path::new("<checkpoint>"))?;
        let expect = match s.mode {
            Mode::E2eDoe => Some(vec![self.cfg.optics.sim_grid; 2]),
            Mode::E2eUnconstrained => Some(vec![3, self.cfg.optics.psf_crop, self.cfg.optics.psf_crop]),
            Mode::FixedPsf => s.optic.as_ref().map(|o| o.shape().to_vec()),
            Mode::LdrUnet => None,
        };
        if s.optic.as_ref().map(|o| o.shape().to_vec()) != expect || (s.mode == Mode::FixedPsf && s.optic.is_none()) {
            return Err(Error::config("optics", "checkpoint optical parameters do not match the configuration"));
        }
        Ok(())
    }

    fn permutation(&self, epoch: u64) -> Vec<usize> {
        let mut p: Vec<usize> = (0..self.data.len()).collect();
        p.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.train.seed, &[TAG_EPOCH, epoch])));
        p
    }

    /// Draws the next batch; a batch never straddles an epoch boundary.
    pub fn next_batch(&self, st: &mut TrainState) -> Result<Vec<SamplePair>> {
        let n = self.data.len() as u64;
        let bs = self.cfg.train.batch_size;
        let mut perm = self.permutation(st.epoch);
        let mut out = Vec::with_capacity(bs);
        let mut misses = 0u64;
        while out.len() < bs {
            if st.cursor >= n {
                st.epoch += 1;
                st.cursor = 0;
                perm = self.permutation(st.epoch);
                if !out.is_empty() {
                    break;
                }
            }
            let idx = perm[st.cursor as usize];
            st.cursor += 1;
            let seed = derive_seed(self.cfg.train.seed, &[TAG_SAMPLE, st.epoch, idx as u64]);
            let d = &self.cfg.data;
            match sample(&self.data.images[idx], &self.data.ids[idx], &d.augment, d.crop_size, d.target_fraction, seed)? {
                Some(p) => out.push(p),
                None => {
                    eprintln!("skipping sample {} (epoch {}): crop or exposure is degenerate", self.data.ids[idx], st.epoch);
                    misses += 1;
                    if misses > 2 * n && out.is_empty() {
                        return Err(Error::data(&self.cfg.data.manifest, "no usable training samples"));
                    }
                }
            }
        }
        Ok(out)
    }

    /// Forward, backward and one Adam update on `batch`.
    pub fn step(&self, st: &mut TrainState, batch: &[SamplePair]) -> Result<LossBreakdown> {
        let cfg = self.cfg;
        let t = &cfg.train;
        let mut g = Graph::<f32>::new();
        let (optic_leaf, psf) = self.optics.psf_node(&mut g, st.mode, st.optic.as_ref(), st.mode.learns_optics())?;
        let xs: Vec<&Image> = batch.iter().map(|p| &p.x).collect();
        let xt = batch_tensor(&xs)?;
        let shape = xt.shape().to_vec();
        let x = g.constant(xt);
        let noise = (cfg.sensor.noise_sigma > 0.0).then(|| {
            gaussian_noise(&shape, cfg.sensor.noise_sigma, derive_seed(t.seed, &[TAG_NOISE, cfg.sensor.seed, st.step]))
        });
        let y = measure(&mut g, x, psf, cfg, noise)?;
        let sat_frac = saturated_fraction_batch(g.real(y), &shape);
        let leaves = st.params.leaves(&mut g, true);
        let xhat = unet_forward(&mut g, &cfg.net, y, &leaves, &mut st.params.stats, true)?;
        let dl = data_loss(&mut g, x, xhat, t.gamma, t.epsilon)?;
        let (rl, total) = match (st.mode, optic_leaf) {
            (Mode::E2eDoe, Some(h)) => {
                let rl = reg_loss(&mut g, h, t.nu)?;
                (Some(rl), g.add(dl, rl)?)
            }
            _ => (None, dl),
        };
        let b = LossBreakdown {
            data_loss: g.item(dl) as f64,
            reg_loss: rl.map_or(0.0, |r| g.item(r) as f64),
            total: g.item(total) as f64,
            sat_frac,
        };
        if !b.total.is_finite() {
            let psf_t = psf.map(|p| g.to_tensor(p));
            return Err(self.abort(st, batch, psf_t.as_ref(), &b));
        }
        let grads = g.backward(total)?;
        let lr = lr_schedule(st.epoch, t);
        let mut gs: Vec<Tensor<f32>> = leaves
            .iter()
            .map(|v| grads.get(*v).cloned().expect("parameter leaf"))
            .collect();
        let mut lrs = vec![lr; gs.len()];
        if let Some(o) = optic_leaf {
            gs.push(grads.get(o).cloned().expect("optic leaf"));
            lrs.push(if st.mode == Mode::E2eDoe { lr * t.height_lr_scale } else { lr });
        }
        if gs.iter().any(|g| g.data().iter().any(|v| !v.is_finite())) {
            let psf_t = psf.map(|p| g.to_tensor(p));
            return Err(self.abort(st, batch, psf_t.as_ref(), &b));
        }
        let grad_slices: Vec<&[f32]> = gs.iter().map(|g| g.data()).collect();
        let mut targets: Vec<&mut [f32]> = st.params.values.iter_mut().map(|v| v.data_mut()).collect();
        if optic_leaf.is_some() {
            targets.push(st.optic.as_mut().expect("optic state").data_mut());
        }
        st.adam.step(&mut targets, &grad_slices, &lrs);
        if st.mode == Mode::E2eDoe {
            // largest f32 not above the bound, so the stored map never exceeds it
            let mut max = self.optics.max_height as f32;
            if max as f64 > self.optics.max_height {
                max = max.next_down();
            }
            for v in st.optic.as_mut().expect("height map").data_mut() {
                *v = v.clamp(0.0, max);
            }
        }
        st.step += 1;
        Ok(b)
    }

    fn abort(&self, st: &TrainState, batch: &[SamplePair], psf: Option<&Tensor<f32>>, b: &LossBreakdown) -> Error {
        let mut msg = format!(
            "non-finite loss or gradient at step {} (data {}, reg {}); sources: {}",
            st.step,
            b.data_loss,
            b.reg_loss,
            batch.iter().map(|p| p.meta.source.as_str()).collect::<Vec<_>>().join(",")
        );
        if let Some(dir) = &self.dump_dir {
            let base = dir.join(format!("abort_step{}", st.step));
            let mut written = Vec::new();
            for (i, p) in batch.iter().enumerate() {
                let path = base.with_file_name(format!("abort_step{}_x{i}.pfm", st.step));
                if pfm::write_pfm(&path, &p.x).is_ok() {
                    written.push(path);
                }
            }
            if let Some(psf) = psf {
                let k = psf.shape()[1];
                let img = Image::new(3, k, k, psf.data().to_vec());
                let path = base.with_file_name(format!("abort_step{}_psf.pfm", st.step));
                if pfm::write_pfm(&path, &img).is_ok() {
                    written.push(path);
                }
            }
            msg.push_str(&format!("; dumped {} file(s) to {}", written.len(), dir.display()));
        }
        Error::Numeric(msg)
    }
}

fn check_params_compatible(a: &UNetParams<f32>, b: &UNetParams<f32>, path: &Path) -> Result<()> {
    let shapes = |p: &UNetParams<f32>| -> Vec<(String, Vec<usize>)> {
        p.names.iter().cloned().zip(p.values.iter().map(|v| v.shape().to_vec())).collect()
    };
    if shapes(a) != shapes(b) {
        return Err(Error::config(
            "net",
            format!("decoder in {} does not match the configured architecture", path.display()),
        ));
    }
    Ok(())
}

fn saturated_fraction_batch(y: &[f32], shape: &[usize]) -> f64 {
    let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let mut n = 0usize;
    for i in 0..b {
        for p in 0..hw {
            if (0..c).any(|ch| y[(i * c + ch) * hw + p] >= 1.0) {
                n += 1;
            }
        }
    }
    n as f64 / (b * hw) as f64
}

pub struct TrainOutput {
    pub state: TrainState,
    pub log: Vec<StepLog>,
}

/// Runs (or resumes) training until the configured step budget.
///
/// With `out_dir`, writes `metrics.csv`, periodic `ckpt_{step}.bin` files and
/// `final.ckpt`. `observer` sees every step after the update. In
/// deterministic mode `sec_per_step` is logged as 0 so logs are reproducible.
pub fn run_training(
    cfg: &RunConfig,
    data: &Dataset,
    out_dir: Option<&Path>,
    resume: Option<TrainState>,
    observer: &mut dyn FnMut(&StepLog, &TrainState) -> Result<()>,
) -> Result<TrainOutput> {
    let mut trainer = Trainer::new(cfg, data)?;
    trainer.dump_dir = out_dir.map(Path::to_path_buf);
    let resumed = resume.is_some();
    let mut st = match resume {
        Some(s) => {
            trainer.check_state(&s)?;
            s
        }
        None => trainer.init_state()?,
    };
    let mut csv = match out_dir {
        Some(d) => {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            let path = d.join("metrics.csv");
            let append = resumed && path.exists();
            let f = OpenOptions::new()
                .create(true)
                .write(true)
                .append(append)
                .truncate(!append)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Some((csv::WriterBuilder::new().has_headers(!append).from_writer(f), path))
        }
        None => None,
    };
    let total = trainer.total_steps();
    let mut log = Vec::new();
    while st.step < total {
        let t0 = Instant::now();
        let batch = trainer.next_batch(&mut st)?;
        let lr = lr_schedule(st.epoch, &cfg.train);
        let step = st.step;
        let b = trainer.step(&mut st, &batch)?;
        let row = StepLog {
            step,
            epoch: st.epoch,
            data_loss: b.data_loss,
            reg_loss: b.reg_loss,
            total: b.total,
            lr,
            sat_frac: b.sat_frac,
            sec_per_step: if cfg.deterministic { 0.0 } else { t0.elapsed().as_secs_f64() },
        };
        if let Some((w, path)) = csv.as_mut() {
            w.serialize(&row).map_err(|e| Error::data(&*path, e.to_string()))?;
            w.flush().map_err(|e| Error::io(&*path, e))?;
        }
        observer(&row, &st)?;
        log.push(row);
        if let Some(d) = out_dir {
            let every = cfg.train.checkpoint_every;
            if every > 0 && st.step % every == 0 && st.step < total {
                checkpoint::save(&d.join(format!("ckpt_{:06}.bin", st.step)), &st, cfg)?;
            }
        }
    }
    if let Some(d) = out_dir {
        checkpoint::save(&d.join("final.ckpt"), &st, cfg)?;
    }
    Ok(TrainOutput { state: st, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_graph(vals: &[f64]) -> (Graph<f64>, Var) {
        let mut g = Graph::new();
        let v = g.param(Tensor::new(vec![vals.len()], vals.to_vec()).unwrap());
        (g, v)
    }

    #[test]
    fn data_loss_hand_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![1], vec![1.0]).unwrap());
        let xh = g.constant(Tensor::new(vec![1], vec![0.0]).unwrap());
        let l = data_loss(&mut g, x, xh, 0.5, 1e-300).unwrap();
        assert!((g.item(l) - 1.0).abs() < 1e-12);
        // gamma = 1 and eps small: residuals pass straight through
        let x = g.constant(Tensor::new(vec![4], vec![0.1, 0.2, 0.2, 0.4]).unwrap());
        let z = g.constant(Tensor::new(vec![4], vec![0.0; 4]).unwrap());
        let l = data_loss(&mut g, x, z, 1.0, 1e-3).unwrap();
        assert!((g.item(l) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn data_loss_zero_residual_has_zero_gradient() {
        let (mut g, x) = scalar_graph(&[0.3, 2.0]);
        let c = g.constant(Tensor::new(vec![2], vec![0.3, 2.0]).unwrap());
        let l = data_loss(&mut g, c, x, 0.5, 1e-3).unwrap();
        assert_eq!(g.item(l), 0.0);
        let gr = g.backward(l).unwrap();
        assert_eq!(gr.get(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn negative_inputs_are_rejected() {
        let (mut g, x) = scalar_graph(&[-0.1]);
        let c = g.constant(Tensor::new(vec![1], vec![0.0]).unwrap());
        assert!(data_loss(&mut g, c, x, 0.5, 1e-3).is_err());
    }

    #[test]
    fn lr_schedule_decays_per_epoch() {
        let mut c = RunConfig::desk().train;
        c.lr_init = 0.1;
        c.lr_decay = 0.5;
        assert_eq!(lr_schedule(0, &c), 0.1);
        assert_eq!(lr_schedule(1, &c), 0.05);
        let mut prev = f64::INFINITY;
        for e in 0..20 {
            let lr = lr_schedule(e, &c);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn adam_solves_a_quadratic() {
        let mut adam = Adam::<f64>::new(AdamConfig::default(), &[1]);
        let mut w = vec![0.0];
        for _ in 0..2000 {
            let g = [2.0 * (w[0] - 3.0)];
            adam.step(&mut [&mut w[..]], &[&g[..]], &[0.01]);
        }
        assert!((w[0] - 3.0).abs() < 1e-3, "w = {}", w[0]);
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
        }
        assert!("sideways".parse::<Mode>().is_err());
    }
}
