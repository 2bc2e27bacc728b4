//! U-Net reconstruction network with a global residual head.

use hdr_tensor::{bilinear_kernel_4x4, Graph, Padding, RunningStats, Scalar, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub scales: usize,
    pub convs_per_scale: usize,
    pub base_width: usize,
    pub kernel_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Start the head's batch norm at gamma = beta = 0 so the untrained
    /// network is the identity on its input.
    #[serde(default)]
    pub zero_init_head: bool,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            scales: 3,
            convs_per_scale: 2,
            base_width: 16,
            kernel_size: 3,
            in_channels: 3,
            out_channels: 3,
            zero_init_head: false,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales < 2 {
            return Err(Error::config("net.scales", "need at least 2 scales"));
        }
        if self.convs_per_scale < 1 {
            return Err(Error::config("net.convs_per_scale", "need at least one conv per scale"));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::config("net.kernel_size", "must be odd"));
        }
        if self.base_width == 0 || self.in_channels == 0 {
            return Err(Error::config("net.base_width", "must be positive"));
        }
        if self.in_channels != self.out_channels {
            return Err(Error::config(
                "net.out_channels",
                "the residual head needs as many outputs as inputs",
            ));
        }
        Ok(())
    }

    /// Input side lengths must be divisible by this.
    pub fn divisor(&self) -> usize {
        1 << (self.scales - 1)
    }
}

/// Named parameter tensors plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct UNetParams<T> {
    pub names: Vec<String>,
    pub values: Vec<Tensor<T>>,
    pub stat_names: Vec<String>,
    pub stats: Vec<RunningStats<T>>,
}

impl<T: Scalar> UNetParams<T> {
    pub fn count(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    pub fn leaves(&self, g: &mut Graph<T>, requires_grad: bool) -> Vec<Var> {
        self.values.iter().map(|t| g.leaf(t.clone(), requires_grad)).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    /// Zeroes the head's batch-norm affine parameters.
    pub fn zero_head(&mut self) {
        for (n, v) in self.names.iter().zip(self.values.iter_mut()) {
            if n == "head.bn.gamma" || n == "head.bn.beta" {
                v.data_mut().iter_mut().for_each(|x| *x = T::zero());
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> UNetParams<U> {
        UNetParams {
            names: self.names.clone(),
            values: self.values.iter().map(|t| t.cast()).collect(),
            stat_names: self.stat_names.clone(),
            stats: self
                .stats
                .iter()
                .map(|s| RunningStats {
                    mean: s.mean.iter().map(|v| U::of_f64(v.as_f64())).collect(),
                    var: s.var.iter().map(|v| U::of_f64(v.as_f64())).collect(),
                })
                .collect(),
        }
    }
}

struct Builder<'a, T: Scalar> {
    rng: ChaCha8Rng,
    p: &'a mut UNetParams<T>,
}

impl<T: Scalar> Builder<'_, T> {
    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize) {
        let bound = (6.0 / (cin * k * k) as f64).sqrt();
        let rng = &mut self.rng;
        let w = Tensor::from_fn(vec![cout, cin, k, k], |_| T::of_f64(rng.random_range(-bound..bound)));
        self.push(format!("{name}.weight"), w);
        self.push(format!("{name}.bias"), Tensor::zeros(vec![cout]));
    }

    fn upconv(&mut self, name: &str, c: usize) {
        let bil = bilinear_kernel_4x4::<T>();
        let mut w = Tensor::zeros(vec![c, c, 4, 4]);
        for i in 0..c {
            w.data_mut()[(i * c + i) * 16..(i * c + i + 1) * 16].copy_from_slice(&bil);
        }
        self.push(format!("{name}.weight"), w);
    }

    fn bn(&mut self, name: &str, c: usize) {
        self.push(format!("{name}.gamma"), Tensor::filled(vec![c], T::one()));
        self.push(format!("{name}.beta"), Tensor::zeros(vec![c]));
        self.p.stat_names.push(name.to_string());
        self.p.stats.push(RunningStats::new(c));
    }

    fn push(&mut self, name: String, t: Tensor<T>) {
        self.p.names.push(name);
        self.p.values.push(t);
    }
}

/// He-uniform convolutions, bilinear transposed convolutions, unit batch norm.
pub fn init_params<T: Scalar>(cfg: &UNetConfig, seed: u64) -> UNetParams<T> {
    let mut p = UNetParams {
        names: vec![],
        values: vec![],
        stat_names: vec![],
        stats: vec![],
    };
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed),
        p: &mut p,
    };
    let (w, k) = (cfg.base_width, cfg.kernel_size);
    for s in 0..cfg.scales {
        for j in 0..cfg.convs_per_scale {
            let cin = if s == 0 && j == 0 { cfg.in_channels } else { w };
            b.conv(&format!("enc{s}.conv{j}"), w, cin, k);
        }
    }
    for s in (0..cfg.scales - 1).rev() {
        b.upconv(&format!("dec{s}.up"), w);
        b.bn(&format!("dec{s}.bn"), w);
        for j in 0..cfg.convs_per_scale {
            let cin = if j == 0 { 2 * w } else { w };
            b.conv(&format!("dec{s}.conv{j}"), w, cin, k);
        }
    }
    b.conv("head.conv", cfg.out_channels, w, 1);
    b.bn("head.bn", cfg.out_channels);
    if cfg.zero_init_head {
        p.zero_head();
    }
    p
}

/// Runs the network on `y (B, C, H, W)`; `params` are the leaves created by
/// [`UNetParams::leaves`] in the same order. Train mode updates `stats`.
pub fn unet_forward<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &UNetConfig,
    y: Var,
    params: &[Var],
    stats: &mut [RunningStats<T>],
    train: bool,
) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let d = cfg.divisor();
    if shape.len() != 4 || shape[1] != cfg.in_channels || shape[2] % d != 0 || shape[3] % d != 0 {
        return Err(hdr_tensor::TensorError::Contract {
            op: "unet_forward",
            msg: format!("input {shape:?} must be (B, {}, H, W) with H, W divisible by {d}", cfg.in_channels),
        }
        .into());
    }
    let mut it = params.iter().copied();
    let mut next = || it.next().expect("parameter list matches the configuration");
    let mut st = stats.iter_mut();
    let conv_relu = |g: &mut Graph<T>, x: Var, w: Var, b: Var| -> Result<Var> {
        let c = g.conv2d(x, w, Some(b), 1, Padding::SameZero)?;
        Ok(g.relu(c)?)
    };
    let mut x = y;
    let mut skips = Vec::new();
    for s in 0..cfg.scales {
        for _ in 0..cfg.convs_per_scale {
            let (w, b) = (next(), next());
            x = conv_relu(g, x, w, b)?;
        }
        if s + 1 < cfg.scales {
            skips.push(x);
            x = g.maxpool2(x)?;
        }
    }
    for _ in (0..cfg.scales - 1).rev() {
        let up = next();
        x = g.transposed_conv2(x, up)?;
        let (gamma, beta) = (next(), next());
        x = g.batch_norm(x, gamma, beta, st.next().expect("bn stats"), train)?;
        x = g.concat(&[x, skips.pop().expect("skip per scale")], 1)?;
        for _ in 0..cfg.convs_per_scale {
            let (w, b) = (next(), next());
            x = conv_relu(g, x, w, b)?;
        }
    }
    let (w, b) = (next(), next());
    let z = g.conv2d(x, w, Some(b), 1, Padding::Valid)?;
    let (gamma, beta) = (next(), next());
    let z = g.batch_norm(z, gamma, beta, st.next().expect("bn stats"), train)?;
    let out = g.add(y, z)?;
    Ok(g.relu(out)?)
}
