use crate::error::{contract, Result};
use crate::graph::{Graph, Op, Value, Var};
use crate::Scalar;

pub const BN_EPS: f64 = 1e-5;
/// Weight kept on the old running statistic per update.
pub const BN_MOMENTUM: f64 = 0.9;

/// Per-channel running mean and variance used in evaluation mode.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

impl<T: Scalar> Graph<T> {
    /// Batch normalization of `x (B, C, H, W)` with per-channel `gamma`, `beta`.
    /// In training mode batch statistics are used and `stats` is updated;
    /// otherwise `stats` is read.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        train: bool,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return contract("batch_norm", format!("expected (B, C, H, W), got {shape:?}"));
        }
        let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return contract("batch_norm", format!("gamma and beta must have shape [{c}]"));
        }
        if b * hw == 0 {
            return contract("batch_norm", "empty input");
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return contract("batch_norm", "running statistics have the wrong channel count");
        }
        let n = b * hw;
        let xv = self.node(x).value.real("batch_norm")?;
        let gv = self.node(gamma).value.real("batch_norm")?;
        let bv = self.node(beta).value.real("batch_norm")?;
        let eps = T::of_f64(BN_EPS);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        if train {
            let nf = T::of_f64(n as f64);
            for (i, plane) in xv.chunks(hw).enumerate() {
                mean[i % c] += plane.iter().copied().sum::<T>();
            }
            mean.iter_mut().for_each(|m| *m = *m / nf);
            for (i, plane) in xv.chunks(hw).enumerate() {
                let m = mean[i % c];
                var[i % c] += plane.iter().map(|&v| (v - m) * (v - m)).sum::<T>();
            }
            var.iter_mut().for_each(|v| *v = *v / nf);
        } else {
            mean.clone_from(&stats.mean);
            var.clone_from(&stats.var);
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut out = Vec::with_capacity(xv.len());
        for (i, plane) in xv.chunks(hw).enumerate() {
            let ch = i % c;
            for &v in plane {
                let h = (v - mean[ch]) * inv_std[ch];
                xhat.push(h);
                out.push(gv[ch] * h + bv[ch]);
            }
        }
        if train {
            let mom = T::of_f64(BN_MOMENTUM);
            let unbias = if n > 1 {
                T::of_f64(n as f64 / (n - 1) as f64)
            } else {
                T::one()
            };
            for ch in 0..c {
                stats.mean[ch] = mom * stats.mean[ch] + (T::one() - mom) * mean[ch];
                stats.var[ch] = mom * stats.var[ch] + (T::one() - mom) * var[ch] * unbias;
            }
        }
        Ok(self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            shape,
            Value::Real(out),
        ))
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward_batch_norm<T: Scalar>(
    g: &Graph<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: &[T],
    inv_std: &[T],
    train: bool,
    grad: &Value<T>,
) -> Result<Vec<(Var, Value<T>)>> {
    let shape = g.shape(x);
    let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let d = grad.real("batch_norm")?;
    let gv = g.node(gamma).value.real("batch_norm")?;
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (i, (dp, hp)) in d.chunks(hw).zip(xhat.chunks(hw)).enumerate() {
        let ch = i % c;
        dbeta[ch] += dp.iter().copied().sum::<T>();
        dgamma[ch] += dp.iter().zip(hp).map(|(&a, &h)| a * h).sum::<T>();
    }
    let mut dx = Vec::with_capacity(d.len());
    if train {
        let nf = T::of_f64((b * hw) as f64);
        for (i, (dp, hp)) in d.chunks(hw).zip(xhat.chunks(hw)).enumerate() {
            let ch = i % c;
            let k = gv[ch] * inv_std[ch] / nf;
            for (&di, &hi) in dp.iter().zip(hp) {
                dx.push(k * (nf * di - dbeta[ch] - hi * dgamma[ch]));
            }
        }
    } else {
        for (i, dp) in d.chunks(hw).enumerate() {
            let k = gv[i % c] * inv_std[i % c];
            dx.extend(dp.iter().map(|&di| k * di));
        }
    }
    Ok(vec![
        (x, Value::Real(dx)),
        (gamma, Value::Real(dgamma)),
        (beta, Value::Real(dbeta)),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    #[test]
    fn training_output_is_standardized_per_channel() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(vec![2, 3, 2, 2], |i| ((i * 7) % 11) as f64 + i as f64 * 0.1));
        let ga = g.constant(Tensor::filled(vec![3], 1.0));
        let be = g.constant(Tensor::zeros(vec![3]));
        let mut st = RunningStats::new(3);
        let y = g.batch_norm(x, ga, be, &mut st, true).unwrap();
        let v = g.real(y);
        for ch in 0..3 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|b| v[(b * 3 + ch) * 4..(b * 3 + ch + 1) * 4].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / 8.0;
            let var = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 8.0;
            assert!(m.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
        assert!(st.mean.iter().all(|&m| m != 0.0));
    }

    #[test]
    fn eval_mode_uses_running_statistics() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::filled(vec![1, 1, 2, 2], 3.0));
        let ga = g.constant(Tensor::filled(vec![1], 2.0));
        let be = g.constant(Tensor::filled(vec![1], 0.5));
        let mut st = RunningStats {
            mean: vec![1.0],
            var: vec![4.0 - BN_EPS],
        };
        let y = g.batch_norm(x, ga, be, &mut st, false).unwrap();
        assert!(g.real(y).iter().all(|&v| (v - 2.5).abs() < 1e-12));
        assert_eq!(st.mean, vec![1.0]);
    }
}
