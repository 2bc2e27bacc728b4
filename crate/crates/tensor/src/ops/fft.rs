//! Unitary 2-D DFT over the last two axes.

use num_complex::Complex;
use rustfft::{FftDirection, FftPlanner};

use crate::error::{contract, Result};
use crate::graph::{Graph, Op, Value, Var};
use crate::Scalar;

/// In-place unitary 2-D transform of every `h x w` plane in `buf`
/// (each direction scaled by `1/sqrt(h*w)`).
pub fn fft2_planes<T: Scalar>(
    planner: &mut FftPlanner<T>,
    buf: &mut [Complex<T>],
    h: usize,
    w: usize,
    inverse: bool,
) {
    let plane = h * w;
    if plane == 0 {
        return;
    }
    let dir = if inverse {
        FftDirection::Inverse
    } else {
        FftDirection::Forward
    };
    let row_fft = planner.plan_fft(w, dir);
    let col_fft = planner.plan_fft(h, dir);
    let scale = T::one() / T::of_f64(plane as f64).sqrt();
    let mut scratch = vec![Complex::new(T::zero(), T::zero()); plane];
    for p in buf.chunks_mut(plane) {
        row_fft.process(p);
        transpose(p, &mut scratch, h, w);
        col_fft.process(&mut scratch);
        transpose(&scratch, p, w, h);
        for v in p.iter_mut() {
            *v = *v * scale;
        }
    }
}

fn transpose<E: Copy>(src: &[E], dst: &mut [E], rows: usize, cols: usize) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

impl<T: Scalar> Graph<T> {
    pub fn fft2(&mut self, a: Var) -> Result<Var> {
        self.fft2_op(a, false)
    }

    pub fn ifft2(&mut self, a: Var) -> Result<Var> {
        self.fft2_op(a, true)
    }

    fn fft2_op(&mut self, a: Var, inverse: bool) -> Result<Var> {
        let op = if inverse { "ifft2" } else { "fft2" };
        let n = self.node(a);
        if n.shape.len() < 2 {
            return contract(op, format!("needs at least 2 dims, got {:?}", n.shape));
        }
        let shape = n.shape.clone();
        let mut data = n.value.complex(op)?.to_vec();
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        fft2_planes(self.fft_planner(), &mut data, h, w, inverse);
        Ok(self.push(Op::Fft2 { x: a, inverse }, shape, Value::Complex(data)))
    }
}

/// The adjoint of a unitary transform is its inverse.
pub(crate) fn backward_fft2<T: Scalar>(
    g: &mut Graph<T>,
    a: Var,
    inverse: bool,
    grad: &Value<T>,
) -> Result<Vec<(Var, Value<T>)>> {
    let shape = g.node(a).shape.clone();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let mut d = grad.complex("fft2")?.to_vec();
    fft2_planes(g.fft_planner(), &mut d, h, w, !inverse);
    Ok(vec![(a, Value::Complex(d))])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    /// Direct O(N^2) unitary DFT.
    fn dft2(x: &[Complex<f64>], h: usize, w: usize) -> Vec<Complex<f64>> {
        let mut out = vec![Complex::new(0.0, 0.0); h * w];
        for u in 0..h {
            for v in 0..w {
                let mut acc = Complex::new(0.0, 0.0);
                for r in 0..h {
                    for c in 0..w {
                        let ph = -2.0
                            * std::f64::consts::PI
                            * ((u * r) as f64 / h as f64 + (v * c) as f64 / w as f64);
                        acc += x[r * w + c] * Complex::from_polar(1.0, ph);
                    }
                }
                out[u * w + v] = acc / ((h * w) as f64).sqrt();
            }
        }
        out
    }

    #[test]
    fn one_hot_has_constant_modulus_quarter() {
        let mut t = Tensor::filled(vec![4, 4], Complex::new(0.0, 0.0));
        t.data_mut()[5] = Complex::new(1.0, 0.0);
        let mut g = Graph::<f64>::new();
        let x = g.complex_constant(t.clone());
        let y = g.fft2(x).unwrap();
        let want = dft2(t.data(), 4, 4);
        for (a, b) in g.complex(y).iter().zip(&want) {
            assert!((a.norm() - 0.25).abs() < 1e-15);
            assert!((a - b).norm() < 1e-14);
        }
    }

    #[test]
    fn matches_direct_dft_for_odd_sizes() {
        let t = Tensor::from_fn(vec![2, 5, 3], |i| {
            Complex::new((i as f64 * 0.37).sin(), (i as f64 * 0.11).cos())
        });
        let mut g = Graph::<f64>::new();
        let x = g.complex_constant(t.clone());
        let y = g.fft2(x).unwrap();
        let got = g.complex(y);
        for p in 0..2 {
            let want = dft2(&t.data()[p * 15..(p + 1) * 15], 5, 3);
            for (a, b) in got[p * 15..(p + 1) * 15].iter().zip(&want) {
                assert!((a - b).norm() < 1e-13);
            }
        }
    }

    #[test]
    fn real_input_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(vec![4, 4]));
        assert!(g.fft2(x).is_err());
    }
}
