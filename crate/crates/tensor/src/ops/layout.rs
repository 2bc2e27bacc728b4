use std::rc::Rc;

use num_complex::Complex;

use crate::error::{contract, Result, TensorError};
use crate::graph::{Graph, Op, PadMode, Separable, Value, Var};
use crate::Scalar;

fn last2(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    if shape.len() < 2 {
        return contract(op, format!("needs at least 2 dims, got {shape:?}"));
    }
    Ok((shape[shape.len() - 2], shape[shape.len() - 1]))
}

/// Source index for output position `i` of a padded axis, or `None` for a
/// zero-filled position.
fn pad_source(i: usize, before: usize, n: usize, mode: PadMode) -> Option<usize> {
    let j = i as isize - before as isize;
    let n = n as isize;
    if (0..n).contains(&j) {
        return Some(j as usize);
    }
    match mode {
        PadMode::Zero => None,
        PadMode::Reflect => Some(if j < 0 { -j } else { 2 * (n - 1) - j } as usize),
    }
}

impl<T: Scalar> Separable<T> {
    pub fn new(
        rows: Vec<T>,
        cols: Vec<T>,
        in_dims: (usize, usize),
        out_dims: (usize, usize),
    ) -> Result<Self> {
        if rows.len() != out_dims.0 * in_dims.0 || cols.len() != out_dims.1 * in_dims.1 {
            return contract("resample2d", "weight matrices do not match the declared dims");
        }
        Ok(Self {
            rows,
            cols,
            in_dims,
            out_dims,
        })
    }
}

impl<T: Scalar> Graph<T> {
    /// Concatenation along `axis`; all other dims must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return contract("concat", "no inputs");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return contract("concat", format!("axis {axis} out of range for {base:?}"));
        }
        let complex = self.node(first).value.is_complex();
        let mut out_shape = base.clone();
        out_shape[axis] = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            if self.node(v).value.is_complex() != complex {
                return Err(TensorError::DType {
                    op: "concat",
                    expected: if complex { "complex" } else { "real" },
                });
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let value = if complex {
            let parts: Vec<&[Complex<T>]> = inputs.iter().map(|&v| self.complex(v)).collect();
            Value::Complex(interleave(&parts, inputs.iter().map(|&v| self.shape(v)[axis] * inner), outer))
        } else {
            let parts: Vec<&[T]> = inputs.iter().map(|&v| self.real(v)).collect();
            Value::Real(interleave(&parts, inputs.iter().map(|&v| self.shape(v)[axis] * inner), outer))
        };
        Ok(self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            out_shape,
            value,
        ))
    }

    /// Pads the last two axes by `[top, bottom, left, right]`.
    pub fn pad2d(&mut self, a: Var, pads: [usize; 4], mode: PadMode) -> Result<Var> {
        let n = self.node(a);
        let (h, w) = last2(&n.shape, "pad2d")?;
        if mode == PadMode::Reflect
            && (pads[0] >= h || pads[1] >= h || pads[2] >= w || pads[3] >= w)
        {
            return contract(
                "pad2d",
                format!("reflect padding {pads:?} needs pads smaller than {h}x{w}"),
            );
        }
        let (oh, ow) = (h + pads[0] + pads[1], w + pads[2] + pads[3]);
        let rows: Vec<Option<usize>> = (0..oh).map(|i| pad_source(i, pads[0], h, mode)).collect();
        let cols: Vec<Option<usize>> = (0..ow).map(|i| pad_source(i, pads[2], w, mode)).collect();
        fn run<E: Copy>(x: &[E], h: usize, w: usize, rows: &[Option<usize>], cols: &[Option<usize>], zero: E) -> Vec<E> {
            let mut out = Vec::with_capacity(x.len() / (h * w).max(1) * rows.len() * cols.len());
            for plane in x.chunks(h * w) {
                for r in rows {
                    for c in cols {
                        out.push(match (r, c) {
                            (Some(r), Some(c)) => plane[r * w + c],
                            _ => zero,
                        });
                    }
                }
            }
            out
        }
        let value = match &n.value {
            Value::Real(x) => Value::Real(run(x, h, w, &rows, &cols, T::zero())),
            Value::Complex(x) => Value::Complex(run(x, h, w, &rows, &cols, Complex::new(T::zero(), T::zero()))),
        };
        let mut shape = n.shape.clone();
        let r = shape.len();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        Ok(self.push(Op::Pad2d { x: a, pads, mode }, shape, value))
    }

    /// Window of size `h x w` starting at `(top, left)` on the last two axes.
    pub fn crop2d(&mut self, a: Var, top: usize, left: usize, h: usize, w: usize) -> Result<Var> {
        let n = self.node(a);
        let (ih, iw) = last2(&n.shape, "crop2d")?;
        if top + h > ih || left + w > iw {
            return contract(
                "crop2d",
                format!("window {h}x{w} at ({top}, {left}) exceeds {ih}x{iw}"),
            );
        }
        fn run<E: Copy>(x: &[E], ih: usize, iw: usize, top: usize, left: usize, h: usize, w: usize) -> Vec<E> {
            let mut out = Vec::with_capacity(x.len() / (ih * iw).max(1) * h * w);
            for plane in x.chunks(ih * iw) {
                for r in top..top + h {
                    out.extend_from_slice(&plane[r * iw + left..r * iw + left + w]);
                }
            }
            out
        }
        let value = match &n.value {
            Value::Real(x) => Value::Real(run(x, ih, iw, top, left, h, w)),
            Value::Complex(x) => Value::Complex(run(x, ih, iw, top, left, h, w)),
        };
        let mut shape = n.shape.clone();
        let r = shape.len();
        shape[r - 2] = h;
        shape[r - 1] = w;
        Ok(self.push(Op::Crop2d { x: a, top, left }, shape, value))
    }

    /// `Y = R X C^T` on every trailing plane of a real node.
    pub fn resample2d(&mut self, a: Var, weights: Rc<Separable<T>>) -> Result<Var> {
        let n = self.node(a);
        let (h, w) = last2(&n.shape, "resample2d")?;
        if (h, w) != weights.in_dims {
            return contract(
                "resample2d",
                format!("input plane {h}x{w} but weights expect {:?}", weights.in_dims),
            );
        }
        let x = n.value.real("resample2d")?;
        let (oh, ow) = weights.out_dims;
        let mut tmp = vec![T::zero(); h * ow];
        let mut out = vec![T::zero(); x.len() / (h * w).max(1) * oh * ow];
        for (plane, dst) in x.chunks(h * w).zip(out.chunks_mut(oh * ow)) {
            T::gemm(false, true, h, ow, w, T::one(), plane, &weights.cols, T::zero(), &mut tmp);
            T::gemm(false, false, oh, ow, h, T::one(), &weights.rows, &tmp, T::zero(), dst);
        }
        let mut shape = n.shape.clone();
        let r = shape.len();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        Ok(self.push(Op::Resample2d { x: a, weights }, shape, Value::Real(out)))
    }
}

fn interleave<E: Copy>(parts: &[&[E]], chunk: impl Iterator<Item = usize>, outer: usize) -> Vec<E> {
    let chunks: Vec<usize> = chunk.collect();
    let mut out = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
    for o in 0..outer {
        for (p, &c) in parts.iter().zip(&chunks) {
            out.extend_from_slice(&p[o * c..(o + 1) * c]);
        }
    }
    out
}

pub(crate) fn backward_concat<T: Scalar>(
    g: &Graph<T>,
    inputs: &[Var],
    axis: usize,
    grad: &Value<T>,
) -> Vec<(Var, Value<T>)> {
    let base = g.shape(inputs[0]);
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let chunks: Vec<usize> = inputs.iter().map(|&v| g.shape(v)[axis] * inner).collect();
    let total: usize = chunks.iter().sum();
    fn split<E: Copy>(d: &[E], chunks: &[usize], total: usize, outer: usize) -> Vec<Vec<E>> {
        let mut parts: Vec<Vec<E>> = chunks.iter().map(|c| Vec::with_capacity(c * outer)).collect();
        for o in 0..outer {
            let mut off = o * total;
            for (p, &c) in parts.iter_mut().zip(chunks) {
                p.extend_from_slice(&d[off..off + c]);
                off += c;
            }
        }
        parts
    }
    match grad {
        Value::Real(d) => inputs
            .iter()
            .zip(split(d, &chunks, total, outer))
            .map(|(&v, p)| (v, Value::Real(p)))
            .collect(),
        Value::Complex(d) => inputs
            .iter()
            .zip(split(d, &chunks, total, outer))
            .map(|(&v, p)| (v, Value::Complex(p)))
            .collect(),
    }
}

pub(crate) fn backward_pad2d<T: Scalar>(
    g: &Graph<T>,
    a: Var,
    pads: [usize; 4],
    mode: PadMode,
    grad: &Value<T>,
) -> Vec<(Var, Value<T>)> {
    let shape = g.shape(a);
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let (oh, ow) = (h + pads[0] + pads[1], w + pads[2] + pads[3]);
    let rows: Vec<Option<usize>> = (0..oh).map(|i| pad_source(i, pads[0], h, mode)).collect();
    let cols: Vec<Option<usize>> = (0..ow).map(|i| pad_source(i, pads[2], w, mode)).collect();
    fn run<E: Copy + std::ops::AddAssign>(d: &[E], h: usize, w: usize, rows: &[Option<usize>], cols: &[Option<usize>], zero: E) -> Vec<E> {
        let plane_out = rows.len() * cols.len();
        let mut out = vec![zero; d.len() / plane_out.max(1) * h * w];
        for (src, dst) in d.chunks(plane_out).zip(out.chunks_mut(h * w)) {
            for (ri, r) in rows.iter().enumerate() {
                for (ci, c) in cols.iter().enumerate() {
                    if let (Some(r), Some(c)) = (r, c) {
                        dst[r * w + c] += src[ri * cols.len() + ci];
                    }
                }
            }
        }
        out
    }
    let ga = match grad {
        Value::Real(d) => Value::Real(run(d, h, w, &rows, &cols, T::zero())),
        Value::Complex(d) => Value::Complex(run(d, h, w, &rows, &cols, Complex::new(T::zero(), T::zero()))),
    };
    vec![(a, ga)]
}

pub(crate) fn backward_crop2d<T: Scalar>(
    g: &Graph<T>,
    a: Var,
    top: usize,
    left: usize,
    out_shape: &[usize],
    grad: &Value<T>,
) -> Vec<(Var, Value<T>)> {
    let shape = g.shape(a);
    let (ih, iw) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let (h, w) = (out_shape[out_shape.len() - 2], out_shape[out_shape.len() - 1]);
    fn run<E: Copy>(d: &[E], ih: usize, iw: usize, top: usize, left: usize, h: usize, w: usize, zero: E) -> Vec<E> {
        let mut out = vec![zero; d.len() / (h * w).max(1) * ih * iw];
        for (src, dst) in d.chunks(h * w).zip(out.chunks_mut(ih * iw)) {
            for r in 0..h {
                dst[(top + r) * iw + left..(top + r) * iw + left + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
        }
        out
    }
    let ga = match grad {
        Value::Real(d) => Value::Real(run(d, ih, iw, top, left, h, w, T::zero())),
        Value::Complex(d) => Value::Complex(run(d, ih, iw, top, left, h, w, Complex::new(T::zero(), T::zero()))),
    };
    vec![(a, ga)]
}

pub(crate) fn backward_resample2d<T: Scalar>(
    a: Var,
    weights: &Separable<T>,
    grad: &Value<T>,
) -> Result<Vec<(Var, Value<T>)>> {
    let d = grad.real("resample2d")?;
    let (h, w) = weights.in_dims;
    let (oh, ow) = weights.out_dims;
    let mut tmp = vec![T::zero(); h * ow];
    let mut out = vec![T::zero(); d.len() / (oh * ow).max(1) * h * w];
    for (src, dst) in d.chunks(oh * ow).zip(out.chunks_mut(h * w)) {
        T::gemm(true, false, h, ow, oh, T::one(), &weights.rows, src, T::zero(), &mut tmp);
        T::gemm(false, false, h, w, ow, T::one(), &tmp, &weights.cols, T::zero(), dst);
    }
    Ok(vec![(a, Value::Real(out))])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    #[test]
    fn reflect_pad_mirrors_without_repeating_the_edge() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![1, 3], vec![1., 2., 3.]).unwrap());
        let y = g.pad2d(x, [0, 0, 2, 2], PadMode::Reflect).unwrap();
        assert_eq!(g.real(y), &[3., 2., 1., 2., 3., 2., 1.]);
    }

    #[test]
    fn reflect_pad_wider_than_input_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(vec![2, 2]));
        assert!(g.pad2d(x, [2, 0, 0, 0], PadMode::Reflect).is_err());
    }

    #[test]
    fn concat_along_channels() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_fn(vec![2, 1, 2], |i| i as f64));
        let b = g.constant(Tensor::from_fn(vec![2, 2, 2], |i| 10.0 + i as f64));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 3, 2]);
        assert_eq!(
            g.real(c),
            &[0., 1., 10., 11., 12., 13., 2., 3., 14., 15., 16., 17.]
        );
    }

    #[test]
    fn crop_then_pad_back_roundtrips_the_window() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(vec![4, 5], |i| i as f64));
        let c = g.crop2d(x, 1, 2, 2, 3).unwrap();
        assert_eq!(g.real(c), &[7., 8., 9., 12., 13., 14.]);
        assert!(g.crop2d(x, 3, 0, 2, 1).is_err());
    }

    #[test]
    fn resample_with_box_weights_sums_blocks() {
        let rows = vec![1., 1., 0., 0., 0., 0., 1., 1.];
        let s = Rc::new(Separable::new(rows.clone(), rows, (4, 4), (2, 2)).unwrap());
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(vec![4, 4], |i| i as f64));
        let y = g.resample2d(x, s).unwrap();
        assert_eq!(g.real(y), &[0. + 1. + 4. + 5., 2. + 3. + 6. + 7., 8. + 9. + 12. + 13., 10. + 11. + 14. + 15.]);
    }
}
