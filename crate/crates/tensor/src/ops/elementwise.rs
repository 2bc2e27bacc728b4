use num_complex::Complex;

use crate::broadcast::{broadcast_shape, reduce_to_shape, view_strides, for_each_pair, zip_broadcast, Elem};
use crate::error::{Result, TensorError};
use crate::graph::{BinaryKind, Graph, Op, UnaryKind, Value, Var};
use crate::Scalar;

impl<T: Scalar> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    /// Real division; a zero anywhere in the denominator is a domain error.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Neg, a)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        self.unary(UnaryKind::Scale(c), a)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        self.unary(UnaryKind::AddScalar(c), a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Sqrt, a)
    }

    pub fn powf(&mut self, a: Var, p: T) -> Result<Var> {
        self.unary(UnaryKind::Powf(p), a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, a)
    }

    /// Sensor response: clamps to `[0, 1]`. The derivative is 1 strictly inside
    /// the interval and exactly 0 wherever the value was clipped.
    pub fn clip01(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Clip01, a)
    }

    /// `|z|^2` of a complex node, as a real node.
    pub fn abs_sq(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::AbsSq, a)
    }

    /// `exp(i * theta)` of a real node, as a complex node.
    pub fn exp_i(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::ExpI, a)
    }

    pub fn conj(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Conj, a)
    }

    pub fn to_complex(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::ToComplex, a)
    }

    pub fn real_part(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::RealPart, a)
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let op = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        let (na, nb) = (self.node(a), self.node(b));
        let out = broadcast_shape(&na.shape, &nb.shape).ok_or_else(|| TensorError::ShapeMismatch {
            op,
            lhs: na.shape.clone(),
            rhs: nb.shape.clone(),
        })?;
        let value = match (&na.value, &nb.value) {
            (Value::Real(x), Value::Real(y)) => {
                if kind == BinaryKind::Div && y.iter().any(|v| *v == T::zero()) {
                    return Err(TensorError::Domain {
                        op,
                        msg: "zero in denominator".into(),
                    });
                }
                Value::Real(match kind {
                    BinaryKind::Div => zip_broadcast(x, &na.shape, y, &nb.shape, &out, |p, q| p / q),
                    _ => apply_binary(kind, x, &na.shape, y, &nb.shape, &out),
                })
            }
            (Value::Complex(x), Value::Complex(y)) => {
                if kind == BinaryKind::Div {
                    return Err(TensorError::DType { op, expected: "real" });
                }
                Value::Complex(apply_binary(kind, x, &na.shape, y, &nb.shape, &out))
            }
            _ => {
                return Err(TensorError::DType {
                    op,
                    expected: "matching real/complex",
                })
            }
        };
        Ok(self.push(Op::Binary(kind, a, b), out, value))
    }

    fn unary(&mut self, kind: UnaryKind<T>, a: Var) -> Result<Var> {
        let n = self.node(a);
        let shape = n.shape.clone();
        let value = match (kind, &n.value) {
            (UnaryKind::Neg, Value::Real(x)) => Value::Real(x.iter().map(|&v| -v).collect()),
            (UnaryKind::Neg, Value::Complex(x)) => Value::Complex(x.iter().map(|&v| -v).collect()),
            (UnaryKind::Scale(c), Value::Real(x)) => Value::Real(x.iter().map(|&v| v * c).collect()),
            (UnaryKind::Scale(c), Value::Complex(x)) => {
                Value::Complex(x.iter().map(|&v| v * c).collect())
            }
            (UnaryKind::AddScalar(c), Value::Real(x)) => {
                Value::Real(x.iter().map(|&v| v + c).collect())
            }
            (UnaryKind::Exp, Value::Real(x)) => Value::Real(x.iter().map(|v| v.exp()).collect()),
            (UnaryKind::Sqrt, Value::Real(x)) => {
                if x.iter().any(|v| *v < T::zero()) {
                    return Err(TensorError::Domain {
                        op: "sqrt",
                        msg: "negative input".into(),
                    });
                }
                Value::Real(x.iter().map(|v| v.sqrt()).collect())
            }
            (UnaryKind::Powf(p), Value::Real(x)) => {
                if p.fract() != T::zero() && x.iter().any(|v| *v < T::zero()) {
                    return Err(TensorError::Domain {
                        op: "pow",
                        msg: "negative base with non-integer exponent".into(),
                    });
                }
                Value::Real(x.iter().map(|v| v.powf(p)).collect())
            }
            (UnaryKind::Relu, Value::Real(x)) => Value::Real(x.iter().map(|&v| v.max(T::zero())).collect()),
            (UnaryKind::Clip01, Value::Real(x)) => {
                Value::Real(x.iter().map(|&v| v.max(T::zero()).min(T::one())).collect())
            }
            (UnaryKind::AbsSq, Value::Complex(x)) => Value::Real(x.iter().map(|v| v.norm_sqr()).collect()),
            (UnaryKind::ExpI, Value::Real(x)) => {
                Value::Complex(x.iter().map(|&v| Complex::new(v.cos(), v.sin())).collect())
            }
            (UnaryKind::Conj, Value::Complex(x)) => Value::Complex(x.iter().map(|v| v.conj()).collect()),
            (UnaryKind::ToComplex, Value::Real(x)) => {
                Value::Complex(x.iter().map(|&v| Complex::new(v, T::zero())).collect())
            }
            (UnaryKind::RealPart, Value::Complex(x)) => Value::Real(x.iter().map(|v| v.re).collect()),
            (k, v) => {
                return Err(TensorError::DType {
                    op: unary_name(k),
                    expected: if v.is_complex() { "real" } else { "complex" },
                })
            }
        };
        Ok(self.push(Op::Unary(kind, a), shape, value))
    }
}

fn unary_name<T>(k: UnaryKind<T>) -> &'static str {
    match k {
        UnaryKind::Neg => "neg",
        UnaryKind::Scale(_) => "scale",
        UnaryKind::AddScalar(_) => "add_scalar",
        UnaryKind::Exp => "exp",
        UnaryKind::Sqrt => "sqrt",
        UnaryKind::Powf(_) => "pow",
        UnaryKind::Relu => "relu",
        UnaryKind::Clip01 => "clip01",
        UnaryKind::AbsSq => "abs_sq",
        UnaryKind::ExpI => "complex_exp_i",
        UnaryKind::Conj => "conj",
        UnaryKind::ToComplex => "to_complex",
        UnaryKind::RealPart => "real_part",
    }
}

fn apply_binary<E: Elem>(
    kind: BinaryKind,
    x: &[E],
    sx: &[usize],
    y: &[E],
    sy: &[usize],
    out: &[usize],
) -> Vec<E> {
    match kind {
        BinaryKind::Add => zip_broadcast(x, sx, y, sy, out, |p, q| p + q),
        BinaryKind::Sub => zip_broadcast(x, sx, y, sy, out, |p, q| p - q),
        BinaryKind::Mul => zip_broadcast(x, sx, y, sy, out, |p, q| p * q),
        BinaryKind::Div => unreachable!("division handled by the caller"),
    }
}

/// Gradient contributions (lhs, rhs) of an add/sub/mul under the
/// conjugate-cosensitivity convention.
fn binary_grads<E: Elem>(
    kind: BinaryKind,
    g: &[E],
    x: &[E],
    sx: &[usize],
    y: &[E],
    sy: &[usize],
    out: &[usize],
) -> (Vec<E>, Vec<E>) {
    match kind {
        BinaryKind::Add => (reduce_to_shape(g, out, sx), reduce_to_shape(g, out, sy)),
        BinaryKind::Sub => {
            let neg: Vec<E> = g.iter().map(|&v| -v).collect();
            (reduce_to_shape(g, out, sx), reduce_to_shape(&neg, out, sy))
        }
        BinaryKind::Mul => {
            let n = g.len();
            let (mut fx, mut fy) = (Vec::with_capacity(n), Vec::with_capacity(n));
            let tx = view_strides(sx, out);
            let ty = view_strides(sy, out);
            for_each_pair(out, &tx, &ty, |o, i, j| {
                fx.push(g[o] * y[j].conj());
                fy.push(g[o] * x[i].conj());
            });
            (reduce_to_shape(&fx, out, sx), reduce_to_shape(&fy, out, sy))
        }
        BinaryKind::Div => unreachable!("division handled by the caller"),
    }
}

pub(crate) fn backward_binary<T: Scalar>(
    g: &Graph<T>,
    kind: BinaryKind,
    a: Var,
    b: Var,
    out: &[usize],
    grad: &Value<T>,
) -> Result<Vec<(Var, Value<T>)>> {
    let (na, nb) = (g.node(a), g.node(b));
    let (ga, gb) = match (&na.value, &nb.value, grad) {
        (Value::Real(x), Value::Real(y), Value::Real(gr)) if kind == BinaryKind::Div => {
            let tx = view_strides(&na.shape, out);
            let ty = view_strides(&nb.shape, out);
            let (mut fx, mut fy) = (Vec::with_capacity(gr.len()), Vec::with_capacity(gr.len()));
            for_each_pair(out, &tx, &ty, |o, i, j| {
                fx.push(gr[o] / y[j]);
                fy.push(-gr[o] * x[i] / (y[j] * y[j]));
            });
            (
                Value::Real(reduce_to_shape(&fx, out, &na.shape)),
                Value::Real(reduce_to_shape(&fy, out, &nb.shape)),
            )
        }
        (Value::Real(x), Value::Real(y), Value::Real(gr)) => {
            let (p, q) = binary_grads(kind, gr, x, &na.shape, y, &nb.shape, out);
            (Value::Real(p), Value::Real(q))
        }
        (Value::Complex(x), Value::Complex(y), Value::Complex(gr)) => {
            let (p, q) = binary_grads(kind, gr, x, &na.shape, y, &nb.shape, out);
            (Value::Complex(p), Value::Complex(q))
        }
        _ => unreachable!("binary node with inconsistent value kinds"),
    };
    Ok(vec![(a, ga), (b, gb)])
}

pub(crate) fn backward_unary<T: Scalar>(
    g: &Graph<T>,
    kind: UnaryKind<T>,
    a: Var,
    out: &Value<T>,
    grad: &Value<T>,
) -> Result<Vec<(Var, Value<T>)>> {
    let input = &g.node(a).value;
    let zero = T::zero();
    let one = T::one();
    let two = one + one;
    let ga = match (kind, input, grad) {
        (UnaryKind::Neg, _, Value::Real(gr)) => Value::Real(gr.iter().map(|&v| -v).collect()),
        (UnaryKind::Neg, _, Value::Complex(gr)) => Value::Complex(gr.iter().map(|&v| -v).collect()),
        (UnaryKind::Scale(c), _, Value::Real(gr)) => Value::Real(gr.iter().map(|&v| v * c).collect()),
        (UnaryKind::Scale(c), _, Value::Complex(gr)) => {
            Value::Complex(gr.iter().map(|&v| v * c).collect())
        }
        (UnaryKind::AddScalar(_), _, gr) => gr.clone(),
        (UnaryKind::Exp, _, Value::Real(gr)) => {
            let o = out.real("exp")?;
            Value::Real(gr.iter().zip(o).map(|(&d, &e)| d * e).collect())
        }
        (UnaryKind::Sqrt, _, Value::Real(gr)) => {
            let o = out.real("sqrt")?;
            Value::Real(gr.iter().zip(o).map(|(&d, &s)| d / (two * s)).collect())
        }
        (UnaryKind::Powf(p), Value::Real(x), Value::Real(gr)) => Value::Real(
            gr.iter()
                .zip(x)
                .map(|(&d, &v)| d * p * v.powf(p - one))
                .collect(),
        ),
        (UnaryKind::Relu, Value::Real(x), Value::Real(gr)) => Value::Real(
            gr.iter()
                .zip(x)
                .map(|(&d, &v)| if v > zero { d } else { zero })
                .collect(),
        ),
        (UnaryKind::Clip01, Value::Real(x), Value::Real(gr)) => Value::Real(
            gr.iter()
                .zip(x)
                .map(|(&d, &v)| if v > zero && v < one { d } else { zero })
                .collect(),
        ),
        (UnaryKind::AbsSq, Value::Complex(z), Value::Real(gr)) => {
            Value::Complex(gr.iter().zip(z).map(|(&d, &v)| v * (two * d)).collect())
        }
        (UnaryKind::ExpI, _, Value::Complex(gr)) => {
            // d/dtheta e^{i theta} = i z; real gradient is Re(conj(g) * i z)
            let z = out.complex("complex_exp_i")?;
            Value::Real(
                gr.iter()
                    .zip(z)
                    .map(|(d, w)| (d.conj() * Complex::new(-w.im, w.re)).re)
                    .collect(),
            )
        }
        (UnaryKind::Conj, _, Value::Complex(gr)) => Value::Complex(gr.iter().map(|v| v.conj()).collect()),
        (UnaryKind::ToComplex, _, Value::Complex(gr)) => Value::Real(gr.iter().map(|v| v.re).collect()),
        (UnaryKind::RealPart, _, Value::Real(gr)) => {
            Value::Complex(gr.iter().map(|&v| Complex::new(v, zero)).collect())
        }
        _ => unreachable!("unary node with inconsistent value kinds"),
    };
    Ok(vec![(a, ga)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn clip01_matches_sensor_response() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[3], &[-0.5, 0.3, 2.0]));
        let y = g.clip01(x).unwrap();
        assert_eq!(g.real(y), &[0.0, 0.3, 1.0]);
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn relu_gradient_is_a_step() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, -1.0]));
        let y = g.relu(x).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn abs_sq_of_three_four_i() {
        let mut g = Graph::<f64>::new();
        let z = g.complex_constant(Tensor::new(vec![1], vec![Complex::new(3.0, 4.0)]).unwrap());
        let r = g.abs_sq(z).unwrap();
        assert_eq!(g.real(r), &[25.0]);
    }

    #[test]
    fn division_by_zero_is_a_domain_error() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(g.div(a, b), Err(TensorError::Domain { .. })));
    }

    #[test]
    fn fractional_power_of_negative_base_is_rejected() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2], &[1.0, -2.0]));
        assert!(matches!(g.powf(a, 0.5), Err(TensorError::Domain { .. })));
        assert!(g.powf(a, 2.0).is_ok());
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 3], &[0.0; 6]));
        let b = g.constant(t(&[2], &[0.0; 2]));
        assert!(matches!(g.add(a, b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn real_and_complex_do_not_mix() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[1], &[1.0]));
        let b = g.to_complex(a).unwrap();
        assert!(matches!(g.mul(a, b), Err(TensorError::DType { .. })));
        assert!(matches!(g.relu(b), Err(TensorError::DType { .. })));
    }

    #[test]
    fn broadcast_mul_reduces_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = g.param(t(&[2], &[10.0, 100.0]));
        let p = g.mul(a, w).unwrap();
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(grads.get(a).unwrap().data(), &[10.0, 100.0, 10.0, 100.0]);
    }
}
