use num_complex::Complex;

use crate::error::{contract, Result};
use crate::graph::{Graph, Op, Value, Var};
use crate::Scalar;

fn last2(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    if shape.len() < 2 {
        return contract(op, format!("needs at least 2 dims, got {shape:?}"));
    }
    Ok((shape[shape.len() - 2], shape[shape.len() - 1]))
}

impl<T: Scalar> Graph<T> {
    /// Sum of every element; the result is a rank-0 node.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = match &self.node(a).value {
            Value::Real(x) => Value::Real(vec![x.iter().copied().sum()]),
            Value::Complex(x) => Value::Complex(vec![x
                .iter()
                .fold(Complex::new(T::zero(), T::zero()), |acc, v| acc + v)]),
        };
        Ok(self.push(Op::Sum(a), vec![], value))
    }

    /// Sum over the last two axes, keeping them as size-1 axes.
    pub fn sum_last2(&mut self, a: Var) -> Result<Var> {
        let n = self.node(a);
        let (h, w) = last2(&n.shape, "sum_last2")?;
        let x = n.value.real("sum_last2")?;
        let plane = h * w;
        let sums: Vec<T> = x.chunks(plane.max(1)).map(|c| c.iter().copied().sum()).collect();
        let mut shape = n.shape.clone();
        let r = shape.len();
        shape[r - 2] = 1;
        shape[r - 1] = 1;
        Ok(self.push(Op::SumLast2(a), shape, Value::Real(sums)))
    }

    /// Softmax over each trailing 2-D plane.
    pub fn softmax2(&mut self, a: Var) -> Result<Var> {
        let n = self.node(a);
        let (h, w) = last2(&n.shape, "softmax2")?;
        let x = n.value.real("softmax2")?;
        let mut out = Vec::with_capacity(x.len());
        for plane in x.chunks(h * w) {
            let m = plane.iter().copied().fold(T::neg_infinity(), T::max);
            let e: Vec<T> = plane.iter().map(|&v| (v - m).exp()).collect();
            let s: T = e.iter().copied().sum();
            out.extend(e.into_iter().map(|v| v / s));
        }
        let shape = n.shape.clone();
        Ok(self.push(Op::Softmax2(a), shape, Value::Real(out)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n = self.node(a);
        if shape.iter().product::<usize>() != n.value.len() {
            return contract("reshape", format!("{:?} -> {shape:?}", n.shape));
        }
        let value = n.value.clone();
        Ok(self.push(Op::Reshape(a), shape.to_vec(), value))
    }
}

pub(crate) fn backward_sum<T: Scalar>(g: &Graph<T>, a: Var, grad: &Value<T>) -> Vec<(Var, Value<T>)> {
    let n = g.node(a).value.len();
    let ga = match grad {
        Value::Real(d) => Value::Real(vec![d[0]; n]),
        Value::Complex(d) => Value::Complex(vec![d[0]; n]),
    };
    vec![(a, ga)]
}

pub(crate) fn backward_sum_last2<T: Scalar>(
    g: &Graph<T>,
    a: Var,
    grad: &Value<T>,
) -> Result<Vec<(Var, Value<T>)>> {
    let node = g.node(a);
    let (h, w) = last2(&node.shape, "sum_last2")?;
    let d = grad.real("sum_last2")?;
    let mut ga = Vec::with_capacity(node.value.len());
    for &v in d {
        ga.extend(std::iter::repeat_n(v, h * w));
    }
    Ok(vec![(a, Value::Real(ga))])
}

pub(crate) fn backward_softmax2<T: Scalar>(
    g: &Graph<T>,
    a: Var,
    out: &Value<T>,
    grad: &Value<T>,
) -> Result<Vec<(Var, Value<T>)>> {
    let (h, w) = last2(&g.node(a).shape, "softmax2")?;
    let s = out.real("softmax2")?;
    let d = grad.real("softmax2")?;
    let mut ga = Vec::with_capacity(s.len());
    for (sp, dp) in s.chunks(h * w).zip(d.chunks(h * w)) {
        let dot: T = sp.iter().zip(dp).map(|(&a, &b)| a * b).sum();
        ga.extend(sp.iter().zip(dp).map(|(&si, &di)| si * (di - dot)));
    }
    Ok(vec![(a, Value::Real(ga))])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    #[test]
    fn uniform_logits_give_uniform_kernel() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::filled(vec![3, 5, 5], 0.7));
        let s = g.softmax2(x).unwrap();
        assert!(g.real(s).iter().all(|v| (v - 1.0 / 25.0).abs() < 1e-15));
    }

    #[test]
    fn dominant_logit_saturates_to_one_hot() {
        let mut t = Tensor::<f64>::zeros(vec![1, 5, 5]);
        t.data_mut()[7] = 20.0;
        let mut g = Graph::new();
        let x = g.constant(t);
        let s = g.softmax2(x).unwrap();
        let v = g.real(s);
        // every other entry is e^-20 / (1 + 24 e^-20) ~ 2.1e-9
        assert!(v.iter().enumerate().all(|(i, &p)| i == 7 || p < 1e-8));
        let rest = 24.0 * (-20f64).exp();
        assert!((v[7] - 1.0 / (1.0 + rest)).abs() < 1e-14);
    }

    #[test]
    fn sum_last2_keeps_leading_axes() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_fn(vec![2, 3, 2, 2], |i| i as f64));
        let s = g.sum_last2(x).unwrap();
        assert_eq!(g.shape(s), &[2, 3, 1, 1]);
        assert_eq!(g.real(s)[1], 4.0 + 5.0 + 6.0 + 7.0);
    }
}
