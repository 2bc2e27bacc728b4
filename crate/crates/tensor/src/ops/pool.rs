use crate::error::{contract, Result};
use crate::graph::{Graph, Op, Value, Var};
use crate::Scalar;

impl<T: Scalar> Graph<T> {
    /// 2x2 max pooling with stride 2 over the last two axes. Ties resolve to
    /// the first element in row-major order within the window.
    pub fn maxpool2(&mut self, a: Var) -> Result<Var> {
        let n = self.node(a);
        let r = n.shape.len();
        if r < 2 {
            return contract("maxpool2", format!("needs at least 2 dims, got {:?}", n.shape));
        }
        let (h, w) = (n.shape[r - 2], n.shape[r - 1]);
        if h % 2 != 0 || w % 2 != 0 {
            return contract("maxpool2", format!("spatial dims must be even, got {h}x{w}"));
        }
        let (oh, ow) = (h / 2, w / 2);
        let x = n.value.real("maxpool2")?;
        let planes = x.len() / (h * w).max(1);
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let mut shape = n.shape.clone();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        Ok(self.push(Op::MaxPool2 { x: a, argmax }, shape, Value::Real(out)))
    }
}

pub(crate) fn backward_maxpool2<T: Scalar>(
    g: &Graph<T>,
    a: Var,
    argmax: &[u32],
    grad: &Value<T>,
) -> Result<Vec<(Var, Value<T>)>> {
    let d = grad.real("maxpool2")?;
    let mut ga = vec![T::zero(); g.node(a).value.len()];
    for (&i, &v) in argmax.iter().zip(d) {
        ga[i as usize] += v;
    }
    Ok(vec![(a, Value::Real(ga))])
}
