//! Trailing-dimension (numpy-style) broadcasting helpers.

use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use num_complex::Complex;
use num_traits::Zero;

use crate::Scalar;

/// Element of a real or complex value buffer.
pub trait Elem:
    Copy
    + Zero
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + Send
    + Sync
    + 'static
{
    fn conj(self) -> Self;
}

impl<T: Scalar> Elem for T {
    #[inline]
    fn conj(self) -> Self {
        self
    }
}

impl<T: Scalar> Elem for Complex<T> {
    #[inline]
    fn conj(self) -> Self {
        Complex::conj(&self)
    }
}

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out` (0 along broadcast dimensions).
pub fn view_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every element of `out` in row-major order.
pub fn for_each_pair(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n: usize = out.iter().product();
    if n == 0 {
        return;
    }
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    let inner = out[rank - 1];
    let (ja, jb) = (sa[rank - 1], sb[rank - 1]);
    let mut o = 0;
    loop {
        let (mut a, mut b) = (ia, ib);
        for _ in 0..inner {
            f(o, a, b);
            o += 1;
            a += ja;
            b += jb;
        }
        // advance the odometer over the outer dimensions
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Sums a gradient laid out as `out` back down to `shape`.
pub fn reduce_to_shape<E: Elem>(g: &[E], out: &[usize], shape: &[usize]) -> Vec<E> {
    if out == shape {
        return g.to_vec();
    }
    let n: usize = shape.iter().product();
    let mut acc = vec![E::zero(); n];
    let s = view_strides(shape, out);
    let zero = vec![0; out.len()];
    for_each_pair(out, &s, &zero, |o, i, _| acc[i] += g[o]);
    acc
}

/// Elementwise binary map with broadcasting.
pub fn zip_broadcast<A: Copy, B: Copy, R>(
    a: &[A],
    sa: &[usize],
    b: &[B],
    sb: &[usize],
    out: &[usize],
    f: impl Fn(A, B) -> R,
) -> Vec<R> {
    if sa == out && sb == out {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let n: usize = out.iter().product();
    let mut res = Vec::with_capacity(n);
    let ta = view_strides(sa, out);
    let tb = view_strides(sb, out);
    for_each_pair(out, &ta, &tb, |_, i, j| res.push(f(a[i], b[j])));
    res
}
