//! 2-D convolution (cross-correlation), its stride-2 transpose, and an FFT
//! forward path kept alongside the direct one for cross-checking.

use num_complex::Complex;

use crate::error::{contract, Result, TensorError};
use crate::graph::{Graph, Op, Value, Var};
use crate::ops::fft::fft2_planes;
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `k/2` on each side (odd kernels), output size = input size at stride 1.
    SameZero,
    Valid,
    /// Explicit symmetric zero padding.
    Zero(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ConvAlgo {
    #[default]
    Direct,
    Fft,
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
}

#[allow(clippy::needless_range_loop)]
fn im2col<T: Scalar>(x: &[T], g: &Geometry, cols: &mut [T]) {
    let p = g.oh * g.ow;
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.ph as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pw as isize;
                        line[ox] = if ix >= 0 && ix < g.w as isize {
                            src[ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &Geometry, x: &mut [T]) {
    let p = g.oh * g.ow;
    for ci in 0..g.c {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = iy as usize * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pw as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[base + ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn resolve_padding(op: &'static str, kh: usize, kw: usize, padding: Padding) -> Result<(usize, usize)> {
    Ok(match padding {
        Padding::SameZero => {
            if kh % 2 == 0 || kw % 2 == 0 {
                return contract(op, "same padding needs odd kernel sizes");
            }
            (kh / 2, kw / 2)
        }
        Padding::Valid => (0, 0),
        Padding::Zero(p) => (p, p),
    })
}

fn out_dim(n: usize, k: usize, pad: usize, stride: usize) -> Option<usize> {
    (n + 2 * pad).checked_sub(k).map(|d| d / stride + 1)
}

impl<T: Scalar> Graph<T> {
    /// Cross-correlation of `x (B, Cin, H, W)` with `k (Cout, Cin, kh, kw)`.
    pub fn conv2d(
        &mut self,
        x: Var,
        k: Var,
        bias: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        self.conv2d_with(x, k, bias, stride, padding, ConvAlgo::Direct)
    }

    pub fn conv2d_with(
        &mut self,
        x: Var,
        k: Var,
        bias: Option<Var>,
        stride: usize,
        padding: Padding,
        algo: ConvAlgo,
    ) -> Result<Var> {
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if xs.len() != 4 || ks.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ks,
            });
        }
        if xs[1] != ks[1] {
            return contract(
                "conv2d",
                format!("input has {} channels, kernel expects {}", xs[1], ks[1]),
            );
        }
        if stride == 0 {
            return contract("conv2d", "stride must be positive");
        }
        let (b, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
        let (ph, pw) = resolve_padding("conv2d", kh, kw, padding)?;
        let (Some(oh), Some(ow)) = (out_dim(h, kh, ph, stride), out_dim(w, kw, pw, stride)) else {
            return contract("conv2d", "kernel larger than padded input");
        };
        if let Some(bv) = bias {
            if self.shape(bv) != [cout] {
                return contract("conv2d", format!("bias must have shape [{cout}]"));
            }
        }
        let geo = Geometry {
            c: cin,
            h,
            w,
            kh,
            kw,
            stride,
            ph,
            pw,
            oh,
            ow,
        };
        let xv = self.node(x).value.real("conv2d")?;
        let kv = self.node(k).value.real("conv2d")?;
        let mut out = match algo {
            ConvAlgo::Direct => conv_direct(xv, kv, b, cout, &geo),
            ConvAlgo::Fft => {
                let (xv, kv) = (xv.to_vec(), kv.to_vec());
                conv_fft(self.fft_planner(), &xv, &kv, b, cout, &geo)
            }
        };
        if let Some(bv) = bias {
            let bias_v = self.node(bv).value.real("conv2d")?;
            let p = oh * ow;
            for (i, chunk) in out.chunks_mut(p).enumerate() {
                let bb = bias_v[i % cout];
                chunk.iter_mut().for_each(|v| *v += bb);
            }
        }
        Ok(self.push(
            Op::Conv2d {
                x,
                k,
                bias,
                stride,
                pad: (ph, pw),
            },
            vec![b, cout, oh, ow],
            Value::Real(out),
        ))
    }

    /// Stride-2, 4x4 transposed convolution: the adjoint of
    /// `conv2d(., k, stride 2, pad 1)`. `x (B, Cin, H, W)`, `k (Cin, Cout, 4, 4)`,
    /// output `(B, Cout, 2H, 2W)`.
    pub fn transposed_conv2(&mut self, x: Var, k: Var) -> Result<Var> {
        let ks = self.shape(k);
        if ks.len() != 4 || ks[2] != 4 || ks[3] != 4 {
            return contract("transposed_conv2", format!("kernel must be (Cin, Cout, 4, 4), got {ks:?}"));
        }
        self.conv_transpose2d(x, k, 2, 1)
    }

    pub fn conv_transpose2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[0] {
            return Err(TensorError::ShapeMismatch {
                op: "transposed_conv2",
                lhs: xs,
                rhs: ks,
            });
        }
        let (b, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ks[1], ks[2], ks[3]);
        let oh = ((h - 1) * stride + kh).checked_sub(2 * pad);
        let ow = ((w - 1) * stride + kw).checked_sub(2 * pad);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return contract("transposed_conv2", "padding exceeds output extent");
        };
        // geometry of the forward conv this op is the adjoint of
        let geo = Geometry {
            c: cout,
            h: oh,
            w: ow,
            kh,
            kw,
            stride,
            ph: pad,
            pw: pad,
            oh: h,
            ow: w,
        };
        if out_dim(oh, kh, pad, stride) != Some(h) || out_dim(ow, kw, pad, stride) != Some(w) {
            return contract("transposed_conv2", "shape arithmetic does not invert");
        }
        let xv = self.node(x).value.real("transposed_conv2")?;
        let kv = self.node(k).value.real("transposed_conv2")?;
        let r = cout * kh * kw;
        let p = h * w;
        let mut cols = vec![T::zero(); r * p];
        let mut out = vec![T::zero(); b * cout * oh * ow];
        for bi in 0..b {
            let xb = &xv[bi * cin * p..(bi + 1) * cin * p];
            T::gemm(true, false, r, p, cin, T::one(), kv, xb, T::zero(), &mut cols);
            col2im(&cols, &geo, &mut out[bi * cout * oh * ow..(bi + 1) * cout * oh * ow]);
        }
        Ok(self.push(
            Op::ConvTranspose2d {
                x,
                k,
                stride,
                pad: (pad, pad),
            },
            vec![b, cout, oh, ow],
            Value::Real(out),
        ))
    }
}

fn conv_direct<T: Scalar>(x: &[T], k: &[T], b: usize, cout: usize, g: &Geometry) -> Vec<T> {
    let r = g.c * g.kh * g.kw;
    let p = g.oh * g.ow;
    let mut cols = vec![T::zero(); r * p];
    let mut out = vec![T::zero(); b * cout * p];
    let xplane = g.c * g.h * g.w;
    for bi in 0..b {
        im2col(&x[bi * xplane..(bi + 1) * xplane], g, &mut cols);
        T::gemm(
            false,
            false,
            cout,
            p,
            r,
            T::one(),
            k,
            &cols,
            T::zero(),
            &mut out[bi * cout * p..(bi + 1) * cout * p],
        );
    }
    out
}

/// Correlation via the unitary DFT on the zero-padded input; strided output
/// subsamples the stride-1 result.
fn conv_fft<T: Scalar>(
    planner: &mut rustfft::FftPlanner<T>,
    x: &[T],
    k: &[T],
    b: usize,
    cout: usize,
    g: &Geometry,
) -> Vec<T> {
    let (hp, wp) = (g.h + 2 * g.ph, g.w + 2 * g.pw);
    let n = hp * wp;
    let zero = Complex::new(T::zero(), T::zero());
    let root_n = T::of_f64(n as f64).sqrt();
    let mut kspec = vec![zero; cout * g.c * n];
    for co in 0..cout {
        for ci in 0..g.c {
            let dst = &mut kspec[(co * g.c + ci) * n..(co * g.c + ci + 1) * n];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    dst[ky * wp + kx] = Complex::new(k[((co * g.c + ci) * g.kh + ky) * g.kw + kx], T::zero());
                }
            }
        }
    }
    fft2_planes(planner, &mut kspec, hp, wp, false);
    let mut out = vec![T::zero(); b * cout * g.oh * g.ow];
    let mut xspec = vec![zero; g.c * n];
    let mut acc = vec![zero; n];
    for bi in 0..b {
        xspec.fill(zero);
        for ci in 0..g.c {
            for y in 0..g.h {
                for xx in 0..g.w {
                    xspec[ci * n + (y + g.ph) * wp + xx + g.pw] =
                        Complex::new(x[((bi * g.c + ci) * g.h + y) * g.w + xx], T::zero());
                }
            }
        }
        fft2_planes(planner, &mut xspec, hp, wp, false);
        for co in 0..cout {
            acc.fill(zero);
            for ci in 0..g.c {
                let ks = &kspec[(co * g.c + ci) * n..(co * g.c + ci + 1) * n];
                let xs = &xspec[ci * n..(ci + 1) * n];
                for i in 0..n {
                    acc[i] += xs[i] * ks[i].conj();
                }
            }
            fft2_planes(planner, &mut acc, hp, wp, true);
            let dst = &mut out[(bi * cout + co) * g.oh * g.ow..(bi * cout + co + 1) * g.oh * g.ow];
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    dst[oy * g.ow + ox] = acc[oy * g.stride * wp + ox * g.stride].re * root_n;
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward_conv2d<T: Scalar>(
    gr: &Graph<T>,
    x: Var,
    k: Var,
    bias: Option<Var>,
    stride: usize,
    pad: (usize, usize),
    out_shape: &[usize],
    grad: &Value<T>,
) -> Result<Vec<(Var, Value<T>)>> {
    let xs = gr.shape(x);
    let ks = gr.shape(k);
    let (b, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let geo = Geometry {
        c: cin,
        h,
        w,
        kh,
        kw,
        stride,
        ph: pad.0,
        pw: pad.1,
        oh,
        ow,
    };
    let xv = gr.node(x).value.real("conv2d")?;
    let kv = gr.node(k).value.real("conv2d")?;
    let d = grad.real("conv2d")?;
    let r = cin * kh * kw;
    let p = oh * ow;
    let xplane = cin * h * w;
    let need_x = gr.requires_grad(x);
    let need_k = gr.requires_grad(k);
    let mut dx = vec![T::zero(); if need_x { xv.len() } else { 0 }];
    let mut dk = vec![T::zero(); if need_k { kv.len() } else { 0 }];
    let mut cols = vec![T::zero(); r * p];
    for bi in 0..b {
        let db = &d[bi * cout * p..(bi + 1) * cout * p];
        if need_k {
            im2col(&xv[bi * xplane..(bi + 1) * xplane], &geo, &mut cols);
            T::gemm(false, true, cout, r, p, T::one(), db, &cols, T::one(), &mut dk);
        }
        if need_x {
            T::gemm(true, false, r, p, cout, T::one(), kv, db, T::zero(), &mut cols);
            col2im(&cols, &geo, &mut dx[bi * xplane..(bi + 1) * xplane]);
        }
    }
    let mut res = Vec::new();
    if need_x {
        res.push((x, Value::Real(dx)));
    }
    if need_k {
        res.push((k, Value::Real(dk)));
    }
    if let Some(bv) = bias {
        let mut db = vec![T::zero(); cout];
        for (i, chunk) in d.chunks(p).enumerate() {
            db[i % cout] += chunk.iter().copied().sum::<T>();
        }
        res.push((bv, Value::Real(db)));
    }
    Ok(res)
}

pub(crate) fn backward_conv_transpose2d<T: Scalar>(
    gr: &Graph<T>,
    x: Var,
    k: Var,
    stride: usize,
    pad: (usize, usize),
    out_shape: &[usize],
    grad: &Value<T>,
) -> Result<Vec<(Var, Value<T>)>> {
    let xs = gr.shape(x);
    let ks = gr.shape(k);
    let (b, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, kh, kw) = (ks[1], ks[2], ks[3]);
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let geo = Geometry {
        c: cout,
        h: oh,
        w: ow,
        kh,
        kw,
        stride,
        ph: pad.0,
        pw: pad.1,
        oh: h,
        ow: w,
    };
    let xv = gr.node(x).value.real("transposed_conv2")?;
    let kv = gr.node(k).value.real("transposed_conv2")?;
    let d = grad.real("transposed_conv2")?;
    let r = cout * kh * kw;
    let p = h * w;
    let oplane = cout * oh * ow;
    let need_x = gr.requires_grad(x);
    let need_k = gr.requires_grad(k);
    let mut dx = vec![T::zero(); if need_x { xv.len() } else { 0 }];
    let mut dk = vec![T::zero(); if need_k { kv.len() } else { 0 }];
    let mut cols = vec![T::zero(); r * p];
    for bi in 0..b {
        im2col(&d[bi * oplane..(bi + 1) * oplane], &geo, &mut cols);
        if need_x {
            T::gemm(false, false, cin, p, r, T::one(), kv, &cols, T::zero(), &mut dx[bi * cin * p..(bi + 1) * cin * p]);
        }
        if need_k {
            let xb = &xv[bi * cin * p..(bi + 1) * cin * p];
            T::gemm(false, true, cin, r, p, T::one(), xb, &cols, T::one(), &mut dk);
        }
    }
    let mut res = Vec::new();
    if need_x {
        res.push((x, Value::Real(dx)));
    }
    if need_k {
        res.push((k, Value::Real(dk)));
    }
    Ok(res)
}

/// Bilinear upsampling weights for a stride-2, 4x4 transposed convolution:
/// outer product of `[0.25, 0.75, 0.75, 0.25]`.
pub fn bilinear_kernel_4x4<T: Scalar>() -> [T; 16] {
    let taps = [0.25, 0.75, 0.75, 0.25];
    let mut k = [T::zero(); 16];
    for y in 0..4 {
        for x in 0..4 {
            k[y * 4 + x] = T::of_f64(taps[y] * taps[x]);
        }
    }
    k
}
