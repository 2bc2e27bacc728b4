//! Reverse-mode gradients of every primitive against central differences.

use std::rc::Rc;

use hdr_tensor::{
    bilinear_kernel_4x4, grad_check, Graph, PadMode, Padding, Result, RunningStats, Separable,
    Tensor, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-6;
const FLOOR: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| r.random_range(lo..hi))
}

/// Values bounded away from zero by `margin`, for kinked primitives.
fn away_from_zero(r: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = r.random_range(margin..1.0);
        if r.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Contracts `y` against fixed pseudo-random weights so every output entry
/// contributes a distinct sensitivity.
fn project(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let w = Tensor::from_fn(shape, |i| ((i as f64 + 1.0) * 0.7548776662).sin());
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn check<F>(name: &str, f: F, inputs: &[Tensor<f64>])
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let rep = grad_check(f, inputs, STEP, FLOOR).unwrap();
    assert!(
        rep.max_rel_err < TOL,
        "{name}: max relative error {:e} at {:?}",
        rep.max_rel_err,
        rep.worst
    );
}

#[test]
fn sum_of_squares_gives_twice_the_input() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::from_fn(vec![3, 4], |i| i as f64 - 5.5));
    let sq = g.square(x).unwrap();
    let loss = g.sum(sq).unwrap();
    let gr = g.backward(loss).unwrap();
    for (d, v) in gr.get(x).unwrap().data().iter().zip(g.real(x)) {
        assert_eq!(*d, 2.0 * v);
    }
}

#[test]
fn disconnected_leaf_gets_zero_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::filled(vec![2, 2], 1.5));
    let y = g.param(Tensor::filled(vec![3], 4.0));
    let loss = g.sum(x).unwrap();
    let gr = g.backward(loss).unwrap();
    assert!(gr.get(y).unwrap().data().iter().all(|&v| v == 0.0));
    assert_eq!(gr.get(y).unwrap().shape(), &[3]);
}

#[test]
fn non_scalar_and_complex_losses_are_rejected() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::filled(vec![2, 2], 1.0));
    assert!(g.backward(x).is_err());
    let c = g.to_complex(x).unwrap();
    let s = g.sum(c).unwrap();
    assert!(g.backward(s).is_err());
}

#[test]
fn binary_ops_with_broadcasting() {
    let mut r = rng(1);
    let a = uniform(&mut r, &[2, 3, 4], -1.0, 1.0);
    let b = uniform(&mut r, &[3, 1], 0.5, 2.0);
    for (name, k) in [("add", 0), ("sub", 1), ("mul", 2), ("div", 3)] {
        check(
            name,
            |g, v| {
                let y = match k {
                    0 => g.add(v[0], v[1]),
                    1 => g.sub(v[0], v[1]),
                    2 => g.mul(v[0], v[1]),
                    _ => g.div(v[0], v[1]),
                }?;
                project(g, y)
            },
            &[a.clone(), b.clone()],
        );
    }
}

#[test]
fn smooth_unary_ops() {
    let mut r = rng(2);
    let pos = uniform(&mut r, &[3, 5], 0.2, 2.0);
    let any = uniform(&mut r, &[3, 5], -1.5, 1.5);
    check("exp", |g, v| { let y = g.exp(v[0])?; project(g, y) }, std::slice::from_ref(&any));
    check("sqrt", |g, v| { let y = g.sqrt(v[0])?; project(g, y) }, std::slice::from_ref(&pos));
    check("pow", |g, v| { let y = g.powf(v[0], 0.5)?; project(g, y) }, std::slice::from_ref(&pos));
    check("pow3", |g, v| { let y = g.powf(v[0], 3.0)?; project(g, y) }, std::slice::from_ref(&any));
    check("neg", |g, v| { let y = g.neg(v[0])?; project(g, y) }, std::slice::from_ref(&any));
    check("scale", |g, v| { let y = g.scale(v[0], -2.5)?; project(g, y) }, std::slice::from_ref(&any));
    check("add_scalar", |g, v| { let y = g.add_scalar(v[0], 0.3)?; project(g, y) }, std::slice::from_ref(&any));
}

#[test]
fn kinked_unary_ops_away_from_kinks() {
    let mut r = rng(3);
    let x = away_from_zero(&mut r, &[4, 4], 1e-3);
    check("relu", |g, v| { let y = g.relu(v[0])?; project(g, y) }, std::slice::from_ref(&x));
    let inside = uniform(&mut r, &[4, 4], 0.01, 0.99);
    check("clip01 inside", |g, v| { let y = g.clip01(v[0])?; let y = g.square(y)?; project(g, y) }, &[inside]);
    let saturated = Tensor::filled(vec![4, 4], 1.5);
    check("clip01 saturated", |g, v| { let y = g.clip01(v[0])?; project(g, y) }, &[saturated]);
}

#[test]
fn clip01_backward_is_exactly_zero_where_clipped() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::new(vec![5], vec![-0.5, 0.3, 2.0, 1.0, 0.0]).unwrap());
    let y = g.clip01(x).unwrap();
    assert_eq!(g.real(y), &[0.0, 0.3, 1.0, 1.0, 0.0]);
    let loss = project(&mut g, y).unwrap();
    let gr = g.backward(loss).unwrap();
    let d = gr.get(x).unwrap().data();
    assert_eq!(d[0], 0.0);
    assert_eq!(d[2], 0.0);
    assert_eq!(d[3], 0.0);
    assert_eq!(d[4], 0.0);
    assert!(d[1] != 0.0);
}

#[test]
fn complex_chain_through_fft() {
    let mut r = rng(4);
    let phase = uniform(&mut r, &[2, 6, 5], -3.0, 3.0);
    let amp = uniform(&mut r, &[6, 5], 0.1, 1.0);
    check(
        "exp_i fft2 abs_sq",
        |g, v| {
            let a = g.to_complex(v[1])?;
            let e = g.exp_i(v[0])?;
            let field = g.mul(e, a)?;
            let spec = g.fft2(field)?;
            let i = g.abs_sq(spec)?;
            project(g, i)
        },
        &[phase.clone(), amp.clone()],
    );
    check(
        "conj ifft2 real_part",
        |g, v| {
            let e = g.exp_i(v[0])?;
            let c = g.conj(e)?;
            let s = g.ifft2(c)?;
            let a = g.to_complex(v[1])?;
            let s = g.mul(s, a)?;
            let re = g.real_part(s)?;
            project(g, re)
        },
        &[phase, amp],
    );
}

#[test]
fn complex_sum_and_add() {
    let mut r = rng(5);
    let x = uniform(&mut r, &[3, 3], -1.0, 1.0);
    check(
        "complex add sub",
        |g, v| {
            let e = g.exp_i(v[0])?;
            let c = g.to_complex(v[0])?;
            let s = g.add(e, c)?;
            let d = g.sub(s, c)?;
            let d = g.mul(d, s)?;
            let t = g.sum(d)?;
            let z = g.abs_sq(t)?;
            g.sum(z)
        },
        &[x],
    );
}

#[test]
fn reductions_and_softmax() {
    let mut r = rng(6);
    let x = uniform(&mut r, &[2, 4, 5], -2.0, 2.0);
    check("softmax2", |g, v| { let y = g.softmax2(v[0])?; project(g, y) }, std::slice::from_ref(&x));
    check(
        "sum_last2 normalize",
        |g, v| {
            let e = g.exp(v[0])?;
            let s = g.sum_last2(e)?;
            let y = g.div(e, s)?;
            project(g, y)
        },
        std::slice::from_ref(&x),
    );
    check("reshape", |g, v| { let y = g.reshape(v[0], &[8, 5])?; project(g, y) }, &[x]);
}

#[test]
fn conv2d_all_paddings_and_strides() {
    let mut r = rng(7);
    let x = uniform(&mut r, &[2, 3, 7, 6], -1.0, 1.0);
    let k = uniform(&mut r, &[4, 3, 3, 3], -1.0, 1.0);
    let b = uniform(&mut r, &[4], -1.0, 1.0);
    for (stride, padding) in [
        (1, Padding::SameZero),
        (1, Padding::Valid),
        (2, Padding::Zero(1)),
        (2, Padding::Valid),
    ] {
        check(
            &format!("conv2d {stride} {padding:?}"),
            |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), stride, padding)?;
                project(g, y)
            },
            &[x.clone(), k.clone(), b.clone()],
        );
    }
}

#[test]
fn transposed_conv() {
    let mut r = rng(8);
    let x = uniform(&mut r, &[2, 3, 4, 3], -1.0, 1.0);
    let k = uniform(&mut r, &[3, 2, 4, 4], -1.0, 1.0);
    check(
        "transposed_conv2",
        |g, v| {
            let y = g.transposed_conv2(v[0], v[1])?;
            project(g, y)
        },
        &[x, k],
    );
}

#[test]
fn maxpool_with_distinct_values() {
    let mut r = rng(9);
    // a shuffled ramp keeps every window's maximum unique by a wide margin
    let mut vals: Vec<f64> = (0..2 * 3 * 4 * 6).map(|i| i as f64 * 0.01).collect();
    for i in (1..vals.len()).rev() {
        let j = r.random_range(0..=i);
        vals.swap(i, j);
    }
    let x = Tensor::new(vec![2, 3, 4, 6], vals).unwrap();
    check("maxpool2", |g, v| { let y = g.maxpool2(v[0])?; project(g, y) }, &[x]);
}

#[test]
fn batch_norm_train_and_eval() {
    let mut r = rng(10);
    let x = uniform(&mut r, &[3, 2, 3, 3], -1.0, 2.0);
    let gamma = uniform(&mut r, &[2], 0.5, 1.5);
    let beta = uniform(&mut r, &[2], -0.5, 0.5);
    for train in [true, false] {
        check(
            &format!("batch_norm train={train}"),
            |g, v| {
                let mut st = RunningStats {
                    mean: vec![0.2, -0.1],
                    var: vec![1.3, 0.7],
                };
                let y = g.batch_norm(v[0], v[1], v[2], &mut st, train)?;
                project(g, y)
            },
            &[x.clone(), gamma.clone(), beta.clone()],
        );
    }
}

#[test]
fn layout_ops() {
    let mut r = rng(11);
    let x = uniform(&mut r, &[2, 5, 6], -1.0, 1.0);
    let y = uniform(&mut r, &[2, 3, 6], -1.0, 1.0);
    check("concat", |g, v| { let c = g.concat(&[v[0], v[1]], 1)?; project(g, c) }, &[x.clone(), y]);
    for mode in [PadMode::Zero, PadMode::Reflect] {
        check(
            &format!("pad2d {mode:?}"),
            |g, v| { let p = g.pad2d(v[0], [2, 1, 3, 4], mode)?; project(g, p) },
            std::slice::from_ref(&x),
        );
    }
    check("crop2d", |g, v| { let c = g.crop2d(v[0], 1, 2, 3, 3)?; project(g, c) }, std::slice::from_ref(&x));
    let rows: Vec<f64> = (0..3 * 5).map(|i| (i as f64 * 0.37).cos()).collect();
    let cols: Vec<f64> = (0..4 * 6).map(|i| (i as f64 * 0.91).sin()).collect();
    let s = Rc::new(Separable::new(rows, cols, (5, 6), (3, 4)).unwrap());
    check("resample2d", |g, v| { let y = g.resample2d(v[0], s.clone())?; project(g, y) }, &[x]);
}

#[test]
fn decoder_style_composite() {
    let mut r = rng(12);
    let x = uniform(&mut r, &[2, 2, 8, 8], 0.0, 1.0);
    let k1 = uniform(&mut r, &[3, 2, 3, 3], -0.5, 0.5);
    let b1 = uniform(&mut r, &[3], -0.1, 0.1);
    let mut kt = vec![0.0; 3 * 3 * 16];
    let bil = bilinear_kernel_4x4::<f64>();
    for c in 0..3 {
        kt[(c * 3 + c) * 16..(c * 3 + c + 1) * 16].copy_from_slice(&bil);
    }
    let kt = Tensor::new(vec![3, 3, 4, 4], kt).unwrap();
    check(
        "conv relu pool upsample concat",
        |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 1, Padding::SameZero)?;
            let y = g.powf(y, 2.0)?;
            let p = g.maxpool2(y)?;
            let u = g.transposed_conv2(p, v[3])?;
            let c = g.concat(&[u, y], 1)?;
            let s = g.sqrt(c)?;
            project(g, s)
        },
        &[x, k1, b1, kt],
    );
}

#[test]
fn optics_style_pipeline_on_16x16() {
    let mut r = rng(13);
    let height = uniform(&mut r, &[16, 16], 0.0, 1.0);
    let scene = uniform(&mut r, &[1, 1, 12, 12], 0.0, 2.0);
    let ap = Tensor::from_fn(vec![16, 16], |i| {
        let (y, x) = ((i / 16) as f64 - 8.0, (i % 16) as f64 - 8.0);
        if x * x + y * y < 36.0 { 1.0 } else { 0.0 }
    });
    check(
        "height to captured loss",
        |g, v| {
            let ph = g.scale(v[0], 2.0)?;
            let t = g.exp_i(ph)?;
            let a = g.complex_constant(ap.to_complex());
            let f = g.mul(t, a)?;
            let s = g.fft2(f)?;
            let psf = g.abs_sq(s)?;
            let total = g.sum_last2(psf)?;
            let psf = g.div(psf, total)?;
            let psf = g.crop2d(psf, 5, 5, 5, 5)?;
            let k = g.reshape(psf, &[1, 1, 5, 5])?;
            let padded = g.pad2d(v[1], [2, 2, 2, 2], PadMode::Reflect)?;
            let y = g.conv2d(padded, k, None, 1, Padding::Valid)?;
            let y = g.scale(y, 20.0)?;
            let y = g.clip01(y)?;
            let y = g.add_scalar(y, 1e-3)?;
            let y = g.powf(y, 0.5)?;
            project(g, y)
        },
        &[height, scene],
    );
}
