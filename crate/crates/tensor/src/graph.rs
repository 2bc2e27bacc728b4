//! Tape of recorded operations and the reverse sweep over it.

use std::fmt::Write as _;
use std::rc::Rc;

use num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{contract, Result, TensorError};
use crate::ops;
use crate::tensor::{DType, Tensor};
use crate::Scalar;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Buffer stored for every node (and for every gradient).
#[derive(Clone, Debug, PartialEq)]
pub enum Value<T> {
    Real(Vec<T>),
    Complex(Vec<Complex<T>>),
}

impl<T: Scalar> Value<T> {
    pub fn len(&self) -> usize {
        match self {
            Value::Real(v) => v.len(),
            Value::Complex(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_complex(&self) -> bool {
        matches!(self, Value::Complex(_))
    }

    pub(crate) fn real(&self, op: &'static str) -> Result<&[T]> {
        match self {
            Value::Real(v) => Ok(v),
            Value::Complex(_) => Err(TensorError::DType { op, expected: "real" }),
        }
    }

    pub(crate) fn complex(&self, op: &'static str) -> Result<&[Complex<T>]> {
        match self {
            Value::Complex(v) => Ok(v),
            Value::Real(_) => Err(TensorError::DType {
                op,
                expected: "complex",
            }),
        }
    }

    pub(crate) fn accumulate(&mut self, other: Value<T>) {
        match (self, other) {
            (Value::Real(a), Value::Real(b)) => a.iter_mut().zip(b).for_each(|(x, y)| *x += y),
            (Value::Complex(a), Value::Complex(b)) => {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y)
            }
            // A real node fed from a complex path (or the reverse) is a bug in a
            // backward rule, not a user error.
            _ => panic!("gradient kind mismatch during accumulation"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryKind<T> {
    Neg,
    Scale(T),
    AddScalar(T),
    Exp,
    Sqrt,
    Powf(T),
    Relu,
    Clip01,
    AbsSq,
    ExpI,
    Conj,
    ToComplex,
    RealPart,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    /// Mirror about the edge sample, without repeating it.
    Reflect,
}

/// Dense separable resampling weights for the last two axes.
#[derive(Clone, Debug)]
pub struct Separable<T> {
    /// `out_rows x in_rows`, row-major.
    pub rows: Vec<T>,
    /// `out_cols x in_cols`, row-major.
    pub cols: Vec<T>,
    pub in_dims: (usize, usize),
    pub out_dims: (usize, usize),
}

pub(crate) enum Op<T: Scalar> {
    Leaf,
    Binary(BinaryKind, Var, Var),
    Unary(UnaryKind<T>, Var),
    Sum(Var),
    SumLast2(Var),
    Softmax2(Var),
    Fft2 { x: Var, inverse: bool },
    Conv2d {
        x: Var,
        k: Var,
        bias: Option<Var>,
        stride: usize,
        pad: (usize, usize),
    },
    ConvTranspose2d {
        x: Var,
        k: Var,
        stride: usize,
        pad: (usize, usize),
    },
    MaxPool2 { x: Var, argmax: Vec<u32> },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Concat { inputs: Vec<Var>, axis: usize },
    Pad2d { x: Var, pads: [usize; 4], mode: PadMode },
    Crop2d { x: Var, top: usize, left: usize },
    Resample2d { x: Var, weights: Rc<Separable<T>> },
    Reshape(Var),
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> String {
        match self {
            Op::Leaf => "leaf".into(),
            Op::Binary(k, ..) => format!("{k:?}").to_lowercase(),
            Op::Unary(k, _) => match k {
                UnaryKind::Neg => "neg".into(),
                UnaryKind::Scale(_) => "scale".into(),
                UnaryKind::AddScalar(_) => "add_scalar".into(),
                UnaryKind::Exp => "exp".into(),
                UnaryKind::Sqrt => "sqrt".into(),
                UnaryKind::Powf(_) => "pow".into(),
                UnaryKind::Relu => "relu".into(),
                UnaryKind::Clip01 => "clip01".into(),
                UnaryKind::AbsSq => "abs_sq".into(),
                UnaryKind::ExpI => "complex_exp_i".into(),
                UnaryKind::Conj => "conj".into(),
                UnaryKind::ToComplex => "to_complex".into(),
                UnaryKind::RealPart => "real_part".into(),
            },
            Op::Sum(_) => "sum".into(),
            Op::SumLast2(_) => "sum_last2".into(),
            Op::Softmax2(_) => "softmax2".into(),
            Op::Fft2 { inverse, .. } => if *inverse { "ifft2" } else { "fft2" }.into(),
            Op::Conv2d { .. } => "conv2d".into(),
            Op::ConvTranspose2d { .. } => "transposed_conv2".into(),
            Op::MaxPool2 { .. } => "maxpool2".into(),
            Op::BatchNorm { .. } => "batch_norm".into(),
            Op::Concat { .. } => "concat".into(),
            Op::Pad2d { .. } => "pad2d".into(),
            Op::Crop2d { .. } => "crop2d".into(),
            Op::Resample2d { .. } => "resample2d".into(),
            Op::Reshape(_) => "reshape".into(),
        }
    }

    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Binary(_, a, b) => vec![*a, *b],
            Op::Unary(_, a)
            | Op::Sum(a)
            | Op::SumLast2(a)
            | Op::Softmax2(a)
            | Op::Reshape(a)
            | Op::Fft2 { x: a, .. }
            | Op::MaxPool2 { x: a, .. }
            | Op::Pad2d { x: a, .. }
            | Op::Crop2d { x: a, .. }
            | Op::Resample2d { x: a, .. } => vec![*a],
            Op::Conv2d { x, k, bias, .. } => {
                let mut v = vec![*x, *k];
                v.extend(bias.iter().copied());
                v
            }
            Op::ConvTranspose2d { x, k, .. } => vec![*x, *k],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat { inputs, .. } => inputs.clone(),
        }
    }
}

pub(crate) struct Node<T: Scalar> {
    pub(crate) op: Op<T>,
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Value<T>,
    pub(crate) requires_grad: bool,
}

/// Append-only tape. Nodes are pushed in evaluation order, so every node's
/// inputs precede it and a reverse sweep over the node list is a valid
/// reverse topological order.
pub struct Graph<T: Scalar> {
    pub(crate) nodes: Vec<Node<T>>,
    pub(crate) planner: FftPlanner<T>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            planner: FftPlanner::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Real leaf. Only leaves created with `requires_grad` receive gradients.
    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.push_raw(Op::Leaf, shape, Value::Real(t.into_data()), requires_grad)
    }

    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, true)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    pub fn complex_constant(&mut self, t: Tensor<Complex<T>>) -> Var {
        let shape = t.shape().to_vec();
        self.push_raw(Op::Leaf, shape, Value::Complex(t.into_data()), false)
    }

    pub fn scalar_constant(&mut self, v: T) -> Var {
        self.constant(Tensor::scalar(v))
    }

    fn push_raw(&mut self, op: Op<T>, shape: Vec<usize>, value: Value<T>, rg: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            op,
            shape,
            value,
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    /// Pushes a derived node; it requires grad iff any input does.
    pub(crate) fn push(&mut self, op: Op<T>, shape: Vec<usize>, value: Value<T>) -> Var {
        let rg = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(op, shape, value, rg)
    }

    pub(crate) fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn dtype(&self, v: Var) -> DType {
        let single = std::mem::size_of::<T>() == 4;
        match (&self.nodes[v.0].value, single) {
            (Value::Real(_), true) => DType::Real32,
            (Value::Real(_), false) => DType::Real64,
            (Value::Complex(_), true) => DType::Complex64,
            (Value::Complex(_), false) => DType::Complex128,
        }
    }

    pub fn value(&self, v: Var) -> &Value<T> {
        &self.nodes[v.0].value
    }

    /// Real data of `v`; panics on complex nodes.
    pub fn real(&self, v: Var) -> &[T] {
        self.nodes[v.0]
            .value
            .real("real")
            .expect("real() called on a complex node")
    }

    pub fn complex(&self, v: Var) -> &[Complex<T>] {
        self.nodes[v.0]
            .value
            .complex("complex")
            .expect("complex() called on a real node")
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v).to_vec(), self.real(v).to_vec()).expect("node shape invariant")
    }

    pub fn to_complex_tensor(&self, v: Var) -> Tensor<Complex<T>> {
        Tensor::new(self.shape(v).to_vec(), self.complex(v).to_vec())
            .expect("node shape invariant")
    }

    /// Scalar value of a one-element real node.
    pub fn item(&self, v: Var) -> T {
        let d = self.real(v);
        assert_eq!(d.len(), 1, "item() on a non-scalar node");
        d[0]
    }

    /// Line-oriented dump: `id<TAB>primitive<TAB>inputs<TAB>shape`.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (i, n) in self.nodes.iter().enumerate() {
            let inputs: Vec<String> = n.op.inputs().iter().map(|v| v.0.to_string()).collect();
            let shape: Vec<String> = n.shape.iter().map(|d| d.to_string()).collect();
            let _ = writeln!(
                s,
                "{i}\t{}\t{}\t{}",
                n.op.name(),
                if inputs.is_empty() { "-".to_string() } else { inputs.join(",") },
                if shape.is_empty() { "scalar".to_string() } else { shape.join("x") }
            );
        }
        s
    }

    /// Reverse sweep from a real scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        let n = &self.nodes[loss.0];
        if n.value.is_complex() {
            return contract("backward", "loss must be real");
        }
        if n.value.len() != 1 {
            return contract(
                "backward",
                format!("loss must be a scalar, got shape {:?}", n.shape),
            );
        }
        let mut grads: Vec<Option<Value<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Value::Real(vec![T::one()]));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            let contributions = ops::backward_node(self, Var(id), &g)?;
            for (v, cg) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.accumulate(cg),
                    slot @ None => *slot = Some(cg),
                }
            }
        }
        let mut out = Vec::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if !(matches!(node.op, Op::Leaf) && node.requires_grad) {
                continue;
            }
            let g = match grads.get_mut(id).and_then(Option::take) {
                Some(Value::Real(g)) => g,
                Some(Value::Complex(_)) => {
                    return contract("backward", "real leaf received a complex gradient")
                }
                None => vec![T::zero(); node.value.len()],
            };
            out.push((Var(id), Tensor::new(node.shape.clone(), g)?));
        }
        Ok(Gradients { leaves: out })
    }

    pub(crate) fn fft_planner(&mut self) -> &mut FftPlanner<T> {
        &mut self.planner
    }
}

/// Gradients of every `requires_grad` leaf after a backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    leaves: Vec<(Var, Tensor<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves
            .binary_search_by_key(&v, |(k, _)| *k)
            .ok()
            .map(|i| &self.leaves[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor<T>)> {
        self.leaves.iter().map(|(v, t)| (*v, t))
    }
}
