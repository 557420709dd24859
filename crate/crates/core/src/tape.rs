//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] owns every intermediate value of one forward pass and an ordered
//! list of records, one per differentiable operation that touched a tracked
//! value. [`Tape::backward`] walks that list once, newest first, and returns a
//! [`Gradients`] table keyed by [`Var`].
//!
//! Leaves may be borrowed (`Tape::leaf`) so that model parameters are not
//! copied on every step.

use std::borrow::Cow;
use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::kernels::conv::{self, Geometry};
use crate::kernels::norm::{self, BatchStats};
use crate::kernels::pool;
use crate::scalar::Scalar;
use crate::shape::{ConvSpec, Hw};
use crate::tensor::Tensor;

/// Negative slope of the leaky ReLU used throughout the network.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Batch-norm variance floor.
pub const BN_EPS: f64 = 1e-5;

/// Batch-norm running-statistics momentum.
pub const BN_MOMENTUM: f64 = 0.1;

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// Pointwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    LeakyRelu,
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::LeakyRelu => {
                if x >= T::zero() {
                    x
                } else {
                    x * T::lit(LEAKY_SLOPE)
                }
            }
            Activation::Relu => x.max(T::zero()),
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Slope on the non-identity side of a piecewise-linear activation.
    fn off_slope(self) -> Option<f64> {
        match self {
            Activation::LeakyRelu => Some(LEAKY_SLOPE),
            Activation::Relu => Some(0.0),
            _ => None,
        }
    }

    /// Which linear piece `x` falls on, for piecewise-linear activations.
    fn on<T: Scalar>(self, x: T) -> bool {
        match self {
            Activation::LeakyRelu => x >= T::zero(),
            _ => x > T::zero(),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Activation::LeakyRelu => {
                if x >= T::zero() {
                    T::one()
                } else {
                    T::lit(LEAKY_SLOPE)
                }
            }
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Tanh => T::one() - y * y,
        }
    }
}

/// Logistic function, clamped so that the result stays strictly inside `(0, 1)`
/// even where the exact value rounds to an endpoint.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    let y = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    let hi = T::one() - T::epsilon() / T::lit(2.0);
    y.max(T::min_positive_value()).min(hi)
}

/// Batch-norm running statistics, mutated by train-mode passes.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T: Scalar> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats { mean: Tensor::zeros(&[channels]), var: Tensor::ones(&[channels]) }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Branch decisions of the non-smooth operations of one forward pass (which
/// piece of each (leaky) ReLU, which element of each pooling window), in call
/// order. Replaying them evaluates the network on a fixed smooth piece.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Branches {
    decisions: Vec<Decision>,
}

impl Branches {
    pub fn len(&self) -> usize {
        self.decisions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.decisions.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Decision {
    Gate(Vec<bool>),
    Pool(Vec<usize>),
}

enum BranchMode {
    Free,
    Record(Vec<Decision>),
    Replay { decisions: Vec<Decision>, next: usize },
}

enum Op<T> {
    Conv2d { geom: Geometry, batch: usize, out_channels: usize },
    ConvTranspose2d { geom: Geometry, batch: usize, in_channels: usize },
    MaxPool { argmax: Vec<usize> },
    BatchNormTrain { batch: usize, channels: usize, spatial: usize, stats: BatchStats<T> },
    BatchNormEval { batch: usize, channels: usize, spatial: usize, inv_std: Vec<T>, xhat: Vec<T> },
    Act(Activation),
    Gate { mask: Vec<bool>, slope: f64 },
    FullyConnected { batch: usize, in_features: usize, out_features: usize },
    GlobalAvgPool { planes: usize, spatial: usize },
    Concat { batch: usize, channels: Vec<usize>, spatial: usize },
    ScaleChannels { spatial: usize },
    Mul,
    Add,
    SoftmaxPair,
    Select { outer: usize, len: usize, inner: usize, index: usize },
    Stack { outer: usize, inner: usize },
    Chunk { outer: usize, len: usize, inner: usize, parts: usize },
    Reshape,
    Sum,
    Mse,
}

struct Record<T> {
    op: Op<T>,
    inputs: Vec<usize>,
    outputs: Vec<usize>,
}

struct Node<'p, T: Scalar> {
    value: Cow<'p, Tensor<T>>,
    tracked: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Option<Tensor<T>>>,
    visited: usize,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `var`; `None` if no path exists.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index).and_then(Option::as_ref)
    }

    /// Number of tape records the backward pass visited.
    pub fn records_visited(&self) -> usize {
        self.visited
    }
}

/// Recording context for one forward pass.
pub struct Tape<'p, T: Scalar> {
    id: u64,
    nodes: Vec<Node<'p, T>>,
    records: Vec<Record<T>>,
    no_grad: bool,
    branches: BranchMode,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn batch_chw(op: &'static str, dims: &[usize]) -> Result<(usize, usize, Hw)> {
    match *dims {
        [c, h, w] => Ok((1, c, (h, w))),
        [b, c, h, w] => Ok((b, c, (h, w))),
        _ => Err(Error::shape(op, "rank", "3 or 4", dims.len())),
    }
}

fn with_chw(template: &[usize], c: usize, hw: Hw) -> Vec<usize> {
    if template.len() == 3 {
        vec![c, hw.0, hw.1]
    } else {
        vec![template[0], c, hw.0, hw.1]
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            records: Vec::new(),
            no_grad: false,
            branches: BranchMode::Free,
        }
    }

    /// A tape that never tracks anything, for inference.
    pub fn no_grad() -> Self {
        Tape { no_grad: true, ..Self::new() }
    }

    fn push(&mut self, value: Cow<'p, Tensor<T>>, tracked: bool) -> Var {
        let tracked = tracked && !self.no_grad;
        self.nodes.push(Node { value, tracked });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    /// Borrows a tensor as a leaf. It is differentiated iff it `requires_grad`.
    pub fn leaf(&mut self, t: &'p Tensor<T>) -> Var {
        let tracked = t.requires_grad();
        self.push(Cow::Borrowed(t), tracked)
    }

    /// Owned leaf, differentiated iff it `requires_grad`.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let tracked = t.requires_grad();
        self.push(Cow::Owned(t), tracked)
    }

    /// Owned leaf that is always differentiated.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(Cow::Owned(t), true)
    }

    /// Owned leaf that is never differentiated.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(Cow::Owned(t), false)
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Tape(format!("variable {v:?} does not belong to this tape")));
        }
        Ok(v.index)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.index].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.value(v).dims()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        v.tape == self.id && self.nodes[v.index].tracked
    }

    /// Number of differentiable records so far.
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Starts keeping the branch decisions of every later non-smooth op.
    pub fn record_branches(&mut self) {
        self.branches = BranchMode::Record(Vec::new());
    }

    /// Decisions kept since [`record_branches`](Self::record_branches).
    pub fn branches(&self) -> Option<Branches> {
        match &self.branches {
            BranchMode::Record(d) => Some(Branches { decisions: d.clone() }),
            _ => None,
        }
    }

    /// Makes later non-smooth ops follow `b` instead of their inputs.
    pub fn replay_branches(&mut self, b: Branches) {
        self.branches = BranchMode::Replay { decisions: b.decisions, next: 0 };
    }

    fn replayed(&mut self, op: &'static str, len: usize, gate: bool) -> Result<Option<Decision>> {
        let BranchMode::Replay { decisions, next } = &mut self.branches else {
            return Ok(None);
        };
        let d = decisions.get(*next).cloned();
        *next += 1;
        match d {
            Some(Decision::Gate(m)) if gate && m.len() == len => Ok(Some(Decision::Gate(m))),
            Some(Decision::Pool(a)) if !gate && a.len() == len => Ok(Some(Decision::Pool(a))),
            _ => Err(Error::Tape(format!("{op}: replayed branch decisions do not match this graph"))),
        }
    }

    fn remember(&mut self, d: impl FnOnce() -> Decision) {
        if let BranchMode::Record(v) = &mut self.branches {
            v.push(d());
        }
    }

    /// Hash of every recorded branch decision: the sign pattern at each
    /// (leaky) ReLU input and the argmax of each max pool. Two evaluations
    /// with equal signatures lie on the same smooth piece of the function.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for r in &self.records {
            match &r.op {
                Op::Act(kind @ (Activation::LeakyRelu | Activation::Relu)) => {
                    for &v in self.nodes[r.inputs[0]].value.data() {
                        kind.on(v).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    fn emit(&mut self, op: Op<T>, inputs: &[Var], outputs: Vec<Tensor<T>>) -> Vec<Var> {
        let ins: Vec<usize> = inputs.iter().map(|v| v.index).collect();
        let tracked = ins.iter().any(|&i| self.nodes[i].tracked);
        let outs: Vec<Var> = outputs.into_iter().map(|t| self.push(Cow::Owned(t), tracked)).collect();
        if tracked {
            self.records.push(Record { op, inputs: ins, outputs: outs.iter().map(|v| v.index).collect() });
        }
        outs
    }

    fn emit1(&mut self, op: Op<T>, inputs: &[Var], output: Tensor<T>) -> Var {
        self.emit(op, inputs, vec![output])[0]
    }

    // ---------------------------------------------------------------- ops

    /// Same-ceil strided cross-correlation. `x` is `[C,H,W]` or `[B,C,H,W]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        const OP: &str = "conv2d";
        let (xi, wi) = (self.idx(x)?, self.idx(weight)?);
        let xt = &self.nodes[xi].value;
        let wt = &self.nodes[wi].value;
        let (batch, cin, hw) = batch_chw(OP, xt.dims())?;
        let expected_w = [spec.out_channels, cin, spec.kernel.0, spec.kernel.1];
        if wt.dims() != expected_w {
            let axis = if wt.rank() == 4 && wt.dims()[1] != cin { "weight in_channels" } else { "weight" };
            return Err(Error::shape(OP, axis, format!("{expected_w:?}"), format!("{:?}", wt.dims())));
        }
        let bias_t = match bias {
            Some(b) => {
                let bt = &self.nodes[self.idx(b)?].value;
                if bt.dims() != [spec.out_channels] {
                    return Err(Error::shape(OP, "bias", spec.out_channels, format!("{:?}", bt.dims())));
                }
                Some(bt.data())
            }
            None => None,
        };
        xt.ensure_finite(OP, "input")?;
        let geom = Geometry::new(cin, hw, spec);
        let out = conv::conv2d_forward(xt.data(), batch, &geom, wt.data(), bias_t, spec.out_channels);
        let dims = with_chw(xt.dims(), spec.out_channels, geom.output);
        let mut ins = vec![x, weight];
        ins.extend(bias);
        Ok(self.emit1(Op::Conv2d { geom, batch, out_channels: spec.out_channels }, &ins, Tensor::from_parts(dims, out)))
    }

    /// Transposed convolution producing spatial extent `output`, the exact
    /// adjoint of a same-ceil `conv2d` that maps `output` to the extent of `x`.
    /// `weight` is `[C_in, C_out, kh, kw]`.
    pub fn conv_transpose2d(&mut self, x: Var, weight: Var, bias: Option<Var>, spec: &ConvSpec, output: Hw) -> Result<Var> {
        const OP: &str = "conv_transpose2d";
        let (xi, wi) = (self.idx(x)?, self.idx(weight)?);
        let xt = &self.nodes[xi].value;
        let wt = &self.nodes[wi].value;
        let (batch, cin, hw) = batch_chw(OP, xt.dims())?;
        if spec.output_hw(output) != hw {
            return Err(Error::shape(OP, "spatial", format!("{:?}", spec.output_hw(output)), format!("{hw:?}")));
        }
        if wt.rank() != 4 || wt.dims()[0] != cin || wt.dims()[2..] != [spec.kernel.0, spec.kernel.1] {
            return Err(Error::shape(
                OP,
                "weight",
                format!("[{cin}, _, {}, {}]", spec.kernel.0, spec.kernel.1),
                format!("{:?}", wt.dims()),
            ));
        }
        let cout = wt.dims()[1];
        let bias_t = match bias {
            Some(b) => {
                let bt = &self.nodes[self.idx(b)?].value;
                if bt.dims() != [cout] {
                    return Err(Error::shape(OP, "bias", cout, format!("{:?}", bt.dims())));
                }
                Some(bt.data())
            }
            None => None,
        };
        xt.ensure_finite(OP, "input")?;
        let geom = Geometry::new(cout, output, spec);
        let out = conv::conv_transpose2d_forward(xt.data(), batch, cin, &geom, wt.data(), bias_t);
        let dims = with_chw(xt.dims(), cout, output);
        let mut ins = vec![x, weight];
        ins.extend(bias);
        Ok(self.emit1(Op::ConvTranspose2d { geom, batch, in_channels: cin }, &ins, Tensor::from_parts(dims, out)))
    }

    /// Non-overlapping max pooling with window == stride and same-ceil padding.
    pub fn maxpool2d(&mut self, x: Var, window: Hw) -> Result<Var> {
        const OP: &str = "maxpool2d";
        let xt = &self.nodes[self.idx(x)?].value;
        let (batch, c, hw) = batch_chw(OP, xt.dims())?;
        if window.0 == 0 || window.1 == 0 {
            return Err(Error::invalid(OP, format!("window extents must be >= 1, got {window:?}")));
        }
        if window.0 > hw.0 || window.1 > hw.1 {
            return Err(Error::invalid(OP, format!("window {window:?} larger than input {hw:?}")));
        }
        let ohw = (hw.0.div_ceil(window.0), hw.1.div_ceil(window.1));
        let n_out = batch * c * ohw.0 * ohw.1;
        let (out, argmax) = match self.replayed(OP, n_out, false)? {
            Some(Decision::Pool(argmax)) => {
                let xt = &self.nodes[x.index].value;
                (argmax.iter().map(|&i| xt.data()[i]).collect(), argmax)
            }
            _ => {
                let xt = &self.nodes[x.index].value;
                pool::maxpool2d_forward(xt.data(), batch * c, hw, window)
            }
        };
        self.remember(|| Decision::Pool(argmax.clone()));
        let xt = &self.nodes[x.index].value;
        let dims = with_chw(xt.dims(), c, ohw);
        Ok(self.emit1(Op::MaxPool { argmax }, &[x], Tensor::from_parts(dims, out)))
    }

    /// Batch normalization over every axis except the channel axis (axis 1,
    /// or axis 0 for unbatched `[C,H,W]` input).
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut RunningStats<T>,
        mode: NormMode,
    ) -> Result<Var> {
        const OP: &str = "batch_norm";
        let xt = &self.nodes[self.idx(x)?].value;
        let (batch, channels, spatial) = match xt.dims() {
            [c, h, w] => (1, *c, h * w),
            [b, c, rest @ ..] => (*b, *c, rest.iter().product()),
            d => return Err(Error::shape(OP, "rank", ">= 2", d.len())),
        };
        if batch * spatial == 0 {
            return Err(Error::invalid(OP, "zero sample count"));
        }
        let gt = &self.nodes[self.idx(gamma)?].value;
        let bt = &self.nodes[self.idx(beta)?].value;
        for (name, t) in [("gamma", &**gt), ("beta", &**bt), ("running mean", &state.mean), ("running var", &state.var)] {
            if t.dims() != [channels] {
                return Err(Error::shape(OP, name, channels, format!("{:?}", t.dims())));
            }
        }
        let (op, y) = match mode {
            NormMode::Train => {
                let (y, stats) = norm::batch_norm_train(xt.data(), batch, channels, spatial, gt.data(), bt.data(), BN_EPS);
                for c in 0..channels {
                    let rm = &mut state.mean.data_mut()[c];
                    *rm = T::lit((1.0 - BN_MOMENTUM) * rm.as_f64() + BN_MOMENTUM * stats.mean[c]);
                    let rv = &mut state.var.data_mut()[c];
                    *rv = T::lit((1.0 - BN_MOMENTUM) * rv.as_f64() + BN_MOMENTUM * stats.var[c]);
                }
                (Op::BatchNormTrain { batch, channels, spatial, stats }, y)
            }
            NormMode::Eval => {
                let (y, xhat) = norm::batch_norm_eval(
                    xt.data(),
                    batch,
                    channels,
                    spatial,
                    gt.data(),
                    bt.data(),
                    state.mean.data(),
                    state.var.data(),
                    BN_EPS,
                );
                let inv_std = state.var.data().iter().map(|v| T::lit(1.0 / (v.as_f64() + BN_EPS).sqrt())).collect();
                (Op::BatchNormEval { batch, channels, spatial, inv_std, xhat }, y)
            }
        };
        let dims = xt.dims().to_vec();
        Ok(self.emit1(op, &[x, gamma, beta], Tensor::from_parts(dims, y)))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let xi = self.idx(x)?;
        self.nodes[xi].value.ensure_finite("activation", "input")?;
        if let Some(slope) = kind.off_slope() {
            let len = self.nodes[xi].value.len();
            if let Some(Decision::Gate(mask)) = self.replayed("activation", len, true)? {
                let xt = &self.nodes[xi].value;
                let off = T::lit(slope);
                let data = xt.data().iter().zip(&mask).map(|(&v, &on)| if on { v } else { v * off }).collect();
                let out = Tensor::from_parts(xt.dims().to_vec(), data);
                return Ok(self.emit1(Op::Gate { mask, slope }, &[x], out));
            }
            let mask: Vec<bool> = self.nodes[xi].value.data().iter().map(|&v| kind.on(v)).collect();
            self.remember(|| Decision::Gate(mask));
        }
        let xt = &self.nodes[xi].value;
        let data = xt.data().iter().map(|&v| kind.apply(v)).collect();
        let out = Tensor::from_parts(xt.dims().to_vec(), data);
        Ok(self.emit1(Op::Act(kind), &[x], out))
    }

    pub fn leaky_relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::LeakyRelu)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Tanh)
    }

    /// Affine map `x W^T + b` for `x` of shape `[C]` or `[B, C]`, `W` of shape `[C_out, C]`.
    pub fn fully_connected(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        const OP: &str = "fully_connected";
        let xt = &self.nodes[self.idx(x)?].value;
        let wt = &self.nodes[self.idx(weight)?].value;
        let (batch, cin) = match *xt.dims() {
            [c] => (1, c),
            [b, c] => (b, c),
            _ => return Err(Error::shape(OP, "input rank", "1 or 2", xt.rank())),
        };
        if wt.rank() != 2 || wt.dims()[1] != cin {
            return Err(Error::shape(OP, "inner", cin, format!("{:?}", wt.dims())));
        }
        let cout = wt.dims()[0];
        let mut out = vec![T::zero(); batch * cout];
        if let Some(b) = bias {
            let bt = &self.nodes[self.idx(b)?].value;
            if bt.dims() != [cout] {
                return Err(Error::shape(OP, "bias", cout, format!("{:?}", bt.dims())));
            }
            for row in out.chunks_mut(cout) {
                row.copy_from_slice(bt.data());
            }
        }
        // out[b, o] += sum_c x[b, c] W[o, c]
        T::gemm(batch, cin, cout, T::one(), xt.data(), (cin as isize, 1), wt.data(), (1, cin as isize), T::one(), &mut out, (cout as isize, 1));
        let dims = if xt.rank() == 1 { vec![cout] } else { vec![batch, cout] };
        let mut ins = vec![x, weight];
        ins.extend(bias);
        Ok(self.emit1(Op::FullyConnected { batch, in_features: cin, out_features: cout }, &ins, Tensor::from_parts(dims, out)))
    }

    /// Spatial mean per channel: `[C,H,W] -> [C]`, `[B,C,H,W] -> [B,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xt = &self.nodes[self.idx(x)?].value;
        let (batch, c, hw) = batch_chw("global_avg_pool", xt.dims())?;
        let spatial = hw.0 * hw.1;
        let data = xt
            .data()
            .chunks(spatial)
            .map(|p| T::lit(p.iter().map(|v| v.as_f64()).sum::<f64>() / spatial as f64))
            .collect();
        let dims = if xt.rank() == 3 { vec![c] } else { vec![batch, c] };
        Ok(self.emit1(Op::GlobalAvgPool { planes: batch * c, spatial }, &[x], Tensor::from_parts(dims, data)))
    }

    /// Concatenates along the channel axis, preserving input order.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        const OP: &str = "concat_channels";
        let first = *xs.first().ok_or_else(|| Error::invalid(OP, "empty input list"))?;
        let d0 = self.value(first).dims().to_vec();
        let (batch, _, hw) = batch_chw(OP, &d0)?;
        let mut channels = Vec::with_capacity(xs.len());
        for &v in xs {
            let d = self.nodes[self.idx(v)?].value.dims();
            let (b, c, h) = batch_chw(OP, d)?;
            if d.len() != d0.len() || b != batch {
                return Err(Error::shape(OP, "batch", format!("{d0:?}"), format!("{d:?}")));
            }
            if h != hw {
                return Err(Error::shape(OP, "spatial", format!("{hw:?}"), format!("{h:?}")));
            }
            channels.push(c);
        }
        let spatial = hw.0 * hw.1;
        let total: usize = channels.iter().sum();
        let mut data = Vec::with_capacity(batch * total * spatial);
        for b in 0..batch {
            for (&v, &c) in xs.iter().zip(&channels) {
                let src = self.nodes[v.index].value.data();
                data.extend_from_slice(&src[b * c * spatial..(b + 1) * c * spatial]);
            }
        }
        let dims = with_chw(&d0, total, hw);
        Ok(self.emit1(Op::Concat { batch, channels, spatial }, xs, Tensor::from_parts(dims, data)))
    }

    /// Multiplies each channel plane of `x` (`[C,H,W]` / `[B,C,H,W]`) by the
    /// matching entry of `w` (`[C]` / `[B,C]`).
    pub fn scale_channels(&mut self, x: Var, w: Var) -> Result<Var> {
        const OP: &str = "scale_channels";
        let xt = &self.nodes[self.idx(x)?].value;
        let wt = &self.nodes[self.idx(w)?].value;
        let (batch, c, hw) = batch_chw(OP, xt.dims())?;
        let expected: Vec<usize> = if xt.rank() == 3 { vec![c] } else { vec![batch, c] };
        if wt.dims() != expected.as_slice() {
            return Err(Error::shape(OP, "weights", format!("{expected:?}"), format!("{:?}", wt.dims())));
        }
        let spatial = hw.0 * hw.1;
        let data = xt
            .data()
            .chunks(spatial)
            .zip(wt.data())
            .flat_map(|(p, &s)| p.iter().map(move |&v| v * s))
            .collect();
        let dims = xt.dims().to_vec();
        Ok(self.emit1(Op::ScaleChannels { spatial }, &[x, w], Tensor::from_parts(dims, data)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (da, db) = (self.nodes[ai].value.dims(), self.nodes[bi].value.dims());
        if da != db {
            return Err(Error::shape(op, "dims", format!("{da:?}"), format!("{db:?}")));
        }
        Ok((ai, bi))
    }

    /// Hadamard product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = self.same_shape("mul", a, b)?;
        let (at, bt) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let data = at.data().iter().zip(bt.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_parts(at.dims().to_vec(), data);
        Ok(self.emit1(Op::Mul, &[a, b], out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = self.same_shape("add", a, b)?;
        let (at, bt) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let data = at.data().iter().zip(bt.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_parts(at.dims().to_vec(), data);
        Ok(self.emit1(Op::Add, &[a, b], out))
    }

    /// Index-wise two-way softmax: returns `(e^a / (e^a + e^b), e^b / (e^a + e^b))`.
    pub fn softmax_pair(&mut self, a: Var, b: Var) -> Result<(Var, Var)> {
        let (ai, bi) = self.same_shape("softmax_pair", a, b).map_err(|e| match e {
            Error::ShapeMismatch { expected, got, .. } => Error::shape("softmax_pair", "length", expected, got),
            other => other,
        })?;
        let (at, bt) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let n = at.len();
        let (mut wa, mut wb) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for (&x, &y) in at.data().iter().zip(bt.data()) {
            let m = x.max(y);
            let (ex, ey) = ((x - m).exp(), (y - m).exp());
            let s = ex + ey;
            wa.push(ex / s);
            wb.push(ey / s);
        }
        let dims = at.dims().to_vec();
        let outs = self.emit(Op::SoftmaxPair, &[a, b], vec![Tensor::from_parts(dims.clone(), wa), Tensor::from_parts(dims, wb)]);
        Ok((outs[0], outs[1]))
    }

    fn axis_split(dims: &[usize], axis: usize) -> (usize, usize, usize) {
        (dims[..axis].iter().product(), dims[axis], dims[axis + 1..].iter().product())
    }

    /// Takes slice `index` along `axis`, dropping that axis.
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let xt = &self.nodes[self.idx(x)?].value;
        if axis >= xt.rank() || index >= xt.dims()[axis] || xt.rank() < 2 {
            return Err(Error::invalid("select", format!("index {index} on axis {axis} of {:?}", xt.dims())));
        }
        let (outer, len, inner) = Self::axis_split(xt.dims(), axis);
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let s = (o * len + index) * inner;
            data.extend_from_slice(&xt.data()[s..s + inner]);
        }
        let mut dims = xt.dims().to_vec();
        dims.remove(axis);
        Ok(self.emit1(Op::Select { outer, len, inner, index }, &[x], Tensor::from_parts(dims, data)))
    }

    /// Stacks equally shaped tensors along a new axis `axis`.
    pub fn stack(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::invalid("stack", "empty input list"))?;
        let d0 = self.value(first).dims().to_vec();
        if axis > d0.len() {
            return Err(Error::invalid("stack", format!("axis {axis} for rank {}", d0.len())));
        }
        for &v in xs {
            let d = self.nodes[self.idx(v)?].value.dims();
            if d != d0.as_slice() {
                return Err(Error::shape("stack", "dims", format!("{d0:?}"), format!("{d:?}")));
            }
        }
        let outer: usize = d0[..axis].iter().product();
        let inner: usize = d0[axis..].iter().product();
        let mut data = Vec::with_capacity(outer * xs.len() * inner);
        for o in 0..outer {
            for &v in xs {
                data.extend_from_slice(&self.nodes[v.index].value.data()[o * inner..(o + 1) * inner]);
            }
        }
        let mut dims = d0;
        dims.insert(axis, xs.len());
        Ok(self.emit1(Op::Stack { outer, inner }, xs, Tensor::from_parts(dims, data)))
    }

    /// Splits `axis` into `parts` equal chunks.
    pub fn chunk(&mut self, x: Var, axis: usize, parts: usize) -> Result<Vec<Var>> {
        let xt = &self.nodes[self.idx(x)?].value;
        if axis >= xt.rank() || parts == 0 || xt.dims()[axis] % parts != 0 {
            return Err(Error::invalid("chunk", format!("{parts} parts on axis {axis} of {:?}", xt.dims())));
        }
        let (outer, len, inner) = Self::axis_split(xt.dims(), axis);
        let step = len / parts;
        let outs = (0..parts)
            .map(|p| {
                let mut data = Vec::with_capacity(outer * step * inner);
                for o in 0..outer {
                    let s = (o * len + p * step) * inner;
                    data.extend_from_slice(&xt.data()[s..s + step * inner]);
                }
                let mut dims = xt.dims().to_vec();
                dims[axis] = step;
                Tensor::from_parts(dims, data)
            })
            .collect();
        Ok(self.emit(Op::Chunk { outer, len, inner, parts }, &[x], outs))
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let out = self.nodes[self.idx(x)?].value.reshape(dims)?;
        Ok(self.emit1(Op::Reshape, &[x], out))
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.nodes[self.idx(x)?].value.sum_f64();
        Ok(self.emit1(Op::Sum, &[x], Tensor::scalar(T::lit(s))))
    }

    /// Mean squared error over all elements, as a `[1]` tensor.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (pi, ti) = self.same_shape("mse_loss", pred, target)?;
        let (pt, tt) = (&self.nodes[pi].value, &self.nodes[ti].value);
        let s: f64 = pt
            .data()
            .iter()
            .zip(tt.data())
            .map(|(&p, &t)| {
                let d = p.as_f64() - t.as_f64();
                d * d
            })
            .sum();
        let out = Tensor::scalar(T::lit(s / pt.len() as f64));
        Ok(self.emit1(Op::Mse, &[pred, target], out))
    }

    // ----------------------------------------------------------- backward

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let li = self.idx(loss)?;
        if self.nodes[li].value.len() != 1 {
            return Err(Error::Tape(format!("loss must be scalar, got dims {:?}", self.nodes[li].value.dims())));
        }
        if !self.nodes[li].tracked {
            return Err(Error::Tape("loss was not produced by recorded operations".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[li] = Some(vec![T::one()]);
        let mut visited = 0;
        for rec in self.records.iter().rev() {
            visited += 1;
            if rec.outputs.iter().all(|&o| grads[o].is_none()) {
                continue;
            }
            let dys: Vec<Cow<'_, [T]>> = rec
                .outputs
                .iter()
                .map(|&o| match &grads[o] {
                    Some(g) => Cow::Borrowed(g.as_slice()),
                    None => Cow::Owned(vec![T::zero(); self.nodes[o].value.len()]),
                })
                .collect();
            let din = self.vjp(rec, &dys);
            drop(dys);
            for (&i, g) in rec.inputs.iter().zip(din) {
                if let Some(g) = g {
                    if self.nodes[i].tracked {
                        accumulate(&mut grads[i], g);
                    }
                }
            }
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.filter(|_| n.tracked).map(|g| Tensor::from_parts(n.value.dims().to_vec(), g)))
            .collect();
        Ok(Gradients { tape: self.id, grads, visited })
    }

    fn val(&self, i: usize) -> &[T] {
        self.nodes[i].value.data()
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].tracked
    }

    fn vjp(&self, rec: &Record<T>, dys: &[Cow<'_, [T]>]) -> Vec<Option<Vec<T>>> {
        let ins = &rec.inputs;
        let dy = &dys[0];
        match &rec.op {
            Op::Conv2d { geom, batch, out_channels } => {
                let (dx, dw, db) = conv::conv2d_backward(self.val(ins[0]), *batch, geom, self.val(ins[1]), *out_channels, dy);
                let dx = self.wants(ins[0]).then_some(dx);
                let mut out = vec![dx, Some(dw)];
                if ins.len() == 3 {
                    out.push(Some(db));
                }
                out
            }
            Op::ConvTranspose2d { geom, batch, in_channels } => {
                let (dx, dw, db) =
                    conv::conv_transpose2d_backward(self.val(ins[0]), *batch, *in_channels, geom, self.val(ins[1]), dy);
                let mut out = vec![self.wants(ins[0]).then_some(dx), Some(dw)];
                if ins.len() == 3 {
                    out.push(Some(db));
                }
                out
            }
            Op::MaxPool { argmax } => vec![Some(pool::maxpool2d_backward(self.val(ins[0]).len(), argmax, dy))],
            Op::BatchNormTrain { batch, channels, spatial, stats } => {
                let (dx, dg, db) = norm::batch_norm_train_backward(dy, *batch, *channels, *spatial, self.val(ins[1]), stats);
                vec![Some(dx), Some(dg), Some(db)]
            }
            Op::BatchNormEval { batch, channels, spatial, inv_std, xhat } => {
                let gamma = self.val(ins[1]);
                let mut dx = vec![T::zero(); dy.len()];
                let mut dg = vec![T::zero(); *channels];
                let mut db = vec![T::zero(); *channels];
                for b in 0..*batch {
                    for c in 0..*channels {
                        let s = (b * channels + c) * spatial;
                        let k = gamma[c] * inv_std[c];
                        let (mut sg, mut sb) = (0.0, 0.0);
                        for i in s..s + spatial {
                            dx[i] = dy[i] * k;
                            sg += (dy[i] * xhat[i]).as_f64();
                            sb += dy[i].as_f64();
                        }
                        dg[c] += T::lit(sg);
                        db[c] += T::lit(sb);
                    }
                }
                vec![Some(dx), Some(dg), Some(db)]
            }
            Op::Gate { mask, slope } => {
                let off = T::lit(*slope);
                vec![Some(dy.iter().zip(mask).map(|(&g, &on)| if on { g } else { g * off }).collect())]
            }
            Op::Act(kind) => {
                let x = self.val(ins[0]);
                let y = self.val(rec.outputs[0]);
                let dx = x.iter().zip(y).zip(dy.iter()).map(|((&x, &y), &g)| g * kind.derivative(x, y)).collect();
                vec![Some(dx)]
            }
            Op::FullyConnected { batch, in_features: cin, out_features: cout } => {
                let (b, ci, co) = (*batch, *cin, *cout);
                let x = self.val(ins[0]);
                let w = self.val(ins[1]);
                let mut dx = vec![T::zero(); b * ci];
                // dx = dy @ W
                T::gemm(b, co, ci, T::one(), dy, (co as isize, 1), w, (ci as isize, 1), T::zero(), &mut dx, (ci as isize, 1));
                let mut dw = vec![T::zero(); co * ci];
                // dW = dy^T @ x
                T::gemm(co, b, ci, T::one(), dy, (1, co as isize), x, (ci as isize, 1), T::zero(), &mut dw, (ci as isize, 1));
                let mut out = vec![Some(dx), Some(dw)];
                if ins.len() == 3 {
                    let mut db = vec![T::zero(); co];
                    for row in dy.chunks(co) {
                        db.iter_mut().zip(row).for_each(|(a, &g)| *a += g);
                    }
                    out.push(Some(db));
                }
                out
            }
            Op::GlobalAvgPool { planes, spatial } => {
                let inv = T::lit(1.0 / *spatial as f64);
                let mut dx = Vec::with_capacity(planes * spatial);
                for &g in dy.iter() {
                    dx.extend(std::iter::repeat(g * inv).take(*spatial));
                }
                vec![Some(dx)]
            }
            Op::Concat { batch, channels, spatial } => {
                let total: usize = channels.iter().sum();
                let mut out: Vec<Vec<T>> = channels.iter().map(|c| Vec::with_capacity(batch * c * spatial)).collect();
                for b in 0..*batch {
                    let mut off = b * total * spatial;
                    for (o, &c) in out.iter_mut().zip(channels) {
                        o.extend_from_slice(&dy[off..off + c * spatial]);
                        off += c * spatial;
                    }
                }
                out.into_iter().map(Some).collect()
            }
            Op::ScaleChannels { spatial } => {
                let x = self.val(ins[0]);
                let w = self.val(ins[1]);
                let mut dx = Vec::with_capacity(x.len());
                let mut dw = Vec::with_capacity(w.len());
                for ((xp, gp), &s) in x.chunks(*spatial).zip(dy.chunks(*spatial)).zip(w) {
                    dx.extend(gp.iter().map(|&g| g * s));
                    dw.push(T::lit(xp.iter().zip(gp).map(|(&a, &g)| (a * g).as_f64()).sum()));
                }
                vec![Some(dx), Some(dw)]
            }
            Op::Mul => {
                let (a, b) = (self.val(ins[0]), self.val(ins[1]));
                let da = b.iter().zip(dy.iter()).map(|(&v, &g)| v * g).collect();
                let db = a.iter().zip(dy.iter()).map(|(&v, &g)| v * g).collect();
                vec![Some(da), Some(db)]
            }
            Op::Add => vec![Some(dy.to_vec()), Some(dy.to_vec())],
            Op::SoftmaxPair => {
                let (wa, wb) = (self.val(rec.outputs[0]), self.val(rec.outputs[1]));
                let (ga, gb) = (&dys[0], &dys[1]);
                let da: Vec<T> = (0..wa.len()).map(|i| wa[i] * wb[i] * (ga[i] - gb[i])).collect();
                let db = da.iter().map(|&v| -v).collect();
                vec![Some(da), Some(db)]
            }
            Op::Select { outer, len, inner, index } => {
                let mut dx = vec![T::zero(); outer * len * inner];
                for o in 0..*outer {
                    let s = (o * len + index) * inner;
                    dx[s..s + inner].copy_from_slice(&dy[o * inner..(o + 1) * inner]);
                }
                vec![Some(dx)]
            }
            Op::Stack { outer, inner } => {
                let k = ins.len();
                (0..k)
                    .map(|j| {
                        let mut d = Vec::with_capacity(outer * inner);
                        for o in 0..*outer {
                            let s = (o * k + j) * inner;
                            d.extend_from_slice(&dy[s..s + inner]);
                        }
                        Some(d)
                    })
                    .collect()
            }
            Op::Chunk { outer, len, inner, parts } => {
                let step = len / parts;
                let mut dx = vec![T::zero(); outer * len * inner];
                for (p, g) in dys.iter().enumerate() {
                    for o in 0..*outer {
                        let s = (o * len + p * step) * inner;
                        dx[s..s + step * inner].copy_from_slice(&g[o * step * inner..(o + 1) * step * inner]);
                    }
                }
                vec![Some(dx)]
            }
            Op::Reshape => vec![Some(dy.to_vec())],
            Op::Sum => vec![Some(vec![dy[0]; self.val(ins[0]).len()])],
            Op::Mse => {
                let (p, t) = (self.val(ins[0]), self.val(ins[1]));
                let k = T::lit(2.0 / p.len() as f64) * dy[0];
                let dp: Vec<T> = p.iter().zip(t).map(|(&a, &b)| k * (a - b)).collect();
                let dt = dp.iter().map(|&v| -v).collect();
                vec![Some(dp), Some(dt)]
            }
        }
    }
}
