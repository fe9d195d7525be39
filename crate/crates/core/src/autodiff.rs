//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its output value and the
//! inputs needed to differentiate it. [`Tape::backward`] walks the nodes
//! in reverse insertion order, which is a reverse topological order
//! because a node can only reference nodes created before it.
//!
//! Operations check their outputs for NaN/Inf and fail with
//! [`Error::NonFinite`] instead of propagating them.

use std::collections::HashMap;

use crate::conv::{self, gemm, Pad};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShiftDir {
    Down,
    Right,
}

/// How the second operand of a binary op is expanded to the first.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    Scalar,
    /// `b.shape == a.shape[..k]`, repeated over the trailing `inner` values.
    Leading { inner: usize },
}

impl Broadcast {
    fn resolve(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        if a == b {
            return Ok(Broadcast::Same);
        }
        if b.iter().product::<usize>() == 1 && b.len() <= 1 {
            return Ok(Broadcast::Scalar);
        }
        if b.len() < a.len() && a[..b.len()] == *b {
            return Ok(Broadcast::Leading {
                inner: a[b.len()..].iter().product(),
            });
        }
        Err(Error::shape(op, format!("cannot broadcast {b:?} onto {a:?}")))
    }

    fn index(self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Scalar => 0,
            Broadcast::Leading { inner } => i / inner,
        }
    }
}

/// Deliberately wrong backward rules, used as negative controls by the
/// gradient audit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackwardFault {
    /// Uses `σ(x)` instead of `σ(x)(1-σ(x))`.
    SigmoidDerivative,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, pad: Pad },
    Add { a: Var, b: Var, bcast: Broadcast },
    Mul { a: Var, b: Var, bcast: Broadcast },
    AddChannel { a: Var, bias: Var },
    Scale { a: Var, factor: f64 },
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    MatMul { a: Var, b: Var },
    Reshape(Var),
    SliceChannels { a: Var, start: usize },
    ConcatChannels { a: Var, b: Var },
    Shift { a: Var, dir: ShiftDir, amount: usize },
    Downsample { a: Var, factor: usize },
    Upsample { a: Var, factor: usize },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        classes: usize,
        inner: usize,
        probs: Vec<f64>,
    },
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Record of executed operations for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    fault: Option<BackwardFault>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`.
    pub fn wrt(&self, var: Var) -> Result<&Tensor> {
        self.grads
            .get(var.0)
            .and_then(Option::as_ref)
            .ok_or(Error::Detached(var.0))
    }

    /// Gradient for a parameter, `None` if the loss does not depend on it.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .get(&id)
            .and_then(|v| self.grads[v.0].as_ref())
    }
}

fn channel_layout(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(op, format!("need a channel axis, got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fault(fault: BackwardFault) -> Self {
        Self {
            fault: Some(fault),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Sign of every ReLU input recorded so far (`true` for positive), in
    /// tape order. Two runs with equal patterns lie on the same linear piece.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(a),
                _ => None,
            })
            .flat_map(|a| self.value(a).data().iter().map(|&x| x > 0.0))
            .collect()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        value.check_finite(op_name)?;
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Input that gradients can be requested for.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient (masks, data).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone());
        self.params.insert(id, v);
        v
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, pad: Pad) -> Result<Var> {
        let out = conv::conv2d(self.value(input), self.value(kernel), pad)?;
        self.push("conv2d", out, Op::Conv2d { input, kernel, pad }, &[input, kernel])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let bcast = Broadcast::resolve("add", self.value(a).shape(), self.value(b).shape())?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv.data()[bcast.index(i)])
            .collect();
        let out = Tensor::new(av.shape(), data)?;
        self.push("add", out, Op::Add { a, b, bcast }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let bcast = Broadcast::resolve("mul", self.value(a).shape(), self.value(b).shape())?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * bv.data()[bcast.index(i)])
            .collect();
        let out = Tensor::new(av.shape(), data)?;
        self.push("mul", out, Op::Mul { a, b, bcast }, &[a, b])
    }

    /// Adds `bias[c]` to every element of channel `c` (axis 1).
    pub fn add_channel(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, c, inner) = channel_layout("add_channel", self.value(a).shape())?;
        if self.value(bias).shape() != [c] {
            return Err(Error::shape(
                "add_channel",
                format!("bias {:?} for {c} channels", self.value(bias).shape()),
            ));
        }
        let (av, bv) = (self.value(a), self.value(bias));
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv.data()[(i / inner) % c])
            .collect();
        let out = Tensor::new(av.shape(), data)?;
        self.push("add_channel", out, Op::AddChannel { a, bias }, &[a, bias])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * factor);
        self.push("scale", out, Op::Scale { a, factor }, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        self.push("tanh", out, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push("relu", out, Op::Relu(a), &[a])
    }

    /// `[m, k] × [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = match (av.shape(), bv.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            (sa, sb) => return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}"))),
        };
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), (k, 1), bv.data(), (n, 1), 0.0, &mut out, (n, 1));
        let out = Tensor::new(&[m, n], out)?;
        self.push("matmul", out, Op::MatMul { a, b }, &[a, b])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    /// Channels `start..start + len` along axis 1.
    pub fn slice_channels(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let (n, c, inner) = channel_layout("slice_channels", av.shape())?;
        if start + len > c {
            return Err(Error::shape(
                "slice_channels",
                format!("{start}..{} of {c} channels", start + len),
            ));
        }
        let mut data = Vec::with_capacity(n * len * inner);
        for b in 0..n {
            data.extend_from_slice(&av.data()[(b * c + start) * inner..(b * c + start + len) * inner]);
        }
        let mut shape = av.shape().to_vec();
        shape[1] = len;
        let out = Tensor::new(&shape, data)?;
        self.push("slice_channels", out, Op::SliceChannels { a, start }, &[a])
    }

    /// Splits `2p` channels into the first and second `p`.
    pub fn split_channels(&mut self, a: Var) -> Result<(Var, Var)> {
        let c = channel_layout("split_channels", self.value(a).shape())?.1;
        if c % 2 != 0 {
            return Err(Error::shape(
                "split_channels",
                format!("odd channel count {c}"),
            ));
        }
        let first = self.slice_channels(a, 0, c / 2)?;
        let second = self.slice_channels(a, c / 2, c / 2)?;
        Ok((first, second))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, ca, inner) = channel_layout("concat_channels", av.shape())?;
        let (nb, cb, inner_b) = channel_layout("concat_channels", bv.shape())?;
        if n != nb || inner != inner_b || av.shape()[2..] != bv.shape()[2..] {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} with {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut data = Vec::with_capacity(av.numel() + bv.numel());
        for i in 0..n {
            data.extend_from_slice(&av.data()[i * ca * inner..(i + 1) * ca * inner]);
            data.extend_from_slice(&bv.data()[i * cb * inner..(i + 1) * cb * inner]);
        }
        let mut shape = av.shape().to_vec();
        shape[1] = ca + cb;
        let out = Tensor::new(&shape, data)?;
        self.push("concat_channels", out, Op::ConcatChannels { a, b }, &[a, b])
    }

    /// Moves content `amount` pixels down or right, zero-filling the vacated
    /// rows/columns (pad then crop).
    pub fn shift(&mut self, a: Var, dir: ShiftDir, amount: usize) -> Result<Var> {
        let av = self.value(a);
        let (n, c, h, w) = av.dims4("shift")?;
        let extent = match dir {
            ShiftDir::Down => h,
            ShiftDir::Right => w,
        };
        if amount >= extent {
            return Err(Error::Invalid(format!(
                "shift by {amount} on an axis of extent {extent}"
            )));
        }
        let mut out = Tensor::zeros(av.shape());
        let src = av.data();
        let dst = out.data_mut();
        for p in 0..n * c {
            let base = p * h * w;
            for y in 0..h {
                for x in 0..w {
                    let (sy, sx) = match dir {
                        ShiftDir::Down if y >= amount => (y - amount, x),
                        ShiftDir::Right if x >= amount => (y, x - amount),
                        _ => continue,
                    };
                    dst[base + y * w + x] = src[base + sy * w + sx];
                }
            }
        }
        self.push("shift", out, Op::Shift { a, dir, amount }, &[a])
    }

    /// Keeps every `factor`-th row and column starting at 0.
    pub fn downsample(&mut self, a: Var, factor: usize) -> Result<Var> {
        let av = self.value(a);
        let (n, c, h, w) = av.dims4("downsample")?;
        if factor == 0 {
            return Err(Error::Invalid("downsample factor 0".into()));
        }
        let (ho, wo) = (h.div_ceil(factor), w.div_ceil(factor));
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        let (src, dst) = (av.data(), out.data_mut());
        for p in 0..n * c {
            for y in 0..ho {
                for x in 0..wo {
                    dst[(p * ho + y) * wo + x] = src[(p * h + y * factor) * w + x * factor];
                }
            }
        }
        self.push("downsample", out, Op::Downsample { a, factor }, &[a])
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample(&mut self, a: Var, factor: usize) -> Result<Var> {
        let av = self.value(a);
        let (n, c, h, w) = av.dims4("upsample")?;
        if factor == 0 {
            return Err(Error::Invalid("upsample factor 0".into()));
        }
        let (ho, wo) = (h * factor, w * factor);
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        let (src, dst) = (av.data(), out.data_mut());
        for p in 0..n * c {
            for y in 0..ho {
                for x in 0..wo {
                    dst[(p * ho + y) * wo + x] = src[(p * h + y / factor) * w + x / factor];
                }
            }
        }
        self.push("upsample", out, Op::Upsample { a, factor }, &[a])
    }

    /// Mean cross-entropy of `logits[N, L]` against integer targets.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        if self.value(logits).rank() != 2 {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("expected [N, L], got {:?}", self.value(logits).shape()),
            ));
        }
        self.cross_entropy_axis(logits, 1, targets)
    }

    /// Mean cross-entropy with the class axis at `axis`. Logits are read as
    /// `[outer, L, inner]`; `targets[o * inner + i]` labels position `(o, i)`.
    /// Log-sum-exp is evaluated with max subtraction.
    pub fn cross_entropy_axis(&mut self, logits: Var, axis: usize, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let shape = lv.shape();
        if axis >= shape.len() {
            return Err(Error::shape("cross_entropy", format!("axis {axis} of {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let classes = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        if targets.len() != outer * inner {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for {} positions", targets.len(), outer * inner),
            ));
        }
        let data = lv.data();
        let mut probs = vec![0.0; data.len()];
        let mut total = 0.0;
        for o in 0..outer {
            for i in 0..inner {
                let t = targets[o * inner + i];
                if t >= classes {
                    return Err(Error::TargetOutOfRange { target: t, classes });
                }
                let at = |l: usize| (o * classes + l) * inner + i;
                let max = (0..classes).map(|l| data[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in 0..classes {
                    let e = (data[at(l)] - max).exp();
                    probs[at(l)] = e;
                    z += e;
                }
                for l in 0..classes {
                    probs[at(l)] /= z;
                }
                total += max + z.ln() - data[at(t)];
            }
        }
        let count = (outer * inner).max(1);
        let out = Tensor::scalar(total / count as f64);
        self.push(
            "cross_entropy",
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                classes,
                inner,
                probs,
            },
            &[logits],
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push("sum", out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel().max(1);
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.needs_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |v: Var, t: Tensor| {
            if !self.needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, x) in existing.data_mut().iter_mut().zip(t.data()) {
                        *e += x;
                    }
                }
                slot => *slot = Some(t),
            }
        };
        let gd = g.data();
        match node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, pad } => {
                let (di, dk) = conv::conv2d_backward(
                    self.value(input),
                    self.value(kernel),
                    pad,
                    g,
                    self.needs(input),
                    self.needs(kernel),
                )?;
                if let Some(di) = di {
                    acc(input, di);
                }
                if let Some(dk) = dk {
                    acc(kernel, dk);
                }
            }
            Op::Add { a, b, bcast } => {
                acc(a, g.clone());
                if self.needs(b) {
                    acc(b, reduce_broadcast(g, self.value(b).shape(), bcast));
                }
            }
            Op::Mul { a, b, bcast } => {
                let (av, bv) = (self.value(a), self.value(b));
                if self.needs(a) {
                    let d = gd
                        .iter()
                        .enumerate()
                        .map(|(i, x)| x * bv.data()[bcast.index(i)])
                        .collect();
                    acc(a, Tensor::new(av.shape(), d)?);
                }
                if self.needs(b) {
                    let prod = Tensor::new(
                        av.shape(),
                        gd.iter().zip(av.data()).map(|(x, y)| x * y).collect(),
                    )?;
                    acc(b, reduce_broadcast(&prod, bv.shape(), bcast));
                }
            }
            Op::AddChannel { a, bias } => {
                acc(a, g.clone());
                if self.needs(bias) {
                    let (_, c, inner) = channel_layout("add_channel", g.shape())?;
                    let mut d = vec![0.0; c];
                    for (i, x) in gd.iter().enumerate() {
                        d[(i / inner) % c] += x;
                    }
                    acc(bias, Tensor::new(&[c], d)?);
                }
            }
            Op::Scale { a, factor } => acc(a, g.map(|x| x * factor)),
            Op::Tanh(a) => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(x, y)| x * (1.0 - y * y)).collect();
                acc(a, Tensor::new(g.shape(), d)?);
            }
            Op::Sigmoid(a) => {
                let s = node.value.data();
                let d = match self.fault {
                    Some(BackwardFault::SigmoidDerivative) => {
                        gd.iter().zip(s).map(|(x, s)| x * s).collect()
                    }
                    None => gd.iter().zip(s).map(|(x, s)| x * s * (1.0 - s)).collect(),
                };
                acc(a, Tensor::new(g.shape(), d)?);
            }
            Op::Relu(a) => {
                let xs = self.value(a).data();
                let d = gd
                    .iter()
                    .zip(xs)
                    .map(|(x, v)| if *v > 0.0 { *x } else { 0.0 })
                    .collect();
                acc(a, Tensor::new(g.shape(), d)?);
            }
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(a), self.value(b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.needs(a) {
                    let mut d = vec![0.0; m * k];
                    gemm(m, n, k, gd, (n, 1), bv.data(), (1, n), 0.0, &mut d, (k, 1));
                    acc(a, Tensor::new(&[m, k], d)?);
                }
                if self.needs(b) {
                    let mut d = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), (1, k), gd, (n, 1), 0.0, &mut d, (n, 1));
                    acc(b, Tensor::new(&[k, n], d)?);
                }
            }
            Op::Reshape(a) => acc(a, g.clone().reshape(self.value(a).shape())?),
            Op::SliceChannels { a, start } => {
                let src_shape = self.value(a).shape();
                let (n, c, inner) = channel_layout("slice_channels", src_shape)?;
                let len = g.shape()[1];
                let mut d = Tensor::zeros(src_shape);
                for b in 0..n {
                    d.data_mut()[(b * c + start) * inner..(b * c + start + len) * inner]
                        .copy_from_slice(&gd[b * len * inner..(b + 1) * len * inner]);
                }
                acc(a, d);
            }
            Op::ConcatChannels { a, b } => {
                let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
                let (n, ca, inner) = channel_layout("concat_channels", sa)?;
                let cb = sb[1];
                let mut da = Vec::with_capacity(n * ca * inner);
                let mut db = Vec::with_capacity(n * cb * inner);
                for i in 0..n {
                    let base = i * (ca + cb) * inner;
                    da.extend_from_slice(&gd[base..base + ca * inner]);
                    db.extend_from_slice(&gd[base + ca * inner..base + (ca + cb) * inner]);
                }
                acc(a, Tensor::new(sa, da)?);
                acc(b, Tensor::new(sb, db)?);
            }
            Op::Shift { a, dir, amount } => {
                let (n, c, h, w) = g.dims4("shift")?;
                let mut d = Tensor::zeros(g.shape());
                let dd = d.data_mut();
                for p in 0..n * c {
                    let base = p * h * w;
                    for y in 0..h {
                        for x in 0..w {
                            let (ty, tx) = match dir {
                                ShiftDir::Down if y + amount < h => (y + amount, x),
                                ShiftDir::Right if x + amount < w => (y, x + amount),
                                _ => continue,
                            };
                            dd[base + y * w + x] = gd[base + ty * w + tx];
                        }
                    }
                }
                acc(a, d);
            }
            Op::Downsample { a, factor } => {
                let src_shape = self.value(a).shape();
                let (n, c, h, w) = self.value(a).dims4("downsample")?;
                let (ho, wo) = (g.shape()[2], g.shape()[3]);
                let mut d = Tensor::zeros(src_shape);
                let dd = d.data_mut();
                for p in 0..n * c {
                    for y in 0..ho {
                        for x in 0..wo {
                            dd[(p * h + y * factor) * w + x * factor] = gd[(p * ho + y) * wo + x];
                        }
                    }
                }
                acc(a, d);
            }
            Op::Upsample { a, factor } => {
                let src_shape = self.value(a).shape();
                let (n, c, h, w) = self.value(a).dims4("upsample")?;
                let (ho, wo) = (h * factor, w * factor);
                let mut d = Tensor::zeros(src_shape);
                let dd = d.data_mut();
                for p in 0..n * c {
                    for y in 0..ho {
                        for x in 0..wo {
                            dd[(p * h + y / factor) * w + x / factor] += gd[(p * ho + y) * wo + x];
                        }
                    }
                }
                acc(a, d);
            }
            Op::CrossEntropy {
                logits,
                ref targets,
                classes,
                inner,
                ref probs,
            } => {
                let scale = gd[0] / targets.len().max(1) as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (pos, &t) in targets.iter().enumerate() {
                    let (o, i) = (pos / inner, pos % inner);
                    d[(o * classes + t) * inner + i] -= scale;
                }
                acc(logits, Tensor::new(self.value(logits).shape(), d)?);
            }
            Op::Sum(a) => acc(a, Tensor::full(self.value(a).shape(), gd[0])),
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn reduce_broadcast(g: &Tensor, target: &[usize], bcast: Broadcast) -> Tensor {
    match bcast {
        Broadcast::Same => g.clone(),
        Broadcast::Scalar => Tensor::full(target, g.sum()),
        Broadcast::Leading { inner } => {
            let mut out = Tensor::zeros(target);
            for (i, x) in g.data().iter().enumerate() {
                out.data_mut()[i / inner] += x;
            }
            out
        }
    }
}
