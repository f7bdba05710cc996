use super::kernels::{broadcast_shape, for_each_broadcast, mm_nn, mm_nt, mm_tn, reduce_to};
use super::special::{digamma, lgamma, sigmoid, softplus};
use super::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operations understood by the tape.
///
/// Binary elementwise kinds broadcast their operands with trailing-dimension
/// alignment. `MatMul` multiplies the last two axes and accepts either a shared
/// batch prefix or a plain matrix on one side.
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    /// Sum over one axis (removed), or over everything when `None`.
    Sum { axis: Option<usize> },
    Mean { axis: Option<usize> },
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Softplus,
    Softmax { axis: usize },
    Abs,
    Square,
    Sqrt,
    Lgamma,
    Broadcast { shape: Vec<usize> },
    Reshape { shape: Vec<usize> },
    /// Swap the last two axes.
    Transpose,
    Neg,
    Scale(f64),
    AddScalar(f64),
    Clamp { min: f64, max: f64 },
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::MatMul => "matmul",
            OpKind::Concat { .. } => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::Sum { .. } => "sum",
            OpKind::Mean { .. } => "mean",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softplus => "softplus",
            OpKind::Softmax { .. } => "softmax",
            OpKind::Abs => "abs",
            OpKind::Square => "square",
            OpKind::Sqrt => "sqrt",
            OpKind::Lgamma => "lgamma",
            OpKind::Broadcast { .. } => "broadcast",
            OpKind::Reshape { .. } => "reshape",
            OpKind::Transpose => "transpose",
            OpKind::Neg => "neg",
            OpKind::Scale(_) => "scale",
            OpKind::AddScalar(_) => "add_scalar",
            OpKind::Clamp { .. } => "clamp",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            OpKind::Leaf => Some(0),
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div | OpKind::MatMul => Some(2),
            OpKind::Concat { .. } => None,
            _ => Some(1),
        }
    }
}

struct Node {
    value: Tensor,
    op: OpKind,
    inputs: Vec<usize>,
    requires_grad: bool,
}

/// Computation tape. Nodes are appended in evaluation order, which is
/// therefore a topological order of the recorded expression DAG.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every leaf that requires them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Matrix-product geometry: `batch` independent `m×k · k×n` products, with
/// either operand possibly shared across the batch.
struct MatMulPlan {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
    out_shape: Vec<usize>,
}

fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatMulPlan> {
    let mismatch = || TensorError::ShapeMismatch {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(mismatch());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(mismatch());
    }
    let a_prefix = &a[..a.len() - 2];
    let b_prefix = &b[..b.len() - 2];
    let (a_batched, b_batched, prefix) = match (a_prefix.is_empty(), b_prefix.is_empty()) {
        (true, true) => (false, false, Vec::new()),
        (false, true) => (true, false, a_prefix.to_vec()),
        (true, false) => (false, true, b_prefix.to_vec()),
        (false, false) if a_prefix == b_prefix => (true, true, a_prefix.to_vec()),
        _ => return Err(mismatch()),
    };
    let batch = prefix.iter().product::<usize>().max(1);
    let mut out_shape = prefix;
    out_shape.extend([m, n]);
    Ok(MatMulPlan {
        batch,
        m,
        k,
        n,
        a_batched,
        b_batched,
        out_shape,
    })
}

fn check_axis(op: &'static str, axis: usize, shape: &[usize]) -> Result<()> {
    if axis >= shape.len() {
        Err(TensorError::Axis {
            op,
            axis,
            shape: shape.to_vec(),
        })
    } else {
        Ok(())
    }
}

/// (outer, axis length, inner) decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, OpKind::Leaf, Vec::new(), requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: OpKind, inputs: Vec<usize>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            inputs,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Evaluates `op` on `inputs` and records it on the tape.
    pub fn apply(&mut self, op: OpKind, inputs: &[Var]) -> Result<Var> {
        if let Some(arity) = op.arity() {
            if inputs.len() != arity {
                return Err(TensorError::Invalid {
                    op: op.name(),
                    msg: format!("expected {arity} inputs, got {}", inputs.len()),
                });
            }
        } else if inputs.is_empty() {
            return Err(TensorError::Invalid {
                op: op.name(),
                msg: "needs at least one input".into(),
            });
        }
        let value = self.forward(&op, inputs)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, inputs.iter().map(|v| v.0).collect(), requires_grad))
    }

    fn forward(&self, op: &OpKind, inputs: &[Var]) -> Result<Tensor> {
        let val = |i: usize| &self.nodes[inputs[i].0].value;
        let unary = |f: &dyn Fn(f64) -> f64| Ok(val(0).map(f));
        match op {
            OpKind::Leaf => Err(TensorError::Invalid {
                op: "leaf",
                msg: "leaves are created with Graph::leaf".into(),
            }),
            OpKind::Add => self.binary(op, val(0), val(1), |a, b| a + b),
            OpKind::Sub => self.binary(op, val(0), val(1), |a, b| a - b),
            OpKind::Mul => self.binary(op, val(0), val(1), |a, b| a * b),
            OpKind::Div => self.binary(op, val(0), val(1), |a, b| a / b),
            OpKind::MatMul => {
                let (a, b) = (val(0), val(1));
                let plan = matmul_plan(a.shape(), b.shape())?;
                let mut out = vec![0.0; plan.batch * plan.m * plan.n];
                let (sa, sb, so) = (plan.m * plan.k, plan.k * plan.n, plan.m * plan.n);
                if plan.a_batched && !plan.b_batched {
                    // Rows of every batch element share the same right operand.
                    mm_nn(a.data(), b.data(), &mut out, plan.batch * plan.m, plan.k, plan.n);
                } else {
                    for bi in 0..plan.batch {
                        let ao = if plan.a_batched { bi * sa } else { 0 };
                        let bo = if plan.b_batched { bi * sb } else { 0 };
                        mm_nn(
                            &a.data()[ao..ao + sa],
                            &b.data()[bo..bo + sb],
                            &mut out[bi * so..(bi + 1) * so],
                            plan.m,
                            plan.k,
                            plan.n,
                        );
                    }
                }
                Tensor::new(plan.out_shape, out)
            }
            OpKind::Concat { axis } => {
                let axis = *axis;
                let first = val(0).shape().to_vec();
                check_axis("concat", axis, &first)?;
                let mut total = 0;
                for i in 0..inputs.len() {
                    let s = val(i).shape();
                    let compatible = s.len() == first.len()
                        && s.iter()
                            .zip(&first)
                            .enumerate()
                            .all(|(d, (x, y))| d == axis || x == y);
                    if !compatible {
                        return Err(TensorError::ShapeMismatch {
                            op: "concat",
                            lhs: first,
                            rhs: s.to_vec(),
                        });
                    }
                    total += s[axis];
                }
                let (outer, _, inner) = split_axis(&first, axis);
                let mut out = Vec::with_capacity(outer * total * inner);
                for o in 0..outer {
                    for i in 0..inputs.len() {
                        let t = val(i);
                        let chunk = t.shape()[axis] * inner;
                        out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                    }
                }
                let mut shape = first;
                shape[axis] = total;
                Tensor::new(shape, out)
            }
            OpKind::Slice { axis, start, end } => {
                let t = val(0);
                check_axis("slice", *axis, t.shape())?;
                if start >= end || *end > t.shape()[*axis] {
                    return Err(TensorError::Invalid {
                        op: "slice",
                        msg: format!("range {start}..{end} invalid for shape {:?}", t.shape()),
                    });
                }
                let (outer, len, inner) = split_axis(t.shape(), *axis);
                let width = end - start;
                let mut out = Vec::with_capacity(outer * width * inner);
                for o in 0..outer {
                    let base = o * len * inner;
                    out.extend_from_slice(&t.data()[base + start * inner..base + end * inner]);
                }
                let mut shape = t.shape().to_vec();
                shape[*axis] = width;
                Tensor::new(shape, out)
            }
            OpKind::Sum { axis } | OpKind::Mean { axis } => {
                let t = val(0);
                let mean = matches!(op, OpKind::Mean { .. });
                match axis {
                    None => {
                        let s: f64 = t.data().iter().sum();
                        let n = t.numel().max(1) as f64;
                        Ok(Tensor::scalar(if mean { s / n } else { s }))
                    }
                    Some(ax) => {
                        check_axis(op.name(), *ax, t.shape())?;
                        let (outer, len, inner) = split_axis(t.shape(), *ax);
                        let mut out = vec![0.0; outer * inner];
                        for o in 0..outer {
                            for l in 0..len {
                                let src = &t.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                                for (dst, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                                    *dst += s;
                                }
                            }
                        }
                        if mean {
                            let n = len as f64;
                            out.iter_mut().for_each(|v| *v /= n);
                        }
                        let mut shape = t.shape().to_vec();
                        shape.remove(*ax);
                        Tensor::new(shape, out)
                    }
                }
            }
            OpKind::Exp => unary(&f64::exp),
            OpKind::Log => unary(&f64::ln),
            OpKind::Tanh => unary(&f64::tanh),
            OpKind::Sigmoid => unary(&sigmoid),
            OpKind::Softplus => unary(&softplus),
            OpKind::Abs => unary(&f64::abs),
            OpKind::Square => unary(&|x| x * x),
            OpKind::Sqrt => unary(&f64::sqrt),
            OpKind::Lgamma => unary(&lgamma),
            OpKind::Neg => unary(&|x| -x),
            OpKind::Scale(c) => unary(&|x| x * c),
            OpKind::AddScalar(c) => unary(&|x| x + c),
            OpKind::Clamp { min, max } => {
                if min > max {
                    return Err(TensorError::Invalid {
                        op: "clamp",
                        msg: format!("min {min} > max {max}"),
                    });
                }
                unary(&|x| x.clamp(*min, *max))
            }
            OpKind::Softmax { axis } => {
                let t = val(0);
                check_axis("softmax", *axis, t.shape())?;
                let (outer, len, inner) = split_axis(t.shape(), *axis);
                let mut out = t.data().to_vec();
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let max = (0..len).map(|l| out[idx(l)]).fold(f64::NEG_INFINITY, f64::max);
                        let mut denom = 0.0;
                        for l in 0..len {
                            let e = (out[idx(l)] - max).exp();
                            out[idx(l)] = e;
                            denom += e;
                        }
                        for l in 0..len {
                            out[idx(l)] /= denom;
                        }
                    }
                }
                Tensor::new(t.shape().to_vec(), out)
            }
            OpKind::Broadcast { shape } => {
                let t = val(0);
                match broadcast_shape(t.shape(), shape) {
                    Some(s) if s == *shape => {}
                    _ => {
                        return Err(TensorError::ShapeMismatch {
                            op: "broadcast",
                            lhs: t.shape().to_vec(),
                            rhs: shape.clone(),
                        })
                    }
                }
                let mut out = vec![0.0; shape.iter().product()];
                for_each_broadcast(t.shape(), shape, shape, |o, i, _| out[o] = t.data()[i]);
                Tensor::new(shape.clone(), out)
            }
            OpKind::Reshape { shape } => {
                let t = val(0);
                if shape.iter().product::<usize>() != t.numel() {
                    return Err(TensorError::ShapeMismatch {
                        op: "reshape",
                        lhs: t.shape().to_vec(),
                        rhs: shape.clone(),
                    });
                }
                Tensor::new(shape.clone(), t.data().to_vec())
            }
            OpKind::Transpose => {
                let t = val(0);
                if t.ndim() < 2 {
                    return Err(TensorError::Invalid {
                        op: "transpose",
                        msg: format!("needs at least 2 axes, got {:?}", t.shape()),
                    });
                }
                Ok(transpose_last2(t))
            }
        }
    }

    fn binary(&self, op: &OpKind, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let out_shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| TensorError::ShapeMismatch {
            op: op.name(),
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })?;
        let mut out = vec![0.0; out_shape.iter().product()];
        let (ad, bd) = (a.data(), b.data());
        for_each_broadcast(a.shape(), b.shape(), &out_shape, |o, ia, ib| out[o] = f(ad[ia], bd[ib]));
        Tensor::new(out_shape, out)
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_shape = self.nodes[loss.0].value.shape();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape.to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();

        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if node.op == OpKind::Leaf {
                leaf_grads[id] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            let input_grads = self.vjp(node, &g)?;
            for (&input, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }

    /// Vector-Jacobian product of one node: gradients for each input.
    fn vjp(&self, node: &Node, g: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        let input = |i: usize| &self.nodes[node.inputs[i]].value;
        let wants = |i: usize| self.nodes[node.inputs[i]].requires_grad;
        let y = &node.value;
        let elementwise = |f: &dyn Fn(f64, f64, f64) -> f64| {
            let x = input(0).data();
            let yd = y.data();
            Ok(vec![Some((0..g.len()).map(|i| f(g[i], x[i], yd[i])).collect())])
        };
        match &node.op {
            OpKind::Leaf => Ok(Vec::new()),
            OpKind::Add | OpKind::Sub => {
                let out = y.shape();
                let ga = wants(0).then(|| reduce_to(g, out, input(0).shape()));
                let gb = wants(1).then(|| {
                    let mut r = reduce_to(g, out, input(1).shape());
                    if node.op == OpKind::Sub {
                        r.iter_mut().for_each(|v| *v = -*v);
                    }
                    r
                });
                Ok(vec![ga, gb])
            }
            OpKind::Mul | OpKind::Div => {
                let (a, b) = (input(0), input(1));
                let out = y.shape();
                let (ad, bd) = (a.data(), b.data());
                let mut fa = wants(0).then(|| vec![0.0; g.len()]);
                let mut fb = wants(1).then(|| vec![0.0; g.len()]);
                let div = node.op == OpKind::Div;
                for_each_broadcast(a.shape(), b.shape(), out, |o, ia, ib| {
                    let (av, bv) = (ad[ia], bd[ib]);
                    if let Some(fa) = fa.as_mut() {
                        fa[o] = if div { g[o] / bv } else { g[o] * bv };
                    }
                    if let Some(fb) = fb.as_mut() {
                        fb[o] = if div { -g[o] * av / (bv * bv) } else { g[o] * av };
                    }
                });
                Ok(vec![
                    fa.map(|f| reduce_to(&f, out, a.shape())),
                    fb.map(|f| reduce_to(&f, out, b.shape())),
                ])
            }
            OpKind::MatMul => {
                let (a, b) = (input(0), input(1));
                let plan = matmul_plan(a.shape(), b.shape())?;
                let (m, k, n) = (plan.m, plan.k, plan.n);
                let (sa, sb, so) = (m * k, k * n, m * n);
                let mut ga = wants(0).then(|| vec![0.0; a.numel()]);
                let mut gb = wants(1).then(|| vec![0.0; b.numel()]);
                if plan.a_batched && !plan.b_batched {
                    let rows = plan.batch * m;
                    if let Some(ga) = ga.as_mut() {
                        mm_nt(g, b.data(), ga, rows, n, k);
                    }
                    if let Some(gb) = gb.as_mut() {
                        mm_tn(a.data(), g, gb, k, rows, n);
                    }
                } else {
                    for bi in 0..plan.batch {
                        let ao = if plan.a_batched { bi * sa } else { 0 };
                        let bo = if plan.b_batched { bi * sb } else { 0 };
                        let gs = &g[bi * so..(bi + 1) * so];
                        if let Some(ga) = ga.as_mut() {
                            mm_nt(gs, &b.data()[bo..bo + sb], &mut ga[ao..ao + sa], m, n, k);
                        }
                        if let Some(gb) = gb.as_mut() {
                            mm_tn(&a.data()[ao..ao + sa], gs, &mut gb[bo..bo + sb], k, m, n);
                        }
                    }
                }
                Ok(vec![ga, gb])
            }
            OpKind::Concat { axis } => {
                let (outer, total, inner) = split_axis(y.shape(), *axis);
                let mut offset = 0;
                let mut out = Vec::with_capacity(node.inputs.len());
                for i in 0..node.inputs.len() {
                    let len = input(i).shape()[*axis];
                    if wants(i) {
                        let mut gi = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gi.extend_from_slice(&g[base..base + len * inner]);
                        }
                        out.push(Some(gi));
                    } else {
                        out.push(None);
                    }
                    offset += len;
                }
                Ok(out)
            }
            OpKind::Slice { axis, start, end } => {
                let x = input(0);
                let (outer, len, inner) = split_axis(x.shape(), *axis);
                let width = end - start;
                let mut gx = vec![0.0; x.numel()];
                for o in 0..outer {
                    let dst = o * len * inner + start * inner;
                    gx[dst..dst + width * inner].copy_from_slice(&g[o * width * inner..(o + 1) * width * inner]);
                }
                Ok(vec![Some(gx)])
            }
            OpKind::Sum { axis } | OpKind::Mean { axis } => {
                let x = input(0);
                let mean = matches!(node.op, OpKind::Mean { .. });
                match axis {
                    None => {
                        let scale = if mean { 1.0 / x.numel().max(1) as f64 } else { 1.0 };
                        Ok(vec![Some(vec![g[0] * scale; x.numel()])])
                    }
                    Some(ax) => {
                        let (outer, len, inner) = split_axis(x.shape(), *ax);
                        let scale = if mean { 1.0 / len as f64 } else { 1.0 };
                        let mut gx = vec![0.0; x.numel()];
                        for o in 0..outer {
                            for l in 0..len {
                                let dst = (o * len + l) * inner;
                                for i in 0..inner {
                                    gx[dst + i] = g[o * inner + i] * scale;
                                }
                            }
                        }
                        Ok(vec![Some(gx)])
                    }
                }
            }
            OpKind::Exp => elementwise(&|g, _, y| g * y),
            OpKind::Log => elementwise(&|g, x, _| g / x),
            OpKind::Tanh => elementwise(&|g, _, y| g * (1.0 - y * y)),
            OpKind::Sigmoid => elementwise(&|g, _, y| g * y * (1.0 - y)),
            OpKind::Softplus => elementwise(&|g, x, _| g * sigmoid(x)),
            OpKind::Abs => elementwise(&|g, x, _| {
                if x > 0.0 {
                    g
                } else if x < 0.0 {
                    -g
                } else {
                    0.0
                }
            }),
            OpKind::Square => elementwise(&|g, x, _| 2.0 * x * g),
            OpKind::Sqrt => elementwise(&|g, _, y| g / (2.0 * y)),
            OpKind::Lgamma => elementwise(&|g, x, _| g * digamma(x)),
            OpKind::Neg => elementwise(&|g, _, _| -g),
            OpKind::Scale(c) => elementwise(&|g, _, _| g * c),
            OpKind::AddScalar(_) => elementwise(&|g, _, _| g),
            OpKind::Clamp { min, max } => elementwise(&|g, x, _| if x < *min || x > *max { 0.0 } else { g }),
            OpKind::Softmax { axis } => {
                let (outer, len, inner) = split_axis(y.shape(), *axis);
                let yd = y.data();
                let mut gx = vec![0.0; y.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let dot: f64 = (0..len).map(|l| g[idx(l)] * yd[idx(l)]).sum();
                        for l in 0..len {
                            gx[idx(l)] = yd[idx(l)] * (g[idx(l)] - dot);
                        }
                    }
                }
                Ok(vec![Some(gx)])
            }
            OpKind::Broadcast { shape } => Ok(vec![Some(reduce_to(g, shape, input(0).shape()))]),
            OpKind::Reshape { .. } => Ok(vec![Some(g.to_vec())]),
            OpKind::Transpose => {
                let gt = Tensor::new(y.shape().to_vec(), g.to_vec())?;
                Ok(vec![Some(transpose_last2(&gt).into_data())])
            }
        }
    }

    // Convenience wrappers around `apply`.

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Mul, &[a, b])
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Div, &[a, b])
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::MatMul, &[a, b])
    }
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.apply(OpKind::Concat { axis }, parts)
    }
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.apply(OpKind::Slice { axis, start, end }, &[x])
    }
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Sum { axis: None }, &[x])
    }
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(OpKind::Sum { axis: Some(axis) }, &[x])
    }
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Mean { axis: None }, &[x])
    }
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(OpKind::Mean { axis: Some(axis) }, &[x])
    }
    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Exp, &[x])
    }
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Log, &[x])
    }
    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Tanh, &[x])
    }
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Sigmoid, &[x])
    }
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Softplus, &[x])
    }
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(OpKind::Softmax { axis }, &[x])
    }
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Abs, &[x])
    }
    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Square, &[x])
    }
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Sqrt, &[x])
    }
    pub fn lgamma(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Lgamma, &[x])
    }
    pub fn broadcast(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(OpKind::Broadcast { shape: shape.to_vec() }, &[x])
    }
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(OpKind::Reshape { shape: shape.to_vec() }, &[x])
    }
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Transpose, &[x])
    }
    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Neg, &[x])
    }
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(OpKind::Scale(c), &[x])
    }
    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(OpKind::AddScalar(c), &[x])
    }
    pub fn clamp(&mut self, x: Var, min: f64, max: f64) -> Result<Var> {
        self.apply(OpKind::Clamp { min, max }, &[x])
    }
}

fn transpose_last2(t: &Tensor) -> Tensor {
    let nd = t.ndim();
    let (r, c) = (t.shape()[nd - 2], t.shape()[nd - 1]);
    let batch = t.numel() / (r * c).max(1);
    let mut out = vec![0.0; t.numel()];
    for b in 0..batch {
        let src = &t.data()[b * r * c..(b + 1) * r * c];
        let dst = &mut out[b * r * c..(b + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    let mut shape = t.shape().to_vec();
    shape.swap(nd - 2, nd - 1);
    Tensor { shape, data: out }
}
