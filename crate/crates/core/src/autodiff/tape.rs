use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::{axis_split, broadcast_offsets, broadcast_shape};
use super::{AutodiffError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// A differentiable primitive together with its attributes.
#[derive(Clone, Debug)]
pub enum Primitive {
    /// `[m × k] · [k × n]`.
    MatMul,
    /// Elementwise with right-aligned broadcasting.
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    Concat { axis: usize },
    /// `mask[i] == false` excludes element `i`. Fully masked slices are
    /// rejected unless `allow_empty`, in which case they produce zeros.
    Softmax { axis: usize, mask: Option<Vec<bool>>, allow_empty: bool },
    LogSoftmax { axis: usize },
    Sigmoid,
    Relu,
    Log,
    Exp,
    Sqrt,
    /// Normalizes over the last axis. Inputs: `x`, `gain`, `bias`.
    LayerNorm { eps: f64 },
    Sum { axis: usize },
    Mean { axis: usize },
    SumAll,
    /// Row gather from a `[V × D]` table.
    Embedding { ids: Vec<usize> },
    MaskedFill { mask: Vec<bool>, value: f64 },
    /// Inverted dropout with a mask drawn from `seed`.
    Dropout { rate: f64, seed: u64 },
    Transpose,
    Slice { axis: usize, start: usize, len: usize },
    /// Flat element gather, producing a `[n]` vector.
    Gather { indices: Vec<usize> },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::Scale(_) => "scale",
            Primitive::Concat { .. } => "concat",
            Primitive::Softmax { .. } => "softmax",
            Primitive::LogSoftmax { .. } => "log_softmax",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Relu => "relu",
            Primitive::Log => "log",
            Primitive::Exp => "exp",
            Primitive::Sqrt => "sqrt",
            Primitive::LayerNorm { .. } => "layer_norm",
            Primitive::Sum { .. } => "sum",
            Primitive::Mean { .. } => "mean",
            Primitive::SumAll => "sum_all",
            Primitive::Embedding { .. } => "embedding",
            Primitive::MaskedFill { .. } => "masked_fill",
            Primitive::Dropout { .. } => "dropout",
            Primitive::Transpose => "transpose",
            Primitive::Slice { .. } => "slice",
            Primitive::Gather { .. } => "gather",
        }
    }
}

#[derive(Clone, Debug)]
enum NodeOp {
    Leaf,
    Apply(Primitive),
}

#[derive(Clone, Debug)]
struct Node {
    op: NodeOp,
    inputs: Vec<Var>,
    value: Tensor,
    requires_grad: bool,
    /// Saved forward context (dropout mask scale factors).
    saved: Option<Vec<f64>>,
}

/// Records primitive applications in topological order.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Accumulated gradients keyed by tape id.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `var`, or `None` when the loss does not reach it.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `var`, zero-filled when unreached.
    pub fn tensor(&self, var: Var) -> Tensor {
        let shape = self.shapes[var.0].clone();
        match self.get(var) {
            Some(g) => Tensor::from_parts(shape, g.to_vec()),
            None => Tensor::zeros(&shape),
        }
    }
}

fn mismatch(op: &Primitive, lhs: &[usize], rhs: &[usize]) -> AutodiffError {
    AutodiffError::ShapeMismatch { op: op.name(), lhs: lhs.to_vec(), rhs: rhs.to_vec() }
}

fn check_axis(op: &Primitive, shape: &[usize], axis: usize) -> Result<(), AutodiffError> {
    if axis >= shape.len() {
        return Err(AutodiffError::InvalidAxis { op: op.name(), axis, shape: shape.to_vec() });
    }
    Ok(())
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn dropout_mask(rate: f64, seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 - rate;
    (0..n).map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect()
}

/// Forward evaluation of one primitive. Returns the output and any saved context.
fn forward(
    prim: &Primitive,
    inputs: &[&Tensor],
) -> Result<(Tensor, Option<Vec<f64>>), AutodiffError> {
    let arity = match prim {
        Primitive::MatMul
        | Primitive::Add
        | Primitive::Sub
        | Primitive::Mul
        | Primitive::Div => Some(2),
        Primitive::LayerNorm { .. } => Some(3),
        Primitive::Concat { .. } => None,
        _ => Some(1),
    };
    if let Some(n) = arity {
        if inputs.len() != n {
            return Err(AutodiffError::Arity { op: prim.name(), expected: n, got: inputs.len() });
        }
    }
    let out = match prim {
        Primitive::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(mismatch(prim, a.shape(), b.shape()));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            Tensor::from_parts(vec![m, n], matmul_raw(a.data(), b.data(), m, k, n))
        }
        Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div => {
            let (a, b) = (inputs[0], inputs[1]);
            let f: fn(f64, f64) -> f64 = match prim {
                Primitive::Add => |x, y| x + y,
                Primitive::Sub => |x, y| x - y,
                Primitive::Mul => |x, y| x * y,
                _ => |x, y| x / y,
            };
            if a.shape() == b.shape() {
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                Tensor::from_parts(a.shape().to_vec(), data)
            } else {
                let shape = broadcast_shape(a.shape(), b.shape())
                    .ok_or_else(|| mismatch(prim, a.shape(), b.shape()))?;
                let oa = broadcast_offsets(&shape, a.shape());
                let ob = broadcast_offsets(&shape, b.shape());
                let data = oa.iter().zip(&ob).map(|(&i, &j)| f(a.data()[i], b.data()[j])).collect();
                Tensor::from_parts(shape, data)
            }
        }
        Primitive::Scale(s) => map(inputs[0], |x| x * s),
        Primitive::Sigmoid => map(inputs[0], |x| 1.0 / (1.0 + (-x).exp())),
        Primitive::Relu => map(inputs[0], |x| if x > 0.0 { x } else { 0.0 }),
        Primitive::Log => map(inputs[0], f64::ln),
        Primitive::Exp => map(inputs[0], f64::exp),
        Primitive::Sqrt => map(inputs[0], f64::sqrt),
        Primitive::Concat { axis } => {
            let first = inputs.first().ok_or(AutodiffError::Arity {
                op: prim.name(),
                expected: 1,
                got: 0,
            })?;
            check_axis(prim, first.shape(), *axis)?;
            let mut shape = first.shape().to_vec();
            shape[*axis] = 0;
            for t in inputs {
                let ok = t.rank() == first.rank()
                    && t.shape().iter().enumerate().all(|(d, &s)| d == *axis || s == first.shape()[d]);
                if !ok {
                    return Err(mismatch(prim, first.shape(), t.shape()));
                }
                shape[*axis] += t.shape()[*axis];
            }
            let (outer, _, inner) = axis_split(&shape, *axis);
            let mut data = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for t in inputs {
                    let chunk = t.shape()[*axis] * inner;
                    data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            Tensor::from_parts(shape, data)
        }
        Primitive::Softmax { axis, mask, allow_empty } => {
            let x = inputs[0];
            check_axis(prim, x.shape(), *axis)?;
            if let Some(m) = mask {
                if m.len() != x.numel() {
                    return Err(mismatch(prim, x.shape(), &[m.len()]));
                }
            }
            let (outer, n, inner) = axis_split(x.shape(), *axis);
            let mut out = vec![0.0; x.numel()];
            let keep = |i: usize| mask.as_ref().map_or(true, |m| m[i]);
            for o in 0..outer {
                for r in 0..inner {
                    let idx = |i: usize| (o * n + i) * inner + r;
                    let mut max = f64::NEG_INFINITY;
                    let mut kept = 0;
                    for i in 0..n {
                        if keep(idx(i)) {
                            max = max.max(x.data()[idx(i)]);
                            kept += 1;
                        }
                    }
                    if kept == 0 {
                        if *allow_empty {
                            continue;
                        }
                        return Err(AutodiffError::EmptySoftmax { shape: x.shape().to_vec(), axis: *axis });
                    }
                    if !max.is_finite() {
                        // Non-finite inputs: propagate NaN and let the caller's finiteness check report it.
                        for i in 0..n {
                            if keep(idx(i)) {
                                out[idx(i)] = f64::NAN;
                            }
                        }
                        continue;
                    }
                    let mut sum = 0.0;
                    for i in 0..n {
                        if keep(idx(i)) {
                            let e = (x.data()[idx(i)] - max).exp();
                            out[idx(i)] = e;
                            sum += e;
                        }
                    }
                    for i in 0..n {
                        out[idx(i)] /= sum;
                    }
                }
            }
            Tensor::from_parts(x.shape().to_vec(), out)
        }
        Primitive::LogSoftmax { axis } => {
            let x = inputs[0];
            check_axis(prim, x.shape(), *axis)?;
            let (outer, n, inner) = axis_split(x.shape(), *axis);
            let mut out = vec![0.0; x.numel()];
            for o in 0..outer {
                for r in 0..inner {
                    let idx = |i: usize| (o * n + i) * inner + r;
                    let max = (0..n).map(|i| x.data()[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + (0..n).map(|i| (x.data()[idx(i)] - max).exp()).sum::<f64>().ln();
                    for i in 0..n {
                        out[idx(i)] = x.data()[idx(i)] - lse;
                    }
                }
            }
            Tensor::from_parts(x.shape().to_vec(), out)
        }
        Primitive::LayerNorm { eps } => {
            let (x, g, b) = (inputs[0], inputs[1], inputs[2]);
            let n = *x.shape().last().unwrap();
            if g.numel() != n {
                return Err(mismatch(prim, x.shape(), g.shape()));
            }
            if b.numel() != n {
                return Err(mismatch(prim, x.shape(), b.shape()));
            }
            let mut out = vec![0.0; x.numel()];
            for (row, o) in x.data().chunks(n).zip(out.chunks_mut(n)) {
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for j in 0..n {
                    o[j] = (row[j] - mean) * inv * g.data()[j] + b.data()[j];
                }
            }
            Tensor::from_parts(x.shape().to_vec(), out)
        }
        Primitive::Sum { axis } | Primitive::Mean { axis } => {
            let x = inputs[0];
            check_axis(prim, x.shape(), *axis)?;
            let (outer, n, inner) = axis_split(x.shape(), *axis);
            let mut shape = x.shape().to_vec();
            shape[*axis] = 1;
            let scale = if matches!(prim, Primitive::Mean { .. }) { 1.0 / n as f64 } else { 1.0 };
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for i in 0..n {
                    for r in 0..inner {
                        out[o * inner + r] += x.data()[(o * n + i) * inner + r];
                    }
                }
            }
            if scale != 1.0 {
                out.iter_mut().for_each(|v| *v *= scale);
            }
            Tensor::from_parts(shape, out)
        }
        Primitive::SumAll => Tensor::scalar(inputs[0].data().iter().sum()),
        Primitive::Embedding { ids } => {
            let table = inputs[0];
            if table.rank() != 2 {
                return Err(mismatch(prim, table.shape(), &[ids.len()]));
            }
            let (v, d) = (table.shape()[0], table.shape()[1]);
            if ids.is_empty() {
                return Err(mismatch(prim, table.shape(), &[0]));
            }
            let mut data = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= v {
                    return Err(AutodiffError::IndexOutOfRange { op: prim.name(), index: id, extent: v });
                }
                data.extend_from_slice(table.row_slice(id));
            }
            Tensor::from_parts(vec![ids.len(), d], data)
        }
        Primitive::MaskedFill { mask, value } => {
            let x = inputs[0];
            if mask.len() != x.numel() {
                return Err(mismatch(prim, x.shape(), &[mask.len()]));
            }
            let data = x.data().iter().zip(mask).map(|(&v, &m)| if m { *value } else { v }).collect();
            Tensor::from_parts(x.shape().to_vec(), data)
        }
        Primitive::Dropout { rate, seed } => {
            let x = inputs[0];
            if !(0.0..1.0).contains(rate) {
                return Err(AutodiffError::InvalidTensor(format!("dropout rate {rate} outside [0, 1)")));
            }
            let m = dropout_mask(*rate, *seed, x.numel());
            let data = x.data().iter().zip(&m).map(|(v, k)| v * k).collect();
            return Ok((Tensor::from_parts(x.shape().to_vec(), data), Some(m)));
        }
        Primitive::Transpose => {
            let x = inputs[0];
            if x.rank() != 2 {
                return Err(mismatch(prim, x.shape(), &[]));
            }
            x.transposed()
        }
        Primitive::Slice { axis, start, len } => {
            let x = inputs[0];
            check_axis(prim, x.shape(), *axis)?;
            if *len == 0 || start + len > x.shape()[*axis] {
                return Err(AutodiffError::IndexOutOfRange {
                    op: prim.name(),
                    index: start + len,
                    extent: x.shape()[*axis],
                });
            }
            let (outer, n, inner) = axis_split(x.shape(), *axis);
            let mut shape = x.shape().to_vec();
            shape[*axis] = *len;
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * n + start) * inner;
                data.extend_from_slice(&x.data()[base..base + len * inner]);
            }
            Tensor::from_parts(shape, data)
        }
        Primitive::Gather { indices } => {
            let x = inputs[0];
            if indices.is_empty() {
                return Err(mismatch(prim, x.shape(), &[0]));
            }
            let mut data = Vec::with_capacity(indices.len());
            for &i in indices {
                if i >= x.numel() {
                    return Err(AutodiffError::IndexOutOfRange { op: prim.name(), index: i, extent: x.numel() });
                }
                data.push(x.data()[i]);
            }
            Tensor::from_parts(vec![indices.len()], data)
        }
    };
    Ok((out, None))
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
        None => *slot = Some(delta),
    }
}

/// Sums a broadcast gradient back down to `in_shape`.
fn reduce_to(grad: &[f64], out_shape: &[usize], in_shape: &[usize]) -> Vec<f64> {
    if out_shape == in_shape {
        return grad.to_vec();
    }
    let offsets = broadcast_offsets(out_shape, in_shape);
    let mut out = vec![0.0; in_shape.iter().product()];
    for (g, &o) in grad.iter().zip(&offsets) {
        out[o] += g;
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: NodeOp, inputs: Vec<Var>, value: Tensor, requires_grad: bool, saved: Option<Vec<f64>>) -> Var {
        self.nodes.push(Node { op, inputs, value, requires_grad, saved });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Gradients are tracked when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(NodeOp::Leaf, Vec::new(), value, requires_grad, None)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Values of every recorded node in tape order.
    pub fn values(&self) -> impl Iterator<Item = &Tensor> {
        self.nodes.iter().map(|n| &n.value)
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Overwrites the value of a leaf. Dependent nodes are stale until [`Tape::replay`].
    pub fn set_leaf(&mut self, var: Var, value: Tensor) -> Result<(), AutodiffError> {
        let node = &mut self.nodes[var.0];
        if !matches!(node.op, NodeOp::Leaf) {
            return Err(AutodiffError::InvalidTensor(format!("node {} is not a leaf", var.0)));
        }
        if node.value.shape() != value.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "set_leaf",
                lhs: node.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        node.value = value;
        Ok(())
    }

    pub(crate) fn leaf_data_mut(&mut self, var: Var) -> &mut [f64] {
        debug_assert!(matches!(self.nodes[var.0].op, NodeOp::Leaf));
        self.nodes[var.0].value.data_mut()
    }

    /// Applies `prim` to `inputs` and records it.
    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var, AutodiffError> {
        let (value, saved) = {
            let vals: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            forward(&prim, &vals)?
        };
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(NodeOp::Apply(prim), inputs.to_vec(), value, requires_grad, saved))
    }

    /// Recomputes every recorded application from the current leaf values.
    pub fn replay(&mut self) -> Result<(), AutodiffError> {
        self.replay_from(0)
    }

    /// Recomputes applications with id `>= start`.
    pub fn replay_from(&mut self, start: usize) -> Result<(), AutodiffError> {
        for i in start..self.nodes.len() {
            let prim = match &self.nodes[i].op {
                NodeOp::Leaf => continue,
                NodeOp::Apply(p) => p.clone(),
            };
            let (value, saved) = {
                let vals: Vec<&Tensor> =
                    self.nodes[i].inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                forward(&prim, &vals)?
            };
            self.nodes[i].value = value;
            self.nodes[i].saved = saved;
        }
        Ok(())
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        let loss_shape = self.shape(loss);
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(AutodiffError::NonScalarLoss(loss_shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let NodeOp::Apply(prim) = &node.op else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let ins: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let deltas = self.local_grads(prim, &ins, node, &g);
            for (input, delta) in node.inputs.iter().zip(deltas) {
                if let Some(d) = delta {
                    if self.nodes[input.0].requires_grad {
                        accumulate(&mut grads[input.0], d);
                    }
                }
            }
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn local_grads(&self, prim: &Primitive, ins: &[&Tensor], node: &Node, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let y = &node.value;
        let out_shape = y.shape();
        match prim {
            Primitive::MatMul => {
                let (a, b) = (ins[0], ins[1]);
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let bt = b.transposed();
                let at = a.transposed();
                let da = matmul_raw(g, bt.data(), m, n, k);
                let db = matmul_raw(at.data(), g, k, m, n);
                vec![Some(da), Some(db)]
            }
            Primitive::Add => vec![
                Some(reduce_to(g, out_shape, ins[0].shape())),
                Some(reduce_to(g, out_shape, ins[1].shape())),
            ],
            Primitive::Sub => {
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                vec![
                    Some(reduce_to(g, out_shape, ins[0].shape())),
                    Some(reduce_to(&neg, out_shape, ins[1].shape())),
                ]
            }
            Primitive::Mul | Primitive::Div => {
                let (a, b) = (ins[0], ins[1]);
                let oa = broadcast_offsets(out_shape, a.shape());
                let ob = broadcast_offsets(out_shape, b.shape());
                let mut ga = vec![0.0; a.numel()];
                let mut gb = vec![0.0; b.numel()];
                let div = matches!(prim, Primitive::Div);
                for ((&gi, &i), &j) in g.iter().zip(&oa).zip(&ob) {
                    let (av, bv) = (a.data()[i], b.data()[j]);
                    if div {
                        ga[i] += gi / bv;
                        gb[j] -= gi * av / (bv * bv);
                    } else {
                        ga[i] += gi * bv;
                        gb[j] += gi * av;
                    }
                }
                vec![Some(ga), Some(gb)]
            }
            Primitive::Scale(s) => vec![Some(g.iter().map(|v| v * s).collect())],
            Primitive::Sigmoid => {
                vec![Some(g.iter().zip(y.data()).map(|(gi, s)| gi * s * (1.0 - s)).collect())]
            }
            Primitive::Relu => vec![Some(
                g.iter().zip(ins[0].data()).map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 }).collect(),
            )],
            Primitive::Log => vec![Some(g.iter().zip(ins[0].data()).map(|(gi, x)| gi / x).collect())],
            Primitive::Exp => vec![Some(g.iter().zip(y.data()).map(|(gi, e)| gi * e).collect())],
            Primitive::Sqrt => {
                vec![Some(g.iter().zip(y.data()).map(|(gi, r)| gi / (2.0 * r)).collect())]
            }
            Primitive::Concat { axis } => {
                let (outer, n, inner) = axis_split(out_shape, *axis);
                let mut offset = 0;
                ins.iter()
                    .map(|t| {
                        let len = t.shape()[*axis];
                        let mut d = Vec::with_capacity(t.numel());
                        for o in 0..outer {
                            let base = (o * n + offset) * inner;
                            d.extend_from_slice(&g[base..base + len * inner]);
                        }
                        offset += len;
                        Some(d)
                    })
                    .collect()
            }
            Primitive::Softmax { axis, .. } => {
                let (outer, n, inner) = axis_split(out_shape, *axis);
                let mut dx = vec![0.0; g.len()];
                for o in 0..outer {
                    for r in 0..inner {
                        let idx = |i: usize| (o * n + i) * inner + r;
                        let dot: f64 = (0..n).map(|i| g[idx(i)] * y.data()[idx(i)]).sum();
                        for i in 0..n {
                            dx[idx(i)] = y.data()[idx(i)] * (g[idx(i)] - dot);
                        }
                    }
                }
                vec![Some(dx)]
            }
            Primitive::LogSoftmax { axis } => {
                let (outer, n, inner) = axis_split(out_shape, *axis);
                let mut dx = vec![0.0; g.len()];
                for o in 0..outer {
                    for r in 0..inner {
                        let idx = |i: usize| (o * n + i) * inner + r;
                        let total: f64 = (0..n).map(|i| g[idx(i)]).sum();
                        for i in 0..n {
                            dx[idx(i)] = g[idx(i)] - y.data()[idx(i)].exp() * total;
                        }
                    }
                }
                vec![Some(dx)]
            }
            Primitive::LayerNorm { eps } => {
                let (x, gain) = (ins[0], ins[1]);
                let n = *x.shape().last().unwrap();
                let mut dx = vec![0.0; x.numel()];
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                for ((row, gy), dxr) in x.data().chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)) {
                    let mean = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> = (0..n).map(|j| gy[j] * gain.data()[j]).collect();
                    let sum_d: f64 = dxhat.iter().sum();
                    let sum_dx: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dxr[j] = inv / n as f64 * (n as f64 * dxhat[j] - sum_d - xhat[j] * sum_dx);
                        dgain[j] += gy[j] * xhat[j];
                        dbias[j] += gy[j];
                    }
                }
                vec![Some(dx), Some(dgain), Some(dbias)]
            }
            Primitive::Sum { axis } | Primitive::Mean { axis } => {
                let x = ins[0];
                let (outer, n, inner) = axis_split(x.shape(), *axis);
                let scale = if matches!(prim, Primitive::Mean { .. }) { 1.0 / n as f64 } else { 1.0 };
                let mut dx = vec![0.0; x.numel()];
                for o in 0..outer {
                    for i in 0..n {
                        for r in 0..inner {
                            dx[(o * n + i) * inner + r] = g[o * inner + r] * scale;
                        }
                    }
                }
                vec![Some(dx)]
            }
            Primitive::SumAll => vec![Some(vec![g[0]; ins[0].numel()])],
            Primitive::Embedding { ids } => {
                let d = ins[0].shape()[1];
                let mut dt = vec![0.0; ins[0].numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[r * d + j];
                    }
                }
                vec![Some(dt)]
            }
            Primitive::MaskedFill { mask, .. } => {
                vec![Some(g.iter().zip(mask).map(|(&gi, &m)| if m { 0.0 } else { gi }).collect())]
            }
            Primitive::Dropout { .. } => {
                let m = node.saved.as_ref().expect("dropout mask saved");
                vec![Some(g.iter().zip(m).map(|(a, b)| a * b).collect())]
            }
            Primitive::Transpose => {
                let (r, c) = (out_shape[0], out_shape[1]);
                vec![Some(Tensor::from_parts(vec![r, c], g.to_vec()).transposed().into_data())]
            }
            Primitive::Slice { axis, start, len } => {
                let x = ins[0];
                let (outer, n, inner) = axis_split(x.shape(), *axis);
                let mut dx = vec![0.0; x.numel()];
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    let src = o * len * inner;
                    dx[base..base + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                vec![Some(dx)]
            }
            Primitive::Gather { indices } => {
                let mut dx = vec![0.0; ins[0].numel()];
                for (&i, gi) in indices.iter().zip(g) {
                    dx[i] += gi;
                }
                vec![Some(dx)]
            }
        }
    }

    // Convenience wrappers.

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.apply(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.apply(Primitive::Div, &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, AutodiffError> {
        self.apply(Primitive::Scale(s), &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        self.apply(Primitive::Concat { axis }, parts)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, AutodiffError> {
        self.apply(Primitive::Softmax { axis, mask: None, allow_empty: false }, &[x])
    }

    pub fn masked_softmax(&mut self, x: Var, axis: usize, mask: Vec<bool>, allow_empty: bool) -> Result<Var, AutodiffError> {
        self.apply(Primitive::Softmax { axis, mask: Some(mask), allow_empty }, &[x])
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var, AutodiffError> {
        self.apply(Primitive::LogSoftmax { axis }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.apply(Primitive::Sigmoid, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.apply(Primitive::Relu, &[x])
    }

    pub fn ln(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.apply(Primitive::Log, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.apply(Primitive::Exp, &[x])
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.apply(Primitive::Sqrt, &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, AutodiffError> {
        self.apply(Primitive::LayerNorm { eps }, &[x, gain, bias])
    }

    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var, AutodiffError> {
        self.apply(Primitive::Sum { axis }, &[x])
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var, AutodiffError> {
        self.apply(Primitive::Mean { axis }, &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.apply(Primitive::SumAll, &[x])
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, AutodiffError> {
        self.apply(Primitive::Embedding { ids: ids.to_vec() }, &[table])
    }

    pub fn masked_fill(&mut self, x: Var, mask: Vec<bool>, value: f64) -> Result<Var, AutodiffError> {
        self.apply(Primitive::MaskedFill { mask, value }, &[x])
    }

    pub fn dropout(&mut self, x: Var, rate: f64, seed: u64) -> Result<Var, AutodiffError> {
        self.apply(Primitive::Dropout { rate, seed }, &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.apply(Primitive::Transpose, &[x])
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, AutodiffError> {
        self.apply(Primitive::Slice { axis, start, len }, &[x])
    }

    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var, AutodiffError> {
        self.apply(Primitive::Gather { indices: indices.to_vec() }, &[x])
    }

    /// `x · wᵀ` for a weight stored as `[out × in]`.
    pub fn linear(&mut self, x: Var, weight: Var) -> Result<Var, AutodiffError> {
        let wt = self.transpose(weight)?;
        self.matmul(x, wt)
    }
}
