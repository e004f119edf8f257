//! Dense tensors with reverse-mode differentiation on a Wengert tape.
//!
//! Every op is recorded on the [`Tape`]; [`Tape::backward`] replays the ops in
//! reverse execution order and accumulates gradients additively into every
//! tensor created with `requires_grad`. The op set is exactly what the network
//! blocks need: 2-D matmul, per-row linear layers, a handful of activations,
//! group normalization, neighbor max-pooling, concat/gather/reshape plumbing
//! and scalar reductions for losses. No general broadcasting.

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Epsilon added to the per-group variance in group normalization.
pub const GROUP_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Matmul {
        a: TensorId,
        b: TensorId,
    },
    Transpose {
        x: TensorId,
    },
    PointwiseLinear {
        x: TensorId,
        w: TensorId,
        bias: TensorId,
    },
    Sigmoid {
        x: TensorId,
    },
    Tanh {
        x: TensorId,
    },
    Relu {
        x: TensorId,
    },
    LeakyRelu {
        x: TensorId,
        slope: S,
    },
    Prelu {
        x: TensorId,
        slope: TensorId,
    },
    GroupNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        groups: usize,
        /// Saved per (row, group): mean and 1/sqrt(var + eps).
        mean: Vec<S>,
        inv_std: Vec<S>,
    },
    /// Input is [N, K, C]; output [N, C]. Saved argmax (k index) per (n, c).
    MaxPoolNeighbors {
        x: TensorId,
        argmax: Vec<u32>,
    },
    Concat {
        xs: Vec<TensorId>,
        axis: usize,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    Sub {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    /// out[r, :] = x[rows[r], :] for a 2-D x.
    GatherRows {
        x: TensorId,
        rows: Vec<u32>,
    },
    /// out[dst] += weight * src[src_idx] over flat indices; used for the
    /// sub-cube score averaging where each slot mixes a variable number of
    /// source entries.
    WeightedGatherSum {
        src: TensorId,
        terms: Vec<(u32, u32, S)>,
    },
    Reshape {
        x: TensorId,
    },
    SumAll {
        x: TensorId,
    },
    Scale {
        x: TensorId,
        c: S,
    },
    Abs {
        x: TensorId,
    },
}

#[derive(Debug)]
struct Node<S> {
    data: Vec<S>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op<S>,
}

/// Gradients produced by one [`Tape::backward`] call, indexed by [`TensorId`].
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the backward root with respect to `id`, if `id` required
    /// gradients and was reachable from the root.
    pub fn get(&self, id: TensorId) -> Option<&[S]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }
}

/// Record of executed ops with enough saved state to run backward once.
#[derive(Debug, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    backward_spent: bool,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), backward_spent: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn data(&self, id: TensorId) -> &[S] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Registers an input tensor.
    pub fn leaf(&mut self, data: Vec<S>, shape: Vec<usize>, requires_grad: bool) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "leaf data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        check_finite(&data, "leaf")?;
        Ok(self.push(data, shape, requires_grad, Op::Leaf))
    }

    /// Registers an input tensor that never receives gradients.
    pub fn constant(&mut self, data: Vec<S>, shape: Vec<usize>) -> Result<TensorId> {
        self.leaf(data, shape, false)
    }

    fn push(&mut self, data: Vec<S>, shape: Vec<usize>, requires_grad: bool, op: Op<S>) -> TensorId {
        // Recording new ops re-arms backward.
        self.backward_spent = false;
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { data, shape, requires_grad, op });
        id
    }

    fn dims2(&self, id: TensorId, ctx: &str) -> Result<(usize, usize)> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(Error::Shape(format!("{ctx}: expected rank-2 tensor, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    /// C[m,n] = A[m,k] · B[k,n].
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.dims2(a, "matmul lhs")?;
        let (kb, n) = self.dims2(b, "matmul rhs")?;
        if ka != kb {
            return Err(Error::Shape(format!("matmul inner dims {ka} vs {kb}")));
        }
        let mut out = vec![S::zero(); m * n];
        matmul_nn(self.data(a), self.data(b), m, ka, n, &mut out);
        check_finite(&out, "matmul")?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(out, vec![m, n], rg, Op::Matmul { a, b }))
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims2(x, "transpose")?;
        let src = self.data(x);
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(out, vec![n, m], rg, Op::Transpose { x }))
    }

    /// y = x·w + bias, bias broadcast per row. The per-point 1x1 convolution.
    pub fn pointwise_linear(&mut self, x: TensorId, w: TensorId, bias: TensorId) -> Result<TensorId> {
        let (n, cin) = self.dims2(x, "pointwise_linear input")?;
        let (win, cout) = self.dims2(w, "pointwise_linear weight")?;
        if cin != win {
            return Err(Error::Shape(format!("pointwise_linear channels {cin} vs weight rows {win}")));
        }
        let bshape = self.shape(bias);
        if bshape != [cout] {
            return Err(Error::Shape(format!("pointwise_linear bias shape {bshape:?}, want [{cout}]")));
        }
        let mut out = vec![S::zero(); n * cout];
        matmul_nn(self.data(x), self.data(w), n, cin, cout, &mut out);
        let b = self.data(bias);
        for row in out.chunks_mut(cout) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        check_finite(&out, "pointwise_linear")?;
        let rg = self.requires_grad(x) || self.requires_grad(w) || self.requires_grad(bias);
        Ok(self.push(out, vec![n, cout], rg, Op::PointwiseLinear { x, w, bias }))
    }

    // ── Activations ─────────────────────────────────────────────────────

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId> {
        let out: Vec<S> = self.data(x).iter().map(|&v| S::one() / (S::one() + (-v).exp())).collect();
        check_finite(&out, "sigmoid")?;
        let (shape, rg) = (self.shape(x).to_vec(), self.requires_grad(x));
        Ok(self.push(out, shape, rg, Op::Sigmoid { x }))
    }

    pub fn tanh(&mut self, x: TensorId) -> Result<TensorId> {
        let out: Vec<S> = self.data(x).iter().map(|&v| v.tanh()).collect();
        check_finite(&out, "tanh")?;
        let (shape, rg) = (self.shape(x).to_vec(), self.requires_grad(x));
        Ok(self.push(out, shape, rg, Op::Tanh { x }))
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        let out: Vec<S> = self.data(x).iter().map(|&v| if v > S::zero() { v } else { S::zero() }).collect();
        let (shape, rg) = (self.shape(x).to_vec(), self.requires_grad(x));
        Ok(self.push(out, shape, rg, Op::Relu { x }))
    }

    pub fn leaky_relu(&mut self, x: TensorId, slope: S) -> Result<TensorId> {
        let out: Vec<S> = self.data(x).iter().map(|&v| if v >= S::zero() { v } else { slope * v }).collect();
        check_finite(&out, "leaky_relu")?;
        let (shape, rg) = (self.shape(x).to_vec(), self.requires_grad(x));
        Ok(self.push(out, shape, rg, Op::LeakyRelu { x, slope }))
    }

    /// Parametric ReLU with a single learnable slope (shape [1]).
    pub fn prelu(&mut self, x: TensorId, slope: TensorId) -> Result<TensorId> {
        if self.shape(slope) != [1] {
            return Err(Error::Shape(format!("prelu slope shape {:?}, want [1]", self.shape(slope))));
        }
        let a = self.data(slope)[0];
        let out: Vec<S> = self.data(x).iter().map(|&v| if v >= S::zero() { v } else { a * v }).collect();
        check_finite(&out, "prelu")?;
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x) || self.requires_grad(slope);
        Ok(self.push(out, shape, rg, Op::Prelu { x, slope }))
    }

    // ── Normalization ───────────────────────────────────────────────────

    /// Group normalization over the channel axis of an [N, C] tensor with
    /// per-channel affine parameters.
    pub fn group_norm(&mut self, x: TensorId, groups: usize, gamma: TensorId, beta: TensorId) -> Result<TensorId> {
        let (n, c) = self.dims2(x, "group_norm")?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::Argument(format!("group_norm: {c} channels not divisible by {groups} groups")));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Shape(format!(
                "group_norm affine shapes {:?}/{:?}, want [{c}]",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let gsize = c / groups;
        let eps = lit::<S>(GROUP_NORM_EPS);
        let data = self.data(x);
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut out = vec![S::zero(); n * c];
        let mut means = vec![S::zero(); n * groups];
        let mut inv_stds = vec![S::zero(); n * groups];
        let inv_gsize = S::one() / lit::<S>(gsize as f64);
        for row in 0..n {
            for gi in 0..groups {
                let base = row * c + gi * gsize;
                let chunk = &data[base..base + gsize];
                let mean = chunk.iter().fold(S::zero(), |acc, &v| acc + v) * inv_gsize;
                let var = chunk.iter().fold(S::zero(), |acc, &v| acc + (v - mean) * (v - mean)) * inv_gsize;
                let inv_std = S::one() / (var + eps).sqrt();
                means[row * groups + gi] = mean;
                inv_stds[row * groups + gi] = inv_std;
                for j in 0..gsize {
                    let ch = gi * gsize + j;
                    out[row * c + ch] = (chunk[j] - mean) * inv_std * g[ch] + b[ch];
                }
            }
        }
        check_finite(&out, "group_norm")?;
        let rg = self.requires_grad(x) || self.requires_grad(gamma) || self.requires_grad(beta);
        Ok(self.push(out, vec![n, c], rg, Op::GroupNorm { x, gamma, beta, groups, mean: means, inv_std: inv_stds }))
    }

    // ── Pooling ─────────────────────────────────────────────────────────

    /// Per-channel max over the K axis of an [N, K, C] tensor. The gradient
    /// routes to the argmax; ties go to the lowest K index.
    pub fn max_pool_neighbors(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(Error::Shape(format!("max_pool_neighbors: expected [N, K, C], got {s:?}")));
        }
        let (n, k, c) = (s[0], s[1], s[2]);
        if k == 0 {
            return Err(Error::Argument("max_pool_neighbors: K must be >= 1".into()));
        }
        let data = self.data(x);
        let mut out = vec![S::zero(); n * c];
        let mut argmax = vec![0u32; n * c];
        for i in 0..n {
            for ch in 0..c {
                let mut best = data[i * k * c + ch];
                let mut best_k = 0u32;
                for kk in 1..k {
                    let v = data[(i * k + kk) * c + ch];
                    if v > best {
                        best = v;
                        best_k = kk as u32;
                    }
                }
                out[i * c + ch] = best;
                argmax[i * c + ch] = best_k;
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(out, vec![n, c], rg, Op::MaxPoolNeighbors { x, argmax }))
    }

    // ── Shape plumbing ──────────────────────────────────────────────────

    pub fn concat(&mut self, xs: &[TensorId], axis: usize) -> Result<TensorId> {
        if xs.is_empty() {
            return Err(Error::Argument("concat of zero tensors".into()));
        }
        let rank = self.shape(xs[0]).len();
        if axis >= rank {
            return Err(Error::Shape(format!("concat axis {axis} out of range for rank {rank}")));
        }
        let mut out_shape = self.shape(xs[0]).to_vec();
        for &x in &xs[1..] {
            let s = self.shape(x);
            if s.len() != rank {
                return Err(Error::Shape(format!("concat rank mismatch {rank} vs {}", s.len())));
            }
            for d in 0..rank {
                if d != axis && s[d] != out_shape[d] {
                    return Err(Error::Shape(format!(
                        "concat off-axis dim {d} mismatch: {:?} vs {:?}",
                        out_shape, s
                    )));
                }
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let total_axis = out_shape[axis];
        let mut out = vec![S::zero(); outer * total_axis * inner];
        let mut offset = 0usize;
        for &x in xs {
            let a = self.shape(x)[axis];
            let src = self.data(x);
            for o in 0..outer {
                let dst_base = (o * total_axis + offset) * inner;
                let src_base = o * a * inner;
                out[dst_base..dst_base + a * inner].copy_from_slice(&src[src_base..src_base + a * inner]);
            }
            offset += a;
        }
        let rg = xs.iter().any(|&x| self.requires_grad(x));
        Ok(self.push(out, out_shape, rg, Op::Concat { xs: xs.to_vec(), axis }))
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.data(x).len() {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape(x),
                shape
            )));
        }
        let data = self.data(x).to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(data, shape, rg, Op::Reshape { x }))
    }

    /// Gather full rows of a 2-D tensor. Rows may repeat.
    pub fn gather_rows(&mut self, x: TensorId, rows: Vec<u32>) -> Result<TensorId> {
        let (n, c) = self.dims2(x, "gather_rows")?;
        if let Some(&bad) = rows.iter().find(|&&r| r as usize >= n) {
            return Err(Error::Argument(format!("gather_rows: row {bad} out of range {n}")));
        }
        let src = self.data(x);
        let mut out = vec![S::zero(); rows.len() * c];
        for (dst, &r) in out.chunks_mut(c).zip(&rows) {
            dst.copy_from_slice(&src[r as usize * c..r as usize * c + c]);
        }
        let rg = self.requires_grad(x);
        Ok(self.push(out, vec![rows.len(), c], rg, Op::GatherRows { x, rows }))
    }

    /// out[dst] = sum of weight * src[idx] over the given (dst, idx, weight)
    /// terms; untouched destinations stay zero. Flat indexing on both sides.
    pub fn weighted_gather_sum(
        &mut self,
        src: TensorId,
        terms: Vec<(u32, u32, S)>,
        out_shape: Vec<usize>,
    ) -> Result<TensorId> {
        let numel: usize = out_shape.iter().product();
        let src_len = self.data(src).len();
        for &(dst, idx, _) in &terms {
            if dst as usize >= numel {
                return Err(Error::Argument(format!("weighted_gather_sum: dst {dst} out of range {numel}")));
            }
            if idx as usize >= src_len {
                return Err(Error::Argument(format!("weighted_gather_sum: src {idx} out of range {src_len}")));
            }
        }
        let data = self.data(src);
        let mut out = vec![S::zero(); numel];
        for &(dst, idx, w) in &terms {
            out[dst as usize] += w * data[idx as usize];
        }
        check_finite(&out, "weighted_gather_sum")?;
        let rg = self.requires_grad(src);
        Ok(self.push(out, out_shape, rg, Op::WeightedGatherSum { src, terms }))
    }

    // ── Elementwise arithmetic ──────────────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip_op(a, b, "add")
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip_op(a, b, "sub")
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip_op(a, b, "mul")
    }

    fn zip_op(&mut self, a: TensorId, b: TensorId, which: &str) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{which}: shapes {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let (da, db) = (self.data(a), self.data(b));
        let out: Vec<S> = match which {
            "add" => da.iter().zip(db).map(|(&x, &y)| x + y).collect(),
            "sub" => da.iter().zip(db).map(|(&x, &y)| x - y).collect(),
            _ => da.iter().zip(db).map(|(&x, &y)| x * y).collect(),
        };
        check_finite(&out, which)?;
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let op = match which {
            "add" => Op::Add { a, b },
            "sub" => Op::Sub { a, b },
            _ => Op::Mul { a, b },
        };
        Ok(self.push(out, shape, rg, op))
    }

    pub fn scale(&mut self, x: TensorId, c: S) -> Result<TensorId> {
        let out: Vec<S> = self.data(x).iter().map(|&v| c * v).collect();
        check_finite(&out, "scale")?;
        let (shape, rg) = (self.shape(x).to_vec(), self.requires_grad(x));
        Ok(self.push(out, shape, rg, Op::Scale { x, c }))
    }

    pub fn abs(&mut self, x: TensorId) -> Result<TensorId> {
        let out: Vec<S> = self.data(x).iter().map(|&v| v.abs()).collect();
        let (shape, rg) = (self.shape(x).to_vec(), self.requires_grad(x));
        Ok(self.push(out, shape, rg, Op::Abs { x }))
    }

    /// Sum of all entries, as a [1] tensor.
    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.data(x).iter().fold(S::zero(), |acc, &v| acc + v);
        if !s.is_finite() {
            return Err(Error::NonFinite("sum_all".into()));
        }
        let rg = self.requires_grad(x);
        Ok(self.push(vec![s], vec![1], rg, Op::SumAll { x }))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar root. Consumes the recorded graph:
    /// calling it again without recording new ops is an error.
    pub fn backward(&mut self, root: TensorId) -> Result<Gradients<S>> {
        if self.backward_spent {
            return Err(Error::BackwardReplay);
        }
        let root_shape = self.shape(root);
        if root_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarRoot(root_shape.to_vec()));
        }
        if !self.requires_grad(root) {
            return Err(Error::Argument("backward root does not require gradients".into()));
        }
        self.backward_spent = true;

        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![S::one()]);

        for idx in (0..=root.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            // Leaves keep their gradient; interior nodes hand it downstream.
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(gout);
                continue;
            }
            self.propagate(idx, &gout, &mut grads);
            if self.nodes[idx].requires_grad {
                // Interior gradients are not part of the result; drop them.
            }
        }
        // Only leaves with requires_grad report gradients.
        for (i, slot) in grads.iter_mut().enumerate() {
            if !(matches!(self.nodes[i].op, Op::Leaf) && self.nodes[i].requires_grad) {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accum(grads: &mut [Option<Vec<S>>], nodes: &[Node<S>], id: TensorId, add: impl FnOnce(&mut [S])) {
        if !nodes[id.0].requires_grad {
            return;
        }
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(vec![S::zero(); nodes[id.0].data.len()]);
        }
        add(slot.as_mut().unwrap());
    }

    fn propagate(&self, idx: usize, gout: &[S], grads: &mut Vec<Option<Vec<S>>>) {
        let nodes = &self.nodes;
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                Self::accum(grads, nodes, *a, |ga| matmul_nt(gout, &nodes[b.0].data, m, n, k, ga));
                Self::accum(grads, nodes, *b, |gb| matmul_tn(&nodes[a.0].data, gout, m, k, n, gb));
            }
            Op::Transpose { x } => {
                let (n, m) = (nodes[idx].shape[0], nodes[idx].shape[1]);
                Self::accum(grads, nodes, *x, |gx| {
                    for i in 0..n {
                        for j in 0..m {
                            gx[j * n + i] += gout[i * m + j];
                        }
                    }
                });
            }
            Op::PointwiseLinear { x, w, bias } => {
                let (n, cin) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                let cout = nodes[w.0].shape[1];
                Self::accum(grads, nodes, *x, |gx| matmul_nt(gout, &nodes[w.0].data, n, cout, cin, gx));
                Self::accum(grads, nodes, *w, |gw| matmul_tn(&nodes[x.0].data, gout, n, cin, cout, gw));
                Self::accum(grads, nodes, *bias, |gb| {
                    for row in gout.chunks(cout) {
                        for (g, &v) in gb.iter_mut().zip(row) {
                            *g += v;
                        }
                    }
                });
            }
            Op::Sigmoid { x } => {
                let y = &nodes[idx].data;
                Self::accum(grads, nodes, *x, |gx| {
                    for ((g, &yv), &go) in gx.iter_mut().zip(y).zip(gout) {
                        *g += go * yv * (S::one() - yv);
                    }
                });
            }
            Op::Tanh { x } => {
                let y = &nodes[idx].data;
                Self::accum(grads, nodes, *x, |gx| {
                    for ((g, &yv), &go) in gx.iter_mut().zip(y).zip(gout) {
                        *g += go * (S::one() - yv * yv);
                    }
                });
            }
            Op::Relu { x } => {
                let xd = &nodes[x.0].data;
                Self::accum(grads, nodes, *x, |gx| {
                    for ((g, &xv), &go) in gx.iter_mut().zip(xd).zip(gout) {
                        if xv > S::zero() {
                            *g += go;
                        }
                    }
                });
            }
            Op::LeakyRelu { x, slope } => {
                let xd = &nodes[x.0].data;
                let a = *slope;
                Self::accum(grads, nodes, *x, |gx| {
                    for ((g, &xv), &go) in gx.iter_mut().zip(xd).zip(gout) {
                        *g += if xv >= S::zero() { go } else { go * a };
                    }
                });
            }
            Op::Prelu { x, slope } => {
                let xd = &nodes[x.0].data;
                let a = nodes[slope.0].data[0];
                Self::accum(grads, nodes, *x, |gx| {
                    for ((g, &xv), &go) in gx.iter_mut().zip(xd).zip(gout) {
                        *g += if xv >= S::zero() { go } else { go * a };
                    }
                });
                Self::accum(grads, nodes, *slope, |gs| {
                    let mut acc = S::zero();
                    for (&xv, &go) in xd.iter().zip(gout) {
                        if xv < S::zero() {
                            acc += go * xv;
                        }
                    }
                    gs[0] += acc;
                });
            }
            Op::GroupNorm { x, gamma, beta, groups, mean, inv_std } => {
                let (n, c) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                let gsize = c / groups;
                let xd = &nodes[x.0].data;
                let gam = &nodes[gamma.0].data;
                let inv_m = S::one() / lit::<S>(gsize as f64);
                Self::accum(grads, nodes, *x, |gx| {
                    for row in 0..n {
                        for gi in 0..*groups {
                            let mu = mean[row * groups + gi];
                            let is = inv_std[row * groups + gi];
                            let base = row * c + gi * gsize;
                            // dxhat_j = gout_j * gamma_j; reduce the two sums,
                            // then dx_j = is * (dxhat_j - mean(dxhat) - xhat_j * mean(dxhat*xhat)).
                            let mut sum_dxhat = S::zero();
                            let mut sum_dxhat_xhat = S::zero();
                            for j in 0..gsize {
                                let ch = gi * gsize + j;
                                let xhat = (xd[base + j] - mu) * is;
                                let dxhat = gout[base + j] * gam[ch];
                                sum_dxhat += dxhat;
                                sum_dxhat_xhat += dxhat * xhat;
                            }
                            let m_dxhat = sum_dxhat * inv_m;
                            let m_dxhat_xhat = sum_dxhat_xhat * inv_m;
                            for j in 0..gsize {
                                let ch = gi * gsize + j;
                                let xhat = (xd[base + j] - mu) * is;
                                let dxhat = gout[base + j] * gam[ch];
                                gx[base + j] += is * (dxhat - m_dxhat - xhat * m_dxhat_xhat);
                            }
                        }
                    }
                });
                Self::accum(grads, nodes, *gamma, |gg| {
                    for row in 0..n {
                        for ch in 0..c {
                            let gi = ch / gsize;
                            let mu = mean[row * groups + gi];
                            let is = inv_std[row * groups + gi];
                            let xhat = (xd[row * c + ch] - mu) * is;
                            gg[ch] += gout[row * c + ch] * xhat;
                        }
                    }
                });
                Self::accum(grads, nodes, *beta, |gb| {
                    for row in 0..n {
                        for ch in 0..c {
                            gb[ch] += gout[row * c + ch];
                        }
                    }
                });
            }
            Op::MaxPoolNeighbors { x, argmax } => {
                let (n, k, c) = (nodes[x.0].shape[0], nodes[x.0].shape[1], nodes[x.0].shape[2]);
                let _ = n;
                Self::accum(grads, nodes, *x, |gx| {
                    for (flat, &go) in gout.iter().enumerate() {
                        let (i, ch) = (flat / c, flat % c);
                        let kk = argmax[flat] as usize;
                        gx[(i * k + kk) * c + ch] += go;
                    }
                });
            }
            Op::Concat { xs, axis } => {
                let out_shape = &nodes[idx].shape;
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let total_axis = out_shape[*axis];
                let mut offset = 0usize;
                for &x in xs {
                    let a = nodes[x.0].shape[*axis];
                    Self::accum(grads, nodes, x, |gx| {
                        for o in 0..outer {
                            let src_base = (o * total_axis + offset) * inner;
                            let dst_base = o * a * inner;
                            for t in 0..a * inner {
                                gx[dst_base + t] += gout[src_base + t];
                            }
                        }
                    });
                    offset += a;
                }
            }
            Op::Add { a, b } => {
                Self::accum(grads, nodes, *a, |g| {
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                });
                Self::accum(grads, nodes, *b, |g| {
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                });
            }
            Op::Sub { a, b } => {
                Self::accum(grads, nodes, *a, |g| {
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                });
                Self::accum(grads, nodes, *b, |g| {
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi -= go;
                    }
                });
            }
            Op::Mul { a, b } => {
                let (da, db) = (&nodes[a.0].data, &nodes[b.0].data);
                Self::accum(grads, nodes, *a, |g| {
                    for ((gi, &bv), &go) in g.iter_mut().zip(db).zip(gout) {
                        *gi += go * bv;
                    }
                });
                Self::accum(grads, nodes, *b, |g| {
                    for ((gi, &av), &go) in g.iter_mut().zip(da).zip(gout) {
                        *gi += go * av;
                    }
                });
            }
            Op::GatherRows { x, rows } => {
                let c = nodes[x.0].shape[1];
                Self::accum(grads, nodes, *x, |gx| {
                    for (r, grow) in rows.iter().zip(gout.chunks(c)) {
                        let base = *r as usize * c;
                        for (g, &go) in gx[base..base + c].iter_mut().zip(grow) {
                            *g += go;
                        }
                    }
                });
            }
            Op::WeightedGatherSum { src, terms } => {
                Self::accum(grads, nodes, *src, |gs| {
                    for &(dst, si, w) in terms {
                        gs[si as usize] += w * gout[dst as usize];
                    }
                });
            }
            Op::Reshape { x } => {
                Self::accum(grads, nodes, *x, |gx| {
                    for (g, &go) in gx.iter_mut().zip(gout) {
                        *g += go;
                    }
                });
            }
            Op::SumAll { x } => {
                let go = gout[0];
                Self::accum(grads, nodes, *x, |gx| {
                    for g in gx.iter_mut() {
                        *g += go;
                    }
                });
            }
            Op::Scale { x, c } => {
                let cc = *c;
                Self::accum(grads, nodes, *x, |gx| {
                    for (g, &go) in gx.iter_mut().zip(gout) {
                        *g += cc * go;
                    }
                });
            }
            Op::Abs { x } => {
                let xd = &nodes[x.0].data;
                Self::accum(grads, nodes, *x, |gx| {
                    for ((g, &xv), &go) in gx.iter_mut().zip(xd).zip(gout) {
                        if xv > S::zero() {
                            *g += go;
                        } else if xv < S::zero() {
                            *g -= go;
                        }
                    }
                });
            }
        }
    }
}

fn check_finite<S: Scalar>(data: &[S], ctx: &str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(ctx.into()))
    }
}

/// C[m,n] += A[m,k] · B[k,n] with C zeroed first.
fn matmul_nn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for (i, orow) in out.chunks_mut(n).enumerate().take(m) {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// C[m,k] += G[m,n] · B[k,n]ᵀ — accumulates into `out`.
fn matmul_nt<S: Scalar>(g: &[S], b: &[S], m: usize, n: usize, k: usize, out: &mut [S]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (o, brow) in orow.iter_mut().zip(b.chunks(n)) {
            let mut acc = S::zero();
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            *o += acc;
        }
    }
}

/// C[k,n] += A[m,k]ᵀ · G[m,n] — accumulates into `out`.
fn matmul_tn<S: Scalar>(a: &[S], g: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheck};

    fn tape() -> Tape<f64> {
        Tape::new()
    }

    #[test]
    fn matmul_identity_passthrough() {
        let mut t = tape();
        let i2 = t.constant(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]).unwrap();
        let b = t.constant(vec![3.0, -1.0, 2.5, 0.5], vec![2, 2]).unwrap();
        let y = t.matmul(i2, b).unwrap();
        assert_eq!(t.data(y), t.data(b));
    }

    #[test]
    fn matmul_hand_case() {
        // [[1, 0]] · [[0, 2], [1, 0]] = [[0, 2]]
        let mut t = tape();
        let a = t.constant(vec![1.0, 0.0], vec![1, 2]).unwrap();
        let b = t.constant(vec![0.0, 2.0, 1.0, 0.0], vec![2, 2]).unwrap();
        let y = t.matmul(a, b).unwrap();
        assert_eq!(t.data(y), &[0.0, 2.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut t = tape();
        let a = t.constant(vec![1.0, 2.0], vec![1, 2]).unwrap();
        let b = t.constant(vec![1.0, 2.0, 3.0], vec![3, 1]).unwrap();
        assert!(matches!(t.matmul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let check = GradCheck::new(vec![("a", vec![2, 3]), ("b", vec![3, 2])], 7, |t, ids| {
            let y = t.matmul(ids[0], ids[1])?;
            t.sum_all(y)
        });
        check_gradients(&check, 1e-4);
    }

    #[test]
    fn pointwise_linear_identity() {
        let mut t = tape();
        let x = t.constant(vec![1.0, 2.0, -3.0, 4.0], vec![2, 2]).unwrap();
        let w = t.constant(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]).unwrap();
        let b = t.constant(vec![0.0, 0.0], vec![2]).unwrap();
        let y = t.pointwise_linear(x, w, b).unwrap();
        assert_eq!(t.data(y), t.data(x));
    }

    #[test]
    fn pointwise_linear_hand_case() {
        // x=[[1,2]], w=[[1],[1]], bias=[0.5] -> [[3.5]]
        let mut t = tape();
        let x = t.constant(vec![1.0, 2.0], vec![1, 2]).unwrap();
        let w = t.constant(vec![1.0, 1.0], vec![2, 1]).unwrap();
        let b = t.constant(vec![0.5], vec![1]).unwrap();
        let y = t.pointwise_linear(x, w, b).unwrap();
        assert_eq!(t.data(y), &[3.5]);
    }

    #[test]
    fn pointwise_linear_gradient() {
        let check = GradCheck::new(
            vec![("x", vec![3, 2]), ("w", vec![2, 4]), ("b", vec![4])],
            11,
            |t, ids| {
                let y = t.pointwise_linear(ids[0], ids[1], ids[2])?;
                t.sum_all(y)
            },
        );
        check_gradients(&check, 1e-4);
    }

    #[test]
    fn activation_values() {
        let mut t = tape();
        let x = t.constant(vec![0.0, -1.0, 2.0], vec![1, 3]).unwrap();
        let s = t.sigmoid(x).unwrap();
        assert_eq!(t.data(s)[0], 0.5);
        let l = t.leaky_relu(x, 0.1).unwrap();
        assert!((t.data(l)[1] - (-0.1)).abs() < 1e-12);
        assert_eq!(t.data(l)[2], 2.0);
        let r = t.relu(x).unwrap();
        assert_eq!(t.data(r), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn activation_gradients() {
        for act in ["sigmoid", "tanh", "leaky", "prelu"] {
            let check = GradCheck::new(vec![("x", vec![2, 3]), ("a", vec![1])], 3, move |t, ids| {
                let y = match act {
                    "sigmoid" => t.sigmoid(ids[0])?,
                    "tanh" => t.tanh(ids[0])?,
                    "leaky" => t.leaky_relu(ids[0], 0.1)?,
                    _ => t.prelu(ids[0], ids[1])?,
                };
                t.sum_all(y)
            });
            check_gradients(&check, 1e-4);
        }
    }

    #[test]
    fn group_norm_constant_input_gives_beta() {
        let mut t = tape();
        let x = t.constant(vec![5.0; 8], vec![2, 4]).unwrap();
        let gamma = t.constant(vec![2.0; 4], vec![4]).unwrap();
        let beta = t.constant(vec![0.5, -0.5, 1.0, 0.0], vec![4]).unwrap();
        let y = t.group_norm(x, 2, gamma, beta).unwrap();
        for row in t.data(y).chunks(4) {
            for (v, b) in row.iter().zip([0.5, -0.5, 1.0, 0.0]) {
                assert!((v - b).abs() < 1e-9, "zero-variance group should collapse to beta");
            }
        }
    }

    #[test]
    fn group_norm_single_group_matches_layer_norm_oracle() {
        let mut t = tape();
        let data = vec![1.0, -2.0, 0.5, 3.0, 4.0, -1.0, 0.0, 2.0];
        let x = t.constant(data.clone(), vec![2, 4]).unwrap();
        let gamma = t.constant(vec![1.0; 4], vec![4]).unwrap();
        let beta = t.constant(vec![0.0; 4], vec![4]).unwrap();
        let y = t.group_norm(x, 1, gamma, beta).unwrap();
        for (row_in, row_out) in data.chunks(4).zip(t.data(y).chunks(4)) {
            let mean: f64 = row_in.iter().sum::<f64>() / 4.0;
            let var: f64 = row_in.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            for (xi, yi) in row_in.iter().zip(row_out) {
                let want = (xi - mean) / (var + GROUP_NORM_EPS).sqrt();
                assert!((yi - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn group_norm_rejects_indivisible_groups() {
        let mut t = tape();
        let x = t.constant(vec![0.0; 6], vec![2, 3]).unwrap();
        let gamma = t.constant(vec![1.0; 3], vec![3]).unwrap();
        let beta = t.constant(vec![0.0; 3], vec![3]).unwrap();
        assert!(matches!(t.group_norm(x, 2, gamma, beta), Err(Error::Argument(_))));
    }

    #[test]
    fn group_norm_gradient() {
        let check = GradCheck::new(
            vec![("x", vec![3, 4]), ("gamma", vec![4]), ("beta", vec![4])],
            5,
            |t, ids| {
                let y = t.group_norm(ids[0], 2, ids[1], ids[2])?;
                // Weight entries unevenly so per-element errors cannot cancel.
                let n = t.data(y).len();
                let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.05 * i as f64).collect();
                let wt = t.constant(w, t.shape(y).to_vec())?;
                let p = t.mul(y, wt)?;
                t.sum_all(p)
            },
        );
        check_gradients(&check, 1e-4);
    }

    #[test]
    fn max_pool_examples() {
        let mut t = tape();
        // K = 1 is the identity.
        let x = t.constant(vec![1.0, 2.0, 3.0], vec![1, 1, 3]).unwrap();
        let y = t.max_pool_neighbors(x).unwrap();
        assert_eq!(t.data(y), &[1.0, 2.0, 3.0]);
        // [[1,5],[3,2]] pooled over K -> [3,5]
        let x = t.constant(vec![1.0, 5.0, 3.0, 2.0], vec![1, 2, 2]).unwrap();
        let y = t.max_pool_neighbors(x).unwrap();
        assert_eq!(t.data(y), &[3.0, 5.0]);
    }

    #[test]
    fn max_pool_tie_routes_gradient_to_lower_index() {
        let mut t = tape();
        let x = t.leaf(vec![2.0, 7.0, 2.0, 1.0], vec![1, 2, 2], true).unwrap();
        let y = t.max_pool_neighbors(x).unwrap();
        let s = t.sum_all(y).unwrap();
        let grads = t.backward(s).unwrap();
        // Channel 0 ties at 2.0: gradient goes to k=0, not k=1.
        assert_eq!(grads.get(x).unwrap(), &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn max_pool_rejects_empty_neighborhood() {
        let mut t = tape();
        let x = t.constant(vec![], vec![1, 0, 3]).unwrap();
        assert!(matches!(t.max_pool_neighbors(x), Err(Error::Argument(_))));
    }

    #[test]
    fn concat_single_is_identity_and_sizes_add() {
        let mut t = tape();
        let a = t.constant(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]).unwrap();
        let y = t.concat(&[a], 1).unwrap();
        assert_eq!(t.data(y), t.data(a));
        let b = t.constant(vec![9.0, 8.0, 7.0, 6.0, 5.0, 4.0], vec![2, 3]).unwrap();
        let y = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.shape(y), &[2, 5]);
        assert_eq!(t.data(y), &[1.0, 2.0, 9.0, 8.0, 7.0, 3.0, 4.0, 5.0, 4.0, 6.0]);
    }

    #[test]
    fn concat_rejects_off_axis_mismatch() {
        let mut t = tape();
        let a = t.constant(vec![0.0; 4], vec![2, 2]).unwrap();
        let b = t.constant(vec![0.0; 3], vec![3, 1]).unwrap();
        assert!(matches!(t.concat(&[a, b], 1), Err(Error::Shape(_))));
    }

    #[test]
    fn two_layer_mlp_full_graph_gradient() {
        let check = GradCheck::new(
            vec![
                ("x", vec![4, 3]),
                ("w1", vec![3, 5]),
                ("b1", vec![5]),
                ("w2", vec![5, 2]),
                ("b2", vec![2]),
            ],
            13,
            |t, ids| {
                let h = t.pointwise_linear(ids[0], ids[1], ids[2])?;
                let h = t.tanh(h)?;
                let y = t.pointwise_linear(h, ids[3], ids[4])?;
                t.sum_all(y)
            },
        );
        check_gradients(&check, 1e-4);
    }

    #[test]
    fn gather_and_scatter_gradient() {
        let check = GradCheck::new(vec![("x", vec![4, 2])], 17, |t, ids| {
            let g = t.gather_rows(ids[0], vec![1, 1, 3, 0])?;
            let s = t.weighted_gather_sum(
                g,
                vec![(0, 0, 0.5), (0, 2, 0.5), (1, 4, 1.0), (1, 6, -2.0)],
                vec![2, 1],
            )?;
            t.sum_all(s)
        });
        check_gradients(&check, 1e-4);
    }

    #[test]
    fn abs_scale_sub_gradient() {
        let check = GradCheck::new(vec![("a", vec![2, 3]), ("b", vec![2, 3])], 19, |t, ids| {
            let d = t.sub(ids[0], ids[1])?;
            let d = t.abs(d)?;
            let d = t.scale(d, 0.7)?;
            t.sum_all(d)
        });
        check_gradients(&check, 1e-4);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut t = tape();
        let x = t.leaf(vec![2.0], vec![1], true).unwrap();
        let y = t.scale(x, 3.0).unwrap();
        let s = t.sum_all(y).unwrap();
        t.backward(s).unwrap();
        assert!(matches!(t.backward(s), Err(Error::BackwardReplay)));
        // Recording a new op re-arms backward.
        let y2 = t.scale(x, 2.0).unwrap();
        let s2 = t.sum_all(y2).unwrap();
        assert!(t.backward(s2).is_ok());
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut t = tape();
        let x = t.leaf(vec![1.0, 2.0], vec![2], true).unwrap();
        let y = t.scale(x, 1.0).unwrap();
        assert!(matches!(t.backward(y), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn gradient_accumulates_when_tensor_feeds_multiple_ops() {
        let mut t = tape();
        let x = t.leaf(vec![3.0], vec![1], true).unwrap();
        let a = t.scale(x, 2.0).unwrap();
        let b = t.scale(x, 5.0).unwrap();
        let y = t.add(a, b).unwrap();
        let s = t.sum_all(y).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[7.0]);
    }

    #[test]
    fn non_finite_result_is_an_error() {
        let mut t = tape();
        let x = t.constant(vec![1e300, 1e300], vec![1, 2]).unwrap();
        let w = t.constant(vec![1e300, 1e300], vec![2, 1]).unwrap();
        let b = t.constant(vec![0.0], vec![1]).unwrap();
        assert!(matches!(t.pointwise_linear(x, w, b), Err(Error::NonFinite(_))));
        assert!(t.leaf(vec![f64::NAN], vec![1], false).is_err());
    }

    #[test]
    fn ops_are_deterministic() {
        let run = || {
            let mut t = Tape::<f32>::new();
            let x = t.constant((0..60).map(|i| (i as f32 * 0.37).sin()).collect(), vec![10, 6]).unwrap();
            let w = t.constant((0..24).map(|i| (i as f32 * 0.11).cos()).collect(), vec![6, 4]).unwrap();
            let b = t.constant(vec![0.1; 4], vec![4]).unwrap();
            let y = t.pointwise_linear(x, w, b).unwrap();
            let y = t.tanh(y).unwrap();
            let s = t.sum_all(y).unwrap();
            t.data(s)[0].to_bits()
        };
        assert_eq!(run(), run());
    }
}
