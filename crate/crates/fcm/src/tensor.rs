//! Dense f32 tensors with reverse-mode automatic differentiation.
//!
//! Operations are recorded on a [`Tape`] in execution order; [`Tape::backward`]
//! replays the tape in exact reverse order and accumulates gradients into every
//! tensor that requires them. All storage is 32-bit floats and all kernels are
//! sequential, so identical inputs in identical op order produce bit-identical
//! outputs.

use thiserror::Error;

/// Additive attention-mask sentinel. Large negative rather than -inf so a
/// masked row never turns into NaN inside softmax.
pub const MASK_SENTINEL: f32 = -1e9;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("matmul shape mismatch: lhs {lhs:?} vs rhs {rhs:?}")]
    MatmulShape { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("fully masked attention row (row {row})")]
    FullyMaskedRow { row: usize },
    #[error("embedding id {id} out of range for vocabulary of {vocab}")]
    IdOutOfRange { id: u32, vocab: usize },
    #[error("no loss positions: weight sum is zero")]
    NoLossPositions,
    #[error("backward already called on this tape; call clear_grads first")]
    BackwardTwice,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("rotary embedding requires an even head size, got {0}")]
    OddHeadSize(usize),
    #[error("invalid permutation {perm:?} for rank {rank}")]
    BadPermutation { perm: Vec<usize>, rank: usize },
    #[error("reshape from {from:?} to {to:?} changes element count")]
    BadReshape { from: Vec<usize>, to: Vec<usize> },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

/// Integer tensor (token ids, targets, positions). Never differentiated, so it
/// lives outside the tape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntTensor {
    pub shape: Vec<usize>,
    pub data: Vec<u32>,
}

impl IntTensor {
    pub fn new(shape: Vec<usize>, data: Vec<u32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        IntTensor { shape, data }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Swish { x: TensorId },
    Scale { x: TensorId, c: f32 },
    SoftmaxLastDim { x: TensorId },
    RmsNorm { x: TensorId, gain: TensorId },
    EmbeddingLookup { table: TensorId, ids: IntTensor },
    CrossEntropy { logits: TensorId, targets: Vec<u32>, weights: Vec<f32>, weight_sum: f64 },
    Rope { x: TensorId, positions: Vec<u32> },
    TransposeLast2 { x: TensorId },
    Reshape { x: TensorId },
    Permute { x: TensorId, perm: Vec<usize> },
    BiasAdd { x: TensorId, bias: TensorId },
    Dropout { x: TensorId, mask: Vec<f32> },
    Sum { x: TensorId },
    Mean { x: TensorId },
}

impl Op {
    fn inputs(&self) -> Vec<TensorId> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b } | Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::Swish { x }
            | Op::Scale { x, .. }
            | Op::SoftmaxLastDim { x }
            | Op::Rope { x, .. }
            | Op::TransposeLast2 { x }
            | Op::Reshape { x }
            | Op::Permute { x, .. }
            | Op::Dropout { x, .. }
            | Op::Sum { x }
            | Op::Mean { x } => vec![*x],
            Op::RmsNorm { x, gain } => vec![*x, *gain],
            Op::EmbeddingLookup { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::BiasAdd { x, bias } => vec![*x, *bias],
        }
    }
}

struct Node {
    data: Vec<f32>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
    op: Op,
    /// f64 value for scalar reductions; lets finite-difference oracles read
    /// the loss at better than f32 resolution.
    scalar_f64: Option<f64>,
}

/// Recording tape. One tape per forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

const RMS_NORM_EPS: f32 = 1e-6;

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<f32>, requires_grad: bool) -> TensorId {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "leaf data/shape mismatch");
        self.push(data, shape, requires_grad, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f32) -> TensorId {
        self.leaf(vec![1], vec![v], false)
    }

    pub fn shape(&self, t: TensorId) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn data(&self, t: TensorId) -> &[f32] {
        &self.nodes[t.0].data
    }

    pub fn grad(&self, t: TensorId) -> Option<&[f32]> {
        self.nodes[t.0].grad.as_deref()
    }

    pub fn requires_grad(&self, t: TensorId) -> bool {
        self.nodes[t.0].requires_grad
    }

    /// Scalar value at f64 precision where the op computed one (Sum/Mean/
    /// CrossEntropy), falling back to the stored f32.
    pub fn scalar_f64(&self, t: TensorId) -> f64 {
        let n = &self.nodes[t.0];
        n.scalar_f64.unwrap_or_else(|| n.data[0] as f64)
    }

    fn push(&mut self, data: Vec<f32>, shape: Vec<usize>, requires_grad: bool, op: Op) -> TensorId {
        // Forward ops must never conjure NaN/Inf out of finite inputs; a
        // non-finite value that merely propagates from an already-poisoned
        // input is the training loop's problem to report.
        #[cfg(debug_assertions)]
        if !matches!(op, Op::Leaf) && !data.iter().all(|v| v.is_finite()) {
            let inputs_finite = op
                .inputs()
                .iter()
                .all(|t| self.nodes[t.0].data.iter().all(|v| v.is_finite()));
            debug_assert!(!inputs_finite, "non-finite value produced by {op:?} on finite inputs");
        }
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { data, shape, requires_grad, grad: None, op, scalar_f64: None });
        id
    }

    fn push_from(&mut self, data: Vec<f32>, shape: Vec<usize>, inputs: &[TensorId], op: Op) -> TensorId {
        let requires = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.push(data, shape, requires, op)
    }

    // ── Forward ops ─────────────────────────────────────────────────

    /// Batched matrix product `[.., m, k] x [.., k, n] -> [.., m, n]` with
    /// numpy-style broadcasting over the leading batch dimensions.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ashape, bshape) = (self.nodes[a.0].shape.clone(), self.nodes[b.0].shape.clone());
        let plan = MatmulPlan::new(&ashape, &bshape)?;
        let mut out = vec![0.0; plan.out_numel()];
        for (oi, (aoff, boff)) in plan.batch_offsets().enumerate() {
            matmul_nn(
                &self.nodes[a.0].data[aoff..aoff + plan.m * plan.k],
                &self.nodes[b.0].data[boff..boff + plan.k * plan.n],
                &mut out[oi * plan.m * plan.n..(oi + 1) * plan.m * plan.n],
                plan.m,
                plan.k,
                plan.n,
            );
        }
        Ok(self.push_from(out, plan.out_shape(), &[a, b], Op::MatMul { a, b }))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape(a, b)?;
        let data: Vec<f32> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push_from(data, shape, &[a, b], Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape(a, b)?;
        let data: Vec<f32> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push_from(data, shape, &[a, b], Op::Mul { a, b }))
    }

    /// swish(x) = x * sigmoid(x)
    pub fn swish(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f32> = self.nodes[x.0].data.iter().map(|&v| v * sigmoid(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push_from(data, shape, &[x], Op::Swish { x })
    }

    pub fn scale(&mut self, x: TensorId, c: f32) -> TensorId {
        let data: Vec<f32> = self.nodes[x.0].data.iter().map(|&v| v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push_from(data, shape, &[x], Op::Scale { x, c })
    }

    /// Softmax over the last dimension, max-subtracted for stability. A row
    /// whose every entry sits at the mask sentinel has no visible key at all
    /// and is rejected.
    pub fn softmax_lastdim(&mut self, x: TensorId) -> Result<TensorId> {
        let shape = self.nodes[x.0].shape.clone();
        let d = *shape.last().expect("softmax needs at least one dim");
        let src = &self.nodes[x.0].data;
        let mut out = vec![0.0f32; src.len()];
        for (row, (xs, ys)) in src.chunks_exact(d).zip(out.chunks_exact_mut(d)).enumerate() {
            let max = xs.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            if max <= MASK_SENTINEL / 2.0 {
                return Err(TensorError::FullyMaskedRow { row });
            }
            let mut denom = 0.0f32;
            for (y, &v) in ys.iter_mut().zip(xs) {
                *y = (v - max).exp();
                denom += *y;
            }
            for y in ys.iter_mut() {
                *y /= denom;
            }
        }
        Ok(self.push_from(out, shape, &[x], Op::SoftmaxLastDim { x }))
    }

    /// y = gain * x / sqrt(mean(x^2) + eps) over the last dimension.
    pub fn rms_norm(&mut self, x: TensorId, gain: TensorId) -> Result<TensorId> {
        let shape = self.nodes[x.0].shape.clone();
        let d = *shape.last().expect("rms_norm needs at least one dim");
        if self.nodes[gain.0].shape != [d] {
            return Err(TensorError::ShapeMismatch {
                expected: vec![d],
                got: self.nodes[gain.0].shape.clone(),
            });
        }
        let src = &self.nodes[x.0].data;
        let g = &self.nodes[gain.0].data;
        let mut out = vec![0.0f32; src.len()];
        for (xs, ys) in src.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let ms = xs.iter().map(|&v| v * v).sum::<f32>() / d as f32;
            let inv = 1.0 / (ms + RMS_NORM_EPS).sqrt();
            for ((y, &v), &gv) in ys.iter_mut().zip(xs).zip(g) {
                *y = gv * v * inv;
            }
        }
        Ok(self.push_from(out, shape, &[x, gain], Op::RmsNorm { x, gain }))
    }

    /// Row gather: `table[V, d]` indexed by `ids[..]` -> `[ids.shape.., d]`.
    pub fn embedding_lookup(&mut self, table: TensorId, ids: &IntTensor) -> Result<TensorId> {
        let tshape = &self.nodes[table.0].shape;
        assert_eq!(tshape.len(), 2, "embedding table must be 2-d");
        let (vocab, d) = (tshape[0], tshape[1]);
        for &id in &ids.data {
            if id as usize >= vocab {
                return Err(TensorError::IdOutOfRange { id, vocab });
            }
        }
        let mut out = vec![0.0f32; ids.numel() * d];
        for (slot, &id) in ids.data.iter().enumerate() {
            let row = &self.nodes[table.0].data[id as usize * d..(id as usize + 1) * d];
            out[slot * d..(slot + 1) * d].copy_from_slice(row);
        }
        let mut shape = ids.shape.clone();
        shape.push(d);
        Ok(self.push_from(out, shape, &[table], Op::EmbeddingLookup { table, ids: ids.clone() }))
    }

    /// Weighted mean cross-entropy: `-sum(w * log softmax(logits)[target]) / sum(w)`.
    ///
    /// `logits` is `[.., V]`; `targets` and `weights` are flat over the leading
    /// dims. Weights are {0, 1} position markers; the position sum runs in f64.
    pub fn cross_entropy_with_logits(
        &mut self,
        logits: TensorId,
        targets: &IntTensor,
        weights: &[f32],
    ) -> Result<TensorId> {
        let shape = self.nodes[logits.0].shape.clone();
        let v = *shape.last().expect("logits need a vocab dim");
        let rows = self.nodes[logits.0].data.len() / v;
        assert_eq!(targets.numel(), rows, "one target per logits row");
        assert_eq!(weights.len(), rows, "one weight per logits row");
        for &t in &targets.data {
            if t as usize >= v {
                return Err(TensorError::IdOutOfRange { id: t, vocab: v });
            }
        }
        let weight_sum: f64 = weights.iter().map(|&w| w as f64).sum();
        if weight_sum == 0.0 {
            return Err(TensorError::NoLossPositions);
        }
        let src = &self.nodes[logits.0].data;
        let mut acc = 0.0f64;
        for (row, xs) in src.chunks_exact(v).enumerate() {
            let w = weights[row];
            if w == 0.0 {
                continue;
            }
            let max = xs.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let lse = xs.iter().map(|&x| (x - max).exp()).sum::<f32>().ln();
            let logp = xs[targets.data[row] as usize] - max - lse;
            acc -= (w * logp) as f64;
        }
        let loss = acc / weight_sum;
        let id = self.push_from(
            vec![loss as f32],
            vec![1],
            &[logits],
            Op::CrossEntropy {
                logits,
                targets: targets.data.clone(),
                weights: weights.to_vec(),
                weight_sum,
            },
        );
        self.nodes[id.0].scalar_f64 = Some(loss);
        Ok(id)
    }

    /// Rotary position embedding over the last two dims `[.., s, d_head]`:
    /// pair `(x[2j], x[2j+1])` rotates by pos * base^(-2j/d_head), base 10000.
    pub fn rope(&mut self, x: TensorId, positions: &[u32]) -> Result<TensorId> {
        let shape = self.nodes[x.0].shape.clone();
        assert!(shape.len() >= 2, "rope input must be at least 2-d");
        let d = shape[shape.len() - 1];
        let s = shape[shape.len() - 2];
        if !d.is_multiple_of(2) {
            return Err(TensorError::OddHeadSize(d));
        }
        assert_eq!(positions.len(), s, "one position per sequence slot");
        let angles = rope_angles(positions, d);
        let src = &self.nodes[x.0].data;
        let mut out = vec![0.0f32; src.len()];
        for (block_x, block_y) in src.chunks_exact(s * d).zip(out.chunks_exact_mut(s * d)) {
            rotate_block(block_x, block_y, &angles, s, d, false);
        }
        Ok(self.push_from(out, shape, &[x], Op::Rope { x, positions: positions.to_vec() }))
    }

    pub fn transpose_last2(&mut self, x: TensorId) -> TensorId {
        let shape = self.nodes[x.0].shape.clone();
        assert!(shape.len() >= 2, "transpose_last2 input must be at least 2-d");
        let (m, n) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let src = &self.nodes[x.0].data;
        let mut out = vec![0.0f32; src.len()];
        for (bx, by) in src.chunks_exact(m * n).zip(out.chunks_exact_mut(m * n)) {
            for i in 0..m {
                for j in 0..n {
                    by[j * m + i] = bx[i * n + j];
                }
            }
        }
        let mut out_shape = shape;
        let r = out_shape.len();
        out_shape.swap(r - 2, r - 1);
        self.push_from(out, out_shape, &[x], Op::TransposeLast2 { x })
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let from = self.nodes[x.0].shape.clone();
        if shape.iter().product::<usize>() != self.nodes[x.0].data.len() {
            return Err(TensorError::BadReshape { from, to: shape });
        }
        let data = self.nodes[x.0].data.clone();
        Ok(self.push_from(data, shape, &[x], Op::Reshape { x }))
    }

    /// Axis permutation: `out[coords] = in[coords[perm]]`.
    pub fn permute(&mut self, x: TensorId, perm: &[usize]) -> Result<TensorId> {
        let in_shape = self.nodes[x.0].shape.clone();
        let rank = in_shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::BadPermutation { perm: perm.to_vec(), rank });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let data = permute_data(&self.nodes[x.0].data, &in_shape, perm);
        Ok(self.push_from(data, out_shape, &[x], Op::Permute { x, perm: perm.to_vec() }))
    }

    /// `x[b, h, s, s] + bias[b, s, s]`, bias broadcast over the head dim.
    pub fn bias_add(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let xs = self.nodes[x.0].shape.clone();
        let bs = self.nodes[bias.0].shape.clone();
        if xs.len() != 4 || bs.len() != 3 || bs[0] != xs[0] || bs[1] != xs[2] || bs[2] != xs[3] {
            return Err(TensorError::ShapeMismatch { expected: vec![xs[0], xs[2], xs[3]], got: bs });
        }
        let (b, h, rows) = (xs[0], xs[1], xs[2] * xs[3]);
        let mut out = self.nodes[x.0].data.clone();
        let bias_data = &self.nodes[bias.0].data;
        for bi in 0..b {
            let bias_block = &bias_data[bi * rows..(bi + 1) * rows];
            for hi in 0..h {
                let o = &mut out[(bi * h + hi) * rows..(bi * h + hi + 1) * rows];
                for (ov, &bv) in o.iter_mut().zip(bias_block) {
                    *ov += bv;
                }
            }
        }
        // Bias entries include the mask sentinel; skip the finiteness sweep
        // guard by construction (sentinel is finite, sums stay finite).
        Ok(self.push_from(out, xs, &[x, bias], Op::BiasAdd { x, bias }))
    }

    /// Inverted dropout with a caller-supplied keep mask of factors
    /// {0, 1/(1-rate)} so the expectation is identity.
    pub fn dropout(&mut self, x: TensorId, rate: f32, rng: &mut impl rand::Rng) -> TensorId {
        let keep = 1.0 - rate;
        let n = self.nodes[x.0].data.len();
        let mask: Vec<f32> = (0..n)
            .map(|_| if rng.gen::<f32>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data: Vec<f32> =
            self.nodes[x.0].data.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push_from(data, shape, &[x], Op::Dropout { x, mask })
    }

    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let total: f64 = self.nodes[x.0].data.iter().map(|&v| v as f64).sum();
        let id = self.push_from(vec![total as f32], vec![1], &[x], Op::Sum { x });
        self.nodes[id.0].scalar_f64 = Some(total);
        id
    }

    pub fn mean(&mut self, x: TensorId) -> TensorId {
        let n = self.nodes[x.0].data.len();
        let total: f64 = self.nodes[x.0].data.iter().map(|&v| v as f64).sum();
        let m = total / n as f64;
        let id = self.push_from(vec![m as f32], vec![1], &[x], Op::Mean { x });
        self.nodes[id.0].scalar_f64 = Some(m);
        id
    }

    fn check_same_shape(&self, a: TensorId, b: TensorId) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::ShapeMismatch {
                expected: self.nodes[a.0].shape.clone(),
                got: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Populate grads of every requires_grad tensor reachable from `loss`.
    /// Gradients accumulate in fixed tape order; d(loss)/d(loss) = 1.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        self.backward_done = true;
        for i in 0..=loss.0 {
            if self.nodes[i].requires_grad && self.nodes[i].grad.is_none() {
                self.nodes[i].grad = Some(vec![0.0; self.nodes[i].data.len()]);
            }
        }
        if let Some(g) = self.nodes[loss.0].grad.as_mut() {
            g[0] = 1.0;
        } else {
            // Loss not connected to any parameter: nothing to do.
            return Ok(());
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = self.nodes[i].grad.clone() else { continue };
            let op = self.nodes[i].op.clone();
            self.backprop_node(i, &gout, op);
        }
        Ok(())
    }

    /// Drop all gradients and re-arm backward.
    pub fn clear_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    fn backprop_node(&mut self, node: usize, gout: &[f32], op: Op) {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let plan = MatmulPlan::new(&self.nodes[a.0].shape, &self.nodes[b.0].shape)
                    .expect("shapes validated at record time");
                let (m, k, n) = (plan.m, plan.k, plan.n);
                if self.nodes[a.0].requires_grad {
                    let mut ga = vec![0.0f32; self.nodes[a.0].data.len()];
                    for (oi, (aoff, boff)) in plan.batch_offsets().enumerate() {
                        matmul_nt(
                            &gout[oi * m * n..(oi + 1) * m * n],
                            &self.nodes[b.0].data[boff..boff + k * n],
                            &mut ga[aoff..aoff + m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    self.accumulate(a, &ga);
                }
                if self.nodes[b.0].requires_grad {
                    let mut gb = vec![0.0f32; self.nodes[b.0].data.len()];
                    for (oi, (aoff, boff)) in plan.batch_offsets().enumerate() {
                        matmul_tn(
                            &self.nodes[a.0].data[aoff..aoff + m * k],
                            &gout[oi * m * n..(oi + 1) * m * n],
                            &mut gb[boff..boff + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    self.accumulate(b, &gb);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(a, gout);
                self.accumulate(b, gout);
            }
            Op::Mul { a, b } => {
                if self.nodes[a.0].requires_grad {
                    let ga: Vec<f32> =
                        gout.iter().zip(&self.nodes[b.0].data).map(|(&g, &v)| g * v).collect();
                    self.accumulate(a, &ga);
                }
                if self.nodes[b.0].requires_grad {
                    let gb: Vec<f32> =
                        gout.iter().zip(&self.nodes[a.0].data).map(|(&g, &v)| g * v).collect();
                    self.accumulate(b, &gb);
                }
            }
            Op::Swish { x } => {
                let gx: Vec<f32> = gout
                    .iter()
                    .zip(&self.nodes[x.0].data)
                    .map(|(&g, &v)| {
                        let s = sigmoid(v);
                        g * s * (1.0 + v * (1.0 - s))
                    })
                    .collect();
                self.accumulate(x, &gx);
            }
            Op::Scale { x, c } => {
                let gx: Vec<f32> = gout.iter().map(|&g| g * c).collect();
                self.accumulate(x, &gx);
            }
            Op::SoftmaxLastDim { x } => {
                let d = *self.nodes[node].shape.last().unwrap();
                let y = &self.nodes[node].data;
                let mut gx = vec![0.0f32; y.len()];
                for ((ys, gs), out) in
                    y.chunks_exact(d).zip(gout.chunks_exact(d)).zip(gx.chunks_exact_mut(d))
                {
                    let dot: f32 = ys.iter().zip(gs).map(|(&yv, &gv)| yv * gv).sum();
                    for ((o, &yv), &gv) in out.iter_mut().zip(ys).zip(gs) {
                        *o = yv * (gv - dot);
                    }
                }
                self.accumulate(x, &gx);
            }
            Op::RmsNorm { x, gain } => {
                let d = *self.nodes[node].shape.last().unwrap();
                let xs_all = self.nodes[x.0].data.clone();
                let g_all = self.nodes[gain.0].data.clone();
                let mut gx = vec![0.0f32; xs_all.len()];
                let mut gg = vec![0.0f32; d];
                for (row, xs) in xs_all.chunks_exact(d).enumerate() {
                    let gs = &gout[row * d..(row + 1) * d];
                    let ms = xs.iter().map(|&v| v * v).sum::<f32>() / d as f32;
                    let inv = 1.0 / (ms + RMS_NORM_EPS).sqrt();
                    let mut dot = 0.0f32; // sum_i gout_i * gain_i * x_i
                    for i in 0..d {
                        dot += gs[i] * g_all[i] * xs[i];
                        gg[i] += gs[i] * xs[i] * inv;
                    }
                    let coef = dot * inv * inv * inv / d as f32;
                    let out = &mut gx[row * d..(row + 1) * d];
                    for i in 0..d {
                        out[i] = gs[i] * g_all[i] * inv - coef * xs[i];
                    }
                }
                self.accumulate(x, &gx);
                self.accumulate(gain, &gg);
            }
            Op::EmbeddingLookup { table, ids } => {
                let d = *self.nodes[node].shape.last().unwrap();
                let mut gt = vec![0.0f32; self.nodes[table.0].data.len()];
                for (slot, &id) in ids.data.iter().enumerate() {
                    let dst = &mut gt[id as usize * d..(id as usize + 1) * d];
                    for (dv, &gv) in dst.iter_mut().zip(&gout[slot * d..(slot + 1) * d]) {
                        *dv += gv;
                    }
                }
                self.accumulate(table, &gt);
            }
            Op::CrossEntropy { logits, targets, weights, weight_sum } => {
                let v = *self.nodes[logits.0].shape.last().unwrap();
                let src = self.nodes[logits.0].data.clone();
                let scale = gout[0] / weight_sum as f32;
                let mut gl = vec![0.0f32; src.len()];
                for (row, xs) in src.chunks_exact(v).enumerate() {
                    let w = weights[row];
                    if w == 0.0 {
                        continue;
                    }
                    let max = xs.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                    let denom: f32 = xs.iter().map(|&x| (x - max).exp()).sum();
                    let out = &mut gl[row * v..(row + 1) * v];
                    for (c, (&x, o)) in xs.iter().zip(out.iter_mut()).enumerate() {
                        let p = (x - max).exp() / denom;
                        let t = if c == targets[row] as usize { 1.0 } else { 0.0 };
                        *o = scale * w * (p - t);
                    }
                }
                self.accumulate(logits, &gl);
            }
            Op::Rope { x, positions } => {
                // Rotation is orthogonal: pull the gradient back by rotating
                // through the negated angles.
                let shape = &self.nodes[node].shape;
                let d = shape[shape.len() - 1];
                let s = shape[shape.len() - 2];
                let angles = rope_angles(&positions, d);
                let mut gx = vec![0.0f32; gout.len()];
                for (bg, bx) in gout.chunks_exact(s * d).zip(gx.chunks_exact_mut(s * d)) {
                    rotate_block(bg, bx, &angles, s, d, true);
                }
                self.accumulate(x, &gx);
            }
            Op::TransposeLast2 { x } => {
                let shape = &self.nodes[node].shape;
                let (m, n) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                let mut gx = vec![0.0f32; gout.len()];
                for (bg, bx) in gout.chunks_exact(m * n).zip(gx.chunks_exact_mut(m * n)) {
                    for i in 0..m {
                        for j in 0..n {
                            bx[j * m + i] = bg[i * n + j];
                        }
                    }
                }
                self.accumulate(x, &gx);
            }
            Op::Reshape { x } => {
                self.accumulate(x, gout);
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let gx = permute_data(gout, &self.nodes[node].shape, &inv);
                self.accumulate(x, &gx);
            }
            Op::BiasAdd { x, bias } => {
                self.accumulate(x, gout);
                if self.nodes[bias.0].requires_grad {
                    let xs = &self.nodes[node].shape;
                    let (b, h, rows) = (xs[0], xs[1], xs[2] * xs[3]);
                    let mut gb = vec![0.0f32; b * rows];
                    for bi in 0..b {
                        for hi in 0..h {
                            let src = &gout[(bi * h + hi) * rows..(bi * h + hi + 1) * rows];
                            let dst = &mut gb[bi * rows..(bi + 1) * rows];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    self.accumulate(bias, &gb);
                }
            }
            Op::Dropout { x, mask } => {
                let gx: Vec<f32> = gout.iter().zip(&mask).map(|(&g, &m)| g * m).collect();
                self.accumulate(x, &gx);
            }
            Op::Sum { x } => {
                let gx = vec![gout[0]; self.nodes[x.0].data.len()];
                self.accumulate(x, &gx);
            }
            Op::Mean { x } => {
                let n = self.nodes[x.0].data.len();
                let gx = vec![gout[0] / n as f32; n];
                self.accumulate(x, &gx);
            }
        }
    }

    fn accumulate(&mut self, t: TensorId, g: &[f32]) {
        if !self.nodes[t.0].requires_grad {
            return;
        }
        let dst = self.nodes[t.0].grad.get_or_insert_with(|| vec![0.0; g.len()]);
        for (d, &s) in dst.iter_mut().zip(g) {
            *d += s;
        }
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn rope_angles(positions: &[u32], d: usize) -> Vec<(f32, f32)> {
    let half = d / 2;
    let mut angles = Vec::with_capacity(positions.len() * half);
    for &p in positions {
        for j in 0..half {
            let theta = 10000f32.powf(-2.0 * j as f32 / d as f32);
            let a = p as f32 * theta;
            angles.push((a.cos(), a.sin()));
        }
    }
    angles
}

fn rotate_block(src: &[f32], dst: &mut [f32], angles: &[(f32, f32)], s: usize, d: usize, invert: bool) {
    let half = d / 2;
    for t in 0..s {
        for j in 0..half {
            let (cos, sin) = angles[t * half + j];
            let sin = if invert { -sin } else { sin };
            let x0 = src[t * d + 2 * j];
            let x1 = src[t * d + 2 * j + 1];
            dst[t * d + 2 * j] = x0 * cos - x1 * sin;
            dst[t * d + 2 * j + 1] = x0 * sin + x1 * cos;
        }
    }
}

fn permute_data(src: &[f32], in_shape: &[usize], perm: &[usize]) -> Vec<f32> {
    let rank = in_shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let mut out = vec![0.0f32; src.len()];
    let mut coords = vec![0usize; rank];
    for (oi, o) in out.iter_mut().enumerate() {
        let mut rem = oi;
        for d in (0..rank).rev() {
            coords[d] = rem % out_shape[d];
            rem /= out_shape[d];
        }
        let mut ii = 0;
        for d in 0..rank {
            ii += coords[d] * in_strides[perm[d]];
        }
        *o = src[ii];
    }
    out
}

// ── Matmul kernels ──────────────────────────────────────────────────

/// c += a[m,k] * b[k,n]
fn matmul_nn(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// c += a[m,n] * b[k,n]^T  (i.e. c[i,j] = sum_p a[i,p] b[j,p])
fn matmul_nt(a: &[f32], b: &[f32], c: &mut [f32], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let crow = &mut c[i * k..(i + 1) * k];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * n..(j + 1) * n];
            let mut acc = 0.0f32;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *cv += acc;
        }
    }
}

/// c += a[m,k]^T * b[m,n]  (i.e. c[i,j] = sum_p a[p,i] b[p,j])
fn matmul_tn(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    for p in 0..m {
        let arow = &a[p * k..(p + 1) * k];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Broadcast plan for batched matmul.
struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    out_batch: Vec<usize>,
    a_batch: Vec<usize>,
    b_batch: Vec<usize>,
}

impl MatmulPlan {
    fn new(ashape: &[usize], bshape: &[usize]) -> Result<Self> {
        if ashape.len() < 2 || bshape.len() < 2 || ashape[ashape.len() - 1] != bshape[bshape.len() - 2]
        {
            return Err(TensorError::MatmulShape { lhs: ashape.to_vec(), rhs: bshape.to_vec() });
        }
        let m = ashape[ashape.len() - 2];
        let k = ashape[ashape.len() - 1];
        let n = bshape[bshape.len() - 1];
        let a_batch = ashape[..ashape.len() - 2].to_vec();
        let b_batch = bshape[..bshape.len() - 2].to_vec();
        let rank = a_batch.len().max(b_batch.len());
        let mut out_batch = Vec::with_capacity(rank);
        for i in 0..rank {
            let da = dim_from_right(&a_batch, rank - 1 - i);
            let db = dim_from_right(&b_batch, rank - 1 - i);
            if da != db && da != 1 && db != 1 {
                return Err(TensorError::MatmulShape { lhs: ashape.to_vec(), rhs: bshape.to_vec() });
            }
            out_batch.push(da.max(db));
        }
        Ok(MatmulPlan { m, k, n, out_batch, a_batch, b_batch })
    }

    fn out_shape(&self) -> Vec<usize> {
        let mut s = self.out_batch.clone();
        s.push(self.m);
        s.push(self.n);
        s
    }

    fn out_numel(&self) -> usize {
        self.out_batch.iter().product::<usize>() * self.m * self.n
    }

    /// (a_offset, b_offset) element offsets per output batch slot.
    fn batch_offsets(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let total: usize = self.out_batch.iter().product();
        let rank = self.out_batch.len();
        (0..total.max(1)).map(move |idx| {
            let mut rem = idx;
            let mut aoff = 0usize;
            let mut boff = 0usize;
            let mut astride = self.m * self.k;
            let mut bstride = self.k * self.n;
            // Walk dims right-to-left, building flat offsets with broadcast
            // (size-1 dims contribute stride 0).
            let mut a_offsets = vec![0usize; rank];
            let mut b_offsets = vec![0usize; rank];
            for i in (0..rank).rev() {
                let c = rem % self.out_batch[i];
                rem /= self.out_batch[i];
                let da = dim_from_right(&self.a_batch, rank - 1 - i);
                let db = dim_from_right(&self.b_batch, rank - 1 - i);
                if da != 1 {
                    a_offsets[i] = c * astride;
                }
                if db != 1 {
                    b_offsets[i] = c * bstride;
                }
                astride *= da;
                bstride *= db;
            }
            for i in 0..rank {
                aoff += a_offsets[i];
                boff += b_offsets[i];
            }
            (aoff, boff)
        })
    }
}

fn dim_from_right(shape: &[usize], i: usize) -> usize {
    if i < shape.len() {
        shape[shape.len() - 1 - i]
    } else {
        1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Central finite differences of a scalar-valued graph w.r.t. one leaf.
    /// `build` reconstructs the graph from the perturbed leaf values.
    fn finite_diff(
        base: &[f32],
        step: f32,
        build: &dyn Fn(&mut Tape, &[f32]) -> TensorId,
    ) -> Vec<f32> {
        let mut out = vec![0.0; base.len()];
        for i in 0..base.len() {
            let mut plus = base.to_vec();
            plus[i] += step;
            let mut minus = base.to_vec();
            minus[i] -= step;
            let mut tp = Tape::new();
            let lp = build(&mut tp, &plus);
            let mut tm = Tape::new();
            let lm = build(&mut tm, &minus);
            out[i] = ((tp.scalar_f64(lp) - tm.scalar_f64(lm)) / (2.0 * step as f64)) as f32;
        }
        out
    }

    fn assert_grad_close(analytic: &[f32], fd: &[f32], rtol: f32, atol: f32) {
        for (i, (&a, &f)) in analytic.iter().zip(fd).enumerate() {
            let err = (a - f).abs();
            assert!(
                err <= atol + rtol * a.abs().max(f.abs()),
                "grad[{i}]: analytic {a} vs fd {f} (err {err})"
            );
        }
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let a = t.leaf(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0], false);
        let b = t.leaf(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0], false);
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.data(c), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_hand_case() {
        let mut t = Tape::new();
        let a = t.leaf(vec![1, 2], vec![1.0, 2.0], false);
        let b = t.leaf(vec![2, 1], vec![3.0, 4.0], false);
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.shape(c), &[1, 1]);
        assert_eq!(t.data(c), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.leaf(vec![2, 3], vec![0.0; 6], false);
        let b = t.leaf(vec![2, 2], vec![0.0; 4], false);
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn matmul_grad_of_sum_is_ones_times_bt() {
        let mut r = rng(7);
        let a_data = rand_vec(&mut r, 9);
        let b_data = rand_vec(&mut r, 9);
        let mut t = Tape::new();
        let a = t.leaf(vec![3, 3], a_data.clone(), true);
        let b = t.leaf(vec![3, 3], b_data.clone(), false);
        let c = t.matmul(a, b).unwrap();
        let loss = t.sum(c);
        t.backward(loss).unwrap();
        let ga = t.grad(a).unwrap().to_vec();

        // Independent oracle: ones[3,3] x B^T.
        let mut expect = vec![0.0f32; 9];
        for i in 0..3 {
            for j in 0..3 {
                expect[i * 3 + j] = (0..3).map(|p| b_data[j * 3 + p]).sum();
            }
        }
        assert_grad_close(&ga, &expect, 1e-5, 1e-6);

        // And against central differences, step 1e-3.
        let fd = finite_diff(&a_data, 1e-3, &|tape, vals| {
            let a = tape.leaf(vec![3, 3], vals.to_vec(), true);
            let b = tape.leaf(vec![3, 3], b_data.clone(), false);
            let c = tape.matmul(a, b).unwrap();
            tape.sum(c)
        });
        assert_grad_close(&ga, &fd, 1e-2, 1e-3);
    }

    #[test]
    fn matmul_broadcast_batched() {
        // [2,1,2,3] x [2,3,2] -> broadcast over b's missing leading dim.
        let mut r = rng(3);
        let a_data = rand_vec(&mut r, 12);
        let b_data = rand_vec(&mut r, 12);
        let mut t = Tape::new();
        let a = t.leaf(vec![2, 1, 2, 3], a_data.clone(), true);
        let b = t.leaf(vec![2, 3, 2], b_data.clone(), true);
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.shape(c), &[2, 2, 2, 2]);
        // Spot-check one slot against a direct 2-d product.
        let (bi, bj) = (1, 0);
        for i in 0..2 {
            for j in 0..2 {
                let mut acc = 0.0f32;
                for p in 0..3 {
                    acc += a_data[bi * 6 + i * 3 + p] * b_data[bj * 6 + p * 2 + j];
                }
                let got = t.data(c)[((bi * 2 + bj) * 2 + i) * 2 + j];
                assert!((got - acc).abs() < 1e-6);
            }
        }
        // Gradcheck both operands through the broadcast.
        let loss = t.sum(c);
        t.backward(loss).unwrap();
        let ga = t.grad(a).unwrap().to_vec();
        let gb = t.grad(b).unwrap().to_vec();
        let fd_a = finite_diff(&a_data, 1e-3, &|tape, vals| {
            let a = tape.leaf(vec![2, 1, 2, 3], vals.to_vec(), true);
            let b = tape.leaf(vec![2, 3, 2], b_data.clone(), false);
            let c = tape.matmul(a, b).unwrap();
            tape.sum(c)
        });
        let fd_b = finite_diff(&b_data, 1e-3, &|tape, vals| {
            let a = tape.leaf(vec![2, 1, 2, 3], a_data.clone(), false);
            let b = tape.leaf(vec![2, 3, 2], vals.to_vec(), true);
            let c = tape.matmul(a, b).unwrap();
            tape.sum(c)
        });
        assert_grad_close(&ga, &fd_a, 1e-2, 1e-3);
        assert_grad_close(&gb, &fd_b, 1e-2, 1e-3);
    }

    #[test]
    fn softmax_basic_rows() {
        let mut t = Tape::new();
        let x = t.leaf(vec![2], vec![0.0, 0.0], false);
        let y = t.softmax_lastdim(x).unwrap();
        assert!((t.data(y)[0] - 0.5).abs() < 1e-6 && (t.data(y)[1] - 0.5).abs() < 1e-6);

        let mut t = Tape::new();
        let x = t.leaf(vec![2], vec![1000.0, 0.0], false);
        let y = t.softmax_lastdim(x).unwrap();
        assert!((t.data(y)[0] - 1.0).abs() < 1e-6 && t.data(y)[1].abs() < 1e-6);

        let mut t = Tape::new();
        let x = t.leaf(vec![3], vec![0.0, MASK_SENTINEL, 0.0], false);
        let y = t.softmax_lastdim(x).unwrap();
        assert!((t.data(y)[0] - 0.5).abs() < 1e-6);
        assert!(t.data(y)[1].abs() < 1e-6);
        assert!((t.data(y)[2] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn softmax_fully_masked_row_errors() {
        let mut t = Tape::new();
        let x = t.leaf(vec![2, 2], vec![0.0, 1.0, MASK_SENTINEL, MASK_SENTINEL], false);
        let err = t.softmax_lastdim(x).unwrap_err();
        assert!(err.to_string().contains("fully masked attention row"));
    }

    #[test]
    fn softmax_rows_sum_to_one_property() {
        let mut r = rng(11);
        for _ in 0..100 {
            let rows = r.gen_range(1..4);
            let d = r.gen_range(1..6);
            let data: Vec<f32> = (0..rows * d).map(|_| r.gen_range(-30.0..30.0)).collect();
            let mut t = Tape::new();
            let x = t.leaf(vec![rows, d], data, false);
            let y = t.softmax_lastdim(x).unwrap();
            for row in t.data(y).chunks_exact(d) {
                assert!(row.iter().all(|&v| v >= 0.0));
                let s: f32 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-6, "row sum {s}");
            }
        }
    }

    #[test]
    fn rms_norm_cases() {
        let mut t = Tape::new();
        let x = t.leaf(vec![4], vec![1.0; 4], false);
        let g = t.leaf(vec![4], vec![1.0; 4], false);
        let y = t.rms_norm(x, g).unwrap();
        for &v in t.data(y) {
            assert!((v - 1.0).abs() < 1e-5);
        }

        let mut t = Tape::new();
        let x = t.leaf(vec![2], vec![0.0, 0.0], false);
        let g = t.leaf(vec![2], vec![1.0, 1.0], false);
        let y = t.rms_norm(x, g).unwrap();
        assert_eq!(t.data(y), &[0.0, 0.0]);

        // Unit-gain output has RMS 1 on a random 8-vector.
        let mut r = rng(5);
        let data = rand_vec(&mut r, 8);
        let mut t = Tape::new();
        let x = t.leaf(vec![8], data, false);
        let g = t.leaf(vec![8], vec![1.0; 8], false);
        let y = t.rms_norm(x, g).unwrap();
        let rms = (t.data(y).iter().map(|&v| v * v).sum::<f32>() / 8.0).sqrt();
        assert!((rms - 1.0).abs() < 1e-4, "rms {rms}");
    }

    #[test]
    fn swish_values_and_grad_at_zero() {
        let mut t = Tape::new();
        let x = t.leaf(vec![3], vec![0.0, 1000.0, -1000.0], false);
        let y = t.swish(x);
        assert_eq!(t.data(y)[0], 0.0);
        assert!((t.data(y)[1] - 1000.0).abs() < 1e-3);
        assert!(t.data(y)[2].abs() < 1e-3);

        let mut t = Tape::new();
        let x = t.leaf(vec![1], vec![0.0], true);
        let y = t.swish(x);
        let loss = t.sum(y);
        t.backward(loss).unwrap();
        let g = t.grad(x).unwrap()[0];
        assert!((g - 0.5).abs() < 1e-6, "swish'(0) = {g}");
        let fd = finite_diff(&[0.0], 1e-3, &|tape, vals| {
            let x = tape.leaf(vec![1], vals.to_vec(), true);
            let y = tape.swish(x);
            tape.sum(y)
        });
        assert!((g - fd[0]).abs() < 1e-3);
    }

    #[test]
    fn embedding_gather_and_scatter() {
        let table_data = vec![0.0, 0.1, 1.0, 1.1, 2.0, 2.1];
        let mut t = Tape::new();
        let table = t.leaf(vec![3, 2], table_data.clone(), true);
        let ids = IntTensor::new(vec![1, 2], vec![2, 0]);
        let y = t.embedding_lookup(table, &ids).unwrap();
        assert_eq!(t.shape(y), &[1, 2, 2]);
        assert_eq!(t.data(y), &[2.0, 2.1, 0.0, 0.1]);
        let loss = t.sum(y);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(table).unwrap(), &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn embedding_repeated_id_accumulates() {
        let table_data = vec![0.5, -0.25, 0.75, 0.1];
        let mut t = Tape::new();
        let table = t.leaf(vec![2, 2], table_data.clone(), true);
        let ids = IntTensor::new(vec![1, 2], vec![1, 1]);
        let y = t.embedding_lookup(table, &ids).unwrap();
        let loss = t.sum(y);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(table).unwrap(), &[0.0, 0.0, 2.0, 2.0]);

        let fd = finite_diff(&table_data, 1e-3, &|tape, vals| {
            let table = tape.leaf(vec![2, 2], vals.to_vec(), true);
            let ids = IntTensor::new(vec![1, 2], vec![1, 1]);
            let y = tape.embedding_lookup(table, &ids).unwrap();
            tape.sum(y)
        });
        assert_grad_close(t.grad(table).unwrap(), &fd, 1e-2, 1e-3);
    }

    #[test]
    fn embedding_id_out_of_range() {
        let mut t = Tape::new();
        let table = t.leaf(vec![3, 2], vec![0.0; 6], false);
        let ids = IntTensor::new(vec![1], vec![3]);
        let err = t.embedding_lookup(table, &ids).unwrap_err();
        assert!(err.to_string().contains('3'), "{err}");
    }

    #[test]
    fn cross_entropy_uniform_and_confident() {
        let mut t = Tape::new();
        let logits = t.leaf(vec![1, 4], vec![0.0; 4], false);
        let targets = IntTensor::new(vec![1], vec![2]);
        let loss = t.cross_entropy_with_logits(logits, &targets, &[1.0]).unwrap();
        assert!((t.data(loss)[0] - 4.0f32.ln()).abs() < 1e-6);

        let mut t = Tape::new();
        let logits = t.leaf(vec![1, 4], vec![0.0, 50.0, 0.0, 0.0], false);
        let targets = IntTensor::new(vec![1], vec![1]);
        let loss = t.cross_entropy_with_logits(logits, &targets, &[1.0]).unwrap();
        assert!(t.data(loss)[0].abs() < 1e-5);
    }

    #[test]
    fn cross_entropy_matches_scalar_oracle() {
        // Independent scalar re-implementation over a random [2,3,5] instance.
        let mut r = rng(23);
        let logits_data = rand_vec(&mut r, 2 * 3 * 5);
        let targets: Vec<u32> = (0..6).map(|_| r.gen_range(0..5)).collect();
        let weights: Vec<f32> = (0..6).map(|_| if r.gen_bool(0.7) { 1.0 } else { 0.0 }).collect();
        if weights.iter().sum::<f32>() == 0.0 {
            panic!("degenerate draw");
        }

        let mut expect = 0.0f64;
        let mut wsum = 0.0f64;
        for row in 0..6 {
            let xs = &logits_data[row * 5..(row + 1) * 5];
            let denom: f64 = xs.iter().map(|&x| (x as f64).exp()).sum();
            let logp = (xs[targets[row] as usize] as f64).exp().ln() - denom.ln();
            expect -= weights[row] as f64 * logp;
            wsum += weights[row] as f64;
        }
        expect /= wsum;

        let mut t = Tape::new();
        let logits = t.leaf(vec![2, 3, 5], logits_data, false);
        let tg = IntTensor::new(vec![2, 3], targets);
        let loss = t.cross_entropy_with_logits(logits, &tg, &weights).unwrap();
        assert!((t.scalar_f64(loss) - expect).abs() < 1e-5);
    }

    #[test]
    fn cross_entropy_zero_weights_error() {
        let mut t = Tape::new();
        let logits = t.leaf(vec![2, 3], vec![0.0; 6], false);
        let targets = IntTensor::new(vec![2], vec![0, 1]);
        let err = t.cross_entropy_with_logits(logits, &targets, &[0.0, 0.0]).unwrap_err();
        assert!(err.to_string().contains("no loss positions"));
    }

    #[test]
    fn backward_sum_and_square() {
        let mut t = Tape::new();
        let x = t.leaf(vec![3], vec![1.0, 2.0, 3.0], true);
        let loss = t.sum(x);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut t = Tape::new();
        let x = t.leaf(vec![2], vec![1.0, 2.0], true);
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum(sq);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_twice_errors_until_cleared() {
        let mut t = Tape::new();
        let x = t.leaf(vec![2], vec![1.0, 2.0], true);
        let loss = t.sum(x);
        t.backward(loss).unwrap();
        assert!(matches!(t.backward(loss), Err(TensorError::BackwardTwice)));
        t.clear_grads();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn diamond_graph_accumulates() {
        // z = y + y with y = x*x: dz/dx = 4x, relies on accumulation.
        let mut t = Tape::new();
        let x = t.leaf(vec![2], vec![1.5, -2.0], true);
        let y = t.mul(x, x).unwrap();
        let z = t.add(y, y).unwrap();
        let loss = t.sum(z);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[6.0, -8.0]);
    }

    #[test]
    fn ops_are_bit_deterministic() {
        let run = || {
            let mut r = rng(999);
            let a_data = rand_vec(&mut r, 24);
            let b_data = rand_vec(&mut r, 24);
            let mut t = Tape::new();
            let a = t.leaf(vec![2, 3, 4], a_data, true);
            let b = t.leaf(vec![2, 4, 3], b_data, true);
            let c = t.matmul(a, b).unwrap();
            let s = t.softmax_lastdim(c).unwrap();
            let loss = t.sum(s);
            t.backward(loss).unwrap();
            (t.data(loss).to_vec(), t.grad(a).unwrap().to_vec())
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   l2.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(g1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   g2.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let mut r = rng(2);
        let data = rand_vec(&mut r, 8);
        let mut t = Tape::new();
        let x = t.leaf(vec![1, 8], data.clone(), false);
        let y = t.rope(x, &[0]).unwrap();
        assert_eq!(t.data(y), &data[..]);
    }

    #[test]
    fn rope_preserves_pair_norms() {
        let mut r = rng(4);
        let data = rand_vec(&mut r, 3 * 8);
        let mut t = Tape::new();
        let x = t.leaf(vec![3, 8], data.clone(), false);
        let y = t.rope(x, &[0, 5, 17]).unwrap();
        for ti in 0..3 {
            for j in 0..4 {
                let n0 = data[ti * 8 + 2 * j].hypot(data[ti * 8 + 2 * j + 1]);
                let n1 = t.data(y)[ti * 8 + 2 * j].hypot(t.data(y)[ti * 8 + 2 * j + 1]);
                assert!((n0 - n1).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn rope_odd_head_size_errors() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1, 3], vec![0.0; 3], false);
        assert!(matches!(t.rope(x, &[0]), Err(TensorError::OddHeadSize(3))));
    }

    #[test]
    fn per_op_gradcheck_random_instances() {
        // Every differentiable op against central differences, 100 random
        // instances each, per-element relative error < 1e-2.
        let step = 1e-3;
        for seed in 0..100u64 {
            let mut r = rng(seed);
            let m = r.gen_range(1..4);
            let k = r.gen_range(1..4);
            let n = r.gen_range(1..4);

            // matmul
            let a_data = rand_vec(&mut r, m * k);
            let b_data = rand_vec(&mut r, k * n);
            let mut t = Tape::new();
            let a = t.leaf(vec![m, k], a_data.clone(), true);
            let b = t.leaf(vec![k, n], b_data.clone(), true);
            let c = t.matmul(a, b).unwrap();
            let sm = t.softmax_lastdim(c).unwrap();
            let loss = t.sum(sm);
            t.backward(loss).unwrap();
            let fd = finite_diff(&a_data, step, &|tape, vals| {
                let a = tape.leaf(vec![m, k], vals.to_vec(), true);
                let b = tape.leaf(vec![k, n], b_data.clone(), false);
                let c = tape.matmul(a, b).unwrap();
                let sm = tape.softmax_lastdim(c).unwrap();
                tape.sum(sm)
            });
            assert_grad_close(t.grad(a).unwrap(), &fd, 1e-2, 1e-3);

            // rms_norm + swish + mul + rope chain
            let d = 2 * r.gen_range(1..4);
            let x_data = rand_vec(&mut r, 2 * d);
            let g_data = rand_vec(&mut r, d);
            let positions: Vec<u32> = (0..2).map(|_| r.gen_range(0..10)).collect();
            let mut t = Tape::new();
            let x = t.leaf(vec![2, d], x_data.clone(), true);
            let g = t.leaf(vec![d], g_data.clone(), true);
            let normed = t.rms_norm(x, g).unwrap();
            let rot = t.rope(normed, &positions).unwrap();
            let sw = t.swish(rot);
            let prod = t.mul(sw, rot).unwrap();
            let loss = t.sum(prod);
            t.backward(loss).unwrap();
            let fd_x = finite_diff(&x_data, step, &|tape, vals| {
                let x = tape.leaf(vec![2, d], vals.to_vec(), true);
                let g = tape.leaf(vec![d], g_data.clone(), false);
                let normed = tape.rms_norm(x, g).unwrap();
                let rot = tape.rope(normed, &positions).unwrap();
                let sw = tape.swish(rot);
                let prod = tape.mul(sw, rot).unwrap();
                tape.sum(prod)
            });
            assert_grad_close(t.grad(x).unwrap(), &fd_x, 1e-2, 1e-3);
            let fd_g = finite_diff(&g_data, step, &|tape, vals| {
                let x = tape.leaf(vec![2, d], x_data.clone(), true);
                let g = tape.leaf(vec![d], vals.to_vec(), true);
                let normed = tape.rms_norm(x, g).unwrap();
                let rot = tape.rope(normed, &positions).unwrap();
                let sw = tape.swish(rot);
                let prod = tape.mul(sw, rot).unwrap();
                tape.sum(prod)
            });
            assert_grad_close(t.grad(g).unwrap(), &fd_g, 1e-2, 1e-3);

            // cross-entropy through embedding lookup
            let vocab = r.gen_range(2..6);
            let table_data = rand_vec(&mut r, vocab * d);
            let ids = IntTensor::new(vec![1, 2], vec![r.gen_range(0..vocab as u32), r.gen_range(0..vocab as u32)]);
            let targets = IntTensor::new(vec![1, 2], vec![r.gen_range(0..vocab as u32), r.gen_range(0..vocab as u32)]);
            let mut t = Tape::new();
            let table = t.leaf(vec![vocab, d], table_data.clone(), true);
            let h = t.embedding_lookup(table, &ids).unwrap();
            let et = t.transpose_last2(table);
            let logits = t.matmul(h, et).unwrap();
            let loss = t.cross_entropy_with_logits(logits, &targets, &[1.0, 1.0]).unwrap();
            t.backward(loss).unwrap();
            let fd = finite_diff(&table_data, step, &|tape, vals| {
                let table = tape.leaf(vec![vocab, d], vals.to_vec(), true);
                let h = tape.embedding_lookup(table, &ids).unwrap();
                let et = tape.transpose_last2(table);
                let logits = tape.matmul(h, et).unwrap();
                tape.cross_entropy_with_logits(logits, &targets, &[1.0, 1.0]).unwrap()
            });
            assert_grad_close(t.grad(table).unwrap(), &fd, 1e-2, 1e-3);
        }
    }

    #[test]
    fn permute_and_reshape_round_trip_grads() {
        let mut r = rng(31);
        let data = rand_vec(&mut r, 2 * 3 * 4);
        let mut t = Tape::new();
        let x = t.leaf(vec![2, 3, 4], data.clone(), true);
        let p = t.permute(x, &[1, 2, 0]).unwrap();
        assert_eq!(t.shape(p), &[3, 4, 2]);
        let rs = t.reshape(p, vec![6, 4]).unwrap();
        let sq = t.mul(rs, rs).unwrap();
        let loss = t.sum(sq);
        t.backward(loss).unwrap();
        // d(sum x^2)/dx = 2x regardless of layout shuffling.
        let expect: Vec<f32> = data.iter().map(|&v| 2.0 * v).collect();
        assert_grad_close(t.grad(x).unwrap(), &expect, 1e-5, 1e-6);
    }

    #[test]
    fn bias_add_broadcasts_over_heads() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1, 2, 2, 2], vec![0.0; 8], true);
        let bias = t.leaf(vec![1, 2, 2], vec![0.0, MASK_SENTINEL, 1.0, 2.0], false);
        let y = t.bias_add(x, bias).unwrap();
        assert_eq!(t.data(y), &[0.0, MASK_SENTINEL, 1.0, 2.0, 0.0, MASK_SENTINEL, 1.0, 2.0]);
        let loss = t.sum(y);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0; 8]);
    }

    #[test]
    fn dropout_mask_applies_to_grads_too() {
        let mut r = rng(77);
        let mut t = Tape::new();
        let x = t.leaf(vec![1000], vec![1.0; 1000], true);
        let y = t.dropout(x, 0.25, &mut r);
        let loss = t.sum(y);
        t.backward(loss).unwrap();
        let kept = t.data(y).iter().filter(|&&v| v != 0.0).count();
        // Keep-rate should be near 0.75, survivors scaled by 1/0.75.
        assert!((kept as f32 / 1000.0 - 0.75).abs() < 0.05);
        for (&g, &v) in t.grad(x).unwrap().iter().zip(t.data(y)) {
            assert_eq!(g, v); // grad equals mask factor here since input is 1
        }
    }
}
