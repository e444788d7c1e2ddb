//! Reverse-mode autodiff on a per-computation tape.
//!
//! A [`Tape`] records one forward computation as a flat list of nodes in
//! creation order (already a topological order), then [`Tape::backward`]
//! walks it in reverse accumulating gradients. Tapes are cheap to build and
//! drop, so the trainer uses one tape per sample and reduces leaf gradients
//! in a fixed order — results are bit-identical regardless of how samples
//! are scheduled across threads.
//!
//! The primitive set is exactly what a decoder-only transformer over
//! continuous token rows needs: (batched) matmul with optional transposed
//! right-hand side, broadcasting add, elementwise mul/scale, tanh-GELU,
//! last-axis layer norm and softmax, last-axis gather, reshape, 3-axis
//! permute, full-tensor sum/mean, and a clamped log for cross-entropy.

use std::cmp::Ordering;
use std::sync::Arc;

use super::{NumericsError, Result, Tensor};

/// Which key positions each query position may attend. Patterns must be
/// causal: every allowed key index is <= the query index.
///
/// [`Tape::set_attention`] treats each query row's allowed keys as a *set*:
/// contributions are summed in an order derived from key/value content, not
/// sequence position, so two sequences whose allowed sets hold the same rows
/// produce bit-identical outputs regardless of row order.
#[derive(Clone, Debug)]
pub struct AttentionPattern {
    allowed: Vec<Vec<usize>>,
}

impl AttentionPattern {
    pub fn new(allowed: Vec<Vec<usize>>) -> Result<AttentionPattern> {
        for (t, keys) in allowed.iter().enumerate() {
            if let Some(&bad) = keys.iter().find(|&&k| k > t) {
                return Err(NumericsError::IndexOutOfBounds {
                    op: "attention pattern (acausal key)",
                    index: bad,
                    size: t + 1,
                });
            }
        }
        Ok(AttentionPattern { allowed })
    }

    /// Standard causal mask: row t attends rows 0..=t.
    pub fn full_causal(len: usize) -> AttentionPattern {
        AttentionPattern {
            allowed: (0..len).map(|t| (0..=t).collect()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.allowed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.allowed.is_empty()
    }

    pub fn allowed(&self, t: usize) -> &[usize] {
        &self.allowed[t]
    }
}

/// Handle to a node on a specific tape.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    /// C = A @ B; rhs may be 2-D (shared across leading axes of A).
    Matmul,
    /// C = A @ B^T with B stored row-major as [.., n, k].
    MatmulTb,
    /// Elementwise add; rhs shape may be any suffix of lhs shape.
    Add,
    /// Elementwise mul, identical shapes.
    Mul,
    Scale(f64),
    Gelu,
    /// Normalize the last axis, then scale/shift by per-channel gain/bias.
    LayerNorm,
    /// Softmax over the last axis (max-subtracted).
    Softmax,
    /// out[r] = x[r, idx[r]] over the flattened leading axes.
    GatherLast,
    Reshape,
    Permute3([usize; 3]),
    SumAll,
    MeanAll,
    /// ln(max(x, eps)); clamp engagements are counted on the tape.
    LogClamped(f64),
    /// out[i] = fill where mask, else x[i]; gradient is zero where masked.
    MaskedFill,
    /// Fused masked attention with content-canonical reductions.
    SetAttention(f64),
}

enum Saved {
    None,
    /// Per-row mean and inverse stddev from layer norm forward.
    RowStats { mean: Vec<f64>, invstd: Vec<f64> },
    Indices(Vec<usize>),
    Mask(Vec<bool>),
    /// Attention probabilities (dense [heads, rows, rows]) and the pattern.
    Attention {
        probs: Vec<f64>,
        pattern: Arc<AttentionPattern>,
    },
}

struct Node {
    op: Op,
    parents: Vec<NodeId>,
    shape: Vec<usize>,
    values: Arc<Vec<f64>>,
    saved: Saved,
    requires_grad: bool,
}

/// One recorded forward computation plus (after `backward`) its gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    /// Number of elements the clamped log saturated during forward passes.
    clamp_events: usize,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_CUBIC: f64 = 0.044_715;

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    /// Register a parameter tensor; shares its value buffer, requires grad.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(Node {
            op: Op::Leaf,
            parents: vec![],
            shape: t.shape().to_vec(),
            values: t.values_arc(),
            saved: Saved::None,
            requires_grad: true,
        })
    }

    /// Register fixed input data; no gradient flows into it.
    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> Result<NodeId> {
        let want: usize = shape.iter().product();
        if values.len() != want {
            return Err(NumericsError::BadElementCount {
                shape: shape.to_vec(),
                want,
                got: values.len(),
            });
        }
        Ok(self.push(Node {
            op: Op::Constant,
            parents: vec![],
            shape: shape.to_vec(),
            values: Arc::new(values),
            saved: Saved::None,
            requires_grad: false,
        }))
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn values(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].values
    }

    /// Gradient of the last `backward` root w.r.t. this node, if any flowed.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Elements clamped by [`Tape::log_clamped`] since tape creation.
    pub fn clamp_events(&self) -> usize {
        self.clamp_events
    }

    fn push(&mut self, node: Node) -> NodeId {
        self.nodes.push(node);
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    fn push_op(
        &mut self,
        op: Op,
        parents: Vec<NodeId>,
        shape: Vec<usize>,
        values: Vec<f64>,
        saved: Saved,
    ) -> NodeId {
        let requires_grad = parents.iter().any(|p| self.node(*p).requires_grad);
        self.push(Node {
            op,
            parents,
            shape,
            values: Arc::new(values),
            saved,
            requires_grad,
        })
    }

    // ---- primitives -----------------------------------------------------

    /// Matrix product. `a` is [.., m, k]; `b` is [k, n] (shared across the
    /// leading axes of `a`) or [.., k, n] with identical leading axes.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ashape, bshape) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || NumericsError::ShapeMismatch {
            op: "matmul",
            lhs: ashape.clone(),
            rhs: bshape.clone(),
        };
        if ashape.len() < 2 || bshape.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (ashape[ashape.len() - 2], ashape[ashape.len() - 1]);
        let (bk, n) = (bshape[bshape.len() - 2], bshape[bshape.len() - 1]);
        let b_broadcast = bshape.len() == 2 && ashape.len() > 2;
        if bk != k || (!b_broadcast && ashape[..ashape.len() - 2] != bshape[..bshape.len() - 2]) {
            return Err(mismatch());
        }
        let batch: usize = ashape[..ashape.len() - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        {
            let (av, bv) = (self.values(a), self.values(b));
            for t in 0..batch {
                let boff = if b_broadcast { 0 } else { t * k * n };
                mm_acc(
                    &av[t * m * k..(t + 1) * m * k],
                    &bv[boff..boff + k * n],
                    &mut out[t * m * n..(t + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = ashape.clone();
        let last = shape.len() - 1;
        shape[last] = n;
        Ok(self.push_op(Op::Matmul, vec![a, b], shape, out, Saved::None))
    }

    /// Matrix product against a transposed rhs: `a` is [.., m, k], `b` is
    /// [.., n, k] with matching leading axes; result is [.., m, n]. This is
    /// the attention-score shape (Q @ K^T) without materializing K^T.
    pub fn matmul_tb(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ashape, bshape) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || NumericsError::ShapeMismatch {
            op: "matmul_tb",
            lhs: ashape.clone(),
            rhs: bshape.clone(),
        };
        if ashape.len() < 2
            || ashape.len() != bshape.len()
            || ashape[..ashape.len() - 2] != bshape[..bshape.len() - 2]
        {
            return Err(mismatch());
        }
        let (m, k) = (ashape[ashape.len() - 2], ashape[ashape.len() - 1]);
        let (n, bk) = (bshape[bshape.len() - 2], bshape[bshape.len() - 1]);
        if bk != k {
            return Err(mismatch());
        }
        let batch: usize = ashape[..ashape.len() - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        {
            let (av, bv) = (self.values(a), self.values(b));
            for t in 0..batch {
                mm_abt_acc(
                    &av[t * m * k..(t + 1) * m * k],
                    &bv[t * n * k..(t + 1) * n * k],
                    &mut out[t * m * n..(t + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = ashape.clone();
        let last = shape.len() - 1;
        shape[last] = n;
        Ok(self.push_op(Op::MatmulTb, vec![a, b], shape, out, Saved::None))
    }

    /// Elementwise add. `b`'s shape must equal `a`'s or be a suffix of it
    /// (e.g. a bias [C] added to [T, C], or a mask [T, T] added to [H, T, T]).
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ashape, bshape) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if bshape.len() > ashape.len() || ashape[ashape.len() - bshape.len()..] != bshape[..] {
            return Err(NumericsError::ShapeMismatch {
                op: "add",
                lhs: ashape,
                rhs: bshape,
            });
        }
        let bn: usize = bshape.iter().product::<usize>().max(1);
        let out: Vec<f64> = {
            let (av, bv) = (self.values(a), self.values(b));
            av.iter()
                .enumerate()
                .map(|(i, &x)| x + bv[i % bn])
                .collect()
        };
        Ok(self.push_op(Op::Add, vec![a, b], ashape, out, Saved::None))
    }

    /// Elementwise product of identically-shaped tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ashape, bshape) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ashape != bshape {
            return Err(NumericsError::ShapeMismatch {
                op: "mul",
                lhs: ashape,
                rhs: bshape,
            });
        }
        let out: Vec<f64> = {
            let (av, bv) = (self.values(a), self.values(b));
            av.iter().zip(bv.iter()).map(|(x, y)| x * y).collect()
        };
        Ok(self.push_op(Op::Mul, vec![a, b], ashape, out, Saved::None))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let shape = self.shape(a).to_vec();
        let out: Vec<f64> = self.values(a).iter().map(|&x| c * x).collect();
        self.push_op(Op::Scale(c), vec![a], shape, out, Saved::None)
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        let out: Vec<f64> = self.values(a).iter().map(|&x| gelu_fwd(x)).collect();
        self.push_op(Op::Gelu, vec![a], shape, out, Saved::None)
    }

    /// Layer norm over the last axis with affine gain/bias of shape [C].
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let xshape = self.shape(x).to_vec();
        let c = *xshape.last().ok_or(NumericsError::BadShape {
            op: "layer_norm",
            expected: "at least 1 axis",
            got: xshape.clone(),
        })?;
        for (name, id) in [("gain", gain), ("bias", bias)] {
            let s = self.shape(id);
            if s != [c] {
                let _ = name;
                return Err(NumericsError::ShapeMismatch {
                    op: "layer_norm affine",
                    lhs: xshape.clone(),
                    rhs: s.to_vec(),
                });
            }
        }
        let rows = self.values(x).len() / c;
        let mut out = vec![0.0; rows * c];
        let mut mean = vec![0.0; rows];
        let mut invstd = vec![0.0; rows];
        {
            let (xv, gv, bv) = (self.values(x), self.values(gain), self.values(bias));
            for r in 0..rows {
                let row = &xv[r * c..(r + 1) * c];
                let mu = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
                let inv = 1.0 / (var + eps).sqrt();
                mean[r] = mu;
                invstd[r] = inv;
                let orow = &mut out[r * c..(r + 1) * c];
                for j in 0..c {
                    orow[j] = (row[j] - mu) * inv * gv[j] + bv[j];
                }
            }
        }
        Ok(self.push_op(
            Op::LayerNorm,
            vec![x, gain, bias],
            xshape,
            out,
            Saved::RowStats { mean, invstd },
        ))
    }

    /// Softmax over the last axis, max-subtracted for stability. A fully
    /// masked position (all inputs very negative) still yields a valid
    /// distribution because the max is subtracted before exponentiation.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        let c = *shape.last().ok_or(NumericsError::BadShape {
            op: "softmax",
            expected: "at least 1 axis",
            got: shape.clone(),
        })?;
        let av = self.values(a);
        let rows = av.len() / c;
        let mut out = vec![0.0; av.len()];
        for r in 0..rows {
            let row = &av[r * c..(r + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out[r * c..(r + 1) * c];
            let mut total = 0.0;
            for j in 0..c {
                let e = (row[j] - max).exp();
                orow[j] = e;
                total += e;
            }
            for v in orow.iter_mut() {
                *v /= total;
            }
        }
        Ok(self.push_op(Op::Softmax, vec![a], shape, out, Saved::None))
    }

    /// Pick one entry per row along the last axis: x is [.., C] and
    /// `indices` has one entry per flattened leading row.
    pub fn gather_last(&mut self, x: NodeId, indices: &[usize]) -> Result<NodeId> {
        let xshape = self.shape(x).to_vec();
        let c = *xshape.last().ok_or(NumericsError::BadShape {
            op: "gather_last",
            expected: "at least 1 axis",
            got: xshape.clone(),
        })?;
        let rows = self.values(x).len() / c;
        if indices.len() != rows {
            return Err(NumericsError::BadElementCount {
                shape: xshape,
                want: rows,
                got: indices.len(),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= c) {
            return Err(NumericsError::IndexOutOfBounds {
                op: "gather_last",
                index: bad,
                size: c,
            });
        }
        let out: Vec<f64> = {
            let xv = self.values(x);
            indices.iter().enumerate().map(|(r, &j)| xv[r * c + j]).collect()
        };
        let shape = xshape[..xshape.len() - 1].to_vec();
        Ok(self.push_op(
            Op::GatherLast,
            vec![x],
            shape,
            out,
            Saved::Indices(indices.to_vec()),
        ))
    }

    pub fn reshape(&mut self, a: NodeId, new_shape: &[usize]) -> Result<NodeId> {
        let n: usize = new_shape.iter().product();
        if n != self.values(a).len() {
            return Err(NumericsError::BadElementCount {
                shape: new_shape.to_vec(),
                want: self.values(a).len(),
                got: n,
            });
        }
        let out = self.values(a).to_vec();
        Ok(self.push_op(Op::Reshape, vec![a], new_shape.to_vec(), out, Saved::None))
    }

    /// Permute the axes of a 3-D tensor, e.g. [T, H, d] -> [H, T, d].
    pub fn permute3(&mut self, a: NodeId, perm: [usize; 3]) -> Result<NodeId> {
        let ashape = self.shape(a).to_vec();
        if ashape.len() != 3 {
            return Err(NumericsError::BadShape {
                op: "permute3",
                expected: "3 axes",
                got: ashape,
            });
        }
        {
            let mut seen = [false; 3];
            for &p in &perm {
                if p >= 3 || seen[p] {
                    return Err(NumericsError::BadShape {
                        op: "permute3",
                        expected: "a permutation of {0,1,2}",
                        got: perm.to_vec(),
                    });
                }
                seen[p] = true;
            }
        }
        let shape = [ashape[perm[0]], ashape[perm[1]], ashape[perm[2]]];
        let out = permute3_copy(self.values(a), &ashape, perm);
        Ok(self.push_op(
            Op::Permute3(perm),
            vec![a],
            shape.to_vec(),
            out,
            Saved::None,
        ))
    }

    /// Sum of all elements (scalar, shape []).
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.values(a).iter().sum();
        self.push_op(Op::SumAll, vec![a], vec![], vec![s], Saved::None)
    }

    /// Mean of all elements (scalar, shape []).
    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.values(a).len().max(1);
        let s = self.values(a).iter().sum::<f64>() / n as f64;
        self.push_op(Op::MeanAll, vec![a], vec![], vec![s], Saved::None)
    }

    /// ln(max(x, eps)). Clamp engagements are counted and queryable via
    /// [`Tape::clamp_events`]; gradient is zero in the clamped region.
    pub fn log_clamped(&mut self, a: NodeId, eps: f64) -> NodeId {
        let shape = self.shape(a).to_vec();
        let mut clamped = 0usize;
        let out: Vec<f64> = self
            .values(a)
            .iter()
            .map(|&x| {
                if x < eps {
                    clamped += 1;
                    eps.ln()
                } else {
                    x.ln()
                }
            })
            .collect();
        self.clamp_events += clamped;
        self.push_op(Op::LogClamped(eps), vec![a], shape, out, Saved::None)
    }

    /// Replace elements where `mask` is true by `fill`; the gradient does
    /// not flow through filled positions.
    pub fn masked_fill(&mut self, a: NodeId, mask: &[bool], fill: f64) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        if mask.len() != self.values(a).len() {
            return Err(NumericsError::BadElementCount {
                shape,
                want: self.values(a).len(),
                got: mask.len(),
            });
        }
        let out: Vec<f64> = self
            .values(a)
            .iter()
            .zip(mask)
            .map(|(&x, &m)| if m { fill } else { x })
            .collect();
        Ok(self.push_op(
            Op::MaskedFill,
            vec![a],
            shape,
            out,
            Saved::Mask(mask.to_vec()),
        ))
    }

    /// Fused attention: per head and query row t, softmax over the scaled
    /// scores q_t . k_j for j in `pattern.allowed(t)`, then the probability-
    /// weighted sum of value rows. All inputs are [heads, rows, head_dim].
    ///
    /// The reductions over keys (softmax normalizer and weighted value sum)
    /// run in an order sorted by key/value *content*, so the output for a
    /// query row is a pure function of the set of rows it attends — two
    /// orderings of the same rows give bit-identical results.
    pub fn set_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        pattern: &Arc<AttentionPattern>,
        scale: f64,
    ) -> Result<NodeId> {
        let qshape = self.shape(q).to_vec();
        for (name, id) in [("k", k), ("v", v)] {
            let _ = name;
            if self.shape(id) != qshape {
                return Err(NumericsError::ShapeMismatch {
                    op: "set_attention",
                    lhs: qshape,
                    rhs: self.shape(id).to_vec(),
                });
            }
        }
        if qshape.len() != 3 {
            return Err(NumericsError::BadShape {
                op: "set_attention",
                expected: "[heads, rows, head_dim]",
                got: qshape,
            });
        }
        let (heads, rows, hd) = (qshape[0], qshape[1], qshape[2]);
        if pattern.len() != rows {
            return Err(NumericsError::BadElementCount {
                shape: qshape,
                want: rows,
                got: pattern.len(),
            });
        }
        let mut out = vec![0.0; heads * rows * hd];
        let mut probs = vec![0.0; heads * rows * rows];
        {
            let (qv, kv, vv) = (self.values(q), self.values(k), self.values(v));
            for h in 0..heads {
                let base = h * rows * hd;
                let krows = &kv[base..base + rows * hd];
                let vrows = &vv[base..base + rows * hd];
                // Content-canonical rank of every row: sort positions by the
                // bit patterns of their key then value vectors. Rows with
                // identical content contribute identically, so their mutual
                // order cannot matter.
                let mut order: Vec<usize> = (0..rows).collect();
                order.sort_by(|&a, &b| {
                    row_bits_cmp(krows, a, b, hd).then_with(|| row_bits_cmp(vrows, a, b, hd))
                });
                let mut rank = vec![0usize; rows];
                for (r, &pos) in order.iter().enumerate() {
                    rank[pos] = r;
                }
                for t in 0..rows {
                    let mut keys: Vec<usize> = pattern.allowed(t).to_vec();
                    keys.sort_by_key(|&p| rank[p]);
                    let qrow = &qv[base + t * hd..base + (t + 1) * hd];
                    let mut max = f64::NEG_INFINITY;
                    let mut scores = Vec::with_capacity(keys.len());
                    for &p in &keys {
                        let krow = &krows[p * hd..(p + 1) * hd];
                        let s = scale * qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>();
                        max = max.max(s);
                        scores.push(s);
                    }
                    let mut total = 0.0;
                    for (&p, &s) in keys.iter().zip(&scores) {
                        let e = (s - max).exp();
                        probs[h * rows * rows + t * rows + p] = e;
                        total += e;
                    }
                    let orow = &mut out[base + t * hd..base + (t + 1) * hd];
                    for &p in &keys {
                        let prob = &mut probs[h * rows * rows + t * rows + p];
                        *prob /= total;
                        let w = *prob;
                        let vrow = &vrows[p * hd..(p + 1) * hd];
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o += w * x;
                        }
                    }
                }
            }
        }
        Ok(self.push_op(
            Op::SetAttention(scale),
            vec![q, k, v],
            qshape,
            out,
            Saved::Attention {
                probs,
                pattern: Arc::clone(pattern),
            },
        ))
    }

    // ---- backward --------------------------------------------------------

    /// Accumulate d(root)/d(node) for every node that requires grad. The
    /// root must be scalar. Gradients from a previous backward are cleared.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if !self.shape(root).is_empty() {
            return Err(NumericsError::NonScalarLoss {
                got: self.shape(root).to_vec(),
            });
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.node(root).requires_grad {
            return Ok(()); // nothing to differentiate
        }
        self.grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if self.grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let grad = self.grads[i].take().expect("checked above");
            self.propagate(i, &grad);
            self.grads[i] = Some(grad);
        }
        Ok(())
    }

    /// Ensure a grad buffer exists for a parent and return it.
    fn grad_buf(&mut self, id: NodeId) -> &mut Vec<f64> {
        if self.grads[id.0].is_none() {
            self.grads[id.0] = Some(vec![0.0; self.values(id).len()]);
        }
        self.grads[id.0].as_mut().expect("just initialized")
    }

    fn propagate(&mut self, i: usize, dout: &[f64]) {
        let parents = self.nodes[i].parents.clone();
        let needs: Vec<bool> = parents.iter().map(|p| self.node(*p).requires_grad).collect();
        match self.nodes[i].op {
            Op::Leaf | Op::Constant => {}
            Op::Matmul => {
                let (a, b) = (parents[0], parents[1]);
                let ashape = self.shape(a).to_vec();
                let bshape = self.shape(b).to_vec();
                let (m, k) = (ashape[ashape.len() - 2], ashape[ashape.len() - 1]);
                let n = bshape[bshape.len() - 1];
                let batch: usize = ashape[..ashape.len() - 2].iter().product();
                let b_broadcast = bshape.len() == 2 && ashape.len() > 2;
                if needs[0] {
                    let bv = Arc::clone(&self.nodes[b.0].values);
                    let da = self.grad_buf(a);
                    for t in 0..batch {
                        let boff = if b_broadcast { 0 } else { t * k * n };
                        // dA = dC @ B^T
                        mm_abt_acc(
                            &dout[t * m * n..(t + 1) * m * n],
                            &bv[boff..boff + k * n],
                            &mut da[t * m * k..(t + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
                if needs[1] {
                    let av = Arc::clone(&self.nodes[a.0].values);
                    let db = self.grad_buf(b);
                    for t in 0..batch {
                        let boff = if b_broadcast { 0 } else { t * k * n };
                        // dB = A^T @ dC (accumulates across the batch when
                        // B is broadcast)
                        mm_atb_acc(
                            &av[t * m * k..(t + 1) * m * k],
                            &dout[t * m * n..(t + 1) * m * n],
                            &mut db[boff..boff + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            Op::MatmulTb => {
                let (a, b) = (parents[0], parents[1]);
                let ashape = self.shape(a).to_vec();
                let bshape = self.shape(b).to_vec();
                let (m, k) = (ashape[ashape.len() - 2], ashape[ashape.len() - 1]);
                let n = bshape[bshape.len() - 2];
                let batch: usize = ashape[..ashape.len() - 2].iter().product();
                if needs[0] {
                    let bv = Arc::clone(&self.nodes[b.0].values);
                    let da = self.grad_buf(a);
                    for t in 0..batch {
                        // dA = dC @ B
                        mm_acc(
                            &dout[t * m * n..(t + 1) * m * n],
                            &bv[t * n * k..(t + 1) * n * k],
                            &mut da[t * m * k..(t + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
                if needs[1] {
                    let av = Arc::clone(&self.nodes[a.0].values);
                    let db = self.grad_buf(b);
                    for t in 0..batch {
                        // dB = dC^T @ A
                        mm_atb_acc(
                            &dout[t * m * n..(t + 1) * m * n],
                            &av[t * m * k..(t + 1) * m * k],
                            &mut db[t * n * k..(t + 1) * n * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
            }
            Op::Add => {
                let (a, b) = (parents[0], parents[1]);
                if needs[0] {
                    let da = self.grad_buf(a);
                    for (g, d) in da.iter_mut().zip(dout) {
                        *g += d;
                    }
                }
                if needs[1] {
                    let bn = self.values(b).len();
                    let db = self.grad_buf(b);
                    for (i, d) in dout.iter().enumerate() {
                        db[i % bn] += d;
                    }
                }
            }
            Op::Mul => {
                let (a, b) = (parents[0], parents[1]);
                if needs[0] {
                    let bv = Arc::clone(&self.nodes[b.0].values);
                    let da = self.grad_buf(a);
                    for ((g, d), &y) in da.iter_mut().zip(dout).zip(bv.iter()) {
                        *g += d * y;
                    }
                }
                if needs[1] {
                    let av = Arc::clone(&self.nodes[a.0].values);
                    let db = self.grad_buf(b);
                    for ((g, d), &x) in db.iter_mut().zip(dout).zip(av.iter()) {
                        *g += d * x;
                    }
                }
            }
            Op::Scale(c) => {
                if needs[0] {
                    let da = self.grad_buf(parents[0]);
                    for (g, d) in da.iter_mut().zip(dout) {
                        *g += c * d;
                    }
                }
            }
            Op::Gelu => {
                if needs[0] {
                    let xv = Arc::clone(&self.nodes[parents[0].0].values);
                    let da = self.grad_buf(parents[0]);
                    for ((g, d), &x) in da.iter_mut().zip(dout).zip(xv.iter()) {
                        *g += d * gelu_bwd(x);
                    }
                }
            }
            Op::LayerNorm => {
                let (x, gain, bias) = (parents[0], parents[1], parents[2]);
                let c = *self.shape(x).last().expect("layer_norm keeps last axis");
                let rows = self.values(x).len() / c;
                let (mean, invstd) = match &self.nodes[i].saved {
                    Saved::RowStats { mean, invstd } => (mean.clone(), invstd.clone()),
                    _ => unreachable!("layer_norm saves row stats"),
                };
                let xv = Arc::clone(&self.nodes[x.0].values);
                let gv = Arc::clone(&self.nodes[gain.0].values);
                if needs[0] {
                    let dx = self.grad_buf(x);
                    for r in 0..rows {
                        let xrow = &xv[r * c..(r + 1) * c];
                        let drow = &dout[r * c..(r + 1) * c];
                        let inv = invstd[r];
                        let mu = mean[r];
                        // dxhat_j = dout_j * gain_j; dx = inv * (dxhat
                        //   - mean(dxhat) - xhat * mean(dxhat * xhat))
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..c {
                            let xhat = (xrow[j] - mu) * inv;
                            let dxhat = drow[j] * gv[j];
                            mean_dxhat += dxhat;
                            mean_dxhat_xhat += dxhat * xhat;
                        }
                        mean_dxhat /= c as f64;
                        mean_dxhat_xhat /= c as f64;
                        let dxrow = &mut dx[r * c..(r + 1) * c];
                        for j in 0..c {
                            let xhat = (xrow[j] - mu) * inv;
                            let dxhat = drow[j] * gv[j];
                            dxrow[j] += inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                        }
                    }
                }
                if needs[1] {
                    let dg = self.grad_buf(gain);
                    for r in 0..rows {
                        let xrow = &xv[r * c..(r + 1) * c];
                        let drow = &dout[r * c..(r + 1) * c];
                        let (inv, mu) = (invstd[r], mean[r]);
                        for j in 0..c {
                            dg[j] += drow[j] * (xrow[j] - mu) * inv;
                        }
                    }
                }
                if needs[2] {
                    let db = self.grad_buf(bias);
                    for r in 0..rows {
                        let drow = &dout[r * c..(r + 1) * c];
                        for j in 0..c {
                            db[j] += drow[j];
                        }
                    }
                }
            }
            Op::Softmax => {
                if needs[0] {
                    let c = *self.nodes[i].shape.last().expect("softmax keeps last axis");
                    let yv = Arc::clone(&self.nodes[i].values);
                    let rows = yv.len() / c;
                    let dx = self.grad_buf(parents[0]);
                    for r in 0..rows {
                        let yrow = &yv[r * c..(r + 1) * c];
                        let drow = &dout[r * c..(r + 1) * c];
                        let dot: f64 = yrow.iter().zip(drow).map(|(y, d)| y * d).sum();
                        let dxrow = &mut dx[r * c..(r + 1) * c];
                        for j in 0..c {
                            dxrow[j] += yrow[j] * (drow[j] - dot);
                        }
                    }
                }
            }
            Op::GatherLast => {
                if needs[0] {
                    let c = *self.shape(parents[0]).last().expect("gather parent has axes");
                    let indices = match &self.nodes[i].saved {
                        Saved::Indices(ix) => ix.clone(),
                        _ => unreachable!("gather saves indices"),
                    };
                    let dx = self.grad_buf(parents[0]);
                    for (r, &j) in indices.iter().enumerate() {
                        dx[r * c + j] += dout[r];
                    }
                }
            }
            Op::Reshape => {
                if needs[0] {
                    let da = self.grad_buf(parents[0]);
                    for (g, d) in da.iter_mut().zip(dout) {
                        *g += d;
                    }
                }
            }
            Op::Permute3(perm) => {
                if needs[0] {
                    // The gradient flows through the inverse permutation.
                    let mut inv = [0usize; 3];
                    for (axis, &p) in perm.iter().enumerate() {
                        inv[p] = axis;
                    }
                    let out_shape: Vec<usize> = self.nodes[i].shape.clone();
                    let permuted = permute3_copy(dout, &out_shape, inv);
                    let da = self.grad_buf(parents[0]);
                    for (g, d) in da.iter_mut().zip(&permuted) {
                        *g += d;
                    }
                }
            }
            Op::SumAll => {
                if needs[0] {
                    let d = dout[0];
                    let da = self.grad_buf(parents[0]);
                    for g in da.iter_mut() {
                        *g += d;
                    }
                }
            }
            Op::MeanAll => {
                if needs[0] {
                    let n = self.values(parents[0]).len().max(1);
                    let d = dout[0] / n as f64;
                    let da = self.grad_buf(parents[0]);
                    for g in da.iter_mut() {
                        *g += d;
                    }
                }
            }
            Op::LogClamped(eps) => {
                if needs[0] {
                    let xv = Arc::clone(&self.nodes[parents[0].0].values);
                    let da = self.grad_buf(parents[0]);
                    for ((g, d), &x) in da.iter_mut().zip(dout).zip(xv.iter()) {
                        if x >= eps {
                            *g += d / x;
                        }
                    }
                }
            }
            Op::MaskedFill => {
                if needs[0] {
                    let mask = match &self.nodes[i].saved {
                        Saved::Mask(m) => m.clone(),
                        _ => unreachable!("masked_fill saves its mask"),
                    };
                    let da = self.grad_buf(parents[0]);
                    for ((g, d), &m) in da.iter_mut().zip(dout).zip(mask.iter()) {
                        if !m {
                            *g += d;
                        }
                    }
                }
            }
            Op::SetAttention(scale) => {
                let (q, k, v) = (parents[0], parents[1], parents[2]);
                let shape = self.shape(q).to_vec();
                let (heads, rows, hd) = (shape[0], shape[1], shape[2]);
                let (probs, pattern) = match &self.nodes[i].saved {
                    Saved::Attention { probs, pattern } => {
                        (Arc::new(probs.clone()), Arc::clone(pattern))
                    }
                    _ => unreachable!("set_attention saves probabilities"),
                };
                let qv = Arc::clone(&self.nodes[q.0].values);
                let kv = Arc::clone(&self.nodes[k.0].values);
                let vv = Arc::clone(&self.nodes[v.0].values);
                // dscore[t][p] shared by the dq and dk updates.
                let mut dscores = vec![0.0; heads * rows * rows];
                for h in 0..heads {
                    let base = h * rows * hd;
                    let pbase = h * rows * rows;
                    for t in 0..rows {
                        let drow = &dout[base + t * hd..base + (t + 1) * hd];
                        let keys = pattern.allowed(t);
                        // g_p = dout_t . v_p ; ds_p = P[t,p] (g_p - sum P g)
                        let mut dot = 0.0;
                        let mut gs = Vec::with_capacity(keys.len());
                        for &p in keys {
                            let vrow = &vv[base + p * hd..base + (p + 1) * hd];
                            let g: f64 = drow.iter().zip(vrow).map(|(a, b)| a * b).sum();
                            dot += probs[pbase + t * rows + p] * g;
                            gs.push(g);
                        }
                        for (&p, &g) in keys.iter().zip(&gs) {
                            dscores[pbase + t * rows + p] =
                                probs[pbase + t * rows + p] * (g - dot);
                        }
                    }
                }
                if needs[0] {
                    let dq = self.grad_buf(q);
                    for h in 0..heads {
                        let base = h * rows * hd;
                        let pbase = h * rows * rows;
                        for t in 0..rows {
                            for &p in pattern.allowed(t) {
                                let ds = scale * dscores[pbase + t * rows + p];
                                let krow = &kv[base + p * hd..base + (p + 1) * hd];
                                let dqrow = &mut dq[base + t * hd..base + (t + 1) * hd];
                                for (g, &x) in dqrow.iter_mut().zip(krow) {
                                    *g += ds * x;
                                }
                            }
                        }
                    }
                }
                if needs[1] {
                    let dk = self.grad_buf(k);
                    for h in 0..heads {
                        let base = h * rows * hd;
                        let pbase = h * rows * rows;
                        for t in 0..rows {
                            let qrow = &qv[base + t * hd..base + (t + 1) * hd];
                            for &p in pattern.allowed(t) {
                                let ds = scale * dscores[pbase + t * rows + p];
                                let dkrow = &mut dk[base + p * hd..base + (p + 1) * hd];
                                for (g, &x) in dkrow.iter_mut().zip(qrow) {
                                    *g += ds * x;
                                }
                            }
                        }
                    }
                }
                if needs[2] {
                    let dv = self.grad_buf(v);
                    for h in 0..heads {
                        let base = h * rows * hd;
                        let pbase = h * rows * rows;
                        for t in 0..rows {
                            let drow = &dout[base + t * hd..base + (t + 1) * hd];
                            for &p in pattern.allowed(t) {
                                let w = probs[pbase + t * rows + p];
                                let dvrow = &mut dv[base + p * hd..base + (p + 1) * hd];
                                for (g, &x) in dvrow.iter_mut().zip(drow) {
                                    *g += w * x;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Lexicographic comparison of two rows of `hd` f64s by bit pattern.
fn row_bits_cmp(data: &[f64], a: usize, b: usize, hd: usize) -> Ordering {
    let ra = &data[a * hd..(a + 1) * hd];
    let rb = &data[b * hd..(b + 1) * hd];
    for (x, y) in ra.iter().zip(rb) {
        match x.to_bits().cmp(&y.to_bits()) {
            Ordering::Equal => {}
            other => return other,
        }
    }
    Ordering::Equal
}

// ---- kernels --------------------------------------------------------------

/// C[m,n] += A[m,k] @ B[k,n], i-k-j order so the inner loop streams rows.
fn mm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += aik * bj;
            }
        }
    }
}

/// C[m,n] += A[m,k] @ B^T where B is stored as [n,k] (row dot products).
fn mm_abt_acc(a: &[f64], bt: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &bt[j * k..(j + 1) * k];
            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            crow[j] += dot;
        }
    }
}

/// C[m,n] += A^T @ B where A is stored as [p,m] and B as [p,n]
/// (sum of outer products over the shared leading axis).
fn mm_atb_acc(a: &[f64], b: &[f64], c: &mut [f64], p: usize, m: usize, n: usize) {
    for pp in 0..p {
        let arow = &a[pp * m..(pp + 1) * m];
        let brow = &b[pp * n..(pp + 1) * n];
        for (i, &ai) in arow.iter().enumerate() {
            let crow = &mut c[i * n..(i + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += ai * bj;
            }
        }
    }
}

fn permute3_copy(src: &[f64], shape: &[usize], perm: [usize; 3]) -> Vec<f64> {
    let (d0, d1, d2) = (shape[0], shape[1], shape[2]);
    let out_shape = [shape[perm[0]], shape[perm[1]], shape[perm[2]]];
    let strides = [d1 * d2, d2, 1];
    let out_strides_src = [strides[perm[0]], strides[perm[1]], strides[perm[2]]];
    let mut out = vec![0.0; d0 * d1 * d2];
    let mut w = 0;
    for i in 0..out_shape[0] {
        for j in 0..out_shape[1] {
            let base = i * out_strides_src[0] + j * out_strides_src[1];
            for k in 0..out_shape[2] {
                out[w] = src[base + k * out_strides_src[2]];
                w += 1;
            }
        }
    }
    out
}

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_CUBIC * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
