//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its output value and whatever the backward rule needs. Nodes are appended
//! in evaluation order, so the node list is already topologically sorted and
//! [`Tape::backward`] is a single reverse sweep.
//!
//! Parameters are referenced from a borrowed [`ParamStore`] rather than
//! copied; their gradients are reported per parameter index.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Param(usize),
    MatMul(NodeId, NodeId),
    MatMulBT(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    AddConst(NodeId),
    Affine(NodeId, S),
    MulConst(NodeId, Vec<S>),
    Relu(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    SliceCols {
        a: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    MaskFill(NodeId, Vec<bool>),
    Pick(NodeId, Vec<usize>),
    Sum(NodeId),
    Reciprocal {
        a: NodeId,
        floor: S,
    },
    Mean(Vec<NodeId>),
}

#[derive(Debug)]
struct Node<S> {
    shape: Vec<usize>,
    value: Vec<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Records one forward pass.
pub struct Tape<'p, S: Scalar> {
    params: Option<&'p ParamStore<S>>,
    param_nodes: Vec<Option<NodeId>>,
    nodes: Vec<Node<S>>,
    decisions: Vec<u64>,
}

fn split_shape(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().expect("non-empty shape");
    (shape.iter().product::<usize>() / cols, cols)
}

impl<'p, S: Scalar> Default for Tape<'p, S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, S: Scalar> Tape<'p, S> {
    pub fn new() -> Self {
        Self {
            params: None,
            param_nodes: Vec::new(),
            nodes: Vec::new(),
            decisions: Vec::new(),
        }
    }

    pub fn with_params(params: &'p ParamStore<S>) -> Self {
        Self {
            params: Some(params),
            param_nodes: vec![None; params.len()],
            nodes: Vec::new(),
            decisions: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`. Lets a decoder reuse
    /// one encoder pass for many prefixes.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        for slot in &mut self.param_nodes {
            if slot.is_some_and(|id| id.0 >= len) {
                *slot = None;
            }
        }
    }

    /// Fingerprints of every value-dependent masking decision made on this
    /// tape, in order. Two evaluations with equal decisions took the same
    /// branch through every non-differentiable selection.
    pub fn decisions(&self) -> &[u64] {
        &self.decisions
    }

    pub fn value(&self, id: NodeId) -> &[S] {
        let node = &self.nodes[id.0];
        match node.op {
            Op::Param(idx) => self.params.expect("param tape").get(idx).data(),
            _ => &node.value,
        }
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    fn dims(&self, id: NodeId) -> (usize, usize) {
        split_shape(&self.nodes[id.0].shape)
    }

    pub fn tensor(&self, id: NodeId) -> Tensor<S> {
        Tensor::new(self.shape(id).to_vec(), self.value(id).to_vec()).expect("node shape")
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<S>, op: Op<S>, requires_grad: bool) -> NodeId {
        debug_assert!(matches!(op, Op::Param(_)) || shape.iter().product::<usize>() == value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor<S>) -> NodeId {
        let rg = t.requires_grad();
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor<S>) -> NodeId {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    /// Node for parameter `idx` of the bound store; repeated calls return the
    /// same node so shared weights accumulate a single gradient.
    pub fn param(&mut self, idx: usize) -> NodeId {
        if let Some(id) = self.param_nodes[idx] {
            return id;
        }
        let store = self.params.expect("tape has no parameter store");
        let t = store.get(idx);
        let id = self.push(t.shape().to_vec(), Vec::new(), Op::Param(idx), true);
        self.param_nodes[idx] = Some(id);
        id
    }

    fn rg1(&self, a: NodeId) -> bool {
        self.nodes[a.0].requires_grad
    }

    fn rg2(&self, a: NodeId, b: NodeId) -> bool {
        self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad
    }

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims(a);
        let bs = self.shape(b);
        if bs.len() != 2 || bs[0] != k {
            return Err(Error::shape(format!(
                "matmul of {:?} and {:?}: inner dimensions differ",
                self.shape(a),
                bs
            )));
        }
        let n = bs[1];
        let mut out = vec![S::zero(); m * n];
        kernels::matmul_acc(self.value(a), self.value(b), m, k, n, &mut out);
        let rg = self.rg2(a, b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    /// `a[m×k] · b[n×k]ᵀ`
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims(a);
        let (n, kb) = self.dims(b);
        if k != kb {
            return Err(Error::shape(format!(
                "matmul_bt of {:?} and {:?}: inner dimensions differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![S::zero(); m * n];
        kernels::matmul_bt_acc(self.value(a), self.value(b), m, k, n, &mut out);
        let rg = self.rg2(a, b);
        Ok(self.push(vec![m, n], out, Op::MatMulBT(a, b), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "add of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.rg2(a, b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg))
    }

    /// Adds a length-`c` vector to every row of `a[r×c]`.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (_, c) = self.dims(a);
        if self.value(bias).len() != c {
            return Err(Error::shape(format!(
                "bias {:?} for rows of width {c}",
                self.shape(bias)
            )));
        }
        let b = self.value(bias);
        let out = self
            .value(a)
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(&x, &y)| x + y))
            .collect();
        let rg = self.rg2(a, bias);
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddBias(a, bias), rg))
    }

    /// Adds a constant tensor (no gradient flows into it).
    pub fn add_const(&mut self, a: NodeId, c: &[S]) -> Result<NodeId> {
        if c.len() != self.value(a).len() {
            return Err(Error::shape(format!(
                "constant of {} values added to {:?}",
                c.len(),
                self.shape(a)
            )));
        }
        let out = self.value(a).iter().zip(c).map(|(&x, &y)| x + y).collect();
        let rg = self.rg1(a);
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddConst(a), rg))
    }

    /// `scale * a + shift`
    pub fn affine(&mut self, a: NodeId, scale: S, shift: S) -> NodeId {
        let out = self.value(a).iter().map(|&x| scale * x + shift).collect();
        let rg = self.rg1(a);
        self.push(self.shape(a).to_vec(), out, Op::Affine(a, scale), rg)
    }

    pub fn scale(&mut self, a: NodeId, s: S) -> NodeId {
        self.affine(a, s, S::zero())
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.affine(a, -S::one(), S::zero())
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&mut self, a: NodeId, c: Vec<S>) -> Result<NodeId> {
        if c.len() != self.value(a).len() {
            return Err(Error::shape("mul_const length mismatch"));
        }
        let out = self.value(a).iter().zip(&c).map(|(&x, &y)| x * y).collect();
        let rg = self.rg1(a);
        Ok(self.push(self.shape(a).to_vec(), out, Op::MulConst(a, c), rg))
    }

    /// Inverted dropout: zeroes each entry with probability `rate` and scales
    /// survivors by `1 / (1 - rate)`. Identity when `rate == 0`.
    pub fn dropout<R: Rng>(&mut self, a: NodeId, rate: f64, rng: &mut R) -> Result<NodeId> {
        if rate <= 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - rate;
        let scale = S::lit(1.0 / keep);
        let mask = (0..self.value(a).len())
            .map(|_| if rng.gen::<f64>() < keep { scale } else { S::zero() })
            .collect();
        self.mul_const(a, mask)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).iter().map(|&x| x.max(S::zero())).collect();
        let rg = self.rg1(a);
        self.push(self.shape(a).to_vec(), out, Op::Relu(a), rg)
    }

    /// Row-wise softmax; `-inf` entries map to exactly zero.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let (_, c) = self.dims(a);
        let mut out = vec![S::zero(); self.value(a).len()];
        for (x, y) in self.value(a).chunks(c).zip(out.chunks_mut(c)) {
            kernels::softmax_row(x, y)?;
        }
        let rg = self.rg1(a);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Softmax(a), rg))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let (_, c) = self.dims(a);
        let mut out = vec![S::zero(); self.value(a).len()];
        for (x, y) in self.value(a).chunks(c).zip(out.chunks_mut(c)) {
            kernels::log_softmax_row(x, y)?;
        }
        let rg = self.rg1(a);
        Ok(self.push(self.shape(a).to_vec(), out, Op::LogSoftmax(a), rg))
    }

    /// Row-wise softmin, recorded as `softmax(-a)`.
    pub fn softmin(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.neg(a);
        self.softmax(n)
    }

    /// Row-wise `log(softmin(a))`, recorded as `log_softmax(-a)`.
    pub fn log_softmin(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.neg(a);
        self.log_softmax(n)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (r, d) = self.dims(x);
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::shape(format!(
                "layer_norm over width {d} with gain {:?} and bias {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let mut out = vec![S::zero(); r * d];
        let mut xhat = vec![S::zero(); r * d];
        let mut rstd = vec![S::zero(); r];
        {
            let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
            for i in 0..r {
                let span = i * d..(i + 1) * d;
                rstd[i] = kernels::layer_norm_row(
                    &xv[span.clone()],
                    gv,
                    bv,
                    &mut out[span.clone()],
                    &mut xhat[span],
                );
            }
        }
        let rg = self.rg2(x, gain) || self.rg1(bias);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Selects rows of `table[V×d]`.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (v, d) = self.dims(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Vocabulary {
                id: bad,
                vocab_size: v,
            });
        }
        let tv = self.value(table);
        let out: Vec<S> = ids.iter().flat_map(|&i| tv[i * d..(i + 1) * d].iter().copied()).collect();
        let rg = self.rg1(table);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.dims(a);
        if start + len > c || len == 0 {
            return Err(Error::shape(format!(
                "column slice {start}..{} of width {c}",
                start + len
            )));
        }
        let out = self
            .value(a)
            .chunks(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let rg = self.rg1(a);
        Ok(self.push(vec![r, len], out, Op::SliceCols { a, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let r = self.dims(parts[0]).0;
        if parts.iter().any(|&p| self.dims(p).0 != r) {
            return Err(Error::shape("concat_cols of parts with different row counts"));
        }
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let c = self.dims(p).1;
                out.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg1(p));
        Ok(self.push(vec![r, total], out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Replaces entries where `mask` is true with `fill`; gradient is blocked
    /// at those entries. The mask is fingerprinted into [`Tape::decisions`].
    pub fn mask_fill(&mut self, a: NodeId, mask: Vec<bool>, fill: S) -> Result<NodeId> {
        if mask.len() != self.value(a).len() {
            return Err(Error::shape(format!(
                "mask of {} entries for {:?}",
                mask.len(),
                self.shape(a)
            )));
        }
        let mut h = DefaultHasher::new();
        mask.hash(&mut h);
        self.decisions.push(h.finish());
        let out = self
            .value(a)
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| if m { fill } else { x })
            .collect();
        let rg = self.rg1(a);
        Ok(self.push(self.shape(a).to_vec(), out, Op::MaskFill(a, mask), rg))
    }

    /// Gathers entries at flat indices into a vector.
    pub fn pick(&mut self, a: NodeId, flat: &[usize]) -> Result<NodeId> {
        let n = self.value(a).len();
        if flat.is_empty() || flat.iter().any(|&i| i >= n) {
            return Err(Error::shape(format!(
                "pick of {} indices from {n} values",
                flat.len()
            )));
        }
        let out = flat.iter().map(|&i| self.value(a)[i]).collect();
        let rg = self.rg1(a);
        Ok(self.push(vec![flat.len()], out, Op::Pick(a, flat.to_vec()), rg))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).iter().copied().sum();
        let rg = self.rg1(a);
        self.push(vec![1], vec![s], Op::Sum(a), rg)
    }

    /// `1 / max(a, floor)`
    pub fn reciprocal(&mut self, a: NodeId, floor: S) -> NodeId {
        let out = self.value(a).iter().map(|&x| S::one() / x.max(floor)).collect();
        let rg = self.rg1(a);
        self.push(self.shape(a).to_vec(), out, Op::Reciprocal { a, floor }, rg)
    }

    /// Elementwise mean of equally shaped nodes.
    pub fn mean_of(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let shape = self.shape(parts[0]).to_vec();
        if parts.iter().any(|&p| self.shape(p) != shape.as_slice()) {
            return Err(Error::shape("mean_of parts with different shapes"));
        }
        let n = S::from_usize(parts.len()).unwrap();
        let mut out = vec![S::zero(); self.value(parts[0]).len()];
        for &p in parts {
            for (o, &v) in out.iter_mut().zip(self.value(p)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= n;
        }
        let rg = parts.iter().any(|&p| self.rg1(p));
        Ok(self.push(shape, out, Op::Mean(parts.to_vec()), rg))
    }

    /// Copies a node's value as a constant, cutting the gradient path.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).to_vec();
        self.push(self.shape(a).to_vec(), v, Op::Leaf, false)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<S>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![S::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(i, &g, &mut grads);
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients {
            grads,
            param_nodes: self.param_nodes.clone(),
        })
    }

    fn backward_node(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.shape(*b)[1];
                if self.rg1(*a) {
                    // da = g · bᵀ
                    let ga = acc(grads, *a, m * k);
                    kernels::matmul_bt_acc(g, self.value(*b), m, n, k, ga);
                }
                if self.rg1(*b) {
                    // db = aᵀ · g
                    let gb = acc(grads, *b, k * n);
                    kernels::matmul_at_acc(self.value(*a), g, m, k, n, gb);
                }
            }
            Op::MatMulBT(a, b) => {
                let (m, k) = self.dims(*a);
                let (n, _) = self.dims(*b);
                if self.rg1(*a) {
                    // da = g · b
                    let ga = acc(grads, *a, m * k);
                    kernels::matmul_acc(g, self.value(*b), m, n, k, ga);
                }
                if self.rg1(*b) {
                    // db = gᵀ · a
                    let gb = acc(grads, *b, n * k);
                    kernels::matmul_at_acc(g, self.value(*a), m, n, k, gb);
                }
            }
            Op::Add(a, b) => {
                for p in [*a, *b] {
                    if self.rg1(p) {
                        add_into(acc(grads, p, g.len()), g);
                    }
                }
            }
            Op::AddBias(a, bias) => {
                if self.rg1(*a) {
                    add_into(acc(grads, *a, g.len()), g);
                }
                if self.rg1(*bias) {
                    let c = self.value(*bias).len();
                    let gb = acc(grads, *bias, c);
                    for row in g.chunks(c) {
                        add_into(gb, row);
                    }
                }
            }
            Op::AddConst(a) => add_into(acc(grads, *a, g.len()), g),
            Op::Affine(a, s) => {
                let ga = acc(grads, *a, g.len());
                for (o, &gv) in ga.iter_mut().zip(g) {
                    *o += *s * gv;
                }
            }
            Op::MulConst(a, c) => {
                let ga = acc(grads, *a, g.len());
                for ((o, &gv), &cv) in ga.iter_mut().zip(g).zip(c) {
                    *o += gv * cv;
                }
            }
            Op::Relu(a) => {
                let ga = acc(grads, *a, g.len());
                for ((o, &gv), &yv) in ga.iter_mut().zip(g).zip(y) {
                    if yv > S::zero() {
                        *o += gv;
                    }
                }
            }
            Op::Softmax(a) => {
                let c = *node.shape.last().unwrap();
                let ga = acc(grads, *a, g.len());
                for ((gr, yr), outr) in g.chunks(c).zip(y.chunks(c)).zip(ga.chunks_mut(c)) {
                    let dot: S = gr.iter().zip(yr).map(|(&gv, &yv)| gv * yv).sum();
                    for ((o, &gv), &yv) in outr.iter_mut().zip(gr).zip(yr) {
                        *o += yv * (gv - dot);
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let c = *node.shape.last().unwrap();
                let ga = acc(grads, *a, g.len());
                for ((gr, yr), outr) in g.chunks(c).zip(y.chunks(c)).zip(ga.chunks_mut(c)) {
                    let total: S = gr.iter().copied().sum();
                    for ((o, &gv), &yv) in outr.iter_mut().zip(gr).zip(yr) {
                        *o += gv - yv.exp() * total;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (r, d) = self.dims(*x);
                let gv = self.value(*gain);
                if self.rg1(*x) {
                    let dn = S::from_usize(d).unwrap();
                    let gx = acc(grads, *x, r * d);
                    let mut dxhat = vec![S::zero(); d];
                    for row in 0..r {
                        let span = row * d..(row + 1) * d;
                        let (gr, xr) = (&g[span.clone()], &xhat[span.clone()]);
                        for j in 0..d {
                            dxhat[j] = gr[j] * gv[j];
                        }
                        let mean_d: S = dxhat.iter().copied().sum::<S>() / dn;
                        let mean_dx: S = dxhat.iter().zip(xr).map(|(&a, &b)| a * b).sum::<S>() / dn;
                        for j in 0..d {
                            gx[row * d + j] += rstd[row] * (dxhat[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                }
                if self.rg1(*gain) {
                    let gg = acc(grads, *gain, d);
                    for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * xr[j];
                        }
                    }
                }
                if self.rg1(*bias) {
                    let gb = acc(grads, *bias, d);
                    for gr in g.chunks(d) {
                        add_into(gb, gr);
                    }
                }
            }
            Op::Gather { table, ids } => {
                let (v, d) = self.dims(*table);
                let gt = acc(grads, *table, v * d);
                for (k, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * d..(id + 1) * d], &g[k * d..(k + 1) * d]);
                }
            }
            Op::SliceCols { a, start } => {
                let (r, c) = self.dims(*a);
                let len = node.shape[1];
                let ga = acc(grads, *a, r * c);
                for row in 0..r {
                    add_into(
                        &mut ga[row * c + start..row * c + start + len],
                        &g[row * len..(row + 1) * len],
                    );
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = (node.shape[0], node.shape[1]);
                let mut offset = 0;
                for &p in parts {
                    let c = self.dims(p).1;
                    if self.rg1(p) {
                        let gp = acc(grads, p, r * c);
                        for row in 0..r {
                            add_into(
                                &mut gp[row * c..(row + 1) * c],
                                &g[row * total + offset..row * total + offset + c],
                            );
                        }
                    }
                    offset += c;
                }
            }
            Op::MaskFill(a, mask) => {
                let ga = acc(grads, *a, g.len());
                for ((o, &gv), &m) in ga.iter_mut().zip(g).zip(mask) {
                    if !m {
                        *o += gv;
                    }
                }
            }
            Op::Pick(a, flat) => {
                let n = self.value(*a).len();
                let ga = acc(grads, *a, n);
                for (&idx, &gv) in flat.iter().zip(g) {
                    ga[idx] += gv;
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                let ga = acc(grads, *a, n);
                for o in ga.iter_mut() {
                    *o += g[0];
                }
            }
            Op::Reciprocal { a, floor } => {
                let xv = self.value(*a);
                let ga = acc(grads, *a, g.len());
                for ((o, &gv), &x) in ga.iter_mut().zip(g).zip(xv) {
                    if x > *floor {
                        *o -= gv / (x * x);
                    }
                }
            }
            Op::Mean(parts) => {
                let n = S::from_usize(parts.len()).unwrap();
                for &p in parts {
                    if self.rg1(p) {
                        let gp = acc(grads, p, g.len());
                        for (o, &gv) in gp.iter_mut().zip(g) {
                            *o += gv / n;
                        }
                    }
                }
            }
        }
    }
}

fn acc<S: Scalar>(grads: &mut [Option<Vec<S>>], id: NodeId, len: usize) -> &mut Vec<S> {
    grads[id.0].get_or_insert_with(|| vec![S::zero(); len])
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Gradients of one backward pass, for leaves and parameters.
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
    param_nodes: Vec<Option<NodeId>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of a leaf node; `None` when the loss does not reach it.
    pub fn of(&self, id: NodeId) -> Option<&[S]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradient of parameter `idx`; `None` when unreachable from the loss.
    pub fn param(&self, idx: usize) -> Option<&[S]> {
        self.param_nodes
            .get(idx)
            .copied()
            .flatten()
            .and_then(|id| self.of(id))
    }

    /// One optional buffer per parameter, in store order.
    pub fn into_param_grads(mut self) -> Vec<Option<Vec<S>>> {
        self.param_nodes
            .iter()
            .map(|id| id.and_then(|id| self.grads[id.0].take()))
            .collect()
    }
}
