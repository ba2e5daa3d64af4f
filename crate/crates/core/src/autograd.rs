//! A small reverse-mode tape over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is
//! a valid topological order. Each node keeps whatever its backward kernel
//! needs; gradients are accumulated into a dense per-node table.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::ocl::{direction_backward, direction_forward, DirectionCache};
use crate::ops::{self, AttentionCache, LayerNormCache};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{BoolMask, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Output row `r` is `sum(weight * src[row])` over the listed pairs.
pub type RowRecipe = Vec<(usize, f64)>;

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Add(NodeId, NodeId),
    RowMix {
        src: NodeId,
        recipe: Vec<RowRecipe>,
    },
    ConcatRows(Vec<NodeId>),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        cache: LayerNormCache,
    },
    Gelu(NodeId),
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        segments: usize,
        n_heads: usize,
        cache: AttentionCache,
    },
    L2Normalize {
        x: NodeId,
        norms: Vec<f64>,
    },
    Contrastive {
        query: NodeId,
        positive: NodeId,
        extra: Option<NodeId>,
        log_scale: NodeId,
        cache: DirectionCache,
    },
    WeightedSum(Vec<(f64, NodeId)>),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: Vec<(ParamId, NodeId)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf)
    }

    /// Binds a stored parameter as a leaf. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&(_, node)) = self.bound.iter().find(|(p, _)| *p == id) {
            return node;
        }
        let node = self.input(store.get(id).clone());
        self.bound.push((id, node));
        node
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let v = ops::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        Ok(self.push(v, Op::Linear { x, w, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim("add", format!("{:?} + {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let v = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn row_mix(&mut self, src: NodeId, recipe: Vec<RowRecipe>) -> Result<NodeId> {
        let s = self.value(src);
        let (rows, d) = (s.rows(), s.cols());
        let mut out = vec![0.0; recipe.len() * d];
        for (r, parts) in recipe.iter().enumerate() {
            let dst = &mut out[r * d..(r + 1) * d];
            for &(row, w) in parts {
                if row >= rows {
                    return Err(Error::dim("row_mix", format!("row {row} of {rows}")));
                }
                for (o, x) in dst.iter_mut().zip(s.row(row)) {
                    *o += w * x;
                }
            }
        }
        let v = Tensor::new(vec![recipe.len(), d], out)?;
        Ok(self.push(v, Op::RowMix { src, recipe }))
    }

    pub fn gather_rows(&mut self, src: NodeId, rows: &[usize]) -> Result<NodeId> {
        self.row_mix(src, rows.iter().map(|&r| vec![(r, 1.0)]).collect())
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let d = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != d {
                return Err(Error::dim("concat_rows", format!("{} vs {d} columns", t.cols())));
            }
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let v = Tensor::new(vec![rows, d], data)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (v, cache) = ops::layer_norm(self.value(x), self.value(gamma), self.value(beta))?;
        Ok(self.push(v, Op::LayerNorm { x, gamma, beta, cache }))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = ops::gelu(self.value(x));
        self.push(v, Op::Gelu(x))
    }

    /// Attention over `segments` equal-length sequences stacked along rows,
    /// each using the same `mask`.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        mask: &Rc<BoolMask>,
        segments: usize,
        n_heads: usize,
    ) -> Result<NodeId> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        let len = mask.rows();
        if mask.cols() != len || tq.rows() != segments * len || tk.shape() != tq.shape() {
            return Err(Error::dim(
                "attention",
                format!("{segments} segments of {len}, q {:?}, k {:?}", tq.shape(), tk.shape()),
            ));
        }
        if tv.shape() != tq.shape() {
            return Err(Error::dim("attention", format!("v {:?}", tv.shape())));
        }
        let mut out = vec![0.0; segments * len * d];
        let mut probs = vec![0.0; segments * n_heads * len * len];
        let stride = len * d;
        let pstride = n_heads * len * len;
        for s in 0..segments {
            let r = s * stride..(s + 1) * stride;
            ops::attention_raw(
                &tq.data()[r.clone()],
                &tk.data()[r.clone()],
                &tv.data()[r.clone()],
                mask,
                len,
                len,
                d,
                n_heads,
                &mut out[r],
                &mut probs[s * pstride..(s + 1) * pstride],
            )?;
        }
        let value = Tensor::new(vec![segments * len, d], out)?;
        let op = Op::Attention { q, k, v, segments, n_heads, cache: AttentionCache { probs } };
        Ok(self.push(value, op))
    }

    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let (v, norms) = ops::l2_normalize(self.value(x))?;
        Ok(self.push(v, Op::L2Normalize { x, norms }))
    }

    /// One direction of the contrastive loss; see [`crate::ocl::direction_forward`].
    /// `log_scale` is a one-element node holding `ln(1/tau)`.
    pub fn contrastive(
        &mut self,
        query: NodeId,
        positive: NodeId,
        extra: Option<NodeId>,
        log_scale: NodeId,
    ) -> Result<NodeId> {
        let scale = self.value(log_scale).data()[0].exp();
        let (loss, cache) = direction_forward(
            self.value(query),
            self.value(positive),
            extra.map(|e| self.value(e)),
            scale,
        )?;
        let op = Op::Contrastive { query, positive, extra, log_scale, cache };
        Ok(self.push(Tensor::scalar(loss), op))
    }

    /// Weighted sum of one-element nodes.
    pub fn weighted_sum(&mut self, terms: &[(f64, NodeId)]) -> NodeId {
        let total = terms.iter().fold(0.0, |acc, &(w, n)| acc + w * self.value(n).data()[0]);
        self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()))
    }

    /// Reverse sweep from a one-element `root`.
    pub fn backward(&self, root: NodeId) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));

        fn acc(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
            match &mut grads[id.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (da, db) = ops::matmul_backward(self.value(*a), self.value(*b), &g);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Linear { x, w, b } => {
                    let lg = ops::linear_backward(self.value(*x), self.value(*w), b.is_some(), &g);
                    acc(&mut grads, *x, lg.dx);
                    acc(&mut grads, *w, lg.dw);
                    if let (Some(b), Some(db)) = (b, lg.db) {
                        let shape = self.value(*b).shape().to_vec();
                        acc(&mut grads, *b, db.reshape(shape).expect("bias shape"));
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::RowMix { src, recipe } => {
                    let s = self.value(*src);
                    let d = s.cols();
                    let mut ds = Tensor::zeros(s.shape());
                    for (r, parts) in recipe.iter().enumerate() {
                        let gr = g.row(r);
                        for &(row, w) in parts {
                            for (o, x) in ds.row_mut(row).iter_mut().zip(gr) {
                                *o += w * x;
                            }
                        }
                    }
                    debug_assert_eq!(ds.cols(), d);
                    acc(&mut grads, *src, ds);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let shape = self.value(p).shape().to_vec();
                        let n = self.value(p).numel();
                        let piece = Tensor::new(shape, g.data()[offset..offset + n].to_vec())
                            .expect("shape");
                        offset += n;
                        acc(&mut grads, p, piece);
                    }
                }
                Op::LayerNorm { x, gamma, beta, cache } => {
                    let (dx, dg, db) =
                        ops::layer_norm_backward(self.value(*x), self.value(*gamma), cache, &g);
                    acc(&mut grads, *x, dx);
                    let gshape = self.value(*gamma).shape().to_vec();
                    acc(&mut grads, *gamma, dg.reshape(gshape.clone()).expect("shape"));
                    acc(&mut grads, *beta, db.reshape(gshape).expect("shape"));
                }
                Op::Gelu(x) => {
                    acc(&mut grads, *x, ops::gelu_backward(self.value(*x), &g));
                }
                Op::Attention { q, k, v, segments, n_heads, cache } => {
                    let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                    let d = tq.cols();
                    let len = tq.rows() / segments;
                    let mut dq = vec![0.0; tq.numel()];
                    let mut dk = vec![0.0; tq.numel()];
                    let mut dv = vec![0.0; tq.numel()];
                    let stride = len * d;
                    let pstride = n_heads * len * len;
                    for s in 0..*segments {
                        let r = s * stride..(s + 1) * stride;
                        ops::attention_backward_raw(
                            &tq.data()[r.clone()],
                            &tk.data()[r.clone()],
                            &tv.data()[r.clone()],
                            &cache.probs[s * pstride..(s + 1) * pstride],
                            &g.data()[r.clone()],
                            len,
                            len,
                            d,
                            *n_heads,
                            &mut dq[r.clone()],
                            &mut dk[r.clone()],
                            &mut dv[r],
                        );
                    }
                    let shape = tq.shape().to_vec();
                    acc(&mut grads, *q, Tensor::new(shape.clone(), dq).expect("shape"));
                    acc(&mut grads, *k, Tensor::new(shape.clone(), dk).expect("shape"));
                    acc(&mut grads, *v, Tensor::new(shape, dv).expect("shape"));
                }
                Op::L2Normalize { x, norms } => {
                    acc(&mut grads, *x, ops::l2_normalize_backward(&node.value, norms, &g));
                }
                Op::Contrastive { query, positive, extra, log_scale, cache } => {
                    let scale = self.value(*log_scale).data()[0].exp();
                    let dg = direction_backward(
                        self.value(*query),
                        self.value(*positive),
                        extra.map(|e| self.value(e)),
                        scale,
                        cache,
                        g.data()[0],
                    );
                    acc(&mut grads, *query, dg.query);
                    acc(&mut grads, *positive, dg.positive);
                    if let (Some(e), Some(de)) = (extra, dg.extra) {
                        acc(&mut grads, *e, de);
                    }
                    let shape = self.value(*log_scale).shape().to_vec();
                    acc(&mut grads, *log_scale, Tensor::full(&shape, dg.log_scale));
                }
                Op::WeightedSum(terms) => {
                    let up = g.data()[0];
                    for &(w, n) in terms {
                        let shape = self.value(n).shape().to_vec();
                        acc(&mut grads, n, Tensor::full(&shape, w * up));
                    }
                }
            }
        }
        Gradients { grads, bound: self.bound.clone() }
    }
}

/// Result of a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    bound: Vec<(ParamId, NodeId)>,
}

impl Gradients {
    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Gradient of every stored parameter, zero for parameters the graph
    /// never touched.
    pub fn for_params(&self, store: &ParamStore) -> Vec<Tensor> {
        store
            .ids()
            .map(|pid| {
                self.bound
                    .iter()
                    .find(|(p, _)| *p == pid)
                    .and_then(|(_, n)| self.grads[n.0].clone())
                    .unwrap_or_else(|| Tensor::zeros(store.get(pid).shape()))
            })
            .collect()
    }
}
