//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! never copied onto the tape: operations that use them hold a [`ParamId`]
//! and read the [`ParameterStore`] directly, and [`Tape::backward`]
//! accumulates parameter gradients straight into a [`Gradients`] buffer.
//! That keeps a per-sample pass cheap even though the model carries several
//! million weights.

use std::ops::Range;

use super::tensor::{gemm, Operand};
use super::{Gradients, NnError, ParamId, ParameterStore, Tensor};

/// Epsilon added inside logarithms of probabilities.
pub const LOG_EPSILON: f64 = 1e-12;
/// Variance epsilon of layer normalisation.
pub const LAYER_NORM_EPSILON: f64 = 1e-10;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Per-query-row lists of admissible key rows for attention (CSR layout).
///
/// A query row with an empty key list produces a zero output row.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeySets {
    offsets: Vec<usize>,
    keys: Vec<usize>,
}

impl KeySets {
    pub fn from_rows<R: AsRef<[usize]>>(rows: &[R]) -> Self {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut keys = Vec::new();
        offsets.push(0);
        for r in rows {
            keys.extend_from_slice(r.as_ref());
            offsets.push(keys.len());
        }
        Self { offsets, keys }
    }

    /// Every one of `num_queries` rows attends to the same keys.
    pub fn shared(num_queries: usize, keys: &[usize]) -> Self {
        let mut offsets = Vec::with_capacity(num_queries + 1);
        let mut all = Vec::with_capacity(num_queries * keys.len());
        offsets.push(0);
        for _ in 0..num_queries {
            all.extend_from_slice(keys);
            offsets.push(all.len());
        }
        Self { offsets, keys: all }
    }

    /// Self-attention restricted to contiguous row segments.
    pub fn segments(segments: &[Range<usize>]) -> Self {
        let total = segments.iter().map(|s| s.end).max().unwrap_or(0);
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); total];
        for seg in segments {
            for r in seg.clone() {
                rows[r] = seg.clone().collect();
            }
        }
        Self::from_rows(&rows)
    }

    pub fn num_queries(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[usize] {
        &self.keys[self.offsets[i]..self.offsets[i + 1]]
    }

    fn max_key(&self) -> Option<usize> {
        self.keys.iter().copied().max()
    }
}

enum Op {
    Input,
    Linear {
        x: Var,
        w: ParamId,
        b: Option<ParamId>,
    },
    Relu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    MaskRows {
        x: Var,
        keep: Vec<bool>,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: f64,
        keys: KeySets,
        /// `probs[(offset_of_key) * heads + h]`
        probs: Vec<f64>,
    },
    SegmentMax {
        x: Var,
        /// Source row per output element, `usize::MAX` for empty segments.
        argmax: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        target: usize,
    },
    StepDistance {
        pred: Var,
        /// `(dx, dy, norm)` per evaluable step, `None` for excluded steps.
        diffs: Vec<Option<(f64, f64, f64)>>,
    },
    WeightedSum {
        terms: Vec<(Var, f64)>,
    },
    Dot {
        x: Var,
        weights: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records one forward pass against a fixed parameter store.
pub struct Tape<'p> {
    params: &'p ParameterStore,
    nodes: Vec<Node>,
}

fn shape_err(context: &'static str, expected: String, actual: String) -> NnError {
    NnError::Shape {
        context,
        expected,
        actual,
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParameterStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn params(&self) -> &'p ParameterStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant (no gradient flows into it).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, false)
    }

    /// `x * W + b` with `W` of shape `d_in x d_out`.
    pub fn linear(&mut self, x: Var, w: ParamId, b: Option<ParamId>) -> Result<Var, NnError> {
        let xv = self.value(x);
        let wv = self.params.get(w);
        if xv.cols() != wv.rows() {
            return Err(shape_err(
                "linear",
                format!("input width {} for `{}`", wv.rows(), self.params.name(w)),
                format!("input width {}", xv.cols()),
            ));
        }
        let (rows, d_in, d_out) = (xv.rows(), wv.rows(), wv.cols());
        let mut out = Tensor::zeros(rows, d_out);
        gemm(
            rows,
            d_in,
            d_out,
            1.0,
            Operand::plain(xv.data(), d_in),
            Operand::plain(wv.data(), d_out),
            0.0,
            out.data_mut(),
        );
        if let Some(b) = b {
            let bv = self.params.get(b);
            if bv.len() != d_out {
                return Err(shape_err(
                    "linear bias",
                    format!("{d_out} values for `{}`", self.params.name(b)),
                    format!("{} values", bv.len()),
                ));
            }
            for r in 0..rows {
                for (o, bb) in out.row_mut(r).iter_mut().zip(bv.data()) {
                    *o += bb;
                }
            }
        }
        Ok(self.push(out, Op::Linear { x, w, b }, true))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| {
            if *v < 0.0 {
                *v = 0.0
            }
        });
        let needs = self.needs(x);
        self.push(out, Op::Relu { x }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(
                "add",
                format!("{:?}", av.shape()),
                format!("{:?}", bv.shape()),
            ));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add { a, b }, needs))
    }

    /// Column-wise concatenation `[a; b]` of two tensors with equal row count.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(shape_err(
                "concat_cols",
                format!("{} rows", av.rows()),
                format!("{} rows", bv.rows()),
            ));
        }
        let (ca, cb) = (av.cols(), bv.cols());
        let mut out = Tensor::zeros(av.rows(), ca + cb);
        for r in 0..av.rows() {
            let row = out.row_mut(r);
            row[..ca].copy_from_slice(av.row(r));
            row[ca..].copy_from_slice(bv.row(r));
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Concat { a, b }, needs))
    }

    /// Rows with `keep[r] == false` become exactly zero.
    pub fn mask_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var, NnError> {
        let xv = self.value(x);
        if xv.rows() != keep.len() {
            return Err(shape_err(
                "mask_rows",
                format!("{} mask entries", xv.rows()),
                format!("{}", keep.len()),
            ));
        }
        let mut out = xv.clone();
        for (r, &k) in keep.iter().enumerate() {
            if !k {
                out.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            out,
            Op::MaskRows {
                x,
                keep: keep.to_vec(),
            },
            needs,
        ))
    }

    /// Output row `i` is input row `index[i]`.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var, NnError> {
        let xv = self.value(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= xv.rows()) {
            return Err(shape_err(
                "gather_rows",
                format!("row index < {}", xv.rows()),
                format!("{bad}"),
            ));
        }
        let mut out = Tensor::zeros(index.len(), xv.cols());
        for (o, &i) in index.iter().enumerate() {
            out.row_mut(o).copy_from_slice(xv.row(i));
        }
        let needs = self.needs(x);
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            needs,
        ))
    }

    /// Multi-head scaled dot-product attention core (no projections).
    ///
    /// Query row `i` attends to key rows `keys.row(i)`; each of the `heads`
    /// column blocks gets its own softmax. Rows without keys output zero.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: f64,
        keys: KeySets,
    ) -> Result<Var, NnError> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        if heads == 0 || d % heads != 0 {
            return Err(NnError::InvalidSpec(format!(
                "width {d} not divisible by {heads} heads"
            )));
        }
        if kv.cols() != d || vv.cols() != d {
            return Err(shape_err(
                "attention",
                format!("key/value width {d}"),
                format!("{} / {}", kv.cols(), vv.cols()),
            ));
        }
        if kv.rows() != vv.rows() {
            return Err(shape_err(
                "attention",
                format!("{} value rows", kv.rows()),
                format!("{}", vv.rows()),
            ));
        }
        if keys.num_queries() != qv.rows() {
            return Err(shape_err(
                "attention key sets",
                format!("{} query rows", qv.rows()),
                format!("{}", keys.num_queries()),
            ));
        }
        if let Some(mk) = keys.max_key() {
            if mk >= kv.rows() {
                return Err(shape_err(
                    "attention key index",
                    format!("< {}", kv.rows()),
                    format!("{mk}"),
                ));
            }
        }
        let dh = d / heads;
        let mut out = Tensor::zeros(qv.rows(), d);
        let mut probs = vec![0.0; keys.keys.len() * heads];
        let mut logits = Vec::new();
        for i in 0..qv.rows() {
            let ks = keys.row(i);
            if ks.is_empty() {
                continue;
            }
            let base = keys.offsets[i];
            let qrow = qv.row(i);
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = &qrow[cols.clone()];
                logits.clear();
                let mut max = f64::NEG_INFINITY;
                for &j in ks {
                    let kh = &kv.row(j)[cols.clone()];
                    let s = scale * dot(qh, kh);
                    max = max.max(s);
                    logits.push(s);
                }
                let mut sum = 0.0;
                for l in logits.iter_mut() {
                    *l = (*l - max).exp();
                    sum += *l;
                }
                let orow = &mut out.row_mut(i)[cols.clone()];
                for (jj, &j) in ks.iter().enumerate() {
                    let p = logits[jj] / sum;
                    probs[(base + jj) * heads + h] = p;
                    let vh = &vv.row(j)[cols.clone()];
                    for (o, x) in orow.iter_mut().zip(vh) {
                        *o += p * x;
                    }
                }
            }
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                keys,
                probs,
            },
            needs,
        ))
    }

    /// Column-wise max over each row segment; empty segments give zero rows.
    pub fn segment_max(&mut self, x: Var, segments: &[Range<usize>]) -> Result<Var, NnError> {
        let xv = self.value(x);
        let d = xv.cols();
        if let Some(bad) = segments.iter().find(|s| s.end > xv.rows()) {
            return Err(shape_err(
                "segment_max",
                format!("segments within {} rows", xv.rows()),
                format!("{bad:?}"),
            ));
        }
        let mut out = Tensor::zeros(segments.len(), d);
        let mut argmax = vec![usize::MAX; segments.len() * d];
        for (s, seg) in segments.iter().enumerate() {
            if seg.is_empty() {
                continue;
            }
            let orow = out.row_mut(s);
            orow.copy_from_slice(xv.row(seg.start));
            argmax[s * d..(s + 1) * d].iter_mut().for_each(|a| *a = seg.start);
            for r in seg.start + 1..seg.end {
                for (c, &val) in xv.row(r).iter().enumerate() {
                    if val > orow[c] {
                        orow[c] = val;
                        argmax[s * d + c] = r;
                    }
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(out, Op::SegmentMax { x, argmax }, needs))
    }

    /// Row-wise layer normalisation followed by a learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: ParamId, beta: ParamId) -> Result<Var, NnError> {
        let xv = self.value(x);
        let (gv, bv) = (self.params.get(gamma), self.params.get(beta));
        let d = xv.cols();
        if gv.len() != d || bv.len() != d {
            return Err(shape_err(
                "layer_norm",
                format!("{d} scale/shift values"),
                format!("{} / {}", gv.len(), bv.len()),
            ));
        }
        let mut out = Tensor::zeros(xv.rows(), d);
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; xv.rows()];
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPSILON).sqrt();
            inv_std[r] = is;
            let xh = &mut xhat[r * d..(r + 1) * d];
            let orow = out.row_mut(r);
            for c in 0..d {
                xh[c] = (row[c] - mean) * is;
                orow[c] = gv.data()[c] * xh[c] + bv.data()[c];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            true,
        ))
    }

    /// `-ln(softmax(logits)[target] + LOG_EPSILON)` for a single row or
    /// column of logits. Entries with `support[i] == false` are excluded
    /// from the softmax (their logit is treated as `-inf`).
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        support: Option<&[bool]>,
        target: usize,
    ) -> Result<Var, NnError> {
        let lv = self.value(logits);
        if lv.rows() != 1 && lv.cols() != 1 {
            return Err(shape_err(
                "softmax_cross_entropy",
                "a single row or column".into(),
                format!("{:?}", lv.shape()),
            ));
        }
        let n = lv.len();
        if let Some(s) = support {
            if s.len() != n {
                return Err(shape_err(
                    "softmax_cross_entropy support",
                    format!("{n} entries"),
                    format!("{}", s.len()),
                ));
            }
        }
        let inside = |i: usize| support.is_none_or(|s| s[i]);
        if target >= n || !inside(target) {
            return Err(NnError::InvalidTarget { target, len: n });
        }
        let probs = masked_softmax(lv.data(), support);
        let loss = -(probs[target] + LOG_EPSILON).ln();
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                target,
            },
            needs,
        ))
    }

    /// Sum over steps of the Euclidean distance between predicted points
    /// (a `1 x 2T` row laid out `x0, y0, x1, y1, ...`) and ground truth.
    /// Steps whose ground truth is `None` are excluded.
    pub fn step_distance_sum(&mut self, pred: Var, truth: &[Option<[f64; 2]>]) -> Result<Var, NnError> {
        let pv = self.value(pred);
        if pv.rows() != 1 || pv.cols() != 2 * truth.len() {
            return Err(shape_err(
                "step_distance_sum",
                format!("1x{}", 2 * truth.len()),
                format!("{:?}", pv.shape()),
            ));
        }
        let mut total = 0.0;
        let diffs: Vec<_> = truth
            .iter()
            .enumerate()
            .map(|(t, gt)| {
                gt.map(|g| {
                    let dx = pv.data()[2 * t] - g[0];
                    let dy = pv.data()[2 * t + 1] - g[1];
                    let norm = dx.hypot(dy);
                    total += norm;
                    (dx, dy, norm)
                })
            })
            .collect();
        let needs = self.needs(pred);
        Ok(self.push(Tensor::scalar(total), Op::StepDistance { pred, diffs }, needs))
    }

    /// `sum_i w_i * s_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var, NnError> {
        let mut total = 0.0;
        for &(v, w) in terms {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(shape_err(
                    "weighted_sum",
                    "scalar terms".into(),
                    format!("{:?}", t.shape()),
                ));
            }
            total += w * t.item();
        }
        let needs = terms.iter().any(|&(v, _)| self.needs(v));
        Ok(self.push(
            Tensor::scalar(total),
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
            needs,
        ))
    }

    /// `sum(x ⊙ weights)`; a convenient scalar probe for gradient checks.
    pub fn dot(&mut self, x: Var, weights: Tensor) -> Result<Var, NnError> {
        let xv = self.value(x);
        if xv.shape() != weights.shape() {
            return Err(shape_err(
                "dot",
                format!("{:?}", xv.shape()),
                format!("{:?}", weights.shape()),
            ));
        }
        let total = dot(xv.data(), weights.data());
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(total), Op::Dot { x, weights }, needs))
    }

    /// Back-propagates from the scalar `root`, adding `scale * d root / d p`
    /// into `grads` for every parameter `p` the pass touched.
    pub fn backward(&self, root: Var, grads: &mut Gradients, scale: f64) -> Result<(), NnError> {
        if self.value(root).len() != 1 {
            return Err(shape_err(
                "backward",
                "scalar root".into(),
                format!("{:?}", self.value(root).shape()),
            ));
        }
        let mut g: Vec<Option<Tensor>> = Vec::with_capacity(root.0 + 1);
        g.resize_with(root.0 + 1, || None);
        g[root.0] = Some(Tensor::scalar(scale));
        for idx in (0..=root.0).rev() {
            let Some(dy) = g[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, &dy, &mut g, grads);
        }
        Ok(())
    }

    fn slot<'g>(&self, g: &'g mut [Option<Tensor>], v: Var) -> &'g mut Tensor {
        let (r, c) = self.value(v).shape();
        g[v.0].get_or_insert_with(|| Tensor::zeros(r, c))
    }

    fn backprop_node(&self, node: &Node, dy: &Tensor, g: &mut [Option<Tensor>], grads: &mut Gradients) {
        match &node.op {
            Op::Input => {}
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.params.get(*w);
                let (rows, d_in, d_out) = (xv.rows(), wv.rows(), wv.cols());
                if self.needs(*x) {
                    let dx = self.slot(g, *x);
                    gemm(
                        rows,
                        d_out,
                        d_in,
                        1.0,
                        Operand::plain(dy.data(), d_out),
                        Operand::transposed(wv.data(), d_out),
                        1.0,
                        dx.data_mut(),
                    );
                }
                gemm(
                    d_in,
                    rows,
                    d_out,
                    1.0,
                    Operand::transposed(xv.data(), d_in),
                    Operand::plain(dy.data(), d_out),
                    1.0,
                    grads.get_mut(*w).data_mut(),
                );
                if let Some(b) = b {
                    let db = grads.get_mut(*b).data_mut();
                    for r in 0..rows {
                        for (acc, d) in db.iter_mut().zip(dy.row(r)) {
                            *acc += d;
                        }
                    }
                }
            }
            Op::Relu { x } => {
                let out = &node.value;
                let dx = self.slot(g, *x);
                for ((acc, d), o) in dx.data_mut().iter_mut().zip(dy.data()).zip(out.data()) {
                    if *o > 0.0 {
                        *acc += d;
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        self.slot(g, v).add_assign(dy);
                    }
                }
            }
            Op::Concat { a, b } => {
                let ca = self.value(*a).cols();
                if self.needs(*a) {
                    let da = self.slot(g, *a);
                    for r in 0..dy.rows() {
                        for (acc, d) in da.row_mut(r).iter_mut().zip(&dy.row(r)[..ca]) {
                            *acc += d;
                        }
                    }
                }
                if self.needs(*b) {
                    let db = self.slot(g, *b);
                    for r in 0..dy.rows() {
                        for (acc, d) in db.row_mut(r).iter_mut().zip(&dy.row(r)[ca..]) {
                            *acc += d;
                        }
                    }
                }
            }
            Op::MaskRows { x, keep } => {
                let dx = self.slot(g, *x);
                for (r, &k) in keep.iter().enumerate() {
                    if k {
                        for (acc, d) in dx.row_mut(r).iter_mut().zip(dy.row(r)) {
                            *acc += d;
                        }
                    }
                }
            }
            Op::GatherRows { x, index } => {
                let dx = self.slot(g, *x);
                for (o, &i) in index.iter().enumerate() {
                    for (acc, d) in dx.row_mut(i).iter_mut().zip(dy.row(o)) {
                        *acc += d;
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                keys,
                probs,
            } => self.backprop_attention((*q, *k, *v), *heads, *scale, keys, probs, dy, g),
            Op::SegmentMax { x, argmax } => {
                let d = dy.cols();
                let dx = self.slot(g, *x);
                for (idx, &src) in argmax.iter().enumerate() {
                    if src != usize::MAX {
                        let c = idx % d;
                        let row = idx / d;
                        let cur = dx.get(src, c);
                        dx.set(src, c, cur + dy.get(row, c));
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = dy.cols();
                let gv = self.params.get(*gamma).data().to_vec();
                {
                    let dg = grads.get_mut(*gamma).data_mut();
                    for r in 0..dy.rows() {
                        for c in 0..d {
                            dg[c] += dy.get(r, c) * xhat[r * d + c];
                        }
                    }
                }
                {
                    let db = grads.get_mut(*beta).data_mut();
                    for r in 0..dy.rows() {
                        for (acc, v) in db.iter_mut().zip(dy.row(r)) {
                            *acc += v;
                        }
                    }
                }
                if self.needs(*x) {
                    let dx = self.slot(g, *x);
                    let mut dxh = vec![0.0; d];
                    for r in 0..dy.rows() {
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..d {
                            dxh[c] = dy.get(r, c) * gv[c];
                            mean_d += dxh[c];
                            mean_dx += dxh[c] * xh[c];
                        }
                        mean_d /= d as f64;
                        mean_dx /= d as f64;
                        let row = dx.row_mut(r);
                        for c in 0..d {
                            row[c] += inv_std[r] * (dxh[c] - mean_d - xh[c] * mean_dx);
                        }
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                target,
            } => {
                // d/dz_j [-ln(p_t + eps)] = -(p_t / (p_t + eps)) * (δ_tj - p_j)
                let pt = probs[*target];
                let factor = dy.item() * pt / (pt + LOG_EPSILON);
                let dz = self.slot(g, *logits);
                for (j, (acc, p)) in dz.data_mut().iter_mut().zip(probs).enumerate() {
                    let delta = if j == *target { 1.0 } else { 0.0 };
                    *acc -= factor * (delta - p);
                }
            }
            Op::StepDistance { pred, diffs } => {
                let s = dy.item();
                let dp = self.slot(g, *pred);
                for (t, d) in diffs.iter().enumerate() {
                    if let Some((dx, dyy, norm)) = d {
                        if *norm > 0.0 {
                            dp.data_mut()[2 * t] += s * dx / norm;
                            dp.data_mut()[2 * t + 1] += s * dyy / norm;
                        }
                    }
                }
            }
            Op::WeightedSum { terms } => {
                let s = dy.item();
                for &(v, w) in terms {
                    if self.needs(v) {
                        self.slot(g, v).data_mut()[0] += s * w;
                    }
                }
            }
            Op::Dot { x, weights } => {
                let s = dy.item();
                let dx = self.slot(g, *x);
                for (acc, w) in dx.data_mut().iter_mut().zip(weights.data()) {
                    *acc += s * w;
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        (q, k, v): (Var, Var, Var),
        heads: usize,
        scale: f64,
        keys: &KeySets,
        probs: &[f64],
        dy: &Tensor,
        g: &mut [Option<Tensor>],
    ) {
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let d = qv.cols();
        let dh = d / heads;
        let mut dq = Tensor::zeros(qv.rows(), d);
        let mut dk = Tensor::zeros(kv.rows(), d);
        let mut dv = Tensor::zeros(vv.rows(), d);
        let mut dp = Vec::new();
        for i in 0..qv.rows() {
            let ks = keys.row(i);
            if ks.is_empty() {
                continue;
            }
            let base = keys.offsets[i];
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let dout = &dy.row(i)[cols.clone()];
                dp.clear();
                let mut weighted = 0.0;
                for (jj, &j) in ks.iter().enumerate() {
                    let p = probs[(base + jj) * heads + h];
                    let vh = &vv.row(j)[cols.clone()];
                    let dpj = dot(dout, vh);
                    weighted += p * dpj;
                    dp.push(dpj);
                    let dvh = &mut dv.row_mut(j)[cols.clone()];
                    for (acc, o) in dvh.iter_mut().zip(dout) {
                        *acc += p * o;
                    }
                }
                for (jj, &j) in ks.iter().enumerate() {
                    let p = probs[(base + jj) * heads + h];
                    let dlogit = scale * p * (dp[jj] - weighted);
                    if dlogit == 0.0 {
                        continue;
                    }
                    {
                        let kh = &kv.row(j)[cols.clone()];
                        let dqh = &mut dq.row_mut(i)[cols.clone()];
                        for (acc, kk) in dqh.iter_mut().zip(kh) {
                            *acc += dlogit * kk;
                        }
                    }
                    let qh = &qv.row(i)[cols.clone()];
                    let dkh = &mut dk.row_mut(j)[cols.clone()];
                    for (acc, qq) in dkh.iter_mut().zip(qh) {
                        *acc += dlogit * qq;
                    }
                }
            }
        }
        for (var, grad) in [(q, dq), (k, dk), (v, dv)] {
            if self.needs(var) {
                self.slot(g, var).add_assign(&grad);
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Softmax over the entries allowed by `support` (all when `None`);
/// excluded entries get probability exactly zero.
pub(crate) fn masked_softmax(logits: &[f64], support: Option<&[bool]>) -> Vec<f64> {
    let inside = |i: usize| support.is_none_or(|s| s[i]);
    let max = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| inside(*i))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(i, &v)| if inside(i) { (v - max).exp() } else { 0.0 })
        .collect();
    let sum: f64 = out.iter().sum();
    if sum > 0.0 {
        out.iter_mut().for_each(|p| *p /= sum);
    }
    out
}
