//! A small reverse-mode automatic differentiation tape over 2-D matrices.
//!
//! Every node stores its forward value. Operations are coarse (linear layer,
//! layer norm, fused multi-head attention, weighted cross-entropy) so that the
//! tape stays short and backward passes are plain matrix kernels.
//!
//! Fused attention works on a ragged batch: the query and key rows of every
//! sequence are contiguous row blocks ([`Segment`]), and the permitted
//! query/key pairs within a block are derived from per-row group labels
//! ([`MaskKind`]).

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, log_softmax_in_place, softmax_in_place, Matrix, View};

pub const LN_EPS: f64 = 1e-5;
pub const ROPE_BASE: f64 = 10_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which query/key pairs may attend to each other.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    Full,
    SameGroup,
    OppositeGroup,
}

impl MaskKind {
    #[inline]
    pub fn allows(self, gq: u8, gk: u8) -> bool {
        match self {
            MaskKind::Full => true,
            MaskKind::SameGroup => gq == gk,
            MaskKind::OppositeGroup => gq != gk,
        }
    }
}

/// Query rows `q_start..q_start+q_len` attend over key rows `k_start..k_start+k_len`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

#[derive(Clone, Debug)]
pub struct AttnLayout {
    pub segments: Vec<Segment>,
    pub q_groups: Vec<u8>,
    pub k_groups: Vec<u8>,
    pub mask: MaskKind,
    pub n_heads: usize,
}

impl AttnLayout {
    pub fn q_rows(&self) -> usize {
        self.q_groups.len()
    }

    pub fn k_rows(&self) -> usize {
        self.k_groups.len()
    }

    /// Same geometry with a different mask.
    pub fn with_mask(&self, mask: MaskKind) -> Self {
        Self {
            mask,
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregate {
    Mean,
    LogSumExp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Divergence {
    /// `KL(target ‖ student)`
    Forward,
    /// `KL(student ‖ target)`
    Reverse,
}

enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    LayerNorm {
        x: Var,
        affine: Option<(Var, Var)>,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Embed {
        table: Var,
        ids: Vec<u32>,
    },
    Rope {
        x: Var,
        positions: Arc<Vec<usize>>,
        n_heads: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: Arc<AttnLayout>,
        probs: Vec<Vec<Matrix>>,
    },
    GroupAggregate {
        x: Var,
        layout: Arc<AttnLayout>,
        mode: Aggregate,
    },
    WeightedCe {
        logits: Var,
        targets: Vec<u32>,
        weights: Vec<f64>,
    },
    Kl {
        logits: Var,
        targets: Matrix,
        weights: Vec<f64>,
        divergence: Divergence,
    },
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Records operations for one forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
    params: HashMap<ParamId, Var>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape that keeps what the backward pass needs.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            params: HashMap::new(),
        }
    }

    /// A tape for inference: attention probabilities are not retained.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar node");
        m.data()[0]
    }

    pub fn take_value(&mut self, v: Var) -> Matrix {
        std::mem::replace(&mut self.nodes[v.0].value, Matrix::zeros(0, 0))
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    /// `x + r` with `r` a `1×cols` row broadcast over all rows.
    pub fn add_row(&mut self, x: Var, r: Var) -> Var {
        let row = self.value(r);
        assert_eq!(row.rows(), 1);
        assert_eq!(row.cols(), self.value(x).cols());
        let row = row.data().to_vec();
        let mut out = self.value(x).clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(&row) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(x, r))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut out = self.value(x).clone();
        out.scale_assign(s);
        self.push(out, Op::Scale(x, s))
    }

    /// `x · w (+ b)`, with `w: in×out` and `b: 1×out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        assert_eq!(xv.cols(), wv.rows(), "linear shape mismatch");
        let (m, k, n) = (xv.rows(), xv.cols(), wv.cols());
        let mut out = match b {
            Some(b) => {
                let bv = self.value(b);
                assert_eq!(bv.shape(), (1, n));
                let mut o = Matrix::zeros(m, n);
                for i in 0..m {
                    o.row_mut(i).copy_from_slice(bv.data());
                }
                o
            }
            None => Matrix::zeros(m, n),
        };
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        gemm(
            m,
            k,
            n,
            1.0,
            View::of(xv),
            View::of(wv),
            beta,
            out.data_mut(),
            n,
        );
        self.push(out, Op::Linear { x, w, b })
    }

    /// Row-wise layer normalisation, optionally followed by `gain ⊙ · + bias`.
    pub fn layer_norm(&mut self, x: Var, affine: Option<(Var, Var)>) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut xhat = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for i in 0..rows {
            let r = xv.row(i);
            let mean = r.iter().sum::<f64>() / cols as f64;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for (o, v) in xhat.row_mut(i).iter_mut().zip(r) {
                *o = (v - mean) * is;
            }
        }
        let mut out = xhat.clone();
        if let Some((g, b)) = affine {
            let gv = self.value(g).data().to_vec();
            let bv = self.value(b).data().to_vec();
            for i in 0..rows {
                for ((o, g), b) in out.row_mut(i).iter_mut().zip(&gv).zip(&bv) {
                    *o = *o * g + b;
                }
            }
        }
        let saved = if self.grad_enabled {
            xhat
        } else {
            Matrix::zeros(0, 0)
        };
        self.push(
            out,
            Op::LayerNorm {
                x,
                affine,
                xhat: saved,
                inv_std,
            },
        )
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v = gelu(*v);
        }
        self.push(out, Op::Gelu(x))
    }

    /// Inverted dropout; identity when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let mut out = self.value(x).clone();
        let mask: Vec<f64> = (0..out.len())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        for (o, m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        self.push(out, Op::Dropout { x, mask })
    }

    /// Gathers `table` rows by id.
    pub fn embed(&mut self, table: Var, ids: &[u32]) -> Var {
        let tv = self.value(table);
        let mut out = Matrix::zeros(ids.len(), tv.cols());
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).copy_from_slice(tv.row(id as usize));
        }
        self.push(
            out,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Rotary position embedding on each head block (half-split pairing).
    pub fn rope(&mut self, x: Var, positions: Arc<Vec<usize>>, n_heads: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows(), positions.len(), "rope positions mismatch");
        let out = rope_apply(xv, &positions, n_heads, false);
        self.push(
            out,
            Op::Rope {
                x,
                positions,
                n_heads,
            },
        )
    }

    /// Multi-head scaled dot-product attention over a ragged batch.
    ///
    /// Query rows without any permitted key produce a zero output row.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: Arc<AttnLayout>) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        assert_eq!(qv.rows(), layout.q_rows());
        assert_eq!(kv.rows(), layout.k_rows());
        assert_eq!(vv.rows(), layout.k_rows());
        assert_eq!(qv.cols(), kv.cols());
        assert_eq!(qv.cols() % layout.n_heads, 0);
        let keep = self.grad_enabled;
        let parts: Vec<(Matrix, Vec<Matrix>)> = layout
            .segments
            .par_iter()
            .map(|seg| attention_segment(qv, kv, vv, &layout, seg, keep))
            .collect();
        let mut out = Matrix::zeros(qv.rows(), vv.cols());
        let mut probs = Vec::with_capacity(parts.len());
        for (seg, (local, p)) in layout.segments.iter().zip(parts) {
            let h = out.cols();
            out.data_mut()[seg.q_start * h..(seg.q_start + seg.q_len) * h]
                .copy_from_slice(local.data());
            probs.push(p);
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
        )
    }

    /// Row `i` of the output aggregates the key rows of its segment whose group
    /// differs from query `i`'s group (zero if there are none).
    pub fn group_aggregate(&mut self, x: Var, layout: Arc<AttnLayout>, mode: Aggregate) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows(), layout.k_rows());
        let h = xv.cols();
        let mut out = Matrix::zeros(layout.q_rows(), h);
        for seg in &layout.segments {
            let aggs = [0u8, 1u8].map(|g| aggregate_group(xv, &layout, seg, g, mode));
            for i in seg.q_start..seg.q_start + seg.q_len {
                let src = 1 - layout.q_groups[i].min(1);
                if let Some(a) = &aggs[src as usize] {
                    out.row_mut(i).copy_from_slice(a);
                }
            }
        }
        self.push(out, Op::GroupAggregate { x, layout, mode })
    }

    /// `Σ_i weights[i] · CE(logits_i, targets[i])`. Rows with zero weight are skipped.
    pub fn weighted_cross_entropy(&mut self, logits: Var, targets: &[u32], weights: &[f64]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len());
        assert_eq!(lv.rows(), weights.len());
        let mut total = 0.0;
        let mut row = vec![0.0; lv.cols()];
        for i in 0..lv.rows() {
            if weights[i] == 0.0 {
                continue;
            }
            row.copy_from_slice(lv.row(i));
            log_softmax_in_place(&mut row);
            total -= weights[i] * row[targets[i] as usize];
        }
        self.push(
            Matrix::from_vec(1, 1, vec![total]),
            Op::WeightedCe {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
        )
    }

    /// `Σ_i weights[i] · δ(target_i, softmax(logits_i))` where `targets` holds
    /// normalised log-probability rows.
    pub fn kl_divergence(
        &mut self,
        logits: Var,
        targets: Matrix,
        weights: &[f64],
        divergence: Divergence,
    ) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.shape(), targets.shape());
        assert_eq!(lv.rows(), weights.len());
        let mut total = 0.0;
        let mut logp = vec![0.0; lv.cols()];
        for i in 0..lv.rows() {
            if weights[i] == 0.0 {
                continue;
            }
            logp.copy_from_slice(lv.row(i));
            log_softmax_in_place(&mut logp);
            total += weights[i] * kl_row(targets.row(i), &logp, divergence);
        }
        self.push(
            Matrix::from_vec(1, 1, vec![total]),
            Op::Kl {
                logits,
                targets,
                weights: weights.to_vec(),
                divergence,
            },
        )
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert!(self.grad_enabled, "backward on an inference tape");
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf | Op::Param => {
                    grads[idx] = Some(g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow(x, r) => {
                    accumulate(&mut grads, *r, col_sum(&g));
                    accumulate(&mut grads, *x, g);
                }
                Op::Scale(x, s) => {
                    let mut g = g;
                    g.scale_assign(*s);
                    accumulate(&mut grads, *x, g);
                }
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (m, k, n) = (xv.rows(), xv.cols(), wv.cols());
                    if let Some(b) = b {
                        accumulate(&mut grads, *b, col_sum(&g));
                    }
                    let mut dw = Matrix::zeros(k, n);
                    gemm(k, m, n, 1.0, View::t(xv), View::of(&g), 0.0, dw.data_mut(), n);
                    accumulate(&mut grads, *w, dw);
                    let mut dx = Matrix::zeros(m, k);
                    gemm(m, n, k, 1.0, View::of(&g), View::t(wv), 0.0, dx.data_mut(), k);
                    accumulate(&mut grads, *x, dx);
                }
                Op::LayerNorm {
                    x,
                    affine,
                    xhat,
                    inv_std,
                } => {
                    let (rows, cols) = xhat.shape();
                    let mut dxhat = g.clone();
                    if let Some((gain, bias)) = affine {
                        let gv = self.value(*gain).data();
                        let mut dgain = Matrix::zeros(1, cols);
                        for i in 0..rows {
                            for j in 0..cols {
                                dgain.data_mut()[j] += g.get(i, j) * xhat.get(i, j);
                            }
                            for (d, gg) in dxhat.row_mut(i).iter_mut().zip(gv) {
                                *d *= gg;
                            }
                        }
                        accumulate(&mut grads, *bias, col_sum(&g));
                        accumulate(&mut grads, *gain, dgain);
                    }
                    let mut dx = Matrix::zeros(rows, cols);
                    let n = cols as f64;
                    for i in 0..rows {
                        let dh = dxhat.row(i);
                        let xh = xhat.row(i);
                        let s1: f64 = dh.iter().sum();
                        let s2: f64 = dh.iter().zip(xh).map(|(a, b)| a * b).sum();
                        let is = inv_std[i];
                        for ((o, d), h) in dx.row_mut(i).iter_mut().zip(dh).zip(xh) {
                            *o = is / n * (n * d - s1 - h * s2);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let mut dx = g;
                    for (d, v) in dx.data_mut().iter_mut().zip(xv.data()) {
                        *d *= gelu_grad(*v);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Dropout { x, mask } => {
                    let mut dx = g;
                    for (d, m) in dx.data_mut().iter_mut().zip(mask) {
                        *d *= m;
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Embed { table, ids } => {
                    let tv = self.value(*table);
                    let mut dt = Matrix::zeros(tv.rows(), tv.cols());
                    for (i, &id) in ids.iter().enumerate() {
                        for (d, v) in dt.row_mut(id as usize).iter_mut().zip(g.row(i)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::Rope {
                    x,
                    positions,
                    n_heads,
                } => {
                    let dx = rope_apply(&g, positions, *n_heads, true);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    layout,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let parts: Vec<(Matrix, Matrix, Matrix)> = layout
                        .segments
                        .par_iter()
                        .zip(probs.par_iter())
                        .map(|(seg, p)| attention_segment_backward(qv, kv, vv, &g, layout, seg, p))
                        .collect();
                    let h = qv.cols();
                    let mut dq = Matrix::zeros(qv.rows(), h);
                    let mut dk = Matrix::zeros(kv.rows(), h);
                    let mut dv = Matrix::zeros(vv.rows(), h);
                    for (seg, (lq, lk, lv)) in layout.segments.iter().zip(parts) {
                        add_block(&mut dq, seg.q_start, &lq);
                        add_block(&mut dk, seg.k_start, &lk);
                        add_block(&mut dv, seg.k_start, &lv);
                    }
                    accumulate(&mut grads, *v, dv);
                    accumulate(&mut grads, *k, dk);
                    accumulate(&mut grads, *q, dq);
                }
                Op::GroupAggregate { x, layout, mode } => {
                    let xv = self.value(*x);
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    group_aggregate_backward(xv, &g, layout, *mode, &mut dx);
                    accumulate(&mut grads, *x, dx);
                }
                Op::WeightedCe {
                    logits,
                    targets,
                    weights,
                } => {
                    let lv = self.value(*logits);
                    let up = g.data()[0];
                    let mut dl = Matrix::zeros(lv.rows(), lv.cols());
                    for i in 0..lv.rows() {
                        if weights[i] == 0.0 {
                            continue;
                        }
                        let row = dl.row_mut(i);
                        row.copy_from_slice(lv.row(i));
                        softmax_in_place(row);
                        row[targets[i] as usize] -= 1.0;
                        let s = up * weights[i];
                        row.iter_mut().for_each(|v| *v *= s);
                    }
                    accumulate(&mut grads, *logits, dl);
                }
                Op::Kl {
                    logits,
                    targets,
                    weights,
                    divergence,
                } => {
                    let lv = self.value(*logits);
                    let up = g.data()[0];
                    let mut dl = Matrix::zeros(lv.rows(), lv.cols());
                    let mut logp = vec![0.0; lv.cols()];
                    for i in 0..lv.rows() {
                        if weights[i] == 0.0 {
                            continue;
                        }
                        logp.copy_from_slice(lv.row(i));
                        log_softmax_in_place(&mut logp);
                        let t = targets.row(i);
                        let s = up * weights[i];
                        let row = dl.row_mut(i);
                        match divergence {
                            Divergence::Forward => {
                                for j in 0..row.len() {
                                    row[j] = s * (logp[j].exp() - t[j].exp());
                                }
                            }
                            Divergence::Reverse => {
                                let kl = kl_row(t, &logp, Divergence::Reverse);
                                for j in 0..row.len() {
                                    let p = logp[j].exp();
                                    let diff = if p > 0.0 { logp[j] - t[j] } else { 0.0 };
                                    row[j] = s * p * (diff - kl);
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *logits, dl);
                }
            }
        }
        Gradients {
            grads,
            params: self.params.clone(),
        }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Gradient per parameter of `store`, zero-filled for unused parameters.
    pub fn param_grads(mut self, store: &ParamStore) -> Vec<Matrix> {
        store
            .ids()
            .map(|id| {
                let (r, c) = store.get(id).shape();
                self.params
                    .get(&id)
                    .and_then(|v| self.grads[v.0].take())
                    .unwrap_or_else(|| Matrix::zeros(r, c))
            })
            .collect()
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn col_sum(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for i in 0..g.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(g.row(i)) {
            *o += v;
        }
    }
    out
}

fn add_block(dst: &mut Matrix, start: usize, block: &Matrix) {
    let h = dst.cols();
    for (d, s) in dst.data_mut()[start * h..(start + block.rows()) * h]
        .iter_mut()
        .zip(block.data())
    {
        *d += s;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn kl_row(target_logp: &[f64], student_logp: &[f64], divergence: Divergence) -> f64 {
    let mut kl = 0.0;
    match divergence {
        Divergence::Forward => {
            for (t, s) in target_logp.iter().zip(student_logp) {
                let q = t.exp();
                if q > 0.0 {
                    kl += q * (t - s);
                }
            }
        }
        Divergence::Reverse => {
            for (t, s) in target_logp.iter().zip(student_logp) {
                let p = s.exp();
                if p > 0.0 {
                    kl += p * (s - t);
                }
            }
        }
    }
    kl
}

/// Rotates each head block; `inverse` applies the transpose rotation.
fn rope_apply(x: &Matrix, positions: &[usize], n_heads: usize, inverse: bool) -> Matrix {
    let (rows, cols) = x.shape();
    let d = cols / n_heads;
    let half = d / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|m| ROPE_BASE.powf(-2.0 * m as f64 / d as f64))
        .collect();
    let mut out = x.clone();
    let sign = if inverse { -1.0 } else { 1.0 };
    for i in 0..rows {
        let p = positions[i] as f64;
        let (sin, cos): (Vec<f64>, Vec<f64>) = freqs.iter().map(|f| (p * f).sin_cos()).unzip();
        let src = x.row(i);
        let dst = out.row_mut(i);
        for h in 0..n_heads {
            let base = h * d;
            for m in 0..half {
                let a = src[base + m];
                let b = src[base + m + half];
                let s = sign * sin[m];
                dst[base + m] = a * cos[m] - b * s;
                dst[base + m + half] = a * s + b * cos[m];
            }
        }
    }
    out
}

fn attention_segment(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    layout: &AttnLayout,
    seg: &Segment,
    keep_probs: bool,
) -> (Matrix, Vec<Matrix>) {
    let h = q.cols();
    let hv = v.cols();
    let n_heads = layout.n_heads;
    let d = h / n_heads;
    let dv = hv / n_heads;
    let scale = 1.0 / (d as f64).sqrt();
    let (lq, lk) = (seg.q_len, seg.k_len);
    let mut out = Matrix::zeros(lq, hv);
    let mut saved = Vec::new();
    if lq == 0 {
        return (out, saved);
    }
    for head in 0..n_heads {
        let mut p = Matrix::zeros(lq, lk);
        if lk > 0 {
            gemm(
                lq,
                d,
                lk,
                scale,
                View::new(&q.data()[seg.q_start * h + head * d..], h, 1),
                View::new(&k.data()[seg.k_start * h + head * d..], 1, h),
                0.0,
                p.data_mut(),
                lk,
            );
        }
        for i in 0..lq {
            let gq = layout.q_groups[seg.q_start + i];
            let row = p.row_mut(i);
            if layout.mask != MaskKind::Full {
                for (j, s) in row.iter_mut().enumerate() {
                    if !layout.mask.allows(gq, layout.k_groups[seg.k_start + j]) {
                        *s = f64::NEG_INFINITY;
                    }
                }
            }
            softmax_in_place(row);
        }
        if lk > 0 {
            gemm(
                lq,
                lk,
                dv,
                1.0,
                View::of(&p),
                View::new(&v.data()[seg.k_start * hv + head * dv..], hv, 1),
                0.0,
                &mut out.data_mut()[head * dv..],
                hv,
            );
        }
        if keep_probs {
            saved.push(p);
        }
    }
    (out, saved)
}

fn attention_segment_backward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    g: &Matrix,
    layout: &AttnLayout,
    seg: &Segment,
    probs: &[Matrix],
) -> (Matrix, Matrix, Matrix) {
    let h = q.cols();
    let hv = v.cols();
    let n_heads = layout.n_heads;
    let d = h / n_heads;
    let dvh = hv / n_heads;
    let scale = 1.0 / (d as f64).sqrt();
    let (lq, lk) = (seg.q_len, seg.k_len);
    let mut dq = Matrix::zeros(lq, h);
    let mut dk = Matrix::zeros(lk, h);
    let mut dv = Matrix::zeros(lk, hv);
    if lq == 0 || lk == 0 {
        return (dq, dk, dv);
    }
    assert_eq!(probs.len(), n_heads, "attention probabilities were not kept");
    let g_seg = &g.data()[seg.q_start * hv..];
    for (head, p) in probs.iter().enumerate() {
        let go = View::new(&g_seg[head * dvh..], hv, 1);
        // dV = Pᵀ · dO
        gemm(
            lk,
            lq,
            dvh,
            1.0,
            View::t(p),
            go,
            0.0,
            &mut dv.data_mut()[head * dvh..],
            hv,
        );
        // dP = dO · Vᵀ
        let mut ds = Matrix::zeros(lq, lk);
        gemm(
            lq,
            dvh,
            lk,
            1.0,
            go,
            View::new(&v.data()[seg.k_start * hv + head * dvh..], 1, hv),
            0.0,
            ds.data_mut(),
            lk,
        );
        for i in 0..lq {
            let pr = p.row(i);
            let dr = ds.row_mut(i);
            let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
            for (x, pv) in dr.iter_mut().zip(pr) {
                *x = pv * (*x - dot);
            }
        }
        // dQ = scale · dS · K
        gemm(
            lq,
            lk,
            d,
            scale,
            View::of(&ds),
            View::new(&k.data()[seg.k_start * h + head * d..], h, 1),
            0.0,
            &mut dq.data_mut()[head * d..],
            h,
        );
        // dK = scale · dSᵀ · Q
        gemm(
            lk,
            lq,
            d,
            scale,
            View::t(&ds),
            View::new(&q.data()[seg.q_start * h + head * d..], h, 1),
            0.0,
            &mut dk.data_mut()[head * d..],
            h,
        );
    }
    (dq, dk, dv)
}

fn group_rows(layout: &AttnLayout, seg: &Segment, group: u8) -> Vec<usize> {
    (seg.k_start..seg.k_start + seg.k_len)
        .filter(|&j| layout.k_groups[j].min(1) == group)
        .collect()
}

fn aggregate_group(
    x: &Matrix,
    layout: &AttnLayout,
    seg: &Segment,
    group: u8,
    mode: Aggregate,
) -> Option<Vec<f64>> {
    let rows = group_rows(layout, seg, group);
    if rows.is_empty() {
        return None;
    }
    let h = x.cols();
    let mut agg = vec![0.0; h];
    match mode {
        Aggregate::Mean => {
            for &j in &rows {
                for (a, v) in agg.iter_mut().zip(x.row(j)) {
                    *a += v;
                }
            }
            let n = rows.len() as f64;
            agg.iter_mut().for_each(|a| *a /= n);
        }
        Aggregate::LogSumExp => {
            for (c, a) in agg.iter_mut().enumerate() {
                let max = rows
                    .iter()
                    .map(|&j| x.get(j, c))
                    .fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = rows.iter().map(|&j| (x.get(j, c) - max).exp()).sum();
                *a = max + s.ln();
            }
        }
    }
    Some(agg)
}

fn group_aggregate_backward(
    x: &Matrix,
    g: &Matrix,
    layout: &AttnLayout,
    mode: Aggregate,
    dx: &mut Matrix,
) {
    let h = x.cols();
    for seg in &layout.segments {
        for group in [0u8, 1u8] {
            // Upstream gradient of this group's aggregate = sum over the queries reading it.
            let mut up = vec![0.0; h];
            let mut any = false;
            for i in seg.q_start..seg.q_start + seg.q_len {
                if 1 - layout.q_groups[i].min(1) == group {
                    any = true;
                    for (u, v) in up.iter_mut().zip(g.row(i)) {
                        *u += v;
                    }
                }
            }
            let rows = group_rows(layout, seg, group);
            if !any || rows.is_empty() {
                continue;
            }
            match mode {
                Aggregate::Mean => {
                    let n = rows.len() as f64;
                    for &j in &rows {
                        for (d, u) in dx.row_mut(j).iter_mut().zip(&up) {
                            *d += u / n;
                        }
                    }
                }
                Aggregate::LogSumExp => {
                    for (c, u) in up.iter().enumerate() {
                        let max = rows
                            .iter()
                            .map(|&j| x.get(j, c))
                            .fold(f64::NEG_INFINITY, f64::max);
                        let s: f64 = rows.iter().map(|&j| (x.get(j, c) - max).exp()).sum();
                        for &j in &rows {
                            let w = (x.get(j, c) - max).exp() / s;
                            dx.data_mut()[j * h + c] += u * w;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of d(loss)/d(input) for a graph built by `f`.
    fn check_grad(input: Matrix, f: impl Fn(&mut Tape, Var) -> Var) {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let loss = f(&mut tape, x);
        let grads = tape.backward(loss);
        let analytic = grads.wrt(x).cloned().unwrap_or_else(|| Matrix::zeros(input.rows(), input.cols()));
        let eps = 1e-5;
        for idx in 0..input.len() {
            let eval = |delta: f64| {
                let mut m = input.clone();
                m.data_mut()[idx] += delta;
                let mut t = Tape::new();
                let x = t.constant(m);
                let l = f(&mut t, x);
                t.scalar(l)
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let a = analytic.data()[idx];
            assert!(
                (a - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()),
                "grad mismatch at {idx}: analytic {a} numeric {numeric}"
            );
        }
    }

    fn sum_weighted(t: &mut Tape, v: Var, seed: u64) -> Var {
        // Projects to a scalar with a fixed random readout.
        let (r, c) = t.value(v).shape();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = t.constant(rand_matrix(&mut rng, c, 3));
        let y = t.linear(v, w, None);
        let targets: Vec<u32> = (0..r).map(|i| (i % 3) as u32).collect();
        t.weighted_cross_entropy(y, &targets, &vec![1.0; r])
    }

    #[test]
    fn layer_norm_and_gelu_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = rand_matrix(&mut rng, 4, 6);
        let gain = rand_matrix(&mut rng, 1, 6);
        let bias = rand_matrix(&mut rng, 1, 6);
        check_grad(input, |t, x| {
            let g = t.constant(gain.clone());
            let b = t.constant(bias.clone());
            let y = t.layer_norm(x, Some((g, b)));
            let y = t.gelu(y);
            sum_weighted(t, y, 7)
        });
    }

    #[test]
    fn linear_and_rope_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let input = rand_matrix(&mut rng, 5, 8);
        let w = rand_matrix(&mut rng, 8, 8);
        let b = rand_matrix(&mut rng, 1, 8);
        let pos = Arc::new(vec![0, 3, 1, 7, 2]);
        check_grad(input, |t, x| {
            let w = t.constant(w.clone());
            let b = t.constant(b.clone());
            let y = t.linear(x, w, Some(b));
            let y = t.rope(y, pos.clone(), 2);
            sum_weighted(t, y, 3)
        });
    }

    fn layout(mask: MaskKind) -> Arc<AttnLayout> {
        Arc::new(AttnLayout {
            segments: vec![
                Segment { q_start: 0, q_len: 3, k_start: 0, k_len: 4 },
                Segment { q_start: 3, q_len: 2, k_start: 4, k_len: 2 },
            ],
            q_groups: vec![0, 1, 1, 0, 0],
            k_groups: vec![0, 0, 1, 1, 1, 1],
            mask,
            n_heads: 2,
        })
    }

    #[test]
    fn attention_gradients_all_inputs() {
        for mask in [MaskKind::Full, MaskKind::SameGroup, MaskKind::OppositeGroup] {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let q = rand_matrix(&mut rng, 5, 4);
            let k = rand_matrix(&mut rng, 6, 4);
            let v = rand_matrix(&mut rng, 6, 4);
            let lay = layout(mask);
            // wrt q
            check_grad(q.clone(), |t, x| {
                let kk = t.constant(k.clone());
                let vv = t.constant(v.clone());
                let y = t.attention(x, kk, vv, lay.clone());
                sum_weighted(t, y, 4)
            });
            // wrt k
            check_grad(k.clone(), |t, x| {
                let qq = t.constant(q.clone());
                let vv = t.constant(v.clone());
                let y = t.attention(qq, x, vv, lay.clone());
                sum_weighted(t, y, 4)
            });
            // wrt v
            check_grad(v.clone(), |t, x| {
                let qq = t.constant(q.clone());
                let kk = t.constant(k.clone());
                let y = t.attention(qq, kk, x, lay.clone());
                sum_weighted(t, y, 4)
            });
        }
    }

    #[test]
    fn rows_without_keys_attend_to_nothing() {
        let lay = Arc::new(AttnLayout {
            segments: vec![Segment { q_start: 0, q_len: 2, k_start: 0, k_len: 2 }],
            q_groups: vec![0, 0],
            k_groups: vec![0, 0],
            mask: MaskKind::OppositeGroup,
            n_heads: 1,
        });
        let mut t = Tape::new();
        let q = t.constant(Matrix::filled(2, 2, 1.0));
        let k = t.constant(Matrix::filled(2, 2, 1.0));
        let v = t.constant(Matrix::filled(2, 2, 5.0));
        let y = t.attention(q, k, v, lay);
        assert_eq!(t.value(y).data(), &[0.0; 4]);
    }

    #[test]
    fn group_aggregate_gradients() {
        for mode in [Aggregate::Mean, Aggregate::LogSumExp] {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let x = rand_matrix(&mut rng, 6, 4);
            let lay = layout(MaskKind::OppositeGroup);
            check_grad(x, |t, x| {
                let y = t.group_aggregate(x, lay.clone(), mode);
                sum_weighted(t, y, 9)
            });
        }
    }

    #[test]
    fn embed_and_kl_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let table = rand_matrix(&mut rng, 5, 4);
        let mut targets = rand_matrix(&mut rng, 3, 4);
        for i in 0..3 {
            log_softmax_in_place(targets.row_mut(i));
        }
        for div in [Divergence::Forward, Divergence::Reverse] {
            check_grad(table.clone(), |t, x| {
                let e = t.embed(x, &[1, 4, 1]);
                t.kl_divergence(e, targets.clone(), &[1.0, 0.5, 0.0], div)
            });
        }
    }

    #[test]
    fn add_row_scale_and_add_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let input = rand_matrix(&mut rng, 3, 4);
        let other = rand_matrix(&mut rng, 3, 4);
        check_grad(input.clone(), |t, x| {
            let r = t.constant(Matrix::filled(1, 4, 0.3));
            let o = t.constant(other.clone());
            let y = t.add_row(x, r);
            let y = t.add(y, o);
            let y = t.add(y, x);
            let y = t.scale(y, 0.7);
            sum_weighted(t, y, 2)
        });
        // gradient through the broadcast row itself
        check_grad(Matrix::filled(1, 4, 0.1), |t, r| {
            let x = t.constant(input.clone());
            let y = t.add_row(x, r);
            sum_weighted(t, y, 2)
        });
    }
}
