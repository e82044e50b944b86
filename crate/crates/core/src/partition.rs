//! The partition transformer.
//!
//! The encoder runs group-wise self-attention, so a position's hidden state
//! only depends on tokens of its own group. The GroupSwap layer and every
//! decoder block cross-attend from per-position queries to encoder rows of the
//! *opposite* group, and the decoder has no self-attention. As a result the
//! logits at a position depend only on tokens of the other group.
//!
//! At inference the clean tokens form one group and the positions to decode
//! form the other, so the encoder only sees clean tokens and the decoder only
//! runs at the requested positions. Training and inference share one graph
//! builder ([`PartitionTransformer::build`]); they differ only in which rows are
//! fed in.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Aggregate, AttnLayout, MaskKind, Segment, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Attention, Dropout, FeedForward, KeySource, LayerNorm, Linear};
use crate::params::{trunc_normal, ParamId, ParamStore, INIT_STD};
use crate::schedule::GroupAssignment;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QueryMode {
    #[default]
    DataIndependent,
    LogSumExp,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    #[serde(default)]
    pub query_mode: QueryMode,
    #[serde(default)]
    pub dropout_rate: f64,
    /// Number of class labels; 0 for an unconditional model.
    #[serde(default)]
    pub n_classes: usize,
}

impl PartitionConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_encoder_layers == 0 || self.n_decoder_layers == 0 {
            return fail("partition transformer needs at least one encoder and one decoder layer");
        }
        if self.n_heads == 0 || self.hidden_dim % self.n_heads != 0 {
            return fail("hidden_dim must be divisible by n_heads");
        }
        if self.hidden_dim % 2 != 0 {
            return fail("hidden_dim must be even");
        }
        if (self.hidden_dim / self.n_heads) % 2 != 0 {
            return fail("head dimension must be even for rotary embeddings");
        }
        if self.vocab_size < 2 {
            return fail("vocab_size must be at least 2");
        }
        if self.max_len == 0 {
            return fail("max_len must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail("dropout_rate must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Sinusoidal table: entry `(i, j)` is `cos(i / 10000^{2j/H})` for `j < H/2`
/// and `sin(i / 10000^{2j/H − 1})` otherwise.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Result<Matrix> {
    if dim % 2 != 0 {
        return Err(Error::Config(format!("sinusoidal dimension {dim} is odd")));
    }
    let h = dim as f64;
    let mut out = Matrix::zeros(len, dim);
    for i in 0..len {
        let p = i as f64;
        for j in 0..dim {
            let v = if j < dim / 2 {
                (p / 10_000f64.powf(2.0 * j as f64 / h)).cos()
            } else {
                (p / 10_000f64.powf(2.0 * j as f64 / h - 1.0)).sin()
            };
            out.set(i, j, v);
        }
    }
    Ok(out)
}

/// Mask type for [`build_group_attention_mask`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupMaskMode {
    SameGroup,
    OppositeGroup,
}

/// Dense boolean view of which positions may attend to which.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    pub allow: Vec<Vec<bool>>,
}

pub fn build_group_attention_mask(g: &GroupAssignment, mode: GroupMaskMode) -> Result<AttentionMask> {
    if g.is_empty() {
        return Err(Error::Argument("group assignment is empty".into()));
    }
    let s = g.as_slice();
    let allow = s
        .iter()
        .map(|&gi| {
            s.iter()
                .map(|&gj| match mode {
                    GroupMaskMode::SameGroup => gi == gj,
                    GroupMaskMode::OppositeGroup => gi != gj,
                })
                .collect()
        })
        .collect();
    Ok(AttentionMask { allow })
}

/// One sequence as seen by the graph builder.
#[derive(Clone, Debug)]
pub struct PartitionInput<'a> {
    pub enc_tokens: &'a [u32],
    pub enc_positions: &'a [usize],
    pub enc_groups: &'a [u8],
    pub query_positions: &'a [usize],
    pub query_groups: &'a [u8],
    pub class: Option<u32>,
}

/// One inference request: predict `decode_positions` from the clean tokens.
#[derive(Clone, Debug)]
pub struct PredictRequest<'a> {
    pub clean_tokens: &'a [u32],
    pub clean_positions: &'a [usize],
    pub decode_positions: &'a [usize],
    pub class: Option<u32>,
}

#[derive(Clone, Debug)]
struct Block {
    attn: Attention,
    ffn: FeedForward,
}

impl Block {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            attn: Attention::new(store, rng, &format!("{name}.attn"), dim, heads),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), dim),
        }
    }
}

#[derive(Debug)]
pub struct PartitionTransformer {
    config: PartitionConfig,
    params: ParamStore,
    tok_emb: ParamId,
    class_emb: Option<ParamId>,
    encoder: Vec<Block>,
    enc_norm: LayerNorm,
    query_u: ParamId,
    query_b: ParamId,
    query_w: Linear,
    swap: Block,
    decoder: Vec<Block>,
    out_norm: LayerNorm,
    head: Linear,
    sinusoid: Matrix,
    processed: AtomicU64,
}

impl Clone for PartitionTransformer {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            tok_emb: self.tok_emb,
            class_emb: self.class_emb,
            encoder: self.encoder.clone(),
            enc_norm: self.enc_norm.clone(),
            query_u: self.query_u,
            query_b: self.query_b,
            query_w: self.query_w.clone(),
            swap: self.swap.clone(),
            decoder: self.decoder.clone(),
            out_norm: self.out_norm.clone(),
            head: self.head.clone(),
            sinusoid: self.sinusoid.clone(),
            processed: AtomicU64::new(self.processed.load(Ordering::Relaxed)),
        }
    }
}

impl PartitionTransformer {
    /// Builds a freshly initialised model; identical seeds give identical weights.
    pub fn new(config: PartitionConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden_dim;
        let heads = config.n_heads;
        let mut store = ParamStore::new();
        let tok_emb = store.add("tok_emb", trunc_normal(&mut rng, config.vocab_size, h, INIT_STD));
        let class_emb = (config.n_classes > 0)
            .then(|| store.add("class_emb", trunc_normal(&mut rng, config.n_classes + 1, h, INIT_STD)));
        let encoder = (0..config.n_encoder_layers)
            .map(|i| Block::new(&mut store, &mut rng, &format!("encoder.{i}"), h, heads))
            .collect();
        let enc_norm = LayerNorm::new(&mut store, "encoder.norm", h);
        let query_u = store.add("query.u", trunc_normal(&mut rng, 1, h, INIT_STD));
        let query_b = store.add("query.b", Matrix::zeros(1, h));
        let query_w = Linear::new(&mut store, &mut rng, "query.w", h, h, false);
        let swap = Block::new(&mut store, &mut rng, "swap", h, heads);
        let decoder = (0..config.n_decoder_layers)
            .map(|i| Block::new(&mut store, &mut rng, &format!("decoder.{i}"), h, heads))
            .collect();
        let out_norm = LayerNorm::new(&mut store, "out.norm", h);
        let head = Linear::new(&mut store, &mut rng, "out.head", h, config.vocab_size, true);
        let sinusoid = sinusoidal_positions(config.max_len, h)?;
        Ok(Self {
            config,
            params: store,
            tok_emb,
            class_emb,
            encoder,
            enc_norm,
            query_u,
            query_b,
            query_w,
            swap,
            decoder,
            out_norm,
            head,
            sinusoid,
            processed: AtomicU64::new(0),
        })
    }

    /// Rebuilds the model around stored parameters (names and shapes must match).
    pub fn from_params(config: PartitionConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        check_layout(&model.params, &params)?;
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &PartitionConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Token positions pushed through the network by inference calls so far.
    pub fn positions_processed(&self) -> u64 {
        self.processed.load(Ordering::Relaxed)
    }

    pub fn reset_counter(&self) {
        self.processed.store(0, Ordering::Relaxed);
    }

    fn class_index(&self, class: Option<u32>) -> Result<Option<u32>> {
        match (self.class_emb, class) {
            (None, None) => Ok(None),
            (None, Some(_)) => Err(Error::Argument("model is not class-conditional".into())),
            (Some(_), None) => Ok(Some(self.config.n_classes as u32)),
            (Some(_), Some(c)) if (c as usize) < self.config.n_classes => Ok(Some(c)),
            (Some(_), Some(c)) => Err(Error::Argument(format!("class {c} out of range"))),
        }
    }

    /// Records the full network on `tape`; returns logits for every query row
    /// (rows ordered by input, then by query).
    pub fn build(&self, tape: &mut Tape, inputs: &[PartitionInput<'_>], drop: &mut Dropout) -> Result<Var> {
        let store = &self.params;
        let n_heads = self.config.n_heads;
        let mut enc_tokens = Vec::new();
        let mut enc_pos = Vec::new();
        let mut enc_groups = Vec::new();
        let mut q_pos = Vec::new();
        let mut q_groups = Vec::new();
        let mut enc_segments = Vec::with_capacity(inputs.len());
        let mut swap_segments = Vec::with_capacity(inputs.len());
        let mut enc_classes = Vec::new();
        let mut q_classes = Vec::new();
        for inp in inputs {
            let n = inp.enc_tokens.len();
            let m = inp.query_positions.len();
            if inp.enc_positions.len() != n || inp.enc_groups.len() != n || inp.query_groups.len() != m {
                return Err(Error::Argument("partition input lengths disagree".into()));
            }
            for &p in inp.enc_positions.iter().chain(inp.query_positions) {
                if p >= self.config.max_len {
                    return Err(Error::Config(format!(
                        "position {p} exceeds max_len {}",
                        self.config.max_len
                    )));
                }
            }
            if let Some(&tok) = inp.enc_tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
                return Err(Error::Validation(format!("token {tok} outside the vocabulary")));
            }
            let class = self.class_index(inp.class)?;
            let k_start = enc_tokens.len();
            let q_start = q_pos.len();
            enc_segments.push(Segment { q_start: k_start, q_len: n, k_start, k_len: n });
            swap_segments.push(Segment { q_start, q_len: m, k_start, k_len: n });
            enc_tokens.extend_from_slice(inp.enc_tokens);
            enc_pos.extend_from_slice(inp.enc_positions);
            enc_groups.extend(inp.enc_groups.iter().map(|g| g.min(&1)));
            q_pos.extend_from_slice(inp.query_positions);
            q_groups.extend(inp.query_groups.iter().map(|g| g.min(&1)));
            if let Some(c) = class {
                enc_classes.extend(std::iter::repeat(c).take(n));
                q_classes.extend(std::iter::repeat(c).take(m));
            }
        }
        let enc_pos = Arc::new(enc_pos);
        let q_pos = Arc::new(q_pos);
        let enc_layout = Arc::new(AttnLayout {
            segments: enc_segments,
            q_groups: enc_groups.clone(),
            k_groups: enc_groups.clone(),
            mask: MaskKind::SameGroup,
            n_heads,
        });
        let swap_layout = Arc::new(AttnLayout {
            segments: swap_segments,
            q_groups,
            k_groups: enc_groups,
            mask: MaskKind::OppositeGroup,
            n_heads,
        });

        // Encoder: group-wise self-attention.
        let emb = tape.param(store, self.tok_emb);
        let mut h = tape.embed(emb, &enc_tokens);
        if let Some(ce) = self.class_emb {
            let table = tape.param(store, ce);
            let c = tape.embed(table, &enc_classes);
            h = tape.add(h, c);
        }
        h = drop.apply(tape, h);
        for block in &self.encoder {
            h = block.attn.self_attend(tape, store, h, &enc_pos, &enc_layout, drop);
            h = block.ffn.forward(tape, store, h, drop);
        }
        let enc = self.enc_norm.forward(tape, store, h);
        let keys = KeySource {
            x: enc,
            positions: enc_pos,
        };

        // GroupSwap queries: W [LN(u + pos_i) + b] (+ opposite-group aggregate).
        let pos_rows = tape.constant(self.sinusoid.select_rows(&q_pos));
        let u = tape.param(store, self.query_u);
        let b = tape.param(store, self.query_b);
        let x0 = tape.add_row(pos_rows, u);
        let n0 = tape.layer_norm(x0, None);
        let n0 = tape.add_row(n0, b);
        let mut s = self.query_w.forward(tape, store, n0);
        if let Some(ce) = self.class_emb {
            let table = tape.param(store, ce);
            let c = tape.embed(table, &q_classes);
            s = tape.add(s, c);
        }
        match self.config.query_mode {
            QueryMode::DataIndependent => {}
            QueryMode::Mean => {
                let y = tape.group_aggregate(enc, swap_layout.clone(), Aggregate::Mean);
                s = tape.add(s, y);
            }
            QueryMode::LogSumExp => {
                let y = tape.group_aggregate(enc, swap_layout.clone(), Aggregate::LogSumExp);
                s = tape.add(s, y);
            }
        }

        // GroupSwap, then the self-attention-free decoder.
        for block in std::iter::once(&self.swap).chain(&self.decoder) {
            s = block.attn.cross_attend(tape, store, s, &q_pos, &keys, &swap_layout, drop);
            s = block.ffn.forward(tape, store, s, drop);
        }
        let s = self.out_norm.forward(tape, store, s);
        Ok(self.head.forward(tape, store, s))
    }

    /// GroupSwap query rows for one sequence, exposed for inspection.
    pub fn groupswap_queries(&self, g: &GroupAssignment, encoder_out: Option<&Matrix>) -> Result<Matrix> {
        let h = self.config.hidden_dim;
        let len = g.len();
        let positions: Vec<usize> = (0..len).collect();
        let params = QueryInit {
            u: self.params.get(self.query_u).clone(),
            w: self.params.get(self.query_w.w).clone(),
            b: self.params.get(self.query_b).clone(),
        };
        if len > self.config.max_len {
            return Err(Error::Config("sequence longer than max_len".into()));
        }
        let pos = self.sinusoid.select_rows(&positions);
        debug_assert_eq!(pos.cols(), h);
        groupswap_queries(g, self.config.query_mode, encoder_out, &params, &pos)
    }

    /// Logits at every position; position `i` only sees tokens `j` with `g_j ≠ g_i`.
    pub fn forward_train(&self, x: &[u32], g: &GroupAssignment) -> Result<Matrix> {
        let mut out = self.forward_train_batch(&[x], &[g.clone()], &[None])?;
        Ok(out.remove(0))
    }

    pub fn forward_train_batch(
        &self,
        xs: &[&[u32]],
        gs: &[GroupAssignment],
        classes: &[Option<u32>],
    ) -> Result<Vec<Matrix>> {
        let mut tape = Tape::inference();
        let logits = self.train_graph(&mut tape, xs, gs, classes, &mut Dropout::off())?;
        let m = tape.take_value(logits);
        Ok(split_rows(&m, xs.iter().map(|x| x.len())))
    }

    /// Training graph over full sequences.
    pub fn train_graph(
        &self,
        tape: &mut Tape,
        xs: &[&[u32]],
        gs: &[GroupAssignment],
        classes: &[Option<u32>],
        drop: &mut Dropout,
    ) -> Result<Var> {
        if xs.len() != gs.len() || xs.len() != classes.len() {
            return Err(Error::Argument("batch components disagree in length".into()));
        }
        let positions: Vec<Vec<usize>> = xs.iter().map(|x| (0..x.len()).collect()).collect();
        let mut inputs = Vec::with_capacity(xs.len());
        for (i, x) in xs.iter().enumerate() {
            if gs[i].len() != x.len() {
                return Err(Error::Argument("group assignment length differs from sequence".into()));
            }
            if x.len() > self.config.max_len {
                return Err(Error::Config(format!(
                    "sequence length {} exceeds max_len {}",
                    x.len(),
                    self.config.max_len
                )));
            }
            inputs.push(PartitionInput {
                enc_tokens: x,
                enc_positions: &positions[i],
                enc_groups: gs[i].as_slice(),
                query_positions: &positions[i],
                query_groups: gs[i].as_slice(),
                class: classes[i],
            });
        }
        self.build(tape, &inputs, drop)
    }

    /// Logits at `decode_positions` given the clean tokens only.
    pub fn predict(&self, x_clean: &[u32], clean_positions: &[usize], decode_positions: &[usize]) -> Result<Matrix> {
        let mut out = self.predict_batch(&[PredictRequest {
            clean_tokens: x_clean,
            clean_positions,
            decode_positions,
            class: None,
        }])?;
        Ok(out.remove(0))
    }

    pub fn predict_batch(&self, requests: &[PredictRequest<'_>]) -> Result<Vec<Matrix>> {
        let mut tape = Tape::inference();
        let logits = self.predict_graph(&mut tape, requests, &mut Dropout::off())?;
        let m = tape.take_value(logits);
        Ok(split_rows(&m, requests.iter().map(|r| r.decode_positions.len())))
    }

    /// Inference graph: clean rows in group 0, decode rows in group 1.
    pub fn predict_graph(&self, tape: &mut Tape, requests: &[PredictRequest<'_>], drop: &mut Dropout) -> Result<Var> {
        let zeros = vec![0u8; requests.iter().map(|r| r.clean_positions.len()).max().unwrap_or(0)];
        let ones = vec![1u8; requests.iter().map(|r| r.decode_positions.len()).max().unwrap_or(0)];
        let mut inputs = Vec::with_capacity(requests.len());
        let mut processed = 0u64;
        for r in requests {
            validate_request(r, self.config.max_len)?;
            processed += (r.clean_positions.len() + r.decode_positions.len()) as u64;
            inputs.push(PartitionInput {
                enc_tokens: r.clean_tokens,
                enc_positions: r.clean_positions,
                enc_groups: &zeros[..r.clean_positions.len()],
                query_positions: r.decode_positions,
                query_groups: &ones[..r.decode_positions.len()],
                class: r.class,
            });
        }
        let out = self.build(tape, &inputs, drop)?;
        self.processed.fetch_add(processed, Ordering::Relaxed);
        Ok(out)
    }
}

fn validate_request(r: &PredictRequest<'_>, max_len: usize) -> Result<()> {
    if r.clean_tokens.len() != r.clean_positions.len() {
        return Err(Error::Argument("clean tokens and positions differ in length".into()));
    }
    if r.decode_positions.is_empty() {
        return Err(Error::Argument("decode position set is empty".into()));
    }
    let mut seen = vec![false; max_len];
    for &p in r.clean_positions.iter().chain(r.decode_positions) {
        if p >= max_len {
            return Err(Error::Argument(format!("position {p} exceeds max_len {max_len}")));
        }
        if seen[p] {
            return Err(Error::Argument(format!("position {p} appears more than once")));
        }
        seen[p] = true;
    }
    Ok(())
}

pub(crate) fn split_rows(m: &Matrix, lens: impl Iterator<Item = usize>) -> Vec<Matrix> {
    let mut start = 0;
    lens.map(|n| {
        let part = m.slice_rows(start, n);
        start += n;
        part
    })
    .collect()
}

pub(crate) fn check_layout(expected: &ParamStore, got: &ParamStore) -> Result<()> {
    if expected.len() != got.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {}",
            expected.len(),
            got.len()
        )));
    }
    for ((en, ev), (gn, gv)) in expected.iter().zip(got.iter()) {
        if en != gn || ev.shape() != gv.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor mismatch: expected {en} {:?}, found {gn} {:?}",
                ev.shape(),
                gv.shape()
            )));
        }
    }
    Ok(())
}

/// Learned GroupSwap query parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryInit {
    /// `1×H`
    pub u: Matrix,
    /// `H×H`, applied on the right (`row · W`).
    pub w: Matrix,
    /// `1×H`
    pub b: Matrix,
}

/// Reference evaluation of the GroupSwap queries for one sequence.
///
/// `V_i = W [LN(u + pos_i) + b]`; data-dependent modes add the aggregate of the
/// encoder rows of the opposite group.
pub fn groupswap_queries(
    g: &GroupAssignment,
    mode: QueryMode,
    encoder_out: Option<&Matrix>,
    params: &QueryInit,
    pos: &Matrix,
) -> Result<Matrix> {
    let len = g.len();
    let needs_enc = mode != QueryMode::DataIndependent;
    if needs_enc && encoder_out.is_none() {
        return Err(Error::Argument("data-dependent queries need the encoder output".into()));
    }
    let mut tape = Tape::inference();
    let p = tape.constant(pos.clone());
    let u = tape.constant(params.u.clone());
    let b = tape.constant(params.b.clone());
    let w = tape.constant(params.w.clone());
    let x0 = tape.add_row(p, u);
    let n0 = tape.layer_norm(x0, None);
    let n0 = tape.add_row(n0, b);
    let mut v = tape.linear(n0, w, None);
    if needs_enc {
        let enc = encoder_out.expect("checked above");
        if enc.rows() != len {
            return Err(Error::Argument("encoder output rows differ from sequence length".into()));
        }
        let layout = Arc::new(AttnLayout {
            segments: vec![Segment { q_start: 0, q_len: len, k_start: 0, k_len: len }],
            q_groups: g.as_slice().to_vec(),
            k_groups: g.as_slice().to_vec(),
            mask: MaskKind::OppositeGroup,
            n_heads: 1,
        });
        let e = tape.constant(enc.clone());
        let agg = if mode == QueryMode::Mean { Aggregate::Mean } else { Aggregate::LogSumExp };
        let y = tape.group_aggregate(e, layout, agg);
        v = tape.add(v, y);
    }
    Ok(tape.take_value(v))
}
