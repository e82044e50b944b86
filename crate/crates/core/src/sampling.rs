//! Samplers for both model families plus the shared categorical machinery.
//!
//! Every sampler is batched: it advances `batch` independent sequences in
//! lock-step with one model call per step and returns one trace per sequence.

use std::collections::VecDeque;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Binomial, Distribution, Gumbel};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::halton::halton_sequence_order;
use crate::model::{DecodeQuery, Denoiser};
use crate::schedule::NoiseSchedule;
use crate::tensor::{softmax_in_place, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    /// Posterior ancestral sampling from an all-mask start.
    Ancestral,
    /// A random order consumed a fixed number of positions per step.
    FixedK,
    /// Binomial per-step counts matching ancestral sampling.
    MdlmEquivalent,
    /// Keeps the most confident proposals on a cosine budget.
    Confidence,
    /// Fixed-k decoding in Halton order.
    Halton,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleOptions {
    pub schedule: NoiseSchedule,
    pub class: Option<u32>,
    /// Guidance weight `ω`; 0 disables the unconditional pass.
    pub guidance: f64,
    pub nucleus_p: Option<f64>,
    /// Token fixed at position 0 by the fixed-order samplers.
    pub bos: Option<u32>,
    /// Gumbel noise scale on confidences; 0 disables it.
    pub confidence_temperature: f64,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            schedule: NoiseSchedule::linear(),
            class: None,
            guidance: 0.0,
            nucleus_p: None,
            bos: None,
            confidence_temperature: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub positions: Vec<usize>,
    pub tokens: Vec<u32>,
    /// Clean positions the model conditioned on.
    pub n_clean: usize,
    /// Token positions pushed through the network for this sequence.
    pub positions_processed: u64,
    /// Wall time of the whole batched step.
    pub ms: f64,
    pub model_calls: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleTrace {
    pub seq_len: usize,
    pub initial_clean: Vec<usize>,
    pub steps: Vec<StepRecord>,
    pub tokens: Vec<u32>,
}

impl SampleTrace {
    pub fn positions_processed(&self) -> u64 {
        self.steps.iter().map(|s| s.positions_processed).sum()
    }

    pub fn model_calls(&self) -> usize {
        self.steps.iter().map(|s| s.model_calls).sum()
    }

    pub fn clean_sizes(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.n_clean).collect()
    }

    pub fn decode_sizes(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.positions.len()).collect()
    }

    /// Decoded sets are disjoint and, with the initial clean set, cover every position.
    pub fn validate(&self, vocab: usize) -> Result<()> {
        let mut seen = vec![false; self.seq_len];
        for &p in self.initial_clean.iter().chain(self.steps.iter().flat_map(|s| &s.positions)) {
            if p >= self.seq_len || std::mem::replace(&mut seen[p], true) {
                return Err(Error::Validation(format!("position {p} decoded twice or out of range")));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Validation("some positions were never decoded".into()));
        }
        if self.tokens.len() != self.seq_len || self.tokens.iter().any(|&t| t as usize >= vocab) {
            return Err(Error::Validation("final sequence holds non-data tokens".into()));
        }
        Ok(())
    }

    /// `step,n_decoded,positions_processed,ms`
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(["step", "n_decoded", "positions_processed", "ms"])
            .map_err(|e| csv_err(path, e))?;
        for s in &self.steps {
            w.write_record([
                s.step.to_string(),
                s.positions.len().to_string(),
                s.positions_processed.to_string(),
                format!("{:.3}", s.ms),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

/// `(1 + ω) · cond − ω · uncond`, elementwise on log-probabilities.
pub fn cfg_combine(cond: &Matrix, uncond: &Matrix, omega: f64) -> Result<Matrix> {
    if cond.shape() != uncond.shape() {
        return Err(Error::Argument("guidance inputs differ in shape".into()));
    }
    if !(omega >= 0.0) {
        return Err(Error::Argument("guidance weight must be nonnegative".into()));
    }
    if omega == 0.0 {
        return Ok(cond.clone());
    }
    let data = cond
        .data()
        .iter()
        .zip(uncond.data())
        .map(|(&c, &u)| if c == u || !u.is_finite() { c } else { (1.0 + omega) * c - omega * u })
        .collect();
    Ok(Matrix::from_vec(cond.rows(), cond.cols(), data))
}

/// Keeps the largest descending-probability prefix whose mass stays within
/// `p` (never fewer than the top token) and renormalises. `p ≥ 1` is the identity.
pub fn nucleus_filter(probs: &[f64], p: f64) -> Result<Vec<f64>> {
    if !(p > 0.0) {
        return Err(Error::Argument("nucleus threshold must be positive".into()));
    }
    if p >= 1.0 {
        return Ok(probs.to_vec());
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut keep = vec![false; probs.len()];
    let mut mass = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if rank > 0 && mass + probs[i] > p + 1e-12 {
            break;
        }
        mass += probs[i];
        keep[i] = true;
    }
    let inv = 1.0 / mass;
    Ok(probs
        .iter()
        .zip(&keep)
        .map(|(&q, &k)| if k { q * inv } else { 0.0 })
        .collect())
}

/// Inverse-CDF draw from an unnormalised probability vector; one uniform per call.
pub fn sample_probs<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> Result<u32> {
    let total: f64 = probs.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::Sampling("distribution has no mass".into()));
    }
    let u = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for (i, &q) in probs.iter().enumerate() {
        acc += q;
        if u < acc {
            return Ok(i as u32);
        }
    }
    Ok(probs.iter().rposition(|&q| q > 0.0).unwrap_or(0) as u32)
}

/// Stable softmax in `f64` followed by an inverse-CDF draw.
pub fn categorical_sample<R: Rng + ?Sized>(logits: &[f64], rng: &mut R) -> Result<u32> {
    if logits.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::Sampling("logits must be finite or -inf".into()));
    }
    if logits.iter().all(|&v| v == f64::NEG_INFINITY) {
        return Err(Error::Sampling("every logit is -inf".into()));
    }
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    sample_probs(&p, rng)
}

/// Samples from guided log-probabilities with optional nucleus filtering.
pub fn sample_row<R: Rng + ?Sized>(logits: &[f64], nucleus_p: Option<f64>, rng: &mut R) -> Result<u32> {
    match nucleus_p {
        None => categorical_sample(logits, rng),
        Some(p) => {
            if logits.iter().all(|&v| v == f64::NEG_INFINITY) {
                return Err(Error::Sampling("every logit is -inf".into()));
            }
            let mut probs = logits.to_vec();
            softmax_in_place(&mut probs);
            sample_probs(&nucleus_filter(&probs, p)?, rng)
        }
    }
}

/// Reverse-process transition for one position from `t` to `s < t`, over
/// `N + 1` outcomes (the last is the mask). Clean positions stay put.
pub fn posterior_probs(
    x_theta: &[f64],
    z: u32,
    mask_id: u32,
    s: f64,
    t: f64,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    let n = x_theta.len();
    let mut out = vec![0.0; n + 1];
    if z != mask_id {
        *out.get_mut(z as usize)
            .ok_or_else(|| Error::Argument(format!("token {z} outside the vocabulary")))? = 1.0;
        return Ok(out);
    }
    let p = schedule.unmask_prob(s, t)?;
    for (o, &q) in out.iter_mut().zip(x_theta) {
        *o = p * q;
    }
    out[n] = 1.0 - p;
    Ok(out)
}

/// Per-step model predictions (guided when `ω > 0`) for a batch of queries.
fn predict(
    model: &dyn Denoiser,
    seq_len: usize,
    queries: &[(Vec<usize>, Vec<u32>, Vec<usize>)],
    opts: &SampleOptions,
) -> Result<(Vec<Matrix>, usize)> {
    let make = |class| {
        queries
            .iter()
            .map(|(cp, ct, dp)| DecodeQuery {
                clean_positions: cp,
                clean_tokens: ct,
                decode_positions: dp,
                class,
            })
            .collect::<Vec<_>>()
    };
    let cond = model.log_probs(seq_len, &make(opts.class))?;
    if opts.guidance == 0.0 {
        return Ok((cond, 1));
    }
    if model.n_classes() == 0 || opts.class.is_none() {
        return Err(Error::Argument("guidance needs a class-conditional model and a class".into()));
    }
    let uncond = model.log_probs(seq_len, &make(None))?;
    let guided = cond
        .iter()
        .zip(&uncond)
        .map(|(c, u)| cfg_combine(c, u, opts.guidance))
        .collect::<Result<Vec<_>>>()?;
    Ok((guided, 2))
}

fn check_len(model: &dyn Denoiser, seq_len: usize, steps: usize, batch: usize) -> Result<()> {
    if steps == 0 {
        return Err(Error::Argument("at least one step is required".into()));
    }
    if batch == 0 {
        return Err(Error::Argument("batch must be at least 1".into()));
    }
    if seq_len == 0 || seq_len > model.max_len() {
        return Err(Error::Argument(format!(
            "sequence length {seq_len} outside 1..={}",
            model.max_len()
        )));
    }
    Ok(())
}

/// Per-row sampling state shared by the samplers.
struct Row {
    tokens: Vec<Option<u32>>,
    clean: Vec<usize>,
    trace: SampleTrace,
}

impl Row {
    fn new(seq_len: usize, initial: &[(usize, u32)]) -> Self {
        let mut tokens = vec![None; seq_len];
        for &(p, t) in initial {
            tokens[p] = Some(t);
        }
        let clean: Vec<usize> = initial.iter().map(|&(p, _)| p).collect();
        Self {
            tokens,
            trace: SampleTrace {
                seq_len,
                initial_clean: clean.clone(),
                steps: Vec::new(),
                tokens: Vec::new(),
            },
            clean,
        }
    }

    fn query(&self, decode: Vec<usize>) -> (Vec<usize>, Vec<u32>, Vec<usize>) {
        let ct = self.clean.iter().map(|&p| self.tokens[p].expect("clean")).collect();
        (self.clean.clone(), ct, decode)
    }

    fn commit(&mut self, step: usize, decoded: Vec<(usize, u32)>, processed: u64, calls: usize) {
        let n_clean = self.clean.len();
        for &(p, t) in &decoded {
            debug_assert!(self.tokens[p].is_none());
            self.tokens[p] = Some(t);
            self.clean.push(p);
        }
        self.trace.steps.push(StepRecord {
            step,
            positions: decoded.iter().map(|d| d.0).collect(),
            tokens: decoded.iter().map(|d| d.1).collect(),
            n_clean,
            positions_processed: processed,
            ms: 0.0,
            model_calls: calls,
        });
    }

    fn finish(mut self) -> Result<SampleTrace> {
        self.trace.tokens = self
            .tokens
            .iter()
            .map(|t| t.ok_or_else(|| Error::Sampling("sampler left a masked position".into())))
            .collect::<Result<_>>()?;
        Ok(self.trace)
    }
}

fn cost(model: &dyn Denoiser, seq_len: usize, n_clean: usize, n_decode: usize, calls: usize) -> u64 {
    let per_call = match model.kind() {
        crate::mdlm::ModelKind::Mdlm => seq_len,
        crate::mdlm::ModelKind::Pgm => n_clean + n_decode,
    };
    (per_call * calls) as u64
}

fn stamp(rows: &mut [Row], started: Instant) {
    let ms = started.elapsed().as_secs_f64() * 1e3;
    for r in rows {
        if let Some(s) = r.trace.steps.last_mut() {
            s.ms = ms;
        }
    }
}

fn initial(opts: &SampleOptions) -> Vec<(usize, u32)> {
    opts.bos.map(|b| vec![(0, b)]).unwrap_or_default()
}

/// Ancestral sampling with the reverse-process posterior on a uniform time grid.
/// Starts all-mask (position 0 fixed to `bos` if set); the model is called at every step.
pub fn mdlm_ancestral_sample<R: Rng + ?Sized>(
    model: &dyn Denoiser,
    seq_len: usize,
    steps: usize,
    batch: usize,
    opts: &SampleOptions,
    rng: &mut R,
) -> Result<Vec<SampleTrace>> {
    check_len(model, seq_len, steps, batch)?;
    let mut rows: Vec<Row> = (0..batch).map(|_| Row::new(seq_len, &initial(opts))).collect();
    for step in 0..steps {
        let t = (steps - step) as f64 / steps as f64;
        let s = (steps - step - 1) as f64 / steps as f64;
        let p = opts.schedule.unmask_prob(s, t)?;
        let started = Instant::now();
        let decode: Vec<Vec<usize>> = rows
            .iter()
            .map(|r| {
                (0..seq_len)
                    .filter(|&i| r.tokens[i].is_none())
                    .filter(|_| rng.gen::<f64>() < p)
                    .collect()
            })
            .collect();
        let queries: Vec<_> = rows.iter().zip(&decode).map(|(r, d)| r.query(d.clone())).collect();
        let (lp, calls) = predict(model, seq_len, &queries, opts)?;
        for ((row, d), m) in rows.iter_mut().zip(decode).zip(&lp) {
            let decoded = d
                .iter()
                .enumerate()
                .map(|(j, &pos)| Ok((pos, sample_row(m.row(j), opts.nucleus_p, rng)?)))
                .collect::<Result<Vec<_>>>()?;
            let processed = cost(model, seq_len, row.clean.len(), decoded.len(), calls);
            row.commit(step, decoded, processed, calls);
        }
        stamp(&mut rows, started);
    }
    rows.into_iter().map(Row::finish).collect()
}

/// Consumes each row's `order` in chunks of `⌈|order| / steps⌉`, the last
/// chunk taking the remainder.
fn sample_in_order<R: Rng + ?Sized>(
    model: &dyn Denoiser,
    seq_len: usize,
    steps: usize,
    orders: &[Vec<usize>],
    opts: &SampleOptions,
    rng: &mut R,
) -> Result<Vec<SampleTrace>> {
    let init = initial(opts);
    let n = orders.first().map_or(0, Vec::len);
    if orders.iter().any(|o| o.len() != n) {
        return Err(Error::Argument("decode orders differ in length".into()));
    }
    if steps > n {
        return Err(Error::Argument(format!("{steps} steps exceed the {n} positions to decode")));
    }
    let k = n.div_ceil(steps);
    let mut rows: Vec<Row> = orders.iter().map(|_| Row::new(seq_len, &init)).collect();
    for (step, start) in (0..n).step_by(k).enumerate() {
        let started = Instant::now();
        let end = (start + k).min(n);
        let queries: Vec<_> = rows
            .iter()
            .zip(orders)
            .map(|(r, o)| r.query(o[start..end].to_vec()))
            .collect();
        let (lp, calls) = predict(model, seq_len, &queries, opts)?;
        for ((row, o), m) in rows.iter_mut().zip(orders).zip(&lp) {
            let decoded = o[start..end]
                .iter()
                .enumerate()
                .map(|(j, &pos)| Ok((pos, sample_row(m.row(j), opts.nucleus_p, rng)?)))
                .collect::<Result<Vec<_>>>()?;
            let processed = cost(model, seq_len, row.clean.len(), decoded.len(), calls);
            row.commit(step, decoded, processed, calls);
        }
        stamp(&mut rows, started);
    }
    rows.into_iter().map(Row::finish).collect()
}

fn remaining_positions(seq_len: usize, opts: &SampleOptions) -> Vec<usize> {
    let start = usize::from(opts.bos.is_some());
    (start..seq_len).collect()
}

/// Fixed-k sampling: a uniformly random order of the non-BOS positions is
/// decoded `⌈(L − 1) / K⌉` positions per step.
pub fn pgm_sample_simple<R: Rng + ?Sized>(
    model: &dyn Denoiser,
    seq_len: usize,
    steps: usize,
    batch: usize,
    opts: &SampleOptions,
    rng: &mut R,
) -> Result<Vec<SampleTrace>> {
    check_len(model, seq_len, steps, batch)?;
    let orders: Vec<Vec<usize>> = (0..batch)
        .map(|_| {
            let mut o = remaining_positions(seq_len, opts);
            o.shuffle(rng);
            o
        })
        .collect();
    sample_in_order(model, seq_len, steps, &orders, opts, rng)
}

/// Fixed-k sampling with caller-supplied decode orders.
pub fn pgm_sample_with_orders<R: Rng + ?Sized>(
    model: &dyn Denoiser,
    seq_len: usize,
    steps: usize,
    orders: &[Vec<usize>],
    opts: &SampleOptions,
    rng: &mut R,
) -> Result<Vec<SampleTrace>> {
    check_len(model, seq_len, steps, orders.len())?;
    let expect = remaining_positions(seq_len, opts);
    for o in orders {
        let mut s = o.clone();
        s.sort_unstable();
        if s != expect {
            return Err(Error::Argument("decode order is not a permutation of the open positions".into()));
        }
    }
    sample_in_order(model, seq_len, steps, orders, opts, rng)
}

/// Fixed-k sampling in Halton order over a `⌈√L⌉` grid.
pub fn halton_sample<R: Rng + ?Sized>(
    model: &dyn Denoiser,
    seq_len: usize,
    steps: usize,
    batch: usize,
    opts: &SampleOptions,
    rng: &mut R,
) -> Result<Vec<SampleTrace>> {
    check_len(model, seq_len, steps, batch)?;
    let skip = usize::from(opts.bos.is_some());
    let order: Vec<usize> = halton_sequence_order(seq_len)?
        .into_iter()
        .filter(|&p| p >= skip)
        .collect();
    let orders = vec![order; batch];
    sample_in_order(model, seq_len, steps, &orders, opts, rng)
}

/// Per-sequence decode counts and the positions to query.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisySelection {
    pub counts: Vec<usize>,
    /// For each row, the first `max(counts)` entries of its queue (fewer if
    /// the queue is shorter). Predictions past `counts[i]` are discarded.
    pub slice: Vec<Vec<usize>>,
}

impl NoisySelection {
    pub fn is_empty(&self) -> bool {
        self.counts.iter().all(|&c| c == 0)
    }
}

/// Draws how many noisy positions each sequence decodes this step:
/// `Binomial(remaining, prob_denoise)` where `remaining = L − concrete_length`.
pub fn sample_noisy<R: Rng + ?Sized>(
    noisy: &[VecDeque<usize>],
    prob_denoise: f64,
    concrete_lengths: &[usize],
    seq_len: usize,
    rng: &mut R,
) -> Result<NoisySelection> {
    if !(0.0..=1.0).contains(&prob_denoise) {
        return Err(Error::Argument(format!("denoise probability {prob_denoise} outside [0, 1]")));
    }
    if noisy.len() != concrete_lengths.len() {
        return Err(Error::Argument("queue and length batches differ".into()));
    }
    let mut counts = Vec::with_capacity(noisy.len());
    for (q, &c) in noisy.iter().zip(concrete_lengths) {
        let remaining = seq_len.checked_sub(c).filter(|&r| r == q.len()).ok_or_else(|| {
            Error::Argument("concrete length disagrees with the noisy queue".into())
        })?;
        let n = Binomial::new(remaining as u64, prob_denoise)
            .map_err(|e| Error::Sampling(e.to_string()))?
            .sample(rng) as usize;
        counts.push(n.min(remaining));
    }
    let max = counts.iter().copied().max().unwrap_or(0);
    let slice = noisy
        .iter()
        .map(|q| q.iter().take(max).copied().collect())
        .collect();
    Ok(NoisySelection { counts, slice })
}

/// Decoded tokens in decode order, their positions and the noisy queues.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeState {
    pub tokens: Vec<Vec<u32>>,
    pub positions: Vec<Vec<usize>>,
    pub concrete_lengths: Vec<usize>,
    pub noisy: Vec<VecDeque<usize>>,
}

impl DecodeState {
    /// Reorders each row by position into a full sequence.
    pub fn assemble(&self, seq_len: usize) -> Result<Vec<Vec<u32>>> {
        self.tokens
            .iter()
            .zip(&self.positions)
            .map(|(t, p)| {
                let mut out = vec![None; seq_len];
                for (&tok, &pos) in t.iter().zip(p) {
                    out[pos] = Some(tok);
                }
                out.into_iter()
                    .map(|v| v.ok_or_else(|| Error::Sampling("sequence is incomplete".into())))
                    .collect()
            })
            .collect()
    }
}

/// Appends the first `counts[i]` predictions of each row and pops their positions.
pub fn extract_predictions(
    state: &mut DecodeState,
    selection: &NoisySelection,
    predicted: &[Vec<u32>],
) -> Result<()> {
    let b = state.noisy.len();
    if selection.counts.len() != b || predicted.len() != b || selection.slice.len() != b {
        return Err(Error::Argument("prediction batch is misaligned".into()));
    }
    for i in 0..b {
        let c = selection.counts[i];
        if predicted[i].len() < c || selection.slice[i].len() < c || state.noisy[i].len() < c {
            return Err(Error::Argument(format!("row {i} has fewer predictions than its count")));
        }
        for j in 0..c {
            let pos = state.noisy[i].pop_front().expect("checked length");
            if pos != selection.slice[i][j] {
                return Err(Error::Argument("selection does not match the noisy queue".into()));
            }
            state.positions[i].push(pos);
            state.tokens[i].push(predicted[i][j]);
        }
        state.concrete_lengths[i] += c;
    }
    Ok(())
}

/// Partition-model sampler whose per-step decode counts follow the ancestral
/// sampler's: each row decodes `Binomial(remaining, (α_s − α_t)/(1 − α_t))`
/// positions of a random order. Steps where no row decodes skip the model.
pub fn pgm_sample_mdlm_equivalent<R: Rng + ?Sized>(
    model: &dyn Denoiser,
    seq_len: usize,
    steps: usize,
    batch: usize,
    opts: &SampleOptions,
    rng: &mut R,
) -> Result<Vec<SampleTrace>> {
    check_len(model, seq_len, steps, batch)?;
    let init = initial(opts);
    let mut state = DecodeState {
        tokens: vec![init.iter().map(|d| d.1).collect(); batch],
        positions: vec![init.iter().map(|d| d.0).collect(); batch],
        concrete_lengths: vec![init.len(); batch],
        noisy: (0..batch)
            .map(|_| {
                let mut o = remaining_positions(seq_len, opts);
                o.shuffle(rng);
                o.into()
            })
            .collect(),
    };
    let mut rows: Vec<Row> = (0..batch).map(|_| Row::new(seq_len, &init)).collect();
    for step in 0..steps {
        let t = (steps - step) as f64 / steps as f64;
        let s = (steps - step - 1) as f64 / steps as f64;
        let p = opts.schedule.unmask_prob(s, t)?;
        let started = Instant::now();
        let sel = sample_noisy(&state.noisy, p, &state.concrete_lengths, seq_len, rng)?;
        if sel.is_empty() {
            for row in &mut rows {
                row.commit(step, Vec::new(), 0, 0);
            }
            continue;
        }
        // Rows with nothing to decode still need a nonempty query; they are
        // dropped from the call instead.
        let active: Vec<usize> = (0..batch).filter(|&i| !sel.slice[i].is_empty()).collect();
        let queries: Vec<_> = active.iter().map(|&i| rows[i].query(sel.slice[i].clone())).collect();
        let (lp, calls) = predict(model, seq_len, &queries, opts)?;
        let mut predicted = vec![Vec::new(); batch];
        for (&i, m) in active.iter().zip(&lp) {
            predicted[i] = (0..sel.counts[i])
                .map(|j| sample_row(m.row(j), opts.nucleus_p, rng))
                .collect::<Result<_>>()?;
        }
        extract_predictions(&mut state, &sel, &predicted)?;
        for (i, row) in rows.iter_mut().enumerate() {
            let decoded: Vec<(usize, u32)> = sel.slice[i][..sel.counts[i]]
                .iter()
                .copied()
                .zip(predicted[i].iter().copied())
                .collect();
            let processed = if sel.slice[i].is_empty() {
                0
            } else {
                cost(model, seq_len, row.clean.len(), sel.slice[i].len(), calls)
            };
            let row_calls = if sel.slice[i].is_empty() { 0 } else { calls };
            row.commit(step, decoded, processed, row_calls);
        }
        stamp(&mut rows, started);
    }
    rows.into_iter().map(Row::finish).collect()
}

/// Proposes a token at every candidate row and keeps the `budget` most
/// confident, ties going to the lower position. Returns `(position, token)`.
pub fn confidence_sample_step<R: Rng + ?Sized>(
    logits: &Matrix,
    positions: &[usize],
    budget: usize,
    nucleus_p: Option<f64>,
    temperature: f64,
    rng: &mut R,
) -> Result<Vec<(usize, u32)>> {
    if logits.rows() != positions.len() {
        return Err(Error::Argument("one logit row per candidate position is required".into()));
    }
    if budget > positions.len() {
        return Err(Error::Argument("budget exceeds the masked positions".into()));
    }
    if budget == 0 {
        return Ok(Vec::new());
    }
    let mut scored = Vec::with_capacity(positions.len());
    for (i, &pos) in positions.iter().enumerate() {
        let mut probs = logits.row(i).to_vec();
        softmax_in_place(&mut probs);
        if let Some(p) = nucleus_p {
            probs = nucleus_filter(&probs, p)?;
        }
        let tok = sample_probs(&probs, rng)?;
        let mut conf = probs[tok as usize];
        if temperature > 0.0 {
            let g: f64 = Gumbel::new(0.0, 1.0).expect("valid").sample(rng);
            conf = conf.ln() + temperature * g;
        }
        scored.push((conf, pos, tok));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(budget).map(|(_, p, t)| (p, t)).collect())
}

/// Positions to reveal at step `step` of `steps` when `total` start masked:
/// the masked fraction after step `τ` is `cos(π/2 · τ/T)`.
pub fn cosine_budget(total: usize, remaining: usize, step: usize, steps: usize) -> usize {
    let frac = (std::f64::consts::FRAC_PI_2 * (step + 1) as f64 / steps as f64).cos();
    let target = if step + 1 == steps { 0 } else { (total as f64 * frac).floor() as usize };
    remaining.saturating_sub(target).max(usize::from(remaining > 0)).min(remaining)
}

/// Confidence sampler. Every step scores all still-masked positions.
pub fn confidence_sample<R: Rng + ?Sized>(
    model: &dyn Denoiser,
    seq_len: usize,
    steps: usize,
    batch: usize,
    opts: &SampleOptions,
    rng: &mut R,
) -> Result<Vec<SampleTrace>> {
    check_len(model, seq_len, steps, batch)?;
    let mut rows: Vec<Row> = (0..batch).map(|_| Row::new(seq_len, &initial(opts))).collect();
    let total = remaining_positions(seq_len, opts).len();
    for step in 0..steps {
        let started = Instant::now();
        let open: Vec<Vec<usize>> = rows
            .iter()
            .map(|r| (0..seq_len).filter(|&i| r.tokens[i].is_none()).collect())
            .collect();
        let active: Vec<usize> = (0..batch).filter(|&i| !open[i].is_empty()).collect();
        if active.is_empty() {
            for row in &mut rows {
                row.commit(step, Vec::new(), 0, 0);
            }
            continue;
        }
        let queries: Vec<_> = active.iter().map(|&i| rows[i].query(open[i].clone())).collect();
        let (lp, calls) = predict(model, seq_len, &queries, opts)?;
        let mut decoded = vec![Vec::new(); batch];
        for (&i, m) in active.iter().zip(&lp) {
            let budget = cosine_budget(total, open[i].len(), step, steps);
            decoded[i] = confidence_sample_step(m, &open[i], budget, opts.nucleus_p, opts.confidence_temperature, rng)?;
        }
        for (i, (row, d)) in rows.iter_mut().zip(decoded).enumerate() {
            let (processed, row_calls) = if open[i].is_empty() {
                (0, 0)
            } else {
                (cost(model, seq_len, row.clean.len(), open[i].len(), calls), calls)
            };
            row.commit(step, d, processed, row_calls);
        }
        stamp(&mut rows, started);
    }
    rows.into_iter().map(Row::finish).collect()
}

pub fn sample<R: Rng + ?Sized>(
    kind: SamplerKind,
    model: &dyn Denoiser,
    seq_len: usize,
    steps: usize,
    batch: usize,
    opts: &SampleOptions,
    rng: &mut R,
) -> Result<Vec<SampleTrace>> {
    match kind {
        SamplerKind::Ancestral => mdlm_ancestral_sample(model, seq_len, steps, batch, opts, rng),
        SamplerKind::FixedK => pgm_sample_simple(model, seq_len, steps, batch, opts, rng),
        SamplerKind::MdlmEquivalent => pgm_sample_mdlm_equivalent(model, seq_len, steps, batch, opts, rng),
        SamplerKind::Confidence => confidence_sample(model, seq_len, steps, batch, opts, rng),
        SamplerKind::Halton => halton_sample(model, seq_len, steps, batch, opts, rng),
    }
}
