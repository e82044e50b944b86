//! Likelihood bounds, sample-quality metrics and continuation ranking.

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::Serialize;

use crate::autodiff::Tape;
use crate::data::TokenSequence;
use crate::error::{Error, Result};
use crate::model::{DecodeQuery, Denoiser, Model};
use crate::nn::Dropout;
use crate::schedule::{NoiseSchedule, WeightConvention};
use crate::training::{estimator_graph, Estimator};

const EVAL_CHUNK: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct NelboEstimate {
    /// Mean per-token NELBO in nats.
    pub nats_per_token: f64,
    /// Standard error of `nats_per_token` across Monte-Carlo draws.
    pub std_error: f64,
    pub perplexity: f64,
}

/// Per-sequence NELBO estimates in nats per token, one row per draw.
///
/// Draw `r` uses RNG stream `r` of `seed`, so calls with the same seed share
/// their random numbers across sequences of equal length.
pub fn nelbo_per_sequence(
    model: &Model,
    data: &[TokenSequence],
    schedule: &NoiseSchedule,
    n_mc: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if n_mc == 0 {
        return Err(Error::Argument("n_mc must be at least 1".into()));
    }
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let (estimator, scale) = match model {
        Model::Mdlm(_) => (Estimator::Mgm, 1.0),
        // Each position is scored at two complementary rates.
        Model::Pgm(_) => (Estimator::Pgm, 0.5),
    };
    let mut out = Vec::with_capacity(n_mc);
    for r in 0..n_mc {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        let mut row = Vec::with_capacity(data.len());
        for chunk in data.chunks(EVAL_CHUNK) {
            let mut tape = Tape::inference();
            let g = estimator_graph(
                &mut tape,
                model,
                estimator,
                chunk,
                schedule,
                WeightConvention::default(),
                &mut rng,
                &mut Dropout::off(),
            )?;
            row.extend(g.report(&tape, chunk).per_sequence.iter().map(|v| v * scale));
        }
        out.push(row);
    }
    Ok(out)
}

/// `exp` of the Monte-Carlo NELBO per token. Pass a model holding EMA weights.
pub fn nelbo_perplexity(
    model: &Model,
    data: &[TokenSequence],
    schedule: &NoiseSchedule,
    n_mc: usize,
    seed: u64,
) -> Result<NelboEstimate> {
    let per = nelbo_per_sequence(model, data, schedule, n_mc, seed)?;
    let total_len: f64 = data.iter().map(|s| s.len() as f64).sum();
    let draws: Vec<f64> = per
        .iter()
        .map(|row| row.iter().zip(data).map(|(v, s)| v * s.len() as f64).sum::<f64>() / total_len)
        .collect();
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let std_error = if draws.len() > 1 {
        (draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
    } else {
        0.0
    };
    Ok(NelboEstimate {
        nats_per_token: mean,
        std_error,
        perplexity: mean.exp(),
    })
}

/// Left-to-right scorer of generated sequences.
pub trait ReferenceScorer {
    fn vocab_size(&self) -> usize;
    /// `log p(x_i | x_<i)` for `i = 1..len`; the first token is given.
    fn conditionals(&self, seq: &[u32]) -> Result<Vec<f64>>;
}

/// Order-`n` model with add-one smoothing.
#[derive(Clone, Debug)]
pub struct NgramScorer {
    order: usize,
    vocab: usize,
    counts: HashMap<Vec<u32>, (HashMap<u32, u64>, u64)>,
}

impl NgramScorer {
    pub fn fit(corpus: &[TokenSequence], order: usize, vocab: usize) -> Result<Self> {
        if order == 0 || vocab == 0 {
            return Err(Error::Argument("order and vocabulary must be positive".into()));
        }
        let mut counts: HashMap<Vec<u32>, (HashMap<u32, u64>, u64)> = HashMap::new();
        for s in corpus {
            for i in 1..s.len() {
                let ctx = s.tokens[i.saturating_sub(order - 1)..i].to_vec();
                let e = counts.entry(ctx).or_default();
                *e.0.entry(s.tokens[i]).or_default() += 1;
                e.1 += 1;
            }
        }
        Ok(Self { order, vocab, counts })
    }

    pub fn order(&self) -> usize {
        self.order
    }
}

impl ReferenceScorer for NgramScorer {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn conditionals(&self, seq: &[u32]) -> Result<Vec<f64>> {
        Ok((1..seq.len())
            .map(|i| {
                let ctx = &seq[i.saturating_sub(self.order - 1)..i];
                let (c, total) = self
                    .counts
                    .get(ctx)
                    .map(|(m, t)| (m.get(&seq[i]).copied().unwrap_or(0), *t))
                    .unwrap_or((0, 0));
                ((c + 1) as f64 / (total + self.vocab as u64) as f64).ln()
            })
            .collect())
    }
}

/// Scores with a trained model, one single-position decode query per token.
pub struct ModelScorer<'a> {
    pub model: &'a dyn Denoiser,
}

impl ReferenceScorer for ModelScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.vocab_size()
    }

    fn conditionals(&self, seq: &[u32]) -> Result<Vec<f64>> {
        let positions: Vec<usize> = (0..seq.len()).collect();
        let targets: Vec<[usize; 1]> = (1..seq.len()).map(|i| [i]).collect();
        let queries: Vec<DecodeQuery<'_>> = (1..seq.len())
            .map(|i| DecodeQuery {
                clean_positions: &positions[..i],
                clean_tokens: &seq[..i],
                decode_positions: &targets[i - 1],
                class: None,
            })
            .collect();
        let lp = self.model.log_probs(seq.len(), &queries)?;
        Ok(lp
            .iter()
            .zip(&seq[1..])
            .map(|(m, &t)| m.get(0, t as usize))
            .collect())
    }
}

/// Arithmetic mean over samples of `exp(−mean_i log p(x_i | x_<i))`.
pub fn generative_perplexity(scorer: &dyn ReferenceScorer, samples: &[Vec<u32>]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Evaluation("no samples to score".into()));
    }
    let mut total = 0.0;
    for s in samples {
        if let Some(&t) = s.iter().find(|&&t| t as usize >= scorer.vocab_size()) {
            return Err(Error::Evaluation(format!("sample holds non-data token {t}")));
        }
        let lp = scorer.conditionals(s)?;
        if lp.is_empty() {
            return Err(Error::Evaluation("sample too short to score".into()));
        }
        if lp.iter().any(|v| !v.is_finite()) {
            return Err(Error::Evaluation("scorer returned a non-finite log-probability".into()));
        }
        total += (-lp.iter().sum::<f64>() / lp.len() as f64).exp();
    }
    Ok(total / samples.len() as f64)
}

/// Mean over samples of the entropy of each sample's token frequencies.
pub fn unigram_entropy(samples: &[Vec<u32>], vocab: usize) -> Result<f64> {
    if samples.is_empty() || samples.iter().any(Vec::is_empty) {
        return Err(Error::Evaluation("no tokens to measure".into()));
    }
    let mut counts = vec![0usize; vocab];
    let mut total = 0.0;
    for s in samples {
        counts.iter_mut().for_each(|c| *c = 0);
        for &t in s {
            *counts
                .get_mut(t as usize)
                .ok_or_else(|| Error::Evaluation(format!("token {t} outside the vocabulary")))? += 1;
        }
        let n = s.len() as f64;
        total += counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .sum::<f64>();
    }
    Ok(total / samples.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Ranking {
    pub best: usize,
    /// Evidence lower bound on `log p(prefix ∥ candidate)` in nats.
    pub scores: Vec<f64>,
}

/// Picks the candidate whose joint sequence has the highest likelihood bound.
/// All candidates share the Monte-Carlo draws of `seed`.
pub fn rank_continuations(
    model: &Model,
    prefix: &[u32],
    candidates: &[Vec<u32>],
    schedule: &NoiseSchedule,
    n_mc: usize,
    seed: u64,
) -> Result<Ranking> {
    if candidates.len() < 2 {
        return Err(Error::Argument("ranking needs at least two candidates".into()));
    }
    let mut scores = Vec::with_capacity(candidates.len());
    for c in candidates {
        let mut tokens = prefix.to_vec();
        tokens.extend_from_slice(c);
        let seq = [TokenSequence::new(tokens)];
        let est = nelbo_perplexity(model, &seq, schedule, n_mc, seed)?;
        scores.push(-est.nats_per_token * seq[0].len() as f64);
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(Ranking { best, scores })
}
