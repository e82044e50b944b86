//! Training objectives, the gradient-variance probe and the optimizer loop.
//!
//! All losses are per-token: each sequence's weighted cross-entropy is divided
//! by its length, then averaged over the batch.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::data::TokenSequence;
use crate::error::{Error, Result};
use crate::mdlm::Mdlm;
use crate::model::Model;
use crate::nn::Dropout;
use crate::params::ParamStore;
use crate::partition::PartitionTransformer;
use crate::schedule::{
    bernoulli_pattern, loss_weight_mgm, loss_weight_pgm, GroupAssignment, NoiseSchedule, WeightConvention,
};
use crate::tensor::{cross_entropy_rows, Matrix};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    Mgm,
    MgmComplementary,
    #[default]
    Pgm,
}

/// Gradient estimators compared by [`gradient_variance_probe`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    /// One masked copy per sequence.
    Mgm,
    /// Two copies with complementary masks.
    MgmComplementary,
    /// Two copies with independent times and masks (same compute as the complementary pair).
    MgmIndependentPair,
    Pgm,
}

impl From<Objective> for Estimator {
    fn from(o: Objective) -> Self {
        match o {
            Objective::Mgm => Estimator::Mgm,
            Objective::MgmComplementary => Estimator::MgmComplementary,
            Objective::Pgm => Estimator::Pgm,
        }
    }
}

/// One masked copy of a sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskDraw {
    pub t: f64,
    pub flags: Vec<bool>,
}

/// One partition of a sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupDraw {
    pub t: f64,
    pub groups: GroupAssignment,
}

/// Draws `t ~ U[0, 1)` then one Bernoulli(`1 − α(t)`) flag per position.
pub fn draw_mask<R: Rng + ?Sized>(len: usize, schedule: &NoiseSchedule, rng: &mut R) -> Result<MaskDraw> {
    let t: f64 = rng.gen();
    let flags = bernoulli_pattern(len, schedule.mask_prob(t)?, rng);
    Ok(MaskDraw { t, flags })
}

/// Same random stream as [`draw_mask`]; group 1 coincides with "masked".
pub fn draw_groups<R: Rng + ?Sized>(len: usize, schedule: &NoiseSchedule, rng: &mut R) -> Result<GroupDraw> {
    let d = draw_mask(len, schedule, rng)?;
    Ok(GroupDraw {
        t: d.t,
        groups: GroupAssignment::from_flags(&d.flags),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    /// Batch mean of the per-sequence losses.
    pub loss: f64,
    pub per_sequence: Vec<f64>,
    /// Weighted cross-entropy of every position divided by the sequence length.
    pub per_position: Vec<Vec<f64>>,
}

/// A recorded loss: the scalar node plus what is needed for diagnostics.
pub struct LossGraph {
    pub loss: Var,
    logits: Var,
    targets: Vec<u32>,
    /// Row weights without the batch-mean factor.
    weights: Vec<f64>,
    /// (sequence index, position) of every logit row.
    rows: Vec<(usize, usize)>,
    /// Factor applied to a row's contribution to its sequence's loss.
    copy_scale: Vec<f64>,
}

impl LossGraph {
    pub fn report(&self, tape: &Tape, batch: &[TokenSequence]) -> LossReport {
        let ce = cross_entropy_rows(tape.value(self.logits), &self.targets);
        let mut per_position: Vec<Vec<f64>> = batch.iter().map(|s| vec![0.0; s.len()]).collect();
        for (r, &(b, p)) in self.rows.iter().enumerate() {
            if self.weights[r] != 0.0 {
                per_position[b][p] += self.copy_scale[r] * self.weights[r] * ce[r];
            }
        }
        let per_sequence: Vec<f64> = per_position.iter().map(|v| v.iter().sum()).collect();
        LossReport {
            loss: tape.scalar(self.loss),
            per_sequence,
            per_position,
        }
    }
}

fn check_batch(batch: &[TokenSequence]) -> Result<()> {
    if batch.is_empty() || batch.iter().any(TokenSequence::is_empty) {
        return Err(Error::EmptyBatch);
    }
    Ok(())
}

/// Masked copies for the baseline: `(sequence, draw, copy scale)`.
fn mgm_graph(
    tape: &mut Tape,
    model: &Mdlm,
    batch: &[TokenSequence],
    copies: &[(usize, &MaskDraw, f64)],
    schedule: &NoiseSchedule,
    drop: &mut Dropout,
) -> Result<LossGraph> {
    let mask = model.mask_id();
    let b = batch.len() as f64;
    let mut zs = Vec::with_capacity(copies.len());
    let mut classes = Vec::with_capacity(copies.len());
    let mut targets = Vec::new();
    let mut weights = Vec::new();
    let mut scaled = Vec::new();
    let mut rows = Vec::new();
    let mut copy_scale = Vec::new();
    for &(i, draw, scale) in copies {
        let x = &batch[i].tokens;
        if draw.flags.len() != x.len() {
            return Err(Error::Argument("mask draw length differs from sequence".into()));
        }
        if let Some(&t) = x.iter().find(|&&t| t >= mask) {
            return Err(Error::Validation(format!("token {t} is not a clean token")));
        }
        let w = loss_weight_mgm(schedule, draw.t)? / x.len() as f64;
        let z: Vec<u32> = x
            .iter()
            .zip(&draw.flags)
            .map(|(&t, &m)| if m { mask } else { t })
            .collect();
        for (p, &m) in draw.flags.iter().enumerate() {
            let wp = if m { w } else { 0.0 };
            targets.push(x[p]);
            weights.push(wp);
            scaled.push(wp * scale / b);
            rows.push((i, p));
            copy_scale.push(scale);
        }
        zs.push(z);
        classes.push(batch[i].class);
    }
    let refs: Vec<&[u32]> = zs.iter().map(Vec::as_slice).collect();
    let logits = model.build(tape, &refs, &classes, drop)?;
    let loss = tape.weighted_cross_entropy(logits, &targets, &scaled);
    Ok(LossGraph {
        loss,
        logits,
        targets,
        weights,
        rows,
        copy_scale,
    })
}

fn pgm_graph(
    tape: &mut Tape,
    model: &PartitionTransformer,
    batch: &[TokenSequence],
    draws: &[GroupDraw],
    schedule: &NoiseSchedule,
    convention: WeightConvention,
    drop: &mut Dropout,
) -> Result<LossGraph> {
    if draws.len() != batch.len() {
        return Err(Error::Argument("one group draw per sequence is required".into()));
    }
    let b = batch.len() as f64;
    let mut targets = Vec::new();
    let mut weights = Vec::new();
    let mut scaled = Vec::new();
    let mut rows = Vec::new();
    for (i, (seq, d)) in batch.iter().zip(draws).enumerate() {
        let l = seq.len() as f64;
        let w = loss_weight_pgm(&d.groups, schedule, d.t, convention)?;
        for (p, (&tok, wp)) in seq.tokens.iter().zip(w).enumerate() {
            targets.push(tok);
            weights.push(wp / l);
            scaled.push(wp / l / b);
            rows.push((i, p));
        }
    }
    let xs: Vec<&[u32]> = batch.iter().map(|s| s.tokens.as_slice()).collect();
    let gs: Vec<GroupAssignment> = draws.iter().map(|d| d.groups.clone()).collect();
    let classes: Vec<Option<u32>> = batch.iter().map(|s| s.class).collect();
    let logits = model.train_graph(tape, &xs, &gs, &classes, drop)?;
    let loss = tape.weighted_cross_entropy(logits, &targets, &scaled);
    let copy_scale = vec![1.0; rows.len()];
    Ok(LossGraph {
        loss,
        logits,
        targets,
        weights,
        rows,
        copy_scale,
    })
}

/// Baseline loss for given masks.
pub fn mgm_loss_given(
    model: &Mdlm,
    batch: &[TokenSequence],
    draws: &[MaskDraw],
    schedule: &NoiseSchedule,
) -> Result<LossReport> {
    check_batch(batch)?;
    if draws.len() != batch.len() {
        return Err(Error::Argument("one mask draw per sequence is required".into()));
    }
    let copies: Vec<_> = draws.iter().enumerate().map(|(i, d)| (i, d, 1.0)).collect();
    let mut tape = Tape::inference();
    let g = mgm_graph(&mut tape, model, batch, &copies, schedule, &mut Dropout::off())?;
    Ok(g.report(&tape, batch))
}

/// Masked-diffusion NELBO estimate with one random mask per sequence.
pub fn mgm_loss<R: Rng + ?Sized>(
    model: &Mdlm,
    batch: &[TokenSequence],
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<LossReport> {
    check_batch(batch)?;
    let draws = batch
        .iter()
        .map(|s| draw_mask(s.len(), schedule, rng))
        .collect::<Result<Vec<_>>>()?;
    mgm_loss_given(model, batch, &draws, schedule)
}

/// Averages the losses of each draw and its complement (weights `w(t)` and `w(1 − t)`).
pub fn complementary_mgm_loss_given(
    model: &Mdlm,
    batch: &[TokenSequence],
    draws: &[MaskDraw],
    schedule: &NoiseSchedule,
) -> Result<LossReport> {
    check_batch(batch)?;
    if draws.len() != batch.len() {
        return Err(Error::Argument("one mask draw per sequence is required".into()));
    }
    let comps: Vec<MaskDraw> = draws.iter().map(complement).collect();
    let copies = paired_copies(draws, &comps);
    let mut tape = Tape::inference();
    let g = mgm_graph(&mut tape, model, batch, &copies, schedule, &mut Dropout::off())?;
    Ok(g.report(&tape, batch))
}

pub fn complementary_mgm_loss<R: Rng + ?Sized>(
    model: &Mdlm,
    batch: &[TokenSequence],
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<LossReport> {
    check_batch(batch)?;
    let draws = batch
        .iter()
        .map(|s| draw_mask(s.len(), schedule, rng))
        .collect::<Result<Vec<_>>>()?;
    complementary_mgm_loss_given(model, batch, &draws, schedule)
}

fn complement(d: &MaskDraw) -> MaskDraw {
    MaskDraw {
        t: 1.0 - d.t,
        flags: d.flags.iter().map(|m| !m).collect(),
    }
}

fn paired_copies<'a>(a: &'a [MaskDraw], b: &'a [MaskDraw]) -> Vec<(usize, &'a MaskDraw, f64)> {
    a.iter()
        .enumerate()
        .flat_map(|(i, d)| [(i, d, 0.5), (i, &b[i], 0.5)])
        .collect()
}

/// Partition loss for given group assignments.
pub fn pgm_loss_given(
    model: &PartitionTransformer,
    batch: &[TokenSequence],
    draws: &[GroupDraw],
    schedule: &NoiseSchedule,
    convention: WeightConvention,
) -> Result<LossReport> {
    check_batch(batch)?;
    let mut tape = Tape::inference();
    let g = pgm_graph(&mut tape, model, batch, draws, schedule, convention, &mut Dropout::off())?;
    Ok(g.report(&tape, batch))
}

/// Partition loss with random groups. Its expectation is twice the NELBO,
/// since every position is scored at two complementary masking rates.
pub fn pgm_loss<R: Rng + ?Sized>(
    model: &PartitionTransformer,
    batch: &[TokenSequence],
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<LossReport> {
    check_batch(batch)?;
    let draws = batch
        .iter()
        .map(|s| draw_groups(s.len(), schedule, rng))
        .collect::<Result<Vec<_>>>()?;
    pgm_loss_given(model, batch, &draws, schedule, WeightConvention::default())
}

/// Records the loss of `estimator` on `tape` with fresh random draws.
pub fn estimator_graph(
    tape: &mut Tape,
    model: &Model,
    estimator: Estimator,
    batch: &[TokenSequence],
    schedule: &NoiseSchedule,
    convention: WeightConvention,
    rng: &mut dyn RngCore,
    drop: &mut Dropout,
) -> Result<LossGraph> {
    check_batch(batch)?;
    let masks = |rng: &mut dyn RngCore| {
        batch
            .iter()
            .map(|s| draw_mask(s.len(), schedule, rng))
            .collect::<Result<Vec<_>>>()
    };
    match estimator {
        Estimator::Pgm => {
            let draws = batch
                .iter()
                .map(|s| draw_groups(s.len(), schedule, rng))
                .collect::<Result<Vec<_>>>()?;
            pgm_graph(tape, model.as_pgm()?, batch, &draws, schedule, convention, drop)
        }
        Estimator::Mgm => {
            let m = model.as_mdlm()?;
            let draws = masks(rng)?;
            let copies: Vec<_> = draws.iter().enumerate().map(|(i, d)| (i, d, 1.0)).collect();
            mgm_graph(tape, m, batch, &copies, schedule, drop)
        }
        Estimator::MgmComplementary => {
            let m = model.as_mdlm()?;
            let a = masks(rng)?;
            let b: Vec<MaskDraw> = a.iter().map(complement).collect();
            mgm_graph(tape, m, batch, &paired_copies(&a, &b), schedule, drop)
        }
        Estimator::MgmIndependentPair => {
            let m = model.as_mdlm()?;
            let a = masks(rng)?;
            let b = masks(rng)?;
            mgm_graph(tape, m, batch, &paired_copies(&a, &b), schedule, drop)
        }
    }
}

/// Loss value and per-parameter gradients for one draw of `estimator`.
#[allow(clippy::too_many_arguments)]
pub fn loss_and_grads(
    model: &Model,
    estimator: Estimator,
    batch: &[TokenSequence],
    schedule: &NoiseSchedule,
    convention: WeightConvention,
    rng: &mut dyn RngCore,
    drop: &mut Dropout,
) -> Result<(f64, Vec<Matrix>)> {
    let mut tape = Tape::new();
    let g = estimator_graph(&mut tape, model, estimator, batch, schedule, convention, rng, drop)?;
    let loss = tape.scalar(g.loss);
    let grads = tape.backward(g.loss).param_grads(model.params());
    Ok((loss, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VarianceReport {
    /// `(parameter name, trace of the gradient covariance)`.
    pub blocks: Vec<(String, f64)>,
    pub total: f64,
    pub n_draws: usize,
}

/// Trace of the sample covariance of `n_draws` gradient estimates, per parameter
/// tensor. `draw` is called with the draw index and returns one gradient set.
pub fn variance_from_draws(
    names: &[String],
    n_draws: usize,
    mut draw: impl FnMut(usize) -> Result<Vec<Matrix>>,
) -> Result<VarianceReport> {
    if n_draws < 2 {
        return Err(Error::Argument("variance probe needs at least two draws".into()));
    }
    let mut mean: Vec<Vec<f64>> = Vec::new();
    let mut m2: Vec<Vec<f64>> = Vec::new();
    for k in 0..n_draws {
        let grads = draw(k)?;
        if mean.is_empty() {
            mean = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            m2 = mean.clone();
        }
        let n = (k + 1) as f64;
        for ((g, mu), s) in grads.iter().zip(&mut mean).zip(&mut m2) {
            for ((&x, mu), s) in g.data().iter().zip(mu.iter_mut()).zip(s.iter_mut()) {
                let d = x - *mu;
                *mu += d / n;
                *s += d * (x - *mu);
            }
        }
    }
    let denom = (n_draws - 1) as f64;
    let blocks: Vec<(String, f64)> = names
        .iter()
        .zip(&m2)
        .map(|(n, s)| (n.clone(), s.iter().sum::<f64>().max(0.0) / denom))
        .collect();
    let total = blocks.iter().map(|(_, v)| v).sum();
    Ok(VarianceReport {
        blocks,
        total,
        n_draws,
    })
}

/// Gradient variance of `estimator` on a frozen model and fixed batch. Draw
/// `k` uses its own RNG stream derived from `seed`, so two estimators probed
/// with the same seed see paired randomness.
pub fn gradient_variance_probe(
    model: &Model,
    batch: &[TokenSequence],
    estimator: Estimator,
    n_draws: usize,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<VarianceReport> {
    let names: Vec<String> = model.params().iter().map(|(n, _)| n.to_string()).collect();
    variance_from_draws(&names, n_draws, |k| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        let (_, g) = loss_and_grads(
            model,
            estimator,
            batch,
            schedule,
            WeightConvention::default(),
            &mut rng,
            &mut Dropout::off(),
        )?;
        Ok(g)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip_norm: f64,
    pub ema_decay: f64,
    pub objective: Objective,
    pub seed: u64,
    /// Validation interval in steps; 0 disables validation.
    pub eval_every: usize,
    /// Monte-Carlo draws per validation sequence.
    pub eval_mc: usize,
    /// Probability of replacing the class label with the null class.
    pub class_dropout: f64,
    pub weight_convention: WeightConvention,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            steps: 20_000,
            learning_rate: 3e-4,
            warmup_steps: 500,
            grad_clip_norm: 1.0,
            ema_decay: 0.9999,
            objective: Objective::Pgm,
            seed: 0,
            eval_every: 1000,
            eval_mc: 4,
            class_dropout: 0.1,
            weight_convention: WeightConvention::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return fail("ema_decay must lie in [0, 1)");
        }
        if !(self.learning_rate > 0.0) {
            return fail("learning_rate must be positive");
        }
        if self.grad_clip_norm < 0.0 {
            return fail("grad_clip_norm must be nonnegative");
        }
        if !(0.0..=1.0).contains(&self.class_dropout) {
            return fail("class_dropout must lie in [0, 1]");
        }
        if self.eval_every > 0 && self.eval_mc == 0 {
            return fail("eval_mc must be positive");
        }
        Ok(())
    }

    /// Linear warmup, then constant.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            self.learning_rate
        } else {
            self.learning_rate * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

/// Adam without weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: u64,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Matrix> = params.values().iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Matrix], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.values_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

pub fn global_norm(grads: &[Matrix]) -> f64 {
    grads.iter().map(Matrix::sum_sq).sum::<f64>().sqrt()
}

/// Scales gradients to at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads {
            g.scale_assign(s);
        }
    }
    norm
}

/// `ema ← d · ema + (1 − d) · params`
pub fn ema_update(ema: &mut ParamStore, params: &ParamStore, decay: f64) {
    for (e, p) in ema.values_mut().iter_mut().zip(params.values()) {
        for (e, &p) in e.data_mut().iter_mut().zip(p.data()) {
            *e = decay * *e + (1.0 - decay) * p;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub step: usize,
    pub loss: f64,
    pub val_nelbo_ppl: Option<f64>,
    pub grad_norm: f64,
    pub wall_time_s: f64,
    /// Loss exceeded three times the trailing median.
    #[serde(skip)]
    pub spike: bool,
}

pub const METRICS_HEADER: [&str; 5] = ["step", "loss", "val_nelbo_ppl", "grad_norm", "wall_time_s"];

/// Appends metric rows to a CSV file, writing the header for a new file.
pub struct MetricsLog {
    path: PathBuf,
    writer: csv::Writer<std::fs::File>,
}

impl MetricsLog {
    pub fn open(path: &Path) -> Result<Self> {
        let fresh = !path.exists() || std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut writer = csv::Writer::from_writer(file);
        if fresh {
            writer.write_record(METRICS_HEADER).map_err(|e| csv_err(path, e))?;
        }
        Ok(Self {
            path: path.to_path_buf(),
            writer,
        })
    }

    pub fn append(&mut self, row: &MetricRow) -> Result<()> {
        let val = row.val_nelbo_ppl.map(|v| v.to_string()).unwrap_or_default();
        self.writer
            .write_record([
                row.step.to_string(),
                row.loss.to_string(),
                val,
                row.grad_norm.to_string(),
                format!("{:.3}", row.wall_time_s),
            ])
            .map_err(|e| csv_err(&self.path, e))?;
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

/// Where the loop writes its artifacts; all optional.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub metrics_csv: Option<PathBuf>,
    /// Directory for the diagnostic checkpoint written on divergence.
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub ema: ParamStore,
    pub metrics: Vec<MetricRow>,
    pub steps: usize,
}

impl TrainOutcome {
    pub fn checkpoint(&self, model: &Model) -> Checkpoint {
        Checkpoint::from_model(
            model,
            Some(&self.ema),
            CheckpointMeta {
                step: self.steps as u64,
                distill_rounds: 0,
                step_ratio: 1,
                note: None,
            },
        )
    }
}

const SPIKE_WINDOW: usize = 50;

/// Runs the optimizer loop in place on `model`.
pub fn train(
    config: &TrainConfig,
    schedule: &NoiseSchedule,
    model: &mut Model,
    train_set: &[TokenSequence],
    val_set: &[TokenSequence],
    outputs: &TrainOutputs,
) -> Result<TrainOutcome> {
    config.validate()?;
    let estimator = Estimator::from(config.objective);
    match (estimator, model.kind()) {
        (Estimator::Pgm, crate::mdlm::ModelKind::Pgm) => {}
        (Estimator::Pgm, _) | (_, crate::mdlm::ModelKind::Pgm) => {
            return Err(Error::Config(format!(
                "objective {:?} does not match the {:?} model",
                config.objective,
                model.kind()
            )))
        }
        _ => {}
    }
    if config.steps > 0 && train_set.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n_classes = model.config().n_classes();
    let mut data_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed);
    noise_rng.set_stream(1);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(config.seed);
    drop_rng.set_stream(2);
    let dropout_rate = model.config().dropout_rate();

    let mut log = outputs.metrics_csv.as_deref().map(MetricsLog::open).transpose()?;
    let mut adam = Adam::new(model.params());
    let mut ema = model.params().clone();
    let mut metrics = Vec::new();
    let mut recent: VecDeque<f64> = VecDeque::with_capacity(SPIKE_WINDOW);
    let start = Instant::now();

    for step in 0..config.steps {
        let batch: Vec<TokenSequence> = (0..config.batch_size)
            .map(|_| {
                let mut s = train_set[data_rng.gen_range(0..train_set.len())].clone();
                if n_classes > 0 && s.class.is_some() && data_rng.gen::<f64>() < config.class_dropout {
                    s.class = None;
                }
                s
            })
            .collect();
        let mut drop = Dropout::new(dropout_rate, &mut drop_rng);
        let (loss, mut grads) = loss_and_grads(
            model,
            estimator,
            &batch,
            schedule,
            config.weight_convention,
            &mut noise_rng,
            &mut drop,
        )?;
        if !loss.is_finite() {
            let checkpoint = match &outputs.checkpoint_dir {
                Some(dir) => {
                    let path = dir.join(format!("diverged-step{step}.ckpt"));
                    let ck = Checkpoint::from_model(
                        model,
                        Some(&ema),
                        CheckpointMeta {
                            step: step as u64,
                            distill_rounds: 0,
                            step_ratio: 1,
                            note: Some(format!("loss {loss} at step {step}")),
                        },
                    );
                    ck.save(&path)?;
                    Some(path)
                }
                None => None,
            };
            return Err(Error::Divergence { step, loss, checkpoint });
        }
        let grad_norm = clip_global_norm(&mut grads, config.grad_clip_norm);
        adam.step(model.params_mut(), &grads, config.lr_at(step));
        ema_update(&mut ema, model.params(), config.ema_decay);

        let spike = trailing_median(&recent).is_some_and(|m| loss > 3.0 * m);
        if spike {
            log::warn!("loss spike at step {step}: {loss:.4}");
        }
        if recent.len() == SPIKE_WINDOW {
            recent.pop_front();
        }
        recent.push_back(loss);

        let done = step + 1;
        let val_nelbo_ppl = if config.eval_every > 0 && done % config.eval_every == 0 && !val_set.is_empty() {
            let eval_model = Model::from_params(&model.config(), ema.clone())?;
            let est = crate::eval::nelbo_perplexity(&eval_model, val_set, schedule, config.eval_mc, config.seed)?;
            log::info!("step {done}: loss {loss:.4}, validation perplexity {:.4}", est.perplexity);
            Some(est.perplexity)
        } else {
            None
        };
        let row = MetricRow {
            step: done,
            loss,
            val_nelbo_ppl,
            grad_norm,
            wall_time_s: start.elapsed().as_secs_f64(),
            spike,
        };
        if let Some(l) = log.as_mut() {
            l.append(&row)?;
        }
        metrics.push(row);
    }
    Ok(TrainOutcome {
        ema,
        metrics,
        steps: config.steps,
    })
}

fn trailing_median(v: &VecDeque<f64>) -> Option<f64> {
    if v.len() < 5 {
        return None;
    }
    let mut s: Vec<f64> = v.iter().copied().collect();
    s.sort_by(f64::total_cmp);
    Some(s[s.len() / 2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdlm::MdlmConfig;
    use crate::model::ModelConfig;
    use crate::partition::PartitionConfig;

    fn tiny_mdlm(n: usize) -> Mdlm {
        Mdlm::new(
            MdlmConfig {
                n_layers: 1,
                hidden_dim: 8,
                n_heads: 2,
                vocab_size: n,
                max_len: 16,
                dropout_rate: 0.0,
                n_classes: 0,
            },
            5,
        )
        .unwrap()
    }

    fn tiny_pgm() -> PartitionTransformer {
        PartitionTransformer::new(
            PartitionConfig {
                n_encoder_layers: 1,
                n_decoder_layers: 1,
                hidden_dim: 8,
                n_heads: 2,
                vocab_size: 7,
                max_len: 16,
                query_mode: Default::default(),
                dropout_rate: 0.0,
                n_classes: 0,
            },
            5,
        )
        .unwrap()
    }

    fn batch() -> Vec<TokenSequence> {
        vec![
            TokenSequence::new(vec![0, 1, 2, 3, 4, 5]),
            TokenSequence::new(vec![6, 6, 1, 0, 2, 3, 3, 1]),
        ]
    }

    /// A baseline whose output head is zero predicts uniformly.
    fn uniform(mut m: Mdlm) -> Mdlm {
        let id = m.params().find("out.head.weight").unwrap();
        m.params_mut().get_mut(id).scale_assign(0.0);
        m
    }

    #[test]
    fn zero_time_zero_loss() {
        let m = tiny_mdlm(7);
        let b = batch();
        let draws: Vec<MaskDraw> = b
            .iter()
            .map(|s| MaskDraw {
                t: 0.0,
                flags: vec![false; s.len()],
            })
            .collect();
        let r = mgm_loss_given(&m, &b, &draws, &NoiseSchedule::linear()).unwrap();
        assert_eq!(r.loss, 0.0);
    }

    #[test]
    fn uniform_model_expected_loss() {
        let m = uniform(tiny_mdlm(7));
        let b = batch();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 2000;
        let mean: f64 = (0..n)
            .map(|_| mgm_loss(&m, &b, &NoiseSchedule::linear(), &mut rng).unwrap().loss)
            .sum::<f64>()
            / n as f64;
        assert!((mean - 7f64.ln()).abs() < 0.1 * 7f64.ln(), "mean {mean}");
    }

    #[test]
    fn complementary_covers_every_position_once() {
        let m = tiny_mdlm(7);
        let b = batch();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sched = NoiseSchedule::linear();
        let draws: Vec<MaskDraw> = b.iter().map(|s| draw_mask(s.len(), &sched, &mut rng).unwrap()).collect();
        let r = complementary_mgm_loss_given(&m, &b, &draws, &sched).unwrap();
        let a = mgm_loss_given(&m, &b, &draws, &sched).unwrap();
        let comp: Vec<MaskDraw> = draws.iter().map(complement).collect();
        let c = mgm_loss_given(&m, &b, &comp, &sched).unwrap();
        assert!((r.loss - 0.5 * (a.loss + c.loss)).abs() < 1e-12);
        for (d, e) in draws.iter().zip(&comp) {
            let n = d.flags.iter().filter(|&&f| f).count() + e.flags.iter().filter(|&&f| f).count();
            assert_eq!(n, d.flags.len());
        }
        for row in &r.per_position {
            assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn pgm_loss_weights() {
        let m = tiny_pgm();
        let b = vec![TokenSequence::new(vec![0, 1, 2, 3])];
        let sched = NoiseSchedule::linear();
        let draws = vec![GroupDraw {
            t: 0.25,
            groups: GroupAssignment::new(vec![0, 0, 0, 0]).unwrap(),
        }];
        let r = pgm_loss_given(&m, &b, &draws, &sched, WeightConvention::default()).unwrap();
        let logits = m.forward_train(&b[0].tokens, &draws[0].groups).unwrap();
        let ce = cross_entropy_rows(&logits, &b[0].tokens);
        let w = 1.0 / 0.75;
        let expect: f64 = ce.iter().map(|c| w * c / 4.0).sum();
        assert!((r.loss - expect).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = pgm_loss(&m, &batch_for(7), &sched, &mut rng).unwrap();
        assert!(r.loss.is_finite() && r.loss >= 0.0);
    }

    fn batch_for(n: u32) -> Vec<TokenSequence> {
        vec![TokenSequence::new((0..10).map(|i| i % n).collect())]
    }

    #[test]
    fn draws_align_across_objectives() {
        let sched = NoiseSchedule::linear();
        for seed in 0..20 {
            let mut a = ChaCha8Rng::seed_from_u64(seed);
            let mut b = ChaCha8Rng::seed_from_u64(seed);
            let m = draw_mask(33, &sched, &mut a).unwrap();
            let g = draw_groups(33, &sched, &mut b).unwrap();
            assert_eq!(m.t, g.t);
            assert_eq!(GroupAssignment::from_flags(&m.flags), g.groups);
            let wm = loss_weight_mgm(&sched, m.t).unwrap();
            let wp = loss_weight_pgm(&g.groups, &sched, g.t, WeightConvention::default()).unwrap();
            for (i, &f) in m.flags.iter().enumerate() {
                if f && m.t > 1e-4 && m.t < 1.0 - 1e-4 {
                    assert_eq!(wp[i], wm);
                }
            }
        }
    }

    #[test]
    fn variance_probe_basics() {
        let names = vec!["a".to_string()];
        let fixed = variance_from_draws(&names, 5, |_| Ok(vec![Matrix::filled(2, 2, 0.3)])).unwrap();
        assert_eq!(fixed.total, 0.0);
        assert!(variance_from_draws(&names, 1, |_| Ok(vec![])).is_err());
        let v = variance_from_draws(&names, 2, |k| Ok(vec![Matrix::filled(1, 1, k as f64)])).unwrap();
        assert!((v.total - 0.5).abs() < 1e-12);
        let model = Model::Mdlm(tiny_mdlm(7));
        let r = gradient_variance_probe(&model, &batch(), Estimator::Mgm, 3, &NoiseSchedule::linear(), 0).unwrap();
        assert!(r.blocks.iter().all(|(_, v)| *v >= 0.0));
    }

    #[test]
    fn adam_and_ema() {
        let mut store = ParamStore::new();
        store.add("x", Matrix::filled(1, 1, 1.0));
        let mut opt = Adam::new(&store);
        opt.step(&mut store, &[Matrix::filled(1, 1, 2.0)], 0.1);
        assert!((store.values()[0].get(0, 0) - 0.9).abs() < 1e-6);
        let mut ema = ParamStore::new();
        ema.add("x", Matrix::filled(1, 1, 5.0));
        ema_update(&mut ema, &store, 0.0);
        assert_eq!(ema, store);
        let mut g = vec![Matrix::filled(1, 2, 3.0), Matrix::filled(1, 2, 4.0)];
        let n = clip_global_norm(&mut g, 1.0);
        assert!((n - 50f64.sqrt()).abs() < 1e-12);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_steps_keeps_init() {
        let cfg = ModelConfig::Mdlm(tiny_mdlm(7).config().clone());
        let mut m = Model::new(&cfg, 5).unwrap();
        let init = m.params().clone();
        let tc = TrainConfig {
            steps: 0,
            warmup_steps: 0,
            objective: Objective::Mgm,
            ..TrainConfig::default()
        };
        let out = train(&tc, &NoiseSchedule::linear(), &mut m, &batch(), &[], &TrainOutputs::default()).unwrap();
        assert_eq!(m.params(), &init);
        assert_eq!(out.ema, init);
        let bad = TrainConfig {
            objective: Objective::Pgm,
            ..tc
        };
        assert!(train(&bad, &NoiseSchedule::linear(), &mut m, &batch(), &[], &TrainOutputs::default()).is_err());
    }

    #[test]
    fn overfits_one_sequence() {
        let cfg = ModelConfig::Pgm(tiny_pgm().config().clone());
        let mut m = Model::new(&cfg, 5).unwrap();
        let data = vec![TokenSequence::new(vec![0, 3, 1, 4, 1, 5, 2, 6])];
        let tc = TrainConfig {
            batch_size: 4,
            steps: 200,
            learning_rate: 3e-3,
            warmup_steps: 10,
            ema_decay: 0.0,
            eval_every: 0,
            ..TrainConfig::default()
        };
        let out = train(&tc, &NoiseSchedule::linear(), &mut m, &data, &[], &TrainOutputs::default()).unwrap();
        let first: f64 = out.metrics[..20].iter().map(|r| r.loss).sum::<f64>() / 20.0;
        let last: f64 = out.metrics[180..].iter().map(|r| r.loss).sum::<f64>() / 20.0;
        assert!(last < 0.5 * first, "{first} -> {last}");
        assert_eq!(&out.ema, m.params());
    }

    #[test]
    fn deterministic_metrics() {
        let cfg = ModelConfig::Mdlm(tiny_mdlm(7).config().clone());
        let tc = TrainConfig {
            batch_size: 2,
            steps: 5,
            warmup_steps: 1,
            objective: Objective::MgmComplementary,
            eval_every: 0,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = Model::new(&cfg, 1).unwrap();
            let out = train(&tc, &NoiseSchedule::linear(), &mut m, &batch(), &[], &TrainOutputs::default()).unwrap();
            out.metrics.iter().map(|r| (r.loss, r.grad_norm)).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
