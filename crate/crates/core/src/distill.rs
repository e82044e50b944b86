//! Self-distillation through time: a student learns to match, in one step,
//! what the teacher produces over two smaller steps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Divergence, Tape};
use crate::checkpoint::CheckpointMeta;
use crate::data::TokenSequence;
use crate::error::{Error, Result};
use crate::model::{DecodeQuery, Denoiser, Model};
use crate::nn::Dropout;
use crate::partition::PredictRequest;
use crate::sampling::sample_row;
use crate::schedule::NoiseSchedule;
use crate::tensor::Matrix;
use crate::training::{clip_global_norm, ema_update, Adam};

/// Teacher targets for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillTargets {
    /// `L × N` log-probabilities; rows of invalid positions are zero.
    pub log_probs: Matrix,
    /// Positions decoded during the teacher rollout.
    pub valid: Vec<bool>,
}

impl DistillTargets {
    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn valid_positions(&self) -> Vec<usize> {
        (0..self.valid.len()).filter(|&i| self.valid[i]).collect()
    }
}

/// A partially decoded sequence: `tokens[i]` is meaningful only where `clean[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PartialSequence {
    pub tokens: Vec<u32>,
    pub clean: Vec<bool>,
    pub class: Option<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rollout {
    pub t_start: f64,
    pub t_end: f64,
    pub steps: usize,
    /// Take the most likely token instead of sampling.
    pub argmax: bool,
}

/// Rolls the teacher from `t_start` to `t_end` in `steps` ancestral steps and
/// records, at every position it decodes, the distribution it decoded from.
pub fn build_sdtt_targets<R: Rng + ?Sized>(
    teacher: &dyn Denoiser,
    z: &[PartialSequence],
    rollout: Rollout,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<DistillTargets>> {
    let spans = vec![(rollout.t_start, rollout.t_end); z.len()];
    rollout_targets(teacher, z, &spans, rollout.steps, rollout.argmax, schedule, rng)
}

/// As [`build_sdtt_targets`], with a `(t_start, t_end)` span per sequence.
pub fn rollout_targets<R: Rng + ?Sized>(
    teacher: &dyn Denoiser,
    z: &[PartialSequence],
    spans: &[(f64, f64)],
    steps: usize,
    argmax: bool,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<DistillTargets>> {
    if steps == 0 {
        return Err(Error::Argument("rollout needs at least one step".into()));
    }
    if spans.len() != z.len() {
        return Err(Error::Argument("one time span per sequence is required".into()));
    }
    if spans.iter().any(|&(a, b)| !(0.0 <= b && b < a && a <= 1.0)) {
        return Err(Error::Argument("rollout needs 0 <= t_end < t_start <= 1".into()));
    }
    let n = teacher.vocab_size();
    let mut state: Vec<PartialSequence> = z.to_vec();
    let mut out: Vec<DistillTargets> = z
        .iter()
        .map(|s| DistillTargets {
            log_probs: Matrix::zeros(s.tokens.len(), n),
            valid: vec![false; s.tokens.len()],
        })
        .collect();
    for k in 0..steps {
        let mut decode = Vec::with_capacity(state.len());
        for (seq, &(t0, t1)) in state.iter().zip(spans) {
            let dt = (t0 - t1) / steps as f64;
            let t = t0 - k as f64 * dt;
            let s = if k + 1 == steps { t1 } else { t - dt };
            let p = schedule.unmask_prob(s, t)?;
            let d: Vec<usize> = (0..seq.tokens.len())
                .filter(|&i| !seq.clean[i])
                .filter(|_| rng.gen::<f64>() < p)
                .collect();
            decode.push(d);
        }
        let active: Vec<usize> = (0..state.len()).filter(|&i| !decode[i].is_empty()).collect();
        if active.is_empty() {
            continue;
        }
        let clean_pos: Vec<Vec<usize>> = active
            .iter()
            .map(|&i| (0..state[i].tokens.len()).filter(|&j| state[i].clean[j]).collect())
            .collect();
        let clean_tok: Vec<Vec<u32>> = active
            .iter()
            .zip(&clean_pos)
            .map(|(&i, cp)| cp.iter().map(|&j| state[i].tokens[j]).collect())
            .collect();
        let queries: Vec<DecodeQuery<'_>> = active
            .iter()
            .enumerate()
            .map(|(a, &i)| DecodeQuery {
                clean_positions: &clean_pos[a],
                clean_tokens: &clean_tok[a],
                decode_positions: &decode[i],
                class: state[i].class,
            })
            .collect();
        let len = state[active[0]].tokens.len();
        if active.iter().any(|&i| state[i].tokens.len() != len) {
            return Err(Error::Argument("rollout batch mixes sequence lengths".into()));
        }
        let lp = teacher.log_probs(len, &queries)?;
        for (&i, m) in active.iter().zip(&lp) {
            for (r, &pos) in decode[i].iter().enumerate() {
                let row = m.row(r);
                let tok = if argmax {
                    argmax_index(row)
                } else {
                    sample_row(row, None, rng)?
                };
                out[i].log_probs.row_mut(pos).copy_from_slice(row);
                out[i].valid[pos] = true;
                state[i].tokens[pos] = tok;
                state[i].clean[pos] = true;
            }
        }
    }
    Ok(out)
}

fn argmax_index(row: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DivergenceKind {
    /// `KL(target ‖ student)`
    #[default]
    Kl,
    /// `KL(student ‖ target)`
    ReverseKl,
}

impl From<DivergenceKind> for Divergence {
    fn from(d: DivergenceKind) -> Self {
        match d {
            DivergenceKind::Kl => Divergence::Forward,
            DivergenceKind::ReverseKl => Divergence::Reverse,
        }
    }
}

/// Mean divergence between targets and the student's softmax over valid rows.
pub fn sdtt_student_loss(student_logits: &Matrix, targets: &DistillTargets, divergence: DivergenceKind) -> Result<f64> {
    if student_logits.shape() != targets.log_probs.shape() {
        return Err(Error::Argument("student logits and targets differ in shape".into()));
    }
    let n = targets.n_valid();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let weights: Vec<f64> = targets.valid.iter().map(|&v| if v { 1.0 / n as f64 } else { 0.0 }).collect();
    let mut tape = Tape::inference();
    let l = tape.constant(student_logits.clone());
    let loss = tape.kl_divergence(l, targets.log_probs.clone(), &weights, divergence.into());
    Ok(tape.scalar(loss))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub rounds: u32,
    /// Optimizer steps per round.
    pub steps_per_round: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub grad_clip_norm: f64,
    pub ema_decay: f64,
    /// Sampling steps of the original teacher.
    pub teacher_steps: usize,
    pub divergence: DivergenceKind,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            rounds: 1,
            steps_per_round: 1000,
            batch_size: 32,
            learning_rate: 1e-4,
            grad_clip_norm: 1.0,
            ema_decay: 0.0,
            teacher_steps: 32,
            divergence: DivergenceKind::Kl,
            seed: 0,
        }
    }
}

/// Summary of a distillation run.
#[derive(Clone, Debug)]
pub struct DistillOutcome {
    pub student: Model,
    pub metadata: CheckpointMeta,
    /// Mean training divergence per optimizer step, all rounds concatenated.
    pub losses: Vec<f64>,
}

/// Builds one batch of student inputs and teacher targets at a random time.
fn distill_batch<R: Rng + ?Sized>(
    teacher: &dyn Denoiser,
    data: &[TokenSequence],
    batch_size: usize,
    teacher_dt: f64,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<(Vec<PartialSequence>, Vec<DistillTargets>)> {
    let mut z = Vec::with_capacity(batch_size);
    let mut spans = Vec::with_capacity(batch_size);
    let student_dt = 2.0 * teacher_dt;
    for _ in 0..batch_size {
        let x = &data[rng.gen_range(0..data.len())];
        let t = student_dt + (1.0 - student_dt) * rng.gen::<f64>();
        let p = schedule.mask_prob(t)?;
        // Position 0 holds BOS and is always clean at sampling time.
        let clean: Vec<bool> = (0..x.len()).map(|i| i == 0 || rng.gen::<f64>() >= p).collect();
        z.push(PartialSequence {
            tokens: x.tokens.clone(),
            clean,
            class: x.class,
        });
        spans.push((t, (t - student_dt).max(0.0)));
    }
    let targets = rollout_targets(teacher, &z, &spans, 2, false, schedule, rng)?;
    Ok((z, targets))
}

/// Records the student's divergence on `tape`; returns `None` when no
/// position in the batch is valid.
fn student_graph(
    tape: &mut Tape,
    student: &Model,
    z: &[PartialSequence],
    targets: &[DistillTargets],
    divergence: DivergenceKind,
) -> Result<Option<crate::autodiff::Var>> {
    let n_valid: usize = targets.iter().map(DistillTargets::n_valid).sum();
    if n_valid == 0 {
        return Ok(None);
    }
    let w = 1.0 / n_valid as f64;
    match student {
        Model::Pgm(m) => {
            let kept: Vec<usize> = (0..z.len()).filter(|&i| targets[i].n_valid() > 0).collect();
            let clean_pos: Vec<Vec<usize>> = kept
                .iter()
                .map(|&i| (0..z[i].tokens.len()).filter(|&j| z[i].clean[j]).collect())
                .collect();
            let clean_tok: Vec<Vec<u32>> = kept
                .iter()
                .zip(&clean_pos)
                .map(|(&i, cp)| cp.iter().map(|&j| z[i].tokens[j]).collect())
                .collect();
            let decode: Vec<Vec<usize>> = kept.iter().map(|&i| targets[i].valid_positions()).collect();
            let requests: Vec<PredictRequest<'_>> = kept
                .iter()
                .enumerate()
                .map(|(a, &i)| PredictRequest {
                    clean_tokens: &clean_tok[a],
                    clean_positions: &clean_pos[a],
                    decode_positions: &decode[a],
                    class: z[i].class,
                })
                .collect();
            let logits = m.predict_graph(tape, &requests, &mut Dropout::off())?;
            let rows: Vec<Vec<f64>> = kept
                .iter()
                .zip(&decode)
                .flat_map(|(&i, d)| d.iter().map(move |&p| targets[i].log_probs.row(p).to_vec()))
                .collect();
            let weights = vec![w; rows.len()];
            let target = Matrix::from_rows(&rows);
            Ok(Some(tape.kl_divergence(logits, target, &weights, divergence.into())))
        }
        Model::Mdlm(m) => {
            let mask = m.mask_id();
            let zs: Vec<Vec<u32>> = z
                .iter()
                .map(|s| {
                    s.tokens
                        .iter()
                        .zip(&s.clean)
                        .map(|(&t, &c)| if c { t } else { mask })
                        .collect()
                })
                .collect();
            let refs: Vec<&[u32]> = zs.iter().map(Vec::as_slice).collect();
            let classes: Vec<Option<u32>> = z.iter().map(|s| s.class).collect();
            let logits = m.build(tape, &refs, &classes, &mut Dropout::off())?;
            let mut rows = Vec::new();
            let mut weights = Vec::new();
            for tg in targets {
                for (p, &v) in tg.valid.iter().enumerate() {
                    rows.push(tg.log_probs.row(p).to_vec());
                    weights.push(if v { w } else { 0.0 });
                }
            }
            Ok(Some(tape.kl_divergence(logits, Matrix::from_rows(&rows), &weights, divergence.into())))
        }
    }
}

/// Runs `config.rounds` rounds; each round's student becomes the next teacher
/// and halves the step count.
pub fn distill(
    teacher: &Model,
    prior: &CheckpointMeta,
    data: &[TokenSequence],
    config: &DistillConfig,
    schedule: &NoiseSchedule,
) -> Result<DistillOutcome> {
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if config.teacher_steps < 2usize.pow(config.rounds + 1) {
        return Err(Error::Config("teacher_steps too small for the requested rounds".into()));
    }
    let mut student = teacher.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut losses = Vec::new();
    for round in 0..config.rounds {
        let frozen = student.clone();
        let steps = config.teacher_steps >> round;
        let teacher_dt = 1.0 / steps as f64;
        let mut adam = Adam::new(student.params());
        let mut ema = student.params().clone();
        for _ in 0..config.steps_per_round {
            let (z, targets) = distill_batch(frozen.denoiser(), data, config.batch_size, teacher_dt, schedule, &mut rng)?;
            let mut tape = Tape::new();
            let Some(loss) = student_graph(&mut tape, &student, &z, &targets, config.divergence)? else {
                continue;
            };
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Divergence {
                    step: losses.len(),
                    loss: value,
                    checkpoint: None,
                });
            }
            let mut grads = tape.backward(loss).param_grads(student.params());
            clip_global_norm(&mut grads, config.grad_clip_norm);
            adam.step(student.params_mut(), &grads, config.learning_rate);
            ema_update(&mut ema, student.params(), config.ema_decay);
            losses.push(value);
        }
        student.params_mut().copy_from(&ema);
    }
    let rounds = prior.distill_rounds + config.rounds;
    Ok(DistillOutcome {
        student,
        metadata: CheckpointMeta {
            step: prior.step,
            distill_rounds: rounds,
            step_ratio: 1u64 << rounds,
            note: prior.note.clone(),
        },
        losses,
    })
}

/// Log-probabilities of a teacher at every position of `z` that is not clean.
pub fn single_pass_targets(teacher: &dyn Denoiser, z: &PartialSequence) -> Result<DistillTargets> {
    let cp: Vec<usize> = (0..z.tokens.len()).filter(|&i| z.clean[i]).collect();
    let ct: Vec<u32> = cp.iter().map(|&i| z.tokens[i]).collect();
    let dp: Vec<usize> = (0..z.tokens.len()).filter(|&i| !z.clean[i]).collect();
    let mut out = DistillTargets {
        log_probs: Matrix::zeros(z.tokens.len(), teacher.vocab_size()),
        valid: vec![false; z.tokens.len()],
    };
    if dp.is_empty() {
        return Ok(out);
    }
    let lp = teacher.log_probs(
        z.tokens.len(),
        &[DecodeQuery {
            clean_positions: &cp,
            clean_tokens: &ct,
            decode_positions: &dp,
            class: z.class,
        }],
    )?;
    for (r, &p) in dp.iter().enumerate() {
        out.log_probs.row_mut(p).copy_from_slice(lp[0].row(r));
        out.valid[p] = true;
    }
    Ok(out)
}
