//! Noise schedules, loss weights, group assignment and mask corruption.
//!
//! Masking and partitioning draw their per-position Bernoulli pattern through
//! the same routine, so with equal seeds and times "group 1" and "masked"
//! coincide draw for draw.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default clamp for loss-weight evaluation.
pub const TIME_EPS: f64 = 1e-4;

/// Terminal signal level of the log-linear schedule.
pub const LOG_LINEAR_EPS: f64 = 1e-3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    /// `α(t) = 1 − t`
    #[default]
    Linear,
    /// `α(t) = exp(−σ(t))` with `σ(t) = −ln(1 − (1 − ε) t)`.
    LogLinear,
}

/// `α(t)`: probability that a token is still clean at time `t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    /// Clamp applied to `t` before weights are evaluated; `None` disables it.
    pub clamp_eps: Option<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear()
    }
}

fn check_time(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::TimeDomain(t))
    }
}

impl NoiseSchedule {
    pub fn linear() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            clamp_eps: Some(TIME_EPS),
        }
    }

    pub fn log_linear() -> Self {
        Self {
            kind: ScheduleKind::LogLinear,
            clamp_eps: Some(TIME_EPS),
        }
    }

    pub fn unclamped(self) -> Self {
        Self {
            clamp_eps: None,
            ..self
        }
    }

    pub fn alpha(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        Ok(match self.kind {
            ScheduleKind::Linear => 1.0 - t,
            ScheduleKind::LogLinear => {
                let sigma = -(-(1.0 - LOG_LINEAR_EPS) * t).ln_1p();
                (-sigma).exp()
            }
        })
    }

    pub fn alpha_prime(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        Ok(match self.kind {
            ScheduleKind::Linear => -1.0,
            ScheduleKind::LogLinear => -(1.0 - LOG_LINEAR_EPS),
        })
    }

    /// Probability that a position is masked (or in group 1) at time `t`.
    pub fn mask_prob(&self, t: f64) -> Result<f64> {
        Ok(1.0 - self.alpha(t)?)
    }

    /// Posterior probability that a masked position becomes clean when moving
    /// from time `t` to an earlier time `s`: `(α_s − α_t) / (1 − α_t)`.
    pub fn unmask_prob(&self, s: f64, t: f64) -> Result<f64> {
        let (a_s, a_t) = (self.alpha(s)?, self.alpha(t)?);
        if a_t >= 1.0 {
            return Ok(0.0);
        }
        Ok(((a_s - a_t) / (1.0 - a_t)).clamp(0.0, 1.0))
    }

    fn raw_weight(&self, t: f64) -> Result<f64> {
        let denom = 1.0 - self.alpha(t)?;
        if denom <= 0.0 {
            return Err(Error::Singularity(t));
        }
        Ok(self.alpha_prime(t)?.abs() / denom)
    }
}

/// `α(t)`.
pub fn alpha_at(schedule: &NoiseSchedule, t: f64) -> Result<f64> {
    schedule.alpha(t)
}

/// MDLM loss weight `|α'(t)| / (1 − α(t))`. Times below the clamp are raised to it.
pub fn loss_weight_mgm(schedule: &NoiseSchedule, t: f64) -> Result<f64> {
    check_time(t)?;
    let t = match schedule.clamp_eps {
        Some(eps) => t.max(eps),
        None => t,
    };
    schedule.raw_weight(t)
}

/// Which group receives the masked-token weight `w(t)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightConvention {
    /// Group 1 plays the masked role: `w(t)` on `g = 1`, `w(1 − t)` on `g = 0`.
    #[default]
    GroupOneMasked,
    /// The opposite assignment: `w(t)` on `g = 0`, `w(1 − t)` on `g = 1`.
    GroupZeroMasked,
}

/// Per-position partition loss weights at two complementary masking rates.
pub fn loss_weight_pgm(
    groups: &GroupAssignment,
    schedule: &NoiseSchedule,
    t: f64,
    convention: WeightConvention,
) -> Result<Vec<f64>> {
    check_time(t)?;
    let t = match schedule.clamp_eps {
        Some(eps) => t.clamp(eps, 1.0 - eps),
        None => t,
    };
    let w_t = schedule.raw_weight(t)?;
    let w_c = schedule.raw_weight(1.0 - t)?;
    let (w1, w0) = match convention {
        WeightConvention::GroupOneMasked => (w_t, w_c),
        WeightConvention::GroupZeroMasked => (w_c, w_t),
    };
    Ok(groups
        .as_slice()
        .iter()
        .map(|&g| if g == 1 { w1 } else { w0 })
        .collect())
}

/// Per-position group labels; every entry is 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct GroupAssignment(Vec<u8>);

impl GroupAssignment {
    pub fn new(groups: Vec<u8>) -> Result<Self> {
        if let Some(bad) = groups.iter().find(|&&g| g > 1) {
            return Err(Error::Validation(format!("group label {bad} is not 0 or 1")));
        }
        Ok(Self(groups))
    }

    pub fn from_flags(flags: &[bool]) -> Self {
        Self(flags.iter().map(|&f| u8::from(f)).collect())
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count_ones(&self) -> usize {
        self.0.iter().filter(|&&g| g == 1).count()
    }

    /// Swaps the two groups.
    pub fn flipped(&self) -> Self {
        Self(self.0.iter().map(|g| 1 - g).collect())
    }
}

/// A sequence in which some positions hold the reserved mask id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorruptedSequence {
    pub tokens: Vec<u32>,
    pub mask_flags: Vec<bool>,
}

impl CorruptedSequence {
    /// Applies a mask pattern to clean tokens.
    pub fn from_flags(x: &[u32], flags: Vec<bool>, mask_id: u32) -> Self {
        let tokens = x
            .iter()
            .zip(&flags)
            .map(|(&tok, &m)| if m { mask_id } else { tok })
            .collect();
        Self {
            tokens,
            mask_flags: flags,
        }
    }

    pub fn masked_count(&self) -> usize {
        self.mask_flags.iter().filter(|&&m| m).count()
    }

    pub fn masked_positions(&self) -> Vec<usize> {
        (0..self.mask_flags.len()).filter(|&i| self.mask_flags[i]).collect()
    }

    pub fn clean_positions(&self) -> Vec<usize> {
        (0..self.mask_flags.len()).filter(|&i| !self.mask_flags[i]).collect()
    }
}

/// One independent Bernoulli(`p`) draw per position, consuming one uniform each.
pub fn bernoulli_pattern<R: Rng + ?Sized>(len: usize, p: f64, rng: &mut R) -> Vec<bool> {
    (0..len).map(|_| rng.gen::<f64>() < p).collect()
}

pub fn sample_group_assignment<R: Rng + ?Sized>(
    len: usize,
    t: f64,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<GroupAssignment> {
    if len == 0 {
        return Err(Error::Argument("sequence length must be at least 1".into()));
    }
    let p = schedule.mask_prob(t)?;
    Ok(GroupAssignment::from_flags(&bernoulli_pattern(len, p, rng)))
}

fn validate_clean(x: &[u32], mask_id: u32) -> Result<()> {
    match x.iter().position(|&tok| tok >= mask_id) {
        Some(i) => Err(Error::Validation(format!(
            "token {} at position {i} is not a clean token (mask id {mask_id})",
            x[i]
        ))),
        None => Ok(()),
    }
}

pub fn mask_sequence<R: Rng + ?Sized>(
    x: &[u32],
    t: f64,
    schedule: &NoiseSchedule,
    mask_id: u32,
    rng: &mut R,
) -> Result<CorruptedSequence> {
    validate_clean(x, mask_id)?;
    let p = schedule.mask_prob(t)?;
    let flags = bernoulli_pattern(x.len(), p, rng);
    Ok(CorruptedSequence::from_flags(x, flags, mask_id))
}

/// Two copies whose mask patterns are exact complements; the first masks
/// with probability `1 − α(t)`.
pub fn complementary_mask_pair<R: Rng + ?Sized>(
    x: &[u32],
    t: f64,
    schedule: &NoiseSchedule,
    mask_id: u32,
    rng: &mut R,
) -> Result<(CorruptedSequence, CorruptedSequence)> {
    let first = mask_sequence(x, t, schedule, mask_id, rng)?;
    let flags: Vec<bool> = first.mask_flags.iter().map(|m| !m).collect();
    let second = CorruptedSequence::from_flags(x, flags, mask_id);
    Ok((first, second))
}
