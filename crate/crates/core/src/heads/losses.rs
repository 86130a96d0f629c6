//! Quality regression, relative ranking and self-consistency losses.
//!
//! Every loss exists twice: a plain `f64` evaluation used for reporting and
//! testing, and a tape version used for training.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct QualityBatch {
    pub q: Vec<f64>,
    pub s: Vec<f64>,
}

impl QualityBatch {
    pub fn new(q: Vec<f64>, s: Vec<f64>) -> Result<Self> {
        if q.is_empty() || q.len() != s.len() {
            return Err(Error::Contract(format!(
                "quality batch needs equal non-zero lengths, got {} predictions and {} scores",
                q.len(),
                s.len()
            )));
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("subjective scores".into()));
        }
        Ok(Self { q, s })
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankingExtremes {
    pub qa_max: f64,
    pub qa2_max: f64,
    pub qa_min: f64,
    pub qa2_min: f64,
    pub margin1: f64,
    pub margin2: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub theta1: f64,
    pub theta2: f64,
    pub theta3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            theta1: 0.5,
            theta2: 0.05,
            theta3: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("theta1", self.theta1), ("theta2", self.theta2), ("theta3", self.theta3)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and ≥ 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Mean absolute error between predictions and subjective scores.
pub fn quality_loss(batch: &QualityBatch) -> f64 {
    let n = batch.len() as f64;
    batch.q.iter().zip(&batch.s).map(|(q, s)| (q - s).abs()).sum::<f64>() / n
}

/// Indices of the highest, second-highest, lowest and second-lowest
/// subjective scores. Ties keep the lower index earlier in the descending
/// order. `None` for fewer than four samples.
pub fn extreme_indices(s: &[f64]) -> Option<[usize; 4]> {
    let n = s.len();
    if n < 4 {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    Some([order[0], order[1], order[n - 1], order[n - 2]])
}

pub fn select_extremes(batch: &QualityBatch) -> Option<RankingExtremes> {
    let [hi, hi2, lo, lo2] = extreme_indices(&batch.s)?;
    let (q, s) = (&batch.q, &batch.s);
    Some(RankingExtremes {
        qa_max: q[hi],
        qa2_max: q[hi2],
        qa_min: q[lo],
        qa2_min: q[lo2],
        margin1: s[hi2] - s[lo],
        margin2: s[hi] - s[lo2],
    })
}

pub fn relative_ranking_loss(e: &RankingExtremes) -> f64 {
    let span = (e.qa_max - e.qa_min).abs();
    let top = ((e.qa_max - e.qa2_max).abs() - span + e.margin1).max(0.0);
    let bottom = ((e.qa2_min - e.qa_min).abs() - span + e.margin2).max(0.0);
    top + bottom
}

/// Ranking loss of a batch; zero when the batch has fewer than four images.
pub fn ranking_loss(batch: &QualityBatch) -> f64 {
    select_extremes(batch).map_or(0.0, |e| relative_ranking_loss(&e))
}

fn mean_row_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() || a.rank() != 2 {
        return Err(Error::shape("self_consistency_loss", a.shape(), b.shape()));
    }
    let d = a.shape()[1];
    let rows = a.shape()[0] as f64;
    let total: f64 = a
        .data()
        .chunks(d)
        .zip(b.data().chunks(d))
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt())
        .sum();
    Ok(total / rows)
}

/// Batch-mean Euclidean distance between the logits of an image and its
/// mirror, for both logit streams, plus `θ1·|lrr − lrr_flip|`.
#[allow(clippy::too_many_arguments)]
pub fn self_consistency_loss(
    conv: &Tensor,
    atten: &Tensor,
    conv_flip: &Tensor,
    atten_flip: &Tensor,
    lrr: f64,
    lrr_flip: f64,
    theta1: f64,
) -> Result<f64> {
    Ok(mean_row_distance(conv, conv_flip)? + mean_row_distance(atten, atten_flip)? + theta1 * (lrr - lrr_flip).abs())
}

pub fn composite_loss(lq: f64, lrr: f64, lsc: f64, w: &LossWeights) -> Result<f64> {
    check_components(lq, lrr, lsc)?;
    Ok(lq + w.theta2 * lrr + w.theta3 * lsc)
}

pub(crate) fn check_components(lq: f64, lrr: f64, lsc: f64) -> Result<()> {
    for (name, v) in [("quality", lq), ("ranking", lrr), ("self-consistency", lsc)] {
        if v.is_nan() {
            return Err(Error::TrainingAborted(format!("{name} loss is NaN")));
        }
        if !v.is_finite() {
            return Err(Error::TrainingAborted(format!("{name} loss is not finite ({v})")));
        }
    }
    Ok(())
}

// ---- tape versions ---------------------------------------------------------

/// Mean absolute error of `q: [n]` against fixed scores.
pub fn tape_quality_loss(tape: &mut Tape, q: Var, s: &[f64]) -> Result<Var> {
    if tape.shape(q) != [s.len()] || s.is_empty() {
        return Err(Error::shape("quality_loss", tape.shape(q), &[s.len()]));
    }
    let target = tape.constant(Tensor::from_slice(s));
    let d = tape.sub(q, target)?;
    let d = tape.abs(d);
    Ok(tape.mean(d))
}

/// Ranking loss of `q: [n]` with extremes chosen from fixed scores `s`.
/// Batches under four images yield a constant zero.
pub fn tape_ranking_loss(tape: &mut Tape, q: Var, s: &[f64]) -> Result<Var> {
    if tape.shape(q) != [s.len()] {
        return Err(Error::shape("ranking_loss", tape.shape(q), &[s.len()]));
    }
    let Some([hi, hi2, lo, lo2]) = extreme_indices(s) else {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    };
    let pick = |tape: &mut Tape, i: usize| tape.index_select(q, &[i]);
    let (q_hi, q_hi2, q_lo, q_lo2) = (pick(tape, hi)?, pick(tape, hi2)?, pick(tape, lo)?, pick(tape, lo2)?);
    let dist = |tape: &mut Tape, a: Var, b: Var| -> Result<Var> {
        let d = tape.sub(a, b)?;
        Ok(tape.abs(d))
    };
    let span = dist(tape, q_hi, q_lo)?;
    let top = dist(tape, q_hi, q_hi2)?;
    let top = tape.sub(top, span)?;
    let top = tape.add_scalar(top, s[hi2] - s[lo]);
    let top = tape.relu(top);
    let bottom = dist(tape, q_lo2, q_lo)?;
    let bottom = tape.sub(bottom, span)?;
    let bottom = tape.add_scalar(bottom, s[hi] - s[lo2]);
    let bottom = tape.relu(bottom);
    let both = tape.add(top, bottom)?;
    Ok(tape.sum(both))
}

fn tape_row_distance(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    if tape.shape(a) != tape.shape(b) || tape.shape(a).len() != 2 {
        return Err(Error::shape("self_consistency_loss", tape.shape(a), tape.shape(b)));
    }
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    let per_row = tape.sum_axis(sq, 1)?;
    let norm = tape.sqrt(per_row)?;
    Ok(tape.mean(norm))
}

#[allow(clippy::too_many_arguments)]
pub fn tape_self_consistency(
    tape: &mut Tape,
    conv: Var,
    atten: Var,
    conv_flip: Var,
    atten_flip: Var,
    lrr: Var,
    lrr_flip: Var,
    theta1: f64,
) -> Result<Var> {
    let c = tape_row_distance(tape, conv, conv_flip)?;
    let a = tape_row_distance(tape, atten, atten_flip)?;
    let r = tape.sub(lrr, lrr_flip)?;
    let r = tape.abs(r);
    let r = tape.scale(r, theta1);
    let ca = tape.add(c, a)?;
    tape.add(ca, r)
}

pub fn tape_composite(tape: &mut Tape, lq: Var, lrr: Var, lsc: Option<Var>, w: &LossWeights) -> Result<Var> {
    let r = tape.scale(lrr, w.theta2);
    let mut total = tape.add(lq, r)?;
    if let Some(lsc) = lsc {
        let c = tape.scale(lsc, w.theta3);
        total = tape.add(total, c)?;
    }
    check_components(
        tape.value(lq).item(),
        tape.value(lrr).item(),
        lsc.map_or(0.0, |v| tape.value(v).item()),
    )?;
    Ok(total)
}
