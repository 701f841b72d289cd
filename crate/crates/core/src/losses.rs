//! Training losses recorded on a tape: the client's BCE/CE terms and the three
//! server consolidation terms.

use numkit::{Tape, Tensor, Var};

use crate::error::{FedError, Result};
use crate::gaussian::{estimate_gaussian, w2_squared, SHRINKAGE};

/// Floor on the pairwise W₂² sum before taking its reciprocal.
pub const WASSERSTEIN_FLOOR: f64 = 1e-4;
const ANCHOR_EPS: f64 = 1e-12;

pub fn bce_const(tape: &mut Tape, logits: Var, target: f64) -> Result<Var> {
    let n = tape.value(logits).len();
    Ok(tape.bce_with_logits(logits, &vec![target; n])?)
}

/// Mean cross-entropy of `[n, m]` logits against column indices.
pub fn cross_entropy(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    let lp = tape.log_softmax(logits)?;
    let picked = tape.pick(lp, targets)?;
    let m = tape.mean(picked)?;
    Ok(tape.scale(m, -1.0)?)
}

/// Cross-entropy restricted to the `seen` columns; `labels` are class ids.
pub fn masked_cross_entropy(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    seen: &[usize],
) -> Result<Var> {
    let targets = labels
        .iter()
        .map(|y| {
            seen.iter()
                .position(|s| s == y)
                .ok_or_else(|| FedError::Invalid(format!("label {y} is not a seen class")))
        })
        .collect::<Result<Vec<_>>>()?;
    let sub = tape.gather_cols(logits, seen)?;
    cross_entropy(tape, sub, &targets)
}

/// Row-wise softmax of a plain `[n, m]` logit block.
pub fn softmax_rows(logits: &[f64], m: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(m) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    out
}

/// `(1/n) Σ_rows KL(p_teacher ‖ softmax(student))` for teacher probabilities
/// `[n, m]` held constant.
pub fn kd_loss(tape: &mut Tape, student_logits: Var, teacher_probs: &Tensor) -> Result<Var> {
    let shape = tape.shape(student_logits).to_vec();
    if shape != teacher_probs.shape() {
        return Err(FedError::Dimension(format!(
            "student logits {shape:?} vs teacher probabilities {:?}",
            teacher_probs.shape()
        )));
    }
    let n = shape[0] as f64;
    let neg_entropy: f64 = teacher_probs
        .data()
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum();
    let p = tape.constant(teacher_probs.clone())?;
    let lq = tape.log_softmax(student_logits)?;
    let cross = tape.mul(lq, p)?;
    let cross = tape.sum(cross)?;
    let kl = tape.scale(cross, -1.0 / n)?;
    Ok(tape.add_scalar(kl, neg_entropy / n)?)
}

/// `‖θ − a‖₂` over several parameter blocks, with a tiny ε inside the root.
pub fn anchor_loss(tape: &mut Tape, params: &[Var], anchors: &[&[f64]]) -> Result<Var> {
    if params.len() != anchors.len() || params.is_empty() {
        return Err(FedError::Dimension(
            "anchor blocks do not match parameters".into(),
        ));
    }
    let mut total: Option<Var> = None;
    for (&v, a) in params.iter().zip(anchors) {
        let shape = tape.shape(v).to_vec();
        let a = tape.constant(Tensor::new(shape, a.to_vec())?)?;
        let d = tape.sub(v, a)?;
        let sq = tape.square(d)?;
        let s = tape.sum(sq)?;
        total = Some(match total {
            None => s,
            Some(t) => tape.add(t, s)?,
        });
    }
    let t = tape.add_scalar(total.expect("non-empty"), ANCHOR_EPS)?;
    Ok(tape.sqrt(t)?)
}

/// Result of [`wasserstein_loss`]: the loss node and the exact pairwise sum.
#[derive(Debug, Clone, Copy)]
pub struct WassersteinTerm {
    pub loss: Var,
    pub pairwise_sum: f64,
}

/// Per-task mean and diagonal standard deviation on the tape.
fn moments(tape: &mut Tape, e: Var) -> Result<(Var, Var)> {
    let n = tape.shape(e)[0];
    let mu = tape.mean_rows(e)?;
    let mb = tape.broadcast_rows(mu, n)?;
    let c = tape.sub(e, mb)?;
    let sq = tape.square(c)?;
    let var = tape.mean_rows(sq)?;
    let var = tape.scale(var, n as f64 / (n as f64 - 1.0))?;
    let var = tape.add_scalar(var, SHRINKAGE)?;
    Ok((mu, tape.sqrt(var)?))
}

/// `1 / max(Σ_{i<j} W₂²(𝒩_i, 𝒩_j), floor)` over per-task embedding blocks
/// `[n_t, d]`. The forward value uses the exact closed form on full
/// covariances; gradients flow through a diagonal-covariance surrogate
/// `‖Δμ‖² + ‖σ_i − σ_j‖²` offset to that value.
pub fn wasserstein_loss(tape: &mut Tape, per_task: &[Var]) -> Result<WassersteinTerm> {
    if per_task.len() < 2 {
        let loss = tape.constant(Tensor::scalar(0.0))?;
        return Ok(WassersteinTerm {
            loss,
            pairwise_sum: 0.0,
        });
    }
    let mut gaussians = Vec::with_capacity(per_task.len());
    let mut stats = Vec::with_capacity(per_task.len());
    for &e in per_task {
        let s = tape.shape(e).to_vec();
        if s.len() != 2 || s[0] < 2 {
            return Err(FedError::Estimation(format!(
                "task subset with shape {s:?} needs at least two embeddings"
            )));
        }
        let rows: Vec<Vec<f64>> = tape
            .value(e)
            .data()
            .chunks(s[1])
            .map(<[f64]>::to_vec)
            .collect();
        gaussians.push(estimate_gaussian(&rows)?);
        stats.push(moments(tape, e)?);
    }
    let mut exact = 0.0;
    let mut surrogate: Option<Var> = None;
    for i in 0..per_task.len() {
        for j in i + 1..per_task.len() {
            exact += w2_squared(&gaussians[i], &gaussians[j])?;
            let dm = tape.sub(stats[i].0, stats[j].0)?;
            let dm = tape.square(dm)?;
            let ds = tape.sub(stats[i].1, stats[j].1)?;
            let ds = tape.square(ds)?;
            let both = tape.add(dm, ds)?;
            let term = tape.sum(both)?;
            surrogate = Some(match surrogate {
                None => term,
                Some(s) => tape.add(s, term)?,
            });
        }
    }
    let surrogate = surrogate.expect("at least one pair");
    let offset = exact - tape.value(surrogate).data()[0];
    let sum = tape.add_scalar(surrogate, offset)?;
    let sum = tape.clamp_min(sum, WASSERSTEIN_FLOOR)?;
    let loss = tape.recip(sum)?;
    Ok(WassersteinTerm {
        loss,
        pairwise_sum: exact,
    })
}
