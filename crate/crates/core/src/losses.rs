//! Training objectives: squared error on episode scores, supervised and
//! label-weighted contrastive losses over support representations, and their
//! weighted sum.

use crate::autodiff::{cosine_raw, Tape, Tensor, Var};
use crate::embeddings::LabelEmbedding;
use crate::error::{Error, Result};

/// Contrastive denominators are floored here before taking the log.
pub const DENOMINATOR_FLOOR: f64 = 1e-30;

/// Default weight of the contrastive term in the total objective.
pub const DEFAULT_LAMBDA: f64 = 0.2;

/// `Σ_i Σ_n (ŷ_in − y_in)²`, summed (not averaged) over queries.
pub fn mse_loss(tape: &mut Tape, scores: Var, gold: &Tensor) -> Result<Var> {
    if tape.value(scores).shape() != gold.shape() {
        return Err(Error::dim("mse_loss", tape.value(scores).shape(), gold.shape()));
    }
    let y = tape.constant(gold.clone());
    let diff = tape.sub(scores, y)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.sum(sq))
}

/// `w_mn = max(0, cos(L^m, L^n))` for every pair of episode classes.
pub fn label_weights(labels: &[LabelEmbedding]) -> Vec<Vec<f64>> {
    labels
        .iter()
        .map(|m| {
            labels
                .iter()
                .map(|n| cosine_raw(m.vector.data(), n.vector.data()).clamp(0.0, 1.0))
                .collect()
        })
        .collect()
}

/// Support representations with their episode class ids.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    pub reps: Vec<Var>,
    pub labels: Vec<usize>,
    /// `weights[m][n]` scales a class-`m` term in the denominator of a
    /// class-`n` anchor.
    pub weights: Vec<Vec<f64>>,
    pub tau: f64,
    /// Restrict denominators to other-class representations.
    pub strict_negatives: bool,
}

impl ContrastiveBatch {
    /// A batch with every weight set to one.
    pub fn unweighted(reps: Vec<Var>, labels: Vec<usize>, tau: f64) -> Self {
        let n = labels.iter().max().map_or(0, |m| m + 1);
        Self {
            reps,
            labels,
            weights: vec![vec![1.0; n]; n],
            tau,
            strict_negatives: false,
        }
    }
}

/// Supervised contrastive loss: [`lcl_loss`] with all class weights at one.
pub fn scl_loss(tape: &mut Tape, batch: &ContrastiveBatch) -> Result<Var> {
    let n = batch.weights.len();
    let unit = ContrastiveBatch {
        weights: vec![vec![1.0; n]; n],
        ..batch.clone()
    };
    lcl_loss(tape, &unit)
}

/// Label-weighted supervised contrastive loss.
///
/// Representations are L2-normalised first. For every anchor with at least
/// one same-class partner, each partner `p` contributes
/// `−log(exp(z_a·z_p/τ) / Σ_m w[c_m][c_a]·exp(z_a·z_m/τ))`, averaged over
/// partners, where `m` ranges over every other representation (or only the
/// other-class ones when `strict_negatives`). Anchors without partners add
/// nothing, so a K=1 batch yields exactly zero.
pub fn lcl_loss(tape: &mut Tape, batch: &ContrastiveBatch) -> Result<Var> {
    let ContrastiveBatch {
        reps,
        labels,
        weights,
        tau,
        strict_negatives,
    } = batch;
    if *tau <= 0.0 || !tau.is_finite() {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    if reps.len() != labels.len() {
        return Err(Error::dim("lcl_loss", &[reps.len()], &[labels.len()]));
    }
    let classes = weights.len();
    if labels.iter().any(|&c| c >= classes) || weights.iter().any(|r| r.len() != classes) {
        return Err(Error::Contract("label weight matrix does not cover every class".into()));
    }

    let z: Vec<Var> = reps.iter().map(|&r| tape.normalize(r)).collect();
    let inv_tau = 1.0 / tau;
    let mut anchor_losses = Vec::new();
    for a in 0..z.len() {
        let positives: Vec<usize> = (0..z.len())
            .filter(|&p| p != a && labels[p] == labels[a])
            .collect();
        if positives.is_empty() {
            continue;
        }
        let others: Vec<usize> = (0..z.len())
            .filter(|&m| m != a && !(*strict_negatives && labels[m] == labels[a]))
            .collect();
        let mut logits = Vec::with_capacity(others.len());
        for &m in &others {
            let d = tape.dot(z[a], z[m])?;
            logits.push(tape.scale(d, inv_tau));
        }
        let log_den = if others.is_empty() {
            tape.constant(Tensor::scalar(DENOMINATOR_FLOOR.ln()))
        } else {
            let stacked = tape.stack(&logits)?;
            let e = tape.exp(stacked);
            let w = tape.constant(Tensor::vector(
                others.iter().map(|&m| weights[labels[m]][labels[a]]).collect(),
            ));
            let weighted = tape.mul(e, w)?;
            let den = tape.sum(weighted);
            let den = tape.clamp_min(den, DENOMINATOR_FLOOR);
            tape.log(den)
        };
        let mut terms = Vec::with_capacity(positives.len());
        for &p in &positives {
            let d = tape.dot(z[a], z[p])?;
            let num = tape.scale(d, inv_tau);
            terms.push(tape.sub(num, log_den)?);
        }
        let stacked = tape.stack(&terms)?;
        let mean = tape.mean(stacked);
        anchor_losses.push(tape.neg(mean));
    }
    if anchor_losses.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let stacked = tape.stack(&anchor_losses)?;
    Ok(tape.sum(stacked))
}

/// `mse + λ·contrastive`; with no contrastive term or `λ = 0` the MSE node is
/// returned unchanged.
pub fn total_loss(tape: &mut Tape, mse: Var, contrastive: Option<Var>, lambda: f64) -> Result<Var> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    match contrastive {
        Some(c) if lambda != 0.0 => {
            let scaled = tape.scale(c, lambda);
            tape.add(mse, scaled)
        }
        _ => Ok(mse),
    }
}
