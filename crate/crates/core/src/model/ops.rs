//! The individual stages of the network, each a function over a tape.

use crate::autodiff::{cosine_raw, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Token-level attention logits `tanh(H·W_a)·v_a`, shape `[l]`.
pub fn attention_scores(tape: &mut Tape, h: Var, att_w: Var, att_v: Var) -> Result<Var> {
    let proj = tape.matmul(h, att_w)?;
    let act = tape.tanh(proj);
    let hidden = tape.value(att_v).len();
    let v = tape.reshape(att_v, vec![hidden, 1])?;
    let s = tape.matmul(act, v)?;
    let l = tape.value(s).len();
    tape.reshape(s, vec![l])
}

/// Additive self-attention `β = softmax(tanh(H·W_a)·v_a)` over unmasked rows.
pub fn base_attention(tape: &mut Tape, h: Var, mask: &[bool], att_w: Var, att_v: Var) -> Result<Var> {
    let s = attention_scores(tape, h, att_w, att_v)?;
    tape.softmax(s, Some(mask))
}

/// Cosine between the label embedding and each word vector; zero at masked
/// positions and for zero vectors.
pub fn label_similarity(words: &Tensor, mask: &[bool], label: &[f64]) -> Result<Tensor> {
    let s = words.shape();
    if s.len() != 2 || s[0] != mask.len() || s[1] != label.len() {
        return Err(Error::dim("label_similarity", s, &[mask.len(), label.len()]));
    }
    let alpha = (0..s[0])
        .map(|i| {
            if mask[i] {
                cosine_raw(words.row(i), label)
            } else {
                0.0
            }
        })
        .collect();
    Ok(Tensor::vector(alpha))
}

/// Label-gated attention: per position `θ_i = w_0·α_i + w_1·s_i + b`, then
/// `θ̃ = softmax(θ)` over unmasked positions.
///
/// `scores` is the attention signal being gated. The model passes the
/// attention logits, so a gate of `(0, 1)` with zero bias reproduces the base
/// attention distribution exactly.
pub fn gated_attention(
    tape: &mut Tape,
    alpha: Var,
    scores: Var,
    mask: &[bool],
    gate_w: Var,
    gate_b: Var,
) -> Result<Var> {
    if tape.value(gate_w).len() != 2 {
        return Err(Error::dim("gated_attention", tape.value(gate_w).shape(), &[1, 2]));
    }
    let w_alpha = tape.element(gate_w, 0)?;
    let w_scores = tape.element(gate_w, 1)?;
    let a = tape.mul_scalar(alpha, w_alpha)?;
    let b = tape.mul_scalar(scores, w_scores)?;
    let theta = tape.add(a, b)?;
    let theta = tape.add_scalar(theta, gate_b)?;
    tape.softmax(theta, Some(mask))
}

/// `r = Σ_i weights_i · H_i`.
pub fn instance_representation(tape: &mut Tape, h: Var, weights: Var) -> Result<Var> {
    let l = tape.value(weights).len();
    let row = tape.reshape(weights, vec![1, l])?;
    let r = tape.matmul(row, h)?;
    let hidden = tape.value(r).len();
    tape.reshape(r, vec![hidden])
}

/// Prototype as the mean of the K instance representations.
pub fn aggregate_prototype(tape: &mut Tape, reps: &[Var]) -> Result<Var> {
    if reps.is_empty() {
        return Err(Error::Contract("prototype of zero instances".into()));
    }
    let stacked = tape.stack(reps)?;
    tape.mean_rows(stacked)
}

/// Scaled dot-product logits `H_q·r^n/√hidden`, shape `[l]`.
pub fn query_logits(tape: &mut Tape, h_q: Var, prototype: Var) -> Result<Var> {
    let hidden = tape.value(prototype).len();
    let probe = tape.reshape(prototype, vec![hidden, 1])?;
    let s = tape.matmul(h_q, probe)?;
    let s = tape.scale(s, 1.0 / (hidden as f64).sqrt());
    let l = tape.value(s).len();
    tape.reshape(s, vec![l])
}

/// Prototype-specific query representation: attend over the query's rows
/// with the prototype as probe.
pub fn query_representation(tape: &mut Tape, h_q: Var, mask: &[bool], prototype: Var) -> Result<Var> {
    let logits = query_logits(tape, h_q, prototype)?;
    let w = tape.softmax(logits, Some(mask))?;
    instance_representation(tape, h_q, w)
}

/// `ŷ = softmax_n(−‖r^n − r_i^n‖)`.
pub fn score_query(tape: &mut Tape, prototypes: &[Var], query_reps: &[Var]) -> Result<Var> {
    if prototypes.len() < 2 || prototypes.len() != query_reps.len() {
        return Err(Error::Contract(format!(
            "scoring needs N >= 2 prototypes and as many query representations, got {} and {}",
            prototypes.len(),
            query_reps.len()
        )));
    }
    let dists = prototypes
        .iter()
        .zip(query_reps)
        .map(|(&p, &q)| tape.euclidean_distance(p, q))
        .collect::<Result<Vec<_>>>()?;
    let d = tape.stack(&dists)?;
    let neg = tape.neg(d);
    tape.softmax(neg, None)
}

/// Decision threshold for an N-way episode: 0.3 for 5-way, 0.2 for 10-way,
/// otherwise whatever was configured.
pub fn threshold_for(n_way: usize, configured: Option<f64>) -> Result<f64> {
    if let Some(t) = configured {
        return Ok(t);
    }
    match n_way {
        5 => Ok(0.3),
        10 => Ok(0.2),
        _ => Err(Error::Config(format!(
            "no decision threshold known for {n_way}-way episodes; configure one"
        ))),
    }
}

/// Multi-label decision: class `n` is predicted iff `ŷ_n > threshold`.
pub fn predict(scores: &[f64], threshold: f64) -> Vec<bool> {
    scores.iter().map(|&s| s > threshold).collect()
}
