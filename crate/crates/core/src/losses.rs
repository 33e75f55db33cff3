//! Classification and similarity losses.
//!
//! The similarity penalty between a predicted online embedding `p(z1)` and a
//! target embedding `z2` is `2 − 2·cos(p(z1), z2)`, which lies in `[0, 4]`.
//! It is combined with cross-entropy as `(1 − γ)·CE + γ·SR`.

use crate::error::{Error, Result};

/// Floor applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() != b.len() {
        return Err(Error::Domain(format!(
            "embedding lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if !(na > 0.0 && nb > 0.0) || !na.is_finite() || !nb.is_finite() {
        return Err(Error::Domain(
            "cosine similarity needs finite, nonzero-norm embeddings".into(),
        ));
    }
    Ok((na, nb))
}

/// `⟨a, b⟩ / (‖a‖·‖b‖)`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = check_pair(a, b)?;
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Similarity penalty `2 − 2·cos(pz1, z2)`.
pub fn sr_penalty(pz1: &[f64], z2: &[f64]) -> Result<f64> {
    Ok(2.0 - 2.0 * cosine_similarity(pz1, z2)?)
}

/// Penalty and its gradient with respect to `pz1`. `z2` is treated as a constant.
pub fn sr_penalty_grad(pz1: &[f64], z2: &[f64]) -> Result<(f64, Vec<f64>)> {
    let (np, nz) = check_pair(pz1, z2)?;
    let s = dot(pz1, z2) / (np * nz);
    let grad = pz1
        .iter()
        .zip(z2)
        .map(|(p, z)| -2.0 * (z / (np * nz) - s * p / (np * np)))
        .collect();
    Ok((2.0 - 2.0 * s.clamp(-1.0, 1.0), grad))
}

/// Mean of the two directional penalties of a symmetric view pair.
pub fn symmetric_sr(pz1_1: &[f64], z2_1: &[f64], pz1_2: &[f64], z2_2: &[f64]) -> Result<f64> {
    Ok(0.5 * sr_penalty(pz1_1, z2_1)? + 0.5 * sr_penalty(pz1_2, z2_2)?)
}

/// Label-smoothed one-hot target `(1 − ε)·onehot + ε/K`.
pub fn smoothed_target(label: usize, classes: usize, epsilon: f64) -> Result<Vec<f64>> {
    if label >= classes {
        return Err(Error::Domain(format!(
            "label {label} out of range for {classes} classes"
        )));
    }
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::Config(format!("label smoothing {epsilon} outside [0, 1)")));
    }
    let mut t = vec![epsilon / classes as f64; classes];
    t[label] += 1.0 - epsilon;
    Ok(t)
}

/// Two-label target `λ·onehot(a) + (1 − λ)·onehot(b)`.
pub fn mixed_target(label_a: usize, label_b: usize, lambda: f64, classes: usize) -> Result<Vec<f64>> {
    if label_a >= classes || label_b >= classes {
        return Err(Error::Domain(format!(
            "labels ({label_a}, {label_b}) out of range for {classes} classes"
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Domain(format!("mix ratio {lambda} outside [0, 1]")));
    }
    let mut t = vec![0.0; classes];
    t[label_a] += lambda;
    t[label_b] += 1.0 - lambda;
    Ok(t)
}

/// `−Σ tᵢ·ln(max(predᵢ, 1e-12))`.
pub fn cross_entropy(pred: &[f64], target: &[f64]) -> f64 {
    -pred
        .iter()
        .zip(target)
        .map(|(p, t)| t * p.max(PROB_FLOOR).ln())
        .sum::<f64>()
}

/// Cross-entropy against a label-smoothed target.
pub fn smoothed_cross_entropy(pred: &[f64], label: usize, epsilon: f64) -> Result<f64> {
    if pred.len() < 2 {
        return Err(Error::Domain("cross-entropy needs at least two classes".into()));
    }
    Ok(cross_entropy(pred, &smoothed_target(label, pred.len(), epsilon)?))
}

/// `λ·CE(pred, a) + (1 − λ)·CE(pred, b)` with unsmoothed targets.
pub fn mixed_cross_entropy(pred: &[f64], label_a: usize, label_b: usize, lambda: f64) -> Result<f64> {
    Ok(cross_entropy(
        pred,
        &mixed_target(label_a, label_b, lambda, pred.len())?,
    ))
}

/// Cross-entropy of `softmax(logits)` against `target`, with the gradient
/// with respect to the logits. Components whose probability falls below the
/// log floor contribute a constant and no gradient.
pub fn cross_entropy_with_logits(logits: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    let floor = PROB_FLOOR.ln();
    let mut loss = 0.0;
    let mut live_mass = 0.0;
    let mut grad: Vec<f64> = Vec::with_capacity(logits.len());
    for (z, t) in logits.iter().zip(target) {
        let logp = z - lse;
        if logp >= floor {
            loss -= t * logp;
            live_mass += t;
            grad.push(-t);
        } else {
            loss -= t * floor;
            grad.push(0.0);
        }
    }
    for (g, z) in grad.iter_mut().zip(logits) {
        *g += (z - lse).exp() * live_mass;
    }
    (loss, grad)
}

/// Loss terms of one step. `total == (1 − gamma)·ce + gamma·sr`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub sr: f64,
    pub gamma: f64,
    pub total: f64,
}

pub fn combine(ce: f64, sr: f64, gamma: f64) -> Result<LossBreakdown> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Config(format!("gamma {gamma} outside [0, 1]")));
    }
    Ok(LossBreakdown {
        ce,
        sr,
        gamma,
        total: (1.0 - gamma) * ce + gamma * sr,
    })
}
