//! Softmax, cross-entropy, KL divergence and entropy primitives.

use crate::error::{dim_err, Error, Result};

/// Floor added inside the log of the cross-entropy.
pub const CE_FLOOR: f64 = 1e-12;
/// Floor applied to the target distribution of a KL divergence.
pub const KL_FLOOR: f64 = 1e-8;

/// Numerically stable softmax of one row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

/// `−ln(p[label] + 1e-12)`.
pub fn cross_entropy(probs: &[f64], label: usize) -> Result<f64> {
    let p = probs
        .get(label)
        .ok_or(Error::Index { index: label, len: probs.len() })?;
    Ok(-(p + CE_FLOOR).ln())
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    v.iter().map(|x| x / s).collect()
}

/// Floors `q` at [`KL_FLOOR`] and renormalizes it to unit mass.
pub fn floored_target(q: &[f64]) -> Vec<f64> {
    let floored: Vec<f64> = q.iter().map(|&x| x.max(KL_FLOOR)).collect();
    normalized(&floored)
}

#[inline]
fn xlogy_ratio(p: f64, q: f64) -> f64 {
    if p <= 0.0 {
        0.0
    } else {
        p * (p / q).ln()
    }
}

/// `D_KL(p ‖ q) = Σ pᵢ ln(pᵢ / qᵢ)` after renormalizing `p` and flooring `q`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(dim_err(format!("kl over lengths {} and {}", p.len(), q.len())));
    }
    let p = normalized(p);
    let q = floored_target(q);
    Ok(p.iter().zip(&q).map(|(&a, &b)| xlogy_ratio(a, b)).sum::<f64>().max(0.0))
}

/// Shannon entropy `−Σ p ln p`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// KL between the softmax of a logit segment and a (raw) target segment,
/// together with its gradient with respect to the segment logits.
///
/// Returns `None` when the target carries less than [`KL_FLOOR`] mass.
pub fn segment_kl(logits: &[f64], target: &[f64]) -> Option<(f64, Vec<f64>)> {
    let mass: f64 = target.iter().sum();
    if mass < KL_FLOOR {
        return None;
    }
    let p = softmax(logits);
    let q = floored_target(target);
    let terms: Vec<f64> = p
        .iter()
        .zip(&q)
        .map(|(&a, &b)| if a > 0.0 { (a / b).ln() } else { 0.0 })
        .collect();
    let kl: f64 = p.iter().zip(&terms).map(|(a, t)| a * t).sum();
    let grad = p.iter().zip(&terms).map(|(a, t)| a * (t - kl)).collect();
    Some((kl, grad))
}
