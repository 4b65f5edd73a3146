use crate::error::{shape_err, Error, Result};

use super::matrix::Matrix;

/// Norms below this are treated as degenerate embeddings.
pub const MIN_NORM: f64 = 1e-12;

/// Cosine similarity of two equal-length vectors.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(shape_err(
            "cosine_sim",
            format!("lengths {} and {}", a.len(), b.len()),
        ));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    for norm in [na, nb] {
        if norm < MIN_NORM {
            return Err(Error::ZeroNorm { norm });
        }
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(dot / (na * nb))
}

/// Logistic function `1 / (1 + exp(-k x))`, branching on sign so neither
/// side overflows.
pub fn sigmoid(x: f64, k: f64) -> f64 {
    let z = k * x;
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Temperature softmax with max subtraction.
pub fn softmax_row(logits: &[f64], tau: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| ((x - max) / tau).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `sum_ij p_ij * ln(p_ij / (q_ij + eps))`, with `0 * ln 0 = 0`.
///
/// May return `+inf` when `q_ij + eps == 0` for a positive `p_ij`.
pub fn kl_weighted_sum(p: &Matrix, q: &Matrix, eps: f64) -> Result<f64> {
    if p.shape() != q.shape() {
        return Err(shape_err(
            "kl_weighted_sum",
            format!("{:?} vs {:?}", p.shape(), q.shape()),
        ));
    }
    Ok(p.as_slice()
        .iter()
        .zip(q.as_slice())
        .map(|(&pv, &qv)| {
            if pv == 0.0 {
                0.0
            } else {
                pv * (pv / (qv + eps)).ln()
            }
        })
        .sum())
}
