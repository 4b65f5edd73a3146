//! Similarity distribution matching.
//!
//! For similarities `s_ij` between sample `i` of one side and sample `j` of the
//! other, the loss compares the temperature softmax of each row against the
//! label distribution `q_ij = y_ij / sum_k y_ik` (with `y_ij = 1` iff the
//! identities match), in both retrieval directions:
//!
//! ```text
//! L = 1/2 sum_ij [ p_ij ln(p_ij / (q_ij + eps)) + p'_ij ln(p'_ij / (q_ij + eps)) ]
//! ```
//!
//! where `p` is the row softmax of `S / tau` and `p'` the row softmax of
//! `S^T / tau`. The `eps` guard touches `q` only.

use crate::error::{shape_err, Error, Result};
use crate::numeric::{Matrix, Tape, Var};

pub const DEFAULT_TAU: f64 = 0.02;
pub const DEFAULT_EPS: f64 = 1e-8;

/// Two aligned feature matrices with one identity per row.
#[derive(Debug, Clone)]
pub struct LabeledBatch {
    pub features_a: Matrix,
    pub features_b: Matrix,
    pub identities: Vec<u32>,
}

impl LabeledBatch {
    pub fn new(features_a: Matrix, features_b: Matrix, identities: Vec<u32>) -> Result<Self> {
        let batch = Self {
            features_a,
            features_b,
            identities,
        };
        batch.validate()?;
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let b = self.identities.len();
        if self.features_a.shape() != self.features_b.shape() || self.features_a.rows() != b {
            return Err(shape_err(
                "LabeledBatch",
                format!(
                    "{:?} / {:?} with {b} identities",
                    self.features_a.shape(),
                    self.features_b.shape()
                ),
            ));
        }
        Ok(())
    }
}

/// Cosine similarity of every row of `a` against every row of `b`.
pub fn pairwise_cosine(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let sim = cosine_matrix(&mut tape, va, vb)?;
    Ok(tape.value(sim).clone())
}

/// `normalize(a) normalize(b)^T` on the tape.
pub fn cosine_matrix(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    if tape.value(a).cols() != tape.value(b).cols() {
        return Err(shape_err(
            "pairwise_cosine",
            format!("{:?} vs {:?}", tape.value(a).shape(), tape.value(b).shape()),
        ));
    }
    let na = tape.normalize_rows(a)?;
    let nb = tape.normalize_rows(b)?;
    let nbt = tape.transpose(nb)?;
    tape.matmul(na, nbt)
}

/// Row-normalized identity-match matrix `q`.
pub fn label_distribution(identities: &[u32]) -> Result<Matrix> {
    let b = identities.len();
    let mut q = Matrix::zeros(b, b);
    for (i, id) in identities.iter().enumerate() {
        let positives = identities.iter().filter(|other| *other == id).count();
        if positives == 0 {
            return Err(Error::NoPositive { row: i });
        }
        for (j, other) in identities.iter().enumerate() {
            if other == id {
                q.set(i, j, 1.0 / positives as f64);
            }
        }
    }
    Ok(q)
}

/// Nodes produced by [`sdm_from_similarity`].
#[derive(Debug, Clone, Copy)]
pub struct SdmTerms {
    /// 1x1 total loss.
    pub loss: Var,
    /// `B x 1` column; row `i` sums the contributions of row `i` in both
    /// directions, so the column sums to `loss`.
    pub per_sample: Var,
}

fn check_hyper(tau: f64, eps: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "tau must be > 0, got {tau}"
        )));
    }
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "eps must be >= 0, got {eps}"
        )));
    }
    Ok(())
}

/// Builds the loss from a `B x B` similarity node.
pub fn sdm_from_similarity(
    tape: &mut Tape,
    sim: Var,
    identities: &[u32],
    tau: f64,
    eps: f64,
) -> Result<SdmTerms> {
    check_hyper(tau, eps)?;
    let b = identities.len();
    if b < 2 {
        return Err(Error::InvalidArgument(format!(
            "similarity matching needs a batch of at least 2, got {b}"
        )));
    }
    if tape.value(sim).shape() != (b, b) {
        return Err(shape_err(
            "sdm",
            format!(
                "similarity {:?} for {b} identities",
                tape.value(sim).shape()
            ),
        ));
    }
    let q = label_distribution(identities)?;
    // ln q + ln(1 + eps / q) so a tiny eps is not lost against q = 1
    let log_q = q.map(|v| {
        if v > 0.0 {
            v.ln() + (eps / v).ln_1p()
        } else {
            eps.ln()
        }
    });
    if !log_q.is_finite() {
        // p > 0 everywhere, so a zero label entry without eps diverges
        return Err(Error::NonFinite("sdm: zero label mass with eps = 0"));
    }
    let log_q = tape.constant(log_q);

    let logits = tape.scale(sim, 1.0 / tau)?;
    let logits_t = tape.transpose(logits)?;
    let mut rows = Vec::with_capacity(2);
    for direction in [logits, logits_t] {
        let log_p = tape.log_softmax_rows(direction)?;
        let p = tape.exp(log_p)?;
        let ratio = tape.sub(log_p, log_q)?;
        let terms = tape.mul(p, ratio)?;
        rows.push(tape.sum_rows(terms)?);
    }
    let both = tape.add(rows[0], rows[1])?;
    let per_sample = tape.scale(both, 0.5)?;
    let loss = tape.sum(per_sample);
    Ok(SdmTerms { loss, per_sample })
}

/// Cosine similarities of `a` against `b`, then [`sdm_from_similarity`].
pub fn sdm_on_tape(
    tape: &mut Tape,
    a: Var,
    b: Var,
    identities: &[u32],
    tau: f64,
    eps: f64,
) -> Result<SdmTerms> {
    let sim = cosine_matrix(tape, a, b)?;
    sdm_from_similarity(tape, sim, identities, tau, eps)
}

/// Loss value, per-sample attribution, and feature gradients.
#[derive(Debug, Clone)]
pub struct SdmOutput {
    pub loss: f64,
    pub per_sample: Vec<f64>,
    pub grad_a: Matrix,
    pub grad_b: Matrix,
}

pub fn sdm(batch: &LabeledBatch, tau: f64, eps: f64) -> Result<SdmOutput> {
    batch.validate()?;
    let mut tape = Tape::new();
    let a = tape.param(batch.features_a.clone());
    let b = tape.param(batch.features_b.clone());
    let terms = sdm_on_tape(&mut tape, a, b, &batch.identities, tau, eps)?;
    let grads = tape.backward(terms.loss)?;
    Ok(SdmOutput {
        loss: tape.value(terms.loss).item(),
        per_sample: tape.value(terms.per_sample).as_slice().to_vec(),
        grad_a: grads.get(a),
        grad_b: grads.get(b),
    })
}
