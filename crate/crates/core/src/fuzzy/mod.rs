//! Fuzzy token alignment.
//!
//! A shared query attends over each modality's tokens. Every resulting query
//! token gets a Gaussian membership degree from its cosine agreement `r` with
//! the modality's class token,
//!
//! ```text
//! mu = exp(-(1 - r)^2 / (2 sigma^2)),   sigma = exp(MLP(class token))
//! ```
//!
//! and the two modalities are fused with the product t-norm. The pairwise
//! similarity of aerial sample `i` and text sample `j` is the
//! membership-weighted mean of the per-token cosines, which then feeds
//! similarity distribution matching.

mod crossformer;
mod params;

pub use crossformer::{crossformer_on_tape, log_sigma_on_tape};
pub use params::{
    Attention, CrossFormerParams, FeedForward, FuzzyParams, FuzzyShape, LayerNorm, SelfBlock,
    SharedQuery, SigmaMlp,
};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numeric::{cosine_sim, Matrix, Tape, Var};
use crate::sdm::sdm_from_similarity;

/// Token features for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenFeatures {
    /// `B*N x D`; sample `i` owns rows `i*N..(i+1)*N`.
    pub tokens: Matrix,
    /// `B x D` global class tokens.
    pub class_tokens: Matrix,
    pub tokens_per_sample: usize,
}

impl TokenFeatures {
    pub fn new(tokens: Matrix, class_tokens: Matrix, tokens_per_sample: usize) -> Result<Self> {
        let ok = tokens_per_sample >= 1
            && tokens.rows() == class_tokens.rows() * tokens_per_sample
            && tokens.cols() == class_tokens.cols();
        if !ok {
            return Err(shape_err(
                "TokenFeatures",
                format!(
                    "tokens {:?}, class {:?}, {tokens_per_sample} per sample",
                    tokens.shape(),
                    class_tokens.shape()
                ),
            ));
        }
        Ok(Self {
            tokens,
            class_tokens,
            tokens_per_sample,
        })
    }

    pub fn batch(&self) -> usize {
        self.class_tokens.rows()
    }

    pub fn dim(&self) -> usize {
        self.class_tokens.cols()
    }

    pub fn sample_tokens(&self, i: usize) -> Result<Matrix> {
        self.tokens
            .slice_rows(i * self.tokens_per_sample, self.tokens_per_sample)
    }
}

/// Reliability values of the query tokens for one aerial/text pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MembershipVector {
    pub mu_a: Vec<f64>,
    pub mu_t: Vec<f64>,
    pub mu_joint: Vec<f64>,
    pub sigma_a: f64,
    pub sigma_t: f64,
}

impl MembershipVector {
    pub fn new(mu_a: Vec<f64>, mu_t: Vec<f64>, sigma_a: f64, sigma_t: f64) -> Self {
        let mu_joint = fuzzy_and(&mu_a, &mu_t);
        Self {
            mu_a,
            mu_t,
            mu_joint,
            sigma_a,
            sigma_t,
        }
    }
}

/// How the per-token cosines are weighted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Product of Gaussian memberships.
    Fuzzy,
    /// Every membership fixed at 1.
    Uniform,
}

/// Runs the interaction stack for every sample; output is `B*K x D`.
pub fn crossformer(
    query: &SharedQuery,
    context: &TokenFeatures,
    params: &CrossFormerParams,
) -> Result<Matrix> {
    let mut tape = Tape::new();
    let q = tape.constant(query.tokens.clone());
    let c = tape.constant(context.tokens.clone());
    let p = params.map(&mut |m| tape.constant(m.clone()));
    let out = crossformer_on_tape(&mut tape, q, c, context.tokens_per_sample, &p)?;
    Ok(tape.value(out).clone())
}

/// `exp(MLP(class_token))`.
pub fn predict_sigma(class_token: &[f64], mlp: &SigmaMlp) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(Matrix::row_vector(class_token));
    let p = mlp.map(&mut |m| tape.constant(m.clone()));
    let log_sigma = log_sigma_on_tape(&mut tape, x, &p)?;
    let sigma = tape.value(log_sigma).item().exp();
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::NonFinite("predict_sigma"));
    }
    Ok(sigma)
}

/// Gaussian membership of a query token relative to the class token.
pub fn membership(query_token: &[f64], class_token: &[f64], sigma: f64) -> Result<f64> {
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "sigma must be > 0, got {sigma}"
        )));
    }
    let r = cosine_sim(query_token, class_token)?.clamp(-1.0, 1.0);
    Ok(membership_from_agreement(r, sigma))
}

/// Floor applied where the Gaussian underflows, keeping memberships positive.
pub const MIN_MEMBERSHIP: f64 = f64::MIN_POSITIVE;

pub fn membership_from_agreement(r: f64, sigma: f64) -> f64 {
    let gap = 1.0 - r;
    (-(gap * gap) / (2.0 * sigma * sigma))
        .exp()
        .max(MIN_MEMBERSHIP)
}

/// Product t-norm.
pub fn fuzzy_and(mu_a: &[f64], mu_t: &[f64]) -> Vec<f64> {
    assert_eq!(
        mu_a.len(),
        mu_t.len(),
        "membership vectors differ in length"
    );
    mu_a.iter().zip(mu_t).map(|(a, t)| a * t).collect()
}

/// `1/K sum_j mu_j cos(qa_j, qt_j)`.
pub fn weighted_similarity(qa: &Matrix, qt: &Matrix, mu_joint: &[f64]) -> Result<f64> {
    if qa.shape() != qt.shape() || qa.rows() != mu_joint.len() || qa.rows() == 0 {
        return Err(shape_err(
            "weighted_similarity",
            format!(
                "{:?} vs {:?} with {} weights",
                qa.shape(),
                qt.shape(),
                mu_joint.len()
            ),
        ));
    }
    let mut total = 0.0;
    for (j, &mu) in mu_joint.iter().enumerate() {
        if mu == 0.0 {
            // suppressed tokens contribute nothing whatever their content
            continue;
        }
        total += mu * cosine_sim(qa.row(j), qt.row(j))?;
    }
    Ok(total / qa.rows() as f64)
}

/// Tape handles for one modality's token inputs.
#[derive(Debug, Clone, Copy)]
pub struct TokenVars {
    pub tokens: Var,
    pub class_tokens: Var,
    pub tokens_per_sample: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FtaConfig {
    pub tau: f64,
    pub eps: f64,
    pub weighting: Weighting,
}

/// Tape nodes of the token loss.
#[derive(Debug, Clone, Copy)]
pub struct FtaTerms {
    pub loss: Var,
    /// `B x B`, entry `(i, j)` pairs aerial `i` with text `j`.
    pub similarity: Var,
    /// `B x K` memberships, absent under uniform weighting.
    pub mu_aerial: Option<Var>,
    pub mu_text: Option<Var>,
    /// `B x 1` log-scales.
    pub log_sigma_aerial: Option<Var>,
    pub log_sigma_text: Option<Var>,
}

struct Side {
    unit_queries: Var,
    mu: Option<Var>,
    log_sigma: Option<Var>,
}

fn modality_side(
    tape: &mut Tape,
    input: TokenVars,
    params: &FuzzyParams<Var>,
    mlp: &SigmaMlp<Var>,
    weighting: Weighting,
) -> Result<Side> {
    let k = tape.value(params.query).rows();
    let b = tape.value(input.class_tokens).rows();
    let queries = crossformer_on_tape(
        tape,
        params.query,
        input.tokens,
        input.tokens_per_sample,
        &params.crossformer,
    )?;
    if tape.value(queries).rows() != b * k {
        return Err(shape_err("fta", "token and class batch sizes differ"));
    }
    let unit_queries = tape.normalize_rows(queries)?;
    if weighting == Weighting::Uniform {
        return Ok(Side {
            unit_queries,
            mu: None,
            log_sigma: None,
        });
    }

    let owner: Vec<usize> = (0..b * k).map(|row| row / k).collect();
    let unit_class = tape.normalize_rows(input.class_tokens)?;
    let class_per_query = tape.gather_rows(unit_class, owner.clone())?;
    let dots = tape.mul(unit_queries, class_per_query)?;
    let r = tape.sum_rows(dots)?;
    let r = tape.clamp(r, -1.0, 1.0)?;

    let log_sigma = log_sigma_on_tape(tape, input.class_tokens, mlp)?;
    // 1 / (2 sigma^2) = exp(-2 log sigma) / 2
    let inv_var = tape.scale(log_sigma, -2.0)?;
    let inv_var = tape.exp(inv_var)?;
    let inv_var = tape.scale(inv_var, 0.5)?;
    let inv_var = tape.gather_rows(inv_var, owner)?;

    let gap = tape.scale(r, -1.0)?;
    let gap = tape.shift(gap, 1.0)?;
    let gap_sq = tape.mul(gap, gap)?;
    let exponent = tape.mul(gap_sq, inv_var)?;
    let exponent = tape.scale(exponent, -1.0)?;
    let mu = tape.exp(exponent)?;
    let mu = tape.clamp(mu, MIN_MEMBERSHIP, 1.0)?;
    let mu = tape.reshape(mu, b, k)?;
    Ok(Side {
        unit_queries,
        mu: Some(mu),
        log_sigma: Some(log_sigma),
    })
}

/// Records the token loss on `tape`.
pub fn fta_on_tape(
    tape: &mut Tape,
    text: TokenVars,
    aerial: TokenVars,
    identities: &[u32],
    params: &FuzzyParams<Var>,
    cfg: FtaConfig,
) -> Result<FtaTerms> {
    let b = identities.len();
    let k = tape.value(params.query).rows();
    for side in [text, aerial] {
        if tape.value(side.class_tokens).rows() != b {
            return Err(shape_err(
                "fta",
                format!(
                    "{} class tokens for {b} identities",
                    tape.value(side.class_tokens).rows()
                ),
            ));
        }
    }
    let a = modality_side(tape, aerial, params, &params.sigma_aerial, cfg.weighting)?;
    let t = modality_side(tape, text, params, &params.sigma_text, cfg.weighting)?;

    let mu_cols = |tape: &mut Tape, mu: Var| -> Result<Var> { tape.transpose(mu) };
    let mu_a_t = a.mu.map(|m| mu_cols(tape, m)).transpose()?;
    let mu_t_t = t.mu.map(|m| mu_cols(tape, m)).transpose()?;

    let mut total: Option<Var> = None;
    for j in 0..k {
        let rows: Vec<usize> = (0..b).map(|i| i * k + j).collect();
        let qa = tape.gather_rows(a.unit_queries, rows.clone())?;
        let qt = tape.gather_rows(t.unit_queries, rows)?;
        let qt_t = tape.transpose(qt)?;
        let mut term = tape.matmul(qa, qt_t)?;
        if let (Some(ma), Some(mt)) = (mu_a_t, mu_t_t) {
            // outer product of token j's memberships: aerial i x text j
            let col_a = tape.slice_rows(ma, j, 1)?;
            let col_a = tape.transpose(col_a)?;
            let row_t = tape.slice_rows(mt, j, 1)?;
            let joint = tape.matmul(col_a, row_t)?;
            term = tape.mul(term, joint)?;
        }
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    let total = total.ok_or_else(|| shape_err("fta", "no query tokens"))?;
    let similarity = tape.scale(total, 1.0 / k as f64)?;
    let sdm = sdm_from_similarity(tape, similarity, identities, cfg.tau, cfg.eps)?;
    Ok(FtaTerms {
        loss: sdm.loss,
        similarity,
        mu_aerial: a.mu,
        mu_text: t.mu,
        log_sigma_aerial: a.log_sigma,
        log_sigma_text: t.log_sigma,
    })
}

/// Loss value, diagnostics, and parameter gradients of the token loss.
#[derive(Debug, Clone)]
pub struct FtaOutput {
    pub loss: f64,
    pub similarity: Matrix,
    /// One entry per matched (aerial `i`, text `i`) pair.
    pub memberships: Vec<MembershipVector>,
    pub grads: FuzzyParams,
}

pub fn fta_loss(
    text: &TokenFeatures,
    aerial: &TokenFeatures,
    identities: &[u32],
    params: &FuzzyParams,
    tau: f64,
    eps: f64,
) -> Result<FtaOutput> {
    let mut tape = Tape::new();
    let bound = params.map(&mut |m| tape.param(m.clone()));
    let vars = |tape: &mut Tape, f: &TokenFeatures| TokenVars {
        tokens: tape.constant(f.tokens.clone()),
        class_tokens: tape.constant(f.class_tokens.clone()),
        tokens_per_sample: f.tokens_per_sample,
    };
    let (tv, av) = (vars(&mut tape, text), vars(&mut tape, aerial));
    let cfg = FtaConfig {
        tau,
        eps,
        weighting: Weighting::Fuzzy,
    };
    let terms = fta_on_tape(&mut tape, tv, av, identities, &bound, cfg)?;
    let grads = tape.backward(terms.loss)?;

    let memberships = match (
        terms.mu_aerial,
        terms.mu_text,
        terms.log_sigma_aerial,
        terms.log_sigma_text,
    ) {
        (Some(ma), Some(mt), Some(sa), Some(st)) => (0..identities.len())
            .map(|i| {
                MembershipVector::new(
                    tape.value(ma).row(i).to_vec(),
                    tape.value(mt).row(i).to_vec(),
                    tape.value(sa).get(i, 0).exp(),
                    tape.value(st).get(i, 0).exp(),
                )
            })
            .collect(),
        _ => Vec::new(),
    };
    Ok(FtaOutput {
        loss: tape.value(terms.loss).item(),
        similarity: tape.value(terms.similarity).clone(),
        memberships,
        grads: bound.map(&mut |v| grads.get(*v)),
    })
}
