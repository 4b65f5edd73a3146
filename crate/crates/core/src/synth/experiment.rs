//! Training and evaluating loss compositions on a synthetic world.
//!
//! Encoders are identity maps followed by one learned `D x D` projection per
//! modality. Token features go through the same projection as their
//! modality's global features. Optimization is plain SGD with optional
//! gradient-norm clipping.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cda::{cda_on_tape, Detached, GateConfig};
use crate::error::{Error, Result};
use crate::fuzzy::{
    crossformer, fta_on_tape, fuzzy_and, membership, predict_sigma, FtaConfig, FuzzyParams,
    FuzzyShape, SharedQuery, TokenFeatures, TokenVars, Weighting,
};
use crate::metrics::{evaluate_scores, MetricReport, DEFAULT_CUTOFFS};
use crate::numeric::{cosine_sim, Matrix, Tape, Var};
use crate::sdm::{sdm_on_tape, DEFAULT_EPS, DEFAULT_TAU};
use crate::synth::world::{ModalitySamples, SyntheticWorld};

/// Which losses are trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Direct text-aerial SDM only.
    BaselineSdm,
    /// Gated direct and ground-bridged SDM.
    Cda,
    /// Gated SDM plus the fuzzy token loss.
    CdaFta,
    /// Gated SDM plus the token loss with every membership fixed at 1.
    FtaUnweighted,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::BaselineSdm,
        Variant::Cda,
        Variant::CdaFta,
        Variant::FtaUnweighted,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::BaselineSdm => "baseline_sdm",
            Variant::Cda => "cda",
            Variant::CdaFta => "cda_fta",
            Variant::FtaUnweighted => "fta_unweighted",
        }
    }

    pub fn uses_ground(self) -> bool {
        self != Variant::BaselineSdm
    }

    /// Token weighting, or `None` when the token loss is off.
    pub fn weighting(self) -> Option<Weighting> {
        match self {
            Variant::CdaFta => Some(Weighting::Fuzzy),
            Variant::FtaUnweighted => Some(Weighting::Uniform),
            _ => None,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown variant `{s}` (expected baseline_sdm, cda, cda_fta or fta_unweighted)"
                ))
            })
    }
}

/// Loss hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignmentConfig {
    /// Gate sharpness.
    pub k: f64,
    pub tau: f64,
    pub eps: f64,
    /// Learnable query tokens.
    pub num_queries: usize,
    /// Self-attention blocks after the cross-attention layer.
    pub depth: usize,
    pub ffn_mult: usize,
    pub sigma_hidden: usize,
    /// Weight of the token loss in the total.
    pub fta_weight: f64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            k: crate::cda::DEFAULT_K,
            tau: DEFAULT_TAU,
            eps: DEFAULT_EPS,
            num_queries: 4,
            depth: 2,
            ffn_mult: 4,
            sigma_hidden: 32,
            fta_weight: 1.0,
        }
    }
}

fn invalid(field: &str, message: impl Into<String>) -> Error {
    Error::ConfigInvalid {
        field: field.to_string(),
        message: message.into(),
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k.is_finite() && self.k > 0.0) {
            return Err(invalid("k", "must be positive"));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(invalid("tau", "must be positive"));
        }
        if !(self.eps.is_finite() && self.eps >= 0.0) {
            return Err(invalid("eps", "must be >= 0"));
        }
        if !(self.fta_weight.is_finite() && self.fta_weight >= 0.0) {
            return Err(invalid("fta_weight", "must be >= 0"));
        }
        for (field, v) in [
            ("num_queries", self.num_queries),
            ("ffn_mult", self.ffn_mult),
            ("sigma_hidden", self.sigma_hidden),
        ] {
            if v == 0 {
                return Err(invalid(field, "must be at least 1"));
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> FuzzyShape {
        FuzzyShape {
            num_queries: self.num_queries,
            depth: self.depth,
            ffn_mult: self.ffn_mult,
            sigma_hidden: self.sigma_hidden,
        }
    }

    fn gate(&self) -> GateConfig {
        GateConfig {
            k: self.k,
            tau: self.tau,
            eps: self.eps,
        }
    }
}

/// Optimizer settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 16,
            learning_rate: 0.05,
            clip_norm: Some(1.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(invalid("batch_size", "must be at least 2"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(invalid("learning_rate", "must be positive"));
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(invalid("clip_norm", "must be positive"));
            }
        }
        Ok(())
    }
}

/// Learned parameters: one projection per modality plus the token branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams<T = Matrix> {
    pub w_text: T,
    pub w_aerial: T,
    pub w_ground: T,
    pub fuzzy: Option<FuzzyParams<T>>,
}

impl<T> ModelParams<T> {
    pub fn map<U, F: FnMut(&T) -> U>(&self, f: &mut F) -> ModelParams<U> {
        ModelParams {
            w_text: f(&self.w_text),
            w_aerial: f(&self.w_aerial),
            w_ground: f(&self.w_ground),
            fuzzy: self.fuzzy.as_ref().map(|p| p.map(f)),
        }
    }

    pub fn leaves(&self) -> Vec<&T> {
        let mut out = vec![&self.w_text, &self.w_aerial, &self.w_ground];
        if let Some(p) = &self.fuzzy {
            out.extend(p.leaves());
        }
        out
    }

    pub fn leaves_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.w_text, &mut self.w_aerial, &mut self.w_ground];
        if let Some(p) = &mut self.fuzzy {
            out.extend(p.leaves_mut());
        }
        out
    }
}

impl ModelParams {
    /// Identity projections; token branch only for variants that use it.
    pub fn init(dim: usize, variant: Variant, align: &AlignmentConfig, rng: &mut impl Rng) -> Self {
        Self {
            w_text: Matrix::identity(dim),
            w_aerial: Matrix::identity(dim),
            w_ground: Matrix::identity(dim),
            fuzzy: variant
                .weighting()
                .map(|_| FuzzyParams::init(dim, align.shape(), rng)),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_text.rows()
    }
}

/// One optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub loss: f64,
    pub loss_direct: f64,
    pub loss_bridge: Option<f64>,
    pub loss_token: Option<f64>,
    pub mean_alpha: Option<f64>,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub variant: Variant,
    pub report: MetricReport,
    pub trace: Vec<TraceStep>,
    pub params: ModelParams,
    /// The variant asked for ground features the world does not have.
    pub degenerate: bool,
}

/// Sample indices of one training batch, aligned by identity.
struct BatchIndex {
    identities: Vec<u32>,
    text: Vec<usize>,
    aerial: Vec<usize>,
    ground: Option<Vec<usize>>,
}

struct Sampler<'a> {
    world: &'a SyntheticWorld,
    text: Vec<Vec<usize>>,
    aerial: Vec<Vec<usize>>,
    ground: Option<Vec<Vec<usize>>>,
}

impl<'a> Sampler<'a> {
    fn new(world: &'a SyntheticWorld) -> Self {
        let n = world.config.num_identities;
        Self {
            world,
            text: world.text.index_by_identity(n),
            aerial: world.aerial.index_by_identity(n),
            ground: world.ground.as_ref().map(|g| g.index_by_identity(n)),
        }
    }

    fn draw(&self, batch: usize, rng: &mut impl Rng) -> BatchIndex {
        let pool = &self.world.train_identities;
        let b = batch.min(pool.len());
        let identities: Vec<u32> = sample(rng, pool.len(), b)
            .into_iter()
            .map(|i| pool[i])
            .collect();
        let mut pick = |groups: &[Vec<usize>]| -> Vec<usize> {
            identities
                .iter()
                .map(|&c| {
                    let g = &groups[c as usize];
                    g[rng.random_range(0..g.len())]
                })
                .collect()
        };
        let text = pick(&self.text);
        let aerial = pick(&self.aerial);
        let ground = self.ground.as_ref().map(|g| pick(g));
        BatchIndex {
            identities,
            text,
            aerial,
            ground,
        }
    }
}

fn token_rows(samples: &[usize], n: usize) -> Vec<usize> {
    samples.iter().flat_map(|&s| s * n..(s + 1) * n).collect()
}

fn project(tape: &mut Tape, data: &ModalitySamples, rows: &[usize], w: Var) -> Result<Var> {
    let x = tape.constant(data.globals.gather_rows(rows)?);
    tape.matmul(x, w)
}

fn project_tokens(
    tape: &mut Tape,
    data: &ModalitySamples,
    rows: &[usize],
    n: usize,
    w: Var,
) -> Result<Var> {
    let tokens = data
        .tokens
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("modality has no token features".into()))?;
    let x = tape.constant(tokens.gather_rows(&token_rows(rows, n))?);
    tape.matmul(x, w)
}

struct StepLoss {
    total: Var,
    direct: Var,
    bridge: Option<Var>,
    token: Option<Var>,
    alpha: Vec<f64>,
}

fn record_loss(
    tape: &mut Tape,
    world: &SyntheticWorld,
    idx: &BatchIndex,
    params: &ModelParams<Var>,
    variant: Variant,
    align: &AlignmentConfig,
) -> Result<StepLoss> {
    let t = project(tape, &world.text, &idx.text, params.w_text)?;
    let a = project(tape, &world.aerial, &idx.aerial, params.w_aerial)?;
    let ids = &idx.identities;

    let mut out = if variant.uses_ground() {
        let g = match (&world.ground, &idx.ground) {
            (Some(data), Some(rows)) => Some(project(tape, data, rows, params.w_ground)?),
            _ => None,
        };
        let terms = cda_on_tape(tape, t, a, g, ids, align.gate(), Detached::default())?;
        StepLoss {
            total: terms.loss_total,
            direct: terms.loss_direct,
            bridge: terms.loss_bridge,
            token: None,
            alpha: terms.alpha,
        }
    } else {
        let sdm = sdm_on_tape(tape, t, a, ids, align.tau, align.eps)?;
        StepLoss {
            total: sdm.loss,
            direct: sdm.loss,
            bridge: None,
            token: None,
            alpha: Vec::new(),
        }
    };

    if let (Some(weighting), Some(fuzzy)) = (variant.weighting(), &params.fuzzy) {
        let n = world.config.tokens_per_sample;
        let text = TokenVars {
            tokens: project_tokens(tape, &world.text, &idx.text, n, params.w_text)?,
            class_tokens: t,
            tokens_per_sample: n,
        };
        let aerial = TokenVars {
            tokens: project_tokens(tape, &world.aerial, &idx.aerial, n, params.w_aerial)?,
            class_tokens: a,
            tokens_per_sample: n,
        };
        let cfg = FtaConfig {
            tau: align.tau,
            eps: align.eps,
            weighting,
        };
        let fta = fta_on_tape(tape, text, aerial, ids, fuzzy, cfg)?;
        let weighted = tape.scale(fta.loss, align.fta_weight)?;
        out.total = tape.add(out.total, weighted)?;
        out.token = Some(fta.loss);
    }
    Ok(out)
}

fn as_diverged(err: Error, step: usize) -> Error {
    match err {
        Error::NonFinite(_) => Error::Diverged {
            step,
            last_finite: step.checked_sub(1),
        },
        other => other,
    }
}

/// Runs SGD from `params`, returning the per-step trace.
pub fn train(
    world: &SyntheticWorld,
    variant: Variant,
    align: &AlignmentConfig,
    cfg: &TrainConfig,
    params: &mut ModelParams,
) -> Result<Vec<TraceStep>> {
    align.validate()?;
    cfg.validate()?;
    if variant.weighting().is_some() && params.fuzzy.is_none() {
        return Err(Error::InvalidArgument(format!(
            "{variant} needs token parameters"
        )));
    }
    let sampler = Sampler::new(world);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let idx = sampler.draw(cfg.batch_size, &mut rng);
        let mut tape = Tape::new();
        let bound = params.map(&mut |m| tape.param(m.clone()));
        let loss = record_loss(&mut tape, world, &idx, &bound, variant, align)
            .map_err(|e| as_diverged(e, step))?;
        let grads = tape
            .backward(loss.total)
            .map_err(|e| as_diverged(e, step))?;

        let leaves = bound.leaves();
        let norm = leaves
            .iter()
            .map(|&&v| grads.get(v).as_slice().iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::Diverged {
                step,
                last_finite: step.checked_sub(1),
            });
        }
        let clip = match cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let lr = cfg.learning_rate * clip;
        for (value, &&var) in params.leaves_mut().into_iter().zip(&leaves) {
            let g = grads.get(var);
            for (w, d) in value.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *w -= lr * d;
            }
            if !value.is_finite() {
                // this step's loss was finite; the next one cannot be
                return Err(Error::Diverged {
                    step: step + 1,
                    last_finite: Some(step),
                });
            }
        }

        let value = |v: Var| tape.value(v).item();
        let mean_alpha = (!loss.alpha.is_empty())
            .then(|| loss.alpha.iter().sum::<f64>() / loss.alpha.len() as f64);
        trace.push(TraceStep {
            step,
            loss: value(loss.total),
            loss_direct: value(loss.direct),
            loss_bridge: loss.bridge.map(value),
            loss_token: loss.token.map(value),
            mean_alpha,
            grad_norm: norm,
        });
    }
    Ok(trace)
}

/// Rows of `samples` that belong to `identities`, in sample order.
pub fn rows_of(samples: &ModalitySamples, identities: &[u32]) -> Vec<usize> {
    (0..samples.len())
        .filter(|&i| identities.binary_search(&samples.identities[i]).is_ok())
        .collect()
}

/// Projected global and token features of selected samples.
pub struct Encoded {
    pub globals: Matrix,
    pub tokens: Option<TokenFeatures>,
}

pub fn encode(
    samples: &ModalitySamples,
    rows: &[usize],
    w: &Matrix,
    tokens_per_sample: usize,
) -> Result<Encoded> {
    let globals = samples.globals.gather_rows(rows)?.matmul(w)?;
    let tokens = match &samples.tokens {
        Some(t) => {
            let x = t
                .gather_rows(&token_rows(rows, tokens_per_sample))?
                .matmul(w)?;
            Some(TokenFeatures::new(x, globals.clone(), tokens_per_sample)?)
        }
        None => None,
    };
    Ok(Encoded { globals, tokens })
}

/// Per-sample unit query outputs and memberships of the token branch.
pub struct TokenView {
    /// `K` unit rows per sample.
    pub queries: Matrix,
    pub mu: Vec<Vec<f64>>,
    pub sigma: Vec<f64>,
}

pub fn token_view(
    features: &TokenFeatures,
    params: &FuzzyParams,
    sigma_mlp: &crate::fuzzy::SigmaMlp,
    weighting: Weighting,
) -> Result<TokenView> {
    let k = params.num_queries();
    let query = SharedQuery {
        tokens: params.query.clone(),
    };
    let mut queries = crossformer(&query, features, &params.crossformer)?;
    let mut mu = Vec::with_capacity(features.batch());
    let mut sigma = Vec::with_capacity(features.batch());
    for i in 0..features.batch() {
        let class = features.class_tokens.row(i);
        let s = predict_sigma(class, sigma_mlp)?;
        let row_mu = match weighting {
            Weighting::Fuzzy => (0..k)
                .map(|j| membership(queries.row(i * k + j), class, s))
                .collect::<Result<Vec<_>>>()?,
            Weighting::Uniform => vec![1.0; k],
        };
        mu.push(row_mu);
        sigma.push(s);
    }
    for r in 0..queries.rows() {
        let row = queries.row_mut(r);
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < crate::numeric::MIN_NORM {
            return Err(Error::ZeroNorm { norm: n });
        }
        row.iter_mut().for_each(|x| *x /= n);
    }
    Ok(TokenView { queries, mu, sigma })
}

/// Token-level similarity of every text sample against every aerial sample.
pub fn token_similarity(text: &TokenView, aerial: &TokenView) -> Result<Matrix> {
    let k = text.queries.rows() / text.mu.len().max(1);
    let (q, g) = (text.mu.len(), aerial.mu.len());
    let mut out = Matrix::zeros(q, g);
    for i in 0..q {
        for j in 0..g {
            let joint = fuzzy_and(&aerial.mu[j], &text.mu[i]);
            let mut s = 0.0;
            for (m, &w) in joint.iter().enumerate() {
                let dot: f64 = text
                    .queries
                    .row(i * k + m)
                    .iter()
                    .zip(aerial.queries.row(j * k + m))
                    .map(|(x, y)| x * y)
                    .sum();
                s += w * dot;
            }
            out.set(i, j, s / k as f64);
        }
    }
    Ok(out)
}

/// Text-to-aerial retrieval over the held-out identities.
///
/// Scores are global cosine similarities, plus the token-level similarity
/// when the model has a token branch.
pub fn evaluate_model(
    world: &SyntheticWorld,
    params: &ModelParams,
    variant: Variant,
) -> Result<MetricReport> {
    let n = world.config.tokens_per_sample;
    let test = &world.test_identities;
    let q_rows = rows_of(&world.text, test);
    let g_rows = rows_of(&world.aerial, test);
    let text = encode(&world.text, &q_rows, &params.w_text, n)?;
    let aerial = encode(&world.aerial, &g_rows, &params.w_aerial, n)?;

    let mut scores = Matrix::zeros(q_rows.len(), g_rows.len());
    for i in 0..q_rows.len() {
        for j in 0..g_rows.len() {
            scores.set(
                i,
                j,
                cosine_sim(text.globals.row(i), aerial.globals.row(j))?,
            );
        }
    }
    if let (Some(weighting), Some(fuzzy)) = (variant.weighting(), &params.fuzzy) {
        let (Some(tt), Some(ta)) = (&text.tokens, &aerial.tokens) else {
            return Err(Error::InvalidArgument("world has no token features".into()));
        };
        let tv = token_view(tt, fuzzy, &fuzzy.sigma_text, weighting)?;
        let av = token_view(ta, fuzzy, &fuzzy.sigma_aerial, weighting)?;
        let tokens = token_similarity(&tv, &av)?;
        scores = scores.zip_map(&tokens, |a, b| a + b)?;
    }
    let query_ids: Vec<u32> = q_rows.iter().map(|&i| world.text.identities[i]).collect();
    let gallery_ids: Vec<u32> = g_rows.iter().map(|&i| world.aerial.identities[i]).collect();
    evaluate_scores(&scores, &query_ids, &gallery_ids, &DEFAULT_CUTOFFS)
}

/// Initializes, trains and evaluates one variant.
pub fn run_experiment(
    world: &SyntheticWorld,
    variant: Variant,
    align: &AlignmentConfig,
    cfg: &TrainConfig,
) -> Result<ExperimentOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut params = ModelParams::init(world.dim(), variant, align, &mut rng);
    let trace = train(world, variant, align, cfg, &mut params)?;
    let report = evaluate_model(world, &params, variant)?;
    Ok(ExperimentOutcome {
        variant,
        report,
        trace,
        params,
        degenerate: variant.uses_ground() && world.ground.is_none(),
    })
}
