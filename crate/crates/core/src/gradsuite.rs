//! Finite-difference checks of every loss at small sizes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cda::{cda_on_tape, gate_coefficients, Detached, GateConfig, TriModalBatch};
use crate::error::Result;
use crate::fuzzy::{fta_on_tape, FtaConfig, FuzzyParams, FuzzyShape, TokenVars, Weighting};
use crate::numeric::{grad_check, GradCheckReport, Matrix};
use crate::sdm::{sdm_on_tape, DEFAULT_EPS, DEFAULT_TAU};

pub const SUITE_STEP: f64 = 1e-4;
pub const SUITE_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct SuiteEntry {
    pub loss: &'static str,
    pub batch: usize,
    pub dim: usize,
    pub max_error: f64,
    pub entries_checked: usize,
}

impl SuiteEntry {
    fn new(loss: &'static str, batch: usize, dim: usize, r: GradCheckReport) -> Self {
        Self {
            loss,
            batch,
            dim,
            max_error: r.max_error,
            entries_checked: r.entries_checked,
        }
    }

    pub fn passed(&self) -> bool {
        self.max_error <= SUITE_TOLERANCE
    }
}

fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Identities with at least one repeat when `b > 2`.
fn identities(b: usize) -> Vec<u32> {
    (0..b as u32)
        .map(|i| if b > 2 { i / 2 } else { i })
        .collect()
}

pub fn check_sdm(b: usize, d: usize, seed: u64, step: f64) -> Result<SuiteEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids = identities(b);
    let inputs = [random(b, d, &mut rng), random(b, d, &mut rng)];
    let r = grad_check(
        |t, v| Ok(sdm_on_tape(t, v[0], v[1], &ids, DEFAULT_TAU, DEFAULT_EPS)?.loss),
        &inputs,
        step,
    )?;
    Ok(SuiteEntry::new("sdm", b, d, r))
}

/// Gates and the stopped ground branch are held at their unperturbed values.
pub fn check_cda(b: usize, d: usize, seed: u64, step: f64) -> Result<SuiteEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids = identities(b);
    let (t, a, g) = (
        random(b, d, &mut rng),
        random(b, d, &mut rng),
        random(b, d, &mut rng),
    );
    let batch = TriModalBatch::new(t.clone(), a.clone(), Some(g.clone()), ids.clone())?;
    let (_, alpha) = gate_coefficients(&batch, crate::cda::DEFAULT_K)?;
    let cfg = GateConfig {
        k: crate::cda::DEFAULT_K,
        tau: DEFAULT_TAU,
        eps: DEFAULT_EPS,
    };
    let detached = Detached {
        alpha: Some(&alpha),
        ground: Some(&g),
    };
    let r = grad_check(
        |tape, v| Ok(cda_on_tape(tape, v[0], v[1], Some(v[2]), &ids, cfg, detached)?.loss_total),
        &[t, a, g.clone()],
        step,
    )?;
    Ok(SuiteEntry::new("cda", b, d, r))
}

/// Token loss with `k` queries and three tokens per sample; checks every
/// parameter and both token inputs.
pub fn check_fta(b: usize, d: usize, k: usize, seed: u64, step: f64) -> Result<SuiteEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 3;
    let ids = identities(b);
    let shape = FuzzyShape {
        num_queries: k,
        depth: 2,
        ffn_mult: 4,
        sigma_hidden: d,
    };
    let mut params = FuzzyParams::init(d, shape, &mut rng);
    params.query = random(k, d, &mut rng);
    let mut inputs: Vec<Matrix> = params.leaves().into_iter().cloned().collect();
    let np = inputs.len();
    for _ in 0..2 {
        inputs.push(random(b * n, d, &mut rng));
        inputs.push(random(b, d, &mut rng));
    }
    let cfg = FtaConfig {
        tau: DEFAULT_TAU,
        eps: DEFAULT_EPS,
        weighting: Weighting::Fuzzy,
    };
    let r = grad_check(
        |tape, v| {
            let bound = params.rebuild(&v[..np]);
            let text = TokenVars {
                tokens: v[np],
                class_tokens: v[np + 1],
                tokens_per_sample: n,
            };
            let aerial = TokenVars {
                tokens: v[np + 2],
                class_tokens: v[np + 3],
                tokens_per_sample: n,
            };
            Ok(fta_on_tape(tape, text, aerial, &ids, &bound, cfg)?.loss)
        },
        &inputs,
        step,
    )?;
    Ok(SuiteEntry::new("fta", b, d, r))
}

/// Every loss at `B in {2, 4}`, `D in {4, 8}`, two query tokens.
pub fn run_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    for (i, (b, d)) in [(2, 4), (2, 8), (4, 4), (4, 8)].into_iter().enumerate() {
        let s = seed.wrapping_add(i as u64 * 101);
        out.push(check_sdm(b, d, s, SUITE_STEP)?);
        out.push(check_cda(b, d, s + 1, SUITE_STEP)?);
        out.push(check_fta(b, d, 2, s + 2, SUITE_STEP)?);
    }
    Ok(out)
}
