//! Per-sample gate and membership dumps of a trained model.

use serde::{Deserialize, Serialize};

use crate::cda::{alpha_variance, gate_from_features};
use crate::error::{Error, Result};
use crate::fuzzy::Weighting;
use crate::synth::experiment::{encode, token_view, ModelParams};
use crate::synth::world::SyntheticWorld;

/// Gate sharpness values of the default sweep.
pub const K_SWEEP: [f64; 6] = [1.0, 2.0, 4.0, 8.0, 12.0, 16.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    pub aerial_index: usize,
    pub identity: u32,
    pub altitude: f64,
    pub dropped_fraction: f64,
    pub delta: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MembershipRecord {
    pub aerial_index: usize,
    pub identity: u32,
    pub query: usize,
    pub dropped_fraction: f64,
    pub mu_aerial: f64,
    pub mu_text: f64,
    pub mu_joint: f64,
}

/// Each aerial sample with the text and ground samples it is paired with:
/// the `j`-th aerial sample of an identity meets its `j`-th text and ground
/// sample, wrapping around.
fn triplets(world: &SyntheticWorld) -> Vec<(usize, usize, Option<usize>)> {
    let n = world.config.num_identities;
    let text = world.text.index_by_identity(n);
    let ground = world.ground.as_ref().map(|g| g.index_by_identity(n));
    let mut seen = vec![0usize; n];
    (0..world.aerial.len())
        .map(|a| {
            let c = world.aerial.identities[a] as usize;
            let j = seen[c];
            seen[c] += 1;
            let t = text[c][j % text[c].len()];
            let g = ground.as_ref().map(|g| g[c][j % g[c].len()]);
            (a, t, g)
        })
        .collect()
}

/// Gap and gate for every aerial sample under the trained projections.
pub fn gate_records(
    world: &SyntheticWorld,
    params: &ModelParams,
    k: f64,
) -> Result<Vec<GateRecord>> {
    let ground = world.ground.as_ref().ok_or(Error::MissingGround)?;
    let trip = triplets(world);
    let n = world.config.tokens_per_sample;
    let a_rows: Vec<usize> = trip.iter().map(|t| t.0).collect();
    let t_rows: Vec<usize> = trip.iter().map(|t| t.1).collect();
    let g_rows: Vec<usize> = trip.iter().filter_map(|t| t.2).collect();
    let text = encode(&world.text, &t_rows, &params.w_text, n)?.globals;
    let aerial = encode(&world.aerial, &a_rows, &params.w_aerial, n)?.globals;
    let ground = encode(ground, &g_rows, &params.w_ground, n)?.globals;
    let (delta, alpha) = gate_from_features(&text, &aerial, &ground, k)?;
    Ok(a_rows
        .iter()
        .enumerate()
        .map(|(i, &a)| GateRecord {
            aerial_index: a,
            identity: world.aerial.identities[a],
            altitude: world.aerial.altitude[a],
            dropped_fraction: world.aerial.dropped_fraction(a, n),
            delta: delta[i],
            alpha: alpha[i],
        })
        .collect())
}

/// Memberships of every query token for every aerial sample and its paired
/// text sample.
pub fn membership_records(
    world: &SyntheticWorld,
    params: &ModelParams,
    weighting: Weighting,
) -> Result<Vec<MembershipRecord>> {
    let fuzzy = params
        .fuzzy
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("model has no token branch".into()))?;
    let trip = triplets(world);
    let n = world.config.tokens_per_sample;
    let a_rows: Vec<usize> = trip.iter().map(|t| t.0).collect();
    let t_rows: Vec<usize> = trip.iter().map(|t| t.1).collect();
    let missing = || Error::InvalidArgument("world has no token features".into());
    let text = encode(&world.text, &t_rows, &params.w_text, n)?
        .tokens
        .ok_or_else(missing)?;
    let aerial = encode(&world.aerial, &a_rows, &params.w_aerial, n)?
        .tokens
        .ok_or_else(missing)?;
    let tv = token_view(&text, fuzzy, &fuzzy.sigma_text, weighting)?;
    let av = token_view(&aerial, fuzzy, &fuzzy.sigma_aerial, weighting)?;
    let mut out = Vec::with_capacity(a_rows.len() * fuzzy.num_queries());
    for (i, &a) in a_rows.iter().enumerate() {
        for q in 0..fuzzy.num_queries() {
            let (mu_a, mu_t) = (av.mu[i][q], tv.mu[i][q]);
            out.push(MembershipRecord {
                aerial_index: a,
                identity: world.aerial.identities[a],
                query: q,
                dropped_fraction: world.aerial.dropped_fraction(a, n),
                mu_aerial: mu_a,
                mu_text: mu_t,
                mu_joint: mu_a * mu_t,
            });
        }
    }
    Ok(out)
}

/// Variance of the gates over `delta` for each sharpness in `ks`.
pub fn k_sweep(delta: &[f64], ks: &[f64]) -> Vec<(f64, f64)> {
    ks.iter().map(|&k| (k, alpha_variance(delta, k))).collect()
}
