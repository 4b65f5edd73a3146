//! Seeded tri-modal worlds.
//!
//! Every identity owns a unit prototype and a bank of attribute tokens. Text
//! and ground samples are noisy, normalized copies of the prototype. Aerial
//! samples shrink the prototype by an altitude factor before adding heavier
//! noise, and lose each attribute token with a fixed probability; a lost
//! token is replaced by pure noise and flagged in the visibility mask.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub num_identities: usize,
    pub text_per_identity: usize,
    pub aerial_per_identity: usize,
    /// Zero leaves the world without a ground modality.
    pub ground_per_identity: usize,
    pub dim: usize,
    pub tokens_per_sample: usize,
    pub attribute_pool_size: usize,
    pub text_noise_scale: f64,
    pub ground_noise_scale: f64,
    pub aerial_noise_scale: f64,
    pub token_noise_scale: f64,
    /// Rank of each modality's nuisance subspace.
    pub nuisance_rank: usize,
    /// Share of global-feature noise variance lying in the nuisance subspace.
    pub nuisance_fraction: f64,
    pub token_dropout_prob: f64,
    pub altitude_spread: f64,
    /// Share of identities held out for evaluation.
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            num_identities: 96,
            text_per_identity: 2,
            aerial_per_identity: 2,
            ground_per_identity: 2,
            dim: 16,
            tokens_per_sample: 6,
            attribute_pool_size: 24,
            text_noise_scale: 1.0,
            ground_noise_scale: 0.5,
            aerial_noise_scale: 1.0,
            token_noise_scale: 0.3,
            nuisance_rank: 4,
            nuisance_fraction: 0.8,
            token_dropout_prob: 0.5,
            altitude_spread: 0.5,
            test_fraction: 0.5,
            seed: 0,
        }
    }
}

fn invalid(field: &str, message: impl Into<String>) -> Error {
    Error::ConfigInvalid {
        field: field.to_string(),
        message: message.into(),
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_identities", self.num_identities),
            ("text_per_identity", self.text_per_identity),
            ("aerial_per_identity", self.aerial_per_identity),
            ("dim", self.dim),
            ("tokens_per_sample", self.tokens_per_sample),
            ("attribute_pool_size", self.attribute_pool_size),
        ];
        for (field, value) in counts {
            if value == 0 {
                return Err(invalid(field, "must be at least 1"));
            }
        }
        let scales = [
            ("text_noise_scale", self.text_noise_scale),
            ("ground_noise_scale", self.ground_noise_scale),
            ("aerial_noise_scale", self.aerial_noise_scale),
            ("token_noise_scale", self.token_noise_scale),
        ];
        for (field, value) in scales {
            if !(value.is_finite() && value >= 0.0) {
                return Err(invalid(
                    field,
                    format!("must be finite and >= 0, got {value}"),
                ));
            }
        }
        if self.aerial_noise_scale < self.ground_noise_scale {
            return Err(invalid(
                "aerial_noise_scale",
                format!(
                    "{} is below ground_noise_scale {}",
                    self.aerial_noise_scale, self.ground_noise_scale
                ),
            ));
        }
        if !(0.0..=1.0).contains(&self.nuisance_fraction) {
            return Err(invalid("nuisance_fraction", "must lie in [0, 1]"));
        }
        if self.nuisance_fraction > 0.0 && !(1..=self.dim).contains(&self.nuisance_rank) {
            return Err(invalid(
                "nuisance_rank",
                format!("must lie in [1, {}]", self.dim),
            ));
        }
        if !(0.0..1.0).contains(&self.token_dropout_prob) {
            return Err(invalid("token_dropout_prob", "must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.altitude_spread) {
            return Err(invalid("altitude_spread", "must lie in [0, 1]"));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(invalid("test_fraction", "must lie in (0, 1)"));
        }
        let (train, test) = split_sizes(self.num_identities, self.test_fraction);
        if train < 2 || test < 1 {
            return Err(invalid(
                "num_identities",
                format!("split gives {train} training and {test} test identities; need 2 and 1"),
            ));
        }
        Ok(())
    }

    pub fn has_ground(&self) -> bool {
        self.ground_per_identity > 0
    }
}

fn split_sizes(n: usize, test_fraction: f64) -> (usize, usize) {
    let test = ((n as f64) * test_fraction).round() as usize;
    let test = test.min(n);
    (n - test, test)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Aerial,
    Ground,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Aerial, Modality::Ground];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Aerial => "aerial",
            Modality::Ground => "ground",
        }
    }
}

/// All samples of one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalitySamples {
    /// Global features, one row per sample.
    pub globals: Matrix,
    pub identities: Vec<u32>,
    /// `tokens_per_sample` rows per sample; absent for ground.
    pub tokens: Option<Matrix>,
    /// Per-token flag, `false` where the attribute was dropped.
    pub visible: Vec<bool>,
    /// Signal scale per sample (1 outside the aerial modality).
    pub altitude: Vec<f64>,
}

impl ModalitySamples {
    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    /// Sample indices grouped by identity.
    pub fn index_by_identity(&self, num_identities: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); num_identities];
        for (i, &id) in self.identities.iter().enumerate() {
            out[id as usize].push(i);
        }
        out
    }

    /// Fraction of dropped tokens in sample `i`.
    pub fn dropped_fraction(&self, i: usize, tokens_per_sample: usize) -> f64 {
        let mask = &self.visible[i * tokens_per_sample..(i + 1) * tokens_per_sample];
        mask.iter().filter(|v| !**v).count() as f64 / tokens_per_sample as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub config: ScenarioConfig,
    /// Unit rows, one per identity.
    pub prototypes: Matrix,
    pub attribute_pool: Matrix,
    /// Attribute indices per identity, `tokens_per_sample` each.
    pub banks: Vec<Vec<usize>>,
    pub text: ModalitySamples,
    pub aerial: ModalitySamples,
    pub ground: Option<ModalitySamples>,
    pub train_identities: Vec<u32>,
    pub test_identities: Vec<u32>,
}

impl SyntheticWorld {
    pub fn modality(&self, m: Modality) -> Option<&ModalitySamples> {
        match m {
            Modality::Text => Some(&self.text),
            Modality::Aerial => Some(&self.aerial),
            Modality::Ground => self.ground.as_ref(),
        }
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }
}

struct Noise<'a, R: Rng> {
    rng: &'a mut R,
    dim: usize,
}

impl<R: Rng> Noise<'_, R> {
    /// Isotropic vector with expected norm close to `scale`.
    fn vector(&mut self, scale: f64) -> Vec<f64> {
        let per = scale / (self.dim as f64).sqrt();
        (0..self.dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut *self.rng);
                per * z
            })
            .collect::<Vec<f64>>()
    }

    /// Noise with `fraction` of its variance inside `basis` (unit rows).
    fn global(&mut self, scale: f64, fraction: f64, basis: &[Vec<f64>]) -> Vec<f64> {
        let mut v = self.vector(scale * (1.0 - fraction).sqrt());
        if basis.is_empty() {
            return v;
        }
        let per = scale * fraction.sqrt() / (basis.len() as f64).sqrt();
        for b in basis {
            let z: f64 = StandardNormal.sample(&mut *self.rng);
            v.iter_mut().zip(b).for_each(|(x, e)| *x += per * z * e);
        }
        v
    }

    fn unit(&mut self) -> Vec<f64> {
        loop {
            let v = self.vector(1.0);
            let n = norm(&v);
            if n > 1e-6 {
                return v.into_iter().map(|x| x / n).collect();
            }
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalized(v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    if n < 1e-12 {
        v
    } else {
        v.into_iter().map(|x| x / n).collect()
    }
}

fn add_scaled(base: &[f64], factor: f64, noise: Vec<f64>) -> Vec<f64> {
    base.iter()
        .zip(noise)
        .map(|(b, e)| factor * b + e)
        .collect()
}

fn to_matrix(rows: Vec<Vec<f64>>, dim: usize) -> Matrix {
    let n = rows.len();
    Matrix::from_fn(n, dim, |i, j| rows[i][j])
}

/// Builds the world described by `config`.
pub fn generate(config: &ScenarioConfig) -> Result<SyntheticWorld> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.dim;
    let n_tok = config.tokens_per_sample;
    let mut noise = Noise {
        rng: &mut rng,
        dim: d,
    };

    let prototypes: Vec<Vec<f64>> = (0..config.num_identities).map(|_| noise.unit()).collect();
    let pool: Vec<Vec<f64>> = (0..config.attribute_pool_size)
        .map(|_| noise.unit())
        .collect();
    let rank = if config.nuisance_fraction > 0.0 {
        config.nuisance_rank
    } else {
        0
    };
    let mut basis = || -> Vec<Vec<f64>> { (0..rank).map(|_| noise.unit()).collect() };
    let (text_basis, aerial_basis, ground_basis) = (basis(), basis(), basis());
    let frac = config.nuisance_fraction;
    let banks: Vec<Vec<usize>> = (0..config.num_identities)
        .map(|_| {
            (0..n_tok)
                .map(|_| noise.rng.random_range(0..config.attribute_pool_size))
                .collect()
        })
        .collect();
    let bank_tokens: Vec<Vec<Vec<f64>>> = (0..config.num_identities)
        .map(|c| {
            banks[c]
                .iter()
                .map(|&a| normalized(add_scaled(&prototypes[c], 1.0, pool[a].clone())))
                .collect()
        })
        .collect();

    let mut text = Builder::default();
    for c in 0..config.num_identities {
        for _ in 0..config.text_per_identity {
            let g = normalized(add_scaled(
                &prototypes[c],
                1.0,
                noise.global(config.text_noise_scale, frac, &text_basis),
            ));
            let toks = bank_tokens[c]
                .iter()
                .map(|t| add_scaled(t, 1.0, noise.vector(config.token_noise_scale)))
                .collect();
            text.push(c, g, Some(toks), vec![true; n_tok], 1.0);
        }
    }

    let mut aerial = Builder::default();
    for c in 0..config.num_identities {
        for _ in 0..config.aerial_per_identity {
            let a = 1.0 - config.altitude_spread * noise.rng.random::<f64>();
            let g = add_scaled(
                &prototypes[c],
                a,
                noise.global(config.aerial_noise_scale, frac, &aerial_basis),
            );
            let mut toks = Vec::with_capacity(n_tok);
            let mut mask = Vec::with_capacity(n_tok);
            for t in &bank_tokens[c] {
                let dropped = noise.rng.random::<f64>() < config.token_dropout_prob;
                mask.push(!dropped);
                toks.push(if dropped {
                    noise.vector(1.0)
                } else {
                    add_scaled(t, a, noise.vector(config.token_noise_scale))
                });
            }
            aerial.push(c, g, Some(toks), mask, a);
        }
    }

    let ground = config.has_ground().then(|| {
        let mut ground = Builder::default();
        for (c, prototype) in prototypes.iter().enumerate() {
            for _ in 0..config.ground_per_identity {
                let g = normalized(add_scaled(
                    prototype,
                    1.0,
                    noise.global(config.ground_noise_scale, frac, &ground_basis),
                ));
                ground.push(c, g, None, Vec::new(), 1.0);
            }
        }
        ground.finish(d)
    });

    let mut order: Vec<u32> = (0..config.num_identities as u32).collect();
    order.shuffle(noise.rng);
    let (_, test) = split_sizes(config.num_identities, config.test_fraction);
    let mut test_identities = order[..test].to_vec();
    let mut train_identities = order[test..].to_vec();
    test_identities.sort_unstable();
    train_identities.sort_unstable();

    Ok(SyntheticWorld {
        config: config.clone(),
        prototypes: to_matrix(prototypes, d),
        attribute_pool: to_matrix(pool, d),
        banks,
        text: text.finish(d),
        aerial: aerial.finish(d),
        ground,
        train_identities,
        test_identities,
    })
}

#[derive(Default)]
struct Builder {
    globals: Vec<Vec<f64>>,
    identities: Vec<u32>,
    tokens: Vec<Vec<f64>>,
    has_tokens: bool,
    visible: Vec<bool>,
    altitude: Vec<f64>,
}

impl Builder {
    fn push(
        &mut self,
        id: usize,
        global: Vec<f64>,
        tokens: Option<Vec<Vec<f64>>>,
        mask: Vec<bool>,
        a: f64,
    ) {
        self.globals.push(global);
        self.identities.push(id as u32);
        if let Some(t) = tokens {
            self.has_tokens = true;
            self.tokens.extend(t);
        }
        self.visible.extend(mask);
        self.altitude.push(a);
    }

    fn finish(self, dim: usize) -> ModalitySamples {
        ModalitySamples {
            globals: to_matrix(self.globals, dim),
            identities: self.identities,
            tokens: self.has_tokens.then(|| to_matrix(self.tokens, dim)),
            visible: self.visible,
            altitude: self.altitude,
        }
    }
}
