//! Context-aware dynamic alignment.
//!
//! Each sample gets a gate `alpha_i = sigmoid(k * delta_i)` from the gap
//! `delta_i = cos(T_i, A_i) - cos(T_i, G_i)`. The loss mixes a direct
//! text-aerial term with a ground-bridged term per sample:
//!
//! ```text
//! L = 1/B sum_i [ alpha_i l_direct(i) + (1 - alpha_i) l_bridge(i) ]
//! l_direct  <- SDM(T, A)
//! l_bridge  <- SDM(T, G) + SDM(sg(G), A)
//! ```
//!
//! The per-sample term `l(i)` is `B` times row `i`'s share of the batch loss,
//! so `1/B sum_i l(i)` recovers the batch value. Gates are constants on the
//! tape. Without ground features the loss is plain `SDM(T, A)`.

use crate::error::{shape_err, Error, Result};
use crate::numeric::{cosine_sim, sigmoid, Matrix, Tape, Var};
use crate::sdm::sdm_on_tape;

pub const DEFAULT_K: f64 = 1.0;

/// Paired text, aerial and optional ground global features.
#[derive(Debug, Clone)]
pub struct TriModalBatch {
    pub text: Matrix,
    pub aerial: Matrix,
    pub ground: Option<Matrix>,
    pub identities: Vec<u32>,
}

impl TriModalBatch {
    pub fn new(
        text: Matrix,
        aerial: Matrix,
        ground: Option<Matrix>,
        identities: Vec<u32>,
    ) -> Result<Self> {
        let shape = text.shape();
        let ok = aerial.shape() == shape
            && ground.as_ref().is_none_or(|g| g.shape() == shape)
            && identities.len() == shape.0;
        if !ok {
            return Err(shape_err(
                "TriModalBatch",
                format!(
                    "text {shape:?}, aerial {:?}, ground {:?}, {} identities",
                    aerial.shape(),
                    ground.as_ref().map(Matrix::shape),
                    identities.len()
                ),
            ));
        }
        Ok(Self {
            text,
            aerial,
            ground,
            identities,
        })
    }

    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }
}

/// Gate decomposition and loss values.
#[derive(Debug, Clone, PartialEq)]
pub struct GateResult {
    pub delta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub per_sample_direct: Vec<f64>,
    pub per_sample_bridge: Vec<f64>,
    pub loss_direct: f64,
    pub loss_bridge: f64,
    pub loss_total: f64,
    /// Ground absent; `loss_total` is the plain text-aerial loss.
    pub degenerate: bool,
}

/// `(delta, alpha)` from matched rows.
pub fn gate_from_features(
    text: &Matrix,
    aerial: &Matrix,
    ground: &Matrix,
    k: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(k > 0.0 && k.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "gate steepness must be > 0, got {k}"
        )));
    }
    if text.shape() != aerial.shape() || text.shape() != ground.shape() {
        return Err(shape_err("gate", "modalities differ in shape"));
    }
    let mut delta = Vec::with_capacity(text.rows());
    for i in 0..text.rows() {
        let direct = cosine_sim(text.row(i), aerial.row(i))?;
        let bridge = cosine_sim(text.row(i), ground.row(i))?;
        delta.push(direct - bridge);
    }
    let alpha = delta.iter().map(|&d| sigmoid(d, k)).collect();
    Ok((delta, alpha))
}

pub fn gate_coefficients(batch: &TriModalBatch, k: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let ground = batch.ground.as_ref().ok_or(Error::MissingGround)?;
    gate_from_features(&batch.text, &batch.aerial, ground, k)
}

/// Hyperparameters of the gated loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateConfig {
    pub k: f64,
    pub tau: f64,
    pub eps: f64,
}

/// Tape nodes for the gated loss.
#[derive(Debug, Clone)]
pub struct CdaTerms {
    pub loss_total: Var,
    pub loss_direct: Var,
    pub loss_bridge: Option<Var>,
    pub per_sample_direct: Var,
    pub per_sample_bridge: Option<Var>,
    pub delta: Vec<f64>,
    pub alpha: Vec<f64>,
}

/// Values that are constants of the loss.
///
/// By default the gates come from the current features and the bridge's
/// stopped ground branch reuses the live ground node. Pinning either one
/// holds it fixed when the inputs move, as finite-difference probes need.
#[derive(Debug, Clone, Copy, Default)]
pub struct Detached<'a> {
    pub alpha: Option<&'a [f64]>,
    pub ground: Option<&'a Matrix>,
}

/// Records the gated loss on `tape`.
pub fn cda_on_tape(
    tape: &mut Tape,
    text: Var,
    aerial: Var,
    ground: Option<Var>,
    identities: &[u32],
    cfg: GateConfig,
    detached: Detached<'_>,
) -> Result<CdaTerms> {
    let b = identities.len();
    let direct = sdm_on_tape(tape, text, aerial, identities, cfg.tau, cfg.eps)?;
    let scaled_direct = tape.scale(direct.per_sample, b as f64)?;

    let Some(ground) = ground else {
        return Ok(CdaTerms {
            loss_total: direct.loss,
            loss_direct: direct.loss,
            loss_bridge: None,
            per_sample_direct: scaled_direct,
            per_sample_bridge: None,
            delta: Vec::new(),
            alpha: Vec::new(),
        });
    };

    let (delta, alpha) = gate_from_features(
        tape.value(text),
        tape.value(aerial),
        tape.value(ground),
        cfg.k,
    )?;
    let alpha = match detached.alpha {
        Some(fixed) if fixed.len() != b => {
            return Err(shape_err(
                "cda",
                format!("{} gates for {b} samples", fixed.len()),
            ));
        }
        Some(fixed) => fixed.to_vec(),
        None => alpha,
    };

    let text_ground = sdm_on_tape(tape, text, ground, identities, cfg.tau, cfg.eps)?;
    let frozen_ground = match detached.ground {
        Some(snapshot) if snapshot.shape() != tape.value(ground).shape() => {
            return Err(shape_err("cda", "ground snapshot shape"));
        }
        Some(snapshot) => tape.constant(snapshot.clone()),
        None => tape.stop_grad(ground),
    };
    let ground_aerial = sdm_on_tape(tape, frozen_ground, aerial, identities, cfg.tau, cfg.eps)?;
    let bridge_rows = tape.add(text_ground.per_sample, ground_aerial.per_sample)?;
    let loss_bridge = tape.add(text_ground.loss, ground_aerial.loss)?;
    let scaled_bridge = tape.scale(bridge_rows, b as f64)?;

    let w_direct = tape.constant(Matrix::column_vector(&alpha));
    let w_bridge = tape.constant(Matrix::column_vector(
        &alpha.iter().map(|a| 1.0 - a).collect::<Vec<_>>(),
    ));
    let mixed_direct = tape.mul(scaled_direct, w_direct)?;
    let mixed_bridge = tape.mul(scaled_bridge, w_bridge)?;
    let mixed = tape.add(mixed_direct, mixed_bridge)?;
    let summed = tape.sum(mixed);
    let loss_total = tape.scale(summed, 1.0 / b as f64)?;

    Ok(CdaTerms {
        loss_total,
        loss_direct: direct.loss,
        loss_bridge: Some(loss_bridge),
        per_sample_direct: scaled_direct,
        per_sample_bridge: Some(scaled_bridge),
        delta,
        alpha,
    })
}

/// Evaluates the gated loss on a batch.
pub fn cda_loss(batch: &TriModalBatch, k: f64, tau: f64, eps: f64) -> Result<GateResult> {
    let mut tape = Tape::new();
    let text = tape.param(batch.text.clone());
    let aerial = tape.param(batch.aerial.clone());
    let ground = batch.ground.clone().map(|g| tape.param(g));
    let terms = cda_on_tape(
        &mut tape,
        text,
        aerial,
        ground,
        &batch.identities,
        GateConfig { k, tau, eps },
        Detached::default(),
    )?;
    Ok(GateResult {
        per_sample_direct: tape.value(terms.per_sample_direct).as_slice().to_vec(),
        per_sample_bridge: terms
            .per_sample_bridge
            .map(|v| tape.value(v).as_slice().to_vec())
            .unwrap_or_default(),
        loss_direct: tape.value(terms.loss_direct).item(),
        loss_bridge: terms.loss_bridge.map_or(0.0, |v| tape.value(v).item()),
        loss_total: tape.value(terms.loss_total).item(),
        degenerate: terms.loss_bridge.is_none(),
        delta: terms.delta,
        alpha: terms.alpha,
    })
}

/// Population variance of the gates for a fixed set of gaps.
pub fn alpha_variance(delta: &[f64], k: f64) -> f64 {
    if delta.is_empty() {
        return 0.0;
    }
    let alpha: Vec<f64> = delta.iter().map(|&d| sigmoid(d, k)).collect();
    let n = alpha.len() as f64;
    let mean = alpha.iter().sum::<f64>() / n;
    alpha.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::grad_check;
    use crate::sdm::{sdm, LabeledBatch};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn batch(b: usize, d: usize, seed: u64) -> TriModalBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TriModalBatch::new(
            random(b, d, &mut rng),
            random(b, d, &mut rng),
            Some(random(b, d, &mut rng)),
            (0..b as u32).map(|i| i % 2).collect(),
        )
        .unwrap()
    }

    #[test]
    fn symmetric_rows_give_half() {
        let v = Matrix::new(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]).unwrap();
        let b = TriModalBatch::new(v.clone(), v.clone(), Some(v), vec![0, 1]).unwrap();
        let (delta, alpha) = gate_coefficients(&b, 4.0).unwrap();
        assert_eq!(delta, vec![0.0, 0.0]);
        assert_eq!(alpha, vec![0.5, 0.5]);
    }

    #[test]
    fn closed_form_gates() {
        let t = Matrix::new(1, 2, vec![1.0, 0.0]).unwrap();
        let a = t.clone();
        let g = Matrix::new(1, 2, vec![0.0, 1.0]).unwrap();
        let b = TriModalBatch::new(t.clone(), a.clone(), Some(g.clone()), vec![0]).unwrap();
        let (_, alpha) = gate_coefficients(&b, 1.0).unwrap();
        assert!((alpha[0] - 0.731_058_578_630_004_9).abs() < 1e-15);
        let b = TriModalBatch::new(t, g, Some(a), vec![0]).unwrap();
        let (_, alpha) = gate_coefficients(&b, 8.0).unwrap();
        // 1/(1+e^8) = 3.3535013046647811e-4
        assert!((alpha[0] - 3.353_501_304_664_781e-4).abs() < 1e-17);
    }

    #[test]
    fn missing_ground_is_an_error_for_gates() {
        let mut b = batch(2, 3, 1);
        b.ground = None;
        assert!(matches!(
            gate_coefficients(&b, 1.0),
            Err(Error::MissingGround)
        ));
    }

    #[test]
    fn degenerates_to_sdm_without_ground() {
        let mut b = batch(4, 6, 2);
        b.ground = None;
        let gate = cda_loss(&b, 1.0, 0.02, 1e-8).unwrap();
        let plain = sdm(
            &LabeledBatch::new(b.text.clone(), b.aerial.clone(), b.identities.clone()).unwrap(),
            0.02,
            1e-8,
        )
        .unwrap();
        assert!(gate.degenerate);
        assert_eq!(gate.loss_total.to_bits(), plain.loss.to_bits());
    }

    #[test]
    fn total_is_the_alpha_mixture() {
        let b = batch(4, 5, 3);
        let r = cda_loss(&b, 1.0, 0.05, 1e-8).unwrap();
        let n = b.len() as f64;
        let mix: f64 = (0..b.len())
            .map(|i| {
                r.alpha[i] * r.per_sample_direct[i] + (1.0 - r.alpha[i]) * r.per_sample_bridge[i]
            })
            .sum::<f64>()
            / n;
        assert!((mix - r.loss_total).abs() < 1e-10);
        let direct_mean = r.per_sample_direct.iter().sum::<f64>() / n;
        assert!((direct_mean - r.loss_direct).abs() < 1e-10);
        assert!(r.alpha.iter().all(|&a| a > 0.0 && a < 1.0));
    }

    #[test]
    fn saturated_gate_recovers_direct_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let text = random(3, 4, &mut rng);
        let aerial = text.clone();
        let ground = text.map(|x| -x);
        // delta = 2 for every row; k huge pins alpha at 1
        let b = TriModalBatch::new(text, aerial, Some(ground), vec![0, 1, 2]).unwrap();
        let r = cda_loss(&b, 1e3, 0.1, 1e-8).unwrap();
        assert!(r.alpha.iter().all(|&a| a == 1.0));
        assert!((r.loss_total - r.loss_direct).abs() < 1e-12);
    }

    #[test]
    fn gate_increases_with_direct_similarity() {
        let text = Matrix::new(1, 2, vec![1.0, 0.0]).unwrap();
        let ground = Matrix::new(1, 2, vec![0.6, 0.8]).unwrap();
        let mut last = 0.0;
        for step in 0..20 {
            let angle = 1.5 - step as f64 * 0.07;
            let aerial = Matrix::new(1, 2, vec![angle.cos(), angle.sin()]).unwrap();
            let b =
                TriModalBatch::new(text.clone(), aerial, Some(ground.clone()), vec![0]).unwrap();
            let (_, alpha) = gate_coefficients(&b, 1.0).unwrap();
            assert!(alpha[0] > last);
            last = alpha[0];
        }
    }

    #[test]
    fn gradients_check_out_with_fixed_gates() {
        for (b, d, seed) in [(2, 4, 7u64), (2, 8, 8), (4, 4, 9), (4, 8, 10)] {
            let tb = batch(b, d, seed);
            let (_, alpha) = gate_coefficients(&tb, 1.0).unwrap();
            let cfg = GateConfig {
                k: 1.0,
                tau: 0.02,
                eps: 1e-8,
            };
            let ground = tb.ground.clone().unwrap();
            let detached = Detached {
                alpha: Some(&alpha),
                ground: Some(&ground),
            };
            let report = grad_check(
                |t, v| {
                    Ok(
                        cda_on_tape(t, v[0], v[1], Some(v[2]), &tb.identities, cfg, detached)?
                            .loss_total,
                    )
                },
                &[
                    tb.text.clone(),
                    tb.aerial.clone(),
                    tb.ground.clone().unwrap(),
                ],
                1e-4,
            )
            .unwrap();
            assert!(report.max_error <= 1e-4, "B={b} D={d}: {report:?}");
        }
    }

    #[test]
    fn variance_grows_with_steepness_for_centered_gaps() {
        let delta = [-0.4, -0.1, 0.0, 0.1, 0.4, -0.25, 0.25];
        let mut last = -1.0;
        for k in [1.0, 2.0, 4.0, 8.0, 12.0, 16.0] {
            let v = alpha_variance(&delta, k);
            assert!(v >= last);
            last = v;
        }
    }

    #[test]
    fn variance_can_shrink_for_one_sided_gaps() {
        // both gates saturate towards 1 as k grows
        let delta = [1.5, 2.0];
        assert!(alpha_variance(&delta, 16.0) < alpha_variance(&delta, 1.0));
    }
}
