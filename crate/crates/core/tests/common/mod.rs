//! Scalar reference implementations written with plain loops over
//! `Vec<Vec<f64>>`, sharing no code with the library.

#![allow(dead_code)]

use fuzzyalign::fuzzy::{
    Attention, CrossFormerParams, FeedForward, FuzzyParams, LayerNorm, SigmaMlp,
};
use fuzzyalign::numeric::Matrix;

pub type Rows = Vec<Vec<f64>>;

pub fn rows(m: &Matrix) -> Rows {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

pub fn cos_matrix(a: &Rows, b: &Rows) -> Rows {
    a.iter()
        .map(|x| b.iter().map(|y| cos(x, y)).collect())
        .collect()
}

/// Log-softmax accurate to full relative precision when one entry dominates.
fn log_softmax(x: &[f64]) -> Vec<f64> {
    let mut top = 0;
    for j in 1..x.len() {
        if x[j] > x[top] {
            top = j;
        }
    }
    let mut others = 0.0;
    for j in 0..x.len() {
        if j != top {
            others += (x[j] - x[top]).exp();
        }
    }
    x.iter().map(|v| (v - x[top]) - others.ln_1p()).collect()
}

/// `ln(q + eps)` without losing `eps` against `q`.
fn log_shifted(q: f64, eps: f64) -> f64 {
    if q == 0.0 {
        eps.ln()
    } else {
        q.ln() + (eps / q).ln_1p()
    }
}

/// `(loss, per_sample)` of the two-direction KL between the tempered
/// similarity softmax and the normalized label-match distribution.
pub fn sdm(sim: &Rows, ids: &[u32], tau: f64, eps: f64) -> (f64, Vec<f64>) {
    let b = ids.len();
    let mut per_sample = vec![0.0; b];
    for i in 0..b {
        let positives = ids.iter().filter(|&&id| id == ids[i]).count() as f64;
        let q: Vec<f64> = (0..b)
            .map(|j| {
                if ids[j] == ids[i] {
                    1.0 / positives
                } else {
                    0.0
                }
            })
            .collect();
        let forward: Vec<f64> = (0..b).map(|j| sim[i][j] / tau).collect();
        let backward: Vec<f64> = (0..b).map(|j| sim[j][i] / tau).collect();
        let mut kl = 0.0;
        for logits in [forward, backward] {
            let lp = log_softmax(&logits);
            for j in 0..b {
                kl += lp[j].exp() * (lp[j] - log_shifted(q[j], eps));
            }
        }
        per_sample[i] = 0.5 * kl;
    }
    (per_sample.iter().sum(), per_sample)
}

pub fn sdm_features(a: &Rows, b: &Rows, ids: &[u32], tau: f64, eps: f64) -> (f64, Vec<f64>) {
    sdm(&cos_matrix(a, b), ids, tau, eps)
}

pub fn logistic(x: f64, k: f64) -> f64 {
    1.0 / (1.0 + (-k * x).exp())
}

/// Gated direct/bridge mixture; plain text-aerial loss without ground.
pub fn cda(
    text: &Rows,
    aerial: &Rows,
    ground: Option<&Rows>,
    ids: &[u32],
    k: f64,
    tau: f64,
    eps: f64,
) -> f64 {
    let (direct_total, direct) = sdm_features(text, aerial, ids, tau, eps);
    let Some(ground) = ground else {
        return direct_total;
    };
    let b = ids.len() as f64;
    let (_, tg) = sdm_features(text, ground, ids, tau, eps);
    let (_, ga) = sdm_features(ground, aerial, ids, tau, eps);
    let mut total = 0.0;
    for i in 0..ids.len() {
        let delta = cos(&text[i], &aerial[i]) - cos(&text[i], &ground[i]);
        let alpha = logistic(delta, k);
        let l_direct = b * direct[i];
        let l_bridge = b * (tg[i] + ga[i]);
        total += alpha * l_direct + (1.0 - alpha) * l_bridge;
    }
    total / b
}

fn matmul(a: &Rows, w: &Matrix) -> Rows {
    a.iter()
        .map(|x| {
            (0..w.cols())
                .map(|j| (0..w.rows()).map(|r| x[r] * w.get(r, j)).sum())
                .collect()
        })
        .collect()
}

fn add_bias(a: &mut Rows, bias: &Matrix) {
    for row in a.iter_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v += bias.get(0, j);
        }
    }
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

fn layer_norm(a: &Rows, p: &LayerNorm) -> Rows {
    a.iter()
        .map(|x| {
            let n = x.len() as f64;
            let mean = x.iter().sum::<f64>() / n;
            let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let sd = (var + 1e-5).sqrt();
            x.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / sd * p.gain.get(0, j) + p.bias.get(0, j))
                .collect()
        })
        .collect()
}

fn attention(q_in: &Rows, c_in: &Rows, p: &Attention) -> Rows {
    let q = matmul(q_in, &p.wq);
    let k = matmul(c_in, &p.wk);
    let v = matmul(c_in, &p.wv);
    let scale = 1.0 / (q[0].len() as f64).sqrt();
    let mixed: Rows = q
        .iter()
        .map(|qi| {
            let scores: Vec<f64> = k.iter().map(|kj| dot(qi, kj) * scale).collect();
            let w: Vec<f64> = log_softmax(&scores).iter().map(|l| l.exp()).collect();
            (0..v[0].len())
                .map(|c| (0..v.len()).map(|j| w[j] * v[j][c]).sum())
                .collect()
        })
        .collect();
    matmul(&mixed, &p.wo)
}

fn feed_forward(x: &Rows, p: &FeedForward) -> Rows {
    let mut h = matmul(x, &p.w1);
    add_bias(&mut h, &p.b1);
    let h: Rows = h
        .iter()
        .map(|r| r.iter().map(|&v| gelu(v)).collect())
        .collect();
    let mut o = matmul(&h, &p.w2);
    add_bias(&mut o, &p.b2);
    o
}

fn add(a: &Rows, b: &Rows) -> Rows {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect())
        .collect()
}

/// Query outputs for one sample's tokens.
pub fn crossformer(query: &Rows, tokens: &Rows, p: &CrossFormerParams) -> Rows {
    let q = layer_norm(query, &p.norm_query);
    let c = layer_norm(tokens, &p.norm_context);
    let mut x = attention(&q, &c, &p.cross);
    for block in &p.blocks {
        let h = layer_norm(&x, &block.norm_attn);
        x = add(&x, &attention(&h, &h, &block.attn));
        let h = layer_norm(&x, &block.norm_ffn);
        x = add(&x, &feed_forward(&h, &block.ffn));
    }
    x
}

pub fn sigma(class: &[f64], mlp: &SigmaMlp) -> f64 {
    let out = feed_forward(
        &vec![class.to_vec()],
        &FeedForward {
            w1: mlp.w1.clone(),
            b1: mlp.b1.clone(),
            w2: mlp.w2.clone(),
            b2: mlp.b2.clone(),
        },
    );
    out[0][0].exp()
}

pub fn membership(r: f64, sigma: f64) -> f64 {
    (-(1.0 - r).powi(2) / (2.0 * sigma * sigma))
        .exp()
        .max(f64::MIN_POSITIVE)
}

/// Per-sample query outputs and memberships of one modality.
pub fn modality(
    tokens: &Rows,
    class: &Rows,
    n: usize,
    p: &FuzzyParams,
    mlp: &SigmaMlp,
) -> Vec<(Rows, Vec<f64>)> {
    let query = rows(&p.query);
    (0..class.len())
        .map(|i| {
            let own = tokens[i * n..(i + 1) * n].to_vec();
            let out = crossformer(&query, &own, &p.crossformer);
            let s = sigma(&class[i], mlp);
            let mu = out
                .iter()
                .map(|q| membership(cos(q, &class[i]).clamp(-1.0, 1.0), s))
                .collect();
            (out, mu)
        })
        .collect()
}

/// `(loss, similarity)` of the membership-weighted token loss; entry `(i, j)`
/// pairs aerial `i` with text `j`.
#[allow(clippy::too_many_arguments)]
pub fn fta(
    text_tokens: &Rows,
    text_class: &Rows,
    aerial_tokens: &Rows,
    aerial_class: &Rows,
    n: usize,
    ids: &[u32],
    p: &FuzzyParams,
    tau: f64,
    eps: f64,
) -> (f64, Rows) {
    let t = modality(text_tokens, text_class, n, p, &p.sigma_text);
    let a = modality(aerial_tokens, aerial_class, n, p, &p.sigma_aerial);
    let k = p.query.rows();
    let sim: Rows = a
        .iter()
        .map(|(qa, ma)| {
            t.iter()
                .map(|(qt, mt)| {
                    let mut s = 0.0;
                    for j in 0..k {
                        s += ma[j] * mt[j] * cos(&qa[j], &qt[j]);
                    }
                    s / k as f64
                })
                .collect()
        })
        .collect();
    (sdm(&sim, ids, tau, eps).0, sim)
}

/// Metrics by definition: each item's position is the number of items that
/// outrank it, with ties broken by the lower gallery index.
pub struct OracleReport {
    pub cmc: Vec<f64>,
    pub map: f64,
}

pub fn retrieval(scores: &Rows, qids: &[u32], gids: &[u32], depth: usize) -> OracleReport {
    let n = qids.len() as f64;
    let mut first_hit = Vec::new();
    let mut ap_sum = 0.0;
    for (i, row) in scores.iter().enumerate() {
        let position = |g: usize| {
            (0..row.len())
                .filter(|&h| row[h] > row[g] || (row[h] == row[g] && h < g))
                .count()
        };
        let mut positions: Vec<usize> = (0..gids.len())
            .filter(|&g| gids[g] == qids[i])
            .map(position)
            .collect();
        positions.sort_unstable();
        first_hit.push(positions[0]);
        let mut precision = 0.0;
        for (m, &pos) in positions.iter().enumerate() {
            precision += (m + 1) as f64 / (pos + 1) as f64;
        }
        ap_sum += precision / positions.len() as f64;
    }
    let cmc = (1..=depth)
        .map(|k| first_hit.iter().filter(|&&f| f < k).count() as f64 / n * 100.0)
        .collect();
    OracleReport {
        cmc,
        map: ap_sum / n * 100.0,
    }
}
