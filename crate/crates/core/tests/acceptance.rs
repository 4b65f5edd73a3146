//! End-to-end acceptance checks, one PASS/FAIL line per criterion.

mod common;

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fuzzyalign::cda::{cda_loss, cda_on_tape, Detached, GateConfig, TriModalBatch, DEFAULT_K};
use fuzzyalign::fuzzy::{
    fta_loss, fuzzy_and, membership, membership_from_agreement, predict_sigma, weighted_similarity,
    FuzzyParams, FuzzyShape, SigmaMlp, TokenFeatures,
};
use fuzzyalign::gradsuite::{run_suite, SUITE_TOLERANCE};
use fuzzyalign::io::EmbeddingFile;
use fuzzyalign::metrics::{evaluate, evaluate_scores, RetrievalTask, DEFAULT_CUTOFFS};
use fuzzyalign::numeric::{sigmoid, Matrix, Tape};
use fuzzyalign::sdm::{sdm, sdm_on_tape, LabeledBatch, DEFAULT_EPS, DEFAULT_TAU};
use fuzzyalign::synth::{
    gate_records, generate, k_sweep, run_experiment, AlignmentConfig, ScenarioConfig, TrainConfig,
    Variant, K_SWEEP,
};

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn random_ids(b: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let classes = rng.random_range(1..=b as u32);
    (0..b).map(|_| rng.random_range(0..classes)).collect()
}

fn relative(x: f64, reference: f64) -> f64 {
    (x - reference).abs() / reference.abs()
}

fn criterion_01_gradient_fidelity() -> (bool, String) {
    let start = Instant::now();
    let entries = run_suite(0).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    for e in &entries {
        println!(
            "  {:<4} B={} D={} max error {:.3e} over {} entries",
            e.loss, e.batch, e.dim, e.max_error, e.entries_checked
        );
    }
    let worst = entries.iter().map(|e| e.max_error).fold(0.0, f64::max);
    let covered = ["sdm", "cda", "fta"]
        .iter()
        .all(|l| entries.iter().filter(|e| e.loss == *l).count() == 4);
    (
        covered && worst <= SUITE_TOLERANCE && elapsed < 60.0,
        format!("worst mixed error {worst:.3e} (<= {SUITE_TOLERANCE:e}) in {elapsed:.2} s"),
    )
}

fn criterion_02_stop_gradient() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = GateConfig {
        k: DEFAULT_K,
        tau: DEFAULT_TAU,
        eps: DEFAULT_EPS,
    };
    let mut analytic_max: f64 = 0.0;
    let mut probe_max: f64 = 0.0;
    let mut residual_max: f64 = 0.0;
    for _ in 0..20 {
        let (b, d) = (rng.random_range(2..=4), rng.random_range(2..=8));
        let ids = random_ids(b, &mut rng);
        let (t0, a0, g0) = (
            random(b, d, &mut rng),
            random(b, d, &mut rng),
            random(b, d, &mut rng),
        );

        // analytic gradient of the stopped term alone
        let mut tape = Tape::new();
        let a = tape.param(a0.clone());
        let g = tape.param(g0.clone());
        let frozen = tape.stop_grad(g);
        let term = sdm_on_tape(&mut tape, frozen, a, &ids, cfg.tau, cfg.eps).unwrap();
        let grads = tape.backward(term.loss).unwrap();
        analytic_max = analytic_max.max(grads.get(g).max_abs());

        let alpha = cda_loss(
            &TriModalBatch::new(t0.clone(), a0.clone(), Some(g0.clone()), ids.clone()).unwrap(),
            cfg.k,
            cfg.tau,
            cfg.eps,
        )
        .unwrap()
        .alpha;
        // value of the stopped term with the live ground moved and the stop held
        let stopped_term = |g_live: &Matrix| {
            let mut tape = Tape::new();
            let a = tape.constant(a0.clone());
            let _live = tape.param(g_live.clone());
            let held = tape.constant(g0.clone());
            let t = sdm_on_tape(&mut tape, held, a, &ids, cfg.tau, cfg.eps).unwrap();
            tape.value(t.loss).item()
        };
        // gated total with gates pinned, and its only other ground-dependent part
        let total = |g_live: &Matrix| {
            let mut tape = Tape::new();
            let t = tape.constant(t0.clone());
            let a = tape.constant(a0.clone());
            let g = tape.constant(g_live.clone());
            let detached = Detached {
                alpha: Some(&alpha),
                ground: Some(&g0),
            };
            let terms = cda_on_tape(&mut tape, t, a, Some(g), &ids, cfg, detached).unwrap();
            tape.value(terms.loss_total).item()
        };
        let text_ground = |g_live: &Matrix| {
            let out = sdm(
                &LabeledBatch::new(t0.clone(), g_live.clone(), ids.clone()).unwrap(),
                cfg.tau,
                cfg.eps,
            )
            .unwrap();
            out.per_sample
                .iter()
                .zip(&alpha)
                .map(|(l, a)| (1.0 - a) * l)
                .sum::<f64>()
        };
        let h = 1e-3;
        for idx in 0..g0.len() {
            let mut plus = g0.clone();
            plus.as_mut_slice()[idx] += h;
            let mut minus = g0.clone();
            minus.as_mut_slice()[idx] -= h;
            let fd = |f: &dyn Fn(&Matrix) -> f64| (f(&plus) - f(&minus)) / (2.0 * h);
            probe_max = probe_max.max(fd(&stopped_term).abs());
            residual_max = residual_max.max((fd(&total) - fd(&text_ground)).abs());
        }
    }
    (
        analytic_max == 0.0 && probe_max <= 1e-10 && residual_max <= 1e-10,
        format!(
            "analytic max |dL/dG| = {analytic_max:e}, probe {probe_max:.1e}, \
             gated-total residual beyond the text-ground term {residual_max:.1e}"
        ),
    )
}

fn non_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] >= w[0])
}

fn criterion_03_gate_exactness() -> (bool, String) {
    let at_zero = K_SWEEP.iter().all(|&k| sigmoid(0.0, k) == 0.5);

    let grid: Vec<f64> = (-200..=200).map(|i| i as f64 * 0.01).collect();
    let monotone = K_SWEEP
        .iter()
        .all(|&k| grid.windows(2).all(|w| sigmoid(w[1], k) > sigmoid(w[0], k)));

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut centered_ok = true;
    for _ in 0..50 {
        let half: Vec<f64> = (0..rng.random_range(1..20))
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let delta: Vec<f64> = half.iter().flat_map(|&d| [d, -d]).collect();
        let sweep: Vec<f64> = k_sweep(&delta, &K_SWEEP)
            .into_iter()
            .map(|(_, v)| v)
            .collect();
        centered_ok &= non_decreasing(&sweep);
    }

    let world = generate(&ScenarioConfig::default()).unwrap();
    let outcome = run_experiment(
        &world,
        Variant::Cda,
        &AlignmentConfig::default(),
        &TrainConfig::default(),
    )
    .unwrap();
    let delta: Vec<f64> = gate_records(&world, &outcome.params, DEFAULT_K)
        .unwrap()
        .iter()
        .map(|r| r.delta)
        .collect();
    let trained: Vec<f64> = k_sweep(&delta, &K_SWEEP)
        .into_iter()
        .map(|(_, v)| v)
        .collect();
    println!("  trained-gap variance over k {K_SWEEP:?}: {trained:.5?}");

    (
        at_zero && monotone && centered_ok && non_decreasing(&trained),
        format!(
            "alpha(0) = 0.5 exactly: {at_zero}; strictly increasing on a 401-point grid: {monotone}; \
             variance non-decreasing in k on 50 centered gap sets: {centered_ok} and on {} trained gaps",
            delta.len()
        ),
    )
}

fn criterion_04_degenerate_cda() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = GateConfig {
        k: DEFAULT_K,
        tau: DEFAULT_TAU,
        eps: DEFAULT_EPS,
    };
    let mut identical = 0;
    let total = 100;
    for _ in 0..total {
        let (b, d) = (rng.random_range(2..=6), rng.random_range(1..=8));
        let ids = random_ids(b, &mut rng);
        let (t, a) = (random(b, d, &mut rng), random(b, d, &mut rng));
        let plain = sdm(
            &LabeledBatch::new(t.clone(), a.clone(), ids.clone()).unwrap(),
            cfg.tau,
            cfg.eps,
        )
        .unwrap();
        let gated = cda_loss(
            &TriModalBatch::new(t.clone(), a.clone(), None, ids.clone()).unwrap(),
            cfg.k,
            cfg.tau,
            cfg.eps,
        )
        .unwrap();

        let mut tape = Tape::new();
        let tv = tape.param(t);
        let av = tape.param(a);
        let terms = cda_on_tape(&mut tape, tv, av, None, &ids, cfg, Detached::default()).unwrap();
        let grads = tape.backward(terms.loss_total).unwrap();

        let same = gated.degenerate
            && gated.loss_total.to_bits() == plain.loss.to_bits()
            && grads.get(tv) == plain.grad_a
            && grads.get(av) == plain.grad_b;
        identical += same as usize;
    }
    (
        identical == total,
        format!("{identical}/{total} ground-free batches match the plain loss and gradients bit-for-bit"),
    )
}

fn random_mlp(d: usize, rng: &mut ChaCha8Rng) -> SigmaMlp {
    SigmaMlp {
        w1: random(d, 6, rng),
        b1: random(1, 6, rng),
        w2: random(6, 1, rng),
        b2: random(1, 1, rng),
    }
}

fn criterion_05_fuzzy_algebra() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut in_range = true;
    let mut peak = true;
    let mut joint = true;
    let mut invariant = true;
    for _ in 0..500 {
        let d = rng.random_range(2..=8);
        let class: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sigma = predict_sigma(&class, &random_mlp(d, &mut rng)).unwrap();
        let token: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mu = membership(&token, &class, sigma).unwrap();
        in_range &= mu > 0.0 && mu <= 1.0;
        let r = rng.random_range(-1.0..=1.0);
        let mu_r = membership_from_agreement(r, sigma);
        in_range &= mu_r > 0.0 && mu_r <= 1.0;
        peak &= membership_from_agreement(1.0, sigma) == 1.0
            && membership(&class, &class, sigma).unwrap() == 1.0;

        let k = rng.random_range(1..=6);
        let mu_a: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..=1.0)).collect();
        let mu_t: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..=1.0)).collect();
        let mut mu_j = fuzzy_and(&mu_a, &mu_t);
        for i in 0..k {
            joint &= mu_j[i] == mu_a[i] * mu_t[i] && mu_j[i] <= mu_a[i].min(mu_t[i]);
        }

        let zeroed: Vec<usize> = (0..k).filter(|_| rng.random_bool(0.5)).collect();
        for &i in &zeroed {
            mu_j[i] = 0.0;
        }
        let (qa, qt) = (random(k, d, &mut rng), random(k, d, &mut rng));
        let before = weighted_similarity(&qa, &qt, &mu_j).unwrap();
        let (mut qa2, mut qt2) = (qa.clone(), qt.clone());
        for &i in &zeroed {
            for j in 0..d {
                qa2.set(i, j, rng.random_range(-1e6..1e6));
                qt2.set(i, j, rng.random_range(-1e6..1e6));
            }
        }
        invariant &= weighted_similarity(&qa2, &qt2, &mu_j).unwrap().to_bits() == before.to_bits();
    }
    (
        in_range && peak && joint && invariant,
        format!(
            "mu in (0, 1]: {in_range}; mu(r = 1) = 1: {peak}; joint = product <= min: {joint}; \
             zero-weight tokens inert: {invariant} (500 cases)"
        ),
    )
}

fn criterion_06_loss_oracles() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (tau, eps) = (DEFAULT_TAU, DEFAULT_EPS);
    let instances = 120;
    let (mut sdm_worst, mut cda_worst, mut fta_worst): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for n in 0..instances {
        let (b, d) = (rng.random_range(2..=4), rng.random_range(2..=8));
        let ids = random_ids(b, &mut rng);
        let (t, a, g) = (
            random(b, d, &mut rng),
            random(b, d, &mut rng),
            random(b, d, &mut rng),
        );
        let (rt, ra, rg) = (common::rows(&t), common::rows(&a), common::rows(&g));

        let out = sdm(
            &LabeledBatch::new(t.clone(), a.clone(), ids.clone()).unwrap(),
            tau,
            eps,
        )
        .unwrap();
        let (oracle, per_sample) = common::sdm_features(&rt, &ra, &ids, tau, eps);
        sdm_worst = sdm_worst.max(relative(out.loss, oracle));
        for (x, y) in out.per_sample.iter().zip(&per_sample) {
            sdm_worst = sdm_worst.max(relative(*x, *y));
        }

        let k = rng.random_range(0.5..16.0);
        let ground = (n % 5 != 0).then_some(g);
        let gated = cda_loss(
            &TriModalBatch::new(t, a, ground.clone(), ids.clone()).unwrap(),
            k,
            tau,
            eps,
        )
        .unwrap();
        let oracle = common::cda(&rt, &ra, ground.as_ref().map(|_| &rg), &ids, k, tau, eps);
        cda_worst = cda_worst.max(relative(gated.loss_total, oracle));

        let shape = FuzzyShape {
            num_queries: rng.random_range(1..=4),
            depth: rng.random_range(0..=2),
            ffn_mult: rng.random_range(1..=3),
            sigma_hidden: rng.random_range(1..=6),
        };
        let mut params = FuzzyParams::init(d, shape, &mut rng);
        params.query = random(shape.num_queries, d, &mut rng);
        for leaf in params.leaves_mut().into_iter().skip(1) {
            let (r, c) = leaf.shape();
            let jitter = random(r, c, &mut rng);
            *leaf = leaf.zip_map(&jitter, |x, j| x + 0.3 * j).unwrap();
        }
        let tokens = rng.random_range(1..=4);
        let text = TokenFeatures::new(
            random(b * tokens, d, &mut rng),
            random(b, d, &mut rng),
            tokens,
        )
        .unwrap();
        let aerial = TokenFeatures::new(
            random(b * tokens, d, &mut rng),
            random(b, d, &mut rng),
            tokens,
        )
        .unwrap();
        let out = fta_loss(&text, &aerial, &ids, &params, tau, eps).unwrap();
        let (oracle, _) = common::fta(
            &common::rows(&text.tokens),
            &common::rows(&text.class_tokens),
            &common::rows(&aerial.tokens),
            &common::rows(&aerial.class_tokens),
            tokens,
            &ids,
            &params,
            tau,
            eps,
        );
        fta_worst = fta_worst.max(relative(out.loss, oracle));
    }
    let worst = sdm_worst.max(cda_worst).max(fta_worst);
    (
        worst <= 1e-10,
        format!(
            "{instances} instances each; worst relative gap sdm {sdm_worst:.1e}, cda {cda_worst:.1e}, \
             fta {fta_worst:.1e} (<= 1e-10)"
        ),
    )
}

fn criterion_07_metric_oracle() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let tasks = 400;
    let mut matched = 0;
    let mut ordered = 0;
    for n in 0..tasks {
        let g = rng.random_range(1..=50);
        let q = rng.random_range(1..=20);
        let classes = rng.random_range(1..=g as u32);
        let gallery_ids: Vec<u32> = (0..g).map(|_| rng.random_range(0..classes)).collect();
        let query_ids: Vec<u32> = (0..q)
            .map(|_| gallery_ids[rng.random_range(0..g)])
            .collect();
        // coarse levels force ties
        let levels = rng.random_range(2..=8) as f64;
        let scores = if n % 2 == 0 {
            Matrix::from_fn(q, g, |_, _| {
                (rng.random_range(0.0..1.0) * levels).floor() / levels
            })
        } else {
            let d = rng.random_range(1..=4);
            let gallery =
                Matrix::from_fn(g, d, |_, _| (rng.random_range(-1.0..1.0) * levels).round());
            let gallery = Matrix::from_fn(g, d, |i, j| {
                if gallery.row(i).iter().all(|&x| x == 0.0) {
                    1.0
                } else {
                    gallery.get(i, j)
                }
            });
            let queries = Matrix::from_fn(q, d, |_, _| rng.random_range(-1.0..1.0));
            let task = RetrievalTask::new(queries, gallery, query_ids.clone(), gallery_ids.clone())
                .unwrap();
            let sim = task.similarity().unwrap();
            let direct = evaluate(&task, &DEFAULT_CUTOFFS).unwrap();
            assert_eq!(
                direct,
                evaluate_scores(&sim, &query_ids, &gallery_ids, &DEFAULT_CUTOFFS).unwrap()
            );
            sim
        };
        let report = evaluate_scores(&scores, &query_ids, &gallery_ids, &DEFAULT_CUTOFFS).unwrap();
        let oracle = common::retrieval(&common::rows(&scores), &query_ids, &gallery_ids, 10);
        let same = report.cmc == oracle.cmc
            && report.map == oracle.map
            && report.rank1 == oracle.cmc[0]
            && report.rank5 == oracle.cmc[4]
            && report.rank10 == oracle.cmc[9];
        matched += same as usize;
        let ok = report.rank1 <= report.rank5
            && report.rank5 <= report.rank10
            && report.rsum == report.rank1 + report.rank5 + report.rank10;
        ordered += ok as usize;
    }
    (
        matched == tasks && ordered == tasks,
        format!("{matched}/{tasks} tasks equal the brute-force oracle exactly; ordering and RSum hold on {ordered}/{tasks}"),
    )
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn criterion_08_directional_ablation() -> (bool, String) {
    let base = ScenarioConfig::default();
    assert_eq!(base.token_dropout_prob, 0.5);
    assert_eq!(base.aerial_noise_scale, 2.0 * base.ground_noise_scale);
    let align = AlignmentConfig::default();
    let start = Instant::now();
    let seeds: Vec<u64> = (0..10).collect();
    let mut rank1 = [Vec::new(), Vec::new(), Vec::new()];
    let variants = [Variant::BaselineSdm, Variant::Cda, Variant::CdaFta];
    for &seed in &seeds {
        let world = generate(&ScenarioConfig {
            seed,
            ..base.clone()
        })
        .unwrap();
        let train = TrainConfig {
            seed,
            ..Default::default()
        };
        let mut row = Vec::new();
        for (slot, &v) in variants.iter().enumerate() {
            let r = run_experiment(&world, v, &align, &train)
                .unwrap()
                .report
                .rank1;
            rank1[slot].push(r);
            row.push(format!("{} {r:.2}", v.name()));
        }
        println!("  seed {seed}: {}", row.join(", "));
    }
    let elapsed = start.elapsed().as_secs_f64();
    let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>();
    let (mb, sb) = mean_std(&rank1[0]);
    let (mc, sc) = mean_std(&rank1[1]);
    let (mf, sf) = mean_std(&rank1[2]);
    let (dc, sdc) = mean_std(&diff(&rank1[1], &rank1[0]));
    let (df, sdf) = mean_std(&diff(&rank1[2], &rank1[1]));
    (
        mc >= mb && mf >= mc && dc >= 0.0 && df >= 0.0 && elapsed < 600.0,
        format!(
            "Rank-1 over {} paired seeds: baseline {mb:.2} +- {sb:.2}, cda {mc:.2} +- {sc:.2}, \
             cda_fta {mf:.2} +- {sf:.2}; paired cda - baseline {dc:.2} +- {sdc:.2}, \
             cda_fta - cda {df:.2} +- {sdf:.2}; {elapsed:.1} s",
            seeds.len()
        ),
    )
}

fn criterion_09_format_round_trip() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let dir = tempfile::tempdir().unwrap();
    let total = 64;
    let mut identical = 0;
    let mut edge = [false; 2];
    for n in 0..total {
        let rows: u32 = match n {
            0 | 1 => n as u32,
            _ => rng.random_range(0..=12),
        };
        let dim: u32 = rng.random_range(0..=10);
        if rows < 2 {
            edge[rows as usize] = true;
        }
        let ids = rng
            .random_bool(0.5)
            .then(|| (0..rows).map(|_| rng.random()).collect());
        let data: Vec<f32> = (0..rows * dim)
            .map(|_| f32::from_bits(rng.random()))
            .collect();
        let file = EmbeddingFile::new(rows, dim, ids, data).unwrap();
        let first = dir.path().join(format!("a{n}.embf"));
        let second = dir.path().join(format!("b{n}.embf"));
        file.write(&first).unwrap();
        let back = EmbeddingFile::read(&first).unwrap();
        back.write(&second).unwrap();
        let bits = |f: &EmbeddingFile| f.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        let same = std::fs::read(&first).unwrap() == std::fs::read(&second).unwrap()
            && bits(&back) == bits(&file)
            && back.ids() == file.ids()
            && (back.rows(), back.dim()) == (file.rows(), file.dim());
        identical += same as usize;
    }
    (
        identical == total && edge == [true, true],
        format!("{identical}/{total} random files byte-identical after write, read, write (0- and 1-row cases included)"),
    )
}

fn run(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_fuzzyalign"))
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn same_files(a: &Path, b: &Path, names: &[&str]) -> bool {
    names
        .iter()
        .all(|n| std::fs::read(a.join(n)).unwrap() == std::fs::read(b.join(n)).unwrap())
}

fn manifest_without_time(dir: &Path) -> serde_json::Value {
    let mut v: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.join("manifest.json")).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("created_unix");
    v
}

fn criterion_10_determinism() -> (bool, String) {
    let root = tempfile::tempdir().unwrap();
    let p = |name: &str| root.path().join(name);
    let config = p("config.json");
    std::fs::write(
        &config,
        r#"{"scenario": {"num_identities": 24, "seed": 5}, "train": {"steps": 40, "batch_size": 8}}"#,
    )
    .unwrap();
    let cfg = config.to_str().unwrap();
    let s = |name: &str| p(name).to_str().unwrap().to_string();

    for w in ["world_a", "world_b"] {
        run(&["generate", "--config", cfg, "--out", &s(w)]);
    }
    let world_files = [
        "prototypes.embf",
        "attribute_pool.embf",
        "text_globals.embf",
        "aerial_globals.embf",
        "ground_globals.embf",
        "text_tokens.embf",
        "aerial_tokens.embf",
        "world.json",
    ];
    let worlds = same_files(&p("world_a"), &p("world_b"), &world_files)
        && manifest_without_time(&p("world_a")) == manifest_without_time(&p("world_b"));

    for (w, out) in [("world_a", "train_a"), ("world_b", "train_b")] {
        run(&[
            "train",
            "--config",
            cfg,
            "--world",
            &s(w),
            "--variant",
            "cda_fta",
            "--seed",
            "3",
            "--out",
            &s(out),
        ]);
    }
    let trained = same_files(
        &p("train_a"),
        &p("train_b"),
        &[
            "checkpoint.json",
            "trace.jsonl",
            "report.json",
            "report.txt",
        ],
    );

    for out in ["eval_a", "eval_b"] {
        run(&[
            "eval",
            "--query",
            &format!("{}/text_globals.embf", s("world_a")),
            "--gallery",
            &format!("{}/aerial_globals.embf", s("world_a")),
            "--out",
            &s(out),
        ]);
    }
    let evaluated = same_files(
        &p("eval_a"),
        &p("eval_b"),
        &["report.json", "report.txt", "cmc.csv"],
    );

    let world = generate(&ScenarioConfig {
        num_identities: 24,
        seed: 5,
        ..Default::default()
    })
    .unwrap();
    let train = TrainConfig {
        steps: 40,
        batch_size: 8,
        seed: 3,
        ..Default::default()
    };
    let align = AlignmentConfig::default();
    let x = run_experiment(&world, Variant::CdaFta, &align, &train).unwrap();
    let y = run_experiment(&world, Variant::CdaFta, &align, &train).unwrap();
    let library = x.params == y.params && x.report == y.report && x.trace == y.trace;

    (
        worlds && trained && evaluated && library,
        format!(
            "byte-identical reruns: generate {worlds}, train {trained}, eval {evaluated}; \
             in-process rerun identical {library}"
        ),
    )
}

type Criterion = fn() -> (bool, String);

fn main() {
    let criteria: [Criterion; 10] = [
        criterion_01_gradient_fidelity,
        criterion_02_stop_gradient,
        criterion_03_gate_exactness,
        criterion_04_degenerate_cda,
        criterion_05_fuzzy_algebra,
        criterion_06_loss_oracles,
        criterion_07_metric_oracle,
        criterion_08_directional_ablation,
        criterion_09_format_round_trip,
        criterion_10_determinism,
    ];
    let mut failed = 0;
    for (i, check) in criteria.iter().enumerate() {
        let (pass, detail) = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        });
        println!(
            "{} criterion {}: {detail}",
            if pass { "PASS" } else { "FAIL" },
            i + 1
        );
        failed += !pass as usize;
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
