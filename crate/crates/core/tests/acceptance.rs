//! Acceptance suite. Every criterion prints one `PASS`/`FAIL` line.
//!
//! Criteria 1, 2, 7 and 9 run with `cargo test`. The training criteria (3, 4, 5, 6, 8) need
//! hours of compute and are `#[ignore]`d; run them with
//! `cargo test --release -p distill-core --test acceptance -- --ignored --nocapture`.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use distill_core::data::idx::{self, IdxPair};
use distill_core::data::Dataset;
use distill_core::losses::{self, ReferenceDistribution};
use distill_core::netfactory::StageTwoModels;
use distill_core::pipeline::{self, Session, Splits, StageOneSession, StageTwoSession};
use distill_core::{eval, metrics, Error, FactorSet, Tensor, TrainConfig};

fn report(id: &str, pass: bool, detail: String) -> bool {
    println!("criterion {id}: {} {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

// ---------------------------------------------------------------- forward-mode autodiff oracle

#[derive(Clone, Copy)]
struct Dual {
    v: f64,
    d: f64,
}

impl Dual {
    fn exp(self) -> Dual {
        let e = self.v.exp();
        Dual { v: e, d: e * self.d }
    }
    fn ln(self) -> Dual {
        Dual { v: self.v.ln(), d: self.d / self.v }
    }
    fn add(self, o: Dual) -> Dual {
        Dual { v: self.v + o.v, d: self.d + o.d }
    }
}

/// `ln sum_{j in keep} e^{t_j}` with `t_i` as the active tangent.
fn log_sum(t: &[f64], active: usize, keep: impl Fn(usize) -> bool) -> Dual {
    let max = t.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = Dual { v: 0.0, d: 0.0 };
    for (j, &tj) in t.iter().enumerate().filter(|(j, _)| keep(*j)) {
        let x = Dual { v: tj - max, d: if j == active { 1.0 } else { 0.0 } };
        s = s.add(x.exp());
    }
    let l = s.ln();
    Dual { v: l.v + max, d: l.d }
}

fn dual_nll(t: &[f64], k: usize, i: usize) -> f64 {
    let seed = if i == k { 1.0 } else { 0.0 };
    log_sum(t, i, |_| true).d - seed
}

fn dual_nlu(t: &[f64], k: usize, i: usize) -> f64 {
    // -ln(1 - s_k) = ln sum_j e^{t_j} - ln sum_{j != k} e^{t_j}
    log_sum(t, i, |_| true).d - log_sum(t, i, |j| j != k).d
}

fn plain_nll(t: &[f64], k: usize) -> f64 {
    let p = losses::ClassDistribution::from_logits(t.to_vec()).unwrap();
    losses::nll(&p, k).unwrap()
}

fn plain_nlu(t: &[f64], k: usize) -> f64 {
    let p = losses::ClassDistribution::from_logits(t.to_vec()).unwrap();
    losses::nlu(&p, k).unwrap()
}

fn central_diff(f: impl Fn(&[f64]) -> f64, t: &[f64], h: f64) -> Vec<f64> {
    let mut x = t.to_vec();
    (0..t.len())
        .map(|i| {
            x[i] = t[i] + h;
            let up = f(&x);
            x[i] = t[i] - h;
            let down = f(&x);
            x[i] = t[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `||a - b||_inf / max(||b||_inf, 1e-12)`.
fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

#[test]
fn criterion_1_loss_gradients_match_autodiff_and_finite_differences() {
    const TOL: f64 = 1e-5;
    const STEP: f64 = 1e-5;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = [0.0f64; 5];
    for _ in 0..1000 {
        let m = rng.random_range(2..=20);
        let t: Vec<f64> = (0..m).map(|_| rng.random_range(-3.0..3.0)).collect();
        let k = rng.random_range(0..m);
        let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let q = ReferenceDistribution::new(raw.iter().map(|v| v / total).collect()).unwrap();
        let w = q.weight(k).unwrap();

        let g_nll = losses::nll_grad_logits(&t, k).unwrap();
        let g_nlu = losses::nlu_grad_logits(&t, k).unwrap();
        let g_nluq = losses::nlu_weighted_grad_logits(&t, k, &q).unwrap();

        let ad_nll: Vec<f64> = (0..m).map(|i| dual_nll(&t, k, i)).collect();
        let ad_nlu: Vec<f64> = (0..m).map(|i| dual_nlu(&t, k, i)).collect();
        let ad_nluq: Vec<f64> = ad_nlu.iter().map(|g| w * g).collect();
        let fd_nll = central_diff(|x| plain_nll(x, k), &t, STEP);
        let fd_nlu = central_diff(|x| plain_nlu(x, k), &t, STEP);

        for (slot, e) in [
            rel_err(&g_nll, &ad_nll),
            rel_err(&g_nlu, &ad_nlu),
            rel_err(&g_nluq, &ad_nluq),
            rel_err(&g_nll, &fd_nll),
            rel_err(&g_nlu, &fd_nlu),
        ]
        .into_iter()
        .enumerate()
        {
            worst[slot] = worst[slot].max(e);
        }
    }
    let elapsed = start.elapsed();
    let max = worst.iter().cloned().fold(0.0, f64::max);
    let ok = report(
        "1",
        max <= TOL && elapsed < Duration::from_secs(10),
        format!(
            "max rel err {max:.2e} (nll/nlu/nlu_q vs autodiff {:.1e}/{:.1e}/{:.1e}, nll/nlu vs FD {:.1e}/{:.1e}) \
             tol {TOL:.0e}, {:.2}s < 10s",
            worst[0],
            worst[1],
            worst[2],
            worst[3],
            worst[4],
            elapsed.as_secs_f64()
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- equilibrium

fn expected_nluq_grad(t: &[f64], q: &ReferenceDistribution) -> Vec<f64> {
    let mut g = vec![0.0; t.len()];
    for (k, &qk) in q.as_slice().iter().enumerate() {
        for (gi, v) in g.iter_mut().zip(losses::nlu_weighted_grad_logits(t, k, q).unwrap()) {
            *gi += qk * v;
        }
    }
    g
}

#[test]
fn criterion_2_weighted_unlikelihood_equilibrium() {
    const TOL: f64 = 1e-8;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_grad, mut worst_l1, mut min_curv) = (0.0f64, 0.0f64, f64::INFINITY);
    for _ in 0..100 {
        let m = rng.random_range(2..=20);
        let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let qv: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let q = ReferenceDistribution::new(qv.clone()).unwrap();
        let t: Vec<f64> = qv.iter().map(|v| v.ln()).collect();

        let g = expected_nluq_grad(&t, &q);
        worst_grad = worst_grad.max(g.iter().fold(0.0f64, |a, v| a.max(v.abs())));

        // Diagonal of the Hessian, by central differences of the analytic expected gradient.
        let h = 1e-4;
        for i in 0..m {
            let mut x = t.clone();
            x[i] = t[i] + h;
            let up = expected_nluq_grad(&x, &q)[i];
            x[i] = t[i] - h;
            let down = expected_nluq_grad(&x, &q)[i];
            min_curv = min_curv.min((up - down) / (2.0 * h));
        }

        for k in 0..m {
            let l1 = |g: Vec<f64>| g.iter().map(|v| v.abs()).sum::<f64>();
            let a = l1(losses::nll_grad_logits(&t, k).unwrap());
            let b = l1(losses::nlu_weighted_grad_logits(&t, k, &q).unwrap());
            worst_l1 = worst_l1.max((a - b).abs());
        }
    }
    let elapsed = start.elapsed();
    let ok = report(
        "2",
        worst_grad <= TOL && min_curv > 0.0 && worst_l1 <= TOL && elapsed < Duration::from_secs(10),
        format!(
            "expected-gradient L_inf {worst_grad:.1e} <= {TOL:.0e}, min second partial {min_curv:.3e} > 0, \
             L1 gap {worst_l1:.1e} <= {TOL:.0e}, {:.2}s < 10s",
            elapsed.as_secs_f64()
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- MIG estimator

#[test]
fn criterion_7_mig_estimator_oracle() {
    let start = Instant::now();
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let normal = rand_distr::Normal::new(0.0, 1e-3).unwrap();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..10)).collect();
    let owned =
        Tensor::new(vec![n, 1], labels.iter().map(|&l| l as f32 + rng.sample(normal) as f32).collect())
            .unwrap();
    let noise = Tensor::new(vec![n, 1], (0..n).map(|_| rng.random::<f32>()).collect()).unwrap();
    let (good, _) = metrics::mig(&[&owned, &noise], std::slice::from_ref(&labels), 20).unwrap();

    let mut shuffled = labels.clone();
    rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
    let (bad, _) = metrics::mig(&[&owned, &noise], &[shuffled], 20).unwrap();
    let elapsed = start.elapsed();
    let ok = report(
        "7",
        good >= 0.95 && bad.abs() <= 0.05 && elapsed < Duration::from_secs(30),
        format!(
            "constructed MIG {good:.4} >= 0.95, shuffled |MIG| {:.4} <= 0.05, {:.2}s < 30s",
            bad.abs(),
            elapsed.as_secs_f64()
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- IDX ingestion

#[test]
fn criterion_9_idx_round_trip_and_malformed_files() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("images.idx"), dir.path().join("labels.idx"));
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let pair = IdxPair {
        rows: 28,
        cols: 28,
        images: (0..37 * 28 * 28).map(|_| rng.random()).collect(),
        labels: (0..37).map(|_| rng.random_range(0..10)).collect(),
    };
    idx::write_pair(&img, &lab, &pair).unwrap();
    let back = idx::read_pair(&img, &lab).unwrap();
    let img_bytes = std::fs::read(&img).unwrap();
    let lab_bytes = std::fs::read(&lab).unwrap();
    let round_trip = back == pair
        && idx::encode_images(back.rows, back.cols, &back.images) == img_bytes
        && idx::encode_labels(&back.labels) == lab_bytes
        && Dataset::load_idx(&img, &lab).map(|d| d.len()).ok() == Some(37);

    let bad = |name: &str, bytes: &[u8]| -> PathBuf {
        let p = dir.path().join(name);
        std::fs::write(&p, bytes).unwrap();
        p
    };
    let mut wrong = img_bytes.clone();
    wrong[3] = 0x01;
    let wrong_magic = matches!(idx::read_pair(&bad("magic", &wrong), &lab), Err(Error::WrongMagic { .. }));
    let short = bad("short", &img_bytes[..img_bytes.len() - 5]);
    let truncated = matches!(idx::read_pair(&short, &lab), Err(Error::Truncated { .. }));
    let fewer = bad("fewer", &idx::encode_labels(&pair.labels[..36]));
    let mismatch = matches!(idx::read_pair(&img, &fewer), Err(Error::CountMismatch { .. }));
    let elapsed = start.elapsed();
    let ok = report(
        "9",
        round_trip && wrong_magic && truncated && mismatch && elapsed < Duration::from_secs(1),
        format!(
            "round-trip {round_trip}, wrong magic {wrong_magic}, truncated {truncated}, count mismatch {mismatch}, \
             {:.3}s < 1s",
            elapsed.as_secs_f64()
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- training criteria

fn config(name: &str) -> TrainConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    TrainConfig::load(&path).unwrap()
}

fn splits(cfg: &TrainConfig) -> Splits {
    let dir = pipeline::data_dir(cfg, None);
    pipeline::load_splits(cfg, dir.as_deref()).unwrap()
}

/// Both stages in memory; returns the Stage II models and the wall-clock time.
fn train_both(cfg: &TrainConfig, data: &Splits) -> (FactorSet, StageTwoModels, Duration) {
    let start = Instant::now();
    let mut one = Session::One(StageOneSession::new(cfg, &data.train).unwrap());
    while one.state().iteration < cfg.train.stage1_iterations {
        one.step(&data.train, 0.0).unwrap();
    }
    let ckpt = one.checkpoint();
    let mut two = Session::Two(StageTwoSession::new(cfg, &ckpt, &data.train).unwrap());
    while two.state().iteration < cfg.train.stage2_iterations {
        two.step(&data.train, 0.0).unwrap();
    }
    let (factors, models) = pipeline::load_stage2(&two.checkpoint()).unwrap();
    (factors, models, start.elapsed())
}

fn mig_of(
    cfg: &TrainConfig,
    factors: &FactorSet,
    models: &StageTwoModels,
    test: &Dataset,
) -> (f64, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (score, matrix) =
        eval::mig(models, factors, test, cfg.metrics.mig_bins, cfg.metrics.mig_use_means, &mut rng).unwrap();
    let own: Vec<usize> = (0..factors.labeled_count()).collect();
    (score, metrics::mig::gaps(&matrix, &own))
}

#[test]
#[ignore = "trains MNIST end to end; hours on one CPU core"]
fn criterion_3_mnist_end_to_end() {
    let cfg = config("mnist.toml");
    let data = splits(&cfg);
    let (factors, models, took) = train_both(&cfg, &data);
    let (score, _) = mig_of(&cfg, &factors, &models, &data.test);
    let mse = eval::stage2_mse(&models, &data.test, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let ok = report(
        "3",
        score >= 0.90 && mse <= 0.02,
        format!(
            "MIG {score:.4} >= 0.90, test MSE {mse:.5} <= 0.02 ({} train images, {:.0}s)",
            data.train.len(),
            took.as_secs_f64()
        ),
    );
    assert!(ok);
}

#[test]
#[ignore = "reduced MNIST profile: 50k iterations per stage"]
fn criterion_3_mnist_reduced_profile() {
    let mut cfg = config("mnist.toml");
    cfg.dataset.train_limit = Some(10_000);
    let data = splits(&cfg);
    let (factors, models, took) = train_both(&cfg, &data);
    let (score, _) = mig_of(&cfg, &factors, &models, &data.test);
    let ok = report(
        "3r",
        score >= 0.80 && took < Duration::from_secs(30 * 60),
        format!(
            "reduced MIG {score:.4} >= 0.80 ({} train images), {:.0}s < 1800s",
            data.train.len(),
            took.as_secs_f64()
        ),
    );
    assert!(ok);
}

fn consistency_of(cfg: &TrainConfig, models: &StageTwoModels, test: &Dataset) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    eval::consistency(
        models,
        test,
        &cfg.probe_factor(),
        cfg.metrics.consistency_count,
        cfg.ablation.noise_unknown,
        &mut rng,
    )
    .unwrap()
    .ratio
}

#[test]
#[ignore = "two shapes models at 64 px; many hours on one CPU core"]
fn criterion_4_consistency_ratio() {
    let hour = Duration::from_secs(3600);
    let std_cfg = config("shapes.toml");
    let data = splits(&std_cfg);
    let (_, models, t_std) = train_both(&std_cfg, &data);
    let standard = consistency_of(&std_cfg, &models, &data.test);
    let noise_cfg = config("shapes-noise-unknown.toml");
    let (_, models, t_noise) = train_both(&noise_cfg, &data);
    let noise = consistency_of(&noise_cfg, &models, &data.test);
    let ok = report(
        "4",
        standard >= 0.95 && noise <= 0.85 && standard - noise >= 0.10 && t_std <= hour && t_noise <= hour,
        format!(
            "standard {standard:.4} >= 0.95, noise_unknown {noise:.4} <= 0.85, gap {:.4} >= 0.10, \
             {:.0}s/{:.0}s <= 3600s",
            standard - noise,
            t_std.as_secs_f64(),
            t_noise.as_secs_f64()
        ),
    );
    assert!(ok);
}

#[test]
#[ignore = "three shapes models at 64 px; many hours on one CPU core"]
fn criterion_5_unknown_scope_robustness() {
    let mut lines = Vec::new();
    let mut ok = true;
    for merged in [1, 3, 5] {
        let cfg = config(&format!("shapes-merge{merged}.toml"));
        let data = splits(&cfg);
        let (factors, models, took) = train_both(&cfg, &data);
        let (_, gaps) = mig_of(&cfg, &factors, &models, &data.test);
        let hue = gaps[factors.labeled_index("object_hue").unwrap()];
        ok &= hue >= 0.85 && took <= Duration::from_secs(3600);
        lines.push(format!("{merged} merged: object-hue MIG {hue:.4} ({:.0}s)", took.as_secs_f64()));
    }
    let ok = report("5", ok, format!("{} (each >= 0.85, <= 3600s)", lines.join(", ")));
    assert!(ok);
}

fn stage1_trace_median(cfg: &TrainConfig, data: &Splits, out: &Path) -> f64 {
    let mut session = Session::One(StageOneSession::new(cfg, &data.train).unwrap());
    pipeline::run(&mut session, &data.train, out, None).unwrap();
    let snapshots: Vec<_> = pipeline::list_checkpoints(out, Some(1))
        .unwrap()
        .into_iter()
        .map(|(it, p)| {
            let ckpt = distill_core::checkpoint::Checkpoint::load(&p).unwrap();
            (it, pipeline::load_encoder(&ckpt).unwrap())
        })
        .collect();
    assert_eq!(snapshots.len(), 20, "expected 20 snapshots");
    eval::stability(&snapshots, &data.test).unwrap().median().unwrap()
}

#[test]
#[ignore = "three 40k-iteration Stage I runs at 64 px; days on one CPU core"]
fn criterion_6_stability_ab() {
    let dir = tempfile::tempdir().unwrap();
    let base = config("shapes-stability.toml");
    let data = splits(&base);
    let mut medians = Vec::new();
    for name in [
        "shapes-stability.toml",
        "shapes-stability-maximize-nll.toml",
        "shapes-stability-code-space-classifier.toml",
    ] {
        let out = dir.path().join(name);
        medians.push(stage1_trace_median(&config(name), &data, &out));
    }
    let ok = report(
        "6",
        medians[0] < medians[1] && medians[0] < medians[2],
        format!(
            "median displacement standard {:.4e} < maximize_nll {:.4e} and < code_space {:.4e}",
            medians[0], medians[1], medians[2]
        ),
    );
    assert!(ok);
}

#[test]
#[ignore = "two correlated shapes models at 64 px; many hours on one CPU core"]
fn criterion_8_correlated_factors() {
    let cfg = config("shapes-correlated.toml");
    let data = splits(&cfg);
    let (factors, models, _) = train_both(&cfg, &data);
    let (labeled_mig, _) = mig_of(&cfg, &factors, &models, &data.test);

    let cfg = config("shapes-correlated-floor.toml");
    let data = splits(&cfg);
    let (_, models, _) = train_both(&cfg, &data);
    let wall = data.test.factor_labels("wall_hue").unwrap();
    let floor = data.test.factor_labels("floor_hue").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut worst = f64::INFINITY;
    for hue in 0..10 {
        let idx: Vec<usize> = (0..wall.len()).filter(|&j| wall[j] == hue).collect();
        let subset = data.test.select(&idx);
        let codes = eval::encode(models.encoder.inner(), &subset, true, &mut rng);
        let labels: Vec<usize> = idx.iter().map(|&j| floor[j]).collect();
        let acc = metrics::nearest_centroid_accuracy(&metrics::project_top2(&codes), &labels).unwrap();
        worst = worst.min(acc);
    }
    let ok = report(
        "8",
        (0.70..=0.83).contains(&labeled_mig) && worst >= 0.8,
        format!(
            "labeled MIG {labeled_mig:.4} in [0.70, 0.83] (bound 0.8257), \
             min per-wall-hue floor centroid accuracy {worst:.4} >= 0.8"
        ),
    );
    assert!(ok);
}

#[test]
fn every_shipped_config_validates() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg = TrainConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            cfg.factor_set().unwrap();
            n += 1;
        }
    }
    assert!(n >= 10);
}
