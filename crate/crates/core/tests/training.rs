//! Training behaviour on tiny synthetic digit sets: overfitting oracles, frozen-encoder and
//! variant contracts, and bit-exact resumption through the run loop.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use distill_core::checkpoint::Checkpoint;
use distill_core::data::idx::{self, IdxPair};
use distill_core::data::Dataset;
use distill_core::netfactory::{build_stage1, build_stage2, ArchPlan};
use distill_core::nn::Module;
use distill_core::pipeline::{self, Session, StageOneSession, StageTwoSession};
use distill_core::stability_ablation::{stage1_variant_step, StabilityVariant};
use distill_core::stage1::StageOneTrainer;
use distill_core::stage2::StageTwoTrainer;
use distill_core::{LabelBatch, TrainConfig};

fn config(batch: usize, stage1: u64, stage2: u64) -> TrainConfig {
    TrainConfig::from_toml(&format!(
        r#"
image_size = 28
[dataset]
name = "mnist"
[[factors]]
name = "digit"
kind = "labeled-discrete"
num_classes = 10
code_dim = 4
[[factors]]
name = "style"
kind = "unknown"
code_dim = 4
[train]
batch_size = {batch}
stage1_iterations = {stage1}
stage2_iterations = {stage2}
snapshot_interval = 3
log_interval = 1
seed = 11
"#
    ))
    .unwrap()
}

/// `n` digits whose class lights one horizontal band and whose style shifts brightness.
fn digits(n: usize, seed: u64) -> IdxPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n * 784);
    let labels: Vec<u8> = (0..n).map(|j| (j % 10) as u8).collect();
    for &l in &labels {
        let style: u8 = rng.random_range(40..120);
        for r in 0..28 {
            for _ in 0..28 {
                let band = r / 3 == l as usize;
                images.push(if band { 255 } else { style });
            }
        }
    }
    IdxPair { rows: 28, cols: 28, images, labels }
}

fn dataset(dir: &Path, n: usize) -> Dataset {
    let (img, lab) = (dir.join("img.idx"), dir.join("lab.idx"));
    idx::write_pair(&img, &lab, &digits(n, 5)).unwrap();
    Dataset::load_idx(&img, &lab).unwrap()
}

fn all_classes() -> LabelBatch {
    LabelBatch { columns: vec![(0..10).collect()] }
}

fn stage1_trainer(cfg: &TrainConfig, seed: u64) -> StageOneTrainer {
    let mut factors = cfg.factor_set().unwrap();
    factors.estimate_frequencies(&all_classes()).unwrap();
    let plan = ArchPlan::new(28, 1).unwrap();
    let models = build_stage1(&plan, &factors, &cfg.ablation, &mut ChaCha8Rng::seed_from_u64(seed));
    StageOneTrainer::new(models, factors, cfg).unwrap()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn stage1_overfits_one_sample() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), 10);
    // reconstruction pressure only: with one label there is nothing for the adversary to remove
    let mut cfg = config(2, 1, 1);
    cfg.train.lambda_adv1 = 0.0;
    let mut t = stage1_trainer(&cfg, 1);
    // the same sample twice: a batch must hold at least two rows
    let x = ds.batch(&[3, 3]);
    let y = LabelBatch { columns: vec![vec![3, 3]] };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let rec: Vec<f64> = (0..200).map(|i| t.step(&x, &y, &mut rng, i).unwrap().rec).collect();
    // Adam at the default rate bounces a little, so the trend is checked on window means
    let windows: Vec<f64> = rec.chunks(40).map(mean).collect();
    assert!(windows[1..].iter().all(|&w| w < 0.05 * windows[0]), "{windows:?}");
    assert!(mean(&rec[100..]) < mean(&rec[..100]), "{windows:?}");
    assert!(windows[4] < 0.02 * windows[0], "{windows:?}");
}

#[test]
fn stage2_identity_recombination_reduces_code_distance_with_frozen_encoder() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), 10);
    let cfg = config(4, 1, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let factors = cfg.factor_set().unwrap();
    let plan = ArchPlan::new(28, 1).unwrap();
    let e = plan.encoder(4, &mut rng);
    let models = build_stage2(&plan, &factors, e, &mut rng).unwrap();
    let mut t = StageTwoTrainer::new(models, factors, &cfg);
    t.identity_recombination = true;
    let e0 = t.models.encoder.param_hash();
    let x = ds.batch(&[0, 1, 2, 3]);
    let y = LabelBatch { columns: vec![vec![0, 1, 2, 3]] };
    let mut dist = Vec::new();
    for i in 0..500 {
        dist.push(t.step(&x, &y, &mut rng, i).unwrap().code_dist);
        if i == 99 {
            assert_eq!(e0, t.models.encoder.param_hash(), "E moved within 100 steps");
        }
    }
    assert_eq!(e0, t.models.encoder.param_hash());
    let (head, tail) = (mean(&dist[..50]), mean(&dist[450..]));
    assert!(tail < 0.5 * head, "code distance {head} -> {tail}");
}

#[test]
fn standard_variant_is_the_plain_step() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), 10);
    let cfg = config(4, 1, 1);
    let x = ds.batch(&[0, 1, 2, 3]);
    let y = LabelBatch { columns: vec![vec![0, 1, 2, 3]] };
    let mut a = stage1_trainer(&cfg, 4);
    let mut b = stage1_trainer(&cfg, 4);
    let (mut ra, mut rb) = (ChaCha8Rng::seed_from_u64(5), ChaCha8Rng::seed_from_u64(5));
    for i in 0..3 {
        let la = a.step(&x, &y, &mut ra, i).unwrap();
        let lb = stage1_variant_step(&mut b, &x, &y, StabilityVariant::STANDARD, &mut rb, i).unwrap();
        assert_eq!(la, lb);
    }
    assert_eq!(a.models.param_hash(), b.models.param_hash());
}

#[test]
fn variants_share_reconstruction_and_kl_at_iteration_zero() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), 10);
    let x = ds.batch(&[0, 1, 2, 3]);
    let y = LabelBatch { columns: vec![vec![0, 1, 2, 3]] };
    let first = |mut cfg: TrainConfig, set: fn(&mut TrainConfig)| {
        set(&mut cfg);
        let mut t = stage1_trainer(&cfg, 6);
        t.step(&x, &y, &mut ChaCha8Rng::seed_from_u64(7), 0).unwrap()
    };
    let cfg = config(4, 1, 1);
    let standard = first(cfg.clone(), |_| {});
    let max_nll = first(cfg.clone(), |c| c.ablation.maximize_nll = true);
    let code = first(cfg, |c| c.ablation.code_space_classifier = true);
    for other in [max_nll, code] {
        assert_eq!(standard.rec, other.rec);
        assert_eq!(standard.kl_unknown, other.kl_unknown);
        assert_eq!(standard.kl_labels, other.kl_labels);
    }
    assert!(max_nll.adv < 0.0 && standard.adv > 0.0);
}

/// CSV rows without the wall-clock column.
fn rows(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string())
        .collect()
}

#[test]
fn interrupted_runs_resume_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), 20);
    let cfg = config(4, 6, 6);
    let (straight, split) = (dir.path().join("straight"), dir.path().join("split"));

    // stage I: six iterations straight, or three, a reload, and three more
    let mut s = Session::One(StageOneSession::new(&cfg, &ds).unwrap());
    pipeline::run(&mut s, &ds, &straight, None).unwrap();
    let straight_hash = s.param_hash();

    let mut s = Session::One(StageOneSession::new(&cfg, &ds).unwrap());
    let first = pipeline::run(&mut s, &ds, &split, Some(3)).unwrap();
    assert_eq!(first.iteration, 3);
    drop(s);
    let ckpt = Checkpoint::load(&pipeline::checkpoint_path(&split, 1, 3)).unwrap();
    let mut s = Session::One(StageOneSession::resume(&cfg, &ckpt, &ds).unwrap());
    pipeline::run(&mut s, &ds, &split, None).unwrap();
    assert_eq!(straight_hash, s.param_hash());
    assert_eq!(rows(&pipeline::log_path(&straight, 1)), rows(&pipeline::log_path(&split, 1)));
    assert_eq!(rows(&pipeline::log_path(&split, 1)).len(), 7);

    // stage II on top of the same stage I checkpoint
    let stage1 = Checkpoint::load(&pipeline::checkpoint_path(&straight, 1, 6)).unwrap();
    let mut s = Session::Two(StageTwoSession::new(&cfg, &stage1, &ds).unwrap());
    pipeline::run(&mut s, &ds, &straight, None).unwrap();
    let straight_hash = s.param_hash();

    let mut s = Session::Two(StageTwoSession::new(&cfg, &stage1, &ds).unwrap());
    pipeline::run(&mut s, &ds, &split, Some(3)).unwrap();
    let ckpt = Checkpoint::load(&pipeline::checkpoint_path(&split, 2, 3)).unwrap();
    let mut s = Session::Two(StageTwoSession::resume(&cfg, &ckpt, &ds).unwrap());
    pipeline::run(&mut s, &ds, &split, None).unwrap();
    assert_eq!(straight_hash, s.param_hash());
    assert_eq!(rows(&pipeline::log_path(&straight, 2)), rows(&pipeline::log_path(&split, 2)));

    // the frozen encoder still matches stage I byte for byte
    let last = Checkpoint::load(&pipeline::checkpoint_path(&split, 2, 6)).unwrap();
    let e1 = pipeline::load_encoder(&stage1).unwrap();
    let e2 = pipeline::load_encoder(&last).unwrap();
    let bytes = |e: &distill_core::netfactory::Encoder| -> Vec<f32> {
        e.params().iter().flat_map(|(_, p)| p.value.clone()).collect()
    };
    assert_eq!(bytes(&e1), bytes(&e2));
}

#[test]
fn resume_rejects_a_different_experiment() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), 20);
    let cfg = config(4, 2, 2);
    let mut s = Session::One(StageOneSession::new(&cfg, &ds).unwrap());
    pipeline::run(&mut s, &ds, dir.path(), None).unwrap();
    let ckpt = Checkpoint::load(&pipeline::checkpoint_path(dir.path(), 1, 2)).unwrap();

    let mut longer = cfg.clone();
    longer.train.stage1_iterations = 10;
    assert!(StageOneSession::resume(&longer, &ckpt, &ds).is_ok());

    let mut other = cfg.clone();
    other.train.lambda_kl = 0.5;
    let err = StageOneSession::resume(&other, &ckpt, &ds).err().unwrap();
    assert_eq!(err.category(), distill_core::ErrorCategory::Checkpoint);
}
