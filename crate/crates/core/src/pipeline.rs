//! Everything between a config file and a trained checkpoint: dataset binding, the epoch
//! sampler, resumable training sessions and the snapshot/log loop.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, CheckpointMeta, RngState, SamplerState};
use crate::config::TrainConfig;
use crate::data::{container, Dataset, SHAPES};
use crate::error::{Error, Result};
use crate::factors::{FactorSet, LabelBatch};
use crate::netfactory::{build_stage1, build_stage2, ArchPlan, Encoder, StageOneModels, StageTwoModels};
use crate::nn::Module;
use crate::stage1::{StageOneLosses, StageOneTrainer};
use crate::stage2::{StageTwoLosses, StageTwoTrainer};

/// Environment variable consulted when no data directory is given on the command line.
pub const DATA_DIR_ENV: &str = "DISTILL_DATA_DIR";

const IDX_FILES: [(&str, &str); 2] = [
    ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
];

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

/// The directory a command should read from: the explicit override, else the config's.
pub fn data_dir(cfg: &TrainConfig, explicit: Option<&Path>) -> Option<PathBuf> {
    explicit.map(Path::to_path_buf).or_else(|| cfg.dataset.data_dir.clone())
}

/// File name of the cached shapes container for this dataset binding.
pub fn shapes_cache_name(cfg: &TrainConfig) -> String {
    format!("shapes-s{}-seed{}.dstl", cfg.dataset.subsample, cfg.dataset.seed)
}

fn is_idx_dataset(name: &str) -> bool {
    matches!(name, "mnist" | "fashion-mnist")
}

/// The configured dataset, before the correlated filter and the split.
fn load_source(cfg: &TrainConfig, dir: Option<&Path>) -> Result<Vec<Dataset>> {
    let name = cfg.dataset.name.as_str();
    if is_idx_dataset(name) {
        let dir = dir.ok_or_else(|| {
            Error::Config(format!("dataset `{name}` reads IDX files: pass --data-dir or set {DATA_DIR_ENV}"))
        })?;
        let mut parts = Vec::new();
        for (images, labels) in IDX_FILES {
            let mut ds = Dataset::load_idx(&dir.join(images), &dir.join(labels))?;
            ds.name = name.to_string();
            parts.push(ds);
        }
        return Ok(parts);
    }
    if name == SHAPES {
        if let Some(dir) = dir {
            let cache = dir.join(shapes_cache_name(cfg));
            if cache.exists() {
                log::info!("reading cached shapes from {}", cache.display());
                return Ok(vec![container::read(&cache)?]);
            }
        }
        return Ok(vec![Dataset::shapes(cfg.dataset.subsample, cfg.dataset.seed)?]);
    }
    Err(Error::Config(format!("unknown dataset `{name}` (mnist, fashion-mnist or shapes)")))
}

/// Train and test splits. IDX datasets use their file split; everything else a seeded holdout.
pub fn load_splits(cfg: &TrainConfig, dir: Option<&Path>) -> Result<Splits> {
    let mut parts = load_source(cfg, dir)?;
    let (mut train, test) = if parts.len() == 2 {
        let test = parts.pop().unwrap();
        (parts.pop().unwrap(), test)
    } else {
        let mut ds = parts.pop().unwrap();
        if cfg.dataset.correlated {
            ds = ds.correlated_subset()?;
        }
        ds.split(cfg.dataset.holdout, cfg.dataset.seed)?
    };
    if let Some(n) = cfg.dataset.train_limit {
        let keep: Vec<usize> = (0..n.min(train.len())).collect();
        train = train.select(&keep);
    }
    if train.height != cfg.image_size || train.width != cfg.image_size {
        return Err(Error::Config(format!(
            "image_size {} does not match `{}` images ({}x{})",
            cfg.image_size, train.name, train.height, train.width
        )));
    }
    if train.len() < cfg.train.batch_size {
        return Err(Error::Data(format!(
            "{} training samples for batch size {}",
            train.len(),
            cfg.train.batch_size
        )));
    }
    Ok(Splits { train, test })
}

/// Writes the shapes container (or validates IDX files) and returns the files touched.
pub fn generate_data(cfg: &TrainConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    if is_idx_dataset(&cfg.dataset.name) {
        load_source(cfg, Some(dir))?;
        return Ok(IDX_FILES.iter().flat_map(|(a, b)| [dir.join(a), dir.join(b)]).collect());
    }
    if cfg.dataset.name != SHAPES {
        return Err(Error::Config(format!("unknown dataset `{}`", cfg.dataset.name)));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ds = Dataset::shapes(cfg.dataset.subsample, cfg.dataset.seed)?;
    let path = dir.join(shapes_cache_name(cfg));
    container::write(&path, &ds)?;
    Ok(vec![path])
}

/// Epoch-shuffled sampling without replacement. The order of every epoch is derived from
/// `(seed, epoch)`, so the three counters in [`SamplerState`] are all a resume needs.
#[derive(Clone, Debug)]
pub struct Sampler {
    n: usize,
    state: SamplerState,
    order: Vec<usize>,
}

fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

impl Sampler {
    pub fn new(n: usize, seed: u64) -> Self {
        Sampler::from_state(n, SamplerState { seed, epoch: 0, cursor: 0 })
    }

    pub fn from_state(n: usize, state: SamplerState) -> Self {
        Sampler { n, order: epoch_order(n, state.seed, state.epoch), state }
    }

    pub fn state(&self) -> SamplerState {
        self.state
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.state.cursor == self.n {
                self.state.epoch += 1;
                self.state.cursor = 0;
                self.order = epoch_order(self.n, self.state.seed, self.state.epoch);
            }
            out.push(self.order[self.state.cursor]);
            self.state.cursor += 1;
        }
        out
    }
}

/// Fields that may change between a run and its resumption.
fn resumable_view(cfg: &TrainConfig) -> TrainConfig {
    let mut c = cfg.clone();
    c.train.stage1_iterations = 1;
    c.train.stage2_iterations = 1;
    c.train.log_interval = 1;
    c.train.snapshot_interval = 1;
    c.dataset.data_dir = None;
    c
}

fn check_resumable(saved: &TrainConfig, now: &TrainConfig) -> Result<()> {
    if resumable_view(saved) != resumable_view(now) {
        return Err(Error::Checkpoint(format!(
            "checkpoint was trained with config {}, incompatible with {}",
            saved.hash(),
            now.hash()
        )));
    }
    Ok(())
}

/// Stage II may change ablations and schedules but not the data binding or factors.
fn check_stage_two_source(stage1: &TrainConfig, now: &TrainConfig) -> Result<()> {
    let same = stage1.factors == now.factors
        && stage1.image_size == now.image_size
        && stage1.dataset.name == now.dataset.name
        && stage1.dataset.subsample == now.dataset.subsample
        && stage1.dataset.seed == now.dataset.seed
        && stage1.dataset.correlated == now.dataset.correlated
        && stage1.dataset.holdout == now.dataset.holdout;
    if !same {
        return Err(Error::Checkpoint("stage I checkpoint was trained on different data or factors".into()));
    }
    Ok(())
}

fn plan_for(cfg: &TrainConfig, channels: usize) -> Result<ArchPlan> {
    ArchPlan::new(cfg.image_size, channels)
}

fn channels_of(ckpt: &Checkpoint) -> Result<usize> {
    let t = ckpt
        .tensors
        .iter()
        .find(|(k, _)| *k == "stage1.encoder.0.weight" || *k == "encoder.0.weight")
        .ok_or_else(|| Error::Checkpoint("no encoder input layer stored".into()))?;
    Ok(t.1.shape[1])
}

/// Rebuilds the Stage I networks stored in `ckpt`.
pub fn load_stage1(ckpt: &Checkpoint) -> Result<(FactorSet, StageOneModels)> {
    if ckpt.meta.stage != 1 {
        return Err(Error::Checkpoint(format!(
            "expected a stage 1 checkpoint, found stage {}",
            ckpt.meta.stage
        )));
    }
    let cfg = &ckpt.meta.config;
    let mut factors = cfg.factor_set()?;
    factors.set_frequencies(&ckpt.meta.frequencies)?;
    let plan = plan_for(cfg, channels_of(ckpt)?)?;
    let mut models = build_stage1(&plan, &factors, &cfg.ablation, &mut ChaCha8Rng::seed_from_u64(0));
    ckpt.load_params("stage1", models.params_mut())?;
    Ok((factors, models))
}

/// Rebuilds the Stage II networks, including the frozen encoder, stored in `ckpt`.
pub fn load_stage2(ckpt: &Checkpoint) -> Result<(FactorSet, StageTwoModels)> {
    if ckpt.meta.stage != 2 {
        return Err(Error::Checkpoint(format!(
            "expected a stage 2 checkpoint, found stage {}",
            ckpt.meta.stage
        )));
    }
    let cfg = &ckpt.meta.config;
    let mut factors = cfg.factor_set()?;
    factors.set_frequencies(&ckpt.meta.frequencies)?;
    let plan = plan_for(cfg, channels_of(ckpt)?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut encoder = plan.encoder(factors.unknown().code_dim, &mut rng);
    ckpt.load_params("encoder", encoder.params_mut())?;
    let mut models = build_stage2(&plan, &factors, encoder, &mut rng)?;
    ckpt.load_params("stage2", models.trainable_params_mut())?;
    Ok((factors, models))
}

/// The unknown encoder of either stage.
pub fn load_encoder(ckpt: &Checkpoint) -> Result<Encoder> {
    match ckpt.meta.stage {
        1 => Ok(load_stage1(ckpt)?.1.encoder),
        2 => Ok(load_stage2(ckpt)?.1.encoder.inner().clone()),
        s => Err(Error::Checkpoint(format!("unknown stage {s}"))),
    }
}

/// Shared state of a training run.
pub struct RunState {
    pub config: TrainConfig,
    pub rng: ChaCha8Rng,
    pub sampler: Sampler,
    pub iteration: u64,
    pub labels: LabelBatch,
}

impl RunState {
    fn fresh(
        cfg: &TrainConfig,
        train: &Dataset,
        factors: &FactorSet,
        stream: u64,
    ) -> Result<(Self, ChaCha8Rng)> {
        let mut init = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        init.set_stream(stream);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        rng.set_stream(stream + 100);
        Ok((
            RunState {
                config: cfg.clone(),
                rng,
                sampler: Sampler::new(train.len(), cfg.train.seed.wrapping_add(stream)),
                iteration: 0,
                labels: train.labels_for(factors)?,
            },
            init,
        ))
    }

    fn resumed(cfg: &TrainConfig, ckpt: &Checkpoint, train: &Dataset, factors: &FactorSet) -> Result<Self> {
        check_resumable(&ckpt.meta.config, cfg)?;
        Ok(RunState {
            config: cfg.clone(),
            rng: ckpt.meta.rng.restore()?,
            sampler: Sampler::from_state(train.len(), ckpt.meta.sampler),
            iteration: ckpt.meta.iteration,
            labels: train.labels_for(factors)?,
        })
    }

    fn meta(&self, stage: u8, factors: &FactorSet) -> CheckpointMeta {
        CheckpointMeta {
            stage,
            iteration: self.iteration,
            config: self.config.clone(),
            config_hash: self.config.hash(),
            rng: RngState::capture(&self.rng),
            sampler: self.sampler.state(),
            frequencies: factors.frequencies(),
            optimizer_steps: Default::default(),
        }
    }

    fn next(&mut self, train: &Dataset) -> (crate::tensor::Tensor, LabelBatch) {
        let idx = self.sampler.next_batch(self.config.train.batch_size);
        (train.batch(&idx), self.labels.select(&idx))
    }
}

/// Stage I trainer plus its run state.
pub struct StageOneSession {
    pub trainer: StageOneTrainer,
    pub state: RunState,
}

impl StageOneSession {
    pub fn new(cfg: &TrainConfig, train: &Dataset) -> Result<Self> {
        let mut factors = cfg.factor_set()?;
        let (state, mut init) = RunState::fresh(cfg, train, &factors, 1)?;
        factors.estimate_frequencies(&state.labels)?;
        let plan = plan_for(cfg, train.channels)?;
        let models = build_stage1(&plan, &factors, &cfg.ablation, &mut init);
        Ok(StageOneSession { trainer: StageOneTrainer::new(models, factors, cfg)?, state })
    }

    pub fn resume(cfg: &TrainConfig, ckpt: &Checkpoint, train: &Dataset) -> Result<Self> {
        let (factors, models) = load_stage1(ckpt)?;
        let state = RunState::resumed(cfg, ckpt, train, &factors)?;
        let mut trainer = StageOneTrainer::new(models, factors, cfg)?;
        ckpt.load_adam("encoder", &mut trainer.opt_encoder)?;
        ckpt.load_adam("embedders", &mut trainer.opt_embedders)?;
        ckpt.load_adam("generator", &mut trainer.opt_generator)?;
        ckpt.load_adam("classifier", &mut trainer.opt_classifier)?;
        Ok(StageOneSession { trainer, state })
    }

    pub fn step(&mut self, train: &Dataset) -> Result<StageOneLosses> {
        let (x, y) = self.state.next(train);
        let it = self.state.iteration;
        let losses = self.trainer.step(&x, &y, &mut self.state.rng, it)?;
        self.state.iteration += 1;
        Ok(losses)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let t = &self.trainer;
        let mut c = Checkpoint::new(self.state.meta(1, &t.factors));
        c.put_params("stage1", t.models.params());
        c.put_adam("encoder", &t.opt_encoder);
        c.put_adam("embedders", &t.opt_embedders);
        c.put_adam("generator", &t.opt_generator);
        c.put_adam("classifier", &t.opt_classifier);
        c
    }
}

/// Stage II trainer plus its run state.
pub struct StageTwoSession {
    pub trainer: StageTwoTrainer,
    pub state: RunState,
}

impl StageTwoSession {
    /// Starts Stage II around the unknown encoder of a Stage I checkpoint.
    pub fn new(cfg: &TrainConfig, stage1: &Checkpoint, train: &Dataset) -> Result<Self> {
        check_stage_two_source(&stage1.meta.config, cfg)?;
        let (factors, s1) = load_stage1(stage1)?;
        let (state, mut init) = RunState::fresh(cfg, train, &factors, 2)?;
        let plan = plan_for(cfg, train.channels)?;
        let models = build_stage2(&plan, &factors, s1.encoder, &mut init)?;
        Ok(StageTwoSession { trainer: StageTwoTrainer::new(models, factors, cfg), state })
    }

    pub fn resume(cfg: &TrainConfig, ckpt: &Checkpoint, train: &Dataset) -> Result<Self> {
        let (factors, models) = load_stage2(ckpt)?;
        let state = RunState::resumed(cfg, ckpt, train, &factors)?;
        let mut trainer = StageTwoTrainer::new(models, factors, cfg);
        ckpt.load_adam("label_encoders", &mut trainer.opt_label_encoders)?;
        ckpt.load_adam("generator", &mut trainer.opt_generator)?;
        ckpt.load_adam("recognizer", &mut trainer.opt_recognizer)?;
        ckpt.load_adam("discriminator", &mut trainer.opt_discriminator)?;
        Ok(StageTwoSession { trainer, state })
    }

    pub fn step(&mut self, train: &Dataset) -> Result<StageTwoLosses> {
        let (x, y) = self.state.next(train);
        let it = self.state.iteration;
        let losses = self.trainer.step(&x, &y, &mut self.state.rng, it)?;
        self.state.iteration += 1;
        Ok(losses)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let t = &self.trainer;
        let mut c = Checkpoint::new(self.state.meta(2, &t.factors));
        c.put_params("encoder", t.models.encoder.params());
        c.put_params("stage2", t.models.trainable_params());
        c.put_adam("label_encoders", &t.opt_label_encoders);
        c.put_adam("generator", &t.opt_generator);
        c.put_adam("recognizer", &t.opt_recognizer);
        c.put_adam("discriminator", &t.opt_discriminator);
        c
    }
}

/// Either stage, behind one interface for the run loop.
pub enum Session {
    One(StageOneSession),
    Two(StageTwoSession),
}

impl Session {
    pub fn stage(&self) -> u8 {
        match self {
            Session::One(_) => 1,
            Session::Two(_) => 2,
        }
    }

    pub fn state(&self) -> &RunState {
        match self {
            Session::One(s) => &s.state,
            Session::Two(s) => &s.state,
        }
    }

    fn target(&self) -> u64 {
        let t = &self.state().config.train;
        match self {
            Session::One(_) => t.stage1_iterations,
            Session::Two(_) => t.stage2_iterations,
        }
    }

    fn csv_header(&self) -> &'static str {
        match self {
            Session::One(_) => StageOneLosses::CSV_HEADER,
            Session::Two(_) => StageTwoLosses::CSV_HEADER,
        }
    }

    /// One iteration; returns the CSV row for the iteration just completed.
    pub fn step(&mut self, train: &Dataset, seconds: f64) -> Result<String> {
        Ok(match self {
            Session::One(s) => {
                let l = s.step(train)?;
                l.csv_row(s.state.iteration, seconds)
            }
            Session::Two(s) => {
                let l = s.step(train)?;
                l.csv_row(s.state.iteration, seconds)
            }
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        match self {
            Session::One(s) => s.checkpoint(),
            Session::Two(s) => s.checkpoint(),
        }
    }

    pub fn param_hash(&self) -> [u8; 32] {
        match self {
            Session::One(s) => s.trainer.models.param_hash(),
            Session::Two(s) => s.trainer.gs_hash(),
        }
    }
}

pub fn checkpoint_path(out: &Path, stage: u8, iteration: u64) -> PathBuf {
    out.join(format!("stage{stage}-{iteration:08}.ckpt"))
}

pub fn log_path(out: &Path, stage: u8) -> PathBuf {
    out.join(format!("stage{stage}.csv"))
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub iteration: u64,
    pub checkpoints: Vec<PathBuf>,
    pub log: PathBuf,
}

/// Runs `session` to its configured iteration count (or `stop_at`, if earlier), snapshotting
/// every `snapshot_interval` iterations and at the end. On a non-finite loss the run stops
/// with an error and the snapshots already written are left as they are.
pub fn run(session: &mut Session, train: &Dataset, out: &Path, stop_at: Option<u64>) -> Result<RunSummary> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let stage = session.stage();
    let log = log_path(out, stage);
    let fresh_log = !log.exists();
    let mut file =
        std::fs::OpenOptions::new().create(true).append(true).open(&log).map_err(|e| Error::io(&log, e))?;
    if fresh_log {
        writeln!(file, "{}", session.csv_header()).map_err(|e| Error::io(&log, e))?;
    }
    let cfg = session.state().config.clone();
    let config_copy = out.join(format!("stage{stage}-config.toml"));
    std::fs::write(&config_copy, cfg.to_toml()).map_err(|e| Error::io(&config_copy, e))?;

    let target = stop_at.map_or(session.target(), |s| s.min(session.target()));
    let start = Instant::now();
    let mut checkpoints = Vec::new();
    let mut last_saved = session.state().iteration;
    while session.state().iteration < target {
        let row = session.step(train, start.elapsed().as_secs_f64())?;
        let it = session.state().iteration;
        if it.is_multiple_of(cfg.train.log_interval) {
            writeln!(file, "{row}").map_err(|e| Error::io(&log, e))?;
            file.flush().map_err(|e| Error::io(&log, e))?;
            log::info!("stage {stage} {row}");
        }
        if it.is_multiple_of(cfg.train.snapshot_interval) {
            let path = checkpoint_path(out, stage, it);
            session.checkpoint().save(&path)?;
            checkpoints.push(path);
            last_saved = it;
        }
    }
    let it = session.state().iteration;
    if last_saved != it || checkpoints.is_empty() && !checkpoint_path(out, stage, it).exists() {
        let path = checkpoint_path(out, stage, it);
        session.checkpoint().save(&path)?;
        checkpoints.push(path);
    }
    Ok(RunSummary { iteration: it, checkpoints, log })
}

/// Stage checkpoints in `dir`, ordered by iteration.
pub fn list_checkpoints(dir: &Path, stage: Option<u8>) -> Result<Vec<(u64, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some(rest) = name.strip_prefix("stage").and_then(|r| r.strip_suffix(".ckpt")) else {
            continue;
        };
        let Some((s, it)) = rest.split_once('-') else {
            continue;
        };
        let (Ok(s), Ok(it)) = (s.parse::<u8>(), it.parse::<u64>()) else {
            continue;
        };
        if stage.is_none_or(|want| want == s) {
            out.push((it, path));
        }
    }
    out.sort();
    Ok(out)
}
