mod figures;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use distill_core::checkpoint::Checkpoint;
use distill_core::data::Dataset;
use distill_core::pipeline::{self, Session, StageOneSession, StageTwoSession, DATA_DIR_ENV};
use distill_core::{eval, Error, MetricsReport, Result, TrainConfig};

/// Exit status for malformed command lines.
const EXIT_USAGE: u8 = 64;

#[derive(Parser, Debug)]
#[command(name = "distill", version, about = "Two-stage unknown-factor distillation")]
struct Cli {
    /// Experiment file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory holding IDX files or cached datasets.
    #[arg(long, global = true, env = DATA_DIR_ENV)]
    data_dir: Option<PathBuf>,
    /// Input checkpoint (a directory of snapshots for `eval --metric stability`).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Output directory, or output image for figure commands.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Training seed override, or the evaluation seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Only print warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the shapes container, or validate IDX files.
    GenData,
    /// Train one stage.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Continue from a checkpoint of the same stage.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop once this many iterations have been completed.
        #[arg(long)]
        iterations: Option<u64>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long, value_enum)]
        metric: Metric,
        /// Evaluate on the first N test samples only.
        #[arg(long)]
        limit: Option<usize>,
        /// Consistency run length (default from the config).
        #[arg(long)]
        count: Option<usize>,
        /// Snapshot stage for stability.
        #[arg(long, default_value_t = 1)]
        stage: u8,
    },
    /// Write a (k+1)x(k+1) grid of swapped conditions.
    SampleGrid {
        #[arg(long, default_value_t = 8)]
        k: usize,
    },
    /// Scatter the codes of one encoder coloured by one factor.
    PlotCodes {
        #[arg(long)]
        encoding: String,
        #[arg(long)]
        coloring: String,
        #[arg(long)]
        limit: Option<usize>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Metric {
    Mig,
    Consistency,
    Mse,
    Stability,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.category().exit_code() as u8)
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData => gen_data(cli),
        Command::Train { stage, resume, iterations } => train(cli, *stage, resume.as_deref(), *iterations),
        Command::Eval { metric, limit, count, stage } => evaluate(cli, *metric, *limit, *count, *stage),
        Command::SampleGrid { k } => sample_grid(cli, *k),
        Command::PlotCodes { encoding, coloring, limit } => plot_codes(cli, encoding, coloring, *limit),
    }
}

fn require<'a>(v: &'a Option<PathBuf>, flag: &str, why: &str) -> Result<&'a Path> {
    v.as_deref().ok_or_else(|| Error::Config(format!("{why} needs --{flag}")))
}

fn load_config(cli: &Cli) -> Result<Option<TrainConfig>> {
    cli.config.as_deref().map(TrainConfig::load).transpose()
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn gen_data(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?.ok_or_else(|| Error::Config("gen-data needs --config".into()))?;
    let dir = pipeline::data_dir(&cfg, cli.data_dir.as_deref())
        .ok_or_else(|| Error::Config(format!("gen-data needs --data-dir or {DATA_DIR_ENV}")))?;
    for path in pipeline::generate_data(&cfg, &dir)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn train(cli: &Cli, stage: u8, resume: Option<&Path>, iterations: Option<u64>) -> Result<()> {
    let resume_ckpt = resume.map(Checkpoint::load).transpose()?;
    let mut cfg = match (load_config(cli)?, &resume_ckpt) {
        (Some(c), _) => c,
        (None, Some(r)) => r.meta.config.clone(),
        (None, None) => return Err(Error::Config("train needs --config".into())),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    let splits = pipeline::load_splits(&cfg, pipeline::data_dir(&cfg, cli.data_dir.as_deref()).as_deref())?;
    log::info!(
        "stage {stage}: {} train / {} test samples, config {}",
        splits.train.len(),
        splits.test.len(),
        cfg.hash()
    );
    let mut session = match (stage, &resume_ckpt) {
        (1, Some(r)) => Session::One(StageOneSession::resume(&cfg, r, &splits.train)?),
        (1, None) => Session::One(StageOneSession::new(&cfg, &splits.train)?),
        (2, Some(r)) => Session::Two(StageTwoSession::resume(&cfg, r, &splits.train)?),
        _ => {
            let path = require(&cli.checkpoint, "checkpoint", "stage 2 (a stage 1 checkpoint)")?;
            Session::Two(StageTwoSession::new(&cfg, &Checkpoint::load(path)?, &splits.train)?)
        }
    };
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("runs"));
    let summary = pipeline::run(&mut session, &splits.train, &out, iterations)?;
    println!("iteration {}", summary.iteration);
    println!("params {}", hex(&session.param_hash()));
    if let Some(last) = summary.checkpoints.last() {
        println!("checkpoint {}", last.display());
    }
    println!("log {}", summary.log.display());
    Ok(())
}

/// Config for data binding: the explicit file if given, else the checkpoint's own.
fn eval_config(cli: &Cli, ckpt: &Checkpoint) -> Result<TrainConfig> {
    Ok(load_config(cli)?.unwrap_or_else(|| ckpt.meta.config.clone()))
}

fn test_split(cli: &Cli, cfg: &TrainConfig, limit: Option<usize>) -> Result<Dataset> {
    let test = pipeline::load_splits(cfg, pipeline::data_dir(cfg, cli.data_dir.as_deref()).as_deref())?.test;
    Ok(match limit {
        Some(n) if n < test.len() => test.select(&(0..n).collect::<Vec<_>>()),
        _ => test,
    })
}

fn eval_rng(cli: &Cli) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(cli.seed.unwrap_or(0))
}

fn evaluate(cli: &Cli, metric: Metric, limit: Option<usize>, count: Option<usize>, stage: u8) -> Result<()> {
    let target = require(&cli.checkpoint, "checkpoint", "eval")?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("eval"));
    let mut rng = eval_rng(cli);
    let mut report = MetricsReport { checkpoint: target.display().to_string(), ..Default::default() };
    let name = match metric {
        Metric::Mig => "mig",
        Metric::Consistency => "consistency",
        Metric::Mse => "mse",
        Metric::Stability => "stability",
    };
    if metric == Metric::Stability {
        let snaps = if target.is_dir() {
            pipeline::list_checkpoints(target, Some(stage))?
        } else {
            vec![(0, target.to_path_buf())]
        };
        if snaps.len() < 2 {
            return Err(Error::Metric(format!(
                "stability needs at least 2 stage {stage} snapshots in {}, found {}",
                target.display(),
                snaps.len()
            )));
        }
        let first = Checkpoint::load(&snaps[0].1)?;
        let cfg = eval_config(cli, &first)?;
        report.config_hash = first.meta.config_hash.clone();
        let test = test_split(cli, &cfg, limit)?;
        let mut encoders = Vec::with_capacity(snaps.len());
        for (_, path) in &snaps {
            let c = Checkpoint::load(path)?;
            if c.meta.config_hash != first.meta.config_hash {
                return Err(Error::Checkpoint(format!("{} belongs to a different run", path.display())));
            }
            encoders.push((c.meta.iteration, pipeline::load_encoder(&c)?));
        }
        let trace = eval::stability(&encoders, &test)?;
        let mut csv = String::from("iteration,displacement\n");
        for (it, d) in &trace.points {
            csv.push_str(&format!("{it},{d}\n"));
        }
        write(&out.join("stability_trace.csv"), &csv)?;
        report.push("stability.median", trace.median().unwrap_or(0.0));
        report.push("stability.intervals", trace.points.len() as f64);
    } else {
        let ckpt = Checkpoint::load(target)?;
        let cfg = eval_config(cli, &ckpt)?;
        report.config_hash = ckpt.meta.config_hash.clone();
        let test = test_split(cli, &cfg, limit)?;
        match (metric, ckpt.meta.stage) {
            (Metric::Mse, 1) => {
                let (factors, models) = pipeline::load_stage1(&ckpt)?;
                report.push("mse", eval::stage1_mse(&models, &factors, &test, &mut rng)?);
            }
            (Metric::Mse, _) => {
                let (_, models) = pipeline::load_stage2(&ckpt)?;
                report.push("mse", eval::stage2_mse(&models, &test, &mut rng)?);
            }
            (Metric::Mig, _) => {
                let (factors, models) = pipeline::load_stage2(&ckpt)?;
                let (score, m) = eval::mig(
                    &models,
                    &factors,
                    &test,
                    cfg.metrics.mig_bins,
                    cfg.metrics.mig_use_means,
                    &mut rng,
                )?;
                report.push("mig", score);
                let mut encoders: Vec<String> = factors.labeled().map(|s| s.name.clone()).collect();
                encoders.push(factors.unknown().name.clone());
                for (spec, row) in factors.labeled().zip(&m.entries) {
                    for (enc, v) in encoders.iter().zip(row) {
                        report.push(format!("mi.{}.{}", spec.name, enc), *v);
                    }
                }
            }
            (Metric::Consistency, _) => {
                let (_, models) = pipeline::load_stage2(&ckpt)?;
                let count = count.unwrap_or(cfg.metrics.consistency_count);
                let noise = ckpt.meta.config.ablation.noise_unknown;
                let run = eval::consistency(&models, &test, &cfg.probe_factor(), count, noise, &mut rng)?;
                report.push("consistency", run.ratio);
                report.push("consistency.threshold", run.threshold);
                report.push("consistency.count", count as f64);
            }
            (Metric::Stability, _) => unreachable!(),
        }
    }
    write(&out.join(format!("{name}.csv")), &report.to_csv())?;
    write(&out.join(format!("{name}.txt")), &report.to_text())?;
    print!("{}", report.to_text());
    Ok(())
}

fn stage_two(cli: &Cli, what: &str) -> Result<(Checkpoint, TrainConfig)> {
    let ckpt = Checkpoint::load(require(&cli.checkpoint, "checkpoint", what)?)?;
    let cfg = eval_config(cli, &ckpt)?;
    Ok((ckpt, cfg))
}

fn png_text<'a>(ckpt: &'a Checkpoint, path: &'a str) -> [(&'a str, &'a str); 2] {
    [("config_hash", ckpt.meta.config_hash.as_str()), ("checkpoint", path)]
}

fn sample_grid(cli: &Cli, k: usize) -> Result<()> {
    if k < 1 {
        return Err(Error::Config("sample-grid needs --k >= 1".into()));
    }
    let (ckpt, cfg) = stage_two(cli, "sample-grid")?;
    let (_, models) = pipeline::load_stage2(&ckpt)?;
    let test = test_split(cli, &cfg, None)?;
    let (tiles, rows, cols) = eval::sample_grid(&models, &test, k, &mut eval_rng(cli))?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("grid.png"));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let (w, h, bytes) = eval::tile_image(&tiles, k + 1);
    let ckpt_name = cli.checkpoint.as_ref().unwrap().display().to_string();
    figures::write_png(&out, (w, h, test.channels), &bytes, &png_text(&ckpt, &ckpt_name))?;

    // companion: sources of every tile, plus probe colours on the shapes room
    let probes: Vec<(&str, (usize, usize))> = ["wall_hue", "floor_hue", "object_hue"]
        .into_iter()
        .filter_map(|f| test.probe(f).ok().map(|p| (f, p)))
        .collect();
    let mut csv = String::from("row,col,unknown_source,labeled_source");
    for (f, _) in &probes {
        csv.push_str(&format!(",{f}_r,{f}_g,{f}_b"));
    }
    csv.push('\n');
    let colors: Vec<Vec<[u8; 3]>> =
        probes.iter().map(|(_, p)| distill_core::metrics::probe_colors(&tiles, *p)).collect::<Result<_>>()?;
    for i in 0..=k {
        for j in 0..=k {
            let src = |v: &[usize], x: usize| if x == 0 { String::new() } else { v[x - 1].to_string() };
            csv.push_str(&format!("{i},{j},{},{}", src(&rows, i), src(&cols, j)));
            for c in &colors {
                let [r, g, b] = c[i * (k + 1) + j];
                csv.push_str(&format!(",{r},{g},{b}"));
            }
            csv.push('\n');
        }
    }
    write(&out.with_extension("csv"), &csv)?;
    println!("{}", out.display());
    Ok(())
}

fn plot_codes(cli: &Cli, encoding: &str, coloring: &str, limit: Option<usize>) -> Result<()> {
    let (ckpt, cfg) = stage_two(cli, "plot-codes")?;
    let (factors, models) = pipeline::load_stage2(&ckpt)?;
    let test = test_split(cli, &cfg, limit)?;
    let proj = eval::project_codes(&models, &factors, &test, encoding, coloring, &mut eval_rng(cli))?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("codes.png"));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let size = 512;
    let ckpt_name = cli.checkpoint.as_ref().unwrap().display().to_string();
    figures::write_png(
        &out,
        (size, size, 3),
        &figures::scatter(&proj.points, &proj.labels, size),
        &png_text(&ckpt, &ckpt_name),
    )?;
    let mut csv = String::from("x,y,label\n");
    for (p, l) in proj.points.iter().zip(&proj.labels) {
        csv.push_str(&format!("{},{},{l}\n", p[0], p[1]));
    }
    write(&out.with_extension("csv"), &csv)?;
    let mut report = MetricsReport {
        config_hash: ckpt.meta.config_hash.clone(),
        checkpoint: ckpt_name,
        values: Vec::new(),
    };
    report.push("centroid_accuracy", proj.accuracy);
    report.push("chance", proj.chance);
    report.push("points", proj.points.len() as f64);
    write(&out.with_extension("txt"), &report.to_text())?;
    print!("{}", report.to_text());
    Ok(())
}
