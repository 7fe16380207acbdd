//! `osml`: reproducible open-set meta-learning runs from the command line.
//!
//! Verbs: `gen-data`, `train`, `eval`, `sweep`, `inspect`. Every run
//! directory is self-describing: the canonical config echo, its content
//! hash, and the seeds are enough to reproduce it exactly (single worker).
//!
//! Exit codes: 0 success, 2 config errors, 3 data errors, 4 numerical
//! aborts, 1 anything else.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use osml_core::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
use osml_core::config::{DataSource, TrainConfig};
use osml_core::data::{
    generate_gaussian_mixture, load_delimited, split_classes, write_delimited, ClassSplit,
    LabeledDataset, SyntheticSpec,
};
use osml_core::episode::EpisodeConfig;
use osml_core::eval::{evaluate, AggregateReport, EvalOptions};
use osml_core::optim::{train, TrainLoopState, TrainObserver};
use osml_core::report::ProgressRecord;
use osml_core::Error as CoreError;

const OUT_ROOT_ENV: &str = "OSML_OUT_ROOT";

#[derive(Parser)]
#[command(
    name = "osml",
    about = "Episodic open-set recognition: train, evaluate, and sweep distance-softmax models",
    long_about = None,
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic Gaussian-mixture dataset file.
    ///
    /// Output is delimited text, UTF-8, one sample per line: feature fields
    /// followed by one integer class label. Same seed, same bytes.
    GenData(GenDataArgs),
    /// Train a model from a config file or preset.
    Train(TrainArgs),
    /// Evaluate a checkpoint over repeated episodes.
    Eval(EvalArgs),
    /// Train/eval cycles along one config axis, emitting a comparison table.
    Sweep(SweepArgs),
    /// Print checkpoint metadata.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    classes: usize,
    #[arg(long)]
    dim: usize,
    #[arg(long)]
    samples_per_class: usize,
    #[arg(long, default_value_t = 1.0)]
    center_scale: f64,
    #[arg(long, default_value_t = 0.14)]
    within_std: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// comma or tab
    #[arg(long, default_value = "comma")]
    delimiter: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Config file (`key = value` lines). Omit to use the preset alone.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset base: desk, paper-fewshot, or paper-largescale.
    #[arg(long)]
    preset: Option<String>,
    /// Override the config's base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory (default: $OSML_OUT_ROOT/run-HASH-sSEED).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Resume from a checkpoint written with the same config.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    eval_episodes: Option<u64>,
    #[arg(long)]
    way: Option<usize>,
    #[arg(long)]
    shot: Option<usize>,
    #[arg(long)]
    query_per_class: Option<usize>,
    #[arg(long)]
    open_way: Option<usize>,
    #[arg(long)]
    open_query_per_class: Option<usize>,
    #[arg(long)]
    batch_per_class: Option<usize>,
    /// Evaluation base seed (default: training seed + 1).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Where to write the report files (default: checkpoint directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// One of: way, train_open_way, eval_open_way, eval_open_query.
    #[arg(long)]
    axis: String,
    /// Comma-separated values for the axis.
    #[arg(long)]
    values: String,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Inspect(a) => cmd_inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn exit_code_for(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<CoreError>() {
        Some(CoreError::Config(_)) | Some(CoreError::Invalid(_)) => 2,
        Some(CoreError::Data { .. }) | Some(CoreError::Io(_)) => 3,
        Some(CoreError::NonFinite(_)) => 4,
        _ => 1,
    }
}

// ── shared plumbing ─────────────────────────────────────────────────────

/// Advisory lock: exactly one process owns a run directory.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> anyhow::Result<Self> {
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(anyhow::Error::new(
                CoreError::Invalid(format!(
                    "run directory {} is locked by another process (remove {} if stale)",
                    dir.display(),
                    path.display()
                )),
            )),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn file_names_a_preset(text: &str) -> Option<String> {
    text.lines()
        .filter_map(|raw| {
            let line = raw.split('#').next().unwrap_or("").trim();
            let (k, v) = line.split_once('=')?;
            (k.trim() == "preset").then(|| v.trim().to_string())
        })
        .next()
}

fn resolve_config(
    config: &Option<PathBuf>,
    preset: &Option<String>,
    seed: Option<u64>,
) -> anyhow::Result<TrainConfig> {
    let mut cfg = match config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CoreError::Config(format!("{}: {e}", path.display())))?;
            match (preset, file_names_a_preset(&text)) {
                (Some(flag), Some(file)) if *flag != file => {
                    return Err(CoreError::Config(format!(
                        "--preset {flag} conflicts with `preset = {file}` in {}",
                        path.display()
                    ))
                    .into())
                }
                (Some(flag), None) => {
                    // The flag supplies the base the file builds on.
                    TrainConfig::parse_str(&format!("preset = {flag}\n{text}"))?
                }
                _ => TrainConfig::parse_str(&text)?,
            }
        }
        None => match preset {
            Some(name) => TrainConfig::preset(name)?,
            None => TrainConfig::default(),
        },
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_dataset(cfg: &TrainConfig) -> anyhow::Result<LabeledDataset> {
    match cfg.data {
        DataSource::Synthetic => Ok(generate_gaussian_mixture(&cfg.synthetic)?),
        DataSource::File => Ok(load_delimited(Path::new(&cfg.dataset_path), cfg.delimiter)?),
    }
}

fn split_for(cfg: &TrainConfig, dataset: &LabeledDataset) -> anyhow::Result<ClassSplit> {
    Ok(split_classes(dataset, cfg.split_fractions, cfg.split_seed, cfg.allow_empty_splits)?)
}

fn default_run_dir(cfg: &TrainConfig) -> PathBuf {
    let root = std::env::var(OUT_ROOT_ENV).unwrap_or_else(|_| "runs".into());
    PathBuf::from(root).join(format!("run-{}-s{}", cfg.hash_hex(), cfg.seed))
}

fn write_config_echo(dir: &Path, cfg: &TrainConfig) -> anyhow::Result<()> {
    let mut text = format!("# content hash {}\n", cfg.hash_hex());
    text.push_str(&cfg.echo());
    fs::write(dir.join("config.echo"), text)?;
    Ok(())
}

// ── gen-data ────────────────────────────────────────────────────────────

fn cmd_gen_data(args: GenDataArgs) -> anyhow::Result<()> {
    let delimiter = match args.delimiter.as_str() {
        "comma" => ',',
        "tab" => '\t',
        other => {
            return Err(CoreError::Config(format!(
                "delimiter must be comma or tab, got {other:?}"
            ))
            .into())
        }
    };
    let spec = SyntheticSpec {
        n_classes: args.classes,
        dim: args.dim,
        samples_per_class: args.samples_per_class,
        center_scale: args.center_scale,
        within_std: args.within_std,
        seed: args.seed,
    };
    let ds = generate_gaussian_mixture(&spec)?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    write_delimited(&ds, &args.out, delimiter)?;
    println!(
        "wrote {}: {} classes x {} samples, dim {}",
        args.out.display(),
        ds.n_classes(),
        spec.samples_per_class,
        ds.dim()
    );
    Ok(())
}

// ── train ───────────────────────────────────────────────────────────────

struct RunWriter {
    cfg: TrainConfig,
    dir: PathBuf,
    log: fs::File,
}

impl TrainObserver for RunWriter {
    fn on_progress(&mut self, record: &ProgressRecord) {
        let _ = writeln!(self.log, "{}", record.to_line());
    }

    fn on_checkpoint(&mut self, state: &TrainLoopState) -> osml_core::Result<()> {
        let path = self.dir.join(format!("checkpoint_{:07}.txt", state.episode));
        write_checkpoint(&path, &self.cfg, state)
    }

    fn on_incident(&mut self, episode: u64, message: &str) {
        let _ = writeln!(self.log, "episode={episode} incident={message:?}");
        eprintln!("episode {episode}: {message}");
    }
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let cfg = resolve_config(&args.config, &args.preset, args.seed)?;
    let dir = args.out.clone().unwrap_or_else(|| default_run_dir(&cfg));
    fs::create_dir_all(&dir)?;
    let _lock = DirLock::acquire(&dir)?;
    write_config_echo(&dir, &cfg)?;

    let resume_state = match &args.resume {
        Some(path) => {
            let ckpt = read_checkpoint(path)?;
            if ckpt.config_hash != cfg.hash_hex() {
                return Err(CoreError::Config(format!(
                    "resume rejected: checkpoint hash {} does not match config hash {}",
                    ckpt.config_hash,
                    cfg.hash_hex()
                ))
                .into());
            }
            println!("resuming from episode {}", ckpt.state.episode);
            Some(ckpt.state)
        }
        None => None,
    };

    let dataset = load_dataset(&cfg)?;
    let split = split_for(&cfg, &dataset)?;
    println!(
        "dataset: {} samples, {} classes (train {} / val {} / test {}), dim {}",
        dataset.n_samples(),
        dataset.n_classes(),
        split.train.len(),
        split.val.len(),
        split.test.len(),
        dataset.dim()
    );
    println!("config hash {}", cfg.hash_hex());

    let log = fs::File::create(dir.join("train.log"))?;
    let mut writer = RunWriter { cfg: cfg.clone(), dir: dir.clone(), log };
    let state = train(&dataset, &split, &cfg, resume_state, &mut writer)?;

    let final_path = dir.join("checkpoint.txt");
    write_checkpoint(&final_path, &cfg, &state)?;
    println!(
        "trained {} episodes, mean loss {:.6}; checkpoint at {}",
        state.episode,
        state.loss_stats.mean,
        final_path.display()
    );
    Ok(())
}

// ── eval ────────────────────────────────────────────────────────────────

fn eval_options(ckpt: &Checkpoint, args: &EvalArgs) -> EvalOptions {
    let cfg = &ckpt.config;
    let episode = EpisodeConfig {
        way: args.way.unwrap_or(cfg.way),
        shot: args.shot.unwrap_or(cfg.shot),
        query_per_class: args.query_per_class.unwrap_or(cfg.query_per_class),
        open_way: args.open_way.unwrap_or(cfg.open_way),
        open_query_per_class: args.open_query_per_class.unwrap_or(cfg.open_query_per_class),
    };
    EvalOptions {
        episode,
        batch_per_class: args.batch_per_class.unwrap_or(cfg.batch_per_class),
        n_episodes: args.eval_episodes.unwrap_or(cfg.eval_episodes),
        base_seed: args.seed.unwrap_or(cfg.seed + 1),
        workers: args.workers,
    }
}

fn write_report(dir: &Path, report: &AggregateReport) -> anyhow::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("eval_summary.txt"), report.summary_text())?;
    fs::write(dir.join("eval_episodes.log"), report.episode_lines())?;
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let ckpt = read_checkpoint(&args.checkpoint)?;
    let opts = eval_options(&ckpt, &args);
    let dataset = load_dataset(&ckpt.config)?;
    let split = split_for(&ckpt.config, &dataset)?;
    let report = evaluate(&ckpt.state.params, &dataset, &split, &opts)?;
    let dir = args.out.clone().unwrap_or_else(|| {
        args.checkpoint.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
    });
    write_report(&dir, &report)?;
    print!("{}", report.summary_text());
    println!("reports in {}", dir.display());
    Ok(())
}

// ── sweep ───────────────────────────────────────────────────────────────

#[derive(Clone, Copy, PartialEq)]
enum SweepAxis {
    Way,
    TrainOpenWay,
    EvalOpenWay,
    EvalOpenQuery,
}

impl SweepAxis {
    fn parse(name: &str) -> anyhow::Result<Self> {
        match name {
            "way" => Ok(SweepAxis::Way),
            "train_open_way" => Ok(SweepAxis::TrainOpenWay),
            "eval_open_way" => Ok(SweepAxis::EvalOpenWay),
            "eval_open_query" => Ok(SweepAxis::EvalOpenQuery),
            other => Err(CoreError::Config(format!(
                "unknown sweep axis {other:?}; valid axes: way, train_open_way, eval_open_way, eval_open_query"
            ))
            .into()),
        }
    }

    fn is_eval_only(self) -> bool {
        matches!(self, SweepAxis::EvalOpenWay | SweepAxis::EvalOpenQuery)
    }
}

fn cmd_sweep(args: SweepArgs) -> anyhow::Result<()> {
    let axis = SweepAxis::parse(&args.axis)?;
    let values: Vec<usize> = args
        .values
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| CoreError::Config(format!("bad sweep value {v:?}")))
        })
        .collect::<Result<_, _>>()?;
    if values.is_empty() {
        return Err(CoreError::Config("sweep needs at least one value".into()).into());
    }
    let base = resolve_config(&args.config, &args.preset, args.seed)?;
    let dir = args.out.clone().unwrap_or_else(|| default_run_dir(&base).join("sweep"));
    fs::create_dir_all(&dir)?;
    let _lock = DirLock::acquire(&dir)?;

    // Eval-only axes reuse one trained model; training is deterministic so
    // this equals retraining per value with the same seed.
    let mut shared: Option<(LabeledDataset, ClassSplit, TrainLoopState)> = None;
    let base_open_total = base.open_way * base.open_query_per_class;

    let mut table = String::from("axis\tvalue\taccuracy\tacc_half\tauroc\tauroc_half\n");
    for &v in &values {
        let mut cfg = base.clone();
        match axis {
            SweepAxis::Way => {
                cfg.way = v;
            }
            SweepAxis::TrainOpenWay => {
                cfg.open_way = v;
            }
            _ => {}
        }
        cfg.validate()?;

        let (dataset, split, state) = if axis.is_eval_only() {
            if shared.is_none() {
                let dataset = load_dataset(&cfg)?;
                let split = split_for(&cfg, &dataset)?;
                let state =
                    train(&dataset, &split, &cfg, None, &mut osml_core::optim::SilentObserver)?;
                shared = Some((dataset, split, state));
            }
            let (d, s, st) = shared.as_ref().unwrap();
            (d.clone(), s.clone(), st.clone())
        } else {
            let dataset = load_dataset(&cfg)?;
            let split = split_for(&cfg, &dataset)?;
            let state =
                train(&dataset, &split, &cfg, None, &mut osml_core::optim::SilentObserver)?;
            (dataset, split, state)
        };

        let mut episode = cfg.episode_config();
        match axis {
            SweepAxis::EvalOpenWay => {
                episode.open_way = v;
                if v > 0 {
                    // Hold the total number of open samples roughly fixed.
                    episode.open_query_per_class = (base_open_total as f64 / v as f64)
                        .round()
                        .max(1.0) as usize;
                }
            }
            SweepAxis::EvalOpenQuery => {
                episode.open_query_per_class = v;
            }
            _ => {}
        }
        let opts = EvalOptions {
            episode,
            batch_per_class: cfg.batch_per_class,
            n_episodes: cfg.eval_episodes,
            base_seed: cfg.seed + 1,
            workers: args.workers,
        };
        let report = evaluate(&state.params, &dataset, &split, &opts)?;
        let ckpt_path = dir.join(format!("checkpoint_{}_{v}.txt", args.axis));
        write_checkpoint(&ckpt_path, &cfg, &state)?;
        let (auroc, auroc_half) = match (report.auroc_mean, report.auroc_half_width) {
            (Some(m), Some(h)) => (format!("{m}"), format!("{h}")),
            _ => ("absent".into(), "absent".into()),
        };
        let row = format!(
            "{}\t{v}\t{}\t{}\t{auroc}\t{auroc_half}\n",
            args.axis, report.accuracy_mean, report.accuracy_half_width,
        );
        print!("{row}");
        table.push_str(&row);
    }
    let table_path = dir.join(format!("sweep_{}.tsv", args.axis));
    fs::write(&table_path, &table)?;
    println!("table at {}", table_path.display());
    Ok(())
}

// ── inspect ─────────────────────────────────────────────────────────────

fn cmd_inspect(args: InspectArgs) -> anyhow::Result<()> {
    let ckpt = read_checkpoint(&args.checkpoint)?;
    println!("checkpoint {}", args.checkpoint.display());
    println!("config_hash {}", ckpt.config_hash);
    println!("episode {}", ckpt.state.episode);
    println!("adam_t {}", ckpt.state.adam.t);
    println!(
        "loss_mean {} over {} episodes",
        ckpt.state.loss_stats.mean, ckpt.state.loss_stats.count
    );
    println!("head {:?} proto {:?} prec {:?}",
        ckpt.state.params.head.kind,
        ckpt.state.params.head.proto_source,
        ckpt.state.params.head.prec_source
    );
    if !ckpt.state.params.head.class_ids.is_empty() {
        println!("head classes {:?}", ckpt.state.params.head.class_ids);
    }
    println!("tensors:");
    for (name, t) in ckpt.state.params.named_tensors() {
        println!("  {name} {:?} ({} values)", t.shape(), t.numel());
    }
    println!("config:");
    for line in ckpt.config.echo().lines() {
        println!("  {line}");
    }
    Ok(())
}
