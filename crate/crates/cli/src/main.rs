use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::warn;

use ultraswin::checkpoint::Checkpoint;
use ultraswin::fsutil::write_atomic_str;
use ultraswin::preprocessing::{
    load_split, preprocess_dataset, read_container, to_unit_range, ModelInput, PreprocessConfig, Split, FILE_LIST,
};
use ultraswin::synthetic::{generate, SyntheticSpec, SyntheticTarget};
use ultraswin::training::{evaluate, train, LrSchedule, MetricReport, TrainConfig, TrainState};
use ultraswin::{Error, ModelConfig, UltraSwin};

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EFFECTIVE_CONFIG: &str = "effective_config.txt";
const CARDIOMYOPATHY_EF: f64 = 50.0;

/// Command-level failure that maps to the usage exit code.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

#[derive(Parser, Debug)]
#[command(
    name = "ultraswin",
    version,
    about = "Ejection-fraction regression from echocardiogram clips",
    args_override_self = true
)]
struct Cli {
    /// Flat `key = value` file; every key is a flag of the chosen command.
    /// Command-line flags take precedence over the file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset (FileList.csv, VolumeTracings.csv, Videos/).
    Synth(SynthArgs),
    /// Convert a dataset into fixed-shape per-split containers.
    Preprocess(PreprocessArgs),
    /// Train a model on a preprocessed dataset.
    Train(TrainArgs),
    /// Score a checkpoint on one split.
    Evaluate(EvaluateArgs),
    /// Print an EF estimate for each preprocessed clip.
    Predict(PredictArgs),
    /// Print per-stage shapes and the parameter count of a model.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct SynthArgs {
    #[arg(long, env = "ULTRASWIN_OUT_DIR")]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 16)]
    n_clips: usize,
    #[arg(long, default_value_t = 112)]
    height: usize,
    #[arg(long, default_value_t = 112)]
    width: usize,
    #[arg(long, default_value_t = 28)]
    min_frames: usize,
    #[arg(long, default_value_t = 250)]
    max_frames: usize,
    #[arg(long, default_value_t = 6.9)]
    min_ef: f64,
    #[arg(long, default_value_t = 96.96)]
    max_ef: f64,
    #[arg(long, env = "ULTRASWIN_SEED", default_value_t = 0)]
    seed: u64,
    /// area-ratio or intensity-linear
    #[arg(long, default_value = "area-ratio")]
    target: String,
    #[arg(long, default_value_t = 0.75)]
    train_fraction: f64,
    #[arg(long, default_value_t = 0.125)]
    val_fraction: f64,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct PreprocessArgs {
    #[arg(long, env = "ULTRASWIN_DATA_DIR")]
    data_dir: PathBuf,
    #[arg(long, env = "ULTRASWIN_OUT_DIR")]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 128)]
    frames: usize,
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
    augment: bool,
    #[arg(long, env = "ULTRASWIN_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct TrainArgs {
    /// Preprocessed dataset (output of `preprocess`).
    #[arg(long, env = "ULTRASWIN_DATA_DIR")]
    data_dir: PathBuf,
    #[arg(long, env = "ULTRASWIN_OUT_DIR")]
    out_dir: PathBuf,
    /// base, small or toy
    #[arg(long, env = "ULTRASWIN_VARIANT", default_value = "base")]
    variant: String,
    /// Continue from this checkpoint; its model configuration wins over --variant.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0.15)]
    lr_decay: f64,
    /// multiplicative or subtractive
    #[arg(long, default_value = "multiplicative")]
    schedule: String,
    /// Defaults to 4 for small and 2 otherwise.
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, default_value_t = 2)]
    grad_accumulation: usize,
    #[arg(long, default_value_t = 0.0)]
    drop_path: f64,
    #[arg(long, env = "ULTRASWIN_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct EvaluateArgs {
    #[arg(long, env = "ULTRASWIN_CHECKPOINT")]
    checkpoint: PathBuf,
    #[arg(long, env = "ULTRASWIN_DATA_DIR")]
    data_dir: PathBuf,
    #[arg(long, default_value = "TEST")]
    split: String,
    /// Where metrics.csv and predictions.csv go; defaults to the checkpoint's directory.
    #[arg(long, env = "ULTRASWIN_OUT_DIR")]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct PredictArgs {
    #[arg(long, env = "ULTRASWIN_CHECKPOINT")]
    checkpoint: PathBuf,
    /// Preprocessed `.uswv` clips.
    #[arg(required = true)]
    clips: Vec<PathBuf>,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct InspectArgs {
    #[arg(long, env = "ULTRASWIN_VARIANT", default_value = "base")]
    variant: String,
    /// Inspect the model stored in a checkpoint instead of a preset.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

/// Read `key = value` lines into `--key value` pairs.
fn config_file_args(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    let mut args = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(usage(format!("{}:{}: expected `key = value`", path.display(), no + 1)));
        };
        let key = key.trim().replace('_', "-");
        if key.is_empty() {
            return Err(usage(format!("{}:{}: empty key", path.display(), no + 1)));
        }
        args.push(format!("--{key}"));
        args.push(value.trim().trim_matches('"').to_string());
    }
    Ok(args)
}

/// Splice config-file flags in right after the subcommand name, so that later
/// command-line occurrences override them.
fn expand_argv(argv: Vec<String>) -> Result<Vec<String>> {
    let mut rest = Vec::with_capacity(argv.len());
    let mut config = None;
    let mut it = argv.into_iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            config = Some(it.next().ok_or_else(|| usage("--config needs a file"))?);
        } else if let Some(v) = a.strip_prefix("--config=") {
            config = Some(v.to_string());
        } else {
            rest.push(a);
        }
    }
    let Some(config) = config else {
        return Ok(rest);
    };
    let file_args = config_file_args(Path::new(&config))?;
    let Some(sub) = rest.iter().skip(1).position(|a| !a.starts_with('-')).map(|i| i + 1) else {
        return Ok(rest);
    };
    let mut out: Vec<String> = rest[..=sub].to_vec();
    out.extend(file_args);
    out.extend_from_slice(&rest[sub + 1..]);
    Ok(out)
}

/// Record the resolved flags as a `--config`-compatible file named `file` in `dir`.
fn write_effective_config(dir: &Path, file: &str, entries: &[(&str, String)]) -> Result<()> {
    let mut text = String::new();
    for (k, v) in entries {
        text.push_str(&format!("{k} = {v}\n"));
    }
    write_atomic_str(&dir.join(file), &text)?;
    Ok(())
}

fn parse_split(s: &str) -> Result<Split> {
    s.parse::<Split>().map_err(usage)
}

fn model_config(variant: &str, drop_path: f64) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::variant(variant)?;
    cfg.drop_path = drop_path;
    cfg.validate()?;
    Ok(cfg)
}

fn check_inputs(data: &[ModelInput], cfg: &ModelConfig, split: Split) -> Result<()> {
    if let Some(bad) = data.iter().find(|d| d.frames.dims() != cfg.input_dims()) {
        return Err(Error::Shape(format!(
            "{split} clip {} has dims {:?} but {} expects {:?}; preprocess with matching --frames/--size",
            bad.clip_id,
            bad.frames.dims(),
            cfg.name,
            cfg.input_dims()
        ))
        .into());
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let target: SyntheticTarget = a.target.parse()?;
    let spec = SyntheticSpec {
        n_clips: a.n_clips,
        height: a.height,
        width: a.width,
        min_frames: a.min_frames,
        max_frames: a.max_frames,
        min_ef: a.min_ef,
        max_ef: a.max_ef,
        seed: a.seed,
        target,
        train_fraction: a.train_fraction,
        val_fraction: a.val_fraction,
    };
    spec.validate()?;
    let clips = generate(&spec, &a.out_dir)?;
    write_effective_config(
        &a.out_dir,
        EFFECTIVE_CONFIG,
        &[
            ("n-clips", a.n_clips.to_string()),
            ("height", a.height.to_string()),
            ("width", a.width.to_string()),
            ("min-frames", a.min_frames.to_string()),
            ("max-frames", a.max_frames.to_string()),
            ("min-ef", a.min_ef.to_string()),
            ("max-ef", a.max_ef.to_string()),
            ("seed", a.seed.to_string()),
            ("target", a.target.clone()),
            ("train-fraction", a.train_fraction.to_string()),
            ("val-fraction", a.val_fraction.to_string()),
        ],
    )?;
    println!("wrote {} synthetic clips to {}", clips.len(), a.out_dir.display());
    Ok(())
}

fn cmd_preprocess(a: PreprocessArgs) -> Result<()> {
    if !a.data_dir.join(FILE_LIST).is_file() {
        return Err(usage(format!("no {FILE_LIST} in {}", a.data_dir.display())));
    }
    let cfg = PreprocessConfig {
        target_frames: a.frames,
        target_size: a.size,
        augment: a.augment,
        seed: a.seed,
    };
    let report = preprocess_dataset(&a.data_dir, &a.out_dir, &cfg)?;
    write_atomic_str(&a.out_dir.join("preprocess_report.csv"), &report.to_csv())?;
    write_effective_config(
        &a.out_dir,
        EFFECTIVE_CONFIG,
        &[
            ("data-dir", a.data_dir.display().to_string()),
            ("frames", a.frames.to_string()),
            ("size", a.size.to_string()),
            ("augment", a.augment.to_string()),
            ("seed", a.seed.to_string()),
        ],
    )?;
    println!(
        "preprocessed {} clips, skipped {}, failed {}",
        report.written.len(),
        report.skipped.len(),
        report.failed.len()
    );
    for (id, why) in &report.skipped {
        println!("skipped {id}: {why}");
    }
    for (id, why) in &report.failed {
        eprintln!("failed {id}: {why}");
    }
    if !report.failed.is_empty() {
        return Err(Error::Decoder(format!("{} clips could not be converted", report.failed.len())).into());
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let schedule: LrSchedule = a.schedule.parse()?;
    let resumed = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let model_cfg = match &resumed {
        Some(ck) => ck.manifest.config.clone(),
        None => model_config(&a.variant, a.drop_path)?,
    };
    let cfg = TrainConfig {
        lr0: a.lr,
        weight_decay: a.weight_decay,
        epochs: a.epochs,
        lr_decay: a.lr_decay,
        schedule,
        batch_size: a
            .batch_size
            .unwrap_or_else(|| TrainConfig::for_variant(&a.variant).batch_size),
        grad_accumulation: a.grad_accumulation,
        seed: a.seed,
        ..TrainConfig::default()
    };
    cfg.validate()?;

    let train_data = load_split(&a.data_dir, Split::Train)?;
    if train_data.is_empty() {
        return Err(usage("training split is empty"));
    }
    let val_data = match load_split(&a.data_dir, Split::Val) {
        Ok(v) => v,
        Err(Error::Config(msg)) => {
            warn!("{msg}; training without validation");
            Vec::new()
        }
        Err(e) => return Err(e.into()),
    };
    check_inputs(&train_data, &model_cfg, Split::Train)?;
    check_inputs(&val_data, &model_cfg, Split::Val)?;

    let (mut model, mut state) = match &resumed {
        Some(ck) => (ck.model()?, ck.train_state(&cfg)),
        None => {
            let model = UltraSwin::<f32>::new(&model_cfg, a.seed)?;
            let state = TrainState::new(&model, &cfg);
            (model, state)
        }
    };
    write_effective_config(
        &a.out_dir,
        EFFECTIVE_CONFIG,
        &[
            ("data-dir", a.data_dir.display().to_string()),
            ("variant", a.variant.clone()),
            ("epochs", cfg.epochs.to_string()),
            ("lr", cfg.lr0.to_string()),
            ("weight-decay", cfg.weight_decay.to_string()),
            ("lr-decay", cfg.lr_decay.to_string()),
            ("schedule", a.schedule.clone()),
            ("batch-size", cfg.batch_size.to_string()),
            ("grad-accumulation", cfg.grad_accumulation.to_string()),
            ("drop-path", model_cfg.drop_path.to_string()),
            ("seed", cfg.seed.to_string()),
        ],
    )?;
    let model_json = serde_json::to_string(&model_cfg).context("serializing model config")?;
    write_atomic_str(&a.out_dir.join("model_config.json"), &model_json)?;
    println!(
        "training {} ({} parameters) on {} clips from epoch {}",
        model_cfg.name,
        model.num_parameters(),
        train_data.len(),
        state.epoch
    );
    let ckpt_dir = a.out_dir.join("checkpoints");
    train(&mut model, &mut state, &train_data, &val_data, &cfg, |m, s| {
        let last = s.log.last().expect("epoch logged");
        println!(
            "epoch {} lr {:.3e} train_loss {:.4} val_loss {}",
            last.epoch,
            last.lr,
            last.train_loss,
            last.val_loss.map_or("-".into(), |v| format!("{v:.4}"))
        );
        let ck = Checkpoint::with_training(m, s, &cfg);
        ck.save(&ckpt_dir.join(format!("epoch_{:03}.uswc", last.epoch)))?;
        ck.save(&a.out_dir.join("checkpoint.uswc"))?;
        write_atomic_str(&a.out_dir.join("loss.csv"), &s.loss_csv())
    })?;
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let split = parse_split(&a.split)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = ck.model()?;
    let data = load_split(&a.data_dir, split)?;
    if data.is_empty() {
        return Err(usage(format!("split {split} is empty")));
    }
    check_inputs(&data, model.config(), split)?;
    let (report, preds) = evaluate(&model, &data)?;
    let out_dir = a
        .out_dir
        .clone()
        .unwrap_or_else(|| a.checkpoint.parent().map(Path::to_path_buf).unwrap_or_default());
    write_reports(&out_dir, &model.config().name, model.num_parameters(), &report, &data, &preds)?;
    write_effective_config(
        &out_dir,
        "evaluate_config.txt",
        &[
            ("checkpoint", a.checkpoint.display().to_string()),
            ("data-dir", a.data_dir.display().to_string()),
            ("split", split.to_string()),
        ],
    )?;
    Ok(())
}

fn write_reports(
    out_dir: &Path,
    name: &str,
    params: usize,
    report: &MetricReport,
    data: &[ModelInput],
    preds: &[f64],
) -> Result<()> {
    let csv = report.to_csv(name, params);
    write_atomic_str(&out_dir.join("metrics.csv"), &csv)?;
    let mut rows = String::from("clip_id,ef,prediction\n");
    for (d, p) in data.iter().zip(preds) {
        rows.push_str(&format!("{},{},{}\n", d.clip_id, d.ef_target, p));
    }
    write_atomic_str(&out_dir.join("predictions.csv"), &rows)?;
    print!("{csv}");
    if !report.r2_defined() {
        println!("note: targets have zero variance, R² undefined");
    }
    let below = preds.iter().filter(|&&p| p < CARDIOMYOPATHY_EF).count();
    println!(
        "predicted EF < {CARDIOMYOPATHY_EF}%: {below}/{} ({:.3})",
        preds.len(),
        below as f64 / preds.len() as f64
    );
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let model = Checkpoint::load(&a.checkpoint)?.model()?;
    let mut failures = 0;
    for path in &a.clips {
        let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("?").to_string();
        let result = read_container(path).and_then(|raw| {
            let video = to_unit_range(&raw);
            if video.dims() != model.config().input_dims() {
                return Err(Error::Shape(format!(
                    "dims {:?}, model expects {:?}",
                    video.dims(),
                    model.config().input_dims()
                )));
            }
            model.predict(&video)
        });
        match result {
            Ok(ef) => println!("{id},{ef}"),
            Err(e) => {
                failures += 1;
                eprintln!("{id},error: {e}");
            }
        }
    }
    if failures > 0 {
        return Err(Error::Decoder(format!("{failures} of {} clips failed", a.clips.len())).into());
    }
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> Result<()> {
    let cfg = match &a.checkpoint {
        Some(p) => Checkpoint::load(p)?.manifest.config,
        None => model_config(&a.variant, 0.0)?,
    };
    let shapes = cfg.stage_shapes()?;
    let fmt = |d: [usize; 4]| format!("{}x{}x{}x{}", d[0], d[1], d[2], d[3]);
    println!("model {}", cfg.name);
    println!(
        "embed_dim {} heads {:?} depths {:?} window {}x{}x{}",
        cfg.embed_dim, cfg.heads, cfg.depths, cfg.window.temporal, cfg.window.spatial, cfg.window.spatial
    );
    println!("input {}", fmt(cfg.input_dims()));
    println!("patch_embed {}", fmt(shapes[0]));
    for i in 0..cfg.num_stages() {
        println!("stage{} {}", i + 1, fmt(shapes[i]));
        if i + 1 < cfg.num_stages() {
            println!("merge{} {}", i + 1, fmt(shapes[i + 1]));
        }
    }
    println!("features {}", fmt(*shapes.last().unwrap()));
    println!("regressor scalar");
    let n = cfg.count_parameters();
    println!("params {n} ({:.1}M)", n as f64 / 1e6);
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return EXIT_USAGE;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Preprocess(a) => cmd_preprocess(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Inspect(a) => cmd_inspect(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv = match expand_argv(std::env::args().collect()) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
