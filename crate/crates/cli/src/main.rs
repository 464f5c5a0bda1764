//! `ds-resnet`: analyze, train and run DS-ResNet keyword spotting models.
//!
//! Exit codes: 0 on success, 1 when a verification or training run fails
//! (golden-table mismatch, gradient check above tolerance, divergence),
//! 2 on usage or I/O errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ds_resnet::audio::{
    self, dataset, prepare_experiment1, prepare_experiment2, Dataset, FeatureRecord,
    MfccExtractor, Split,
};
use ds_resnet::cost;
use ds_resnet::model::{parse_spec, preset, ArchitectureSpec, Model};
use ds_resnet::rng::Rng;
use ds_resnet::train::{self, finite_difference_check, render_log_csv, TrainConfig};
use ds_resnet::{Error, Tensor};

#[derive(Parser)]
#[command(
    name = "ds-resnet",
    version,
    about = "Small-footprint keyword spotting with depthwise-separable residual networks"
)]
struct Cli {
    /// Base seed for everything random (init, batch order, augmentation).
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// key=value file overriding training defaults (flags win over the file).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the parameter/multiply cost table of a model.
    Analyze(AnalyzeArgs),
    /// Extract MFCC features into a "DSFC" cache file.
    Features(FeaturesArgs),
    /// Train a model on a Speech Commands style dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Classify a single WAV file.
    Infer(InferArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Preset name (DS-ResNet18/14/10, -n/-d/-p variants) or an architecture
    /// description file.
    #[arg(long)]
    model: String,
    /// Verify against the published reference table (1, 2 or 3); exits
    /// nonzero on any mismatch.
    #[arg(long)]
    golden: Option<u8>,
    /// Also write the report as CSV to this path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FeaturesArgs {
    /// Dataset directory (word-named subdirectories of WAVs).
    #[arg(long, conflicts_with = "wav")]
    data: Option<PathBuf>,
    /// Single WAV file instead of a dataset.
    #[arg(long)]
    wav: Option<PathBuf>,
    /// Which split to extract when reading a dataset.
    #[arg(long, default_value = "train")]
    split: String,
    /// Dataset preparation mode: 1 = hash split + balancing, 2 = list files.
    #[arg(long, default_value_t = 1)]
    experiment: u8,
    /// Output cache path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Preset name or architecture description file.
    #[arg(long)]
    model: String,
    /// 1 = SHA1 hash split with silence/unknown balancing, 2 = published
    /// validation/testing list files.
    #[arg(long, default_value_t = 1)]
    experiment: u8,
    /// Output directory for the best checkpoint and the CSV log.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    lr_decay_every: Option<u64>,
    #[arg(long)]
    eval_every: Option<u64>,
    /// Disable waveform augmentation.
    #[arg(long)]
    no_augment: bool,
    /// Stop early once validation accuracy reaches this fraction.
    #[arg(long)]
    target_val_accuracy: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file ("DSRN").
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 1)]
    experiment: u8,
}

#[derive(Args)]
struct InferArgs {
    /// Checkpoint file ("DSRN").
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    wav: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Preset name or architecture description file.
    #[arg(long)]
    model: String,
    /// Maximum allowed relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Central-difference step. The default stays below the spacing of the
    /// ReLU kinks at a random evaluation point; larger steps can straddle a
    /// kink and report spurious errors.
    #[arg(long, default_value_t = 1e-6)]
    step: f64,
    /// Probe at most this many (evenly strided) elements per tensor.
    #[arg(long)]
    sample: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            let mut source = std::error::Error::source(&err);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Diverged { .. } => 1,
        _ => 2,
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    let mut cfg = TrainConfig {
        seed: cli.seed,
        ..TrainConfig::default()
    };
    if let Some(path) = &cli.config {
        apply_config_file(&mut cfg, path)?;
    }
    match cli.command {
        Command::Analyze(args) => cmd_analyze(args),
        Command::Features(args) => cmd_features(args, cli.seed),
        Command::Train(args) => cmd_train(args, cfg),
        Command::Eval(args) => cmd_eval(args, cli.seed),
        Command::Infer(args) => cmd_infer(args),
        Command::Gradcheck(args) => cmd_gradcheck(args, cli.seed),
    }
}

/// key=value lines; `#` comments and blank lines allowed.
fn apply_config_file(cfg: &mut TrainConfig, path: &Path) -> Result<(), Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: idx + 1,
            msg: format!("expected key=value, got '{line}'"),
        })?;
        let (key, value) = (key.trim(), value.trim());
        let bad = |msg: &str| Error::Parse {
            line: idx + 1,
            msg: format!("{key}: {msg}"),
        };
        macro_rules! parse_into {
            ($field:expr) => {
                $field = value.parse().map_err(|_| bad("invalid value"))?
            };
        }
        match key {
            "batch_size" => parse_into!(cfg.batch_size),
            "total_steps" => parse_into!(cfg.total_steps),
            "momentum" => parse_into!(cfg.momentum),
            "weight_decay" => parse_into!(cfg.weight_decay),
            "lr_initial" => parse_into!(cfg.lr_initial),
            "lr_decay" => parse_into!(cfg.lr_decay),
            "lr_decay_every" => parse_into!(cfg.lr_decay_every),
            "eval_every" => parse_into!(cfg.eval_every),
            "seed" => parse_into!(cfg.seed),
            "augment" => parse_into!(cfg.augment),
            "augment_shift_ms" => parse_into!(cfg.augment_cfg.shift_ms),
            "augment_noise_prob" => parse_into!(cfg.augment_cfg.noise_prob),
            "augment_noise_max" => parse_into!(cfg.augment_cfg.noise_max),
            "target_val_accuracy" => {
                cfg.target_val_accuracy = Some(value.parse().map_err(|_| bad("invalid value"))?)
            }
            _ => return Err(bad("unknown key")),
        }
    }
    Ok(())
}

/// Resolves `--model`: a preset name, or a path to a spec file.
fn resolve_spec(model: &str) -> Result<ArchitectureSpec, Error> {
    match preset(model) {
        Ok(spec) => Ok(spec),
        Err(_) if Path::new(model).exists() => {
            let text = fs::read_to_string(model).map_err(|e| Error::Io {
                path: PathBuf::from(model),
                source: e,
            })?;
            let name = Path::new(model)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| model.to_string());
            parse_spec(&name, &text)
        }
        Err(_) => Err(Error::Io {
            path: PathBuf::from(model),
            source: std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "not a preset name and no such spec file",
            ),
        }),
    }
}

fn parse_split(name: &str) -> Result<Split, Error> {
    match name {
        "train" => Ok(Split::Train),
        "validation" => Ok(Split::Validation),
        "test" => Ok(Split::Test),
        other => Err(Error::Config(format!(
            "unknown split '{other}' (expected train, validation or test)"
        ))),
    }
}

fn prepare(data: &Path, experiment: u8, seed: u64) -> Result<Dataset, Error> {
    match experiment {
        1 => prepare_experiment1(data, seed),
        2 => prepare_experiment2(data),
        other => Err(Error::Config(format!(
            "unknown experiment {other} (expected 1 or 2)"
        ))),
    }
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<ExitCode, Error> {
    let spec = resolve_spec(&args.model)?;
    let report = cost::analyze(&spec)?;
    print!("{}", report.render_table());
    if let Some(path) = &args.out {
        fs::write(path, report.render_csv()).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        println!("wrote CSV report to {}", path.display());
    }
    if let Some(table_id) = args.golden {
        let checks = cost::verify_against_reference(&report, table_id)?;
        let mut all_pass = true;
        println!("\ngolden table {table_id} verification:");
        for check in &checks {
            println!("  {check}");
            all_pass &= check.pass;
        }
        let table = cost::golden_table(table_id)?;
        if all_pass {
            println!(
                "golden table {table_id}: PASS — totals {} / {} ({} / {})",
                report.total_params,
                report.total_multiplies,
                table.total_params.text,
                table.total_multiplies.text
            );
        } else {
            println!("golden table {table_id}: FAIL");
            return Ok(ExitCode::from(1));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_features(args: FeaturesArgs, seed: u64) -> Result<ExitCode, Error> {
    let extractor = MfccExtractor::new();
    let records: Vec<FeatureRecord> = if let Some(wav) = &args.wav {
        let samples = audio::wav::read_clip(wav)?;
        let label = wav
            .parent()
            .and_then(|p| p.file_name())
            .map(|w| dataset::label_of_word(&w.to_string_lossy()))
            .unwrap_or(dataset::LABEL_UNKNOWN);
        vec![FeatureRecord {
            key: wav.to_string_lossy().into_owned(),
            label,
            features: extractor.extract(&samples)?,
        }]
    } else if let Some(data) = &args.data {
        let split = parse_split(&args.split)?;
        let ds = prepare(data, args.experiment, seed)?;
        let utterances = ds.split(split);
        let mut records = Vec::with_capacity(utterances.len());
        for utt in utterances {
            let wave = utt.waveform(&ds.noise)?;
            records.push(FeatureRecord {
                key: utt.key.clone(),
                label: utt.label,
                features: extractor.extract(&wave)?,
            });
        }
        records
    } else {
        return Err(Error::Config(
            "features needs either --data or --wav".into(),
        ));
    };
    dataset::write_feature_cache(&args.out, &records)?;
    println!(
        "wrote {} feature record(s) to {}",
        records.len(),
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(args: TrainArgs, mut cfg: TrainConfig) -> Result<ExitCode, Error> {
    let spec = resolve_spec(&args.model)?;
    if let Some(v) = args.steps {
        cfg.total_steps = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.lr {
        cfg.lr_initial = v;
    }
    if let Some(v) = args.momentum {
        cfg.momentum = v;
    }
    if let Some(v) = args.weight_decay {
        cfg.weight_decay = v;
    }
    if let Some(v) = args.lr_decay_every {
        cfg.lr_decay_every = v;
    }
    if let Some(v) = args.eval_every {
        cfg.eval_every = v;
    }
    if args.no_augment {
        cfg.augment = false;
    }
    if let Some(v) = args.target_val_accuracy {
        cfg.target_val_accuracy = Some(v);
    }

    let ds = prepare(&args.data, args.experiment, cfg.seed)?;
    let (n_train, n_val, n_test) = ds.split_sizes();
    println!(
        "model {} | experiment {} | split sizes: train={n_train} validation={n_val} test={n_test}",
        spec.name, args.experiment
    );
    println!(
        "steps={} batch={} lr={} momentum={} weight_decay={} seed={}",
        cfg.total_steps, cfg.batch_size, cfg.lr_initial, cfg.momentum, cfg.weight_decay, cfg.seed
    );

    let outcome = train::train(&spec, &ds, &cfg)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::Io {
        path: args.out.clone(),
        source: e,
    })?;
    let ckpt = args
        .out
        .join(format!("{}_best_step{}.dsrn", spec.name, outcome.best_step));
    outcome.model.save(&ckpt)?;
    let log_path = args.out.join("train_log.csv");
    let mut log_text = format!(
        "# model={} experiment={} seed={}\n# split sizes: train={n_train} validation={n_val} test={n_test}\n",
        spec.name, args.experiment, cfg.seed
    );
    log_text.push_str(&render_log_csv(&outcome.log));
    fs::write(&log_path, log_text).map_err(|e| Error::Io {
        path: log_path.clone(),
        source: e,
    })?;
    println!(
        "best checkpoint: step {} with validation error {:.4} -> {}",
        outcome.best_step,
        outcome.best_val_error,
        ckpt.display()
    );
    println!("log: {}", log_path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(args: EvalArgs, seed: u64) -> Result<ExitCode, Error> {
    let model = Model::load(&args.model)?;
    let split = parse_split(&args.split)?;
    let ds = prepare(&args.data, args.experiment, seed)?;
    let result = train::evaluate(&model, ds.split(split), &ds.noise)?;
    println!(
        "{} on {} ({} examples): error rate {:.4}",
        model.name,
        split.name(),
        result.n_examples,
        result.error_rate
    );
    println!("confusion matrix (rows = true, columns = predicted):");
    print!("{:>9}", "");
    for p in 0..dataset::NUM_LABELS {
        print!("{:>9}", dataset::label_name(p as u8));
    }
    println!();
    for (t, row) in result.confusion.iter().enumerate() {
        print!("{:>9}", dataset::label_name(t as u8));
        for &c in row {
            print!("{c:>9}");
        }
        println!();
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_infer(args: InferArgs) -> Result<ExitCode, Error> {
    let model = Model::load(&args.model)?;
    let samples = audio::wav::read_clip(&args.wav)?;
    let features = MfccExtractor::new().extract(&samples)?;
    let posteriors = model.forward(&features)?;
    let mut ranked: Vec<(usize, f64)> = posteriors
        .data()
        .iter()
        .copied()
        .enumerate()
        .collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    println!("predicted: {}", dataset::label_name(ranked[0].0 as u8));
    for (label, p) in ranked {
        println!("{:>9}  {p:.9}", dataset::label_name(label as u8));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(args: GradcheckArgs, seed: u64) -> Result<ExitCode, Error> {
    let spec = resolve_spec(&args.model)?;
    let model = Model::build(&spec, seed)?;
    let mut rng = Rng::stream(seed, "gradcheck/input");
    let shape = spec.input_shape;
    let len = shape.iter().product();
    let features = Tensor::from_vec(&shape, (0..len).map(|_| rng.normal()).collect())?;
    let label = rng.below(spec.num_classes);
    let report = finite_difference_check(&model, &features, label, args.step, args.sample)?;
    println!(
        "gradient check of {} ({} tensors, h={:.0e}, label {label}):",
        spec.name,
        report.rows.len(),
        args.step
    );
    for row in &report.rows {
        println!(
            "  {} {:<28} {:>6} probed  max rel error {:.3e}",
            if row.max_rel_error <= args.tolerance {
                "PASS"
            } else {
                "FAIL"
            },
            row.name,
            row.checked,
            row.max_rel_error
        );
    }
    println!(
        "max relative error {:.3e} (tolerance {:.1e})",
        report.max_rel_error, args.tolerance
    );
    if report.passes(args.tolerance) {
        println!("gradcheck: PASS");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("gradcheck: FAIL");
        Ok(ExitCode::from(1))
    }
}
