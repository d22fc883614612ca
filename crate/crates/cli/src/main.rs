//! `mtsc` — train, evaluate, and inspect attention-augmented time-series
//! classifiers.
//!
//! Subcommands: `train`, `eval`, `gradcheck`, `params`, `dump-attention`,
//! `synth`. Every subcommand is deterministic under a fixed seed and prints
//! its effective configuration as JSON before running.
//!
//! Exit codes: 0 success, 1 verification failure, 2 configuration error,
//! 3 data error, 4 divergence.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use mtsc_core::attention::{render_matrix_csv, render_sigma_csv, AttentionConfig, ScalingMode};
use mtsc_core::data::{
    generate_synthetic, nearest_neighbor_accuracy, parse_ts, save_ts, Dataset, SyntheticKind,
    SyntheticSpec,
};
use mtsc_core::layers::Phase;
use mtsc_core::models::{
    build_variant, count_parameters, load_checkpoint, save_checkpoint, AttentionDumpData, Model,
    ModelVariant,
};
use mtsc_core::train::{cross_entropy, evaluate, fit, TrainConfig};
use mtsc_core::verify::{audit_eq8, gradcheck_params, GradCheckReport};
use mtsc_core::{derive_seed, Error};

// Seed streams for per-component derivation from one root seed.
const STREAM_MODEL: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_DATA: u64 = 3;

#[derive(Parser)]
#[command(name = "mtsc", version, about = "Multivariate time-series classification with temporal attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Train a variant on a .ts dataset pair or a synthetic set.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a .ts dataset.
    Eval(EvalArgs),
    /// Finite-difference gradient check of a variant.
    Gradcheck(GradcheckArgs),
    /// Parameter counts and the closed-form audit.
    Params(ParamsArgs),
    /// Write the attention matrices of one sample as CSV files.
    DumpAttention(DumpArgs),
    /// Generate a synthetic dataset pair in .ts format.
    Synth(SynthArgs),
}

/// Overrides shared by several subcommands; resolution order is CLI flag,
/// then config file, then default.
#[derive(Args, Clone, Default)]
struct AttentionArgs {
    /// Hidden width of the encoder.
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    /// Temporal-attention reduction factor.
    #[arg(long)]
    r: Option<usize>,
    /// Pseudo-Gaussian spread floor.
    #[arg(long)]
    b: Option<f64>,
    /// identity | learnable-scalar
    #[arg(long)]
    scaling: Option<String>,
    /// Use squared temporal distance in the pseudo-Gaussian exponent.
    #[arg(long)]
    squared_distance: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Variant name (see `params --help` output for the list).
    #[arg(long)]
    variant: String,
    /// Dataset prefix: reads <prefix>_TRAIN.ts and <prefix>_TEST.ts.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Synthetic generator kind instead of a dataset on disk.
    #[arg(long)]
    synth: Option<String>,
    #[command(flatten)]
    synth_opts: SynthOpts,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Root seed; all per-component seeds derive from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of sequential runs with derived seeds.
    #[arg(long, default_value_t = 1)]
    runs: usize,
    /// Skip per-sample z-normalization.
    #[arg(long)]
    no_znorm: bool,
    #[command(flatten)]
    attention: AttentionArgs,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// JSON config file supplying defaults for any omitted flag.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
struct SynthOpts {
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    dims: Option<usize>,
    #[arg(long)]
    length: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A single .ts file to evaluate on.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    no_znorm: bool,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    variant: String,
    #[arg(long, default_value_t = 2)]
    dims: usize,
    #[arg(long, default_value_t = 12)]
    length: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[command(flatten)]
    attention: AttentionArgs,
}

#[derive(Args)]
struct ParamsArgs {
    #[arg(long)]
    variant: String,
    /// Input channel count the model is sized for.
    #[arg(long, default_value_t = 2)]
    dims: usize,
    #[arg(long, default_value_t = 16)]
    length: usize,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[command(flatten)]
    attention: AttentionArgs,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// .ts file holding the sample to inspect.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    sample: usize,
    #[arg(long)]
    no_znorm: bool,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// positioned-bump | shifted-pattern | frequency-mix
    #[arg(long)]
    kind: String,
    /// Output prefix: writes <prefix>_TRAIN.ts and <prefix>_TEST.ts.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    opts: SynthOpts,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Optional file-supplied defaults, merged below CLI flags.
#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    lr: Option<f64>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    seed: Option<u64>,
    d: Option<usize>,
    heads: Option<usize>,
    layers: Option<usize>,
    r: Option<usize>,
    b: Option<f64>,
    scaling: Option<String>,
    squared_distance: Option<bool>,
    samples: Option<usize>,
    dims: Option<usize>,
    length: Option<usize>,
    classes: Option<usize>,
    noise: Option<f64>,
    out_dir: Option<PathBuf>,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Usage(_) => 2,
        Error::Divergence { .. } => 4,
        _ => 3,
    }
}

fn out_dir(flag: &Option<PathBuf>, file: Option<&PathBuf>) -> PathBuf {
    flag.clone()
        .or_else(|| file.cloned())
        .or_else(|| std::env::var_os("MTSC_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn resolve_attention(args: &AttentionArgs, file: &FileConfig) -> Result<AttentionConfig, Error> {
    let defaults = AttentionConfig::default();
    let scaling = match args.scaling.clone().or_else(|| file.scaling.clone()) {
        Some(s) => s.parse::<ScalingMode>()?,
        None => defaults.scaling,
    };
    let cfg = AttentionConfig {
        d: args.d.or(file.d).unwrap_or(defaults.d),
        heads: args.heads.or(file.heads).unwrap_or(defaults.heads),
        layers: args.layers.or(file.layers).unwrap_or(defaults.layers),
        reduction: args.r.or(file.r).unwrap_or(defaults.reduction),
        sigma_floor: args.b.or(file.b).unwrap_or(defaults.sigma_floor),
        scaling,
        squared_distance: args.squared_distance
            || file.squared_distance.unwrap_or(defaults.squared_distance),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_file_config(path: &Option<PathBuf>) -> Result<FileConfig, Error> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Usage(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Usage(format!("invalid config {}: {e}", p.display())))
        }
    }
}

fn resolve_synth_spec(kind: &str, opts: &SynthOpts, file: &FileConfig, seed: u64) -> Result<SyntheticSpec, Error> {
    let spec = SyntheticSpec {
        kind: kind.parse::<SyntheticKind>()?,
        n_samples: opts.samples.or(file.samples).unwrap_or(120),
        dims: opts.dims.or(file.dims).unwrap_or(2),
        len: opts.length.or(file.length).unwrap_or(64),
        n_classes: opts.classes.or(file.classes).unwrap_or(3),
        noise: opts.noise.or(file.noise).unwrap_or(0.0),
        seed,
    };
    spec.validate()?;
    Ok(spec)
}

fn echo_config<T: Serialize>(label: &str, cfg: &T) {
    match serde_json::to_string_pretty(cfg) {
        Ok(json) => println!("effective {label} configuration:\n{json}"),
        Err(_) => println!("effective {label} configuration unavailable"),
    }
}

fn load_pair(prefix: &Path) -> Result<(Dataset, Dataset), Error> {
    let train_path = PathBuf::from(format!("{}_TRAIN.ts", prefix.display()));
    let test_path = PathBuf::from(format!("{}_TEST.ts", prefix.display()));
    Ok((parse_ts(&train_path)?, parse_ts(&test_path)?))
}

#[derive(Serialize)]
struct TrainEcho<'a> {
    variant: &'a str,
    data: Option<String>,
    synth: Option<&'a SyntheticSpec>,
    znormalize: bool,
    learning_rate: f64,
    epochs: usize,
    batch_size: usize,
    root_seed: u64,
    runs: usize,
    attention: &'a AttentionConfig,
    out_dir: String,
}

fn cmd_train(args: &TrainArgs) -> Result<(), Error> {
    let file = load_file_config(&args.config)?;
    let variant: ModelVariant = args.variant.parse()?;
    let attention = resolve_attention(&args.attention, &file)?;
    let root_seed = args.seed.or(file.seed).unwrap_or(0);
    let out = out_dir(&args.out_dir, file.out_dir.as_ref());
    let train_cfg = TrainConfig {
        learning_rate: args.lr.or(file.lr).unwrap_or(1e-4),
        epochs: args.epochs.or(file.epochs).unwrap_or(400),
        batch_size: args.batch_size.or(file.batch_size).unwrap_or(64),
        seed: 0, // per-run below
        ..TrainConfig::default()
    };
    train_cfg.validate()?;

    let (train_ds, test_ds, synth_spec) = match (&args.data, &args.synth) {
        (Some(prefix), None) => {
            let (tr, te) = load_pair(prefix)?;
            (tr, te, None)
        }
        (None, Some(kind)) => {
            let spec = resolve_synth_spec(kind, &args.synth_opts, &file, derive_seed(root_seed, STREAM_DATA))?;
            let (tr, te) = generate_synthetic(&spec)?;
            (tr, te, Some(spec))
        }
        _ => {
            return Err(Error::Usage(
                "train needs exactly one of --data <prefix> or --synth <kind>".into(),
            ))
        }
    };
    let znorm = !args.no_znorm;
    echo_config(
        "train",
        &TrainEcho {
            variant: &args.variant,
            data: args.data.as_ref().map(|p| p.display().to_string()),
            synth: synth_spec.as_ref(),
            znormalize: znorm,
            learning_rate: train_cfg.learning_rate,
            epochs: train_cfg.epochs,
            batch_size: train_cfg.batch_size,
            root_seed,
            runs: args.runs,
            attention: &attention,
            out_dir: out.display().to_string(),
        },
    );

    let (train_ds, test_ds) = if znorm {
        (train_ds.znormalize(), test_ds.znormalize())
    } else {
        (train_ds, test_ds)
    };
    let seq_len = train_ds.max_len.max(test_ds.max_len);
    std::fs::create_dir_all(&out)?;

    let mut test_accs = Vec::new();
    for run in 0..args.runs {
        let run_seed = root_seed.wrapping_add(run as u64);
        let model = build_variant(
            variant,
            train_ds.dims,
            seq_len,
            train_ds.num_classes(),
            &attention,
            derive_seed(run_seed, STREAM_MODEL),
        )?;
        let mut cfg = train_cfg.clone();
        cfg.seed = derive_seed(run_seed, STREAM_TRAIN);
        let mut result = fit(&model, &train_ds, None, &cfg)?;
        let test_acc = evaluate(&model, &test_ds)?;
        result.final_test_accuracy = Some(test_acc);
        test_accs.push(test_acc);

        let stem = format!("{}_seed{run_seed}", variant_slug(variant));
        let ckpt_path = out.join(format!("{stem}.ckpt"));
        save_checkpoint(&model, &ckpt_path)?;
        let result_path = out.join(format!("{stem}_result.json"));
        std::fs::write(&result_path, serde_json::to_string_pretty(&result)?)?;
        println!(
            "run {run}: seed {run_seed}, {} epochs, train acc {:.4}, test acc {:.4} ({:.1}s)",
            result.epochs_run, result.final_train_accuracy, test_acc, result.wall_time_secs
        );
        println!("wrote {} and {}", ckpt_path.display(), result_path.display());
    }
    if args.runs > 1 {
        let mean: f64 = test_accs.iter().sum::<f64>() / test_accs.len() as f64;
        println!("mean test accuracy over {} runs: {mean:.4}", args.runs);
    }
    Ok(())
}

fn variant_slug(v: ModelVariant) -> String {
    v.to_string().replace('+', "-")
}

#[derive(Serialize)]
struct EvalEcho {
    checkpoint: String,
    data: String,
    znormalize: bool,
    out_dir: String,
}

#[derive(Serialize)]
struct EvalResult {
    checkpoint: String,
    dataset: String,
    samples: usize,
    accuracy: f64,
}

fn cmd_eval(args: &EvalArgs) -> Result<(), Error> {
    let out = out_dir(&args.out_dir, None);
    echo_config(
        "eval",
        &EvalEcho {
            checkpoint: args.checkpoint.display().to_string(),
            data: args.data.display().to_string(),
            znormalize: !args.no_znorm,
            out_dir: out.display().to_string(),
        },
    );
    let model = load_checkpoint(&args.checkpoint)?;
    let mut ds = parse_ts(&args.data)?;
    if !args.no_znorm {
        ds = ds.znormalize();
    }
    if ds.dims != model.d_in {
        return Err(Error::Data(format!(
            "dataset has {} dimensions but the checkpoint expects {}",
            ds.dims, model.d_in
        )));
    }
    let accuracy = evaluate(&model, &ds)?;
    println!("accuracy: {accuracy:.4} on {} samples", ds.len());
    std::fs::create_dir_all(&out)?;
    let result = EvalResult {
        checkpoint: args.checkpoint.display().to_string(),
        dataset: ds.name.clone(),
        samples: ds.len(),
        accuracy,
    };
    let path = out.join("eval_result.json");
    std::fs::write(&path, serde_json::to_string_pretty(&result)?)?;
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct GradcheckEcho<'a> {
    variant: &'a str,
    dims: usize,
    length: usize,
    classes: usize,
    seed: u64,
    step: f64,
    tolerance: f64,
    attention: &'a AttentionConfig,
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<GradCheckReport, Error> {
    let variant: ModelVariant = args.variant.parse()?;
    let file = FileConfig::default();
    let mut attention = resolve_attention(&args.attention, &file)?;
    if args.attention.d.is_none() {
        // Keep the default check fast; the contract is width-independent.
        attention.d = 16;
    }
    echo_config(
        "gradcheck",
        &GradcheckEcho {
            variant: &args.variant,
            dims: args.dims,
            length: args.length,
            classes: args.classes,
            seed: args.seed,
            step: args.step,
            tolerance: args.tol,
            attention: &attention,
        },
    );
    let model = build_variant(
        variant,
        args.dims,
        args.length,
        args.classes,
        &attention,
        derive_seed(args.seed, STREAM_MODEL),
    )?;
    let report = gradcheck_model(&model, args.seed, args.step, args.tol)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    println!(
        "gradcheck {}: max rel err {:.3e}",
        if report.pass { "PASS" } else { "FAIL" },
        report.max_rel_err()
    );
    Ok(report)
}

/// Gradient-check a composed model through a small random batch and the
/// cross-entropy loss.
fn gradcheck_model(model: &Model, seed: u64, step: f64, tol: f64) -> Result<GradCheckReport, Error> {
    use mtsc_core::tensor::Tensor;
    let b = 2usize;
    let n = model.seq_len;
    let d = model.d_in;
    // A fixed quasi-random batch; any smooth input works.
    let data: Vec<f64> = (0..b * d * n)
        .map(|i| ((i as f64 + seed as f64 * 0.7) * 0.61).sin() * 1.4)
        .collect();
    let x = Tensor::new(vec![b, d, n], data)?;
    let labels: Vec<usize> = (0..b).map(|i| i % model.num_classes).collect();
    let params = model.parameters();
    for p in &params {
        p.tensor.zero_grad();
    }
    let loss = cross_entropy(&model.forward(&x, Phase::Train)?, &labels)?;
    loss.backward()?;
    let autodiff: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.tensor.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    let loss_fn = || -> mtsc_core::Result<f64> {
        Ok(cross_entropy(&model.forward(&x, Phase::Train)?, &labels)?.item())
    };
    gradcheck_params(&params, &autodiff, loss_fn, step, tol, 24)
}

#[derive(Serialize)]
struct ParamsEcho<'a> {
    variant: &'a str,
    dims: usize,
    length: usize,
    classes: usize,
    attention: &'a AttentionConfig,
}

fn cmd_params(args: &ParamsArgs) -> Result<(), Error> {
    let variant: ModelVariant = args.variant.parse()?;
    let file = FileConfig::default();
    let attention = resolve_attention(&args.attention, &file)?;
    echo_config(
        "params",
        &ParamsEcho {
            variant: &args.variant,
            dims: args.dims,
            length: args.length,
            classes: args.classes,
            attention: &attention,
        },
    );
    let model = build_variant(
        variant,
        args.dims,
        args.length,
        args.classes,
        &attention,
        0,
    )?;
    let (total, items) = count_parameters(&model);
    for (name, count) in &items {
        println!("  {name:<28} {count:>10}");
    }
    println!("  {:<28} {total:>10}", "total");
    if matches!(variant, ModelVariant::TpsStandalone | ModelVariant::TpsPe) {
        let audit = audit_eq8(&attention, args.dims)?;
        println!("{}", audit.render_table());
        println!(
            "audit {}",
            if audit.delta == 0.0 { "exact (delta 0)" } else { "DELTA NONZERO" }
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct DumpEcho {
    checkpoint: String,
    data: String,
    sample: usize,
    znormalize: bool,
    out_dir: String,
}

fn cmd_dump_attention(args: &DumpArgs) -> Result<(), Error> {
    let out = out_dir(&args.out_dir, None);
    echo_config(
        "dump-attention",
        &DumpEcho {
            checkpoint: args.checkpoint.display().to_string(),
            data: args.data.display().to_string(),
            sample: args.sample,
            znormalize: !args.no_znorm,
            out_dir: out.display().to_string(),
        },
    );
    let model = load_checkpoint(&args.checkpoint)?;
    let mut ds = parse_ts(&args.data)?;
    if !args.no_znorm {
        ds = ds.znormalize();
    }
    if args.sample >= ds.len() {
        return Err(Error::Data(format!(
            "sample index {} out of range for {} samples",
            args.sample,
            ds.len()
        )));
    }
    if ds.dims != model.d_in {
        return Err(Error::Data(format!(
            "dataset has {} dimensions but the checkpoint expects {}",
            ds.dims, model.d_in
        )));
    }
    let ds = ds.pad_to(ds.max_len.max(model.seq_len))?;
    let sample = &ds.samples[args.sample].series;
    let dump = model.attention_dump(sample)?;
    std::fs::create_dir_all(&out)?;
    match dump {
        AttentionDumpData::Tps { n, a, a1, a2, sigma_hat, sigma } => {
            std::fs::write(out.join("A.csv"), render_matrix_csv(&a, n, n))?;
            std::fs::write(out.join("A1.csv"), render_matrix_csv(&a1, n, n))?;
            std::fs::write(out.join("A2.csv"), render_matrix_csv(&a2, n, n))?;
            std::fs::write(out.join("sigma.csv"), render_sigma_csv(&sigma_hat, &sigma))?;
            println!("wrote A.csv, A1.csv, A2.csv, sigma.csv to {}", out.display());
        }
        AttentionDumpData::Sa { n, a } => {
            std::fs::write(out.join("A.csv"), render_matrix_csv(&a, n, n))?;
            println!("wrote A.csv to {} (SA encoder: no pseudo-Gaussian diagnostics)", out.display());
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct SynthEcho<'a> {
    spec: &'a SyntheticSpec,
    out: String,
}

fn cmd_synth(args: &SynthArgs) -> Result<(), Error> {
    let spec = resolve_synth_spec(&args.kind, &args.opts, &FileConfig::default(), args.seed)?;
    echo_config("synth", &SynthEcho { spec: &spec, out: args.out.display().to_string() });
    let (train, test) = generate_synthetic(&spec)?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let train_path = PathBuf::from(format!("{}_TRAIN.ts", args.out.display()));
    let test_path = PathBuf::from(format!("{}_TEST.ts", args.out.display()));
    save_ts(&train, &train_path)?;
    save_ts(&test, &test_path)?;
    println!("wrote {} ({} samples)", train_path.display(), train.len());
    println!("wrote {} ({} samples)", test_path.display(), test.len());
    if spec.noise == 0.0 && spec.kind == SyntheticKind::PositionedBump {
        println!(
            "1-NN oracle accuracy: {:.4}",
            nearest_neighbor_accuracy(&train, &test)
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome: Result<u8, Error> = match &cli.command {
        Command::Train(args) => cmd_train(args).map(|_| 0),
        Command::Eval(args) => cmd_eval(args).map(|_| 0),
        Command::Gradcheck(args) => cmd_gradcheck(args).map(|r| if r.pass { 0 } else { 1 }),
        Command::Params(args) => cmd_params(args).map(|_| 0),
        Command::DumpAttention(args) => cmd_dump_attention(args).map(|_| 0),
        Command::Synth(args) => cmd_synth(args).map(|_| 0),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
