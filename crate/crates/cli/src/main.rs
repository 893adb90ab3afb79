use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use auformer::collab::{AUFormer, ModelConfig};
use auformer::config::{canonical_hash, split_dataset, MetricsReport, RunConfig};
use auformer::datagen::{generate_dataset, Dataset, SyntheticSpec};
use auformer::losses::{gradcheck, gradient_curves, CheckedLoss, LossConfig};
use auformer::trainer::{configure_threads, count_params, estimate_flops, evaluate_f1, History};
use auformer::Error;

/// Relative error above which `gradcheck` fails.
const GRADCHECK_TOL: f64 = 1e-5;

#[derive(Parser)]
#[command(name = "auformer", version, about = "MoKE adapters on a frozen ViT: data, training, evaluation, verification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-label dataset.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a generated dataset; writes checkpoint, metrics and history.
    Train {
        /// Run config JSON; every field defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override one ablation switch, e.g. `collab=off` or `adapter=lora`.
        #[arg(long = "ablation", value_name = "KEY=VALUE")]
        ablation: Vec<String>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Restrict to one side of the split described by this run config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Split::All, requires = "config")]
        split: Split,
    },
    /// Compare analytic loss gradients with central differences.
    Gradcheck {
        #[arg(long, default_value = "all")]
        losses: String,
        #[arg(long, default_value_t = 1000)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Negate the analytic gradient (negative control).
        #[arg(long, hide = true)]
        inject_wrong_sign: bool,
    },
    /// Learnable/frozen parameter counts and FLOPs.
    Params {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        num_aus: usize,
    },
    /// Negative-branch gradient curves of the loss family as CSV.
    Curves {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated occurrence rates, one per AU.
        #[arg(long, default_value = "0.2,0.3,0.4,0.5")]
        rates: String,
        /// Constant exponent of the WA reference curve.
        #[arg(long, default_value_t = 2.0)]
        wa_gamma: f64,
        #[arg(long, default_value_t = 199)]
        points: usize,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum Split {
    All,
    Train,
    Test,
}

/// Exit 2 for usage and configuration problems, 1 for runtime failures.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => 2,
            _ => 1,
        };
        Failure { code, message: e.to_string() }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: 2, message: message.into() }
}

fn runtime(message: impl Into<String>) -> Failure {
    Failure { code: 1, message: message.into() }
}

type CliResult<T> = Result<T, Failure>;

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} does not exist", path.display())))
    }
}

fn require_dir(path: &Path, what: &str) -> CliResult<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} is not a directory", path.display())))
    }
}

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    match path {
        Some(p) => {
            require_file(p, "config")?;
            Ok(RunConfig::load(p)?)
        }
        None => Ok(RunConfig::default()),
    }
}

fn emit<S: Serialize>(value: &S) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| runtime(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| runtime(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

fn gen_data(spec_path: &Path, out: &Path) -> CliResult<()> {
    require_file(spec_path, "spec")?;
    let text = fs::read_to_string(spec_path).map_err(|e| usage(e.to_string()))?;
    let spec: SyntheticSpec = serde_json::from_str(&text).map_err(|e| usage(format!("invalid spec: {e}")))?;
    spec.validate()?;
    let manifest = generate_dataset(&spec, out)?;
    emit(&json!({
        "config_hash": canonical_hash(&spec),
        "manifest": manifest,
        "samples": spec.samples,
    }))
}

fn train_cmd(config: Option<&Path>, data_dir: &Path, out: &Path, overrides: &[String]) -> CliResult<()> {
    let mut cfg = load_config(config)?;
    for o in overrides {
        cfg.apply_override(o)?;
    }
    require_dir(data_dir, "data directory")?;
    let data = Dataset::load(data_dir)?;
    let outcome = auformer::config::run_training(&cfg, &data)?;
    fs::create_dir_all(out).map_err(|e| runtime(e.to_string()))?;
    outcome.model.save(&out.join("model.aufw"))?;
    write_json(&out.join("config.json"), &cfg)?;
    write_json(&out.join("metrics.json"), &outcome.report)?;
    fs::write(out.join("history.csv"), outcome.history.to_csv()).map_err(|e| runtime(e.to_string()))?;
    emit(&outcome.report)
}

fn eval_cmd(checkpoint: &Path, data_dir: &Path, threshold: f64, config: Option<&Path>, split: Split) -> CliResult<()> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(usage("threshold must lie in [0, 1]"));
    }
    require_file(checkpoint, "checkpoint")?;
    require_dir(data_dir, "data directory")?;
    let model = AUFormer::<f32>::load(checkpoint)?;
    let data = Dataset::load(data_dir)?;
    let data = match split {
        Split::All => data,
        side => {
            let cfg = load_config(config)?;
            let (train, test) = split_dataset(&data, &cfg.data)?;
            if side == Split::Train {
                train
            } else {
                test
            }
        }
    };
    let metrics = evaluate_f1(&model, &data, threshold)?;
    let report = MetricsReport::new(
        &model,
        canonical_hash(&model.config),
        &metrics,
        threshold,
        &History::default(),
        None,
        (0, data.samples.len()),
    );
    emit(&report)
}

fn gradcheck_cmd(losses: &str, points: usize, seed: u64, wrong_sign: bool) -> CliResult<()> {
    let selection = CheckedLoss::parse_list(losses)?;
    let entries = gradcheck(&selection, points, seed, wrong_sign)?;
    let worst = entries.iter().map(|e| e.rel_err).fold(0.0, f64::max);
    let failed = entries.iter().filter(|e| !(e.rel_err <= GRADCHECK_TOL)).count();
    emit(&json!({
        "config_hash": canonical_hash(&json!({"losses": losses, "points": points, "seed": seed})),
        "tolerance": GRADCHECK_TOL,
        "max_rel_err": worst,
        "failed": failed,
        "entries": entries,
    }))?;
    if failed > 0 {
        return Err(runtime(format!("{failed} of {} gradient checks exceed {GRADCHECK_TOL:e}", entries.len())));
    }
    Ok(())
}

fn params_cmd(config: Option<&Path>, num_aus: usize) -> CliResult<()> {
    let cfg = load_config(config)?;
    let mc: ModelConfig = cfg.model_config(num_aus);
    mc.validate()?;
    let model = AUFormer::<f32>::init(mc, cfg.train.seed)?;
    emit(&json!({
        "config_hash": cfg.hash(),
        "num_aus": num_aus,
        "params": count_params(&model),
        "flops": estimate_flops(&model),
    }))
}

fn curves_cmd(out: &Path, config: Option<&Path>, rates: &str, wa_gamma: f64, points: usize) -> CliResult<()> {
    let cfg = load_config(config)?;
    let rates: Vec<f64> = rates
        .split(',')
        .map(|r| r.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| usage(format!("invalid --rates: {e}")))?;
    if points == 0 {
        return Err(usage("--points must be >= 1"));
    }
    let lc = LossConfig::from_rates(&rates, &cfg.loss, cfg.ablation.gamma, cfg.ablation.margin)?;
    let curves = gradient_curves(&lc, wa_gamma, points);
    fs::write(out, curves.to_csv()).map_err(|e| runtime(format!("cannot write {}: {e}", out.display())))?;
    emit(&json!({
        "config_hash": cfg.hash(),
        "out": out,
        "columns": curves.header,
        "rows": curves.rows.len(),
    }))
}

fn run(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    match cli.command {
        Command::GenData { spec, out } => gen_data(&spec, &out),
        Command::Train { config, data, out, ablation } => train_cmd(config.as_deref(), &data, &out, &ablation),
        Command::Eval { checkpoint, data, threshold, config, split } => {
            eval_cmd(&checkpoint, &data, threshold, config.as_deref(), split)
        }
        Command::Gradcheck { losses, points, seed, inject_wrong_sign } => {
            gradcheck_cmd(&losses, points, seed, inject_wrong_sign)
        }
        Command::Params { config, num_aus } => params_cmd(config.as_deref(), num_aus),
        Command::Curves { out, config, rates, wa_gamma, points } => {
            curves_cmd(&out, config.as_deref(), &rates, wa_gamma, points)
        }
    }
}

fn main() -> ExitCode {
    // clap exits with 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
