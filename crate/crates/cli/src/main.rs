use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use divafn::experiment::{evaluate_model, Split};
use divafn::fmx::{load_dataset, save_dataset};
use divafn::gradcheck::{gradcheck, Corruption, GradcheckSetup};
use divafn::report::{
    compare_ablations, format_ablation_table, train_and_report, unseen_class_warnings,
};
use divafn::{
    generate_synthetic, load_checkpoint, save_checkpoint, Checkpoint, Error, Modality, RunReport,
    SynthConfig, TrainConfig,
};

const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;
const EXIT_DATA: u8 = 4;
const EXIT_GRADCHECK: u8 = 5;

const MODEL_FILE: &str = "model.dvfn";
const REPORT_FILE: &str = "report.json";

#[derive(Parser)]
#[command(
    name = "divafn",
    version,
    about = "Cross-modal representation learning with semantic autoencoder fusion"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic tri-modal dataset.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model on a dataset directory and write a checkpoint and report.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Fit the classifier on a checkpoint's training split and score a split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Metrics JSON destination.
        #[arg(long)]
        out: PathBuf,
        /// Score the training split instead of the held-out one.
        #[arg(long)]
        on_train: bool,
    },
    /// Compare analytic and finite-difference gradients on a small instance.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Add 1e-2 to one gradient entry of this modality.
        #[arg(long, hide = true)]
        corrupt_gradient: Option<String>,
    },
    /// Run every ablation and the video-only baseline on one split.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// Directory for ablation.json.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Pretty-print a report.json.
    Report { path: PathBuf },
}

#[derive(Args)]
struct RunFlags {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Fraction of each class used for training, in (0, 1].
    #[arg(long)]
    ratio: Option<f64>,
    /// full, DIVA, DIVF or KVC.
    #[arg(long)]
    ablation: Option<String>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    strict_paper_gradients: bool,
}

/// Configuration file shared by every command.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    /// Seed for synthetic generation.
    #[serde(default)]
    seed: Option<u64>,
    /// Training ratio.
    #[serde(default)]
    ratio: Option<f64>,
    #[serde(default)]
    synth: Option<SynthConfig>,
    #[serde(default)]
    train: Option<TrainConfig>,
}

/// The settings a training run actually used, echoed into its report.
#[derive(Serialize)]
struct Effective<'a> {
    ratio: f64,
    train: &'a TrainConfig,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Divergence { .. } => EXIT_DIVERGENCE,
            _ => EXIT_DATA,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Failure::config(format!("invalid config {}: {e}", path.display())))
}

fn train_config(cfg: &RunConfig, flags: &RunFlags) -> CliResult<(TrainConfig, f64)> {
    let mut train = cfg.train.clone().unwrap_or_default();
    if let Some(seed) = flags.seed {
        train.seed = seed;
    }
    if let Some(iters) = flags.iters {
        train.hp.iters = iters;
    }
    if let Some(tag) = &flags.ablation {
        train.ablation = tag
            .parse()
            .map_err(|e: Error| Failure::config(e.to_string()))?;
    }
    if flags.strict_paper_gradients {
        train.strict_paper_gradients = true;
    }
    train
        .validate()
        .map_err(|e| Failure::config(e.to_string()))?;
    let ratio = flags.ratio.or(cfg.ratio).unwrap_or(1.0);
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Failure::config(format!("ratio {ratio} must lie in (0, 1]")));
    }
    Ok((train, ratio))
}

fn write(path: &Path, contents: &str) -> CliResult {
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn create_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn cmd_synth(config: &Path, out: &Path, seed: Option<u64>) -> CliResult {
    let cfg = load_config(Some(config))?;
    let synth = cfg.synth.ok_or_else(|| {
        Failure::config("config has no `synth` section (needs at least `classes` and `per_class`)")
    })?;
    synth
        .validate()
        .map_err(|e| Failure::config(e.to_string()))?;
    let seed = seed.or(cfg.seed).unwrap_or(0);
    let (ds, table) = generate_synthetic(&synth, seed)?;
    save_dataset(out, &ds, &table)?;
    println!(
        "wrote {} samples of {} classes (image {}, keyframe {}, video {}, semantic {}) to {}",
        ds.len(),
        ds.num_classes(),
        ds.images().nrows(),
        ds.keyframes().nrows(),
        ds.videos().nrows(),
        table.dim(),
        out.display()
    );
    Ok(())
}

fn cmd_train(data: &Path, out: &Path, flags: &RunFlags) -> CliResult {
    let cfg = load_config(flags.config.as_deref())?;
    let (train, ratio) = train_config(&cfg, flags)?;
    let (ds, table) = load_dataset(data)?;
    create_dir(out)?;
    let echo = serde_json::to_value(Effective {
        ratio,
        train: &train,
    })
    .map_err(Error::from)?;
    let mut save_every = |ckpt: &Checkpoint| -> divafn::Result<()> {
        let path = out.join(format!("checkpoint-{:05}.dvfn", ckpt.model.iterations()));
        save_checkpoint(ckpt, path)
    };
    let (ckpt, report) = train_and_report(&ds, &table, &train, ratio, echo, Some(&mut save_every))?;
    save_checkpoint(&ckpt, out.join(MODEL_FILE))?;
    write(&out.join(REPORT_FILE), &report.to_json()?)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let acc = &report.accuracies[0];
    let pct = |v: f64| format!("{:.1}%", 100.0 * v);
    println!(
        "{}: {} iterations, objective {:.6} -> {}, train accuracy {}, held-out accuracy {}",
        report.ablation,
        report.trace.len(),
        report.initial_objective,
        report
            .final_objective()
            .map_or_else(|| "-".into(), |v| format!("{v:.6}")),
        pct(acc.train_accuracy),
        acc.test_accuracy.map_or_else(|| "-".into(), pct)
    );
    Ok(())
}

fn cmd_eval(checkpoint: &Path, data: &Path, out: &Path, on_train: bool) -> CliResult {
    let ckpt = load_checkpoint(checkpoint)?;
    let (ds, _) = load_dataset(data)?;
    let split = match &ckpt.split {
        Some(info) => Split::from_train(&ds, info.ratio, info.seed, info.train.clone())?,
        None => Split::stratified(&ds, 1.0, ckpt.model.config.seed)?,
    };
    let metrics = evaluate_model(&ckpt.model, &ds, &split)?;
    for w in unseen_class_warnings(&ds, &metrics) {
        eprintln!("warning: {w}");
    }
    let chosen = if on_train {
        metrics.train
    } else {
        metrics.test.ok_or_else(|| {
            Failure::from(Error::Contract(
                "checkpoint was trained on every sample; there is no held-out split (use --on-train)".into(),
            ))
        })?
    };
    write(
        out,
        &serde_json::to_string_pretty(&chosen).map_err(Error::from)?,
    )?;
    println!(
        "{} accuracy {:.1}% on {} samples",
        if on_train { "training" } else { "held-out" },
        100.0 * chosen.accuracy,
        chosen.confusion.iter().flatten().sum::<usize>()
    );
    Ok(())
}

fn parse_modality(name: &str) -> CliResult<Modality> {
    Modality::ALL
        .into_iter()
        .find(|m| m.name().eq_ignore_ascii_case(name))
        .ok_or_else(|| {
            Failure::config(format!(
                "unknown modality {name:?} (image, keyframe, video)"
            ))
        })
}

fn cmd_gradcheck(config: Option<&Path>, seed: Option<u64>, corrupt: Option<&str>) -> CliResult {
    let cfg = load_config(config)?;
    let mut setup = GradcheckSetup::default();
    if let Some(train) = &cfg.train {
        setup.hp = train.hp;
        setup.hp.d = GradcheckSetup::default().d;
    }
    if let Some(seed) = seed {
        setup.seed = seed;
    }
    let corruption = corrupt
        .map(parse_modality)
        .transpose()?
        .map(|modality| Corruption {
            modality,
            row: 0,
            col: 0,
            delta: 1e-2,
        });
    let report = gradcheck(&setup, corruption)?;
    for c in &report.checks {
        println!(
            "{:<12} {:<9} worst rel error {:.3e} at ({}, {})",
            serde_json::to_value(c.mode)
                .map_err(Error::from)?
                .as_str()
                .unwrap_or("?"),
            c.modality.name(),
            c.rel_error,
            c.row,
            c.col
        );
    }
    if report.passed {
        println!("gradcheck passed (tolerance {:.0e})", report.tolerance);
        Ok(())
    } else {
        let w = report.worst;
        Err(Failure {
            code: EXIT_GRADCHECK,
            message: format!(
                "gradcheck failed: {} gradient ({:?} mode) at row {}, column {}: analytic {:.9e}, numeric {:.9e}, relative error {:.3e} > {:.0e}",
                w.modality.name(),
                w.mode,
                w.row,
                w.col,
                w.analytic,
                w.numeric,
                w.rel_error,
                report.tolerance
            ),
        })
    }
}

fn cmd_ablate(data: &Path, out: Option<&Path>, flags: &RunFlags) -> CliResult {
    if flags.ablation.is_some() {
        return Err(Failure::config(
            "ablate runs every ablation; drop --ablation",
        ));
    }
    let cfg = load_config(flags.config.as_deref())?;
    let (train, ratio) = train_config(&cfg, flags)?;
    let (ds, table) = load_dataset(data)?;
    let rows = compare_ablations(&ds, &table, &train, ratio)?;
    print!("{}", format_ablation_table(&rows));
    if let Some(dir) = out {
        create_dir(dir)?;
        let json = serde_json::json!({ "ratio": ratio, "seed": train.seed, "rows": rows });
        write(
            &dir.join("ablation.json"),
            &serde_json::to_string_pretty(&json).map_err(Error::from)?,
        )?;
    }
    Ok(())
}

fn cmd_report(path: &Path) -> CliResult {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let r = RunReport::from_json(&text)?;
    println!("ablation      {}", r.ablation);
    println!("seed          {}", r.seed);
    println!("iterations    {}", r.trace.len());
    println!(
        "objective     {:.6} -> {}",
        r.initial_objective,
        r.final_objective()
            .map_or_else(|| "-".into(), |v| format!("{v:.6}"))
    );
    println!("ridge solves  {}", r.ridge_activations);
    for a in &r.accuracies {
        println!(
            "ratio {:<5} train {:>6.1}%  held-out {}  ({} / {} samples)",
            a.ratio,
            100.0 * a.train_accuracy,
            a.test_accuracy
                .map_or_else(|| "-".into(), |v| format!("{:.1}%", 100.0 * v)),
            a.train_samples,
            a.test_samples
        );
    }
    for w in &r.warnings {
        println!("warning: {w}");
    }
    println!(
        "time          train {:.2}s, eval {:.2}s",
        r.timings.train_seconds, r.timings.eval_seconds
    );
    if !r.trace.is_empty() {
        println!("trace");
        for (i, v) in r.trace.iter().enumerate() {
            println!("  {:>4}  {v:.6}", i + 1);
        }
    }
    Ok(())
}

fn configure_threads() -> CliResult {
    let Ok(raw) = std::env::var("DVFN_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw.trim().parse().ok().filter(|&t| t > 0).ok_or_else(|| {
        Failure::config(format!("DVFN_THREADS={raw:?} must be a positive integer"))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Failure::config(format!("cannot size thread pool: {e}")))
}

fn run(cli: Cli) -> CliResult {
    configure_threads()?;
    match cli.command {
        Command::Synth { config, out, seed } => cmd_synth(&config, &out, seed),
        Command::Train { data, out, run } => cmd_train(&data, &out, &run),
        Command::Eval {
            checkpoint,
            data,
            out,
            on_train,
        } => cmd_eval(&checkpoint, &data, &out, on_train),
        Command::Gradcheck {
            config,
            seed,
            corrupt_gradient,
        } => cmd_gradcheck(config.as_deref(), seed, corrupt_gradient.as_deref()),
        Command::Ablate { data, out, run } => cmd_ablate(&data, out.as_deref(), &run),
        Command::Report { path } => cmd_report(&path),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
