use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde_json::json;

use maestro::envsuite::{generate_dataset, read_dataset, write_dataset};
use maestro::harness::{
    compare_arms, eval_checkpoint, export_weight_dynamics, run_experiment_with, timing_csv,
    timing_report, Checkpoint, Progress, RunConfig, RunOutcome, RunReport, RunTiming,
};

#[derive(Parser)]
#[command(
    name = "maestro",
    version,
    about = "Meta-learned reward scalarization for GRPO on a toy suite"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one training configuration and write its artifacts.
    Train {
        config: PathBuf,
        /// Output directory; overrides `output_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a JSONL prompt dataset.
    Eval {
        checkpoint: PathBuf,
        dataset: PathBuf,
    },
    /// Run every `*.toml` config in a directory over several seeds and compare the arms.
    Ablate {
        config_dir: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the per-family Conductor weight trajectory of a run report as CSV.
    ExportDynamics { report: PathBuf },
    /// Run the given configs over several seeds and print the comparison table.
    Compare {
        #[arg(required = true, num_args = 1..)]
        configs: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn log(value: serde_json::Value) {
    eprintln!("{value}");
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn jsonl<T: serde::Serialize>(items: &[T]) -> Result<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    Ok(out)
}

fn run_logged(cfg: &RunConfig, label: &str) -> Result<RunOutcome> {
    log(json!({"event": "run_start", "run": label, "arm": cfg.arm, "seed": cfg.seed}));
    let outcome = run_experiment_with(cfg, |p| match p {
        Progress::Step(s) => log(json!({"event": "step", "run": label, "log": s})),
        Progress::Meta(m) => log(json!({"event": "meta_update", "run": label, "log": m})),
    })?;
    log(json!({
        "event": "run_end",
        "run": label,
        "overall_utility": outcome.report.final_eval.overall_utility,
        "seconds": outcome.timing.total_seconds,
    }));
    Ok(outcome)
}

fn write_run(dir: &Path, cfg: &RunConfig, outcome: &RunOutcome) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let report = &outcome.report;
    write_file(&dir.join("config.toml"), &cfg.to_toml_string()?)?;
    write_file(&dir.join("report.json"), &report.to_json()?)?;
    write_file(
        &dir.join("timing.json"),
        &serde_json::to_string_pretty(&outcome.timing)?,
    )?;
    write_file(&dir.join("steps.jsonl"), &jsonl(&report.steps)?)?;
    write_file(&dir.join("meta.jsonl"), &jsonl(&report.meta_updates)?)?;
    if cfg.arm.uses_conductor() {
        write_file(&dir.join("dynamics.csv"), &export_weight_dynamics(report)?)?;
    }
    outcome.checkpoint.save(&dir.join("checkpoint.json"))?;
    let (train, test) = generate_dataset(
        &cfg.data.suite(),
        cfg.seed,
        cfg.data.n_train,
        cfg.data.n_test,
        &cfg.data.mix()?,
    )?;
    write_dataset(&dir.join("train.jsonl"), &train)?;
    write_dataset(&dir.join("test.jsonl"), &test)?;
    Ok(())
}

fn train(config: &Path, out: Option<PathBuf>) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let dir = out
        .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(format!("runs/{}-seed{}", cfg.arm.name(), cfg.seed)));
    let outcome = run_logged(&cfg, cfg.arm.name())?;
    write_run(&dir, &cfg, &outcome)?;
    println!(
        "{}",
        json!({
            "output_dir": dir,
            "arm": cfg.arm,
            "seed": cfg.seed,
            "overall_utility": outcome.report.final_eval.overall_utility,
            "report_hash": outcome.report.hash()?,
            "conductor_fraction": outcome.timing.conductor_fraction(),
        })
    );
    Ok(())
}

fn eval(checkpoint: &Path, dataset: &Path) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let prompts = read_dataset(dataset)?;
    let summary = eval_checkpoint(&ck, &prompts)?;
    let mut out = String::from("family,prompts,mean_utility,mean_length\n");
    for f in &summary.families {
        out.push_str(&format!(
            "{},{},{},{}\n",
            f.family, f.prompts, f.utility, f.mean_length
        ));
    }
    out.push_str(&format!(
        "ALL,{},{},{}\n",
        summary.per_prompt.len(),
        summary.overall_utility,
        summary.mean_length
    ));
    print!("{out}");
    Ok(())
}

fn sweep(configs: &[(String, RunConfig)], seeds: &[u64], out: Option<&Path>) -> Result<()> {
    if seeds.is_empty() {
        bail!(maestro::Error::Config(
            "at least one seed is required".into()
        ));
    }
    let jobs: Vec<(String, RunConfig)> = configs
        .iter()
        .flat_map(|(name, cfg)| {
            seeds
                .iter()
                .map(move |&s| (format!("{name}-seed{s}"), cfg.with_seed(s)))
        })
        .collect();
    let outcomes: Vec<RunOutcome> = jobs
        .par_iter()
        .map(|(label, cfg)| run_logged(cfg, label))
        .collect::<Result<_>>()?;
    if let Some(dir) = out {
        for ((label, cfg), outcome) in jobs.iter().zip(&outcomes) {
            write_run(&dir.join(label), cfg, outcome)?;
        }
    }
    let reports: Vec<RunReport> = outcomes.iter().map(|o| o.report.clone()).collect();
    let table = compare_arms(&reports)?;
    let pairs: Vec<(RunReport, RunTiming)> = outcomes
        .iter()
        .map(|o| (o.report.clone(), o.timing.clone()))
        .collect();
    let timing = timing_csv(&timing_report(&pairs)?);
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_file(&dir.join("comparison.csv"), &table.to_csv())?;
        write_file(&dir.join("timing.csv"), &timing)?;
    }
    print!("{}", table.to_csv());
    std::io::stdout().flush()?;
    Ok(())
}

fn load_named(path: &Path) -> Result<(String, RunConfig)> {
    let cfg = RunConfig::load(path)?;
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| cfg.arm.name().into());
    Ok((stem, cfg))
}

fn ablate(dir: &Path, seeds: &[u64], out: Option<PathBuf>) -> Result<()> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!(maestro::Error::Config(format!(
            "no .toml configs in {}",
            dir.display()
        )));
    }
    let configs = paths
        .iter()
        .map(|p| load_named(p))
        .collect::<Result<Vec<_>>>()?;
    sweep(&configs, seeds, out.as_deref())
}

fn compare(paths: &[PathBuf], seeds: &[u64], out: Option<PathBuf>) -> Result<()> {
    let configs = paths
        .iter()
        .map(|p| load_named(p))
        .collect::<Result<Vec<_>>>()?;
    sweep(&configs, seeds, out.as_deref())
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    use maestro::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::InvalidArgument(_) => "invalid_argument",
                E::Unsupported(_) => "unsupported",
                E::Config(_) => "config",
                E::NonFinite { .. } => "non_finite",
                E::Io { .. } => "io",
                E::Serde(_) => "serialization",
            };
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
        if cause.is::<serde_json::Error>() {
            return "serialization";
        }
    }
    "internal"
}

fn describe(err: &anyhow::Error) -> String {
    let mut message = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !message.contains(&text) {
            if !message.is_empty() {
                message.push_str(": ");
            }
            message.push_str(&text);
        }
    }
    message
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.to_string();
            let message = rendered
                .lines()
                .find_map(|l| l.strip_prefix("error: "))
                .map(str::to_owned)
                .unwrap_or_else(|| "a subcommand is required".to_owned());
            eprintln!("{}", json!({"error": "usage", "message": message}));
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Train { config, out } => train(&config, out),
        Command::Eval {
            checkpoint,
            dataset,
        } => eval(&checkpoint, &dataset),
        Command::Ablate {
            config_dir,
            seeds,
            out,
        } => ablate(&config_dir, &seeds, out),
        Command::ExportDynamics { report } => RunReport::load(&report)
            .and_then(|r| export_weight_dynamics(&r))
            .map(|csv| print!("{csv}"))
            .map_err(Into::into),
        Command::Compare {
            configs,
            seeds,
            out,
        } => compare(&configs, &seeds, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let kind = error_kind(&err);
            eprintln!("{}", json!({"error": kind, "message": describe(&err)}));
            ExitCode::from(if kind == "config" { 2 } else { 1 })
        }
    }
}
