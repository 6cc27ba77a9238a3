use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::{error, info};

use derrd::eval::{Metric, CUTOFFS};
use derrd::experiment::{self, report, ExperimentConfig};

/// Teacher/student distillation experiments for top-N recommendation.
///
/// Every config key can also be given as a flag, `--key value`, after the
/// subcommand; flags override the config file. A comma-separated value turns
/// that key into a sweep, run serially over every combination.
#[derive(Parser, Debug)]
#[command(name = "derrd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Filter a raw `user<TAB>item` log (or generate a synthetic one) into a dataset.
    PrepareData(Args),
    /// Train a full-size base model.
    TrainTeacher(Args),
    /// Train a compact student under the configured method.
    Distill(Args),
    /// Score a snapshot on the test split.
    Evaluate(Args),
    /// Time full ranking for a teacher and a student snapshot.
    BenchLatency(Args),
    /// Merge finished runs under the output directory into report tables.
    Report(Args),
    /// Write the expert chosen for every entity of a DE run.
    ExportExperts(Args),
}

#[derive(clap::Args, Debug)]
struct Args {
    /// Flat `key = value` config file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Config overrides: `--key value` or `--key=value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = raw.iter();
    while let Some(flag) = it.next() {
        let Some(key) = flag.strip_prefix("--") else {
            bail!("expected `--key value`, got `{flag}`");
        };
        match key.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                let value = it.next().with_context(|| format!("`--{key}` needs a value"))?;
                out.push((key.to_string(), value.clone()));
            }
        }
    }
    Ok(out)
}

/// Expand comma-separated override values into the cartesian product of
/// configurations, first key varying slowest.
fn expand_sweeps(overrides: &[(String, String)]) -> Vec<Vec<(String, String)>> {
    let mut combos: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for (k, v) in overrides {
        let values: Vec<&str> = v.split(',').map(str::trim).collect();
        combos = combos
            .into_iter()
            .flat_map(|c| {
                values.iter().map(move |x| {
                    let mut c = c.clone();
                    c.push((k.clone(), x.to_string()));
                    c
                })
            })
            .collect();
    }
    combos
}

fn configs(args: &Args) -> Result<Vec<ExperimentConfig>> {
    let base = match &args.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    let overrides = parse_overrides(&args.overrides)?;
    expand_sweeps(&overrides)
        .into_iter()
        .map(|combo| {
            let mut cfg = base.clone();
            cfg.apply_overrides(combo.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
            Ok(cfg)
        })
        .collect()
}

fn single(args: &Args) -> Result<ExperimentConfig> {
    let mut all = configs(args)?;
    if all.len() != 1 {
        bail!(derrd::Error::Config("this command does not take sweep values".into()));
    }
    Ok(all.remove(0))
}

fn default_teacher(cfg: &mut ExperimentConfig) {
    if cfg.teacher.is_none() && cfg.method.needs_teacher() {
        let mut t = cfg.clone();
        t.run_name = None;
        cfg.teacher = Some(cfg.output_dir.join(t.teacher_run_name()).join("model.snap"));
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PrepareData(args) => {
            let cfg = single(&args)?;
            let (path, ds) = experiment::prepare_data(&cfg)?;
            print!("{}", ds.manifest());
            println!("dataset: {}", path.display());
        }
        Command::TrainTeacher(args) => {
            for cfg in configs(&args)? {
                let out = experiment::train_teacher(&cfg)?;
                println!("{}: {}", out.dir.display(), out.test.summary());
            }
        }
        Command::Distill(args) => {
            for mut cfg in configs(&args)? {
                default_teacher(&mut cfg);
                let out = experiment::distill(&cfg)?;
                println!("{}: {}", out.dir.display(), out.test.summary());
            }
        }
        Command::Evaluate(args) => {
            let cfg = single(&args)?;
            let (header, report) = experiment::evaluate_snapshot(&cfg)?;
            println!(
                "{} {} width {} (best epoch {})",
                header.role, header.method, header.dims.width, header.best_epoch
            );
            for metric in Metric::ALL {
                let cells: Vec<String> = CUTOFFS
                    .iter()
                    .map(|&n| format!("{metric}@{n} {:.4}", report.mean(metric, n)))
                    .collect();
                println!("{}", cells.join("  "));
            }
        }
        Command::BenchLatency(args) => {
            let mut cfg = single(&args)?;
            if cfg.teacher.is_none() {
                cfg.method = derrd::experiment::Method::DeRrd;
                default_teacher(&mut cfg);
            }
            for e in experiment::bench_latency(&cfg)? {
                println!(
                    "{:<8} width {:>4} params {:>9} median {:.6}s  H@5 {:.4} ({:.1}% of teacher)",
                    e.role,
                    e.width,
                    e.param_count,
                    e.seconds,
                    e.test_h5,
                    100.0 * e.h5_ratio
                );
            }
        }
        Command::Report(args) => {
            let cfg = single(&args)?;
            let r = report::run_report(&cfg.output_dir)?;
            print!("{}", r.to_text());
        }
        Command::ExportExperts(args) => {
            let cfg = single(&args)?;
            let path = experiment::export_experts(&cfg)?;
            info!("done");
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<derrd::Error>() {
        Some(err) if err.is_config() => 2,
        Some(err) if err.is_numerical() => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
