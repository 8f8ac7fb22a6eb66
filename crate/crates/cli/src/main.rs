use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use fedsim_core::config::fixed_compute_rounds;
use fedsim_core::datasets::{write_dataset_file, Overlap};
use fedsim_core::report;
use fedsim_core::runner::{run_ab, run_experiment, toy_figure, RunRecord};
use fedsim_core::{Algo, ExperimentConfig, FedError};

#[derive(Parser)]
#[command(name = "fedsim", version, about = "Federated learning simulator (FedAvg / FedFish)")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a single experiment.
    Run(Common),
    /// Run FedAvg and FedFish under identical seeds and cohorts.
    Ab(Common),
    /// Cross product of local epochs and algorithms.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated local epoch counts.
        #[arg(long, value_delimiter = ',', default_value = "1,4,16")]
        epochs: Vec<usize>,
        /// Comma-separated algorithms.
        #[arg(long, value_delimiter = ',', default_value = "fedavg,fedfish")]
        algos: Vec<String>,
        /// Keep total local epochs fixed at this budget instead of fixing rounds.
        #[arg(long)]
        epoch_budget: Option<usize>,
    },
    /// Toy regression curves for all three overlap regimes.
    ToyFigure {
        #[command(flatten)]
        common: Common,
        /// Number of evenly spaced x values in [-2, 2].
        #[arg(long, default_value_t = 201)]
        grid: usize,
    },
    /// Write the configured federated dataset as JSON.
    Dataset {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// JSON experiment config. Optional for toy-figure.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value by dotted path, e.g. `local.epochs=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn from_fed(e: FedError) -> Self {
        if is_config_error(&e) {
            Failure::Config(e.into())
        } else {
            Failure::Runtime(e.into())
        }
    }
}

fn is_config_error(e: &FedError) -> bool {
    match e {
        FedError::InvalidConfig(_) => true,
        FedError::Round { source, .. } | FedError::Client { source, .. } => is_config_error(source),
        _ => false,
    }
}

fn config_err(e: anyhow::Error) -> Failure {
    Failure::Config(e)
}

fn runtime_err(e: anyhow::Error) -> Failure {
    Failure::Runtime(e)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(1);
    }
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("runtime error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("FEDSIM_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| anyhow!("FEDSIM_THREADS must be a positive integer, got {raw:?}"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Run(common) => {
            let cfg = load_config(&common, false)?;
            let out = prepare_out(&common.out_dir, &cfg)?;
            let rec = run_experiment(&cfg).map_err(Failure::from_fed)?;
            write(&out.join("metrics.csv"), &report::metrics_csv(std::slice::from_ref(&rec)))?;
            write(&out.join("record.json"), &report::record_json(&rec))?;
            log::info!("final params sha256 {}", rec.final_params_digest);
        }
        Command::Ab(common) => {
            let cfg = load_config(&common, false)?;
            let out = prepare_out(&common.out_dir, &cfg)?;
            let (avg, fish) = run_ab(&cfg).map_err(Failure::from_fed)?;
            if avg.cohorts != fish.cohorts {
                return Err(runtime_err(anyhow!("FedAvg and FedFish cohorts diverged")));
            }
            write(&out.join("metrics.csv"), &report::metrics_csv(&[avg.clone(), fish.clone()]))?;
            write(&out.join("record_fedavg.json"), &report::record_json(&avg))?;
            write(&out.join("record_fedfish.json"), &report::record_json(&fish))?;
        }
        Command::Sweep {
            common,
            epochs,
            algos,
            epoch_budget,
        } => {
            let cfg = load_config(&common, false)?;
            let algos = algos
                .iter()
                .map(|a| a.parse::<Algo>().map_err(|e| config_err(anyhow!(e))))
                .collect::<Result<Vec<_>, _>>()?;
            let mut runs = Vec::new();
            for &e in &epochs {
                for &algo in &algos {
                    let mut c = cfg.clone();
                    c.local.epochs = e;
                    c.agg.algo = algo;
                    if let Some(budget) = epoch_budget {
                        c.rounds = fixed_compute_rounds(budget, e).map_err(Failure::from_fed)?;
                    }
                    c.validate().map_err(Failure::from_fed)?;
                    runs.push(c);
                }
            }
            let out = prepare_out(&common.out_dir, &cfg)?;
            let mut records: Vec<RunRecord> = Vec::new();
            for c in &runs {
                log::info!("sweep: {} with {} local epochs", c.agg.algo.name(), c.local.epochs);
                records.push(run_experiment(c).map_err(Failure::from_fed)?);
            }
            write(&out.join("metrics.csv"), &report::metrics_csv(&records))?;
            write(&out.join("sweep_summary.csv"), &report::sweep_summary_csv(&records))?;
        }
        Command::ToyFigure { common, grid } => {
            let cfg = load_config(&common, true)?;
            let out = prepare_out(&common.out_dir, &cfg)?;
            let mut figs = Vec::new();
            for overlap in Overlap::ALL {
                let fig = toy_figure(&cfg, overlap, grid).map_err(Failure::from_fed)?;
                write(
                    &out.join(format!("toy_curves_{}.csv", overlap.name())),
                    &report::toy_curves_csv(&fig),
                )?;
                figs.push(fig);
            }
            write(&out.join("toy_summary.csv"), &report::toy_summary_csv(&figs))?;
        }
        Command::Dataset { common } => {
            let cfg = load_config(&common, false)?;
            let data = cfg.dataset.build(cfg.seed).map_err(Failure::from_fed)?;
            let out = prepare_out(&common.out_dir, &cfg)?;
            write_dataset_file(&data, &out.join("dataset.json"))
                .map_err(|e| runtime_err(anyhow::Error::from(e).context("writing dataset")))?;
        }
    }
    Ok(())
}

/// Reads the config, applies `--set` overrides and `--seed`, and validates.
fn load_config(common: &Common, toy_fallback: bool) -> Result<ExperimentConfig, Failure> {
    let base = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .map_err(config_err)?;
            ExperimentConfig::from_json(&text)
                .with_context(|| format!("parsing {}", path.display()))
                .map_err(config_err)?
        }
        None if toy_fallback => ExperimentConfig::toy_default(),
        None => return Err(config_err(anyhow!("--config is required"))),
    };
    // Round-trip through a JSON value so defaulted fields can be overridden too.
    let mut value = serde_json::to_value(&base).expect("config serializes");
    for ov in &common.overrides {
        apply_override(&mut value, ov).map_err(config_err)?;
    }
    let mut cfg: ExperimentConfig = serde_json::from_value(value)
        .context("applying overrides")
        .map_err(config_err)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(|e| config_err(e.into()))?;
    Ok(cfg)
}

fn apply_override(root: &mut Value, assignment: &str) -> anyhow::Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("override {assignment:?} is not of the form key=value"))?;
    let mut node = root;
    for part in key.split('.') {
        node = match node {
            Value::Object(map) => map.get_mut(part),
            Value::Array(items) => part.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| anyhow!("unknown config key {key:?}"))?;
    }
    *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

fn prepare_out(dir: &Path, cfg: &ExperimentConfig) -> Result<PathBuf, Failure> {
    fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(runtime_err)?;
    write(&dir.join("config.json"), &cfg.to_json_pretty())?;
    Ok(dir.to_path_buf())
}

fn write(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(runtime_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn override_paths() {
        let mut v = serde_json::json!({"a": {"b": 1, "c": [1, 2]}, "s": "x"});
        apply_override(&mut v, "a.b=2.5").unwrap();
        apply_override(&mut v, "a.c.1=7").unwrap();
        apply_override(&mut v, "s=fedavg").unwrap();
        assert_eq!(v, serde_json::json!({"a": {"b": 2.5, "c": [1, 7]}, "s": "fedavg"}));
        let err = apply_override(&mut v, "a.zz=1").unwrap_err().to_string();
        assert!(err.contains("a.zz"), "{err}");
        assert!(apply_override(&mut v, "novalue").is_err());
        assert!(apply_override(&mut v, "a.c.9=1").is_err());
    }

    #[test]
    fn config_errors_classified_through_wrappers() {
        let e = FedError::Round {
            round: 3,
            source: Box::new(FedError::InvalidConfig("x".into())),
        };
        assert!(is_config_error(&e));
        assert!(!is_config_error(&FedError::EmptyBatch("x")));
    }
}
