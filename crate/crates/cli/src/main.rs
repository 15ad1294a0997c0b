use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use elf_core::config::RunConfig;
use elf_core::experiment::{self, RunStatus};
use elf_core::samplers::Algorithm;
use elf_core::theory::{self, TAU_NOTE};
use elf_core::validation::{self, Suite};

#[derive(Parser)]
#[command(name = "elf", version, about = "Compressed federated Langevin sampling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// JSON run config.
    #[arg(long)]
    config: PathBuf,
    /// Override a config field, e.g. `--set rounds=500` or `--set uplink.k=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run all chains and write trace.csv and summary.json.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory; defaults to the config's `output`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every point of the config's sweep and write sweep.csv.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the theory constants for a config as JSON.
    CheckTheory {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Also certify an iteration budget for this KL accuracy.
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// Run a property suite and print its report as JSON.
    Validate {
        /// compressors, recurrences, theory or oracles.
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load(args: &ConfigArgs) -> Result<(RunConfig, Option<PathBuf>)> {
    let config = RunConfig::load(&args.config, &args.set)
        .with_context(|| format!("loading {}", args.config.display()))?;
    let base = args.config.parent().map(Path::to_path_buf);
    Ok((config, base))
}

fn out_dir(out: Option<PathBuf>, config: &RunConfig) -> Result<PathBuf> {
    match out.or_else(|| config.output.clone()) {
        Some(p) => Ok(p),
        None => bail!("no output directory: pass --out or set `output` in the config"),
    }
}

fn cmd_run(cfg: ConfigArgs, out: Option<PathBuf>) -> Result<ExitCode> {
    let (config, base) = load(&cfg)?;
    let dir = out_dir(out, &config)?;
    let output = experiment::run(&config, base.as_deref())?;
    experiment::write_run(&dir, &output)?;
    println!("wrote {}", dir.display());
    if let Some(d) = &output.summary.divergence {
        eprintln!("diverged at round {} (chain {}): {}", d.round, d.chain, d.message);
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_sweep(cfg: ConfigArgs, out: Option<PathBuf>) -> Result<ExitCode> {
    let (config, base) = load(&cfg)?;
    let dir = out_dir(out, &config)?;
    let output = experiment::sweep(&config, base.as_deref())?;
    experiment::write_sweep(&dir, &output)?;
    println!("wrote {}", dir.join("sweep.csv").display());
    let diverged = output
        .points
        .iter()
        .filter(|p| p.output.summary.status == RunStatus::Diverged)
        .count();
    if diverged > 0 {
        eprintln!("{diverged} sweep point(s) diverged");
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_check_theory(cfg: ConfigArgs, epsilon: Option<f64>) -> Result<ExitCode> {
    let (config, base) = load(&cfg)?;
    let prep = experiment::prepare(&config, base.as_deref())?;
    let pot = &prep.potential;
    let pair = config.compressors();
    let d = pot.dim();
    let gamma_max = prep
        .mu
        .map(|mu| experiment::theory_gamma_max(config.algorithm, &pair, pot, mu).map_err(|e| e.to_string()));
    let (constants, unavailable) = match &prep.theory {
        Ok(t) => (Some(t), None),
        Err(e) => (None, Some(e.clone())),
    };
    let psi = match (constants, prep.kl0) {
        (Some(t), Some(kl0)) => Some(t.psi(kl0, 0.0, 0.0)),
        _ => None,
    };
    let budget = match (epsilon, prep.mu, prep.kl0) {
        (None, ..) => None,
        (Some(eps), Some(mu), Some(kl0)) => {
            let (l, l_bar) = (pot.lipschitz(), pot.l_bar());
            let alpha = |c: Option<elf_core::compressors::Compressor>| c.map_or(1.0, |c| c.alpha(d));
            let b = match config.algorithm {
                Algorithm::Lmc => theory::iteration_budget_delf(eps, 1.0, l_bar, l, mu, d, kl0, 0.0),
                Algorithm::Delf => theory::iteration_budget_delf(eps, alpha(pair.uplink), l_bar, l, mu, d, kl0, 0.0),
                Algorithm::Pelf => {
                    theory::iteration_budget_delf(eps, alpha(pair.downlink), l_bar, l, mu, d, kl0, 0.0)
                }
                Algorithm::Belf => theory::iteration_budget_belf(
                    eps,
                    alpha(pair.uplink),
                    alpha(pair.downlink),
                    l_bar,
                    l,
                    mu,
                    d,
                    kl0,
                    0.0,
                    0.0,
                ),
            };
            Some(b.map_or_else(|e| json!({ "error": e.to_string() }), |b| json!(b)))
        }
        (Some(_), ..) => Some(json!({ "error": "a budget needs mu and a Gaussian init and target" })),
    };
    let report = json!({
        "algorithm": config.algorithm,
        "gamma": prep.gamma,
        "gamma_max": gamma_max.map(|r| r.map_or_else(|e| json!({ "error": e }), |g| json!(g))),
        "dim": d,
        "clients": pot.n(),
        "lipschitz": pot.lipschitz(),
        "l_bar": pot.l_bar(),
        "mu": prep.mu,
        "alpha_uplink": pair.uplink.map(|c| c.alpha(d)),
        "alpha_downlink": pair.downlink.map(|c| c.alpha(d)),
        "constants": constants,
        "theory_unavailable": unavailable,
        "kl0": prep.kl0,
        "psi": psi,
        "budget": budget,
        "tau_note": TAU_NOTE,
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(ExitCode::SUCCESS)
}

fn cmd_validate(suite: &str, seed: u64) -> Result<ExitCode> {
    let suite: Suite = suite.parse()?;
    let report = experiment::with_thread_cap(|| validation::validate(suite, seed));
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(if report.passed { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { cfg, out } => cmd_run(cfg, out),
        Command::Sweep { cfg, out } => cmd_sweep(cfg, out),
        Command::CheckTheory { cfg, epsilon } => cmd_check_theory(cfg, epsilon),
        Command::Validate { suite, seed } => cmd_validate(&suite, seed),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
