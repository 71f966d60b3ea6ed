use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use lbsim_core::certify::{certify, CertifyRequest};
use lbsim_core::policy::PolicySpec;
use lbsim_core::scenario::{run_scenario, write_outputs, Scenario};

/// Overrides the output directory of `run` when `--out` is absent.
const OUT_ENV: &str = "LBSIM_OUT";

#[derive(Parser)]
#[command(name = "lbsim", version, about = "Discrete-time load-balancing experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every point of a scenario file and write a CSV table.
    Run {
        scenario: PathBuf,
        /// Output directory; defaults to $LBSIM_OUT, then the scenario's `outputs`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Override the horizon of every point.
        #[arg(long)]
        horizon: Option<u64>,
        /// Also write two-column rho/response files per policy.
        #[arg(long)]
        plot: bool,
    },
    /// Check tilt classification and drift inequalities on sampled states.
    Certify {
        /// Policy label, e.g. JSQ, SQ(2), Random, JBT-2, JBTG-2.
        #[arg(long)]
        policy: String,
        /// Number of unit-rate servers (ignored with --hetero).
        #[arg(long)]
        n: Option<usize>,
        /// TOML file with `mu = [...]`, top level or under [base].
        #[arg(long)]
        hetero: Option<PathBuf>,
        #[arg(long)]
        d: Option<usize>,
        #[arg(long)]
        t: Option<u64>,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Load at which the drift inequalities are evaluated.
        #[arg(long, default_value_t = 0.95)]
        load: f64,
    },
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn execute(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run {
            scenario,
            out,
            jobs,
            horizon,
            plot,
        } => {
            let mut s = Scenario::load(&scenario)?;
            if let Some(h) = horizon {
                s = s.with_horizon(h);
                s.points()?;
            }
            let dir = out
                .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
                .unwrap_or_else(|| s.outputs.clone());
            let results = run_scenario(&s, jobs)?;
            let written =
                write_outputs(&s, &results, &dir, plot).with_context(|| format!("cannot write to {}", dir.display()))?;
            for r in &results {
                let row = r.row();
                println!(
                    "{:<10} rho={:<5} T={:<5} response={:>10.3} ci95={:>8} msgs={:>7.3}{}",
                    row.policy,
                    row.rho,
                    row.t.map_or("-".into(), |t| t.to_string()),
                    row.mean_response,
                    row.ci95.map_or("-".into(), |c| format!("{c:.3}")),
                    row.msgs_per_arrival,
                    if row.unstable_suspect { "  unstable-suspect" } else { "" }
                );
            }
            for path in written {
                println!("wrote {}", path.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Certify {
            policy,
            n,
            hetero,
            d,
            t,
            trials,
            seed,
            load,
        } => {
            let mut spec: PolicySpec = policy.parse().map_err(anyhow::Error::msg)?;
            if let Some(d) = d {
                spec = spec.with_d(d);
            }
            if let Some(t) = t {
                spec = spec.with_refresh_interval(t);
            }
            let mu = match (hetero, n) {
                (Some(path), _) => read_rates(&path)?,
                (None, Some(n)) => vec![1.0; n],
                (None, None) => bail!("certify needs --n or --hetero"),
            };
            let report = certify(&CertifyRequest {
                policy: spec,
                mu,
                trials,
                seed,
                load,
            })?;
            print!("{report}");
            Ok(if report.violation_count() == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
    }
}

fn read_rates(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let value: toml::Table = text.parse().with_context(|| format!("cannot parse {}", path.display()))?;
    let mu = value
        .get("mu")
        .or_else(|| value.get("base").and_then(|b| b.get("mu")))
        .context("no `mu` array found")?;
    let rates = mu
        .as_array()
        .context("`mu` must be an array")?
        .iter()
        .map(|v| v.as_float().or_else(|| v.as_integer().map(|i| i as f64)))
        .collect::<Option<Vec<f64>>>()
        .context("`mu` entries must be numbers")?;
    Ok(rates)
}
