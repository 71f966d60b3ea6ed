//! Scenario files: a base system swept over loads, policies and parameters.
//!
//! ```toml
//! name = "delay_N10"
//! replications = 5
//! outputs = "results"
//!
//! [base]
//! mu = [1.0, 1.0]
//! horizon = 2000000
//! seed = 1
//! arrival = { law = "poisson" }
//! service = { law = "poisson" }
//!
//! [[sweep]]
//! rho = [0.5, 0.99]
//! policies = ["JSQ", "SQ(2)", "JBT-2", "POOLED"]
//! t = [1000]
//! ```
//!
//! The arrival rate of each point is `rho * sum(mu)`. `t` and `d` override the
//! refresh interval and sample size of policies that have them. `POOLED`
//! runs the resource-pooled baseline on the same random streams.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::{pooled_replication, POOLED_LABEL};
use crate::engine::run_replication;
use crate::error::ConfigError;
use crate::metrics::{heavy_traffic_point, Accumulator, RunStatistics};
use crate::model::{SystemConfig, DEFAULT_BATCHES, DEFAULT_INSTABILITY_RATIO};
use crate::policy::PolicySpec;
use crate::stochastic::{ArrivalLaw, ArrivalSpec, ServiceSpec};

fn one() -> u32 {
    1
}

fn default_outputs() -> PathBuf {
    PathBuf::from("results")
}

fn default_batches() -> usize {
    DEFAULT_BATCHES
}

fn default_ratio() -> f64 {
    DEFAULT_INSTABILITY_RATIO
}

/// System template shared by every sweep point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseConfig {
    pub mu: Vec<f64>,
    pub arrival: ArrivalLaw,
    pub service: ServiceSpec,
    pub horizon: u64,
    pub seed: u64,
    #[serde(default)]
    pub warmup: Option<u64>,
    #[serde(default = "default_batches")]
    pub batches: usize,
    #[serde(default = "default_ratio")]
    pub instability_ratio: f64,
    #[serde(default)]
    pub stable_regime: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepBlock {
    pub rho: Vec<f64>,
    pub policies: Vec<String>,
    #[serde(default)]
    pub t: Vec<u64>,
    #[serde(default)]
    pub d: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default = "one")]
    pub replications: u32,
    #[serde(default = "default_outputs")]
    pub outputs: PathBuf,
    pub base: BaseConfig,
    #[serde(default)]
    pub sweep: Vec<SweepBlock>,
}

/// The system simulated at one sweep point.
#[derive(Debug, Clone, PartialEq)]
pub enum PointSystem {
    Policy(PolicySpec),
    Pooled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub block: usize,
    pub rho: f64,
    pub system: PointSystem,
    pub config: SystemConfig,
}

impl SweepPoint {
    pub fn label(&self) -> String {
        match &self.system {
            PointSystem::Policy(p) => p.label(),
            PointSystem::Pooled => POOLED_LABEL.to_string(),
        }
    }

    fn run_replication(&self, replication: u32) -> Result<Accumulator, ConfigError> {
        match self.system {
            PointSystem::Policy(_) => run_replication(&self.config, replication),
            PointSystem::Pooled => pooled_replication(&self.config, replication),
        }
    }
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let scenario: Scenario = toml::from_str(text).map_err(|e| ConfigError::Scenario(e.to_string()))?;
        scenario.points()?;
        Ok(scenario)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ConfigError::Scenario(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Expands the sweep in file order: block, load, policy, T, d.
    pub fn points(&self) -> Result<Vec<SweepPoint>, ConfigError> {
        if self.sweep.is_empty() {
            return Err(ConfigError::Scenario("sweep is empty".into()));
        }
        if self.replications == 0 {
            return Err(ConfigError::NotPositive {
                what: "replications",
            });
        }
        let base = &self.base;
        let mu_total: f64 = base.mu.iter().sum();
        let mut points = Vec::new();
        for (b, block) in self.sweep.iter().enumerate() {
            if block.rho.is_empty() || block.policies.is_empty() {
                return Err(ConfigError::Scenario(format!(
                    "sweep block {b} needs at least one rho and one policy"
                )));
            }
            for &rho in &block.rho {
                if !(rho.is_finite() && rho >= 0.0) {
                    return Err(ConfigError::Scenario(format!("invalid rho {rho}")));
                }
                if base.stable_regime && rho >= 1.0 {
                    return Err(ConfigError::Capacity {
                        lambda: rho * mu_total,
                        mu_total,
                    });
                }
                for name in &block.policies {
                    for system in expand_policy(name, block)? {
                        let policy = match &system {
                            PointSystem::Policy(p) => p.clone(),
                            PointSystem::Pooled => PolicySpec::Random,
                        };
                        let config = SystemConfig {
                            mu: base.mu.clone(),
                            arrival: ArrivalSpec::new(base.arrival.clone(), rho * mu_total),
                            service: base.service.clone(),
                            policy,
                            horizon: base.horizon,
                            seed: base.seed,
                            warmup: base.warmup,
                            batches: base.batches,
                            instability_ratio: base.instability_ratio,
                            stable_regime: base.stable_regime,
                        };
                        config.validate()?;
                        points.push(SweepPoint {
                            block: b,
                            rho,
                            system,
                            config,
                        });
                    }
                }
            }
        }
        Ok(points)
    }

    pub fn with_horizon(mut self, horizon: u64) -> Self {
        self.base.horizon = horizon;
        self
    }
}

fn expand_policy(name: &str, block: &SweepBlock) -> Result<Vec<PointSystem>, ConfigError> {
    if name.trim().eq_ignore_ascii_case(POOLED_LABEL) {
        return Ok(vec![PointSystem::Pooled]);
    }
    let spec: PolicySpec = name.parse().map_err(ConfigError::Scenario)?;
    let ts: Vec<Option<u64>> = match spec.refresh_interval() {
        Some(_) if !block.t.is_empty() => block.t.iter().copied().map(Some).collect(),
        _ => vec![None],
    };
    let ds: Vec<Option<usize>> = match spec.d() {
        Some(_) if !block.d.is_empty() => block.d.iter().copied().map(Some).collect(),
        _ => vec![None],
    };
    let mut out = Vec::new();
    for t in &ts {
        for d in &ds {
            let mut s = spec.clone();
            if let Some(t) = t {
                s = s.with_refresh_interval(*t);
            }
            if let Some(d) = d {
                s = s.with_d(*d);
            }
            out.push(PointSystem::Policy(s));
        }
    }
    Ok(out)
}

/// Aggregated result of one sweep point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointResult {
    pub point: SweepPoint,
    pub stats: RunStatistics,
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CsvRow {
    pub policy: String,
    #[serde(rename = "N")]
    pub n: usize,
    pub rho: f64,
    pub arrival_kind: String,
    pub service_kind: String,
    #[serde(rename = "T")]
    pub t: Option<u64>,
    pub d: Option<usize>,
    pub m: Option<usize>,
    /// Little's-law response time, mean total queue over λ_Σ.
    pub mean_response: f64,
    pub ci95: Option<f64>,
    pub msgs_per_arrival: f64,
    pub eps: Option<f64>,
    pub scaled_queue: Option<f64>,
    pub zeta_half: Option<f64>,
    pub ratio: Option<f64>,
    pub slots: u64,
    pub seed: u64,
    pub mean_total_queue: f64,
    pub unstable_suspect: bool,
    /// Mean of departure slot − arrival slot + 1.
    pub mean_response_perjob: f64,
}

impl PointResult {
    pub fn row(&self) -> CsvRow {
        let c = &self.point.config;
        let s = &self.stats;
        let spec = match &self.point.system {
            PointSystem::Policy(p) => Some(p),
            PointSystem::Pooled => None,
        };
        let lambda = c.arrival.rate;
        let ht = c.build().ok().and_then(|setup| {
            heavy_traffic_point(
                setup.arrival.mean(),
                setup.arrival.variance(),
                setup.service_mean(),
                setup.service_variance(),
                s.mean_total_queue,
            )
            .ok()
        });
        CsvRow {
            policy: self.point.label(),
            n: c.servers(),
            rho: self.point.rho,
            arrival_kind: c.arrival.law.label().to_string(),
            service_kind: c.service.label().to_string(),
            t: spec.and_then(PolicySpec::refresh_interval),
            d: spec.and_then(PolicySpec::d),
            m: spec.and_then(PolicySpec::m),
            mean_response: s.mean_response_little,
            ci95: s
                .queue_ci_halfwidth
                .filter(|_| lambda > 0.0)
                .map(|h| h / lambda),
            msgs_per_arrival: s.msgs_per_arrival(),
            eps: ht.map(|h| h.epsilon),
            scaled_queue: ht.map(|h| h.scaled_queue),
            zeta_half: ht.map(|h| h.zeta_half),
            ratio: ht.map(|h| h.ratio),
            slots: s.slots_simulated,
            seed: c.seed,
            mean_total_queue: s.mean_total_queue,
            unstable_suspect: s.unstable_suspect,
            mean_response_perjob: s.mean_response_perjob,
        }
    }
}

/// Runs every (point, replication) task on a pool of `jobs` threads and
/// merges each point's replications in replication order.
pub fn run_scenario(scenario: &Scenario, jobs: usize) -> Result<Vec<PointResult>, ConfigError> {
    let points = scenario.points()?;
    let reps = scenario.replications;
    let tasks: Vec<(usize, u32)> = (0..points.len())
        .flat_map(|p| (0..reps).map(move |r| (p, r)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| ConfigError::Scenario(format!("thread pool: {e}")))?;
    let parts: Vec<Accumulator> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(p, r)| points[p].run_replication(r))
            .collect::<Result<_, _>>()
    })?;
    let mut results = Vec::with_capacity(points.len());
    for (p, chunk) in parts.chunks(reps as usize).enumerate() {
        let mut acc = chunk[0].clone();
        for part in &chunk[1..] {
            acc.merge(part);
        }
        let point = points[p].clone();
        let stats = acc.finish(point.config.arrival.rate);
        results.push(PointResult { point, stats });
    }
    Ok(results)
}

pub fn to_csv(results: &[PointResult]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in results {
        w.serialize(r.row()).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
}

/// Two-column `rho mean_response` series, one per (sweep block, policy).
pub fn plot_series(results: &[PointResult]) -> Vec<(String, String)> {
    let mut files: Vec<(String, String)> = Vec::new();
    for r in results {
        let row = r.row();
        let mut label = row.policy.clone();
        if let Some(t) = row.t {
            let _ = write!(label, "_T{t}");
        }
        let file = format!(
            "block{}_{}.dat",
            r.point.block,
            label
                .chars()
                .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
                .collect::<String>()
        );
        let line = format!("{} {}\n", row.rho, row.mean_response);
        match files.iter_mut().find(|f| f.0 == file) {
            Some(f) => f.1.push_str(&line),
            None => files.push((file, format!("# rho mean_response ({})\n{line}", row.policy))),
        }
    }
    files
}

/// Writes `<name>.csv` (and plot files when asked) into `dir`.
pub fn write_outputs(scenario: &Scenario, results: &[PointResult], dir: &Path, plot: bool) -> std::io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let csv_path = dir.join(format!("{}.csv", scenario.name));
    fs::write(&csv_path, to_csv(results))?;
    written.push(csv_path);
    if plot {
        for (file, body) in plot_series(results) {
            let path = dir.join(format!("{}_{file}", scenario.name));
            fs::write(&path, body)?;
            written.push(path);
        }
    }
    Ok(written)
}
