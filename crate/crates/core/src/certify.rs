//! Tilt certification over sampled queue states.
//!
//! Each state runs the closed-form distribution through tie canonicalization,
//! classification and every applicable drift inequality. Threshold policies
//! are evaluated on refresh slots, where the memory law is known exactly, and
//! additionally on the one-short-queue states that minimize their witness.

use std::fmt;

use rand::Rng;

use crate::error::AnalysisError;
use crate::policy::PolicySpec;
use crate::stochastic::stream_rng;
use crate::tilt::{
    canonicalize_ties, classify, drift_violations, jbt_avg_memory_distribution, jbt_refresh_memory_distribution,
    jbt_witness_bound, jbtg_witness_bound, one_short_state, theoretical_distribution, DriftCheck, Verdict,
};

/// Upper ends of the uniform queue-length ranges cycled through by the
/// sampled states; small ranges produce many ties.
const LENGTH_RANGES: [u64; 4] = [2, 5, 30, 500];

#[derive(Debug, Clone, PartialEq)]
pub struct CertifyRequest {
    pub policy: PolicySpec,
    pub mu: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    /// Load ρ at which drift inequalities are evaluated.
    pub load: f64,
}

impl CertifyRequest {
    pub fn homogeneous(policy: PolicySpec, n: usize, trials: usize) -> Self {
        Self {
            policy,
            mu: vec![1.0; n],
            trials,
            seed: 1,
            load: 0.95,
        }
    }
}

/// Counts over one family of states.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StateSummary {
    pub states: usize,
    pub tilted: usize,
    pub delta_tilted: usize,
    /// Smallest witness among δ-tilted states.
    pub min_witness: Option<f64>,
    pub violations: Vec<(Vec<u64>, DriftCheck)>,
}

impl StateSummary {
    fn add(&mut self, verdict: Verdict, witness: f64, q: &[u64], failed: Vec<DriftCheck>) {
        self.states += 1;
        if verdict != Verdict::NotTilted {
            self.tilted += 1;
        }
        if verdict == Verdict::DeltaTilted {
            self.delta_tilted += 1;
            self.min_witness = Some(self.min_witness.map_or(witness, |w| w.min(witness)));
        }
        for f in failed {
            self.violations.push((q.to_vec(), f));
        }
    }

    pub fn tilted_fraction(&self) -> f64 {
        self.tilted as f64 / self.states.max(1) as f64
    }

    pub fn delta_tilted_fraction(&self) -> f64 {
        self.delta_tilted as f64 / self.states.max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CertifyReport {
    pub policy: String,
    pub servers: usize,
    pub sampled: StateSummary,
    /// One-short-queue states, threshold policies only.
    pub worst_case: Option<StateSummary>,
    /// Known lower bound on the worst-case witness, when one applies.
    pub worst_case_bound: Option<f64>,
}

impl CertifyReport {
    pub fn violation_count(&self) -> usize {
        self.sampled.violations.len() + self.worst_case.as_ref().map_or(0, |w| w.violations.len())
    }
}

fn fmt_witness(w: Option<f64>) -> String {
    w.map_or("-".to_string(), |w| format!("{w:.6}"))
}

impl fmt::Display for CertifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "policy {} on {} servers", self.policy, self.servers)?;
        let s = &self.sampled;
        writeln!(
            f,
            "sampled states: {}  tilted {:.1}%  delta-tilted {:.1}%  min witness {}",
            s.states,
            100.0 * s.tilted_fraction(),
            100.0 * s.delta_tilted_fraction(),
            fmt_witness(s.min_witness)
        )?;
        if let Some(w) = &self.worst_case {
            write!(
                f,
                "one-short states: {}  delta-tilted {:.1}%  min witness {}",
                w.states,
                100.0 * w.delta_tilted_fraction(),
                fmt_witness(w.min_witness)
            )?;
            match self.worst_case_bound {
                Some(b) => writeln!(f, "  bound {b:.6}")?,
                None => writeln!(f)?,
            }
        }
        writeln!(f, "drift inequality violations: {}", self.violation_count())?;
        for (q, check) in self.sampled.violations.iter().take(5) {
            writeln!(f, "  {check:?} at {q:?}")?;
        }
        Ok(())
    }
}

fn memory_stats(spec: &PolicySpec, q: &[u64]) -> Option<Vec<f64>> {
    match *spec {
        PolicySpec::Jbt { d, .. } | PolicySpec::Jbtg { d, .. } => Some(jbt_refresh_memory_distribution(q, d)),
        PolicySpec::JbtAvg { .. } => Some(jbt_avg_memory_distribution(q)),
        _ => None,
    }
}

fn evaluate(req: &CertifyRequest, q: &[u64], summary: &mut StateSummary) -> Result<(), AnalysisError> {
    let stats = memory_stats(&req.policy, q);
    let dist = theoretical_distribution(&req.policy, q, &req.mu, stats.as_deref())?;
    let canonical = canonicalize_ties(&dist);
    let class = classify(&canonical, &req.mu);
    let lambda = req.load * req.mu.iter().sum::<f64>();
    let failed = drift_violations(&canonical, &req.mu, lambda, &class);
    summary.add(class.verdict, class.delta_witness, q, failed);
    Ok(())
}

/// Classifies `trials` random states, plus the one-short states for
/// threshold policies.
pub fn certify(req: &CertifyRequest) -> Result<CertifyReport, AnalysisError> {
    let n = req.mu.len();
    match req.policy {
        PolicySpec::Jsq
        | PolicySpec::PowerOfD { .. }
        | PolicySpec::Random
        | PolicySpec::WeightedRandom
        | PolicySpec::Jbt { .. }
        | PolicySpec::Jbtg { .. }
        | PolicySpec::JbtAvg { .. } => {}
        _ => return Err(AnalysisError::Unsupported(req.policy.label())),
    }
    if n == 0 || req.mu.iter().any(|&m| !(m > 0.0 && m.is_finite())) {
        return Err(AnalysisError::Dimension {
            queues: n,
            rates: req.mu.len(),
        });
    }
    req.policy.validate(n)?;
    let mut rng = stream_rng(req.seed, 0, 0);
    let mut sampled = StateSummary::default();
    let mut q = vec![0u64; n];
    for trial in 0..req.trials {
        let range = LENGTH_RANGES[trial % LENGTH_RANGES.len()];
        for x in q.iter_mut() {
            *x = rng.random_range(0..=range);
        }
        evaluate(req, &q, &mut sampled)?;
    }
    let threshold = req.policy.refresh_interval().is_some();
    let worst_case = if threshold {
        let mut summary = StateSummary::default();
        for short in 0..n {
            for long in [1, 5, 50] {
                evaluate(req, &one_short_state(n, short, long), &mut summary)?;
            }
        }
        Some(summary)
    } else {
        None
    };
    let homogeneous = req.mu.iter().all(|&m| m == req.mu[0]);
    let worst_case_bound = match req.policy {
        PolicySpec::Jbt { d, .. } if homogeneous => Some(jbt_witness_bound(n, d)),
        PolicySpec::Jbtg { d, .. } => Some(jbtg_witness_bound(&req.mu, d)),
        _ => None,
    };
    Ok(CertifyReport {
        policy: req.policy.label(),
        servers: n,
        sampled,
        worst_case,
        worst_case_bound,
    })
}
