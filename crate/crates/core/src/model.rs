//! System configuration and per-slot state.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::policy::{MemoryState, Policy, PolicySpec};
use crate::stochastic::{ArrivalSpec, Sampler, ServiceSpec};

/// Default number of batches for batch-means intervals.
pub const DEFAULT_BATCHES: usize = 30;

/// Default ratio of late to early mean total queue that flags a run as unstable.
pub const DEFAULT_INSTABILITY_RATIO: f64 = 5.0;

fn default_batches() -> usize {
    DEFAULT_BATCHES
}

fn default_instability_ratio() -> f64 {
    DEFAULT_INSTABILITY_RATIO
}

/// Complete description of one simulated system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    /// Service rate of each server; the server count is `mu.len()`.
    pub mu: Vec<f64>,
    pub arrival: ArrivalSpec,
    pub service: ServiceSpec,
    pub policy: PolicySpec,
    pub horizon: u64,
    pub seed: u64,
    /// Slots excluded from statistics; defaults to a tenth of the horizon.
    #[serde(default)]
    pub warmup: Option<u64>,
    #[serde(default = "default_batches")]
    pub batches: usize,
    /// Late/early mean-queue ratio above which a run is flagged unstable.
    #[serde(default = "default_instability_ratio")]
    pub instability_ratio: f64,
    /// Reject configurations whose arrival rate reaches the total capacity.
    #[serde(default)]
    pub stable_regime: bool,
}

impl SystemConfig {
    /// Homogeneous servers with Poisson arrivals and services.
    pub fn poisson(n: usize, rate: f64, lambda: f64, policy: PolicySpec, horizon: u64, seed: u64) -> Self {
        Self {
            mu: vec![rate; n],
            arrival: ArrivalSpec::poisson(lambda),
            service: ServiceSpec::Poisson { cap: None },
            policy,
            horizon,
            seed,
            warmup: None,
            batches: DEFAULT_BATCHES,
            instability_ratio: DEFAULT_INSTABILITY_RATIO,
            stable_regime: false,
        }
    }

    pub fn servers(&self) -> usize {
        self.mu.len()
    }

    pub fn mu_total(&self) -> f64 {
        self.mu.iter().sum()
    }

    /// Load ρ = λ_Σ / μ_Σ.
    pub fn load(&self) -> f64 {
        self.arrival.rate / self.mu_total()
    }

    pub fn warmup_slots(&self) -> u64 {
        self.warmup.unwrap_or(self.horizon / 10)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.build().map(|_| ())
    }

    /// Validates the configuration and builds its samplers and policy.
    pub fn build(&self) -> Result<SystemSetup, ConfigError> {
        if self.mu.is_empty() {
            return Err(ConfigError::NoServers);
        }
        for (server, &rate) in self.mu.iter().enumerate() {
            if !(rate.is_finite() && rate > 0.0) {
                return Err(ConfigError::BadServiceRate { server, rate });
            }
        }
        if self.horizon == 0 {
            return Err(ConfigError::NotPositive { what: "horizon" });
        }
        if self.batches == 0 {
            return Err(ConfigError::NotPositive { what: "batches" });
        }
        if !(self.instability_ratio > 0.0) {
            return Err(ConfigError::NotPositive {
                what: "instability_ratio",
            });
        }
        let warmup = self.warmup_slots();
        if warmup >= self.horizon {
            return Err(ConfigError::Warmup {
                warmup,
                horizon: self.horizon,
            });
        }
        let arrival = self.arrival.sampler()?;
        let services = self.service.samplers(&self.mu)?;
        if self.stable_regime && arrival.mean() >= self.mu_total() {
            return Err(ConfigError::Capacity {
                lambda: arrival.mean(),
                mu_total: self.mu_total(),
            });
        }
        let policy = Policy::new(self.policy.clone(), &self.mu)?;
        Ok(SystemSetup {
            arrival,
            services,
            policy,
        })
    }
}

/// Samplers and dispatcher built from a validated [`SystemConfig`].
#[derive(Debug, Clone)]
pub struct SystemSetup {
    pub arrival: Sampler,
    pub services: Vec<Sampler>,
    pub policy: Policy,
}

impl SystemSetup {
    /// Variance of the total offered service, ν_Σ².
    pub fn service_variance(&self) -> f64 {
        self.services.iter().map(Sampler::variance).sum()
    }

    pub fn service_mean(&self) -> f64 {
        self.services.iter().map(Sampler::mean).sum()
    }
}

/// Queue lengths Q(t), one per server.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct QueueVector(pub Vec<u64>);

impl QueueVector {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.0.iter().sum()
    }

    pub fn as_slice(&self) -> &[u64] {
        &self.0
    }
}

impl From<Vec<u64>> for QueueVector {
    fn from(v: Vec<u64>) -> Self {
        Self(v)
    }
}

/// Jobs waiting at one server, stored as runs of equal arrival slots.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Fifo {
    runs: VecDeque<(u64, u64)>,
    len: u64,
}

impl Fifo {
    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn push(&mut self, slot: u64, count: u64) {
        if count == 0 {
            return;
        }
        match self.runs.back_mut() {
            Some((s, c)) if *s == slot => *c += count,
            _ => self.runs.push_back((slot, count)),
        }
        self.len += count;
    }

    /// Removes up to `count` jobs from the head at slot `now`, reporting each
    /// run as `(response, jobs)` with response `now - arrival + 1`.
    pub fn serve(&mut self, mut count: u64, now: u64, mut depart: impl FnMut(u64, u64)) {
        while count > 0 {
            let Some((slot, run)) = self.runs.front_mut() else {
                break;
            };
            let take = count.min(*run);
            depart(now - *slot + 1, take);
            *run -= take;
            count -= take;
            self.len -= take;
            if *run == 0 {
                self.runs.pop_front();
            }
        }
    }
}

/// Z(t): queue lengths plus the dispatcher memory.
#[derive(Debug, Clone)]
pub struct SystemState {
    pub t: u64,
    pub queues: QueueVector,
    pub memory: MemoryState,
    pub fifos: Vec<Fifo>,
}

impl SystemState {
    pub fn empty(n: usize) -> Self {
        Self {
            t: 0,
            queues: QueueVector::zeros(n),
            memory: MemoryState::new(n),
            fifos: vec![Fifo::default(); n],
        }
    }

    /// A state with `q[n]` jobs at server `n`, all stamped as arriving in slot 0.
    pub fn with_queues(q: &[u64]) -> Self {
        let mut state = Self::empty(q.len());
        for (n, &len) in q.iter().enumerate() {
            state.queues.0[n] = len;
            state.fifos[n].push(0, len);
        }
        state
    }

    /// Queue lengths agree with the FIFO contents.
    pub fn is_consistent(&self) -> bool {
        self.queues
            .0
            .iter()
            .zip(&self.fifos)
            .all(|(&q, f)| q == f.len())
    }
}

/// A batch of jobs that left one server in the same slot with the same
/// response time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Departure {
    pub server: usize,
    pub response: u64,
    pub count: u64,
}

/// Everything that happened in one slot.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SlotOutcome {
    pub t: u64,
    /// A_Σ(t).
    pub a_total: u64,
    /// Destination queue; `None` when nothing arrived.
    pub dest: Option<usize>,
    /// Offered service S_n(t).
    pub services: Vec<u64>,
    /// Unused service U_n(t).
    pub unused: Vec<u64>,
    pub push_msgs: u64,
    pub pull_msgs: u64,
    pub departures: Vec<Departure>,
    /// |m(t)| seen by the dispatcher, recorded on slots with arrivals.
    pub memory_len: Option<usize>,
}

impl SlotOutcome {
    pub fn clear(&mut self) {
        self.t = 0;
        self.a_total = 0;
        self.dest = None;
        self.services.clear();
        self.unused.clear();
        self.push_msgs = 0;
        self.pull_msgs = 0;
        self.departures.clear();
        self.memory_len = None;
    }

    pub fn departed(&self) -> u64 {
        self.departures.iter().map(|d| d.count).sum()
    }
}
