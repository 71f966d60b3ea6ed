//! The slotted simulation engine.
//!
//! Each slot runs: sample arrivals, dispatch on Q(t) and m(t), sample
//! services, apply the queue dynamics, then the policy's end-of-slot hooks.

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::ConfigError;
use crate::metrics::{Accumulator, RunStatistics};
use crate::model::{Departure, SlotOutcome, SystemConfig, SystemSetup, SystemState};
use crate::stochastic::{stream_rng, streams};

/// Applies Q_n(t+1) = Q_n + A_n − S_n + U_n in place and writes U(t).
///
/// All `arrivals` go to `dest`; every other queue receives none.
pub fn apply_dynamics(q: &mut [u64], dest: Option<usize>, arrivals: u64, services: &[u64], unused: &mut Vec<u64>) {
    unused.clear();
    for (n, (len, &s)) in q.iter_mut().zip(services).enumerate() {
        let a = if dest == Some(n) { arrivals } else { 0 };
        let avail = *len + a;
        if s >= avail {
            unused.push(s - avail);
            *len = 0;
        } else {
            unused.push(0);
            *len = avail - s;
        }
    }
}

/// Independent random streams of one replication.
#[derive(Debug, Clone)]
pub struct Streams {
    pub arrivals: ChaCha8Rng,
    pub policy: ChaCha8Rng,
    pub services: Vec<ChaCha8Rng>,
}

impl Streams {
    pub fn new(seed: u64, replication: u32, servers: usize) -> Self {
        Self {
            arrivals: stream_rng(seed, replication, streams::ARRIVALS),
            policy: stream_rng(seed, replication, streams::POLICY),
            services: (0..servers)
                .map(|n| stream_rng(seed, replication, streams::SERVICE_BASE + n as u32))
                .collect(),
        }
    }
}

/// A running system: setup, state, random streams and a reusable outcome buffer.
#[derive(Debug, Clone)]
pub struct Engine {
    pub setup: SystemSetup,
    pub state: SystemState,
    streams: Streams,
    outcome: SlotOutcome,
    scratch: Vec<u64>,
}

impl Engine {
    pub fn new(config: &SystemConfig, replication: u32) -> Result<Self, ConfigError> {
        let setup = config.build()?;
        let n = config.servers();
        Ok(Self::from_parts(setup, SystemState::empty(n), Streams::new(config.seed, replication, n)))
    }

    pub fn from_parts(setup: SystemSetup, state: SystemState, streams: Streams) -> Self {
        Self {
            setup,
            state,
            streams,
            outcome: SlotOutcome::default(),
            scratch: Vec::new(),
        }
    }

    /// Advances one slot and returns what happened in it.
    pub fn step(&mut self) -> &SlotOutcome {
        let a = self.setup.arrival.sample(&mut self.streams.arrivals) as u64;
        let mut services = std::mem::take(&mut self.scratch);
        services.clear();
        services.extend(
            self.setup
                .services
                .iter()
                .zip(self.streams.services.iter_mut())
                .map(|(s, rng)| s.sample(rng) as u64),
        );
        self.step_with(a, &services);
        self.scratch = services;
        &self.outcome
    }

    /// Advances one slot with externally supplied arrival and service samples.
    pub fn step_with(&mut self, arrivals: u64, services: &[u64]) -> &SlotOutcome {
        let t = self.state.t;
        let out = &mut self.outcome;
        out.clear();
        out.t = t;
        out.a_total = arrivals;
        if arrivals > 0 {
            let policy = &mut self.setup.policy;
            let mem = &mut self.state.memory;
            out.memory_len = policy.is_pull_based().then(|| mem.len());
            let d = policy.dispatch(&self.state.queues.0, mem, arrivals, &mut self.streams.policy);
            out.dest = Some(d.dest);
            out.push_msgs += d.push_msgs;
            self.state.fifos[d.dest].push(t, arrivals);
        }
        out.services.extend_from_slice(services);
        apply_dynamics(&mut self.state.queues.0, out.dest, arrivals, services, &mut out.unused);
        for (server, fifo) in self.state.fifos.iter_mut().enumerate() {
            let departures = &mut out.departures;
            fifo.serve(services[server], t, |response, count| {
                departures.push(Departure {
                    server,
                    response,
                    count,
                })
            });
        }
        let eos = self.setup.policy.end_of_slot(
            &self.state.queues.0,
            &mut self.state.memory,
            t,
            &mut self.streams.policy,
        );
        out.push_msgs += eos.push_msgs;
        out.pull_msgs += eos.pull_msgs;
        self.state.t += 1;
        &self.outcome
    }
}

/// Flags runs whose mean total queue late in the horizon dwarfs the early mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstabilityGuard {
    pub ratio: f64,
    window: u64,
    horizon: u64,
    early: u128,
    late: u128,
}

impl InstabilityGuard {
    /// Early mean queues below this many jobs are raised to it before comparing.
    pub const FLOOR: f64 = 1.0;

    /// Compares the first and last tenth of `horizon`.
    pub fn new(horizon: u64, ratio: f64) -> Self {
        Self {
            ratio,
            window: (horizon / 10).max(1),
            horizon,
            early: 0,
            late: 0,
        }
    }

    pub fn observe(&mut self, t: u64, total_queue: u64) {
        if t < self.window {
            self.early += total_queue as u128;
        }
        if t >= self.horizon.saturating_sub(self.window) {
            self.late += total_queue as u128;
        }
    }

    pub fn early_mean(&self) -> f64 {
        self.early as f64 / self.window as f64
    }

    pub fn late_mean(&self) -> f64 {
        self.late as f64 / self.window as f64
    }

    pub fn unstable(&self) -> bool {
        self.late_mean() > self.ratio * self.early_mean().max(Self::FLOOR)
    }
}

/// Runs one replication from the empty state and returns its raw sums.
pub fn run_replication(config: &SystemConfig, replication: u32) -> Result<Accumulator, ConfigError> {
    let mut engine = Engine::new(config, replication)?;
    let warmup = config.warmup_slots();
    let measured = config.horizon - warmup;
    let batches = config.batches as u64;
    let mut acc = Accumulator::new(config.batches);
    let mut guard = InstabilityGuard::new(config.horizon, config.instability_ratio);
    let mut total: u64 = 0;
    for t in 0..config.horizon {
        let out = engine.step();
        total = total + out.a_total - out.departed();
        guard.observe(t, total);
        if t >= warmup {
            let batch = (((t - warmup) as u128 * batches as u128) / measured as u128) as usize;
            acc.record(batch, out, total);
        }
    }
    debug_assert_eq!(total, engine.state.queues.total());
    acc.unstable_suspect = guard.unstable();
    Ok(acc)
}

/// Runs `replications` independent replications in parallel and merges them
/// in replication order.
pub fn run_accumulated(config: &SystemConfig, replications: u32) -> Result<Accumulator, ConfigError> {
    config.validate()?;
    if replications == 0 {
        return Err(ConfigError::NotPositive {
            what: "replications",
        });
    }
    let parts: Vec<Accumulator> = (0..replications)
        .into_par_iter()
        .map(|r| run_replication(config, r))
        .collect::<Result<_, _>>()?;
    let mut iter = parts.into_iter();
    let mut acc = iter.next().expect("at least one replication");
    for part in iter {
        acc.merge(&part);
    }
    Ok(acc)
}

pub fn run_replications(config: &SystemConfig, replications: u32) -> Result<RunStatistics, ConfigError> {
    Ok(run_accumulated(config, replications)?.finish(config.arrival.rate))
}

/// Runs a single replication.
pub fn run(config: &SystemConfig) -> Result<RunStatistics, ConfigError> {
    run_replications(config, 1)
}
