//! Resource-pooled single-server comparator.
//!
//! One FCFS queue receives every arrival and is served by the summed service
//! of all servers. Sharing the arrival and per-server service streams with an
//! N-queue run makes its queue a pathwise lower bound on the total queue.

use rayon::prelude::*;

use crate::engine::{Engine, InstabilityGuard, Streams};
use crate::error::ConfigError;
use crate::metrics::{Accumulator, RunStatistics};
use crate::model::{Departure, Fifo, SlotOutcome, SystemConfig};

/// Policy label used in output tables.
pub const POOLED_LABEL: &str = "POOLED";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PooledState {
    pub q: u64,
    /// Unused service of the last slot.
    pub u: u64,
}

/// q' = max(q + a − s, 0) and u = max(s − q − a, 0).
pub fn pooled_step(state: PooledState, arrivals: u64, service: u64) -> PooledState {
    let avail = state.q + arrivals;
    PooledState {
        q: avail.saturating_sub(service),
        u: service.saturating_sub(avail),
    }
}

/// One pooled replication driven by the same streams as the N-queue run of
/// `config` with the same `replication` index.
pub fn pooled_replication(config: &SystemConfig, replication: u32) -> Result<Accumulator, ConfigError> {
    let setup = config.build()?;
    let mut streams = Streams::new(config.seed, replication, config.servers());
    let warmup = config.warmup_slots();
    let measured = config.horizon - warmup;
    let mut acc = Accumulator::new(config.batches);
    let mut guard = InstabilityGuard::new(config.horizon, config.instability_ratio);
    let mut state = PooledState::default();
    let mut fifo = Fifo::default();
    let mut out = SlotOutcome::default();
    for t in 0..config.horizon {
        let a = setup.arrival.sample(&mut streams.arrivals) as u64;
        let s: u64 = setup
            .services
            .iter()
            .zip(streams.services.iter_mut())
            .map(|(law, rng)| law.sample(rng) as u64)
            .sum();
        out.clear();
        out.t = t;
        out.a_total = a;
        if a > 0 {
            out.dest = Some(0);
            fifo.push(t, a);
        }
        state = pooled_step(state, a, s);
        out.services.push(s);
        out.unused.push(state.u);
        let departures = &mut out.departures;
        fifo.serve(s, t, |response, count| {
            departures.push(Departure {
                server: 0,
                response,
                count,
            })
        });
        debug_assert_eq!(fifo.len(), state.q);
        guard.observe(t, state.q);
        if t >= warmup {
            let batch = ((t - warmup) as u128 * config.batches as u128 / measured as u128) as usize;
            acc.record(batch, &out, state.q);
        }
    }
    acc.unstable_suspect = guard.unstable();
    Ok(acc)
}

pub fn pooled_accumulated(config: &SystemConfig, replications: u32) -> Result<Accumulator, ConfigError> {
    config.validate()?;
    if replications == 0 {
        return Err(ConfigError::NotPositive {
            what: "replications",
        });
    }
    let parts: Vec<Accumulator> = (0..replications)
        .into_par_iter()
        .map(|r| pooled_replication(config, r))
        .collect::<Result<_, _>>()?;
    let mut iter = parts.into_iter();
    let mut acc = iter.next().expect("at least one replication");
    for part in iter {
        acc.merge(&part);
    }
    Ok(acc)
}

/// Pooled counterpart of [`crate::engine::run_replications`]; the policy of
/// `config` is ignored.
pub fn pooled_run(config: &SystemConfig, replications: u32) -> Result<RunStatistics, ConfigError> {
    Ok(pooled_accumulated(config, replications)?.finish(config.arrival.rate))
}

/// Post-warmup sums of a policy run and its pooled comparator stepped in lockstep.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CoupledSums {
    pub slots: u64,
    pub total_queue: u128,
    /// Σ_t (ΣQ(t+1) − q(t+1)); nonnegative slot by slot.
    pub gap: u128,
    /// Σ_t u(t)² of the pooled queue.
    pub pooled_unused_sq: u128,
}

impl CoupledSums {
    pub fn merge(&mut self, other: &CoupledSums) {
        self.slots += other.slots;
        self.total_queue += other.total_queue;
        self.gap += other.gap;
        self.pooled_unused_sq += other.pooled_unused_sq;
    }

    pub fn mean_total_queue(&self) -> f64 {
        self.total_queue as f64 / self.slots as f64
    }

    pub fn mean_gap(&self) -> f64 {
        self.gap as f64 / self.slots as f64
    }

    /// Mean total queue estimated as the pooled mean plus the coupled gap.
    ///
    /// The pooled mean comes from its stationary second-moment identity
    /// 2ε E[q] = ζ − E[u²], which needs only the per-slot u², so the slowly
    /// mixing queue level drops out of the estimate. `zeta` is
    /// σ_Σ² + ν_Σ² + ε².
    pub fn control_variate_queue(&self, epsilon: f64, zeta: f64) -> f64 {
        let u_sq = self.pooled_unused_sq as f64 / self.slots as f64;
        (zeta - u_sq) / (2.0 * epsilon) + self.mean_gap()
    }
}

/// Runs `config` and its pooled comparator on shared streams.
pub fn coupled_replication(config: &SystemConfig, replication: u32) -> Result<CoupledSums, ConfigError> {
    let mut engine = Engine::new(config, replication)?;
    let warmup = config.warmup_slots();
    let mut pooled = PooledState::default();
    let mut sums = CoupledSums::default();
    for t in 0..config.horizon {
        let out = engine.step();
        pooled = pooled_step(pooled, out.a_total, out.services.iter().sum());
        if t >= warmup {
            let total = engine.state.queues.total();
            sums.slots += 1;
            sums.total_queue += total as u128;
            sums.gap += (total - pooled.q) as u128;
            sums.pooled_unused_sq += (pooled.u as u128).pow(2);
        }
    }
    Ok(sums)
}

/// Merges `replications` coupled runs in replication order.
pub fn coupled_run(config: &SystemConfig, replications: u32) -> Result<CoupledSums, ConfigError> {
    config.validate()?;
    let parts: Vec<CoupledSums> = (0..replications)
        .into_par_iter()
        .map(|r| coupled_replication(config, r))
        .collect::<Result<_, _>>()?;
    let mut sums = CoupledSums::default();
    for part in &parts {
        sums.merge(part);
    }
    Ok(sums)
}
