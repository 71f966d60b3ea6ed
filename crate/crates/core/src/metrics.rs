//! Online statistics and batch-means confidence intervals.

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{ConfigError, TooFewBatches};
use crate::model::SlotOutcome;

/// Sums over one contiguous batch of measured slots.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BatchRecord {
    pub slots: u64,
    pub queue_sum: u128,
    pub jobs: u64,
    pub response_sum: u128,
}

impl BatchRecord {
    fn merge(&mut self, other: &BatchRecord) {
        self.slots += other.slots;
        self.queue_sum += other.queue_sum;
        self.jobs += other.jobs;
        self.response_sum += other.response_sum;
    }

    pub fn mean_queue(&self) -> f64 {
        ratio(self.queue_sum as f64, self.slots)
    }

    pub fn mean_response(&self) -> f64 {
        ratio(self.response_sum as f64, self.jobs)
    }
}

fn ratio(num: f64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num / den as f64
    }
}

/// Running sums for one or more replications.
///
/// All fields are integer sums, so [`Accumulator::merge`] is exact,
/// associative and commutative: merging replications in any order gives
/// bit-identical statistics.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Accumulator {
    pub replications: u32,
    pub slots: u64,
    /// Σ_t Σ_n Q_n(t+1) over measured slots.
    pub queue_sum: u128,
    pub arrivals: u64,
    /// Measured slots with at least one arrival.
    pub dispatches: u64,
    pub jobs: u64,
    pub response_sum: u128,
    pub push_msgs: u64,
    pub pull_msgs: u64,
    pub unused_sum: u128,
    /// Histogram of the memory size seen at dispatch; empty for memoryless policies.
    pub memory_hist: Vec<u64>,
    pub batches: Vec<BatchRecord>,
    pub unstable_suspect: bool,
}

impl Accumulator {
    pub fn new(batches: usize) -> Self {
        Self {
            replications: 1,
            batches: vec![BatchRecord::default(); batches],
            ..Self::default()
        }
    }

    /// Adds one measured slot. `total_queue` is Σ_n Q_n(t+1).
    pub fn record(&mut self, batch: usize, outcome: &SlotOutcome, total_queue: u64) {
        self.slots += 1;
        self.queue_sum += total_queue as u128;
        self.arrivals += outcome.a_total;
        if outcome.dest.is_some() {
            self.dispatches += 1;
        }
        self.push_msgs += outcome.push_msgs;
        self.pull_msgs += outcome.pull_msgs;
        self.unused_sum += outcome.unused.iter().map(|&u| u as u128).sum::<u128>();
        if let Some(len) = outcome.memory_len {
            if self.memory_hist.len() <= len {
                self.memory_hist.resize(len + 1, 0);
            }
            self.memory_hist[len] += 1;
        }
        let mut jobs = 0;
        let mut response = 0u128;
        for d in &outcome.departures {
            jobs += d.count;
            response += d.response as u128 * d.count as u128;
        }
        self.jobs += jobs;
        self.response_sum += response;
        let b = &mut self.batches[batch];
        b.slots += 1;
        b.queue_sum += total_queue as u128;
        b.jobs += jobs;
        b.response_sum += response;
    }

    pub fn merge(&mut self, other: &Accumulator) {
        self.replications += other.replications;
        self.slots += other.slots;
        self.queue_sum += other.queue_sum;
        self.arrivals += other.arrivals;
        self.dispatches += other.dispatches;
        self.jobs += other.jobs;
        self.response_sum += other.response_sum;
        self.push_msgs += other.push_msgs;
        self.pull_msgs += other.pull_msgs;
        self.unused_sum += other.unused_sum;
        if self.memory_hist.len() < other.memory_hist.len() {
            self.memory_hist.resize(other.memory_hist.len(), 0);
        }
        for (a, b) in self.memory_hist.iter_mut().zip(&other.memory_hist) {
            *a += b;
        }
        if self.batches.len() < other.batches.len() {
            self.batches.resize(other.batches.len(), BatchRecord::default());
        }
        for (a, b) in self.batches.iter_mut().zip(&other.batches) {
            a.merge(b);
        }
        self.unstable_suspect |= other.unstable_suspect;
    }

    /// Summary statistics; `arrival_rate` is the nominal λ_Σ used for the
    /// Little's-law estimate.
    pub fn finish(&self, arrival_rate: f64) -> RunStatistics {
        let mean_total_queue = ratio(self.queue_sum as f64, self.slots);
        let batch_means: Vec<f64> = self.batches.iter().map(BatchRecord::mean_response).collect();
        let batch_queue_means: Vec<f64> = self.batches.iter().map(BatchRecord::mean_queue).collect();
        let total_mem: u64 = self.memory_hist.iter().sum();
        let memory_occupancy = (total_mem > 0).then(|| {
            self.memory_hist
                .iter()
                .map(|&c| c as f64 / total_mem as f64)
                .collect()
        });
        RunStatistics {
            mean_total_queue,
            mean_response_perjob: ratio(self.response_sum as f64, self.jobs),
            mean_response_little: if arrival_rate > 0.0 {
                mean_total_queue / arrival_rate
            } else {
                0.0
            },
            msgs_push_per_arrival: ratio(self.push_msgs as f64, self.dispatches),
            msgs_pull_per_arrival: ratio(self.pull_msgs as f64, self.dispatches),
            ci_halfwidth: batch_ci(&batch_means).ok().map(|c| c.1),
            queue_ci_halfwidth: batch_ci(&batch_queue_means).ok().map(|c| c.1),
            batch_means,
            batch_queue_means,
            slots_simulated: self.slots,
            jobs_completed: self.jobs,
            arrivals: self.arrivals,
            dispatches: self.dispatches,
            mean_unused: ratio(self.unused_sum as f64, self.slots),
            memory_occupancy,
            replications: self.replications,
            unstable_suspect: self.unstable_suspect,
        }
    }
}

/// Time-averaged results of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunStatistics {
    /// Time average of Σ_n Q_n at the end of each measured slot.
    pub mean_total_queue: f64,
    /// Mean of departure slot − arrival slot + 1 over completed jobs.
    pub mean_response_perjob: f64,
    /// `mean_total_queue / λ_Σ`.
    pub mean_response_little: f64,
    /// Push messages per slot with arrivals (each such slot is one dispatch).
    pub msgs_push_per_arrival: f64,
    pub msgs_pull_per_arrival: f64,
    /// 95% half-width of the per-job response time; `None` with fewer than 2 batches.
    pub ci_halfwidth: Option<f64>,
    /// 95% half-width of the mean total queue.
    pub queue_ci_halfwidth: Option<f64>,
    pub batch_means: Vec<f64>,
    pub batch_queue_means: Vec<f64>,
    pub slots_simulated: u64,
    pub jobs_completed: u64,
    pub arrivals: u64,
    pub dispatches: u64,
    /// Time average of Σ_n U_n.
    pub mean_unused: f64,
    /// Empirical law of the memory size seen at dispatch, indexed by size.
    pub memory_occupancy: Option<Vec<f64>>,
    pub replications: u32,
    pub unstable_suspect: bool,
}

impl RunStatistics {
    pub fn msgs_per_arrival(&self) -> f64 {
        self.msgs_push_per_arrival + self.msgs_pull_per_arrival
    }
}

/// Mean and 95% Student-t half-width over batch means.
pub fn batch_ci(batch_means: &[f64]) -> Result<(f64, f64), TooFewBatches> {
    let n = batch_means.len();
    if n < 2 {
        return Err(TooFewBatches(n));
    }
    let mean = batch_means.iter().sum::<f64>() / n as f64;
    let var = batch_means.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("positive degrees of freedom")
        .inverse_cdf(0.975);
    Ok((mean, t * (var / n as f64).sqrt()))
}

/// Heavy-traffic diagnostics ε·E[ΣQ] against ζ/2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeavyTrafficPoint {
    /// Capacity gap μ_Σ − λ_Σ.
    pub epsilon: f64,
    pub scaled_queue: f64,
    /// (σ_Σ² + ν_Σ² + ε²) / 2.
    pub zeta_half: f64,
    pub ratio: f64,
}

/// Builds the heavy-traffic point from the exact moments of the sampled laws.
pub fn heavy_traffic_point(
    arrival_mean: f64,
    arrival_variance: f64,
    service_mean: f64,
    service_variance: f64,
    mean_total_queue: f64,
) -> Result<HeavyTrafficPoint, ConfigError> {
    let epsilon = service_mean - arrival_mean;
    if !(epsilon > 0.0) {
        return Err(ConfigError::Capacity {
            lambda: arrival_mean,
            mu_total: service_mean,
        });
    }
    let zeta_half = (arrival_variance + service_variance + epsilon * epsilon) / 2.0;
    let scaled_queue = epsilon * mean_total_queue;
    Ok(HeavyTrafficPoint {
        epsilon,
        scaled_queue,
        zeta_half,
        ratio: scaled_queue / zeta_half,
    })
}
