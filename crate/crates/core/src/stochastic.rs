//! Bounded i.i.d. arrival and service samplers.
//!
//! Every sampler is built from a validated spec and carries its exact first two
//! moments and its hard upper bound, so heavy-traffic constants can be computed
//! from the law actually sampled rather than from nominal rates.

use rand::distr::{Bernoulli, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Poisson;
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

/// Smallest truncation point used for Poisson laws.
pub const DEFAULT_POISSON_CAP: u32 = 64;

/// Largest tail mass tolerated when the truncation point is chosen automatically.
const POISSON_TAIL_TOLERANCE: f64 = 1e-15;

/// Shape of the per-slot arrival batch; the rate is supplied separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum ArrivalLaw {
    /// Poisson clamped at `cap` (mass above the cap is moved onto it).
    Poisson {
        #[serde(default)]
        cap: Option<u32>,
    },
    /// Exactly `rate` jobs every slot; the rate must be an integer.
    Constant,
    /// `value` jobs with probability `rate / value`, otherwise none.
    TwoPoint { value: u32 },
    /// Zero with fixed probability `p0`; otherwise a batch whose size straddles
    /// `rate / (1 - p0)` so the mean is exactly `rate`.
    ClassA { p0: f64 },
}

impl ArrivalLaw {
    pub fn label(&self) -> &'static str {
        match self {
            ArrivalLaw::Poisson { .. } => "poisson",
            ArrivalLaw::Constant => "constant",
            ArrivalLaw::TwoPoint { .. } => "two_point",
            ArrivalLaw::ClassA { .. } => "class_a",
        }
    }
}

/// Total exogenous arrivals per slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrivalSpec {
    pub rate: f64,
    #[serde(flatten)]
    pub law: ArrivalLaw,
}

impl ArrivalSpec {
    pub fn new(law: ArrivalLaw, rate: f64) -> Self {
        Self { rate, law }
    }

    pub fn poisson(rate: f64) -> Self {
        Self::new(ArrivalLaw::Poisson { cap: None }, rate)
    }

    pub fn sampler(&self) -> Result<Sampler, ConfigError> {
        let rate = self.rate;
        if !(rate.is_finite() && rate >= 0.0) {
            return Err(ConfigError::Arrival(format!(
                "rate must be finite and nonnegative, got {rate}"
            )));
        }
        match &self.law {
            ArrivalLaw::Poisson { cap } => {
                Sampler::poisson(rate, *cap).map_err(ConfigError::Arrival)
            }
            ArrivalLaw::Constant => Sampler::constant(rate).map_err(ConfigError::Arrival),
            ArrivalLaw::TwoPoint { value } => {
                Sampler::two_point(*value, rate).map_err(ConfigError::Arrival)
            }
            ArrivalLaw::ClassA { p0 } => class_a(*p0, rate),
        }
    }
}

/// The variance floor a class-A arrival law must exceed: `8 / p0 - 4`.
pub fn class_a_variance_floor(p0: f64) -> f64 {
    8.0 / p0 - 4.0
}

fn class_a(p0: f64, rate: f64) -> Result<Sampler, ConfigError> {
    if !(p0 > 0.0 && p0 < 1.0) {
        return Err(ConfigError::Arrival(format!(
            "class_a p0 must lie in (0, 1), got {p0}"
        )));
    }
    if rate <= 0.0 {
        return Err(ConfigError::Arrival("class_a needs a positive rate".into()));
    }
    let busy = 1.0 - p0;
    let level = rate / busy;
    let lo = level.floor();
    let frac = level - lo;
    let mut atoms = vec![(0u32, p0)];
    if frac < 1e-12 {
        atoms.push((lo as u32, busy));
    } else {
        if lo < 1.0 {
            return Err(ConfigError::Arrival(format!(
                "class_a rate {rate} is too small for p0 = {p0}"
            )));
        }
        atoms.push((lo as u32, busy * (1.0 - frac)));
        atoms.push((lo as u32 + 1, busy * frac));
    }
    let sampler = Sampler::finite(&atoms).map_err(ConfigError::Arrival)?;
    let floor = class_a_variance_floor(p0);
    if sampler.variance() <= floor {
        return Err(ConfigError::Arrival(format!(
            "class_a variance {:.4} does not exceed 8/p0 - 4 = {floor:.4}",
            sampler.variance()
        )));
    }
    Ok(sampler)
}

/// Service law shared by all servers; each server's mean is its rate `mu_n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case", deny_unknown_fields)]
pub enum ServiceSpec {
    Poisson {
        #[serde(default)]
        cap: Option<u32>,
    },
    /// Exactly `mu_n` jobs per slot; rates must be integers.
    Constant,
    /// Server `n` offers `peaks[n]` with probability `mu_n / peaks[n]`, else 0.
    /// A single entry applies to every server.
    TwoPoint { peaks: Vec<u32> },
}

impl ServiceSpec {
    pub fn label(&self) -> &'static str {
        match self {
            ServiceSpec::Poisson { .. } => "poisson",
            ServiceSpec::Constant => "constant",
            ServiceSpec::TwoPoint { .. } => "two_point",
        }
    }

    pub fn samplers(&self, mu: &[f64]) -> Result<Vec<Sampler>, ConfigError> {
        mu.iter()
            .enumerate()
            .map(|(n, &rate)| {
                let built = match self {
                    ServiceSpec::Poisson { cap } => Sampler::poisson(rate, *cap),
                    ServiceSpec::Constant => Sampler::constant(rate),
                    ServiceSpec::TwoPoint { peaks } => {
                        let peak = match peaks.len() {
                            1 => peaks[0],
                            len if len == mu.len() => peaks[n],
                            len => {
                                return Err(ConfigError::Service(format!(
                                    "two_point needs 1 or {} peaks, got {len}",
                                    mu.len()
                                )))
                            }
                        };
                        Sampler::two_point(peak, rate)
                    }
                };
                built.map_err(|e| ConfigError::Service(format!("server {n}: {e}")))
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
enum Law {
    Poisson { dist: Option<Poisson<f64>>, cap: u32 },
    Constant(u32),
    TwoPoint { value: u32, coin: Bernoulli },
    Finite { values: Vec<u32>, cumulative: Vec<f64> },
}

/// A validated bounded sampler with its exact mean, variance and bound.
#[derive(Debug, Clone)]
pub struct Sampler {
    law: Law,
    mean: f64,
    variance: f64,
    bound: u32,
}

impl Sampler {
    /// Poisson(`rate`) clamped at `cap`. Without an explicit cap the smallest
    /// cap ≥ 64 leaving tail mass below 1e-15 is used.
    pub fn poisson(rate: f64, cap: Option<u32>) -> Result<Self, String> {
        if !(rate.is_finite() && rate >= 0.0) {
            return Err(format!("poisson rate must be finite and nonnegative, got {rate}"));
        }
        let cap = match cap {
            Some(0) => return Err("poisson cap must be positive".into()),
            Some(c) => c,
            None => auto_poisson_cap(rate),
        };
        let (mean, variance) = truncated_poisson_moments(rate, cap);
        let dist = if rate > 0.0 {
            Some(Poisson::new(rate).map_err(|e| format!("poisson({rate}): {e}"))?)
        } else {
            None
        };
        Ok(Self {
            law: Law::Poisson { dist, cap },
            mean,
            variance,
            bound: cap,
        })
    }

    pub fn constant(value: f64) -> Result<Self, String> {
        if value < 0.0 || value.fract() != 0.0 || value > u32::MAX as f64 {
            return Err(format!("constant law needs a nonnegative integer, got {value}"));
        }
        let v = value as u32;
        Ok(Self {
            law: Law::Constant(v),
            mean: value,
            variance: 0.0,
            bound: v,
        })
    }

    /// `value` with probability `mean / value`, else 0.
    pub fn two_point(value: u32, mean: f64) -> Result<Self, String> {
        if value == 0 {
            return Err("two_point value must be positive".into());
        }
        let p = mean / value as f64;
        if !(0.0..=1.0).contains(&p) {
            return Err(format!(
                "two_point mean {mean} is not reachable with value {value}"
            ));
        }
        let coin = Bernoulli::new(p).map_err(|e| e.to_string())?;
        let v = value as f64;
        Ok(Self {
            law: Law::TwoPoint { value, coin },
            mean: p * v,
            variance: p * (1.0 - p) * v * v,
            bound: value,
        })
    }

    /// Finite law over `(value, probability)` atoms.
    pub fn finite(atoms: &[(u32, f64)]) -> Result<Self, String> {
        if atoms.is_empty() {
            return Err("finite law needs at least one atom".into());
        }
        let total: f64 = atoms.iter().map(|a| a.1).sum();
        if atoms.iter().any(|a| a.1 < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(format!("finite law probabilities must sum to 1, got {total}"));
        }
        let mut acc = 0.0;
        let cumulative = atoms
            .iter()
            .map(|a| {
                acc += a.1 / total;
                acc
            })
            .collect();
        let mean: f64 = atoms.iter().map(|&(v, p)| v as f64 * p).sum();
        let second: f64 = atoms.iter().map(|&(v, p)| (v as f64).powi(2) * p).sum();
        Ok(Self {
            law: Law::Finite {
                values: atoms.iter().map(|a| a.0).collect(),
                cumulative,
            },
            mean,
            variance: second - mean * mean,
            bound: atoms.iter().map(|a| a.0).max().unwrap_or(0),
        })
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn bound(&self) -> u32 {
        self.bound
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        match &self.law {
            Law::Poisson { dist: None, .. } => 0,
            Law::Poisson {
                dist: Some(dist),
                cap,
            } => {
                let x: f64 = dist.sample(rng);
                if x >= *cap as f64 {
                    *cap
                } else {
                    x as u32
                }
            }
            Law::Constant(v) => *v,
            Law::TwoPoint { value, coin } => {
                if coin.sample(rng) {
                    *value
                } else {
                    0
                }
            }
            Law::Finite { values, cumulative } => {
                let u: f64 = rng.random();
                let idx = cumulative
                    .iter()
                    .position(|&c| u < c)
                    .unwrap_or(values.len() - 1);
                values[idx]
            }
        }
    }
}

fn ln_poisson_pmf(rate: f64, k: u32) -> f64 {
    let ln_fact: f64 = (1..=k).map(|i| (i as f64).ln()).sum();
    -rate + k as f64 * rate.ln() - ln_fact
}

/// Smallest cap ≥ [`DEFAULT_POISSON_CAP`] whose upper tail is below 1e-15.
pub fn auto_poisson_cap(rate: f64) -> u32 {
    if rate <= 0.0 {
        return DEFAULT_POISSON_CAP;
    }
    let mut cap = DEFAULT_POISSON_CAP;
    while poisson_upper_tail(rate, cap) >= POISSON_TAIL_TOLERANCE {
        cap += 1;
    }
    cap
}

/// P(X > cap) for X ~ Poisson(rate), summed directly over the tail.
pub fn poisson_upper_tail(rate: f64, cap: u32) -> f64 {
    if rate <= 0.0 {
        return 0.0;
    }
    let mut k = cap + 1;
    let mut term = ln_poisson_pmf(rate, k).exp();
    let mut total = 0.0;
    loop {
        total += term;
        k += 1;
        term *= rate / k as f64;
        if (k as f64) > rate && (term == 0.0 || term <= total * 1e-18) {
            break;
        }
    }
    total
}

/// Mean and variance of min(X, cap) for X ~ Poisson(rate).
pub fn truncated_poisson_moments(rate: f64, cap: u32) -> (f64, f64) {
    if rate <= 0.0 {
        return (0.0, 0.0);
    }
    let mut mean = 0.0;
    let mut second = 0.0;
    for k in 0..cap {
        let p = ln_poisson_pmf(rate, k).exp();
        mean += k as f64 * p;
        second += (k as f64).powi(2) * p;
    }
    let top = poisson_upper_tail(rate, cap - 1);
    let c = cap as f64;
    mean += c * top;
    second += c * c * top;
    (mean, second - mean * mean)
}

/// Independent random stream for one consumer of one replication.
///
/// Streams with distinct `(replication, stream)` pairs never overlap; identical
/// triples reproduce identical sequences.
pub fn stream_rng(seed: u64, replication: u32, stream: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((replication as u64) << 32) | stream as u64);
    rng
}

/// Stream ids used by a run.
pub mod streams {
    pub const ARRIVALS: u32 = 0;
    pub const POLICY: u32 = 1;
    /// Server `n` draws its service from stream `SERVICE_BASE + n`.
    pub const SERVICE_BASE: u32 = 16;
}
