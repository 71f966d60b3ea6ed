//! Dispatching policies.
//!
//! Push-based policies (JSQ, power-of-d and its memory variant) probe servers on
//! every slot with arrivals and pay two messages per probed server. Pull-based
//! policies (JIQ and the join-below-threshold family) dispatch from a set of
//! server IDs the servers reported themselves, paying one message per report.

use std::fmt;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicySpec {
    /// Uniformly random server.
    Random,
    /// Server `n` with probability `mu_n / mu_total`.
    WeightedRandom,
    /// Join the shortest queue.
    Jsq,
    /// Shortest of `d` uniformly sampled servers, SQ(d).
    PowerOfD { d: usize },
    /// SQ(d) plus the `m` best candidates remembered from the previous slot, SQ(d,m).
    PowerOfDMem { d: usize, m: usize },
    /// Join an idle queue.
    Jiq,
    /// Join below a threshold refreshed every `t` slots from `d` samples.
    Jbt { d: usize, t: u64 },
    /// JBT with service-rate weighted selection.
    Jbtg { d: usize, t: u64 },
    /// JBT whose threshold is the floor of the average queue length.
    JbtAvg { t: u64 },
}

impl PolicySpec {
    /// Label used in tables and CSV output.
    pub fn label(&self) -> String {
        match self {
            PolicySpec::Random => "Random".into(),
            PolicySpec::WeightedRandom => "WRandom".into(),
            PolicySpec::Jsq => "JSQ".into(),
            PolicySpec::PowerOfD { d } => format!("SQ({d})"),
            PolicySpec::PowerOfDMem { d, m } => format!("SQ({d},{m})"),
            PolicySpec::Jiq => "JIQ".into(),
            PolicySpec::Jbt { d, .. } => format!("JBT-{d}"),
            PolicySpec::Jbtg { d, .. } => format!("JBTG-{d}"),
            PolicySpec::JbtAvg { .. } => "JBT-AVG".into(),
        }
    }

    pub fn d(&self) -> Option<usize> {
        match *self {
            PolicySpec::PowerOfD { d }
            | PolicySpec::PowerOfDMem { d, .. }
            | PolicySpec::Jbt { d, .. }
            | PolicySpec::Jbtg { d, .. } => Some(d),
            _ => None,
        }
    }

    pub fn m(&self) -> Option<usize> {
        match *self {
            PolicySpec::PowerOfDMem { m, .. } => Some(m),
            _ => None,
        }
    }

    /// Threshold refresh interval of the JBT family.
    pub fn refresh_interval(&self) -> Option<u64> {
        match *self {
            PolicySpec::Jbt { t, .. } | PolicySpec::Jbtg { t, .. } | PolicySpec::JbtAvg { t } => {
                Some(t)
            }
            _ => None,
        }
    }

    pub fn with_d(&self, new_d: usize) -> Self {
        match self.clone() {
            PolicySpec::PowerOfD { .. } => PolicySpec::PowerOfD { d: new_d },
            PolicySpec::PowerOfDMem { m, .. } => PolicySpec::PowerOfDMem { d: new_d, m },
            PolicySpec::Jbt { t, .. } => PolicySpec::Jbt { d: new_d, t },
            PolicySpec::Jbtg { t, .. } => PolicySpec::Jbtg { d: new_d, t },
            other => other,
        }
    }

    pub fn with_refresh_interval(&self, new_t: u64) -> Self {
        match self.clone() {
            PolicySpec::Jbt { d, .. } => PolicySpec::Jbt { d, t: new_t },
            PolicySpec::Jbtg { d, .. } => PolicySpec::Jbtg { d, t: new_t },
            PolicySpec::JbtAvg { .. } => PolicySpec::JbtAvg { t: new_t },
            other => other,
        }
    }

    pub fn validate(&self, n: usize) -> Result<(), ConfigError> {
        let fail = |reason: String| {
            Err(ConfigError::Policy {
                policy: self.label(),
                reason,
            })
        };
        if let Some(d) = self.d() {
            if d == 0 || d > n {
                return fail(format!("d must lie in 1..={n}, got {d}"));
            }
        }
        if let Some(0) = self.m() {
            return fail("m must be at least 1".into());
        }
        if let Some(0) = self.refresh_interval() {
            return fail("refresh interval T must be at least 1".into());
        }
        Ok(())
    }
}

impl fmt::Display for PolicySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Refresh interval assumed when a JBT label is parsed without one.
pub const DEFAULT_REFRESH_INTERVAL: u64 = 1000;

impl FromStr for PolicySpec {
    type Err = String;

    /// Parses table labels: `JSQ`, `SQ(2)`, `SQ(2,3)`, `JIQ`, `JBT-10`,
    /// `JBTG-2`, `JBT-AVG`, `Random`, `WRandom`. JBT labels accept an optional
    /// `@T` suffix (`JBT-10@100`).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let upper = s.trim().to_ascii_uppercase();
        let (body, t) = match upper.split_once('@') {
            Some((b, t)) => (
                b.to_string(),
                t.parse::<u64>().map_err(|e| format!("bad refresh interval in {s}: {e}"))?,
            ),
            None => (upper.clone(), DEFAULT_REFRESH_INTERVAL),
        };
        let num = |x: &str| x.trim().parse::<usize>().map_err(|e| format!("bad number in {s}: {e}"));
        match body.as_str() {
            "RANDOM" => return Ok(PolicySpec::Random),
            "WRANDOM" | "WEIGHTED_RANDOM" => return Ok(PolicySpec::WeightedRandom),
            "JSQ" => return Ok(PolicySpec::Jsq),
            "JIQ" => return Ok(PolicySpec::Jiq),
            "JBT-AVG" => return Ok(PolicySpec::JbtAvg { t }),
            _ => {}
        }
        if let Some(rest) = body.strip_prefix("SQ(").and_then(|r| r.strip_suffix(')')) {
            return match rest.split_once(',') {
                Some((d, m)) => Ok(PolicySpec::PowerOfDMem { d: num(d)?, m: num(m)? }),
                None => Ok(PolicySpec::PowerOfD { d: num(rest)? }),
            };
        }
        if let Some(d) = body.strip_prefix("JBTG-") {
            return Ok(PolicySpec::Jbtg { d: num(d)?, t });
        }
        if let Some(d) = body.strip_prefix("JBT-") {
            return Ok(PolicySpec::Jbt { d: num(d)?, t });
        }
        Err(format!("unknown policy label {s}"))
    }
}

/// Dispatcher memory m(t).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryState {
    ids: Vec<usize>,
    in_memory: Vec<bool>,
    /// Current threshold θ (JBT family).
    pub threshold: u64,
    reported: Vec<bool>,
    /// Remembered `(server, recorded length)` pairs of SQ(d,m).
    pub stored_sample: Vec<(usize, u64)>,
}

impl MemoryState {
    pub fn new(n: usize) -> Self {
        Self {
            ids: Vec::with_capacity(n),
            in_memory: vec![false; n],
            threshold: 0,
            reported: vec![false; n],
            stored_sample: Vec::new(),
        }
    }

    /// Server IDs available to pull from, in insertion order.
    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, server: usize) -> bool {
        self.in_memory[server]
    }

    pub fn has_reported(&self, server: usize) -> bool {
        self.reported[server]
    }

    fn insert(&mut self, server: usize) {
        debug_assert!(!self.in_memory[server]);
        self.in_memory[server] = true;
        self.ids.push(server);
    }

    fn take_at(&mut self, pos: usize) -> usize {
        let id = self.ids.swap_remove(pos);
        self.in_memory[id] = false;
        self.reported[id] = false;
        id
    }
}

/// Result of a dispatch decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dispatch {
    pub dest: usize,
    pub push_msgs: u64,
    /// Memory entry consumed by a pull-based decision.
    pub consumed: Option<usize>,
}

/// Messages exchanged by the end-of-slot protocol.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EndOfSlot {
    pub pull_msgs: u64,
    pub push_msgs: u64,
}

/// A policy bound to a concrete set of servers.
#[derive(Debug, Clone)]
pub struct Policy {
    spec: PolicySpec,
    mu: Vec<f64>,
    weights: WeightedIndex<f64>,
    ties: Vec<usize>,
    candidates: Vec<(usize, u64)>,
}

impl Policy {
    pub fn new(spec: PolicySpec, mu: &[f64]) -> Result<Self, ConfigError> {
        spec.validate(mu.len())?;
        let weights = WeightedIndex::new(mu).map_err(|e| ConfigError::Policy {
            policy: spec.label(),
            reason: e.to_string(),
        })?;
        Ok(Self {
            spec,
            mu: mu.to_vec(),
            weights,
            ties: Vec::with_capacity(mu.len()),
            candidates: Vec::with_capacity(mu.len()),
        })
    }

    pub fn spec(&self) -> &PolicySpec {
        &self.spec
    }

    pub fn servers(&self) -> usize {
        self.mu.len()
    }

    /// Whether dispatch draws from server-reported IDs.
    pub fn is_pull_based(&self) -> bool {
        matches!(
            self.spec,
            PolicySpec::Jiq | PolicySpec::Jbt { .. } | PolicySpec::Jbtg { .. } | PolicySpec::JbtAvg { .. }
        )
    }

    /// Chooses the queue that receives this slot's `arrivals` (> 0) jobs.
    pub fn dispatch<R: Rng + ?Sized>(
        &mut self,
        q: &[u64],
        mem: &mut MemoryState,
        arrivals: u64,
        rng: &mut R,
    ) -> Dispatch {
        let n = q.len();
        let push = |dest, msgs| Dispatch {
            dest,
            push_msgs: msgs,
            consumed: None,
        };
        match self.spec {
            PolicySpec::Random => push(rng.random_range(0..n), 0),
            PolicySpec::WeightedRandom => push(self.weights.sample(rng), 0),
            PolicySpec::Jsq => {
                self.candidates.clear();
                self.candidates.extend(q.iter().copied().enumerate());
                push(self.argmin_candidates(rng), 2 * n as u64)
            }
            PolicySpec::PowerOfD { d } => {
                self.candidates.clear();
                for i in index::sample(rng, n, d) {
                    self.candidates.push((i, q[i]));
                }
                push(self.argmin_candidates(rng), 2 * d as u64)
            }
            PolicySpec::PowerOfDMem { d, m } => {
                self.candidates.clear();
                for i in index::sample(rng, n, d) {
                    self.candidates.push((i, q[i]));
                }
                for &(server, len) in &mem.stored_sample {
                    match self.candidates.iter_mut().find(|c| c.0 == server) {
                        Some(c) => c.1 = c.1.min(len),
                        None => self.candidates.push((server, len)),
                    }
                }
                let dest = self.argmin_candidates(rng);
                if let Some(c) = self.candidates.iter_mut().find(|c| c.0 == dest) {
                    c.1 += arrivals;
                }
                self.candidates.sort_by_key(|c| c.1);
                mem.stored_sample.clear();
                mem.stored_sample
                    .extend(self.candidates.iter().take(m).copied());
                push(dest, 2 * d as u64)
            }
            PolicySpec::Jiq | PolicySpec::Jbt { .. } | PolicySpec::JbtAvg { .. } => {
                if mem.is_empty() {
                    push(rng.random_range(0..n), 0)
                } else {
                    let id = mem.take_at(rng.random_range(0..mem.len()));
                    Dispatch {
                        dest: id,
                        push_msgs: 0,
                        consumed: Some(id),
                    }
                }
            }
            PolicySpec::Jbtg { .. } => {
                if mem.is_empty() {
                    push(self.weights.sample(rng), 0)
                } else {
                    let total: f64 = mem.ids.iter().map(|&i| self.mu[i]).sum();
                    let mut u = rng.random::<f64>() * total;
                    let mut pos = mem.len() - 1;
                    for (k, &i) in mem.ids.iter().enumerate() {
                        if u < self.mu[i] {
                            pos = k;
                            break;
                        }
                        u -= self.mu[i];
                    }
                    let id = mem.take_at(pos);
                    Dispatch {
                        dest: id,
                        push_msgs: 0,
                        consumed: Some(id),
                    }
                }
            }
        }
    }

    /// Runs the end-of-slot reporting protocol on the post-service queues of slot `t`.
    pub fn end_of_slot<R: Rng + ?Sized>(
        &mut self,
        q_next: &[u64],
        mem: &mut MemoryState,
        t: u64,
        rng: &mut R,
    ) -> EndOfSlot {
        let n = q_next.len();
        let mut out = EndOfSlot::default();
        match self.spec {
            PolicySpec::Jiq => {
                for (server, &len) in q_next.iter().enumerate() {
                    if len == 0 && !mem.contains(server) {
                        mem.insert(server);
                        out.pull_msgs += 1;
                    }
                }
            }
            PolicySpec::Jbt { d, t: period } | PolicySpec::Jbtg { d, t: period } => {
                if (t + 1) % period == 0 {
                    let threshold = index::sample(rng, n, d)
                        .into_iter()
                        .map(|i| q_next[i])
                        .min()
                        .expect("d >= 1");
                    out.push_msgs = 2 * d as u64;
                    out.pull_msgs = refresh(mem, q_next, threshold);
                } else {
                    out.pull_msgs = report_below(mem, q_next);
                }
            }
            PolicySpec::JbtAvg { t: period } => {
                if (t + 1) % period == 0 {
                    let threshold = q_next.iter().sum::<u64>() / n as u64;
                    out.push_msgs = 2 * n as u64;
                    out.pull_msgs = refresh(mem, q_next, threshold);
                } else {
                    out.pull_msgs = report_below(mem, q_next);
                }
            }
            _ => {}
        }
        out
    }

    fn argmin_candidates<R: Rng + ?Sized>(&mut self, rng: &mut R) -> usize {
        let best = self
            .candidates
            .iter()
            .map(|c| c.1)
            .min()
            .expect("at least one candidate");
        self.ties.clear();
        self.ties
            .extend(self.candidates.iter().filter(|c| c.1 == best).map(|c| c.0));
        if self.ties.len() == 1 {
            self.ties[0]
        } else {
            self.ties[rng.random_range(0..self.ties.len())]
        }
    }
}

/// Replaces the memory with every server at or below the new threshold.
/// Only servers not already remembered send a pull message.
fn refresh(mem: &mut MemoryState, q_next: &[u64], threshold: u64) -> u64 {
    mem.threshold = threshold;
    let mut pulls = 0;
    mem.ids.clear();
    for (server, &len) in q_next.iter().enumerate() {
        let below = len <= threshold;
        if below && !mem.in_memory[server] {
            pulls += 1;
        }
        mem.in_memory[server] = below;
        mem.reported[server] = below;
        if below {
            mem.ids.push(server);
        }
    }
    pulls
}

/// Servers at or below the threshold that have not reported since they were
/// last dispatched to report now.
fn report_below(mem: &mut MemoryState, q_next: &[u64]) -> u64 {
    let mut pulls = 0;
    for (server, &len) in q_next.iter().enumerate() {
        if len <= mem.threshold && !mem.reported[server] {
            mem.reported[server] = true;
            mem.insert(server);
            pulls += 1;
        }
    }
    pulls
}
