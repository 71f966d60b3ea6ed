//! Sorted dispatching distributions, tilt classification and closed-form drifts.
//!
//! A distribution is described over sorted positions: position `n` is the
//! `n`-th shortest queue. Positions holding equal queue lengths form a tie
//! group; any rearrangement of probability inside a tie group leaves
//! ⟨Q_σ, P⟩ unchanged, so classification is done up to such rearrangements.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};

use crate::error::AnalysisError;
use crate::policy::PolicySpec;

/// Probability mass tolerance used throughout the analysis.
pub const MASS_TOLERANCE: f64 = 1e-12;

/// Dispatch probabilities over sorted positions.
#[derive(Debug, Clone, PartialEq)]
pub struct DispatchDistribution {
    /// `sigma[n]` is the server at sorted position `n`.
    pub sigma: Vec<usize>,
    pub probs: Vec<f64>,
    /// Queue lengths in sorted order.
    pub sorted_lengths: Vec<u64>,
}

impl DispatchDistribution {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// ⟨Q_σ, P⟩.
    pub fn inner(&self) -> f64 {
        self.sorted_lengths
            .iter()
            .zip(&self.probs)
            .map(|(&q, &p)| q as f64 * p)
            .sum()
    }

    /// Capacity shares μ_σ(n) / μ_Σ in sorted order.
    pub fn shares(&self, mu: &[f64]) -> Vec<f64> {
        let total: f64 = mu.iter().sum();
        self.sigma.iter().map(|&s| mu[s] / total).collect()
    }

    pub fn delta(&self, mu: &[f64]) -> DeltaVector {
        DeltaVector(
            self.probs
                .iter()
                .zip(self.shares(mu))
                .map(|(p, c)| p - c)
                .collect(),
        )
    }

    /// Half-open position ranges of the tie groups, in sorted order.
    pub fn tie_groups(&self) -> Vec<(usize, usize)> {
        tie_groups(&self.sorted_lengths)
    }
}

/// Δ_n = P_n − μ_σ(n) / μ_Σ.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaVector(pub Vec<f64>);

impl DeltaVector {
    /// Tilted in the plain sense: some k in 2..=N splits Δ into a nonnegative
    /// prefix and a nonpositive suffix.
    pub fn is_tilted(&self, tol: f64) -> bool {
        let d = &self.0;
        let n = d.len();
        // Longest nonnegative prefix and longest nonpositive suffix must overlap or meet.
        let prefix = d.iter().take_while(|&&x| x >= -tol).count();
        let suffix = d.iter().rev().take_while(|&&x| x <= tol).count();
        n >= 2 && prefix >= 1 && suffix >= 1 && prefix + suffix >= n
    }
}

/// Sorting permutation of `q`, nondecreasing, ties by server index.
pub fn sort_permutation(q: &[u64]) -> Vec<usize> {
    let mut sigma: Vec<usize> = (0..q.len()).collect();
    sigma.sort_by_key(|&i| (q[i], i));
    sigma
}

fn tie_groups(sorted: &[u64]) -> Vec<(usize, usize)> {
    let mut groups = Vec::new();
    let mut start = 0;
    for i in 1..=sorted.len() {
        if i == sorted.len() || sorted[i] != sorted[start] {
            groups.push((start, i));
            start = i;
        }
    }
    groups
}

fn check_dims(q: &[u64], mu: &[f64]) -> Result<(), AnalysisError> {
    if q.len() != mu.len() || q.is_empty() {
        return Err(AnalysisError::Dimension {
            queues: q.len(),
            rates: mu.len(),
        });
    }
    Ok(())
}

fn binomial(n: usize, k: usize) -> BigInt {
    if k > n {
        return BigInt::zero();
    }
    let k = k.min(n - k);
    let mut acc = BigInt::one();
    for i in 0..k {
        acc = acc * BigInt::from(n - i) / BigInt::from(i + 1);
    }
    acc
}

fn binomial_f64(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Exact sorted-position probabilities for policies whose distribution does
/// not depend on the queue lengths beyond their order.
pub fn exact_distribution(spec: &PolicySpec, servers: usize) -> Result<Vec<BigRational>, AnalysisError> {
    let n = servers;
    if n == 0 {
        return Err(AnalysisError::Dimension { queues: 0, rates: 0 });
    }
    match *spec {
        PolicySpec::Jsq => Ok((0..n)
            .map(|i| if i == 0 { BigRational::one() } else { BigRational::zero() })
            .collect()),
        PolicySpec::Random => Ok(vec![BigRational::new(BigInt::one(), BigInt::from(n)); n]),
        PolicySpec::PowerOfD { d } => {
            spec.validate(n)?;
            let total = binomial(n, d);
            Ok((1..=n)
                .map(|pos| BigRational::new(binomial(n - pos, d - 1), total.clone()))
                .collect())
        }
        _ => Err(AnalysisError::Unsupported(spec.label())),
    }
}

fn check_memory_stats(stats: &[f64], n: usize) -> Result<(), AnalysisError> {
    if stats.len() != n + 1 {
        return Err(AnalysisError::MemoryStatsLength {
            expected: n + 1,
            got: stats.len(),
        });
    }
    let total: f64 = stats.iter().sum();
    if stats.iter().any(|&p| p < -MASS_TOLERANCE) || (total - 1.0).abs() > 1e-9 {
        return Err(AnalysisError::MemoryStatsMass(format!("{total}")));
    }
    Ok(())
}

/// Closed-form dispatching distribution at state `q`.
///
/// Pull-based policies need `memory_stats[k] = Pr(|m| = k)` for `k = 0..=N`,
/// where a memory of size `k` holds the `k` shortest queues. An empty memory
/// falls back to the policy's blind choice.
pub fn theoretical_distribution(
    spec: &PolicySpec,
    q: &[u64],
    mu: &[f64],
    memory_stats: Option<&[f64]>,
) -> Result<DispatchDistribution, AnalysisError> {
    check_dims(q, mu)?;
    spec.validate(q.len())?;
    let n = q.len();
    let sigma = sort_permutation(q);
    let sorted_lengths: Vec<u64> = sigma.iter().map(|&s| q[s]).collect();
    let total_mu: f64 = mu.iter().sum();
    let sorted_mu: Vec<f64> = sigma.iter().map(|&s| mu[s]).collect();
    let probs = match spec {
        PolicySpec::Jsq | PolicySpec::Random | PolicySpec::PowerOfD { .. } => exact_distribution(spec, n)?
            .iter()
            .map(|p| p.to_f64().expect("finite rational"))
            .collect(),
        PolicySpec::WeightedRandom => sorted_mu.iter().map(|m| m / total_mu).collect(),
        PolicySpec::Jiq | PolicySpec::Jbt { .. } | PolicySpec::JbtAvg { .. } => {
            let stats = memory_stats.ok_or_else(|| AnalysisError::MissingMemoryStats(spec.label()))?;
            check_memory_stats(stats, n)?;
            let mut probs = vec![stats[0] / n as f64; n];
            let mut tail = 0.0;
            for i in (1..=n).rev() {
                tail += stats[i] / i as f64;
                probs[i - 1] += tail;
            }
            probs
        }
        PolicySpec::Jbtg { .. } => {
            let stats = memory_stats.ok_or_else(|| AnalysisError::MissingMemoryStats(spec.label()))?;
            check_memory_stats(stats, n)?;
            let mut prefix_mu = vec![0.0; n + 1];
            for i in 0..n {
                prefix_mu[i + 1] = prefix_mu[i] + sorted_mu[i];
            }
            let mut tail = 0.0;
            let mut probs = vec![0.0; n];
            for i in (1..=n).rev() {
                tail += stats[i] / prefix_mu[i];
                probs[i - 1] = sorted_mu[i - 1] * (tail + stats[0] / total_mu);
            }
            probs
        }
        PolicySpec::PowerOfDMem { .. } => return Err(AnalysisError::Unsupported(spec.label())),
    };
    Ok(DispatchDistribution {
        sigma,
        probs,
        sorted_lengths,
    })
}

/// Moves all mass of each tie group onto the group's first position.
pub fn canonicalize_ties(dist: &DispatchDistribution) -> DispatchDistribution {
    let mut out = dist.clone();
    for (a, b) in dist.tie_groups() {
        let mass: f64 = dist.probs[a..b].iter().sum();
        out.probs[a] = mass;
        for p in &mut out.probs[a + 1..b] {
            *p = 0.0;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    NotTilted,
    Tilted,
    DeltaTilted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TiltClassification {
    pub verdict: Verdict,
    /// Largest δ with Δ₁ ≥ δ and Δ_N ≤ −δ over tie rearrangements that keep
    /// the distribution tilted; 0 unless the verdict is `DeltaTilted`.
    pub delta_witness: f64,
    /// A tie-equivalent distribution achieving the witness, when tilted.
    pub representative: Option<DispatchDistribution>,
}

impl TiltClassification {
    pub fn is_tilted(&self) -> bool {
        self.verdict != Verdict::NotTilted
    }
}

struct Group {
    /// Positions of the group ordered by increasing capacity.
    positions: Vec<usize>,
    mass: f64,
    capacity: f64,
    c_min: f64,
    c_max: f64,
}

impl Group {
    fn excess(&self) -> f64 {
        self.mass - self.capacity
    }
}

/// Where the nonnegative prefix ends: group `split` holds the first suffix
/// position; `head` says whether one of its positions stays in the prefix.
#[derive(Clone, Copy)]
struct Split {
    split: usize,
    head: bool,
}

/// Classifies `dist` up to rearrangements inside tie groups.
pub fn classify(dist: &DispatchDistribution, mu: &[f64]) -> TiltClassification {
    let n = dist.len();
    let not_tilted = TiltClassification {
        verdict: Verdict::NotTilted,
        delta_witness: 0.0,
        representative: None,
    };
    if n < 2 {
        return not_tilted;
    }
    let shares = dist.shares(mu);
    let groups: Vec<Group> = dist
        .tie_groups()
        .into_iter()
        .map(|(a, b)| {
            let mut positions: Vec<usize> = (a..b).collect();
            positions.sort_by(|&x, &y| shares[x].total_cmp(&shares[y]).then(x.cmp(&y)));
            Group {
                mass: dist.probs[a..b].iter().sum(),
                capacity: shares[a..b].iter().sum(),
                c_min: shares[positions[0]],
                c_max: shares[*positions.last().expect("nonempty group")],
                positions,
            }
        })
        .collect();
    let g_count = groups.len();
    let tol = MASS_TOLERANCE;
    let mut best: Option<(f64, Split)> = None;
    for split in 0..g_count {
        let prefix_ok = groups[..split].iter().all(|g| g.excess() >= -tol);
        let suffix_ok = groups[split + 1..].iter().all(|g| g.excess() <= tol);
        if !(prefix_ok && suffix_ok) {
            continue;
        }
        let gs = &groups[split];
        for head in [false, true] {
            if head {
                if gs.positions.len() < 2 || gs.mass < gs.c_min - tol {
                    continue;
                }
            } else if split == 0 || gs.excess() > tol {
                continue;
            }
            let first = &groups[0];
            let delta_first = if split == 0 {
                first.mass - first.c_min
            } else {
                first.excess()
            };
            let last = &groups[g_count - 1];
            let delta_last = if split == g_count - 1 && head {
                -last.c_max
            } else {
                (-last.c_max).max(last.excess())
            };
            let witness = delta_first.min(-delta_last);
            if best.map_or(true, |(w, _)| witness > w) {
                best = Some((witness, Split { split, head }));
            }
        }
    }
    let Some((witness, split)) = best else {
        return not_tilted;
    };
    let representative = arrange(dist, &shares, &groups, split);
    let delta_tilted = witness > tol;
    TiltClassification {
        verdict: if delta_tilted {
            Verdict::DeltaTilted
        } else {
            Verdict::Tilted
        },
        delta_witness: if delta_tilted { witness } else { 0.0 },
        representative: Some(representative),
    }
}

/// Builds the tie rearrangement realizing `split`: prefix groups sit at
/// capacity with the excess on their first position, suffix groups fill their
/// lower-capacity positions first so the last position carries as little as
/// possible, and a split group with a head puts all its mass on the head.
fn arrange(dist: &DispatchDistribution, shares: &[f64], groups: &[Group], split: Split) -> DispatchDistribution {
    let n = dist.len();
    let mut sigma = vec![0; n];
    let mut lengths = vec![0; n];
    let mut probs = vec![0.0; n];
    let mut at = 0;
    for (g, group) in groups.iter().enumerate() {
        let start = at;
        for &pos in &group.positions {
            sigma[at] = dist.sigma[pos];
            lengths[at] = dist.sorted_lengths[pos];
            probs[at] = 0.0;
            at += 1;
        }
        let caps: Vec<f64> = group.positions.iter().map(|&p| shares[p]).collect();
        let slots = &mut probs[start..at];
        if g < split.split {
            slots.copy_from_slice(&caps);
            slots[0] += group.excess();
        } else if g == split.split && split.head {
            slots[0] = group.mass;
        } else {
            // Suffix: spread over all but the largest-capacity position, then spill.
            let k = caps.len();
            let others: f64 = caps[..k - 1].iter().sum();
            let on_others = group.mass.min(others);
            for i in 0..k - 1 {
                slots[i] = if others > 0.0 { caps[i] * on_others / others } else { 0.0 };
            }
            slots[k - 1] = (group.mass - on_others).max(0.0);
        }
    }
    DispatchDistribution {
        sigma,
        probs,
        sorted_lengths: lengths,
    }
}

/// Closed-form one-step drifts of ⟨Q, Q⟩-type Lyapunov terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerDrift {
    /// Σ_n Q_σ(n) (P_n λ − μ_σ(n)).
    pub full: f64,
    /// The same with Q replaced by Q − mean(Q).
    pub perp: f64,
}

pub fn inner_drift(dist: &DispatchDistribution, mu: &[f64], lambda: f64) -> InnerDrift {
    let n = dist.len() as f64;
    let avg = dist.sorted_lengths.iter().sum::<u64>() as f64 / n;
    let mut full = 0.0;
    let mut perp = 0.0;
    for ((&q, &p), &s) in dist.sorted_lengths.iter().zip(&dist.probs).zip(&dist.sigma) {
        let drift = p * lambda - mu[s];
        full += q as f64 * drift;
        perp += (q as f64 - avg) * drift;
    }
    InnerDrift { full, perp }
}

/// Which drift inequality failed at a state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DriftCheck {
    /// Σ Q_σ(n) Δ_n ≤ 0 for tilted distributions.
    TiltedInner,
    /// Σ Q_σ(n) Δ_n ≤ −δ (Q_max − Q_min) for δ-tilted distributions.
    DeltaTiltedInner,
    /// ‖Q⊥‖ ≤ √N (Q_max − Q_min).
    PerpNorm,
    /// full ≤ −ε μ_min/μ_Σ ‖Q‖ for tilted distributions.
    FullDrift,
    /// perp ≤ ε √N ‖Q⊥‖ for tilted distributions.
    PerpDrift,
    /// perp ≤ √N ‖Q⊥‖ (ε − δλ/N) for δ-tilted distributions.
    PerpDeltaDrift,
}

/// Evaluates every drift inequality that applies to `class` at the state of
/// `dist`, returning the failed ones. `lambda` must be below μ_Σ.
pub fn drift_violations(dist: &DispatchDistribution, mu: &[f64], lambda: f64, class: &TiltClassification) -> Vec<DriftCheck> {
    let mut failed = Vec::new();
    let n = dist.len() as f64;
    let q: Vec<f64> = dist.sorted_lengths.iter().map(|&x| x as f64).collect();
    let spread = q.last().copied().unwrap_or(0.0) - q.first().copied().unwrap_or(0.0);
    let avg = q.iter().sum::<f64>() / n;
    let norm = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    let perp_norm = q.iter().map(|x| (x - avg).powi(2)).sum::<f64>().sqrt();
    let scale = 1e-9 * (1.0 + q.iter().sum::<f64>()) * (1.0 + lambda);
    if perp_norm > n.sqrt() * spread + scale {
        failed.push(DriftCheck::PerpNorm);
    }
    if !class.is_tilted() {
        return failed;
    }
    let inner: f64 = q.iter().zip(&dist.delta(mu).0).map(|(x, d)| x * d).sum();
    let total_mu: f64 = mu.iter().sum();
    let mu_min = mu.iter().copied().fold(f64::INFINITY, f64::min);
    let eps = total_mu - lambda;
    let drift = inner_drift(dist, mu, lambda);
    if inner > scale {
        failed.push(DriftCheck::TiltedInner);
    }
    if drift.full > -eps * mu_min / total_mu * norm + scale {
        failed.push(DriftCheck::FullDrift);
    }
    if drift.perp > eps * n.sqrt() * perp_norm + scale {
        failed.push(DriftCheck::PerpDrift);
    }
    if class.verdict == Verdict::DeltaTilted {
        let delta = class.delta_witness;
        // The witness is realized by the representative, which has the same
        // inner products as `dist`.
        if inner > -delta * spread + scale {
            failed.push(DriftCheck::DeltaTiltedInner);
        }
        if drift.perp > n.sqrt() * perp_norm * (eps - delta * lambda / n) + scale {
            failed.push(DriftCheck::PerpDeltaDrift);
        }
    }
    failed
}

/// Law of the memory size right after a JBT threshold refresh at state `q`:
/// the threshold is the minimum of `d` uniformly sampled queues and every
/// queue at or below it is remembered. Indexed by size `0..=N`.
pub fn jbt_refresh_memory_distribution(q: &[u64], d: usize) -> Vec<f64> {
    let n = q.len();
    let mut sorted = q.to_vec();
    sorted.sort_unstable();
    let total = binomial_f64(n, d);
    let mut stats = vec![0.0; n + 1];
    for (a, b) in tie_groups(&sorted) {
        // All sampled positions at or after a, minus all at or after b.
        stats[b] += (binomial_f64(n - a, d) - binomial_f64(n - b, d)) / total;
    }
    stats
}

/// Memory size law for the average-threshold variant: a point mass at the
/// number of queues not above the floor of the mean.
pub fn jbt_avg_memory_distribution(q: &[u64]) -> Vec<f64> {
    let n = q.len();
    let threshold = q.iter().sum::<u64>() / n as u64;
    let mut stats = vec![0.0; n + 1];
    stats[q.iter().filter(|&&x| x <= threshold).count()] = 1.0;
    stats
}

/// The adversarial state for the threshold policies: every queue long except
/// the one at `short`.
pub fn one_short_state(n: usize, short: usize, long: u64) -> Vec<u64> {
    let mut q = vec![long; n];
    q[short] = 0;
    q
}

/// Lower bound on the witness of JBT-d at a one-short state, homogeneous servers.
pub fn jbt_witness_bound(n: usize, d: usize) -> f64 {
    let n = n as f64;
    (d as f64 / n * (1.0 - 1.0 / n)).min(1.0 / n)
}

/// Lower bound on the witness of JBTG-d at a one-short state.
pub fn jbtg_witness_bound(mu: &[f64], d: usize) -> f64 {
    let n = mu.len() as f64;
    let total: f64 = mu.iter().sum();
    let max = mu.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = mu.iter().copied().fold(f64::INFINITY, f64::min);
    (d as f64 / n * (1.0 - max / total)).min(min / total)
}
