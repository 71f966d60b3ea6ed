//! Acceptance checks, one line per criterion.
//!
//! Runs as a plain binary so every criterion reports even when an earlier one
//! fails; the process exits nonzero if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lbsim_core::baseline::{coupled_run, pooled_run};
use lbsim_core::certify::{certify, CertifyRequest};
use lbsim_core::engine::{run_replications, Engine};
use lbsim_core::metrics::RunStatistics;
use lbsim_core::model::SystemConfig;
use lbsim_core::policy::PolicySpec;
use lbsim_core::scenario::{run_scenario, to_csv, write_outputs, Scenario};
use lbsim_core::stochastic::{ArrivalLaw, ArrivalSpec, ServiceSpec};
use lbsim_core::tilt::{exact_distribution, jbt_witness_bound, theoretical_distribution};

const ORACLE_MAX_SERVERS: usize = 8;
const ORACLE_TIME_LIMIT: Duration = Duration::from_secs(1);

const DYNAMICS_SLOTS: u64 = 1_000_000;

const CERTIFY_TRIALS: usize = 1000;
const CERTIFY_SERVERS: usize = 10;
const WITNESS_SLACK: f64 = 1e-12;

const DELAY_SERVERS: usize = 10;
const DELAY_HORIZON: u64 = 2_000_000;
const DELAY_REPLICATIONS: u32 = 5;
const DELAY_SEED: u64 = 2024;
const JSQ_HALF_LOAD_RESPONSE: f64 = 3.015;
const JSQ_HALF_LOAD_TOLERANCE: f64 = 0.05;
const JIQ_OVER_JSQ_MIN: f64 = 2.0;
const REFRESH_INTERVAL: u64 = 1000;

const MESSAGE_HORIZON: u64 = 200_000;
const MESSAGE_INTERVALS: [u64; 3] = [10, 100, 1000];

const THROUGHPUT_HORIZON: u64 = 1_000_000;
const THROUGHPUT_LOADS: [f64; 6] = [0.5, 0.6, 0.7, 0.9, 0.95, 0.99];

const HEAVY_HORIZON: u64 = 10_000_000;
const HEAVY_REPLICATIONS: u32 = 2;
const HEAVY_EPSILON: f64 = 0.02;
const JSQ_RATIO_RANGE: (f64, f64) = (0.85, 1.15);
const JIQ_RATIO_MIN: f64 = 1.2;

const POOLED_CI_MULTIPLE: f64 = 2.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn binomial(n: usize, k: usize) -> BigInt {
    if k > n {
        return BigInt::zero();
    }
    (0..k).fold(BigInt::from(1), |acc, i| acc * BigInt::from(n - i) / BigInt::from(i + 1))
}

/// Sorted-position probabilities of SQ(d) by listing every d-subset.
fn enumerate_power_of_d(n: usize, d: usize) -> Vec<BigRational> {
    let mut counts = vec![BigInt::zero(); n];
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize == d {
            counts[mask.trailing_zeros() as usize] += 1;
        }
    }
    let total = binomial(n, d);
    counts.into_iter().map(|c| BigRational::new(c, total.clone())).collect()
}

fn oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut cases = 0;
    let mut mismatches = Vec::new();
    for n in 1..=ORACLE_MAX_SERVERS {
        for d in 1..=n {
            let spec = PolicySpec::PowerOfD { d };
            let brute = enumerate_power_of_d(n, d);
            let exact = exact_distribution(&spec, n).expect("valid d");
            // Distinct lengths in shuffled order, so the sort permutation matters.
            let mut q: Vec<u64> = (0..n as u64).map(|x| 3 * x + 1).collect();
            for i in (1..n).rev() {
                q.swap(i, rng.random_range(0..=i));
            }
            let dist = theoretical_distribution(&spec, &q, &vec![1.0; n], None).expect("valid state");
            let as_f64: Vec<f64> = brute.iter().map(|p| p.to_f64().unwrap()).collect();
            let sorted_ok = dist.sorted_lengths.windows(2).all(|w| w[0] < w[1]);
            if exact != brute || dist.probs != as_f64 || !sorted_ok {
                mismatches.push((n, d));
            }
            cases += 1;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        mismatches.is_empty() && elapsed < ORACLE_TIME_LIMIT,
        format!("{cases} (N, d) cases, mismatches {mismatches:?}, {:.3}s", elapsed.as_secs_f64()),
    )
}

fn random_policy(rng: &mut ChaCha8Rng, n: usize) -> PolicySpec {
    let d = rng.random_range(1..=n);
    let t = [1, 3, 10, 100][rng.random_range(0..4)];
    match rng.random_range(0..9) {
        0 => PolicySpec::Random,
        1 => PolicySpec::WeightedRandom,
        2 => PolicySpec::Jsq,
        3 => PolicySpec::PowerOfD { d },
        4 => PolicySpec::PowerOfDMem {
            d,
            m: rng.random_range(1..=n),
        },
        5 => PolicySpec::Jiq,
        6 => PolicySpec::Jbt { d, t },
        7 => PolicySpec::Jbtg { d, t },
        _ => PolicySpec::JbtAvg { t },
    }
}

fn random_config(rng: &mut ChaCha8Rng, horizon: u64) -> SystemConfig {
    let n = rng.random_range(1..=12);
    let mu: Vec<f64> = (0..n).map(|_| rng.random_range(1..=4) as f64).collect();
    let total: f64 = mu.iter().sum();
    let rho = rng.random_range(0.1..1.3);
    let arrival = match rng.random_range(0..3) {
        0 => ArrivalSpec::poisson(rho * total),
        1 => ArrivalSpec::new(ArrivalLaw::TwoPoint { value: 3 * n as u32 + 5 }, rho * total),
        _ => ArrivalSpec::new(ArrivalLaw::ClassA { p0: 0.5 }, rho * total),
    };
    let service = match rng.random_range(0..3) {
        0 => ServiceSpec::Poisson { cap: None },
        1 => ServiceSpec::Constant,
        _ => ServiceSpec::TwoPoint { peaks: vec![5] },
    };
    let mut config = SystemConfig::poisson(n, 1.0, 0.0, random_policy(rng, n), horizon, rng.random());
    config.mu = mu;
    config.arrival = arrival;
    config.service = service;
    config
}

fn dynamics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut slots = 0;
    let mut systems = 0;
    let mut violations = 0u64;
    while slots < DYNAMICS_SLOTS {
        let config = random_config(&mut rng, 10_000);
        // Some class A parameter draws are rejected by the builder.
        let Ok(mut engine) = Engine::new(&config, 0) else {
            continue;
        };
        systems += 1;
        for _ in 0..config.horizon {
            let before = engine.state.queues.0.clone();
            let out = engine.step().clone();
            let after = &engine.state.queues.0;
            let mut arrived = vec![0; before.len()];
            if let Some(dest) = out.dest {
                arrived[dest] = out.a_total;
            }
            for n in 0..before.len() {
                let (s, u) = (out.services[n], out.unused[n]);
                if before[n] + arrived[n] + u != after[n] + s || after[n] * u != 0 {
                    violations += 1;
                }
            }
            let total_before: u64 = before.iter().sum();
            let total_after: u64 = after.iter().sum();
            if total_before + out.a_total != total_after + out.departed() {
                violations += 1;
            }
            if !engine.state.is_consistent() {
                violations += 1;
            }
            slots += 1;
        }
    }
    outcome(
        violations == 0,
        format!("{slots} slots over {systems} random systems, {violations} violations"),
    )
}

fn tilt_certification() -> Outcome {
    let mut hetero = vec![1.0; 5];
    hetero.extend([10.0; 5]);
    let mut failures = Vec::new();
    let mut notes = Vec::new();
    let mut check = |name: String, req: CertifyRequest, ok: &dyn Fn(&lbsim_core::certify::CertifyReport) -> bool| {
        let report = certify(&req).expect("supported policy");
        let s = &report.sampled;
        notes.push(format!(
            "{name}: {}/{} delta-tilted, min witness {}",
            s.delta_tilted,
            s.states,
            s.min_witness.map_or("-".into(), |w| format!("{w:.4}"))
        ));
        if !ok(&report) || report.violation_count() > 0 {
            failures.push(name);
        }
    };
    for (label, mu) in [("homogeneous", vec![1.0; CERTIFY_SERVERS]), ("heterogeneous", hetero)] {
        let floor = mu.iter().copied().fold(f64::INFINITY, f64::min) / mu.iter().sum::<f64>();
        let req = CertifyRequest {
            mu,
            ..CertifyRequest::homogeneous(PolicySpec::Jsq, CERTIFY_SERVERS, CERTIFY_TRIALS)
        };
        check(format!("JSQ {label}"), req, &|r| {
            r.sampled.delta_tilted == r.sampled.states && r.sampled.min_witness.unwrap() >= floor - WITNESS_SLACK
        });
    }
    for d in [2, 3, 5] {
        let req = CertifyRequest::homogeneous(PolicySpec::PowerOfD { d }, CERTIFY_SERVERS, CERTIFY_TRIALS);
        check(format!("SQ({d})"), req, &|r| {
            r.sampled.delta_tilted == r.sampled.states
                && r.sampled.min_witness.unwrap() >= 1.0 / CERTIFY_SERVERS as f64 - WITNESS_SLACK
        });
    }
    let req = CertifyRequest::homogeneous(PolicySpec::Random, CERTIFY_SERVERS, CERTIFY_TRIALS);
    check("Random".into(), req, &|r| {
        r.sampled.tilted == r.sampled.states && r.sampled.delta_tilted == 0
    });
    for d in [1, 2, 5, 10] {
        let req = CertifyRequest::homogeneous(PolicySpec::Jbt { d, t: REFRESH_INTERVAL }, CERTIFY_SERVERS, CERTIFY_TRIALS);
        let bound = jbt_witness_bound(CERTIFY_SERVERS, d);
        check(format!("JBT-{d} one-short"), req, &|r| {
            let w = r.worst_case.as_ref().unwrap();
            w.delta_tilted == w.states && w.min_witness.unwrap() >= bound - WITNESS_SLACK
        });
    }
    outcome(failures.is_empty(), format!("failed {failures:?}; {}", notes.join("; ")))
}

struct DelayGrid {
    policies: Vec<PolicySpec>,
    /// `[load][policy]`.
    stats: Vec<Vec<RunStatistics>>,
    pooled: Vec<RunStatistics>,
    loads: [f64; 2],
}

fn delay_config(policy: PolicySpec, rho: f64) -> SystemConfig {
    SystemConfig::poisson(
        DELAY_SERVERS,
        1.0,
        rho * DELAY_SERVERS as f64,
        policy,
        DELAY_HORIZON,
        DELAY_SEED,
    )
}

fn delay_grid() -> DelayGrid {
    let policies = vec![
        PolicySpec::Jsq,
        PolicySpec::Jbt {
            d: 10,
            t: REFRESH_INTERVAL,
        },
        PolicySpec::PowerOfDMem { d: 2, m: 3 },
        PolicySpec::PowerOfD { d: 2 },
        PolicySpec::Jiq,
    ];
    let loads = [0.5, 0.99];
    let stats = loads
        .iter()
        .map(|&rho| {
            policies
                .iter()
                .map(|p| run_replications(&delay_config(p.clone(), rho), DELAY_REPLICATIONS).expect("valid config"))
                .collect()
        })
        .collect();
    let pooled = loads
        .iter()
        .map(|&rho| pooled_run(&delay_config(PolicySpec::Jsq, rho), DELAY_REPLICATIONS).expect("valid config"))
        .collect();
    DelayGrid {
        policies,
        stats,
        pooled,
        loads,
    }
}

fn delay_table(grid: &DelayGrid) -> Outcome {
    let jsq_half = grid.stats[0][0].mean_response_little;
    let half_ok = (jsq_half - JSQ_HALF_LOAD_RESPONSE).abs() <= JSQ_HALF_LOAD_TOLERANCE * JSQ_HALF_LOAD_RESPONSE;
    let heavy: Vec<f64> = grid.stats[1].iter().map(|s| s.mean_response_little).collect();
    let ordered = heavy.windows(2).all(|w| w[0] < w[1]);
    let ratio = heavy[4] / heavy[0];
    let listing: Vec<String> = grid
        .policies
        .iter()
        .zip(&heavy)
        .map(|(p, r)| format!("{p} {r:.2}"))
        .collect();
    outcome(
        half_ok && ordered && ratio >= JIQ_OVER_JSQ_MIN,
        format!(
            "JSQ@0.5 {jsq_half:.3} (target {JSQ_HALF_LOAD_RESPONSE} ± {:.0}%); @0.99 {}; JIQ/JSQ {ratio:.2}",
            100.0 * JSQ_HALF_LOAD_TOLERANCE,
            listing.join(" < ")
        ),
    )
}

fn message_rates() -> Outcome {
    let n = DELAY_SERVERS;
    let run = |policy: PolicySpec, rho: f64| {
        run_replications(
            &SystemConfig::poisson(n, 1.0, rho * n as f64, policy, MESSAGE_HORIZON, 5),
            1,
        )
        .expect("valid config")
    };
    let mut failures = Vec::new();
    let mut notes = Vec::new();
    for rho in [0.5, 0.99] {
        let jsq = run(PolicySpec::Jsq, rho).msgs_per_arrival();
        let sq2 = run(PolicySpec::PowerOfD { d: 2 }, rho).msgs_per_arrival();
        let jiq = run(PolicySpec::Jiq, rho);
        if jsq != 2.0 * n as f64 || sq2 != 4.0 || jiq.msgs_pull_per_arrival > 1.0 {
            failures.push(format!("fixed-rate policies at {rho}"));
        }
        notes.push(format!(
            "rho {rho}: JSQ {jsq} SQ(2) {sq2} JIQ pull {:.3}",
            jiq.msgs_pull_per_arrival
        ));
        for d in [2, 10] {
            for t in MESSAGE_INTERVALS {
                let rate = run(PolicySpec::Jbt { d, t }, rho).msgs_per_arrival();
                let bound = (n + 2 * d) as f64 / t as f64 + 1.0;
                if rate > bound {
                    failures.push(format!("JBT-{d}@{t} rho {rho}: {rate:.3} > {bound:.3}"));
                }
                if rho == 0.99 && t == 1000 {
                    notes.push(format!("JBT-{d}@1000 {rate:.3}"));
                    if rate >= 1.0 {
                        failures.push(format!("JBT-{d}@1000 not below one"));
                    }
                }
            }
        }
    }
    outcome(failures.is_empty(), format!("failed {failures:?}; {}", notes.join("; ")))
}

fn throughput() -> Outcome {
    let mut mu = vec![1.0; 5];
    mu.extend([10.0; 5]);
    let total: f64 = mu.iter().sum();
    let flagged = |policy: PolicySpec, rho: f64| {
        let mut config = SystemConfig::poisson(10, 1.0, rho * total, policy, THROUGHPUT_HORIZON, 3);
        config.mu = mu.clone();
        run_replications(&config, 1).expect("valid config").unstable_suspect
    };
    let mut failures = Vec::new();
    if !flagged(PolicySpec::PowerOfD { d: 2 }, 0.6) {
        failures.push("SQ(2)@0.6 not flagged".to_string());
    }
    if !flagged(PolicySpec::Jiq, 0.95) {
        failures.push("JIQ@0.95 not flagged".to_string());
    }
    for policy in [
        PolicySpec::Jbtg {
            d: 2,
            t: REFRESH_INTERVAL,
        },
        PolicySpec::PowerOfDMem { d: 2, m: 3 },
    ] {
        for rho in THROUGHPUT_LOADS {
            if flagged(policy.clone(), rho) {
                failures.push(format!("{policy}@{rho} flagged"));
            }
        }
    }
    outcome(
        failures.is_empty(),
        format!("rates 5x1 + 5x10, {THROUGHPUT_HORIZON} slots; failed {failures:?}"),
    )
}

/// Returns (direct, control-variate) heavy-traffic ratios.
fn heavy_traffic_ratio(config: &SystemConfig) -> (f64, f64) {
    let setup = config.build().expect("valid config");
    let eps = setup.service_mean() - setup.arrival.mean();
    let zeta = setup.arrival.variance() + setup.service_variance() + eps * eps;
    let sums = coupled_run(config, HEAVY_REPLICATIONS).expect("valid config");
    let half = zeta / 2.0;
    (
        eps * sums.mean_total_queue() / half,
        eps * sums.control_variate_queue(eps, zeta) / half,
    )
}

fn heavy_traffic() -> Outcome {
    let n = 10;
    let jsq = SystemConfig::poisson(n, 1.0, n as f64 - HEAVY_EPSILON, PolicySpec::Jsq, HEAVY_HORIZON, 7);
    let mut jiq = SystemConfig::poisson(2, 1.0, 2.0 - HEAVY_EPSILON, PolicySpec::Jiq, HEAVY_HORIZON, 7);
    jiq.arrival = ArrivalSpec::new(ArrivalLaw::ClassA { p0: 0.8 }, 2.0 - HEAVY_EPSILON);
    jiq.service = ServiceSpec::Constant;
    let (jsq_direct, jsq_cv) = heavy_traffic_ratio(&jsq);
    let (jiq_direct, jiq_cv) = heavy_traffic_ratio(&jiq);
    let (lo, hi) = JSQ_RATIO_RANGE;
    outcome(
        (lo..=hi).contains(&jsq_cv) && jiq_cv >= JIQ_RATIO_MIN,
        format!(
            "JSQ N=10 {jsq_cv:.3} in [{lo}, {hi}] (direct {jsq_direct:.3}); \
             JIQ N=2 class A {jiq_cv:.3} >= {JIQ_RATIO_MIN} (direct {jiq_direct:.3}); \
             {HEAVY_REPLICATIONS} x {HEAVY_HORIZON} slots"
        ),
    )
}

fn pooled_bound(grid: &DelayGrid) -> Outcome {
    let mut failures = Vec::new();
    for (l, rho) in grid.loads.iter().enumerate() {
        let pooled = &grid.pooled[l];
        for (p, stats) in grid.policies.iter().zip(&grid.stats[l]) {
            let slack = POOLED_CI_MULTIPLE
                * pooled
                    .queue_ci_halfwidth
                    .unwrap_or(0.0)
                    .max(stats.queue_ci_halfwidth.unwrap_or(0.0));
            if pooled.mean_total_queue > stats.mean_total_queue + slack {
                failures.push(format!("{p}@{rho}"));
            }
        }
    }
    outcome(
        failures.is_empty(),
        format!(
            "pooled {:.3} / {:.3} at rho 0.5 / 0.99; failed {failures:?}",
            grid.pooled[0].mean_total_queue, grid.pooled[1].mean_total_queue
        ),
    )
}

const DETERMINISM_SCENARIO: &str = r#"
name = "determinism"
replications = 3

[base]
mu = [1.0, 1.0, 2.0, 4.0]
horizon = 30000
seed = 99
arrival = { law = "poisson" }
service = { law = "poisson" }

[[sweep]]
rho = [0.6, 0.95]
policies = ["JSQ", "SQ(2,3)", "JIQ", "JBTG-2", "POOLED"]
t = [10, 100]
"#;

fn determinism() -> Outcome {
    let scenario = Scenario::from_toml(DETERMINISM_SCENARIO).expect("valid scenario");
    let first = to_csv(&run_scenario(&scenario, 1).expect("runs"));
    let second = to_csv(&run_scenario(&scenario, 3).expect("runs"));
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let files: Vec<Vec<u8>> = dirs
        .iter()
        .map(|dir| {
            let results = run_scenario(&scenario, 2).expect("runs");
            let written = write_outputs(&scenario, &results, dir.path(), false).expect("writes");
            std::fs::read(&written[0]).unwrap()
        })
        .collect();
    let rows = first.lines().count() - 1;
    outcome(
        first == second && files[0] == files[1] && files[0] == first.as_bytes(),
        format!("{rows} rows, identical across reruns and thread counts"),
    )
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut all_pass = true;
    let mut report = |id: u32, name: &str, run: &dyn Fn() -> Outcome| {
        let t = Instant::now();
        let o = run();
        all_pass &= o.pass;
        println!(
            "criterion {id} {name}: {} ({}) [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t.elapsed().as_secs_f64()
        );
    };
    report(1, "power-of-d oracle", &oracle);
    report(2, "queue dynamics invariants", &dynamics);
    report(3, "tilt certification", &tilt_certification);
    let grid_start = Instant::now();
    let grid = delay_grid();
    println!("delay grid simulated in {:.1}s", grid_start.elapsed().as_secs_f64());
    report(4, "delay table", &|| delay_table(&grid));
    report(5, "message rates", &message_rates);
    report(6, "heterogeneous throughput", &throughput);
    report(7, "heavy-traffic ratio", &heavy_traffic);
    report(8, "pooled lower bound", &|| pooled_bound(&grid));
    report(9, "determinism", &determinism);
    println!("acceptance finished in {:.1}s", start.elapsed().as_secs_f64());
    if all_pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
