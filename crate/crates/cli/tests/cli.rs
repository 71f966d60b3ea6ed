use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
name = "small"
replications = 2

[base]
mu = [1.0, 1.0, 1.0]
horizon = 5000
seed = 4
arrival = { law = "poisson" }
service = { law = "poisson" }

[[sweep]]
rho = [0.5, 0.9]
policies = ["JSQ", "JBT-2", "POOLED"]
t = [50]
"#;

fn lbsim(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lbsim"))
        .args(args)
        .current_dir(cwd)
        .env_remove("LBSIM_OUT")
        .output()
        .expect("binary runs")
}

#[test]
fn run_writes_identical_csv_twice() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    let mut bodies = Vec::new();
    for (out, jobs) in [("a", "1"), ("b", "2")] {
        let o = lbsim(&["run", "small.toml", "--out", out, "--jobs", jobs, "--plot"], dir.path());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let csv = fs::read_to_string(dir.path().join(out).join("small.csv")).unwrap();
        bodies.push(csv);
    }
    assert_eq!(bodies[0], bodies[1]);
    let mut lines = bodies[0].lines();
    assert!(lines.next().unwrap().starts_with("policy,N,rho,"));
    assert_eq!(lines.count(), 6);
    let plots = fs::read_dir(dir.path().join("a")).unwrap().count();
    assert!(plots > 1);
}

#[test]
fn horizon_override_and_env_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_lbsim"))
        .args(["run", "small.toml", "--horizon", "1000"])
        .current_dir(dir.path())
        .env("LBSIM_OUT", "from_env")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("from_env/small.csv")).unwrap();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "slots").unwrap();
    let first: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    // Two replications of 1000 slots, a tenth of each spent warming up.
    assert_eq!(first[col], "1800");
}

#[test]
fn empty_sweep_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL.split("[[sweep]]").next().unwrap();
    fs::write(dir.path().join("empty.toml"), text).unwrap();
    let o = lbsim(&["run", "empty.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("sweep"));
}

#[test]
fn certify_jsq_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = lbsim(&["certify", "--policy", "JSQ", "--n", "10", "--trials", "200"], dir.path());
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("delta-tilted 100.0%"), "{text}");
    assert!(text.contains("violations: 0"));
}

#[test]
fn certify_heterogeneous_rates_from_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("rates.toml"), "[base]\nmu = [1, 1, 10, 10]\n").unwrap();
    let o = lbsim(
        &["certify", "--policy", "JBTG-2", "--hetero", "rates.toml", "--trials", "100"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("on 4 servers"));
}

#[test]
fn certify_rejects_memory_dependent_policy() {
    let dir = tempfile::tempdir().unwrap();
    let o = lbsim(&["certify", "--policy", "JIQ", "--n", "4"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}
