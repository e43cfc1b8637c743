use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lowrank-bayes"))
        .args(args)
        .env_remove("LOWRANK_BAYES_THREADS")
        .output()
        .unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

const SPEC: &str = "methods = [\"optimal\", \"prior\"]\nmean_kinds = [\"low_rank\"]\nranks = [0, 1, 3]\n\
                    [problem]\nfamily = \"synthetic\"\ndim = 4\n\
                    hessian = { lambda0 = 4.0, alpha = 1.0, tau = 1e-6 }\nprior = { lambda0 = 1.0, alpha = 0.0, tau = 0.0 }\n";

#[test]
fn run_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(dir.path(), "spec.toml", SPEC);
    let out = dir.path().join("res");
    let o = cli(&[
        "run",
        "--spec",
        &spec,
        "--out",
        out.to_str().unwrap(),
        "--threads",
        "2",
        "--seed",
        "9",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "results.csv",
        "eigenvalues.csv",
        "manifest.json",
        "report.txt",
        "distance_vs_rank.svg",
    ] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let manifest = std::fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"seeds\": [\n    9\n  ]"));
    let o = cli(&["report", out.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("crossover rank"));
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(dir.path(), "spec.toml", SPEC);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(cli(&[
        "run",
        "--spec",
        &spec,
        "--out",
        a.to_str().unwrap(),
        "--threads",
        "1"
    ])
    .status
    .success());
    let o = Command::new(env!("CARGO_BIN_EXE_lowrank-bayes"))
        .args(["run", "--spec", &spec, "--out", b.to_str().unwrap()])
        .env("LOWRANK_BAYES_THREADS", "3")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(
        std::fs::read(a.join("results.csv")).unwrap(),
        std::fs::read(b.join("results.csv")).unwrap()
    );
}

#[test]
fn bad_inputs_exit_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(
        dir.path(),
        "bad.toml",
        &SPEC.replace("ranks = [0, 1, 3]", "ranks = [3, 1]"),
    );
    let o = cli(&["run", "--spec", &bad]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("strictly increasing"));

    let good = write(dir.path(), "spec.toml", SPEC);
    let blocker = write(dir.path(), "file", "");
    let o = cli(&["run", "--spec", &good, "--out", &format!("{blocker}/sub")]);
    assert_eq!(o.status.code(), Some(2));

    let header = "family,method,r,realization,forstner,kl,hellinger,frobenius,risk_theory,risk_mc,rel_cpu_time,seed,delta_sq_next,mean_err_sq,mean_err_rel\n";
    let malformed = write(
        dir.path(),
        "m.csv",
        &format!(
            "{header}synthetic,optimal,0,0,1,,,,,,,1,,,\nsynthetic,optimal,x,0,1,,,,,,,1,,,\n"
        ),
    );
    let o = cli(&["report", &malformed]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));

    let empty = write(dir.path(), "e.csv", header);
    let o = cli(&["report", &empty]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("empty"));

    assert_eq!(cli(&["verify", "12"]).status.code(), Some(2));
}

#[test]
fn verify_runs_a_selected_criterion() {
    let o = cli(&["verify", "2"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.starts_with("criterion  2 PASS"), "{text}");
}
