use std::fs;
use std::process::{Command, Output};

fn subemb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_subemb"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

#[test]
fn oracle_values() {
    let v = stdout_json(&subemb(&["oracle", "binom_sqrt_deviation", "50", "5"]));
    assert!((v["value"].as_f64().unwrap() - 0.388_877).abs() < 1e-6);
    let v = stdout_json(&subemb(&["oracle", "choose_n", "2", "1"]));
    assert_eq!(v["value"].as_u64(), Some(1286));
    let v = stdout_json(&subemb(&["oracle", "psi2", "sparse_sign(4,1)"]));
    assert!((v["value"].as_f64().unwrap() - 1.0 / 5f64.ln().sqrt()).abs() < 1e-12);
    let v = stdout_json(&subemb(&["oracle", "quadrature", "max_abs_gaussian_pair"]));
    assert!((v["value"].as_f64().unwrap() - 2.0 / std::f64::consts::PI.sqrt()).abs() < 1e-9);
}

#[test]
fn exit_codes() {
    assert_eq!(subemb(&["oracle", "nonsense"]).status.code(), Some(2));
    assert_eq!(subemb(&["oracle", "choose_n", "64", "8"]).status.code(), Some(3));
    assert_eq!(subemb(&["oracle", "exact_sparse_count", "200", "100"]).status.code(), Some(3));
    assert_eq!(
        subemb(&["experiment", "run", "--config", "/nonexistent/cfg.json"]).status.code(),
        Some(4)
    );
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"kind":"divergence","m":[50],"s":[5],"n":[4],"trials":0}"#).unwrap();
    assert_eq!(
        subemb(&["experiment", "run", "--config", cfg.to_str().unwrap()]).status.code(),
        Some(2)
    );
    fs::write(&cfg, r#"{"kind":"divergence","m":[50],"s":[5],"n":[4],"trials":3,"extra":true}"#).unwrap();
    assert_eq!(
        subemb(&["experiment", "run", "--config", cfg.to_str().unwrap()]).status.code(),
        Some(2)
    );
    fs::write(&cfg, r#"{"kind":"lower_bound_exact_sparse","m":[8],"s":[2],"trials":1}"#).unwrap();
    assert_eq!(
        subemb(&["experiment", "run", "--config", cfg.to_str().unwrap()]).status.code(),
        Some(3)
    );
}

#[test]
fn experiment_writes_csv_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("div.json");
    let out = dir.path().join("div.csv");
    fs::write(
        &cfg,
        format!(
            r#"{{"kind":"divergence","m":[20,40,80],"s":[2],"n":[6],"trials":50,"seed":9,"output":"{}"}}"#,
            out.display()
        ),
    )
    .unwrap();
    let run = |threads: &str| {
        let status = Command::new(env!("CARGO_BIN_EXE_subemb"))
            .args(["experiment", "run", "--config", cfg.to_str().unwrap()])
            .env("SUBEMB_THREADS", threads)
            .status()
            .unwrap();
        assert!(status.success());
        fs::read(&out).unwrap()
    };
    let a = run("1");
    let b = run("4");
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("kind,cell,m,s,n,approx_singleton_mean"));
    assert!(header.ends_with(",oracle"));
    assert_eq!(lines.count(), 3);
}

#[test]
fn bad_thread_count_is_a_config_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_subemb"))
        .args(["oracle", "chi_mean", "3"])
        .env("SUBEMB_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn generate_is_reproducible() {
    let args = ["generate", "--variant", "exact_sparse", "--m", "8", "--n", "5", "--s", "3", "--seed", "4"];
    let a = subemb(&args);
    let b = subemb(&args);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let text = String::from_utf8(a.stdout).unwrap();
    assert_eq!(text.lines().next(), Some("8 5"));
    assert_eq!(text.lines().count(), 6);
}

#[test]
fn width_and_isometry() {
    let w = stdout_json(&subemb(&[
        "width",
        "--set",
        r#"{"kind":"basis","n":2}"#,
        "--samples",
        "20000",
        "--seed",
        "3",
    ]));
    let exact = 2.0 / std::f64::consts::PI.sqrt();
    let (value, se) = (w["value"].as_f64().unwrap(), w["stderr"].as_f64().unwrap());
    assert!((value - exact).abs() <= 4.0 * se);

    let r = stdout_json(&subemb(&[
        "isometry",
        "--variant",
        "exact_sparse",
        "--m",
        "16",
        "--s",
        "2",
        "--set",
        r#"{"kind":"basis","n":6}"#,
        "--trials",
        "20",
    ]));
    // exactly sparse columns preserve every basis vector
    assert_eq!(r["max"].as_f64(), Some(0.0));
    assert_eq!(r["trials"].as_u64(), Some(20));

    let dir = tempfile::tempdir().unwrap();
    let set = dir.path().join("set.csv");
    fs::write(&set, "dim=2\n1,0\n0.6,0.8\n").unwrap();
    let r = stdout_json(&subemb(&[
        "isometry",
        "--variant",
        "dense_gaussian",
        "--m",
        "10",
        "--set-file",
        set.to_str().unwrap(),
        "--trials",
        "5",
    ]));
    assert_eq!(r["lambda"].as_f64(), Some(1.0));
}
