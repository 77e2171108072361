use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn amoeg(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_amoeg"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("AMOEG_OUT_DIR")
        .output()
        .unwrap()
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = amoeg(out, args);
    assert!(
        o.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn json(path: PathBuf) -> Value {
    serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

const COUNTEREXAMPLE: &str = "#dense 2 2\n1,1\n1,100\n#supplies\n2,1\n";

#[test]
fn generate_writes_market_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g");
    ok(
        &out,
        &[
            "generate",
            "low-rank",
            "--buyers",
            "20",
            "--items",
            "10",
            "--dim",
            "3",
            "--supply-total",
            "30",
            "--seed",
            "7",
        ],
    );
    let text = std::fs::read_to_string(out.join("market.csv")).unwrap();
    assert!(text.starts_with("#dense 20 10"));
    let m = json(out.join("manifest.json"));
    assert_eq!(m["command"], "generate");
    assert_eq!(m["seeds"], serde_json::json!([7]));
    assert_eq!(m["outputs"], serde_json::json!(["market.csv"]));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "generate",
        "low-rank",
        "--buyers",
        "15",
        "--items",
        "6",
        "--dim",
        "2",
        "--supply-total",
        "12",
        "--seed",
        "1",
    ];
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&a, &args);
    ok(&b, &args);
    let read = |p: PathBuf| std::fs::read(p).unwrap();
    assert_eq!(read(a.join("market.csv")), read(b.join("market.csv")));

    let market = a.join("market.csv").display().to_string();
    let (sa, sb) = (dir.path().join("sa"), dir.path().join("sb"));
    ok(&sa, &["--threads", "1", "solve", "--market", &market]);
    ok(&sb, &["--threads", "3", "solve", "--market", &market]);
    assert_eq!(
        read(sa.join("solution.json")),
        read(sb.join("solution.json"))
    );
    let (ma, mb) = (
        json(sa.join("manifest.json")),
        json(sb.join("manifest.json")),
    );
    assert_eq!(ma["config_hash"], mb["config_hash"]);
    assert_eq!(ma["inputs"], mb["inputs"]);
}

#[test]
fn solve_modes_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let market = write(dir.path(), "m.csv", COUNTEREXAMPLE);
    let amo = dir.path().join("amo");
    let stdout = ok(&amo, &["solve", "--market", &market, "--mode", "amo"]);
    assert!(stdout.contains("converged"));
    let sol = json(amo.join("solution.json"));
    assert!(sol.get("x").is_some());

    let eg = dir.path().join("eg");
    ok(&eg, &["solve", "--market", &market, "--mode", "eg"]);
    assert_eq!(
        json(eg.join("solve_report.json"))["amo_violations"]["violators"],
        1
    );

    let tight = dir.path().join("tight");
    ok(
        &tight,
        &[
            "solve",
            "--market",
            &market,
            "--tol",
            "1e-10",
            "--max-iters",
            "200000",
        ],
    );
    assert_ne!(
        json(amo.join("manifest.json"))["config_hash"],
        json(tight.join("manifest.json"))["config_hash"]
    );
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    assert_eq!(amoeg(&out, &["solve"]).status.code(), Some(2));
    assert_eq!(amoeg(&out, &["frobnicate"]).status.code(), Some(2));
    assert_eq!(amoeg(&out, &["auction"]).status.code(), Some(2));

    let bad = write(dir.path(), "bad.csv", "#dense 1 1\n-1\n#supplies\n1\n");
    assert_eq!(
        amoeg(&out, &["solve", "--market", &bad]).status.code(),
        Some(3)
    );
    let missing = dir.path().join("nope.csv").display().to_string();
    assert_eq!(
        amoeg(&out, &["solve", "--market", &missing]).status.code(),
        Some(3)
    );

    let market = write(
        dir.path(),
        "m.csv",
        "#dense 3 3\n1,2,3\n3,1,2\n2,3,1.5\n#supplies\n1,1,1\n",
    );
    let slow = dir.path().join("slow");
    let o = amoeg(&slow, &["solve", "--market", &market, "--max-iters", "1"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(slow.join("solution.json").exists());
    assert_eq!(json(slow.join("manifest.json"))["exit_code"], 4);
}

#[test]
fn output_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("env-out");
    let o = Command::new(env!("CARGO_BIN_EXE_amoeg"))
        .env("AMOEG_OUT_DIR", &out)
        .args([
            "generate", "ranks", "--buyers", "5", "--items", "8", "--ranked", "3",
        ])
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(out.join("market.csv").exists());
}

#[test]
fn generate_replicator_and_nested() {
    let dir = tempfile::tempdir().unwrap();
    let base = write(dir.path(), "base.csv", COUNTEREXAMPLE);
    let rep = dir.path().join("rep");
    ok(
        &rep,
        &["generate", "replicator", "--base", &base, "--k", "4"],
    );
    assert!(std::fs::read_to_string(rep.join("market.csv"))
        .unwrap()
        .starts_with("#dense 8 8"));

    let pool = dir.path().join("pool");
    ok(
        &pool,
        &[
            "generate",
            "low-rank",
            "--buyers",
            "10",
            "--items",
            "100",
            "--dim",
            "2",
            "--supply-total",
            "200",
        ],
    );
    let pool = pool.join("market.csv").display().to_string();
    let nested = dir.path().join("nested");
    ok(
        &nested,
        &[
            "generate", "nested", "--pool", &pool, "--items", "50,100", "--supply", "500",
        ],
    );
    assert!(nested.join("market_m50_s500.csv").exists());
    assert!(nested.join("market_m100_s500.csv").exists());
}

#[test]
fn analyze_single_against_and_series() {
    let dir = tempfile::tempdir().unwrap();
    let market = write(dir.path(), "m.csv", COUNTEREXAMPLE);
    let s = dir.path().join("s");
    ok(&s, &["solve", "--market", &market]);
    let sol = s.join("solution.json").display().to_string();
    let prices = write(dir.path(), "p.json", "[0.5, 0.5]");
    let a = dir.path().join("a");
    ok(
        &a,
        &[
            "analyze",
            "--market",
            &market,
            "--solution",
            &sol,
            "--against",
            &prices,
        ],
    );
    let report = json(a.join("analysis.json"));
    assert!((report["envy"]["raw"]["data"][0].as_f64().unwrap() - 0.99).abs() < 1e-3);
    for f in ["analysis_buyers.csv", "purity.csv", "against_regret.csv"] {
        assert!(a.join(f).exists(), "{f}");
    }

    let m2 = write(
        dir.path(),
        "m2.csv",
        "#dense 2 3\n1,1,0.5\n1,100,2\n#supplies\n2,1,1\n",
    );
    let series = dir.path().join("series");
    ok(&series, &["analyze", "--series", &market, &m2]);
    let csv = std::fs::read_to_string(series.join("series.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn certify_replicator_and_counterexample() {
    let dir = tempfile::tempdir().unwrap();
    let base = write(
        dir.path(),
        "base.csv",
        "#dense 2 3\n0.9,0.2,0.4\n0.3,0.8,0.5\n#supplies\n1,1,1\n",
    );
    let rep = dir.path().join("rep");
    ok(
        &rep,
        &["generate", "replicator", "--base", &base, "--k", "3"],
    );
    let market = rep.join("market.csv").display().to_string();
    let c = dir.path().join("c");
    ok(
        &c,
        &[
            "certify",
            "--market",
            &market,
            "--eps",
            "0",
            "--eps-sweep",
            "0,0.1,0.5",
        ],
    );
    let cert = json(c.join("certificate.json"));
    assert_eq!(cert["complete"], true);
    assert_eq!(cert["delta"].as_f64(), Some(0.0));
    let sweep = std::fs::read_to_string(c.join("eps_sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 4);

    let ce = write(dir.path(), "ce.csv", COUNTEREXAMPLE);
    let c2 = dir.path().join("c2");
    let stdout = ok(&c2, &["certify", "--market", &ce]);
    assert!(stdout.contains("inapplicable buyers  2"), "{stdout}");
    assert_eq!(json(c2.join("certificate.json"))["complete"], false);
}

#[test]
fn auction_checks() {
    let dir = tempfile::tempdir().unwrap();
    let mono = dir.path().join("mono");
    ok(
        &mono,
        &[
            "auction",
            "--check",
            "monotonicity",
            "--trials",
            "30",
            "--seed",
            "3",
        ],
    );
    let r = json(mono.join("monotonicity.json"));
    assert_eq!(r["passed"], 30);

    let market = write(
        dir.path(),
        "m.csv",
        "#dense 3 3\n1,3,2\n2,1,1\n1.5,2,3.5\n#supplies\n1,1,1\n",
    );
    let max = dir.path().join("max");
    let stdout = ok(
        &max,
        &["auction", "--check", "maximality", "--market", &market],
    );
    assert!(stdout.contains("3/3"), "{stdout}");

    let beta = write(dir.path(), "beta.json", "[0.2, 0.2, 0.2]");
    let single = dir.path().join("single");
    ok(&single, &["auction", "--market", &market, "--beta", &beta]);
    let p = json(single.join("paced.json"));
    assert_eq!(p["budget_feasible"], true);
}

#[test]
fn deviate_trivial_and_sanity_runs() {
    let dir = tempfile::tempdir().unwrap();
    let g = dir.path().join("g");
    ok(
        &g,
        &[
            "generate",
            "low-rank",
            "--buyers",
            "12",
            "--items",
            "6",
            "--dim",
            "2",
            "--supply-total",
            "12",
            "--seed",
            "2",
        ],
    );
    let market = g.join("market.csv").display().to_string();

    let one = dir.path().join("one");
    ok(
        &one,
        &[
            "deviate", "--market", &market, "--buyers", "1", "--evals", "1", "--dim", "2",
        ],
    );
    let s = json(one.join("deviation.json"));
    assert_eq!(s["rows"][0]["gain"].as_f64(), Some(0.0));

    let wm = dir.path().join("wm");
    let stdout = ok(
        &wm,
        &[
            "deviate",
            "--market",
            &market,
            "--buyers",
            "3",
            "--evals",
            "15",
            "--dim",
            "2",
            "--seed",
            "1",
            "--mechanism",
            "welfare-max",
        ],
    );
    assert!(stdout.contains("found rate"));
    assert!(wm.join("deviation_rows.csv").exists());
}
