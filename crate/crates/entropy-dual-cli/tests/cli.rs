use std::fs;
use std::path::Path;
use std::process::Command;

use serde_json::Value;
use sha2::{Digest, Sha256};

const BIN: &str = env!("CARGO_BIN_EXE_entropy-dual");

/// Small grids so each invocation stays well under a second or two.
const SMALL: &[&str] = &["grid.nx=16", "grid.steps=16", "checks.samples=500", "checks.trials=4", "hopflax.steps=16"];

fn run(args: &[&str], overrides: &[&str], env: Option<(&str, &str)>) -> i32 {
    let mut cmd = Command::new(BIN);
    cmd.args(args);
    for o in SMALL.iter().chain(overrides) {
        cmd.arg("--override").arg(o);
    }
    if let Some((k, v)) = env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs").status.code().expect("exit code")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[test]
fn every_subcommand_passes_and_lists_its_files() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["check-assumptions", "solve-strong", "solve-dual", "verify", "dafermos", "hopflax", "orlicz-norm"] {
        let out = dir.path().join(cmd);
        // The consistency gap is O(dt²); 16 steps are too coarse for 1e-6.
        let extra: &[&str] = if cmd == "verify" { &["grid.steps=64"] } else { &[] };
        let code = run(&[cmd, "--out", out.to_str().unwrap()], extra, None);
        assert_eq!(code, 0, "{cmd}");
        let manifest = read_json(&out.join("manifest.json"));
        let files = manifest["files"].as_array().unwrap();
        assert!(files.iter().any(|f| f["path"] == "report.json"), "{cmd}");
        for f in files {
            let bytes = fs::read(out.join(f["path"].as_str().unwrap())).unwrap();
            assert_eq!(f["sha256"].as_str().unwrap(), hex(&bytes), "{cmd}: {}", f["path"]);
        }
        let report = read_json(&out.join("report.json"));
        assert_eq!(report["config"]["grid"]["nx"], 16);
        assert_eq!(report["status"], "pass");
    }
}

#[test]
fn reports_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(run(&["solve-dual", "--seed", "3", "--out", a.to_str().unwrap()], &[], None), 0);
    assert_eq!(run(&["solve-dual", "--seed", "3", "--out", b.to_str().unwrap()], &[], Some(("ENTROPY_DUAL_THREADS", "1"))), 0);
    for f in ["report.json", "history.csv", "dual_potential.bin", "recovered.bin", "convergence.svg"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let (mut ma, mut mb) = (read_json(&a.join("manifest.json")), read_json(&b.join("manifest.json")));
    ma["created_unix"] = Value::Null;
    mb["created_unix"] = Value::Null;
    assert_eq!(ma, mb);
}

#[test]
fn json_and_key_value_configs_are_interchangeable() {
    let dir = tempfile::tempdir().unwrap();
    let kv = dir.path().join("run.cfg");
    fs::write(&kv, "# small NLS run\nsystem.name = nls\ndata.amplitude = 0.05\nschedule.gamma = auto\n").unwrap();
    let js = dir.path().join("run.json");
    fs::write(&js, r#"{"system": {"name": "nls"}, "data.amplitude": 0.05, "schedule": {"gamma": "auto"}}"#).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(run(&["solve-strong", "--config", kv.to_str().unwrap(), "--out", a.to_str().unwrap()], &[], None), 0);
    assert_eq!(run(&["solve-strong", "--config", js.to_str().unwrap(), "--out", b.to_str().unwrap()], &[], None), 0);
    assert_eq!(fs::read(a.join("report.json")).unwrap(), fs::read(b.join("report.json")).unwrap());
    assert_eq!(read_json(&a.join("report.json"))["config"]["system"]["name"], "nls");
}

#[test]
fn zero_data_gives_a_zero_entropy_series() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("z");
    assert_eq!(run(&["solve-strong", "--out", out.to_str().unwrap()], &["data.kind=zero"], None), 0);
    let csv = fs::read_to_string(out.join("entropy.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let k: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(k, 0.0);
    }
}

#[test]
fn zero_data_dual_value_is_the_lower_bound() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("z");
    assert_eq!(run(&["solve-dual", "--out", out.to_str().unwrap()], &["data.kind=zero", "system.name=hj"], None), 0);
    let r = &read_json(&out.join("report.json"))["results"];
    let (v, lb) = (r["value"].as_f64().unwrap(), r["lower_bound"].as_f64().unwrap());
    assert!((v - lb).abs() <= 1e-12 * (1.0 + lb.abs()), "{v} vs {lb}");
}

#[test]
fn exit_codes_distinguish_failures() {
    let dir = tempfile::tempdir().unwrap();
    let out = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    // Config errors: nothing is computed.
    assert_eq!(run(&["verify", "--out", &out("c1")], &["grid.nz=3"], None), 4);
    assert_eq!(run(&["verify", "--out", &out("c2")], &["grid.nx=7"], None), 4);
    assert_eq!(run(&["verify", "--out", &out("c3")], &[], Some(("ENTROPY_DUAL_THREADS", "0"))), 4);
    assert!(!dir.path().join("c1").exists());

    // A padding weight far above the certified cap breaks Λ-convexity.
    assert_eq!(run(&["check-assumptions", "--out", &out("eps")], &["system.epsilon=10"], None), 3);
    let notes = read_json(&dir.path().join("eps/report.json"))["notes"].to_string();
    assert!(notes.contains("lambda_convexity"), "{notes}");

    // κ ≡ 1 with large data violates the weighted cone condition.
    assert_eq!(run(&["verify", "--out", &out("hyp")], &["schedule.gamma=0", "data.amplitude=1.5"], None), 3);

    // A tiny blow-up threshold stops the strong solver; partial outputs remain.
    let code = run(&["solve-strong", "--out", &out("blow")], &["system.name=scalar", "data.amplitude=1", "strong.blowup=0.5"], None);
    assert_eq!(code, 2);
    assert!(dir.path().join("blow/entropy.csv").exists());
}

#[test]
fn hj_strong_trace_is_only_a_warning() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("hj");
    assert_eq!(run(&["check-assumptions", "--out", out.to_str().unwrap()], &["system.name=hj"], None), 0);
    let r = read_json(&out.join("report.json"));
    assert_eq!(r["results"]["strong_trace"]["verified"], false);
    assert!(r["notes"].to_string().contains("unverified"));
}

#[test]
fn dafermos_equality_case_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    assert_eq!(run(&["dafermos", "--out", out.to_str().unwrap()], &["dafermos.inflation=0"], None), 0);
    let r = &read_json(&out.join("report.json"))["results"]["dafermos"];
    let (w, refv) = (r["weighted"].as_f64().unwrap(), r["reference"].as_f64().unwrap());
    assert!((w - refv).abs() <= 1e-10, "{w} vs {refv}");
}
