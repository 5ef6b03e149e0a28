use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const SMALL: &str = "run.seed = 11
sim.rides = 4
sim.duration = 60
data.stride = 50
moe.N = 4
moe.K = 1
moe.L_inner_feature = 16
moe.L_out_dim = 8
moe.depth = 1
moe.gate_channels = 8
train.max_epochs = 3
";

fn moelio(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moelio")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = moelio(args);
    assert!(
        out.status.success(),
        "moelio {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
    config: PathBuf,
    data: PathBuf,
}

impl Fixture {
    fn new() -> Fixture {
        let dir = TempDir::new().unwrap();
        let config = dir.path().join("run.txt");
        fs::write(&config, SMALL).unwrap();
        let data = dir.path().join("data");
        ok(&["simulate", "--config", s(&config), "--out-dir", s(&data)]);
        Fixture { dir, config, data }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn ride(&self, file: &str) -> PathBuf {
        self.data.join("ride_000").join(file)
    }

    fn fuse(&self, source: &[&str], out: &Path) {
        let mut args = vec!["fuse", "--config", s(&self.config), "--imu"];
        let imu = self.ride("imu.csv");
        args.push(s(&imu));
        args.extend(source);
        args.extend(["--out", s(out)]);
        ok(&args);
    }

    fn eval(&self, est: &Path, out: &Path) -> Value {
        let truth = self.ride("truth.csv");
        ok(&["eval", "--config", s(&self.config), "--truth", s(&truth), "--est", s(est), "--out", s(out)]);
        serde_json::from_str(&fs::read_to_string(out).unwrap()).unwrap()
    }
}

#[test]
fn simulate_writes_rides_and_echoes_config() {
    let f = Fixture::new();
    for i in 0..4 {
        let ride = f.data.join(format!("ride_{i:03}"));
        for file in ["imu.csv", "truth.csv", "meta.json"] {
            assert!(ride.join(file).is_file(), "{file} missing in ride {i}");
        }
    }
    let echoed = fs::read_to_string(f.data.join("config.txt")).unwrap();
    assert!(echoed.contains("sim.duration = 60"));
    let meta: Value = serde_json::from_str(&fs::read_to_string(f.ride("meta.json")).unwrap()).unwrap();
    assert_eq!(meta["samples"], 6001);
}

#[test]
fn oracle_fusion_beats_dead_reckoning() {
    let f = Fixture::new();
    let truth = f.ride("truth.csv");
    let (oracle, prop) = (f.path("oracle.csv"), f.path("prop.csv"));
    f.fuse(&["--oracle-velocity", "--truth", s(&truth)], &oracle);
    f.fuse(&["--propagate-only"], &prop);
    let m_oracle = f.eval(&oracle, &f.path("oracle.json"));
    let m_prop = f.eval(&prop, &f.path("prop.json"));
    let (a, b) = (m_oracle["ate_m"].as_f64().unwrap(), m_prop["ate_m"].as_f64().unwrap());
    println!("60 s ride: oracle ATE {a:.3} m, propagation-only ATE {b:.3} m");
    assert!(a < 0.05 * b, "oracle {a} vs propagation {b}");
    assert!(m_oracle["rte_m"].as_f64().unwrap() < m_prop["rte_m"].as_f64().unwrap());
}

#[test]
fn identical_files_score_zero() {
    let f = Fixture::new();
    let truth = f.ride("truth.csv");
    let m = f.eval(&truth, &f.path("self.json"));
    assert_eq!(m["ate_m"], 0.0);

    let long = f.path("long.txt");
    fs::write(&long, format!("{SMALL}filter.rte_dt = 30\n")).unwrap();
    let out = f.path("self30.json");
    ok(&["eval", "--config", s(&long), "--truth", s(&truth), "--est", s(&truth), "--out", s(&out)]);
    let m: Value = serde_json::from_str(&fs::read_to_string(out).unwrap()).unwrap();
    assert_eq!(m["ate_m"], 0.0);
    assert_eq!(m["rte_m"], 0.0);
}

#[test]
fn train_then_fuse_with_checkpoint() {
    let f = Fixture::new();
    let ckpt = f.path("model.ckpt");
    let stdout = ok(&["train", "--config", s(&f.config), "--data-dir", s(&f.data), "--out", s(&ckpt)]);
    assert!(stdout.contains("phase 1") && stdout.contains("phase 2"), "{stdout}");
    let log = fs::read_to_string(f.path("model.ckpt.log.csv")).unwrap();
    let phases: Vec<&str> = log.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert!(phases.contains(&"1.0") && phases.contains(&"2.0"));

    let (traj, meas) = (f.path("net.csv"), f.path("meas.csv"));
    f.fuse(&["--checkpoint", s(&ckpt), "--measurements", s(&meas)], &traj);
    let truth = f.ride("truth.csv");
    let out = f.path("net.json");
    ok(&[
        "eval", "--config", s(&f.config), "--truth", s(&truth), "--est", s(&traj), "--measurements", s(&meas), "--out",
        s(&out),
    ]);
    let m: Value = serde_json::from_str(&fs::read_to_string(out).unwrap()).unwrap();
    assert!(m["ate_m"].as_f64().unwrap().is_finite());
    assert!(m["inference_error_mps"].as_f64().unwrap() > 0.0);
    assert_eq!(m["config"]["moe.N"], "4");

    let mismatch = f.path("other.txt");
    fs::write(&mismatch, SMALL.replace("moe.N = 4", "moe.N = 5")).unwrap();
    let imu = f.ride("imu.csv");
    let bad = moelio(&[
        "fuse", "--config", s(&mismatch), "--checkpoint", s(&ckpt), "--imu", s(&imu), "--out", s(&f.path("x.csv")),
    ]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn runs_are_byte_identical() {
    let a = Fixture::new();
    let b = Fixture::new();
    for file in ["imu.csv", "truth.csv", "meta.json"] {
        assert_eq!(fs::read(a.ride(file)).unwrap(), fs::read(b.ride(file)).unwrap(), "{file}");
    }
    let run = |f: &Fixture| {
        let truth = f.ride("truth.csv");
        let traj = f.path("o.csv");
        f.fuse(&["--oracle-velocity", "--truth", s(&truth)], &traj);
        f.eval(&traj, &f.path("o.json"));
        (fs::read(traj).unwrap(), fs::read(f.path("o.json")).unwrap())
    };
    assert_eq!(run(&a), run(&b));
}

#[test]
fn exit_codes_and_cleanup() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.txt");
    fs::write(&cfg, "sim.rides = 2\nsim.ridez = 3\n").unwrap();
    let out = moelio(&["simulate", "--config", s(&cfg), "--out-dir", s(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error[") && err.contains("exit=2") && err.contains("line 2"), "{err}");
    assert!(!dir.path().join("d").exists());

    let missing = dir.path().join("nope.csv");
    let out = moelio(&["fuse", "--propagate-only", "--imu", s(&missing), "--out", s(&dir.path().join("t.csv"))]);
    assert_eq!(out.status.code(), Some(3));

    let f = Fixture::new();
    let traj = f.path("partial.csv");
    let meas = f.path("no_such_dir").join("m.csv");
    let imu = f.ride("imu.csv");
    let out = moelio(&["fuse", "--propagate-only", "--imu", s(&imu), "--out", s(&traj), "--measurements", s(&meas)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(!traj.exists(), "partial trajectory left behind");

    let out = moelio(&["fuse", "--imu", s(&imu), "--out", s(&traj)]);
    assert!(!out.status.success());
    let help = ok(&["fuse", "--help"]);
    for flag in ["--checkpoint", "--oracle-velocity", "--propagate-only", "--truth", "--imu", "--out", "--measurements"] {
        assert!(help.contains(flag), "{flag} undocumented");
    }
}
