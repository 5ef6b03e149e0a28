//! Command-line front end: `simulate`, `train`, `fuse` and `eval`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::config::RunConfig;
use crate::ekf::{read_measurements_csv, write_measurements_csv, write_trajectory_csv};
use crate::error::{Error, Result};
use crate::moenet::checkpoint;
use crate::pipeline::{
    config_json, evaluate_files, fuse, load_dataset, simulate_dataset, train_on_rides, write_train_log, VelocitySource,
};
use crate::sim::{read_imu_csv, read_truth_csv};

#[derive(Debug, Parser)]
#[command(name = "moelio", version, about = "Learned inertial odometry for cycling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic rides (imu.csv, truth.csv, meta.json per ride).
    Simulate {
        #[command(flatten)]
        config: ConfigArg,
        /// Directory receiving one subdirectory per ride.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train the velocity network on a simulated dataset.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Directory written by `simulate`.
        #[arg(long)]
        data_dir: PathBuf,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch training log CSV [default: <out>.log.csv].
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Run the filter over an IMU stream and write the trajectory.
    Fuse(FuseArgs),
    /// Compare a trajectory with ground truth.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        /// Ground-truth CSV.
        #[arg(long)]
        truth: PathBuf,
        /// Estimated trajectory CSV written by `fuse`.
        #[arg(long)]
        est: PathBuf,
        /// Measurement CSV from `fuse`; adds the network inference error.
        #[arg(long)]
        measurements: Option<PathBuf>,
        /// Metrics JSON to write.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// Run configuration (`section.key = value` lines); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::load(p),
            None => Ok(RunConfig::default()),
        }
    }
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["checkpoint", "oracle_velocity", "propagate_only"])))]
pub struct FuseArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Trained network checkpoint supplying velocity measurements.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Use ground-truth body velocity from --truth instead of the network.
    #[arg(long, requires = "truth")]
    oracle_velocity: bool,
    /// Skip measurement updates entirely.
    #[arg(long)]
    propagate_only: bool,
    /// Ground-truth CSV for --oracle-velocity.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// IMU CSV (t,gx,gy,gz,ax,ay,az).
    #[arg(long)]
    imu: PathBuf,
    /// Trajectory CSV to write.
    #[arg(long)]
    out: PathBuf,
    /// Also write the applied velocity measurements to this CSV.
    #[arg(long)]
    measurements: Option<PathBuf>,
}

/// Paths this invocation created, deleted again if it fails.
#[derive(Default)]
struct Outputs(Vec<PathBuf>);

impl Outputs {
    fn claim(&mut self, p: &Path) -> PathBuf {
        if !p.exists() {
            self.0.push(p.to_path_buf());
        }
        p.to_path_buf()
    }

    fn remove(&self) {
        for p in self.0.iter().rev() {
            let _ = if p.is_dir() { fs::remove_dir_all(p) } else { fs::remove_file(p) };
        }
    }
}

fn echo(out: &mut dyn Write, cfg: &RunConfig) {
    let _ = writeln!(out, "# effective config");
    for line in cfg.to_text().lines() {
        let _ = writeln!(out, "#   {line}");
    }
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(v).expect("json values serialize") + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn execute(cmd: &Command, out: &mut dyn Write, created: &mut Outputs) -> Result<()> {
    match cmd {
        Command::Simulate { config, out_dir } => {
            let cfg = config.load()?;
            echo(out, &cfg);
            created.claim(out_dir);
            let dirs = simulate_dataset(&cfg, out_dir)?;
            let _ = writeln!(out, "wrote {} rides to {}", dirs.len(), out_dir.display());
        }
        Command::Train {
            config,
            data_dir,
            out: ckpt,
            log,
        } => {
            let cfg = config.load()?;
            echo(out, &cfg);
            let rides = load_dataset(data_dir)?;
            let result = train_on_rides(&cfg, &rides)?;
            let log_path = log.clone().unwrap_or_else(|| {
                let mut s = ckpt.as_os_str().to_owned();
                s.push(".log.csv");
                PathBuf::from(s)
            });
            checkpoint::save(&result.model, &created.claim(ckpt))?;
            write_train_log(&created.claim(&log_path), &result.log, cfg.moe.n_experts)?;
            let _ = writeln!(
                out,
                "trained on {} rides ({} validation, {} test): phase 1 {} epochs, phase 2 {} epochs",
                result.split.train.len(),
                result.split.val.len(),
                result.split.test.len(),
                result.log.phase_epochs(crate::moenet::Phase::Mse),
                result.log.phase_epochs(crate::moenet::Phase::Nll),
            );
            if let Some(e) = result.test_inference_error {
                let _ = writeln!(out, "test inference error {e:.6} m/s");
            }
        }
        Command::Fuse(a) => {
            let cfg = a.config.load()?;
            echo(out, &cfg);
            let imu = read_imu_csv(&a.imu)?;
            let run = if let Some(ck) = &a.checkpoint {
                let model = checkpoint::load(ck)?;
                fuse(&cfg, &imu, VelocitySource::Network(&model))?
            } else if a.oracle_velocity {
                let truth = read_truth_csv(a.truth.as_ref().expect("clap enforces --truth"))?;
                fuse(&cfg, &imu, VelocitySource::Oracle(&truth))?
            } else {
                fuse(&cfg, &imu, VelocitySource::None)?
            };
            write_trajectory_csv(&created.claim(&a.out), &run.records)?;
            if let Some(m) = &a.measurements {
                write_measurements_csv(&created.claim(m), &run.measurements)?;
            }
            let flag = if run.propagation_only { " (propagation only)" } else { "" };
            let _ = writeln!(
                out,
                "{} epochs, {} updates, {} rejected{flag}",
                run.records.len(),
                run.updates(),
                run.rejected()
            );
        }
        Command::Eval {
            config,
            truth,
            est,
            measurements,
            out: path,
        } => {
            let cfg = config.load()?;
            let meas = measurements.as_deref().map(read_measurements_csv).transpose()?;
            let m = evaluate_files(truth, est, meas.as_deref(), cfg.filter.rte_dt)?;
            let echo = if config.config.is_some() {
                config_json(&cfg)
            } else {
                json!({"filter.rte_dt": cfg.filter.rte_dt.to_string()})
            };
            write_json(&created.claim(path), &m.to_json(echo))?;
            let rte = m.rte.meters().map_or("too short".into(), |r| format!("{r:.4} m"));
            let _ = writeln!(out, "ATE {:.4} m, RTE {rte}, {} epochs", m.ate_m, m.epochs);
        }
    }
    Ok(())
}

/// Runs one parsed command, removing anything it created if it fails.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let mut created = Outputs::default();
    let result = execute(&cli.command, out, &mut created);
    if result.is_err() {
        created.remove();
    }
    result
}

/// One-line, machine-parsable error description.
pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().replace('\n', " ");
    format!("error[{}] exit={}: {msg}", e.kind(), e.exit_code())
}

/// Entry point of the `moelio` binary; returns the process exit status.
pub fn main() -> i32 {
    let cli = Cli::parse();
    let stdout = std::io::stdout();
    match run(&cli, &mut stdout.lock()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            e.exit_code()
        }
    }
}
