//! End-to-end steps shared by the command-line tool and the C interface.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use crate::config::RunConfig;
use crate::ekf::{run_fused, FusedRun, ImuSample, Measurement, MoeVelocity, OracleVelocity, VelocityModel};
use crate::error::{Error, Result};
use crate::eval::{inference_error, read_track, AlignedPair, Metrics};
use crate::io::write_table;
use crate::moenet::{evaluate, train, MoeModel, Sample, TrainLog};
use crate::sim::{
    gen_trajectory, make_windows, random_ride, read_ride, read_truth_csv, split_rides, synthesize_imu, write_ride,
    GroundTruth, Profile, RideSpec, RideSplit, SensorModel,
};

/// One stored or generated ride.
#[derive(Clone, Debug)]
pub struct Ride {
    pub name: String,
    pub imu: Vec<ImuSample>,
    pub truth: GroundTruth,
}

/// Ride `i` of the configured synthetic dataset.
pub fn simulate_ride(cfg: &RunConfig, i: usize) -> Result<(RideSpec, GroundTruth, Vec<ImuSample>)> {
    let seed = cfg.ride_seed(i);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    let sensor = SensorModel::sampled(&cfg.noise, &mut rng);
    let profile = Profile::participant((i % cfg.sim.participants) as u64);
    let spec = random_ride(&cfg.sim.plan, profile, sensor, seed);
    let truth = gen_trajectory(&spec)?;
    let imu = synthesize_imu(&truth, &spec)?;
    Ok((spec, truth, imu))
}

pub fn ride_dir_name(i: usize) -> String {
    format!("ride_{i:03}")
}

/// Writes every configured ride plus `config.txt` under `out`.
pub fn simulate_dataset(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut dirs = Vec::with_capacity(cfg.sim.rides);
    for i in 0..cfg.sim.rides {
        let (spec, truth, imu) = simulate_ride(cfg, i)?;
        let dir = out.join(ride_dir_name(i));
        write_ride(&dir, &spec, &truth, &imu)?;
        dirs.push(dir);
    }
    let echo = out.join("config.txt");
    fs::write(&echo, cfg.to_text()).map_err(|e| Error::io(echo, e))?;
    Ok(dirs)
}

/// Rides stored as subdirectories of `dir`, in name order.
pub fn load_dataset(dir: &Path) -> Result<Vec<Ride>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut dirs = Vec::new();
    for e in entries {
        let path = e.map_err(|e| Error::io(dir, e))?.path();
        if path.join("meta.json").is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Data(format!("{}: no ride directories found", dir.display())));
    }
    dirs.iter()
        .map(|d| {
            let (_, imu, truth) = read_ride(d)?;
            let name = d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            Ok(Ride { name, imu, truth })
        })
        .collect()
}

/// Labeled windows from the selected rides.
pub fn ride_windows(cfg: &RunConfig, rides: &[Ride], idx: &[usize]) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for &i in idx {
        out.extend(make_windows(&rides[i].imu, &rides[i].truth, &cfg.window_config(i))?);
    }
    Ok(out)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: MoeModel,
    pub log: TrainLog,
    pub split: RideSplit,
    /// Inference error on held-out test windows, when there are any.
    pub test_inference_error: Option<f64>,
}

/// Splits `rides` by ride and runs both training phases.
pub fn train_on_rides(cfg: &RunConfig, rides: &[Ride]) -> Result<TrainOutcome> {
    let split = split_rides(rides.len());
    if split.val.is_empty() {
        return Err(Error::Data("training needs at least two rides".into()));
    }
    let train_set = ride_windows(cfg, rides, &split.train)?;
    let val_set = ride_windows(cfg, rides, &split.val)?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Data(format!(
            "rides are shorter than one {}-sample window",
            cfg.moe.window_len
        )));
    }
    let mut model = MoeModel::new(cfg.moe.clone(), cfg.model_seed())?;
    let log = train(&mut model, &train_set, &val_set, &cfg.train_config())?;
    let test_set = ride_windows(cfg, rides, &split.test)?;
    let test_inference_error = if test_set.is_empty() {
        None
    } else {
        let ev = evaluate(&model, &test_set, 256)?;
        let truth: Vec<_> = test_set.iter().map(|s| s.target).collect();
        Some(inference_error(&truth, &ev.predictions)?)
    };
    Ok(TrainOutcome {
        model,
        log,
        split,
        test_inference_error,
    })
}

/// Per-epoch losses with the load and importance of every routed expert.
pub fn write_train_log(path: &Path, log: &TrainLog, n_experts: usize) -> Result<()> {
    let mut header: Vec<String> = ["phase", "epoch", "train_loss", "train_aux", "val_mse", "val_nll"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..n_experts).map(|e| format!("load_{e}")));
    header.extend((0..n_experts).map(|e| format!("importance_{e}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = log.epochs.iter().map(|r| {
        let mut row = vec![r.phase.index() as f64, r.epoch as f64, r.train_loss, r.train_aux, r.val_mse, r.val_nll];
        row.extend(r.load.iter().map(|&l| l as f64));
        row.extend(r.importance.iter().copied());
        row
    });
    write_table(path, &header, rows)
}

/// Where the filter's velocity measurements come from.
pub enum VelocitySource<'a> {
    Network(&'a MoeModel),
    /// Ground-truth body velocity reported with `filter.oracle_sigma`.
    Oracle(&'a GroundTruth),
    None,
}

pub fn fuse(cfg: &RunConfig, imu: &[ImuSample], source: VelocitySource<'_>) -> Result<FusedRun> {
    let fc = cfg.fuse_config();
    let mut oracle;
    let mut net;
    let model: Option<&mut dyn VelocityModel> = match source {
        VelocitySource::Network(m) => {
            if m.config() != &cfg.moe {
                return Err(Error::InvalidConfig(
                    "checkpoint network settings differ from the moe section of the config".into(),
                ));
            }
            net = MoeVelocity::new(m);
            Some(&mut net)
        }
        VelocitySource::Oracle(truth) => {
            oracle = OracleVelocity::new(
                truth.t.clone(),
                truth.v_b.clone(),
                cfg.filter.oracle_sigma.powi(2),
                fc.window_len,
            )?;
            Some(&mut oracle)
        }
        VelocitySource::None => None,
    };
    run_fused(imu, model, &cfg.noise, &fc)
}

/// Inference error of filter measurements against interpolated truth body velocity.
pub fn measurement_error(truth: &GroundTruth, measurements: &[Measurement]) -> Result<f64> {
    let oracle = OracleVelocity::new(truth.t.clone(), truth.v_b.clone(), 1.0, 1)?;
    let (mut v, mut v_hat) = (Vec::new(), Vec::new());
    for m in measurements {
        if m.t < truth.t[0] || m.t > truth.t[truth.len() - 1] {
            continue;
        }
        v.push(oracle.body_velocity(m.t));
        v_hat.push(m.estimate.v_b);
    }
    inference_error(&v, &v_hat)
}

/// Metrics of a trajectory file against a truth file.
pub fn evaluate_files(truth: &Path, est: &Path, measurements: Option<&[Measurement]>, rte_dt: f64) -> Result<Metrics> {
    let truth_track = read_track(truth)?;
    let est_track = read_track(est)?;
    let pair = AlignedPair::align(&truth_track, &est_track)?;
    let inference = match measurements {
        Some(m) if !m.is_empty() => Some(measurement_error(&read_truth_csv(truth)?, m)?),
        _ => None,
    };
    Metrics::compute(&pair, rte_dt, inference)
}

/// Config echo as a JSON object of `key: value` strings.
pub fn config_json(cfg: &RunConfig) -> Value {
    let map = cfg
        .to_text()
        .lines()
        .filter_map(|l| l.split_once(" = "))
        .map(|(k, v)| (k.to_owned(), Value::String(v.to_owned())))
        .collect();
    Value::Object(map)
}
