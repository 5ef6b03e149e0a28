//! On-disk ride layout: `imu.csv`, `truth.csv` and a `meta.json` sidecar.

use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use serde_json::{json, Value};

use super::{GroundTruth, RideSpec, Segment};
use crate::ekf::{ImuSample, GRAVITY};
use crate::error::{Error, Result};
use crate::geom::rot_from_quaternion;
use crate::io::{read_table, write_table};

pub const IMU_HEADER: [&str; 7] = ["t", "gx", "gy", "gz", "ax", "ay", "az"];
pub const TRUTH_HEADER: [&str; 11] = ["t", "qw", "qx", "qy", "qz", "vx", "vy", "vz", "px", "py", "pz"];

/// Facts about a stored ride needed to consume it.
#[derive(Clone, Debug, PartialEq)]
pub struct RideMeta {
    pub rate_hz: f64,
    pub seed: u64,
    pub samples: usize,
    pub duration: f64,
    pub roughness: f64,
}

impl RideMeta {
    pub fn to_json(&self, spec: Option<&RideSpec>) -> Value {
        let mut v = json!({
            "rate_hz": self.rate_hz,
            "seed": self.seed,
            "samples": self.samples,
            "duration_s": self.duration,
            "roughness": self.roughness,
            "gravity_mps2": [0.0, 0.0, GRAVITY],
            "nav_frame": "NED",
            "body_frame": "FRD",
            "quaternion": "Hamilton, scalar first, body to nav",
            "imu_units": {"gyro": "rad/s", "accel": "m/s^2 specific force"},
        });
        if let Some(spec) = spec {
            v["segments"] = spec.segments.iter().map(segment_json).collect();
            v["profile"] = json!({
                "speed_scale": spec.profile.speed_scale,
                "cadence_per_speed": spec.profile.cadence_per_speed,
                "sway": spec.profile.sway,
            });
            let s = &spec.sensor;
            v["sensor"] = json!({
                "gyro_noise": s.gyro_noise,
                "accel_noise": s.accel_noise,
                "gyro_bias_walk": s.gyro_bias_walk,
                "accel_bias_walk": s.accel_bias_walk,
                "gyro_bias": s.gyro_bias.as_slice(),
                "accel_bias": s.accel_bias.as_slice(),
            });
        }
        v
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        let num = |k: &str| {
            v.get(k)
                .and_then(Value::as_f64)
                .ok_or_else(|| Error::Data(format!("meta.json: missing number {k:?}")))
        };
        let int = |k: &str| {
            v.get(k)
                .and_then(Value::as_u64)
                .ok_or_else(|| Error::Data(format!("meta.json: missing integer {k:?}")))
        };
        Ok(RideMeta {
            rate_hz: num("rate_hz")?,
            seed: int("seed")?,
            samples: int("samples")? as usize,
            duration: num("duration_s")?,
            roughness: num("roughness")?,
        })
    }
}

fn segment_json(s: &Segment) -> Value {
    match *s {
        Segment::Straight { duration, speed } => json!({"kind": "straight", "duration": duration, "speed": speed}),
        Segment::Turn { radius, angle, speed } => {
            json!({"kind": "turn", "radius": radius, "angle": angle, "speed": speed})
        }
        Segment::Stop { duration } => json!({"kind": "stop", "duration": duration}),
    }
}

pub fn write_imu_csv(path: &Path, imu: &[ImuSample]) -> Result<()> {
    let rows = imu.iter().map(|s| {
        let mut r = vec![s.t];
        r.extend(s.gyro.iter().chain(s.accel.iter()));
        r
    });
    write_table(path, &IMU_HEADER, rows)
}

pub fn read_imu_csv(path: &Path) -> Result<Vec<ImuSample>> {
    let rows = read_table(path, &IMU_HEADER)?;
    let imu: Vec<ImuSample> = rows
        .iter()
        .map(|r| ImuSample {
            t: r[0],
            gyro: Vector3::new(r[1], r[2], r[3]),
            accel: Vector3::new(r[4], r[5], r[6]),
        })
        .collect();
    check_increasing(path, imu.iter().map(|s| s.t))?;
    Ok(imu)
}

pub fn write_truth_csv(path: &Path, truth: &GroundTruth) -> Result<()> {
    let rows = (0..truth.len()).map(|k| {
        let mut r = vec![truth.t[k]];
        r.extend(truth.r[k].to_quaternion());
        r.extend(truth.v_n[k].iter().chain(truth.p_n[k].iter()));
        r
    });
    write_table(path, &TRUTH_HEADER, rows)
}

pub fn read_truth_csv(path: &Path) -> Result<GroundTruth> {
    let rows = read_table(path, &TRUTH_HEADER)?;
    let mut g = GroundTruth::default();
    for row in &rows {
        let r = rot_from_quaternion([row[1], row[2], row[3], row[4]])?;
        let v = Vector3::new(row[5], row[6], row[7]);
        g.t.push(row[0]);
        g.v_b.push(r.matrix().transpose() * v);
        g.r.push(r);
        g.v_n.push(v);
        g.p_n.push(Vector3::new(row[8], row[9], row[10]));
    }
    check_increasing(path, g.t.iter().copied())?;
    Ok(g)
}

fn check_increasing(path: &Path, t: impl Iterator<Item = f64>) -> Result<()> {
    let mut prev = f64::NEG_INFINITY;
    for (i, t) in t.enumerate() {
        if t <= prev {
            return Err(Error::Data(format!(
                "{}: line {}: timestamp {t} does not increase",
                path.display(),
                i + 2
            )));
        }
        prev = t;
    }
    Ok(())
}

/// Writes `imu.csv`, `truth.csv` and `meta.json` into `dir`, creating it.
pub fn write_ride(dir: &Path, spec: &RideSpec, truth: &GroundTruth, imu: &[ImuSample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_imu_csv(&dir.join("imu.csv"), imu)?;
    write_truth_csv(&dir.join("truth.csv"), truth)?;
    let meta = RideMeta {
        rate_hz: spec.rate_hz,
        seed: spec.seed,
        samples: imu.len(),
        duration: truth.t.last().copied().unwrap_or(0.0),
        roughness: spec.roughness,
    };
    let path = dir.join("meta.json");
    let text = serde_json::to_string_pretty(&meta.to_json(Some(spec))).expect("json values serialize");
    fs::write(&path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Reads a ride written by [`write_ride`], checking the files agree.
pub fn read_ride(dir: &Path) -> Result<(RideMeta, Vec<ImuSample>, GroundTruth)> {
    let path = dir.join("meta.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let meta = RideMeta::from_json(&v)?;
    let imu = read_imu_csv(&dir.join("imu.csv"))?;
    let truth = read_truth_csv(&dir.join("truth.csv"))?;
    if imu.len() != truth.len() || imu.len() != meta.samples {
        return Err(Error::Data(format!(
            "{}: {} IMU rows, {} truth rows, meta says {}",
            dir.display(),
            imu.len(),
            truth.len(),
            meta.samples
        )));
    }
    if imu.iter().zip(&truth.t).any(|(s, t)| s.t != *t) {
        return Err(Error::Data(format!("{}: IMU and truth timestamps differ", dir.display())));
    }
    Ok((meta, imu, truth))
}
