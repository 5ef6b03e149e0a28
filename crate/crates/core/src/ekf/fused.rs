use std::collections::VecDeque;
use std::path::Path;

use nalgebra::Vector3;

use super::{Cov15, Ekf, ImuSample, NavState, NoiseParams, UpdateOutcome, DEFAULT_GATE};
use crate::error::{Error, Result};
use crate::geom::Rotation;
use crate::io::{read_table, write_table};
use crate::moenet::{Capacity, ImuWindow, MoeModel, VelocityEstimate};

/// Source of body-frame velocity measurements for the filter.
pub trait VelocityModel {
    fn window_len(&self) -> usize;
    /// Measurement for the window ending at epoch time `t`.
    fn estimate(&mut self, t: f64, window: &ImuWindow) -> Result<VelocityEstimate>;
}

pub struct MoeVelocity<'m> {
    model: &'m MoeModel,
}

impl<'m> MoeVelocity<'m> {
    pub fn new(model: &'m MoeModel) -> Self {
        MoeVelocity { model }
    }
}

impl VelocityModel for MoeVelocity<'_> {
    fn window_len(&self) -> usize {
        self.model.config().window_len
    }

    fn estimate(&mut self, _t: f64, window: &ImuWindow) -> Result<VelocityEstimate> {
        let (mut est, _) = self.model.predict(std::slice::from_ref(window), Capacity::Batch)?;
        Ok(est.remove(0))
    }
}

/// Ground-truth body velocity with a fixed, tight variance.
pub struct OracleVelocity {
    times: Vec<f64>,
    v_b: Vec<Vector3<f64>>,
    variance: f64,
    window_len: usize,
}

impl OracleVelocity {
    pub fn new(times: Vec<f64>, v_b: Vec<Vector3<f64>>, variance: f64, window_len: usize) -> Result<Self> {
        if times.is_empty() || times.len() != v_b.len() || times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Data("oracle truth must be non-empty with increasing timestamps".into()));
        }
        Ok(OracleVelocity {
            times,
            v_b,
            variance,
            window_len,
        })
    }

    /// Truth body velocity linearly interpolated at `t`, clamped at the ends.
    pub fn body_velocity(&self, t: f64) -> Vector3<f64> {
        let i = self.times.partition_point(|&x| x <= t);
        if i == 0 {
            return self.v_b[0];
        }
        if i == self.times.len() {
            return self.v_b[i - 1];
        }
        let (t0, t1) = (self.times[i - 1], self.times[i]);
        let s = (t - t0) / (t1 - t0);
        self.v_b[i - 1] * (1.0 - s) + self.v_b[i] * s
    }
}

impl VelocityModel for OracleVelocity {
    fn window_len(&self) -> usize {
        self.window_len
    }

    fn estimate(&mut self, t: f64, _window: &ImuWindow) -> Result<VelocityEstimate> {
        VelocityEstimate::new(self.body_velocity(t), Vector3::repeat(self.variance))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FuseConfig {
    pub rate_hz: f64,
    pub window_len: usize,
    /// IMU samples between measurement updates.
    pub stride: usize,
    pub gate: Option<f64>,
    /// Leading samples averaged for static leveling.
    pub static_samples: usize,
}

impl Default for FuseConfig {
    fn default() -> Self {
        FuseConfig {
            rate_hz: 100.0,
            window_len: 200,
            stride: 10,
            gate: Some(DEFAULT_GATE),
            static_samples: 100,
        }
    }
}

impl FuseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rate_hz > 0.0) || self.window_len == 0 || self.stride == 0 || self.static_samples == 0 {
            return Err(Error::InvalidConfig(
                "filter.rate_hz, filter.stride and filter.static_samples must be positive".into(),
            ));
        }
        if let Some(g) = self.gate {
            if !(g > 0.0) {
                return Err(Error::InvalidConfig(format!("filter.gate must be positive (got {g})")));
            }
        }
        Ok(())
    }

    /// Number of updates for a stream of `n` samples.
    pub fn expected_updates(&self, n: usize) -> usize {
        if n < self.window_len {
            0
        } else {
            (n - self.window_len) / self.stride + 1
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub t: f64,
    pub state: NavState,
    pub p_diag: [f64; 15],
}

impl TrajectoryRecord {
    fn new(t: f64, state: &NavState, cov: &Cov15) -> Self {
        let mut p_diag = [0.0; 15];
        for (i, d) in p_diag.iter_mut().enumerate() {
            *d = cov[(i, i)];
        }
        TrajectoryRecord {
            t,
            state: state.clone(),
            p_diag,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    pub t: f64,
    pub estimate: VelocityEstimate,
    pub outcome: UpdateOutcome,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedRun {
    pub records: Vec<TrajectoryRecord>,
    pub measurements: Vec<Measurement>,
    /// True when no update could run (no model, or stream shorter than a window).
    pub propagation_only: bool,
}

impl FusedRun {
    pub fn updates(&self) -> usize {
        self.measurements.len()
    }

    pub fn rejected(&self) -> usize {
        self.measurements.iter().filter(|m| !m.outcome.accepted()).count()
    }
}

fn check_rate(imu: &[ImuSample], rate_hz: f64) -> Result<()> {
    let dt = 1.0 / rate_hz;
    for w in imu.windows(2) {
        let d = w[1].t - w[0].t;
        if !(d > 0.0) {
            return Err(Error::Data(format!("non-increasing IMU timestamp {} after {}", w[1].t, w[0].t)));
        }
        if (d - dt).abs() > 0.01 * dt {
            return Err(Error::Data(format!(
                "IMU interval {d} s at t = {} does not match the configured {rate_hz} Hz",
                w[0].t
            )));
        }
    }
    Ok(())
}

fn body_up(r: &Rotation) -> Vector3<f64> {
    r.matrix().transpose() * Vector3::new(0.0, 0.0, 1.0)
}

/// Propagates through `imu`, updating with `model` every `stride` samples
/// once a full window is available. Pass `None` for propagation only.
pub fn run_fused(imu: &[ImuSample], mut model: Option<&mut dyn VelocityModel>, noise: &NoiseParams, cfg: &FuseConfig) -> Result<FusedRun> {
    cfg.validate()?;
    if imu.is_empty() {
        return Err(Error::Data("empty IMU stream".into()));
    }
    if let Some(m) = model.as_deref() {
        if m.window_len() != cfg.window_len {
            return Err(Error::InvalidConfig(format!(
                "model window length {} does not match the configured L = {}",
                m.window_len(),
                cfg.window_len
            )));
        }
    }
    check_rate(imu, cfg.rate_hz)?;
    let l = cfg.window_len;
    let static_n = cfg.static_samples.min(imu.len());
    let mut ekf = Ekf::from_static(&imu[..static_n], *noise, cfg.gate)?;

    let mut history: VecDeque<[Vector3<f64>; 3]> = VecDeque::with_capacity(l);
    let mut records = Vec::with_capacity(imu.len());
    let mut measurements = Vec::new();
    for (k, s) in imu.iter().enumerate() {
        if history.len() == l {
            history.pop_front();
        }
        history.push_back([s.gyro, s.accel, body_up(&ekf.state.r)]);
        if let Some(m) = model.as_deref_mut() {
            if k + 1 >= l && (k + 1 - l).is_multiple_of(cfg.stride) {
                let cols: Vec<_> = history.iter().copied().collect();
                let window = ImuWindow::from_columns(&cols)?;
                let estimate = m.estimate(s.t, &window)?;
                let outcome = ekf.update_velocity(&estimate)?;
                measurements.push(Measurement { t: s.t, estimate, outcome });
            }
        }
        records.push(TrajectoryRecord::new(s.t, &ekf.state, &ekf.cov));
        if let Some(next) = imu.get(k + 1) {
            ekf.propagate(s, next.t - s.t)?;
        }
    }
    Ok(FusedRun {
        records,
        propagation_only: measurements.is_empty(),
        measurements,
    })
}

pub const TRAJECTORY_HEADER: [&str; 32] = [
    "t", "qw", "qx", "qy", "qz", "vx", "vy", "vz", "px", "py", "pz", "bgx", "bgy", "bgz", "bax", "bay", "baz", "P_phix",
    "P_phiy", "P_phiz", "P_vx", "P_vy", "P_vz", "P_px", "P_py", "P_pz", "P_bgx", "P_bgy", "P_bgz", "P_bax", "P_bay",
    "P_baz",
];

pub fn trajectory_row(r: &TrajectoryRecord) -> Vec<f64> {
    let mut row = Vec::with_capacity(32);
    row.push(r.t);
    row.extend(r.state.r.to_quaternion());
    for v in [r.state.v, r.state.p, r.state.b_g, r.state.b_a] {
        row.extend(v.iter());
    }
    row.extend(r.p_diag);
    row
}

pub fn write_trajectory_csv(path: &Path, records: &[TrajectoryRecord]) -> Result<()> {
    write_table(path, &TRAJECTORY_HEADER, records.iter().map(trajectory_row))
}

pub const MEASUREMENT_HEADER: [&str; 9] = ["t", "vx", "vy", "vz", "var_x", "var_y", "var_z", "accepted", "mahalanobis"];

pub fn write_measurements_csv(path: &Path, measurements: &[Measurement]) -> Result<()> {
    let rows = measurements.iter().map(|m| {
        let (accepted, d2) = match m.outcome {
            UpdateOutcome::Accepted { mahalanobis } => (1.0, mahalanobis),
            UpdateOutcome::Rejected { mahalanobis } => (0.0, mahalanobis),
        };
        let mut row = vec![m.t];
        row.extend(m.estimate.v_b.iter().chain(m.estimate.sigma_diag.iter()));
        row.extend([accepted, d2]);
        row
    });
    write_table(path, &MEASUREMENT_HEADER, rows)
}

pub fn read_measurements_csv(path: &Path) -> Result<Vec<Measurement>> {
    read_table(path, &MEASUREMENT_HEADER)?
        .into_iter()
        .map(|r| {
            let outcome = if r[7] != 0.0 {
                UpdateOutcome::Accepted { mahalanobis: r[8] }
            } else {
                UpdateOutcome::Rejected { mahalanobis: r[8] }
            };
            Ok(Measurement {
                t: r[0],
                estimate: VelocityEstimate::new(Vector3::new(r[1], r[2], r[3]), Vector3::new(r[4], r[5], r[6]))?,
                outcome,
            })
        })
        .collect()
}
