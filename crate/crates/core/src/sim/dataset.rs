use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::GroundTruth;
use crate::ekf::ImuSample;
use crate::error::{Error, Result};
use crate::geom::{exp_unchecked, Rotation};
use crate::moenet::{ImuWindow, Sample};

#[derive(Clone, Debug, PartialEq)]
pub struct WindowConfig {
    pub window_len: usize,
    pub stride: usize,
    /// Per-axis standard deviation of the orientation perturbation, rad.
    pub orientation_sigma: f64,
    pub seed: u64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            window_len: 200,
            stride: 10,
            orientation_sigma: 2f64.to_radians(),
            seed: 0,
        }
    }
}

/// Network input columns `(gyro, accel, body-frame up)` for one epoch.
pub fn window_columns(s: &ImuSample, r: &Rotation) -> [Vector3<f64>; 3] {
    [s.gyro, s.accel, r.matrix().transpose() * Vector3::new(0.0, 0.0, 1.0)]
}

/// Sliding windows over one ride, labeled with the body velocity at each
/// window's last epoch. The orientation rows use the true attitude under a
/// random rotation held constant within a window.
pub fn make_windows(imu: &[ImuSample], truth: &GroundTruth, cfg: &WindowConfig) -> Result<Vec<Sample>> {
    if imu.len() != truth.len() {
        return Err(Error::Data(format!("{} IMU samples for {} truth epochs", imu.len(), truth.len())));
    }
    if cfg.window_len == 0 || cfg.stride == 0 {
        return Err(Error::InvalidConfig("window length and stride must be positive".into()));
    }
    let l = cfg.window_len;
    if imu.len() < l {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity((imu.len() - l) / cfg.stride + 1);
    for end in (l - 1..imu.len()).step_by(cfg.stride) {
        let delta = Vector3::from_fn(|_, _| cfg.orientation_sigma * rng.sample::<f64, _>(StandardNormal));
        let tilt = exp_unchecked(&delta);
        let cols: Vec<_> = (end + 1 - l..=end)
            .map(|k| window_columns(&imu[k], &(tilt * truth.r[k])))
            .collect();
        out.push(Sample {
            t: truth.t[end],
            window: ImuWindow::from_columns(&cols)?,
            target: truth.v_b[end],
        });
    }
    Ok(out)
}

/// Ride indices assigned to each split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RideSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// 70/10/20 split by ride: the last rides are held out for test, the ones
/// before them for validation. At least one validation ride is kept once
/// there are two rides.
pub fn split_rides(n: usize) -> RideSplit {
    let n_val = if n >= 2 { ((0.1 * n as f64).round() as usize).max(1) } else { 0 };
    let n_test = ((0.2 * n as f64).round() as usize).min(n.saturating_sub(n_val + 1));
    let n_train = n - n_val - n_test;
    RideSplit {
        train: (0..n_train).collect(),
        val: (n_train..n_train + n_val).collect(),
        test: (n_train + n_val..n).collect(),
    }
}
