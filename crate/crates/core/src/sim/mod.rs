//! Synthetic bicycle rides: exact kinematics and the IMU streams they induce.

mod dataset;
mod files;
mod plan;
mod trajectory;

pub use dataset::{make_windows, split_rides, window_columns, RideSplit, WindowConfig};
pub use files::{
    read_imu_csv, read_ride, read_truth_csv, write_imu_csv, write_ride, write_truth_csv, RideMeta, IMU_HEADER,
    TRUTH_HEADER,
};
pub use plan::{random_ride, PlanConfig};
pub use trajectory::{
    gen_trajectory, GroundTruth, Profile, RideSpec, Segment, SensorModel, MAX_CENTRIPETAL, MAX_SPEED, MIN_RADIUS,
};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::ekf::{gravity, ImuSample};
use crate::error::Result;

/// Gyro and specific force that reproduce `truth` exactly under
/// mechanization, followed by sensor errors from `spec.sensor`.
///
/// Sample `k` covers `[t_k, t_{k+1}]`; the last sample repeats the previous one.
pub fn synthesize_imu(truth: &GroundTruth, spec: &RideSpec) -> Result<Vec<ImuSample>> {
    spec.validate()?;
    let n = truth.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let (gyro, accel) = if n == 1 {
            (Vector3::zeros(), truth.r[0].matrix().transpose() * -gravity())
        } else {
            let i = k.min(n - 2);
            let dt = truth.t[i + 1] - truth.t[i];
            let inc = truth.r[i].transpose() * truth.r[i + 1];
            let w = inc.log().0 / dt;
            let a = (truth.v_n[i + 1] - truth.v_n[i]) / dt;
            (w, truth.r[i].matrix().transpose() * (a - gravity()))
        };
        out.push(ImuSample { t: truth.t[k], gyro, accel });
    }

    let s = &spec.sensor;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(0x1_0000));
    let mut normal = || Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
    let sqrt_rate = spec.rate_hz.sqrt();
    let sqrt_dt = 1.0 / sqrt_rate;
    let (mut bg, mut ba) = (s.gyro_bias, s.accel_bias);
    for sample in &mut out {
        let (ng, na, wg, wa) = (normal(), normal(), normal(), normal());
        sample.gyro += bg + ng * (s.gyro_noise * sqrt_rate);
        sample.accel += ba + na * (s.accel_noise * sqrt_rate);
        bg += wg * (s.gyro_bias_walk * sqrt_dt);
        ba += wa * (s.accel_bias_walk * sqrt_dt);
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
