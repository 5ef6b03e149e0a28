//! Error-state EKF coupling strapdown mechanization with body-frame velocity
//! measurements.
//!
//! Frames: the navigation frame is local-level NED with gravity
//! `g = [0, 0, +9.81]`; the body frame is forward-right-down and `R` maps
//! body to navigation. The attitude error is a left perturbation,
//! `R_true = exp(φ)·R̂`. Error-state order is `(φ, δv, δp, δb_g, δb_a)`.

mod fused;

pub use fused::{
    read_measurements_csv, run_fused, trajectory_row, write_measurements_csv, write_trajectory_csv, FuseConfig,
    FusedRun, Measurement, MoeVelocity, OracleVelocity, TrajectoryRecord, VelocityModel, MEASUREMENT_HEADER,
    TRAJECTORY_HEADER,
};

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};

use crate::geom::{exp_unchecked, hat, Rotation};
use crate::error::{Error, Result};
use crate::moenet::VelocityEstimate;

pub const GRAVITY: f64 = 9.81;

/// Navigation-frame gravity vector (NED, z down).
pub fn gravity() -> Vector3<f64> {
    Vector3::new(0.0, 0.0, GRAVITY)
}

pub type Cov15 = SMatrix<f64, 15, 15>;
pub type Vec15 = SVector<f64, 15>;

pub const PHI: usize = 0;
pub const DV: usize = 3;
pub const DP: usize = 6;
pub const DBG: usize = 9;
pub const DBA: usize = 12;

/// Chi-square 0.999 quantile with 3 degrees of freedom.
pub const DEFAULT_GATE: f64 = 16.27;

#[derive(Clone, Debug, PartialEq)]
pub struct NavState {
    pub r: Rotation,
    pub v: Vector3<f64>,
    pub p: Vector3<f64>,
    pub b_g: Vector3<f64>,
    pub b_a: Vector3<f64>,
}

impl NavState {
    pub fn at_rest(r: Rotation) -> Self {
        NavState {
            r,
            v: Vector3::zeros(),
            p: Vector3::zeros(),
            b_g: Vector3::zeros(),
            b_a: Vector3::zeros(),
        }
    }

    fn check_finite(&self) -> Result<()> {
        let ok = self.r.matrix().iter().all(|x| x.is_finite())
            && [self.v, self.p, self.b_g, self.b_a].iter().all(|v| v.iter().all(|x| x.is_finite()));
        if ok {
            Ok(())
        } else {
            Err(Error::NonFinite("navigation state"))
        }
    }

    /// Injects an error state: `R ← exp(φ)·R`, additive elsewhere.
    pub fn boxplus(&self, dx: &Vec15) -> NavState {
        let blk = |i: usize| Vector3::new(dx[i], dx[i + 1], dx[i + 2]);
        NavState {
            r: (exp_unchecked(&blk(PHI)) * self.r).renormalize_if_drifted(),
            v: self.v + blk(DV),
            p: self.p + blk(DP),
            b_g: self.b_g + blk(DBG),
            b_a: self.b_a + blk(DBA),
        }
    }

    /// The error state taking `other` to `self`: `φ = log(R·R̂ᵀ)`.
    pub fn boxminus(&self, other: &NavState) -> Vec15 {
        let phi = (self.r * other.r.transpose()).log().0;
        let mut dx = Vec15::zeros();
        for (i, v) in [(PHI, phi), (DV, self.v - other.v), (DP, self.p - other.p), (DBG, self.b_g - other.b_g), (DBA, self.b_a - other.b_a)] {
            dx.fixed_rows_mut::<3>(i).copy_from(&v);
        }
        dx
    }
}

/// Sensor noise densities and initial uncertainty.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseParams {
    /// rad/s/√Hz
    pub gyro_noise: f64,
    /// m/s²/√Hz
    pub accel_noise: f64,
    /// rad/s²/√Hz
    pub gyro_bias_walk: f64,
    /// m/s³/√Hz
    pub accel_bias_walk: f64,
    pub init_att: f64,
    pub init_vel: f64,
    pub init_pos: f64,
    pub init_gyro_bias: f64,
    pub init_accel_bias: f64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        NoiseParams {
            gyro_noise: 0.01,
            accel_noise: 0.1,
            gyro_bias_walk: 1e-5,
            accel_bias_walk: 1e-4,
            init_att: 0.02,
            init_vel: 0.1,
            init_pos: 0.01,
            init_gyro_bias: 0.005,
            init_accel_bias: 0.05,
        }
    }
}

impl NoiseParams {
    pub fn entries(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("gyro", self.gyro_noise),
            ("accel", self.accel_noise),
            ("gyro_bias_walk", self.gyro_bias_walk),
            ("accel_bias_walk", self.accel_bias_walk),
            ("init_att", self.init_att),
            ("init_vel", self.init_vel),
            ("init_pos", self.init_pos),
            ("init_gyro_bias", self.init_gyro_bias),
            ("init_accel_bias", self.init_accel_bias),
        ]
    }

    pub fn field_mut(&mut self, key: &str) -> Option<&mut f64> {
        Some(match key {
            "gyro" => &mut self.gyro_noise,
            "accel" => &mut self.accel_noise,
            "gyro_bias_walk" => &mut self.gyro_bias_walk,
            "accel_bias_walk" => &mut self.accel_bias_walk,
            "init_att" => &mut self.init_att,
            "init_vel" => &mut self.init_vel,
            "init_pos" => &mut self.init_pos,
            "init_gyro_bias" => &mut self.init_gyro_bias,
            "init_accel_bias" => &mut self.init_accel_bias,
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        match self.entries().into_iter().find(|(_, v)| !(*v > 0.0) || !v.is_finite()) {
            Some((k, v)) => Err(Error::InvalidConfig(format!("noise.{k} must be positive (got {v})"))),
            None => Ok(()),
        }
    }

    pub fn initial_cov(&self) -> Cov15 {
        let mut p = Cov15::zeros();
        for (i, s) in [
            (PHI, self.init_att),
            (DV, self.init_vel),
            (DP, self.init_pos),
            (DBG, self.init_gyro_bias),
            (DBA, self.init_accel_bias),
        ] {
            for k in 0..3 {
                p[(i + k, i + k)] = s * s;
            }
        }
        p
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    /// Angular rate, rad/s.
    pub gyro: Vector3<f64>,
    /// Specific force, m/s².
    pub accel: Vector3<f64>,
}

/// Roll and pitch from an averaged static specific force, yaw zero.
pub fn level(f: &Vector3<f64>) -> Result<Rotation> {
    if !f.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("leveling specific force"));
    }
    let m = f.norm();
    if (m - GRAVITY).abs() > 0.2 * GRAVITY {
        return Err(Error::NotStationary {
            magnitude: m,
            gravity: GRAVITY,
        });
    }
    let roll = (-f.y).atan2(-f.z);
    let pitch = f.x.atan2(f.y.hypot(f.z));
    Ok(Rotation::from_euler(roll, pitch, 0.0))
}

/// Static initialization from the mean specific force of `samples`.
pub fn init(samples: &[ImuSample], noise: &NoiseParams) -> Result<(NavState, Cov15)> {
    noise.validate()?;
    if samples.is_empty() {
        return Err(Error::Data("static initialization needs at least one sample".into()));
    }
    let mean = samples.iter().map(|s| s.accel).sum::<Vector3<f64>>() / samples.len() as f64;
    Ok((NavState::at_rest(level(&mean)?), noise.initial_cov()))
}

fn symmetrize(p: &mut Cov15) {
    *p = (*p + p.transpose()) * 0.5;
}

/// One mechanization step with sample `s` held over `dt`, plus covariance
/// propagation.
pub fn propagate(state: &NavState, cov: &Cov15, s: &ImuSample, dt: f64, noise: &NoiseParams) -> Result<(NavState, Cov15)> {
    if !(dt > 0.0 && dt <= 0.1) {
        return Err(Error::Contract(format!("propagation step {dt} s outside (0, 0.1]")));
    }
    if !s.gyro.iter().chain(s.accel.iter()).all(|x| x.is_finite()) {
        return Err(Error::NonFinite("imu sample"));
    }
    let r = state.r.matrix();
    let w = s.gyro - state.b_g;
    let f = s.accel - state.b_a;
    let a_n = r * f;

    let r_new = (state.r * exp_unchecked(&(w * dt))).renormalize_if_drifted();
    let v_new = state.v + (a_n + gravity()) * dt;
    let p_new = state.p + 0.5 * (state.v + v_new) * dt;
    let next = NavState {
        r: r_new,
        v: v_new,
        p: p_new,
        b_g: state.b_g,
        b_a: state.b_a,
    };
    next.check_finite()?;

    let mut a = Cov15::identity();
    for (i, j, m) in [(PHI, DBG, -r), (DV, PHI, -hat(&a_n)), (DV, DBA, -r), (DP, DV, Matrix3::identity())] {
        a.fixed_view_mut::<3, 3>(i, j).copy_from(&(m * dt));
    }

    // B·Q·Bᵀ with B = blockdiag(−R, −R, I, I) on (φ, δv, δb_g, δb_a)
    let mut q = Cov15::zeros();
    let gyro = noise.gyro_noise.powi(2) * dt;
    let accel = noise.accel_noise.powi(2) * dt;
    let rrt = r * r.transpose();
    q.fixed_view_mut::<3, 3>(PHI, PHI).copy_from(&(rrt * gyro));
    q.fixed_view_mut::<3, 3>(DV, DV).copy_from(&(rrt * accel));
    for k in 0..3 {
        q[(DBG + k, DBG + k)] = noise.gyro_bias_walk.powi(2) * dt;
        q[(DBA + k, DBA + k)] = noise.accel_bias_walk.powi(2) * dt;
    }
    let mut p = a * cov * a.transpose() + q;
    symmetrize(&mut p);
    if !p.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("propagated covariance"));
    }
    Ok((next, p))
}

/// Measurement model `h = R̂ᵀ·v̂ⁿ`.
pub fn predict_body_velocity(state: &NavState) -> Vector3<f64> {
    state.r.matrix().transpose() * state.v
}

/// `∂h/∂δx`, nonzero in the attitude and velocity blocks.
pub fn measurement_jacobian(state: &NavState) -> SMatrix<f64, 3, 15> {
    let rt = state.r.matrix().transpose();
    let mut h = SMatrix::<f64, 3, 15>::zeros();
    h.fixed_view_mut::<3, 3>(0, PHI).copy_from(&(rt * hat(&state.v)));
    h.fixed_view_mut::<3, 3>(0, DV).copy_from(&rt);
    h
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UpdateOutcome {
    Accepted { mahalanobis: f64 },
    /// Innovation failed the chi-square gate; state and covariance unchanged.
    Rejected { mahalanobis: f64 },
}

impl UpdateOutcome {
    pub fn accepted(&self) -> bool {
        matches!(self, UpdateOutcome::Accepted { .. })
    }
}

/// Kalman update with a body-frame velocity measurement. Pass `gate = None`
/// to disable innovation gating.
pub fn update_velocity(
    state: &NavState,
    cov: &Cov15,
    meas: &VelocityEstimate,
    gate: Option<f64>,
) -> Result<(NavState, Cov15, UpdateOutcome)> {
    if meas.sigma_diag.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Contract("measurement variance must be positive".into()));
    }
    let h = measurement_jacobian(state);
    let sigma = Matrix3::from_diagonal(&meas.sigma_diag);
    let innovation = meas.v_b - predict_body_velocity(state);
    let s = h * cov * h.transpose() + sigma;
    let s = (s + s.transpose()) * 0.5;
    let chol = s
        .cholesky()
        .ok_or_else(|| Error::Numeric("innovation covariance is not positive definite".into()))?;
    let d2 = innovation.dot(&chol.solve(&innovation));
    if let Some(g) = gate {
        if d2 > g {
            return Ok((state.clone(), *cov, UpdateOutcome::Rejected { mahalanobis: d2 }));
        }
    }
    // K = P Hᵀ S⁻¹, computed as (S⁻¹ H P)ᵀ with symmetric P and S
    let k = chol.solve(&(h * cov)).transpose();
    let dx = k * innovation;
    let ikh = Cov15::identity() - k * h;
    let mut p = ikh * cov * ikh.transpose() + k * sigma * k.transpose();
    symmetrize(&mut p);
    let next = state.boxplus(&dx);
    next.check_finite()?;
    Ok((next, p, UpdateOutcome::Accepted { mahalanobis: d2 }))
}

/// A sequential filter instance over one IMU stream.
#[derive(Clone, Debug)]
pub struct Ekf {
    pub state: NavState,
    pub cov: Cov15,
    pub noise: NoiseParams,
    pub gate: Option<f64>,
    last_sample_t: Option<f64>,
}

impl Ekf {
    pub fn new(state: NavState, cov: Cov15, noise: NoiseParams, gate: Option<f64>) -> Result<Self> {
        noise.validate()?;
        state.check_finite()?;
        Ok(Ekf {
            state,
            cov,
            noise,
            gate,
            last_sample_t: None,
        })
    }

    /// Static initialization; see [`init`].
    pub fn from_static(samples: &[ImuSample], noise: NoiseParams, gate: Option<f64>) -> Result<Self> {
        let (state, cov) = init(samples, &noise)?;
        Ekf::new(state, cov, noise, gate)
    }

    /// Propagates with `s` over `dt`. Sample times must strictly increase.
    pub fn propagate(&mut self, s: &ImuSample, dt: f64) -> Result<()> {
        if let Some(prev) = self.last_sample_t {
            if !(s.t > prev) {
                return Err(Error::Data(format!("non-increasing IMU timestamp {} after {prev}", s.t)));
            }
        }
        let (state, cov) = propagate(&self.state, &self.cov, s, dt, &self.noise)?;
        self.state = state;
        self.cov = cov;
        self.last_sample_t = Some(s.t);
        Ok(())
    }

    pub fn update_velocity(&mut self, meas: &VelocityEstimate) -> Result<UpdateOutcome> {
        let (state, cov, out) = update_velocity(&self.state, &self.cov, meas, self.gate)?;
        self.state = state;
        self.cov = cov;
        Ok(out)
    }
}
