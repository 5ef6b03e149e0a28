use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ekf::{NoiseParams, GRAVITY};
use rand_distr::StandardNormal;
use crate::error::{Error, Result};
use crate::geom::{exp_unchecked, Rotation};

/// Largest centripetal acceleration a ride may demand, m/s².
pub const MAX_CENTRIPETAL: f64 = 6.0;
pub const MAX_SPEED: f64 = 10.0;
pub const MIN_RADIUS: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Segment {
    Straight { duration: f64, speed: f64 },
    /// Constant-radius arc; a positive angle turns right (clockwise seen from above).
    Turn { radius: f64, angle: f64, speed: f64 },
    Stop { duration: f64 },
}

impl Segment {
    pub fn duration(&self) -> f64 {
        match *self {
            Segment::Straight { duration, .. } | Segment::Stop { duration } => duration,
            Segment::Turn { radius, angle, speed } => angle.abs() * radius / speed,
        }
    }

    /// Target `(speed, yaw rate)` held through the segment.
    fn target(&self) -> (f64, f64) {
        match *self {
            Segment::Straight { speed, .. } => (speed, 0.0),
            Segment::Turn { radius, angle, speed } => (speed, angle.signum() * speed / radius),
            Segment::Stop { .. } => (0.0, 0.0),
        }
    }

    fn validate(&self, i: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Infeasible(format!("segment {i}: {m}")));
        match *self {
            Segment::Straight { duration, speed } => {
                if !(duration >= 0.0) || !duration.is_finite() {
                    return bad(format!("duration {duration} must be non-negative"));
                }
                if !(0.0..=MAX_SPEED).contains(&speed) {
                    return bad(format!("speed {speed} outside [0, {MAX_SPEED}] m/s"));
                }
            }
            Segment::Turn { radius, angle, speed } => {
                if !(speed > 0.0 && speed <= MAX_SPEED) {
                    return bad(format!("turn speed {speed} outside (0, {MAX_SPEED}] m/s"));
                }
                if !(radius >= MIN_RADIUS) || !radius.is_finite() {
                    return bad(format!("turn radius {radius} below {MIN_RADIUS} m"));
                }
                if !angle.is_finite() {
                    return bad("turn angle must be finite".into());
                }
                if speed * speed / radius > MAX_CENTRIPETAL {
                    return bad(format!(
                        "centripetal acceleration {:.3} m/s^2 exceeds {MAX_CENTRIPETAL}",
                        speed * speed / radius
                    ));
                }
            }
            Segment::Stop { duration } => {
                if !(duration >= 0.0) || !duration.is_finite() {
                    return bad(format!("duration {duration} must be non-negative"));
                }
            }
        }
        Ok(())
    }
}

/// IMU error model: white-noise and bias random-walk densities plus the
/// turn-on biases.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SensorModel {
    /// rad/s/√Hz
    pub gyro_noise: f64,
    /// m/s²/√Hz
    pub accel_noise: f64,
    pub gyro_bias_walk: f64,
    pub accel_bias_walk: f64,
    pub gyro_bias: Vector3<f64>,
    pub accel_bias: Vector3<f64>,
}

impl Default for SensorModel {
    fn default() -> Self {
        let n = NoiseParams::default();
        SensorModel {
            gyro_noise: n.gyro_noise,
            accel_noise: n.accel_noise,
            gyro_bias_walk: n.gyro_bias_walk,
            accel_bias_walk: n.accel_bias_walk,
            gyro_bias: Vector3::new(0.002, -0.0015, 0.001),
            accel_bias: Vector3::new(0.04, -0.03, 0.05),
        }
    }
}

impl SensorModel {
    /// A perfect sensor.
    pub fn ideal() -> Self {
        SensorModel {
            gyro_noise: 0.0,
            accel_noise: 0.0,
            gyro_bias_walk: 0.0,
            accel_bias_walk: 0.0,
            gyro_bias: Vector3::zeros(),
            accel_bias: Vector3::zeros(),
        }
    }

    /// Densities from `noise` with biases drawn from its initial-bias sigmas.
    pub fn sampled(noise: &NoiseParams, rng: &mut impl Rng) -> Self {
        let mut draw = |s: f64| Vector3::from_fn(|_, _| s * rng.sample::<f64, _>(StandardNormal));
        SensorModel {
            gyro_noise: noise.gyro_noise,
            accel_noise: noise.accel_noise,
            gyro_bias_walk: noise.gyro_bias_walk,
            accel_bias_walk: noise.accel_bias_walk,
            gyro_bias: draw(noise.init_gyro_bias),
            accel_bias: draw(noise.init_accel_bias),
        }
    }

    fn validate(&self) -> Result<()> {
        let d = [self.gyro_noise, self.accel_noise, self.gyro_bias_walk, self.accel_bias_walk];
        let b = self.gyro_bias.iter().chain(self.accel_bias.iter());
        if d.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) || b.into_iter().any(|x| !x.is_finite()) {
            return Err(Error::Infeasible("sensor noise densities must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Rider-specific vibration signature.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Profile {
    /// Multiplier on planned speeds.
    pub speed_scale: f64,
    /// Pedalling sway frequency per unit speed, Hz per m/s.
    pub cadence_per_speed: f64,
    /// Roll sway amplitude at 1 m/s, rad.
    pub sway: f64,
}

impl Default for Profile {
    fn default() -> Self {
        Profile {
            speed_scale: 1.0,
            cadence_per_speed: 0.25,
            sway: 0.004,
        }
    }
}

impl Profile {
    /// One of a family of riders, drawn deterministically from `id`.
    pub fn participant(id: u64) -> Profile {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + id);
        Profile {
            speed_scale: rng.random_range(0.8..1.2),
            cadence_per_speed: rng.random_range(0.2..0.32),
            sway: rng.random_range(0.002..0.006),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RideSpec {
    pub segments: Vec<Segment>,
    /// Surface vibration scale: about 1 for paved roads, 3 for gravel.
    pub roughness: f64,
    pub rate_hz: f64,
    pub profile: Profile,
    /// Blend time at segment joints, s; lengthened for large speed changes.
    pub blend: f64,
    pub sensor: SensorModel,
    pub seed: u64,
}

impl RideSpec {
    pub fn new(segments: Vec<Segment>) -> Self {
        RideSpec {
            segments,
            roughness: 1.0,
            rate_hz: 100.0,
            profile: Profile::default(),
            blend: 1.0,
            sensor: SensorModel::default(),
            seed: 0,
        }
    }

    pub fn duration(&self) -> f64 {
        self.segments.iter().map(Segment::duration).sum()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.segments.iter().enumerate() {
            s.validate(i)?;
        }
        if !(self.rate_hz > 0.0) || !self.rate_hz.is_finite() {
            return Err(Error::Infeasible(format!("IMU rate {} Hz must be positive", self.rate_hz)));
        }
        if !(self.roughness >= 0.0) || !(self.blend > 0.0) {
            return Err(Error::Infeasible("roughness must be non-negative and blend positive".into()));
        }
        self.sensor.validate()?;
        if !(self.profile.speed_scale > 0.0) {
            return Err(Error::Infeasible("profile speed scale must be positive".into()));
        }
        Ok(())
    }
}

/// Exact kinematics sampled at the IMU rate.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroundTruth {
    pub t: Vec<f64>,
    pub r: Vec<Rotation>,
    pub v_n: Vec<Vector3<f64>>,
    pub p_n: Vec<Vector3<f64>>,
    pub v_b: Vec<Vector3<f64>>,
}

impl GroundTruth {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

fn quintic(tau: f64) -> f64 {
    let t = tau.clamp(0.0, 1.0);
    t * t * t * (10.0 + t * (-15.0 + 6.0 * t))
}

/// Piecewise profile of (speed, yaw rate) with quintic blends at joints.
struct Schedule {
    /// `(start, blend, from, to)` per segment.
    pieces: Vec<(f64, f64, (f64, f64), (f64, f64))>,
}

impl Schedule {
    fn new(spec: &RideSpec) -> Schedule {
        let k = spec.profile.speed_scale;
        let mut pieces = Vec::with_capacity(spec.segments.len());
        let mut start = 0.0;
        let mut prev: Option<(f64, f64)> = None;
        for seg in &spec.segments {
            let (s, w) = seg.target();
            let to = (s * k, w * k);
            let d = seg.duration() / k;
            let from = prev.unwrap_or(to);
            let blend = spec.blend.max((to.0 - from.0).abs()).min(d);
            pieces.push((start, blend, from, to));
            start += d;
            prev = Some(to);
        }
        Schedule { pieces }
    }

    fn at(&self, t: f64) -> (f64, f64) {
        let i = self.pieces.partition_point(|p| p.0 <= t).saturating_sub(1);
        let (start, blend, from, to) = self.pieces[i];
        let a = if blend > 0.0 { quintic((t - start) / blend) } else { 1.0 };
        (from.0 + (to.0 - from.0) * a, from.1 + (to.1 - from.1) * a)
    }
}

struct Jitter {
    cadence_per_speed: f64,
    sway: f64,
    /// (frequency Hz, amplitude rad per m/s, phase) per axis.
    surface: Vec<[(f64, f64, f64); 3]>,
    cadence_phase: f64,
    bounce: Vec<(f64, f64, f64)>,
}

impl Jitter {
    fn new(spec: &RideSpec) -> Jitter {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x6a17_7e55);
        let rough = spec.roughness;
        let mut comp = |scale: f64| {
            (
                rng.random_range(6.0..24.0),
                rough * scale * rng.random_range(0.5..1.0),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        };
        let surface = (0..4).map(|_| [comp(4e-4), comp(4e-4), comp(1.5e-4)]).collect();
        let bounce = (0..4).map(|_| comp(2e-5)).collect();
        Jitter {
            cadence_per_speed: spec.profile.cadence_per_speed,
            sway: spec.profile.sway,
            surface,
            cadence_phase: rng.random_range(0.0..std::f64::consts::TAU),
            bounce,
        }
    }

    /// Attitude perturbation (body frame) for speed `s` and cadence phase `c`.
    fn attitude(&self, t: f64, s: f64, c: f64) -> Vector3<f64> {
        let c = c + self.cadence_phase;
        let mut v = Vector3::new(self.sway * s * c.sin(), 0.0, 0.3 * self.sway * s * c.cos());
        for axes in &self.surface {
            for (k, (f, a, ph)) in axes.iter().enumerate() {
                v[k] += a * s * (std::f64::consts::TAU * f * t + ph).sin();
            }
        }
        v
    }

    /// Vertical displacement (down positive), m.
    fn bounce(&self, t: f64, s: f64) -> f64 {
        self.bounce
            .iter()
            .map(|(f, a, ph)| a * s * (std::f64::consts::TAU * f * t + ph).sin())
            .sum()
    }
}

/// Samples the ride at `rate_hz` from `t = 0` to the end of the last segment.
pub fn gen_trajectory(spec: &RideSpec) -> Result<GroundTruth> {
    spec.validate()?;
    let duration = spec.duration() / spec.profile.speed_scale;
    if spec.segments.is_empty() || duration <= 0.0 {
        return Ok(GroundTruth::default());
    }
    let dt = 1.0 / spec.rate_hz;
    let n = (duration * spec.rate_hz).round() as usize + 1;
    let sched = Schedule::new(spec);
    let jitter = Jitter::new(spec);

    // integrate heading and cadence phase on a fine grid for accuracy
    let sub = 8;
    let h = dt / sub as f64;
    let mut heading = 0.0;
    let mut cadence = 0.0;
    let mut truth = GroundTruth::default();
    let mut horizontal: Vec<Vector3<f64>> = Vec::with_capacity(n);
    for k in 0..n {
        let t = k as f64 * dt;
        if k > 0 {
            for j in 0..sub {
                let (t0, t1) = (t - dt + j as f64 * h, t - dt + (j + 1) as f64 * h);
                let (s0, w0) = sched.at(t0);
                let (s1, w1) = sched.at(t1);
                heading += 0.5 * (w0 + w1) * h;
                cadence += std::f64::consts::TAU * jitter.cadence_per_speed * 0.5 * (s0 + s1) * h;
            }
        }
        let (s, w) = sched.at(t);
        let bank = (s * w / GRAVITY).atan();
        let nominal = Rotation::from_euler(bank, 0.0, heading);
        let r = (nominal * exp_unchecked(&jitter.attitude(t, s, cadence))).renormalize_if_drifted();
        let (sh, ch) = heading.sin_cos();
        horizontal.push(Vector3::new(s * ch, s * sh, 0.0));
        truth.t.push(t);
        truth.r.push(r);
    }

    // vertical bounce enters through exact differences of its displacement
    let z: Vec<f64> = truth.t.iter().zip(&horizontal).map(|(&t, v)| jitter.bounce(t, v.norm())).collect();
    let mut p = Vector3::zeros();
    for k in 0..n {
        let vz = if k + 1 < n {
            (z[k + 1] - z[k]) / dt
        } else {
            (z[k] - z[k - 1]) / dt
        };
        let v = horizontal[k] + Vector3::new(0.0, 0.0, vz);
        if k > 0 {
            p += 0.5 * (truth.v_n[k - 1] + v) * dt;
        }
        truth.v_n.push(v);
        truth.p_n.push(p);
        truth.v_b.push(truth.r[k].matrix().transpose() * v);
    }
    check_feasible(&truth)?;
    Ok(truth)
}

fn check_feasible(truth: &GroundTruth) -> Result<()> {
    for k in 1..truth.len() {
        let dt = truth.t[k] - truth.t[k - 1];
        let a = (truth.v_n[k] - truth.v_n[k - 1]) / dt;
        let v = truth.v_n[k];
        let speed = v.xy().norm();
        if speed > 1e-9 {
            let lateral = (v.x * a.y - v.y * a.x).abs() / speed;
            if lateral > MAX_CENTRIPETAL * 1.05 {
                return Err(Error::Infeasible(format!(
                    "centripetal acceleration {lateral:.3} m/s^2 at t = {:.2} s exceeds {MAX_CENTRIPETAL}",
                    truth.t[k]
                )));
            }
        }
    }
    Ok(())
}
