//! Trajectory and network accuracy metrics.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::geom::{interpolate, rot_from_quaternion, Rotation};
use crate::io::read_leading_columns;
use crate::sim::{GroundTruth, TRUTH_HEADER};

/// Timestamped positions and attitudes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Track {
    pub t: Vec<f64>,
    pub p: Vec<Vector3<f64>>,
    pub r: Vec<Rotation>,
}

impl Track {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    fn check(&self, what: &str) -> Result<()> {
        if self.p.len() != self.t.len() || self.r.len() != self.t.len() {
            return Err(Error::Data(format!("{what}: column lengths differ")));
        }
        if self.t.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Data(format!("{what}: timestamps must increase")));
        }
        Ok(())
    }

    /// Position and attitude at `t`, linearly and geodesically interpolated.
    fn at(&self, t: f64) -> Option<(Vector3<f64>, Rotation)> {
        let (first, last) = (*self.t.first()?, *self.t.last()?);
        if t < first || t > last {
            return None;
        }
        let j = self.t.partition_point(|&s| s <= t);
        if j == self.len() {
            return Some((self.p[j - 1], self.r[j - 1]));
        }
        let i = j - 1;
        let s = (t - self.t[i]) / (self.t[j] - self.t[i]);
        Some((self.p[i] + (self.p[j] - self.p[i]) * s, interpolate(&self.r[i], &self.r[j], s)))
    }
}

impl From<&GroundTruth> for Track {
    fn from(g: &GroundTruth) -> Self {
        Track {
            t: g.t.clone(),
            p: g.p_n.clone(),
            r: g.r.clone(),
        }
    }
}

/// Reads the `t, qw..qz, vx..vz, px..pz` leading columns shared by truth and
/// trajectory files.
pub fn read_track(path: &Path) -> Result<Track> {
    let rows = read_leading_columns(path, &TRUTH_HEADER)?;
    let mut tr = Track::default();
    for row in rows {
        tr.t.push(row[0]);
        tr.r.push(rot_from_quaternion([row[1], row[2], row[3], row[4]])?);
        tr.p.push(Vector3::new(row[8], row[9], row[10]));
    }
    tr.check(&path.display().to_string())?;
    Ok(tr)
}

/// Truth and estimate on the truth timeline.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedPair {
    pub t: Vec<f64>,
    pub p: Vec<Vector3<f64>>,
    pub p_hat: Vec<Vector3<f64>>,
    pub yaw: Vec<f64>,
    pub yaw_hat: Vec<f64>,
}

/// Yaw of each attitude; a vertical body x axis keeps the previous yaw.
fn yaws(r: &[Rotation]) -> Vec<f64> {
    let mut prev = 0.0;
    r.iter()
        .map(|r| {
            prev = r.yaw().unwrap_or(prev);
            prev
        })
        .collect()
}

impl AlignedPair {
    pub fn new(t: Vec<f64>, p: Vec<Vector3<f64>>, p_hat: Vec<Vector3<f64>>, r: &[Rotation], r_hat: &[Rotation]) -> Result<Self> {
        let n = t.len();
        if [p.len(), p_hat.len(), r.len(), r_hat.len()].iter().any(|&m| m != n) {
            return Err(Error::Shape {
                op: "aligned pair",
                lhs: vec![n, p.len(), r.len()],
                rhs: vec![n, p_hat.len(), r_hat.len()],
            });
        }
        if p.iter().chain(&p_hat).any(|v| !v.iter().all(|x| x.is_finite())) {
            return Err(Error::NonFinite("aligned positions"));
        }
        Ok(AlignedPair {
            t,
            p,
            p_hat,
            yaw: yaws(r),
            yaw_hat: yaws(r_hat),
        })
    }

    /// Interpolates `est` onto the truth epochs inside its time span.
    pub fn align(truth: &Track, est: &Track) -> Result<Self> {
        truth.check("truth")?;
        est.check("estimate")?;
        let (mut t, mut p, mut p_hat, mut r, mut r_hat) = (vec![], vec![], vec![], vec![], vec![]);
        for k in 0..truth.len() {
            if let Some((pe, re)) = est.at(truth.t[k]) {
                t.push(truth.t[k]);
                p.push(truth.p[k]);
                r.push(truth.r[k]);
                p_hat.push(pe);
                r_hat.push(re);
            }
        }
        if t.is_empty() {
            return Err(Error::Data("estimate and truth do not overlap in time".into()));
        }
        Self::new(t, p, p_hat, &r, &r_hat)
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    fn displacement(&self, p: &[Vector3<f64>], k: usize, t0: f64) -> Vector3<f64> {
        let j = self.t.partition_point(|&s| s <= t0);
        let start = if j == 0 {
            p[0]
        } else if j == self.len() || self.t[j - 1] == t0 {
            p[j - 1]
        } else {
            let i = j - 1;
            let s = (t0 - self.t[i]) / (self.t[j] - self.t[i]);
            p[i] + (p[j] - p[i]) * s
        };
        p[k] - start
    }
}

/// Root-mean-square position error without any alignment transform.
pub fn ate(pair: &AlignedPair) -> Result<f64> {
    if pair.is_empty() {
        return Err(Error::Data("ATE of an empty trajectory".into()));
    }
    let sum: f64 = pair.p.iter().zip(&pair.p_hat).map(|(a, b)| (a - b).norm_squared()).sum();
    Ok((sum / pair.len() as f64).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Rte {
    Value { meters: f64, dt: f64, epochs: usize },
    TooShort { duration: f64, dt: f64 },
}

impl Rte {
    pub fn meters(&self) -> Option<f64> {
        match *self {
            Rte::Value { meters, .. } => Some(meters),
            Rte::TooShort { .. } => None,
        }
    }
}

fn yaw_matrix(yaw: f64) -> Matrix3<f64> {
    *Rotation::from_yaw(yaw).matrix()
}

/// RMS difference of `dt`-second displacements, each expressed in its own
/// trajectory's heading frame at the later epoch.
pub fn rte(pair: &AlignedPair, dt: f64) -> Result<Rte> {
    if !(dt > 0.0) {
        return Err(Error::InvalidConfig(format!("RTE interval {dt} must be positive")));
    }
    if pair.is_empty() {
        return Err(Error::Data("RTE of an empty trajectory".into()));
    }
    let t0 = pair.t[0];
    let duration = pair.t[pair.len() - 1] - t0;
    if duration < dt {
        return Ok(Rte::TooShort { duration, dt });
    }
    let mut sum = 0.0;
    let mut n = 0;
    for k in 0..pair.len() {
        if pair.t[k] - t0 < dt {
            continue;
        }
        let start = pair.t[k] - dt;
        let d = yaw_matrix(pair.yaw[k]).transpose() * pair.displacement(&pair.p, k, start);
        let d_hat = yaw_matrix(pair.yaw_hat[k]).transpose() * pair.displacement(&pair.p_hat, k, start);
        sum += (d - d_hat).norm_squared();
        n += 1;
    }
    Ok(Rte::Value {
        meters: (sum / n as f64).sqrt(),
        dt,
        epochs: n,
    })
}

/// `(1/n)·√(Σ‖v − v̂‖²)`, which equals RMSE / √n.
pub fn inference_error(v: &[Vector3<f64>], v_hat: &[Vector3<f64>]) -> Result<f64> {
    if v.len() != v_hat.len() {
        return Err(Error::Shape {
            op: "inference_error",
            lhs: vec![v.len(), 3],
            rhs: vec![v_hat.len(), 3],
        });
    }
    if v.is_empty() {
        return Err(Error::Data("inference error of zero samples".into()));
    }
    let sum: f64 = v.iter().zip(v_hat).map(|(a, b)| (a - b).norm_squared()).sum();
    Ok(sum.sqrt() / v.len() as f64)
}

/// Summary written by the `eval` command.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub ate_m: f64,
    pub rte: Rte,
    pub inference_error_mps: Option<f64>,
    pub epochs: usize,
}

impl Metrics {
    pub fn compute(pair: &AlignedPair, rte_dt: f64, inference: Option<f64>) -> Result<Self> {
        Ok(Metrics {
            ate_m: ate(pair)?,
            rte: rte(pair, rte_dt)?,
            inference_error_mps: inference,
            epochs: pair.len(),
        })
    }

    pub fn to_json(&self, config: Value) -> Value {
        let (rte_m, dt, status) = match self.rte {
            Rte::Value { meters, dt, .. } => (json!(meters), dt, "ok"),
            Rte::TooShort { dt, .. } => (Value::Null, dt, "too_short"),
        };
        json!({
            "ate_m": self.ate_m,
            "rte_m": rte_m,
            "rte_dt_s": dt,
            "rte_status": status,
            "inference_error_mps": self.inference_error_mps,
            "epochs": self.epochs,
            "config": config,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line(n: usize, f: impl Fn(f64) -> Vector3<f64>) -> Track {
        let t: Vec<f64> = (0..n).map(|k| k as f64 * 0.5).collect();
        Track {
            p: t.iter().map(|&t| f(t)).collect(),
            r: t.iter().map(|&t| Rotation::from_euler(0.02 * t.sin(), 0.0, 0.1 * t)).collect(),
            t,
        }
    }

    fn wiggly(t: f64) -> Vector3<f64> {
        Vector3::new(3.0 * t, 10.0 * (0.05 * t).sin(), 0.1 * t.cos())
    }

    fn pair(truth: &Track, est: &Track) -> AlignedPair {
        AlignedPair::align(truth, est).unwrap()
    }

    #[test]
    fn ate_hand_cases() {
        let truth = line(200, wiggly);
        assert_eq!(ate(&pair(&truth, &truth)).unwrap(), 0.0);
        let mut est = truth.clone();
        est.p.iter_mut().for_each(|p| *p += Vector3::new(3.0, 4.0, 0.0));
        assert_eq!(ate(&pair(&truth, &est)).unwrap(), 5.0);
        let mut est = truth.clone();
        est.p.iter_mut().step_by(2).for_each(|p| p.x += 2.0);
        assert!((ate(&pair(&truth, &est)).unwrap() - 2.0 / 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn rte_ignores_global_heading_and_constant_offsets() {
        let truth = line(300, wiggly);
        let yaw = Rotation::from_yaw(0.7);
        let rotated = Track {
            t: truth.t.clone(),
            p: truth.p.iter().map(|p| yaw.apply(p)).collect(),
            r: truth.r.iter().map(|r| yaw * *r).collect(),
        };
        let pr = pair(&truth, &rotated);
        assert!(ate(&pr).unwrap() > 1.0);
        assert!(rte(&pr, 60.0).unwrap().meters().unwrap() < 1e-12);

        let mut shifted = truth.clone();
        shifted.p.iter_mut().for_each(|p| p.y += 1.0);
        assert!(rte(&pair(&truth, &shifted), 60.0).unwrap().meters().unwrap() < 1e-12);
        assert_eq!(rte(&pair(&truth, &truth), 60.0).unwrap().meters(), Some(0.0));
    }

    #[test]
    fn rte_reports_short_trajectories() {
        let truth = line(100, wiggly);
        let r = rte(&pair(&truth, &truth), 60.0).unwrap();
        assert_eq!(r, Rte::TooShort { duration: 49.5, dt: 60.0 });
        assert_eq!(r.meters(), None);
    }

    #[test]
    fn inference_error_hand_cases() {
        let v = vec![Vector3::new(1.0, 2.0, 3.0); 4];
        assert_eq!(inference_error(&v, &v).unwrap(), 0.0);
        assert_eq!(inference_error(&[Vector3::x()], &[Vector3::zeros()]).unwrap(), 1.0);
        let e = [Vector3::x(), Vector3::y(), -Vector3::z(), -Vector3::x()];
        assert_eq!(inference_error(&e, &[Vector3::zeros(); 4]).unwrap(), 0.5);
        assert!(matches!(inference_error(&e, &e[..3]), Err(Error::Shape { .. })));
    }

    #[test]
    fn estimate_is_interpolated_onto_truth_epochs() {
        let truth = line(21, |t| Vector3::new(t, 0.0, 0.0));
        let est = Track {
            t: vec![1.0, 6.0],
            p: vec![Vector3::new(1.0, 0.0, 0.0), Vector3::new(6.0, 0.0, 0.0)],
            r: vec![Rotation::identity(); 2],
        };
        let pr = pair(&truth, &est);
        assert_eq!(pr.t.first(), Some(&1.0));
        assert_eq!(pr.t.last(), Some(&6.0));
        assert!(ate(&pr).unwrap() < 1e-15);
        let far = Track {
            t: vec![100.0],
            p: vec![Vector3::zeros()],
            r: vec![Rotation::identity()],
        };
        assert!(AlignedPair::align(&truth, &far).is_err());
    }

    #[test]
    fn vertical_body_axis_keeps_previous_yaw() {
        let r = [Rotation::from_yaw(0.3), Rotation::from_euler(0.0, std::f64::consts::FRAC_PI_2, 0.0)];
        let y = yaws(&r);
        assert_eq!(y[1], y[0]);
    }

    #[test]
    fn metrics_json_has_required_fields() {
        let truth = line(10, wiggly);
        let m = Metrics::compute(&pair(&truth, &truth), 60.0, Some(0.1)).unwrap();
        let v = m.to_json(json!({"seed": 1}));
        assert_eq!(v["ate_m"], 0.0);
        assert_eq!(v["rte_status"], "too_short");
        assert!(v["rte_m"].is_null());
        assert_eq!(v["epochs"], 10);
        assert_eq!(v["inference_error_mps"], 0.1);
    }

    proptest! {
        #[test]
        fn ate_scales_linearly(k in 0.1f64..10.0, seed in 0u64..100) {
            let truth = line(50, wiggly);
            let mut est = truth.clone();
            for (i, p) in est.p.iter_mut().enumerate() {
                *p += Vector3::new((seed as f64 + i as f64).sin(), (i as f64).cos(), 0.3);
            }
            let mut scaled = truth.clone();
            for i in 0..50 {
                scaled.p[i] = truth.p[i] + (est.p[i] - truth.p[i]) * k;
            }
            let a = ate(&pair(&truth, &est)).unwrap();
            let b = ate(&pair(&truth, &scaled)).unwrap();
            prop_assert!((b - k * a).abs() < 1e-9 * b.max(1.0));
        }

        #[test]
        fn rte_invariant_under_global_yaw(yaw in -3.1f64..3.1, seed in 0u64..100) {
            let truth = line(200, wiggly);
            let est = line(200, |t| wiggly(t) + Vector3::new((t + seed as f64).sin(), 0.01 * t, 0.0));
            let g = Rotation::from_yaw(yaw);
            let turned = Track {
                t: est.t.clone(),
                p: est.p.iter().map(|p| g.apply(p)).collect(),
                r: est.r.iter().map(|r| g * *r).collect(),
            };
            let a = rte(&pair(&truth, &est), 60.0).unwrap().meters().unwrap();
            let b = rte(&pair(&truth, &turned), 60.0).unwrap().meters().unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn inference_error_is_rmse_over_root_n(
            errs in prop::collection::vec(prop::array::uniform3(-5.0f64..5.0), 1..64)
        ) {
            let v: Vec<_> = errs.iter().map(|e| Vector3::from(*e)).collect();
            let zero = vec![Vector3::zeros(); v.len()];
            let n = v.len() as f64;
            let rmse = (v.iter().map(|e| e.norm_squared()).sum::<f64>() / n).sqrt();
            prop_assert!((inference_error(&v, &zero).unwrap() - rmse / n.sqrt()).abs() < 1e-12);
        }
    }
}
