//! SO(3) primitives: rotation matrices, the axis-angle tangent space, and
//! the exponential and logarithm maps between them.
//!
//! A [`Rotation`] maps body-frame vectors into the navigation frame. All
//! functions here are pure and operate on `Copy` values.

use std::f64::consts::PI;
use std::ops::Mul;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Elementwise tolerance for `RᵀR = I` and `det R = 1`.
pub const ORTHO_TOL: f64 = 1e-9;

/// Below this angle (rad) exp/log switch to their Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-8;

// Below this value of sin(θ) with cos(θ) < 0, log reads the axis off the
// symmetric part instead of dividing by sin(θ).
const NEAR_PI_SIN: f64 = 1e-6;

/// A 3×3 special-orthogonal matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation(Matrix3<f64>);

/// An element of so(3) written as an axis-angle vector (radians).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotVec(pub Vector3<f64>);

impl RotVec {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        RotVec(Vector3::new(x, y, z))
    }

    pub fn zeros() -> Self {
        RotVec(Vector3::zeros())
    }

    pub fn angle(&self) -> f64 {
        self.0.norm()
    }
}

impl From<Vector3<f64>> for RotVec {
    fn from(v: Vector3<f64>) -> Self {
        RotVec(v)
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Validates orthonormality and orientation within [`ORTHO_TOL`].
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        if !m.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("rotation matrix"));
        }
        let r = Rotation(m);
        let err = r.orthonormality_error();
        if err > ORTHO_TOL || (m.determinant() - 1.0).abs() > ORTHO_TOL {
            return Err(Error::Contract(format!(
                "matrix is not a rotation (|RᵀR - I|∞ = {err:.3e}, det = {:.12})",
                m.determinant()
            )));
        }
        Ok(r)
    }

    /// Wraps a matrix the caller knows to be a rotation up to round-off.
    #[cfg(test)]
    pub(crate) fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation(m)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Rotation(self.0.transpose())
    }

    pub fn inverse(&self) -> Self {
        self.transpose()
    }

    /// Rotation about the navigation z axis.
    pub fn from_yaw(yaw: f64) -> Self {
        let (s, c) = yaw.sin_cos();
        Rotation(Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0))
    }

    /// Z-Y-X (yaw, pitch, roll) composition `Rz(yaw)·Ry(pitch)·Rx(roll)`.
    pub fn from_euler(roll: f64, pitch: f64, yaw: f64) -> Self {
        let (sr, cr) = roll.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cr, -sr, 0.0, sr, cr);
        let ry = Matrix3::new(cp, 0.0, sp, 0.0, 1.0, 0.0, -sp, 0.0, cp);
        Rotation(Rotation::from_yaw(yaw).0 * ry * rx)
    }

    /// Heading of the body x axis projected onto the horizontal plane, or
    /// `None` when the axis is (numerically) vertical.
    pub fn yaw(&self) -> Option<f64> {
        let (x, y) = (self.0[(0, 0)], self.0[(1, 0)]);
        if x.hypot(y) < 1e-9 {
            None
        } else {
            Some(y.atan2(x))
        }
    }

    /// `‖RᵀR − I‖∞` (largest absolute entry).
    pub fn orthonormality_error(&self) -> f64 {
        (self.0.transpose() * self.0 - Matrix3::identity()).amax()
    }

    /// Nearest orthogonal matrix in the Frobenius sense, `R (RᵀR)^{-1/2}`.
    pub fn reorthonormalized(&self) -> Self {
        let svd = self.0.svd(true, true);
        let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut m = u * v_t;
        if m.determinant() < 0.0 {
            let mut u = u;
            u.column_mut(2).neg_mut();
            m = u * v_t;
        }
        Rotation(m)
    }

    /// Re-orthonormalizes only once drift exceeds [`ORTHO_TOL`].
    pub fn renormalize_if_drifted(self) -> Self {
        if self.orthonormality_error() > ORTHO_TOL {
            self.reorthonormalized()
        } else {
            self
        }
    }

    pub fn log(&self) -> RotVec {
        log_unchecked(&self.0)
    }

    /// Hamilton quaternion `[w, x, y, z]` with `w ≥ 0`.
    pub fn to_quaternion(&self) -> [f64; 4] {
        let m = &self.0;
        let tr = m.trace();
        let q = if tr > 0.0 {
            let s = (tr + 1.0).sqrt() * 2.0;
            [
                0.25 * s,
                (m[(2, 1)] - m[(1, 2)]) / s,
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(1, 0)] - m[(0, 1)]) / s,
            ]
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            [
                (m[(2, 1)] - m[(1, 2)]) / s,
                0.25 * s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
            ]
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            [
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                0.25 * s,
                (m[(1, 2)] + m[(2, 1)]) / s,
            ]
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            [
                (m[(1, 0)] - m[(0, 1)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
                (m[(1, 2)] + m[(2, 1)]) / s,
                0.25 * s,
            ]
        };
        let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        let sign = if q[0] < 0.0 { -1.0 } else { 1.0 };
        q.map(|x| sign * x / n)
    }

    /// Rotates a body-frame vector into the navigation frame.
    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }
}

impl Mul for Rotation {
    type Output = Rotation;

    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl Mul<Vector3<f64>> for Rotation {
    type Output = Vector3<f64>;

    fn mul(self, rhs: Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

/// Cross-product matrix: `skew(v)·w = v × w`.
pub fn skew(v: &Vector3<f64>) -> Result<Matrix3<f64>> {
    if !v.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("skew input"));
    }
    Ok(hat(v))
}

pub(crate) fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Rodrigues exponential, with a second-order Taylor expansion below
/// [`SMALL_ANGLE`].
pub fn so3_exp(v: &RotVec) -> Result<Rotation> {
    if !v.0.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("so3_exp input"));
    }
    Ok(exp_unchecked(&v.0))
}

pub(crate) fn exp_unchecked(v: &Vector3<f64>) -> Rotation {
    let theta = v.norm();
    let k = hat(v);
    let k2 = k * k;
    let m = if theta < SMALL_ANGLE {
        Matrix3::identity() + k + 0.5 * k2
    } else {
        let a = theta.sin() / theta;
        let b = (1.0 - theta.cos()) / (theta * theta);
        Matrix3::identity() + a * k + b * k2
    };
    Rotation(m)
}

/// Logarithm with `‖result‖ ≤ π`.
///
/// At exactly θ = π the two candidate axes describe the same rotation; the
/// one whose largest-magnitude component is positive is returned.
pub fn so3_log(r: &Rotation) -> Result<RotVec> {
    // Re-validate: `Rotation` values built by products may have drifted.
    Rotation::new(r.0)?;
    Ok(log_unchecked(&r.0))
}

fn log_unchecked(m: &Matrix3<f64>) -> RotVec {
    let w = 0.5 * vee(&(m - m.transpose()));
    let s = w.norm();
    let c = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = s.atan2(c);

    if theta < SMALL_ANGLE {
        // θ/sin θ = 1 + θ²/6 + O(θ⁴)
        return RotVec(w * (1.0 + theta * theta / 6.0));
    }
    if c < 0.0 && s < NEAR_PI_SIN {
        // (R + Rᵀ)/2 = cos θ I + (1 − cos θ) n nᵀ
        let b = (0.5 * (m + m.transpose()) - c * Matrix3::identity()) / (1.0 - c);
        let k = (0..3)
            .max_by(|&i, &j| b[(i, i)].total_cmp(&b[(j, j)]).then(j.cmp(&i)))
            .unwrap();
        let mut n: Vector3<f64> = b.column(k).into_owned() / b[(k, k)].max(0.0).sqrt();
        n /= n.norm();
        let flip = if w.dot(&n).abs() > f64::EPSILON {
            w.dot(&n) < 0.0
        } else {
            let big = (0..3)
                .max_by(|&i, &j| n[i].abs().total_cmp(&n[j].abs()).then(j.cmp(&i)))
                .unwrap();
            n[big] < 0.0
        };
        if flip {
            n = -n;
        }
        return RotVec(n * theta.min(PI));
    }
    RotVec(w * (theta / s))
}

/// Hamilton, scalar-first quaternion to rotation (body to navigation).
pub fn rot_from_quaternion(q: [f64; 4]) -> Result<Rotation> {
    if !q.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("quaternion"));
    }
    let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < 1e-12 {
        return Err(Error::Contract("zero-norm quaternion".into()));
    }
    let [w, x, y, z] = q.map(|c| c / n);
    Ok(Rotation(Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )))
}

/// Geodesic interpolation `a·exp(s·log(aᵀb))`, `s ∈ [0, 1]`.
pub fn interpolate(a: &Rotation, b: &Rotation, s: f64) -> Rotation {
    let d = (a.transpose() * *b).log();
    *a * exp_unchecked(&(d.0 * s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn assert_mat_close(a: &Matrix3<f64>, b: &Matrix3<f64>, tol: f64) {
        let d = (a - b).amax();
        assert!(d <= tol, "matrices differ by {d:e}:\n{a}\n{b}");
    }

    #[test]
    fn skew_cases() {
        assert_eq!(skew(&Vector3::zeros()).unwrap(), Matrix3::zeros());
        let s = skew(&Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(s, Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0));
        let v = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(skew(&v).unwrap() * v, Vector3::zeros());
        let w = Vector3::new(-0.5, 4.0, 0.25);
        assert_eq!(skew(&v).unwrap() * w, v.cross(&w));
        assert_eq!(skew(&v).unwrap().transpose(), -skew(&v).unwrap());
        assert!(skew(&Vector3::new(f64::NAN, 0.0, 0.0)).is_err());
    }

    #[test]
    fn exp_hand_cases() {
        assert_eq!(
            so3_exp(&RotVec::zeros()).unwrap().matrix(),
            &Matrix3::identity()
        );
        let r = so3_exp(&RotVec::new(0.0, 0.0, FRAC_PI_2)).unwrap();
        let ex_to = r * Vector3::x();
        assert!((ex_to - Vector3::y()).amax() < 1e-15);
        let half = so3_exp(&RotVec::new(PI, 0.0, 0.0)).unwrap();
        assert_mat_close(
            half.matrix(),
            &Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0)),
            1e-15,
        );
        assert!(so3_exp(&RotVec::new(f64::INFINITY, 0.0, 0.0)).is_err());
    }

    #[test]
    fn log_hand_cases() {
        assert_eq!(so3_log(&Rotation::identity()).unwrap(), RotVec::zeros());
        let v = RotVec::new(0.1, -0.2, 0.3);
        let back = so3_log(&so3_exp(&v).unwrap()).unwrap();
        assert!((back.0 - v.0).amax() < 1e-9);

        let half = Rotation::new(Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0))).unwrap();
        let l = so3_log(&half).unwrap();
        assert!((l.0 - Vector3::new(PI, 0.0, 0.0)).amax() < 1e-12, "{l:?}");
    }

    #[test]
    fn log_near_pi_keeps_sign_from_skew_part() {
        for axis in [Vector3::x(), Vector3::new(1.0, -2.0, 0.5).normalize()] {
            let v = axis * (PI - 1e-8);
            let back = so3_log(&exp_unchecked(&v)).unwrap();
            assert!((back.0 - v).amax() < 1e-7, "{back:?} vs {v:?}");
            let back = so3_log(&exp_unchecked(&-v)).unwrap();
            assert!((back.0 + v).amax() < 1e-7);
        }
    }

    #[test]
    fn log_rejects_non_rotation() {
        let m = Matrix3::identity() * 1.01;
        assert!(Rotation::new(m).is_err());
        let r = Rotation::from_matrix_unchecked(m);
        assert!(matches!(so3_log(&r), Err(Error::Contract(_))));
        let reflect = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(Rotation::new(reflect).is_err());
    }

    #[test]
    fn quaternion_cases() {
        assert_eq!(
            rot_from_quaternion([1.0, 0.0, 0.0, 0.0]).unwrap(),
            Rotation::identity()
        );
        let h = (PI / 4.0).sin();
        let q = rot_from_quaternion([(PI / 4.0).cos(), 0.0, 0.0, h]).unwrap();
        let e = so3_exp(&RotVec::new(0.0, 0.0, FRAC_PI_2)).unwrap();
        assert_mat_close(q.matrix(), e.matrix(), 1e-15);
        let q = [0.3, -0.1, 0.7, 0.2];
        let neg = q.map(|x| -x);
        assert_eq!(
            rot_from_quaternion(q).unwrap(),
            rot_from_quaternion(neg).unwrap()
        );
        assert!(rot_from_quaternion([0.0; 4]).is_err());
    }

    #[test]
    fn quaternion_round_trip() {
        let r = so3_exp(&RotVec::new(0.4, -1.2, 2.9)).unwrap();
        let back = rot_from_quaternion(r.to_quaternion()).unwrap();
        assert_mat_close(back.matrix(), r.matrix(), 1e-14);
        assert!(r.to_quaternion()[0] >= 0.0);
    }

    #[test]
    fn chained_products_stay_orthonormal() {
        let step = exp_unchecked(&Vector3::new(0.013, -0.021, 0.007));
        let mut r = Rotation::identity();
        for _ in 0..10_000 {
            r = (r * step).renormalize_if_drifted();
        }
        assert!(r.orthonormality_error() <= ORTHO_TOL);
        assert!((r.matrix().determinant() - 1.0).abs() <= ORTHO_TOL);
    }

    #[test]
    fn reorthonormalize_recovers_rotation() {
        let r = exp_unchecked(&Vector3::new(0.3, 0.2, -0.1));
        let noisy = Rotation::from_matrix_unchecked(r.matrix() + Matrix3::repeat(1e-6));
        let fixed = noisy.reorthonormalized();
        assert!(fixed.orthonormality_error() < 1e-14);
        assert_mat_close(fixed.matrix(), r.matrix(), 3e-6);
    }

    #[test]
    fn euler_and_yaw() {
        let r = Rotation::from_euler(0.1, -0.2, 1.3);
        assert!((r.yaw().unwrap() - 1.3).abs() < 1e-12);
        let vertical = Rotation::from_euler(0.0, FRAC_PI_2, 0.0);
        assert!(vertical.yaw().is_none());
    }

    fn rotvec_in_ball(max: f64) -> impl Strategy<Value = Vector3<f64>> {
        (
            -1.0f64..1.0,
            -1.0f64..1.0,
            -1.0f64..1.0,
            1e-6f64..max,
        )
            .prop_filter("non-degenerate axis", |(x, y, z, _)| {
                (x * x + y * y + z * z) > 1e-6
            })
            .prop_map(|(x, y, z, a)| Vector3::new(x, y, z).normalize() * a)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn exp_log_round_trip(v in rotvec_in_ball(PI - 1e-3)) {
            let back = so3_log(&so3_exp(&RotVec(v)).unwrap()).unwrap();
            prop_assert!((back.0 - v).amax() < 1e-9);
        }

        #[test]
        fn collinear_exp_composes(v in rotvec_in_ball(PI / 2.0 - 1e-3)) {
            let a = exp_unchecked(&v);
            let twice = exp_unchecked(&(v * 2.0));
            prop_assert!(((a * a).matrix() - twice.matrix()).amax() < 1e-9);
        }
    }
}
