//! Minimal SO(3)/SE(3) kinematics: hat/vee operators, exponential and
//! logarithm maps, and wrench transport between frames.
//!
//! Conventions used throughout the crate:
//!
//! * twists are stacked `[v; omega]` — translation (mm) first, rotation (rad) second
//! * wrenches are stacked `[f; m]` — force (N) first, moment (Nm) second
//! * transform translations are in millimetres

use nalgebra::{Matrix3, Vector3, Vector6};
use thiserror::Error;

/// Millimetres per metre; moments are N·m while levers and translations are mm.
pub const MM_PER_M: f64 = 1000.0;

/// Angle threshold below which exp/log coefficient functions switch to
/// their second-order Taylor expansions.
const SMALL_ANGLE: f64 = 1e-8;

/// Rotation angles closer to pi than this are rejected: the logarithm is
/// not unique there, and a soft sensor can never reach such a deflection.
const PI_GUARD: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LieError {
    /// Rotation angle within `1e-9` of pi; the axis (and hence the twist) is ambiguous.
    #[error("rotation angle {angle} is within 1e-9 of pi; logarithm is not unique")]
    AngleAtPi { angle: f64 },
    /// Matrix failed the orthonormality / determinant check.
    #[error("matrix is not a rotation (orthogonality error {ortho_err:.3e}, det {det:.6})")]
    NotARotation { ortho_err: f64, det: f64 },
}

/// Skew-symmetric cross-product matrix: `hat(v) * u == v x u`.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(
        0.0, -v.z, v.y, //
        v.z, 0.0, -v.x, //
        -v.y, v.x, 0.0,
    )
}

/// Inverse of [`hat`] for exactly antisymmetric input.
fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// A proper rotation: orthonormal with determinant +1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Wrap a matrix, checking `R^T R = I` and `det R = +1` to 1e-12 (Frobenius).
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self, LieError> {
        let ortho_err = (m.transpose() * m - Matrix3::identity()).norm();
        let det = m.determinant();
        if ortho_err > 1e-12 || (det - 1.0).abs() > 1e-12 {
            return Err(LieError::NotARotation { ortho_err, det });
        }
        Ok(Rotation(m))
    }

    /// Rodrigues' formula: rotation by `|omega|` radians about `omega / |omega|`.
    pub fn exp(omega: &Vector3<f64>) -> Self {
        let theta2 = omega.norm_squared();
        let w = hat(omega);
        let w2 = w * w;
        let (a, b) = if theta2 < SMALL_ANGLE * SMALL_ANGLE {
            // sin(t)/t and (1-cos t)/t^2
            (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
        } else {
            let theta = theta2.sqrt();
            let half_sin = (theta / 2.0).sin();
            (theta.sin() / theta, 2.0 * half_sin * half_sin / theta2)
        };
        Rotation(Matrix3::identity() + a * w + b * w2)
    }

    /// Axis-angle vector of the rotation.
    ///
    /// Uses the antisymmetric part for small and moderate angles and the
    /// symmetric part close to pi, where the antisymmetric entries lose
    /// precision. Fails within [`PI_GUARD`] of pi.
    pub fn log(&self) -> Result<Vector3<f64>, LieError> {
        let m = &self.0;
        let anti = vee(&(m - m.transpose())); // 2 sin(theta) * axis
        let s = anti.norm() / 2.0;
        let c = ((m.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        let theta = s.atan2(c);

        if theta < SMALL_ANGLE {
            // theta/(2 sin theta) ~ (1 + theta^2/6) / 2
            return Ok(anti * (1.0 + theta * theta / 6.0) / 2.0);
        }
        if std::f64::consts::PI - theta < PI_GUARD {
            return Err(LieError::AngleAtPi { angle: theta });
        }
        if theta <= 3.0 {
            return Ok(anti * (theta / (2.0 * s)));
        }

        // Near pi: axis magnitudes from the symmetric part, relative signs from
        // a column of a*a^T, overall sign from the antisymmetric part.
        let aat = (Matrix3::from_diagonal_element(-c) + (m + m.transpose()) / 2.0) / (1.0 - c);
        let k = (0..3)
            .max_by(|&i, &j| aat[(i, i)].total_cmp(&aat[(j, j)]))
            .unwrap();
        let mut axis = aat.column(k) / aat[(k, k)].max(f64::EPSILON).sqrt();
        if anti[k] < 0.0 {
            axis = -axis;
        }
        Ok(theta * axis.normalize())
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        Rotation(self.0.transpose())
    }

    /// Rotation angle in radians, in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        let anti = vee(&(self.0 - self.0.transpose()));
        let s = anti.norm() / 2.0;
        let c = ((self.0.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        s.atan2(c)
    }
}

impl std::ops::Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl std::ops::Mul<Vector3<f64>> for Rotation {
    type Output = Vector3<f64>;
    fn mul(self, rhs: Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

/// A rigid pose: rotation plus translation in millimetres.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Transform {
    pub fn identity() -> Self {
        Transform {
            rotation: Rotation::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Transform {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Transform {
            rotation: Rotation::identity(),
            translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let rinv = self.rotation.inverse();
        Transform {
            rotation: rinv,
            translation: -(rinv * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * *p + self.translation
    }
}

impl std::ops::Mul for Transform {
    type Output = Transform;
    fn mul(self, rhs: Transform) -> Transform {
        Transform {
            rotation: self.rotation * rhs.rotation,
            translation: self.rotation * rhs.translation + self.translation,
        }
    }
}

/// Infinitesimal rigid motion, stacked `[v; omega]` with `v` in mm and `omega` in rad.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist {
    pub linear: Vector3<f64>,
    pub angular: Vector3<f64>,
}

impl Twist {
    pub fn zero() -> Self {
        Twist {
            linear: Vector3::zeros(),
            angular: Vector3::zeros(),
        }
    }

    pub fn new(linear: Vector3<f64>, angular: Vector3<f64>) -> Self {
        Twist { linear, angular }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.linear.x,
            self.linear.y,
            self.linear.z,
            self.angular.x,
            self.angular.y,
            self.angular.z,
        )
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Twist {
            linear: Vector3::new(v[0], v[1], v[2]),
            angular: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }
}

/// Force (N) and moment (Nm) acting at a frame, stacked `[f; m]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wrench {
    pub force: Vector3<f64>,
    pub moment: Vector3<f64>,
}

impl Wrench {
    pub fn zero() -> Self {
        Wrench {
            force: Vector3::zeros(),
            moment: Vector3::zeros(),
        }
    }

    pub fn new(force: Vector3<f64>, moment: Vector3<f64>) -> Self {
        Wrench { force, moment }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.force.x,
            self.force.y,
            self.force.z,
            self.moment.x,
            self.moment.y,
            self.moment.z,
        )
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Wrench {
            force: Vector3::new(v[0], v[1], v[2]),
            moment: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }
}

/// Exponential map se(3) -> SE(3).
pub fn exp(xi: &Twist) -> Transform {
    let rotation = Rotation::exp(&xi.angular);
    let theta2 = xi.angular.norm_squared();
    let w = hat(&xi.angular);
    let w2 = w * w;
    let (b, c) = if theta2 < SMALL_ANGLE * SMALL_ANGLE {
        // (1-cos t)/t^2 and (t - sin t)/t^3
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        let theta = theta2.sqrt();
        let half_sin = (theta / 2.0).sin();
        (
            2.0 * half_sin * half_sin / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    let v_mat = Matrix3::identity() + b * w + c * w2;
    Transform {
        rotation,
        translation: v_mat * xi.linear,
    }
}

/// Logarithm map SE(3) -> se(3); inverse of [`exp`] for rotation angles below pi.
pub fn log(t: &Transform) -> Result<Twist, LieError> {
    let omega = t.rotation.log()?;
    let theta2 = omega.norm_squared();
    let w = hat(&omega);
    let w2 = w * w;
    let g = if theta2 < SMALL_ANGLE * SMALL_ANGLE {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        let theta = theta2.sqrt();
        let half = theta / 2.0;
        // (1 - (t/2)*cot(t/2)) / t^2, finite all the way to pi
        (1.0 - half * half.cos() / half.sin()) / theta2
    };
    let v_inv = Matrix3::identity() - 0.5 * w + g * w2;
    Ok(Twist {
        linear: v_inv * t.translation,
        angular: omega,
    })
}

/// Re-express a wrench in another frame via the transpose of the adjoint
/// `Ad = [[R, hat(p) R], [0, R]]` of `t_ab`.
///
/// The input is a wrench written in frame `a`; the output is the same
/// physical wrench written in frame `b`, where `t_ab` is the pose of `b`
/// in `a`. The lever-arm term converts the mm translation to metres so
/// moments stay in Nm.
pub fn transform_wrench(t_ab: &Transform, w: &Wrench) -> Wrench {
    let rt = t_ab.rotation.inverse();
    let p_m = t_ab.translation / MM_PER_M;
    Wrench {
        force: rt * w.force,
        moment: rt * (w.moment - p_m.cross(&w.force)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_twist(rng: &mut ChaCha8Rng, max_angle: f64) -> Twist {
        let axis = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        )
        .normalize();
        let angle = rng.gen_range(0.0..max_angle);
        let linear = Vector3::new(
            rng.gen_range(-10.0..10.0),
            rng.gen_range(-10.0..10.0),
            rng.gen_range(-10.0..10.0),
        );
        Twist::new(linear, axis * angle)
    }

    #[test]
    fn hat_zero_is_zero_matrix() {
        assert_eq!(hat(&Vector3::zeros()), Matrix3::zeros());
    }

    #[test]
    fn hat_basis_vector() {
        let expected = Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0);
        assert_eq!(hat(&Vector3::x()), expected);
    }

    #[test]
    fn hat_matches_cross_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let v = Vector3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>());
            let u = Vector3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>());
            assert_relative_eq!(hat(&v) * u, v.cross(&u), epsilon = 1e-15);
        }
    }

    #[test]
    fn hat_transpose_is_negation_exactly() {
        let v = Vector3::new(0.3, -1.7, 2.9);
        assert_eq!(hat(&v).transpose(), -hat(&v));
    }

    #[test]
    fn exp_zero_twist_is_identity() {
        let t = exp(&Twist::zero());
        assert_eq!(t.rotation.matrix(), Rotation::identity().matrix());
        assert_eq!(t.translation, Vector3::zeros());
    }

    #[test]
    fn exp_pure_translation() {
        let t = exp(&Twist::new(Vector3::new(5.0, 0.0, 0.0), Vector3::zeros()));
        assert_relative_eq!(t.translation, Vector3::new(5.0, 0.0, 0.0), epsilon = 1e-15);
        assert_relative_eq!(*t.rotation.matrix(), Matrix3::identity(), epsilon = 1e-15);
    }

    /// Independent Rodrigues evaluation used as the oracle for `exp`.
    fn rodrigues(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
        let k = hat(&axis.normalize());
        Matrix3::identity() + angle.sin() * k + (1.0 - angle.cos()) * (k * k)
    }

    #[test]
    fn exp_quarter_turn_matches_rodrigues() {
        let t = exp(&Twist::new(
            Vector3::zeros(),
            Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2),
        ));
        let expected = rodrigues(&Vector3::z(), std::f64::consts::FRAC_PI_2);
        assert_relative_eq!(*t.rotation.matrix(), expected, epsilon = 1e-14);
        assert_relative_eq!(t.translation, Vector3::zeros(), epsilon = 1e-14);
    }

    #[test]
    fn log_identity_is_zero() {
        let xi = log(&Transform::identity()).unwrap();
        assert_eq!(xi.to_vector(), Vector6::zeros());
    }

    #[test]
    fn log_pure_translation() {
        let t = Transform::from_translation(Vector3::new(1.0, 2.0, 3.0));
        let xi = log(&t).unwrap();
        assert_relative_eq!(xi.linear, Vector3::new(1.0, 2.0, 3.0), epsilon = 1e-15);
        assert_eq!(xi.angular, Vector3::zeros());
    }

    #[test]
    fn log_z_rotation_round_trip() {
        let xi = Twist::new(Vector3::zeros(), Vector3::new(0.0, 0.0, 0.3));
        let back = log(&exp(&xi)).unwrap();
        assert_relative_eq!(back.to_vector(), xi.to_vector(), epsilon = 1e-12);
    }

    #[test]
    fn round_trip_1000_random_twists() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let xi = random_twist(&mut rng, std::f64::consts::PI - 0.1);
            let back = log(&exp(&xi)).unwrap();
            worst = worst.max((back.to_vector() - xi.to_vector()).norm());
        }
        assert!(worst < 1e-10, "worst round-trip error {worst}");
    }

    #[test]
    fn round_trip_survives_near_pi() {
        // Above the 3.0 rad switch to the symmetric-part branch.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let axis = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
            .normalize();
            let angle = rng.gen_range(3.0..std::f64::consts::PI - 1e-6);
            let xi = Twist::new(Vector3::new(1.0, -2.0, 0.5), axis * angle);
            let back = log(&exp(&xi)).unwrap();
            assert!(
                (back.to_vector() - xi.to_vector()).norm() < 1e-9,
                "angle {angle}"
            );
        }
    }

    #[test]
    fn log_errors_at_pi() {
        let t = exp(&Twist::new(
            Vector3::zeros(),
            Vector3::new(std::f64::consts::PI, 0.0, 0.0),
        ));
        match log(&t) {
            Err(LieError::AngleAtPi { .. }) => {}
            other => panic!("expected AngleAtPi, got {other:?}"),
        }
    }

    #[test]
    fn transform_inverse_composes_to_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let t = exp(&random_twist(&mut rng, 2.5));
            let i = t * t.inverse();
            assert!((i.rotation.matrix() - Matrix3::identity()).norm() < 1e-12);
            assert!(i.translation.norm() < 1e-11);
        }
    }

    #[test]
    fn composition_is_associative() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let t1 = exp(&random_twist(&mut rng, 2.5));
            let t2 = exp(&random_twist(&mut rng, 2.5));
            let t3 = exp(&random_twist(&mut rng, 2.5));
            let left = (t1 * t2) * t3;
            let right = t1 * (t2 * t3);
            assert!((left.rotation.matrix() - right.rotation.matrix()).norm() < 1e-12);
            assert!((left.translation - right.translation).norm() < 1e-12);
        }
    }

    #[test]
    fn wrench_unchanged_by_identity() {
        let w = Wrench::new(Vector3::new(1.0, -2.0, 3.0), Vector3::new(0.1, 0.2, -0.3));
        let out = transform_wrench(&Transform::identity(), &w);
        assert_eq!(out.to_vector(), w.to_vector());
    }

    #[test]
    fn pure_force_gains_lever_moment() {
        // Frame b sits d mm along +z of frame a; a pure x force picks up a -y moment.
        let d = 100.0;
        let f = 2.0;
        let t = Transform::from_translation(Vector3::new(0.0, 0.0, d));
        let w = Wrench::new(Vector3::new(f, 0.0, 0.0), Vector3::zeros());
        let out = transform_wrench(&t, &w);
        // hand oracle: m = -(p/1000) x f
        let expected = -(Vector3::new(0.0, 0.0, d) / MM_PER_M).cross(&Vector3::new(f, 0.0, 0.0));
        assert_relative_eq!(out.force, w.force, epsilon = 1e-15);
        assert_relative_eq!(out.moment, expected, epsilon = 1e-15);
        assert_relative_eq!(out.moment.y, -d / MM_PER_M * f, epsilon = 1e-15);
    }

    #[test]
    fn zero_wrench_stays_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let t = exp(&random_twist(&mut rng, 3.0));
            let out = transform_wrench(&t, &Wrench::zero());
            assert_eq!(out.to_vector(), Vector6::zeros());
        }
    }

    #[test]
    fn wrench_transport_composes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let t1 = exp(&random_twist(&mut rng, 2.0));
            let t2 = exp(&random_twist(&mut rng, 2.0));
            let w = Wrench::new(
                Vector3::new(rng.gen(), rng.gen(), rng.gen()),
                Vector3::new(rng.gen(), rng.gen(), rng.gen()),
            );
            let stepwise = transform_wrench(&t2, &transform_wrench(&t1, &w));
            let composed = transform_wrench(&(t1 * t2), &w);
            assert_relative_eq!(stepwise.to_vector(), composed.to_vector(), epsilon = 1e-12);
        }
    }

    #[test]
    fn rotation_from_matrix_rejects_scaled() {
        let m = Matrix3::identity() * 1.001;
        assert!(matches!(
            Rotation::from_matrix(m),
            Err(LieError::NotARotation { .. })
        ));
    }
}
