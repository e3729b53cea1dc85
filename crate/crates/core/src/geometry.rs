//! SE(2) pose algebra and pose-noise sampling.
//!
//! Poses are stored as `(x, y, theta)` with `theta` wrapped to `(-pi, pi]`.
//! Linearization throughout the crate uses the same coordinates: the tangent
//! displacement between two poses is their component-wise difference with the
//! angle difference wrapped (see [`Pose2::local`] and [`Pose2::retract`]).

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{Matrix2, Matrix3, SymmetricEigen, Vector2, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(angle: f64) -> f64 {
    if angle > -PI && angle <= PI {
        return angle;
    }
    let mut a = angle.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    // rem_euclid maps -pi to pi, which is the representative we want.
    a
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    #[serde(rename = "x_m")]
    pub x: f64,
    #[serde(rename = "y_m")]
    pub y: f64,
    #[serde(rename = "theta_rad")]
    pub theta: f64,
}

impl Default for Pose2 {
    fn default() -> Self {
        Self::identity()
    }
}

impl fmt::Display for Pose2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.4}, {:.4}, {:.4})", self.x, self.y, self.theta)
    }
}

impl Pose2 {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    pub const fn identity() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            theta: 0.0,
        }
    }

    pub fn translation(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }

    pub fn rotation(&self) -> Matrix2<f64> {
        let (s, c) = self.theta.sin_cos();
        Matrix2::new(c, -s, s, c)
    }

    /// `self ⊕ other`: `other` expressed in the frame of `self`.
    pub fn compose(&self, other: &Pose2) -> Pose2 {
        let t = self.translation() + self.rotation() * other.translation();
        Pose2::new(t.x, t.y, self.theta + other.theta)
    }

    pub fn inverse(&self) -> Pose2 {
        let t = -(self.rotation().transpose() * self.translation());
        Pose2::new(t.x, t.y, -self.theta)
    }

    /// Relative pose `rel` with `self.compose(rel) == other`.
    pub fn between(&self, other: &Pose2) -> Pose2 {
        let t = self.rotation().transpose() * (other.translation() - self.translation());
        Pose2::new(t.x, t.y, other.theta - self.theta)
    }

    pub fn to_vector(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.theta)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Pose2 {
        Pose2::new(v.x, v.y, v.z)
    }

    /// Tangent displacement from `self` to `other` in `(x, y, theta)` coordinates.
    pub fn local(&self, other: &Pose2) -> Vector3<f64> {
        Vector3::new(
            other.x - self.x,
            other.y - self.y,
            wrap_angle(other.theta - self.theta),
        )
    }

    /// Inverse of [`Pose2::local`].
    pub fn retract(&self, delta: &Vector3<f64>) -> Pose2 {
        Pose2::new(self.x + delta.x, self.y + delta.y, self.theta + delta.z)
    }

    pub fn distance(&self, other: &Pose2) -> f64 {
        (other.translation() - self.translation()).norm()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.theta.is_finite()
    }
}

/// Analytic Jacobians of [`Pose2::between`] with respect to both arguments,
/// in `(x, y, theta)` coordinates.
pub fn between_jacobians(a: &Pose2, b: &Pose2) -> (Matrix3<f64>, Matrix3<f64>) {
    let (s, c) = a.theta.sin_cos();
    let dx = b.x - a.x;
    let dy = b.y - a.y;
    #[rustfmt::skip]
    let ja = Matrix3::new(
        -c, -s, -s * dx + c * dy,
         s, -c, -c * dx - s * dy,
        0.0, 0.0, -1.0,
    );
    #[rustfmt::skip]
    let jb = Matrix3::new(
         c,   s, 0.0,
        -s,   c, 0.0,
        0.0, 0.0, 1.0,
    );
    (ja, jb)
}

/// 3x3 pose noise covariance, units (m², m², rad²) on the diagonal.
///
/// Positive semi-definite matrices are accepted so that noise-free scenarios
/// can be expressed with an all-zero covariance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseCovariance3 {
    matrix: Matrix3<f64>,
    sqrt: Matrix3<f64>,
}

impl NoiseCovariance3 {
    pub fn new(matrix: Matrix3<f64>) -> Result<Self> {
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("noise covariance has non-finite entries"));
        }
        let asym = (matrix - matrix.transpose()).abs().max();
        if asym > 1e-12 {
            return Err(Error::config(format!(
                "noise covariance is not symmetric (max asymmetry {asym:.3e})"
            )));
        }
        let eig = SymmetricEigen::new(matrix);
        let scale = matrix.abs().max().max(1.0);
        if eig.eigenvalues.iter().any(|&l| l < -1e-12 * scale) {
            return Err(Error::config(format!(
                "noise covariance is not positive semi-definite (eigenvalues {:?})",
                eig.eigenvalues.as_slice()
            )));
        }
        let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
        let sqrt = eig.eigenvectors * Matrix3::from_diagonal(&roots);
        Ok(Self { matrix, sqrt })
    }

    pub fn diagonal(x: f64, y: f64, theta: f64) -> Result<Self> {
        Self::new(Matrix3::from_diagonal(&Vector3::new(x, y, theta)))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.matrix
    }

    /// Information matrix; `None` when the covariance is singular.
    pub fn information(&self) -> Option<Matrix3<f64>> {
        self.matrix.cholesky().map(|c| c.inverse())
    }

    /// Draws a zero-mean perturbation `(dx, dy, dtheta)` with this covariance.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector3<f64> {
        let n = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        self.sqrt * n
    }
}

/// Samples a body-frame pose perturbation with covariance `cov`.
///
/// The result is meant to be applied on the right: `pose.compose(&noise)`.
pub fn sample_pose_noise<R: Rng + ?Sized>(cov: &NoiseCovariance3, rng: &mut R) -> Pose2 {
    let v = cov.sample(rng);
    Pose2::new(v.x, v.y, v.z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn close(a: &Pose2, b: &Pose2, tol: f64) -> bool {
        (a.x - b.x).abs() < tol
            && (a.y - b.y).abs() < tol
            && wrap_angle(a.theta - b.theta).abs() < tol
    }

    #[test]
    fn compose_examples() {
        let p = Pose2::new(1.0, 2.0, 0.3);
        assert_eq!(Pose2::identity().compose(&p), p);
        let q = Pose2::new(1.0, 0.0, FRAC_PI_2).compose(&Pose2::new(1.0, 0.0, 0.0));
        assert!(close(&q, &Pose2::new(1.0, 1.0, FRAC_PI_2), 1e-12));
        assert!(close(&p.compose(&p.inverse()), &Pose2::identity(), 1e-12));
    }

    #[test]
    fn between_examples() {
        let p = Pose2::new(-3.0, 0.5, 2.0);
        assert!(close(&p.between(&p), &Pose2::identity(), 1e-12));
        let b = Pose2::new(1.0, 1.0, FRAC_PI_2);
        assert!(close(&Pose2::identity().between(&b), &b, 1e-12));
        let a = Pose2::new(1.0, 0.0, FRAC_PI_2);
        assert!(close(&a.between(&b), &Pose2::new(1.0, 0.0, 0.0), 1e-12));
    }

    #[test]
    fn wrap_convention() {
        assert_eq!(wrap_angle(PI), PI);
        assert_abs_diff_eq!(wrap_angle(-PI), PI);
        assert_abs_diff_eq!(wrap_angle(3.0 * PI), PI, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_angle(-0.5), -0.5);
        assert!(wrap_angle(-PI - 1e-9) > 3.0);
    }

    #[test]
    fn between_jacobians_match_finite_differences() {
        let a = Pose2::new(0.4, -1.2, 0.7);
        let b = Pose2::new(2.0, 0.5, -2.5);
        let (ja, jb) = between_jacobians(&a, &b);
        let h = 1e-6;
        for i in 0..3 {
            let mut d = Vector3::zeros();
            d[i] = h;
            let fa = (a.retract(&d).between(&b).to_vector() - a.retract(&-d).between(&b).to_vector()) / (2.0 * h);
            let fb = (a.between(&b.retract(&d)).to_vector() - a.between(&b.retract(&-d)).to_vector()) / (2.0 * h);
            for r in 0..3 {
                assert_abs_diff_eq!(ja[(r, i)], fa[r], epsilon = 1e-7);
                assert_abs_diff_eq!(jb[(r, i)], fb[r], epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn zero_covariance_gives_identity_noise() {
        let cov = NoiseCovariance3::new(Matrix3::zeros()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(sample_pose_noise(&cov, &mut rng), Pose2::identity());
    }

    #[test]
    fn rejects_invalid_covariances() {
        assert!(NoiseCovariance3::diagonal(1.0, -1.0, 1.0).is_err());
        let mut m = Matrix3::identity();
        m[(0, 1)] = 0.5;
        assert!(NoiseCovariance3::new(m).is_err());
        assert!(NoiseCovariance3::diagonal(f64::NAN, 1.0, 1.0).is_err());
    }

    #[test]
    fn sample_covariance_matches_motion_noise() {
        let cov = NoiseCovariance3::diagonal(0.003, 0.003, 0.001).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut acc = Matrix3::zeros();
        let mut mean = Vector3::zeros();
        let draws: Vec<_> = (0..n).map(|_| sample_pose_noise(&cov, &mut rng).to_vector()).collect();
        for d in &draws {
            mean += d;
        }
        mean /= n as f64;
        for d in &draws {
            let c = d - mean;
            acc += c * c.transpose();
        }
        acc /= (n - 1) as f64;
        for i in 0..3 {
            let want = cov.matrix()[(i, i)];
            assert!((acc[(i, i)] - want).abs() / want < 0.05, "axis {i}: {} vs {want}", acc[(i, i)]);
        }
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let cov = NoiseCovariance3::diagonal(0.1, 0.1, 0.01).unwrap();
        let a = sample_pose_noise(&cov, &mut ChaCha8Rng::seed_from_u64(5));
        let b = sample_pose_noise(&cov, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
    }

    fn pose() -> impl Strategy<Value = Pose2> {
        (-50.0..50.0f64, -50.0..50.0f64, -10.0..10.0f64).prop_map(|(x, y, t)| Pose2::new(x, y, t))
    }

    proptest! {
        #[test]
        fn compose_is_associative(a in pose(), b in pose(), c in pose()) {
            let l = a.compose(&b).compose(&c);
            let r = a.compose(&b.compose(&c));
            prop_assert!(close(&l, &r, 1e-10));
        }

        #[test]
        fn between_round_trips(a in pose(), b in pose()) {
            prop_assert!(close(&a.compose(&a.between(&b)), &b, 1e-10));
        }

        #[test]
        fn theta_stays_wrapped(a in pose(), b in pose()) {
            for p in [a.compose(&b), a.between(&b), a.inverse()] {
                prop_assert!(p.theta > -PI && p.theta <= PI);
            }
        }

        #[test]
        fn wrap_is_idempotent(t in -100.0..100.0f64) {
            prop_assert_eq!(wrap_angle(wrap_angle(t)), wrap_angle(t));
        }

        #[test]
        fn local_retract_round_trip(a in pose(), b in pose()) {
            prop_assert!(close(&a.retract(&a.local(&b)), &b, 1e-9));
        }
    }
}
