//! Rigid camera poses stored as unit quaternion + translation.
//!
//! The quaternion uses w-x-y-z component order. Rotation is evaluated with
//! the polynomial matrix form of the quaternion, without internal
//! renormalization, so gradients taken on the raw four components are
//! well-defined; optimizers project those gradients onto the unit-sphere
//! tangent and renormalize after each step.

use nalgebra::{Matrix3, Vector3};
use num_traits::Float;

/// Quaternion in w-x-y-z order. Kept unit-norm by construction sites.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quat {
    pub const IDENTITY: Quat = Quat { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quat { w, x, y, z }
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(&self) -> Quat {
        let n = self.norm();
        Quat { w: self.w / n, x: self.x / n, y: self.y / n, z: self.z / n }
    }

    pub fn conjugate(&self) -> Quat {
        Quat { w: self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    /// Hamilton product `self * rhs`.
    pub fn mul(&self, rhs: &Quat) -> Quat {
        Quat {
            w: self.w * rhs.w - self.x * rhs.x - self.y * rhs.y - self.z * rhs.z,
            x: self.w * rhs.x + self.x * rhs.w + self.y * rhs.z - self.z * rhs.y,
            y: self.w * rhs.y - self.x * rhs.z + self.y * rhs.w + self.z * rhs.x,
            z: self.w * rhs.z + self.x * rhs.y - self.y * rhs.x + self.z * rhs.w,
        }
    }

    /// Rotation matrix of the quaternion, in the polynomial form that is
    /// valid for unit quaternions and extends smoothly to raw ones.
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    /// Rotates `v`. Uses the polynomial matrix form; no normalization.
    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        let (vx, vy, vz) = (v.x, v.y, v.z);
        Vector3::new(
            (1.0 - 2.0 * (y * y + z * z)) * vx + 2.0 * (x * y - w * z) * vy + 2.0 * (x * z + w * y) * vz,
            2.0 * (x * y + w * z) * vx + (1.0 - 2.0 * (x * x + z * z)) * vy + 2.0 * (y * z - w * x) * vz,
            2.0 * (x * z - w * y) * vx + 2.0 * (y * z + w * x) * vy + (1.0 - 2.0 * (x * x + y * y)) * vz,
        )
    }

    /// Gradient of `rotate` with respect to the four raw quaternion
    /// components: returns `d(R(q) v) / d(w,x,y,z)` as four 3-vectors.
    pub fn rotate_jacobian_q(&self, v: &Vector3<f64>) -> [Vector3<f64>; 4] {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        let (vx, vy, vz) = (v.x, v.y, v.z);
        let dw = Vector3::new(
            -2.0 * z * vy + 2.0 * y * vz,
            2.0 * z * vx - 2.0 * x * vz,
            -2.0 * y * vx + 2.0 * x * vy,
        );
        let dx = Vector3::new(
            2.0 * y * vy + 2.0 * z * vz,
            2.0 * y * vx - 4.0 * x * vy - 2.0 * w * vz,
            2.0 * z * vx + 2.0 * w * vy - 4.0 * x * vz,
        );
        let dy = Vector3::new(
            -4.0 * y * vx + 2.0 * x * vy + 2.0 * w * vz,
            2.0 * x * vx + 2.0 * z * vz,
            -2.0 * w * vx + 2.0 * z * vy - 4.0 * y * vz,
        );
        let dz = Vector3::new(
            -4.0 * z * vx - 2.0 * w * vy + 2.0 * x * vz,
            2.0 * w * vx - 4.0 * z * vy + 2.0 * y * vz,
            2.0 * x * vx + 2.0 * y * vy,
        );
        [dw, dx, dy, dz]
    }

    /// Quaternion from a rotation matrix (Shepperd's method).
    pub fn from_rotation_matrix(m: &Matrix3<f64>) -> Quat {
        let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
        let q = if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            Quat {
                w: 0.25 * s,
                x: (m[(2, 1)] - m[(1, 2)]) / s,
                y: (m[(0, 2)] - m[(2, 0)]) / s,
                z: (m[(1, 0)] - m[(0, 1)]) / s,
            }
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            Quat {
                w: (m[(2, 1)] - m[(1, 2)]) / s,
                x: 0.25 * s,
                y: (m[(0, 1)] + m[(1, 0)]) / s,
                z: (m[(0, 2)] + m[(2, 0)]) / s,
            }
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            Quat {
                w: (m[(0, 2)] - m[(2, 0)]) / s,
                x: (m[(0, 1)] + m[(1, 0)]) / s,
                y: 0.25 * s,
                z: (m[(1, 2)] + m[(2, 1)]) / s,
            }
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            Quat {
                w: (m[(1, 0)] - m[(0, 1)]) / s,
                x: (m[(0, 2)] + m[(2, 0)]) / s,
                y: (m[(1, 2)] + m[(2, 1)]) / s,
                z: 0.25 * s,
            }
        };
        q.normalized()
    }

    /// Axis-angle (rotation vector) of the quaternion.
    pub fn to_axis_angle(&self) -> Vector3<f64> {
        let q = if self.w < 0.0 {
            Quat { w: -self.w, x: -self.x, y: -self.y, z: -self.z }
        } else {
            *self
        };
        let vn = (q.x * q.x + q.y * q.y + q.z * q.z).sqrt();
        if vn < 1e-12 {
            return Vector3::new(2.0 * q.x, 2.0 * q.y, 2.0 * q.z);
        }
        let angle = 2.0 * Float::atan2(vn, q.w);
        Vector3::new(q.x, q.y, q.z) * (angle / vn)
    }

    /// Quaternion of a rotation vector.
    pub fn from_axis_angle(omega: &Vector3<f64>) -> Quat {
        let angle = omega.norm();
        if angle < 1e-12 {
            return Quat { w: 1.0, x: 0.5 * omega.x, y: 0.5 * omega.y, z: 0.5 * omega.z }
                .normalized();
        }
        let half = 0.5 * angle;
        let s = half.sin() / angle;
        Quat { w: half.cos(), x: omega.x * s, y: omega.y * s, z: omega.z * s }
    }

    /// Angle of the rotation, in radians.
    pub fn angle(&self) -> f64 {
        self.to_axis_angle().norm()
    }
}

/// SE(3) camera pose: `world_point = R(q) * cam_point + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub q: Quat,
    pub t: Vector3<f64>,
}

impl Pose {
    pub const IDENTITY: Pose =
        Pose { q: Quat::IDENTITY, t: Vector3::new(0.0, 0.0, 0.0) };

    pub fn new(q: Quat, t: Vector3<f64>) -> Self {
        Pose { q: q.normalized(), t }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Pose { q: Quat::IDENTITY, t }
    }

    /// Composition: the result applies `rhs` first, then `self`.
    pub fn compose(&self, rhs: &Pose) -> Pose {
        Pose {
            q: self.q.mul(&rhs.q).normalized(),
            t: self.q.rotate(&rhs.t) + self.t,
        }
    }

    pub fn inverse(&self) -> Pose {
        let qi = self.q.conjugate();
        Pose { q: qi, t: -qi.rotate(&self.t) }
    }

    /// Applies the pose to a point.
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.q.rotate(p) + self.t
    }

    /// Renormalizes the quaternion; call after optimizer steps.
    pub fn renormalize(&mut self) {
        self.q = self.q.normalized();
    }

    /// Translation distance and rotation angle to another pose.
    pub fn error_to(&self, other: &Pose) -> (f64, f64) {
        let dt = (self.t - other.t).norm();
        let dq = self.q.conjugate().mul(&other.q);
        (dt, dq.angle())
    }

    /// SE(3) logarithm: rotation vector and V^-1-corrected translation.
    pub fn log(&self) -> [f64; 6] {
        let omega = self.q.to_axis_angle();
        let vinv = so3_left_jacobian_inv(&omega);
        let rho = vinv * self.t;
        [rho.x, rho.y, rho.z, omega.x, omega.y, omega.z]
    }

    /// SE(3) exponential of a twist `[rho, omega]`.
    pub fn exp(xi: &[f64; 6]) -> Pose {
        let rho = Vector3::new(xi[0], xi[1], xi[2]);
        let omega = Vector3::new(xi[3], xi[4], xi[5]);
        let q = Quat::from_axis_angle(&omega);
        let v = so3_left_jacobian(&omega);
        Pose { q, t: v * rho }
    }

    /// Homogeneous 4x4 matrix, row-major.
    pub fn to_matrix4(&self) -> [[f64; 4]; 4] {
        let r = self.q.rotation_matrix();
        let mut m = [[0.0; 4]; 4];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = r[(i, j)];
            }
            m[i][3] = self.t[i];
        }
        m[3][3] = 1.0;
        m
    }
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Left Jacobian V of SO(3): exp([rho, omega]) has translation V(omega) rho.
pub fn so3_left_jacobian(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let k = skew(omega);
    if theta < 1e-8 {
        return Matrix3::identity() + 0.5 * k + (k * k) / 6.0;
    }
    let t2 = theta * theta;
    Matrix3::identity() + k * ((1.0 - theta.cos()) / t2) + (k * k) * ((theta - theta.sin()) / (t2 * theta))
}

/// Inverse of the SO(3) left Jacobian.
pub fn so3_left_jacobian_inv(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let k = skew(omega);
    if theta < 1e-8 {
        return Matrix3::identity() - 0.5 * k + (k * k) / 12.0;
    }
    let half = 0.5 * theta;
    let cot = half.cos() / half.sin();
    let coeff = (1.0 - half * cot) / (theta * theta);
    Matrix3::identity() - 0.5 * k + (k * k) * coeff
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn random_pose(rng: &mut ChaCha12Rng) -> Pose {
        let q = Quat::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
        .normalized();
        let t = Vector3::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        );
        Pose { q, t }
    }

    fn mat4_mul(a: &[[f64; 4]; 4], b: &[[f64; 4]; 4]) -> [[f64; 4]; 4] {
        let mut out = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                for k in 0..4 {
                    out[i][j] += a[i][k] * b[k][j];
                }
            }
        }
        out
    }

    #[test]
    fn identity_compose() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let p = random_pose(&mut rng);
        let c = Pose::IDENTITY.compose(&p);
        let (dt, da) = c.error_to(&p);
        assert!(dt < 1e-12 && da < 1e-12);
    }

    #[test]
    fn inverse_composes_to_identity() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        for _ in 0..50 {
            let p = random_pose(&mut rng);
            let id = p.compose(&p.inverse());
            let (dt, da) = id.error_to(&Pose::IDENTITY);
            assert!(dt < 1e-9, "translation norm {dt}");
            assert!(da < 1e-9, "rotation angle {da}");
        }
    }

    #[test]
    fn compose_matches_matrix_product() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..50 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let c = a.compose(&b);
            let m = mat4_mul(&a.to_matrix4(), &b.to_matrix4());
            let cm = c.to_matrix4();
            for i in 0..4 {
                for j in 0..4 {
                    assert!((m[i][j] - cm[i][j]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn compose_associative() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        for _ in 0..30 {
            let (a, b, c) = (random_pose(&mut rng), random_pose(&mut rng), random_pose(&mut rng));
            let left = a.compose(&b).compose(&c);
            let right = a.compose(&b.compose(&c));
            let (dt, da) = left.error_to(&right);
            assert!(dt < 1e-9 && da < 1e-9);
        }
    }

    #[test]
    fn transform_identity_and_translation() {
        let p = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(Pose::IDENTITY.transform_point(&p), p);
        let shift = Pose::from_translation(Vector3::new(0.0, 0.0, 5.0));
        assert_eq!(shift.transform_point(&Vector3::zeros()), Vector3::new(0.0, 0.0, 5.0));
    }

    #[test]
    fn transform_yaw_90deg() {
        let half = core::f64::consts::FRAC_PI_4;
        let q = Quat::new(half.cos(), 0.0, 0.0, half.sin());
        let pose = Pose::new(q, Vector3::zeros());
        let out = pose.transform_point(&Vector3::new(1.0, 0.0, 0.0));
        assert!((out - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-9);
    }

    #[test]
    fn rotate_jacobian_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..20 {
            let q = random_pose(&mut rng).q;
            let v = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let jac = q.rotate_jacobian_q(&v);
            let h = 1e-6;
            for c in 0..4 {
                let mut qp = q;
                let mut qm = q;
                match c {
                    0 => {
                        qp.w += h;
                        qm.w -= h;
                    }
                    1 => {
                        qp.x += h;
                        qm.x -= h;
                    }
                    2 => {
                        qp.y += h;
                        qm.y -= h;
                    }
                    _ => {
                        qp.z += h;
                        qm.z -= h;
                    }
                }
                let fd = (qp.rotate(&v) - qm.rotate(&v)) / (2.0 * h);
                assert!((fd - jac[c]).norm() < 1e-6, "component {c}: {:?} vs {:?}", fd, jac[c]);
            }
        }
    }

    #[test]
    fn se3_exp_log_roundtrip() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        for _ in 0..50 {
            let xi = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.5..1.5),
            ];
            let pose = Pose::exp(&xi);
            let back = pose.log();
            for i in 0..6 {
                assert!((back[i] - xi[i]).abs() < 1e-9, "{back:?} vs {xi:?}");
            }
        }
    }

    #[test]
    fn quat_norm_preserved_by_compose() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let mut p = random_pose(&mut rng);
        for _ in 0..1000 {
            p = p.compose(&random_pose(&mut rng));
            assert!((p.q.norm() - 1.0).abs() < 1e-9);
        }
    }
}
