//! Rotation and rigid-pose algebra.
//!
//! Conventions used throughout the crate:
//!
//! - Quaternions are stored scalar-first `(w, x, y, z)` and canonicalized to
//!   the `w >= 0` hemisphere whenever they are produced from a matrix.
//! - `RotationMatrix` `R^j_i` maps coordinates in frame `i` to frame `j`.
//! - Twists are ordered translation first, rotation second: `(rho, phi)`.
//! - SE(3) error coordinates use the right (body) convention,
//!   `log(X * exp(delta)) ~= log(X) + J_r^-1 * delta`.

use std::fmt;
use std::ops::{Mul, Neg};

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Orthonormality tolerance for matrices accepted from the outside.
pub const ORTHONORMAL_TOL: f64 = 1e-9;

const SMALL_ANGLE: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("quaternion has zero or non-finite norm")]
    DegenerateQuaternion,
    #[error("matrix is not a rotation (orthonormality error {ortho:.3e}, det {det:.12})")]
    NotARotation { ortho: f64, det: f64 },
    #[error("non-finite component")]
    NonFinite,
}

/// Unit quaternion `(w, x, y, z)`.
#[derive(Clone, Copy, PartialEq)]
pub struct UnitQuaternion {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl fmt::Debug for UnitQuaternion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Quat({}, {}, {}, {})", self.w, self.x, self.y, self.z)
    }
}

impl UnitQuaternion {
    pub const IDENTITY: UnitQuaternion = UnitQuaternion { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    /// Normalizes `(w, x, y, z)`. Sign is preserved; use [`canonical`](Self::canonical)
    /// to fold into the `w >= 0` hemisphere.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self, GeomError> {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if !n.is_finite() || n < 1e-300 {
            return Err(GeomError::DegenerateQuaternion);
        }
        Ok(Self { w: w / n, x: x / n, y: y / n, z: z / n })
    }

    /// Builds from raw parts that are already unit norm (e.g. decoded from a
    /// record written by this crate). Renormalizes only if the norm is off by
    /// more than 1e-12.
    pub fn from_parts_unit(w: f64, x: f64, y: f64, z: f64) -> Result<Self, GeomError> {
        let n2 = w * w + x * x + y * y + z * z;
        if !n2.is_finite() {
            return Err(GeomError::NonFinite);
        }
        if (n2 - 1.0).abs() <= 1e-12 {
            Ok(Self { w, x, y, z })
        } else {
            Self::new(w, x, y, z)
        }
    }

    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        Self::exp(&(axis.normalize() * angle))
    }

    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn x(&self) -> f64 {
        self.x
    }
    pub fn y(&self) -> f64 {
        self.y
    }
    pub fn z(&self) -> f64 {
        self.z
    }
    pub fn to_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }
    pub fn vector(&self) -> Vec3 {
        Vec3::new(self.x, self.y, self.z)
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    /// Folds into the `w >= 0` hemisphere.
    pub fn canonical(self) -> Self {
        if self.w < 0.0 {
            -self
        } else {
            self
        }
    }

    pub fn conjugate(&self) -> Self {
        Self { w: self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        let u = self.vector();
        let t = 2.0 * u.cross(v);
        v + self.w * t + u.cross(&t)
    }

    /// Rotation vector (axis * angle), angle in `[0, pi]`.
    pub fn log(&self) -> Vec3 {
        let q = self.canonical();
        let v = q.vector();
        let n = v.norm();
        if n < 1e-8 {
            // atan2(n, w) / n = (1 - n^2 / (3 w^2)) / w + O(n^4)
            v * (2.0 / q.w) * (1.0 - n * n / (3.0 * q.w * q.w))
        } else {
            v * (2.0 * n.atan2(q.w) / n)
        }
    }

    pub fn exp(v: &Vec3) -> Self {
        let theta2 = v.norm_squared();
        let theta = theta2.sqrt();
        let half = 0.5 * theta;
        // sin(theta/2) / theta
        let k = if theta < 1e-4 {
            0.5 - theta2 / 48.0 + theta2 * theta2 / 3840.0
        } else {
            half.sin() / theta
        };
        let (w, x, y, z) = (half.cos(), v.x * k, v.y * k, v.z * k);
        // Already unit norm to rounding.
        Self { w, x, y, z }
    }

    /// Rotation angle in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        2.0 * self.vector().norm().atan2(self.w.abs())
    }

    /// Geodesic distance between the rotations represented by two quaternions.
    pub fn angle_to(&self, other: &Self) -> f64 {
        (self.conjugate() * *other).angle()
    }

    pub fn to_matrix(&self) -> RotationMatrix {
        quat_to_matrix(self)
    }
}

impl Neg for UnitQuaternion {
    type Output = Self;
    fn neg(self) -> Self {
        Self { w: -self.w, x: -self.x, y: -self.y, z: -self.z }
    }
}

impl Mul for UnitQuaternion {
    type Output = Self;
    fn mul(self, b: Self) -> Self {
        let a = self;
        Self {
            w: a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            x: a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            y: a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            z: a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        }
    }
}

/// Element of SO(3).
#[derive(Clone, Copy, PartialEq)]
pub struct RotationMatrix(Mat3);

impl fmt::Debug for RotationMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "RotationMatrix{:?}", self.0.transpose().as_slice())
    }
}

impl Default for RotationMatrix {
    fn default() -> Self {
        Self::identity()
    }
}

impl RotationMatrix {
    pub fn identity() -> Self {
        Self(Mat3::identity())
    }

    /// Validates orthonormality (`|R^T R - I|_inf < 1e-9`, `det = 1 +- 1e-9`).
    pub fn from_matrix(m: Mat3) -> Result<Self, GeomError> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(GeomError::NonFinite);
        }
        let ortho = (m.transpose() * m - Mat3::identity()).amax();
        let det = m.determinant();
        if ortho >= ORTHONORMAL_TOL || (det - 1.0).abs() >= ORTHONORMAL_TOL {
            return Err(GeomError::NotARotation { ortho, det });
        }
        Ok(Self(m))
    }

    /// Row-major construction with validation.
    pub fn from_rows(rows: [[f64; 3]; 3]) -> Result<Self, GeomError> {
        Self::from_matrix(Mat3::from_fn(|r, c| rows[r][c]))
    }

    /// Nearest rotation in the Frobenius sense (SVD projection).
    pub fn project(m: &Mat3) -> Result<Self, GeomError> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(GeomError::NonFinite);
        }
        let svd = m.svd(true, true);
        let (u, v_t) = match (svd.u, svd.v_t) {
            (Some(u), Some(v_t)) => (u, v_t),
            _ => return Err(GeomError::NonFinite),
        };
        let d = (u * v_t).determinant().signum();
        let fix = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, d));
        Ok(Self(u * fix * v_t))
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    /// Zero-based element access.
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.0[(row, col)]
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn apply(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }

    pub fn to_quat(&self) -> UnitQuaternion {
        matrix_to_quat(self)
    }

    pub fn row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [m[(0, 0)], m[(0, 1)], m[(0, 2)], m[(1, 0)], m[(1, 1)], m[(1, 2)], m[(2, 0)], m[(2, 1)], m[(2, 2)]]
    }
}

impl Mul for RotationMatrix {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        Self(self.0 * rhs.0)
    }
}

impl Mul<&RotationMatrix> for &RotationMatrix {
    type Output = RotationMatrix;
    fn mul(self, rhs: &RotationMatrix) -> RotationMatrix {
        RotationMatrix(self.0 * rhs.0)
    }
}

/// Rotation about z, laid out as `[[c, -s, 0], [s, c, 0], [0, 0, 1]]`.
pub fn rot_z(theta: f64) -> RotationMatrix {
    let (s, c) = theta.sin_cos();
    RotationMatrix(Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0))
}

/// Rotation about x, `[[1, 0, 0], [0, c, -s], [0, s, c]]`.
pub fn rot_x(alpha: f64) -> RotationMatrix {
    let (s, c) = alpha.sin_cos();
    RotationMatrix(Mat3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c))
}

pub fn rot_y(beta: f64) -> RotationMatrix {
    let (s, c) = beta.sin_cos();
    RotationMatrix(Mat3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c))
}

pub fn quat_to_matrix(q: &UnitQuaternion) -> RotationMatrix {
    let UnitQuaternion { w, x, y, z } = *q;
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (xy, xz, yz) = (x * y, x * z, y * z);
    let (wx, wy, wz) = (w * x, w * y, w * z);
    RotationMatrix(Mat3::new(
        1.0 - 2.0 * (yy + zz),
        2.0 * (xy - wz),
        2.0 * (xz + wy),
        2.0 * (xy + wz),
        1.0 - 2.0 * (xx + zz),
        2.0 * (yz - wx),
        2.0 * (xz - wy),
        2.0 * (yz + wx),
        1.0 - 2.0 * (xx + yy),
    ))
}

/// Shepperd's method; branches on the largest of the trace and the diagonal
/// so the pivot is never small. Result is canonical (`w >= 0`).
pub fn matrix_to_quat(r: &RotationMatrix) -> UnitQuaternion {
    let m = &r.0;
    let (m00, m11, m22) = (m[(0, 0)], m[(1, 1)], m[(2, 2)]);
    let trace = m00 + m11 + m22;
    let (w, x, y, z);
    if trace >= m00 && trace >= m11 && trace >= m22 {
        let s = 2.0 * (1.0 + trace).sqrt();
        w = 0.25 * s;
        x = (m[(2, 1)] - m[(1, 2)]) / s;
        y = (m[(0, 2)] - m[(2, 0)]) / s;
        z = (m[(1, 0)] - m[(0, 1)]) / s;
    } else if m00 >= m11 && m00 >= m22 {
        let s = 2.0 * (1.0 + m00 - m11 - m22).sqrt();
        w = (m[(2, 1)] - m[(1, 2)]) / s;
        x = 0.25 * s;
        y = (m[(0, 1)] + m[(1, 0)]) / s;
        z = (m[(0, 2)] + m[(2, 0)]) / s;
    } else if m11 >= m22 {
        let s = 2.0 * (1.0 + m11 - m00 - m22).sqrt();
        w = (m[(0, 2)] - m[(2, 0)]) / s;
        x = (m[(0, 1)] + m[(1, 0)]) / s;
        y = 0.25 * s;
        z = (m[(1, 2)] + m[(2, 1)]) / s;
    } else {
        let s = 2.0 * (1.0 + m22 - m00 - m11).sqrt();
        w = (m[(1, 0)] - m[(0, 1)]) / s;
        x = (m[(0, 2)] + m[(2, 0)]) / s;
        y = (m[(1, 2)] + m[(2, 1)]) / s;
        z = 0.25 * s;
    }
    UnitQuaternion::new(w, x, y, z).expect("rotation matrix yields finite quaternion").canonical()
}

/// Rotation vector of `r`, norm in `[0, pi]`. Goes through [`matrix_to_quat`],
/// whose largest-pivot branch keeps the axis well conditioned near `pi`.
pub fn log_so3(r: &RotationMatrix) -> Vec3 {
    matrix_to_quat(r).log()
}

pub fn exp_so3(v: &Vec3) -> RotationMatrix {
    quat_to_matrix(&UnitQuaternion::exp(v))
}

/// Shortest-arc spherical interpolation. `t = 0` and `t = 1` return the
/// endpoints unchanged.
pub fn slerp(q0: &UnitQuaternion, q1: &UnitQuaternion, t: f64) -> UnitQuaternion {
    if t <= 0.0 {
        return *q0;
    }
    if t >= 1.0 {
        return *q1;
    }
    let q1 = if q0.dot(q1) < 0.0 { -*q1 } else { *q1 };
    let rel = q0.conjugate() * q1;
    *q0 * UnitQuaternion::exp(&(rel.log() * t))
}

pub fn geodesic_distance(a: &RotationMatrix, b: &RotationMatrix) -> f64 {
    matrix_to_quat(&(a.transpose() * *b)).angle()
}

#[rustfmt::skip]
pub fn hat(v: &Vec3) -> Mat3 {
    Mat3::new(
         0.0, -v.z,  v.y,
         v.z,  0.0, -v.x,
        -v.y,  v.x,  0.0,
    )
}

/// Rigid transform; maps points of the child frame into the parent frame.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose {
    pub rotation: RotationMatrix,
    pub translation: Vec3,
}

impl Pose {
    pub fn new(rotation: RotationMatrix, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt.apply(&self.translation)) }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation.apply(p) + self.translation
    }
}

impl Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        Pose {
            rotation: self.rotation * rhs.rotation,
            translation: self.rotation.apply(&rhs.translation) + self.translation,
        }
    }
}

/// se(3) coordinates `(rho, phi)`: translation part first.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Twist(pub Vector6<f64>);

impl Twist {
    pub fn new(translation: Vec3, rotation: Vec3) -> Self {
        Self(Vector6::new(translation.x, translation.y, translation.z, rotation.x, rotation.y, rotation.z))
    }
    pub fn translation(&self) -> Vec3 {
        self.0.fixed_rows::<3>(0).into_owned()
    }
    pub fn rotation(&self) -> Vec3 {
        self.0.fixed_rows::<3>(3).into_owned()
    }
    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// `(1 - cos t) / t^2`, `(t - sin t) / t^3`.
fn so3_coeffs(theta: f64) -> (f64, f64) {
    let t2 = theta * theta;
    if theta < SMALL_ANGLE {
        (
            0.5 - t2 / 24.0 + t2 * t2 / 720.0,
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
        )
    } else {
        ((1.0 - theta.cos()) / t2, (theta - theta.sin()) / (t2 * theta))
    }
}

/// Left Jacobian of SO(3).
pub fn so3_left_jacobian(phi: &Vec3) -> Mat3 {
    let k = hat(phi);
    let (a, b) = so3_coeffs(phi.norm());
    Mat3::identity() + k * a + k * k * b
}

/// Inverse left Jacobian of SO(3); valid for `|phi| < pi`.
pub fn so3_left_jacobian_inv(phi: &Vec3) -> Mat3 {
    let theta = phi.norm();
    let k = hat(phi);
    let c = if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    } else {
        1.0 / (theta * theta) - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Mat3::identity() - k * 0.5 + k * k * c
}

pub fn se3_exp(xi: &Twist) -> Pose {
    let rho = xi.translation();
    let phi = xi.rotation();
    Pose { rotation: exp_so3(&phi), translation: so3_left_jacobian(&phi) * rho }
}

pub fn se3_log(pose: &Pose) -> Twist {
    let phi = log_so3(&pose.rotation);
    let rho = so3_left_jacobian_inv(&phi) * pose.translation;
    Twist::new(rho, phi)
}

/// Off-diagonal block `Q(rho, phi)` of the SE(3) left Jacobian.
fn se3_q(rho: &Vec3, phi: &Vec3) -> Mat3 {
    let theta = phi.norm();
    let t2 = theta * theta;
    let (c1, c2, c3) = if theta < SMALL_ANGLE {
        (
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
            1.0 / 24.0 - t2 / 720.0 + t2 * t2 / 40320.0,
            1.0 / 120.0 - t2 / 2520.0 + t2 * t2 / 120960.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        (
            (theta - s) / (t2 * theta),
            (t2 + 2.0 * c - 2.0) / (2.0 * t2 * t2),
            (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t2 * t2 * theta),
        )
    };
    let p = hat(phi);
    let r = hat(rho);
    let pr = p * r;
    let rp = r * p;
    let prp = pr * p;
    let pp = p * p;
    r * 0.5 + (pr + rp + prp) * c1 + (pp * r + rp * p - prp * 3.0) * c2 + (prp * p + pp * r * p) * c3
}

/// Inverse of the SE(3) left Jacobian.
pub fn se3_left_jacobian_inv(xi: &Twist) -> Matrix6<f64> {
    let rho = xi.translation();
    let phi = xi.rotation();
    let jinv = so3_left_jacobian_inv(&phi);
    let q = se3_q(&rho, &phi);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&jinv);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&jinv);
    out.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-(jinv * q * jinv)));
    out
}

/// Right derivative of the SE(3) log: `log(X exp(d)) ~= log(X) + J_r^-1 d`.
pub fn se3_right_jacobian_inv(xi: &Twist) -> Matrix6<f64> {
    se3_left_jacobian_inv(&Twist(-xi.0))
}
