//! Rotation and rigid-transform helpers, quintic-timed geodesic trajectories
//! and the weighted pose distance used to score plans.

use nalgebra::{Matrix3, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::Se3Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Switch to the symmetric-part axis extraction when the angle is this close to pi.
const NEAR_PI: f64 = 1e-3;

/// Skew-symmetric matrix of `v`, so that `hat(v) * w == v.cross(&w)`.
pub fn hat(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`hat`] for the antisymmetric part of `m`.
pub fn vee(m: &Mat3) -> Vec3 {
    Vec3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// Rodrigues map from an axis-angle vector to a rotation matrix.
pub fn exp_so3(axis_angle: &Vec3) -> Mat3 {
    let theta_sq = axis_angle.norm_squared();
    let k = hat(axis_angle);
    let k2 = k * k;
    let (a, b) = if theta_sq < 1e-12 {
        (1.0 - theta_sq / 6.0, 0.5 - theta_sq / 24.0)
    } else {
        let theta = theta_sq.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta_sq)
    };
    Mat3::identity() + k * a + k2 * b
}

/// Logarithm of a rotation matrix; the result has norm in `[0, pi]`.
///
/// Near pi the axis is recovered from the symmetric part of `R` using its
/// largest diagonal entry. The sign follows the (tiny) antisymmetric part when
/// it is resolvable, otherwise the first nonzero component is made positive.
pub fn log_so3(r: &Mat3) -> Vec3 {
    let w = vee(r);
    let sin_theta = w.norm();
    let cos_theta = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = sin_theta.atan2(cos_theta);

    if theta < 1e-6 {
        // theta / sin(theta) ~ 1 + theta^2 / 6
        return w * (1.0 + theta * theta / 6.0);
    }
    if PI - theta > NEAR_PI {
        return w * (theta / sin_theta);
    }

    // kk^T = (sym(R) - cos I) / (1 - cos)
    let sym = (r + r.transpose()) * 0.5;
    let outer = (sym - Mat3::identity() * cos_theta) / (1.0 - cos_theta);
    let mut j = 0;
    for i in 1..3 {
        if outer[(i, i)] > outer[(j, j)] {
            j = i;
        }
    }
    let mut axis: Vec3 = outer.column(j).into_owned() / outer[(j, j)].max(0.0).sqrt();
    axis.normalize_mut();

    let flip = if sin_theta > 1e-12 {
        axis.dot(&w) < 0.0
    } else {
        axis.iter().find(|c| c.abs() > 1e-12).is_some_and(|c| *c < 0.0)
    };
    if flip {
        axis = -axis;
    }
    axis * theta
}

pub fn rot_x(angle: f64) -> Mat3 {
    exp_so3(&Vec3::new(angle, 0.0, 0.0))
}

pub fn rot_y(angle: f64) -> Mat3 {
    exp_so3(&Vec3::new(0.0, angle, 0.0))
}

pub fn rot_z(angle: f64) -> Mat3 {
    exp_so3(&Vec3::new(0.0, 0.0, angle))
}

/// Object pose: position in meters and orientation, both in the world frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vec3,
    pub rotation: Mat3,
}

impl Pose {
    pub fn new(position: Vec3, rotation: Mat3) -> Result<Self, Se3Error> {
        let orth = (rotation.transpose() * rotation - Mat3::identity()).abs().max();
        let det = rotation.determinant();
        if !position.iter().all(|v| v.is_finite()) || !(orth <= 1e-9) || (det - 1.0).abs() > 1e-9 {
            return Err(Se3Error::InvalidRotation { orthogonality: orth, determinant: det });
        }
        Ok(Self { position, rotation })
    }

    pub fn identity() -> Self {
        Self { position: Vec3::zeros(), rotation: Mat3::identity() }
    }

    /// Planar pose with yaw about the world z axis.
    pub fn from_xyz_yaw(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        Self { position: Vec3::new(x, y, z), rotation: rot_z(yaw) }
    }

    /// Maps an object-frame point into the world frame.
    pub fn transform_point(&self, local: &Vec3) -> Vec3 {
        self.position + self.rotation * local
    }

    pub fn approx_eq(&self, other: &Pose, tol: f64) -> bool {
        (self.position - other.position).amax() <= tol
            && (self.rotation - other.rotation).amax() <= tol
    }

    /// 12 continuous features: position followed by the rotation rows.
    pub fn features(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        out[..3].copy_from_slice(self.position.as_slice());
        for row in 0..3 {
            for col in 0..3 {
                out[3 + 3 * row + col] = self.rotation[(row, col)];
            }
        }
        out
    }
}

/// Body-frame velocity.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Twist {
    pub linear: Vec3,
    pub angular: Vec3,
}

/// Body-frame acceleration (time derivative of the body twist).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Accel {
    pub linear: Vec3,
    pub angular: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub pose: Pose,
    pub twist: Twist,
    pub accel: Accel,
}

impl TrajectorySample {
    pub fn at_rest(pose: Pose) -> Self {
        Self { pose, twist: Twist::default(), accel: Accel::default() }
    }

    pub fn world_linear_velocity(&self) -> Vec3 {
        self.pose.rotation * self.twist.linear
    }

    pub fn world_angular_velocity(&self) -> Vec3 {
        self.pose.rotation * self.twist.angular
    }

    /// True when velocity and acceleration are all within `tol`.
    pub fn is_still(&self, tol: f64) -> bool {
        self.twist.linear.norm() <= tol
            && self.twist.angular.norm() <= tol
            && self.accel.linear.norm() <= tol
            && self.accel.angular.norm() <= tol
    }
}

/// Desired object motion sampled every `dt` seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionTrajectory {
    pub dt: f64,
    pub samples: Vec<TrajectorySample>,
}

impl MotionTrajectory {
    pub fn new(dt: f64, samples: Vec<TrajectorySample>) -> Result<Self, Se3Error> {
        if samples.len() < 2 {
            return Err(Se3Error::TooShort(samples.len()));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Se3Error::InvalidStep(dt));
        }
        Ok(Self { dt, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn first_pose(&self) -> &Pose {
        &self.samples[0].pose
    }

    pub fn last_pose(&self) -> &Pose {
        &self.samples[self.samples.len() - 1].pose
    }

    pub fn pose(&self, index: usize) -> &Pose {
        &self.samples[index].pose
    }

    /// Samples `range` as a standalone trajectory.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Self, Se3Error> {
        Self::new(self.dt, self.samples[range].to_vec())
    }
}

/// Quintic time scaling `s(tau) = 10 tau^3 - 15 tau^4 + 6 tau^5` and its
/// derivatives with respect to time for a segment lasting `duration`.
pub fn quintic(tau: f64, duration: f64) -> (f64, f64, f64) {
    let t2 = tau * tau;
    let t3 = t2 * tau;
    let s = t3 * (10.0 - 15.0 * tau + 6.0 * t2);
    let ds = 30.0 * t2 * (1.0 - 2.0 * tau + t2) / duration;
    let dds = 60.0 * tau * (1.0 - 3.0 * tau + 2.0 * t2) / (duration * duration);
    (s, ds, dds)
}

/// Constant-screw path from `start`: the rotation follows
/// `R0 exp(s * rotation)` and the position adds `s * translation`, while the
/// object-frame point `pivot` is held fixed in the world for pure rotations.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ScrewPath {
    pub start: Pose,
    pub translation: Vec3,
    pub rotation: Vec3,
    pub pivot: Vec3,
}

impl ScrewPath {
    fn sample(&self, tau: f64, duration: f64) -> TrajectorySample {
        let (s, ds, dds) = quintic(tau, duration);
        let r0 = self.start.rotation;
        let rot = r0 * exp_so3(&(self.rotation * s));
        let omega = self.rotation * ds;
        let omega_dot = self.rotation * dds;
        let e = self.pivot;

        let position = self.start.position + self.translation * s + r0 * e - rot * e;
        let world_vel = self.translation * ds - rot * omega.cross(&e);
        let world_acc = self.translation * dds
            - rot * (omega_dot.cross(&e) + omega.cross(&omega.cross(&e)));

        let v = rot.transpose() * world_vel;
        let v_dot = rot.transpose() * world_acc - omega.cross(&v);
        TrajectorySample {
            pose: Pose { position, rotation: rot },
            twist: Twist { linear: v, angular: omega },
            accel: Accel { linear: v_dot, angular: omega_dot },
        }
    }

    pub fn discretize(&self, count: usize, dt: f64) -> Result<MotionTrajectory, Se3Error> {
        if count < 2 {
            return Err(Se3Error::TooShort(count));
        }
        let duration = (count - 1) as f64 * dt;
        let mut samples: Vec<TrajectorySample> = (0..count)
            .map(|i| self.sample(i as f64 / (count - 1) as f64, duration))
            .collect();
        // Endpoint derivatives vanish analytically; pin them to exact zeros.
        for idx in [0, count - 1] {
            samples[idx].twist = Twist::default();
            samples[idx].accel = Accel::default();
        }
        MotionTrajectory::new(dt, samples)
    }
}

/// Geodesic interpolation from `q0` to `q1` over `count` samples with quintic timing.
pub fn interpolate(q0: &Pose, q1: &Pose, count: usize, dt: f64) -> Result<MotionTrajectory, Se3Error> {
    let path = ScrewPath {
        start: *q0,
        translation: q1.position - q0.position,
        rotation: log_so3(&(q0.rotation.transpose() * q1.rotation)),
        pivot: Vec3::zeros(),
    };
    let mut traj = path.discretize(count, dt)?;
    let last = traj.samples.len() - 1;
    traj.samples[last].pose = *q1;
    Ok(traj)
}

/// Joins two trajectories that share their junction pose. The junction sample
/// is stored once, so the result has `len(a) + len(b) - 1` samples.
pub fn concat(a: &MotionTrajectory, b: &MotionTrajectory) -> Result<MotionTrajectory, Se3Error> {
    if !a.last_pose().approx_eq(b.first_pose(), 1e-9) {
        return Err(Se3Error::PoseMismatch);
    }
    if (a.dt - b.dt).abs() > 1e-12 {
        return Err(Se3Error::StepMismatch(a.dt, b.dt));
    }
    let mut samples = a.samples.clone();
    samples.extend_from_slice(&b.samples[1..]);
    MotionTrajectory::new(a.dt, samples)
}

/// SE(3) difference `q2 - q1`: translation offset followed by `log(R1^T R2)`.
pub fn pose_diff(q1: &Pose, q2: &Pose) -> Vector6<f64> {
    let dp = q2.position - q1.position;
    let dr = log_so3(&(q1.rotation.transpose() * q2.rotation));
    Vector6::new(dp.x, dp.y, dp.z, dr.x, dr.y, dr.z)
}

/// `||p - p_hat|| + beta * ||log(R_hat^T R)||`.
pub fn weighted_distance(q: &Pose, q_hat: &Pose, beta: f64) -> f64 {
    let dp = (q.position - q_hat.position).norm();
    let dr = log_so3(&(q_hat.rotation.transpose() * q.rotation)).norm();
    dp + beta * dr
}
