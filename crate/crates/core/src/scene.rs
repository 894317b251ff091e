//! Object, environment and robot models, the Newton-Euler desired wrench,
//! plane contact detection and the motion primitive generators.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;
use std::f64::consts::FRAC_PI_4;
use std::fmt;
use std::str::FromStr;

use crate::error::SceneError;
use crate::se3::{concat, interpolate, log_so3, rot_z, Mat3, MotionTrajectory, Pose, ScrewPath, TrajectorySample, Vec3};

/// Corners closer to the plane than this are environment contacts.
pub const CONTACT_HEIGHT_TOL: f64 = 1e-3;
/// Tangential speed above which a corner contact is sliding.
pub const SLIDE_SPEED_TOL: f64 = 1e-3;
/// Corners deeper than this below the plane make the trajectory invalid.
pub const PENETRATION_TOL: f64 = 2e-3;

/// Planar convex polygon on the object surface, in the object frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContactSurface {
    pub id: usize,
    pub vertices: Vec<Vec3>,
    /// Outward unit normal.
    pub normal: Vec3,
}

impl ContactSurface {
    pub fn new(id: usize, vertices: Vec<Vec3>, normal: Vec3) -> Result<Self, SceneError> {
        let bad = |reason: &str| SceneError::InvalidSurface { id, reason: reason.to_string() };
        if vertices.len() < 3 {
            return Err(bad("needs at least 3 vertices"));
        }
        if (normal.norm() - 1.0).abs() > 1e-6 {
            return Err(bad("normal is not unit length"));
        }
        let n = vertices.len();
        let origin = vertices[0];
        for v in &vertices {
            if (v - origin).dot(&normal).abs() > 1e-9 {
                return Err(bad("vertices are not coplanar with the normal"));
            }
        }
        for i in 0..n {
            let a = vertices[i];
            let b = vertices[(i + 1) % n];
            let c = vertices[(i + 2) % n];
            if (b - a).cross(&(c - b)).dot(&normal) <= 1e-12 {
                return Err(bad("polygon is not convex and counterclockwise about the normal"));
            }
        }
        Ok(Self { id, vertices, normal })
    }

    pub fn center(&self) -> Vec3 {
        self.vertices.iter().sum::<Vec3>() / self.vertices.len() as f64
    }

    /// Direction in which a pushing end-effector force points (into the object).
    pub fn inward_normal(&self) -> Vec3 {
        -self.normal
    }

    /// Tangent axes of the friction pyramid: the first polygon edge and its
    /// in-plane perpendicular.
    pub fn tangents(&self) -> (Vec3, Vec3) {
        let t1 = (self.vertices[1] - self.vertices[0]).normalize();
        let t2 = self.normal.cross(&t1);
        (t1, t2)
    }
}

/// Rigid polyhedral object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectModel {
    pub mass: f64,
    pub inertia: Mat3,
    pub mu: f64,
    pub surfaces: Vec<ContactSurface>,
    /// Hull vertices used for plane contact detection.
    pub corners: Vec<Vec3>,
}

impl ObjectModel {
    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |s: &str| Err(SceneError::InvalidObject(s.to_string()));
        if !(self.mass > 0.0) {
            return bad("mass must be positive");
        }
        if (self.inertia - self.inertia.transpose()).amax() > 1e-12 {
            return bad("inertia must be symmetric");
        }
        if self.inertia.cholesky().is_none() {
            return bad("inertia must be positive definite");
        }
        if !(self.mu >= 0.0) {
            return bad("friction coefficient must be non-negative");
        }
        for (i, s) in self.surfaces.iter().enumerate() {
            if s.id != i + 1 {
                return bad("surface ids must be 1..N without gaps, in order");
            }
            ContactSurface::new(s.id, s.vertices.clone(), s.normal)?;
        }
        if self.corners.len() < 4 {
            return bad("at least 4 corners are required");
        }
        Ok(())
    }

    pub fn num_surfaces(&self) -> usize {
        self.surfaces.len()
    }

    /// Surface by 1-based id.
    pub fn surface(&self, id: usize) -> &ContactSurface {
        &self.surfaces[id - 1]
    }

    /// Height of the object origin above its lowest corner.
    pub fn rest_height(&self) -> f64 {
        -self.corners.iter().map(|c| c.z).fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentModel {
    pub plane_height: f64,
    pub mu_e: f64,
    pub gravity: Vec3,
}

impl Default for EnvironmentModel {
    fn default() -> Self {
        Self { plane_height: 0.0, mu_e: 0.8, gravity: Vec3::new(0.0, 0.0, -9.81) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContactMode {
    Sticking,
    Sliding,
}

/// Object-plane contact point at one trajectory sample, in the object frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvContact {
    pub position: Vec3,
    /// Plane normal pointing into the object.
    pub normal: Vec3,
    pub mode: ContactMode,
    /// Unit tangential direction of the contact point velocity (sliding only).
    pub slide_dir: Option<Vec3>,
    /// Plane tangent axes in the object frame.
    pub tangents: (Vec3, Vec3),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectorBase {
    pub base: Vec3,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotModel {
    pub effectors: Vec<EffectorBase>,
    pub min_separation: f64,
}

impl RobotModel {
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.effectors.is_empty() {
            return Err(SceneError::InvalidRobot("at least one end-effector is required".into()));
        }
        if self.effectors.iter().any(|e| !(e.radius > 0.0)) {
            return Err(SceneError::InvalidRobot("reach radii must be positive".into()));
        }
        Ok(())
    }

    pub fn num_effectors(&self) -> usize {
        self.effectors.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub object: ObjectModel,
    pub environment: EnvironmentModel,
    pub robot: RobotModel,
}

impl Scene {
    pub fn validate(&self) -> Result<(), SceneError> {
        self.object.validate()?;
        if !(self.environment.mu_e >= 0.0) {
            return Err(SceneError::InvalidEnvironment("mu_e must be non-negative".into()));
        }
        self.robot.validate()
    }
}

/// 10 cm, 0.5 kg cube with one 8 cm square contact surface on every face
/// except the bottom, resting on a plane, and two fingers.
pub fn cube_scene() -> Scene {
    let half = 0.05;
    let pad = 0.04;
    let mass = 0.5;
    let side = 2.0 * half;
    let inertia = Mat3::identity() * (mass * side * side / 6.0);

    // (outward normal, first tangent); second tangent = normal x first.
    let faces = [
        (Vec3::x(), Vec3::y()),
        (-Vec3::x(), Vec3::z()),
        (Vec3::y(), Vec3::z()),
        (-Vec3::y(), Vec3::x()),
        (Vec3::z(), Vec3::x()),
    ];
    let surfaces = faces
        .iter()
        .enumerate()
        .map(|(i, (n, t1))| {
            let t2 = n.cross(t1);
            let c = n * half;
            let vertices = vec![
                c - t1 * pad - t2 * pad,
                c + t1 * pad - t2 * pad,
                c + t1 * pad + t2 * pad,
                c - t1 * pad + t2 * pad,
            ];
            ContactSurface::new(i + 1, vertices, *n).expect("cube face is a valid surface")
        })
        .collect();

    let mut corners = Vec::with_capacity(8);
    for sz in [-1.0, 1.0] {
        for sy in [-1.0, 1.0] {
            for sx in [-1.0, 1.0] {
                corners.push(Vec3::new(sx * half, sy * half, sz * half));
            }
        }
    }

    Scene {
        object: ObjectModel { mass, inertia, mu: 0.8, surfaces, corners },
        environment: EnvironmentModel::default(),
        robot: RobotModel {
            effectors: vec![
                EffectorBase { base: Vec3::new(0.15, 0.0, 0.25), radius: 0.30 },
                EffectorBase { base: Vec3::new(-0.15, 0.0, 0.25), radius: 0.30 },
            ],
            min_separation: 0.02,
        },
    }
}

/// Body-frame force and torque.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Wrench {
    pub force: Vec3,
    pub torque: Vec3,
}

/// Total contact wrench needed to realize the sample's motion, in the object frame.
pub fn desired_wrench(object: &ObjectModel, env: &EnvironmentModel, sample: &TrajectorySample) -> Wrench {
    let v = sample.twist.linear;
    let w = sample.twist.angular;
    let g_body = sample.pose.rotation.transpose() * env.gravity;
    let force = (sample.accel.linear + w.cross(&v) - g_body) * object.mass;
    let torque = object.inertia * sample.accel.angular + w.cross(&(object.inertia * w));
    Wrench { force, torque }
}

/// Desired wrench at every sample, consistent with semi-implicit Euler.
///
/// Velocities are the finite differences that carry sample `k` exactly onto
/// sample `k + 1` under `p += dt R v`, `R <- R exp(dt w)`, and accelerations
/// are differences of those velocities, so integrating these wrenches from the
/// initial state reproduces the sampled poses. Sampling the analytic
/// accelerations instead leaves an O(dt^2) quadrature bias (about 6% of the
/// motion at ten samples) that gravity amplifies once the object tilts.
/// The last sample, which integration never uses, keeps its analytic wrench.
pub fn trajectory_wrenches(object: &ObjectModel, env: &EnvironmentModel, traj: &MotionTrajectory) -> Vec<Wrench> {
    let n = traj.len();
    let dt = traj.dt;
    let mut v = Vec::with_capacity(n);
    let mut w = Vec::with_capacity(n);
    v.push(traj.samples[0].twist.linear);
    w.push(traj.samples[0].twist.angular);
    for k in 0..n - 1 {
        let (a, b) = (&traj.samples[k].pose, &traj.samples[k + 1].pose);
        v.push(a.rotation.transpose() * (b.position - a.position) / dt);
        w.push(log_so3(&(a.rotation.transpose() * b.rotation)) / dt);
    }
    let mut out = Vec::with_capacity(n);
    for k in 0..n - 1 {
        let g_body = traj.samples[k].pose.rotation.transpose() * env.gravity;
        let lin = (v[k + 1] - v[k]) / dt;
        let ang = (w[k + 1] - w[k]) / dt;
        out.push(Wrench {
            force: (lin + w[k].cross(&v[k]) - g_body) * object.mass,
            torque: object.inertia * ang + w[k].cross(&(object.inertia * w[k])),
        });
    }
    out.push(desired_wrench(object, env, &traj.samples[n - 1]));
    out
}

/// Corner contacts with the plane at one sample.
pub fn detect_env_contacts(
    object: &ObjectModel,
    env: &EnvironmentModel,
    sample: &TrajectorySample,
    index: usize,
) -> Result<Vec<EnvContact>, SceneError> {
    let rot = sample.pose.rotation;
    let rt = rot.transpose();
    let normal = rt * Vec3::z();
    let tangents = (rt * Vec3::x(), rt * Vec3::y());
    let mut contacts = Vec::new();
    for corner in &object.corners {
        let world = sample.pose.transform_point(corner);
        let height = world.z - env.plane_height;
        if height < -PENETRATION_TOL {
            return Err(SceneError::Penetration { sample: index, depth: -height });
        }
        if height > CONTACT_HEIGHT_TOL {
            continue;
        }
        let vel = rot * (sample.twist.linear + sample.twist.angular.cross(corner));
        let tangential = Vec3::new(vel.x, vel.y, 0.0);
        let speed = tangential.norm();
        let (mode, slide_dir) = if speed > SLIDE_SPEED_TOL {
            (ContactMode::Sliding, Some(rt * (tangential / speed)))
        } else {
            (ContactMode::Sticking, None)
        };
        contacts.push(EnvContact { position: *corner, normal, mode, slide_dir, tangents });
    }
    Ok(contacts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PrimitiveKind {
    S,
    SC,
    R,
    L,
    P,
}

impl PrimitiveKind {
    pub const ALL: [PrimitiveKind; 5] = [Self::S, Self::SC, Self::R, Self::L, Self::P];

    /// Inclusive parameter ranges, one per parameter.
    pub fn ranges(self) -> &'static [(f64, f64)] {
        match self {
            Self::S => &[(-0.1, 0.1), (-0.1, 0.1)],
            Self::SC => &[(-0.05, 0.05), (-0.05, 0.05), (-FRAC_PI_4, FRAC_PI_4)],
            Self::R => &[(-FRAC_PI_2, FRAC_PI_2)],
            Self::L => &[(0.0, 0.1)],
            Self::P => &[(0.0, FRAC_PI_4)],
        }
    }

    pub fn sample_params<R: Rng + ?Sized>(self, rng: &mut R) -> Vec<f64> {
        self.ranges().iter().map(|&(lo, hi)| rng.random_range(lo..=hi)).collect()
    }
}

impl fmt::Display for PrimitiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::S => "S",
            Self::SC => "SC",
            Self::R => "R",
            Self::L => "L",
            Self::P => "P",
        };
        f.write_str(s)
    }
}

impl FromStr for PrimitiveKind {
    type Err = SceneError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "S" => Ok(Self::S),
            "SC" => Ok(Self::SC),
            "R" => Ok(Self::R),
            "L" => Ok(Self::L),
            "P" => Ok(Self::P),
            other => Err(SceneError::ParamOutOfRange { kind: other.into(), reason: "unknown primitive".into() }),
        }
    }
}

/// Motion primitive from `q0`:
/// S `[dx, dy]`, SC `[dx, dy, yaw]`, R `[yaw]`, L `[dz]`, P `[pitch]`.
/// Translations are in the world frame, rotations about the object's own axes.
/// P pivots about the bottom edge parallel to the object y axis on the side
/// selected by the sign of the pitch.
pub fn generate_primitive(
    kind: PrimitiveKind,
    params: &[f64],
    q0: &Pose,
    count: usize,
    dt: f64,
    object: &ObjectModel,
) -> Result<MotionTrajectory, SceneError> {
    let ranges = kind.ranges();
    if params.len() != ranges.len() {
        return Err(SceneError::ParamOutOfRange {
            kind: kind.to_string(),
            reason: format!("expected {} parameters, got {}", ranges.len(), params.len()),
        });
    }
    for (value, &(lo, hi)) in params.iter().zip(ranges) {
        if !(value.is_finite() && *value >= lo - 1e-12 && *value <= hi + 1e-12) {
            return Err(SceneError::ParamOutOfRange {
                kind: kind.to_string(),
                reason: format!("{value} not in [{lo}, {hi}]"),
            });
        }
    }

    let target = |dp: Vec3, yaw: f64| Pose { position: q0.position + dp, rotation: q0.rotation * rot_z(yaw) };
    let traj = match kind {
        PrimitiveKind::S => interpolate(q0, &target(Vec3::new(params[0], params[1], 0.0), 0.0), count, dt)?,
        PrimitiveKind::SC => interpolate(q0, &target(Vec3::new(params[0], params[1], 0.0), params[2]), count, dt)?,
        PrimitiveKind::R => interpolate(q0, &target(Vec3::zeros(), params[0]), count, dt)?,
        PrimitiveKind::L => interpolate(q0, &target(Vec3::new(0.0, 0.0, params[0]), 0.0), count, dt)?,
        PrimitiveKind::P => {
            let pitch = params[0];
            let max_x = object.corners.iter().map(|c| c.x).fold(f64::NEG_INFINITY, f64::max);
            let min_x = object.corners.iter().map(|c| c.x).fold(f64::INFINITY, f64::min);
            let min_z = object.corners.iter().map(|c| c.z).fold(f64::INFINITY, f64::min);
            let edge_x = if pitch >= 0.0 { max_x } else { min_x };
            ScrewPath {
                start: *q0,
                translation: Vec3::zeros(),
                rotation: Vec3::new(0.0, pitch, 0.0),
                pivot: Vec3::new(edge_x, 0.0, min_z),
            }
            .discretize(count, dt)?
        }
    };
    Ok(traj)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveSpec {
    pub kind: PrimitiveKind,
    /// Sampled uniformly from the kind's range when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<Vec<f64>>,
}

/// Planar initial placement; the object rests on the plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitialPlacement {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

/// Task description: a chain of primitives, each sampled over `T` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub seed: u64,
    pub primitives: Vec<PrimitiveSpec>,
    #[serde(rename = "T")]
    pub steps: usize,
    pub dt: f64,
    pub d: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<InitialPlacement>,
}

impl TrajectorySpec {
    pub fn single(kind: PrimitiveKind, params: Option<Vec<f64>>, seed: u64) -> Self {
        Self { seed, primitives: vec![PrimitiveSpec { kind, params }], steps: 10, dt: 0.1, d: 1, initial: None }
    }

    /// Compact label such as `S` or `3xSC`.
    pub fn mix_label(&self) -> String {
        let kinds: Vec<String> = self.primitives.iter().map(|p| p.kind.to_string()).collect();
        if kinds.len() > 1 && kinds.iter().all(|k| *k == kinds[0]) {
            format!("{}x{}", kinds.len(), kinds[0])
        } else {
            kinds.join("+")
        }
    }
}

/// Concrete task: the trajectory plus the parameters that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub trajectory: MotionTrajectory,
    pub initial: InitialPlacement,
    pub params: Vec<(PrimitiveKind, Vec<f64>)>,
    pub d: usize,
}

/// Samples the initial placement and any unspecified primitive parameters
/// from `rng`, then chains the primitives.
pub fn sample_task<R: Rng + ?Sized>(
    rng: &mut R,
    spec: &TrajectorySpec,
    object: &ObjectModel,
) -> Result<Task, SceneError> {
    if spec.primitives.is_empty() {
        return Err(SceneError::ParamOutOfRange { kind: "task".into(), reason: "no primitives".into() });
    }
    if spec.d == 0 {
        return Err(SceneError::ParamOutOfRange { kind: "task".into(), reason: "d must be at least 1".into() });
    }
    let initial = match spec.initial {
        Some(init) => init,
        None => InitialPlacement {
            x: rng.random_range(-0.05..=0.05),
            y: rng.random_range(-0.05..=0.05),
            yaw: rng.random_range(-FRAC_PI_2..=FRAC_PI_2),
        },
    };
    let mut pose = Pose::from_xyz_yaw(initial.x, initial.y, object.rest_height(), initial.yaw);
    let mut trajectory: Option<MotionTrajectory> = None;
    let mut params = Vec::with_capacity(spec.primitives.len());
    for prim in &spec.primitives {
        let p = match &prim.params {
            Some(p) => p.clone(),
            None => prim.kind.sample_params(rng),
        };
        let piece = generate_primitive(prim.kind, &p, &pose, spec.steps, spec.dt, object)?;
        pose = *piece.last_pose();
        trajectory = Some(match trajectory {
            None => piece,
            Some(prev) => concat(&prev, &piece)?,
        });
        params.push((prim.kind, p));
    }
    Ok(Task { trajectory: trajectory.expect("at least one primitive"), initial, params, d: spec.d })
}

/// Builds the task deterministically from `spec.seed`.
pub fn build_task(spec: &TrajectorySpec, object: &ObjectModel) -> Result<Task, SceneError> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    sample_task(&mut rng, spec, object)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::{rot_y, Twist};
    use std::f64::consts::PI;

    fn at_rest(pose: Pose) -> TrajectorySample {
        TrajectorySample::at_rest(pose)
    }

    #[test]
    fn cube_scene_is_valid() {
        let scene = cube_scene();
        scene.validate().unwrap();
        assert_eq!(scene.object.num_surfaces(), 5);
        assert!((scene.object.inertia[(0, 0)] - 8.333333333e-4).abs() < 1e-12);
        for s in &scene.object.surfaces {
            assert!((s.center() - s.normal * 0.05).norm() < 1e-12);
            let (t1, t2) = s.tangents();
            assert!(t1.dot(&s.normal).abs() < 1e-12 && t2.dot(&s.normal).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_surfaces() {
        let n = Vec3::z();
        let clockwise = vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0), Vec3::new(1.0, 0.0, 0.0)];
        assert!(ContactSurface::new(1, clockwise, n).is_err());
        let skew = vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.1), Vec3::new(0.0, 1.0, 0.0)];
        assert!(ContactSurface::new(1, skew, n).is_err());
        assert!(ContactSurface::new(1, vec![Vec3::zeros(), Vec3::x()], n).is_err());
    }

    #[test]
    fn static_cube_needs_its_weight() {
        let scene = cube_scene();
        let w = desired_wrench(&scene.object, &scene.environment, &at_rest(Pose::from_xyz_yaw(0.0, 0.0, 0.05, 0.0)));
        assert!((w.force - Vec3::new(0.0, 0.0, 4.905)).norm() < 1e-12);
        assert_eq!(w.torque, Vec3::zeros());
    }

    #[test]
    fn principal_spin_needs_no_torque() {
        let scene = cube_scene();
        let mut s = at_rest(Pose::identity());
        s.twist = Twist { linear: Vec3::zeros(), angular: Vec3::new(0.0, 0.0, 1.0) };
        let w = desired_wrench(&scene.object, &scene.environment, &s);
        assert!(w.torque.norm() < 1e-15);
    }

    #[test]
    fn rotation_primitive_mid_torque_matches_direct_evaluation() {
        let scene = cube_scene();
        let q0 = Pose::from_xyz_yaw(0.0, 0.0, 0.05, 0.0);
        let traj = generate_primitive(PrimitiveKind::R, &[PI / 2.0], &q0, 11, 0.09, &scene.object).unwrap();
        // At tau = 0.5: s'' = 0 so the angular acceleration vanishes; at tau = 0.3
        // s'' = 60 * 0.3 * (1 - 0.9 + 0.18) / 0.81.
        let mid = desired_wrench(&scene.object, &scene.environment, &traj.samples[5]);
        assert!(mid.torque.norm() < 1e-12);
        let i = 0.5 * 0.01 / 6.0;
        let dds = 60.0 * 0.3 * (1.0 - 0.9 + 0.18) / 0.81;
        let expected = i * dds * PI / 2.0;
        let w3 = desired_wrench(&scene.object, &scene.environment, &traj.samples[3]);
        assert!((w3.torque.z - expected).abs() < 1e-12, "{} vs {expected}", w3.torque.z);
    }

    #[test]
    fn flat_cube_has_four_sticking_contacts() {
        let scene = cube_scene();
        let c = detect_env_contacts(&scene.object, &scene.environment, &at_rest(Pose::from_xyz_yaw(0.0, 0.0, 0.05, 0.0)), 0)
            .unwrap();
        assert_eq!(c.len(), 4);
        for e in &c {
            assert_eq!(e.mode, ContactMode::Sticking);
            assert!((e.position.z + 0.05).abs() < 1e-12);
            assert!((e.position.x.abs() - 0.05).abs() < 1e-12 && (e.position.y.abs() - 0.05).abs() < 1e-12);
            assert!((e.normal - Vec3::z()).norm() < 1e-12);
        }
        let lifted = detect_env_contacts(&scene.object, &scene.environment, &at_rest(Pose::from_xyz_yaw(0.0, 0.0, 0.1, 0.0)), 0)
            .unwrap();
        assert!(lifted.is_empty());
        let sunk = detect_env_contacts(&scene.object, &scene.environment, &at_rest(Pose::from_xyz_yaw(0.0, 0.0, 0.04, 0.0)), 3);
        assert!(matches!(sunk, Err(SceneError::Penetration { sample: 3, .. })));
    }

    #[test]
    fn pivot_keeps_edge_on_plane() {
        let scene = cube_scene();
        let q0 = Pose::from_xyz_yaw(0.02, -0.01, 0.05, 0.7);
        let traj = generate_primitive(PrimitiveKind::P, &[FRAC_PI_4], &q0, 10, 0.1, &scene.object).unwrap();
        for (i, s) in traj.samples.iter().enumerate() {
            for y in [-0.05, 0.05] {
                let w = s.pose.transform_point(&Vec3::new(0.05, y, -0.05));
                assert!(w.z.abs() < 1e-12, "edge corner height {} at {i}", w.z);
            }
        }
        let last = traj.last_pose();
        assert!((last.rotation - q0.rotation * rot_y(FRAC_PI_4)).amax() < 1e-12);
        // Mid-pivot: exactly the two edge corners touch and they stick.
        let mid = detect_env_contacts(&scene.object, &scene.environment, &traj.samples[5], 5).unwrap();
        assert_eq!(mid.len(), 2);
        for c in &mid {
            assert_eq!(c.mode, ContactMode::Sticking);
            assert!((c.position.x - 0.05).abs() < 1e-12 && (c.position.z + 0.05).abs() < 1e-12);
        }
    }

    #[test]
    fn primitive_endpoints_match_requested_displacement() {
        let scene = cube_scene();
        let q0 = Pose::from_xyz_yaw(0.01, 0.02, 0.05, -0.3);
        let s = generate_primitive(PrimitiveKind::S, &[0.1, 0.0], &q0, 10, 0.1, &scene.object).unwrap();
        assert!((s.last_pose().position - (q0.position + Vec3::new(0.1, 0.0, 0.0))).norm() < 1e-9);
        assert!((s.last_pose().rotation - q0.rotation).amax() < 1e-9);
        let r = generate_primitive(PrimitiveKind::R, &[FRAC_PI_2], &q0, 10, 0.1, &scene.object).unwrap();
        assert!((r.last_pose().rotation - q0.rotation * rot_z(FRAC_PI_2)).amax() < 1e-9);
        assert!((r.last_pose().position - q0.position).norm() < 1e-9);
        let l = generate_primitive(PrimitiveKind::L, &[0.07], &q0, 10, 0.1, &scene.object).unwrap();
        assert!((l.last_pose().position.z - 0.12).abs() < 1e-9);
        assert!(matches!(
            generate_primitive(PrimitiveKind::S, &[0.2, 0.0], &q0, 10, 0.1, &scene.object),
            Err(SceneError::ParamOutOfRange { .. })
        ));
        assert!(generate_primitive(PrimitiveKind::L, &[-0.01], &q0, 10, 0.1, &scene.object).is_err());
        assert!(generate_primitive(PrimitiveKind::R, &[0.1, 0.2], &q0, 10, 0.1, &scene.object).is_err());
    }

    #[test]
    fn sampled_tasks_are_reproducible() {
        let scene = cube_scene();
        let spec = TrajectorySpec::single(PrimitiveKind::S, None, 42);
        let a = build_task(&spec, &scene.object).unwrap();
        let b = build_task(&spec, &scene.object).unwrap();
        assert_eq!(a, b);
        let mut two = TrajectorySpec::single(PrimitiveKind::SC, None, 7);
        two.primitives.push(PrimitiveSpec { kind: PrimitiveKind::SC, params: None });
        let t = build_task(&two, &scene.object).unwrap();
        assert_eq!(t.trajectory.len(), 2 * 10 - 1);
        assert_eq!(two.mix_label(), "2xSC");
        assert!(t.initial.x.abs() <= 0.05 && t.initial.y.abs() <= 0.05 && t.initial.yaw.abs() <= FRAC_PI_2);
    }

    #[test]
    fn sampled_sc_params_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut extremes = [0.0f64; 3];
        for _ in 0..100 {
            let p = PrimitiveKind::SC.sample_params(&mut rng);
            assert!(p[0].abs() <= 0.05 && p[1].abs() <= 0.05 && p[2].abs() <= FRAC_PI_4);
            for k in 0..3 {
                extremes[k] = extremes[k].max(p[k].abs());
            }
        }
        // Uniform sampling should get reasonably close to the range limits.
        assert!(extremes[0] > 0.04 && extremes[1] > 0.04 && extremes[2] > 0.6);
    }

    #[test]
    fn constant_pose_wrench_is_gravity_only() {
        let scene = cube_scene();
        let q = Pose { position: Vec3::new(0.0, 0.0, 0.2), rotation: rot_z(0.4) * rot_y(0.3) };
        let traj = interpolate(&q, &q, 5, 0.1).unwrap();
        for s in &traj.samples {
            let w = desired_wrench(&scene.object, &scene.environment, s);
            let expected = -(q.rotation.transpose() * scene.environment.gravity) * scene.object.mass;
            assert!((w.force - expected).norm() < 1e-12);
            assert!(w.torque.norm() < 1e-15);
        }
    }

    #[test]
    fn wrench_is_invariant_to_a_common_world_rotation() {
        let scene = cube_scene();
        let q0 = Pose::from_xyz_yaw(0.0, 0.0, 0.05, 0.2);
        let traj = generate_primitive(PrimitiveKind::SC, &[0.03, -0.02, 0.5], &q0, 10, 0.1, &scene.object).unwrap();
        let world = rot_y(0.7) * rot_z(-1.1);
        let mut env = scene.environment.clone();
        env.gravity = world * env.gravity;
        for s in &traj.samples {
            let mut rotated = *s;
            rotated.pose.rotation = world * s.pose.rotation;
            rotated.pose.position = world * s.pose.position;
            let a = desired_wrench(&scene.object, &scene.environment, s);
            let b = desired_wrench(&scene.object, &env, &rotated);
            assert!((a.force - b.force).norm() < 1e-12 && (a.torque - b.torque).norm() < 1e-12);
        }
    }

    #[test]
    fn contact_counts_on_primitives() {
        let scene = cube_scene();
        let q0 = Pose::from_xyz_yaw(0.0, 0.0, 0.05, 0.3);
        for kind in PrimitiveKind::ALL {
            let params: Vec<f64> = kind.ranges().iter().map(|r| r.1).collect();
            let traj = generate_primitive(kind, &params, &q0, 10, 0.1, &scene.object).unwrap();
            for (i, s) in traj.samples.iter().enumerate() {
                let n = detect_env_contacts(&scene.object, &scene.environment, s, i).unwrap().len();
                assert!([0, 2, 4].contains(&n), "{kind} sample {i}: {n} contacts");
            }
        }
        // Rotation in place slides all four corners mid-motion.
        let r = generate_primitive(PrimitiveKind::R, &[1.0], &q0, 10, 0.1, &scene.object).unwrap();
        let mid = detect_env_contacts(&scene.object, &scene.environment, &r.samples[4], 4).unwrap();
        assert!(mid.iter().all(|c| c.mode == ContactMode::Sliding));
        for c in &mid {
            let d = c.slide_dir.unwrap();
            assert!(d.dot(&c.normal).abs() < 1e-12 && (d.norm() - 1.0).abs() < 1e-12);
        }
    }
}
