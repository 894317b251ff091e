//! Contact force and location optimization for a fixed contact schedule.
//!
//! The torque balance `sum r x f = tau` is bilinear in contact locations `x`
//! and forces `z`. One scaled-dual ADMM iteration alternates a location QP
//! (forces frozen) and a force QP (locations frozen), after which the planned
//! wrenches are integrated forward and the final pose error becomes the
//! search reward.

use serde::{Deserialize, Serialize};

use crate::error::{CoptError, SceneError};
use crate::qp::{self, QpSettings, QpStatus, QuadraticProgram};
use crate::scene::{detect_env_contacts, trajectory_wrenches, ContactMode, ContactSurface, EnvContact, Scene, Wrench};
use crate::se3::{exp_so3, hat, weighted_distance, MotionTrajectory, Pose, Vec3};

/// Surface assignment per timestep and effector; 0 means no contact.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ContactSchedule {
    pub rows: Vec<Vec<usize>>,
}

impl ContactSchedule {
    pub fn zeros(steps: usize, effectors: usize) -> Self {
        Self { rows: vec![vec![0; effectors]; steps] }
    }

    /// Same assignment at every timestep.
    pub fn constant(steps: usize, assignment: &[usize]) -> Self {
        Self { rows: vec![assignment.to_vec(); steps] }
    }

    pub fn steps(&self) -> usize {
        self.rows.len()
    }

    pub fn effectors(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn get(&self, t: usize, c: usize) -> usize {
        self.rows[t][c]
    }

    /// Checks exclusivity, minimum run length `d` and the one-switch rule.
    pub fn validate(&self, num_surfaces: usize, d: usize) -> Result<(), CoptError> {
        let bad = |s: String| Err(CoptError::InvalidSchedule(s));
        let nc = self.effectors();
        for (t, row) in self.rows.iter().enumerate() {
            if row.len() != nc {
                return bad(format!("row {t} has {} effectors, expected {nc}", row.len()));
            }
            for (c, &s) in row.iter().enumerate() {
                if s > num_surfaces {
                    return bad(format!("unknown surface {s} at t={t}, c={c}"));
                }
                if s != 0 && row[..c].contains(&s) {
                    return bad(format!("exclusivity: surface {s} used twice at t={t}"));
                }
            }
            if t > 0 {
                let prev = &self.rows[t - 1];
                let changes = (0..nc).filter(|&c| prev[c] != row[c]).count();
                if changes > 1 {
                    return bad(format!("switch rule: {changes} effectors change at t={t}"));
                }
                if (0..nc).any(|c| prev[c] != 0 && row[c] != 0 && prev[c] != row[c]) {
                    return bad(format!("switch rule: surface change without a break at t={t}"));
                }
            }
        }
        for c in 0..nc {
            let mut t = 0;
            while t < self.steps() {
                let s = self.rows[t][c];
                let start = t;
                while t < self.steps() && self.rows[t][c] == s {
                    t += 1;
                }
                if s != 0 && t - start < d {
                    return bad(format!("persistence: effector {c} holds surface {s} for {} < {d} steps", t - start));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdmmConfig {
    pub rho: f64,
    pub iterations: usize,
    /// Rotation weight in the final pose distance.
    pub beta: f64,
    /// Distance at which the reward reaches zero.
    pub d_th: f64,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        Self { rho: 2e6, iterations: 1, beta: 0.1, d_th: 0.03 }
    }
}

impl AdmmConfig {
    pub fn validate(&self) -> Result<(), CoptError> {
        if !(self.rho > 0.0 && self.rho.is_finite()) || self.iterations == 0 || self.d_th <= 0.0 || self.beta < 0.0 {
            return Err(CoptError::InvalidSchedule(format!("invalid ADMM configuration {self:?}")));
        }
        Ok(())
    }
}

/// Per-timestep quantities of a trajectory that every evaluation reuses.
#[derive(Debug, Clone)]
pub struct TaskContext {
    pub trajectory: MotionTrajectory,
    pub wrenches: Vec<Wrench>,
    pub env: Vec<Vec<EnvContact>>,
    pub d: usize,
}

impl TaskContext {
    pub fn new(scene: &Scene, trajectory: MotionTrajectory, d: usize) -> Result<Self, SceneError> {
        let wrenches = trajectory_wrenches(&scene.object, &scene.environment, &trajectory);
        let mut env = Vec::with_capacity(trajectory.len());
        for (i, sample) in trajectory.samples.iter().enumerate() {
            env.push(detect_env_contacts(&scene.object, &scene.environment, sample, i)?);
        }
        Ok(Self { trajectory, wrenches, env, d })
    }

    pub fn steps(&self) -> usize {
        self.trajectory.len()
    }
}

/// Contact locations `r_c(t)` and their convex weights over surface vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct Locations {
    pub r: Vec<Vec<Vec3>>,
    pub alpha: Vec<Vec<Vec<f64>>>,
}

/// Effector forces `f_c(t)` and environment forces `f_e(t)`, object frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Forces {
    pub effector: Vec<Vec<Vec3>>,
    pub env: Vec<Vec<Vec3>>,
}

impl Locations {
    /// Uniform vertex weights, i.e. surface centroids.
    pub fn initial(schedule: &ContactSchedule, scene: &Scene) -> Self {
        let nc = schedule.effectors();
        let mut r = vec![vec![Vec3::zeros(); nc]; schedule.steps()];
        let mut alpha = vec![vec![Vec::new(); nc]; schedule.steps()];
        for (t, row) in schedule.rows.iter().enumerate() {
            for (c, &s) in row.iter().enumerate() {
                if s != 0 {
                    let surf = scene.object.surface(s);
                    let nv = surf.vertices.len();
                    alpha[t][c] = vec![1.0 / nv as f64; nv];
                    r[t][c] = surf.center();
                }
            }
        }
        Self { r, alpha }
    }
}

impl Forces {
    pub fn zeros(schedule: &ContactSchedule, ctx: &TaskContext) -> Self {
        Self {
            effector: vec![vec![Vec3::zeros(); schedule.effectors()]; schedule.steps()],
            env: ctx.env.iter().map(|e| vec![Vec3::zeros(); e.len()]).collect(),
        }
    }
}

/// `G = sum r_c x f_c + sum r_e x f_e - tau_des` at one timestep.
pub fn torque_gap(effectors: &[(Vec3, Vec3)], env: &[(Vec3, Vec3)], tau_des: &Vec3) -> Vec3 {
    let mut g = -tau_des;
    for (r, f) in effectors.iter().chain(env) {
        g += r.cross(f);
    }
    g
}

fn gap_at(t: usize, x: &Locations, z: &Forces, ctx: &TaskContext) -> Vec3 {
    let eff: Vec<(Vec3, Vec3)> = x.r[t].iter().copied().zip(z.effector[t].iter().copied()).collect();
    let env: Vec<(Vec3, Vec3)> = ctx.env[t].iter().map(|e| e.position).zip(z.env[t].iter().copied()).collect();
    torque_gap(&eff, &env, &ctx.wrenches[t].torque)
}

/// Variable offsets of the location QP: `(r offset, alpha offset, vertex count)` per contacted `(t, c)`.
struct LocationLayout {
    slots: Vec<Vec<Option<(usize, usize, usize)>>>,
    n: usize,
}

impl LocationLayout {
    fn new(schedule: &ContactSchedule, scene: &Scene) -> Self {
        let mut n = 0;
        let slots = schedule
            .rows
            .iter()
            .map(|row| {
                row.iter()
                    .map(|&s| {
                        (s != 0).then(|| {
                            let nv = scene.object.surface(s).vertices.len();
                            let slot = (n, n + 3, nv);
                            n += 3 + nv;
                            slot
                        })
                    })
                    .collect()
            })
            .collect();
        Self { slots, n }
    }
}

fn add_block(qp: &mut QuadraticProgram, oi: usize, oj: usize, m: &nalgebra::Matrix3<f64>) {
    for a in 0..3 {
        for b in 0..3 {
            if m[(a, b)] != 0.0 {
                qp.cost.push(oi + a, oj + b, m[(a, b)]);
            }
        }
    }
}

/// Location step: minimize `sum |r|^2 + rho/2 |G(x, z) + y|^2` subject to
/// convex-combination and sticking constraints.
pub fn build_location_qp(
    schedule: &ContactSchedule,
    ctx: &TaskContext,
    scene: &Scene,
    z: &Forces,
    y: &[Vec3],
    cfg: &AdmmConfig,
) -> QuadraticProgram {
    let layout = LocationLayout::new(schedule, scene);
    let mut qp = QuadraticProgram::with_vars(layout.n);
    for t in 0..schedule.steps() {
        // G = sum_c M_c r_c + k with M_c = -[f_c]x.
        let env: Vec<(Vec3, Vec3)> = ctx.env[t].iter().map(|e| e.position).zip(z.env[t].iter().copied()).collect();
        let k = torque_gap(&[], &env, &ctx.wrenches[t].torque) + y[t];
        let contacted: Vec<(usize, nalgebra::Matrix3<f64>)> = layout.slots[t]
            .iter()
            .enumerate()
            .filter_map(|(c, slot)| slot.map(|(ro, _, _)| (ro, -hat(&z.effector[t][c]))))
            .collect();
        for &(ri, ref mi) in &contacted {
            for a in 0..3 {
                qp.cost.push(ri + a, ri + a, 2.0);
            }
            for &(rj, ref mj) in &contacted {
                add_block(&mut qp, ri, rj, &(mi.transpose() * mj * cfg.rho));
            }
            let lin = mi.transpose() * k * cfg.rho;
            for a in 0..3 {
                qp.linear[ri + a] += lin[a];
            }
        }
        for (c, slot) in layout.slots[t].iter().enumerate() {
            let Some((ro, ao, nv)) = *slot else { continue };
            let surf = scene.object.surface(schedule.get(t, c));
            for a in 0..3 {
                let mut row = vec![(ro + a, 1.0)];
                row.extend(surf.vertices.iter().enumerate().map(|(i, v)| (ao + i, -v[a])));
                qp.add_eq(&row, 0.0);
            }
            let sum: Vec<(usize, f64)> = (0..nv).map(|i| (ao + i, 1.0)).collect();
            qp.add_eq(&sum, 1.0);
            for i in 0..nv {
                qp.add_ineq(&[(ao + i, -1.0)], 0.0);
            }
            if t + 1 < schedule.steps() && schedule.get(t + 1, c) == schedule.get(t, c) {
                let (ro2, ao2, _) = layout.slots[t + 1][c].expect("same surface next step");
                for a in 0..3 {
                    qp.add_eq(&[(ro2 + a, 1.0), (ro + a, -1.0)], 0.0);
                }
                for i in 0..nv {
                    qp.add_eq(&[(ao2 + i, 1.0), (ao + i, -1.0)], 0.0);
                }
            }
        }
    }
    qp
}

/// Variable offsets of the force QP: effector forces then env forces per timestep.
struct ForceLayout {
    effector: Vec<usize>,
    env: Vec<usize>,
    n: usize,
}

impl ForceLayout {
    fn new(schedule: &ContactSchedule, ctx: &TaskContext) -> Self {
        let nc = schedule.effectors();
        let mut n = 0;
        let mut effector = Vec::new();
        let mut env = Vec::new();
        for t in 0..schedule.steps() {
            effector.push(n);
            n += 3 * nc;
            env.push(n);
            n += 3 * ctx.env[t].len();
        }
        Self { effector, env, n }
    }
}

fn pyramid_rows(qp: &mut QuadraticProgram, off: usize, normal: &Vec3, tangents: &(Vec3, Vec3), mu: f64) {
    let row = |v: Vec3| -> Vec<(usize, f64)> { (0..3).map(|a| (off + a, v[a])).collect() };
    for t in [tangents.0, tangents.1] {
        qp.add_ineq(&row(t - normal * mu), 0.0);
        qp.add_ineq(&row(-t - normal * mu), 0.0);
    }
    qp.add_ineq(&row(-normal), 0.0);
}

/// Force step: minimize `sum |f_c|^2 + rho/2 |G(x, z) + y|^2` subject to
/// the Newton equation, zero force without contact and linearized friction.
pub fn build_force_qp(
    schedule: &ContactSchedule,
    ctx: &TaskContext,
    scene: &Scene,
    x: &Locations,
    y: &[Vec3],
    cfg: &AdmmConfig,
) -> QuadraticProgram {
    let layout = ForceLayout::new(schedule, ctx);
    let nc = schedule.effectors();
    let mut qp = QuadraticProgram::with_vars(layout.n);
    for t in 0..schedule.steps() {
        // G = sum_j H_j f_j - tau + y with H_j = [r_j]x.
        let mut blocks: Vec<(usize, nalgebra::Matrix3<f64>)> = Vec::new();
        for c in 0..nc {
            let off = layout.effector[t] + 3 * c;
            for a in 0..3 {
                qp.cost.push(off + a, off + a, 2.0);
            }
            if schedule.get(t, c) != 0 {
                blocks.push((off, hat(&x.r[t][c])));
            }
        }
        for (e, contact) in ctx.env[t].iter().enumerate() {
            blocks.push((layout.env[t] + 3 * e, hat(&contact.position)));
        }
        let k = y[t] - ctx.wrenches[t].torque;
        for &(oi, ref hi) in &blocks {
            for &(oj, ref hj) in &blocks {
                add_block(&mut qp, oi, oj, &(hi.transpose() * hj * cfg.rho));
            }
            let lin = hi.transpose() * k * cfg.rho;
            for a in 0..3 {
                qp.linear[oi + a] += lin[a];
            }
        }

        let f_des = ctx.wrenches[t].force;
        for a in 0..3 {
            let mut row: Vec<(usize, f64)> = (0..nc).map(|c| (layout.effector[t] + 3 * c + a, 1.0)).collect();
            row.extend((0..ctx.env[t].len()).map(|e| (layout.env[t] + 3 * e + a, 1.0)));
            qp.add_eq(&row, f_des[a]);
        }
        for c in 0..nc {
            let off = layout.effector[t] + 3 * c;
            match schedule.get(t, c) {
                0 => {
                    for a in 0..3 {
                        qp.add_eq(&[(off + a, 1.0)], 0.0);
                    }
                }
                s => {
                    let surf = scene.object.surface(s);
                    pyramid_rows(&mut qp, off, &surf.inward_normal(), &surf.tangents(), scene.object.mu);
                }
            }
        }
        let mu_e = scene.environment.mu_e;
        for (e, contact) in ctx.env[t].iter().enumerate() {
            let off = layout.env[t] + 3 * e;
            match (contact.mode, contact.slide_dir) {
                (ContactMode::Sliding, Some(dir)) => {
                    // Tangential force opposes sliding with magnitude mu_e times the normal force.
                    for tan in [contact.tangents.0, contact.tangents.1] {
                        let coeff = tan + contact.normal * (mu_e * tan.dot(&dir));
                        let row: Vec<(usize, f64)> = (0..3).map(|a| (off + a, coeff[a])).collect();
                        qp.add_eq(&row, 0.0);
                    }
                    let row: Vec<(usize, f64)> = (0..3).map(|a| (off + a, -contact.normal[a])).collect();
                    qp.add_ineq(&row, 0.0);
                }
                _ => pyramid_rows(&mut qp, off, &contact.normal, &contact.tangents, mu_e),
            }
        }
    }
    qp
}

fn unpack_locations(sol: &[f64], schedule: &ContactSchedule, scene: &Scene) -> Locations {
    let layout = LocationLayout::new(schedule, scene);
    let nc = schedule.effectors();
    let mut r = vec![vec![Vec3::zeros(); nc]; schedule.steps()];
    let mut alpha = vec![vec![Vec::new(); nc]; schedule.steps()];
    for t in 0..schedule.steps() {
        for c in 0..nc {
            if let Some((ro, ao, nv)) = layout.slots[t][c] {
                r[t][c] = Vec3::new(sol[ro], sol[ro + 1], sol[ro + 2]);
                alpha[t][c] = sol[ao..ao + nv].to_vec();
            }
        }
    }
    Locations { r, alpha }
}

fn pack_locations(x: &Locations, schedule: &ContactSchedule, scene: &Scene) -> Vec<f64> {
    let layout = LocationLayout::new(schedule, scene);
    let mut out = vec![0.0; layout.n];
    for t in 0..schedule.steps() {
        for c in 0..schedule.effectors() {
            if let Some((ro, ao, nv)) = layout.slots[t][c] {
                out[ro..ro + 3].copy_from_slice(x.r[t][c].as_slice());
                out[ao..ao + nv].copy_from_slice(&x.alpha[t][c]);
            }
        }
    }
    out
}

fn unpack_forces(sol: &[f64], schedule: &ContactSchedule, ctx: &TaskContext) -> Forces {
    let layout = ForceLayout::new(schedule, ctx);
    let v = |o: usize| Vec3::new(sol[o], sol[o + 1], sol[o + 2]);
    let mut effector = Vec::with_capacity(schedule.steps());
    let mut env = Vec::with_capacity(schedule.steps());
    for t in 0..schedule.steps() {
        // Uncontacted effectors carry exactly zero force.
        effector.push(
            (0..schedule.effectors())
                .map(|c| if schedule.get(t, c) == 0 { Vec3::zeros() } else { v(layout.effector[t] + 3 * c) })
                .collect(),
        );
        env.push((0..ctx.env[t].len()).map(|e| v(layout.env[t] + 3 * e)).collect());
    }
    Forces { effector, env }
}

fn pack_forces(z: &Forces, schedule: &ContactSchedule, ctx: &TaskContext) -> Vec<f64> {
    let layout = ForceLayout::new(schedule, ctx);
    let mut out = vec![0.0; layout.n];
    for t in 0..schedule.steps() {
        for (c, f) in z.effector[t].iter().enumerate() {
            let o = layout.effector[t] + 3 * c;
            out[o..o + 3].copy_from_slice(f.as_slice());
        }
        for (e, f) in z.env[t].iter().enumerate() {
            let o = layout.env[t] + 3 * e;
            out[o..o + 3].copy_from_slice(f.as_slice());
        }
    }
    out
}

fn check_status(status: QpStatus, step: &'static str, iteration: usize) -> Result<(), CoptError> {
    match status {
        QpStatus::Optimal => Ok(()),
        QpStatus::PrimalInfeasible => Err(CoptError::Infeasible { step, iteration }),
        QpStatus::MaxIterations => Err(CoptError::NotConverged { step, iteration }),
    }
}

/// Result of the ADMM iterations before integration.
#[derive(Debug, Clone)]
pub struct AdmmIterate {
    pub x: Locations,
    pub z: Forces,
    pub y: Vec<Vec3>,
}

/// Runs `cfg.iterations` of location step, force step and dual update.
pub fn admm_solve(
    schedule: &ContactSchedule,
    ctx: &TaskContext,
    scene: &Scene,
    cfg: &AdmmConfig,
) -> Result<AdmmIterate, CoptError> {
    cfg.validate()?;
    if schedule.steps() != ctx.steps() || schedule.effectors() != scene.robot.num_effectors() {
        return Err(CoptError::InvalidSchedule(format!(
            "schedule is {}x{}, task needs {}x{}",
            schedule.steps(),
            schedule.effectors(),
            ctx.steps(),
            scene.robot.num_effectors()
        )));
    }
    schedule.validate(scene.object.num_surfaces(), ctx.d)?;
    let settings = QpSettings::default();
    let mut x = Locations::initial(schedule, scene);
    let mut z = Forces::zeros(schedule, ctx);
    let mut y = vec![Vec3::zeros(); schedule.steps()];
    for k in 0..cfg.iterations {
        let loc = build_location_qp(schedule, ctx, scene, &z, &y, cfg);
        let warm = pack_locations(&x, schedule, scene);
        let sol = qp::solve_warm(&loc, &settings, Some(&warm)).expect("location QP is well formed");
        check_status(sol.status, "location", k)?;
        x = unpack_locations(&sol.x, schedule, scene);

        let force = build_force_qp(schedule, ctx, scene, &x, &y, cfg);
        let warm = pack_forces(&z, schedule, ctx);
        let sol = qp::solve_warm(&force, &settings, Some(&warm)).expect("force QP is well formed");
        check_status(sol.status, "force", k)?;
        z = unpack_forces(&sol.x, schedule, ctx);

        for (t, yt) in y.iter_mut().enumerate() {
            *yt += gap_at(t, &x, &z, ctx);
        }
    }
    Ok(AdmmIterate { x, z, y })
}

/// Total body-frame wrench the plan applies at step `t`.
pub fn achieved_wrench(t: usize, x: &Locations, z: &Forces, ctx: &TaskContext) -> Wrench {
    let mut force = Vec3::zeros();
    let mut torque = Vec3::zeros();
    for (r, f) in x.r[t].iter().zip(&z.effector[t]) {
        force += f;
        torque += r.cross(f);
    }
    for (e, f) in ctx.env[t].iter().zip(&z.env[t]) {
        force += f;
        torque += e.position.cross(f);
    }
    Wrench { force, torque }
}

/// Semi-implicit Euler integration of the achieved wrenches from the
/// trajectory's initial state; returns the pose after `T - 1` steps.
pub fn integrate_wrenches(wrenches: &[Wrench], ctx: &TaskContext, scene: &Scene) -> Pose {
    let obj = &scene.object;
    let inv_inertia = obj.inertia.try_inverse().expect("validated inertia is invertible");
    let dt = ctx.trajectory.dt;
    let first = &ctx.trajectory.samples[0];
    let mut pose = first.pose;
    let mut v = first.twist.linear;
    let mut w = first.twist.angular;
    for wrench in wrenches.iter().take(ctx.steps() - 1) {
        let g_body = pose.rotation.transpose() * scene.environment.gravity;
        let v_dot = wrench.force / obj.mass - w.cross(&v) + g_body;
        let w_dot = inv_inertia * (wrench.torque - w.cross(&(obj.inertia * w)));
        v += v_dot * dt;
        w += w_dot * dt;
        pose.position += pose.rotation * v * dt;
        pose.rotation *= exp_so3(&(w * dt));
    }
    pose
}

/// Linear reward: 1 at zero distance, 0 at and beyond `d_th`.
pub fn reward_from_distance(distance: f64, d_th: f64) -> f64 {
    if distance.is_finite() && distance < d_th {
        1.0 - distance / d_th
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectorContact {
    pub c: usize,
    pub surface: usize,
    pub r: Vec3,
    pub f: Vec3,
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvForce {
    pub r: Vec3,
    pub f: Vec3,
    pub mode: ContactMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanStep {
    pub t: usize,
    pub contacts: Vec<EffectorContact>,
    pub env: Vec<EnvForce>,
}

fn object_frame() -> String {
    "object".to_string()
}

/// Solved contacts and forces with their quality measures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContactPlan {
    #[serde(default = "object_frame")]
    pub frame: String,
    pub dt: f64,
    #[serde(rename = "T")]
    pub steps_count: usize,
    pub effectors: usize,
    pub steps: Vec<PlanStep>,
    /// Largest torque gap norm over timesteps.
    pub torque_residual: f64,
    /// Mean norm of achieved minus desired force, N.
    pub force_error: f64,
    /// Mean norm of achieved minus desired torque, N m.
    pub torque_error: f64,
    #[serde(rename = "D")]
    pub distance: f64,
    pub reward: f64,
    pub final_pose: Pose,
}

impl ContactPlan {
    /// Contact schedule implied by the plan.
    pub fn schedule(&self) -> ContactSchedule {
        let mut s = ContactSchedule::zeros(self.steps_count, self.effectors);
        for step in &self.steps {
            for c in &step.contacts {
                s.rows[step.t][c.c] = c.surface;
            }
        }
        s
    }

    pub fn wrench(&self, t: usize) -> Wrench {
        let mut w = Wrench::default();
        let step = &self.steps[t];
        for (r, f) in step.contacts.iter().map(|c| (c.r, c.f)).chain(step.env.iter().map(|e| (e.r, e.f))) {
            w.force += f;
            w.torque += r.cross(&f);
        }
        w
    }
}

fn assemble_plan(
    schedule: &ContactSchedule,
    ctx: &TaskContext,
    scene: &Scene,
    it: &AdmmIterate,
    cfg: &AdmmConfig,
) -> ContactPlan {
    let steps_count = schedule.steps();
    let mut steps = Vec::with_capacity(steps_count);
    let mut wrenches = Vec::with_capacity(steps_count);
    let (mut torque_residual, mut force_sum, mut torque_sum) = (0.0f64, 0.0, 0.0);
    for t in 0..steps_count {
        let contacts = (0..schedule.effectors())
            .filter(|&c| schedule.get(t, c) != 0)
            .map(|c| EffectorContact {
                c,
                surface: schedule.get(t, c),
                r: it.x.r[t][c],
                f: it.z.effector[t][c],
                alpha: it.x.alpha[t][c].clone(),
            })
            .collect();
        let env = ctx.env[t]
            .iter()
            .zip(&it.z.env[t])
            .map(|(e, f)| EnvForce { r: e.position, f: *f, mode: e.mode })
            .collect();
        steps.push(PlanStep { t, contacts, env });
        let w = achieved_wrench(t, &it.x, &it.z, ctx);
        let gap = (w.torque - ctx.wrenches[t].torque).norm();
        torque_residual = torque_residual.max(gap);
        torque_sum += gap;
        force_sum += (w.force - ctx.wrenches[t].force).norm();
        wrenches.push(w);
    }
    let final_pose = integrate_wrenches(&wrenches, ctx, scene);
    let distance = weighted_distance(ctx.trajectory.last_pose(), &final_pose, cfg.beta);
    ContactPlan {
        frame: object_frame(),
        dt: ctx.trajectory.dt,
        steps_count,
        effectors: schedule.effectors(),
        steps,
        torque_residual,
        force_error: force_sum / steps_count as f64,
        torque_error: torque_sum / steps_count as f64,
        distance,
        reward: reward_from_distance(distance, cfg.d_th),
        final_pose,
    }
}

/// Outcome of evaluating one schedule.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub reward: f64,
    pub plan: Option<ContactPlan>,
    pub failure: Option<CoptError>,
}

impl Evaluation {
    pub fn feasible(&self) -> bool {
        self.reward > 0.0
    }
}

/// ADMM, integration and reward. Infeasible or unconverged subproblems give reward 0.
pub fn evaluate(schedule: &ContactSchedule, ctx: &TaskContext, scene: &Scene, cfg: &AdmmConfig) -> Evaluation {
    match admm_solve(schedule, ctx, scene, cfg) {
        Ok(it) => {
            let plan = assemble_plan(schedule, ctx, scene, &it, cfg);
            Evaluation { reward: plan.reward, plan: Some(plan), failure: None }
        }
        Err(e) => Evaluation { reward: 0.0, plan: None, failure: Some(e) },
    }
}

/// Outcome of one constraint family of the plan audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditCheck {
    pub name: String,
    pub passed: bool,
    /// Worst violation found.
    pub worst: f64,
    pub tolerance: f64,
}

pub const NEWTON_TOL: f64 = 1e-5;
pub const GEOMETRY_TOL: f64 = 1e-6;

/// Re-checks every plan invariant against the task it was planned for.
pub fn audit_plan(plan: &ContactPlan, ctx: &TaskContext, scene: &Scene, cfg: &AdmmConfig) -> Vec<AuditCheck> {
    let mut shape_ok = plan.steps.len() == ctx.steps() && plan.effectors == scene.robot.num_effectors();
    let mut zero_force = 0.0f64;
    let mut convex = 0.0f64;
    let mut sticking = 0.0f64;
    let mut newton = 0.0f64;
    let mut cone = 0.0f64;
    let mut sliding = 0.0f64;
    let mu = scene.object.mu;
    let mu_e = scene.environment.mu_e;
    let cone_violation = |f: &Vec3, n: &Vec3, tans: &(Vec3, Vec3), mu: f64| -> f64 {
        let fn_ = f.dot(n);
        let mut worst = (-fn_).max(0.0);
        for t in [tans.0, tans.1] {
            worst = worst.max(f.dot(&t).abs() - mu * fn_);
        }
        worst.max(0.0)
    };
    if shape_ok {
        let schedule = plan.schedule();
        shape_ok = schedule.validate(scene.object.num_surfaces(), ctx.d).is_ok();
        for (t, step) in plan.steps.iter().enumerate() {
            shape_ok &= step.t == t && step.env.len() == ctx.env[t].len();
            for c in &step.contacts {
                if c.c >= plan.effectors || c.surface == 0 || c.surface > scene.object.num_surfaces() {
                    shape_ok = false;
                    continue;
                }
                let surf: &ContactSurface = scene.object.surface(c.surface);
                if c.alpha.len() != surf.vertices.len() {
                    shape_ok = false;
                    continue;
                }
                let combo: Vec3 = surf.vertices.iter().zip(&c.alpha).map(|(v, a)| v * *a).sum();
                convex = convex.max((combo - c.r).norm());
                convex = convex.max((c.alpha.iter().sum::<f64>() - 1.0).abs());
                convex = convex.max(c.alpha.iter().fold(0.0f64, |m, a| m.max(-a)));
                cone = cone.max(cone_violation(&c.f, &surf.inward_normal(), &surf.tangents(), mu));
                if t + 1 < plan.steps.len() {
                    if let Some(next) = plan.steps[t + 1].contacts.iter().find(|n| n.c == c.c && n.surface == c.surface) {
                        sticking = sticking.max((next.r - c.r).norm());
                    }
                }
            }
            if !shape_ok {
                break;
            }
            for c in 0..plan.effectors {
                if schedule.get(t, c) == 0 {
                    // Uncontacted effectors are absent from the step, so their force is zero by construction.
                    zero_force = zero_force.max(step.contacts.iter().filter(|k| k.c == c).map(|k| k.f.norm()).sum());
                }
            }
            for (e, contact) in step.env.iter().zip(&ctx.env[t]) {
                if (e.r - contact.position).norm() > GEOMETRY_TOL || e.mode != contact.mode {
                    shape_ok = false;
                }
                match (contact.mode, contact.slide_dir) {
                    (ContactMode::Sliding, Some(dir)) => {
                        let fn_ = e.f.dot(&contact.normal);
                        let tangential = e.f - contact.normal * fn_;
                        let dir_t = dir - contact.normal * dir.dot(&contact.normal);
                        sliding = sliding.max((tangential + dir_t * (mu_e * fn_)).norm());
                        sliding = sliding.max((-fn_).max(0.0));
                    }
                    _ => cone = cone.max(cone_violation(&e.f, &contact.normal, &contact.tangents, mu_e)),
                }
            }
            newton = newton.max((plan.wrench(t).force - ctx.wrenches[t].force).norm());
        }
    }
    let mut checks = vec![AuditCheck { name: "shape".into(), passed: shape_ok, worst: 0.0, tolerance: 0.0 }];
    let mut push = |name: &str, worst: f64, tol: f64| {
        checks.push(AuditCheck { name: name.into(), passed: shape_ok && worst <= tol, worst, tolerance: tol })
    };
    push("zero_force", zero_force, 0.0);
    push("convex_combination", convex, GEOMETRY_TOL);
    push("sticking", sticking, GEOMETRY_TOL);
    push("newton", newton, NEWTON_TOL);
    push("friction_cone", cone, GEOMETRY_TOL);
    push("sliding_friction", sliding, GEOMETRY_TOL);
    if shape_ok {
        let wrenches: Vec<Wrench> = (0..plan.steps.len()).map(|t| plan.wrench(t)).collect();
        let pose = integrate_wrenches(&wrenches, ctx, scene);
        let distance = weighted_distance(ctx.trajectory.last_pose(), &pose, cfg.beta);
        let reward = reward_from_distance(distance, cfg.d_th);
        push("reintegration", (distance - plan.distance).abs().max((reward - plan.reward).abs()), 1e-9);
    } else {
        push("reintegration", f64::INFINITY, 1e-9);
    }
    checks
}
