use contact_core::copt::*;
use contact_core::error::CoptError;
use contact_core::scene::*;
use contact_core::se3::{weighted_distance, Vec3};
use std::f64::consts::FRAC_PI_2;

fn placed(kind: PrimitiveKind, params: Vec<f64>) -> TrajectorySpec {
    let mut spec = TrajectorySpec::single(kind, Some(params), 0);
    spec.initial = Some(InitialPlacement { x: 0.0, y: 0.0, yaw: 0.0 });
    spec
}

fn context(scene: &Scene, spec: &TrajectorySpec) -> TaskContext {
    let task = build_task(spec, &scene.object).unwrap();
    TaskContext::new(scene, task.trajectory, spec.d).unwrap()
}

fn failed_checks(checks: &[AuditCheck]) -> Vec<String> {
    checks.iter().filter(|c| !c.passed).map(|c| c.name.clone()).collect()
}

#[test]
fn yaw_quarter_turn_with_opposite_side_faces() {
    let scene = cube_scene();
    let cfg = AdmmConfig::default();
    let ctx = context(&scene, &placed(PrimitiveKind::R, vec![FRAC_PI_2]));
    for pair in [[1, 2], [3, 4]] {
        let eval = evaluate(&ContactSchedule::constant(10, &pair), &ctx, &scene, &cfg);
        let plan = eval.plan.expect("feasible");
        assert!(plan.distance <= 0.03, "{pair:?}: D = {}", plan.distance);
        assert!(eval.reward > 0.0);
        assert!(failed_checks(&audit_plan(&plan, &ctx, &scene, &cfg)).is_empty());
    }
}

#[test]
fn desired_wrenches_reintegrate_onto_the_trajectory() {
    let scene = cube_scene();
    for kind in PrimitiveKind::ALL {
        for seed in 0..4 {
            let spec = TrajectorySpec::single(kind, None, seed);
            let ctx = context(&scene, &spec);
            let pose = integrate_wrenches(&ctx.wrenches, &ctx, &scene);
            let d = weighted_distance(ctx.trajectory.last_pose(), &pose, 0.1);
            assert!(d < 1e-12, "{kind} seed {seed}: {d}");
        }
    }
}

#[test]
fn static_object_rests_on_the_plane() {
    let scene = cube_scene();
    let cfg = AdmmConfig::default();
    let ctx = context(&scene, &placed(PrimitiveKind::L, vec![0.0]));
    let eval = evaluate(&ContactSchedule::zeros(10, 2), &ctx, &scene, &cfg);
    // QP tolerances leave a residual drift far below a micrometre.
    assert!(eval.reward > 1.0 - 1e-9, "{}", eval.reward);
    let plan = eval.plan.unwrap();
    assert!(plan.distance < 1e-9);
    for step in &plan.steps {
        let total: Vec3 = step.env.iter().map(|e| e.f).sum();
        assert!((total - Vec3::new(0.0, 0.0, 0.5 * 9.81)).norm() < 1e-5);
    }
}

#[test]
fn sliding_without_fingers_is_infeasible() {
    // Floor friction alone can only decelerate a sliding cube.
    let scene = cube_scene();
    let cfg = AdmmConfig::default();
    let ctx = context(&scene, &placed(PrimitiveKind::S, vec![0.1, 0.0]));
    let eval = evaluate(&ContactSchedule::zeros(10, 2), &ctx, &scene, &cfg);
    assert_eq!(eval.reward, 0.0);
    assert!(matches!(eval.failure, Some(CoptError::Infeasible { step: "force", .. })), "{:?}", eval.failure);
}

#[test]
fn pulling_on_the_trailing_face_is_infeasible() {
    // Surface 1 faces +x; a finger there can only push towards -x.
    let scene = cube_scene();
    let cfg = AdmmConfig::default();
    let ctx = context(&scene, &placed(PrimitiveKind::S, vec![0.1, 0.0]));
    let eval = evaluate(&ContactSchedule::constant(10, &[1, 0]), &ctx, &scene, &cfg);
    assert_eq!(eval.reward, 0.0);
    let push = evaluate(&ContactSchedule::constant(10, &[2, 0]), &ctx, &scene, &cfg);
    assert!(push.reward > 0.0, "{:?}", push.failure);
}

#[test]
fn invalid_schedules_score_zero() {
    let scene = cube_scene();
    let cfg = AdmmConfig::default();
    let ctx = context(&scene, &placed(PrimitiveKind::R, vec![FRAC_PI_2]));
    let mut schedule = ContactSchedule::constant(10, &[1, 2]);
    schedule.rows[4] = vec![3, 2];
    let eval = evaluate(&schedule, &ctx, &scene, &cfg);
    assert_eq!(eval.reward, 0.0);
    assert!(matches!(eval.failure, Some(CoptError::InvalidSchedule(_))));
    let short = ContactSchedule::constant(9, &[1, 2]);
    assert!(matches!(evaluate(&short, &ctx, &scene, &cfg).failure, Some(CoptError::InvalidSchedule(_))));
}

#[test]
fn audit_flags_tampered_plans() {
    let scene = cube_scene();
    let cfg = AdmmConfig::default();
    let ctx = context(&scene, &placed(PrimitiveKind::R, vec![FRAC_PI_2]));
    let plan = evaluate(&ContactSchedule::constant(10, &[1, 2]), &ctx, &scene, &cfg).plan.unwrap();

    let mut forced = plan.clone();
    forced.steps[3].contacts[0].f += Vec3::new(0.0, 0.01, 0.0);
    let failed = failed_checks(&audit_plan(&forced, &ctx, &scene, &cfg));
    assert!(failed.contains(&"newton".to_string()), "{failed:?}");

    let mut moved = plan.clone();
    moved.steps[5].contacts[1].r += Vec3::new(0.0, 0.0, 0.01);
    let failed = failed_checks(&audit_plan(&moved, &ctx, &scene, &cfg));
    assert!(failed.contains(&"sticking".to_string()), "{failed:?}");

    let mut claimed = plan.clone();
    claimed.distance *= 0.5;
    let failed = failed_checks(&audit_plan(&claimed, &ctx, &scene, &cfg));
    assert_eq!(failed, vec!["reintegration".to_string()]);
}

#[test]
fn subproblems_are_convex_in_isolation() {
    // Either step alone is a convex QP: fixing one block of the bilinear torque
    // term leaves a PSD cost.
    let scene = cube_scene();
    let cfg = AdmmConfig::default();
    let ctx = context(&scene, &placed(PrimitiveKind::SC, vec![0.03, -0.02, 0.5]));
    let schedule = ContactSchedule::constant(10, &[3, 4]);
    let x = Locations::initial(&schedule, &scene);
    let mut z = Forces::zeros(&schedule, &ctx);
    for t in 0..10 {
        z.effector[t][0] = Vec3::new(0.0, -2.0, 0.3);
        z.effector[t][1] = Vec3::new(0.1, 2.0, 0.3);
    }
    let y = vec![Vec3::new(0.01, -0.02, 0.03); 10];
    build_location_qp(&schedule, &ctx, &scene, &z, &y, &cfg).validate().unwrap();
    build_force_qp(&schedule, &ctx, &scene, &x, &y, &cfg).validate().unwrap();
}

#[test]
fn more_iterations_do_not_break_feasible_plans() {
    let scene = cube_scene();
    let ctx = context(&scene, &placed(PrimitiveKind::R, vec![FRAC_PI_2]));
    let cfg = AdmmConfig { iterations: 3, ..AdmmConfig::default() };
    let eval = evaluate(&ContactSchedule::constant(10, &[1, 2]), &ctx, &scene, &cfg);
    let plan = eval.plan.unwrap();
    assert!(failed_checks(&audit_plan(&plan, &ctx, &scene, &cfg)).is_empty());
}
