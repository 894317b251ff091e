use contact_core::scene::*;
use contact_core::se3::{Pose, Vec3};
use proptest::prelude::*;

#[test]
fn scene_round_trips_through_json() {
    let scene = cube_scene();
    let text = serde_json::to_string_pretty(&scene).unwrap();
    let back: Scene = serde_json::from_str(&text).unwrap();
    assert_eq!(back, scene);
    back.validate().unwrap();
}

#[test]
fn invalid_scenes_are_rejected() {
    let mut scene = cube_scene();
    scene.object.mass = -1.0;
    assert!(scene.validate().is_err());
    let mut scene = cube_scene();
    scene.robot.effectors[0].radius = 0.0;
    assert!(scene.validate().is_err());
}

#[test]
fn trajectory_spec_uses_capital_t() {
    let spec = TrajectorySpec::single(PrimitiveKind::R, Some(vec![0.5]), 3);
    let json = serde_json::to_value(&spec).unwrap();
    assert_eq!(json["T"], 10);
    let back: TrajectorySpec = serde_json::from_value(json).unwrap();
    assert_eq!(back, spec);
}

#[test]
fn chained_task_has_junctions_at_rest() {
    let scene = cube_scene();
    let spec = TrajectorySpec {
        seed: 5,
        primitives: vec![PrimitiveSpec { kind: PrimitiveKind::SC, params: None }; 3],
        steps: 31,
        dt: 0.1,
        d: 3,
        initial: None,
    };
    let task = build_task(&spec, &scene.object).unwrap();
    assert_eq!(task.trajectory.len(), 91);
    for k in [0, 30, 60, 90] {
        assert!(task.trajectory.samples[k].is_still(1e-9), "sample {k}");
        assert_eq!(k % spec.d, 0);
    }
    assert!(!task.trajectory.samples[15].is_still(1e-6));
    assert_eq!(task.params.len(), 3);
}

#[test]
fn gravity_is_carried_by_the_desired_force() {
    let scene = cube_scene();
    let traj = build_task(&TrajectorySpec::single(PrimitiveKind::L, Some(vec![0.05]), 0), &scene.object).unwrap().trajectory;
    let w = trajectory_wrenches(&scene.object, &scene.environment, &traj);
    assert_eq!(w.len(), traj.len());
    // The accelerations telescope: their sum times dt is the velocity of the
    // last step, so the impulse beyond the weight is m times that velocity.
    let n = traj.len();
    let impulse: f64 = w[..n - 1].iter().map(|w| w.force.z - 0.5 * 9.81).sum::<f64>() * traj.dt;
    let last_v = (traj.pose(n - 1).position.z - traj.pose(n - 2).position.z) / traj.dt;
    assert!((impulse - 0.5 * last_v).abs() < 1e-12, "{impulse} vs {}", 0.5 * last_v);
}

proptest! {
    #[test]
    fn sampled_primitives_stay_on_or_above_the_plane(seed in 0u64..500, k in 0usize..5) {
        let scene = cube_scene();
        let kind = PrimitiveKind::ALL[k];
        let task = build_task(&TrajectorySpec::single(kind, None, seed), &scene.object).unwrap();
        for (i, s) in task.trajectory.samples.iter().enumerate() {
            let contacts = detect_env_contacts(&scene.object, &scene.environment, s, i).unwrap();
            for c in &contacts {
                prop_assert!(c.position.z.abs() <= CONTACT_HEIGHT_TOL + 1e-12 || c.position.z <= 0.0);
            }
        }
        let start: &Pose = task.trajectory.first_pose();
        prop_assert!((start.position.z - scene.object.rest_height()).abs() < 1e-12);
        prop_assert!((start.rotation * Vec3::z() - Vec3::z()).norm() < 1e-12);
    }
}
