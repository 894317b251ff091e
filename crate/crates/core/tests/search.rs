use contact_core::copt::*;
use contact_core::error::SearchError;
use contact_core::kin::Kinematics;
use contact_core::scene::*;
use contact_core::se3::Pose;
use contact_core::search::*;
use proptest::prelude::*;
use std::time::Duration;

fn placed(kind: PrimitiveKind, params: Vec<f64>) -> TrajectorySpec {
    let mut spec = TrajectorySpec::single(kind, Some(params), 0);
    spec.initial = Some(InitialPlacement { x: 0.0, y: 0.0, yaw: 0.0 });
    spec
}

fn context(scene: &Scene, spec: &TrajectorySpec) -> TaskContext {
    let task = build_task(spec, &scene.object).unwrap();
    TaskContext::new(scene, task.trajectory, spec.d).unwrap()
}

fn config(budget: usize, mode: SearchMode) -> SearchConfig {
    SearchConfig { budget, mode, time_cap: Some(Duration::from_secs(120)), ..SearchConfig::default() }
}

/// Replays a schedule epoch by epoch and checks each choice was legal.
fn assert_schedule_legal(schedule: &ContactSchedule, ctx: &TaskContext, scene: &Scene) {
    schedule.validate(scene.object.num_surfaces(), ctx.d).unwrap();
    let mut state = SearchState::root();
    for epoch in 0..num_epochs(ctx.steps(), ctx.d) {
        let row = schedule.rows[epoch * ctx.d].clone();
        let legal = legal_actions(&state, ctx, scene, &scene.robot);
        assert!(legal.contains(&row), "epoch {epoch}: {row:?} not in {legal:?}");
        state = state.child(row);
    }
}

#[test]
fn root_actions_match_brute_force() {
    let scene = cube_scene();
    let ctx = context(&scene, &placed(PrimitiveKind::S, vec![0.1, 0.0]));
    let pose = ctx.trajectory.first_pose();
    let space = ActionSpace::new(5, 2);
    // From no contact at rest: stay empty, or place exactly one finger on a
    // reachable face.
    let mut expected = vec![vec![0, 0]];
    for c in 0..2 {
        for s in 1..=5 {
            let mut a = vec![0, 0];
            a[c] = s;
            if scene.robot.reachable(c, scene.object.surface(s), pose) {
                expected.push(a);
            }
        }
    }
    expected.sort_by_key(|a| space.encode(a));
    let got = legal_actions(&SearchState::root(), &ctx, &scene, &scene.robot);
    assert_eq!(got, expected);
    assert_eq!(got.len(), 11);
}

#[test]
fn contacts_are_not_released_while_moving() {
    let scene = cube_scene();
    let ctx = context(&scene, &placed(PrimitiveKind::S, vec![0.1, 0.0]));
    let state = SearchState::root().child(vec![2, 0]);
    let legal = legal_actions(&state, &ctx, &scene, &scene.robot);
    assert!(!legal.is_empty());
    assert!(legal.iter().all(|a| a[0] == 2), "{legal:?}");
    // At rest the finger may let go.
    let rest = context(&scene, &placed(PrimitiveKind::L, vec![0.0]));
    let legal = legal_actions(&state, &rest, &scene, &scene.robot);
    assert!(legal.contains(&vec![0, 0]));
    assert!(!legal.contains(&vec![3, 0]), "swaps are never legal");
}

#[test]
fn trailing_partial_epoch_admits_no_new_contact() {
    let scene = cube_scene();
    let mut spec = placed(PrimitiveKind::L, vec![0.0]);
    spec.d = 3;
    let ctx = context(&scene, &spec);
    assert_eq!(num_epochs(10, 3), 4);
    let mut state = SearchState::root();
    for _ in 0..3 {
        state = state.child(vec![0, 0]);
    }
    assert_eq!(legal_actions(&state, &ctx, &scene, &scene.robot), vec![vec![0, 0]]);
}

#[test]
fn resting_object_is_solved_by_the_first_schedule() {
    let scene = cube_scene();
    let ctx = context(&scene, &placed(PrimitiveKind::L, vec![0.0]));
    let out = run_search(&scene, &ctx, &scene.robot, &UniformGuide, config(50, SearchMode::FirstFeasible), 0).unwrap();
    let (schedule, plan, stats) = out.feasible().unwrap();
    assert!(stats.evaluations <= 3, "{}", stats.evaluations);
    assert!(plan.reward > 0.99);
    assert_schedule_legal(&schedule, &ctx, &scene);
}

#[test]
fn found_schedules_follow_the_rules() {
    let scene = cube_scene();
    for (kind, params) in [(PrimitiveKind::S, vec![0.08, 0.03]), (PrimitiveKind::R, vec![1.0])] {
        let ctx = context(&scene, &placed(kind, params));
        let out = run_search(&scene, &ctx, &scene.robot, &UniformGuide, config(200, SearchMode::FirstFeasible), 1).unwrap();
        let (schedule, plan, stats) = out.feasible().unwrap();
        assert!(stats.evaluations <= 200);
        assert_eq!(plan.schedule(), schedule);
        assert_schedule_legal(&schedule, &ctx, &scene);
    }
}

#[test]
fn search_is_deterministic() {
    let scene = cube_scene();
    let ctx = context(&scene, &placed(PrimitiveKind::SC, vec![0.03, -0.02, 0.5]));
    let run = || run_search(&scene, &ctx, &scene.robot, &UniformGuide, config(40, SearchMode::Collect), 9).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.stats.evaluations, b.stats.evaluations);
    assert_eq!(a.stats.simulations, b.stats.simulations);
    assert_eq!(a.dataset, b.dataset);
    assert_eq!(a.best.map(|(s, p)| (s, p.reward)), b.best.map(|(s, p)| (s, p.reward)));
}

#[test]
fn collected_dataset_is_well_formed() {
    let scene = cube_scene();
    let ctx = context(&scene, &placed(PrimitiveKind::S, vec![0.1, 0.0]));
    let out = run_search(&scene, &ctx, &scene.robot, &UniformGuide, config(30, SearchMode::Collect), 2).unwrap();
    // Once a good leaf is known the tree may settle on it before the budget
    // is spent; the idle guard then ends the run.
    assert!((1..=30).contains(&out.stats.evaluations));
    assert!(out.stats.feasible_found);
    assert!(out.dataset.iter().any(|s| s.history.is_empty()));
    for s in &out.dataset {
        assert_eq!(s.legal.len(), s.policy.len());
        assert!((s.policy.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&s.value));
        assert_eq!(s.feasible, s.value > 0.0);
        assert!(s.legal.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(s.pose.len(), 12);
    }
    assert!(out.dataset.iter().any(|s| s.feasible));
}

/// Reach only at the very first pose: anything placed there is stranded once
/// the object moves.
struct StartOnly;

impl Kinematics for StartOnly {
    fn reachable(&self, _c: usize, _surface: &ContactSurface, pose: &Pose) -> bool {
        pose.position.x == 0.0
    }

    fn pair_feasible(&self, _assignments: &[(usize, &ContactSurface)], _pose: &Pose) -> bool {
        true
    }
}

#[test]
fn exhausted_tree_reports_budget_exhausted() {
    let scene = cube_scene();
    let ctx = context(&scene, &placed(PrimitiveKind::S, vec![0.1, 0.0]));
    let out = run_search(&scene, &ctx, &StartOnly, &UniformGuide, config(500, SearchMode::FirstFeasible), 0).unwrap();
    // Only the empty schedule reaches a terminal, and it cannot push.
    assert_eq!(out.stats.evaluations, 1);
    assert!(!out.stats.timed_out);
    assert!(matches!(out.feasible(), Err(SearchError::BudgetExhausted { evaluations: 1 })));
}

/// Concentrates the prior on actions that agree most with a target assignment.
struct Oracle(Vec<usize>);

impl Guide for Oracle {
    fn guide(&self, _state: &SearchState, _ctx: &TaskContext, legal: &[usize]) -> (Vec<f64>, f64) {
        let space = ActionSpace::new(5, 2);
        let weights: Vec<f64> = legal
            .iter()
            .map(|&a| {
                let agree = space.decode(a).iter().zip(&self.0).filter(|(x, y)| x == y).count();
                (10.0 * agree as f64).exp()
            })
            .collect();
        let total: f64 = weights.iter().sum();
        (weights.iter().map(|w| w / total).collect(), 0.5)
    }
}

#[test]
fn a_sharp_prior_goes_straight_to_its_schedule() {
    let scene = cube_scene();
    let ctx = context(&scene, &placed(PrimitiveKind::R, vec![std::f64::consts::FRAC_PI_2]));
    // Only one finger may be placed per epoch, so the target is reached one
    // epoch in.
    let guide = Oracle(vec![1, 2]);
    let out = run_search(&scene, &ctx, &scene.robot, &guide, config(500, SearchMode::FirstFeasible), 0).unwrap();
    let uniform = run_search(&scene, &ctx, &scene.robot, &UniformGuide, config(500, SearchMode::FirstFeasible), 0).unwrap();
    assert!(out.stats.feasible_found);
    assert!(out.stats.evaluations <= 3, "{}", out.stats.evaluations);
    assert!(out.stats.evaluations <= uniform.stats.evaluations, "{} vs {}", out.stats.evaluations, uniform.stats.evaluations);
}

#[test]
fn invalid_configs_are_rejected() {
    let scene = cube_scene();
    let ctx = context(&scene, &placed(PrimitiveKind::L, vec![0.0]));
    for cfg in [
        SearchConfig { budget: 0, ..SearchConfig::default() },
        SearchConfig { gamma: 0.0, ..SearchConfig::default() },
        SearchConfig { lookahead: Some(0), ..SearchConfig::default() },
    ] {
        assert!(matches!(
            run_search(&scene, &ctx, &scene.robot, &UniformGuide, cfg, 0),
            Err(SearchError::InvalidConfig(_))
        ));
    }
}

proptest! {
    #[test]
    fn action_space_round_trips(surfaces in 1usize..7, effectors in 1usize..4, raw in 0usize..10_000) {
        let space = ActionSpace::new(surfaces, effectors);
        let i = raw % space.size();
        let a = space.decode(i);
        prop_assert_eq!(a.len(), effectors);
        prop_assert!(a.iter().all(|&s| s <= surfaces));
        prop_assert_eq!(space.encode(&a), i);
    }

    #[test]
    fn legal_actions_respect_exclusivity_and_single_change(seed in 0u64..200, pick in 0usize..64) {
        let scene = cube_scene();
        let ctx = context(&scene, &TrajectorySpec::single(PrimitiveKind::SC, None, seed));
        let mut state = SearchState::root();
        while !is_terminal(&state, &ctx) {
            let legal = legal_actions(&state, &ctx, &scene, &scene.robot);
            let prev = state.last(2);
            for a in &legal {
                prop_assert!(a[0] == 0 || a[0] != a[1]);
                prop_assert!(a.iter().zip(&prev).filter(|(x, y)| x != y).count() <= 1);
            }
            if legal.is_empty() {
                // Only a held contact drifting out of reach can strand the search.
                prop_assert!(prev.iter().any(|&s| s != 0));
                break;
            }
            let next = legal[(pick + state.epoch) % legal.len()].clone();
            state = state.child(next);
        }
    }
}
