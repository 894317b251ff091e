use contact_core::se3::*;
use proptest::prelude::*;
use std::f64::consts::PI;

fn axis_angle(max: f64) -> impl Strategy<Value = Vec3> {
    (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, 0.0..max).prop_filter_map("degenerate axis", |(x, y, z, a)| {
        let v = Vec3::new(x, y, z);
        (v.norm() > 1e-3).then(|| v.normalize() * a)
    })
}

fn pose() -> impl Strategy<Value = Pose> {
    (-0.2f64..0.2, -0.2f64..0.2, 0.0f64..0.2, axis_angle(PI - 1e-3))
        .prop_map(|(x, y, z, w)| Pose { position: Vec3::new(x, y, z), rotation: exp_so3(&w) })
}

// Rodrigues' rotation of a single vector, independent of the matrix form.
fn rodrigues(w: &Vec3, v: &Vec3) -> Vec3 {
    let angle = w.norm();
    if angle == 0.0 {
        return *v;
    }
    let k = w / angle;
    v * angle.cos() + k.cross(v) * angle.sin() + k * k.dot(v) * (1.0 - angle.cos())
}

proptest! {
    #[test]
    fn exp_is_a_rotation(w in axis_angle(10.0)) {
        let r = exp_so3(&w);
        prop_assert!((r.transpose() * r - Mat3::identity()).amax() < 1e-12);
        prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exp_matches_rodrigues(w in axis_angle(2.0 * PI), v in axis_angle(1.0)) {
        prop_assert!((exp_so3(&w) * v - rodrigues(&w, &v)).norm() < 1e-12);
    }

    #[test]
    fn log_inverts_exp(w in axis_angle(PI - 1e-6)) {
        let back = log_so3(&exp_so3(&w));
        prop_assert!((back - w).norm() < 1e-6, "{} vs {}", back, w);
    }

    #[test]
    fn distance_is_zero_only_on_the_diagonal(a in pose(), b in pose()) {
        prop_assert_eq!(weighted_distance(&a, &a, 0.1), 0.0);
        let d = weighted_distance(&a, &b, 0.1);
        prop_assert!(d >= 0.0);
        let apart = (a.position - b.position).norm() + (a.rotation - b.rotation).amax();
        if apart > 1e-6 {
            prop_assert!(d > 0.0);
        }
    }

    #[test]
    fn pose_diff_rotation_part_is_body_frame(a in pose(), w in axis_angle(3.0)) {
        let b = Pose { position: a.position, rotation: a.rotation * exp_so3(&w) };
        let diff = pose_diff(&a, &b);
        prop_assert!((diff.fixed_rows::<3>(0)).norm() < 1e-12);
        prop_assert!((diff.fixed_rows::<3>(3) - w).norm() < 1e-9);
    }

    #[test]
    fn interpolation_hits_both_endpoints_at_rest(a in pose(), b in pose(), count in 2usize..30) {
        let traj = interpolate(&a, &b, count, 0.1).unwrap();
        prop_assert_eq!(traj.len(), count);
        prop_assert!(traj.first_pose().approx_eq(&a, 1e-12));
        prop_assert!(traj.last_pose().approx_eq(&b, 1e-9));
        prop_assert!(traj.samples[0].is_still(1e-12));
        prop_assert!(traj.samples[count - 1].is_still(1e-9));
    }
}

#[test]
fn rejects_non_rotations() {
    let scaled = Mat3::identity() * 1.01;
    assert!(matches!(Pose::new(Vec3::zeros(), scaled), Err(contact_core::error::Se3Error::InvalidRotation { .. })));
    let mirror = Mat3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
    assert!(Pose::new(Vec3::zeros(), mirror).is_err());
    assert!(Pose::new(Vec3::new(f64::NAN, 0.0, 0.0), Mat3::identity()).is_err());
    assert!(Pose::new(Vec3::zeros(), rot_x(0.3)).is_ok());
}

#[test]
fn concatenation_shares_the_junction_sample() {
    let a = Pose::identity();
    let b = Pose::from_xyz_yaw(0.1, 0.0, 0.0, 0.5);
    let c = Pose::from_xyz_yaw(0.1, 0.1, 0.0, 0.0);
    let first = interpolate(&a, &b, 10, 0.1).unwrap();
    let second = interpolate(&b, &c, 10, 0.1).unwrap();
    let joined = concat(&first, &second).unwrap();
    assert_eq!(joined.len(), 19);
    assert!(joined.pose(9).approx_eq(&b, 1e-9));
    assert!(joined.samples[9].is_still(1e-9));
    assert!(joined.last_pose().approx_eq(&c, 1e-9));
    let coarse = interpolate(&b, &c, 10, 0.2).unwrap();
    assert!(concat(&first, &coarse).is_err());
}
