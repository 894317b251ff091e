//! Kinematic feasibility of effector-to-surface assignments.
//!
//! Full inverse kinematics is replaced by a reach sphere per effector and a
//! minimum spacing between targets; search only sees the [`Kinematics`]
//! trait, so a real IK can be dropped in.

use crate::scene::{ContactSurface, RobotModel};
use crate::se3::{Pose, Vec3};

pub trait Kinematics {
    /// Can effector `c` reach the center of `surface` with the object at `pose`?
    fn reachable(&self, c: usize, surface: &ContactSurface, pose: &Pose) -> bool;

    /// Are the assigned surfaces (pairs of effector and surface) jointly usable?
    fn pair_feasible(&self, assignments: &[(usize, &ContactSurface)], pose: &Pose) -> bool;
}

pub fn world_center(surface: &ContactSurface, pose: &Pose) -> Vec3 {
    pose.transform_point(&surface.center())
}

impl Kinematics for RobotModel {
    fn reachable(&self, c: usize, surface: &ContactSurface, pose: &Pose) -> bool {
        let Some(eff) = self.effectors.get(c) else { return false };
        (world_center(surface, pose) - eff.base).norm() <= eff.radius
    }

    fn pair_feasible(&self, assignments: &[(usize, &ContactSurface)], pose: &Pose) -> bool {
        let centers: Vec<Vec3> = assignments.iter().map(|(_, s)| world_center(s, pose)).collect();
        for i in 0..centers.len() {
            for j in i + 1..centers.len() {
                if (centers[i] - centers[j]).norm() < self.min_separation {
                    return false;
                }
            }
        }
        true
    }
}
