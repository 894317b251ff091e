//! Contact planning for rigid-object manipulation: tree search over contact
//! surface schedules, with each candidate checked by a biconvex force and
//! location optimization.

pub mod copt;
pub mod error;
pub mod jobs;
pub mod kin;
pub mod learn;
pub mod qp;
pub mod scene;
pub mod search;
pub mod se3;
