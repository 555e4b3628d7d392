//! Cross-embodiment dexterous hand retargeting.
//!
//! Low-dimensional eigengrasp actions are turned into human hand poses,
//! keypoints, and finally joint-position targets for arbitrary robot hands,
//! either through a box-constrained optimization oracle or a trained MLP
//! surrogate. The crate also builds the embodiment-agnostic observation
//! vector and evaluates the grasp-and-lift reward.

pub mod eigengrasp;
pub mod error;
pub mod finger;
pub mod formats;
pub mod pipeline;
pub mod pose_model;
pub mod registry;
pub mod retarget;
pub mod robot_hand;
pub mod solver;
pub mod surrogate;

pub use error::{Error, Result};
pub use finger::Finger;
