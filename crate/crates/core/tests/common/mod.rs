#![allow(dead_code)]

use std::path::PathBuf;

use rand::Rng;
use xdex::pose_model::{HandPose, POSE_DIM};
use xdex::robot_hand::{load_hand, RobotHandModel};

pub fn asset(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("assets").join(rel)
}

pub fn hand(name: &str) -> RobotHandModel {
    load_hand(&asset(&format!("hands/{name}.json"))).unwrap()
}

/// Uniform configuration away from the limits by `margin` of each range.
pub fn interior_q<R: Rng>(model: &RobotHandModel, rng: &mut R, margin: f64) -> Vec<f64> {
    model
        .lower()
        .iter()
        .zip(model.upper())
        .map(|(l, u)| l + (u - l) * rng.random_range(margin..1.0 - margin))
        .collect()
}

/// Mostly-flexion pose of plausible magnitude.
pub fn random_pose<R: Rng>(rng: &mut R, spread: f64) -> HandPose {
    let v: Vec<f64> = (0..POSE_DIM)
        .map(|i| {
            let flex = if i % 3 == 1 { 0.6 } else { 0.0 };
            flex + rng.random_range(-spread..spread)
        })
        .collect();
    HandPose::from_slice(&v).unwrap()
}
