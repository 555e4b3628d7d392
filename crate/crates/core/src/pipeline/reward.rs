//! Grasp-and-lift reward, success tracking and rollout scoring.

use std::str::FromStr;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::robot_hand::{JointConfig, RobotHandModel};

pub const TARGET_HEIGHT: f64 = 0.6;
pub const INITIAL_HEIGHT: f64 = 0.3;
pub const SUCCESS_BONUS: f64 = 200.0;
/// Mean fingertip distance below which the hand counts as close.
pub const TIP_RADIUS: f64 = 0.12;
/// Palm distance below which the hand counts as close.
pub const PALM_RADIUS: f64 = 0.15;
pub const HEIGHT_TOLERANCE: f64 = 0.05;
/// Mean fingertip distance that attaches the object in the kinematic harness.
pub const ATTACH_RADIUS: f64 = 0.08;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneState {
    pub palm: Vector3<f64>,
    pub tips: Vec<Vector3<f64>>,
    pub object_center: Vector3<f64>,
    pub object_xy0: [f64; 2],
}

impl SceneState {
    pub fn validate(&self) -> Result<()> {
        if self.tips.is_empty() {
            return Err(Error::Empty("fingertip list"));
        }
        let mut v: Vec<f64> = self.tips.iter().flat_map(|t| t.iter().copied()).collect();
        v.extend(self.palm.iter().chain(self.object_center.iter()));
        v.extend(self.object_xy0);
        ensure_finite(&v, "scene state")
    }

    /// Object height `H`.
    pub fn height(&self) -> f64 {
        self.object_center.z
    }

    /// Mean fingertip-to-object distance `A`.
    pub fn mean_tip_distance(&self) -> f64 {
        self.tips.iter().map(|t| (t - self.object_center).norm()).sum::<f64>() / self.tips.len() as f64
    }

    /// Palm-to-object distance `P`.
    pub fn palm_distance(&self) -> f64 {
        (self.palm - self.object_center).norm()
    }

    pub fn xy_displacement(&self) -> f64 {
        (self.object_center.x - self.object_xy0[0]).hypot(self.object_center.y - self.object_xy0[1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RewardComponents {
    pub r_dis: f64,
    pub r_height: f64,
    pub r_xy: f64,
}

impl RewardComponents {
    pub fn sum(&self) -> f64 {
        self.r_dis + self.r_height + self.r_xy
    }
}

pub fn distance_reward(a: f64, p: f64) -> f64 {
    -2.0 * a - p
}

/// Zero while the hand is far from the object; otherwise peaks at 1.9 at
/// the target height.
pub fn height_reward(a: f64, p: f64, h: f64) -> f64 {
    if a >= TIP_RADIUS && p >= PALM_RADIUS {
        return 0.0;
    }
    let d = h - TARGET_HEIGHT;
    0.9 - 2.0 * d.abs() + d + 1.0 / (d.abs() + 1.0)
}

pub fn xy_reward(displacement: f64) -> f64 {
    -0.3 * displacement
}

pub fn reward_components(scene: &SceneState) -> RewardComponents {
    let (a, p) = (scene.mean_tip_distance(), scene.palm_distance());
    RewardComponents {
        r_dis: distance_reward(a, p),
        r_height: height_reward(a, p, scene.height()),
        r_xy: xy_reward(scene.xy_displacement()),
    }
}

/// Whether one step counts toward the held-lift streak.
pub fn step_qualifies(scene: &SceneState) -> bool {
    (scene.height() - TARGET_HEIGHT).abs() <= HEIGHT_TOLERANCE
        && (scene.mean_tip_distance() <= TIP_RADIUS || scene.palm_distance() <= PALM_RADIUS)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Test,
}

impl Mode {
    pub fn required_steps(self) -> usize {
        match self {
            Mode::Train => 60,
            Mode::Test => 30,
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Mode::Train),
            "test" => Ok(Mode::Test),
            _ => Err(Error::InvalidArgument(format!("mode must be train or test, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SuccessTracker {
    required: usize,
    counter: usize,
    done: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuccessUpdate {
    pub bonus: f64,
    pub done: bool,
}

impl SuccessTracker {
    pub fn new(required_steps: usize) -> Result<Self> {
        if required_steps == 0 {
            return Err(Error::InvalidArgument("required steps must be at least 1".into()));
        }
        Ok(Self {
            required: required_steps,
            counter: 0,
            done: false,
        })
    }

    pub fn for_mode(mode: Mode) -> Self {
        Self::new(mode.required_steps()).unwrap()
    }

    pub fn counter(&self) -> usize {
        self.counter
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn required_steps(&self) -> usize {
        self.required
    }

    /// Counts a qualifying step or resets the streak. The bonus is paid
    /// once, on the step that completes the streak.
    pub fn update(&mut self, scene: &SceneState) -> Result<SuccessUpdate> {
        if self.done {
            return Err(Error::TrackerDone);
        }
        if step_qualifies(scene) {
            self.counter += 1;
        } else {
            self.counter = 0;
        }
        self.done = self.counter >= self.required;
        Ok(SuccessUpdate {
            bonus: if self.done { SUCCESS_BONUS } else { 0.0 },
            done: self.done,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RolloutScore {
    pub total_reward: f64,
    pub success: bool,
    /// Steps whose reward was counted.
    pub steps: usize,
}

/// Sums per-step rewards and the success bonus until the episode ends.
/// A step with the object below the table (`H < 0`) ends the episode and
/// contributes nothing.
pub fn score_rollout(trajectory: &[SceneState], mode: Mode) -> Result<RolloutScore> {
    if trajectory.is_empty() {
        return Err(Error::Empty("rollout"));
    }
    let mut tracker = SuccessTracker::for_mode(mode);
    let mut total = 0.0;
    let mut steps = 0;
    for scene in trajectory {
        scene.validate()?;
        if scene.height() < 0.0 {
            break;
        }
        total += reward_components(scene).sum();
        steps += 1;
        let update = tracker.update(scene)?;
        total += update.bonus;
        if update.done {
            break;
        }
    }
    Ok(RolloutScore {
        total_reward: total,
        success: tracker.is_done(),
        steps,
    })
}

/// One line of a rollout file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutRecord {
    pub palm: [f64; 3],
    pub tips: Vec<[f64; 3]>,
    pub object_center: [f64; 3],
    pub object_xy0: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<Vec<f64>>,
}

impl RolloutRecord {
    pub fn from_scene(scene: &SceneState) -> Self {
        Self {
            palm: scene.palm.into(),
            tips: scene.tips.iter().map(|t| (*t).into()).collect(),
            object_center: scene.object_center.into(),
            object_xy0: scene.object_xy0,
            action: None,
        }
    }

    pub fn scene(&self) -> SceneState {
        SceneState {
            palm: self.palm.into(),
            tips: self.tips.iter().map(|t| (*t).into()).collect(),
            object_center: self.object_center.into(),
            object_xy0: self.object_xy0,
        }
    }
}

/// JSON Lines rollout; blank lines are skipped and errors carry the line.
pub fn parse_rollout(text: &str) -> Result<Vec<SceneState>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: RolloutRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        let scene = record.scene();
        scene.validate().map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(scene);
    }
    if out.is_empty() {
        return Err(Error::Empty("rollout"));
    }
    Ok(out)
}

pub fn rollout_jsonl(scenes: &[SceneState]) -> String {
    scenes
        .iter()
        .map(|s| serde_json::to_string(&RolloutRecord::from_scene(s)).unwrap() + "\n")
        .collect()
}

/// Rigid-attachment stand-in for physics: the object follows the palm's
/// motion whenever the mean fingertip distance is below [`ATTACH_RADIUS`],
/// and otherwise stays where it is.
#[derive(Debug, Clone)]
pub struct KinematicHarness<'a> {
    model: &'a RobotHandModel,
    object: Vector3<f64>,
    xy0: [f64; 2],
    last_palm: Option<Vector3<f64>>,
}

impl<'a> KinematicHarness<'a> {
    pub fn new(model: &'a RobotHandModel, object: Vector3<f64>) -> Self {
        Self {
            model,
            object,
            xy0: [object.x, object.y],
            last_palm: None,
        }
    }

    /// Places the hand base at `base` with joints `q` and returns the scene.
    pub fn step(&mut self, base: &Vector3<f64>, q: &JointConfig) -> Result<SceneState> {
        let frames = self.model.fk(q)?;
        let palm = frames.palm + base;
        let tips: Vec<Vector3<f64>> = frames.tips.iter().map(|t| t + base).collect();
        if let Some(prev) = self.last_palm {
            let a = tips.iter().map(|t| (t - self.object).norm()).sum::<f64>() / tips.len() as f64;
            if a < ATTACH_RADIUS {
                self.object += palm - prev;
            }
        }
        self.last_palm = Some(palm);
        Ok(SceneState {
            palm,
            tips,
            object_center: self.object,
            object_xy0: self.xy0,
        })
    }
}
