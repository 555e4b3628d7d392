//! Action and observation plumbing shared by every hand, plus reward
//! evaluation.

mod reward;

use std::sync::Arc;

use nalgebra::Vector3;

pub use reward::{
    distance_reward, height_reward, parse_rollout, reward_components, rollout_jsonl, score_rollout,
    step_qualifies, xy_reward, KinematicHarness, Mode, RewardComponents, RolloutRecord, RolloutScore, SceneState,
    SuccessTracker, SuccessUpdate, ATTACH_RADIUS, HEIGHT_TOLERANCE, INITIAL_HEIGHT, PALM_RADIUS, SUCCESS_BONUS,
    TARGET_HEIGHT, TIP_RADIUS,
};

use crate::eigengrasp::{EigengraspBasis, EigengraspWeights};
use crate::error::{ensure_finite, Error, Result};
use crate::finger::Finger;
use crate::pose_model::HandSkeleton;
use crate::retarget::{map_targets, resolve_scale, retarget_step_report, RetargetConfig};
use crate::robot_hand::{HandFrames, JointConfig, RobotHandModel};
use crate::surrogate::{predict, Mlp};

pub const ARM_DOF: usize = 6;
pub const HAND_SLOTS: usize = 6;
pub const OBJECT_POSE_DIM: usize = 7;

/// Observation length for `k` eigengrasp coordinates.
pub fn observation_dim(k: usize) -> usize {
    ARM_DOF + 3 * HAND_SLOTS + OBJECT_POSE_DIM + ARM_DOF + k
}

/// Slot order of the hand block: palm first, then fingers thumb to little.
pub const SLOT_FINGERS: [Option<Finger>; HAND_SLOTS] = [
    None,
    Some(Finger::Thumb),
    Some(Finger::Index),
    Some(Finger::Middle),
    Some(Finger::Ring),
    Some(Finger::Little),
];

#[derive(Debug, Clone, PartialEq)]
pub struct EigengraspAction {
    pub arm_targets: [f64; ARM_DOF],
    pub weights: EigengraspWeights,
}

impl EigengraspAction {
    /// Flat `arm ++ w` layout used for the previous-action block.
    pub fn to_vec(&self) -> Vec<f64> {
        self.arm_targets.iter().chain(&self.weights.0).copied().collect()
    }
}

#[derive(Debug, Clone)]
pub enum Backend {
    Oracle,
    Surrogate(Arc<Mlp<f32>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActOutput {
    pub arm_targets: [f64; ARM_DOF],
    pub hand_targets: JointConfig,
    /// Final objective of the oracle solve; absent for the surrogate.
    pub objective: Option<f64>,
}

/// Per-hand streaming state. Sessions share nothing mutable, so several
/// can run side by side.
#[derive(Debug, Clone)]
pub struct Session {
    basis: Arc<EigengraspBasis>,
    skeleton: Arc<HandSkeleton>,
    model: Arc<RobotHandModel>,
    config: RetargetConfig,
    scale: f64,
    q_prev: JointConfig,
    backend: Backend,
}

impl Session {
    pub fn new(
        basis: Arc<EigengraspBasis>,
        skeleton: Arc<HandSkeleton>,
        model: Arc<RobotHandModel>,
        config: RetargetConfig,
        backend: Backend,
    ) -> Result<Self> {
        config.validate()?;
        if let Backend::Surrogate(net) = &backend {
            if net.output_dim() != model.dof() || net.hand_tag() != model.name() {
                return Err(Error::TagMismatch(format!(
                    "surrogate for `{}` with {} outputs cannot drive `{}` with {} joints",
                    net.hand_tag(),
                    net.output_dim(),
                    model.name(),
                    model.dof()
                )));
            }
        }
        let scale = resolve_scale(&model, &skeleton, &config)?;
        let q_prev = model.mid_range();
        Ok(Self {
            basis,
            skeleton,
            model,
            config,
            scale,
            q_prev,
            backend,
        })
    }

    pub fn model(&self) -> &RobotHandModel {
        &self.model
    }

    pub fn basis(&self) -> &EigengraspBasis {
        &self.basis
    }

    pub fn q_prev(&self) -> &JointConfig {
        &self.q_prev
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Eigengrasp action to arm and hand joint targets. The arm block passes
    /// through untouched.
    pub fn act(&mut self, action: &EigengraspAction) -> Result<ActOutput> {
        ensure_finite(&action.arm_targets, "arm targets")?;
        let pose = self.basis.synthesize(&action.weights)?;
        let (hand_targets, objective) = match &self.backend {
            Backend::Oracle => {
                let targets = map_targets(&self.skeleton.keypoints(&pose), &self.model, self.scale)?;
                let report = retarget_step_report(&self.model, &targets, &self.q_prev, &self.config)?;
                self.q_prev = report.q.clone();
                (report.q, Some(report.objective))
            }
            Backend::Surrogate(net) => (predict(net, std::slice::from_ref(&pose))?.remove(0), None),
        };
        Ok(ActOutput {
            arm_targets: action.arm_targets,
            hand_targets,
            objective,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnifiedObservation {
    pub arm_joints: [f64; ARM_DOF],
    pub hand_frames: [[f64; 3]; HAND_SLOTS],
    /// Position then unit quaternion stored (x, y, z, w).
    pub object_pose: [f64; OBJECT_POSE_DIM],
    pub prev_action: Vec<f64>,
}

impl UnifiedObservation {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(observation_dim(self.prev_action.len().saturating_sub(ARM_DOF)));
        out.extend(self.arm_joints);
        out.extend(self.hand_frames.iter().flatten());
        out.extend(self.object_pose);
        out.extend(&self.prev_action);
        out
    }

    pub fn slot(&self, finger: Option<Finger>) -> Vector3<f64> {
        let i = SLOT_FINGERS.iter().position(|f| *f == finger).unwrap();
        self.hand_frames[i].into()
    }
}

/// Fixed-layout observation. Palm and fingertip positions go to their
/// canonical slots by finger tag; slots of fingers the hand lacks hold the
/// palm position.
pub fn build_observation(
    arm_joints: &[f64; ARM_DOF],
    frames: &HandFrames,
    tags: &[Finger],
    object_pose: &[f64; OBJECT_POSE_DIM],
    prev_action: &[f64],
) -> Result<UnifiedObservation> {
    if tags.len() != frames.tips.len() {
        return Err(Error::Dimension {
            what: "finger tags",
            expected: frames.tips.len(),
            got: tags.len(),
        });
    }
    if prev_action.len() < ARM_DOF {
        return Err(Error::Dimension {
            what: "previous action",
            expected: ARM_DOF,
            got: prev_action.len(),
        });
    }
    ensure_finite(arm_joints, "arm joints")?;
    ensure_finite(object_pose, "object pose")?;
    ensure_finite(prev_action, "previous action")?;
    let palm: [f64; 3] = frames.palm.into();
    let mut hand_frames = [palm; HAND_SLOTS];
    let mut seen = [false; HAND_SLOTS];
    for (tag, tip) in tags.iter().zip(&frames.tips) {
        let slot = 1 + tag.index();
        if seen[slot] {
            return Err(Error::DuplicateTag(tag.to_string()));
        }
        seen[slot] = true;
        hand_frames[slot] = (*tip).into();
    }
    let mut pose = *object_pose;
    let norm = pose[3..].iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Err(Error::InvalidArgument("object quaternion has zero norm".into()));
    }
    pose[3..].iter_mut().for_each(|v| *v /= norm);
    Ok(UnifiedObservation {
        arm_joints: *arm_joints,
        hand_frames,
        object_pose: pose,
        prev_action: prev_action.to_vec(),
    })
}
