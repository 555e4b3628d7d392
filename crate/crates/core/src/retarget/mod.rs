//! Per-timestep retargeting from human keypoints to robot joint positions:
//! minimize `S(fk(q), targets) + smoothness * |q - q_prev|^2` subject to the
//! joint limits, warm-started from the previous solution.

pub mod objective;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Vector3};

use crate::error::{ensure_finite, Error, Result};
use crate::finger::Finger;
use crate::pose_model::{tip_index, HandPose, HandSkeleton, WRIST};
use crate::robot_hand::{HandFrames, JointConfig, RobotHandModel};
use crate::solver::{
    solver_registry, BoxSolver, LeastSquaresProblem, SolveReport, SolverOptions, Termination,
    PROJECTED_GAUSS_NEWTON,
};

pub use objective::{
    objective_registry, DexPilotObjective, PositionObjective, ResidualTerm, SimilarityObjective,
    VectorObjective, DEXPILOT, POSITION, VECTOR,
};

#[derive(Clone)]
pub struct RetargetConfig {
    pub objective: Arc<dyn SimilarityObjective>,
    pub solver: Arc<dyn BoxSolver>,
    /// Human-to-robot size ratio; `None` defers to the hand config, then to
    /// [`default_scale`].
    pub scale: Option<f64>,
    pub smoothness_weight: f64,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub step_tolerance: f64,
}

impl std::fmt::Debug for RetargetConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RetargetConfig")
            .field("objective", &self.objective.name())
            .field("solver", &self.solver.name())
            .field("scale", &self.scale)
            .field("smoothness_weight", &self.smoothness_weight)
            .field("max_iterations", &self.max_iterations)
            .field("gradient_tolerance", &self.gradient_tolerance)
            .field("step_tolerance", &self.step_tolerance)
            .finish()
    }
}

impl Default for RetargetConfig {
    fn default() -> Self {
        Self {
            objective: Arc::new(DexPilotObjective),
            solver: solver_registry()
                .get(PROJECTED_GAUSS_NEWTON)
                .expect("built-in solver"),
            scale: None,
            smoothness_weight: 1.0,
            max_iterations: 50,
            gradient_tolerance: 1e-8,
            step_tolerance: 1e-10,
        }
    }
}

impl RetargetConfig {
    /// Default config with objective and solver looked up by name.
    pub fn named(objective: &str, solver: &str) -> Result<Self> {
        Ok(Self {
            objective: objective_registry().get(objective)?,
            solver: solver_registry().get(solver)?,
            ..Self::default()
        })
    }

    pub fn with_objective(mut self, objective: Arc<dyn SimilarityObjective>) -> Self {
        self.objective = objective;
        self
    }

    pub fn with_smoothness(mut self, weight: f64) -> Self {
        self.smoothness_weight = weight;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.scale {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::InvalidArgument(format!("scale must be > 0, got {s}")));
            }
        }
        if !(self.smoothness_weight.is_finite() && self.smoothness_weight >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "smoothness weight must be >= 0, got {}",
                self.smoothness_weight
            )));
        }
        if !(self.gradient_tolerance > 0.0 && self.step_tolerance > 0.0) {
            return Err(Error::InvalidArgument("solver tolerances must be > 0".into()));
        }
        Ok(())
    }

    fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            max_iterations: self.max_iterations,
            gradient_tolerance: self.gradient_tolerance,
            step_tolerance: self.step_tolerance,
            ..SolverOptions::default()
        }
    }
}

/// Palm and fingertip targets in the robot base frame, fingertips in the
/// robot model's fingertip order.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointTargets {
    pub palm: Vector3<f64>,
    pub tips: Vec<Vector3<f64>>,
    pub tags: Vec<Finger>,
}

impl KeypointTargets {
    /// Targets that the model reaches exactly at `q`.
    pub fn from_frames(model: &RobotHandModel, frames: &HandFrames) -> Self {
        Self {
            palm: frames.palm,
            tips: frames.tips.clone(),
            tags: model.finger_tags(),
        }
    }

    pub fn translated(&self, t: &Vector3<f64>) -> Self {
        Self {
            palm: self.palm + t,
            tips: self.tips.iter().map(|p| p + t).collect(),
            tags: self.tags.clone(),
        }
    }

    /// Point `i` with palm = 0 and fingertip `t` = `t + 1`.
    pub fn point(&self, i: usize) -> Vector3<f64> {
        if i == 0 {
            self.palm
        } else {
            self.tips[i - 1]
        }
    }

    fn check(&self, model: &RobotHandModel) -> Result<()> {
        let expected = model.finger_tags();
        if self.tags != expected || self.tips.len() != expected.len() {
            return Err(Error::TagMismatch(format!(
                "targets are tagged {:?} but the hand has {:?}",
                self.tags, expected
            )));
        }
        let coords: Vec<f64> = self.points().flat_map(|p| [p.x, p.y, p.z]).collect();
        ensure_finite(&coords, "retargeting targets")
    }

    fn points(&self) -> impl Iterator<Item = &Vector3<f64>> {
        std::iter::once(&self.palm).chain(self.tips.iter())
    }
}

/// Human wrist-to-middle-TIP length against the robot's palm-to-middle
/// fingertip length at zero pose (zero clamped into the limits). Hands
/// without a middle finger use the mean ratio over their fingers.
pub fn default_scale(model: &RobotHandModel, skeleton: &HandSkeleton) -> Result<f64> {
    let human = skeleton.keypoints(&HandPose::zeros());
    let robot = model.fk(&model.clamp(&vec![0.0; model.dof()]))?;
    let ratio = |i: usize, f: Finger| {
        (robot.tips[i] - robot.palm).norm() / (human[tip_index(f)] - human[WRIST]).norm()
    };
    let tags = model.finger_tags();
    let scale = match tags.iter().position(|&f| f == Finger::Middle) {
        Some(i) => ratio(i, Finger::Middle),
        None => tags.iter().enumerate().map(|(i, &f)| ratio(i, f)).sum::<f64>() / tags.len() as f64,
    };
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::InvalidArgument(format!("degenerate default scale {scale}")));
    }
    Ok(scale)
}

/// Scale from the config, else the hand config, else [`default_scale`].
pub fn resolve_scale(model: &RobotHandModel, skeleton: &HandSkeleton, config: &RetargetConfig) -> Result<f64> {
    match config.scale.or(model.scale_override()) {
        Some(s) => Ok(s),
        None => default_scale(model, skeleton),
    }
}

/// Selects the wrist and the robot's fingertips from the 21 human keypoints
/// and scales them about the wrist. The wrist lands on the robot palm
/// position at mid-range.
pub fn map_targets(keypoints: &[Vector3<f64>], model: &RobotHandModel, scale: f64) -> Result<KeypointTargets> {
    if keypoints.len() != crate::pose_model::NUM_KEYPOINTS {
        return Err(Error::Dimension {
            what: "human keypoints",
            expected: crate::pose_model::NUM_KEYPOINTS,
            got: keypoints.len(),
        });
    }
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::InvalidArgument(format!("scale must be > 0, got {scale}")));
    }
    let anchor = model.fk(&model.mid_range())?.palm;
    let wrist = keypoints[WRIST];
    let tags = model.finger_tags();
    Ok(KeypointTargets {
        palm: anchor,
        tips: tags
            .iter()
            .map(|&f| anchor + (keypoints[tip_index(f)] - wrist) * scale)
            .collect(),
        tags,
    })
}

/// The retargeting objective as a least-squares problem over `q`.
pub struct RetargetProblem<'a> {
    model: &'a RobotHandModel,
    targets: Vec<Vector3<f64>>,
    terms: Vec<ResidualTerm>,
    smoothness_sqrt: f64,
    q_prev: &'a [f64],
}

impl<'a> RetargetProblem<'a> {
    pub fn new(
        model: &'a RobotHandModel,
        targets: &KeypointTargets,
        config: &RetargetConfig,
        q_prev: &'a JointConfig,
    ) -> Result<Self> {
        targets.check(model)?;
        model.check_config(q_prev.as_slice())?;
        config.validate()?;
        Ok(Self {
            model,
            targets: targets.points().copied().collect(),
            terms: config.objective.terms(model.num_tips()),
            smoothness_sqrt: config.smoothness_weight.sqrt(),
            q_prev: q_prev.as_slice(),
        })
    }

    fn target_vector(&self, term: &ResidualTerm) -> Vector3<f64> {
        match term.relative_to {
            Some(b) => self.targets[term.point] - self.targets[b],
            None => self.targets[term.point],
        }
    }

    fn robot_vector(points: &[Vector3<f64>], term: &ResidualTerm) -> Vector3<f64> {
        match term.relative_to {
            Some(b) => points[term.point] - points[b],
            None => points[term.point],
        }
    }

    fn similarity_from(&self, frames: &HandFrames) -> f64 {
        let points: Vec<Vector3<f64>> = frames.points().copied().collect();
        self.terms
            .iter()
            .map(|t| (Self::robot_vector(&points, t) - self.target_vector(t)).norm_squared())
            .sum()
    }

    fn smoothness(&self, q: &[f64]) -> f64 {
        let w = self.smoothness_sqrt * self.smoothness_sqrt;
        w * q.iter().zip(self.q_prev).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
    }
}

impl LeastSquaresProblem for RetargetProblem<'_> {
    fn dim(&self) -> usize {
        self.model.dof()
    }

    fn value(&self, q: &[f64]) -> f64 {
        let frames = self.model.fk_slice(q).expect("dimension checked at construction");
        self.similarity_from(&frames) + self.smoothness(q)
    }

    fn residuals(&self, q: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let m = self.model.dof();
        let (frames, jac) = self.model.fk_with_jacobian(q).expect("dimension checked at construction");
        let points: Vec<Vector3<f64>> = frames.points().copied().collect();
        let smooth_rows = if self.smoothness_sqrt > 0.0 { m } else { 0 };
        let rows = 3 * self.terms.len() + smooth_rows;
        let mut r = DVector::zeros(rows);
        let mut jr = DMatrix::zeros(rows, m);
        for (k, term) in self.terms.iter().enumerate() {
            let res = Self::robot_vector(&points, term) - self.target_vector(term);
            for c in 0..3 {
                r[3 * k + c] = res[c];
            }
            let mut block = jr.rows_mut(3 * k, 3);
            block += jac.rows(3 * term.point, 3);
            if let Some(b) = term.relative_to {
                block -= jac.rows(3 * b, 3);
            }
        }
        let base = 3 * self.terms.len();
        for i in 0..smooth_rows {
            r[base + i] = self.smoothness_sqrt * (q[i] - self.q_prev[i]);
            jr[(base + i, i)] = self.smoothness_sqrt;
        }
        (r, jr)
    }
}

/// `S(fk(q), targets) + smoothness_weight * |q - q_prev|^2`.
pub fn objective_value(
    model: &RobotHandModel,
    q: &JointConfig,
    targets: &KeypointTargets,
    config: &RetargetConfig,
    q_prev: &JointConfig,
) -> Result<f64> {
    model.check_config(q.as_slice())?;
    Ok(RetargetProblem::new(model, targets, config, q_prev)?.value(q.as_slice()))
}

/// Analytic gradient of [`objective_value`] with respect to `q`.
pub fn objective_gradient(
    model: &RobotHandModel,
    q: &JointConfig,
    targets: &KeypointTargets,
    config: &RetargetConfig,
    q_prev: &JointConfig,
) -> Result<Vec<f64>> {
    model.check_config(q.as_slice())?;
    let problem = RetargetProblem::new(model, targets, config, q_prev)?;
    let (r, jac) = problem.residuals(q.as_slice());
    Ok((jac.tr_mul(&r) * 2.0).iter().copied().collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub q: JointConfig,
    pub objective: f64,
    pub iterations: usize,
    /// Objective after every accepted solver iterate, starting at the warm start.
    pub trace: Vec<f64>,
    pub termination: Termination,
}

/// One warm-started solve. The result is feasible and never worse than the
/// (clamped) warm start.
pub fn retarget_step_report(
    model: &RobotHandModel,
    targets: &KeypointTargets,
    q_prev: &JointConfig,
    config: &RetargetConfig,
) -> Result<StepReport> {
    let problem = RetargetProblem::new(model, targets, config, q_prev)?;
    let SolveReport {
        x,
        value,
        iterations,
        trace,
        termination,
    } = config.solver.solve(
        &problem,
        q_prev.as_slice(),
        model.lower(),
        model.upper(),
        &config.solver_options(),
    );
    if !value.is_finite() {
        return Err(Error::NonFinite("retargeting objective"));
    }
    Ok(StepReport {
        q: JointConfig(x),
        objective: value,
        iterations,
        trace,
        termination,
    })
}

pub fn retarget_step(
    model: &RobotHandModel,
    targets: &KeypointTargets,
    q_prev: &JointConfig,
    config: &RetargetConfig,
) -> Result<JointConfig> {
    Ok(retarget_step_report(model, targets, q_prev, config)?.q)
}

/// Folds [`retarget_step`] over a target sequence, each output warm-starting
/// the next.
pub fn retarget_trajectory(
    model: &RobotHandModel,
    target_sequence: &[KeypointTargets],
    q_init: &JointConfig,
    config: &RetargetConfig,
) -> Result<Vec<JointConfig>> {
    if target_sequence.is_empty() {
        return Err(Error::Empty("target sequence"));
    }
    let mut out: Vec<JointConfig> = Vec::with_capacity(target_sequence.len());
    for targets in target_sequence {
        let prev = out.last().unwrap_or(q_init);
        out.push(retarget_step(model, targets, prev, config)?);
    }
    Ok(out)
}

/// Pose-to-joints oracle: keypoints, target mapping, then one solve from
/// the mid-range warm start.
pub fn retarget_pose(
    model: &RobotHandModel,
    skeleton: &HandSkeleton,
    pose: &HandPose,
    scale: f64,
    config: &RetargetConfig,
) -> Result<StepReport> {
    let targets = map_targets(&skeleton.keypoints(pose), model, scale)?;
    retarget_step_report(model, &targets, &model.mid_range(), config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::robot_hand::{load_urdf, FingertipSpec, HandConfig};

    const TWO_FINGERS: &str = r#"<robot name="two">
        <link name="palm"/><link name="a1"/><link name="a2"/><link name="b1"/><link name="b2"/>
        <joint name="ja" type="revolute"><parent link="palm"/><child link="a1"/>
          <origin xyz="0.05 0.02 0"/><axis xyz="0 1 0"/><limit lower="0" upper="1.5"/></joint>
        <joint name="ja_tip" type="fixed"><parent link="a1"/><child link="a2"/><origin xyz="0.05 0 0"/></joint>
        <joint name="jb" type="revolute"><parent link="palm"/><child link="b1"/>
          <origin xyz="0.05 -0.02 0"/><axis xyz="0 0 1"/><limit lower="-1" upper="1"/></joint>
        <joint name="jb_tip" type="fixed"><parent link="b1"/><child link="b2"/><origin xyz="0.04 0 0"/></joint>
    </robot>"#;

    fn model() -> RobotHandModel {
        let cfg = HandConfig {
            urdf_path: "x".into(),
            palm_link: "palm".into(),
            fingertips: vec![
                FingertipSpec { link: "a2".into(), finger_tag: Finger::Thumb },
                FingertipSpec { link: "b2".into(), finger_tag: Finger::Index },
            ],
            mount_joint: None,
            scale: None,
            joint_order_override: None,
        };
        load_urdf(TWO_FINGERS, &cfg).unwrap()
    }

    #[test]
    fn smoothness_term_isolated() {
        let m = model();
        let q = JointConfig(vec![0.5, 0.2]);
        let targets = KeypointTargets::from_frames(&m, &m.fk(&q).unwrap());
        let prev = JointConfig(vec![0.5, -0.8]);
        for name in [POSITION, VECTOR, DEXPILOT] {
            let cfg = RetargetConfig::named(name, PROJECTED_GAUSS_NEWTON).unwrap();
            let v = objective_value(&m, &q, &targets, &cfg, &prev).unwrap();
            assert!((v - 1.0).abs() < 1e-15, "{name}: {v}");
            assert_eq!(objective_value(&m, &q, &targets, &cfg, &q).unwrap(), 0.0);
        }
    }

    #[test]
    fn tag_mismatch_and_bad_targets_are_errors() {
        let m = model();
        let q = m.mid_range();
        let mut targets = KeypointTargets::from_frames(&m, &m.fk(&q).unwrap());
        targets.tags.reverse();
        let cfg = RetargetConfig::default();
        assert!(matches!(objective_value(&m, &q, &targets, &cfg, &q), Err(Error::TagMismatch(_))));
        targets.tags.reverse();
        targets.tips[0].x = f64::NAN;
        assert!(matches!(retarget_step(&m, &targets, &q, &cfg), Err(Error::NonFinite(_))));
        assert!(matches!(
            retarget_trajectory(&m, &[], &q, &cfg),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn fixed_point_is_returned_unchanged() {
        let m = model();
        let q = JointConfig(vec![0.7, 0.3]);
        let targets = KeypointTargets::from_frames(&m, &m.fk(&q).unwrap());
        for solver in solver_registry().names() {
            let cfg = RetargetConfig::named(DEXPILOT, solver).unwrap();
            let report = retarget_step_report(&m, &targets, &q, &cfg).unwrap();
            assert_eq!(report.q, q);
            assert_eq!(report.iterations, 0);
        }
    }

    #[test]
    fn map_targets_identity_and_scaling() {
        let m = model();
        let sk = HandSkeleton::default_hand();
        let kp = sk.keypoints(&HandPose::zeros());
        let t1 = map_targets(&kp, &m, 1.0).unwrap();
        assert_eq!(t1.palm, kp[WRIST]);
        assert_eq!(t1.tips, vec![kp[tip_index(Finger::Thumb)], kp[tip_index(Finger::Index)]]);
        let t2 = map_targets(&kp, &m, 2.0).unwrap();
        for (a, b) in t1.tips.iter().zip(&t2.tips) {
            assert!(((b - t2.palm).norm() - 2.0 * (a - t1.palm).norm()).abs() < 1e-15);
        }
        assert!(map_targets(&kp[..20], &m, 1.0).is_err());
        assert!(map_targets(&kp, &m, 0.0).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = RetargetConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.scale = Some(-1.0);
        assert!(cfg.validate().is_err());
        cfg.scale = None;
        cfg.smoothness_weight = -0.1;
        assert!(cfg.validate().is_err());
        assert!(RetargetConfig::named("fancy", PROJECTED_GAUSS_NEWTON).is_err());
    }
}
