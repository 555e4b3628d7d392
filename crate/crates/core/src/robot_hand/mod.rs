//! Dexterous robot hand models: URDF loading, forward kinematics, geometric
//! Jacobians of the palm and fingertips, joint limits and mount randomization.

mod urdf;

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, Matrix3, Rotation3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::finger::Finger;
use crate::pose_model::rodrigues;

pub use urdf::JointKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FingertipSpec {
    pub link: String,
    pub finger_tag: Finger,
}

/// Per-hand mapping file: which links are the palm and fingertips, which
/// joint mounts the hand on the arm, and optional overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandConfig {
    pub urdf_path: PathBuf,
    pub palm_link: String,
    pub fingertips: Vec<FingertipSpec>,
    #[serde(default)]
    pub mount_joint: Option<String>,
    #[serde(default)]
    pub scale: Option<f64>,
    #[serde(default)]
    pub joint_order_override: Option<Vec<String>>,
}

impl HandConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// How a joint's value is obtained from the actuated configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum JointDrive {
    Fixed,
    /// Index into the actuated configuration.
    Actuated(usize),
    /// `multiplier * q[source] + offset`.
    Mimic {
        source: usize,
        multiplier: f64,
        offset: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Joint {
    pub name: String,
    pub kind: JointKind,
    pub parent_link: usize,
    pub child_link: usize,
    pub origin_xyz: Vector3<f64>,
    pub origin_rpy: Vector3<f64>,
    origin_rot: Matrix3<f64>,
    /// Unit axis in the joint frame.
    pub axis: Vector3<f64>,
    pub limits: Option<(f64, f64)>,
    pub drive: JointDrive,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Frame {
    rot: Matrix3<f64>,
    pos: Vector3<f64>,
}

impl Frame {
    fn identity() -> Frame {
        Frame {
            rot: Matrix3::identity(),
            pos: Vector3::zeros(),
        }
    }

    fn compose(&self, rot: &Matrix3<f64>, pos: &Vector3<f64>) -> Frame {
        Frame {
            rot: self.rot * rot,
            pos: self.pos + self.rot * pos,
        }
    }
}

/// Actuated joint positions, in the model's actuated order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JointConfig(pub Vec<f64>);

impl JointConfig {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Palm and fingertip positions in the hand base frame.
#[derive(Debug, Clone, PartialEq)]
pub struct HandFrames {
    pub palm: Vector3<f64>,
    pub tips: Vec<Vector3<f64>>,
}

impl HandFrames {
    /// Palm first, then fingertips.
    pub fn points(&self) -> impl Iterator<Item = &Vector3<f64>> {
        std::iter::once(&self.palm).chain(self.tips.iter())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fingertip {
    pub link: usize,
    pub finger: Finger,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobotHandModel {
    name: String,
    links: Vec<String>,
    joints: Vec<Joint>,
    root_link: usize,
    /// Joint indices ordered parents before children.
    topo: Vec<usize>,
    /// Movable joints on the root-to-link path, per link.
    chain: Vec<Vec<usize>>,
    actuated: Vec<usize>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    palm_link: usize,
    fingertips: Vec<Fingertip>,
    mount_joint: Option<usize>,
    scale: Option<f64>,
}

/// Reads a hand config file and the URDF it points to (relative paths are
/// resolved against the config's directory).
pub fn load_hand(config_path: &Path) -> Result<RobotHandModel> {
    let config = HandConfig::from_json(&std::fs::read_to_string(config_path)?)?;
    let urdf_path = if config.urdf_path.is_absolute() {
        config.urdf_path.clone()
    } else {
        config_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&config.urdf_path)
    };
    let document = std::fs::read_to_string(&urdf_path)?;
    load_urdf(&document, &config)
}

/// Builds a hand model from URDF text and its hand config.
pub fn load_urdf(document: &str, config: &HandConfig) -> Result<RobotHandModel> {
    let raw = urdf::parse(document)?;
    let link_index: HashMap<&str, usize> = raw
        .links
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();
    let lookup = |name: &str| {
        link_index
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingLink(name.to_string()))
    };

    let mut link_parent_joint: Vec<Option<usize>> = vec![None; raw.links.len()];
    let mut joints = Vec::with_capacity(raw.joints.len());
    for (ji, rj) in raw.joints.iter().enumerate() {
        let parent = lookup(&rj.parent)?;
        let child = lookup(&rj.child)?;
        if let Some(prev) = link_parent_joint[child] {
            return Err(Error::KinematicLoop(format!(
                "link `{}` is the child of both `{}` and `{}`",
                rj.child, raw.joints[prev].name, rj.name
            )));
        }
        if joints.iter().any(|j: &Joint| j.name == rj.name) {
            return Err(Error::Urdf(format!("duplicate joint `{}`", rj.name)));
        }
        link_parent_joint[child] = Some(ji);
        let axis = if rj.kind == JointKind::Fixed {
            rj.axis
        } else {
            let n = rj.axis.norm();
            if n == 0.0 {
                return Err(Error::Urdf(format!("joint `{}` has a zero axis", rj.name)));
            }
            rj.axis / n
        };
        joints.push(Joint {
            name: rj.name.clone(),
            kind: rj.kind,
            parent_link: parent,
            child_link: child,
            origin_xyz: rj.xyz,
            origin_rpy: rj.rpy,
            origin_rot: *Rotation3::from_euler_angles(rj.rpy.x, rj.rpy.y, rj.rpy.z).matrix(),
            axis,
            limits: rj.limits,
            drive: JointDrive::Fixed,
        });
    }

    let roots: Vec<usize> = (0..raw.links.len())
        .filter(|&l| link_parent_joint[l].is_none())
        .collect();
    let root_link = match roots.as_slice() {
        [r] => *r,
        [] => return Err(Error::KinematicLoop("every link has a parent joint".into())),
        many => {
            let names: Vec<&str> = many.iter().map(|&l| raw.links[l].as_str()).collect();
            return Err(Error::KinematicLoop(format!(
                "multiple root links: {}",
                names.join(", ")
            )));
        }
    };

    // Breadth-first from the root gives a parent-before-child joint order.
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); raw.links.len()];
    for (ji, j) in joints.iter().enumerate() {
        children[j.parent_link].push(ji);
    }
    let mut topo = Vec::with_capacity(joints.len());
    let mut chain: Vec<Vec<usize>> = vec![Vec::new(); raw.links.len()];
    let mut queue = std::collections::VecDeque::from([root_link]);
    let mut visited = vec![false; raw.links.len()];
    visited[root_link] = true;
    while let Some(link) = queue.pop_front() {
        for &ji in &children[link] {
            let child = joints[ji].child_link;
            let mut path = chain[link].clone();
            if joints[ji].kind != JointKind::Fixed {
                path.push(ji);
            }
            chain[child] = path;
            visited[child] = true;
            topo.push(ji);
            queue.push_back(child);
        }
    }
    if let Some(l) = visited.iter().position(|v| !v) {
        return Err(Error::KinematicLoop(format!(
            "link `{}` is not reachable from root `{}`",
            raw.links[l], raw.links[root_link]
        )));
    }

    // Actuated joints: movable and not mimicking, in document order unless overridden.
    let mut actuated: Vec<usize> = joints
        .iter()
        .enumerate()
        .filter(|(ji, j)| j.kind != JointKind::Fixed && raw.joints[*ji].mimic.is_none())
        .map(|(ji, _)| ji)
        .collect();
    if let Some(order) = &config.joint_order_override {
        let mut reordered = Vec::with_capacity(order.len());
        for name in order {
            let ji = actuated
                .iter()
                .copied()
                .find(|&ji| joints[ji].name == *name)
                .ok_or_else(|| {
                    Error::HandConfig(format!("joint_order_override names `{name}`, which is not an actuated joint"))
                })?;
            if reordered.contains(&ji) {
                return Err(Error::HandConfig(format!("joint_order_override repeats `{name}`")));
            }
            reordered.push(ji);
        }
        if reordered.len() != actuated.len() {
            return Err(Error::HandConfig(format!(
                "joint_order_override lists {} joints but the hand has {} actuated joints",
                reordered.len(),
                actuated.len()
            )));
        }
        actuated = reordered;
    }
    for (ai, &ji) in actuated.iter().enumerate() {
        joints[ji].drive = JointDrive::Actuated(ai);
    }
    for (ji, rj) in raw.joints.iter().enumerate() {
        let Some(m) = &rj.mimic else { continue };
        if rj.kind == JointKind::Fixed {
            continue;
        }
        let source = actuated
            .iter()
            .position(|&a| joints[a].name == m.joint)
            .ok_or_else(|| {
                Error::Urdf(format!(
                    "joint `{}` mimics `{}`, which is not an actuated joint",
                    rj.name, m.joint
                ))
            })?;
        joints[ji].drive = JointDrive::Mimic {
            source,
            multiplier: m.multiplier,
            offset: m.offset,
        };
    }
    let lower = actuated.iter().map(|&ji| joints[ji].limits.unwrap().0).collect();
    let upper = actuated.iter().map(|&ji| joints[ji].limits.unwrap().1).collect();

    let palm_link = lookup(&config.palm_link)?;
    let mut fingertips = Vec::with_capacity(config.fingertips.len());
    for tip in &config.fingertips {
        if fingertips.iter().any(|f: &Fingertip| f.finger == tip.finger_tag) {
            return Err(Error::DuplicateTag(tip.finger_tag.to_string()));
        }
        fingertips.push(Fingertip {
            link: lookup(&tip.link)?,
            finger: tip.finger_tag,
        });
    }
    if fingertips.is_empty() {
        return Err(Error::HandConfig("at least one fingertip is required".into()));
    }
    let mount_joint = config
        .mount_joint
        .as_ref()
        .map(|name| {
            joints
                .iter()
                .position(|j| j.name == *name)
                .ok_or_else(|| Error::HandConfig(format!("mount joint `{name}` does not exist")))
        })
        .transpose()?;
    if let Some(s) = config.scale {
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::HandConfig(format!("scale must be positive, got {s}")));
        }
    }

    Ok(RobotHandModel {
        name: raw.name,
        links: raw.links,
        joints,
        root_link,
        topo,
        chain,
        actuated,
        lower,
        upper,
        palm_link,
        fingertips,
        mount_joint,
        scale: config.scale,
    })
}

struct Kinematics {
    links: Vec<Frame>,
    /// World axis and anchor of each joint.
    axes: Vec<Vector3<f64>>,
    anchors: Vec<Vector3<f64>>,
}

impl RobotHandModel {
    pub fn name(&self) -> &str {
        &self.name
    }

    /// Number of actuated joints `m`.
    pub fn dof(&self) -> usize {
        self.actuated.len()
    }

    /// Number of fingertips `n`.
    pub fn num_tips(&self) -> usize {
        self.fingertips.len()
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn links(&self) -> &[String] {
        &self.links
    }

    pub fn root_link(&self) -> &str {
        &self.links[self.root_link]
    }

    pub fn palm_link(&self) -> &str {
        &self.links[self.palm_link]
    }

    pub fn fingertips(&self) -> &[Fingertip] {
        &self.fingertips
    }

    pub fn finger_tags(&self) -> Vec<Finger> {
        self.fingertips.iter().map(|f| f.finger).collect()
    }

    pub fn tip_link_name(&self, i: usize) -> &str {
        &self.links[self.fingertips[i].link]
    }

    pub fn actuated_names(&self) -> Vec<&str> {
        self.actuated.iter().map(|&ji| self.joints[ji].name.as_str()).collect()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn mount_joint(&self) -> Option<&Joint> {
        self.mount_joint.map(|ji| &self.joints[ji])
    }

    /// Human-to-robot scale declared in the hand config, if any.
    pub fn scale_override(&self) -> Option<f64> {
        self.scale
    }

    /// `(lower + upper) / 2` per actuated joint.
    pub fn mid_range(&self) -> JointConfig {
        JointConfig(
            self.lower
                .iter()
                .zip(&self.upper)
                .map(|(l, u)| 0.5 * (l + u))
                .collect(),
        )
    }

    /// Coordinate-wise projection onto the joint limits.
    pub fn clamp(&self, q_raw: &[f64]) -> JointConfig {
        JointConfig(
            q_raw
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .map(|(&q, (&lo, &hi))| q.max(lo).min(hi))
                .collect(),
        )
    }

    pub fn within_limits(&self, q: &[f64]) -> bool {
        q.len() == self.dof()
            && q
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(&q, (&lo, &hi))| lo <= q && q <= hi)
    }

    fn check_dim(&self, q: &[f64]) -> Result<()> {
        if q.len() != self.dof() {
            return Err(Error::Dimension {
                what: "joint configuration",
                expected: self.dof(),
                got: q.len(),
            });
        }
        Ok(())
    }

    fn joint_value(&self, joint: &Joint, q: &[f64]) -> f64 {
        match joint.drive {
            JointDrive::Fixed => 0.0,
            JointDrive::Actuated(i) => q[i],
            JointDrive::Mimic {
                source,
                multiplier,
                offset,
            } => multiplier * q[source] + offset,
        }
    }

    fn kinematics(&self, q: &[f64]) -> Kinematics {
        let mut links = vec![Frame::identity(); self.links.len()];
        let mut axes = vec![Vector3::zeros(); self.joints.len()];
        let mut anchors = vec![Vector3::zeros(); self.joints.len()];
        for &ji in &self.topo {
            let joint = &self.joints[ji];
            let frame = links[joint.parent_link].compose(&joint.origin_rot, &joint.origin_xyz);
            let value = self.joint_value(joint, q);
            links[joint.child_link] = match joint.kind {
                JointKind::Fixed => frame,
                JointKind::Revolute => frame.compose(&rodrigues(&(joint.axis * value)), &Vector3::zeros()),
                JointKind::Prismatic => frame.compose(&Matrix3::identity(), &(joint.axis * value)),
            };
            axes[ji] = frame.rot * joint.axis;
            anchors[ji] = frame.pos;
        }
        Kinematics { links, axes, anchors }
    }

    /// Palm and fingertip positions. No clamping is applied.
    pub fn fk(&self, q: &JointConfig) -> Result<HandFrames> {
        self.fk_slice(q.as_slice())
    }

    pub fn fk_slice(&self, q: &[f64]) -> Result<HandFrames> {
        self.check_dim(q)?;
        let kin = self.kinematics(q);
        Ok(HandFrames {
            palm: kin.links[self.palm_link].pos,
            tips: self.fingertips.iter().map(|t| kin.links[t.link].pos).collect(),
        })
    }

    /// Positions plus the `3(n+1) x m` point Jacobian, rows ordered
    /// `[palm, tips...]`.
    pub fn fk_with_jacobian(&self, q: &[f64]) -> Result<(HandFrames, DMatrix<f64>)> {
        self.check_dim(q)?;
        let kin = self.kinematics(q);
        let points: Vec<usize> = std::iter::once(self.palm_link)
            .chain(self.fingertips.iter().map(|t| t.link))
            .collect();
        let mut jac = DMatrix::zeros(3 * points.len(), self.dof());
        for (pi, &link) in points.iter().enumerate() {
            let p = kin.links[link].pos;
            for &ji in &self.chain[link] {
                let joint = &self.joints[ji];
                let (column, coeff) = match joint.drive {
                    JointDrive::Actuated(i) => (i, 1.0),
                    JointDrive::Mimic {
                        source, multiplier, ..
                    } => (source, multiplier),
                    JointDrive::Fixed => continue,
                };
                let v = match joint.kind {
                    JointKind::Revolute => kin.axes[ji].cross(&(p - kin.anchors[ji])),
                    JointKind::Prismatic => kin.axes[ji],
                    JointKind::Fixed => continue,
                };
                for r in 0..3 {
                    jac[(3 * pi + r, column)] += coeff * v[r];
                }
            }
        }
        let frames = HandFrames {
            palm: kin.links[self.palm_link].pos,
            tips: self.fingertips.iter().map(|t| kin.links[t.link].pos).collect(),
        };
        Ok((frames, jac))
    }

    pub fn jacobian(&self, q: &JointConfig) -> Result<DMatrix<f64>> {
        Ok(self.fk_with_jacobian(q.as_slice())?.1)
    }

    /// Copy of the model with the mount joint's origin translated by an
    /// i.i.d. Gaussian offset of standard deviation `sigma` per axis.
    pub fn randomize_mount(&self, sigma: f64, seed: u64) -> Result<RobotHandModel> {
        let ji = self.mount_joint.ok_or(Error::MountNotDeclared)?;
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma must be >= 0, got {sigma}")));
        }
        let mut model = self.clone();
        if sigma == 0.0 {
            return Ok(model);
        }
        let normal = Normal::new(0.0, sigma).expect("sigma validated");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let offset = Vector3::from_fn(|_, _| normal.sample(&mut rng));
        model.joints[ji].origin_xyz += offset;
        Ok(model)
    }

    /// Validates that a raw configuration is finite and sized for this hand.
    pub fn check_config(&self, q: &[f64]) -> Result<()> {
        self.check_dim(q)?;
        ensure_finite(q, "joint configuration")
    }
}

/// Free-function form of [`RobotHandModel::fk`].
pub fn fk(model: &RobotHandModel, q: &JointConfig) -> Result<HandFrames> {
    model.fk(q)
}

/// Free-function form of [`RobotHandModel::jacobian`].
pub fn jacobian(model: &RobotHandModel, q: &JointConfig) -> Result<DMatrix<f64>> {
    model.jacobian(q)
}

/// Free-function form of [`RobotHandModel::clamp`].
pub fn clamp(model: &RobotHandModel, q_raw: &[f64]) -> JointConfig {
    model.clamp(q_raw)
}

/// Free-function form of [`RobotHandModel::randomize_mount`].
pub fn randomize_mount(model: &RobotHandModel, sigma: f64, seed: u64) -> Result<RobotHandModel> {
    model.randomize_mount(sigma, seed)
}
