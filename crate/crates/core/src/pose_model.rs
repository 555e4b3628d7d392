//! Rigid 21-keypoint human hand skeleton driven by 45-D axis-angle poses.
//!
//! Keypoint layout: index 0 is the wrist, followed by four keypoints per
//! finger (MCP, PIP, DIP, TIP) in thumb-to-little order. Pose joints are
//! ordered the same way: finger-major, proximal to distal, three axis-angle
//! coordinates per joint. The joint at MCP rotates the MCP->PIP bone, the
//! PIP joint rotates PIP->DIP and the DIP joint rotates DIP->TIP. Bones
//! leading out of the wrist are never rotated (wrist pose is held at zero).

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::finger::Finger;

pub const NUM_POSE_JOINTS: usize = 15;
pub const POSE_DIM: usize = 3 * NUM_POSE_JOINTS;
pub const NUM_KEYPOINTS: usize = 21;
pub const WRIST: usize = 0;

const DEFAULT_SKELETON_JSON: &str = include_str!("../assets/skeleton_default.json");

/// Keypoint index of `finger`'s MCP (`segment` 0) through TIP (`segment` 3).
pub fn keypoint_index(finger: Finger, segment: usize) -> usize {
    debug_assert!(segment < 4);
    1 + 4 * finger.index() + segment
}

pub fn tip_index(finger: Finger) -> usize {
    keypoint_index(finger, 3)
}

/// Rotation matrix of an axis-angle vector.
pub fn rodrigues(axis_angle: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = axis_angle.norm_squared();
    let k = axis_angle.cross_matrix();
    // sin(t)/t and (1-cos(t))/t^2, with series expansions near zero.
    let (a, b) = if theta2 < 1e-12 {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Wraps an axis-angle vector to the equivalent rotation with norm <= pi.
pub fn canonicalize_axis_angle(v: Vector3<f64>) -> Vector3<f64> {
    let theta = v.norm();
    if theta <= PI {
        return v;
    }
    let axis = v / theta;
    let mut wrapped = theta.rem_euclid(2.0 * PI);
    if wrapped > PI {
        wrapped -= 2.0 * PI;
    }
    axis * wrapped
}

/// 45 finger-joint axis-angle coordinates (radians), canonicalized.
#[derive(Debug, Clone, PartialEq)]
pub struct HandPose {
    theta: [f64; POSE_DIM],
}

impl HandPose {
    pub fn zeros() -> Self {
        Self {
            theta: [0.0; POSE_DIM],
        }
    }

    /// Validates finiteness and length, then canonicalizes every joint block.
    pub fn from_slice(values: &[f64]) -> Result<Self> {
        if values.len() != POSE_DIM {
            return Err(Error::Dimension {
                what: "hand pose",
                expected: POSE_DIM,
                got: values.len(),
            });
        }
        ensure_finite(values, "hand pose")?;
        let mut theta = [0.0; POSE_DIM];
        for (j, block) in values.chunks_exact(3).enumerate() {
            let v = canonicalize_axis_angle(Vector3::new(block[0], block[1], block[2]));
            theta[3 * j..3 * j + 3].copy_from_slice(v.as_slice());
        }
        Ok(Self { theta })
    }

    pub fn joint(&self, j: usize) -> Vector3<f64> {
        Vector3::new(self.theta[3 * j], self.theta[3 * j + 1], self.theta[3 * j + 2])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.theta
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SkeletonFile {
    #[serde(default)]
    names: Vec<String>,
    parent: Vec<i64>,
    rest_offset: Vec<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    joint_of_keypoint: Option<Vec<Option<usize>>>,
}

/// Keypoint tree with rest bone offsets and the pose joint driving each bone.
#[derive(Debug, Clone, PartialEq)]
pub struct HandSkeleton {
    names: Vec<String>,
    parent: Vec<Option<usize>>,
    rest_offset: Vec<Vector3<f64>>,
    joint_of_keypoint: Vec<Option<usize>>,
}

impl HandSkeleton {
    /// Builds a general keypoint tree. Parents must precede children and
    /// keypoint 0 is the only root.
    pub fn from_parts(
        parent: &[i64],
        rest_offset: &[[f64; 3]],
        joint_of_keypoint: Vec<Option<usize>>,
        names: Vec<String>,
    ) -> Result<Self> {
        let n = parent.len();
        if n == 0 {
            return Err(Error::Skeleton("no keypoints".into()));
        }
        if rest_offset.len() != n || joint_of_keypoint.len() != n {
            return Err(Error::Skeleton(format!(
                "{n} parents but {} offsets and {} joint entries",
                rest_offset.len(),
                joint_of_keypoint.len()
            )));
        }
        if !names.is_empty() && names.len() != n {
            return Err(Error::Skeleton(format!("{n} keypoints but {} names", names.len())));
        }
        if parent[0] >= 0 {
            return Err(Error::Skeleton("keypoint 0 must be the root".into()));
        }
        let mut parents = vec![None];
        for (i, &p) in parent.iter().enumerate().skip(1) {
            if p < 0 || p as usize >= i {
                return Err(Error::Skeleton(format!(
                    "keypoint {i} has parent {p}; parents must precede children and only keypoint 0 may be a root"
                )));
            }
            parents.push(Some(p as usize));
        }
        let offsets: Vec<Vector3<f64>> = rest_offset.iter().map(|o| Vector3::from(*o)).collect();
        for (i, o) in offsets.iter().enumerate() {
            if !o.iter().all(|v| v.is_finite()) {
                return Err(Error::Skeleton(format!("keypoint {i} has a non-finite offset")));
            }
            if i > 0 && o.norm() <= 0.0 {
                return Err(Error::Skeleton(format!("bone leading to keypoint {i} has zero length")));
            }
        }
        if let Some(j) = joint_of_keypoint.iter().flatten().find(|&&j| j >= NUM_POSE_JOINTS) {
            return Err(Error::Dimension {
                what: "skeleton joint index",
                expected: NUM_POSE_JOINTS,
                got: *j,
            });
        }
        if joint_of_keypoint[0].is_some() {
            return Err(Error::Skeleton("the root keypoint cannot carry a joint".into()));
        }
        Ok(Self {
            names,
            parent: parents,
            rest_offset: offsets,
            joint_of_keypoint,
        })
    }

    /// Builds the standard 21-keypoint hand, checking the finger layout.
    pub fn standard(parent: &[i64], rest_offset: &[[f64; 3]], names: Vec<String>) -> Result<Self> {
        if parent.len() != NUM_KEYPOINTS {
            return Err(Error::Dimension {
                what: "skeleton keypoints",
                expected: NUM_KEYPOINTS,
                got: parent.len(),
            });
        }
        for finger in Finger::ALL {
            let mcp = keypoint_index(finger, 0);
            if parent[mcp] != WRIST as i64 {
                return Err(Error::Skeleton(format!("{finger} MCP must hang off the wrist")));
            }
            for seg in 1..4 {
                let k = keypoint_index(finger, seg);
                if parent[k] != (k - 1) as i64 {
                    return Err(Error::Skeleton(format!(
                        "{finger} keypoint {seg} must hang off keypoint {}",
                        k - 1
                    )));
                }
            }
        }
        Self::from_parts(parent, rest_offset, standard_joint_map(), names)
    }

    pub fn default_hand() -> Self {
        Self::from_json(DEFAULT_SKELETON_JSON).expect("bundled skeleton is valid")
    }

    /// Parses a skeleton file. Without an explicit `joint_of_keypoint` the
    /// standard 21-keypoint layout is enforced.
    pub fn from_json(text: &str) -> Result<Self> {
        let file: SkeletonFile = serde_json::from_str(text)?;
        match file.joint_of_keypoint {
            Some(joints) => Self::from_parts(&file.parent, &file.rest_offset, joints, file.names),
            None => Self::standard(&file.parent, &file.rest_offset, file.names),
        }
    }

    pub fn to_json(&self) -> String {
        let file = SkeletonFile {
            names: self.names.clone(),
            parent: self
                .parent
                .iter()
                .map(|p| p.map_or(-1, |p| p as i64))
                .collect(),
            rest_offset: self.rest_offset.iter().map(|o| [o.x, o.y, o.z]).collect(),
            joint_of_keypoint: (self.joint_of_keypoint != standard_joint_map())
                .then(|| self.joint_of_keypoint.clone()),
        };
        serde_json::to_string_pretty(&file).expect("skeleton serializes")
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    pub fn parent(&self, k: usize) -> Option<usize> {
        self.parent[k]
    }

    pub fn rest_offset(&self, k: usize) -> Vector3<f64> {
        self.rest_offset[k]
    }

    pub fn joint_of_keypoint(&self, k: usize) -> Option<usize> {
        self.joint_of_keypoint[k]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Returns a copy with every rest offset rotated by `r`.
    pub fn rotated(&self, r: &Matrix3<f64>) -> Self {
        Self {
            rest_offset: self.rest_offset.iter().map(|o| r * o).collect(),
            ..self.clone()
        }
    }

    /// Keypoint positions in the wrist frame. Each keypoint is its parent's
    /// position plus the accumulated rotation along its chain applied to its
    /// rest offset.
    pub fn keypoints(&self, pose: &HandPose) -> Vec<Vector3<f64>> {
        let n = self.len();
        let mut rot = vec![Matrix3::identity(); n];
        let mut pos = vec![Vector3::zeros(); n];
        for k in 1..n {
            let p = self.parent[k].expect("non-root keypoints have parents");
            rot[k] = match self.joint_of_keypoint[k] {
                Some(j) => rot[p] * rodrigues(&pose.joint(j)),
                None => rot[p],
            };
            pos[k] = pos[p] + rot[k] * self.rest_offset[k];
        }
        pos
    }
}

fn standard_joint_map() -> Vec<Option<usize>> {
    let mut map = vec![None; NUM_KEYPOINTS];
    for finger in Finger::ALL {
        for seg in 1..4 {
            map[keypoint_index(finger, seg)] = Some(3 * finger.index() + seg - 1);
        }
    }
    map
}

/// Free-function form of [`HandSkeleton::keypoints`].
pub fn hand_keypoints(skeleton: &HandSkeleton, pose: &HandPose) -> Vec<Vector3<f64>> {
    skeleton.keypoints(pose)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    // Independent unit-quaternion rotation: q v q*.
    fn quat_rotate(aa: [f64; 3], v: [f64; 3]) -> [f64; 3] {
        let t = (aa[0] * aa[0] + aa[1] * aa[1] + aa[2] * aa[2]).sqrt();
        let (w, x, y, z) = if t == 0.0 {
            (1.0, 0.0, 0.0, 0.0)
        } else {
            let s = (t / 2.0).sin() / t;
            ((t / 2.0).cos(), aa[0] * s, aa[1] * s, aa[2] * s)
        };
        let mul = |a: [f64; 4], b: [f64; 4]| {
            [
                a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
                a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
                a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
                a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
            ]
        };
        let r = mul(mul([w, x, y, z], [0.0, v[0], v[1], v[2]]), [w, -x, -y, -z]);
        [r[1], r[2], r[3]]
    }

    #[test]
    fn rodrigues_identity_and_quarter_turn() {
        assert_eq!(rodrigues(&Vector3::zeros()), Matrix3::identity());
        let r = rodrigues(&Vector3::new(0.0, 0.0, PI / 2.0));
        let v = r * Vector3::x();
        assert_relative_eq!(v, Vector3::y(), epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn rodrigues_matches_quaternion_oracle(
            ax in -3.0f64..3.0, ay in -3.0f64..3.0, az in -3.0f64..3.0,
            vx in -1.0f64..1.0, vy in -1.0f64..1.0, vz in -1.0f64..1.0,
        ) {
            let r = rodrigues(&Vector3::new(ax, ay, az));
            let got = r * Vector3::new(vx, vy, vz);
            let want = quat_rotate([ax, ay, az], [vx, vy, vz]);
            for i in 0..3 {
                prop_assert!((got[i] - want[i]).abs() < 1e-10);
            }
            prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
            prop_assert!((r.transpose() * r - Matrix3::identity()).norm() < 1e-12);
        }

        #[test]
        fn canonicalization_preserves_rotation(
            ax in -9.0f64..9.0, ay in -9.0f64..9.0, az in -9.0f64..9.0,
        ) {
            let v = Vector3::new(ax, ay, az);
            let c = canonicalize_axis_angle(v);
            prop_assert!(c.norm() <= PI + 1e-12);
            prop_assert!((rodrigues(&v) - rodrigues(&c)).norm() < 1e-9);
        }
    }

    #[test]
    fn small_angle_branch_is_continuous() {
        let v = Vector3::new(1e-7, -2e-7, 3e-7);
        let want = quat_rotate([v.x, v.y, v.z], [0.3, 0.2, 0.1]);
        let got = rodrigues(&v) * Vector3::new(0.3, 0.2, 0.1);
        for i in 0..3 {
            assert!((got[i] - want[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn pose_rejects_bad_input() {
        assert!(matches!(
            HandPose::from_slice(&[0.0; 44]),
            Err(Error::Dimension { expected: 45, got: 44, .. })
        ));
        let mut v = [0.0; 45];
        v[7] = f64::NAN;
        assert!(matches!(HandPose::from_slice(&v), Err(Error::NonFinite(_))));
    }

    #[test]
    fn zero_pose_keypoints_are_cumulative_offsets() {
        let sk = HandSkeleton::default_hand();
        let kp = sk.keypoints(&HandPose::zeros());
        assert_eq!(kp[0], Vector3::zeros());
        for k in 1..NUM_KEYPOINTS {
            let mut expected = Vector3::zeros();
            let mut cur = Some(k);
            while let Some(c) = cur {
                expected += sk.rest_offset(c);
                cur = sk.parent(c);
            }
            assert_relative_eq!(kp[k], expected, epsilon = 1e-15);
        }
    }

    #[test]
    fn two_bone_chain_quarter_turn() {
        let sk = HandSkeleton::from_parts(
            &[-1, 0, 1],
            &[[0.0; 3], [0.04, 0.0, 0.0], [0.03, 0.0, 0.0]],
            vec![None, Some(0), None],
            vec![],
        )
        .unwrap();
        let mut theta = [0.0; POSE_DIM];
        theta[2] = PI / 2.0;
        let kp = sk.keypoints(&HandPose::from_slice(&theta).unwrap());
        assert_relative_eq!(kp[2], Vector3::new(0.0, 0.07, 0.0), epsilon = 1e-10);
    }

    #[test]
    fn curling_every_joint_brings_tips_closer() {
        let sk = HandSkeleton::default_hand();
        let rest = sk.keypoints(&HandPose::zeros());
        let mut theta = [0.0; POSE_DIM];
        for j in 0..NUM_POSE_JOINTS {
            theta[3 * j + 1] = PI / 4.0;
        }
        let curled = sk.keypoints(&HandPose::from_slice(&theta).unwrap());
        for f in Finger::ALL {
            let t = tip_index(f);
            assert!(curled[t].norm() < rest[t].norm(), "{f} tip did not move closer");
        }
    }

    #[test]
    fn skeleton_validation() {
        let sk = HandSkeleton::default_hand();
        let json = sk.to_json();
        assert_eq!(HandSkeleton::from_json(&json).unwrap(), sk);

        // cycle / forward reference
        assert!(HandSkeleton::from_parts(&[-1, 2, 1], &[[0.0; 3], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0]], vec![None; 3], vec![]).is_err());
        // zero bone
        assert!(HandSkeleton::from_parts(&[-1, 0], &[[0.0; 3], [0.0; 3]], vec![None; 2], vec![]).is_err());
        // joint out of range
        assert!(matches!(
            HandSkeleton::from_parts(&[-1, 0], &[[0.0; 3], [1.0, 0.0, 0.0]], vec![None, Some(15)], vec![]),
            Err(Error::Dimension { .. })
        ));
        // broken finger layout
        let mut parent: Vec<i64> = serde_json::from_str::<serde_json::Value>(&json).unwrap()["parent"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_i64().unwrap())
            .collect();
        parent[4] = 0;
        let offsets: Vec<[f64; 3]> = (0..21).map(|k| sk.rest_offset(k).into()).collect();
        assert!(HandSkeleton::standard(&parent, &offsets, vec![]).is_err());
    }

    fn arb_pose() -> impl Strategy<Value = HandPose> {
        prop::collection::vec(-1.5f64..1.5, POSE_DIM).prop_map(|v| HandPose::from_slice(&v).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn bone_lengths_are_rigid(pose in arb_pose()) {
            let sk = HandSkeleton::default_hand();
            let kp = sk.keypoints(&pose);
            for k in 1..NUM_KEYPOINTS {
                let p = sk.parent(k).unwrap();
                prop_assert!(((kp[k] - kp[p]).norm() - sk.rest_offset(k).norm()).abs() < 1e-10);
            }
        }

        #[test]
        fn global_rotation_commutes(pose in arb_pose(), rx in -2.0f64..2.0, ry in -2.0f64..2.0, rz in -2.0f64..2.0) {
            let sk = HandSkeleton::default_hand();
            let r = rodrigues(&Vector3::new(rx, ry, rz));
            let rotated_pose: Vec<f64> = (0..NUM_POSE_JOINTS)
                .flat_map(|j| {
                    let v = r * pose.joint(j);
                    [v.x, v.y, v.z]
                })
                .collect();
            let lhs = sk.rotated(&r).keypoints(&HandPose::from_slice(&rotated_pose).unwrap());
            let rhs = sk.keypoints(&pose);
            for k in 0..NUM_KEYPOINTS {
                prop_assert!((lhs[k] - r * rhs[k]).norm() < 1e-12);
            }
        }

        #[test]
        fn keypoints_are_lipschitz_in_pose(pose in arb_pose(), coord in 0usize..POSE_DIM) {
            let sk = HandSkeleton::default_hand();
            let eps = 1e-6;
            let mut bumped = pose.as_slice().to_vec();
            bumped[coord] += eps;
            let a = sk.keypoints(&pose);
            let b = sk.keypoints(&HandPose::from_slice(&bumped).unwrap());
            let bound: f64 = (1..NUM_KEYPOINTS).map(|k| sk.rest_offset(k).norm()).sum();
            for k in 0..NUM_KEYPOINTS {
                prop_assert!((a[k] - b[k]).norm() <= bound * eps * 1.0001);
            }
        }
    }
}
