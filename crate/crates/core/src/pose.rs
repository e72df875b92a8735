//! Skeleton topology and pose containers.
//!
//! 3D poses are in decimeters in a camera-aligned frame: x to the right of
//! the image, y down, z away from the camera. 2D poses are normalized so the
//! heatmap frame spans `[-1, 1]` on both axes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    names: Vec<String>,
    parents: Vec<usize>,
    mirror: Vec<usize>,
    /// Offset from the parent joint in the rest (T) pose, decimeters.
    rest_offsets: Vec<[f64; 3]>,
    /// Largest rotation (radians) a joint may apply to its bone and subtree.
    angle_limits: Vec<f64>,
}

impl Skeleton {
    pub fn new(
        names: Vec<String>,
        parents: Vec<usize>,
        mirror: Vec<usize>,
        rest_offsets: Vec<[f64; 3]>,
        angle_limits: Vec<f64>,
    ) -> Result<Self> {
        let skel = Self {
            names,
            parents,
            mirror,
            rest_offsets,
            angle_limits,
        };
        skel.validate()?;
        Ok(skel)
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.parents.len();
        let bad = |msg: String| Err(Error::InvalidSkeleton(msg));
        if j == 0 {
            return bad("no joints".into());
        }
        if self.names.len() != j
            || self.mirror.len() != j
            || self.rest_offsets.len() != j
            || self.angle_limits.len() != j
        {
            return bad("per-joint tables differ in length".into());
        }
        let roots: Vec<usize> = (0..j).filter(|&i| self.parents[i] == i).collect();
        if roots.len() != 1 {
            return bad(format!("expected exactly one root, found {roots:?}"));
        }
        for start in 0..j {
            let mut cur = start;
            for _ in 0..=j {
                let p = self.parents[cur];
                if p >= j {
                    return bad(format!("joint {cur} has parent {p} out of range"));
                }
                if p == cur {
                    break;
                }
                cur = p;
            }
            if self.parents[cur] != cur {
                return bad(format!("joint {start} does not reach the root"));
            }
        }
        for i in 0..j {
            let m = self.mirror[i];
            if m >= j || self.mirror[m] != i {
                return bad(format!("mirror map is not an involution at joint {i}"));
            }
            if self.parents[m] != self.mirror[self.parents[i]] {
                return bad(format!("mirror of joint {i} does not mirror its parent"));
            }
            let len = |o: [f64; 3]| (o[0] * o[0] + o[1] * o[1] + o[2] * o[2]).sqrt();
            if (len(self.rest_offsets[i]) - len(self.rest_offsets[m])).abs() > 1e-12 {
                return bad(format!("bone of joint {i} and its mirror differ in length"));
            }
            if !(self.angle_limits[i] >= 0.0) {
                return bad(format!("joint {i} has a negative angle limit"));
            }
        }
        Ok(())
    }

    /// The 16-joint body: pelvis root, right leg, left leg, spine, neck,
    /// head, left arm, right arm.
    pub fn default16() -> Self {
        let table: [(&str, usize, usize, [f64; 3], f64); 16] = [
            ("pelvis", 0, 0, [0.0, 0.0, 0.0], 0.35),
            ("r_hip", 0, 4, [-1.3, 0.0, 0.0], 0.05),
            ("r_knee", 1, 5, [0.0, 4.4, 0.0], 0.45),
            ("r_ankle", 2, 6, [0.0, 4.3, 0.0], 0.5),
            ("l_hip", 0, 1, [1.3, 0.0, 0.0], 0.05),
            ("l_knee", 4, 2, [0.0, 4.4, 0.0], 0.45),
            ("l_ankle", 5, 3, [0.0, 4.3, 0.0], 0.5),
            ("spine", 0, 7, [0.0, -2.5, 0.0], 0.2),
            ("neck", 7, 8, [0.0, -2.5, 0.0], 0.2),
            ("head", 8, 9, [0.0, -1.5, 0.0], 0.3),
            ("l_shoulder", 8, 13, [1.6, 0.0, 0.0], 0.1),
            ("l_elbow", 10, 14, [2.8, 0.0, 0.0], 0.8),
            ("l_wrist", 11, 15, [2.5, 0.0, 0.0], 0.9),
            ("r_shoulder", 8, 10, [-1.6, 0.0, 0.0], 0.1),
            ("r_elbow", 13, 11, [-2.8, 0.0, 0.0], 0.8),
            ("r_wrist", 14, 12, [-2.5, 0.0, 0.0], 0.9),
        ];
        Self::new(
            table.iter().map(|r| r.0.to_string()).collect(),
            table.iter().map(|r| r.1).collect(),
            table.iter().map(|r| r.2).collect(),
            table.iter().map(|r| r.3).collect(),
            table.iter().map(|r| r.4).collect(),
        )
        .expect("built-in skeleton is valid")
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    pub fn root(&self) -> usize {
        (0..self.parents.len())
            .find(|&i| self.parents[i] == i)
            .expect("validated")
    }

    pub fn parent(&self, joint: usize) -> usize {
        self.parents[joint]
    }

    pub fn parents(&self) -> &[usize] {
        &self.parents
    }

    pub fn mirror(&self, joint: usize) -> usize {
        self.mirror[joint]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn rest_offset(&self, joint: usize) -> [f64; 3] {
        self.rest_offsets[joint]
    }

    pub fn angle_limit(&self, joint: usize) -> f64 {
        self.angle_limits[joint]
    }

    /// `(child, parent)` for every non-root joint, in joint order.
    pub fn bones(&self) -> Vec<(usize, usize)> {
        (0..self.parents.len())
            .filter(|&j| self.parents[j] != j)
            .map(|j| (j, self.parents[j]))
            .collect()
    }

    /// Bone index pairs `(a, b)` of mirrored bones, indices into [`Self::bones`].
    pub fn bone_pairs(&self) -> Vec<(usize, usize)> {
        let bones = self.bones();
        let index_of = |child: usize| bones.iter().position(|b| b.0 == child);
        bones
            .iter()
            .enumerate()
            .filter_map(|(i, &(child, _))| {
                let m = self.mirror[child];
                (m > child).then(|| (i, index_of(m).expect("mirrored joint has a bone")))
            })
            .collect()
    }

    /// Joints ordered so every parent precedes its children.
    pub fn topological_order(&self) -> Vec<usize> {
        let j = self.parents.len();
        let depth = |mut cur: usize| {
            let mut d = 0;
            while self.parents[cur] != cur {
                cur = self.parents[cur];
                d += 1;
            }
            d
        };
        let mut order: Vec<usize> = (0..j).collect();
        order.sort_by_key(|&i| (depth(i), i));
        order
    }

    /// Mean bone length of the rest pose, decimeters.
    pub fn mean_bone_length(&self) -> f64 {
        let bones = self.bones();
        bones
            .iter()
            .map(|&(c, _)| norm3(self.rest_offsets[c]))
            .sum::<f64>()
            / bones.len().max(1) as f64
    }

    /// Positions of the rest pose with the root at the origin.
    pub fn rest_pose(&self) -> Pose3D {
        let mut joints = vec![[0.0; 3]; self.joint_count()];
        for j in self.topological_order() {
            let p = self.parents[j];
            if p != j {
                joints[j] = add3(joints[p], self.rest_offsets[j]);
            }
        }
        Pose3D { joints }
    }
}

pub(crate) fn add3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub(crate) fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn norm3(a: [f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

pub(crate) fn scale3(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub type Rotation = [[f64; 3]; 3];

pub(crate) fn rotate(r: &Rotation, v: [f64; 3]) -> [f64; 3] {
    [dot3(r[0], v), dot3(r[1], v), dot3(r[2], v)]
}

pub(crate) fn compose(a: &Rotation, b: &Rotation) -> Rotation {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub const IDENTITY: Rotation = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Rotation by `angle` radians about the unit vector `axis` (Rodrigues).
pub fn axis_angle(axis: [f64; 3], angle: f64) -> Rotation {
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    let [x, y, z] = axis;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

/// J x 3 joint positions in decimeters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose3D {
    pub joints: Vec<[f64; 3]>,
}

impl Pose3D {
    pub fn new(joints: Vec<[f64; 3]>) -> Self {
        Self { joints }
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    pub fn centroid(&self) -> [f64; 3] {
        let n = self.joints.len().max(1) as f64;
        let s = self.joints.iter().fold([0.0; 3], |acc, j| add3(acc, *j));
        scale3(s, 1.0 / n)
    }

    pub fn translated(&self, t: [f64; 3]) -> Self {
        Self::new(self.joints.iter().map(|j| add3(*j, t)).collect())
    }

    pub fn rotated(&self, r: &Rotation) -> Self {
        Self::new(self.joints.iter().map(|j| rotate(r, *j)).collect())
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self::new(self.joints.iter().map(|j| scale3(*j, s)).collect())
    }

    /// Translates so `joint` sits at the origin.
    pub fn aligned_to(&self, joint: usize) -> Self {
        let o = self.joints[joint];
        self.translated(scale3(o, -1.0))
    }

    /// Reflection across the sagittal (x = 0) plane with left and right
    /// joints exchanged, so the result is again a pose of `skel`.
    pub fn mirrored(&self, skel: &Skeleton) -> Self {
        let joints = (0..self.joints.len())
            .map(|j| {
                let [x, y, z] = self.joints[skel.mirror(j)];
                [-x, y, z]
            })
            .collect();
        Self::new(joints)
    }

    pub fn to_vector(&self) -> PoseVector {
        PoseVector(self.joints.iter().flatten().copied().collect())
    }

    pub fn is_finite(&self) -> bool {
        self.joints.iter().flatten().all(|v| v.is_finite())
    }
}

/// J x 2 normalized image coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose2D {
    pub joints: Vec<[f64; 2]>,
}

/// Flat joint-major `(x, y, z)` layout of a [`Pose3D`]; the diffusion state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseVector(pub Vec<f64>);

impl PoseVector {
    pub fn to_pose(&self) -> Result<Pose3D> {
        if self.0.len() % 3 != 0 {
            return Err(Error::Format {
                what: "pose vector",
                detail: format!("length {} is not a multiple of 3", self.0.len()),
            });
        }
        Ok(Pose3D::new(
            self.0.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        ))
    }
}

pub fn mean_center(pose: &Pose3D) -> Pose3D {
    pose.translated(scale3(pose.centroid(), -1.0))
}

/// Length of every bone in [`Skeleton::bones`] order, decimeters.
pub fn bone_lengths(pose: &Pose3D, skel: &Skeleton) -> Result<Vec<f64>> {
    check_joint_count(pose, skel)?;
    Ok(skel
        .bones()
        .iter()
        .map(|&(c, p)| norm3(sub3(pose.joints[c], pose.joints[p])))
        .collect())
}

pub(crate) fn check_joint_count(pose: &Pose3D, skel: &Skeleton) -> Result<()> {
    if pose.joint_count() != skel.joint_count() {
        return Err(Error::JointCount {
            expected: skel.joint_count(),
            actual: pose.joint_count(),
        });
    }
    Ok(())
}
