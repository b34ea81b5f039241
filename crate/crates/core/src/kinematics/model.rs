use std::collections::{BTreeMap, HashMap};

use nalgebra::{DVector, Isometry3, Translation3, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use super::KinematicsError;

pub const LANDMARK_NAMES: [&str; 6] = [
    "pelvis",
    "left_shoulder",
    "right_shoulder",
    "left_wrist",
    "right_wrist",
    "head",
];

pub const DOF_GROUPS: [&str; 4] = ["arm_left", "arm_right", "hand_left", "hand_right"];

// ---------------------------------------------------------------------------
// File schema
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotModelFile {
    pub name: String,
    pub joints: Vec<JointSpec>,
    pub links: Vec<LinkSpec>,
    pub landmarks: BTreeMap<String, String>,
    pub fingertips: BTreeMap<String, Vec<String>>,
    pub dof_layout: Vec<DofGroupSpec>,
    #[serde(default)]
    pub hand_mapping: Option<HandMappingSpec>,
    #[serde(default)]
    pub bone_map: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OriginSpec {
    pub p: [f64; 3],
    pub q: [f64; 4],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointKind {
    Revolute,
    Fixed,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MimicSpec {
    pub joint: String,
    pub multiplier: f64,
    #[serde(default)]
    pub offset: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub kind: JointKind,
    pub parent: String,
    pub child: String,
    pub origin: OriginSpec,
    #[serde(default)]
    pub axis: Option<[f64; 3]>,
    #[serde(default)]
    pub limits: Option<[f64; 2]>,
    #[serde(default)]
    pub mimic: Option<MimicSpec>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub name: String,
    pub length: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DofGroupSpec {
    pub group: String,
    pub joints: Vec<String>,
}

/// Side-agnostic hand description; joint and link names are resolved by
/// prefixing `left_` or `right_`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HandMappingSpec {
    pub base: String,
    pub palm: String,
    pub fingers: Vec<String>,
    pub distal_lengths: Vec<f64>,
    pub glove: Vec<AffineEntry>,
    pub exo_glove: Vec<AffineEntry>,
    pub euler: Vec<EulerEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineEntry {
    pub joint: String,
    pub source: usize,
    pub a: f64,
    pub b: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EulerAxis {
    X,
    Y,
    Z,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EulerEntry {
    pub joint: String,
    pub source: usize,
    pub axis: EulerAxis,
    pub a: f64,
    pub b: f64,
}

// ---------------------------------------------------------------------------
// Runtime model
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum JointDrive {
    Fixed,
    Actuated { dof: usize },
    Mimic { dof: usize, multiplier: f64, offset: f64 },
}

#[derive(Clone, Debug)]
pub struct Joint {
    pub name: String,
    pub parent: usize,
    pub child: usize,
    pub origin: Isometry3<f64>,
    pub axis: Unit<Vector3<f64>>,
    pub drive: JointDrive,
}

impl Joint {
    pub(crate) fn value(&self, q: &DVector<f64>) -> f64 {
        match self.drive {
            JointDrive::Fixed => 0.0,
            JointDrive::Actuated { dof } => q[dof],
            JointDrive::Mimic {
                dof,
                multiplier,
                offset,
            } => multiplier * q[dof] + offset,
        }
    }

    pub(crate) fn local_motion(&self, value: f64) -> Isometry3<f64> {
        match self.drive {
            JointDrive::Fixed => self.origin,
            _ => self.origin * UnitQuaternion::from_axis_angle(&self.axis, value),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dof {
    pub name: String,
    pub joint: usize,
    pub limits: [f64; 2],
    pub group: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Left, Side::Right];

    pub fn prefix(self) -> &'static str {
        match self {
            Side::Left => "left_",
            Side::Right => "right_",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }

    pub fn arm_group(self) -> &'static str {
        match self {
            Side::Left => "arm_left",
            Side::Right => "arm_right",
        }
    }

    pub fn hand_group(self) -> &'static str {
        match self {
            Side::Left => "hand_left",
            Side::Right => "hand_right",
        }
    }
}

/// An immutable kinematic tree rooted at the pelvis.
#[derive(Clone, Debug)]
pub struct RobotModel {
    pub name: String,
    links: Vec<String>,
    link_lengths: Vec<f64>,
    link_index: HashMap<String, usize>,
    /// Joints in topological order (parent link already placed).
    joints: Vec<Joint>,
    /// Index into `joints` of the joint whose child is the link; `None` for the root.
    parent_joint: Vec<Option<usize>>,
    dofs: Vec<Dof>,
    groups: Vec<(String, std::ops::Range<usize>)>,
    landmarks: BTreeMap<String, usize>,
    fingertips: BTreeMap<String, Vec<usize>>,
    pub hand_mapping: Option<HandMappingSpec>,
    pub bone_map: BTreeMap<String, String>,
    source: RobotModelFile,
}

/// Full robot command: every DoF (arms then hands) plus its timestamp.
pub type JointCommand = JointState;

/// Joint positions ordered by the model's DoF layout.
#[derive(Clone, Debug, PartialEq)]
pub struct JointState {
    pub q: DVector<f64>,
    pub timestamp: f64,
}

impl JointState {
    pub fn new(q: DVector<f64>, timestamp: f64) -> Self {
        JointState { q, timestamp }
    }

    pub fn zeros(n: usize) -> Self {
        JointState {
            q: DVector::zeros(n),
            timestamp: 0.0,
        }
    }
}

fn origin_isometry(o: &OriginSpec, what: &str) -> Result<Isometry3<f64>, KinematicsError> {
    let q = nalgebra::Quaternion::new(o.q[0], o.q[1], o.q[2], o.q[3]);
    let n = q.norm();
    if !n.is_finite() || (n - 1.0).abs() > 1e-6 || o.p.iter().any(|v| !v.is_finite()) {
        return Err(KinematicsError::InvalidModel(format!(
            "origin of {what} is not a finite unit-quaternion transform"
        )));
    }
    Ok(Isometry3::from_parts(
        Translation3::new(o.p[0], o.p[1], o.p[2]),
        UnitQuaternion::from_quaternion(q),
    ))
}

impl RobotModel {
    pub fn from_json(text: &str) -> Result<Self, KinematicsError> {
        let file: RobotModelFile =
            serde_json::from_str(text).map_err(|e| KinematicsError::InvalidModel(e.to_string()))?;
        Self::from_file(file)
    }

    pub fn from_file(file: RobotModelFile) -> Result<Self, KinematicsError> {
        let invalid = |m: String| KinematicsError::InvalidModel(m);

        let mut link_index = HashMap::new();
        let mut links = Vec::new();
        let mut link_lengths = Vec::new();
        for l in &file.links {
            if !(l.length.is_finite() && l.length >= 0.0) {
                return Err(invalid(format!("link {} has invalid length", l.name)));
            }
            if link_index.insert(l.name.clone(), links.len()).is_some() {
                return Err(invalid(format!("duplicate link {}", l.name)));
            }
            links.push(l.name.clone());
            link_lengths.push(l.length);
        }
        let root = *link_index
            .get("pelvis")
            .ok_or_else(|| invalid("missing root link pelvis".into()))?;

        // Every link except the root needs exactly one parent joint.
        let mut parent_of_link: Vec<Option<usize>> = vec![None; links.len()];
        let mut joint_names = HashMap::new();
        for (i, j) in file.joints.iter().enumerate() {
            if joint_names.insert(j.name.clone(), i).is_some() {
                return Err(invalid(format!("duplicate joint {}", j.name)));
            }
            let child = *link_index
                .get(&j.child)
                .ok_or_else(|| invalid(format!("joint {} child {} unknown", j.name, j.child)))?;
            if !link_index.contains_key(&j.parent) {
                return Err(invalid(format!("joint {} parent {} unknown", j.name, j.parent)));
            }
            if child == root {
                return Err(invalid("pelvis cannot be a child link".into()));
            }
            if parent_of_link[child].replace(i).is_some() {
                return Err(invalid(format!("link {} has more than one parent", j.child)));
            }
        }
        for (li, p) in parent_of_link.iter().enumerate() {
            if li != root && p.is_none() {
                return Err(invalid(format!("link {} is not attached to the tree", links[li])));
            }
        }

        // DoF layout: fixed group order, contiguous indices.
        if file.dof_layout.len() != DOF_GROUPS.len()
            || file
                .dof_layout
                .iter()
                .zip(DOF_GROUPS.iter())
                .any(|(g, want)| g.group != *want)
        {
            return Err(invalid(format!(
                "dof_layout must list groups {:?} in order",
                DOF_GROUPS
            )));
        }
        let mut dof_of_joint: HashMap<String, (usize, usize)> = HashMap::new();
        let mut groups = Vec::new();
        let mut n = 0;
        for (gi, g) in file.dof_layout.iter().enumerate() {
            let start = n;
            for jn in &g.joints {
                if dof_of_joint.insert(jn.clone(), (n, gi)).is_some() {
                    return Err(invalid(format!("joint {jn} listed twice in dof_layout")));
                }
                n += 1;
            }
            groups.push((g.group.clone(), start..n));
        }

        // Topological ordering from the root.
        let mut order = Vec::with_capacity(file.joints.len());
        let mut placed = vec![false; links.len()];
        placed[root] = true;
        let mut progress = true;
        let mut remaining: Vec<usize> = (0..file.joints.len()).collect();
        while !remaining.is_empty() && progress {
            progress = false;
            remaining.retain(|&ji| {
                let j = &file.joints[ji];
                let p = link_index[&j.parent];
                if placed[p] {
                    placed[link_index[&j.child]] = true;
                    order.push(ji);
                    progress = true;
                    false
                } else {
                    true
                }
            });
        }
        if !remaining.is_empty() {
            return Err(invalid("joint graph contains a cycle".into()));
        }

        let mut joints = Vec::with_capacity(order.len());
        let mut new_index = vec![0usize; file.joints.len()];
        let mut dofs: Vec<Option<Dof>> = vec![None; n];
        for (k, &ji) in order.iter().enumerate() {
            new_index[ji] = k;
        }
        for &ji in &order {
            let j = &file.joints[ji];
            let origin = origin_isometry(&j.origin, &j.name)?;
            let (axis, drive) = match j.kind {
                JointKind::Fixed => {
                    if dof_of_joint.contains_key(&j.name) {
                        return Err(invalid(format!("fixed joint {} in dof_layout", j.name)));
                    }
                    (Vector3::z_axis(), JointDrive::Fixed)
                }
                JointKind::Revolute => {
                    let a = j
                        .axis
                        .ok_or_else(|| invalid(format!("revolute joint {} lacks axis", j.name)))?;
                    let a = Vector3::new(a[0], a[1], a[2]);
                    if !((a.norm() - 1.0).abs() < 1e-9) {
                        return Err(invalid(format!("axis of {} is not unit length", j.name)));
                    }
                    let lim = j
                        .limits
                        .ok_or_else(|| invalid(format!("revolute joint {} lacks limits", j.name)))?;
                    if !(lim[0] < lim[1]) || lim[0] > 0.0 || lim[1] < 0.0 {
                        return Err(invalid(format!(
                            "limits of {} must satisfy lo < hi and contain 0",
                            j.name
                        )));
                    }
                    let drive = match &j.mimic {
                        Some(m) => {
                            if dof_of_joint.contains_key(&j.name) {
                                return Err(invalid(format!(
                                    "mimic joint {} cannot be in dof_layout",
                                    j.name
                                )));
                            }
                            let (dof, _) = *dof_of_joint.get(&m.joint).ok_or_else(|| {
                                invalid(format!("mimic target {} is not a DoF", m.joint))
                            })?;
                            JointDrive::Mimic {
                                dof,
                                multiplier: m.multiplier,
                                offset: m.offset,
                            }
                        }
                        None => {
                            let (dof, group) = *dof_of_joint.get(&j.name).ok_or_else(|| {
                                invalid(format!("revolute joint {} missing from dof_layout", j.name))
                            })?;
                            dofs[dof] = Some(Dof {
                                name: j.name.clone(),
                                joint: joints.len(),
                                limits: lim,
                                group,
                            });
                            JointDrive::Actuated { dof }
                        }
                    };
                    (Unit::new_normalize(a), drive)
                }
            };
            joints.push(Joint {
                name: j.name.clone(),
                parent: link_index[&j.parent],
                child: link_index[&j.child],
                origin,
                axis,
                drive,
            });
        }
        let dofs: Vec<Dof> = dofs
            .into_iter()
            .enumerate()
            .map(|(i, d)| d.ok_or_else(|| invalid(format!("dof_layout entry {i} is not a revolute joint"))))
            .collect::<Result<_, _>>()?;
        let parent_joint = parent_of_link
            .iter()
            .map(|p| p.map(|ji| new_index[ji]))
            .collect();

        // Landmarks: exactly the six canonical names.
        let mut landmarks = BTreeMap::new();
        if file.landmarks.len() != LANDMARK_NAMES.len() {
            return Err(invalid(format!(
                "landmarks must be exactly {:?}",
                LANDMARK_NAMES
            )));
        }
        for name in LANDMARK_NAMES {
            let link = file
                .landmarks
                .get(name)
                .ok_or_else(|| invalid(format!("landmark {name} missing")))?;
            let li = *link_index
                .get(link)
                .ok_or_else(|| invalid(format!("landmark {name} refers to unknown link {link}")))?;
            landmarks.insert(name.to_string(), li);
        }
        if landmarks["pelvis"] != root {
            return Err(invalid("pelvis landmark must be the root link".into()));
        }

        let mut fingertips = BTreeMap::new();
        if file.fingertips.len() != 2 {
            return Err(invalid("fingertips must list exactly left and right".into()));
        }
        let mut tip_count = None;
        for side in ["left", "right"] {
            let tips = file
                .fingertips
                .get(side)
                .ok_or_else(|| invalid(format!("fingertips.{side} missing")))?;
            if tips.len() != 5 && tips.len() != 3 {
                return Err(invalid(format!("fingertips.{side} must have 5 or 3 entries")));
            }
            if *tip_count.get_or_insert(tips.len()) != tips.len() {
                return Err(invalid("both hands must have the same finger count".into()));
            }
            let idx = tips
                .iter()
                .map(|t| {
                    link_index
                        .get(t)
                        .copied()
                        .ok_or_else(|| invalid(format!("fingertip {t} unknown")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            fingertips.insert(side.to_string(), idx);
        }
        if let Some(h) = &file.hand_mapping {
            if h.fingers.len() != tip_count.unwrap_or(0) || h.distal_lengths.len() != h.fingers.len() {
                return Err(invalid("hand_mapping finger list disagrees with fingertips".into()));
            }
        }
        for link in file.bone_map.values() {
            if !link_index.contains_key(link) {
                return Err(invalid(format!("bone_map refers to unknown link {link}")));
            }
        }

        Ok(RobotModel {
            name: file.name.clone(),
            links,
            link_lengths,
            link_index,
            joints,
            parent_joint,
            dofs,
            groups,
            landmarks,
            fingertips,
            hand_mapping: file.hand_mapping.clone(),
            bone_map: file.bone_map.clone(),
            source: file,
        })
    }

    pub fn to_file(&self) -> &RobotModelFile {
        &self.source
    }

    pub fn name(&self) -> &str {
        &self.source.name
    }

    pub fn dof_count(&self) -> usize {
        self.dofs.len()
    }

    pub fn dofs(&self) -> &[Dof] {
        &self.dofs
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn dof_index(&self, joint: &str) -> Option<usize> {
        self.dofs.iter().position(|d| d.name == joint)
    }

    pub fn group_range(&self, group: &str) -> Option<std::ops::Range<usize>> {
        self.groups
            .iter()
            .find(|(g, _)| g == group)
            .map(|(_, r)| r.clone())
    }

    pub fn lower_limits(&self) -> DVector<f64> {
        DVector::from_iterator(self.dofs.len(), self.dofs.iter().map(|d| d.limits[0]))
    }

    pub fn upper_limits(&self) -> DVector<f64> {
        DVector::from_iterator(self.dofs.len(), self.dofs.iter().map(|d| d.limits[1]))
    }

    pub fn clamp_to_limits(&self, q: &mut DVector<f64>) {
        for (v, d) in q.iter_mut().zip(&self.dofs) {
            *v = v.clamp(d.limits[0], d.limits[1]);
        }
    }

    pub fn home(&self) -> JointState {
        JointState::zeros(self.dof_count())
    }

    pub fn link_names(&self) -> &[String] {
        &self.links
    }

    pub fn link(&self, name: &str) -> Result<usize, KinematicsError> {
        self.link_index
            .get(name)
            .copied()
            .ok_or_else(|| KinematicsError::UnknownFrame(name.to_string()))
    }

    pub fn link_length(&self, name: &str) -> Option<f64> {
        self.link_index.get(name).map(|&i| self.link_lengths[i])
    }

    pub fn landmark_link(&self, landmark: &str) -> Option<usize> {
        self.landmarks.get(landmark).copied()
    }

    pub fn landmark_names(&self) -> impl Iterator<Item = &String> {
        self.landmarks.keys()
    }

    pub fn fingertip_links(&self, side: Side) -> &[usize] {
        &self.fingertips[side.name()]
    }

    pub fn finger_count(&self) -> usize {
        self.fingertips["left"].len()
    }

    /// Check the state against the model: length and limits (with 1e-9 slack).
    pub fn validate_state(&self, state: &JointState) -> Result<(), KinematicsError> {
        if state.q.len() != self.dof_count() {
            return Err(KinematicsError::DofLengthMismatch {
                expected: self.dof_count(),
                got: state.q.len(),
            });
        }
        for (i, (v, d)) in state.q.iter().zip(&self.dofs).enumerate() {
            if !v.is_finite() || *v < d.limits[0] - 1e-9 || *v > d.limits[1] + 1e-9 {
                return Err(KinematicsError::OutOfLimits {
                    dof: i,
                    value: *v,
                    limits: d.limits,
                });
            }
        }
        Ok(())
    }

    fn check_len(&self, q: &DVector<f64>) -> Result<(), KinematicsError> {
        if q.len() != self.dof_count() {
            return Err(KinematicsError::DofLengthMismatch {
                expected: self.dof_count(),
                got: q.len(),
            });
        }
        Ok(())
    }

    /// World (pelvis) pose of every link, indexed like [`RobotModel::link_names`].
    pub fn link_poses(&self, q: &DVector<f64>) -> Result<Vec<Isometry3<f64>>, KinematicsError> {
        self.check_len(q)?;
        let mut poses = vec![Isometry3::identity(); self.links.len()];
        for j in &self.joints {
            poses[j.child] = poses[j.parent] * j.local_motion(j.value(q));
        }
        Ok(poses)
    }

    /// Joints from the root to `link`, root first.
    pub fn chain_to(&self, link: usize) -> Vec<usize> {
        let mut chain = Vec::new();
        let mut cur = link;
        while let Some(ji) = self.parent_joint[cur] {
            chain.push(ji);
            cur = self.joints[ji].parent;
        }
        chain.reverse();
        chain
    }

    /// DoFs (actuated or mimicked) that move `link`.
    pub fn chain_dofs(&self, link: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .chain_to(link)
            .into_iter()
            .filter_map(|ji| match self.joints[ji].drive {
                JointDrive::Fixed => None,
                JointDrive::Actuated { dof } | JointDrive::Mimic { dof, .. } => Some(dof),
            })
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    pub fn link_pose(&self, q: &DVector<f64>, link: usize) -> Result<Isometry3<f64>, KinematicsError> {
        self.check_len(q)?;
        let mut pose = Isometry3::identity();
        for ji in self.chain_to(link) {
            let j = &self.joints[ji];
            pose *= j.local_motion(j.value(q));
        }
        Ok(pose)
    }
}
