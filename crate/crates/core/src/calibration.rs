//! Operator calibration: fit a linear bone-length skeleton to robot
//! landmarks under the T-pose, then derive per-link and per-finger scales.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{SVector, Unit, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{forward_kinematics, KinematicsError, RobotModel, LANDMARK_NAMES};

pub const SHAPE_DIM: usize = 10;
pub type Beta = SVector<f64, SHAPE_DIM>;

/// Bones shorter than this are treated as collapsed.
pub const MIN_BONE_LENGTH: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("bone `{bone}` collapses to {length} m")]
    DegenerateBone { bone: String, length: f64 },
    #[error("no robot link corresponds to bone `{0}`")]
    MissingCorrespondence(String),
    #[error("no scale for bone `{0}`")]
    MissingScale(String),
    #[error("non-positive length {0}")]
    NonPositiveLength(f64),
    #[error("landmark set: {0}")]
    InvalidLandmarks(String),
    #[error("invalid skeleton: {0}")]
    InvalidSkeleton(String),
    #[error("scale {0} outside (0.1, 10)")]
    ScaleOutOfRange(f64),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error("profile i/o: {0}")]
    Io(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bone {
    pub name: String,
    pub parent: Option<usize>,
    pub direction: Unit<Vector3<f64>>,
    pub rest_length: f64,
    /// Length sensitivity, meters per unit of each shape parameter.
    pub basis: Beta,
}

/// Where a landmark sits on the skeleton: the root, or the far end of a bone.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Anchor {
    Root,
    BoneEnd(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonModel {
    bones: Vec<Bone>,
    landmarks: BTreeMap<String, Anchor>,
    search_box: f64,
}

impl SkeletonModel {
    /// Bones must be listed parents-first. `landmarks` maps each of the six
    /// canonical names to the root (pelvis) or to the end of a named bone.
    pub fn new(
        bones: Vec<Bone>,
        landmarks: &[(&str, Option<&str>)],
        search_box: f64,
    ) -> Result<Self, CalibrationError> {
        let bad = |m: String| Err(CalibrationError::InvalidSkeleton(m));
        for (i, b) in bones.iter().enumerate() {
            if let Some(p) = b.parent {
                if p >= i {
                    return bad(format!("bone {} listed before its parent", b.name));
                }
            }
            if bones[..i].iter().any(|o| o.name == b.name) {
                return bad(format!("duplicate bone {}", b.name));
            }
            // Worst case over the search box.
            let shortest = b.rest_length - search_box * b.basis.abs().sum();
            if shortest <= MIN_BONE_LENGTH {
                return bad(format!("bone {} can shrink to {shortest:.4} m within the search box", b.name));
            }
        }
        let mut map = BTreeMap::new();
        for (name, bone) in landmarks {
            let anchor = match bone {
                None => Anchor::Root,
                Some(b) => match bones.iter().position(|x| x.name == *b) {
                    Some(i) => Anchor::BoneEnd(i),
                    None => return bad(format!("landmark {name} refers to unknown bone {b}")),
                },
            };
            map.insert(name.to_string(), anchor);
        }
        for name in LANDMARK_NAMES {
            if !map.contains_key(name) {
                return bad(format!("landmark {name} missing"));
            }
        }
        if map.len() != LANDMARK_NAMES.len() {
            return bad("unexpected landmark names".into());
        }
        if map["pelvis"] != Anchor::Root {
            return bad("pelvis landmark must be the root".into());
        }
        Ok(SkeletonModel { bones, landmarks: map, search_box })
    }

    /// Eight-bone upper-body stick figure in the T-pose with a full-rank
    /// 8×10 shape basis (stature, torso, arm length, shoulder breadth,
    /// neck, upper/fore ratio and a few asymmetries).
    pub fn standard() -> Self {
        let up = Vector3::z_axis();
        let left = Vector3::y_axis();
        let right = -Vector3::y_axis();
        let row = |v: [f64; SHAPE_DIM]| Beta::from_column_slice(&v);
        let bone = |name: &str, parent, dir, len, basis| Bone {
            name: name.to_string(),
            parent,
            direction: dir,
            rest_length: len,
            basis,
        };
        let bones = vec![
            bone("spine", None, up, 0.48, row([0.0192, 0.02, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -0.008])),
            bone("neck", Some(0), up, 0.24, row([0.0096, 0.005, 0.0, 0.0, 0.012, 0.0, 0.0, 0.0, 0.0, 0.0])),
            bone("l_clavicle", Some(0), left, 0.18, row([0.0072, 0.0, 0.0, 0.01, 0.0, 0.0, 0.0, 0.005, 0.0, 0.004])),
            bone("r_clavicle", Some(0), right, 0.18, row([0.0072, 0.0, 0.0, 0.01, 0.0, 0.0, 0.0, -0.005, 0.0, 0.004])),
            bone("l_upper_arm", Some(2), left, 0.28, row([0.0112, 0.0, 0.012, 0.0, 0.0, 0.01, 0.006, 0.0, 0.005, 0.0])),
            bone("r_upper_arm", Some(3), right, 0.28, row([0.0112, 0.0, 0.012, 0.0, 0.0, 0.01, -0.006, 0.0, -0.005, 0.0])),
            bone("l_forearm", Some(4), left, 0.25, row([0.01, 0.0, 0.011, 0.0, 0.0, -0.01, 0.006, 0.0, 0.0, 0.0])),
            bone("r_forearm", Some(5), right, 0.25, row([0.01, 0.0, 0.011, 0.0, 0.0, -0.01, -0.006, 0.0, 0.0, 0.0])),
        ];
        SkeletonModel::new(
            bones,
            &[
                ("pelvis", None),
                ("head", Some("neck")),
                ("left_shoulder", Some("l_clavicle")),
                ("right_shoulder", Some("r_clavicle")),
                ("left_wrist", Some("l_forearm")),
                ("right_wrist", Some("r_forearm")),
            ],
            5.0,
        )
        .expect("standard skeleton is valid")
    }

    pub fn bones(&self) -> &[Bone] {
        &self.bones
    }

    pub fn bone_index(&self, name: &str) -> Option<usize> {
        self.bones.iter().position(|b| b.name == name)
    }

    pub fn search_box(&self) -> f64 {
        self.search_box
    }

    pub fn effective_length(&self, bone: usize, beta: &Beta) -> f64 {
        let b = &self.bones[bone];
        b.rest_length + b.basis.dot(beta)
    }

    pub fn effective_lengths(&self, beta: &Beta) -> Result<Vec<f64>, CalibrationError> {
        (0..self.bones.len())
            .map(|i| {
                let l = self.effective_length(i, beta);
                if l <= MIN_BONE_LENGTH || !l.is_finite() {
                    Err(CalibrationError::DegenerateBone { bone: self.bones[i].name.clone(), length: l })
                } else {
                    Ok(l)
                }
            })
            .collect()
    }

    fn bone_ends(&self, lengths: &[f64]) -> Vec<Vector3<f64>> {
        let mut ends: Vec<Vector3<f64>> = Vec::with_capacity(self.bones.len());
        for (i, b) in self.bones.iter().enumerate() {
            let start = b.parent.map(|p| ends[p]).unwrap_or_else(Vector3::zeros);
            ends.push(start + b.direction.into_inner() * lengths[i]);
        }
        ends
    }

    /// Bones whose length moves each landmark: the chain from the root.
    fn chain(&self, anchor: &Anchor) -> Vec<usize> {
        let mut out = Vec::new();
        let mut cur = match anchor {
            Anchor::Root => None,
            Anchor::BoneEnd(i) => Some(*i),
        };
        while let Some(i) = cur {
            out.push(i);
            cur = self.bones[i].parent;
        }
        out
    }
}

/// Six named landmark positions in the pelvis frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, [f64; 3]>", into = "BTreeMap<String, [f64; 3]>")]
pub struct LandmarkSet {
    positions: BTreeMap<String, Vector3<f64>>,
}

impl LandmarkSet {
    pub fn new(positions: BTreeMap<String, Vector3<f64>>) -> Result<Self, CalibrationError> {
        let bad = |m: String| Err(CalibrationError::InvalidLandmarks(m));
        if positions.len() != LANDMARK_NAMES.len() || LANDMARK_NAMES.iter().any(|n| !positions.contains_key(*n)) {
            return bad(format!("expected exactly {LANDMARK_NAMES:?}"));
        }
        if positions.values().any(|p| p.iter().any(|v| !v.is_finite())) {
            return bad("non-finite position".into());
        }
        if positions["pelvis"].norm() > 1e-9 {
            return bad("pelvis must be at the origin".into());
        }
        Ok(LandmarkSet { positions })
    }

    /// Landmarks of a robot at its home (T-pose) configuration.
    pub fn from_robot(robot: &RobotModel) -> Result<Self, CalibrationError> {
        let home = robot.home();
        let mut positions = BTreeMap::new();
        for name in LANDMARK_NAMES {
            let link = robot
                .landmark_link(name)
                .ok_or_else(|| CalibrationError::InvalidLandmarks(format!("robot lacks {name}")))?;
            let link_name = robot.link_names()[link].clone();
            let t = forward_kinematics(robot, &home, &link_name)?;
            positions.insert(name.to_string(), t.translation);
        }
        LandmarkSet::new(positions)
    }

    pub fn get(&self, name: &str) -> Option<&Vector3<f64>> {
        self.positions.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vector3<f64>)> {
        self.positions.iter()
    }

    /// Root-mean-square distance over the six landmarks.
    pub fn rms_distance(&self, other: &LandmarkSet) -> f64 {
        let sum: f64 = self
            .positions
            .iter()
            .map(|(k, p)| (p - other.positions[k]).norm_squared())
            .sum();
        (sum / self.positions.len() as f64).sqrt()
    }

    fn squared_error(&self, other: &LandmarkSet) -> f64 {
        self.positions
            .iter()
            .map(|(k, p)| (p - other.positions[k]).norm_squared())
            .sum()
    }
}

impl TryFrom<BTreeMap<String, [f64; 3]>> for LandmarkSet {
    type Error = CalibrationError;
    fn try_from(m: BTreeMap<String, [f64; 3]>) -> Result<Self, Self::Error> {
        LandmarkSet::new(m.into_iter().map(|(k, v)| (k, Vector3::from(v))).collect())
    }
}

impl From<LandmarkSet> for BTreeMap<String, [f64; 3]> {
    fn from(l: LandmarkSet) -> Self {
        l.positions.into_iter().map(|(k, v)| (k, [v.x, v.y, v.z])).collect()
    }
}

pub fn landmark_forward(skel: &SkeletonModel, beta: &Beta) -> Result<LandmarkSet, CalibrationError> {
    let lengths = skel.effective_lengths(beta)?;
    let ends = skel.bone_ends(&lengths);
    let positions = skel
        .landmarks
        .iter()
        .map(|(name, a)| {
            let p = match a {
                Anchor::Root => Vector3::zeros(),
                Anchor::BoneEnd(i) => ends[*i],
            };
            (name.clone(), p)
        })
        .collect();
    Ok(LandmarkSet { positions })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub max_iters: usize,
    /// Residual (m²) at which the fit stops as converged.
    pub accept: f64,
    /// Minimum per-iteration decrease that counts as progress.
    pub tol: f64,
    pub patience: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig { max_iters: 2000, accept: 1e-6, tol: 1e-14, patience: 50 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub beta: Beta,
    /// Summed squared landmark error, m².
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after each accepted iteration, starting with the initial value.
    pub history: Vec<f64>,
}

fn objective_and_gradient(
    skel: &SkeletonModel,
    target: &LandmarkSet,
    beta: &Beta,
) -> Result<(f64, Beta), CalibrationError> {
    let current = landmark_forward(skel, beta)?;
    let mut grad = Beta::zeros();
    for (name, anchor) in &skel.landmarks {
        let r = current.positions[name] - target.positions[name];
        // d p / d beta = sum over chain of dir_b * basis_b^T
        for b in skel.chain(anchor) {
            let bone = &skel.bones[b];
            grad += bone.basis * (2.0 * r.dot(&bone.direction));
        }
    }
    Ok((current.squared_error(target), grad))
}

fn project(beta: Beta, bound: f64) -> Beta {
    beta.map(|v| v.clamp(-bound, bound))
}

/// Box-projected gradient descent from `beta = 0` with Barzilai-Borwein
/// step proposals and backtracking, so every accepted iterate decreases the
/// objective.
pub fn fit_shape(
    skel: &SkeletonModel,
    target: &LandmarkSet,
    cfg: &FitConfig,
) -> Result<FitResult, CalibrationError> {
    let bound = skel.search_box;
    let mut beta = Beta::zeros();
    let (mut f, mut g) = objective_and_gradient(skel, target, &beta)?;
    let mut history = vec![f];
    let mut step = 1.0;
    let mut stalled = 0;
    let mut iterations = 0;
    while iterations < cfg.max_iters && f > cfg.accept && g.norm() > 0.0 {
        iterations += 1;
        let mut t = step;
        let mut accepted = None;
        for _ in 0..60 {
            let cand = project(beta - g * t, bound);
            let d = cand - beta;
            if d.norm() == 0.0 {
                break;
            }
            let (fc, gc) = objective_and_gradient(skel, target, &cand)?;
            if fc <= f - 1e-4 * g.dot(&(-d)).max(0.0) && fc < f {
                accepted = Some((cand, fc, gc));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, fc, gc)) = accepted else { break };
        let s = cand - beta;
        let y = gc - g;
        let sy = s.dot(&y);
        step = if sy > 1e-300 { (s.norm_squared() / sy).clamp(1e-6, 1e6) } else { t * 2.0 };
        if f - fc < cfg.tol {
            stalled += 1;
        } else {
            stalled = 0;
        }
        beta = cand;
        f = fc;
        g = gc;
        history.push(f);
        if stalled >= cfg.patience {
            break;
        }
    }
    Ok(FitResult { beta, residual: f, iterations, converged: f <= cfg.accept, history })
}

/// Per-bone and per-finger ratios of robot size to operator size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleParams {
    pub link_scales: BTreeMap<String, f64>,
    pub finger_scales: FingerScales,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FingerScales {
    pub left: [f64; 5],
    pub right: [f64; 5],
}

impl Default for FingerScales {
    fn default() -> Self {
        FingerScales { left: [1.0; 5], right: [1.0; 5] }
    }
}

fn check_scale(s: f64) -> Result<f64, CalibrationError> {
    if s.is_finite() && s > 0.1 && s < 10.0 {
        Ok(s)
    } else {
        Err(CalibrationError::ScaleOutOfRange(s))
    }
}

impl ScaleParams {
    pub fn identity(skel: &SkeletonModel) -> Self {
        ScaleParams {
            link_scales: skel.bones.iter().map(|b| (b.name.clone(), 1.0)).collect(),
            finger_scales: FingerScales::default(),
        }
    }

    pub fn validate(&self) -> Result<(), CalibrationError> {
        for s in self.link_scales.values().chain(&self.finger_scales.left).chain(&self.finger_scales.right) {
            check_scale(*s)?;
        }
        Ok(())
    }
}

/// `robot link length / human bone length` for every bone in the robot's
/// bone map. Finger scales are left at one.
pub fn derive_link_scales(
    skel: &SkeletonModel,
    beta: &Beta,
    robot: &RobotModel,
) -> Result<ScaleParams, CalibrationError> {
    let lengths = skel.effective_lengths(beta)?;
    let mut link_scales = BTreeMap::new();
    for (i, bone) in skel.bones.iter().enumerate() {
        let link = robot
            .bone_map
            .get(&bone.name)
            .ok_or_else(|| CalibrationError::MissingCorrespondence(bone.name.clone()))?;
        let robot_len = robot
            .link_length(link)
            .ok_or_else(|| CalibrationError::MissingCorrespondence(bone.name.clone()))?;
        if robot_len <= MIN_BONE_LENGTH {
            return Err(CalibrationError::DegenerateBone { bone: link.clone(), length: robot_len });
        }
        link_scales.insert(bone.name.clone(), check_scale(robot_len / lengths[i])?);
    }
    Ok(ScaleParams { link_scales, finger_scales: FingerScales::default() })
}

/// Elementwise `robot / human` distal phalanx ratio.
pub fn derive_finger_scales(human: &[f64; 5], robot: &[f64; 5]) -> Result<[f64; 5], CalibrationError> {
    let mut out = [0.0; 5];
    for i in 0..5 {
        for v in [human[i], robot[i]] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CalibrationError::NonPositiveLength(v));
            }
        }
        out[i] = robot[i] / human[i];
    }
    Ok(out)
}

/// Robot distal phalanx lengths in human finger order (thumb..pinky). Robot
/// hands with fewer fingers reuse the human length for the missing ones, so
/// their scale is one.
pub fn robot_phalanx_lengths(robot: &RobotModel, human: &[f64; 5]) -> [f64; 5] {
    let mut out = *human;
    if let Some(h) = &robot.hand_mapping {
        for (i, l) in h.distal_lengths.iter().enumerate().take(5) {
            out[i] = *l;
        }
    }
    out
}

/// Scale each bone segment `end - start` by its bone's scale and
/// re-accumulate from `root` outward. `ends` holds each bone's far-end
/// position in the pelvis frame; bones absent from `ends` are skipped
/// together with their descendants.
pub fn rescale_keypoints(
    skel: &SkeletonModel,
    root: &Vector3<f64>,
    ends: &BTreeMap<String, Vector3<f64>>,
    scales: &ScaleParams,
) -> Result<BTreeMap<String, Vector3<f64>>, CalibrationError> {
    let mut src: Vec<Option<Vector3<f64>>> = vec![None; skel.bones.len()];
    let mut dst: Vec<Option<Vector3<f64>>> = vec![None; skel.bones.len()];
    let mut out = BTreeMap::new();
    for (i, b) in skel.bones.iter().enumerate() {
        let Some(end) = ends.get(&b.name) else { continue };
        let (s0, d0) = match b.parent {
            None => (*root, *root),
            Some(p) => match (src[p], dst[p]) {
                (Some(s), Some(d)) => (s, d),
                _ => continue,
            },
        };
        let scale = *scales
            .link_scales
            .get(&b.name)
            .ok_or_else(|| CalibrationError::MissingScale(b.name.clone()))?;
        let new_end = d0 + (end - s0) * scale;
        src[i] = Some(*end);
        dst[i] = Some(new_end);
        out.insert(b.name.clone(), new_end);
    }
    Ok(out)
}

/// Persisted result of one operator calibration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationProfile {
    pub operator: String,
    pub robot: String,
    pub beta: [f64; SHAPE_DIM],
    pub link_scales: BTreeMap<String, f64>,
    pub finger_scales: FingerScales,
    pub residual: f64,
    pub created_at: String,
}

impl CalibrationProfile {
    pub fn scales(&self) -> ScaleParams {
        ScaleParams { link_scales: self.link_scales.clone(), finger_scales: self.finger_scales.clone() }
    }

    pub fn path_for(dir: &Path, operator: &str) -> PathBuf {
        dir.join(format!("{operator}.json"))
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf, CalibrationError> {
        let io = |e: std::io::Error| CalibrationError::Io(e.to_string());
        std::fs::create_dir_all(dir).map_err(io)?;
        let path = Self::path_for(dir, &self.operator);
        let text = serde_json::to_string_pretty(self).map_err(|e| CalibrationError::Io(e.to_string()))?;
        std::fs::write(&path, text).map_err(io)?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self, CalibrationError> {
        let text = std::fs::read_to_string(path).map_err(|e| CalibrationError::Io(e.to_string()))?;
        let p: CalibrationProfile =
            serde_json::from_str(&text).map_err(|e| CalibrationError::Io(e.to_string()))?;
        p.scales().validate()?;
        Ok(p)
    }
}

/// Full calibration: fit the skeleton to `target` (the robot's home
/// landmarks when `None`), derive link scales and, when phalanx lengths are
/// given, finger scales.
pub fn calibrate_operator(
    operator: &str,
    robot: &RobotModel,
    skel: &SkeletonModel,
    target: Option<&LandmarkSet>,
    human_phalanges: Option<&FingerLengths>,
    cfg: &FitConfig,
) -> Result<(CalibrationProfile, FitResult), CalibrationError> {
    let robot_landmarks;
    let target = match target {
        Some(t) => t,
        None => {
            robot_landmarks = LandmarkSet::from_robot(robot)?;
            &robot_landmarks
        }
    };
    let fit = fit_shape(skel, target, cfg)?;
    let mut scales = derive_link_scales(skel, &fit.beta, robot)?;
    if let Some(h) = human_phalanges {
        scales.finger_scales = FingerScales {
            left: derive_finger_scales(&h.left, &robot_phalanx_lengths(robot, &h.left))?,
            right: derive_finger_scales(&h.right, &robot_phalanx_lengths(robot, &h.right))?,
        };
    }
    scales.validate()?;
    let mut beta = [0.0; SHAPE_DIM];
    beta.copy_from_slice(fit.beta.as_slice());
    let profile = CalibrationProfile {
        operator: operator.to_string(),
        robot: robot.name().to_string(),
        beta,
        link_scales: scales.link_scales,
        finger_scales: scales.finger_scales,
        residual: fit.residual,
        created_at: chrono::Utc::now().to_rfc3339(),
    };
    Ok((profile, fit))
}

/// Measured distal phalanx lengths per hand, thumb to pinky.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FingerLengths {
    pub left: [f64; 5],
    pub right: [f64; 5],
}
