//! Modality streams: the JSONL frame schema, validation, canonical
//! serialization and normalization into pelvis-frame command requests.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;

use nalgebra::{UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{rescale_keypoints, CalibrationError, ScaleParams, SkeletonModel};
use crate::hand_retarget::{ExoGloveAngles, GloveAngles, HandError, HandKeypoints, EULER_JOINTS, EXO_GLOVE_DIM, GLOVE_DIM};
use crate::kinematics::{
    convert_device_frame, wrist_offset_pelvis, DeviceConvention, FrameCalibration, FrameId, KinematicsError,
    RigidTransform, RobotModel,
};

pub const SCHEMA_VERSION: u32 = 1;
pub const ARM_DOF: usize = 7;

/// The seventeen MoCap body segments.
pub const BODY_SEGMENTS: [&str; 17] = [
    "head",
    "left_foot",
    "left_forearm",
    "left_hand",
    "left_lower_leg",
    "left_shoulder",
    "left_upper_arm",
    "left_upper_leg",
    "pelvis",
    "right_foot",
    "right_forearm",
    "right_hand",
    "right_lower_leg",
    "right_shoulder",
    "right_upper_arm",
    "right_upper_leg",
    "t8",
];

/// Skeleton bone -> MoCap segment whose origin is the bone's far end.
pub const BONE_SEGMENTS: [(&str, &str); 8] = [
    ("spine", "t8"),
    ("neck", "head"),
    ("l_clavicle", "left_upper_arm"),
    ("r_clavicle", "right_upper_arm"),
    ("l_upper_arm", "left_forearm"),
    ("r_upper_arm", "right_forearm"),
    ("l_forearm", "left_hand"),
    ("r_forearm", "right_hand"),
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InputError {
    #[error("line {line}: {reason}")]
    MalformedFrame { line: usize, reason: String },
    #[error("line {line}: t = {t} does not follow {prev}")]
    NonMonotonicTimestamp { line: usize, t: f64, prev: f64 },
    #[error("{0} frames cannot be normalized here")]
    UnsupportedModality(Modality),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
}

impl From<HandError> for InputError {
    fn from(e: HandError) -> Self {
        InputError::MalformedFrame { line: 0, reason: e.to_string() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Vision,
    Vr,
    Mocap,
    Exo,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Vision, Modality::Vr, Modality::Mocap, Modality::Exo];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Vision => "vision",
            Modality::Vr => "vr",
            Modality::Mocap => "mocap",
            Modality::Exo => "exo",
        }
    }

    pub fn parse(s: &str) -> Option<Modality> {
        Modality::ALL.into_iter().find(|m| m.as_str() == s)
    }

    pub fn convention(self) -> DeviceConvention {
        match self {
            Modality::Vr => DeviceConvention::Openxr,
            Modality::Vision | Modality::Mocap => DeviceConvention::MocapGlobal,
            Modality::Exo => DeviceConvention::ExoNative,
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Device-frame pose exactly as carried by the stream; the quaternion is
/// `(w, x, y, z)` and is normalized only when converted.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pose {
    pub p: [f64; 3],
    pub q: [f64; 4],
}

impl Pose {
    pub fn from_transform(t: &RigidTransform) -> Self {
        Pose { p: t.translation_array(), q: t.quaternion_wxyz() }
    }

    pub fn to_transform(&self, frame: FrameId) -> RigidTransform {
        RigidTransform::from_parts(self.p, self.q, frame).expect("validated pose")
    }

    fn validate(&self) -> Result<(), String> {
        if self.p.iter().chain(&self.q).any(|v| !v.is_finite()) {
            return Err("non-finite pose component".into());
        }
        let n = self.q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-3 {
            return Err(format!("quaternion norm {n} is not unit"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum HandPayload {
    Keypoints(HandKeypoints),
    Glove(GloveAngles),
    ExoGlove(ExoGloveAngles),
    /// Per-joint rotations, finger × (MCP, PIP, DIP), `(w, x, y, z)`.
    Euler(Vec<[f64; 4]>),
}

impl HandPayload {
    pub fn variant(&self) -> &'static str {
        match self {
            HandPayload::Keypoints(_) => "keypoints",
            HandPayload::Glove(_) => "glove",
            HandPayload::ExoGlove(_) => "exo_glove",
            HandPayload::Euler(_) => "euler",
        }
    }

    pub fn euler_rotations(&self) -> Option<Vec<UnitQuaternion<f64>>> {
        match self {
            HandPayload::Euler(qs) => Some(
                qs.iter()
                    .map(|q| UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3])))
                    .collect(),
            ),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HumanFrame {
    pub t: f64,
    pub modality: Modality,
    pub head: Option<Pose>,
    pub wrist_l: Option<Pose>,
    pub wrist_r: Option<Pose>,
    pub hand_l: Option<HandPayload>,
    pub hand_r: Option<HandPayload>,
    pub body: Option<BTreeMap<String, Pose>>,
    pub arm_q_l: Option<[f64; ARM_DOF]>,
    pub arm_q_r: Option<[f64; ARM_DOF]>,
}

impl HumanFrame {
    pub fn empty(t: f64, modality: Modality) -> Self {
        HumanFrame {
            t,
            modality,
            head: None,
            wrist_l: None,
            wrist_r: None,
            hand_l: None,
            hand_r: None,
            body: None,
            arm_q_l: None,
            arm_q_r: None,
        }
    }

    /// Modality-specific invariants.
    pub fn validate(&self) -> Result<(), String> {
        if !self.t.is_finite() {
            return Err("t is not finite".into());
        }
        for (name, p) in [("head", &self.head), ("wrist_l", &self.wrist_l), ("wrist_r", &self.wrist_r)] {
            if let Some(p) = p {
                p.validate().map_err(|e| format!("{name}: {e}"))?;
            }
        }
        for (name, h) in [("hand_l", &self.hand_l), ("hand_r", &self.hand_r)] {
            let Some(h) = h else { continue };
            let legal = match self.modality {
                Modality::Vision | Modality::Vr => matches!(h, HandPayload::Keypoints(_) | HandPayload::Euler(_)),
                Modality::Mocap => matches!(h, HandPayload::Glove(_)),
                Modality::Exo => matches!(h, HandPayload::ExoGlove(_)),
            };
            if !legal {
                return Err(format!(
                    "{name}: {} payload is not legal for {} frames (vision/vr: keypoints or euler; mocap: glove; exo: exo_glove)",
                    h.variant(),
                    self.modality
                ));
            }
            match h {
                HandPayload::Glove(g) => check_angles(&g.0, GLOVE_DIM).map_err(|e| format!("{name}: {e}"))?,
                HandPayload::ExoGlove(g) => check_angles(&g.0, EXO_GLOVE_DIM).map_err(|e| format!("{name}: {e}"))?,
                HandPayload::Euler(qs) => {
                    if qs.len() != EULER_JOINTS {
                        return Err(format!("{name}: expected {EULER_JOINTS} rotations, got {}", qs.len()));
                    }
                    for q in qs {
                        Pose { p: [0.0; 3], q: *q }.validate().map_err(|e| format!("{name}: {e}"))?;
                    }
                }
                HandPayload::Keypoints(_) => {}
            }
        }
        match (&self.body, self.modality) {
            (Some(body), Modality::Mocap) => {
                if body.len() != BODY_SEGMENTS.len() || BODY_SEGMENTS.iter().any(|s| !body.contains_key(*s)) {
                    return Err(format!("body must carry exactly the 17 segments {BODY_SEGMENTS:?}"));
                }
                for (k, p) in body {
                    p.validate().map_err(|e| format!("body.{k}: {e}"))?;
                }
            }
            (None, Modality::Mocap) => return Err("mocap frames must carry body segments".into()),
            (Some(_), m) => return Err(format!("body segments are only legal for mocap frames, not {m}")),
            (None, _) => {}
        }
        let arms = [self.arm_q_l.as_ref(), self.arm_q_r.as_ref()];
        if self.modality == Modality::Exo {
            if arms.iter().any(|a| a.is_none()) {
                return Err("exo frames must carry arm_q_l and arm_q_r".into());
            }
            if arms.iter().flatten().any(|a| a.iter().any(|v| !v.is_finite())) {
                return Err("non-finite arm joint angle".into());
            }
        } else if arms.iter().any(|a| a.is_some()) {
            return Err(format!("arm joint angles are only legal for exo frames, not {}", self.modality));
        }
        Ok(())
    }
}

fn check_angles(values: &[f64], expected: usize) -> Result<(), String> {
    if values.len() != expected {
        return Err(format!("expected {expected} angles, got {}", values.len()));
    }
    if values.iter().any(|v| !v.is_finite() || *v < -std::f64::consts::FRAC_PI_2 || *v > std::f64::consts::PI) {
        return Err("angle outside [-pi/2, pi]".into());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Wire form
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFrame {
    v: u32,
    t: f64,
    modality: String,
    head: Option<Pose>,
    wrist_l: Option<Pose>,
    wrist_r: Option<Pose>,
    hand_l: Option<RawHand>,
    hand_r: Option<RawHand>,
    body: Option<BTreeMap<String, Pose>>,
    arm_q_l: Option<[f64; ARM_DOF]>,
    arm_q_r: Option<[f64; ARM_DOF]>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
enum RawHand {
    Keypoints(Vec<[f64; 3]>),
    Glove(Vec<f64>),
    ExoGlove(Vec<f64>),
    Euler(Vec<[f64; 4]>),
}

/// Parse one JSONL line into a validated frame (timestamps unchecked).
pub fn parse_frame(line: &str) -> Result<HumanFrame, String> {
    let raw: RawFrame = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if raw.v != SCHEMA_VERSION {
        return Err(format!("unsupported schema version {}", raw.v));
    }
    let modality = Modality::parse(&raw.modality).ok_or_else(|| format!("unknown modality `{}`", raw.modality))?;
    let hand = |h: Option<RawHand>| -> Result<Option<HandPayload>, String> {
        Ok(match h {
            None => None,
            Some(RawHand::Keypoints(k)) => {
                Some(HandPayload::Keypoints(HandKeypoints::from_slice(&k).map_err(|e| e.to_string())?))
            }
            Some(RawHand::Glove(g)) => Some(HandPayload::Glove(GloveAngles(g))),
            Some(RawHand::ExoGlove(g)) => Some(HandPayload::ExoGlove(ExoGloveAngles(g))),
            Some(RawHand::Euler(e)) => Some(HandPayload::Euler(e)),
        })
    };
    let frame = HumanFrame {
        t: raw.t,
        modality,
        head: raw.head,
        wrist_l: raw.wrist_l,
        wrist_r: raw.wrist_r,
        hand_l: hand(raw.hand_l)?,
        hand_r: hand(raw.hand_r)?,
        body: raw.body,
        arm_q_l: raw.arm_q_l,
        arm_q_r: raw.arm_q_r,
    };
    frame.validate()?;
    Ok(frame)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParseMode {
    Strict,
    Lenient,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParseReport {
    pub frames: Vec<HumanFrame>,
    /// Lenient mode only: rejected lines with their reasons.
    pub dropped: Vec<(usize, String)>,
}

/// Parse a JSONL stream. Blank lines are skipped. Strict mode fails on the
/// first bad line; lenient mode drops bad lines (including out-of-order
/// timestamps) and reports them.
pub fn parse_stream(text: &str, mode: ParseMode) -> Result<ParseReport, InputError> {
    let mut report = ParseReport::default();
    let mut prev: Option<f64> = None;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let result = parse_frame(line)
            .map_err(|reason| InputError::MalformedFrame { line: line_no, reason })
            .and_then(|f| match prev {
                Some(p) if f.t <= p => Err(InputError::NonMonotonicTimestamp { line: line_no, t: f.t, prev: p }),
                _ => Ok(f),
            });
        match (result, mode) {
            (Ok(f), _) => {
                prev = Some(f.t);
                report.frames.push(f);
            }
            (Err(e), ParseMode::Strict) => return Err(e),
            (Err(e), ParseMode::Lenient) => report.dropped.push((line_no, e.to_string())),
        }
    }
    Ok(report)
}

/// Round to 9 significant digits and print the shortest decimal that
/// reads back to the rounded value.
pub fn format_float(v: f64) -> String {
    let rounded: f64 = format!("{v:.8e}").parse().expect("formatted float parses");
    format!("{rounded}")
}

fn push_array(out: &mut String, vals: &[f64]) {
    out.push('[');
    for (i, v) in vals.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&format_float(*v));
    }
    out.push(']');
}

fn push_pose(out: &mut String, p: &Pose) {
    out.push_str("{\"p\":");
    push_array(out, &p.p);
    out.push_str(",\"q\":");
    push_array(out, &p.q);
    out.push('}');
}

fn push_hand(out: &mut String, h: &HandPayload) {
    let _ = write!(out, "{{\"{}\":", h.variant());
    match h {
        HandPayload::Keypoints(k) => {
            out.push('[');
            for (i, p) in k.points().iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                push_array(out, p.as_slice());
            }
            out.push(']');
        }
        HandPayload::Glove(g) => push_array(out, &g.0),
        HandPayload::ExoGlove(g) => push_array(out, &g.0),
        HandPayload::Euler(qs) => {
            out.push('[');
            for (i, q) in qs.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                push_array(out, q);
            }
            out.push(']');
        }
    }
    out.push('}');
}

/// Canonical single-line JSON: fixed key order, 9-significant-digit floats.
pub fn serialize_frame(f: &HumanFrame) -> String {
    let mut out = String::with_capacity(256);
    let _ = write!(out, "{{\"v\":{SCHEMA_VERSION},\"t\":{},\"modality\":\"{}\"", format_float(f.t), f.modality);
    for (key, pose) in [("head", &f.head), ("wrist_l", &f.wrist_l), ("wrist_r", &f.wrist_r)] {
        if let Some(p) = pose {
            let _ = write!(out, ",\"{key}\":");
            push_pose(&mut out, p);
        }
    }
    for (key, hand) in [("hand_l", &f.hand_l), ("hand_r", &f.hand_r)] {
        if let Some(h) = hand {
            let _ = write!(out, ",\"{key}\":");
            push_hand(&mut out, h);
        }
    }
    if let Some(body) = &f.body {
        out.push_str(",\"body\":{");
        for (i, (k, p)) in body.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            let _ = write!(out, "\"{k}\":");
            push_pose(&mut out, p);
        }
        out.push('}');
    }
    for (key, arm) in [("arm_q_l", &f.arm_q_l), ("arm_q_r", &f.arm_q_r)] {
        if let Some(a) = arm {
            let _ = write!(out, ",\"{key}\":");
            push_array(&mut out, a);
        }
    }
    out.push('}');
    out
}

pub fn serialize_stream(frames: &[HumanFrame]) -> String {
    let mut out = String::new();
    for f in frames {
        out.push_str(&serialize_frame(f));
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Pelvis-frame targets for one tick.
#[derive(Clone, Debug, PartialEq)]
pub struct RobotCommandRequest {
    pub t: f64,
    pub modality: Modality,
    pub wrist_l: Option<RigidTransform>,
    pub wrist_r: Option<RigidTransform>,
    pub hand_l: Option<HandPayload>,
    pub hand_r: Option<HandPayload>,
    /// Exoskeleton arm joints, routed straight to the command.
    pub arm_q_l: Option<[f64; ARM_DOF]>,
    pub arm_q_r: Option<[f64; ARM_DOF]>,
    /// MoCap only: rescaled bone end points in the pelvis frame.
    pub body_keypoints: Option<BTreeMap<String, Vector3<f64>>>,
}

/// Everything normalization needs besides the frame itself.
#[derive(Clone, Debug)]
pub struct NormalizeContext<'a> {
    pub calib: &'a FrameCalibration,
    pub skeleton: &'a SkeletonModel,
    /// Link scales applied to MoCap bone segments.
    pub scales: &'a ScaleParams,
}

/// Bone segment lengths measured from one MoCap frame.
pub fn mocap_bone_lengths(body: &BTreeMap<String, Pose>, skel: &SkeletonModel) -> BTreeMap<String, f64> {
    let pos = |s: &str| Vector3::from(body[s].p);
    let mut out = BTreeMap::new();
    for (bone, seg) in BONE_SEGMENTS {
        let Some(i) = skel.bone_index(bone) else { continue };
        let start = match skel.bones()[i].parent {
            None => pos("pelvis"),
            Some(p) => {
                let parent = &skel.bones()[p].name;
                let seg = BONE_SEGMENTS.iter().find(|(b, _)| b == parent).map(|(_, s)| *s).unwrap_or("pelvis");
                pos(seg)
            }
        };
        out.insert(bone.to_string(), (pos(seg) - start).norm());
    }
    out
}

/// Per-bone `robot link / measured operator segment` from a MoCap frame,
/// so the operator's own proportions map onto the robot's.
pub fn mocap_link_scales(
    body: &BTreeMap<String, Pose>,
    skel: &SkeletonModel,
    robot: &RobotModel,
) -> Result<ScaleParams, CalibrationError> {
    let mut scales = ScaleParams::identity(skel);
    for (bone, len) in mocap_bone_lengths(body, skel) {
        let link = robot.bone_map.get(&bone).ok_or_else(|| CalibrationError::MissingCorrespondence(bone.clone()))?;
        let robot_len = robot.link_length(link).ok_or_else(|| CalibrationError::MissingCorrespondence(bone.clone()))?;
        if len <= crate::calibration::MIN_BONE_LENGTH {
            return Err(CalibrationError::DegenerateBone { bone, length: len });
        }
        scales.link_scales.insert(bone, robot_len / len);
    }
    scales.validate()?;
    Ok(scales)
}

/// Convert one frame into pelvis-frame targets.
///
/// * VR: head and wrists are re-expressed through the head-to-pelvis
///   reference (wrist offset relative to the head).
/// * Vision: wrists go through the device-to-pelvis reference.
/// * MoCap: segments are converted, bone segments rescaled from the pelvis
///   outward; the wrist target is the rescaled forearm end with the hand
///   segment's orientation.
/// * Exo: joint-space payload passes through untouched.
pub fn normalize(frame: &HumanFrame, ctx: &NormalizeContext<'_>) -> Result<RobotCommandRequest, InputError> {
    let device = FrameId::new("device");
    let convention = frame.modality.convention();
    let mut req = RobotCommandRequest {
        t: frame.t,
        modality: frame.modality,
        wrist_l: None,
        wrist_r: None,
        hand_l: frame.hand_l.clone(),
        hand_r: frame.hand_r.clone(),
        arm_q_l: None,
        arm_q_r: None,
        body_keypoints: None,
    };
    match frame.modality {
        Modality::Vr => {
            let Some(head) = &frame.head else {
                return Err(InputError::MalformedFrame { line: 0, reason: "vr frame without head pose".into() });
            };
            let head = convert_device_frame(&head.to_transform(device.clone()), convention, ctx.calib)?;
            let wrist = |w: &Option<Pose>| -> Result<Option<RigidTransform>, InputError> {
                w.as_ref()
                    .map(|w| {
                        let w = convert_device_frame(&w.to_transform(device.clone()), convention, ctx.calib)?;
                        Ok(wrist_offset_pelvis(&head, &w, ctx.calib)?)
                    })
                    .transpose()
            };
            req.wrist_l = wrist(&frame.wrist_l)?;
            req.wrist_r = wrist(&frame.wrist_r)?;
        }
        Modality::Vision => {
            let wrist = |w: &Option<Pose>| -> Result<Option<RigidTransform>, InputError> {
                w.as_ref()
                    .map(|w| Ok(convert_device_frame(&w.to_transform(device.clone()), convention, ctx.calib)?))
                    .transpose()
            };
            req.wrist_l = wrist(&frame.wrist_l)?;
            req.wrist_r = wrist(&frame.wrist_r)?;
        }
        Modality::Mocap => {
            let body = frame.body.as_ref().expect("validated mocap frame has a body");
            let conv: BTreeMap<&str, RigidTransform> = body
                .iter()
                .map(|(k, p)| Ok((k.as_str(), convert_device_frame(&p.to_transform(device.clone()), convention, ctx.calib)?)))
                .collect::<Result<_, KinematicsError>>()?;
            let pelvis = conv["pelvis"].translation;
            let ends: BTreeMap<String, Vector3<f64>> = BONE_SEGMENTS
                .iter()
                .map(|(bone, seg)| (bone.to_string(), conv[seg].translation - pelvis))
                .collect();
            let scaled = rescale_keypoints(ctx.skeleton, &Vector3::zeros(), &ends, ctx.scales)?;
            let target = |bone: &str, hand: &str| {
                scaled.get(bone).map(|p| RigidTransform::new(*p, conv[hand].rotation, FrameId::pelvis()))
            };
            req.wrist_l = target("l_forearm", "left_hand");
            req.wrist_r = target("r_forearm", "right_hand");
            req.body_keypoints = Some(scaled);
        }
        Modality::Exo => {
            req.arm_q_l = frame.arm_q_l;
            req.arm_q_r = frame.arm_q_r;
        }
    }
    Ok(req)
}

/// Bounded FIFO for live ingestion; a push into a full queue drops the
/// oldest frame and counts the overflow.
#[derive(Clone, Debug)]
pub struct FrameQueue {
    cap: usize,
    items: VecDeque<HumanFrame>,
    overflow: u64,
}

impl FrameQueue {
    pub fn new(cap: usize) -> Self {
        FrameQueue { cap: cap.max(1), items: VecDeque::new(), overflow: 0 }
    }

    pub fn push(&mut self, f: HumanFrame) {
        if self.items.len() == self.cap {
            self.items.pop_front();
            self.overflow += 1;
        }
        self.items.push_back(f);
    }

    pub fn pop(&mut self) -> Option<HumanFrame> {
        self.items.pop_front()
    }

    /// Take everything queued, oldest first.
    pub fn drain(&mut self) -> Vec<HumanFrame> {
        self.items.drain(..).collect()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn overflow(&self) -> u64 {
        self.overflow
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hand_retarget::HandModel;
    use crate::kinematics::{builtin_robot, Side};
    use proptest::prelude::*;

    fn pose(p: [f64; 3]) -> Pose {
        Pose { p, q: [1.0, 0.0, 0.0, 0.0] }
    }

    fn vr_frame(t: f64) -> HumanFrame {
        let r = builtin_robot("h1_2_like").unwrap();
        let h = HandModel::from_robot(&r, Side::Left).unwrap();
        let mut f = HumanFrame::empty(t, Modality::Vr);
        f.head = Some(pose([0.0, 1.6, 0.0]));
        f.wrist_l = Some(pose([-0.2, 1.2, -0.4]));
        f.wrist_r = Some(Pose { p: [0.2, 1.2, -0.4], q: [0.9238795325, 0.0, 0.3826834324, 0.0] });
        f.hand_l = Some(HandPayload::Keypoints(h.keypoints(&h.home()).unwrap()));
        f
    }

    fn mocap_body() -> BTreeMap<String, Pose> {
        let skel = SkeletonModel::standard();
        let mut body: BTreeMap<String, Pose> = BODY_SEGMENTS.iter().map(|s| (s.to_string(), pose([0.0, 0.0, -0.5]))).collect();
        body.insert("pelvis".into(), pose([0.0, 0.0, 0.0]));
        let mut ends = BTreeMap::new();
        let mut acc: Vec<Vector3<f64>> = Vec::new();
        for b in skel.bones() {
            let start = b.parent.map(|p| acc[p]).unwrap_or_else(Vector3::zeros);
            let e = start + b.direction.into_inner() * b.rest_length;
            acc.push(e);
            ends.insert(b.name.clone(), e);
        }
        for (bone, seg) in BONE_SEGMENTS {
            let e = ends[bone];
            body.insert(seg.to_string(), pose([e.x, e.y, e.z]));
        }
        body
    }

    #[test]
    fn empty_input_is_empty_stream() {
        assert!(parse_stream("", ParseMode::Strict).unwrap().frames.is_empty());
        assert!(parse_stream("\n\n", ParseMode::Strict).unwrap().frames.is_empty());
    }

    #[test]
    fn valid_frames_pass_through_in_order() {
        let text = serialize_stream(&[vr_frame(0.0), vr_frame(0.1), vr_frame(0.2)]);
        let r = parse_stream(&text, ParseMode::Strict).unwrap();
        assert_eq!(r.frames.len(), 3);
        assert!(r.frames.windows(2).all(|w| w[0].t < w[1].t));
    }

    #[test]
    fn payload_variant_rule_is_enforced() {
        let mut f = vr_frame(0.0);
        f.modality = Modality::Mocap;
        f.body = Some(mocap_body());
        f.head = None;
        let line = serialize_frame(&f);
        match parse_stream(&line, ParseMode::Strict) {
            Err(InputError::MalformedFrame { line: 1, reason }) => {
                assert!(reason.contains("keypoints payload is not legal for mocap"), "{reason}")
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn timestamps_must_increase() {
        let text = serialize_stream(&[vr_frame(0.2), vr_frame(0.1)]);
        assert!(matches!(
            parse_stream(&text, ParseMode::Strict),
            Err(InputError::NonMonotonicTimestamp { line: 2, .. })
        ));
        let lenient = parse_stream(&text, ParseMode::Lenient).unwrap();
        assert_eq!(lenient.frames.len(), 1);
        assert_eq!(lenient.dropped.len(), 1);
    }

    #[test]
    fn lenient_mode_drops_and_counts() {
        let mut text = serialize_frame(&vr_frame(0.0));
        text.push_str("\n{\"v\":1,\"t\":0.05,\"modality\":\"vr\",\"bogus\":1}\n");
        text.push_str("not json\n");
        text.push_str(&serialize_frame(&vr_frame(0.1)));
        let r = parse_stream(&text, ParseMode::Lenient).unwrap();
        assert_eq!(r.frames.len(), 2);
        assert_eq!(r.dropped.iter().map(|d| d.0).collect::<Vec<_>>(), vec![2, 3]);
        assert!(matches!(parse_stream(&text, ParseMode::Strict), Err(InputError::MalformedFrame { line: 2, .. })));
    }

    #[test]
    fn structural_rules() {
        let mut f = HumanFrame::empty(0.0, Modality::Mocap);
        assert!(f.validate().unwrap_err().contains("body"));
        let mut body = mocap_body();
        body.remove("t8");
        f.body = Some(body);
        assert!(f.validate().is_err());
        let mut e = HumanFrame::empty(0.0, Modality::Exo);
        assert!(e.validate().is_err());
        e.arm_q_l = Some([0.0; 7]);
        e.arm_q_r = Some([0.0; 7]);
        e.validate().unwrap();
        let mut v = vr_frame(0.0);
        v.arm_q_l = Some([0.0; 7]);
        assert!(v.validate().is_err());
        let mut v = vr_frame(0.0);
        v.head = Some(Pose { p: [0.0; 3], q: [2.0, 0.0, 0.0, 0.0] });
        assert!(v.validate().is_err());
    }

    #[test]
    fn schema_keys_are_exact() {
        let line = serialize_frame(&vr_frame(0.5));
        assert!(line.starts_with("{\"v\":1,\"t\":0.5,\"modality\":\"vr\",\"head\":{\"p\":[0,1.6,0],\"q\":[1,0,0,0]},\"wrist_l\""));
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        let keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        assert_eq!(keys.len(), 7);
        assert!(parse_frame(&line.replace("\"v\":1", "\"v\":2")).is_err());
    }

    #[test]
    fn float_format_is_nine_significant_digits() {
        assert_eq!(format_float(0.1234567891234), "0.123456789");
        assert_eq!(format_float(1.0), "1");
        assert_eq!(format_float(-2.5e-7), "-0.00000025");
        assert_eq!(format_float(123456789012.0), "123456789000");
    }

    #[test]
    fn vr_identity_calibration_uses_head_offset() {
        let f = vr_frame(0.0);
        let skel = SkeletonModel::standard();
        let scales = ScaleParams::identity(&skel);
        let calib = FrameCalibration::identity();
        let ctx = NormalizeContext { calib: &calib, skeleton: &skel, scales: &scales };
        let req = normalize(&f, &ctx).unwrap();
        // Device (x right, y up, -z forward) offsets mapped to robot axes:
        // offset = wrist - head = (-0.2, -0.4, -0.4) -> robot (0.4, 0.2, -0.4).
        let w = req.wrist_l.unwrap();
        assert!((w.translation - Vector3::new(0.4, 0.2, -0.4)).norm() < 1e-12);
        assert_eq!(req.hand_l, f.hand_l);
    }

    #[test]
    fn mocap_unit_scales_leave_keypoints_unchanged() {
        let skel = SkeletonModel::standard();
        let scales = ScaleParams::identity(&skel);
        let calib = FrameCalibration::identity();
        let ctx = NormalizeContext { calib: &calib, skeleton: &skel, scales: &scales };
        let mut f = HumanFrame::empty(0.0, Modality::Mocap);
        f.body = Some(mocap_body());
        let req = normalize(&f, &ctx).unwrap();
        let kp = req.body_keypoints.unwrap();
        for (bone, seg) in BONE_SEGMENTS {
            assert!((kp[bone] - Vector3::from(f.body.as_ref().unwrap()[seg].p)).norm() < 1e-12);
        }
        assert!((req.wrist_l.unwrap().translation - Vector3::new(0.0, 0.71, 0.48)).norm() < 1e-12);
    }

    #[test]
    fn mocap_scales_map_operator_onto_robot() {
        let skel = SkeletonModel::standard();
        let robot = builtin_robot("h1_2_like").unwrap();
        let body = mocap_body();
        let scales = mocap_link_scales(&body, &skel, &robot).unwrap();
        let calib = FrameCalibration::identity();
        let ctx = NormalizeContext { calib: &calib, skeleton: &skel, scales: &scales };
        let mut f = HumanFrame::empty(0.0, Modality::Mocap);
        f.body = Some(body);
        let req = normalize(&f, &ctx).unwrap();
        // Operator T-pose lands on the robot's T-pose wrist.
        let home = robot.home();
        for (w, link) in [(req.wrist_l, "left_wrist"), (req.wrist_r, "right_wrist")] {
            let fk = crate::kinematics::forward_kinematics(&robot, &home, link).unwrap();
            assert!((w.unwrap().translation - fk.translation).norm() < 1e-12);
        }
    }

    #[test]
    fn exo_payload_is_untouched() {
        let mut f = HumanFrame::empty(0.0, Modality::Exo);
        f.arm_q_l = Some([0.1, -0.2, 0.3, -0.4, 0.5, -0.6, 0.7]);
        f.arm_q_r = Some([0.0; 7]);
        f.hand_l = Some(HandPayload::ExoGlove(ExoGloveAngles(vec![0.2; 15])));
        let skel = SkeletonModel::standard();
        let scales = ScaleParams::identity(&skel);
        let calib = FrameCalibration::default();
        let ctx = NormalizeContext { calib: &calib, skeleton: &skel, scales: &scales };
        let req = normalize(&f, &ctx).unwrap();
        assert_eq!(req.arm_q_l, f.arm_q_l);
        assert_eq!(req.hand_l, f.hand_l);
        assert!(req.wrist_l.is_none());
    }

    #[test]
    fn missing_calibration_is_reported() {
        let skel = SkeletonModel::standard();
        let scales = ScaleParams::identity(&skel);
        let calib = FrameCalibration::default();
        let ctx = NormalizeContext { calib: &calib, skeleton: &skel, scales: &scales };
        assert!(matches!(
            normalize(&vr_frame(0.0), &ctx),
            Err(InputError::Kinematics(KinematicsError::MissingCalibration(_)))
        ));
    }

    #[test]
    fn queue_drops_oldest() {
        let mut q = FrameQueue::new(2);
        for i in 0..5 {
            q.push(HumanFrame::empty(i as f64, Modality::Vr));
        }
        assert_eq!(q.overflow(), 3);
        assert_eq!(q.drain().iter().map(|f| f.t).collect::<Vec<_>>(), vec![3.0, 4.0]);
    }

    fn arb_frame() -> impl Strategy<Value = HumanFrame> {
        (
            0.0f64..1000.0,
            prop::array::uniform3(-3.0f64..3.0),
            prop::array::uniform4(-1.0f64..1.0),
            prop::collection::vec(-1.5f64..3.0, 15),
            prop::array::uniform7(-2.0f64..2.0),
        )
            .prop_filter_map("unit quaternion", |(t, p, q, glove, arm)| {
                let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n < 0.1 {
                    return None;
                }
                let q = q.map(|v| v / n);
                let mut f = HumanFrame::empty(t, Modality::Exo);
                f.head = Some(Pose { p, q });
                f.arm_q_l = Some(arm);
                f.arm_q_r = Some(arm.map(|v| -v * 0.37));
                f.hand_r = Some(HandPayload::ExoGlove(ExoGloveAngles(glove)));
                Some(f)
            })
    }

    proptest! {
        #[test]
        fn serialize_parse_round_trip_is_bit_identical(f in arb_frame()) {
            let text = serialize_frame(&f);
            let once = parse_frame(&text).unwrap();
            let text2 = serialize_frame(&once);
            let twice = parse_frame(&text2).unwrap();
            prop_assert_eq!(&text, &text2);
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn normalize_is_pure(dx in -0.3f64..0.3) {
            let mut f = vr_frame(0.0);
            f.wrist_r.as_mut().unwrap().p[0] += dx;
            let skel = SkeletonModel::standard();
            let scales = ScaleParams::identity(&skel);
            let calib = FrameCalibration::identity();
            let ctx = NormalizeContext { calib: &calib, skeleton: &skel, scales: &scales };
            prop_assert_eq!(normalize(&f, &ctx).unwrap(), normalize(&f, &ctx).unwrap());
        }
    }
}
