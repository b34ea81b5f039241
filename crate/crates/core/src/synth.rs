//! Scripted closed-loop operator: drives the live pipeline through a task
//! while recording the human-side stream it emits, so the recorded stream can
//! later be replayed headlessly.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DVector, Isometry3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::hand_retarget::{ExoGloveAngles, GloveAngles, HandModel, EXO_GLOVE_DIM, GLOVE_DIM};
use crate::input::{parse_frame, serialize_frame, HandPayload, HumanFrame, Modality, Pose, BODY_SEGMENTS};
use crate::ik::{solve_ik, IkConfig};
use crate::kinematics::{
    forward_kinematics, revert_device_frame, FrameCalibration, FrameId, JointState, RigidTransform, Side,
};
use crate::service::{CalibrationPoses, Pipeline, ServiceError, SessionConfig};
use crate::session::Episode;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error("no script for task `{0}`")]
    NoScript(String),
    #[error("step `{step}` of {task} did not finish within {limit} s ({detail})")]
    Stalled { task: String, step: String, limit: f64, detail: String },
    #[error("script for {0} ended without success")]
    Unsolved(String),
}

/// Where a hand should go during a step.
#[derive(Clone, Debug)]
pub enum Target {
    /// Keep the current intent.
    Hold,
    /// Absolute palm position.
    At(Vector3<f64>),
    /// Above an object's top center, frozen at step start.
    Above { object: &'static str, dz: f64, dx: f64, dy: f64 },
    /// Next to an object's center, frozen at step start.
    Beside { object: &'static str, offset: Vector3<f64> },
    /// Palm displacement relative to the intent at step start.
    Offset(Vector3<f64>),
    /// Move so that the held object's center reaches a point.
    Carry { object: &'static str, to: Vector3<f64> },
    /// Move the held object over another body with its bottom `clearance`
    /// above that body's top.
    CarryOver { object: &'static str, over: &'static str, clearance: f64, dx: f64, dy: f64 },
}

#[derive(Clone, Debug)]
pub struct HandGoal {
    pub target: Target,
    /// World-frame rotation applied to the palm orientation at step start.
    pub rotate: Option<UnitQuaternion<f64>>,
    pub close: Option<bool>,
}

impl HandGoal {
    pub fn go(target: Target) -> Self {
        HandGoal { target, rotate: None, close: None }
    }

    pub fn close(mut self, c: bool) -> Self {
        self.close = Some(c);
        self
    }

    pub fn rotate(mut self, r: UnitQuaternion<f64>) -> Self {
        self.rotate = Some(r);
        self
    }
}

#[derive(Clone, Debug)]
pub enum Until {
    /// Goals reached within the position tolerance.
    Reached(f64),
    Wait(f64),
    Success,
}

#[derive(Clone, Debug)]
pub struct Step {
    pub label: &'static str,
    pub left: Option<HandGoal>,
    pub right: Option<HandGoal>,
    pub until: Until,
}

fn step(label: &'static str, left: Option<HandGoal>, right: Option<HandGoal>, until: Until) -> Step {
    Step { label, left, right, until }
}

fn v(x: f64, y: f64, z: f64) -> Vector3<f64> {
    Vector3::new(x, y, z)
}

fn above(object: &'static str, dz: f64) -> Target {
    Target::Above { object, dz, dx: 0.0, dy: 0.0 }
}

fn ry(a: f64) -> UnitQuaternion<f64> {
    UnitQuaternion::from_axis_angle(&Vector3::y_axis(), a)
}

fn rx(a: f64) -> UnitQuaternion<f64> {
    UnitQuaternion::from_axis_angle(&Vector3::x_axis(), a)
}

const TOL: f64 = 0.006;

/// Scripted sequence for one of the study tasks.
pub fn script(task: &str) -> Option<Vec<Step>> {
    use HandGoal as G;
    use Target::*;
    let idle = step("idle", None, None, Until::Wait(0.5));
    let ready_l = G::go(At(v(0.25, 0.25, 0.25)));
    let ready_r = G::go(At(v(0.25, -0.25, 0.25)));
    let s = match task {
        "push_cube" => vec![
            idle,
            step("approach", Some(G::go(Beside { object: "cube", offset: v(0.0, -0.08, 0.08) })), None, Until::Reached(0.01)),
            step("descend", Some(G::go(Beside { object: "cube", offset: v(0.0, -0.08, 0.0) })), None, Until::Reached(TOL)),
            step("push", Some(G::go(Offset(v(0.0, 0.25, 0.0)))), None, Until::Success),
        ],
        "pick_cube" => vec![
            idle,
            step("ready", None, Some(ready_r), Until::Reached(0.02)),
            step("approach", None, Some(G::go(above("cube", 0.06))), Until::Reached(0.01)),
            step("descend", None, Some(G::go(above("cube", 0.018))), Until::Reached(TOL)),
            step("grasp", None, Some(G::go(Hold).close(true)), Until::Wait(0.2)),
            step("lift", None, Some(G::go(Offset(v(0.0, 0.0, 0.08)))), Until::Reached(0.01)),
            step("lower", None, Some(G::go(Offset(v(0.0, 0.0, -0.075)))), Until::Reached(TOL)),
            step("release", None, Some(G::go(Hold).close(false)), Until::Success),
        ],
        "pick_place_cube" => vec![
            idle,
            step("ready", None, Some(ready_r), Until::Reached(0.02)),
            step("approach", None, Some(G::go(above("cube", 0.06))), Until::Reached(0.01)),
            step("descend", None, Some(G::go(above("cube", 0.018))), Until::Reached(TOL)),
            step("grasp", None, Some(G::go(Hold).close(true)), Until::Wait(0.25)),
            step("lift", None, Some(G::go(Offset(v(0.0, 0.0, 0.08)))), Until::Reached(0.01)),
            step(
                "carry",
                None,
                Some(G::go(CarryOver { object: "cube", over: "plate", clearance: 0.01, dx: 0.0, dy: 0.0 })),
                Until::Reached(TOL),
            ),
            step("release", None, Some(G::go(Hold).close(false)), Until::Success),
        ],
        "uprear_cup" => vec![
            idle,
            step("ready", None, Some(ready_r), Until::Reached(0.02)),
            step("approach", None, Some(G::go(above("cup", 0.06))), Until::Reached(0.01)),
            step("descend", None, Some(G::go(above("cup", 0.018))), Until::Reached(TOL)),
            step("grasp", None, Some(G::go(Hold).close(true)), Until::Wait(0.2)),
            step("lift", None, Some(G::go(Offset(v(0.0, 0.0, 0.10)))), Until::Reached(0.01)),
            step("rear", None, Some(G::go(Hold).rotate(rx(-std::f64::consts::FRAC_PI_2))), Until::Reached(0.01)),
            step(
                "lower",
                None,
                Some(G::go(CarryOver { object: "cup", over: "table", clearance: 0.004, dx: 0.0, dy: 0.0 })),
                Until::Reached(TOL),
            ),
            step("release", None, Some(G::go(Hold).close(false)), Until::Success),
        ],
        "ball_trashcan" => vec![
            idle,
            step("ready", None, Some(ready_r), Until::Reached(0.02)),
            step("approach", None, Some(G::go(above("ball", 0.06))), Until::Reached(0.01)),
            step("descend", None, Some(G::go(above("ball", 0.018))), Until::Reached(TOL)),
            step("grasp", None, Some(G::go(Hold).close(true)), Until::Wait(0.2)),
            step("lift", None, Some(G::go(Offset(v(0.0, 0.0, 0.16)))), Until::Reached(0.01)),
            step(
                "carry",
                None,
                Some(G::go(CarryOver { object: "ball", over: "trashcan", clearance: 0.03, dx: 0.0, dy: 0.0 })),
                Until::Reached(0.01),
            ),
            step("release", None, Some(G::go(Hold).close(false)), Until::Success),
        ],
        "ball_mug" => vec![
            idle,
            step("ready", None, Some(ready_r), Until::Reached(0.02)),
            step("approach", None, Some(G::go(above("ball", 0.06))), Until::Reached(0.01)),
            step("descend", None, Some(G::go(above("ball", 0.018))), Until::Reached(TOL)),
            step("grasp", None, Some(G::go(Hold).close(true)), Until::Wait(0.25)),
            step("lift", None, Some(G::go(Offset(v(0.0, 0.0, 0.12)))), Until::Reached(0.01)),
            step(
                "carry",
                None,
                Some(G::go(CarryOver { object: "ball", over: "mug", clearance: 0.02, dx: 0.0, dy: 0.0 })),
                Until::Reached(TOL),
            ),
            step("release", None, Some(G::go(Hold).close(false)), Until::Success),
        ],
        "ball_bimanual" => vec![
            idle,
            step("ready", Some(ready_l), Some(ready_r), Until::Reached(0.02)),
            step("approach", None, Some(G::go(above("ball", 0.06))), Until::Reached(0.01)),
            step("descend", None, Some(G::go(above("ball", 0.018))), Until::Reached(TOL)),
            step("grasp", None, Some(G::go(Hold).close(true)), Until::Wait(0.2)),
            step("lift", None, Some(G::go(Carry { object: "ball", to: v(0.34, -0.02, 0.25) })), Until::Reached(0.01)),
            step(
                "meet",
                Some(G::go(Beside { object: "ball", offset: v(0.0, 0.05, 0.0) })),
                None,
                Until::Reached(TOL),
            ),
            step("handover", Some(G::go(Hold).close(true)), None, Until::Success),
        ],
        "pot_bimanual" => vec![
            idle,
            step("ready", Some(ready_l), Some(ready_r), Until::Reached(0.02)),
            step(
                "approach",
                Some(G::go(Beside { object: "pot", offset: v(0.0, 0.14, 0.08) })),
                Some(G::go(Beside { object: "pot", offset: v(0.0, -0.14, 0.08) })),
                Until::Reached(0.01),
            ),
            step(
                "handles",
                Some(G::go(Beside { object: "pot", offset: v(0.0, 0.13, 0.04) })),
                Some(G::go(Beside { object: "pot", offset: v(0.0, -0.13, 0.04) })),
                Until::Reached(TOL),
            ),
            step("grasp", Some(G::go(Hold).close(true)), Some(G::go(Hold).close(true)), Until::Wait(0.2)),
            step(
                "lift",
                Some(G::go(Offset(v(0.0, 0.0, 0.08)))),
                Some(G::go(Offset(v(0.0, 0.0, 0.08)))),
                Until::Success,
            ),
        ],
        "pot_tomato_plate" => vec![
            idle,
            step("ready", Some(ready_l), None, Until::Reached(0.02)),
            step("approach lid", Some(G::go(Target::Above { object: "lid", dz: 0.06, dx: 0.0, dy: 0.06 })), None, Until::Reached(0.01)),
            step("descend lid", Some(G::go(Target::Above { object: "lid", dz: 0.015, dx: 0.0, dy: 0.06 })), None, Until::Reached(TOL)),
            step("grasp lid", Some(G::go(Hold).close(true)), None, Until::Wait(0.2)),
            step("lift lid", Some(G::go(Offset(v(0.0, 0.0, 0.08)))), None, Until::Reached(0.01)),
            step("move lid", Some(G::go(Carry { object: "lid", to: v(0.30, 0.36, 0.20) })), None, Until::Reached(0.01)),
            step("drop lid", Some(G::go(Hold).close(false)), None, Until::Wait(0.3)),
            step("clear", Some(G::go(Offset(v(0.0, 0.0, 0.06)))), None, Until::Reached(0.02)),
            step("ready right", None, Some(ready_r), Until::Reached(0.02)),
            step("approach tomato", None, Some(G::go(above("tomato", 0.08))), Until::Reached(0.01)),
            step("descend tomato", None, Some(G::go(above("tomato", 0.018))), Until::Reached(TOL)),
            step("grasp tomato", None, Some(G::go(Hold).close(true)), Until::Wait(0.2)),
            step("lift tomato", None, Some(G::go(Offset(v(0.0, 0.0, 0.12)))), Until::Reached(0.01)),
            step(
                "carry tomato",
                None,
                Some(G::go(CarryOver { object: "tomato", over: "plate", clearance: 0.01, dx: 0.0, dy: 0.0 })),
                Until::Reached(TOL),
            ),
            step("release tomato", None, Some(G::go(Hold).close(false)), Until::Success),
        ],
        "pen_brushpot" => vec![
            idle,
            step("ready", None, Some(ready_r), Until::Reached(0.02)),
            step("approach", None, Some(G::go(above("pen", 0.06))), Until::Reached(0.01)),
            step("descend", None, Some(G::go(above("pen", 0.018))), Until::Reached(TOL)),
            step("grasp", None, Some(G::go(Hold).close(true)), Until::Wait(0.2)),
            step("lift", None, Some(G::go(Offset(v(0.0, 0.0, 0.14)))), Until::Reached(0.01)),
            step("turn", None, Some(G::go(Hold).rotate(ry(-std::f64::consts::FRAC_PI_2))), Until::Reached(0.01)),
            step(
                "carry",
                None,
                Some(G::go(CarryOver { object: "pen", over: "brushpot", clearance: 0.02, dx: 0.0, dy: 0.0 })),
                Until::Reached(TOL),
            ),
            step("release", None, Some(G::go(Hold).close(false)), Until::Success),
        ],
        _ => return None,
    };
    Some(s)
}

/// Modality used for each shipped golden stream.
pub fn golden_modality(task: &str) -> Option<Modality> {
    Some(match task {
        "push_cube" | "pick_cube" | "ball_trashcan" => Modality::Vr,
        "pick_place_cube" | "ball_mug" => Modality::Vision,
        "uprear_cup" | "pot_tomato_plate" | "pen_brushpot" => Modality::Mocap,
        "ball_bimanual" | "pot_bimanual" => Modality::Exo,
        _ => return None,
    })
}

/// Head of the scripted VR operator in the pelvis frame.
fn vr_head() -> RigidTransform {
    RigidTransform::from_translation(v(0.05, 0.0, 0.7), FrameId::pelvis())
}

/// Session config used for a golden stream.
pub fn golden_config(robot: &str, task: &str) -> Option<SessionConfig> {
    let modality = golden_modality(task)?;
    let mut cfg = SessionConfig::new(robot, task, modality, "scripted");
    if modality == Modality::Vr {
        cfg.calibration = Some(CalibrationPoses {
            device_to_pelvis: None,
            head_to_pelvis: Some(Pose::from_transform(&vr_head())),
        });
    }
    Some(cfg)
}

/// Per-bone length ratio human/robot of the scripted MoCap performer.
const PERFORMER_RATIOS: [(&str, f64); 8] = [
    ("spine", 1.12),
    ("neck", 1.05),
    ("l_clavicle", 0.92),
    ("r_clavicle", 0.92),
    ("l_upper_arm", 1.08),
    ("r_upper_arm", 1.08),
    ("l_forearm", 0.95),
    ("r_forearm", 0.95),
];

struct HandIntent {
    pos: Vector3<f64>,
    goal: Vector3<f64>,
    rot: Option<UnitQuaternion<f64>>,
    rot_goal: Option<UnitQuaternion<f64>>,
    aperture: f64,
    aperture_goal: f64,
    /// VR and vision: integrated wrist command.
    wrist: Vector3<f64>,
}

pub struct SynthOutput {
    pub frames: Vec<HumanFrame>,
    pub text: String,
    pub episode: Episode,
}

struct Operator {
    modality: Modality,
    speed: f64,
    gain: f64,
    frame_every: usize,
    noise: f64,
    rng: ChaCha8Rng,
    hands: [HandModel; 2],
    hand_open: [DVector<f64>; 2],
    hand_fist: [DVector<f64>; 2],
    intent: [HandIntent; 2],
    q_des: DVector<f64>,
}

fn palm_link(side: Side) -> String {
    format!("{}palm", side.prefix())
}

impl Operator {
    fn new(pipe: &Pipeline) -> Result<Self, SynthError> {
        let robot = pipe.robot();
        let modality = pipe.cfg.modality;
        let hands = [Side::Left, Side::Right].map(|s| HandModel::from_robot(robot, s).expect("validated by pipeline"));
        let q = pipe.last_command().clone();
        let [(pl, _), (pr, _)] = pipe.env.hand_frames(&q).map_err(|e| ServiceError::Pipeline(e.to_string()))?;
        let wrist = |s: Side| {
            forward_kinematics(robot, &JointState::new(q.clone(), 0.0), &format!("{}wrist", s.prefix()))
                .expect("model has wrists")
                .translation
        };
        let intent = |palm: &Isometry3<f64>, w: Vector3<f64>| HandIntent {
            pos: palm.translation.vector,
            goal: palm.translation.vector,
            rot: None,
            rot_goal: None,
            aperture: 0.0,
            aperture_goal: 0.0,
            wrist: w,
        };
        let open = hands.clone().map(|h| {
            let mut q = DVector::zeros(h.dof_count());
            for i in 0..q.len() {
                q[i] = h.lower()[i].max(0.0);
            }
            q
        });
        let fist = [0, 1].map(|i| {
            let h = &hands[i];
            &open[i] + 0.9 * (h.upper() - &open[i])
        });
        let (speed, gain, frame_every, noise) = match modality {
            Modality::Vr => (0.25, 1.0, 1, 0.0),
            Modality::Vision => (0.18, 0.6, 2, 0.001),
            Modality::Mocap => (0.3, 1.0, 1, 0.0),
            Modality::Exo => (0.3, 1.0, 1, 0.0),
        };
        Ok(Operator {
            modality,
            speed,
            gain,
            frame_every,
            noise,
            rng: ChaCha8Rng::seed_from_u64(pipe.cfg.seed ^ 0x5eed),
            intent: [intent(&pl, wrist(Side::Left)), intent(&pr, wrist(Side::Right))],
            hand_open: open,
            hand_fist: fist,
            hands,
            q_des: q,
        })
    }

    fn hand_q(&self, h: usize) -> DVector<f64> {
        let a = self.intent[h].aperture;
        &self.hand_open[h] * (1.0 - a) + &self.hand_fist[h] * a
    }

    fn advance(&mut self, dt: f64) {
        for i in &mut self.intent {
            let d = i.goal - i.pos;
            let max = self.speed * dt;
            i.pos += if d.norm() > max { d * (max / d.norm()) } else { d };
            let da = i.aperture_goal - i.aperture;
            i.aperture += da.clamp(-4.0 * dt, 4.0 * dt);
            if let (Some(r), Some(g)) = (i.rot, i.rot_goal) {
                let ang = r.angle_to(&g);
                let max = 0.8 * dt;
                i.rot = Some(if ang > max { r.slerp(&g, max / ang) } else { g });
            }
        }
    }

    fn arrived(&self, h: usize) -> bool {
        let i = &self.intent[h];
        (i.goal - i.pos).norm() < 1e-9
            && (i.aperture - i.aperture_goal).abs() < 1e-9
            && match (i.rot, i.rot_goal) {
                (Some(r), Some(g)) => r.angle_to(&g) < 1e-9,
                _ => true,
            }
    }

    /// Aperture and orientation settled; position may still be tracking.
    fn arrived_pose(&self, h: usize) -> bool {
        let i = &self.intent[h];
        (i.aperture - i.aperture_goal).abs() < 1e-9
            && match (i.rot, i.rot_goal) {
                (Some(r), Some(g)) => r.angle_to(&g) < 1e-9,
                _ => true,
            }
    }

    /// Operator-side IK for MoCap and exoskeleton performers.
    fn solve_arms(&mut self, pipe: &Pipeline) {
        let robot = pipe.robot();
        for (h, side) in [Side::Left, Side::Right].into_iter().enumerate() {
            let i = &self.intent[h];
            let (cfg, rot) = match i.rot {
                Some(r) => (IkConfig { max_iters: 200, ..IkConfig::default() }, r),
                None => (IkConfig { max_iters: 200, ..IkConfig::position_only() }, UnitQuaternion::identity()),
            };
            let target = RigidTransform::new(i.pos, rot, FrameId::pelvis());
            if let Ok(r) = solve_ik(robot, &JointState::new(self.q_des.clone(), 0.0), &palm_link(side), &target, &cfg) {
                let range = robot.group_range(side.arm_group()).expect("arm group");
                self.q_des.rows_mut(range.start, range.len()).copy_from(&r.q.q.rows(range.start, range.len()));
            }
        }
    }

    fn hand_payload(&self, h: usize) -> HandPayload {
        let hand = &self.hands[h];
        let q = self.hand_q(h);
        match self.modality {
            Modality::Vr | Modality::Vision => HandPayload::Keypoints(hand.keypoints(&q).expect("in-range hand pose")),
            Modality::Mocap => HandPayload::Glove(GloveAngles(invert_affine(hand, hand.glove_mapping(), &q, GLOVE_DIM))),
            Modality::Exo => {
                HandPayload::ExoGlove(ExoGloveAngles(invert_affine(hand, hand.exo_glove_mapping(), &q, EXO_GLOVE_DIM)))
            }
        }
    }

    fn frame(&mut self, t: f64, pipe: &Pipeline) -> HumanFrame {
        let robot = pipe.robot();
        let calib = FrameCalibration::identity();
        let conv = self.modality.convention();
        let mut f = HumanFrame::empty(t, self.modality);
        f.hand_l = Some(self.hand_payload(0));
        f.hand_r = Some(self.hand_payload(1));
        let to_dev = |p: &RigidTransform| {
            Pose::from_transform(&revert_device_frame(p, conv, &calib).expect("identity calibration"))
        };
        match self.modality {
            Modality::Vr | Modality::Vision => {
                let q = pipe.last_command();
                let state = JointState::new(q.clone(), 0.0);
                let mut wrists = [None, None];
                for (h, side) in [Side::Left, Side::Right].into_iter().enumerate() {
                    let actual = forward_kinematics(robot, &state, &format!("{}wrist", side.prefix())).expect("wrist");
                    let mut p = self.intent[h].wrist;
                    if self.noise > 0.0 {
                        p += Vector3::from_fn(|_, _| self.rng.random_range(-self.noise..self.noise));
                    }
                    wrists[h] = Some(to_dev(&RigidTransform::new(p, actual.rotation, FrameId::pelvis())));
                }
                if self.modality == Modality::Vr {
                    f.head = Some(to_dev(&vr_head()));
                }
                [f.wrist_l, f.wrist_r] = wrists;
            }
            Modality::Mocap => {
                let state = JointState::new(self.q_des.clone(), 0.0);
                let fk = |link: &str| forward_kinematics(robot, &state, link).expect("link");
                let mut body: BTreeMap<String, Pose> = BTreeMap::new();
                for s in BODY_SEGMENTS {
                    body.insert(s.to_string(), to_dev(&RigidTransform::from_translation(v(0.0, 0.0, -0.45), FrameId::pelvis())));
                }
                let ratio = |b: &str| PERFORMER_RATIOS.iter().find(|(n, _)| *n == b).map(|x| x.1).unwrap_or(1.0);
                let pelvis = fk("pelvis");
                let torso = fk("torso");
                let t8 = pelvis.translation + ratio("spine") * (torso.translation - pelvis.translation);
                let head = t8 + ratio("neck") * (fk("head").translation - torso.translation);
                let put = |body: &mut BTreeMap<String, Pose>, seg: &str, p: Vector3<f64>, r: UnitQuaternion<f64>| {
                    body.insert(seg.to_string(), to_dev(&RigidTransform::new(p, r, FrameId::pelvis())));
                };
                put(&mut body, "pelvis", pelvis.translation, pelvis.rotation);
                put(&mut body, "t8", t8, torso.rotation);
                put(&mut body, "head", head, torso.rotation);
                for (side, seg, b) in [(Side::Left, "left", "l"), (Side::Right, "right", "r")] {
                    let pre = side.prefix();
                    let sh = fk(&format!("{pre}shoulder"));
                    let el = fk(&format!("{pre}forearm"));
                    let wr = fk(&format!("{pre}wrist"));
                    let s = t8 + ratio(&format!("{b}_clavicle")) * (sh.translation - torso.translation);
                    let e = s + ratio(&format!("{b}_upper_arm")) * (el.translation - sh.translation);
                    let w = e + ratio(&format!("{b}_forearm")) * (wr.translation - el.translation);
                    put(&mut body, &format!("{seg}_shoulder"), t8, torso.rotation);
                    put(&mut body, &format!("{seg}_upper_arm"), s, sh.rotation);
                    put(&mut body, &format!("{seg}_forearm"), e, el.rotation);
                    put(&mut body, &format!("{seg}_hand"), w, wr.rotation);
                }
                f.body = Some(body);
            }
            Modality::Exo => {
                for (side, slot) in [(Side::Left, &mut f.arm_q_l), (Side::Right, &mut f.arm_q_r)] {
                    let range = robot.group_range(side.arm_group()).expect("arm group");
                    let mut a = [0.0; 7];
                    for (k, x) in a.iter_mut().enumerate().take(range.len()) {
                        *x = self.q_des[range.start + k];
                    }
                    *slot = Some(a);
                }
            }
        }
        f
    }
}

fn invert_affine(hand: &HandModel, map: &[crate::kinematics::AffineEntry], q: &DVector<f64>, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for (i, name) in hand.dof_names().iter().enumerate() {
        if let Some(e) = map.iter().find(|e| &e.joint == name) {
            out[e.source] = (q[i] - e.b) / e.a;
        }
    }
    out
}

fn object_top(pipe: &Pipeline, name: &str) -> (Vector3<f64>, f64) {
    pipe.env.top_of(&pipe.world, name).expect("scripted objects exist")
}

fn object_center(pipe: &Pipeline, name: &str) -> Vector3<f64> {
    pipe.world.objects.get(name).map(|o| o.pose.translation.vector).unwrap_or_else(|| object_top(pipe, name).0)
}

/// Run the scripted operator against the live pipeline and return the
/// recorded stream.
pub fn synthesize(cfg: &SessionConfig, base: &Path) -> Result<SynthOutput, SynthError> {
    let steps = script(&cfg.task).ok_or_else(|| SynthError::NoScript(cfg.task.clone()))?;
    let mut pipe = Pipeline::new(cfg.clone(), base)?;
    let mut op = Operator::new(&pipe)?;
    let dt = pipe.dt();
    let mut frames = Vec::new();
    let mut text = String::new();
    let mut success = false;
    'script: for st in &steps {
        let goals = [&st.left, &st.right];
        let q = pipe.last_command().clone();
        let palms = pipe.env.hand_frames(&q).map_err(|e| ServiceError::Pipeline(e.to_string()))?;
        for h in 0..2 {
            let Some(g) = goals[h] else { continue };
            let i = &mut op.intent[h];
            i.goal = match &g.target {
                Target::Hold | Target::Carry { .. } | Target::CarryOver { .. } => i.goal,
                Target::At(p) => *p,
                Target::Above { object, dz, dx, dy } => {
                    let (c, top) = object_top(&pipe, object);
                    v(c.x + dx, c.y + dy, top + dz)
                }
                Target::Beside { object, offset } => object_center(&pipe, object) + offset,
                Target::Offset(d) => i.goal + d,
            };
            if let Some(r) = g.rotate {
                let base = i.rot.unwrap_or(palms[h].0.rotation);
                i.rot = Some(base);
                i.rot_goal = Some(r * base);
            }
            if let Some(c) = g.close {
                i.aperture_goal = if c { 1.0 } else { 0.0 };
                // A grasping performer keeps the wrist orientation it grasped with.
                if c && i.rot.is_none() && matches!(op.modality, Modality::Mocap | Modality::Exo) {
                    i.rot = Some(palms[h].0.rotation);
                    i.rot_goal = i.rot;
                }
            }
        }
        let start = pipe.world.t;
        let limit = 12.0;
        loop {
            // Adaptive carry goals track the observed object.
            let q = pipe.last_command().clone();
            let palms = pipe.env.hand_frames(&q).map_err(|e| ServiceError::Pipeline(e.to_string()))?;
            let mut err = [0.0f64; 2];
            for h in 0..2 {
                let Some(g) = goals[h] else { continue };
                let palm = palms[h].0.translation.vector;
                match &g.target {
                    Target::Carry { object, to } => {
                        let d = to - object_center(&pipe, object);
                        op.intent[h].goal = palm + d;
                        err[h] = d.norm();
                    }
                    Target::CarryOver { object, over, clearance, dx, dy } => {
                        let (c, top) = object_top(&pipe, over);
                        let half = pipe.env.half_height(&pipe.world, object).unwrap_or(0.0);
                        let to = v(c.x + dx, c.y + dy, top + clearance + half);
                        let d = to - object_center(&pipe, object);
                        op.intent[h].goal = palm + d;
                        err[h] = d.norm();
                    }
                    _ => err[h] = (op.intent[h].goal - palm).norm(),
                }
                if let Some(g) = op.intent[h].rot_goal {
                    err[h] = err[h].max(0.1 * palms[h].0.rotation.angle_to(&g));
                }
            }
            let done = match st.until {
                Until::Reached(tol) => (0..2).all(|h| match goals[h] {
                    None => true,
                    Some(g) if matches!(g.target, Target::Carry { .. } | Target::CarryOver { .. }) => {
                        op.arrived_pose(h) && err[h] < tol
                    }
                    Some(_) => op.arrived(h) && err[h] < tol,
                }),
                Until::Wait(d) => pipe.world.t - start >= d - 1e-9,
                Until::Success => false,
            };
            if done {
                break;
            }
            if pipe.world.t - start > limit {
                let objects: Vec<String> = pipe
                    .world
                    .objects
                    .iter()
                    .map(|(k, o)| {
                        let p = o.pose.translation.vector;
                        format!("{k}@({:.3},{:.3},{:.3}) r{:.2}", p.x, p.y, p.z, o.pose.rotation.angle())
                    })
                    .collect();
                let detail = format!(
                    "err {:.4}/{:.4}, closure {:.2}/{:.2}, att {:?}, palms {:?}, {}",
                    err[0],
                    err[1],
                    palms[0].1,
                    palms[1].1,
                    pipe.world.attachments.keys().collect::<Vec<_>>(),
                    palms.iter().map(|p| p.0.translation.vector.map(|x| (x * 1000.0).round() / 1000.0)).collect::<Vec<_>>(),
                    objects.join(" ")
                );
                return Err(SynthError::Stalled { task: cfg.task.clone(), step: st.label.into(), limit, detail });
            }

            op.advance(dt);
            let emit = pipe.ticks() % op.frame_every == 0;
            if emit {
                match op.modality {
                    Modality::Vr | Modality::Vision => {
                        for h in 0..2 {
                            let e = op.intent[h].pos - palms[h].0.translation.vector;
                            op.intent[h].wrist += op.gain * e;
                        }
                    }
                    Modality::Mocap | Modality::Exo => op.solve_arms(&pipe),
                }
                let t = pipe.ticks() as f64 * dt;
                let f = op.frame(t, &pipe);
                let line = serialize_frame(&f);
                let parsed = parse_frame(&line).map_err(ServiceError::Stream)?;
                pipe.ingest(parsed.clone())?;
                text.push_str(&line);
                text.push('\n');
                frames.push(parsed);
            }
            let out = pipe.tick()?;
            if out.success {
                success = true;
                break 'script;
            }
        }
    }
    if !success {
        return Err(SynthError::Unsolved(cfg.task.clone()));
    }
    pipe.finalize(None)?;
    Ok(SynthOutput { frames, text, episode: pipe.episode })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    #[ignore]
    fn synth_probe() {
        let only = std::env::var("SYNTH_TASK").ok();
        for task in crate::taskenv::STUDY_TASKS {
            if only.as_deref().is_some_and(|o| o != task) {
                continue;
            }
            let cfg = golden_config("h1_2_like", task).unwrap();
            match synthesize(&cfg, Path::new(".")) {
                Ok(o) => {
                    let r = o.episode.result.unwrap();
                    println!("{task}: ok frames={} ct={:?}", o.frames.len(), r.completion_time);
                }
                Err(e) => println!("{task}: ERR {e}"),
            }
        }
    }
}
