//! Kinematic benchmark environment: scene files, attach/release and settle
//! rules, articulations and latched success predicates.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DVector, Isometry3, Point3, Quaternion, Translation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::input::{format_float, Pose};
use crate::kinematics::{JointCommand, KinematicsError, RobotModel, Side};

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("invalid scene `{scene}`: {reason}")]
    InvalidScene { scene: String, reason: String },
    #[error("scene parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
}

// ---------------------------------------------------------------------------
// Scene description
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    Box { size: [f64; 3] },
    Sphere { radius: f64 },
    /// Axis along local Z.
    Cylinder { radius: f64, height: f64 },
    Composite { parts: Vec<Part> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Part {
    pub shape: Shape,
    pub offset: [f64; 3],
}

impl Shape {
    /// Local axis-aligned bounds.
    pub fn local_bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        match self {
            Shape::Box { size } => {
                let h = Vector3::from(*size) * 0.5;
                (-h, h)
            }
            Shape::Sphere { radius } => (Vector3::repeat(-radius), Vector3::repeat(*radius)),
            Shape::Cylinder { radius, height } => {
                let h = Vector3::new(*radius, *radius, height * 0.5);
                (-h, h)
            }
            Shape::Composite { parts } => {
                let mut lo = Vector3::repeat(f64::INFINITY);
                let mut hi = Vector3::repeat(f64::NEG_INFINITY);
                for p in parts {
                    let (a, b) = p.shape.local_bounds();
                    let o = Vector3::from(p.offset);
                    lo = lo.inf(&(a + o));
                    hi = hi.sup(&(b + o));
                }
                (lo, hi)
            }
        }
    }

    /// Distance from a local point to the surface; zero inside.
    pub fn surface_distance(&self, p: &Vector3<f64>) -> f64 {
        match self {
            Shape::Box { size } => {
                let h = Vector3::from(*size) * 0.5;
                (p.abs() - h).sup(&Vector3::zeros()).norm()
            }
            Shape::Sphere { radius } => (p.norm() - radius).max(0.0),
            Shape::Cylinder { radius, height } => {
                let dr = (p.x.hypot(p.y) - radius).max(0.0);
                let dz = (p.z.abs() - height * 0.5).max(0.0);
                dr.hypot(dz)
            }
            Shape::Composite { parts } => parts
                .iter()
                .map(|part| part.shape.surface_distance(&(p - Vector3::from(part.offset))))
                .fold(f64::INFINITY, f64::min),
        }
    }

    /// Distance from a local point to a hollow body's shell: inside the
    /// open cavity this is the gap to the inner wall, elsewhere the solid
    /// surface distance.
    pub fn shell_distance(&self, p: &Vector3<f64>, wall: f64) -> f64 {
        let (lo, hi) = self.local_bounds();
        let inner = match self {
            Shape::Cylinder { radius, .. } => Some(radius - wall - p.x.hypot(p.y)),
            Shape::Box { .. } => Some((p.x - lo.x - wall).min(hi.x - wall - p.x).min(p.y - lo.y - wall).min(hi.y - wall - p.y)),
            Shape::Composite { parts } => parts.first().and_then(|f| match f.shape {
                Shape::Cylinder { radius, .. } => {
                    let q = p - Vector3::from(f.offset);
                    Some(radius - wall - q.x.hypot(q.y))
                }
                _ => None,
            }),
            Shape::Sphere { .. } => None,
        };
        match inner {
            Some(gap) if gap > 0.0 && p.z > lo.z + wall => gap.hypot((p.z - hi.z).max(0.0)),
            _ => self.surface_distance(p),
        }
    }

    fn validate(&self, nested: bool) -> Result<(), String> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        match self {
            Shape::Box { size } if size.iter().all(|v| positive(*v)) => Ok(()),
            Shape::Sphere { radius } if positive(*radius) => Ok(()),
            Shape::Cylinder { radius, height } if positive(*radius) && positive(*height) => Ok(()),
            Shape::Composite { parts } if !nested && !parts.is_empty() => {
                parts.iter().try_for_each(|p| p.shape.validate(true))
            }
            Shape::Composite { .. } if nested => Err("composite parts must be primitives".into()),
            _ => Err("shape dimensions must be positive".into()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MassClass {
    Light,
    Heavy,
    Bimanual,
}

fn default_wall() -> f64 {
    0.01
}

fn default_true() -> bool {
    true
}

/// Static scenery that supports objects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureSpec {
    pub name: String,
    pub shape: Shape,
    pub pose: Pose,
    /// Open-top container: objects landing inside rest on its floor.
    #[serde(default)]
    pub hollow: bool,
    #[serde(default = "default_wall")]
    pub wall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub name: String,
    pub shape: Shape,
    pub pose: Pose,
    pub mass: MassClass,
    #[serde(default)]
    pub hollow: bool,
    #[serde(default = "default_wall")]
    pub wall: f64,
    #[serde(default = "default_true")]
    pub graspable: bool,
    /// Per-object reset jitter; the scene default applies when absent.
    #[serde(default)]
    pub jitter: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionSpec {
    pub name: String,
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl RegionSpec {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArticulationKind {
    /// Hinge: the handle orbits `pivot` about `axis`.
    Revolute,
    /// Slider: the handle translates along `axis`.
    Prismatic,
    /// Knob/cap: the value follows the hand's rotation about `axis`.
    Twist,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Actuation {
    Grasp,
    /// Driven by palm contact along `+axis` (buttons).
    Push,
}

fn default_actuation() -> Actuation {
    Actuation::Grasp
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArticulationSpec {
    pub name: String,
    pub kind: ArticulationKind,
    pub axis: [f64; 3],
    #[serde(default)]
    pub pivot: [f64; 3],
    /// Handle point at value 0.
    pub handle: [f64; 3],
    pub range: [f64; 2],
    pub initial: f64,
    #[serde(default = "default_actuation")]
    pub actuation: Actuation,
    /// Object carrying the articulation; geometry is then in its frame.
    #[serde(default)]
    pub parent: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HandSel {
    Left,
    Right,
    Any,
    Both,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cmp {
    #[default]
    Eq,
    Ge,
    Le,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Predicate {
    /// Object center inside a named region.
    InRegion { object: String, region: String },
    Held { object: String, hand: HandSel },
    ArticulationAt {
        name: String,
        value: f64,
        #[serde(default)]
        tol: f64,
        #[serde(default)]
        cmp: Cmp,
    },
    /// Released `object` resting on top of `support` within `tol`.
    OnTop { object: String, support: String, tol: f64 },
    /// Object's local Z within `tol` radians of world up.
    Upright { object: String, tol: f64 },
    /// Released `object` with its center inside the open container.
    Inside { object: String, container: String },
    /// Object center at least `height` above its reset height.
    Lifted { object: String, height: f64 },
    /// Stages satisfied in order; each stage latches.
    Sequence { steps: Vec<Predicate> },
    All { of: Vec<Predicate> },
    Any { of: Vec<Predicate> },
    Not { p: Box<Predicate> },
}

impl Predicate {
    fn sequence_count(&self) -> usize {
        match self {
            Predicate::Sequence { steps } => 1 + steps.iter().map(Predicate::sequence_count).sum::<usize>(),
            Predicate::All { of } | Predicate::Any { of } => of.iter().map(Predicate::sequence_count).sum(),
            Predicate::Not { p } => p.sequence_count(),
            _ => 0,
        }
    }

    fn references(&self, out: &mut Vec<(&'static str, String)>) {
        match self {
            Predicate::InRegion { object, region } => {
                out.push(("object", object.clone()));
                out.push(("region", region.clone()));
            }
            Predicate::Held { object, .. } | Predicate::Upright { object, .. } | Predicate::Lifted { object, .. } => {
                out.push(("object", object.clone()))
            }
            Predicate::ArticulationAt { name, .. } => out.push(("articulation", name.clone())),
            Predicate::OnTop { object, support, .. } => {
                out.push(("object", object.clone()));
                out.push(("body", support.clone()));
            }
            Predicate::Inside { object, container } => {
                out.push(("object", object.clone()));
                out.push(("container", container.clone()));
            }
            Predicate::Sequence { steps } => steps.iter().for_each(|s| s.references(out)),
            Predicate::All { of } | Predicate::Any { of } => of.iter().for_each(|s| s.references(out)),
            Predicate::Not { p } => p.references(out),
        }
    }
}

fn default_jitter() -> f64 {
    0.02
}

fn default_floor() -> f64 {
    -1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub name: String,
    pub criteria: String,
    pub timeout: f64,
    #[serde(default = "default_jitter")]
    pub jitter: f64,
    #[serde(default = "default_floor")]
    pub floor_z: f64,
    #[serde(default)]
    pub fixtures: Vec<FixtureSpec>,
    pub objects: Vec<ObjectSpec>,
    #[serde(default)]
    pub regions: Vec<RegionSpec>,
    #[serde(default)]
    pub articulations: Vec<ArticulationSpec>,
    pub success: Predicate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<String>,
}

impl SceneSpec {
    pub fn from_json(text: &str) -> Result<Self, TaskError> {
        let spec: SceneSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        let bad = |reason: String| TaskError::InvalidScene { scene: self.name.clone(), reason };
        if !(self.timeout.is_finite() && self.timeout > 0.0) {
            return Err(bad("timeout must be positive".into()));
        }
        if !(self.jitter.is_finite() && self.jitter >= 0.0) {
            return Err(bad("jitter must be non-negative".into()));
        }
        let mut names = BTreeSet::new();
        let all_names = self
            .fixtures
            .iter()
            .map(|f| &f.name)
            .chain(self.objects.iter().map(|o| &o.name))
            .chain(self.regions.iter().map(|r| &r.name))
            .chain(self.articulations.iter().map(|a| &a.name));
        for n in all_names {
            if !names.insert(n.as_str()) {
                return Err(bad(format!("duplicate name `{n}`")));
            }
        }
        for f in &self.fixtures {
            f.shape.validate(false).map_err(|e| bad(format!("{}: {e}", f.name)))?;
            check_pose(&f.pose).map_err(|e| bad(format!("{}: {e}", f.name)))?;
        }
        for o in &self.objects {
            o.shape.validate(false).map_err(|e| bad(format!("{}: {e}", o.name)))?;
            check_pose(&o.pose).map_err(|e| bad(format!("{}: {e}", o.name)))?;
            if o.jitter.is_some_and(|j| !(j.is_finite() && j >= 0.0)) {
                return Err(bad(format!("{}: jitter must be non-negative", o.name)));
            }
        }
        for r in &self.regions {
            if (0..3).any(|i| !(r.min[i] <= r.max[i])) {
                return Err(bad(format!("region {} has min > max", r.name)));
            }
        }
        for a in &self.articulations {
            let n = Vector3::from(a.axis).norm();
            if !(n > 1e-9) || !(a.range[0] <= a.range[1]) || a.initial < a.range[0] || a.initial > a.range[1] {
                return Err(bad(format!("articulation {}: bad axis, range or initial value", a.name)));
            }
            if let Some(p) = &a.parent {
                if !self.objects.iter().any(|o| &o.name == p) {
                    return Err(bad(format!("articulation {}: unknown parent `{p}`", a.name)));
                }
            }
        }
        let mut refs = Vec::new();
        self.success.references(&mut refs);
        for (kind, name) in refs {
            let ok = match kind {
                "object" => self.objects.iter().any(|o| o.name == name),
                "region" => self.regions.iter().any(|r| r.name == name),
                "articulation" => self.articulations.iter().any(|a| a.name == name),
                "body" => self.objects.iter().any(|o| o.name == name) || self.fixtures.iter().any(|f| f.name == name),
                "container" => {
                    self.objects.iter().any(|o| o.name == name && o.hollow)
                        || self.fixtures.iter().any(|f| f.name == name && f.hollow)
                }
                _ => unreachable!(),
            };
            if !ok {
                return Err(bad(format!("predicate references undeclared {kind} `{name}`")));
            }
        }
        Ok(())
    }
}

fn check_pose(p: &Pose) -> Result<(), String> {
    if p.p.iter().chain(&p.q).any(|v| !v.is_finite()) {
        return Err("non-finite pose".into());
    }
    let n = p.q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (n - 1.0).abs() > 1e-3 {
        return Err("pose quaternion is not unit".into());
    }
    Ok(())
}

pub fn pose_to_iso(p: &Pose) -> Isometry3<f64> {
    let q = UnitQuaternion::from_quaternion(Quaternion::new(p.q[0], p.q[1], p.q[2], p.q[3]));
    Isometry3::from_parts(Translation3::from(Vector3::from(p.p)), q)
}

pub fn iso_to_pose(iso: &Isometry3<f64>) -> Pose {
    let q = iso.rotation.quaternion();
    Pose { p: iso.translation.vector.into(), q: [q.w, q.i, q.j, q.k] }
}

macro_rules! builtin_tasks {
    ($($name:literal),* $(,)?) => {
        /// Task names in table order.
        pub const TASK_NAMES: &[&str] = &[$($name),*];
        fn builtin_text(name: &str) -> Option<&'static str> {
            match name {
                $($name => Some(include_str!(concat!("../data/tasks/", $name, ".json"))),)*
                _ => None,
            }
        }
    };
}

builtin_tasks!(
    "push_cube",
    "pick_cube",
    "pick_place_cube",
    "uprear_cup",
    "ball_trashcan",
    "rotate_faucet",
    "rotate_hearth",
    "open_microwave",
    "close_microwave",
    "open_drawer",
    "close_drawer",
    "lift_mug",
    "open_laptop",
    "ball_mug",
    "ball_bimanual",
    "pot_bimanual",
    "pot_tomato",
    "pot_tray",
    "stack_boxes",
    "pan_hearth",
    "tidyup_table",
    "pour_water",
    "pot_tomato_out",
    "plate_oven",
    "pot_tomato_plate",
    "pen_brushpot",
    "drawer_book",
    "bread_toaster",
    "stack_toyblocks",
    "twist_bottle_cap",
);

/// The ten tasks of the user study, in their numbered order.
pub const STUDY_TASKS: [&str; 10] = [
    "push_cube",
    "pick_cube",
    "pick_place_cube",
    "uprear_cup",
    "ball_trashcan",
    "ball_mug",
    "ball_bimanual",
    "pot_bimanual",
    "pot_tomato_plate",
    "pen_brushpot",
];

pub fn builtin_scene(name: &str) -> Result<SceneSpec, TaskError> {
    let text = builtin_text(name).ok_or_else(|| TaskError::UnknownTask(name.to_string()))?;
    SceneSpec::from_json(text)
}

// ---------------------------------------------------------------------------
// World state
// ---------------------------------------------------------------------------

pub const HANDS: [Side; 2] = [Side::Left, Side::Right];

fn hand_index(side: Side) -> usize {
    match side {
        Side::Left => 0,
        Side::Right => 1,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Holder {
    Hand(Side),
    Both,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Attachment {
    pub holder: Holder,
    /// Object pose in the holder frame.
    pub offset: Isometry3<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArticulationGrasp {
    pub name: String,
    pub last_palm: Isometry3<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HandStatus {
    pub palm: Isometry3<f64>,
    /// Mean fingertip-to-palm distance over its open-hand value.
    pub closure: f64,
    pub closed: bool,
    /// Time and object of the last closing event (bimanual pairing).
    pub closed_at: Option<(f64, String)>,
    pub articulation: Option<ArticulationGrasp>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectState {
    pub pose: Isometry3<f64>,
    pub reset_z: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldState {
    pub t: f64,
    pub q: DVector<f64>,
    pub objects: BTreeMap<String, ObjectState>,
    pub articulations: BTreeMap<String, f64>,
    pub attachments: BTreeMap<String, Attachment>,
    pub hands: [HandStatus; 2],
    /// Progress of each sequence node, preorder.
    pub latches: Vec<usize>,
    pub satisfied_at: Option<f64>,
}

impl WorldState {
    pub fn hand(&self, side: Side) -> &HandStatus {
        &self.hands[hand_index(side)]
    }

    pub fn holding(&self, side: Side) -> Option<&str> {
        self.attachments
            .iter()
            .find(|(_, a)| a.holder == Holder::Hand(side) || a.holder == Holder::Both)
            .map(|(k, _)| k.as_str())
    }

    pub fn snapshot(&self) -> WorldSnapshot {
        WorldSnapshot {
            t: self.t,
            objects: self.objects.iter().map(|(k, o)| (k.clone(), iso_to_pose(&o.pose))).collect(),
            articulations: self.articulations.clone(),
            attachments: self
                .attachments
                .iter()
                .map(|(k, a)| {
                    let h = match a.holder {
                        Holder::Hand(s) => s.name().to_string(),
                        Holder::Both => "both".to_string(),
                    };
                    (k.clone(), h)
                })
                .collect(),
            closure: [self.hands[0].closure, self.hands[1].closure],
            success: self.satisfied_at.is_some(),
        }
    }

    /// Canonical text of the observable state; stable across runs.
    pub fn canonical(&self) -> String {
        let mut s = format!("t={}", format_float(self.t));
        for (k, o) in &self.objects {
            let p = iso_to_pose(&o.pose);
            s.push_str(&format!(";{k}:"));
            for v in p.p.iter().chain(&p.q) {
                s.push_str(&format_float(*v));
                s.push(',');
            }
        }
        for (k, v) in &self.articulations {
            s.push_str(&format!(";{k}={}", format_float(*v)));
        }
        for (k, a) in &self.attachments {
            s.push_str(&format!(";{k}@{:?}", a.holder));
        }
        s.push_str(&format!(";latches={:?};sat={:?}", self.latches, self.satisfied_at.map(format_float)));
        s
    }
}

/// Serializable view of a world state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSnapshot {
    pub t: f64,
    pub objects: BTreeMap<String, Pose>,
    pub articulations: BTreeMap<String, f64>,
    pub attachments: BTreeMap<String, String>,
    pub closure: [f64; 2],
    pub success: bool,
}

// ---------------------------------------------------------------------------
// Environment
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraspParams {
    pub grasp_radius: f64,
    pub closure_threshold: f64,
    pub release_threshold: f64,
    pub bimanual_window: f64,
    pub push_margin: f64,
}

impl Default for GraspParams {
    fn default() -> Self {
        GraspParams {
            grasp_radius: 0.04,
            closure_threshold: 0.6,
            release_threshold: 0.75,
            bimanual_window: 0.25,
            push_margin: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum GraspOutcome {
    Attached(String),
    AttachedBoth(String),
    Handover(String),
    Articulation(String),
    Failed(&'static str),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvEvent {
    pub t: f64,
    pub hand: Option<Side>,
    pub kind: String,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuccessStatus {
    pub success: bool,
    pub satisfied_at: Option<f64>,
}

#[derive(Clone, Copy)]
enum BodyRef<'a> {
    Fixture(&'a FixtureSpec),
    Object(&'a ObjectSpec),
}

impl BodyRef<'_> {
    fn shape(&self) -> &Shape {
        match self {
            BodyRef::Fixture(f) => &f.shape,
            BodyRef::Object(o) => &o.shape,
        }
    }

    fn hollow(&self) -> Option<f64> {
        match self {
            BodyRef::Fixture(f) => f.hollow.then_some(f.wall),
            BodyRef::Object(o) => o.hollow.then_some(o.wall),
        }
    }
}

/// World-frame bounds of a posed shape.
fn world_bounds(shape: &Shape, pose: &Isometry3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let c = pose.translation.vector;
    match shape {
        Shape::Sphere { radius } => (c - Vector3::repeat(*radius), c + Vector3::repeat(*radius)),
        Shape::Cylinder { radius, height } => {
            let axis = pose.rotation * Vector3::z();
            let h = Vector3::from_fn(|i, _| {
                axis[i].abs() * height * 0.5 + radius * (1.0 - axis[i] * axis[i]).max(0.0).sqrt()
            });
            (c - h, c + h)
        }
        Shape::Box { .. } => {
            let (lo, hi) = shape.local_bounds();
            let half = (hi - lo) * 0.5;
            let r = pose.rotation.to_rotation_matrix();
            let h = Vector3::from_fn(|i, _| (0..3).map(|j| r[(i, j)].abs() * half[j]).sum());
            let mid = pose.transform_point(&Point3::from((lo + hi) * 0.5)).coords;
            (mid - h, mid + h)
        }
        Shape::Composite { parts } => {
            let mut a = Vector3::repeat(f64::INFINITY);
            let mut b = Vector3::repeat(f64::NEG_INFINITY);
            for p in parts {
                let part = pose * Isometry3::translation(p.offset[0], p.offset[1], p.offset[2]);
                let (lo, hi) = world_bounds(&p.shape, &part);
                a = a.inf(&lo);
                b = b.sup(&hi);
            }
            (a, b)
        }
    }
}

/// A scene bound to a robot.
#[derive(Clone, Debug)]
pub struct TaskEnv {
    pub spec: SceneSpec,
    pub robot: RobotModel,
    pub params: GraspParams,
    palm_links: [usize; 2],
    tip_links: [Vec<usize>; 2],
    open_spread: [f64; 2],
}

impl TaskEnv {
    pub fn new(spec: SceneSpec, robot: RobotModel) -> Result<Self, TaskError> {
        Self::with_params(spec, robot, GraspParams::default())
    }

    pub fn with_params(spec: SceneSpec, robot: RobotModel, params: GraspParams) -> Result<Self, TaskError> {
        spec.validate()?;
        let mapping = robot.hand_mapping.as_ref().ok_or_else(|| TaskError::InvalidScene {
            scene: spec.name.clone(),
            reason: format!("robot {} has no hand mapping", robot.name()),
        })?;
        let palm_links = [
            robot.link(&format!("left_{}", mapping.palm))?,
            robot.link(&format!("right_{}", mapping.palm))?,
        ];
        let tip_links = [robot.fingertip_links(Side::Left).to_vec(), robot.fingertip_links(Side::Right).to_vec()];
        let mut env = TaskEnv { spec, robot, params, palm_links, tip_links, open_spread: [1.0, 1.0] };
        let poses = env.robot.link_poses(&env.robot.home().q)?;
        env.open_spread = [env.raw_spread(&poses, 0), env.raw_spread(&poses, 1)];
        Ok(env)
    }

    fn raw_spread(&self, poses: &[Isometry3<f64>], h: usize) -> f64 {
        let palm = poses[self.palm_links[h]].translation.vector;
        let tips = &self.tip_links[h];
        tips.iter().map(|&l| (poses[l].translation.vector - palm).norm()).sum::<f64>() / tips.len() as f64
    }

    /// Closure metric and palm frame of each hand at `q`.
    pub fn hand_frames(&self, q: &DVector<f64>) -> Result<[(Isometry3<f64>, f64); 2], TaskError> {
        let poses = self.robot.link_poses(q)?;
        Ok([0, 1].map(|h| (poses[self.palm_links[h]], self.raw_spread(&poses, h) / self.open_spread[h])))
    }

    fn object_spec(&self, name: &str) -> Option<&ObjectSpec> {
        self.spec.objects.iter().find(|o| o.name == name)
    }

    fn articulation_spec(&self, name: &str) -> Option<&ArticulationSpec> {
        self.spec.articulations.iter().find(|a| a.name == name)
    }

    fn body(&self, name: &str) -> Option<BodyRef<'_>> {
        self.object_spec(name)
            .map(BodyRef::Object)
            .or_else(|| self.spec.fixtures.iter().find(|f| f.name == name).map(BodyRef::Fixture))
    }

    fn body_pose(&self, state: &WorldState, name: &str) -> Option<Isometry3<f64>> {
        state
            .objects
            .get(name)
            .map(|o| o.pose)
            .or_else(|| self.spec.fixtures.iter().find(|f| f.name == name).map(|f| pose_to_iso(&f.pose)))
    }

    fn bounds(&self, state: &WorldState, name: &str) -> Option<(Vector3<f64>, Vector3<f64>)> {
        Some(world_bounds(self.body(name)?.shape(), &self.body_pose(state, name)?))
    }

    /// Deterministic initial state: initial poses plus seeded XY jitter,
    /// then settled.
    pub fn reset(&self, seed: u64) -> WorldState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut objects = BTreeMap::new();
        for o in &self.spec.objects {
            let j = o.jitter.unwrap_or(self.spec.jitter);
            let mut pose = pose_to_iso(&o.pose);
            if j > 0.0 {
                pose.translation.vector.x += rng.random_range(-j..=j);
                pose.translation.vector.y += rng.random_range(-j..=j);
            }
            objects.insert(o.name.clone(), ObjectState { pose, reset_z: pose.translation.vector.z });
        }
        let q = self.robot.home().q;
        let frames = self.hand_frames(&q).expect("home pose is valid");
        let hands = frames.map(|(palm, closure)| HandStatus {
            palm,
            closure,
            closed: false,
            closed_at: None,
            articulation: None,
        });
        let mut state = WorldState {
            t: 0.0,
            q,
            objects,
            articulations: self.spec.articulations.iter().map(|a| (a.name.clone(), a.initial)).collect(),
            attachments: BTreeMap::new(),
            hands,
            latches: vec![0; self.spec.success.sequence_count()],
            satisfied_at: None,
        };
        self.settle(&mut state);
        for o in state.objects.values_mut() {
            o.reset_z = o.pose.translation.vector.z;
        }
        state
    }

    /// Highest support surface under an object with world bounds
    /// `lo..hi` whose height is at most the object's bottom. An open
    /// container supports on its floor when the object's footprint fits
    /// through the opening, otherwise on its rim.
    fn support_height(&self, state: &WorldState, exclude: &str, lo: &Vector3<f64>, hi: &Vector3<f64>) -> f64 {
        let c = (lo + hi) * 0.5;
        let mut best = self.spec.floor_z;
        let names = self
            .spec
            .fixtures
            .iter()
            .map(|f| f.name.as_str())
            .chain(self.spec.objects.iter().map(|o| o.name.as_str()));
        for name in names {
            if name == exclude || state.attachments.contains_key(name) {
                continue;
            }
            let body = self.body(name).expect("declared body");
            let (blo, bhi) = self.bounds(state, name).expect("declared body");
            if c.x < blo.x || c.x > bhi.x || c.y < blo.y || c.y > bhi.y {
                continue;
            }
            let fits = |m: f64| lo.x >= blo.x + m && hi.x <= bhi.x - m && lo.y >= blo.y + m && hi.y <= bhi.y - m;
            let surface = match body.hollow() {
                Some(wall) if fits(wall) => blo.z + wall,
                _ => bhi.z,
            };
            if surface <= lo.z + 1e-9 && surface > best {
                best = surface;
            }
        }
        best
    }

    /// Drop every free object onto the highest surface below it, lowest
    /// objects first so stacks settle consistently.
    fn settle(&self, state: &mut WorldState) {
        let mut order: Vec<(f64, String)> = state
            .objects
            .keys()
            .filter(|k| !state.attachments.contains_key(*k))
            .map(|k| (self.bounds(state, k).expect("object").0.z, k.clone()))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        for (_, name) in order {
            let (lo, hi) = self.bounds(state, &name).expect("object");
            let s = self.support_height(state, &name, &lo, &hi);
            state.objects.get_mut(&name).expect("object").pose.translation.vector.z += s - lo.z;
        }
    }

    fn articulation_frame(&self, state: &WorldState, a: &ArticulationSpec) -> Isometry3<f64> {
        a.parent.as_ref().and_then(|p| state.objects.get(p)).map(|o| o.pose).unwrap_or_else(Isometry3::identity)
    }

    /// World position of an articulation's handle at its current value.
    pub fn handle_position(&self, state: &WorldState, name: &str) -> Option<Vector3<f64>> {
        let a = self.articulation_spec(name)?;
        let v = state.articulations[name];
        let frame = self.articulation_frame(state, a);
        let axis = nalgebra::Unit::new_normalize(Vector3::from(a.axis));
        let handle = Vector3::from(a.handle);
        let local = match a.kind {
            ArticulationKind::Revolute => {
                let pivot = Vector3::from(a.pivot);
                pivot + UnitQuaternion::from_axis_angle(&axis, v) * (handle - pivot)
            }
            ArticulationKind::Prismatic => handle + axis.into_inner() * v,
            ArticulationKind::Twist => handle,
        };
        Some(frame.transform_point(&Point3::from(local)).coords)
    }

    /// Attempt a grasp with one hand at the current state.
    pub fn try_grasp(&self, state: &mut WorldState, side: Side) -> GraspOutcome {
        let h = hand_index(side);
        let hand = &state.hands[h];
        if hand.closure >= self.params.closure_threshold {
            return GraspOutcome::Failed("hand_open");
        }
        if state.holding(side).is_some() || hand.articulation.is_some() {
            return GraspOutcome::Failed("already_holding");
        }
        let palm = hand.palm;
        let pp = palm.translation.vector;
        enum Cand<'a> {
            Obj(&'a ObjectSpec),
            Art(&'a ArticulationSpec),
        }
        let mut best: Option<(f64, Cand<'_>)> = None;
        for o in self.spec.objects.iter().filter(|o| o.graspable) {
            if let Some(att) = state.attachments.get(&o.name) {
                if att.holder == Holder::Both || att.holder == Holder::Hand(side) {
                    continue;
                }
            }
            let pose = state.objects[&o.name].pose;
            let local = pose.inverse_transform_point(&Point3::from(pp)).coords;
            let d = if o.hollow { o.shape.shell_distance(&local, o.wall) } else { o.shape.surface_distance(&local) };
            if d <= self.params.grasp_radius && best.as_ref().is_none_or(|b| d < b.0) {
                best = Some((d, Cand::Obj(o)));
            }
        }
        for a in self.spec.articulations.iter().filter(|a| a.actuation == Actuation::Grasp) {
            if state.hands.iter().any(|hs| hs.articulation.as_ref().is_some_and(|g| g.name == a.name)) {
                continue;
            }
            let d = (self.handle_position(state, &a.name).expect("declared") - pp).norm();
            if d <= self.params.grasp_radius && best.as_ref().is_none_or(|b| d < b.0) {
                best = Some((d, Cand::Art(a)));
            }
        }
        let Some((_, cand)) = best else {
            return GraspOutcome::Failed("no_object_in_reach");
        };
        match cand {
            Cand::Art(a) => {
                state.hands[h].articulation = Some(ArticulationGrasp { name: a.name.clone(), last_palm: palm });
                GraspOutcome::Articulation(a.name.clone())
            }
            Cand::Obj(o) if o.mass == MassClass::Bimanual => {
                let other = &state.hands[1 - h];
                let paired = other.closed
                    && state.holding(HANDS[1 - h]).is_none()
                    && other.closed_at.as_ref().is_some_and(|(t, name)| {
                        name == &o.name && state.t - t <= self.params.bimanual_window + 1e-9
                    });
                state.hands[h].closed_at = Some((state.t, o.name.clone()));
                if !paired {
                    return GraspOutcome::Failed("bimanual_requires_both");
                }
                let frame = self.pair_frame(state);
                let pose = state.objects[&o.name].pose;
                state
                    .attachments
                    .insert(o.name.clone(), Attachment { holder: Holder::Both, offset: frame.inverse() * pose });
                GraspOutcome::AttachedBoth(o.name.clone())
            }
            Cand::Obj(o) => {
                let pose = state.objects[&o.name].pose;
                let handover = state.attachments.contains_key(&o.name);
                state
                    .attachments
                    .insert(o.name.clone(), Attachment { holder: Holder::Hand(side), offset: palm.inverse() * pose });
                if handover {
                    GraspOutcome::Handover(o.name.clone())
                } else {
                    GraspOutcome::Attached(o.name.clone())
                }
            }
        }
    }

    /// Frame carried by two hands: palm midpoint, no rotation.
    fn pair_frame(&self, state: &WorldState) -> Isometry3<f64> {
        let mid = (state.hands[0].palm.translation.vector + state.hands[1].palm.translation.vector) * 0.5;
        Isometry3::from_parts(Translation3::from(mid), UnitQuaternion::identity())
    }

    fn release(&self, state: &mut WorldState, side: Side) -> Vec<String> {
        let h = hand_index(side);
        state.hands[h].articulation = None;
        let held: Vec<String> = state
            .attachments
            .iter()
            .filter(|(_, a)| a.holder == Holder::Hand(side) || a.holder == Holder::Both)
            .map(|(k, _)| k.clone())
            .collect();
        for k in &held {
            state.attachments.remove(k);
        }
        held
    }

    /// Advance the world by `dt` under joint command `cmd`.
    pub fn step(&self, state: &WorldState, cmd: &JointCommand, dt: f64) -> (WorldState, Vec<EnvEvent>) {
        let mut s = state.clone();
        let mut events = Vec::new();
        let dt = if dt.is_finite() { dt.clamp(1e-6, 0.1) } else { 0.1 };
        s.t = state.t + dt;
        let mut ev = |t: f64, hand: Option<Side>, kind: &str, detail: String| {
            events.push(EnvEvent { t, hand, kind: kind.to_string(), detail })
        };
        if cmd.q.len() != s.q.len() || cmd.q.iter().any(|v| !v.is_finite()) {
            ev(s.t, None, "warning", "command rejected: wrong size or non-finite".into());
        } else {
            s.q = cmd.q.clone();
            self.robot.clamp_to_limits(&mut s.q);
        }
        let frames = self.hand_frames(&s.q).expect("clamped command is valid");

        let mut closing = [false; 2];
        for h in 0..2 {
            s.hands[h].palm = frames[h].0;
            s.hands[h].closure = frames[h].1;
            let side = HANDS[h];
            if s.hands[h].closed && frames[h].1 > self.params.release_threshold {
                s.hands[h].closed = false;
                s.hands[h].closed_at = None;
                let art = s.hands[h].articulation.as_ref().map(|a| a.name.clone());
                for obj in self.release(&mut s, side) {
                    ev(s.t, Some(side), "release", obj);
                }
                if let Some(a) = art {
                    ev(s.t, Some(side), "release", a);
                }
            } else if !s.hands[h].closed && frames[h].1 < self.params.closure_threshold {
                s.hands[h].closed = true;
                closing[h] = true;
            }
        }
        for h in 0..2 {
            if closing[h] {
                let side = HANDS[h];
                match self.try_grasp(&mut s, side) {
                    GraspOutcome::Failed(reason) => ev(s.t, Some(side), "grasp_failed", reason.to_string()),
                    GraspOutcome::Attached(o) => ev(s.t, Some(side), "grasp", o),
                    GraspOutcome::AttachedBoth(o) => ev(s.t, Some(side), "grasp_both", o),
                    GraspOutcome::Handover(o) => ev(s.t, Some(side), "handover", o),
                    GraspOutcome::Articulation(a) => ev(s.t, Some(side), "grasp_articulation", a),
                }
            }
        }

        // Attached objects ride their holder frames.
        let pair = self.pair_frame(&s);
        let updates: Vec<(String, Isometry3<f64>)> = s
            .attachments
            .iter()
            .map(|(k, a)| {
                let frame = match a.holder {
                    Holder::Hand(side) => s.hands[hand_index(side)].palm,
                    Holder::Both => pair,
                };
                (k.clone(), frame * a.offset)
            })
            .collect();
        for (k, pose) in updates {
            s.objects.get_mut(&k).expect("object").pose = pose;
        }

        self.drive_articulations(&mut s);
        self.push_objects(&mut s);
        self.settle(&mut s);
        (s, events)
    }

    fn drive_articulations(&self, s: &mut WorldState) {
        for h in 0..2 {
            let Some(g) = s.hands[h].articulation.clone() else { continue };
            let a = self.articulation_spec(&g.name).expect("declared");
            let frame = self.articulation_frame(s, a);
            let axis = frame.rotation * Vector3::from(a.axis).normalize();
            let palm = s.hands[h].palm;
            let (p0, p1) = (g.last_palm.translation.vector, palm.translation.vector);
            let delta = match a.kind {
                ArticulationKind::Revolute => {
                    let pivot = frame.transform_point(&Point3::from(Vector3::from(a.pivot))).coords;
                    let proj = |p: Vector3<f64>| {
                        let r = p - pivot;
                        r - axis * axis.dot(&r)
                    };
                    let (r0, r1) = (proj(p0), proj(p1));
                    if r0.norm() < 1e-6 || r1.norm() < 1e-6 {
                        0.0
                    } else {
                        axis.dot(&r0.cross(&r1)).atan2(r0.dot(&r1))
                    }
                }
                ArticulationKind::Prismatic => axis.dot(&(p1 - p0)),
                ArticulationKind::Twist => {
                    let r = palm.rotation * g.last_palm.rotation.inverse();
                    let q = r.quaternion();
                    let mut ang = 2.0 * axis.dot(&q.imag()).atan2(q.w);
                    if ang > std::f64::consts::PI {
                        ang -= 2.0 * std::f64::consts::PI;
                    } else if ang < -std::f64::consts::PI {
                        ang += 2.0 * std::f64::consts::PI;
                    }
                    ang
                }
            };
            let v = s.articulations.get_mut(&g.name).expect("declared");
            *v = (*v + delta).clamp(a.range[0], a.range[1]);
            if let Some(g) = &mut s.hands[h].articulation {
                g.last_palm = palm;
            }
        }
        for a in self.spec.articulations.iter().filter(|a| a.actuation == Actuation::Push) {
            for h in 0..2 {
                if s.hands[h].articulation.is_some() || s.holding(HANDS[h]).is_some() {
                    continue;
                }
                let handle = self.handle_position(s, &a.name).expect("declared");
                let frame = self.articulation_frame(s, a);
                let axis = frame.rotation * Vector3::from(a.axis).normalize();
                let r = s.hands[h].palm.translation.vector - handle;
                let along = axis.dot(&r);
                if (r - axis * along).norm() <= self.params.grasp_radius && along > 0.0 && along <= self.params.grasp_radius
                {
                    let v = s.articulations.get_mut(&a.name).expect("declared");
                    *v = (*v + along).clamp(a.range[0], a.range[1]);
                }
            }
        }
    }

    /// Free palms shove light objects horizontally out of contact.
    fn push_objects(&self, s: &mut WorldState) {
        let m = self.params.push_margin;
        for h in 0..2 {
            if s.holding(HANDS[h]).is_some() || s.hands[h].articulation.is_some() {
                continue;
            }
            let p = s.hands[h].palm.translation.vector;
            for o in self.spec.objects.iter().filter(|o| o.mass == MassClass::Light) {
                if s.attachments.contains_key(&o.name) {
                    continue;
                }
                let (lo, hi) = self.bounds(s, &o.name).expect("object");
                if p.z < lo.z - m || p.z > hi.z + m {
                    continue;
                }
                let pen = [p.x - (lo.x - m), (hi.x + m) - p.x, p.y - (lo.y - m), (hi.y + m) - p.y];
                if pen.iter().any(|d| *d <= 0.0) {
                    continue;
                }
                let (i, d) = pen.iter().enumerate().fold((0, f64::INFINITY), |b, (i, d)| if *d < b.1 { (i, *d) } else { b });
                let shift = match i {
                    0 => Vector3::new(d, 0.0, 0.0),
                    1 => Vector3::new(-d, 0.0, 0.0),
                    2 => Vector3::new(0.0, d, 0.0),
                    _ => Vector3::new(0.0, -d, 0.0),
                };
                s.objects.get_mut(&o.name).expect("object").pose.translation.vector += shift;
            }
        }
    }

    fn resting(&self, s: &WorldState, object: &str) -> bool {
        !s.attachments.contains_key(object)
    }

    fn evaluate(&self, p: &Predicate, s: &WorldState, next: &mut usize, latches: &mut [usize]) -> bool {
        match p {
            Predicate::InRegion { object, region } => {
                let r = self.spec.regions.iter().find(|r| &r.name == region).expect("validated");
                r.contains(&s.objects[object].pose.translation.vector)
            }
            Predicate::Held { object, hand } => match (s.attachments.get(object).map(|a| a.holder), hand) {
                (None, _) => false,
                (Some(_), HandSel::Any) => true,
                (Some(Holder::Both), _) => true,
                (Some(Holder::Hand(side)), HandSel::Left) => side == Side::Left,
                (Some(Holder::Hand(side)), HandSel::Right) => side == Side::Right,
                (Some(Holder::Hand(_)), HandSel::Both) => false,
            },
            Predicate::ArticulationAt { name, value, tol, cmp } => {
                let v = s.articulations[name];
                match cmp {
                    Cmp::Eq => (v - value).abs() <= *tol,
                    Cmp::Ge => v >= value - tol,
                    Cmp::Le => v <= value + tol,
                }
            }
            Predicate::OnTop { object, support, tol } => {
                if !self.resting(s, object) {
                    return false;
                }
                let (alo, _) = self.bounds(s, object).expect("validated");
                let (blo, bhi) = self.bounds(s, support).expect("validated");
                let c = s.objects[object].pose.translation.vector;
                c.x >= blo.x && c.x <= bhi.x && c.y >= blo.y && c.y <= bhi.y && (alo.z - bhi.z).abs() <= *tol
            }
            Predicate::Upright { object, tol } => {
                let z = s.objects[object].pose.rotation * Vector3::z();
                z.z.clamp(-1.0, 1.0).acos() <= *tol
            }
            Predicate::Inside { object, container } => {
                if !self.resting(s, object) {
                    return false;
                }
                let wall = self.body(container).and_then(|b| b.hollow()).expect("validated container");
                let (lo, hi) = self.bounds(s, container).expect("validated");
                let c = s.objects[object].pose.translation.vector;
                c.x >= lo.x + wall
                    && c.x <= hi.x - wall
                    && c.y >= lo.y + wall
                    && c.y <= hi.y - wall
                    && c.z >= lo.z
                    && c.z <= hi.z
            }
            Predicate::Lifted { object, height } => {
                let o = &s.objects[object];
                o.pose.translation.vector.z >= o.reset_z + height
            }
            Predicate::Sequence { steps } => {
                let id = *next;
                *next += 1;
                let mut k = latches[id];
                for (i, step) in steps.iter().enumerate() {
                    if i == k {
                        if self.evaluate(step, s, next, latches) {
                            k += 1;
                        }
                    } else {
                        *next += step.sequence_count();
                    }
                }
                latches[id] = k;
                k == steps.len()
            }
            Predicate::All { of } => of.iter().map(|q| self.evaluate(q, s, next, latches)).fold(true, |a, b| a && b),
            Predicate::Any { of } => of.iter().map(|q| self.evaluate(q, s, next, latches)).fold(false, |a, b| a || b),
            Predicate::Not { p } => !self.evaluate(p, s, next, latches),
        }
    }

    /// Evaluate the task predicate, advancing sequence latches; success
    /// latches at the first satisfying time.
    pub fn check_success(&self, state: &mut WorldState) -> SuccessStatus {
        if state.satisfied_at.is_none() {
            let mut latches = std::mem::take(&mut state.latches);
            let mut next = 0;
            if self.evaluate(&self.spec.success, state, &mut next, &mut latches) {
                state.satisfied_at = Some(state.t);
            }
            state.latches = latches;
        }
        SuccessStatus { success: state.satisfied_at.is_some(), satisfied_at: state.satisfied_at }
    }

    /// Separation between a palm and the surface of an object.
    pub fn palm_distance(&self, state: &WorldState, side: Side, object: &str) -> Option<f64> {
        let o = self.object_spec(object)?;
        let pose = state.objects.get(object)?.pose;
        let p = state.hand(side).palm.translation.vector;
        Some(o.shape.surface_distance(&pose.inverse_transform_point(&Point3::from(p)).coords))
    }

    /// Top surface height and footprint center of any body.
    pub fn top_of(&self, state: &WorldState, name: &str) -> Option<(Vector3<f64>, f64)> {
        let (lo, hi) = self.bounds(state, name)?;
        Some(((lo + hi) * 0.5, hi.z))
    }

    /// Floor height of an open container.
    pub fn floor_of(&self, state: &WorldState, name: &str) -> Option<f64> {
        let wall = self.body(name)?.hollow()?;
        Some(self.bounds(state, name)?.0.z + wall)
    }

    pub fn half_height(&self, state: &WorldState, name: &str) -> Option<f64> {
        let (lo, hi) = self.bounds(state, name)?;
        Some((hi.z - lo.z) * 0.5)
    }
}

/// Free-function form of [`TaskEnv::step`].
pub fn step_env(env: &TaskEnv, state: &WorldState, cmd: &JointCommand, dt: f64) -> WorldState {
    env.step(state, cmd, dt).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hand_retarget::HandModel;
    use crate::kinematics::builtin_robot;
    use proptest::prelude::*;

    fn env(name: &str) -> TaskEnv {
        TaskEnv::new(builtin_scene(name).unwrap(), builtin_robot("h1_2_like").unwrap()).unwrap()
    }

    fn fist(env: &TaskEnv, q: &mut DVector<f64>, side: Side, amount: f64) {
        let h = HandModel::from_robot(&env.robot, side).unwrap();
        for i in 0..h.dof_count() {
            q[h.dof_offset + i] = h.lower()[i].max(0.0) + amount * (h.upper()[i] - h.lower()[i].max(0.0));
        }
    }

    fn cmd(q: &DVector<f64>) -> JointCommand {
        JointCommand::new(q.clone(), 0.0)
    }

    /// Arm pose putting the right palm near a world point (position-only solve).
    fn reach(env: &TaskEnv, q: &DVector<f64>, side: Side, target: Vector3<f64>) -> DVector<f64> {
        use crate::ik::{solve_ik, IkConfig};
        use crate::kinematics::{FrameId, JointState, RigidTransform};
        let palm = format!("{}_palm", side.name());
        let mut cfg = IkConfig::position_only();
        cfg.max_iters = 400;
        let mut start = q.clone();
        let arm = env.robot.group_range(side.arm_group()).unwrap();
        start[arm.start] = -0.6;
        start[arm.start + 3] = -1.2;
        let r = solve_ik(
            &env.robot,
            &JointState::new(start, 0.0),
            &palm,
            &RigidTransform::from_translation(target, FrameId::pelvis()),
            &cfg,
        )
        .unwrap();
        assert!(r.final_pos_err < 2e-3, "reach failed {}", r.final_pos_err);
        r.q.q
    }

    #[test]
    fn all_table_tasks_load_and_start_unsolved() {
        assert_eq!(TASK_NAMES.len(), 30);
        for name in TASK_NAMES {
            let e = env(name);
            assert_eq!(e.spec.name, *name);
            let mut s = e.reset(0);
            assert!(!e.check_success(&mut s).success, "{name} starts solved");
            // Nothing floats or sinks at reset.
            let s2 = e.step(&s, &cmd(&s.q), 1.0 / 60.0).0;
            for (k, o) in &s.objects {
                assert!((s2.objects[k].pose.translation.vector - o.pose.translation.vector).norm() < 1e-12, "{name}/{k}");
            }
        }
    }

    #[test]
    fn undeclared_reference_is_rejected() {
        let mut spec = builtin_scene("push_cube").unwrap();
        spec.success = Predicate::InRegion { object: "cube".into(), region: "nowhere".into() };
        assert!(matches!(spec.validate(), Err(TaskError::InvalidScene { .. })));
        let mut spec = builtin_scene("push_cube").unwrap();
        spec.objects.push(spec.objects[0].clone());
        assert!(spec.validate().is_err());
    }

    #[test]
    fn identical_command_is_a_fixed_point() {
        let e = env("pick_cube");
        let s = e.reset(3);
        let (s2, events) = e.step(&s, &cmd(&s.q), 0.02);
        assert!(events.is_empty());
        assert!((s2.t - 0.02).abs() < 1e-15);
        assert_eq!(s2.objects, s.objects);
        assert_eq!(s2.articulations, s.articulations);
    }

    #[test]
    fn released_object_settles_on_table() {
        let e = env("pick_cube");
        let mut s = e.reset(0);
        let table_top = 0.1;
        s.objects.get_mut("cube").unwrap().pose.translation.vector.z = table_top + 0.3;
        let s2 = step_env(&e, &s, &cmd(&s.q), 1.0 / 60.0);
        let half = e.half_height(&s2, "cube").unwrap();
        assert!((s2.objects["cube"].pose.translation.vector.z - (table_top + half)).abs() < 1e-12);
    }

    #[test]
    fn attached_object_rides_the_palm() {
        let e = env("pick_cube");
        let mut s = e.reset(0);
        let palm = s.hands[1].palm;
        s.attachments.insert(
            "cube".into(),
            Attachment { holder: Holder::Hand(Side::Right), offset: palm.inverse() * s.objects["cube"].pose },
        );
        let mut q = s.q.clone();
        let arm = e.robot.group_range("arm_right").unwrap();
        q[arm.start] = -0.5;
        q[arm.start + 3] = -0.8;
        let s2 = step_env(&e, &s, &cmd(&q), 1.0 / 60.0);
        let rel = s2.hands[1].palm.inverse() * s2.objects["cube"].pose;
        let d = rel.inverse() * s.attachments["cube"].offset;
        assert!(d.translation.vector.norm() < 1e-9 && d.rotation.angle() < 1e-9);
    }

    #[test]
    fn open_hand_does_not_grasp_closed_hand_does() {
        let e = env("pick_cube");
        let s0 = e.reset(0);
        let cube = s0.objects["cube"].pose.translation.vector;
        let top = e.top_of(&s0, "cube").unwrap().1;
        let q = reach(&e, &s0.q, Side::Right, Vector3::new(cube.x, cube.y, top + 0.02));
        let s1 = step_env(&e, &s0, &cmd(&q), 1.0 / 60.0);
        assert!(s1.attachments.is_empty());
        let mut s_try = s1.clone();
        assert_eq!(e.try_grasp(&mut s_try, Side::Right), GraspOutcome::Failed("hand_open"));
        let mut qf = q.clone();
        fist(&e, &mut qf, Side::Right, 0.85);
        let (s2, events) = e.step(&s1, &cmd(&qf), 1.0 / 60.0);
        assert!(s2.hands[1].closure < 0.6, "closure {}", s2.hands[1].closure);
        assert_eq!(s2.attachments["cube"].holder, Holder::Hand(Side::Right), "{events:?}");
    }

    #[test]
    fn single_hand_cannot_take_bimanual_object() {
        let e = env("pot_bimanual");
        let s0 = e.reset(0);
        let (c, top) = e.top_of(&s0, "pot").unwrap();
        let target = Vector3::new(c.x, c.y - 0.13, top - 0.02);
        let d0 = e.spec.objects.iter().find(|o| o.name == "pot").unwrap().shape.surface_distance(
            &s0.objects["pot"].pose.inverse_transform_point(&Point3::from(target)).coords,
        );
        assert!(d0 < 0.04, "{d0}");
        let mut q = reach(&e, &s0.q, Side::Right, target);
        let s1 = step_env(&e, &s0, &cmd(&q), 1.0 / 60.0);
        fist(&e, &mut q, Side::Right, 0.85);
        let (s2, events) = e.step(&s1, &cmd(&q), 1.0 / 60.0);
        assert!(s2.attachments.is_empty());
        assert!(events.iter().any(|ev| ev.detail == "bimanual_requires_both"), "{events:?}");
    }

    #[test]
    fn push_cube_region_and_on_top_predicates() {
        let e = env("push_cube");
        let mut s = e.reset(0);
        assert!(!e.check_success(&mut s).success);
        s.objects.get_mut("cube").unwrap().pose.translation.vector.y = 0.22;
        s.t = 4.0;
        let st = e.check_success(&mut s);
        assert!(st.success && st.satisfied_at == Some(4.0));

        let e = env("pick_place_cube");
        let mut s = e.reset(0);
        let (plate, top) = e.top_of(&s, "plate").unwrap();
        let half = e.half_height(&s, "cube").unwrap();
        s.objects.get_mut("cube").unwrap().pose.translation.vector = Vector3::new(plate.x, plate.y, top + half);
        assert!(e.check_success(&mut s).success);
    }

    #[test]
    fn sequence_stages_latch() {
        let e = env("pick_cube");
        let mut s = e.reset(0);
        s.objects.get_mut("cube").unwrap().pose.translation.vector.z += 0.1;
        s.attachments.insert("cube".into(), Attachment { holder: Holder::Hand(Side::Right), offset: Isometry3::identity() });
        assert!(!e.check_success(&mut s).success);
        assert_eq!(s.latches, vec![1]);
        s.attachments.clear();
        s.objects.get_mut("cube").unwrap().pose.translation.vector.z -= 0.1;
        s.t = 2.0;
        assert!(e.check_success(&mut s).success);
    }

    #[test]
    fn twist_articulation_follows_hand_rotation() {
        let e = env("twist_bottle_cap");
        let mut s = e.reset(0);
        let a = e.spec.articulations[0].clone();
        s.hands[0].articulation = Some(ArticulationGrasp { name: a.name.clone(), last_palm: s.hands[0].palm });
        s.hands[0].closed = true;
        let mut q = s.q.clone();
        fist(&e, &mut q, Side::Left, 0.9);
        let arm = e.robot.group_range("arm_left").unwrap();
        let s1 = e.step(&s, &cmd(&q), 0.02).0;
        q[arm.start + 6] += 0.3;
        let s2 = e.step(&s1, &cmd(&q), 0.02).0;
        let moved = s2.articulations[&a.name] - s1.articulations[&a.name];
        assert!(moved.abs() > 1e-3 || a.range[1] == s1.articulations[&a.name]);
    }

    proptest! {
        #[test]
        fn reset_is_deterministic_and_bounded(seed in any::<u64>()) {
            let e = env("pick_place_cube");
            let a = e.reset(seed);
            prop_assert_eq!(&a, &e.reset(seed));
            for o in &e.spec.objects {
                let j = o.jitter.unwrap_or(e.spec.jitter);
                let d = a.objects[&o.name].pose.translation.vector - Vector3::from(o.pose.p);
                prop_assert!(d.x.abs() <= j + 1e-12 && d.y.abs() <= j + 1e-12);
            }
        }

        #[test]
        fn settling_never_interpenetrates(z in 0.1f64..0.8, x in 0.2f64..0.6, y in -0.4f64..0.4) {
            let e = env("pick_place_cube");
            let mut s = e.reset(1);
            s.objects.get_mut("cube").unwrap().pose.translation.vector = Vector3::new(x, y, z);
            let s2 = step_env(&e, &s, &cmd(&s.q), 0.02);
            let c = s2.objects["cube"].pose.translation.vector;
            let half = e.half_height(&s2, "cube").unwrap();
            let (lo, hi) = e.bounds(&s2, "cube").unwrap();
            let support = e.support_height(&s2, "cube", &lo, &hi);
            prop_assert!(c.z >= support + half - 1e-9);
        }
    }
}
