//! Human hand data to robot hand joints: fingertip keyvector optimization,
//! direct glove angle mapping and per-joint Euler extraction.

use nalgebra::{DMatrix, DVector, Isometry3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{euler_xyz_intrinsic, AffineEntry, EulerAxis, JointDrive, KinematicsError, RobotModel, Side};

pub const KEYPOINT_COUNT: usize = 21;
pub const GLOVE_DIM: usize = 20;
pub const EXO_GLOVE_DIM: usize = 15;
pub const EULER_JOINTS: usize = 15;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HandError {
    #[error("invalid keypoints: {0}")]
    InvalidKeypoints(String),
    #[error("invalid source angles: {0}")]
    InvalidAngles(String),
    #[error("mapping does not cover `{0}`")]
    IncompleteMapping(String),
    #[error("hand model: {0}")]
    InvalidHand(String),
    #[error("hand vector has {got} entries, expected {expected}")]
    SizeMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
}

/// 21 hand keypoints in the wrist-local frame: wrist first, then
/// MCP, PIP, DIP, tip for thumb, index, middle, ring, pinky.
#[derive(Clone, Debug, PartialEq)]
pub struct HandKeypoints {
    points: [Vector3<f64>; KEYPOINT_COUNT],
}

impl HandKeypoints {
    pub fn new(points: [Vector3<f64>; KEYPOINT_COUNT]) -> Result<Self, HandError> {
        let bad = |m: String| Err(HandError::InvalidKeypoints(m));
        if points.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
            return bad("non-finite coordinate".into());
        }
        if points[0].norm() > 1e-9 {
            return bad("wrist must be at the origin".into());
        }
        for f in 0..5 {
            let mut prev = 0;
            for k in 0..4 {
                let cur = 1 + 4 * f + k;
                let d = (points[cur] - points[prev]).norm();
                if !(d > 0.005 && d < 0.15) {
                    return bad(format!("segment {prev}->{cur} has length {d:.4} m"));
                }
                prev = cur;
            }
        }
        Ok(HandKeypoints { points })
    }

    pub fn from_slice(flat: &[[f64; 3]]) -> Result<Self, HandError> {
        if flat.len() != KEYPOINT_COUNT {
            return Err(HandError::InvalidKeypoints(format!("expected 21 points, got {}", flat.len())));
        }
        let mut points = [Vector3::zeros(); KEYPOINT_COUNT];
        for (p, v) in points.iter_mut().zip(flat) {
            *p = Vector3::from(*v);
        }
        HandKeypoints::new(points)
    }

    pub fn points(&self) -> &[Vector3<f64>; KEYPOINT_COUNT] {
        &self.points
    }

    /// Index of the fingertip of human finger `f` (0 = thumb).
    pub fn tip_index(f: usize) -> usize {
        4 * f + 4
    }

    pub fn tip(&self, f: usize) -> Vector3<f64> {
        self.points[Self::tip_index(f)]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GloveAngles(pub Vec<f64>);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExoGloveAngles(pub Vec<f64>);

/// Either glove layout; both feed [`retarget_glove`].
#[derive(Clone, Copy, Debug)]
pub enum GloveSource<'a> {
    Glove(&'a GloveAngles),
    Exo(&'a ExoGloveAngles),
}

impl GloveSource<'_> {
    fn values(&self) -> (&[f64], usize) {
        match self {
            GloveSource::Glove(g) => (&g.0, GLOVE_DIM),
            GloveSource::Exo(e) => (&e.0, EXO_GLOVE_DIM),
        }
    }
}

fn check_angles(values: &[f64], expected: usize) -> Result<(), HandError> {
    if values.len() != expected {
        return Err(HandError::InvalidAngles(format!("expected {expected} values, got {}", values.len())));
    }
    if let Some(v) = values
        .iter()
        .find(|v| !v.is_finite() || **v < -std::f64::consts::FRAC_PI_2 || **v > std::f64::consts::PI)
    {
        return Err(HandError::InvalidAngles(format!("{v} outside [-pi/2, pi]")));
    }
    Ok(())
}

/// Endpoint of a keyvector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KeyPoint {
    Wrist,
    Tip(usize),
}

/// One keyvector: robot-frame `from -> to`, matched against the human
/// vector between the corresponding keypoints.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyVector {
    pub from: KeyPoint,
    pub to: KeyPoint,
}

#[derive(Clone, Debug)]
struct HandJoint {
    parent: Option<usize>,
    origin: Isometry3<f64>,
    axis: nalgebra::Unit<Vector3<f64>>,
    /// Local dof index and multiplier/offset; `None` for fixed joints.
    drive: Option<(usize, f64, f64)>,
}

/// One robot hand as a standalone sub-tree rooted at the hand base link.
#[derive(Clone, Debug)]
pub struct HandModel {
    pub side: Side,
    dof_names: Vec<String>,
    lower: DVector<f64>,
    upper: DVector<f64>,
    /// Global index of the first hand DoF in the robot's joint vector.
    pub dof_offset: usize,
    joints: Vec<HandJoint>,
    /// Per robot finger: index into `joints` whose child frame is the tip.
    tips: Vec<usize>,
    /// Human finger feeding each robot finger (thumb first).
    pub human_fingers: Vec<usize>,
    pub keyvectors: Vec<KeyVector>,
    glove: Vec<AffineEntry>,
    exo_glove: Vec<AffineEntry>,
    euler: Vec<crate::kinematics::EulerEntry>,
    /// Robot finger segments for synthetic keypoints: per finger the joint
    /// indices at MCP and PIP.
    segments: Vec<[usize; 2]>,
}

impl HandModel {
    pub fn from_robot(robot: &RobotModel, side: Side) -> Result<Self, HandError> {
        let bad = |m: String| HandError::InvalidHand(m);
        let mapping = robot.hand_mapping.as_ref().ok_or_else(|| bad("robot has no hand_mapping".into()))?;
        let prefix = side.prefix();
        let range = robot.group_range(side.hand_group()).ok_or_else(|| bad("no hand group".into()))?;
        let base = robot.link(&format!("{prefix}{}", mapping.base))?;
        let dofs = robot.dofs();
        let dof_names = range.clone().map(|i| dofs[i].name.clone()).collect();
        let lower = DVector::from_iterator(range.len(), range.clone().map(|i| dofs[i].limits[0]));
        let upper = DVector::from_iterator(range.len(), range.clone().map(|i| dofs[i].limits[1]));

        let all = robot.joints();
        let mut joints: Vec<HandJoint> = Vec::new();
        let mut placed: std::collections::HashMap<usize, usize> = std::collections::HashMap::new();
        let mut local = |ji: usize, joints: &mut Vec<HandJoint>| -> Result<usize, HandError> {
            if let Some(&i) = placed.get(&ji) {
                return Ok(i);
            }
            let j = &all[ji];
            let drive = match j.drive {
                JointDrive::Fixed => None,
                JointDrive::Actuated { dof } => Some((dof, 1.0, 0.0)),
                JointDrive::Mimic { dof, multiplier, offset } => Some((dof, multiplier, offset)),
            };
            let drive = match drive {
                None => None,
                Some((dof, m, o)) if range.contains(&dof) => Some((dof - range.start, m, o)),
                Some(_) => return Err(HandError::InvalidHand(format!("joint {} driven by a non-hand dof", j.name))),
            };
            let parent = if j.parent == base {
                None
            } else {
                let pj = all.iter().position(|x| x.child == j.parent).expect("non-root link has a parent joint");
                Some(*placed.get(&pj).expect("chain processed root first"))
            };
            joints.push(HandJoint { parent, origin: j.origin, axis: j.axis, drive });
            placed.insert(ji, joints.len() - 1);
            Ok(joints.len() - 1)
        };

        let mut tips = Vec::new();
        let mut segments = Vec::new();
        for &tip in robot.fingertip_links(side) {
            let chain = robot.chain_to(tip);
            let start = chain
                .iter()
                .position(|&ji| all[ji].parent == base)
                .ok_or_else(|| bad("fingertip not below hand base".into()))?;
            let mut last = 0;
            let mut actuated = Vec::new();
            for &ji in &chain[start..] {
                last = local(ji, &mut joints)?;
                if joints[last].drive.is_some() {
                    actuated.push(last);
                }
            }
            tips.push(last);
            // The last two moving joints on the chain mark MCP and PIP.
            let n = actuated.len();
            if n < 2 {
                return Err(bad("finger needs at least two moving joints".into()));
            }
            segments.push([actuated[n - 2], actuated[n - 1]]);
        }
        let human_fingers: Vec<usize> = match tips.len() {
            5 => (0..5).collect(),
            3 => vec![0, 1, 2],
            n => return Err(bad(format!("{n} fingertips; expected 5 or 3"))),
        };
        let mut keyvectors: Vec<KeyVector> =
            (0..tips.len()).map(|i| KeyVector { from: KeyPoint::Wrist, to: KeyPoint::Tip(i) }).collect();
        if tips.len() == 5 {
            keyvectors.push(KeyVector { from: KeyPoint::Tip(0), to: KeyPoint::Tip(1) });
        }
        let resolve = |entries: &[AffineEntry]| -> Vec<AffineEntry> {
            entries.iter().map(|e| AffineEntry { joint: format!("{prefix}{}", e.joint), ..e.clone() }).collect()
        };
        let euler = mapping
            .euler
            .iter()
            .map(|e| crate::kinematics::EulerEntry { joint: format!("{prefix}{}", e.joint), ..e.clone() })
            .collect();
        Ok(HandModel {
            side,
            dof_names,
            lower,
            upper,
            dof_offset: range.start,
            joints,
            tips,
            human_fingers,
            keyvectors,
            glove: resolve(&mapping.glove),
            exo_glove: resolve(&mapping.exo_glove),
            euler,
            segments,
        })
    }

    pub fn dof_count(&self) -> usize {
        self.dof_names.len()
    }

    pub fn dof_names(&self) -> &[String] {
        &self.dof_names
    }

    pub fn finger_count(&self) -> usize {
        self.tips.len()
    }

    pub fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    pub fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    pub fn home(&self) -> DVector<f64> {
        DVector::zeros(self.dof_count())
    }

    pub fn clamp(&self, q: &mut DVector<f64>) {
        for i in 0..q.len() {
            q[i] = q[i].clamp(self.lower[i], self.upper[i]);
        }
    }

    pub fn glove_mapping(&self) -> &[AffineEntry] {
        &self.glove
    }

    pub fn exo_glove_mapping(&self) -> &[AffineEntry] {
        &self.exo_glove
    }

    fn check(&self, q: &DVector<f64>) -> Result<(), HandError> {
        if q.len() != self.dof_count() {
            return Err(HandError::SizeMismatch { expected: self.dof_count(), got: q.len() });
        }
        Ok(())
    }

    /// Pose of every sub-tree joint's child frame relative to the hand base.
    fn frames(&self, q: &DVector<f64>) -> Vec<Isometry3<f64>> {
        let mut out: Vec<Isometry3<f64>> = Vec::with_capacity(self.joints.len());
        for j in &self.joints {
            let parent = j.parent.map(|p| out[p]).unwrap_or_else(Isometry3::identity);
            let motion = match j.drive {
                None => j.origin,
                Some((d, m, o)) => j.origin * UnitQuaternion::from_axis_angle(&j.axis, m * q[d] + o),
            };
            out.push(parent * motion);
        }
        out
    }

    /// Fingertip positions in the hand base frame.
    pub fn fingertips(&self, q: &DVector<f64>) -> Result<Vec<Vector3<f64>>, HandError> {
        self.check(q)?;
        let f = self.frames(q);
        Ok(self.tips.iter().map(|&t| f[t].translation.vector).collect())
    }

    /// Fingertip positions and their 3×n position Jacobians.
    fn tips_with_jacobians(&self, q: &DVector<f64>) -> (Vec<Vector3<f64>>, Vec<DMatrix<f64>>) {
        let f = self.frames(q);
        let n = self.dof_count();
        let mut pos = Vec::new();
        let mut jacs = Vec::new();
        for &t in &self.tips {
            let p = f[t].translation.vector;
            let mut jac = DMatrix::zeros(3, n);
            let mut cur = Some(t);
            while let Some(i) = cur {
                let j = &self.joints[i];
                if let Some((d, m, _)) = j.drive {
                    // The joint's own frame (child pose) has the axis fixed.
                    let z = f[i].rotation * j.axis.into_inner();
                    let col = z.cross(&(p - f[i].translation.vector)) * m;
                    for r in 0..3 {
                        jac[(r, d)] += col[r];
                    }
                }
                cur = j.parent;
            }
            pos.push(p);
            jacs.push(jac);
        }
        (pos, jacs)
    }

    /// Synthetic 21-point keypoints of this robot hand at `q`: per finger the
    /// MCP and PIP joint positions, the midpoint of PIP and tip as DIP, and
    /// the tip. A 3-finger hand fills ring and pinky with offset copies of
    /// the middle finger.
    pub fn keypoints(&self, q: &DVector<f64>) -> Result<HandKeypoints, HandError> {
        self.check(q)?;
        let f = self.frames(q);
        let mut pts = [Vector3::zeros(); KEYPOINT_COUNT];
        let finger_pts = |i: usize| {
            let [mcp, pip] = self.segments[i];
            // Joint frame origin of a moving joint: parent frame × origin.
            let at = |j: usize| {
                let parent = self.joints[j].parent.map(|p| f[p]).unwrap_or_else(Isometry3::identity);
                (parent * self.joints[j].origin).translation.vector
            };
            let tip = f[self.tips[i]].translation.vector;
            let pip_p = at(pip);
            [at(mcp), pip_p, (pip_p + tip) * 0.5, tip]
        };
        for (i, &h) in self.human_fingers.iter().enumerate() {
            pts[1 + 4 * h..5 + 4 * h].copy_from_slice(&finger_pts(i));
        }
        if self.tips.len() == 3 {
            let middle = finger_pts(2);
            let away = match self.side {
                Side::Left => Vector3::new(0.0, 1.0, 0.0),
                Side::Right => Vector3::new(0.0, -1.0, 0.0),
            };
            for (k, h) in [3usize, 4].iter().enumerate() {
                let off = away * (0.018 * (k as f64 + 1.0));
                for s in 0..4 {
                    pts[1 + 4 * h + s] = middle[s] + off;
                }
            }
        }
        HandKeypoints::new(pts)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VectorRetargetConfig {
    pub w_smooth: f64,
    pub max_iters: usize,
    /// Relative objective decrease below which iteration stops.
    pub tol: f64,
}

impl Default for VectorRetargetConfig {
    fn default() -> Self {
        VectorRetargetConfig { w_smooth: 1e-5, max_iters: 50, tol: 1e-12 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VectorRetarget {
    pub q: DVector<f64>,
    pub objective: f64,
    pub initial_objective: f64,
    pub iterations: usize,
}

fn keyvector_scale(kv: &KeyVector, hand: &HandModel, scales: &[f64; 5]) -> f64 {
    let finger = |p: KeyPoint| match p {
        KeyPoint::Wrist => None,
        KeyPoint::Tip(i) => Some(scales[hand.human_fingers[i]]),
    };
    match (finger(kv.from), finger(kv.to)) {
        (Some(a), Some(b)) => 0.5 * (a + b),
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => 1.0,
    }
}

fn human_vector(kv: &KeyVector, hand: &HandModel, kp: &HandKeypoints) -> Vector3<f64> {
    let at = |p: KeyPoint| match p {
        KeyPoint::Wrist => kp.points[0],
        KeyPoint::Tip(i) => kp.tip(hand.human_fingers[i]),
    };
    at(kv.to) - at(kv.from)
}

struct VectorProblem<'a> {
    hand: &'a HandModel,
    targets: Vec<Vector3<f64>>,
    q_prev: &'a DVector<f64>,
    w: f64,
}

impl VectorProblem<'_> {
    fn residuals(&self, q: &DVector<f64>, with_jac: bool) -> (DVector<f64>, Option<DMatrix<f64>>) {
        let (tips, jacs) = if with_jac {
            self.hand.tips_with_jacobians(q)
        } else {
            (self.hand.fingertips(q).expect("size checked"), Vec::new())
        };
        let kvs = &self.hand.keyvectors;
        let n = self.hand.dof_count();
        let mut r = DVector::zeros(3 * kvs.len());
        let mut jac = with_jac.then(|| DMatrix::zeros(3 * kvs.len(), n));
        for (k, kv) in kvs.iter().enumerate() {
            let pos = |p: KeyPoint| match p {
                KeyPoint::Wrist => Vector3::zeros(),
                KeyPoint::Tip(i) => tips[i],
            };
            let v = pos(kv.to) - pos(kv.from) - self.targets[k];
            r.fixed_rows_mut::<3>(3 * k).copy_from(&v);
            if let Some(jm) = jac.as_mut() {
                let mut block = DMatrix::zeros(3, n);
                if let KeyPoint::Tip(i) = kv.to {
                    block += &jacs[i];
                }
                if let KeyPoint::Tip(i) = kv.from {
                    block -= &jacs[i];
                }
                jm.view_mut((3 * k, 0), (3, n)).copy_from(&block);
            }
        }
        (r, jac)
    }

    fn objective(&self, q: &DVector<f64>) -> f64 {
        let (r, _) = self.residuals(q, false);
        r.norm_squared() + self.w * (q - self.q_prev).norm_squared()
    }
}

/// Minimize `Σ‖v_robot(q) − s·v_human‖² + w_smooth‖q − q_prev‖²` over the
/// hand joints, warm-started at `q_prev`. Each iteration takes a
/// Gauss-Newton preconditioned gradient step, projects onto the joint box
/// and backtracks until the objective decreases. When the warm start ends
/// with a keyvector residual above 1 mm², one restart from mid-range is
/// tried and the lower objective kept.
pub fn retarget_vector(
    kp: &HandKeypoints,
    hand: &HandModel,
    scales: &[f64; 5],
    q_prev: &DVector<f64>,
    cfg: &VectorRetargetConfig,
) -> Result<VectorRetarget, HandError> {
    hand.check(q_prev)?;
    let targets = hand
        .keyvectors
        .iter()
        .map(|kv| human_vector(kv, hand, kp) * keyvector_scale(kv, hand, scales))
        .collect();
    let problem = VectorProblem { hand, targets, q_prev, w: cfg.w_smooth };
    let initial = problem.objective(q_prev);
    let mut start = q_prev.clone();
    hand.clamp(&mut start);
    let (mut q, mut f, mut iterations) = descend(&problem, start, cfg);
    let smoothing = cfg.w_smooth * (&q - q_prev).norm_squared();
    if f - smoothing > 1e-6 {
        let mid = (&hand.lower + &hand.upper) * 0.5;
        let (q2, f2, it2) = descend(&problem, mid, cfg);
        iterations += it2;
        if f2 < f {
            q = q2;
            f = f2;
        }
    }
    if f > initial {
        // Only reachable when q_prev was outside the limits (clamping raised
        // the objective); the clamped start is the best feasible point seen.
        q = q_prev.clone();
        hand.clamp(&mut q);
        f = problem.objective(&q);
    }
    Ok(VectorRetarget { q, objective: f, initial_objective: initial, iterations })
}

fn descend(problem: &VectorProblem<'_>, mut q: DVector<f64>, cfg: &VectorRetargetConfig) -> (DVector<f64>, f64, usize) {
    let hand = problem.hand;
    let mut f = problem.objective(&q);
    let n = hand.dof_count();
    let mut iterations = 0;
    let mut mu = 1e-6;
    while iterations < cfg.max_iters && f > 0.0 {
        iterations += 1;
        let (r, jac) = problem.residuals(&q, true);
        let jac = jac.expect("requested");
        let grad = jac.transpose() * &r + (&q - problem.q_prev) * problem.w;
        // Joints on a bound with the gradient pushing outward stay fixed;
        // the Gauss-Newton system is solved over the rest.
        let free: Vec<usize> = (0..n)
            .filter(|&i| {
                let at_lo = q[i] <= hand.lower[i] && grad[i] > 0.0;
                let at_hi = q[i] >= hand.upper[i] && grad[i] < 0.0;
                !(at_lo || at_hi)
            })
            .collect();
        if free.is_empty() {
            break;
        }
        let jf = jac.select_columns(&free);
        let gf = grad.select_rows(&free);
        let h = jf.transpose() * &jf + DMatrix::identity(free.len(), free.len()) * (problem.w + mu);
        let step = match h.cholesky() {
            Some(c) => -c.solve(&gf),
            None => -gf.clone(),
        };
        let mut dir = DVector::zeros(n);
        for (k, &i) in free.iter().enumerate() {
            dir[i] = step[k];
        }
        let mut t = 1.0;
        let mut next = None;
        for _ in 0..30 {
            let mut cand = &q + &dir * t;
            hand.clamp(&mut cand);
            let fc = problem.objective(&cand);
            if fc < f {
                next = Some((cand, fc));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, fc)) = next else {
            // No decrease along the preconditioned direction; retry once
            // with stronger damping (closer to plain gradient descent).
            if mu < 1.0 {
                mu = 1.0;
                continue;
            }
            break;
        };
        let rel = (f - fc) / f.max(1e-300);
        q = cand;
        f = fc;
        mu = 1e-6;
        if rel < cfg.tol {
            break;
        }
    }
    (q, f, iterations)
}

fn affine_map(
    entries: &[AffineEntry],
    values: &[f64],
    hand: &HandModel,
) -> Result<DVector<f64>, HandError> {
    let mut q = DVector::zeros(hand.dof_count());
    for (i, name) in hand.dof_names.iter().enumerate() {
        let e = entries
            .iter()
            .find(|e| &e.joint == name)
            .ok_or_else(|| HandError::IncompleteMapping(name.clone()))?;
        let src = *values
            .get(e.source)
            .ok_or_else(|| HandError::IncompleteMapping(format!("{name} source {}", e.source)))?;
        q[i] = (e.a * src + e.b).clamp(hand.lower[i], hand.upper[i]);
    }
    Ok(q)
}

/// Affine per-joint mapping `q = clamp(a·src + b)` from glove angles.
pub fn retarget_glove(src: GloveSource<'_>, hand: &HandModel) -> Result<DVector<f64>, HandError> {
    let (values, dim) = src.values();
    check_angles(values, dim)?;
    let entries = match src {
        GloveSource::Glove(_) => &hand.glove,
        GloveSource::Exo(_) => &hand.exo_glove,
    };
    affine_map(entries, values, hand)
}

/// As [`retarget_glove`] with an explicit correspondence table.
pub fn retarget_glove_with(
    src: GloveSource<'_>,
    hand: &HandModel,
    mapping: &[AffineEntry],
) -> Result<DVector<f64>, HandError> {
    let (values, dim) = src.values();
    check_angles(values, dim)?;
    affine_map(mapping, values, hand)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EulerRetarget {
    pub q: DVector<f64>,
    /// Set when any mapped rotation sat at pitch ±π/2.
    pub gimbal_degenerate: bool,
}

/// Per-joint XYZ-intrinsic Euler extraction of human finger rotations
/// (finger × MCP, PIP, DIP), taking the mapped component and clamping.
pub fn retarget_euler(rotations: &[UnitQuaternion<f64>], hand: &HandModel) -> Result<EulerRetarget, HandError> {
    if rotations.len() != EULER_JOINTS {
        return Err(HandError::InvalidAngles(format!("expected {EULER_JOINTS} rotations, got {}", rotations.len())));
    }
    let mut q = DVector::zeros(hand.dof_count());
    let mut degenerate = false;
    for (i, name) in hand.dof_names.iter().enumerate() {
        let e = hand
            .euler
            .iter()
            .find(|e| &e.joint == name)
            .ok_or_else(|| HandError::IncompleteMapping(name.clone()))?;
        let rot = rotations
            .get(e.source)
            .ok_or_else(|| HandError::IncompleteMapping(format!("{name} source {}", e.source)))?;
        let (roll, pitch, yaw) = euler_xyz_intrinsic(rot);
        if (pitch.abs() - std::f64::consts::FRAC_PI_2).abs() < 1e-6 {
            degenerate = true;
        }
        let v = match e.axis {
            EulerAxis::X => roll,
            EulerAxis::Y => pitch,
            EulerAxis::Z => yaw,
        };
        q[i] = (e.a * v + e.b).clamp(hand.lower[i], hand.upper[i]);
    }
    Ok(EulerRetarget { q, gimbal_degenerate: degenerate })
}
