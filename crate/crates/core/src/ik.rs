//! Closed-loop differential inverse kinematics (damped least squares).

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{
    jacobian_from_poses, rotation_error, JointState, KinematicsError, RigidTransform, RobotModel,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IkError {
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error("non-finite joint update (check damping)")]
    SingularUpdate,
    #[error("invalid ik config: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IkConfig {
    pub damping: f64,
    pub gain: f64,
    pub max_iters: usize,
    pub pos_tol: f64,
    pub rot_tol: f64,
    pub rotation_weight: f64,
    pub dt: f64,
    pub nullspace_weight: f64,
    /// Cap on the joint-space norm of a single update (radians).
    pub max_step: f64,
}

impl Default for IkConfig {
    fn default() -> Self {
        IkConfig {
            damping: 0.05,
            gain: 1.0,
            max_iters: 100,
            pos_tol: 1e-3,
            rot_tol: 1e-2,
            rotation_weight: 1.0,
            dt: 1.0 / 60.0,
            nullspace_weight: 0.01,
            max_step: 0.3,
        }
    }
}

impl IkConfig {
    pub fn position_only() -> Self {
        IkConfig {
            rotation_weight: 0.0,
            ..IkConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), IkError> {
        let bad = |m: &str| Err(IkError::InvalidConfig(m.to_string()));
        if !(self.damping > 0.0) {
            return bad("damping must be > 0");
        }
        if !(self.pos_tol > 0.0 && self.rot_tol > 0.0) {
            return bad("tolerances must be > 0");
        }
        if self.max_iters < 1 {
            return bad("max_iters must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.rotation_weight) {
            return bad("rotation_weight must be in [0, 1]");
        }
        if !(self.gain > 0.0 && self.gain.is_finite()) {
            return bad("gain must be positive");
        }
        if !(self.dt > 0.0) {
            return bad("dt must be > 0");
        }
        if !(self.max_step > 0.0) {
            return bad("max_step must be > 0");
        }
        if !(self.nullspace_weight >= 0.0) {
            return bad("nullspace_weight must be >= 0");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IkResult {
    pub q: JointState,
    pub converged: bool,
    pub iters: usize,
    pub final_pos_err: f64,
    pub final_rot_err: f64,
}

/// `Jᵀ(JJᵀ + λ²I)⁻¹ e`, the damped least-squares step.
pub fn damped_least_squares(jac: &DMatrix<f64>, err: &DVector<f64>, damping: f64) -> Option<DVector<f64>> {
    let rows = jac.nrows();
    let a = jac * jac.transpose() + DMatrix::identity(rows, rows) * (damping * damping);
    let chol = a.cholesky()?;
    Some(jac.transpose() * chol.solve(err))
}

struct TaskError {
    pos: Vector3<f64>,
    rot: Vector3<f64>,
}

fn task_error(current: &nalgebra::Isometry3<f64>, target: &RigidTransform) -> TaskError {
    TaskError {
        pos: target.translation - current.translation.vector,
        rot: rotation_error(&current.rotation, &target.rotation),
    }
}

fn within_tolerance(e: &TaskError, cfg: &IkConfig) -> bool {
    e.pos.norm() < cfg.pos_tol && (cfg.rotation_weight == 0.0 || e.rot.norm() < cfg.rot_tol)
}

/// One CLIK update of the joints on the chain of `frame`:
/// `q' = clamp(q + J⁺_λ·k·e + N·z)`, with the update norm capped at
/// `max_step`, where `z` pulls toward the home pose in
/// the (damped) nullspace. The nullspace term is only applied while the task
/// error is outside tolerance, so a solved target is a fixed point.
pub fn clik_step(
    model: &RobotModel,
    state: &JointState,
    frame: &str,
    target: &RigidTransform,
    cfg: &IkConfig,
) -> Result<JointState, IkError> {
    let link = model.link(frame)?;
    model.validate_state(state).or_else(|e| match e {
        KinematicsError::OutOfLimits { .. } => Ok(()),
        other => Err(other),
    })?;
    let poses = model.link_poses(&state.q)?;
    let err = task_error(&poses[link], target);
    let chain = model.chain_dofs(link);
    let mut q = state.q.clone();
    if chain.is_empty() || (err.pos.norm() == 0.0 && (cfg.rotation_weight == 0.0 || err.rot.norm() == 0.0)) {
        return Ok(JointState::new(q, state.timestamp));
    }

    let full = jacobian_from_poses(model, &poses, link);
    let w = cfg.rotation_weight;
    let mut jac = DMatrix::zeros(6, chain.len());
    for (c, &dof) in chain.iter().enumerate() {
        for r in 0..3 {
            jac[(r, c)] = full[(r, dof)];
            jac[(r + 3, c)] = w * full[(r + 3, dof)];
        }
    }
    let e = DVector::from_vec(vec![
        err.pos.x,
        err.pos.y,
        err.pos.z,
        w * err.rot.x,
        w * err.rot.y,
        w * err.rot.z,
    ]);
    let lo = model.lower_limits();
    let hi = model.upper_limits();
    let mut locked = vec![false; chain.len()];
    let mut dq;
    loop {
        let mut active = jac.clone();
        for (c, &l) in locked.iter().enumerate() {
            if l {
                active.column_mut(c).fill(0.0);
            }
        }
        let a = &active * active.transpose() + DMatrix::identity(6, 6) * (cfg.damping * cfg.damping);
        let chol = a.cholesky().ok_or(IkError::SingularUpdate)?;
        dq = active.transpose() * chol.solve(&(&e * cfg.gain));
        if cfg.nullspace_weight > 0.0 && !within_tolerance(&err, cfg) {
            let z = DVector::from_iterator(
                chain.len(),
                chain.iter().zip(&locked).map(|(&d, &l)| if l { 0.0 } else { -cfg.nullspace_weight * q[d] }),
            );
            dq += nullspace_projector(&active) * z;
        }
        // Joints sitting on a limit and pushed outward would be clamped
        // anyway; drop them and let the rest of the chain take the motion.
        let mut changed = false;
        for (c, &dof) in chain.iter().enumerate() {
            if locked[c] {
                continue;
            }
            let at_lo = q[dof] <= lo[dof] + 1e-9 && dq[c] < 0.0;
            let at_hi = q[dof] >= hi[dof] - 1e-9 && dq[c] > 0.0;
            if at_lo || at_hi {
                locked[c] = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    if dq.iter().any(|v| !v.is_finite()) {
        return Err(IkError::SingularUpdate);
    }
    let norm = dq.norm();
    if norm > cfg.max_step {
        dq *= cfg.max_step / norm;
    }
    for (c, &dof) in chain.iter().enumerate() {
        q[dof] += dq[c];
    }
    model.clamp_to_limits(&mut q);
    Ok(JointState::new(q, state.timestamp))
}

/// `I - V_r V_rᵀ`, with `V_r` the right singular vectors of nonzero singular
/// values. Unlike the damped projector this has no leakage into the task.
fn nullspace_projector(jac: &DMatrix<f64>) -> DMatrix<f64> {
    let n = jac.ncols();
    let svd = jac.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested v_t");
    let smax = svd.singular_values.max();
    let mut p = DMatrix::identity(n, n);
    for (i, &sv) in svd.singular_values.iter().enumerate() {
        if sv > 1e-9 * smax.max(1e-12) {
            let v = v_t.row(i).transpose();
            p -= &v * v.transpose();
        }
    }
    p
}

/// Iterate [`clik_step`] until the tolerances hold or `max_iters` is spent.
pub fn solve_ik(
    model: &RobotModel,
    state: &JointState,
    frame: &str,
    target: &RigidTransform,
    cfg: &IkConfig,
) -> Result<IkResult, IkError> {
    let link = model.link(frame)?;
    let mut current = state.clone();
    model.clamp_to_limits(&mut current.q);
    let mut iters = 0;
    loop {
        let pose = model.link_pose(&current.q, link)?;
        let err = task_error(&pose, target);
        if within_tolerance(&err, cfg) || iters >= cfg.max_iters {
            return Ok(IkResult {
                converged: within_tolerance(&err, cfg),
                q: current,
                iters,
                final_pos_err: err.pos.norm(),
                final_rot_err: err.rot.norm(),
            });
        }
        current = clik_step(model, &current, frame, target, cfg)?;
        iters += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::{builtin_robot, forward_kinematics, FrameId, RobotModel};
    use nalgebra::UnitQuaternion;

    fn planar() -> RobotModel {
        RobotModel::from_json(
            r#"{
            "name": "planar2",
            "links": [{"name":"pelvis","length":0},{"name":"l1","length":1},{"name":"l2","length":1},{"name":"tip","length":0}],
            "joints": [
              {"name":"j1","type":"revolute","parent":"pelvis","child":"l1","origin":{"p":[0,0,0],"q":[1,0,0,0]},"axis":[0,0,1],"limits":[-3.1,3.1]},
              {"name":"j2","type":"revolute","parent":"l1","child":"l2","origin":{"p":[1,0,0],"q":[1,0,0,0]},"axis":[0,0,1],"limits":[-3.1,3.1]},
              {"name":"tipj","type":"fixed","parent":"l2","child":"tip","origin":{"p":[1,0,0],"q":[1,0,0,0]}}
            ],
            "landmarks": {"pelvis":"pelvis","left_shoulder":"l1","right_shoulder":"l1","left_wrist":"tip","right_wrist":"tip","head":"pelvis"},
            "fingertips": {"left":["tip","tip","tip"],"right":["tip","tip","tip"]},
            "dof_layout": [{"group":"arm_left","joints":["j1","j2"]},{"group":"arm_right","joints":[]},{"group":"hand_left","joints":[]},{"group":"hand_right","joints":[]}]
        }"#,
        )
        .unwrap()
    }

    fn target_at(x: f64, y: f64, z: f64) -> RigidTransform {
        RigidTransform::from_translation(Vector3::new(x, y, z), FrameId::pelvis())
    }

    #[test]
    fn solved_target_is_a_fixed_point() {
        let m = builtin_robot("h1_2_like").unwrap();
        let mut s = m.home();
        s.q[0] = -0.7;
        s.q[3] = -0.9;
        let t = forward_kinematics(&m, &s, "left_wrist").unwrap();
        let next = clik_step(&m, &s, "left_wrist", &t, &IkConfig::default()).unwrap();
        assert_eq!(next.q, s.q);
    }

    #[test]
    fn one_step_reduces_planar_error() {
        let m = planar();
        let t = target_at(1.0, 1.0, 0.0);
        let cfg = IkConfig::position_only();
        let before = (forward_kinematics(&m, &m.home(), "tip").unwrap().translation - t.translation).norm();
        let next = clik_step(&m, &m.home(), "tip", &t, &cfg).unwrap();
        let after = (forward_kinematics(&m, &next, "tip").unwrap().translation - t.translation).norm();
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn damping_shrinks_update_monotonically() {
        let jac = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 2.0, 1.0, 0.0, 0.0]);
        let e = DVector::from_vec(vec![-1.0, 1.0, 0.0]);
        let mut prev = f64::INFINITY;
        for lambda in [0.01, 0.05, 0.1, 1.0, 10.0, 100.0, 1000.0] {
            let n = damped_least_squares(&jac, &e, lambda).unwrap().norm();
            assert!(n < prev);
            prev = n;
        }
        assert!(prev < 1e-5);
    }

    #[test]
    fn planar_reachable_target_matches_analytic_solution() {
        let m = planar();
        let t = target_at(1.0, 1.0, 0.0);
        let r = solve_ik(&m, &m.home(), "tip", &t, &IkConfig::position_only()).unwrap();
        assert!(r.converged && r.iters <= 100, "{r:?}");
        assert!(r.final_pos_err < 1e-3);
        // Analytic two-link IK: cos q2 = (x² + y² - 2) / 2.
        let (x, y) = (1.0f64, 1.0f64);
        let q2 = ((x * x + y * y - 2.0) / 2.0f64).acos();
        let candidates = [q2, -q2].map(|b| {
            let a = y.atan2(x) - (b.sin()).atan2(1.0 + b.cos());
            Vector3::new(a.cos() + (a + b).cos(), a.sin() + (a + b).sin(), 0.0)
        });
        let p = forward_kinematics(&m, &r.q, "tip").unwrap().translation;
        assert!(candidates.iter().any(|c| (c - p).norm() < 1e-3));
    }

    #[test]
    fn unreachable_target_ends_on_boundary() {
        let m = planar();
        let t = target_at(3.0, 0.0, 0.0);
        let r = solve_ik(&m, &m.home(), "tip", &t, &IkConfig::position_only()).unwrap();
        assert!(!r.converged);
        let p = forward_kinematics(&m, &r.q, "tip").unwrap().translation;
        assert!((p.norm() - 2.0).abs() < 1e-2);
        assert!(p.normalize().dot(&Vector3::x()) > 0.999);
    }

    #[test]
    fn already_solved_converges_immediately() {
        let m = builtin_robot("h1_2_like").unwrap();
        let mut s = m.home();
        s.q[7] = 0.6;
        s.q[10] = -1.0;
        let t = forward_kinematics(&m, &s, "right_wrist").unwrap();
        let r = solve_ik(&m, &s, "right_wrist", &t, &IkConfig::default()).unwrap();
        assert!(r.converged);
        assert!(r.iters <= 1);
    }

    #[test]
    fn position_only_ignores_target_orientation() {
        let m = builtin_robot("h1_2_like").unwrap();
        let cfg = IkConfig::position_only();
        let mut a = target_at(0.35, 0.25, 0.2);
        let r1 = solve_ik(&m, &m.home(), "left_wrist", &a, &cfg).unwrap();
        a.rotation = UnitQuaternion::from_euler_angles(0.3, 1.0, -2.0);
        let r2 = solve_ik(&m, &m.home(), "left_wrist", &a, &cfg).unwrap();
        assert_eq!(r1.q, r2.q);
        assert_eq!(r1.converged, r2.converged);
        assert_eq!(r1.final_pos_err, r2.final_pos_err);
    }

    #[test]
    fn config_validation() {
        assert!(IkConfig::default().validate().is_ok());
        let bad = IkConfig { damping: 0.0, ..IkConfig::default() };
        assert!(bad.validate().is_err());
        let bad = IkConfig { max_iters: 0, ..IkConfig::default() };
        assert!(bad.validate().is_err());
    }
}
