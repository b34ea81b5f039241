use nalgebra::{DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use teleop_core::ik::{solve_ik, IkConfig};
use teleop_core::kinematics::{builtin_robot, forward_kinematics, FrameId, JointState, RigidTransform, RobotModel};

use crate::Check;

fn random_arm_state(m: &RobotModel, rng: &mut ChaCha8Rng) -> JointState {
    let mut q = DVector::zeros(m.dof_count());
    for i in m.group_range("arm_left").unwrap() {
        let [lo, hi] = m.dofs()[i].limits;
        q[i] = rng.random_range(lo..hi);
    }
    JointState::new(q, 0.0)
}

/// Elbow bent, arm forward: away from the straight-arm singularity of home.
fn ready(m: &RobotModel) -> JointState {
    let mut s = m.home();
    let arm = m.group_range("arm_left").unwrap().start;
    s.q[arm] = -0.6;
    s.q[arm + 1] = -0.3;
    s.q[arm + 3] = -1.2;
    s
}

pub fn run() -> Check {
    let m = builtin_robot("h1_2_like").unwrap();
    let arm_dofs = m.group_range("arm_left").unwrap().len();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = IkConfig::position_only();
    let start = ready(&m);
    let mut ok = 0;
    let mut worst_iters = 0;
    for _ in 0..100 {
        let t = forward_kinematics(&m, &random_arm_state(&m, &mut rng), "left_wrist").unwrap();
        let r = solve_ik(&m, &start, "left_wrist", &t, &cfg).unwrap();
        if m.validate_state(&r.q).is_ok() && r.converged && r.final_pos_err < 1e-3 && r.iters <= 100 {
            ok += 1;
            worst_iters = worst_iters.max(r.iters);
        }
    }

    let shoulder = forward_kinematics(&m, &m.home(), "left_shoulder").unwrap().translation;
    let reach = (forward_kinematics(&m, &m.home(), "left_wrist").unwrap().translation - shoulder).norm();
    let mut worst_boundary: f64 = 0.0;
    let mut dir_ok = true;
    for _ in 0..10 {
        let mut dir = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0f64));
        dir.y = dir.y.abs() + 0.3;
        let dir = dir.normalize();
        let t = RigidTransform::from_translation(shoulder + dir * (reach + 0.5), FrameId::pelvis());
        let r = solve_ik(&m, &ready(&m), "left_wrist", &t, &cfg).unwrap();
        let w = forward_kinematics(&m, &r.q, "left_wrist").unwrap().translation - shoulder;
        worst_boundary = worst_boundary.max((w.norm() - reach).abs());
        dir_ok &= !r.converged;
    }
    let detail = format!(
        "{arm_dofs}-DoF arm: {ok}/100 reachable targets solved to < 1 mm (max {worst_iters} iters); \
         unreachable: worst ||FK| - reach| = {worst_boundary:.2e} m over 10 targets"
    );
    if arm_dofs == 7 && ok >= 98 && worst_boundary <= 1e-2 && dir_ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}
