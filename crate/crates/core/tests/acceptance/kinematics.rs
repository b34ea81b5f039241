use nalgebra::{DVector, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use teleop_core::kinematics::{forward_kinematics, jacobian, JointState, RobotModel};

use crate::Check;

/// Serial chain of `n` revolute joints with random axes and offsets.
fn random_chain(n: usize, rng: &mut ChaCha8Rng) -> RobotModel {
    let mut links = vec![json!({"name": "pelvis", "length": 0.0})];
    let mut joints = Vec::new();
    let mut names = Vec::new();
    for i in 0..n {
        let parent = if i == 0 { "pelvis".to_string() } else { format!("l{}", i - 1) };
        let p: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.4..0.4));
        let r = UnitQuaternion::from_euler_angles(
            rng.random_range(-3.0..3.0),
            rng.random_range(-1.5..1.5),
            rng.random_range(-3.0..3.0),
        );
        let axis = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0f64)).normalize();
        links.push(json!({"name": format!("l{i}"), "length": Vector3::from(p).norm()}));
        joints.push(json!({
            "name": format!("j{i}"), "type": "revolute", "parent": parent, "child": format!("l{i}"),
            "origin": {"p": p, "q": [r.w, r.i, r.j, r.k]},
            "axis": [axis.x, axis.y, axis.z], "limits": [-3.0, 3.0]
        }));
        names.push(format!("j{i}"));
    }
    let tip: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.3..0.3));
    links.push(json!({"name": "tip", "length": Vector3::from(tip).norm()}));
    joints.push(json!({
        "name": "tipj", "type": "fixed", "parent": format!("l{}", n - 1), "child": "tip",
        "origin": {"p": tip, "q": [1.0, 0.0, 0.0, 0.0]}
    }));
    let doc = json!({
        "name": format!("chain{n}"),
        "links": links,
        "joints": joints,
        "landmarks": {"pelvis": "pelvis", "left_shoulder": "l0", "right_shoulder": "l0",
                      "left_wrist": "tip", "right_wrist": "tip", "head": "pelvis"},
        "fingertips": {"left": ["tip", "tip", "tip"], "right": ["tip", "tip", "tip"]},
        "dof_layout": [{"group": "arm_left", "joints": names}, {"group": "arm_right", "joints": []},
                       {"group": "hand_left", "joints": []}, {"group": "hand_right", "joints": []}]
    });
    RobotModel::from_json(&doc.to_string()).expect("random chain is a valid model")
}

fn fd_error(m: &RobotModel, q: &DVector<f64>) -> f64 {
    let h = 1e-6;
    let s = JointState::new(q.clone(), 0.0);
    let jac = jacobian(m, &s, "tip").unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..q.len() {
        let mut qp = q.clone();
        let mut qm = q.clone();
        qp[i] += h;
        qm[i] -= h;
        let tp = forward_kinematics(m, &JointState::new(qp, 0.0), "tip").unwrap();
        let tm = forward_kinematics(m, &JointState::new(qm, 0.0), "tip").unwrap();
        let lin = (tp.translation - tm.translation) / (2.0 * h);
        let ang = (tp.rotation * tm.rotation.inverse()).scaled_axis() / (2.0 * h);
        for r in 0..3 {
            worst = worst.max((jac[(r, i)] - lin[r]).abs()).max((jac[(r + 3, i)] - ang[r]).abs());
        }
    }
    worst
}

fn planar_two_link() -> RobotModel {
    let doc = json!({
        "name": "planar2",
        "links": [{"name":"pelvis","length":0.0},{"name":"l1","length":0.7},{"name":"l2","length":0.4},{"name":"tip","length":0.0}],
        "joints": [
          {"name":"j1","type":"revolute","parent":"pelvis","child":"l1","origin":{"p":[0,0,0],"q":[1,0,0,0]},"axis":[0,0,1],"limits":[-3.1,3.1]},
          {"name":"j2","type":"revolute","parent":"l1","child":"l2","origin":{"p":[0.7,0,0],"q":[1,0,0,0]},"axis":[0,0,1],"limits":[-3.1,3.1]},
          {"name":"tipj","type":"fixed","parent":"l2","child":"tip","origin":{"p":[0.4,0,0],"q":[1,0,0,0]}}
        ],
        "landmarks": {"pelvis":"pelvis","left_shoulder":"l1","right_shoulder":"l1","left_wrist":"tip","right_wrist":"tip","head":"pelvis"},
        "fingertips": {"left":["tip","tip","tip"],"right":["tip","tip","tip"]},
        "dof_layout": [{"group":"arm_left","joints":["j1","j2"]},{"group":"arm_right","joints":[]},{"group":"hand_left","joints":[]},{"group":"hand_right","joints":[]}]
    });
    RobotModel::from_json(&doc.to_string()).unwrap()
}

pub fn run() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_fd: f64 = 0.0;
    let mut bad = 0;
    for _ in 0..100 {
        let n = rng.random_range(1..=8);
        let m = random_chain(n, &mut rng);
        let q = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
        let e = fd_error(&m, &q);
        worst_fd = worst_fd.max(e);
        bad += (e >= 1e-5) as usize;
    }

    let m = planar_two_link();
    let mut worst_fk: f64 = 0.0;
    for _ in 0..200 {
        let (a, b) = (rng.random_range(-3.1..3.1f64), rng.random_range(-3.1..3.1f64));
        let t = forward_kinematics(&m, &JointState::new(DVector::from_vec(vec![a, b]), 0.0), "tip").unwrap();
        let oracle = Vector3::new(0.7 * a.cos() + 0.4 * (a + b).cos(), 0.7 * a.sin() + 0.4 * (a + b).sin(), 0.0);
        let yaw_err = (t.rotation.angle_to(&UnitQuaternion::from_axis_angle(&Vector3::z_axis(), a + b))).abs();
        worst_fk = worst_fk.max((t.translation - oracle).norm()).max(yaw_err);
    }
    let detail = format!(
        "100 random chains, worst |J - FD| = {worst_fd:.2e} (limit 1e-5, {bad} over); 2-link FK worst error {worst_fk:.2e} (limit 1e-9)"
    );
    if bad == 0 && worst_fk < 1e-9 {
        Ok(detail)
    } else {
        Err(detail)
    }
}
