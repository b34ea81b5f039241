use nalgebra::{DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use teleop_core::hand_retarget::{retarget_vector, HandModel, VectorRetargetConfig};
use teleop_core::kinematics::{builtin_robot, Side, BUILTIN_ROBOTS};

use crate::Check;

fn random_q(h: &HandModel, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(h.dof_count(), |i, _| {
        let lo = h.lower()[i].max(0.0);
        rng.random_range(lo..h.upper()[i] * 0.9)
    })
}

/// Wrist-to-tip and tip-to-tip vectors of a fingertip set.
fn tip_vectors(tips: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    let mut v = tips.to_vec();
    for i in 0..tips.len() {
        for j in i + 1..tips.len() {
            v.push(tips[j] - tips[i]);
        }
    }
    v
}

pub fn run() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = VectorRetargetConfig::default();
    let mut lines = Vec::new();
    let mut ok = true;
    for name in BUILTIN_ROBOTS {
        let robot = builtin_robot(name).unwrap();
        for side in Side::BOTH {
            let h = HandModel::from_robot(&robot, side).unwrap();
            let mut worst: f64 = 0.0;
            let mut over = 0;
            let mut ascents = 0;
            let mut prev = h.home();
            for _ in 0..100 {
                let q_true = random_q(&h, &mut rng);
                let kp = h.keypoints(&q_true).unwrap();
                let r = retarget_vector(&kp, &h, &[1.0; 5], &prev, &cfg).unwrap();
                ascents += (r.objective > r.initial_objective) as usize;
                let got = tip_vectors(&h.fingertips(&r.q).unwrap());
                let want = tip_vectors(&h.fingertips(&q_true).unwrap());
                let rms =
                    (got.iter().zip(&want).map(|(a, b)| (a - b).norm_squared()).sum::<f64>() / got.len() as f64).sqrt();
                worst = worst.max(rms);
                over += (rms >= 2e-3) as usize;
                prev = r.q;
            }
            ok &= over == 0 && ascents == 0;
            lines.push(format!("{name}/{}: worst {:.2} mm, {over} over, {ascents} ascents", side.name(), worst * 1e3));
        }
    }
    let detail = format!("100 poses per hand model, fingertip-vector RMS limit 2 mm; {}", lines.join("; "));
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}
