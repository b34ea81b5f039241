use std::collections::BTreeMap;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use teleop_core::calibration::{
    fit_shape, landmark_forward, rescale_keypoints, Beta, FitConfig, ScaleParams, SkeletonModel, SHAPE_DIM,
};

use crate::Check;

const LANDMARKS: [(&str, Option<&str>); 6] = [
    ("pelvis", None),
    ("head", Some("neck")),
    ("left_shoulder", Some("l_clavicle")),
    ("right_shoulder", Some("r_clavicle")),
    ("left_wrist", Some("l_forearm")),
    ("right_wrist", Some("r_forearm")),
];

fn random_full_rank(rng: &mut ChaCha8Rng) -> SkeletonModel {
    let mut bones = SkeletonModel::standard().bones().to_vec();
    for b in &mut bones {
        // Keep the worst-case length positive over the search box.
        let budget = (b.rest_length - 0.02) / 5.0 / SHAPE_DIM as f64;
        b.basis = Beta::from_fn(|_, _| rng.random_range(-budget..budget));
    }
    SkeletonModel::new(bones, &LANDMARKS, 5.0).unwrap()
}

/// Worst direction / length deviation of one random rescale.
fn rescale_check(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let s = SkeletonModel::standard();
    let bones = s.bones();
    let mut acc: Vec<Vector3<f64>> = Vec::new();
    let mut ends = BTreeMap::new();
    let mut scales = ScaleParams::identity(&s);
    for b in bones {
        let start = b.parent.map(|p| acc[p]).unwrap_or_else(Vector3::zeros);
        let seg = Vector3::from_fn(|_, _| rng.random_range(-0.5..0.5)) + Vector3::new(0.0, 0.0, 0.05);
        acc.push(start + seg);
        ends.insert(b.name.clone(), start + seg);
        scales.link_scales.insert(b.name.clone(), rng.random_range(0.2..5.0));
    }
    let out = rescale_keypoints(&s, &Vector3::zeros(), &ends, &scales).unwrap();
    let (mut dir_err, mut len_err): (f64, f64) = (0.0, 0.0);
    for (i, b) in bones.iter().enumerate() {
        let start_in = b.parent.map(|p| acc[p]).unwrap_or_else(Vector3::zeros);
        let start_out = b.parent.map(|p| out[&bones[p].name]).unwrap_or_else(Vector3::zeros);
        let seg_in = acc[i] - start_in;
        let seg_out = out[&b.name] - start_out;
        dir_err = dir_err.max((seg_in.normalize() - seg_out.normalize()).norm());
        len_err = len_err.max((seg_out.norm() - seg_in.norm() * scales.link_scales[&b.name]).abs());
    }
    (dir_err, len_err)
}

pub fn run() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst: f64 = 0.0;
    let mut over = 0;
    for _ in 0..50 {
        let s = random_full_rank(&mut rng);
        let truth = Beta::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let target = landmark_forward(&s, &truth).unwrap();
        let r = fit_shape(&s, &target, &FitConfig::default()).unwrap();
        let rms = landmark_forward(&s, &r.beta).unwrap().rms_distance(&target);
        worst = worst.max(rms);
        over += (rms > 1e-3) as usize;
    }
    let (mut dir_err, mut len_err): (f64, f64) = (0.0, 0.0);
    for _ in 0..200 {
        let (d, l) = rescale_check(&mut rng);
        dir_err = dir_err.max(d);
        len_err = len_err.max(l);
    }
    let detail = format!(
        "50 generate-then-fit instances, worst landmark RMS {worst:.2e} m (limit 1e-3, {over} over); \
         200 rescales: direction deviation {dir_err:.1e}, length deviation {len_err:.1e} (limit 1e-9)"
    );
    if over == 0 && dir_err < 1e-9 && len_err < 1e-9 {
        Ok(detail)
    } else {
        Err(detail)
    }
}
