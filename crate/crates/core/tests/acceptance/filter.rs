use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use teleop_core::filtering::{kalman_step, smooth_command, DofKalman, FilterBank, FilterConfig};
use teleop_core::kinematics::JointCommand;

use crate::Check;

/// Independent scalar-form constant-velocity Kalman filter with the same
/// matrices (F = [1 dt; 0 1], H = [1 0], white-acceleration Q, P0 = r I).
struct ScalarOracle {
    x: f64,
    v: f64,
    p11: f64,
    p12: f64,
    p22: f64,
    q_a: f64,
    r: f64,
    dt: f64,
}

impl ScalarOracle {
    fn new(x0: f64, q_a: f64, r: f64, dt: f64) -> Self {
        ScalarOracle { x: x0, v: 0.0, p11: r, p12: 0.0, p22: r, q_a, r, dt }
    }

    fn step(&mut self, z: f64) -> f64 {
        let dt = self.dt;
        let x = self.x + dt * self.v;
        let p11 = self.p11 + 2.0 * dt * self.p12 + dt * dt * self.p22 + self.q_a * dt.powi(4) / 4.0;
        let p12 = self.p12 + dt * self.p22 + self.q_a * dt.powi(3) / 2.0;
        let p22 = self.p22 + self.q_a * dt * dt;
        let s = p11 + self.r;
        let (k1, k2) = (p11 / s, p12 / s);
        let y = z - x;
        self.x = x + k1 * y;
        self.v += k2 * y;
        let a11 = 1.0 - k1;
        self.p11 = a11 * a11 * p11 + k1 * k1 * self.r;
        self.p12 = a11 * (p12 - k2 * p11) + k1 * k2 * self.r;
        self.p22 = p22 - 2.0 * k2 * p12 + k2 * k2 * p11 + k2 * k2 * self.r;
        self.x
    }
}

fn normal(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    sigma * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn variance(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
}

pub fn run() -> Check {
    let defaults = FilterConfig::default();
    let (q_a, r, dt) = (defaults.q_a, defaults.r, 0.02);

    let mut f = DofKalman::new(0.7, q_a, r, dt);
    let fixed_point = (0..1000).all(|_| kalman_step(&mut f, 0.7).unwrap() == 0.7);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut bank = FilterBank::starting_at(&[0.2, -0.4], defaults.clone(), dt).unwrap();
    let mut oracles = [ScalarOracle::new(0.2, q_a, r, dt), ScalarOracle::new(-0.4, q_a, r, dt)];
    let mut oracle_err: f64 = 0.0;
    for k in 1..=2000 {
        let z = [(k as f64 * 0.01).sin() + normal(&mut rng, 0.02), -0.4 + 0.3 * (k as f64 * 0.03).cos()];
        let cmd = JointCommand::new(DVector::from_row_slice(&z), k as f64 * dt);
        let out = smooth_command(&mut bank, &cmd).unwrap();
        for i in 0..2 {
            oracle_err = oracle_err.max((out.q[i] - oracles[i].step(z[i])).abs());
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let c = 0.4;
    let mut f = DofKalman::new(c, q_a, r, dt);
    let zin: Vec<f64> = (0..1000).map(|_| c + normal(&mut rng, 0.05)).collect();
    let zout: Vec<f64> = zin.iter().map(|z| kalman_step(&mut f, *z).unwrap()).collect();
    let (vin, vout) = (variance(&zin), variance(&zout));

    let detail = format!(
        "fixed point exact: {fixed_point}; oracle max deviation {oracle_err:.1e} (limit 1e-12); \
         noise variance {vin:.2e} -> {vout:.2e}"
    );
    if fixed_point && oracle_err < 1e-12 && vout < vin {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Constant input c from x = 0: |x_k - c| must decrease at every step
/// after step 2.
pub fn monotone_example() -> Check {
    let defaults = FilterConfig::default();
    let c = 1.0;
    let mut f = DofKalman::new(0.0, defaults.q_a, defaults.r, 0.02);
    let xs: Vec<f64> = (0..200).map(|_| kalman_step(&mut f, c).unwrap()).collect();
    let errs: Vec<f64> = xs.iter().map(|x| (x - c).abs()).collect();
    let first_rise = (2..errs.len()).find(|&k| errs[k] > errs[k - 1]);
    let overshoot = xs.iter().map(|x| x - c).fold(0.0, f64::max);
    match first_rise {
        None => Ok("error decreased at every step after step 2".into()),
        Some(k) => Err(format!(
            "|x_k - c| rises at step {} ({:.3e} -> {:.3e}); the constant-velocity filter overshoots the step by {:.1}% of c",
            k + 1,
            errs[k - 1],
            errs[k],
            overshoot / c * 100.0
        )),
    }
}
