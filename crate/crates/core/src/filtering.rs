//! Per-DoF constant-velocity Kalman smoothing of joint commands.

use nalgebra::{Matrix2, RowVector2, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::JointCommand;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FilterError {
    #[error("non-finite measurement {0}")]
    NonFiniteMeasurement(f64),
    #[error("bank has {expected} filters, command has {got} entries")]
    SizeMismatch { expected: usize, got: usize },
    #[error("invalid filter config: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub enabled: bool,
    /// Process noise scale (rad²/s⁴).
    pub q_a: f64,
    /// Measurement noise (rad²).
    pub r: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig { enabled: true, q_a: 10.0, r: 1e-4 }
    }
}

impl FilterConfig {
    /// Heavier smoothing for low-rate, coarse vision estimates.
    pub fn vision() -> Self {
        FilterConfig { r: 1e-3, ..Self::default() }
    }

    pub fn bypass() -> Self {
        FilterConfig { enabled: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), FilterError> {
        if !(self.q_a > 0.0 && self.q_a.is_finite()) {
            return Err(FilterError::InvalidConfig("q_a must be > 0".into()));
        }
        if !(self.r > 0.0 && self.r.is_finite()) {
            return Err(FilterError::InvalidConfig("r must be > 0".into()));
        }
        Ok(())
    }
}

/// Scalar constant-velocity Kalman filter on one joint angle.
#[derive(Clone, Debug, PartialEq)]
pub struct DofKalman {
    /// `(angle, angular velocity)`.
    pub x: Vector2<f64>,
    pub p: Matrix2<f64>,
    pub q_a: f64,
    pub r: f64,
    pub dt: f64,
}

impl DofKalman {
    /// Starts at `(x0, 0)` with covariance `r·I`.
    pub fn new(x0: f64, q_a: f64, r: f64, dt: f64) -> Self {
        DofKalman { x: Vector2::new(x0, 0.0), p: Matrix2::identity() * r, q_a, r, dt }
    }

    pub fn transition(&self) -> Matrix2<f64> {
        Matrix2::new(1.0, self.dt, 0.0, 1.0)
    }

    pub fn process_noise(&self) -> Matrix2<f64> {
        let dt = self.dt;
        Matrix2::new(dt.powi(4) / 4.0, dt.powi(3) / 2.0, dt.powi(3) / 2.0, dt * dt) * self.q_a
    }

    /// Predict, then update on a position measurement (Joseph form); the
    /// covariance is symmetrized afterwards. Returns the posterior angle.
    pub fn step(&mut self, z: f64) -> Result<f64, FilterError> {
        if !z.is_finite() {
            return Err(FilterError::NonFiniteMeasurement(z));
        }
        let f = self.transition();
        let h = RowVector2::new(1.0, 0.0);
        let x = f * self.x;
        let p = f * self.p * f.transpose() + self.process_noise();
        let s = (h * p * h.transpose())[0] + self.r;
        let k = p * h.transpose() / s;
        let innovation = z - (h * x)[0];
        self.x = x + k * innovation;
        let a = Matrix2::identity() - k * h;
        let p = a * p * a.transpose() + k * k.transpose() * self.r;
        self.p = (p + p.transpose()) * 0.5;
        Ok(self.x[0])
    }
}

pub fn kalman_step(f: &mut DofKalman, z: f64) -> Result<f64, FilterError> {
    f.step(z)
}

/// One filter per DoF. Each filter is initialized from the first command it
/// sees, so the smoothed stream starts at the first measurement.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterBank {
    cfg: FilterConfig,
    dt: f64,
    size: usize,
    filters: Option<Vec<DofKalman>>,
}

impl FilterBank {
    pub fn new(size: usize, cfg: FilterConfig, dt: f64) -> Result<Self, FilterError> {
        cfg.validate()?;
        if !(dt > 0.0) {
            return Err(FilterError::InvalidConfig("dt must be > 0".into()));
        }
        Ok(FilterBank { cfg, dt, size, filters: None })
    }

    /// Bank with every filter already at `x0` (zero velocity).
    pub fn starting_at(x0: &[f64], cfg: FilterConfig, dt: f64) -> Result<Self, FilterError> {
        let mut b = Self::new(x0.len(), cfg, dt)?;
        b.filters = Some(x0.iter().map(|&x| DofKalman::new(x, b.cfg.q_a, b.cfg.r, dt)).collect());
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn enabled(&self) -> bool {
        self.cfg.enabled
    }

    pub fn filters(&self) -> Option<&[DofKalman]> {
        self.filters.as_deref()
    }

    pub fn reset(&mut self) {
        self.filters = None;
    }
}

/// Elementwise [`kalman_step`] over the command; the timestamp is kept.
/// A disabled bank returns the command unchanged.
pub fn smooth_command(bank: &mut FilterBank, cmd: &JointCommand) -> Result<JointCommand, FilterError> {
    if cmd.q.len() != bank.size {
        return Err(FilterError::SizeMismatch { expected: bank.size, got: cmd.q.len() });
    }
    if !bank.cfg.enabled {
        return Ok(cmd.clone());
    }
    if let Some(v) = cmd.q.iter().find(|v| !v.is_finite()) {
        return Err(FilterError::NonFiniteMeasurement(*v));
    }
    let (q_a, r, dt) = (bank.cfg.q_a, bank.cfg.r, bank.dt);
    let filters = bank
        .filters
        .get_or_insert_with(|| cmd.q.iter().map(|&x| DofKalman::new(x, q_a, r, dt)).collect());
    let mut out = cmd.clone();
    for (i, f) in filters.iter_mut().enumerate() {
        out.q[i] = f.step(cmd.q[i])?;
    }
    Ok(out)
}
