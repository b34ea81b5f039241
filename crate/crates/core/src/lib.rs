//! Teleoperation retargeting engine and kinematic benchmark harness.
//!
//! Human pose streams (vision, VR, MoCap, exoskeleton) are normalized into
//! the robot pelvis frame, retargeted onto a dual-arm dexterous humanoid
//! through inverse kinematics and hand retargeting, smoothed, and executed
//! in a kinematic task environment whose success predicates and timing feed
//! the benchmark metrics.

pub mod kinematics;
pub mod calibration;
pub mod filtering;
pub mod hand_retarget;
pub mod ik;
pub mod input;
pub mod taskenv;
pub mod session;
pub mod service;
pub mod synth;
pub mod wire;
