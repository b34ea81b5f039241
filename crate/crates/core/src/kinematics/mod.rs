//! Robot kinematic models, forward kinematics, geometric Jacobians and
//! device-to-robot frame conversion.
//!
//! All poses are expressed in the robot pelvis frame: right-handed,
//! X forward, Z up.

mod frames;
mod model;
mod transform;

use nalgebra::{DMatrix, Vector3};
use thiserror::Error;

pub use frames::{
    convert_device_frame, revert_device_frame, wrist_offset_pelvis, DeviceConvention,
    FrameCalibration,
};
pub use model::{
    AffineEntry, Dof, DofGroupSpec, EulerAxis, EulerEntry, HandMappingSpec, Joint, JointDrive,
    JointCommand, JointKind, JointSpec, JointState, LinkSpec, MimicSpec, OriginSpec, RobotModel, RobotModelFile,
    Side, DOF_GROUPS, LANDMARK_NAMES,
};
pub use transform::{
    angular_distance, euler_xyz_intrinsic, from_euler_xyz_intrinsic, quaternion_distance,
    renormalize, rotation_error, FrameId, RigidTransform,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinematicsError {
    #[error("unknown frame `{0}`")]
    UnknownFrame(String),
    #[error("joint vector has {got} entries, model expects {expected}")]
    DofLengthMismatch { expected: usize, got: usize },
    #[error("dof {dof} value {value} outside limits {limits:?}")]
    OutOfLimits { dof: usize, value: f64, limits: [f64; 2] },
    #[error("invalid robot model: {0}")]
    InvalidModel(String),
    #[error("frame calibration missing: {0}")]
    MissingCalibration(&'static str),
    #[error("unknown built-in robot `{0}`")]
    UnknownRobot(String),
}

const H1_2_LIKE: &str = include_str!("../../data/robots/h1_2_like.json");
const GR1_LIKE: &str = include_str!("../../data/robots/gr1_like.json");
const G1_LIKE: &str = include_str!("../../data/robots/g1_like.json");

pub const BUILTIN_ROBOTS: [&str; 3] = ["h1_2_like", "gr1_like", "g1_like"];

/// Load one of the shipped robot descriptions by name.
pub fn builtin_robot(name: &str) -> Result<RobotModel, KinematicsError> {
    let text = match name {
        "h1_2_like" => H1_2_LIKE,
        "gr1_like" => GR1_LIKE,
        "g1_like" => G1_LIKE,
        other => return Err(KinematicsError::UnknownRobot(other.to_string())),
    };
    RobotModel::from_json(text)
}

/// Pose of `frame` (a link name) in pelvis coordinates.
pub fn forward_kinematics(
    model: &RobotModel,
    state: &JointState,
    frame: &str,
) -> Result<RigidTransform, KinematicsError> {
    let link = model.link(frame)?;
    let iso = model.link_pose(&state.q, link)?;
    Ok(RigidTransform::from_isometry(&iso, FrameId::pelvis()))
}

/// Geometric Jacobian of `frame`: rows 0..3 linear velocity, rows 3..6
/// angular velocity, one column per model DoF. Columns of DoFs that do not
/// move the frame are zero. Mimic joints add their multiplier-weighted
/// contribution to the column of the DoF they follow.
pub fn jacobian(
    model: &RobotModel,
    state: &JointState,
    frame: &str,
) -> Result<DMatrix<f64>, KinematicsError> {
    let link = model.link(frame)?;
    let poses = model.link_poses(&state.q)?;
    Ok(jacobian_from_poses(model, &poses, link))
}

pub(crate) fn jacobian_from_poses(
    model: &RobotModel,
    poses: &[nalgebra::Isometry3<f64>],
    link: usize,
) -> DMatrix<f64> {
    let mut jac = DMatrix::zeros(6, model.dof_count());
    let end = poses[link].translation.vector;
    let joints = model.joints();
    for ji in model.chain_to(link) {
        let j = &joints[ji];
        let (dof, mult) = match j.drive {
            JointDrive::Fixed => continue,
            JointDrive::Actuated { dof } => (dof, 1.0),
            JointDrive::Mimic { dof, multiplier, .. } => (dof, multiplier),
        };
        let frame = poses[j.parent] * j.origin;
        let z: Vector3<f64> = frame.rotation * j.axis.into_inner();
        let lin = z.cross(&(end - frame.translation.vector));
        for r in 0..3 {
            jac[(r, dof)] += mult * lin[r];
            jac[(r + 3, dof)] += mult * z[r];
        }
    }
    jac
}
