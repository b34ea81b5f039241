use nalgebra::{Matrix3, Rotation3, UnitQuaternion};
use serde::{Deserialize, Serialize};

use super::{FrameId, KinematicsError, RigidTransform};

/// Axis convention of a tracking device.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceConvention {
    /// X right, Y up, −Z forward.
    Openxr,
    /// Z up, X forward (MoCap global frame after heading alignment).
    MocapGlobal,
    /// Exoskeleton base frame, already robot-aligned.
    ExoNative,
}

impl DeviceConvention {
    /// Rotation taking device axes to robot axes.
    fn axes(self) -> UnitQuaternion<f64> {
        match self {
            DeviceConvention::Openxr => {
                // robot x = -dev z, robot y = -dev x, robot z = dev y
                let m = Matrix3::new(0.0, 0.0, -1.0, -1.0, 0.0, 0.0, 0.0, 1.0, 0.0);
                UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(m))
            }
            DeviceConvention::MocapGlobal | DeviceConvention::ExoNative => UnitQuaternion::identity(),
        }
    }

    fn axes_transform(self) -> RigidTransform {
        RigidTransform::new(nalgebra::Vector3::zeros(), self.axes(), FrameId::pelvis())
    }
}

/// Session-start reference transforms.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameCalibration {
    /// Pose of the (axis-permuted) device origin in the pelvis frame.
    pub device_to_pelvis: Option<RigidTransform>,
    /// Fixed pose of the operator head reference in the pelvis frame.
    pub head_to_pelvis: Option<RigidTransform>,
}

impl FrameCalibration {
    pub fn identity() -> Self {
        FrameCalibration {
            device_to_pelvis: Some(RigidTransform::identity(FrameId::pelvis())),
            head_to_pelvis: Some(RigidTransform::identity(FrameId::pelvis())),
        }
    }

    /// Calibration whose device reference is the inverse of this one.
    pub fn inverse(&self) -> Self {
        FrameCalibration {
            device_to_pelvis: self
                .device_to_pelvis
                .as_ref()
                .map(|t| t.inverse().in_frame(FrameId::pelvis())),
            head_to_pelvis: self.head_to_pelvis.clone(),
        }
    }
}

/// Re-express a device pose in the robot pelvis frame: the axis permutation
/// of `convention` is applied by conjugation (position and local axes), then
/// the device-to-pelvis reference.
pub fn convert_device_frame(
    pose: &RigidTransform,
    convention: DeviceConvention,
    calib: &FrameCalibration,
) -> Result<RigidTransform, KinematicsError> {
    let reference = calib
        .device_to_pelvis
        .as_ref()
        .ok_or(KinematicsError::MissingCalibration("device_to_pelvis"))?;
    let p = convention.axes_transform();
    let permuted = p.compose(pose).compose(&p.inverse());
    Ok(reference.compose(&permuted).in_frame(FrameId::pelvis()))
}

/// Inverse of [`convert_device_frame`] for the same calibration.
pub fn revert_device_frame(
    pose: &RigidTransform,
    convention: DeviceConvention,
    calib: &FrameCalibration,
) -> Result<RigidTransform, KinematicsError> {
    let reference = calib
        .device_to_pelvis
        .as_ref()
        .ok_or(KinematicsError::MissingCalibration("device_to_pelvis"))?;
    let p = convention.axes_transform();
    let permuted = reference.inverse().compose(pose);
    Ok(p.inverse()
        .compose(&permuted)
        .compose(&p)
        .in_frame(FrameId::new("device")))
}

/// Wrist pose relative to the head, re-anchored at the fixed head-to-pelvis
/// reference: `head_to_pelvis ∘ head⁻¹ ∘ wrist`.
pub fn wrist_offset_pelvis(
    head_pose: &RigidTransform,
    wrist_pose: &RigidTransform,
    calib: &FrameCalibration,
) -> Result<RigidTransform, KinematicsError> {
    let h2p = calib
        .head_to_pelvis
        .as_ref()
        .ok_or(KinematicsError::MissingCalibration("head_to_pelvis"))?;
    let offset = head_pose.inverse().compose(wrist_pose);
    Ok(h2p.compose(&offset).in_frame(FrameId::pelvis()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::quaternion_distance;
    use nalgebra::Vector3;
    use proptest::prelude::*;

    fn pose(p: [f64; 3], q: [f64; 4]) -> RigidTransform {
        RigidTransform::from_parts(p, q, FrameId::new("device")).unwrap()
    }

    fn arb_pose() -> impl Strategy<Value = RigidTransform> {
        (prop::array::uniform3(-2.0f64..2.0), prop::array::uniform4(-1.0f64..1.0))
            .prop_filter_map("quat", |(p, q)| RigidTransform::from_parts(p, q, FrameId::new("device")))
    }

    fn calib_from(t: RigidTransform) -> FrameCalibration {
        FrameCalibration {
            device_to_pelvis: Some(t.in_frame(FrameId::pelvis())),
            head_to_pelvis: Some(RigidTransform::from_translation(
                Vector3::new(0.0, 0.0, 0.65),
                FrameId::pelvis(),
            )),
        }
    }

    #[test]
    fn identity_calibration_leaves_robot_frame_pose() {
        let p = pose([0.3, -0.2, 0.5], [0.9, 0.1, -0.2, 0.3]);
        for conv in [DeviceConvention::MocapGlobal, DeviceConvention::ExoNative] {
            let out = convert_device_frame(&p, conv, &FrameCalibration::identity()).unwrap();
            assert!((out.translation - p.translation).norm() < 1e-15);
            assert!(quaternion_distance(&out.rotation, &p.rotation) < 1e-15);
        }
    }

    #[test]
    fn openxr_axes_map_forward_and_up() {
        let calib = FrameCalibration::identity();
        let fwd = pose([0.0, 0.0, -1.0], [1.0, 0.0, 0.0, 0.0]);
        let up = pose([0.0, 1.0, 0.0], [1.0, 0.0, 0.0, 0.0]);
        let right = pose([1.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]);
        let f = convert_device_frame(&fwd, DeviceConvention::Openxr, &calib).unwrap();
        let u = convert_device_frame(&up, DeviceConvention::Openxr, &calib).unwrap();
        let r = convert_device_frame(&right, DeviceConvention::Openxr, &calib).unwrap();
        assert!((f.translation - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
        assert!((u.translation - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-12);
        assert!((r.translation - Vector3::new(0.0, -1.0, 0.0)).norm() < 1e-12);
        // A device rotation about its own up axis becomes a robot yaw.
        let yaw_dev = RigidTransform::new(
            Vector3::zeros(),
            UnitQuaternion::from_axis_angle(&Vector3::y_axis(), 0.4),
            FrameId::new("device"),
        );
        let yaw = convert_device_frame(&yaw_dev, DeviceConvention::Openxr, &calib).unwrap();
        let want = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), 0.4);
        assert!(quaternion_distance(&yaw.rotation, &want) < 1e-12);
        // Round trip through the inverse permutation.
        let back = revert_device_frame(&f, DeviceConvention::Openxr, &calib).unwrap();
        assert!((back.translation - fwd.translation).norm() < 1e-12);
    }

    #[test]
    fn missing_calibration_is_reported() {
        let p = pose([0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]);
        let calib = FrameCalibration::default();
        assert!(matches!(
            convert_device_frame(&p, DeviceConvention::Openxr, &calib),
            Err(KinematicsError::MissingCalibration(_))
        ));
        assert!(matches!(
            wrist_offset_pelvis(&p, &p, &calib),
            Err(KinematicsError::MissingCalibration(_))
        ));
    }

    #[test]
    fn wrist_at_head_maps_to_head_reference() {
        let calib = calib_from(RigidTransform::identity(FrameId::pelvis()));
        let head = pose([0.1, 0.2, 1.6], [1.0, 0.0, 0.0, 0.0]);
        let out = wrist_offset_pelvis(&head, &head, &calib).unwrap();
        assert!((out.translation - Vector3::new(0.0, 0.0, 0.65)).norm() < 1e-12);
    }

    #[test]
    fn wrist_translation_carries_through_offset() {
        let calib = calib_from(RigidTransform::identity(FrameId::pelvis()));
        let head = pose([0.0, 0.0, 1.6], [1.0, 0.0, 0.0, 0.0]);
        let wrist = pose([0.3, -0.2, 1.2], [1.0, 0.0, 0.0, 0.0]);
        let base = wrist_offset_pelvis(&head, &wrist, &calib).unwrap();
        // Oracle: h2p ∘ head⁻¹ ∘ wrist with identity rotations is a vector sum.
        let oracle = Vector3::new(0.0, 0.0, 0.65) + (wrist.translation - head.translation);
        assert!((base.translation - oracle).norm() < 1e-12);
        let mut moved = wrist.clone();
        moved.translation.x += 0.1;
        let shifted = wrist_offset_pelvis(&head, &moved, &calib).unwrap();
        assert!((shifted.translation - base.translation - Vector3::new(0.1, 0.0, 0.0)).norm() < 1e-12);
        // Head and wrist translated together: offset unchanged.
        let mut head2 = head.clone();
        head2.translation.x += 0.1;
        let same = wrist_offset_pelvis(&head2, &moved, &calib).unwrap();
        assert!((same.translation - base.translation).norm() < 1e-12);
    }

    proptest! {
        #[test]
        fn convert_round_trips(p in arb_pose(), c in arb_pose()) {
            let calib = calib_from(c);
            for conv in [DeviceConvention::Openxr, DeviceConvention::MocapGlobal, DeviceConvention::ExoNative] {
                let out = convert_device_frame(&p, conv, &calib).unwrap();
                let back = revert_device_frame(&out, conv, &calib).unwrap();
                prop_assert!((back.translation - p.translation).norm() < 1e-9);
                prop_assert!(quaternion_distance(&back.rotation, &p.rotation) < 1e-9);
                // Converting with an inverted calibration undoes the reference.
                let inv = convert_device_frame(&out, DeviceConvention::ExoNative, &calib.inverse()).unwrap();
                let permuted = convert_device_frame(&p, conv, &FrameCalibration::identity()).unwrap();
                prop_assert!((inv.translation - permuted.translation).norm() < 1e-9);
            }
        }

        #[test]
        fn conversion_is_an_isometry(a in arb_pose(), b in arb_pose(), c in arb_pose()) {
            let calib = calib_from(c);
            let ca = convert_device_frame(&a, DeviceConvention::Openxr, &calib).unwrap();
            let cb = convert_device_frame(&b, DeviceConvention::Openxr, &calib).unwrap();
            let d0 = (a.translation - b.translation).norm();
            let d1 = (ca.translation - cb.translation).norm();
            prop_assert!((d0 - d1).abs() < 1e-9);
            prop_assert!((ca.rotation.quaternion().norm() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn head_rotation_preserves_wrist_distance(angle in -3.0f64..3.0, w in arb_pose()) {
            let calib = calib_from(RigidTransform::identity(FrameId::pelvis()));
            let head = pose([0.0, 0.0, 1.6], [1.0, 0.0, 0.0, 0.0]);
            let mut rotated = head.clone();
            rotated.rotation = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), angle);
            let anchor = calib.head_to_pelvis.clone().unwrap().translation;
            let a = wrist_offset_pelvis(&head, &w, &calib).unwrap();
            let b = wrist_offset_pelvis(&rotated, &w, &calib).unwrap();
            prop_assert!(((a.translation - anchor).norm() - (b.translation - anchor).norm()).abs() < 1e-9);
        }
    }
}
