//! Pinhole camera model and body-camera extrinsics shared by the simulator,
//! tracker, and estimator.

use nalgebra::{Isometry3, Matrix3, Translation3, UnitQuaternion, Vector2, Vector3};

/// Intrinsics plus the rigid transform taking body-frame points to
/// camera-frame points. Camera axes: z forward (optical axis), x right,
/// y down; pixel coordinates put integer positions at pixel centers.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Maps body-frame points into the camera frame.
    pub body_to_camera: Isometry3<f64>,
}

/// Points closer than this along the optical axis do not project.
pub const MIN_PROJECTION_DEPTH: f64 = 1e-6;

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, body_to_camera: Isometry3<f64>) -> Self {
        Self { fx, fy, cx, cy, body_to_camera }
    }

    /// A forward-looking rig on a robot body with x forward, y left, z up:
    /// the optical axis is the body x axis, mounted `forward_offset` meters
    /// ahead of the body origin.
    pub fn forward_rig(fx: f64, fy: f64, cx: f64, cy: f64, forward_offset: f64) -> Self {
        // Rows are the camera axes expressed in body coordinates:
        // camera x = -body y, camera y = -body z, camera z = +body x.
        let r_cb = Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0);
        let rot = UnitQuaternion::from_matrix(&r_cb);
        let camera_in_body = Vector3::new(forward_offset, 0.0, 0.0);
        let translation = Translation3::from(-(rot * camera_in_body));
        Self::new(fx, fy, cx, cy, Isometry3::from_parts(translation, rot))
    }

    /// Projects a camera-frame point; `None` behind or on the image plane.
    pub fn project(&self, p_cam: &Vector3<f64>) -> Option<Vector2<f64>> {
        if p_cam.z < MIN_PROJECTION_DEPTH {
            return None;
        }
        Some(Vector2::new(
            self.fx * p_cam.x / p_cam.z + self.cx,
            self.fy * p_cam.y / p_cam.z + self.cy,
        ))
    }

    /// Unit-depth ray through a pixel, in camera coordinates.
    pub fn unproject(&self, pixel: Vector2<f64>) -> Vector3<f64> {
        Vector3::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy, 1.0)
    }

    /// Camera pose in the world given the body pose (body-to-world).
    pub fn camera_to_world(&self, body_to_world: &Isometry3<f64>) -> Isometry3<f64> {
        body_to_world * self.body_to_camera.inverse()
    }

    /// World-to-camera transform given the body pose (body-to-world).
    pub fn world_to_camera(&self, body_to_world: &Isometry3<f64>) -> Isometry3<f64> {
        self.body_to_camera * body_to_world.inverse()
    }

    /// Intrinsic matrix K.
    pub fn intrinsic_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn project_unproject_round_trip() {
        let cam = CameraModel::forward_rig(228.0, 228.0, 159.5, 119.5, 0.05);
        let p = Vector3::new(0.3, -0.2, 4.0);
        let px = cam.project(&p).unwrap();
        let ray = cam.unproject(px);
        assert_relative_eq!((ray * p.z - p).norm(), 0.0, epsilon = 1e-12);
        assert!(cam.project(&Vector3::new(0.0, 0.0, -1.0)).is_none());
    }

    #[test]
    fn forward_rig_looks_along_body_x() {
        let cam = CameraModel::forward_rig(228.0, 228.0, 159.5, 119.5, 0.0);
        // A point ahead of the body maps onto the optical axis.
        let p_cam = cam.body_to_camera * nalgebra::Point3::new(5.0, 0.0, 0.0);
        assert_relative_eq!(p_cam.x, 0.0, epsilon = 1e-12);
        assert_relative_eq!(p_cam.y, 0.0, epsilon = 1e-12);
        assert_relative_eq!(p_cam.z, 5.0, epsilon = 1e-12);
        // A point left of the body appears on the left of the image (-x cam).
        let left = cam.body_to_camera * nalgebra::Point3::new(5.0, 1.0, 0.0);
        assert!(left.x < 0.0);
        // A point above the body appears in the upper image half (-y cam).
        let up = cam.body_to_camera * nalgebra::Point3::new(5.0, 0.0, 1.0);
        assert!(up.y < 0.0);
    }

    #[test]
    fn intrinsic_matrix_layout() {
        let cam = CameraModel::forward_rig(200.0, 210.0, 100.0, 90.0, 0.0);
        let k = cam.intrinsic_matrix();
        assert_eq!(k[(0, 0)], 200.0);
        assert_eq!(k[(1, 1)], 210.0);
        assert_eq!(k[(0, 2)], 100.0);
        assert_eq!(k[(1, 2)], 90.0);
        assert_eq!(k[(2, 2)], 1.0);
    }
}
