//! Pinhole intrinsics, projection and backprojection.

use alloc::format;
use alloc::string::String;
use nalgebra::Vector3;
use num_traits::Float;

use crate::pose::Pose;

/// Pinhole camera intrinsics plus the depth storage scale of the dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Meters per stored depth unit (16-bit rasters on disk).
    pub depth_scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum CameraError {
    InvalidDepth(f64),
    InvalidIntrinsics(String),
}

impl core::fmt::Display for CameraError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            CameraError::InvalidDepth(d) => write!(f, "invalid depth {d} (must be > 0)"),
            CameraError::InvalidIntrinsics(msg) => write!(f, "invalid intrinsics: {msg}"),
        }
    }
}

impl core::error::Error for CameraError {}

impl Intrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        depth_scale: f64,
    ) -> Result<Self, CameraError> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(CameraError::InvalidIntrinsics(format!("fx={fx}, fy={fy}")));
        }
        if cx <= 0.0 || cx >= width as f64 || cy <= 0.0 || cy >= height as f64 {
            return Err(CameraError::InvalidIntrinsics(format!(
                "principal point ({cx},{cy}) outside {width}x{height}"
            )));
        }
        if depth_scale <= 0.0 {
            return Err(CameraError::InvalidIntrinsics(format!("depth_scale={depth_scale}")));
        }
        Ok(Intrinsics { fx, fy, cx, cy, width, height, depth_scale })
    }

    /// Desk-scale default: 80x60 at fx=fy=60, millimeter depth storage.
    pub fn desk_default() -> Self {
        Intrinsics { fx: 60.0, fy: 60.0, cx: 40.0, cy: 30.0, width: 80, height: 60, depth_scale: 1e-3 }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Camera-frame point of pixel (u, v) at depth d.
    pub fn unproject(&self, u: f64, v: f64, d: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) * d / self.fx, (v - self.cy) * d / self.fy, d)
    }

    /// Unit-norm camera-frame ray direction through pixel (u, v), and the
    /// range-per-depth factor for that pixel (range = depth * factor).
    pub fn pixel_ray(&self, u: f64, v: f64) -> (Vector3<f64>, f64) {
        let px = (u - self.cx) / self.fx;
        let py = (v - self.cy) / self.fy;
        let scale = (px * px + py * py + 1.0).sqrt();
        (Vector3::new(px / scale, py / scale, 1.0 / scale), scale)
    }

    /// Projects a camera-frame point; `None` when at or behind the camera.
    pub fn project(&self, p_cam: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        if p_cam.z <= 0.0 {
            return None;
        }
        let u = self.fx * p_cam.x / p_cam.z + self.cx;
        let v = self.fy * p_cam.y / p_cam.z + self.cy;
        Some((u, v, p_cam.z))
    }

    /// True when (u, v) lies inside the image bounds.
    pub fn in_bounds(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }
}

/// World point of pixel (u, v) with depth `d`, through pose `pose`.
pub fn backproject(
    k: &Intrinsics,
    u: f64,
    v: f64,
    d: f64,
    pose: &Pose,
) -> Result<Vector3<f64>, CameraError> {
    if d <= 0.0 {
        return Err(CameraError::InvalidDepth(d));
    }
    Ok(pose.transform_point(&k.unproject(u, v, d)))
}

/// Projects a world point into the image of a camera at `pose`.
pub fn project_world(k: &Intrinsics, pose: &Pose, p_world: &Vector3<f64>) -> Option<(f64, f64, f64)> {
    let p_cam = pose.inverse().transform_point(p_world);
    k.project(&p_cam)
}
