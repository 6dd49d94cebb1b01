//! Camera description as TOML:
//!
//! ```toml
//! width = 128
//! height = 128
//! fx = 128.0
//! fy = 128.0
//! cx = 64.0
//! cy = 64.0
//! znear = 0.01
//! zfar = 100.0
//! world_to_view = [1, 0, 0, 0,  0, 1, 0, 0,  0, 0, 1, 0,  0, 0, 0, 1]  # row-major
//! ```

use std::fs;
use std::path::Path;

use hwsplat_core::scene::Camera;
use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use crate::error::{IoError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraFile {
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub znear: f64,
    pub zfar: f64,
    pub world_to_view: Vec<f64>,
}

impl CameraFile {
    pub fn from_camera(cam: &Camera) -> Self {
        Self {
            width: cam.width,
            height: cam.height,
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            znear: cam.znear,
            zfar: cam.zfar,
            world_to_view: cam.world_to_view.transpose().iter().copied().collect(),
        }
    }

    pub fn to_camera(&self) -> hwsplat_core::Result<Camera> {
        if self.world_to_view.len() != 16 {
            return Err(hwsplat_core::Error::InvalidCamera("world_to_view needs 16 numbers"));
        }
        let w2v = Matrix4::from_row_slice(&self.world_to_view);
        Camera::new(w2v, self.fx, self.fy, self.cx, self.cy, self.width, self.height, self.znear, self.zfar)
    }
}

pub fn read_camera(path: &Path) -> Result<Camera> {
    let text = fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    let file: CameraFile = toml::from_str(&text).map_err(|e| IoError::parse(path, e.to_string()))?;
    Ok(file.to_camera()?)
}

pub fn write_camera(path: &Path, cam: &Camera) -> Result<()> {
    let text = toml::to_string(&CameraFile::from_camera(cam)).expect("camera serializes");
    fs::write(path, text).map_err(|e| IoError::io(path, e))
}

/// Same view at a new resolution, intrinsics scaled per axis.
pub fn with_resolution(cam: &Camera, width: u32, height: u32) -> hwsplat_core::Result<Camera> {
    let sx = width as f64 / cam.width as f64;
    let sy = height as f64 / cam.height as f64;
    Camera::new(cam.world_to_view, cam.fx * sx, cam.fy * sy, cam.cx * sx, cam.cy * sy, width, height, cam.znear, cam.zfar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    #[test]
    fn toml_round_trip() {
        let cam = Camera::look_at(Vector3::new(1.0, 2.0, -3.0), Vector3::zeros(), Vector3::y(), 100.0, 64, 48).unwrap();
        let text = toml::to_string(&CameraFile::from_camera(&cam)).unwrap();
        let back: CameraFile = toml::from_str(&text).unwrap();
        assert_eq!(back.to_camera().unwrap(), cam);
    }

    #[test]
    fn rejects_odd_size_and_bad_matrix() {
        let mut f = CameraFile::from_camera(&Camera::look_at(Vector3::zeros(), Vector3::z(), -Vector3::y(), 10.0, 8, 8).unwrap());
        f.width = 7;
        assert!(f.to_camera().is_err());
        f.width = 8;
        f.world_to_view.pop();
        assert!(f.to_camera().is_err());
    }
}
