//! Pinhole camera.

use serde::{Deserialize, Serialize};

use super::pose::Vec3;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    /// Focal length in pixels.
    pub focal: f64,
    /// Principal point, pixels. Pixel `(x, y)` has its center at `(x, y)`.
    pub cu: f64,
    pub cv: f64,
}

impl Camera {
    /// Principal point at the center of a `width x height` image.
    pub fn centered(focal: f64, width: usize, height: usize) -> Self {
        Self {
            focal,
            cu: (width as f64 - 1.0) / 2.0,
            cv: (height as f64 - 1.0) / 2.0,
        }
    }

    pub fn project_point(&self, p: &Vec3) -> [f64; 2] {
        [self.focal * p[0] / p[2] + self.cu, self.focal * p[1] / p[2] + self.cv]
    }
}

/// `u = f X / Z + c_u`, `v = f Y / Z + c_v` for every joint.
pub fn project_to_2d(pose3d: &[Vec3], camera: &Camera) -> Result<Vec<[f64; 2]>> {
    if let Some((joint, p)) = pose3d.iter().enumerate().find(|(_, p)| !(p[2] > 0.0)) {
        return Err(Error::BehindCamera { joint, depth: p[2] });
    }
    Ok(pose3d.iter().map(|p| camera.project_point(p)).collect())
}
