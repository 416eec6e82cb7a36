//! Similarity transforms of a sample about the principal point.
//!
//! An in-plane rotation is a camera roll, a scale is a focal-length change
//! and a horizontal flip mirrors the camera X axis and swaps left and right.
//! The 3D pose, camera, 2D joints, part labels and image therefore stay
//! mutually consistent after the transform.

use serde::{Deserialize, Serialize};

use super::pose::{mat_vec, rot_z, Vec3};
use super::raster::rasterize_part_labels;
use super::render::RgbImage;
use super::{project_to_2d, FigureInstance};
use crate::error::{Error, Result};
use crate::skeleton::KinematicLayout;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    /// Rotation in degrees, applied in pixel coordinates (y down).
    pub angle_deg: f64,
    pub scale: f64,
    pub flip: bool,
}

impl Similarity {
    pub const IDENTITY: Similarity = Similarity {
        angle_deg: 0.0,
        scale: 1.0,
        flip: false,
    };

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    /// Linear part `s * R(angle) * F` acting on offsets from the center.
    pub fn matrix(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let f = if self.flip { -1.0 } else { 1.0 };
        [[self.scale * c * f, -self.scale * s], [self.scale * s * f, self.scale * c]]
    }

    /// Maps an image point; `center` is the principal point.
    pub fn apply(&self, p: [f64; 2], center: [f64; 2]) -> [f64; 2] {
        let m = self.matrix();
        let (dx, dy) = (p[0] - center[0], p[1] - center[1]);
        [center[0] + m[0][0] * dx + m[0][1] * dy, center[1] + m[1][0] * dx + m[1][1] * dy]
    }

    fn apply_3d(&self, p: &Vec3) -> Vec3 {
        let q = if self.flip { [-p[0], p[1], p[2]] } else { *p };
        mat_vec(&rot_z(self.angle_deg.to_radians()), &q)
    }
}

fn swap_mirrored<T: Copy>(values: &[T], skeleton: &KinematicLayout, flip: bool) -> Vec<T> {
    if flip {
        (0..values.len()).map(|k| values[skeleton.mirror[k]]).collect()
    } else {
        values.to_vec()
    }
}

/// Bilinear resampling: output pixel `q` reads the source at the inverse
/// transform of `q`, clamping to the border.
fn warp_image(img: &RgbImage, t: &Similarity, center: [f64; 2]) -> RgbImage {
    let m = t.matrix();
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let inv = [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]];
    let (h, w) = (img.height, img.width);
    let at = |x: usize, y: usize, c: usize| img.data[(y * w + x) * 3 + c] as f64 / 255.0;
    let mut out = vec![0.0; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - center[0], y as f64 - center[1]);
            let sx = (center[0] + inv[0][0] * dx + inv[0][1] * dy).clamp(0.0, w as f64 - 1.0);
            let sy = (center[1] + inv[1][0] * dx + inv[1][1] * dy).clamp(0.0, h as f64 - 1.0);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            for c in 0..3 {
                let top = at(x0, y0, c) * (1.0 - fx) + at(x1, y0, c) * fx;
                let bottom = at(x0, y1, c) * (1.0 - fx) + at(x1, y1, c) * fx;
                out[(y * w + x) * 3 + c] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    RgbImage::from_unit(h, w, &out)
}

/// Applies `t` to every part of the sample. Part labels are re-rasterized
/// from the transformed joints with sizes scaled by `t.scale`; mirrored
/// joints and parts trade places on a flip. Coverage is unchanged.
pub fn transform_instance(inst: &FigureInstance, skeleton: &KinematicLayout, t: &Similarity) -> Result<FigureInstance> {
    if !(t.scale.is_finite() && t.scale > 0.0 && t.angle_deg.is_finite()) {
        return Err(Error::Config("similarity must have a positive scale and a finite angle".into()));
    }
    if t.is_identity() {
        return Ok(inst.clone());
    }
    let center = [inst.camera.cu, inst.camera.cv];
    let mut camera = inst.camera;
    camera.focal *= t.scale;

    let pose3d = inst
        .pose3d
        .as_ref()
        .map(|p| swap_mirrored(p, skeleton, t.flip).iter().map(|q| t.apply_3d(q)).collect::<Vec<_>>());
    // With a 3D pose at hand the joints are re-projected so that projection
    // consistency stays exact rather than equal up to rounding.
    let joints2d = match (&inst.joints2d, &pose3d) {
        (None, _) => None,
        (Some(_), Some(p)) => Some(project_to_2d(p, &camera)?),
        (Some(p), None) => Some(swap_mirrored(p, skeleton, t.flip).iter().map(|q| t.apply(*q, center)).collect()),
    };
    let geometry = inst.geometry.as_ref().map(|g| {
        let g = g.scaled(t.scale);
        if t.flip {
            g.mirrored(skeleton)
        } else {
            g
        }
    });
    let labels = match (&inst.labels, &joints2d, &geometry) {
        (None, _, _) => None,
        (Some(l), Some(j), Some(g)) => Some(rasterize_part_labels(skeleton, j, g, l.height, l.width)),
        _ => {
            return Err(Error::Data(format!(
                "sample {}: part labels need 2D joints and part geometry to be transformed",
                inst.index
            )))
        }
    };
    Ok(FigureInstance {
        index: inst.index,
        camera,
        image: warp_image(&inst.image, t, center),
        pose3d,
        joints2d,
        labels,
        geometry,
        coverage: inst.coverage,
    })
}
