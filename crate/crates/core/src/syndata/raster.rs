//! Part-label synthesis: ellipses for segments, circles for joints.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{BoneClass, KinematicLayout, Primitive, BACKGROUND};

/// Minor-axis constants as fractions of the bone length, and the head circle
/// radius as a fraction of the head bone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometryConfig {
    pub torso: f64,
    pub upper_limb: f64,
    pub lower_limb: f64,
    pub head: f64,
    /// Lower bound on every semi-axis and radius so that each primitive
    /// covers the pixel nearest to its center.
    pub min_semi_axis_px: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            torso: 0.35,
            upper_limb: 0.22,
            lower_limb: 0.18,
            head: 0.5,
            min_semi_axis_px: 0.75,
        }
    }
}

impl GeometryConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [self.torso, self.upper_limb, self.lower_limb, self.head];
        if all.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config("part geometry ratios must be positive".into()));
        }
        if !(self.min_semi_axis_px >= std::f64::consts::FRAC_1_SQRT_2) {
            return Err(Error::Config("min_semi_axis_px must be at least 1/sqrt(2)".into()));
        }
        Ok(())
    }
}

/// Resolved pixel sizes of every primitive of one figure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartGeometry {
    /// Full minor axis per bone; for the head, the circle diameter.
    pub bone_width_px: Vec<f64>,
    /// Circle radius per joint, `None` where no circle is drawn.
    pub joint_radius_px: Vec<Option<f64>>,
    pub min_semi_axis_px: f64,
}

impl PartGeometry {
    /// Sizes for a figure imaged at `px_per_mm` (focal / root depth).
    pub fn new(skeleton: &KinematicLayout, cfg: &GeometryConfig, px_per_mm: f64) -> Self {
        let bone_width_px: Vec<f64> = skeleton
            .bones
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let ratio = match b.class {
                    BoneClass::Torso => cfg.torso,
                    BoneClass::UpperLimb => cfg.upper_limb,
                    BoneClass::LowerLimb => cfg.lower_limb,
                    BoneClass::Head => 2.0 * cfg.head,
                };
                ratio * skeleton.bone_length(i) * px_per_mm
            })
            .collect();
        let joint_radius_px = (0..skeleton.num_joints())
            .map(|j| {
                skeleton.joint_labels[j]?;
                let widest = skeleton
                    .bones
                    .iter()
                    .zip(&bone_width_px)
                    .filter(|(b, _)| b.class != BoneClass::Head && (b.parent == j || b.child == j))
                    .map(|(_, w)| *w)
                    .fold(0.0, f64::max);
                Some(0.5 * widest)
            })
            .collect();
        Self {
            bone_width_px,
            joint_radius_px,
            min_semi_axis_px: cfg.min_semi_axis_px,
        }
    }

    /// Every size multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            bone_width_px: self.bone_width_px.iter().map(|w| w * s).collect(),
            joint_radius_px: self.joint_radius_px.iter().map(|r| r.map(|r| r * s)).collect(),
            min_semi_axis_px: self.min_semi_axis_px,
        }
    }

    /// Sizes after a mirror swap of the skeleton.
    pub fn mirrored(&self, skeleton: &KinematicLayout) -> Self {
        let bone_of = |joint: usize| skeleton.bones.iter().position(|b| b.child == joint);
        let bone_width_px = skeleton
            .bones
            .iter()
            .map(|b| {
                let m = bone_of(skeleton.mirror[b.child]).expect("mirrored bone");
                self.bone_width_px[m]
            })
            .collect();
        let joint_radius_px = (0..skeleton.num_joints())
            .map(|j| self.joint_radius_px[skeleton.mirror[j]])
            .collect();
        Self {
            bone_width_px,
            joint_radius_px,
            min_semi_axis_px: self.min_semi_axis_px,
        }
    }

    pub fn validate(&self, skeleton: &KinematicLayout) -> Result<()> {
        if self.bone_width_px.len() != skeleton.bones.len() || self.joint_radius_px.len() != skeleton.num_joints() {
            return Err(Error::Data("part geometry does not match the skeleton".into()));
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !self.bone_width_px.iter().all(|&w| positive(w))
            || !self.joint_radius_px.iter().flatten().all(|&r| positive(r))
        {
            return Err(Error::Data("part geometry sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Ellipse {
        center: [f64; 2],
        /// Unit vector along the major axis (the segment direction).
        axis: [f64; 2],
        semi_major: f64,
        semi_minor: f64,
    },
    Circle {
        center: [f64; 2],
        radius: f64,
    },
}

impl Shape {
    pub fn center(&self) -> [f64; 2] {
        match *self {
            Shape::Ellipse { center, .. } | Shape::Circle { center, .. } => center,
        }
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        match *self {
            Shape::Circle { center, radius } => {
                let (dx, dy) = (p[0] - center[0], p[1] - center[1]);
                dx * dx + dy * dy <= radius * radius
            }
            Shape::Ellipse {
                center,
                axis,
                semi_major,
                semi_minor,
            } => {
                let (dx, dy) = (p[0] - center[0], p[1] - center[1]);
                let a = dx * axis[0] + dy * axis[1];
                let b = -dx * axis[1] + dy * axis[0];
                (a / semi_major).powi(2) + (b / semi_minor).powi(2) <= 1.0
            }
        }
    }

    /// Radius of a circle enclosing the shape.
    pub fn extent(&self) -> f64 {
        match *self {
            Shape::Circle { radius, .. } => radius,
            Shape::Ellipse {
                semi_major, semi_minor, ..
            } => semi_major.max(semi_minor),
        }
    }
}

/// One drawable primitive in painter order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placed {
    pub primitive: Primitive,
    pub label: u8,
    pub shape: Shape,
}

/// The figure's primitives, first-painted first.
pub fn primitive_shapes(skeleton: &KinematicLayout, joints2d: &[[f64; 2]], geometry: &PartGeometry) -> Vec<Placed> {
    let min = geometry.min_semi_axis_px;
    skeleton
        .painter_order
        .iter()
        .filter_map(|&primitive| {
            let (label, shape) = match primitive {
                Primitive::Joint(j) => {
                    let label = skeleton.joint_labels[j]?;
                    let radius = geometry.joint_radius_px[j]?.max(min);
                    (label, Shape::Circle { center: joints2d[j], radius })
                }
                Primitive::Bone(i) => {
                    let bone = &skeleton.bones[i];
                    let (a, b) = (joints2d[bone.parent], joints2d[bone.child]);
                    let center = [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0];
                    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
                    let len = (dx * dx + dy * dy).sqrt();
                    let width = geometry.bone_width_px[i];
                    let shape = if bone.class == BoneClass::Head || len < 1e-9 {
                        Shape::Circle {
                            center,
                            radius: (width / 2.0).max(min),
                        }
                    } else {
                        Shape::Ellipse {
                            center,
                            axis: [dx / len, dy / len],
                            semi_major: (len / 2.0).max(min),
                            semi_minor: (width / 2.0).max(min),
                        }
                    };
                    (bone.label, shape)
                }
            };
            Some(Placed { primitive, label, shape })
        })
        .collect()
}

/// Row-major single-channel image of class indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelImage {
    pub fn background(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![BACKGROUND; height * width],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn as_indices(&self) -> Vec<usize> {
        self.data.iter().map(|&l| l as usize).collect()
    }

    pub fn foreground_pixels(&self) -> usize {
        self.data.iter().filter(|&&l| l != BACKGROUND).count()
    }
}

/// Paints every primitive in order; a pixel takes the label of the last
/// primitive containing its center.
pub fn rasterize_part_labels(
    skeleton: &KinematicLayout,
    joints2d: &[[f64; 2]],
    geometry: &PartGeometry,
    height: usize,
    width: usize,
) -> LabelImage {
    let mut img = LabelImage::background(height, width);
    for placed in primitive_shapes(skeleton, joints2d, geometry) {
        let c = placed.shape.center();
        let r = placed.shape.extent();
        let x0 = (c[0] - r).floor().max(0.0);
        let y0 = (c[1] - r).floor().max(0.0);
        let x1 = (c[0] + r).ceil().min(width as f64 - 1.0);
        let y1 = (c[1] + r).ceil().min(height as f64 - 1.0);
        if !(x0 <= x1 && y0 <= y1) {
            continue;
        }
        for y in y0 as usize..=y1 as usize {
            for x in x0 as usize..=x1 as usize {
                if placed.shape.contains([x as f64, y as f64]) {
                    img.data[y * width + x] = placed.label;
                }
            }
        }
    }
    img
}

fn in_bounds(p: [f64; 2], height: usize, width: usize) -> bool {
    p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= width as f64 - 1.0 && p[1] <= height as f64 - 1.0
}

/// Checks that every segment with both endpoints inside the image, whose
/// midpoint pixel no later primitive covers, carries its own label there.
pub fn check_midpoint_labels(
    skeleton: &KinematicLayout,
    joints2d: &[[f64; 2]],
    geometry: &PartGeometry,
    labels: &LabelImage,
) -> Result<()> {
    let placed = primitive_shapes(skeleton, joints2d, geometry);
    for (k, p) in placed.iter().enumerate() {
        let Primitive::Bone(i) = p.primitive else { continue };
        let bone = &skeleton.bones[i];
        let (a, b) = (joints2d[bone.parent], joints2d[bone.child]);
        if !in_bounds(a, labels.height, labels.width) || !in_bounds(b, labels.height, labels.width) {
            continue;
        }
        let mid = [((a[0] + b[0]) / 2.0).round(), ((a[1] + b[1]) / 2.0).round()];
        if placed[k + 1..].iter().any(|q| q.shape.contains(mid)) {
            continue;
        }
        let got = labels.get(mid[0] as usize, mid[1] as usize);
        if got != p.label {
            return Err(Error::Data(format!(
                "segment {} midpoint ({}, {}) is labeled {got}, expected {}",
                bone.name, mid[0], mid[1], p.label
            )));
        }
    }
    Ok(())
}
