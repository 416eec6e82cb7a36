//! Procedural articulated-figure samples with full annotations.
//!
//! A sample is produced by drawing joint angles, placing the figure in
//! front of a pinhole camera, projecting the joints, painting ellipse and
//! circle part labels and rendering the label image into RGB. Every sample
//! uses its own random stream derived from `(seed, index)`, so any subset of
//! a dataset can be regenerated independently.

pub mod camera;
pub mod dataset;
pub mod heatmap;
pub mod pose;
pub mod raster;
pub mod render;
pub mod transform;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use camera::{project_to_2d, Camera};
pub use heatmap::{heatmaps_for_image, make_joint_heatmaps, Heatmaps};
pub use pose::{forward_kinematics, sample_pose3d, Vec3};
pub use raster::{check_midpoint_labels, rasterize_part_labels, GeometryConfig, LabelImage, PartGeometry};
pub use render::{render_image, Background, RenderStyle, RgbImage};
pub use transform::{transform_instance, Similarity};

use crate::error::{Error, Result};
use crate::losses::CoverageMask;
use crate::skeleton::{KinematicLayout, Taxonomy, BACKGROUND};

/// Nominal standing height of the default figure, used to size the camera.
pub const FIGURE_HEIGHT_MM: f64 = 1700.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynConfig {
    pub height: usize,
    pub width: usize,
    pub taxonomy: Taxonomy,
    /// Range of the pelvis depth.
    pub depth_mm: [f64; 2],
    /// Figure height as a fraction of the shorter image side, at mid depth.
    pub fill: f64,
    /// Random root offset as a fraction of the figure height.
    pub jitter: f64,
    pub geometry: GeometryConfig,
    pub render: RenderStyle,
    /// Minimum fraction of foreground pixels for a sample to be kept.
    pub min_foreground: f64,
    pub max_attempts: usize,
}

impl Default for SynConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            taxonomy: Taxonomy::Detailed,
            depth_mm: [4500.0, 5500.0],
            fill: 0.8,
            jitter: 0.04,
            geometry: GeometryConfig::default(),
            render: RenderStyle::default(),
            min_foreground: 0.02,
            max_attempts: 200,
        }
    }
}

impl SynConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("syndata: {m}")));
        if self.height < 8 || self.width < 8 {
            return fail("images must be at least 8x8");
        }
        let [lo, hi] = self.depth_mm;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return fail("depth range must be positive and ordered");
        }
        if !(self.fill > 0.0 && self.fill.is_finite()) {
            return fail("fill must be positive");
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return fail("jitter must be nonnegative");
        }
        if !(0.0..1.0).contains(&self.min_foreground) {
            return fail("min_foreground must lie in [0, 1)");
        }
        if self.max_attempts == 0 {
            return fail("max_attempts must be positive");
        }
        self.geometry.validate()?;
        self.render.validate()
    }

    pub fn skeleton(&self) -> KinematicLayout {
        KinematicLayout::human15(self.taxonomy)
    }

    pub fn focal(&self) -> f64 {
        let mid = (self.depth_mm[0] + self.depth_mm[1]) / 2.0;
        self.fill * self.height.min(self.width) as f64 * mid / FIGURE_HEIGHT_MM
    }

    pub fn camera(&self) -> Camera {
        Camera::centered(self.focal(), self.width, self.height)
    }
}

/// Dataset-level coverage recipe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CoverageProfile {
    Full,
    /// 2D joints and part labels, no 3D pose.
    TwoD,
    /// 3D pose only.
    ThreeD,
    /// Each sample is 2D-only with probability `p`, full otherwise.
    Mixed(f64),
}

impl CoverageProfile {
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> CoverageMask {
        match *self {
            CoverageProfile::Full => CoverageMask::FULL,
            CoverageProfile::TwoD => CoverageMask::TWO_D,
            CoverageProfile::ThreeD => CoverageMask::THREE_D,
            CoverageProfile::Mixed(p) => {
                if rng.random_bool(p) {
                    CoverageMask::TWO_D
                } else {
                    CoverageMask::FULL
                }
            }
        }
    }
}

impl fmt::Display for CoverageProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoverageProfile::Full => write!(f, "full"),
            CoverageProfile::TwoD => write!(f, "2d-only"),
            CoverageProfile::ThreeD => write!(f, "3d-only"),
            CoverageProfile::Mixed(p) => write!(f, "mixed({p})"),
        }
    }
}

impl FromStr for CoverageProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "full" => return Ok(CoverageProfile::Full),
            "2d-only" => return Ok(CoverageProfile::TwoD),
            "3d-only" => return Ok(CoverageProfile::ThreeD),
            _ => {}
        }
        let inner = s
            .strip_prefix("mixed(")
            .and_then(|r| r.strip_suffix(')'))
            .or_else(|| s.strip_prefix("mixed:"));
        if let Some(p) = inner.and_then(|p| p.trim().parse::<f64>().ok()) {
            if (0.0..=1.0).contains(&p) {
                return Ok(CoverageProfile::Mixed(p));
            }
        }
        Err(Error::Config(format!(
            "unknown coverage profile {s:?} (expected full, 2d-only, 3d-only or mixed(p))"
        )))
    }
}

impl Serialize for CoverageProfile {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for CoverageProfile {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// One sample. Annotation fields are present iff covered; `geometry`
/// accompanies `labels`.
#[derive(Debug, Clone, PartialEq)]
pub struct FigureInstance {
    pub index: usize,
    pub camera: Camera,
    pub image: RgbImage,
    /// Camera coordinates, millimeters.
    pub pose3d: Option<Vec<Vec3>>,
    pub joints2d: Option<Vec<[f64; 2]>>,
    pub labels: Option<LabelImage>,
    pub geometry: Option<PartGeometry>,
    pub coverage: CoverageMask,
}

impl FigureInstance {
    /// Drops every annotation `mask` does not cover.
    pub fn with_coverage(mut self, mask: CoverageMask) -> Result<Self> {
        mask.validate()?;
        let missing = (mask.pose3d && self.pose3d.is_none())
            || (mask.joints2d && self.joints2d.is_none())
            || (mask.part_labels && self.labels.is_none());
        if missing {
            return Err(Error::Data(format!("sample {} lacks an annotation the mask requests", self.index)));
        }
        if !mask.pose3d {
            self.pose3d = None;
        }
        if !mask.joints2d {
            self.joints2d = None;
        }
        if !mask.part_labels {
            self.labels = None;
            self.geometry = None;
        }
        self.coverage = mask;
        Ok(self)
    }

    /// Pelvis-relative 3D pose.
    pub fn root_relative_pose(&self) -> Option<Vec<Vec3>> {
        let pose = self.pose3d.as_ref()?;
        let r = pose[0];
        Some(pose.iter().map(|p| [p[0] - r[0], p[1] - r[1], p[2] - r[2]]).collect())
    }

    pub fn check_consistency(&self, skeleton: &KinematicLayout) -> Result<()> {
        self.coverage.validate()?;
        let flags = [
            (self.coverage.pose3d, self.pose3d.is_some()),
            (self.coverage.joints2d, self.joints2d.is_some()),
            (self.coverage.part_labels, self.labels.is_some() && self.geometry.is_some()),
        ];
        if flags.iter().any(|(a, b)| a != b) {
            return Err(Error::Data(format!("sample {}: annotations disagree with coverage", self.index)));
        }
        let n = skeleton.num_joints();
        if self.pose3d.as_ref().is_some_and(|p| p.len() != n) || self.joints2d.as_ref().is_some_and(|p| p.len() != n) {
            return Err(Error::Data(format!("sample {}: expected {n} joints", self.index)));
        }
        if let Some(labels) = &self.labels {
            if labels.height != self.image.height || labels.width != self.image.width {
                return Err(Error::Data(format!("sample {}: label image size differs from image", self.index)));
            }
            if let Some(bad) = labels.data.iter().find(|&&l| l as usize >= skeleton.num_parts()) {
                return Err(Error::Data(format!("sample {}: label {bad} out of range", self.index)));
            }
        }
        if let Some(g) = &self.geometry {
            g.validate(skeleton)?;
        }
        Ok(())
    }
}

/// Exact projection consistency and the midpoint-label rule, for whatever
/// annotations the sample carries.
pub fn check_invariants(skeleton: &KinematicLayout, inst: &FigureInstance) -> Result<()> {
    inst.check_consistency(skeleton)?;
    if let (Some(pose), Some(j2d)) = (&inst.pose3d, &inst.joints2d) {
        let projected = project_to_2d(pose, &inst.camera)?;
        if projected != *j2d {
            return Err(Error::Data(format!("sample {}: 2D joints differ from the projection", inst.index)));
        }
    }
    if let (Some(j2d), Some(labels), Some(g)) = (&inst.joints2d, &inst.labels, &inst.geometry) {
        check_midpoint_labels(skeleton, j2d, g, labels)?;
    }
    Ok(())
}

/// Random stream of sample `index` in a dataset seeded with `seed`.
pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn accept(cfg: &SynConfig, skeleton: &KinematicLayout, joints2d: &[[f64; 2]], labels: &LabelImage) -> bool {
    let inside = joints2d.iter().all(|p| {
        p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= cfg.width as f64 - 1.0 && p[1] <= cfg.height as f64 - 1.0
    });
    if !inside {
        return false;
    }
    let fg = labels.foreground_pixels() as f64 / labels.data.len() as f64;
    if fg < cfg.min_foreground {
        return false;
    }
    let mut present = vec![false; skeleton.num_parts()];
    for &l in &labels.data {
        present[l as usize] = true;
    }
    skeleton.bones.iter().all(|b| present[b.label as usize])
}

/// A fully annotated sample; geometric checks replace manual curation, and
/// rejected draws are retried up to `max_attempts` times.
pub fn generate_figure(cfg: &SynConfig, skeleton: &KinematicLayout, seed: u64, index: usize) -> Result<FigureInstance> {
    let mut rng = sample_rng(seed, index);
    generate_figure_with(cfg, skeleton, &mut rng, index)
}

fn generate_figure_with(
    cfg: &SynConfig,
    skeleton: &KinematicLayout,
    rng: &mut ChaCha8Rng,
    index: usize,
) -> Result<FigureInstance> {
    let camera = cfg.camera();
    for _ in 0..cfg.max_attempts {
        let rel = sample_pose3d(rng, skeleton);
        let depth = rng.random_range(cfg.depth_mm[0]..=cfg.depth_mm[1]);
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in &rel {
            for a in 0..2 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let j = cfg.jitter * FIGURE_HEIGHT_MM;
        let mut offset = [0.0; 2];
        for a in 0..2 {
            let shake = if j > 0.0 { rng.random_range(-j..=j) } else { 0.0 };
            offset[a] = -(lo[a] + hi[a]) / 2.0 + shake;
        }
        let pose: Vec<Vec3> = rel
            .iter()
            .map(|p| [p[0] + offset[0], p[1] + offset[1], p[2] + depth])
            .collect();
        let Ok(joints2d) = project_to_2d(&pose, &camera) else { continue };
        let geometry = PartGeometry::new(skeleton, &cfg.geometry, camera.focal / depth);
        let labels = rasterize_part_labels(skeleton, &joints2d, &geometry, cfg.height, cfg.width);
        if !accept(cfg, skeleton, &joints2d, &labels) {
            continue;
        }
        let image = render_image(&labels, rng, &cfg.render);
        return Ok(FigureInstance {
            index,
            camera,
            image,
            pose3d: Some(pose),
            joints2d: Some(joints2d),
            labels: Some(labels),
            geometry: Some(geometry),
            coverage: CoverageMask::FULL,
        });
    }
    Err(Error::Data(format!(
        "sample {index}: no valid figure after {} attempts",
        cfg.max_attempts
    )))
}

/// `n` samples with coverage masks drawn from `profile`.
pub fn generate_dataset(cfg: &SynConfig, n: usize, profile: CoverageProfile, seed: u64) -> Result<Vec<FigureInstance>> {
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    cfg.validate()?;
    let skeleton = cfg.skeleton();
    (0..n).map(|i| generate_sample(cfg, &skeleton, profile, seed, i)).collect()
}

pub fn generate_sample(
    cfg: &SynConfig,
    skeleton: &KinematicLayout,
    profile: CoverageProfile,
    seed: u64,
    index: usize,
) -> Result<FigureInstance> {
    let mut rng = sample_rng(seed, index);
    let mask = profile.draw(&mut rng);
    generate_figure_with(cfg, skeleton, &mut rng, index)?.with_coverage(mask)
}

/// Number of distinct non-background labels in a label image.
pub fn visible_parts(labels: &LabelImage) -> usize {
    let mut seen = [false; 256];
    for &l in &labels.data {
        seen[l as usize] = true;
    }
    seen.iter().skip(BACKGROUND as usize + 1).filter(|&&s| s).count()
}
