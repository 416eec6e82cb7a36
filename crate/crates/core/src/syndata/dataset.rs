//! On-disk dataset layout.
//!
//! ```text
//! out/dataset.json
//! out/{split}/sample_00000.png          RGB image
//! out/{split}/sample_00000_labels.png   class indices (when labels are covered)
//! out/{split}/sample_00000.json         camera, coverage and covered annotations
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{Camera, CoverageProfile, FigureInstance, LabelImage, PartGeometry, RgbImage, SynConfig, Vec3};
use crate::error::{Error, Result};
use crate::io;
use crate::losses::CoverageMask;

pub const DATASET_FORMAT: &str = "humansense-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub profile: CoverageProfile,
    pub config: SynConfig,
    pub joints: usize,
    pub parts: usize,
    /// Split name to sample indices, in order.
    pub splits: IndexMap<String, Vec<usize>>,
}

impl DatasetManifest {
    pub fn count(&self) -> usize {
        self.splits.values().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    index: usize,
    coverage: CoverageMask,
    camera: Camera,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    joints2d: Option<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pose3d: Option<Vec<Vec3>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    geometry: Option<PartGeometry>,
}

pub fn image_name(index: usize) -> String {
    format!("sample_{index:05}.png")
}

pub fn labels_name(index: usize) -> String {
    format!("sample_{index:05}_labels.png")
}

pub fn sidecar_name(index: usize) -> String {
    format!("sample_{index:05}.json")
}

fn encode_png(path: &Path, data: &[u8], width: usize, height: usize, color: image::ExtendedColorType) -> Result<()> {
    let mut bytes = Vec::new();
    let encoder = image::codecs::png::PngEncoder::new(&mut bytes);
    image::ImageEncoder::write_image(encoder, data, width as u32, height as u32, color)
        .map_err(|e| Error::format(path, e))?;
    io::write_atomic(path, &bytes)
}

pub fn write_rgb_png(path: &Path, img: &RgbImage) -> Result<()> {
    encode_png(path, &img.data, img.width, img.height, image::ExtendedColorType::Rgb8)
}

pub fn write_label_png(path: &Path, labels: &LabelImage) -> Result<()> {
    encode_png(path, &labels.data, labels.width, labels.height, image::ExtendedColorType::L8)
}

pub fn read_rgb_png(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::format(path, e))?.into_rgb8();
    Ok(RgbImage {
        height: img.height() as usize,
        width: img.width() as usize,
        data: img.into_raw(),
    })
}

pub fn read_label_png(path: &Path) -> Result<LabelImage> {
    let img = image::open(path).map_err(|e| Error::format(path, e))?;
    let image::DynamicImage::ImageLuma8(img) = img else {
        return Err(Error::format(path, "label image must be 8-bit grayscale"));
    };
    Ok(LabelImage {
        height: img.height() as usize,
        width: img.width() as usize,
        data: img.into_raw(),
    })
}

pub fn write_sample(dir: &Path, inst: &FigureInstance) -> Result<()> {
    write_rgb_png(&dir.join(image_name(inst.index)), &inst.image)?;
    if let Some(labels) = &inst.labels {
        write_label_png(&dir.join(labels_name(inst.index)), labels)?;
    }
    let sidecar = Sidecar {
        index: inst.index,
        coverage: inst.coverage,
        camera: inst.camera,
        joints2d: inst.joints2d.clone(),
        pose3d: inst.pose3d.clone(),
        geometry: inst.geometry.clone(),
    };
    io::write_json_pretty(&dir.join(sidecar_name(inst.index)), &sidecar)
}

pub fn read_sample(dir: &Path, index: usize) -> Result<FigureInstance> {
    let sidecar_path = dir.join(sidecar_name(index));
    let sc: Sidecar = io::read_json(&sidecar_path)?;
    if sc.index != index {
        return Err(Error::format(&sidecar_path, format!("sidecar is for sample {}", sc.index)));
    }
    let image = read_rgb_png(&dir.join(image_name(index)))?;
    let labels = if sc.coverage.part_labels {
        Some(read_label_png(&dir.join(labels_name(index)))?)
    } else {
        None
    };
    Ok(FigureInstance {
        index,
        camera: sc.camera,
        image,
        pose3d: sc.pose3d,
        joints2d: sc.joints2d,
        labels,
        geometry: sc.geometry,
        coverage: sc.coverage,
    })
}

/// Writes every split and then the index.
pub fn write_dataset(root: &Path, manifest: &DatasetManifest, splits: &IndexMap<String, Vec<FigureInstance>>) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for (name, samples) in splits {
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for s in samples {
            write_sample(&dir, s)?;
        }
    }
    io::write_json_pretty(&manifest_path(root), manifest)
}

pub fn manifest_path(root: &Path) -> PathBuf {
    root.join("dataset.json")
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = manifest_path(root);
    let m: DatasetManifest = io::read_json(&path)?;
    if m.format != DATASET_FORMAT {
        return Err(Error::format(&path, format!("not a dataset manifest (format {:?})", m.format)));
    }
    if m.version != DATASET_VERSION {
        return Err(Error::format(&path, format!("unsupported dataset version {}", m.version)));
    }
    Ok(m)
}

/// Loads one split and checks every sample against the manifest's
/// skeleton.
pub fn read_split(root: &Path, manifest: &DatasetManifest, split: &str) -> Result<Vec<FigureInstance>> {
    let indices = manifest
        .splits
        .get(split)
        .ok_or_else(|| Error::Data(format!("dataset has no split {split:?}")))?;
    let skeleton = manifest.config.skeleton();
    let dir = root.join(split);
    indices
        .iter()
        .map(|&i| {
            let s = read_sample(&dir, i)?;
            s.check_consistency(&skeleton)?;
            if s.image.height != manifest.config.height || s.image.width != manifest.config.width {
                return Err(Error::Data(format!("sample {i}: image size differs from the manifest")));
            }
            Ok(s)
        })
        .collect()
}
