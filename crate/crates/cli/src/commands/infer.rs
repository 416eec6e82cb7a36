use std::path::Path;

use humansense::eval::argmax_labels;
use humansense::network::{StageOutputs, FEATURE_STRIDE};
use humansense::skeleton::KinematicLayout;
use humansense::syndata::dataset::{read_rgb_png, write_rgb_png};
use humansense::syndata::heatmap::heatmap_peaks;
use humansense::syndata::{RenderStyle, RgbImage};
use humansense::{io, Error};
use serde::Serialize;
use serde_json::json;

use super::load_run;
use crate::args::InferArgs;
use crate::manifest::{config_hash, ManifestBuilder, RunManifest};
use crate::outdir::{Mode, OutDir};
use crate::CliResult;

#[derive(Debug, Clone, Serialize)]
pub struct PoseOutput {
    pub image: String,
    pub stage: usize,
    /// Root-relative camera coordinates, millimeters.
    pub joints3d_mm: Vec<[f64; 3]>,
    /// Belief-map peaks in pixels.
    pub joints2d_px: Vec<[f64; 2]>,
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as usize) < img.width && (y as usize) < img.height {
        let i = (y as usize * img.width + x as usize) * 3;
        img.data[i..i + 3].copy_from_slice(&c);
    }
}

fn line(img: &mut RgbImage, a: [f64; 2], b: [f64; 2], c: [u8; 3]) {
    let n = ((b[0] - a[0]).abs().max((b[1] - a[1]).abs()).ceil() as usize).max(1);
    for s in 0..=n {
        let t = s as f64 / n as f64;
        let x = a[0] + t * (b[0] - a[0]);
        let y = a[1] + t * (b[1] - a[1]);
        put(img, x.round() as i64, y.round() as i64, c);
    }
}

fn rgb(c: [f64; 3]) -> [u8; 3] {
    c.map(humansense::syndata::render::quantize)
}

/// Bones in white, joints as colored crosses.
pub fn joint_overlay(image: &RgbImage, joints: &[[f64; 2]], skeleton: Option<&KinematicLayout>, style: &RenderStyle) -> RgbImage {
    let mut img = image.clone();
    if let Some(sk) = skeleton {
        for b in &sk.bones {
            line(&mut img, joints[b.parent], joints[b.child], [255, 255, 255]);
        }
    }
    for (k, p) in joints.iter().enumerate() {
        let c = rgb(style.part_color(k as u8 + 1));
        let (x, y) = (p[0].round() as i64, p[1].round() as i64);
        for d in -2..=2 {
            put(&mut img, x + d, y, c);
            put(&mut img, x, y + d, c);
        }
    }
    img
}

/// Background black, part `k` in its palette color.
pub fn colorize_labels(labels: &[u8], height: usize, width: usize, style: &RenderStyle) -> RgbImage {
    let mut data = Vec::with_capacity(labels.len() * 3);
    for &l in labels {
        let c = if l == 0 { [0, 0, 0] } else { rgb(style.part_color(l)) };
        data.extend_from_slice(&c);
    }
    RgbImage { height, width, data }
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into())
}

pub fn run(args: &InferArgs) -> CliResult<RunManifest> {
    let loaded = load_run(&args.checkpoint)?;
    let net = loaded.model.config().clone();
    let mut images = Vec::new();
    for p in &args.images {
        let img = read_rgb_png(p)?;
        if (img.height, img.width) != (net.input_height, net.input_width) {
            return Err(Error::Data(format!(
                "{}: image is {}x{}, the model takes {}x{}",
                p.display(),
                img.height,
                img.width,
                net.input_height,
                net.input_width
            ))
            .into());
        }
        images.push((p.clone(), img));
    }
    let skel = loaded.config.data.skeleton();
    let skeleton = (skel.num_joints() == net.joints).then_some(&skel);
    let style = &loaded.config.data.render;

    let out = OutDir::acquire(&args.out, Mode::from_force(args.force))?;
    let mut m = ManifestBuilder::new("infer", config_hash(&loaded.config), None);
    m.arg("--checkpoint", loaded.path.display()).arg("--out", args.out.display());
    if args.all_stages {
        m.flag("--all-stages");
    }
    m.input("checkpoint", &loaded.path);
    for (path, img) in &images {
        m.manifest.args.push(path.display().to_string());
        let outputs = loaded.model.predict(&img.to_tensor())?;
        let chosen: Vec<(usize, &StageOutputs)> = if args.all_stages {
            outputs.iter().enumerate().map(|(t, o)| (t + 1, o)).collect()
        } else {
            vec![(outputs.len(), outputs.last().expect("at least one stage"))]
        };
        let name = stem(path);
        for (t, o) in chosen {
            let prefix = if args.all_stages { format!("{name}_stage{t}") } else { name.clone() };
            let joints2d = heatmap_peaks(&o.joints, FEATURE_STRIDE)?;
            let overlay = joint_overlay(img, &joints2d, skeleton, style);
            let labels = argmax_labels(&o.parts)?;
            let label_img = colorize_labels(&labels, img.height, img.width, style);
            let pose = PoseOutput {
                image: path.display().to_string(),
                stage: t,
                joints3d_mm: o.pose.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
                joints2d_px: joints2d,
            };
            for (file, write) in [
                (format!("{prefix}_joints.png"), write_rgb_png(&out.join(format!("{prefix}_joints.png")), &overlay)),
                (format!("{prefix}_labels.png"), write_rgb_png(&out.join(format!("{prefix}_labels.png")), &label_img)),
                (format!("{prefix}_pose.json"), io::write_json_pretty(&out.join(format!("{prefix}_pose.json")), &pose)),
            ] {
                write?;
                m.output(file);
            }
        }
    }
    m.finish(
        out.path(),
        json!({ "images": images.len(), "stages": net.stages, "all_stages": args.all_stages }),
    )
}
