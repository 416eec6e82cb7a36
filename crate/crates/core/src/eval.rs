//! Pose errors, rigid alignment and segmentation accuracies.

use std::fmt::Write as _;

use humansense_autodiff::{Tape, Tensor};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{total_loss, LossConfig, Term};
use crate::network::Model;
use crate::skeleton::BACKGROUND;
use crate::syndata::{FigureInstance, Vec3};
use crate::trainer::prepare_example;

fn check_pair(pred: &[Vec3], gt: &[Vec3]) -> Result<()> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Data(format!(
            "pose shapes differ: {} vs {} joints",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

/// Mean Euclidean distance between corresponding joints.
pub fn mpjpe(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    check_pair(pred, gt)?;
    Ok(per_joint_errors(pred, gt).iter().sum::<f64>() / pred.len() as f64)
}

pub fn per_joint_errors(pred: &[Vec3], gt: &[Vec3]) -> Vec<f64> {
    pred.iter()
        .zip(gt)
        .map(|(p, g)| ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2) + (p[2] - g[2]).powi(2)).sqrt())
        .collect()
}

/// `sum_i |p_i - g_i|^2`.
pub fn sum_squared_error(pred: &[Vec3], gt: &[Vec3]) -> f64 {
    per_joint_errors(pred, gt).iter().map(|e| e * e).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlignKind {
    /// Rotation and translation.
    #[default]
    Rigid,
    /// Rotation, translation and uniform scale.
    Similarity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub scale: f64,
    pub aligned: Vec<Vec3>,
}

impl Alignment {
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        let r = &self.rotation;
        [0, 1, 2].map(|i| self.scale * (r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2]) + self.translation[i])
    }
}

fn centroid(points: &[Vec3]) -> Vector3<f64> {
    let mut c = Vector3::zeros();
    for p in points {
        c += Vector3::from(*p);
    }
    c / points.len() as f64
}

fn rank(points: &[Vec3], c: &Vector3<f64>) -> usize {
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = Vector3::from(*p) - c;
        cov += d * d.transpose();
    }
    let sv = cov.singular_values();
    let top = sv.max();
    if top <= 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > top * 1e-12).count()
}

/// Least-squares `R`, `t` (and `s` for [`AlignKind::Similarity`])
/// minimizing `sum_i |s R p_i + t - g_i|^2`, with `det R = +1`.
pub fn rigid_align(pred: &[Vec3], gt: &[Vec3], kind: AlignKind) -> Result<Alignment> {
    check_pair(pred, gt)?;
    if pred.len() < 3 {
        return Err(Error::Degenerate(format!("{} points; alignment needs at least 3", pred.len())));
    }
    let (cp, cg) = (centroid(pred), centroid(gt));
    for (name, pts, c) in [("ground truth", gt, &cg), ("prediction", pred, &cp)] {
        let r = rank(pts, c);
        if r < 2 {
            return Err(Error::Degenerate(format!(
                "{name} points span rank {r} (collinear or coincident); alignment needs rank 2"
            )));
        }
    }
    // Cross-covariance H = sum (p - cp)(g - cg)^T; R = V diag(1, 1, d) U^T.
    let mut h = Matrix3::zeros();
    let mut spread = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        let dp = Vector3::from(*p) - cp;
        let dg = Vector3::from(*g) - cg;
        h += dp * dg.transpose();
        spread += dp.norm_squared();
    }
    let svd = h.svd(true, true);
    let u = svd.u.ok_or_else(|| Error::Degenerate("SVD did not converge".into()))?;
    let v_t = svd.v_t.ok_or_else(|| Error::Degenerate("SVD did not converge".into()))?;
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let r = v * fix * u.transpose();
    let scale = match kind {
        AlignKind::Rigid => 1.0,
        AlignKind::Similarity => {
            let s = svd.singular_values;
            (s[0] + s[1] + d * s[2]) / spread
        }
    };
    let t = cg - scale * r * cp;
    let rotation = [0, 1, 2].map(|i| [0, 1, 2].map(|j| r[(i, j)]));
    let mut out = Alignment {
        rotation,
        translation: [t[0], t[1], t[2]],
        scale,
        aligned: Vec::new(),
    };
    out.aligned = pred.iter().map(|p| out.apply(p)).collect();
    Ok(out)
}

pub fn aligned_mpjpe(pred: &[Vec3], gt: &[Vec3], kind: AlignKind) -> Result<f64> {
    let a = rigid_align(pred, gt, kind)?;
    mpjpe(&a.aligned, gt)
}

/// Row-major `[gt][pred]` pixel counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn add(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Data(format!(
                "label images differ in size: {} vs {} pixels",
                pred.len(),
                gt.len()
            )));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            let (p, g) = (p as usize, g as usize);
            if p >= self.classes || g >= self.classes {
                return Err(Error::Data(format!("label {} out of range for {} classes", p.max(g), self.classes)));
            }
            self.counts[g * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    fn row_total(&self, g: usize) -> u64 {
        self.counts[g * self.classes..(g + 1) * self.classes].iter().sum()
    }

    /// Recall of class `g`, `None` when `g` is absent from the ground truth.
    pub fn recall(&self, g: usize) -> Option<f64> {
        let n = self.row_total(g);
        (n > 0).then(|| self.counts[g * self.classes + g] as f64 / n as f64)
    }

    /// Fails when the ground truth has no foreground pixel.
    pub fn metrics(&self) -> Result<SegMetrics> {
        let bg = BACKGROUND as usize;
        let diag = |g: usize| self.counts[g * self.classes + g];
        let (mut fg_total, mut fg_correct, mut total, mut correct) = (0u64, 0u64, 0u64, 0u64);
        for g in 0..self.classes {
            let n = self.row_total(g);
            total += n;
            correct += diag(g);
            if g != bg {
                fg_total += n;
                fg_correct += diag(g);
            }
        }
        if fg_total == 0 {
            return Err(Error::Data("ground truth has no foreground pixel".into()));
        }
        let mean = |it: Vec<f64>| it.iter().sum::<f64>() / it.len() as f64;
        let fg_recalls: Vec<f64> = (0..self.classes).filter(|&g| g != bg).filter_map(|g| self.recall(g)).collect();
        let all_recalls: Vec<f64> = (0..self.classes).filter_map(|g| self.recall(g)).collect();
        Ok(SegMetrics {
            pixel_fg: fg_correct as f64 / fg_total as f64,
            pixel_all: correct as f64 / total as f64,
            class_fg: mean(fg_recalls),
            class_all: mean(all_recalls),
        })
    }
}

/// Accuracies in `[0, 1]`. Class averages run over the classes present in
/// the ground truth; the `fg` variants leave out the background pixels and
/// class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub pixel_fg: f64,
    pub pixel_all: f64,
    pub class_fg: f64,
    pub class_all: f64,
}

pub fn segmentation_metrics(pred: &[u8], gt: &[u8], classes: usize) -> Result<SegMetrics> {
    let mut c = Confusion::new(classes);
    c.add(pred, gt)?;
    c.metrics()
}

/// Per-pixel argmax over the class axis of a `[H, W, N_B]` map; the first
/// maximum wins.
pub fn argmax_labels(probs: &Tensor) -> Result<Vec<u8>> {
    let (_, _, c) = probs.hwc()?;
    Ok(probs
        .data()
        .chunks(c)
        .map(|px| {
            let mut best = 0;
            for (k, &v) in px.iter().enumerate() {
                if v > px[best] {
                    best = k;
                }
            }
            best as u8
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlignScope {
    /// One transform per sample.
    #[default]
    PerFrame,
    /// One transform for all samples jointly.
    Pooled,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub align: AlignKind,
    pub scope: AlignScope,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub index: usize,
    pub mpjpe_mm: Option<f64>,
    pub aligned_mpjpe_mm: Option<f64>,
    pub seg: Option<SegMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseMetrics {
    pub mpjpe_mm: f64,
    pub aligned_mpjpe_mm: f64,
    /// Mean error of each joint over samples, raw.
    pub per_joint_mm: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub options: EvalOptions,
    pub pose: Option<PoseMetrics>,
    pub segmentation: Option<SegMetrics>,
    /// Mean unweighted loss per stage, `[J, B, R]`, over covering samples.
    pub stage_losses: Vec<[Option<f64>; 3]>,
    pub per_sample: Vec<SampleMetrics>,
}

/// Scores the final stage of `model` on `samples`.
pub fn evaluate(model: &Model, samples: &[FigureInstance], opts: &EvalOptions, loss: &LossConfig, sigma: f64) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let net = model.config();
    let stages = net.stages;
    let mut loss_sum = vec![[0.0; 3]; stages];
    let mut loss_n = vec![[0usize; 3]; stages];
    let mut confusion = Confusion::new(net.parts);
    let mut any_labels = false;
    let mut poses: Vec<(usize, Vec<Vec3>, Vec<Vec3>)> = Vec::new();
    let mut rows = Vec::with_capacity(samples.len());

    for inst in samples {
        let ex = prepare_example(inst, net, sigma)?;
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &ex.image, false)?;
        let breakdown = total_loss(&mut tape, &fwd.stages, &ex.gt, &ex.mask, loss)?;
        for (t, row) in breakdown.stages.iter().enumerate() {
            for (k, term) in Term::ALL.iter().enumerate() {
                if let Some(v) = row.get(*term) {
                    loss_sum[t][k] += v;
                    loss_n[t][k] += 1;
                }
            }
        }
        let last = fwd.stages.last().expect("at least one stage");
        let mut row = SampleMetrics {
            index: inst.index,
            mpjpe_mm: None,
            aligned_mpjpe_mm: None,
            seg: None,
        };
        if let Some(gt_labels) = &inst.labels {
            let pred = argmax_labels(tape.value(last.parts))?;
            let mut c = Confusion::new(net.parts);
            c.add(&pred, &gt_labels.data)?;
            row.seg = c.metrics().ok();
            confusion.merge(&c);
            any_labels = true;
        }
        if let Some(gt) = inst.root_relative_pose() {
            let pred: Vec<Vec3> = tape.value(last.pose).data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
            row.mpjpe_mm = Some(mpjpe(&pred, &gt)?);
            if opts.scope == AlignScope::PerFrame {
                row.aligned_mpjpe_mm = Some(aligned_mpjpe(&pred, &gt, opts.align)?);
            }
            poses.push((rows.len(), pred, gt));
        }
        rows.push(row);
    }

    let pose = if poses.is_empty() {
        None
    } else {
        let n = poses.len() as f64;
        let joints = poses[0].1.len();
        let mut per_joint = vec![0.0; joints];
        for (_, p, g) in &poses {
            for (acc, e) in per_joint.iter_mut().zip(per_joint_errors(p, g)) {
                *acc += e / n;
            }
        }
        let mpjpe_mm = poses.iter().map(|(r, ..)| rows[*r].mpjpe_mm.unwrap_or(0.0)).sum::<f64>() / n;
        let aligned_mpjpe_mm = match opts.scope {
            AlignScope::PerFrame => poses.iter().map(|(r, ..)| rows[*r].aligned_mpjpe_mm.unwrap_or(0.0)).sum::<f64>() / n,
            AlignScope::Pooled => {
                let all_p: Vec<Vec3> = poses.iter().flat_map(|(_, p, _)| p.clone()).collect();
                let all_g: Vec<Vec3> = poses.iter().flat_map(|(_, _, g)| g.clone()).collect();
                let a = rigid_align(&all_p, &all_g, opts.align)?;
                for (k, (r, _, g)) in poses.iter().enumerate() {
                    let aligned = &a.aligned[k * joints..(k + 1) * joints];
                    rows[*r].aligned_mpjpe_mm = Some(mpjpe(aligned, g)?);
                }
                mpjpe(&a.aligned, &all_g)?
            }
        };
        Some(PoseMetrics {
            mpjpe_mm,
            aligned_mpjpe_mm,
            per_joint_mm: per_joint,
        })
    };
    let segmentation = if any_labels { confusion.metrics().ok() } else { None };
    let stage_losses = loss_sum
        .iter()
        .zip(&loss_n)
        .map(|(s, c)| [0, 1, 2].map(|k| (c[k] > 0).then(|| s[k] / c[k] as f64)))
        .collect();
    Ok(MetricsReport {
        samples: samples.len(),
        options: *opts,
        pose,
        segmentation,
        stage_losses,
        per_sample: rows,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|v| format!("{v}")).unwrap_or_default()
}

impl MetricsReport {
    /// One row per sample; empty cells where a metric does not apply.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,mpjpe_mm,aligned_mpjpe_mm,pixel_fg,pixel_all,class_fg,class_all\n");
        for r in &self.per_sample {
            let seg = |f: fn(&SegMetrics) -> f64| cell(r.seg.as_ref().map(f));
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.index,
                cell(r.mpjpe_mm),
                cell(r.aligned_mpjpe_mm),
                seg(|s| s.pixel_fg),
                seg(|s| s.pixel_all),
                seg(|s| s.class_fg),
                seg(|s| s.class_all)
            );
        }
        out
    }

    /// Aggregate table: accuracies in percent, errors in millimeters.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        if let Some(s) = &self.segmentation {
            let _ = writeln!(out, "{:<32} {:>8}", "Segmentation", "%");
            for (name, v) in [
                ("Avg. accuracy per pixel (fg)", s.pixel_fg),
                ("Avg. accuracy per pixel (fg+bg)", s.pixel_all),
                ("Avg. accuracy per class (fg)", s.class_fg),
                ("Avg. accuracy per class (fg+bg)", s.class_all),
            ] {
                let _ = writeln!(out, "{name:<32} {:>8.2}", 100.0 * v);
            }
        }
        if let Some(p) = &self.pose {
            let label = match self.options.align {
                AlignKind::Rigid => "MPJPE after rigid alignment",
                AlignKind::Similarity => "MPJPE after similarity alignment",
            };
            let _ = writeln!(out, "{:<32} {:>8}", "3D pose", "mm");
            let _ = writeln!(out, "{:<32} {:>8.2}", "MPJPE", p.mpjpe_mm);
            let _ = writeln!(out, "{label:<32} {:>8.2}", p.aligned_mpjpe_mm);
        }
        out
    }
}
