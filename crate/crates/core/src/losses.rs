//! Stage-wise task losses and their coverage-masked sum over stages.

use humansense_autodiff::{Tape, Tensor, TensorError, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::StageVars;

pub const DEFAULT_EPSILON: f64 = 1e-3;
pub const LOG_CLAMP: f64 = 1e-12;

/// Which ground-truth modalities a sample carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CoverageMask {
    pub joints2d: bool,
    pub part_labels: bool,
    pub pose3d: bool,
}

impl CoverageMask {
    pub const FULL: CoverageMask = CoverageMask {
        joints2d: true,
        part_labels: true,
        pose3d: true,
    };
    pub const TWO_D: CoverageMask = CoverageMask {
        joints2d: true,
        part_labels: true,
        pose3d: false,
    };
    pub const THREE_D: CoverageMask = CoverageMask {
        joints2d: false,
        part_labels: false,
        pose3d: true,
    };

    pub fn any(&self) -> bool {
        self.joints2d || self.part_labels || self.pose3d
    }

    pub fn validate(&self) -> Result<()> {
        if self.any() {
            Ok(())
        } else {
            Err(Error::Data("coverage mask has no modality set".into()))
        }
    }
}

/// Targets for one sample; each field is present iff its coverage flag is.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// `[h', w', N_J]` belief-map targets.
    pub joints: Option<Tensor>,
    /// Row-major `[H, W]` class indices, 0 is background.
    pub labels: Option<Vec<usize>>,
    /// `[N_R, 3]` millimeters, root-relative.
    pub pose: Option<Tensor>,
}

impl GroundTruth {
    pub fn check_mask(&self, mask: &CoverageMask) -> Result<()> {
        mask.validate()?;
        let agree = [
            (mask.joints2d, self.joints.is_some(), "2D joints"),
            (mask.part_labels, self.labels.is_some(), "part labels"),
            (mask.pose3d, self.pose.is_some(), "3D pose"),
        ];
        for (flag, present, what) in agree {
            if flag != present {
                return Err(Error::Data(format!(
                    "coverage flag for {what} is {flag} but the target is {}",
                    if present { "present" } else { "absent" }
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Smoothing constant of the reconstruction loss.
    pub epsilon: f64,
    pub weight_joints: f64,
    pub weight_parts: f64,
    pub weight_pose: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            weight_joints: 1.0,
            weight_parts: 1.0,
            weight_pose: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::Config("loss epsilon must be positive".into()));
        }
        for w in [self.weight_joints, self.weight_parts, self.weight_pose] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config("loss weights must be finite and nonnegative".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Term {
    J,
    B,
    R,
}

impl Term {
    pub const ALL: [Term; 3] = [Term::J, Term::B, Term::R];

    pub fn name(self) -> &'static str {
        match self {
            Term::J => "J",
            Term::B => "B",
            Term::R => "R",
        }
    }
}

/// Unweighted loss values of one stage; masked terms are `None`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageLosses {
    pub joints: Option<f64>,
    pub parts: Option<f64>,
    pub pose: Option<f64>,
}

impl StageLosses {
    pub fn get(&self, term: Term) -> Option<f64> {
        match term {
            Term::J => self.joints,
            Term::B => self.parts,
            Term::R => self.pose,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: Var,
    pub stages: Vec<StageLosses>,
    /// Target probabilities clamped in the part loss.
    pub clamped: usize,
}

fn same_shape(tape: &Tape, op: &'static str, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    if sa != sb {
        return Err(Error::Tensor(TensorError::ShapeMismatch {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        }));
    }
    Ok(())
}

/// `sum_k sum_z (J(z,k) - J*(z,k))^2`.
pub fn loss_j(tape: &mut Tape, joints: Var, target: Var) -> Result<Var> {
    same_shape(tape, "loss_J", joints, target)?;
    let d = tape.sub(joints, target)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.sum(sq)?)
}

/// Mean negative log-likelihood of the labels under the per-pixel class
/// probabilities.
pub fn loss_b(tape: &mut Tape, parts: Var, labels: &[usize]) -> Result<Var> {
    Ok(tape.nll_loss(parts, labels, LOG_CLAMP)?)
}

/// `sum_i sqrt(|pose_i - R*_i|^2 + eps^2)`.
pub fn loss_r(tape: &mut Tape, pose: Var, target: Var, epsilon: f64) -> Result<Var> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::Config("loss epsilon must be positive".into()));
    }
    same_shape(tape, "loss_R", pose, target)?;
    if tape.value(pose).rank() != 2 || tape.value(pose).shape()[1] != 3 {
        return Err(Error::Tensor(TensorError::Rank {
            expected: 2,
            shape: tape.value(pose).shape().to_vec(),
        }));
    }
    let d = tape.sub(pose, target)?;
    let sq = tape.mul(d, d)?;
    let per_joint = tape.sum_last_axis(sq)?;
    let smoothed = tape.add_scalar(per_joint, epsilon * epsilon)?;
    let norms = tape.sqrt(smoothed)?;
    Ok(tape.sum(norms)?)
}

/// Weighted sum over stages of the covered task losses. Uncovered terms are
/// never placed on the tape, so they contribute neither value nor gradient.
pub fn total_loss(
    tape: &mut Tape,
    stages: &[StageVars],
    gt: &GroundTruth,
    mask: &CoverageMask,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    gt.check_mask(mask)?;
    cfg.validate()?;
    if stages.is_empty() {
        return Err(Error::Config("no stages to score".into()));
    }
    let clamped_before = tape.clamped_log_terms();
    let j_target = gt.joints.as_ref().map(|t| tape.constant(t.clone()));
    let r_target = gt.pose.as_ref().map(|t| tape.constant(t.clone()));
    let mut terms = Vec::new();
    let mut breakdown = Vec::with_capacity(stages.len());
    for s in stages {
        let mut row = StageLosses::default();
        if let Some(target) = j_target {
            let l = loss_j(tape, s.joints, target)?;
            row.joints = Some(tape.value(l).item()?);
            terms.push((l, cfg.weight_joints));
        }
        if let Some(labels) = &gt.labels {
            let l = loss_b(tape, s.parts, labels)?;
            row.parts = Some(tape.value(l).item()?);
            terms.push((l, cfg.weight_parts));
        }
        if let Some(target) = r_target {
            let l = loss_r(tape, s.pose, target, cfg.epsilon)?;
            row.pose = Some(tape.value(l).item()?);
            terms.push((l, cfg.weight_pose));
        }
        breakdown.push(row);
    }
    let mut total: Option<Var> = None;
    for (l, w) in terms {
        let l = if w != 1.0 { tape.scale(l, w)? } else { l };
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
    }
    let total = total.ok_or_else(|| Error::Data("coverage mask selects no loss term".into()))?;
    Ok(LossBreakdown {
        total,
        stages: breakdown,
        clamped: tape.clamped_log_terms() - clamped_before,
    })
}
