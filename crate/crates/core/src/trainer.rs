//! SGD-with-momentum training on the coverage-masked multistage loss.

use std::fmt;
use std::str::FromStr;

use humansense_autodiff::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{total_loss, CoverageMask, GroundTruth, LossConfig, Term};
use crate::network::{exclusive_branch, Branch, Model, NetworkConfig, FEATURE_STRIDE};
use crate::params::{OptimizerState, ParamStore};
use crate::skeleton::KinematicLayout;
use crate::syndata::heatmap::{heatmaps_for_image, DEFAULT_SIGMA};
use crate::syndata::{transform_instance, FigureInstance, Similarity};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CoverageStrategy {
    /// Every parameter is updated; uncovered terms simply contribute no
    /// gradient.
    #[default]
    MaskGradients,
    /// Parameters exclusive to a branch that no sample of the batch covers
    /// are left untouched, momentum included.
    FreezeUncovered,
}

impl fmt::Display for CoverageStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CoverageStrategy::MaskGradients => "mask-gradients",
            CoverageStrategy::FreezeUncovered => "freeze-uncovered",
        })
    }
}

impl FromStr for CoverageStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mask-gradients" | "mask" => Ok(CoverageStrategy::MaskGradients),
            "freeze-uncovered" | "freeze" => Ok(CoverageStrategy::FreezeUncovered),
            other => Err(Error::Config(format!(
                "unknown coverage strategy {other:?} (expected mask-gradients or freeze-uncovered)"
            ))),
        }
    }
}

impl Serialize for CoverageStrategy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for CoverageStrategy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Rotation range in degrees; must be symmetric about 0.
    pub rotation_deg: [f64; 2],
    pub scale: [f64; 2],
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            rotation_deg: [-40.0, 40.0],
            scale: [0.5, 1.2],
            flip_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub gamma: f64,
    pub decay_period_epochs: usize,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub augmentation: AugmentConfig,
    pub coverage_strategy: CoverageStrategy,
    pub seed: u64,
    /// Belief-map target width at feature resolution.
    pub heatmap_sigma: f64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 1e-4,
            gamma: 0.33,
            decay_period_epochs: 5,
            momentum: 0.9,
            epochs: 10,
            batch_size: 4,
            augmentation: AugmentConfig::default(),
            coverage_strategy: CoverageStrategy::MaskGradients,
            seed: 0,
            heatmap_sigma: DEFAULT_SIGMA,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("train: {m}")));
        if !(self.initial_lr.is_finite() && self.initial_lr >= 0.0) {
            return fail("initial_lr must be finite and nonnegative");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return fail("gamma must lie in (0, 1]");
        }
        if self.decay_period_epochs < 1 {
            return fail("decay_period_epochs must be at least 1");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum must lie in [0, 1)");
        }
        if self.batch_size < 1 {
            return fail("batch_size must be at least 1");
        }
        let a = &self.augmentation;
        if !(a.rotation_deg[0] == -a.rotation_deg[1] && a.rotation_deg[1] >= 0.0) {
            return fail("rotation range must be symmetric about zero");
        }
        if !(a.scale[0] > 0.0 && a.scale[0] <= a.scale[1] && a.scale[1].is_finite()) {
            return fail("scale range must be positive and ordered");
        }
        if !(0.0..=1.0).contains(&a.flip_prob) {
            return fail("flip_prob must lie in [0, 1]");
        }
        if !(self.heatmap_sigma.is_finite() && self.heatmap_sigma > 0.0) {
            return fail("heatmap_sigma must be positive");
        }
        self.loss.validate()
    }
}

/// Step decay: `lr0 * gamma^floor(epoch / period)`.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    let k = (epoch / cfg.decay_period_epochs) as i32;
    if k == 0 {
        cfg.initial_lr
    } else {
        cfg.initial_lr * cfg.gamma.powi(k)
    }
}

fn mix(mut z: u64) -> u64 {
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Random stream for `(seed, purpose, epoch, index)`; training state never
/// needs to store generator positions.
pub fn derived_rng(seed: u64, purpose: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let key = mix(mix(mix(seed ^ 0x6a09_e667_f3bc_c909) ^ purpose) ^ epoch as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(index as u64);
    rng
}

const SHUFFLE: u64 = 1;
const AUGMENT: u64 = 2;

/// Draws rotation, scale and flip and applies them to the whole sample.
pub fn augment_sample<R: Rng + ?Sized>(
    sample: &FigureInstance,
    skeleton: &KinematicLayout,
    rng: &mut R,
    cfg: &AugmentConfig,
) -> Result<FigureInstance> {
    if !cfg.enabled {
        return Ok(sample.clone());
    }
    let r = cfg.rotation_deg[1];
    let angle_deg = if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
    let [lo, hi] = cfg.scale;
    let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let flip = rng.random_bool(cfg.flip_prob);
    transform_instance(sample, skeleton, &Similarity { angle_deg, scale, flip })
}

/// Network input and targets of one sample.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub image: Tensor,
    pub gt: GroundTruth,
    pub mask: CoverageMask,
}

/// Builds the image tensor and loss targets, checking every dimension
/// against the network configuration.
pub fn prepare_example(inst: &FigureInstance, net: &NetworkConfig, sigma: f64) -> Result<TrainingExample> {
    let mismatch = |what: String| Err(Error::Config(format!("sample {}: {what}", inst.index)));
    if inst.image.height != net.input_height || inst.image.width != net.input_width {
        return mismatch(format!(
            "image is {}x{}, network expects {}x{}",
            inst.image.height, inst.image.width, net.input_height, net.input_width
        ));
    }
    inst.coverage.validate()?;
    let joints = match &inst.joints2d {
        Some(j) if inst.coverage.joints2d => {
            if j.len() != net.joints {
                return mismatch(format!("{} 2D joints, network has {} belief maps", j.len(), net.joints));
            }
            let h = heatmaps_for_image(j, FEATURE_STRIDE, sigma, net.feature_height(), net.feature_width())?;
            Some(h.maps)
        }
        _ => None,
    };
    let labels = match &inst.labels {
        Some(l) if inst.coverage.part_labels => {
            if let Some(&bad) = l.data.iter().find(|&&v| v as usize >= net.parts) {
                return mismatch(format!("label {bad} but the network has {} classes", net.parts));
            }
            Some(l.as_indices())
        }
        _ => None,
    };
    let pose = match (inst.coverage.pose3d, inst.root_relative_pose()) {
        (true, Some(p)) => {
            if p.len() != net.joints3d {
                return mismatch(format!("{} 3D joints, network has {}", p.len(), net.joints3d));
            }
            Some(Tensor::new([p.len(), 3], p.concat())?)
        }
        _ => None,
    };
    let gt = GroundTruth { joints, labels, pose };
    gt.check_mask(&inst.coverage)?;
    Ok(TrainingExample {
        image: inst.image.to_tensor(),
        gt,
        mask: inst.coverage,
    })
}

/// One structured loss record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub step: u64,
    pub stage: usize,
    pub term: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    /// Mean over the batch of the weighted total loss.
    pub total: f64,
    /// `[stage][term]` batch means over the samples covering the term; 0
    /// where none does.
    pub terms: Vec<[f64; 3]>,
    pub frozen: Vec<Branch>,
    pub clamped: usize,
}

impl StepReport {
    pub fn records(&self, epoch: usize) -> Vec<LogRecord> {
        let mut out = Vec::with_capacity(self.terms.len() * 3 + 1);
        for (t, row) in self.terms.iter().enumerate() {
            for (k, term) in Term::ALL.iter().enumerate() {
                out.push(LogRecord {
                    epoch,
                    step: self.step,
                    stage: t + 1,
                    term: term.name().to_string(),
                    value: row[k],
                });
            }
        }
        out.push(LogRecord {
            epoch,
            step: self.step,
            stage: 0,
            term: "total".to_string(),
            value: self.total,
        });
        out
    }
}

fn covers(mask: &CoverageMask, branch: Branch) -> bool {
    match branch {
        Branch::Joints => mask.joints2d,
        Branch::Parts => mask.part_labels,
        Branch::Reconstruction => mask.pose3d,
    }
}

/// Optimizer state bound to a model.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    skeleton: Option<KinematicLayout>,
    velocity: ParamStore,
    pub epochs_completed: usize,
    pub global_step: u64,
}

impl Trainer {
    /// `skeleton` is needed only for augmentation.
    pub fn new(model: Model, cfg: TrainConfig, skeleton: Option<KinematicLayout>) -> Result<Self> {
        cfg.validate()?;
        let mut velocity = ParamStore::new();
        for (name, t) in model.params().iter() {
            velocity.insert(name, Tensor::zeros(t.shape().to_vec()));
        }
        Ok(Self {
            model,
            cfg,
            skeleton,
            velocity,
            epochs_completed: 0,
            global_step: 0,
        })
    }

    pub fn resume(
        model: Model,
        cfg: TrainConfig,
        skeleton: Option<KinematicLayout>,
        state: OptimizerState,
    ) -> Result<Self> {
        let mut t = Self::new(model, cfg, skeleton)?;
        let velocity = ParamStore::from_entries(state.velocity)?;
        t.velocity.check_compatible(&velocity)?;
        for (name, v) in velocity.iter() {
            t.velocity.set(name, v.clone())?;
        }
        t.epochs_completed = state.epochs_completed;
        t.global_step = state.global_step;
        Ok(t)
    }

    pub fn optimizer_state(&self) -> OptimizerState {
        OptimizerState {
            epochs_completed: self.epochs_completed,
            global_step: self.global_step,
            velocity: self.velocity.to_entries(),
        }
    }

    pub fn velocity(&self) -> &ParamStore {
        &self.velocity
    }

    /// One update on the mean loss over `batch`.
    pub fn train_step(&mut self, batch: &[TrainingExample], epoch: usize) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let step = self.global_step;
        let stages = self.model.config().stages;
        let names: Vec<String> = self.model.params().names().map(str::to_string).collect();
        let mut grad_sum: Vec<Vec<f64>> = self.model.params().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        let mut term_sum = vec![[0.0; 3]; stages];
        let mut term_count = vec![[0usize; 3]; stages];
        let mut total = 0.0;
        let mut clamped = 0;

        for ex in batch {
            let mut tape = Tape::new();
            let fwd = self.model.forward(&mut tape, &ex.image, true)?;
            let loss = total_loss(&mut tape, &fwd.stages, &ex.gt, &ex.mask, &self.cfg.loss)?;
            for (t, row) in loss.stages.iter().enumerate() {
                for (k, term) in Term::ALL.iter().enumerate() {
                    if let Some(v) = row.get(*term) {
                        if !v.is_finite() {
                            return Err(Error::NonFinite {
                                term: term.name(),
                                stage: t + 1,
                                step,
                            });
                        }
                        term_sum[t][k] += v;
                        term_count[t][k] += 1;
                    }
                }
            }
            let value = tape.value(loss.total).item()?;
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    term: "total",
                    stage: 0,
                    step,
                });
            }
            total += value;
            clamped += loss.clamped;
            let grads = tape.backward(loss.total)?;
            for (slot, (_, var)) in grad_sum.iter_mut().zip(fwd.bound.iter()) {
                if let Some(g) = grads.get(var) {
                    for (s, v) in slot.iter_mut().zip(g.data()) {
                        *s += v;
                    }
                }
            }
        }

        let frozen: Vec<Branch> = match self.cfg.coverage_strategy {
            CoverageStrategy::MaskGradients => Vec::new(),
            CoverageStrategy::FreezeUncovered => [Branch::Joints, Branch::Parts, Branch::Reconstruction]
                .into_iter()
                .filter(|&b| !batch.iter().any(|ex| covers(&ex.mask, b)))
                .collect(),
        };

        let lr = lr_at_epoch(&self.cfg, epoch);
        let mu = self.cfg.momentum;
        let scale = 1.0 / batch.len() as f64;
        for (name, g) in names.iter().zip(&grad_sum) {
            if exclusive_branch(name).is_some_and(|b| frozen.contains(&b)) {
                continue;
            }
            let v_old = self.velocity.require(name)?;
            let v_new: Vec<f64> = v_old.data().iter().zip(g).map(|(v, g)| mu * v + g * scale).collect();
            if v_new.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    term: "gradient",
                    stage: 0,
                    step,
                });
            }
            let p_old = self.model.params().require(name)?;
            let p_new: Vec<f64> = p_old.data().iter().zip(&v_new).map(|(p, v)| p - lr * v).collect();
            let shape = p_old.shape().to_vec();
            self.model.params_mut().set(name, Tensor::new(shape.clone(), p_new)?)?;
            self.velocity.set(name, Tensor::new(shape, v_new)?)?;
        }
        self.global_step += 1;

        let terms = term_sum
            .iter()
            .zip(&term_count)
            .map(|(s, c)| [0, 1, 2].map(|k| if c[k] > 0 { s[k] / c[k] as f64 } else { 0.0 }))
            .collect();
        Ok(StepReport {
            step,
            lr,
            total: total * scale,
            terms,
            frozen,
            clamped,
        })
    }

    /// Batch order of `epoch`.
    pub fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut derived_rng(self.cfg.seed, SHUFFLE, epoch, 0));
        order
    }

    /// Runs the next epoch over `data`, calling `on_step` after every update.
    pub fn run_epoch(
        &mut self,
        data: &[FigureInstance],
        on_step: &mut dyn FnMut(&StepReport, usize) -> Result<()>,
    ) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let epoch = self.epochs_completed;
        let order = self.epoch_order(data.len(), epoch);
        let net = self.model.config().clone();
        for chunk in order.chunks(self.cfg.batch_size) {
            let mut batch = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let inst = if self.cfg.augmentation.enabled {
                    let skeleton = self
                        .skeleton
                        .as_ref()
                        .ok_or_else(|| Error::Config("augmentation needs a skeleton".into()))?;
                    let mut rng = derived_rng(self.cfg.seed, AUGMENT, epoch, i);
                    augment_sample(&data[i], skeleton, &mut rng, &self.cfg.augmentation)?
                } else {
                    data[i].clone()
                };
                batch.push(prepare_example(&inst, &net, self.cfg.heatmap_sigma)?);
            }
            let report = self.train_step(&batch, epoch)?;
            on_step(&report, epoch)?;
        }
        self.epochs_completed += 1;
        Ok(())
    }
}

/// Checks dimensions of every sample before any update happens.
pub fn preflight(data: &[FigureInstance], net: &NetworkConfig, cfg: &TrainConfig) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    for inst in data {
        prepare_example(inst, net, cfg.heatmap_sigma)?;
    }
    Ok(())
}
