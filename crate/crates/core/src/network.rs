//! The multistage multitask network.
//!
//! Every stage `t` has three branches:
//!
//! * **J**: joint belief maps. Stage 1 classifies image features `x`; later
//!   stages classify `x'` stacked with `J(t-1)`.
//! * **B**: body-part probabilities. Four convolutions over `x` (stacked with
//!   `B(t-1)` after stage 1), fused with `J(t)`, a 1x1 classifier and a 16x16
//!   stride-8 deconvolution back to the input resolution.
//! * **R**: 3D reconstruction. Fuses the selected inputs among `J(t)`,
//!   `B(t)` (at feature resolution) and `D(t)` (a learned feature map over
//!   `x`), runs conv 3x3 / conv 3x3 / conv 1x1 / pool / conv 1x1, combines
//!   with `R(t-1)` after stage 1 and decodes the pose with a fully connected
//!   layer.
//!
//! All fusions are channel concatenations. Spatial maps are `[h, w, c]`.

use std::fmt;
use std::str::FromStr;

use humansense_autodiff::{Tape, Tensor, Var};
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const CONFIG_VERSION: u32 = 1;
/// Spatial reduction of the image feature extractors (three stride-2 pools).
pub const FEATURE_STRIDE: usize = 8;
pub const DECONV_KERNEL: usize = 16;
/// Offset that centers the deconvolution output on the input pixel grid.
pub const DECONV_CROP: usize = 4;
const POOL_WINDOW: usize = 3;
const POOL_STRIDE: usize = 2;
const POOL_PADDING: usize = 1;

/// Which of `J`, `B`, `D` feed the reconstruction branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct InputSet {
    pub joints: bool,
    pub parts: bool,
    pub features: bool,
}

impl InputSet {
    pub const ALL: InputSet = InputSet {
        joints: true,
        parts: true,
        features: true,
    };

    pub fn is_empty(&self) -> bool {
        !(self.joints || self.parts || self.features)
    }

    /// Token list such as `["J", "B", "D"]`.
    pub fn tokens(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.joints {
            out.push("J");
        }
        if self.parts {
            out.push("B");
        }
        if self.features {
            out.push("D");
        }
        out
    }
}

impl fmt::Display for InputSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.tokens().join(","))
    }
}

impl FromStr for InputSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut set = InputSet {
            joints: false,
            parts: false,
            features: false,
        };
        for token in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            match token {
                "J" | "j" => set.joints = true,
                "B" | "b" => set.parts = true,
                "D" | "d" => set.features = true,
                other => return Err(Error::Config(format!("unknown reconstruction input {other:?}"))),
            }
        }
        if set.is_empty() {
            return Err(Error::Config("reconstruction input set is empty".into()));
        }
        Ok(set)
    }
}

impl Serialize for InputSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for InputSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub version: u32,
    /// Number of recurrent stages `T`.
    pub stages: usize,
    /// Joint belief-map channels `N_J`.
    pub joints: usize,
    /// Part classes including background `N_B`.
    pub parts: usize,
    /// Reconstructed 3D joints `N_R`.
    pub joints3d: usize,
    pub input_height: usize,
    pub input_width: usize,
    /// Output width of the seven-convolution extractor `x`.
    pub x_width: usize,
    /// Output width of the four-convolution extractor `x'`.
    pub xp_width: usize,
    /// Width of the large-kernel convolutions in the J, B and D branches.
    pub branch_width: usize,
    pub branch_kernel: usize,
    /// Channels of `D(t)`.
    pub d_width: usize,
    /// Widths of the 3x3 and (3x3, 1x1) convolutions of the R branch.
    pub r_widths: [usize; 2],
    /// Channels of `R(t)`.
    pub r_feature_width: usize,
    pub r_inputs: InputSet,
    /// One `x'` for all stages >= 2 instead of one per stage.
    pub share_xp: bool,
    /// Millimeters per unit of the fully connected pose output.
    pub pose_unit_mm: f64,
    /// Weight bound is `init_gain / sqrt(fan_in)`.
    pub init_gain: f64,
    /// Subtracted from every input pixel before the feature extractors.
    pub input_offset: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            stages: 6,
            joints: 15,
            parts: 25,
            joints3d: 15,
            input_height: 64,
            input_width: 64,
            x_width: 128,
            xp_width: 32,
            branch_width: 32,
            branch_kernel: 11,
            d_width: 32,
            r_widths: [128, 64],
            r_feature_width: 16,
            r_inputs: InputSet::ALL,
            share_xp: true,
            pose_unit_mm: 1.0,
            init_gain: 1.0,
            input_offset: 0.0,
        }
    }
}

impl NetworkConfig {
    /// The layer widths as written for the full-size model.
    pub fn full_width() -> Self {
        Self {
            branch_width: 128,
            ..Self::default()
        }
    }

    /// Small configuration for gradient checks: T=2, 32x32 input, N_J=4,
    /// N_B=5, N_R=4.
    pub fn tiny() -> Self {
        Self {
            stages: 2,
            joints: 4,
            parts: 5,
            joints3d: 4,
            input_height: 32,
            input_width: 32,
            x_width: 6,
            xp_width: 4,
            branch_width: 4,
            branch_kernel: 5,
            d_width: 3,
            r_widths: [6, 4],
            r_feature_width: 3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("network: {m}")));
        if self.version != CONFIG_VERSION {
            return fail(&format!("unsupported config version {}", self.version));
        }
        if self.stages < 1 {
            return fail("at least one stage is required");
        }
        if self.parts < 2 {
            return fail("at least one part class plus background is required");
        }
        if self.joints == 0 || self.joints3d == 0 {
            return fail("joint counts must be positive");
        }
        if self.input_height == 0 || self.input_width == 0 {
            return fail("input size must be positive");
        }
        let widths = [
            self.x_width,
            self.xp_width,
            self.branch_width,
            self.d_width,
            self.r_widths[0],
            self.r_widths[1],
            self.r_feature_width,
        ];
        if widths.contains(&0) {
            return fail("layer widths must be positive");
        }
        if self.branch_kernel == 0 || self.branch_kernel % 2 == 0 {
            return fail("branch kernel must be odd");
        }
        if self.r_inputs.is_empty() {
            return fail("reconstruction input set is empty");
        }
        if !(self.pose_unit_mm.is_finite() && self.pose_unit_mm > 0.0) {
            return fail("pose unit must be positive");
        }
        if !self.input_offset.is_finite() {
            return fail("input offset must be finite");
        }
        if !(self.init_gain.is_finite() && self.init_gain >= 0.0) {
            return fail("init gain must be nonnegative");
        }
        Ok(())
    }

    pub fn feature_height(&self) -> usize {
        self.input_height.div_ceil(FEATURE_STRIDE)
    }

    pub fn feature_width(&self) -> usize {
        self.input_width.div_ceil(FEATURE_STRIDE)
    }

    fn r_height(&self) -> usize {
        self.feature_height().div_ceil(POOL_STRIDE)
    }

    fn r_width(&self) -> usize {
        self.feature_width().div_ceil(POOL_STRIDE)
    }

    fn x_layers(&self) -> [usize; 7] {
        let w = self.x_width;
        let q = (w / 4).max(1);
        let h = (w / 2).max(1);
        [q, q, h, h, w, w, w]
    }

    fn xp_layers(&self) -> [usize; 4] {
        let w = self.xp_width;
        [(w / 4).max(1), (w / 2).max(1), w, w]
    }

    /// Input channels of the first R convolution.
    pub fn fusion_channels(&self) -> usize {
        let mut c = 0;
        if self.r_inputs.joints {
            c += self.joints;
        }
        if self.r_inputs.parts {
            c += self.parts;
        }
        if self.r_inputs.features {
            c += self.d_width;
        }
        c
    }

    fn xp_owner(&self, stage: usize) -> usize {
        if self.share_xp {
            2
        } else {
            stage
        }
    }

    /// Every parameter with its shape and initializer, in registration order.
    pub fn parameter_layout(&self) -> Vec<ParamSpec> {
        let mut layout = Vec::new();
        let out = &mut layout;
        let mut c_in = 3;
        for (i, w) in self.x_layers().into_iter().enumerate() {
            conv_spec(out, format!("stage1.x.conv{}", i + 1), 3, c_in, w);
            c_in = w;
        }
        let kb = self.branch_kernel;
        let bw = self.branch_width;
        for t in 1..=self.stages {
            if t >= 2 && self.xp_owner(t) == t {
                let mut c_in = 3;
                for (i, w) in self.xp_layers().into_iter().enumerate() {
                    conv_spec(out, format!("stage{t}.xp.conv{}", i + 1), 3, c_in, w);
                    c_in = w;
                }
            }
            let j_in = if t == 1 { self.x_width } else { self.xp_width + self.joints };
            conv_spec(out, format!("stage{t}.J.conv1"), kb, j_in, bw);
            conv_spec(out, format!("stage{t}.J.conv2"), kb, bw, bw);
            conv_spec(out, format!("stage{t}.J.conv3"), kb, bw, bw);
            conv_spec(out, format!("stage{t}.J.conv4"), 1, bw, bw);
            conv_spec(out, format!("stage{t}.J.conv5"), 1, bw, self.joints);

            let b_in = if t == 1 { self.x_width } else { self.x_width + self.parts };
            conv_spec(out, format!("stage{t}.B.conv1"), kb, b_in, bw);
            conv_spec(out, format!("stage{t}.B.conv2"), kb, bw, bw);
            conv_spec(out, format!("stage{t}.B.conv3"), kb, bw, bw);
            conv_spec(out, format!("stage{t}.B.conv4"), 1, bw, bw);
            conv_spec(out, format!("stage{t}.B.classifier"), 1, bw + self.joints, self.parts);
            out.push(ParamSpec {
                name: format!("stage{t}.B.deconv.weight"),
                shape: vec![DECONV_KERNEL, DECONV_KERNEL, self.parts, self.parts],
                init: Init::Bilinear,
            });

            if self.r_inputs.features {
                conv_spec(out, format!("stage{t}.D.conv1"), kb, self.x_width, bw);
                conv_spec(out, format!("stage{t}.D.conv2"), kb, bw, bw);
                conv_spec(out, format!("stage{t}.D.conv3"), kb, bw, bw);
                conv_spec(out, format!("stage{t}.D.conv4"), 1, bw, self.d_width);
            }

            let [r1, r2] = self.r_widths;
            let rf = self.r_feature_width;
            conv_spec(out, format!("stage{t}.R.conv1"), 3, self.fusion_channels(), r1);
            conv_spec(out, format!("stage{t}.R.conv2"), 3, r1, r2);
            conv_spec(out, format!("stage{t}.R.conv3"), 1, r2, r2);
            conv_spec(out, format!("stage{t}.R.conv4"), 1, r2, rf);
            if t >= 2 {
                conv_spec(out, format!("stage{t}.R.combine"), 1, 2 * rf, rf);
            }
            let flat = self.r_height() * self.r_width() * rf;
            out.push(ParamSpec {
                name: format!("stage{t}.R.fc.weight"),
                shape: vec![3 * self.joints3d, flat],
                init: Init::Uniform { fan_in: flat },
            });
            out.push(ParamSpec {
                name: format!("stage{t}.R.fc.bias"),
                shape: vec![3 * self.joints3d],
                init: Init::Zero,
            });
        }
        layout
    }
}

fn conv_spec(out: &mut Vec<ParamSpec>, name: String, k: usize, ci: usize, co: usize) {
    out.push(ParamSpec {
        name: format!("{name}.weight"),
        shape: vec![k, k, ci, co],
        init: Init::Uniform { fan_in: k * k * ci },
    });
    out.push(ParamSpec {
        name: format!("{name}.bias"),
        shape: vec![co],
        init: Init::Zero,
    });
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zero,
    /// Centered uniform with bound `gain / sqrt(fan_in)`.
    Uniform { fan_in: usize },
    /// Per-channel bilinear upsampling kernel.
    Bilinear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Which loss branch a parameter serves exclusively, if any.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    Joints,
    Parts,
    Reconstruction,
}

/// `J` owns its classifier and `x'`; `B` its classifier and deconvolution;
/// `R` its convolutions, the pose decoder and `D`. `x` is shared.
pub fn exclusive_branch(name: &str) -> Option<Branch> {
    let branch = name.split('.').nth(1)?;
    match branch {
        "J" | "xp" => Some(Branch::Joints),
        "B" => Some(Branch::Parts),
        "R" | "D" => Some(Branch::Reconstruction),
        _ => None,
    }
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a; stable across platforms and releases.
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn bilinear_kernel(size: usize, channels: usize) -> Tensor {
    let factor = size.div_ceil(2) as f64;
    let center = if size % 2 == 1 { factor - 1.0 } else { factor - 0.5 };
    let tap = |i: usize| 1.0 - (i as f64 - center).abs() / factor;
    Tensor::from_fn([size, size, channels, channels], |idx| {
        let co = idx % channels;
        let ci = (idx / channels) % channels;
        let kx = (idx / (channels * channels)) % size;
        let ky = idx / (channels * channels * size);
        if ci == co {
            tap(ky) * tap(kx)
        } else {
            0.0
        }
    })
}

/// Per-stage values of one forward pass.
#[derive(Debug, Clone)]
pub struct StageOutputs {
    /// Joint belief maps `[h', w', N_J]`.
    pub joints: Tensor,
    /// Part probabilities at input resolution `[H, W, N_B]`.
    pub parts: Tensor,
    /// Part probabilities at feature resolution `[h', w', N_B]`.
    pub parts_lowres: Tensor,
    /// Reconstruction features `R(t)`.
    pub recon: Tensor,
    /// `[N_R, 3]`, millimeters, root-relative.
    pub pose: Tensor,
}

/// Tape handles of one stage.
#[derive(Debug, Clone, Copy)]
pub struct StageVars {
    pub joints: Var,
    pub parts: Var,
    pub parts_lowres: Var,
    pub recon: Var,
    pub pose: Var,
}

/// Parameters bound onto a tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    /// Binds parameters registered by the caller, e.g. as gradient-check
    /// inputs.
    pub fn from_vars<S: Into<String>>(vars: impl IntoIterator<Item = (S, Var)>) -> Self {
        Self {
            vars: vars.into_iter().map(|(k, v)| (k.into(), v)).collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter {name} is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub bound: Bound,
    pub stages: Vec<StageVars>,
}

impl Forward {
    pub fn outputs(&self, tape: &Tape) -> Vec<StageOutputs> {
        self.stages
            .iter()
            .map(|s| StageOutputs {
                joints: tape.value(s.joints).clone(),
                parts: tape.value(s.parts).clone(),
                parts_lowres: tape.value(s.parts_lowres).clone(),
                recon: tape.value(s.recon).clone(),
                pose: tape.value(s.pose).clone(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: NetworkConfig,
    params: ParamStore,
}

impl Model {
    /// Seeded initialization. Each parameter draws from its own stream keyed
    /// by `(seed, name)`, so parameters shared between two configurations
    /// start out identical.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for spec in config.parameter_layout() {
            let value = match spec.init {
                Init::Zero => Tensor::zeros(spec.shape.clone()),
                Init::Bilinear => bilinear_kernel(spec.shape[0], spec.shape[2]),
                Init::Uniform { fan_in } => {
                    let bound = config.init_gain / (fan_in as f64).sqrt();
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(&spec.name));
                    Tensor::from_fn(spec.shape.clone(), |_| {
                        if bound > 0.0 {
                            rng.random_range(-bound..bound)
                        } else {
                            0.0
                        }
                    })
                }
            };
            params.insert(spec.name, value);
        }
        Ok(Self { config, params })
    }

    pub fn from_params(config: NetworkConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = Self::new(config.clone(), 0)?;
        expected.params.check_compatible(&params)?;
        // Re-order to the canonical layout.
        let mut ordered = ParamStore::new();
        for name in expected.params.names() {
            ordered.insert(name, params.require(name)?.clone());
        }
        Ok(Self {
            config,
            params: ordered,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Registers every parameter on `tape`; `trainable` decides whether they
    /// receive gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.to_string(), v)
            })
            .collect();
        Bound { vars }
    }

    fn conv(
        &self,
        tape: &mut Tape,
        p: &Bound,
        layer: &str,
        input: Var,
        relu: bool,
    ) -> Result<Var> {
        let w = p.var(&format!("{layer}.weight"))?;
        let b = p.var(&format!("{layer}.bias"))?;
        let k = tape.value(w).shape()[0];
        let y = tape.conv2d(input, w, b, 1, k / 2)?;
        if relu {
            Ok(tape.relu(y)?)
        } else {
            Ok(y)
        }
    }

    fn pool(tape: &mut Tape, input: Var) -> Result<Var> {
        Ok(tape.maxpool2d(input, POOL_WINDOW, POOL_STRIDE, POOL_PADDING)?)
    }

    fn check_image(&self, tape: &Tape, image: Var) -> Result<()> {
        let expected = [self.config.input_height, self.config.input_width, 3];
        if tape.value(image).shape() != expected {
            return Err(Error::Tensor(humansense_autodiff::TensorError::ShapeMismatch {
                op: "image",
                lhs: tape.value(image).shape().to_vec(),
                rhs: expected.to_vec(),
            }));
        }
        Ok(())
    }

    /// Seven convolutions and three pools: features `x` at 1/8 resolution.
    pub fn extract_features_x(&self, tape: &mut Tape, p: &Bound, image: Var) -> Result<Var> {
        self.check_image(tape, image)?;
        let mut h = image;
        for i in 1..=7 {
            h = self.conv(tape, p, &format!("stage1.x.conv{i}"), h, true)?;
            if matches!(i, 2 | 4 | 6) {
                h = Self::pool(tape, h)?;
            }
        }
        Ok(h)
    }

    /// Four convolutions and three pools: features `x'` owned by `stage`.
    pub fn extract_features_xp(&self, tape: &mut Tape, p: &Bound, image: Var, stage: usize) -> Result<Var> {
        self.check_image(tape, image)?;
        let owner = self.config.xp_owner(stage);
        let mut h = image;
        for i in 1..=4 {
            h = self.conv(tape, p, &format!("stage{owner}.xp.conv{i}"), h, true)?;
            if i <= 3 {
                h = Self::pool(tape, h)?;
            }
        }
        Ok(h)
    }

    fn aligned(tape: &Tape, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
        if sa.len() != 3 || sb.len() != 3 || sa[..2] != sb[..2] {
            return Err(Error::Tensor(humansense_autodiff::TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            }));
        }
        Ok(())
    }

    fn check_channels(tape: &Tape, op: &'static str, v: Var, channels: usize) -> Result<()> {
        let s = tape.value(v).shape();
        if s.len() != 3 || s[2] != channels {
            return Err(Error::Tensor(humansense_autodiff::TensorError::ShapeMismatch {
                op,
                lhs: s.to_vec(),
                rhs: vec![channels],
            }));
        }
        Ok(())
    }

    fn stage_of_prev(stage: usize, prev: Option<Var>, what: &str) -> Result<()> {
        match (stage, prev) {
            (0, _) => Err(Error::Config("stages are numbered from 1".into())),
            (1, Some(_)) => Err(Error::Config(format!("stage 1 takes no previous {what}"))),
            (t, None) if t >= 2 => Err(Error::Config(format!("stage {t} needs the previous {what}"))),
            _ => Ok(()),
        }
    }

    /// Joint branch of `stage`. Stage 1 reads `x`; later stages read `x'`
    /// stacked with the previous belief maps.
    pub fn stage_j(&self, tape: &mut Tape, p: &Bound, stage: usize, features: Var, prev: Option<Var>) -> Result<Var> {
        Self::stage_of_prev(stage, prev, "belief maps")?;
        let input = match prev {
            None => features,
            Some(prev) => {
                Self::check_channels(tape, "previous belief maps", prev, self.config.joints)?;
                Self::aligned(tape, "previous belief maps", features, prev)?;
                tape.concat_channels(&[features, prev])?
            }
        };
        let mut h = input;
        for i in 1..=4 {
            h = self.conv(tape, p, &format!("stage{stage}.J.conv{i}"), h, true)?;
        }
        self.conv(tape, p, &format!("stage{stage}.J.conv5"), h, false)
    }

    /// Part branch of `stage`: returns `(full resolution, feature resolution)`
    /// probability maps.
    pub fn stage_b(
        &self,
        tape: &mut Tape,
        p: &Bound,
        stage: usize,
        features: Var,
        joints: Var,
        prev: Option<Var>,
    ) -> Result<(Var, Var)> {
        Self::stage_of_prev(stage, prev, "part maps")?;
        Self::aligned(tape, "current belief maps", features, joints)?;
        let input = match prev {
            None => features,
            Some(prev) => {
                Self::check_channels(tape, "previous part maps", prev, self.config.parts)?;
                Self::aligned(tape, "previous part maps", features, prev)?;
                tape.concat_channels(&[features, prev])?
            }
        };
        let mut h = input;
        for i in 1..=4 {
            h = self.conv(tape, p, &format!("stage{stage}.B.conv{i}"), h, true)?;
        }
        let fused = tape.concat_channels(&[h, joints])?;
        let logits = self.conv(tape, p, &format!("stage{stage}.B.classifier"), fused, false)?;
        let lowres = tape.softmax(logits)?;
        let kernel = p.var(&format!("stage{stage}.B.deconv.weight"))?;
        let up = tape.transposed_conv2d(logits, kernel, FEATURE_STRIDE)?;
        let up = tape.crop(
            up,
            DECONV_CROP,
            DECONV_CROP,
            self.config.input_height,
            self.config.input_width,
        )?;
        let full = tape.softmax(up)?;
        Ok((full, lowres))
    }

    /// `D(t)`: four convolutions over `x`.
    pub fn stage_d(&self, tape: &mut Tape, p: &Bound, stage: usize, features: Var) -> Result<Var> {
        let mut h = features;
        for i in 1..=4 {
            h = self.conv(tape, p, &format!("stage{stage}.D.conv{i}"), h, true)?;
        }
        Ok(h)
    }

    /// Reconstruction branch of `stage`: returns `(R(t), pose)` with the pose
    /// shaped `[N_R, 3]` in millimeters. Inputs outside the configured set
    /// are ignored.
    #[allow(clippy::too_many_arguments)]
    pub fn stage_r(
        &self,
        tape: &mut Tape,
        p: &Bound,
        stage: usize,
        joints: Option<Var>,
        parts: Option<Var>,
        features: Option<Var>,
        prev: Option<Var>,
    ) -> Result<(Var, Var)> {
        Self::stage_of_prev(stage, prev, "reconstruction features")?;
        let set = self.config.r_inputs;
        let mut fused = Vec::new();
        for (wanted, var, what) in [
            (set.joints, joints, "J"),
            (set.parts, parts, "B"),
            (set.features, features, "D"),
        ] {
            if wanted {
                fused.push(var.ok_or_else(|| Error::Config(format!("reconstruction input {what} not provided")))?);
            }
        }
        if fused.is_empty() {
            return Err(Error::Config("reconstruction input set is empty".into()));
        }
        let x = tape.concat_channels(&fused)?;
        let h = self.conv(tape, p, &format!("stage{stage}.R.conv1"), x, true)?;
        let h = self.conv(tape, p, &format!("stage{stage}.R.conv2"), h, true)?;
        let h = self.conv(tape, p, &format!("stage{stage}.R.conv3"), h, true)?;
        let h = Self::pool(tape, h)?;
        let mut r = self.conv(tape, p, &format!("stage{stage}.R.conv4"), h, false)?;
        if let Some(prev) = prev {
            Self::aligned(tape, "previous reconstruction features", r, prev)?;
            let stacked = tape.concat_channels(&[r, prev])?;
            r = self.conv(tape, p, &format!("stage{stage}.R.combine"), stacked, false)?;
        }
        let w = p.var(&format!("stage{stage}.R.fc.weight"))?;
        let b = p.var(&format!("stage{stage}.R.fc.bias"))?;
        let flat = tape.fully_connected(r, w, b)?;
        let flat = if self.config.pose_unit_mm != 1.0 {
            tape.scale(flat, self.config.pose_unit_mm)?
        } else {
            flat
        };
        let pose = tape.reshape(flat, [self.config.joints3d, 3])?;
        Ok((r, pose))
    }

    /// Full forward pass on a bound tape. The image is a constant.
    pub fn forward_bound(&self, tape: &mut Tape, bound: Bound, image: &Tensor) -> Result<Forward> {
        let img = tape.constant(image.clone());
        self.check_image(tape, img)?;
        let img = if self.config.input_offset != 0.0 {
            tape.add_scalar(img, -self.config.input_offset)?
        } else {
            img
        };
        let x = self.extract_features_x(tape, &bound, img)?;
        let mut shared_xp = None;
        let mut stages: Vec<StageVars> = Vec::with_capacity(self.config.stages);
        for t in 1..=self.config.stages {
            let prev = stages.last().copied();
            let j = match prev {
                None => self.stage_j(tape, &bound, t, x, None)?,
                Some(prev) => {
                    let xp = match (self.config.share_xp, shared_xp) {
                        (true, Some(xp)) => xp,
                        _ => {
                            let xp = self.extract_features_xp(tape, &bound, img, t)?;
                            if self.config.share_xp {
                                shared_xp = Some(xp);
                            }
                            xp
                        }
                    };
                    self.stage_j(tape, &bound, t, xp, Some(prev.joints))?
                }
            };
            let (b_full, b_low) = self.stage_b(tape, &bound, t, x, j, prev.map(|s| s.parts_lowres))?;
            let d = if self.config.r_inputs.features {
                Some(self.stage_d(tape, &bound, t, x)?)
            } else {
                None
            };
            let (r, pose) = self.stage_r(tape, &bound, t, Some(j), Some(b_low), d, prev.map(|s| s.recon))?;
            stages.push(StageVars {
                joints: j,
                parts: b_full,
                parts_lowres: b_low,
                recon: r,
                pose,
            });
        }
        Ok(Forward { bound, stages })
    }

    pub fn forward(&self, tape: &mut Tape, image: &Tensor, trainable: bool) -> Result<Forward> {
        let bound = self.bind(tape, trainable);
        self.forward_bound(tape, bound, image)
    }

    /// Inference without gradient bookkeeping.
    pub fn predict(&self, image: &Tensor) -> Result<Vec<StageOutputs>> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, image, false)?;
        Ok(fwd.outputs(&tape))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn input_set_parses_and_prints() {
        let s: InputSet = "J,B,D".parse().unwrap();
        assert_eq!(s, InputSet::ALL);
        assert_eq!("D".parse::<InputSet>().unwrap().to_string(), "D");
        assert!("".parse::<InputSet>().is_err());
        assert!("J,X".parse::<InputSet>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(NetworkConfig::default().validate().is_ok());
        let bad = NetworkConfig {
            stages: 0,
            ..NetworkConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = NetworkConfig {
            parts: 1,
            ..NetworkConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn bilinear_kernel_matches_upsampling_taps() {
        let k = bilinear_kernel(16, 1);
        // Taps are 1 - |i - 7.5| / 8.
        assert!((k.data()[7 * 16 + 7] - 0.9375 * 0.9375).abs() < 1e-15);
        assert!((k.data()[0] - 0.0625 * 0.0625).abs() < 1e-15);
        let two = bilinear_kernel(16, 2);
        // Off-diagonal channel pairs are zero.
        assert_eq!(two.data()[1], 0.0);
        assert_eq!(two.data()[0], k.data()[0]);
    }

    #[test]
    fn exclusive_branches() {
        assert_eq!(exclusive_branch("stage3.R.fc.weight"), Some(Branch::Reconstruction));
        assert_eq!(exclusive_branch("stage2.D.conv1.bias"), Some(Branch::Reconstruction));
        assert_eq!(exclusive_branch("stage2.xp.conv1.bias"), Some(Branch::Joints));
        assert_eq!(exclusive_branch("stage1.B.deconv.weight"), Some(Branch::Parts));
        assert_eq!(exclusive_branch("stage1.x.conv1.weight"), None);
    }

    #[test]
    fn parameter_names_are_unique() {
        let layout = NetworkConfig::default().parameter_layout();
        let mut names: Vec<_> = layout.iter().map(|p| p.name.clone()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), layout.len());
    }
}
