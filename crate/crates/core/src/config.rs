//! One configuration covering data generation, the network and training,
//! plus the desk-scale presets used by the end-to-end checks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::network::{InputSet, NetworkConfig};
use crate::skeleton::Taxonomy;
use crate::syndata::{Background, SynConfig};
use crate::trainer::{AugmentConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub data: SynConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.data.validate()?;
        self.train.validate()?;
        self.check_data(&self.data)
    }

    /// Checks that images drawn from `data` fit the network.
    pub fn check_data(&self, data: &SynConfig) -> Result<()> {
        let net = &self.network;
        let skel = data.skeleton();
        let mut problems = Vec::new();
        if (data.height, data.width) != (net.input_height, net.input_width) {
            problems.push(format!(
                "images are {}x{} but the network takes {}x{}",
                data.height, data.width, net.input_height, net.input_width
            ));
        }
        if skel.num_parts() != net.parts {
            problems.push(format!("{} part classes but the network has {}", skel.num_parts(), net.parts));
        }
        if skel.num_joints() != net.joints || skel.num_joints() != net.joints3d {
            problems.push(format!(
                "{} joints but the network has {} belief maps and {} 3D joints",
                skel.num_joints(),
                net.joints,
                net.joints3d
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Small model and thick, plainly rendered figures: eight samples are
    /// memorised within 500 full-batch steps.
    pub fn overfit() -> Self {
        let mut data = SynConfig {
            taxonomy: Taxonomy::Coarse,
            ..SynConfig::default()
        };
        data.geometry.torso *= 3.0;
        data.geometry.upper_limb *= 3.0;
        data.geometry.lower_limb *= 3.0;
        data.render.background = Background::Flat { level: 0.5 };
        data.render.distractors = 0;
        let network = NetworkConfig {
            stages: 2,
            parts: data.skeleton().num_parts(),
            x_width: 32,
            xp_width: 16,
            branch_width: 16,
            branch_kernel: 7,
            d_width: 16,
            r_widths: [32, 16],
            pose_unit_mm: 1000.0,
            init_gain: 6f64.sqrt(),
            input_offset: 0.5,
            ..NetworkConfig::default()
        };
        let train = TrainConfig {
            initial_lr: 1e-3,
            gamma: 0.5,
            decay_period_epochs: 200,
            epochs: 500,
            batch_size: 8,
            augmentation: AugmentConfig::disabled(),
            seed: 5,
            loss: LossConfig {
                weight_joints: 0.03,
                weight_parts: 30.0,
                weight_pose: 1e-3,
                ..LossConfig::default()
            },
            ..TrainConfig::default()
        };
        Self { network, data, train }
    }

    /// Configuration for comparing reconstruction inputs on a few hundred
    /// samples.
    pub fn ablation() -> Self {
        let base = Self::overfit();
        let network = NetworkConfig {
            r_inputs: InputSet::ALL,
            ..base.network
        };
        let train = TrainConfig {
            epochs: 15,
            batch_size: 4,
            decay_period_epochs: 6,
            augmentation: AugmentConfig {
                rotation_deg: [-20.0, 20.0],
                scale: [0.8, 1.2],
                ..AugmentConfig::default()
            },
            ..base.train
        };
        Self {
            network,
            data: base.data,
            train,
        }
    }
}
