//! SynthCount, the desk-scale benchmark: 20 training scenes of 256x256 with
//! about 20 near-identical objects each, 10 background images and 25 test
//! scenes, all drawn from one seed.

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::dataset::{generate_background_pool, generate_images, ImageRecord, Limit, SceneSpec, SubsampleSpec};
use crate::error::Result;
use crate::propagation::StageSchedule;
use crate::training::{LrSchedule, ModelConfig, TrainConfig};

pub const SEED: u64 = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthCount {
    pub scene: SceneSpec,
    pub train_images: usize,
    pub background_images: usize,
    pub test_images: usize,
    pub seeds_per_image: usize,
    /// Used for OD runs and for the final PFOD training.
    pub training: TrainConfig,
    pub schedule: StageSchedule,
    pub augment: AugmentConfig,
}

pub struct SynthData {
    pub train: Vec<ImageRecord>,
    pub background: Vec<ImageRecord>,
    pub test: Vec<ImageRecord>,
}

fn scaled(factor: f64) -> LrSchedule {
    let mut s = LrSchedule::reference();
    s.0.iter_mut().for_each(|p| p.1 *= factor);
    s
}

impl SynthCount {
    pub fn new(seed: u64) -> Self {
        let scene = SceneSpec {
            rng_seed: seed,
            ..SceneSpec::default()
        };
        let training = TrainConfig {
            batch_size: 16,
            background_slots: 4,
            lr_schedule: scaled(3.0),
            coord_weight: 1.0,
            iterations: 1000,
            rng_seed: seed,
            model: ModelConfig {
                hidden: 64,
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        };
        let stage_training = TrainConfig {
            lr_schedule: scaled(30.0),
            ..training.clone()
        };
        Self {
            augment: AugmentConfig::scaled_for(scene.image_size),
            scene,
            train_images: 20,
            background_images: 10,
            test_images: 25,
            seeds_per_image: 5,
            schedule: StageSchedule {
                num_stages: 3,
                stage_training,
                final_training: training.clone(),
                ..StageSchedule::default()
            },
            training,
        }
    }

    pub fn generate(&self) -> Result<SynthData> {
        Ok(SynthData {
            train: generate_images(&self.scene, self.train_images, "scene", true)?,
            background: generate_background_pool(&self.scene, self.background_images)?,
            test: generate_images(&self.scene, self.test_images, "test", true)?,
        })
    }

    pub fn seed_subsample(&self) -> SubsampleSpec {
        SubsampleSpec {
            num_images: Limit::All,
            boxes_per_image: Limit::AtMost(self.seeds_per_image),
            rng_seed: self.scene.rng_seed,
        }
    }
}

impl Default for SynthCount {
    fn default() -> Self {
        Self::new(SEED)
    }
}
