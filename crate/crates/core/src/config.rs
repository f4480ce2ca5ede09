//! Run configuration: every knob of world, decoder, losses and training.
//!
//! A [`RunConfig`] round-trips through TOML; unknown keys are rejected so a
//! typo never silently falls back to a default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ssm::TransformKind;
use crate::simworld::NUM_CLASSES;

/// Which tensor feeds adaptive mixing and cross-attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixSource {
    /// Final hidden state of each block, projected to the query width.
    State,
    /// Enhanced features of the last step, projected to the query width.
    Enhanced,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryInitConfig {
    pub xy_std: f64,
    pub size_mean: [f64; 2],
    pub size_std: f64,
    pub theta_std: f64,
    pub height: f64,
    pub feature_std: f64,
}

impl Default for QueryInitConfig {
    fn default() -> Self {
        Self {
            xy_std: 15.0,
            size_mean: [2.0, 4.0],
            size_std: 0.5,
            theta_std: 1.0,
            height: 4.0,
            feature_std: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub layers: usize,
    /// Query feature width D.
    pub dim: usize,
    /// Sampling points per query P.
    pub points: usize,
    pub queries: usize,
    pub floor: usize,
    /// SSM state expansion N.
    pub state_dim: usize,
    pub heads: usize,
    pub classes: usize,
    pub transforms: Vec<TransformKind>,
    /// Merge/remove/split between layers; cross-attention only when off.
    pub dynamic: bool,
    pub mask_ratio: f64,
    /// Mask at every layer (true) or only the first.
    pub mask_every_layer: bool,
    pub mix_source: MixSource,
    pub seed: u64,
    pub init: QueryInitConfig,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            dim: 32,
            points: 4,
            queries: 900,
            floor: 269,
            state_dim: 128,
            heads: 4,
            classes: 4,
            transforms: vec![TransformKind::Identity, TransformKind::Fft],
            dynamic: true,
            mask_ratio: 0.5,
            mask_every_layer: true,
            mix_source: MixSource::State,
            seed: 0,
            init: QueryInitConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub frames: usize,
    pub frame_dt: f64,
    pub cameras: usize,
    pub hfov_deg: f64,
    pub image_width: usize,
    pub image_height: usize,
    pub stride: usize,
    pub channels: usize,
    pub camera_height: f64,
    pub objects_min: usize,
    pub objects_max: usize,
    /// Objects are placed at final-frame BEV ranges in `[range_min, range_max]`.
    pub range_min: f64,
    pub range_max: f64,
    pub max_speed: f64,
    pub blob_sigma: f64,
    pub noise_std: f64,
    pub moving_ego: bool,
    pub ego_speed: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            frame_dt: 0.5,
            cameras: 6,
            hfov_deg: 70.0,
            image_width: 128,
            image_height: 72,
            stride: 8,
            channels: 32,
            camera_height: 1.5,
            objects_min: 4,
            objects_max: 10,
            range_min: 5.0,
            range_max: 25.0,
            max_speed: 5.0,
            blob_sigma: 1.0,
            noise_std: 0.05,
            moving_ego: false,
            ego_speed: 4.0,
        }
    }
}

impl WorldConfig {
    pub fn map_width(&self) -> usize {
        self.image_width.div_ceil(self.stride)
    }

    pub fn map_height(&self) -> usize {
        self.image_height.div_ceil(self.stride)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub cls_weight: f64,
    pub box_weight: f64,
    pub recon_weight: f64,
    pub future_weight: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub match_cls: f64,
    pub match_box: f64,
    /// Auxiliary reconstruction and prediction losses.
    pub aux: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            cls_weight: 1.0,
            box_weight: 0.25,
            recon_weight: 0.5,
            future_weight: 0.5,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            match_cls: 2.0,
            match_box: 1.0,
            aux: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Final learning rate as a fraction of `lr` at the end of the cosine.
    pub lr_min_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub checkpoint_every: usize,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            lr_min_ratio: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 10.0,
            steps: 1000,
            batch_size: 4,
            checkpoint_every: 250,
            log_every: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub scenes: usize,
    pub world: WorldConfig,
    pub decoder: DecoderConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let d = self;
        let bad = |m: String| Err(Error::Config(m));
        if d.layers == 0 || d.queries == 0 || d.points == 0 || d.dim < 2 || d.state_dim == 0 {
            return bad("layers, queries, points, state_dim must be positive and dim ≥ 2".into());
        }
        if d.transforms.is_empty() {
            return bad("decoder.transforms must not be empty".into());
        }
        let mut t = d.transforms.clone();
        t.sort();
        t.dedup();
        if t.len() != d.transforms.len() {
            return bad("decoder.transforms lists a transform twice".into());
        }
        if d.floor == 0 || d.floor > d.queries {
            return bad(format!("floor {} must be in 1..={}", d.floor, d.queries));
        }
        if d.heads == 0 || d.dim % d.heads != 0 {
            return bad(format!("dim {} not divisible by heads {}", d.dim, d.heads));
        }
        if d.classes == 0 {
            return bad("classes must be positive".into());
        }
        if !(0.0..1.0).contains(&d.mask_ratio) {
            return bad(format!("mask_ratio {} outside [0, 1)", d.mask_ratio));
        }
        Ok(())
    }
}

impl RunConfig {
    /// Small preset that trains in minutes on one core.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.scenes = 8;
        c.world.channels = 16;
        c.world.objects_min = 2;
        c.world.objects_max = 5;
        c.world.range_max = 18.0;
        c.world.blob_sigma = 2.0;
        c.decoder.dim = 32;
        c.decoder.queries = 64;
        c.decoder.floor = 24;
        c.decoder.state_dim = 32;
        c.decoder.layers = 3;
        c.decoder.init.xy_std = 9.0;
        c.decoder.mask_every_layer = false;
        c.train.lr = 2e-3;
        c.train.lr_min_ratio = 0.05;
        c
    }

    /// Points the dataset, weight-init and batch-order seeds at `seed`.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.decoder.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.decoder.validate()?;
        let d = &self.decoder;
        let w = &self.world;
        let bad = |m: String| Err(Error::Config(m));
        if d.classes != NUM_CLASSES {
            return bad(format!("decoder.classes {} but the world has {NUM_CLASSES} classes", d.classes));
        }
        if w.frames == 0 || w.cameras == 0 || w.stride == 0 || w.frame_dt <= 0.0 {
            return bad("frames, cameras, stride, frame_dt must be positive".into());
        }
        if w.channels < 8 {
            return bad(format!("world.channels {} below the 8 needed for codes and class", w.channels));
        }
        if !(0.0 < w.hfov_deg && w.hfov_deg < 180.0) {
            return bad(format!("hfov_deg {} outside (0, 180)", w.hfov_deg));
        }
        if w.objects_min > w.objects_max || w.range_min > w.range_max {
            return bad("object count or range bounds inverted".into());
        }
        if self.train.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }
}
