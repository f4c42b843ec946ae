//! Latent BEV sequence diffusion: standardized tokens, a causal
//! spatial-temporal noise predictor conditioned on ego actions, staged
//! training and DDIM rollout of all future frames at once.

pub mod model;
pub mod sample;
pub mod schedule;
pub mod train;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use model::{adaln, diffusion_loss, forward, Conditioning, WorldModelConfig};
pub use sample::{controllability, ddim_sample, ddim_sample_latents, rollout, RolloutOutput};
pub use schedule::{ddim_step, DiffusionSchedule, ScheduleConfig};
pub use train::{
    compose_actions, incoming_actions, train_stage, StageConfig, StageLog, StageSummary,
    TokenSequence, WmTrainConfig,
};

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::numerics::{NumericsError, ParamStore, Tensor};
use crate::tokenizer::{BevToken, TokenizerError};

#[derive(Debug, Error)]
pub enum WorldModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("invalid world model config: {0}")]
    Config(String),
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("timestep {t} outside [0, {steps})")]
    Timestep { t: usize, steps: usize },
    #[error("channel {0} has zero standard deviation")]
    ZeroStd(usize),
    #[error("normalization statistics missing from tokenizer checkpoint")]
    MissingStats,
    #[error("statistics cover {stats} channels, token has {token}")]
    ChannelMismatch { stats: usize, token: usize },
    #[error("sequence mismatch: {0}")]
    Sequence(String),
    #[error("no training windows: {0}")]
    EmptyDataset(String),
    #[error("training diverged in stage {stage} at iteration {iteration}: loss {loss}")]
    Divergence {
        stage: u8,
        iteration: usize,
        loss: f64,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad metadata {path}: {detail}")]
    Metadata { path: String, detail: String },
}

pub const STATS_MEAN: &str = "norm.mean";
pub const STATS_STD: &str = "norm.std";

/// Per-channel token mean and standard deviation, computed once over the
/// tokenizer's training tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizationStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl NormalizationStats {
    pub fn compute(tokens: &[BevToken]) -> Result<Self, WorldModelError> {
        let c = tokens
            .first()
            .ok_or_else(|| WorldModelError::EmptyDataset("no tokens for statistics".into()))?
            .channels;
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        let mut n = 0usize;
        for t in tokens {
            if t.channels != c {
                return Err(WorldModelError::ChannelMismatch {
                    stats: c,
                    token: t.channels,
                });
            }
            for row in t.data.chunks(c) {
                for k in 0..c {
                    sum[k] += row[k] as f64;
                }
            }
            n += t.h * t.w;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        for t in tokens {
            for row in t.data.chunks(c) {
                for k in 0..c {
                    let d = row[k] as f64 - mean[k];
                    sq[k] += d * d;
                }
            }
        }
        let std: Vec<f64> = sq.iter().map(|s| (s / n as f64).sqrt()).collect();
        if let Some(k) = std.iter().position(|&s| !(s > 0.0)) {
            return Err(WorldModelError::ZeroStd(k));
        }
        Ok(NormalizationStats {
            mean: mean.iter().map(|&v| v as f32).collect(),
            std: std.iter().map(|&v| v as f32).collect(),
        })
    }

    pub fn identity(channels: usize) -> Self {
        NormalizationStats {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    fn check(&self, token: &BevToken) -> Result<(), WorldModelError> {
        if token.channels != self.mean.len() {
            return Err(WorldModelError::ChannelMismatch {
                stats: self.mean.len(),
                token: token.channels,
            });
        }
        if let Some(k) = self.std.iter().position(|&s| !(s > 0.0)) {
            return Err(WorldModelError::ZeroStd(k));
        }
        Ok(())
    }

    /// Channel-last values `(x − mean) / std`.
    pub fn normalize(&self, token: &BevToken) -> Result<Vec<f32>, WorldModelError> {
        self.check(token)?;
        let c = token.channels;
        Ok(token
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| ((v as f64 - self.mean[i % c] as f64) / self.std[i % c] as f64) as f32)
            .collect())
    }

    pub fn denormalize(
        &self,
        values: &[f64],
        h: usize,
        w: usize,
    ) -> Result<BevToken, WorldModelError> {
        let c = self.mean.len();
        if values.len() != c * h * w {
            return Err(WorldModelError::Sequence(format!(
                "{} values for a {c}x{h}x{w} token",
                values.len()
            )));
        }
        let data = values
            .iter()
            .enumerate()
            .map(|(i, &v)| (v * self.std[i % c] as f64 + self.mean[i % c] as f64) as f32)
            .collect();
        Ok(BevToken {
            channels: c,
            h,
            w,
            data,
        })
    }

    pub fn write_to(&self, ckpt: &mut Checkpoint) {
        ckpt.insert(
            STATS_MEAN,
            Tensor::from_vec(&[self.mean.len()], self.mean.clone()),
        );
        ckpt.insert(
            STATS_STD,
            Tensor::from_vec(&[self.std.len()], self.std.clone()),
        );
    }

    pub fn read_from(ckpt: &Checkpoint) -> Result<Self, WorldModelError> {
        let (m, s) = match (ckpt.tensors.get(STATS_MEAN), ckpt.tensors.get(STATS_STD)) {
            (Some(m), Some(s)) => (m, s),
            _ => return Err(WorldModelError::MissingStats),
        };
        if m.numel() != s.numel() {
            return Err(WorldModelError::ChannelMismatch {
                stats: m.numel(),
                token: s.numel(),
            });
        }
        Ok(NormalizationStats {
            mean: m.data().to_vec(),
            std: s.data().to_vec(),
        })
    }
}

/// Sidecar JSON written next to every world-model checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldModelMeta {
    pub config: WorldModelConfig,
    pub token_channels: usize,
    pub grid_hw: (usize, usize),
    /// Training stages completed, in order.
    pub stages: Vec<u8>,
}

pub const PARAM_PREFIX: &str = "wm.";

#[derive(Clone, Debug)]
pub struct WorldModel {
    pub config: WorldModelConfig,
    pub token_channels: usize,
    pub grid_hw: (usize, usize),
    pub store: ParamStore<f32>,
    pub schedule: DiffusionSchedule,
    pub stages: Vec<u8>,
}

impl WorldModel {
    /// Freshly initialized model for tokens of shape `(C′, H_b, W_b)`.
    pub fn new(
        config: WorldModelConfig,
        token_shape: (usize, usize, usize),
    ) -> Result<Self, WorldModelError> {
        config.validate().map_err(WorldModelError::Config)?;
        let schedule = DiffusionSchedule::new(&config.schedule)?;
        let (c, h, w) = token_shape;
        let mut store = ParamStore::new();
        model::init_model(&mut store, &config, c, h * w);
        Ok(WorldModel {
            config,
            token_channels: c,
            grid_hw: (h, w),
            store,
            schedule,
            stages: Vec::new(),
        })
    }

    pub fn cells(&self) -> usize {
        self.grid_hw.0 * self.grid_hw.1
    }

    pub fn meta(&self) -> WorldModelMeta {
        WorldModelMeta {
            config: self.config.clone(),
            token_channels: self.token_channels,
            grid_hw: self.grid_hw,
            stages: self.stages.clone(),
        }
    }

    /// Parameters are stored without their leading `wm.` under that prefix,
    /// i.e. names round-trip unchanged.
    pub fn save(&self, path: &Path) -> Result<(), WorldModelError> {
        let mut c = Checkpoint::new();
        c.add_store("", &self.store);
        c.write(path)?;
        let mp = crate::tokenizer::meta_path(path);
        let meta = serde_json::to_string_pretty(&self.meta()).expect("metadata serializes");
        crate::checkpoint::write_atomic(&mp, meta.as_bytes()).map_err(|source| {
            WorldModelError::Io {
                path: mp.display().to_string(),
                source,
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self, WorldModelError> {
        let mp = crate::tokenizer::meta_path(path);
        let text = std::fs::read_to_string(&mp).map_err(|source| WorldModelError::Io {
            path: mp.display().to_string(),
            source,
        })?;
        let meta: WorldModelMeta =
            serde_json::from_str(&text).map_err(|e| WorldModelError::Metadata {
                path: mp.display().to_string(),
                detail: e.to_string(),
            })?;
        let mut m = WorldModel::new(
            meta.config,
            (meta.token_channels, meta.grid_hw.0, meta.grid_hw.1),
        )?;
        Checkpoint::read(path)?.load_into("", &mut m.store)?;
        m.stages = meta.stages;
        Ok(m)
    }
}
