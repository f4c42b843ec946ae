use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::HarnessError;
use crate::evalmetrics::RoiBox;
use crate::synthworld::SceneConfig;
use crate::tokenizer::{TokenizerConfig, TokenizerTrainConfig};
use crate::worldmodel::{WmTrainConfig, WorldModelConfig};

pub const SPEC_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub sequences: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Horizons (in model frames) reported; the rollout length is the largest.
    pub horizons: Vec<usize>,
    /// Rollout windows per sequence, spread evenly over its length.
    pub rollouts_per_sequence: usize,
    /// Defaults to the tokenizer's voxel volume when absent.
    pub roi: Option<RoiBox>,
    /// Rollouts written out as PPM/PLY next to the metrics.
    pub export_rollouts: usize,
}

/// Fully resolved configuration of one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub spec_version: u32,
    pub preset: String,
    pub seed: u64,
    pub scene: SceneConfig,
    pub dataset: DatasetConfig,
    pub tokenizer: TokenizerConfig,
    pub tokenizer_train: TokenizerTrainConfig,
    pub worldmodel: WorldModelConfig,
    pub worldmodel_train: WmTrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Minutes on one core: small rig, small models.
    pub fn ci() -> Self {
        let mut wm = WorldModelConfig::ci();
        wm.max_frames = 6;
        RunConfig {
            spec_version: SPEC_VERSION,
            preset: "ci".into(),
            seed: 0,
            scene: SceneConfig::ci(0),
            dataset: DatasetConfig { sequences: 8 },
            tokenizer: TokenizerConfig::ci(),
            tokenizer_train: TokenizerTrainConfig {
                iterations: 3000,
                log_every: 100,
                ..TokenizerTrainConfig::default()
            },
            worldmodel: wm,
            worldmodel_train: WmTrainConfig::ci(),
            eval: EvalConfig {
                horizons: vec![1, 3],
                rollouts_per_sequence: 3,
                roi: None,
                export_rollouts: 2,
            },
        }
        .with_seed(0)
    }

    /// Hours on a workstation: the defaults named throughout the design.
    pub fn desk() -> Self {
        RunConfig {
            spec_version: SPEC_VERSION,
            preset: "desk".into(),
            seed: 0,
            scene: SceneConfig::desk(0),
            dataset: DatasetConfig { sequences: 32 },
            tokenizer: TokenizerConfig::desk(),
            tokenizer_train: TokenizerTrainConfig {
                iterations: 20_000,
                log_every: 100,
                checkpoint_every: 1000,
                ..TokenizerTrainConfig::default()
            },
            worldmodel: WorldModelConfig::desk(),
            worldmodel_train: WmTrainConfig::desk(),
            eval: EvalConfig {
                horizons: vec![1, 3],
                rollouts_per_sequence: 2,
                roi: None,
                export_rollouts: 4,
            },
        }
        .with_seed(0)
    }

    pub fn preset(name: &str) -> Result<Self, HarnessError> {
        match name {
            "ci" => Ok(Self::ci()),
            "desk" => Ok(Self::desk()),
            other => Err(HarnessError::Config(format!(
                "unknown preset `{other}` (expected ci or desk)"
            ))),
        }
    }

    /// Set the run seed and every seed derived from it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.scene.seed = seed;
        self.tokenizer.seed = seed;
        self.tokenizer_train.seed = seed;
        self.worldmodel.seed = seed.wrapping_add(1);
        self.worldmodel_train.seed = seed.wrapping_add(2);
        self
    }

    /// Scene seed of dataset sequence `i`.
    pub fn sequence_seed(&self, i: usize) -> u64 {
        self.scene.seed.wrapping_mul(1000).wrapping_add(i as u64)
    }

    /// Parse JSON text: an optional `"preset"` (default `ci`) supplies every
    /// key the text leaves out; nested objects merge key by key.
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let user: Value =
            serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        let Value::Object(map) = &user else {
            return Err(HarnessError::Config(
                "configuration must be a JSON object".into(),
            ));
        };
        if let Some(v) = map.get("spec_version") {
            if v.as_u64() != Some(SPEC_VERSION as u64) {
                return Err(HarnessError::Config(format!(
                    "spec_version {v} unsupported (expected {SPEC_VERSION})"
                )));
            }
        }
        let preset = match map.get("preset") {
            None => "ci",
            Some(Value::String(s)) => s.as_str(),
            Some(v) => {
                return Err(HarnessError::Config(format!(
                    "preset must be a string, got {v}"
                )))
            }
        };
        let mut base = serde_json::to_value(Self::preset(preset)?).expect("config serializes");
        // a changed seed re-derives the dependent seeds before explicit overrides apply
        if let Some(seed) = map.get("seed") {
            let s = seed.as_u64().ok_or_else(|| {
                HarnessError::Config(format!("seed must be an unsigned integer, got {seed}"))
            })?;
            base = serde_json::to_value(Self::preset(preset)?.with_seed(s))
                .expect("config serializes");
        }
        merge(&mut base, &user);
        let cfg: RunConfig =
            serde_json::from_value(base).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.spec_version != SPEC_VERSION {
            return bad(format!("spec_version {} unsupported", self.spec_version));
        }
        self.scene
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.tokenizer.validate().map_err(HarnessError::Config)?;
        self.worldmodel.validate().map_err(HarnessError::Config)?;
        for s in &self.worldmodel_train.stages {
            s.validate()?;
            if s.frames() > self.worldmodel.max_frames {
                return bad(format!(
                    "stage {} uses {} frames > world model max {}",
                    s.stage,
                    s.frames(),
                    self.worldmodel.max_frames
                ));
            }
            if s.span() > self.scene.frames {
                return bad(format!(
                    "stage {} spans {} frames but sequences have {}",
                    s.stage,
                    s.span(),
                    self.scene.frames
                ));
            }
        }
        let last = self.eval_stage()?;
        let h = self.rollout_future();
        if h == 0 || self.eval.horizons.contains(&0) {
            return bad("eval horizons must be positive".into());
        }
        if last.cond_frames + h > self.worldmodel.max_frames {
            return bad(format!(
                "eval needs {} frames > world model max {}",
                last.cond_frames + h,
                self.worldmodel.max_frames
            ));
        }
        if (last.cond_frames + h - 1) * last.stride + 1 > self.scene.frames {
            return bad("eval window longer than the sequences".into());
        }
        Ok(())
    }

    /// The final curriculum stage, whose frame layout evaluation reuses.
    pub fn eval_stage(&self) -> Result<&crate::worldmodel::StageConfig, HarnessError> {
        self.worldmodel_train
            .stages
            .iter()
            .max_by_key(|s| s.stage)
            .ok_or_else(|| HarnessError::Config("no world model stages configured".into()))
    }

    pub fn rollout_future(&self) -> usize {
        self.eval.horizons.iter().copied().max().unwrap_or(0)
    }
}

fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}
