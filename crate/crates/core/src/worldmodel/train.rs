use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::model::{diffusion_loss, forward, Conditioning};
use super::{WorldModel, WorldModelError};
use crate::numerics::{AdamW, AdamWConfig, Graph, Tensor};
use crate::synthworld::action_pose;

/// One curriculum stage: `cond_frames` clean frames followed by
/// `future_frames` noisy ones, sampled every `stride` recorded frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: u8,
    pub cond_frames: usize,
    pub future_frames: usize,
    pub stride: usize,
    pub iterations: usize,
    pub batch: usize,
}

impl StageConfig {
    pub fn frames(&self) -> usize {
        self.cond_frames + self.future_frames
    }

    /// Recorded frames spanned by one window.
    pub fn span(&self) -> usize {
        (self.frames() - 1) * self.stride + 1
    }

    pub fn validate(&self) -> Result<(), WorldModelError> {
        if !(1..=3).contains(&self.stage) {
            return Err(WorldModelError::Config(format!(
                "stage {} not in 1..=3",
                self.stage
            )));
        }
        if self.cond_frames < 1 || self.future_frames < 1 || self.stride < 1 || self.batch < 1 {
            return Err(WorldModelError::Config(
                "stage needs ≥1 condition frame, future frame, stride and batch".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WmTrainConfig {
    pub stages: Vec<StageConfig>,
    /// `total_iters` is overridden per stage.
    pub optimizer: AdamWConfig,
    pub seed: u64,
    pub log_every: usize,
}

impl WmTrainConfig {
    pub fn desk() -> Self {
        WmTrainConfig {
            stages: vec![
                StageConfig {
                    stage: 1,
                    cond_frames: 2,
                    future_frames: 1,
                    stride: 1,
                    iterations: 2000,
                    batch: 8,
                },
                StageConfig {
                    stage: 2,
                    cond_frames: 2,
                    future_frames: 3,
                    stride: 1,
                    iterations: 2000,
                    batch: 8,
                },
                StageConfig {
                    stage: 3,
                    cond_frames: 3,
                    future_frames: 3,
                    stride: 2,
                    iterations: 3000,
                    batch: 8,
                },
            ],
            optimizer: AdamWConfig {
                lr: 5e-4,
                weight_decay: 0.01,
                ..AdamWConfig::default()
            },
            seed: 0,
            log_every: 100,
        }
    }

    pub fn ci() -> Self {
        WmTrainConfig {
            stages: vec![
                StageConfig {
                    stage: 1,
                    cond_frames: 2,
                    future_frames: 1,
                    stride: 1,
                    iterations: 300,
                    batch: 8,
                },
                StageConfig {
                    stage: 2,
                    cond_frames: 2,
                    future_frames: 3,
                    stride: 1,
                    iterations: 300,
                    batch: 8,
                },
                StageConfig {
                    stage: 3,
                    cond_frames: 3,
                    future_frames: 3,
                    stride: 1,
                    iterations: 600,
                    batch: 8,
                },
            ],
            optimizer: AdamWConfig {
                lr: 5e-4,
                weight_decay: 0.01,
                ..AdamWConfig::default()
            },
            seed: 0,
            log_every: 50,
        }
    }

    pub fn stage(&self, stage: u8) -> Result<&StageConfig, WorldModelError> {
        self.stages
            .iter()
            .find(|s| s.stage == stage)
            .ok_or_else(|| WorldModelError::Config(format!("no configuration for stage {stage}")))
    }
}

/// A recorded sequence in normalized token space.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    /// Per frame, channel-last `[cells · C′]` normalized token values.
    pub tokens: Vec<Vec<f32>>,
    /// Per frame, the ego motion to the next frame.
    pub actions: Vec<[f64; 3]>,
}

/// Single action equivalent to applying `actions` in order.
pub fn compose_actions(actions: &[[f64; 3]]) -> [f64; 3] {
    let mut p = crate::geometry::Pose::identity();
    for a in actions {
        p = p.compose(&action_pose(*a));
    }
    [p.translation[0], p.translation[1], p.yaw()]
}

/// Actions leading into each of `frames` frames starting at `start`, spaced
/// by `stride`; the first frame has no incoming action and gets zeros.
pub fn incoming_actions(
    actions: &[[f64; 3]],
    start: usize,
    frames: usize,
    stride: usize,
) -> Vec<[f64; 3]> {
    (0..frames)
        .map(|i| {
            if i == 0 {
                [0.0; 3]
            } else {
                compose_actions(&actions[start + (i - 1) * stride..start + i * stride])
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub stage: u8,
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: u8,
    pub out_of_order: bool,
    pub log: Vec<StageLog>,
    pub seconds: f64,
}

/// Train one curriculum stage on windows drawn uniformly from `sequences`.
pub fn train_stage(
    model: &mut WorldModel,
    sequences: &[TokenSequence],
    stage: &StageConfig,
    cfg: &WmTrainConfig,
    mut on_log: impl FnMut(&StageLog),
) -> Result<StageSummary, WorldModelError> {
    stage.validate()?;
    let frames = stage.frames();
    if frames > model.config.max_frames {
        return Err(WorldModelError::Config(format!(
            "stage {} needs {frames} frames > max {}",
            stage.stage, model.config.max_frames
        )));
    }
    let dim = model.cells() * model.token_channels;
    let mut windows = Vec::new();
    for (si, s) in sequences.iter().enumerate() {
        if s.tokens.len() != s.actions.len() || s.tokens.iter().any(|t| t.len() != dim) {
            return Err(WorldModelError::Sequence(format!(
                "sequence {si} has inconsistent frames"
            )));
        }
        for start in 0..(s.tokens.len() + 1).saturating_sub(stage.span()) {
            windows.push((si, start));
        }
    }
    if windows.is_empty() {
        return Err(WorldModelError::EmptyDataset(format!(
            "stage {} needs sequences of ≥ {} frames",
            stage.stage,
            stage.span()
        )));
    }
    let expected = model.stages.last().map(|&s| s + 1).unwrap_or(1);
    let out_of_order = stage.stage != expected;
    if out_of_order {
        log::warn!(
            "world model stage {} runs after stages {:?}",
            stage.stage,
            model.stages
        );
    }

    let start_time = std::time::Instant::now();
    let mut opt = AdamW::new(AdamWConfig {
        total_iters: stage.iterations,
        ..cfg.optimizer.clone()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ((stage.stage as u64) << 32));
    let (b, p, n, ct) = (
        stage.batch,
        stage.cond_frames,
        stage.future_frames,
        model.token_channels,
    );
    let cells = model.cells();
    let steps = model.schedule.train_steps();
    let mut summary = StageSummary {
        stage: stage.stage,
        out_of_order,
        ..Default::default()
    };
    for it in 0..stage.iterations {
        let mut x = Vec::with_capacity(b * frames * dim);
        let mut eps = Vec::with_capacity(b * n * dim);
        let mut cond = Conditioning {
            actions: Vec::new(),
            timesteps: Vec::new(),
        };
        for _ in 0..b {
            let (si, start) = windows[rng.gen_range(0..windows.len())];
            let seq = &sequences[si];
            let t = rng.gen_range(0..steps);
            let ab = model.schedule.alpha_bar[t];
            let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
            for i in 0..frames {
                let tok = &seq.tokens[start + i * stage.stride];
                if i < p {
                    x.extend_from_slice(tok);
                } else {
                    for &v in tok {
                        let e: f64 = rng.sample(StandardNormal);
                        eps.push(e as f32);
                        x.push((sa * v as f64 + sb * e) as f32);
                    }
                }
            }
            cond.actions
                .push(incoming_actions(&seq.actions, start, frames, stage.stride));
            cond.timesteps.push(
                (0..frames)
                    .map(|i| if i < p { 0.0 } else { t as f64 })
                    .collect(),
            );
        }
        let mut g = Graph::new();
        let xv = g.constant(Tensor::from_vec(&[b, frames, cells, ct], x))?;
        let ev = g.constant(Tensor::from_vec(&[b, n, cells, ct], eps))?;
        let out = forward(
            &mut g,
            &model.store,
            &model.config,
            model.grid_hw,
            xv,
            &cond,
        )?;
        let loss = diffusion_loss(&mut g, out, ev, p)?;
        let lv = g.value(loss).item() as f64;
        if !lv.is_finite() {
            return Err(WorldModelError::Divergence {
                stage: stage.stage,
                iteration: it,
                loss: lv,
            });
        }
        let grads = g.backward(loss)?;
        model.store.zero_grad();
        model.store.accumulate(&grads);
        let lr = opt.config.lr_at(opt.steps_taken());
        let grad_norm = opt.step(&mut model.store);
        let entry = StageLog {
            stage: stage.stage,
            iteration: it,
            lr,
            loss: lv,
            grad_norm,
        };
        if cfg.log_every > 0 && (it % cfg.log_every == 0 || it + 1 == stage.iterations) {
            on_log(&entry);
        }
        summary.log.push(entry);
    }
    model.stages.push(stage.stage);
    summary.seconds = start_time.elapsed().as_secs_f64();
    Ok(summary)
}
