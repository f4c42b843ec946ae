use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::model::{forward, Conditioning};
use super::schedule::ddim_step;
use super::{NormalizationStats, WorldModel, WorldModelError};
use crate::numerics::{Graph, Tensor};
use crate::synthworld::FrameObservation;
use crate::tokenizer::{BevToken, ReconstructionOutput, Tokenizer};

fn check_lengths(
    model: &WorldModel,
    past: &[Vec<f32>],
    actions: &[[f64; 3]],
    future: usize,
) -> Result<(), WorldModelError> {
    let dim = model.cells() * model.token_channels;
    if past.is_empty() || future == 0 {
        return Err(WorldModelError::Sequence(
            "need at least one past and one future frame".into(),
        ));
    }
    if actions.len() != past.len() - 1 + future {
        return Err(WorldModelError::Sequence(format!(
            "{} actions for {} past and {future} future frames (need {})",
            actions.len(),
            past.len(),
            past.len() - 1 + future
        )));
    }
    if let Some(t) = past.iter().find(|t| t.len() != dim) {
        return Err(WorldModelError::Sequence(format!(
            "past token has {} values, expected {dim}",
            t.len()
        )));
    }
    if past.len() + future > model.config.max_frames {
        return Err(WorldModelError::Sequence(format!(
            "{} frames exceed the model's {}",
            past.len() + future,
            model.config.max_frames
        )));
    }
    Ok(())
}

/// Deterministic DDIM over all `future` frames jointly, in normalized token
/// space. `past` holds normalized tokens; `actions[i]` is the motion from
/// frame `i` to frame `i + 1` of the whole past+future window.
pub fn ddim_sample_latents(
    model: &WorldModel,
    past: &[Vec<f32>],
    actions: &[[f64; 3]],
    future: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>, WorldModelError> {
    check_lengths(model, past, actions, future)?;
    let (cells, ct) = (model.cells(), model.token_channels);
    let dim = cells * ct;
    let frames = past.len() + future;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<f64> = (0..future * dim)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    let mut incoming = vec![[0.0; 3]];
    incoming.extend_from_slice(actions);
    let cond_x: Vec<f32> = past.iter().flatten().copied().collect();
    let ts = model.schedule.ddim_timesteps();
    for (k, &t) in ts.iter().enumerate() {
        let ab = model.schedule.alpha_bar[t];
        let ab_prev = ts
            .get(k + 1)
            .map(|&tp| model.schedule.alpha_bar[tp])
            .unwrap_or(1.0);
        let mut input = cond_x.clone();
        input.extend(x.iter().map(|&v| v as f32));
        let cond = Conditioning {
            actions: vec![incoming.clone()],
            timesteps: vec![(0..frames)
                .map(|i| if i < past.len() { 0.0 } else { t as f64 })
                .collect()],
        };
        let mut g = Graph::new();
        let xv = g.constant(Tensor::from_vec(&[1, frames, cells, ct], input))?;
        let out = forward(
            &mut g,
            &model.store,
            &model.config,
            model.grid_hw,
            xv,
            &cond,
        )?;
        let eps: Vec<f64> = g.value(out).data()[past.len() * dim..]
            .iter()
            .map(|&v| v as f64)
            .collect();
        x = ddim_step(&x, &eps, ab, ab_prev);
    }
    Ok(x.chunks(dim).map(|c| c.to_vec()).collect())
}

/// [`ddim_sample_latents`] followed by denormalization.
pub fn ddim_sample(
    model: &WorldModel,
    stats: &NormalizationStats,
    past: &[Vec<f32>],
    actions: &[[f64; 3]],
    future: usize,
    seed: u64,
) -> Result<Vec<BevToken>, WorldModelError> {
    if stats.mean.len() != model.token_channels {
        return Err(WorldModelError::ChannelMismatch {
            stats: stats.mean.len(),
            token: model.token_channels,
        });
    }
    let (h, w) = model.grid_hw;
    ddim_sample_latents(model, past, actions, future, seed)?
        .iter()
        .map(|x| stats.denormalize(x, h, w))
        .collect()
}

#[derive(Clone, Debug)]
pub struct RolloutOutput {
    pub tokens: Vec<BevToken>,
    pub frames: Vec<ReconstructionOutput>,
}

/// Observed frames and planned actions to rendered futures. Lidar is
/// rendered along the sensor's own ray pattern.
pub fn rollout(
    tokenizer: &Tokenizer,
    model: &WorldModel,
    stats: &NormalizationStats,
    frames: &[FrameObservation],
    actions: &[[f64; 3]],
    future: usize,
    seed: u64,
) -> Result<RolloutOutput, WorldModelError> {
    let (c, h, w) = tokenizer.config.token_shape();
    if (c, (h, w)) != (model.token_channels, model.grid_hw) {
        return Err(WorldModelError::Sequence(format!(
            "tokenizer emits {c}x{h}x{w} tokens, model expects {}x{}x{}",
            model.token_channels, model.grid_hw.0, model.grid_hw.1
        )));
    }
    let past = frames
        .iter()
        .map(|f| {
            let t = tokenizer.encode(f)?;
            stats.normalize(&t)
        })
        .collect::<Result<Vec<_>, WorldModelError>>()?;
    let tokens = ddim_sample(model, stats, &past, actions, future, seed)?;
    let rays = tokenizer.pattern_rays()?;
    let frames = tokens
        .iter()
        .map(|t| tokenizer.decode(t, &rays))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RolloutOutput { tokens, frames })
}

/// Mean absolute difference between the futures sampled under two action
/// plans from the same past and seed.
pub fn controllability(
    model: &WorldModel,
    stats: &NormalizationStats,
    past: &[Vec<f32>],
    actions_a: &[[f64; 3]],
    actions_b: &[[f64; 3]],
    future: usize,
    seed: u64,
) -> Result<f64, WorldModelError> {
    let a = ddim_sample(model, stats, past, actions_a, future, seed)?;
    let b = ddim_sample(model, stats, past, actions_b, future, seed)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for (x, y) in a.iter().zip(&b) {
        for (p, q) in x.data.iter().zip(&y.data) {
            sum += (p - q).abs() as f64;
            n += 1;
        }
    }
    Ok(sum / n.max(1) as f64)
}
