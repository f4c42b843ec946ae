use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{self, LossTerms, PerceptualNet};
use super::{images_tensor, render, Tokenizer, TokenizerError};
use crate::checkpoint::Checkpoint;
use crate::numerics::{AdamW, AdamWConfig, Graph, ParamStore, Tensor};
use crate::synthworld::FrameObservation;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerTrainConfig {
    pub iterations: usize,
    /// `total_iters` is overridden by `iterations`.
    pub optimizer: AdamWConfig,
    pub seed: u64,
    pub log_every: usize,
    /// Periodic checkpoint cadence; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TokenizerTrainConfig {
    fn default() -> Self {
        TokenizerTrainConfig {
            iterations: 1000,
            optimizer: AdamWConfig {
                lr: 5e-4,
                beta1: 0.5,
                beta2: 0.9,
                weight_decay: 0.01,
                ..AdamWConfig::default()
            },
            seed: 0,
            log_every: 50,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub frame: usize,
    pub lr: f64,
    pub grad_norm: f64,
    pub terms: LossTerms,
    pub discriminator: Option<f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainSummary {
    pub iterations: usize,
    pub log: Vec<IterationLog>,
    pub seconds: f64,
}

/// One frame's targets, prepared once.
struct Sample {
    input: super::EncoderInput<f32>,
    target: Tensor<f32>,
    lidar: Option<(render::RayBatch<f32>, Tensor<f32>)>,
}

fn prepare(tok: &Tokenizer, frame: &FrameObservation) -> Result<Sample, TokenizerError> {
    let input = tok.encoder_input(frame)?;
    let rays = tok.target_rays(&frame.lidar_f64())?;
    let lidar = (!rays.is_empty()).then(|| {
        let depth = rays.iter().map(|r| r.depth.unwrap() as f32).collect();
        (
            tok.lidar_batch(&rays),
            Tensor::from_vec(&[rays.len()], depth),
        )
    });
    Ok(Sample {
        input,
        target: images_tensor(&frame.images),
        lidar,
    })
}

/// Train end-to-end on single frames, visiting the set in a freshly shuffled
/// order every epoch. `checkpoint` receives the tokenizer at the configured
/// cadence; `on_log` every logged iteration.
pub fn train_tokenizer(
    tok: &mut Tokenizer,
    frames: &[FrameObservation],
    cfg: &TokenizerTrainConfig,
    checkpoint: Option<(PathBuf, &Checkpoint)>,
    mut on_log: impl FnMut(&IterationLog),
) -> Result<TrainSummary, TokenizerError> {
    if frames.is_empty() {
        return Err(TokenizerError::EmptyDataset);
    }
    let start = std::time::Instant::now();
    let samples: Vec<Sample> = frames
        .iter()
        .map(|f| prepare(tok, f))
        .collect::<Result<_, _>>()?;
    let perceptual = PerceptualNet::<f32>::new(&tok.config.perceptual);
    let loss_cfg = tok.config.loss.clone();
    let opt_cfg = AdamWConfig {
        total_iters: cfg.iterations,
        ..cfg.optimizer.clone()
    };
    let mut opt = AdamW::new(opt_cfg.clone());
    let mut disc = ParamStore::<f32>::new();
    loss::init_discriminator(&mut disc, tok.config.seed ^ 0xd15c);
    let mut disc_opt = AdamW::new(opt_cfg);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut summary = TrainSummary::default();
    for it in 0..cfg.iterations {
        if order.is_empty() {
            order = (0..samples.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let fi = order.pop().unwrap();
        let s = &samples[fi];
        let gan_on = loss_cfg.gan_enabled && it >= loss_cfg.gan_warmup;

        let mut g = Graph::new();
        let token = tok.encode_graph(&mut g, &tok.store, &s.input)?;
        let voxel = render::decode_to_voxel(&mut g, &tok.store, &tok.config, token)?;
        let pred = render::render_images(
            &mut g,
            &tok.store,
            voxel,
            &tok.tables.camera_rays,
            tok.cameras.len(),
            tok.tables.feature_hw,
        )?;
        let depth = match &s.lidar {
            Some((batch, target)) => Some((
                render::composite_ray(&mut g, &tok.store, voxel, batch)?.depth,
                target,
            )),
            None => None,
        };
        let nodes = loss::tokenizer_loss(
            &mut g,
            &loss_cfg,
            &perceptual,
            pred,
            &s.target,
            depth,
            it,
            gan_on.then_some(&disc),
        )?;
        let terms = nodes.values(&g);
        if !terms.total.is_finite() {
            return Err(TokenizerError::Divergence {
                iteration: it,
                loss: terms.total,
            });
        }
        let grads = g.backward(nodes.total)?;
        tok.store.zero_grad();
        tok.store.accumulate(&grads);
        let lr = opt.config.lr_at(opt.steps_taken());
        let grad_norm = opt.step(&mut tok.store);

        let mut disc_loss = None;
        if gan_on {
            let fake = g.value(pred).clone();
            let mut dg = Graph::new();
            let real = dg.constant(s.target.clone())?;
            let fake = dg.constant(fake)?;
            let l = loss::discriminator_loss(&mut dg, &disc, real, fake)?;
            let l = dg.scale(l, loss_cfg.gan_discriminator)?;
            let v = dg.value(l).item() as f64;
            if !v.is_finite() {
                return Err(TokenizerError::Divergence {
                    iteration: it,
                    loss: v,
                });
            }
            let dgr = dg.backward(l)?;
            disc.zero_grad();
            disc.accumulate(&dgr);
            disc_opt.step(&mut disc);
            disc_loss = Some(v);
        }

        let entry = IterationLog {
            iteration: it,
            frame: fi,
            lr,
            grad_norm,
            terms,
            discriminator: disc_loss,
        };
        if cfg.log_every > 0 && (it % cfg.log_every == 0 || it + 1 == cfg.iterations) {
            on_log(&entry);
        }
        summary.log.push(entry);
        if let Some((path, extra)) = &checkpoint {
            if cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0 {
                tok.save(path, extra)?;
            }
        }
    }
    summary.iterations = cfg.iterations;
    summary.seconds = start.elapsed().as_secs_f64();
    Ok(summary)
}

/// Centered moving average with window `w` (shrinking at the ends).
pub fn smooth(values: &[f64], w: usize) -> Vec<f64> {
    let h = w / 2;
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(h);
            let hi = (i + h + 1).min(values.len());
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}
