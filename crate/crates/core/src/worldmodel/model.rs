//! Spatial-temporal transformer that predicts diffusion noise on BEV token
//! sequences. Rows of the activation tensor are `[B, F, cells, D]`.

use serde::{Deserialize, Serialize};

use super::schedule::{timestep_embedding, ScheduleConfig};
use crate::numerics::nn;
use crate::numerics::{Graph, Init, NumericsError, ParamStore, Real, Tensor, Var};
use crate::tokenizer::swin::{self, Grid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldModelConfig {
    pub seed: u64,
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    /// Spatial attention window over the BEV grid.
    pub spatial_window: usize,
    pub mlp_ratio: usize,
    /// Longest sequence (condition + future frames) the frame embedding covers.
    pub max_frames: usize,
    /// Multipliers applied to `(Δforward, Δlateral, Δyaw)` before embedding.
    pub action_scale: [f64; 3],
    pub schedule: ScheduleConfig,
}

impl WorldModelConfig {
    pub fn desk() -> Self {
        WorldModelConfig {
            seed: 1,
            width: 192,
            blocks: 4,
            heads: 4,
            spatial_window: 8,
            mlp_ratio: 2,
            max_frames: 9,
            action_scale: [0.5, 0.5, 5.0],
            schedule: ScheduleConfig::default(),
        }
    }

    pub fn ci() -> Self {
        WorldModelConfig {
            seed: 1,
            width: 32,
            blocks: 2,
            heads: 2,
            spatial_window: 4,
            mlp_ratio: 2,
            max_frames: 6,
            action_scale: [1.0, 1.0, 5.0],
            schedule: ScheduleConfig {
                ddim_steps: 10,
                ..ScheduleConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            ));
        }
        if self.width % 2 != 0 {
            return Err("width must be even for the timestep embedding".into());
        }
        if self.blocks == 0 || self.max_frames < 2 || self.spatial_window == 0 {
            return Err("blocks, frames and window must be positive".into());
        }
        Ok(())
    }
}

pub fn init_model<T: Real>(
    store: &mut ParamStore<T>,
    cfg: &WorldModelConfig,
    token_channels: usize,
    cells: usize,
) {
    let (s, d) = (cfg.seed, cfg.width);
    nn::init_linear(store, s, "wm.in", token_channels, d);
    store.init(s, "wm.pos", &[cells, d], Init::TruncNormal(nn::INIT_STD));
    store.init(
        s,
        "wm.frame",
        &[cfg.max_frames, 1, d],
        Init::TruncNormal(nn::INIT_STD),
    );
    nn::init_mlp(store, s, "wm.act", &[3, d, d]);
    nn::init_mlp(store, s, "wm.time", &[d, d, d]);
    for b in 0..cfg.blocks {
        let p = format!("wm.b{b}");
        // zero modulation at init: every AdaLN starts as a plain LayerNorm
        store.init(s, &format!("{p}.mod.w"), &[2 * d, 6 * d], Init::Zeros);
        store.init(s, &format!("{p}.mod.b"), &[6 * d], Init::Zeros);
        nn::init_mhsa(store, s, &format!("{p}.tattn"), d);
        nn::init_mhsa(store, s, &format!("{p}.sattn"), d);
        nn::init_mlp(store, s, &format!("{p}.mlp"), &[d, d * cfg.mlp_ratio, d]);
    }
    store.init(s, "wm.final.mod.w", &[2 * d, 2 * d], Init::Zeros);
    store.init(s, "wm.final.mod.b", &[2 * d], Init::Zeros);
    nn::init_linear(store, s, "wm.out", d, token_channels);
}

/// `LayerNorm(x)·(1 + γ) + β` with an unparameterized LayerNorm.
pub fn adaln<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    gamma: Var,
    beta: Var,
) -> Result<Var, NumericsError> {
    let n = g.layer_norm(x, 1e-6)?;
    let s = g.affine(gamma, 1.0, 1.0)?;
    let y = g.mul(n, s)?;
    g.add(y, beta)
}

/// Per-frame conditioning inputs of a batch.
#[derive(Clone, Debug)]
pub struct Conditioning {
    /// `[B][F]` raw actions (`Δforward, Δlateral, Δyaw`) leading into each frame.
    pub actions: Vec<Vec<[f64; 3]>>,
    /// `[B][F]` diffusion timestep of each frame (0 for clean condition frames).
    pub timesteps: Vec<Vec<f64>>,
}

impl Conditioning {
    fn frames(&self) -> usize {
        self.actions.first().map(|a| a.len()).unwrap_or(0)
    }
}

/// `c = concat(action embedding, timestep embedding)`, shape `[B, F, 1, 2D]`.
pub fn condition_vector<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &WorldModelConfig,
    cond: &Conditioning,
) -> Result<Var, NumericsError> {
    let (b, f, d) = (cond.actions.len(), cond.frames(), cfg.width);
    let acts: Vec<T> = cond
        .actions
        .iter()
        .flatten()
        .flat_map(|a| (0..3).map(move |k| T::of(a[k] * cfg.action_scale[k])))
        .collect();
    let a = g.constant(Tensor::from_vec(&[b * f, 3], acts))?;
    let a = nn::mlp(g, store, "wm.act", 2, a)?;
    let temb: Vec<T> = cond
        .timesteps
        .iter()
        .flatten()
        .flat_map(|&t| timestep_embedding(t, d))
        .map(T::of)
        .collect();
    let t = g.constant(Tensor::from_vec(&[b * f, d], temb))?;
    let t = nn::mlp(g, store, "wm.time", 2, t)?;
    let c = g.concat(&[a, t], 1)?;
    g.reshape(c, &[b, f, 1, 2 * d])
}

fn modulation<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    c: Var,
    parts: usize,
    d: usize,
) -> Result<Vec<Var>, NumericsError> {
    let h = g.gelu(c)?;
    let m = nn::linear(g, store, prefix, h)?;
    (0..parts).map(|i| g.narrow(m, 3, i * d, d)).collect()
}

/// Noise prediction at every frame: `x[B, F, cells, C′]` → `[B, F, cells, C′]`.
/// Temporal attention is causal, so output frame `i` depends on input frames `≤ i` only.
pub fn forward<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &WorldModelConfig,
    grid_hw: (usize, usize),
    x: Var,
    cond: &Conditioning,
) -> Result<Var, NumericsError> {
    let shape = g.shape(x).to_vec();
    let (b, f, cells, ct) = (shape[0], shape[1], shape[2], shape[3]);
    let d = cfg.width;
    if cells != grid_hw.0 * grid_hw.1
        || cond.actions.len() != b
        || cond.frames() != f
        || cond.timesteps.len() != b
    {
        return Err(NumericsError::Shape {
            op: "world model",
            detail: format!(
                "input {shape:?}, grid {grid_hw:?}, {} condition rows",
                cond.actions.len()
            ),
        });
    }
    if f > cfg.max_frames {
        return Err(NumericsError::Shape {
            op: "world model",
            detail: format!("{f} frames > max {}", cfg.max_frames),
        });
    }
    let c = condition_vector(g, store, cfg, cond)?;
    let h = nn::linear(g, store, "wm.in", x)?;
    let pos = g.param(store, "wm.pos")?;
    let h = g.add(h, pos)?;
    let fe = g.param(store, "wm.frame")?;
    let fe = g.narrow(fe, 0, 0, f)?;
    let mut h = g.add(h, fe)?;
    let causal = g.constant(nn::causal_mask::<T>(f))?;
    let grid = Grid {
        b: b * f,
        h: grid_hw.0,
        w: grid_hw.1,
    };
    for blk in 0..cfg.blocks {
        let p = format!("wm.b{blk}");
        let m = modulation(g, store, &format!("{p}.mod"), c, 6, d)?;

        // temporal: each cell attends over its own past
        let n = adaln(g, h, m[0], m[1])?;
        let n = g.permute(n, &[0, 2, 1, 3])?;
        let n = g.reshape(n, &[b * cells, f, d])?;
        let a = nn::mhsa(g, store, &format!("{p}.tattn"), n, cfg.heads, Some(causal))?;
        let a = g.reshape(a, &[b, cells, f, d])?;
        let a = g.permute(a, &[0, 2, 1, 3])?;
        h = g.add(h, a)?;

        // spatial: windowed attention within each frame
        let n = adaln(g, h, m[2], m[3])?;
        let n = g.reshape(n, &[grid.rows(), d])?;
        let a = swin::window_attention(
            g,
            store,
            &format!("{p}.sattn"),
            n,
            grid,
            cfg.spatial_window,
            blk % 2 == 1,
            cfg.heads,
        )?;
        let a = g.reshape(a, &[b, f, cells, d])?;
        h = g.add(h, a)?;

        let n = adaln(g, h, m[4], m[5])?;
        let a = nn::mlp(g, store, &format!("{p}.mlp"), 2, n)?;
        h = g.add(h, a)?;
    }
    let m = modulation(g, store, "wm.final.mod", c, 2, d)?;
    let n = adaln(g, h, m[0], m[1])?;
    let out = nn::linear(g, store, "wm.out", n)?;
    debug_assert_eq!(g.shape(out), &[b, f, cells, ct]);
    Ok(out)
}

/// Mean `|ε̂ − ε|` over the future frames `[cond_frames, F)` only.
pub fn diffusion_loss<T: Real>(
    g: &mut Graph<T>,
    eps_hat_all: Var,
    eps: Var,
    cond_frames: usize,
) -> Result<Var, NumericsError> {
    let f = g.shape(eps_hat_all)[1];
    let fut = g.narrow(eps_hat_all, 1, cond_frames, f - cond_frames)?;
    let d = g.sub(fut, eps)?;
    let d = g.abs(d)?;
    g.mean(d)
}
