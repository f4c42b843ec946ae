//! Camera and lidar branches, camera-to-BEV fusion and channel compression.

use std::rc::Rc;

use super::config::TokenizerConfig;
use super::swin::{self, Grid};
use crate::geometry::{pillarize, CameraModel, PILLAR_POINT_FEATURES};
use crate::numerics::nn::{self, MASK_NEG};
use crate::numerics::{
    GatherTable, Graph, Init, NumericsError, PadMode, ParamStore, Real, Tensor, Var,
};

/// Image feature maps are produced at 1/8 of the input resolution.
pub const IMAGE_STRIDE: usize = 8;
const PATCH: usize = 4;

/// Projection of the K height samples of every BEV cell into every camera.
#[derive(Clone, Debug)]
pub struct FusionTable<T> {
    /// Bilinear stencil over the stacked per-camera feature rows; output rows
    /// are ordered `(cell, camera, height)`.
    pub gather: Rc<GatherTable<T>>,
    /// `[cells, 1, S]`: 1 for samples that land inside an image.
    pub visible: Tensor<T>,
    /// `[cells, 1, S]`: 0 for visible samples, a large negative logit otherwise.
    pub logit_mask: Tensor<T>,
    pub samples: usize,
}

impl<T: Real> FusionTable<T> {
    pub fn new(cfg: &TokenizerConfig, cameras: &[CameraModel]) -> Self {
        let k = cfg.fusion_heights;
        let s = cameras.len() * k;
        let cells = cfg.bev_h * cfg.bev_w;
        let mut index = Vec::with_capacity(cells * s * 4);
        let mut weight = Vec::with_capacity(cells * s * 4);
        let mut visible = Vec::with_capacity(cells * s);
        let mut offset = 0;
        let mut offsets = Vec::new();
        for cam in cameras {
            offsets.push(offset);
            offset += (cam.height / IMAGE_STRIDE) * (cam.width / IMAGE_STRIDE);
        }
        let dz = (cfg.z_max - cfg.z_min) / k as f64;
        for ix in 0..cfg.bev_h {
            for iy in 0..cfg.bev_w {
                let x = cfg.bev_x_min + (ix as f64 + 0.5) * cfg.bev_cell;
                let y = cfg.bev_y_min + (iy as f64 + 0.5) * cfg.bev_cell;
                for (ci, cam) in cameras.iter().enumerate() {
                    let (hf, wf) = (cam.height / IMAGE_STRIDE, cam.width / IMAGE_STRIDE);
                    for kk in 0..k {
                        let z = cfg.z_min + (kk as f64 + 0.5) * dz;
                        let p = cam.project([x, y, z]);
                        if p.visible {
                            let s = IMAGE_STRIDE as f64;
                            let t = crate::geometry::bilinear_table::<f64>(
                                hf,
                                wf,
                                &[(p.u / s, p.v / s)],
                            );
                            for (i, w) in t.index.iter().zip(&t.weight) {
                                if *i == GatherTable::<f64>::INVALID {
                                    index.push(GatherTable::<T>::INVALID);
                                    weight.push(T::zero());
                                } else {
                                    index.push(*i + offsets[ci] as u32);
                                    weight.push(T::of(*w));
                                }
                            }
                            visible.push(T::one());
                        } else {
                            index.extend([GatherTable::<T>::INVALID; 4]);
                            weight.extend([T::zero(); 4]);
                            visible.push(T::zero());
                        }
                    }
                }
            }
        }
        let logit_mask = visible
            .iter()
            .map(|&v| {
                if v > T::zero() {
                    T::zero()
                } else {
                    T::of(MASK_NEG)
                }
            })
            .collect();
        FusionTable {
            gather: Rc::new(GatherTable {
                taps: 4,
                rows_in: offset,
                index,
                weight,
            }),
            visible: Tensor::from_vec(&[cells, 1, s], visible),
            logit_mask: Tensor::from_vec(&[cells, 1, s], logit_mask),
            samples: s,
        }
    }
}

/// Per-frame encoder inputs.
#[derive(Clone, Debug)]
pub struct EncoderInput<T> {
    /// `[cameras, H, W, 3]`.
    pub images: Tensor<T>,
    /// `[P, 4]` raw features of lidar points that fall into a pillar.
    pub point_features: Tensor<T>,
    /// Pillar index of each row of `point_features`.
    pub point_cells: Vec<usize>,
}

impl<T: Real> EncoderInput<T> {
    pub fn new(cfg: &TokenizerConfig, images: Tensor<T>, points: &[[f64; 3]]) -> Self {
        let grid = pillarize(points, &cfg.pillar_config());
        let feats: Vec<T> = grid
            .point_features
            .iter()
            .flat_map(|f| f.iter().map(|&v| T::of(v)))
            .collect();
        EncoderInput {
            images,
            point_features: Tensor::from_vec(
                &[grid.assignments.len(), PILLAR_POINT_FEATURES],
                feats,
            ),
            point_cells: grid.assignments.iter().map(|a| a.1).collect(),
        }
    }
}

pub fn init_encoder<T: Real>(
    store: &mut ParamStore<T>,
    cfg: &TokenizerConfig,
    image_hw: (usize, usize),
    cameras: usize,
) {
    let seed = cfg.seed;
    let (e, r) = (cfg.image_embed, cfg.mlp_ratio);
    let (h4, w4) = (image_hw.0 / PATCH, image_hw.1 / PATCH);
    store.init(
        seed,
        "enc.img.patch.w",
        &[PATCH, PATCH, 3, e],
        Init::TruncNormal(nn::INIT_STD),
    );
    store.init(seed, "enc.img.patch.b", &[e], Init::Zeros);
    swin::init_pos(store, seed, "enc.img.pos", h4 * w4, e);
    swin::init_stage(store, seed, "enc.img.s1", e, cfg.image_blocks[0], r);
    swin::init_merge(store, seed, "enc.img.merge", e);
    swin::init_stage(store, seed, "enc.img.s2", 2 * e, cfg.image_blocks[1], r);
    nn::init_layer_norm(store, seed, "enc.img.ln", 2 * e);

    let p = cfg.pillar_channels;
    nn::init_linear(store, seed, "enc.pil.point", PILLAR_POINT_FEATURES, p);
    swin::init_pos(store, seed, "enc.pil.pos", 4 * cfg.bev_h * cfg.bev_w, p);
    swin::init_stage(store, seed, "enc.pil.s1", p, cfg.lidar_blocks[0], r);
    swin::init_merge(store, seed, "enc.pil.merge", p);
    swin::init_stage(store, seed, "enc.pil.s2", 2 * p, cfg.lidar_blocks[1], r);
    nn::init_layer_norm(store, seed, "enc.pil.ln", 2 * p);
    nn::init_linear(store, seed, "enc.pil.out", 2 * p, cfg.fused_channels);

    let f = cfg.fused_channels;
    let s = cameras * cfg.fusion_heights;
    nn::init_linear(store, seed, "enc.fuse.attn", f, cfg.fusion_heads * s);
    nn::init_linear_nobias(store, seed, "enc.fuse.value", cfg.image_channels(), f);
    nn::init_linear_nobias(store, seed, "enc.fuse.out", f, f);
    nn::init_linear(store, seed, "enc.compress", f, cfg.token_channels);
}

/// Patch embedding and two windowed-attention stages per camera (weights
/// shared). Returns stacked feature rows `[cameras · H/8 · W/8, 2E]`.
pub fn image_backbone<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &TokenizerConfig,
    images: Var,
) -> Result<Var, NumericsError> {
    let s = g.shape(images).to_vec();
    let (b, h, w) = (s[0], s[1], s[2]);
    let e = cfg.image_embed;
    let pw = g.param(store, "enc.img.patch.w")?;
    let x = g.conv2d(images, pw, PATCH, 0, PadMode::Zero)?;
    let pb = g.param(store, "enc.img.patch.b")?;
    let x = g.add(x, pb)?;
    let grid = Grid {
        b,
        h: h / PATCH,
        w: w / PATCH,
    };
    let x = g.reshape(x, &[grid.rows(), e])?;
    let x = swin::add_pos(g, store, "enc.img.pos", x, grid)?;
    let x = swin::stage(
        g,
        store,
        "enc.img.s1",
        x,
        grid,
        cfg.image_blocks[0],
        cfg.window,
        cfg.heads,
    )?;
    let (x, grid) = swin::merge(g, store, "enc.img.merge", x, grid)?;
    let x = swin::stage(
        g,
        store,
        "enc.img.s2",
        x,
        grid,
        cfg.image_blocks[1],
        cfg.window,
        cfg.heads,
    )?;
    nn::layer_norm(g, store, "enc.img.ln", x)
}

/// Learned pillar encoding, max-pooled per pillar, then two windowed stages
/// down to the BEV grid. Returns the lidar BEV queries `[H_b · W_b, C_f]`.
pub fn lidar_backbone<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &TokenizerConfig,
    input: &EncoderInput<T>,
) -> Result<Var, NumericsError> {
    let p = cfg.pillar_channels;
    let grid = Grid {
        b: 1,
        h: 2 * cfg.bev_h,
        w: 2 * cfg.bev_w,
    };
    let x = if input.point_cells.is_empty() {
        g.constant(Tensor::zeros(&[grid.rows(), p]))?
    } else {
        let f = g.constant(input.point_features.clone())?;
        let f = nn::linear(g, store, "enc.pil.point", f)?;
        let f = g.gelu(f)?;
        g.segment_max(f, &input.point_cells, grid.rows())?
    };
    let x = swin::add_pos(g, store, "enc.pil.pos", x, grid)?;
    let x = swin::stage(
        g,
        store,
        "enc.pil.s1",
        x,
        grid,
        cfg.lidar_blocks[0],
        cfg.window,
        cfg.heads,
    )?;
    let (x, grid) = swin::merge(g, store, "enc.pil.merge", x, grid)?;
    let x = swin::stage(
        g,
        store,
        "enc.pil.s2",
        x,
        grid,
        cfg.lidar_blocks[1],
        cfg.window,
        cfg.heads,
    )?;
    let x = nn::layer_norm(g, store, "enc.pil.ln", x)?;
    nn::linear(g, store, "enc.pil.out", x)
}

/// Lidar queries attend over the image features found at K heights above
/// each BEV cell in every camera; invisible samples get zero weight and the
/// result is added to the query.
pub fn fuse_deformable<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &TokenizerConfig,
    query: Var,
    image_features: Var,
    table: &FusionTable<T>,
) -> Result<Var, NumericsError> {
    let (cells, f) = (g.shape(query)[0], g.shape(query)[1]);
    let (heads, s) = (cfg.fusion_heads, table.samples);
    let dh = f / heads;
    let logits = nn::linear(g, store, "enc.fuse.attn", query)?;
    let logits = g.reshape(logits, &[cells, heads, s])?;
    let lm = g.constant(table.logit_mask.clone())?;
    let logits = g.add(logits, lm)?;
    let wts = g.softmax(logits)?;
    let vis = g.constant(table.visible.clone())?;
    let wts = g.mul(wts, vis)?;
    let wts = g.reshape(wts, &[cells, heads, 1, s])?;

    let values = nn::linear(g, store, "enc.fuse.value", image_features)?;
    let sampled = g.weighted_gather(values, table.gather.clone())?;
    let sampled = g.reshape(sampled, &[cells, s, heads, dh])?;
    let sampled = g.permute(sampled, &[0, 2, 1, 3])?;
    let o = g.matmul(wts, sampled)?;
    let o = g.reshape(o, &[cells, f])?;
    let o = nn::linear(g, store, "enc.fuse.out", o)?;
    g.add(query, o)
}

/// Full encoder; returns token rows `[H_b · W_b, C′]` (cell-major, channel-last).
pub fn encode<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &TokenizerConfig,
    fusion: &FusionTable<T>,
    input: &EncoderInput<T>,
) -> Result<Var, NumericsError> {
    let images = g.constant(input.images.clone())?;
    let img = image_backbone(g, store, cfg, images)?;
    let q = lidar_backbone(g, store, cfg, input)?;
    let fused = fuse_deformable(g, store, cfg, q, img, fusion)?;
    nn::linear(g, store, "enc.compress", fused)
}
