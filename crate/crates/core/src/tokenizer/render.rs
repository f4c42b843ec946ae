//! Token-to-voxel decoding and differentiable volume rendering of camera
//! feature maps and lidar depths.

use std::rc::Rc;

use super::config::TokenizerConfig;
use super::encoder::IMAGE_STRIDE;
use super::swin::{self, Grid};
use crate::geometry::{sample_along_ray, CameraModel, LidarRay, Pose, Vec3, VoxelGridSpec};
use crate::numerics::nn;
use crate::numerics::{
    GatherTable, Graph, Init, NumericsError, PadMode, ParamStore, Real, Tensor, Var,
};

pub fn init_decoder<T: Real>(store: &mut ParamStore<T>, cfg: &TokenizerConfig) {
    let seed = cfg.seed;
    let (d, r) = (cfg.decoder_width, cfg.mlp_ratio);
    nn::init_linear(store, seed, "dec.in", cfg.token_channels, d);
    swin::init_pos(store, seed, "dec.pos", cfg.bev_h * cfg.bev_w, d);
    swin::init_stage(store, seed, "dec.s1", d, cfg.decoder_blocks[0], r);
    swin::init_expand(store, seed, "dec.expand", d);
    swin::init_stage(store, seed, "dec.s2", d / 2, cfg.decoder_blocks[1], r);
    nn::init_layer_norm(store, seed, "dec.ln", d / 2);
    nn::init_linear(
        store,
        seed,
        "dec.voxel",
        d / 2,
        cfg.voxel_z * cfg.voxel_channels,
    );

    nn::init_mlp(
        store,
        seed,
        "render.alpha",
        &[cfg.voxel_channels, cfg.alpha_hidden, 1],
    );
    store.init(
        seed,
        "render.alpha.1.b",
        &[1],
        Init::Const(cfg.alpha_bias_init),
    );

    let c = cfg.cnn_channels;
    let convs = [
        (cfg.voxel_channels, c[0]),
        (c[0], c[1]),
        (c[1], c[2]),
        (c[2], c[3]),
        (c[3], 3),
    ];
    for (i, (ci, co)) in convs.iter().enumerate() {
        // fan-in scaled so the deep decoder starts with non-vanishing activations
        let std = (1.0 / (9.0 * *ci as f64)).sqrt();
        store.init(
            seed,
            &format!("render.cnn.{i}.w"),
            &[3, 3, *ci, *co],
            Init::TruncNormal(std),
        );
        store.init(seed, &format!("render.cnn.{i}.b"), &[*co], Init::Zeros);
    }
}

/// Token rows `[H_b · W_b, C′]` → voxel rows `[2H_b · 2W_b · Z, C_v]` laid out
/// as [`VoxelGridSpec::row`].
pub fn decode_to_voxel<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &TokenizerConfig,
    token: Var,
) -> Result<Var, NumericsError> {
    let cells = cfg.bev_h * cfg.bev_w;
    if g.shape(token) != [cells, cfg.token_channels] {
        return Err(NumericsError::Shape {
            op: "decode_to_voxel",
            detail: format!(
                "token {:?}, expected [{cells}, {}]",
                g.shape(token),
                cfg.token_channels
            ),
        });
    }
    let grid = Grid {
        b: 1,
        h: cfg.bev_h,
        w: cfg.bev_w,
    };
    let x = nn::linear(g, store, "dec.in", token)?;
    let x = swin::add_pos(g, store, "dec.pos", x, grid)?;
    let x = swin::stage(
        g,
        store,
        "dec.s1",
        x,
        grid,
        cfg.decoder_blocks[0],
        cfg.window,
        cfg.heads,
    )?;
    let (x, grid) = swin::expand(g, store, "dec.expand", x, grid)?;
    let x = swin::stage(
        g,
        store,
        "dec.s2",
        x,
        grid,
        cfg.decoder_blocks[1],
        cfg.window,
        cfg.heads,
    )?;
    let x = nn::layer_norm(g, store, "dec.ln", x)?;
    let x = nn::linear(g, store, "dec.voxel", x)?;
    g.reshape(x, &[grid.rows() * cfg.voxel_z, cfg.voxel_channels])
}

/// Sample positions of a set of rays through the voxel volume.
#[derive(Clone, Debug)]
pub struct RayBatch<T> {
    pub rays: usize,
    pub samples: usize,
    /// Trilinear stencil over voxel rows; output rows `(ray, sample)`.
    pub table: Rc<GatherTable<T>>,
    /// `[rays, samples]` distances along each ray.
    pub t: Tensor<T>,
    /// `[rays, samples]`: 0 for rays that miss the volume.
    pub valid: Tensor<T>,
}

impl<T: Real> RayBatch<T> {
    /// Rays are clipped to the volume; each gets `n` midpoint samples between
    /// its entry and exit distances.
    pub fn new(spec: &VoxelGridSpec, rays: &[(Vec3, Vec3)], n: usize) -> Self {
        let bounds = spec.bounds();
        let mut positions = Vec::with_capacity(rays.len() * n);
        let mut t = Vec::with_capacity(rays.len() * n);
        let mut valid = Vec::with_capacity(rays.len() * n);
        for &(o, d) in rays {
            match bounds
                .intersect(o, d)
                .and_then(|(a, b)| sample_along_ray(a, b, n).ok())
            {
                Some(ts) => {
                    for ti in ts {
                        positions.push([o[0] + ti * d[0], o[1] + ti * d[1], o[2] + ti * d[2]]);
                        t.push(T::of(ti));
                        valid.push(T::one());
                    }
                }
                None => {
                    for _ in 0..n {
                        // placeholder inside the grid; its taps are cleared below
                        positions.push(spec.origin);
                        t.push(T::zero());
                        valid.push(T::zero());
                    }
                }
            }
        }
        let mut table = spec.trilinear_table::<T>(&positions);
        for (r, v) in valid.iter().enumerate() {
            if *v == T::zero() {
                for j in 0..8 {
                    table.index[r * 8 + j] = GatherTable::<T>::INVALID;
                    table.weight[r * 8 + j] = T::zero();
                }
            }
        }
        RayBatch {
            rays: rays.len(),
            samples: n,
            table: Rc::new(table),
            t: Tensor::from_vec(&[rays.len(), n], t),
            valid: Tensor::from_vec(&[rays.len(), n], valid),
        }
    }

    /// One ray per feature-map pixel of every camera, in camera order.
    pub fn cameras(
        cfg: &TokenizerConfig,
        cameras: &[CameraModel],
    ) -> Result<Self, crate::geometry::GeometryError> {
        let mut rays = Vec::new();
        for cam in cameras {
            for r in crate::geometry::make_camera_rays(cam, &Pose::identity(), IMAGE_STRIDE)? {
                rays.push((r.origin, r.dir));
            }
        }
        Ok(Self::new(&cfg.voxel_spec(), &rays, cfg.ray_samples))
    }

    /// Lidar rays from the sensor center `origin` (ego frame).
    pub fn lidar(cfg: &TokenizerConfig, origin: Vec3, rays: &[LidarRay]) -> Self {
        let r: Vec<(Vec3, Vec3)> = rays.iter().map(|l| (origin, l.direction())).collect();
        Self::new(&cfg.voxel_spec(), &r, cfg.ray_samples)
    }
}

/// Rendered quantities of a ray batch.
#[derive(Clone, Copy, Debug)]
pub struct Composite {
    /// `[rays, C_v]` aggregated features `Σ w_i v_i`.
    pub features: Var,
    /// `[rays]` expected depth `Σ w_i t_i`.
    pub depth: Var,
    /// `[rays, samples]` compositing weights.
    pub weights: Var,
}

/// Per-sample opacity `σ(MLP(v))`, then front-to-back compositing.
pub fn composite_ray<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    voxel: Var,
    batch: &RayBatch<T>,
) -> Result<Composite, NumericsError> {
    let c = g.shape(voxel)[1];
    let (r, n) = (batch.rays, batch.samples);
    let v = g.weighted_gather(voxel, batch.table.clone())?;
    let a = nn::mlp(g, store, "render.alpha", 2, v)?;
    let a = g.sigmoid(a)?;
    let a = g.reshape(a, &[r, n])?;
    let valid = g.constant(batch.valid.clone())?;
    let a = g.mul(a, valid)?;
    let w = g.composite_weights(a)?;
    let w3 = g.reshape(w, &[r, 1, n])?;
    let v3 = g.reshape(v, &[r, n, c])?;
    let f = g.matmul(w3, v3)?;
    let features = g.reshape(f, &[r, c])?;
    let t = g.constant(batch.t.clone())?;
    let wt = g.mul(w, t)?;
    let depth = g.sum_axis(wt, 1)?;
    Ok(Composite {
        features,
        depth,
        weights: w,
    })
}

/// Convolutional decoder: feature maps `[B, h, w, C_v]` → RGB `[B, 8h, 8w, 3]` in `[0, 1]`.
pub fn image_decoder<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    features: Var,
) -> Result<Var, NumericsError> {
    let mut x = features;
    for i in 0..5 {
        if (1..4).contains(&i) {
            x = g.upsample2x(x)?;
        }
        let w = g.param(store, &format!("render.cnn.{i}.w"))?;
        x = g.conv2d(x, w, 1, 1, PadMode::Edge)?;
        let b = g.param(store, &format!("render.cnn.{i}.b"))?;
        x = g.add(x, b)?;
        x = if i < 4 { g.gelu(x)? } else { g.sigmoid(x)? };
    }
    Ok(x)
}

/// Render all cameras of the rig from voxel rows; returns `[cameras, H, W, 3]`.
pub fn render_images<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    voxel: Var,
    camera_rays: &RayBatch<T>,
    cameras: usize,
    feature_hw: (usize, usize),
) -> Result<Var, NumericsError> {
    let comp = composite_ray(g, store, voxel, camera_rays)?;
    let c = g.shape(comp.features)[1];
    let fm = g.reshape(comp.features, &[cameras, feature_hw.0, feature_hw.1, c])?;
    image_decoder(g, store, fm)
}
