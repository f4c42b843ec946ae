//! Multi-modal tokenizer: camera images and a lidar sweep in, a C′×H_b×W_b
//! BEV token out, and back to images and lidar depths through a voxel
//! volume and differentiable ray compositing.

pub mod config;
pub mod encoder;
pub mod export;
pub mod loss;
pub mod render;
pub mod swin;
pub mod train;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{LossConfig, PerceptualConfig, TokenizerConfig};
pub use encoder::{EncoderInput, FusionTable, IMAGE_STRIDE};
pub use loss::{LossTerms, PerceptualNet};
pub use render::{Composite, RayBatch};
pub use train::{train_tokenizer, IterationLog, TokenizerTrainConfig, TrainSummary};

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::geometry::{self, CameraModel, GeometryError, LidarRay, LidarSpec, Vec3};
use crate::numerics::{Graph, NumericsError, ParamStore, Tensor, Var};
use crate::synthworld::{FrameObservation, Image, SceneConfig};

/// Name prefix of tokenizer parameters inside a checkpoint.
pub const PARAM_PREFIX: &str = "tok.";
/// Rays whose accumulated opacity is below this emit no point.
pub const POINT_OPACITY: f32 = 0.5;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid tokenizer config: {0}")]
    Config(String),
    #[error("sensor/rig mismatch: {0}")]
    RigMismatch(String),
    #[error("training diverged at iteration {iteration}: loss {loss}")]
    Divergence { iteration: usize, loss: f64 },
    #[error("empty training set")]
    EmptyDataset,
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad metadata {path}: {detail}")]
    Metadata { path: String, detail: String },
}

/// Compressed BEV latent. Values are stored channel-last: cell `(ix, iy)`
/// (row along +x, column along +y) owns `data[(ix·w + iy)·C′ ..][..C′]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BevToken {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl BevToken {
    pub fn zeros(channels: usize, h: usize, w: usize) -> Self {
        BevToken {
            channels,
            h,
            w,
            data: vec![0.0; channels * h * w],
        }
    }

    /// `(C′, H_b, W_b)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.h, self.w)
    }

    pub fn get(&self, c: usize, ix: usize, iy: usize) -> f32 {
        self.data[(ix * self.w + iy) * self.channels + c]
    }

    /// `[H_b·W_b, C′]` rows.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(&[self.h * self.w, self.channels], self.data.clone())
    }

    pub fn from_tensor(t: &Tensor<f32>, h: usize, w: usize) -> Result<Self, TokenizerError> {
        if t.rank() != 2 || t.shape()[0] != h * w {
            return Err(TokenizerError::RigMismatch(format!(
                "token tensor {:?} for a {h}x{w} grid",
                t.shape()
            )));
        }
        Ok(BevToken {
            channels: t.shape()[1],
            h,
            w,
            data: t.data().to_vec(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Rendered sensors of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionOutput {
    pub images: Vec<Image>,
    /// One expected depth per queried lidar ray.
    pub depths: Vec<f32>,
    /// Accumulated opacity per queried lidar ray.
    pub opacity: Vec<f32>,
    /// Ego-frame points of rays with opacity ≥ [`POINT_OPACITY`].
    pub points: Vec<[f32; 3]>,
}

/// Rig-dependent lookup tables, built once per tokenizer.
#[derive(Clone, Debug)]
pub struct RigTables {
    pub fusion: FusionTable<f32>,
    pub camera_rays: RayBatch<f32>,
    pub image_hw: (usize, usize),
    pub feature_hw: (usize, usize),
}

/// Sidecar JSON written next to every tokenizer checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizerMeta {
    pub config: TokenizerConfig,
    pub cameras: Vec<CameraModel>,
    pub lidar: LidarSpec,
}

pub fn meta_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("json")
}

#[derive(Clone, Debug)]
pub struct Tokenizer {
    pub config: TokenizerConfig,
    pub cameras: Vec<CameraModel>,
    pub lidar: LidarSpec,
    pub store: ParamStore<f32>,
    pub tables: RigTables,
}

/// Image size shared by every camera; must be a multiple of the image stride.
pub fn rig_image_hw(cameras: &[CameraModel]) -> Result<(usize, usize), TokenizerError> {
    let first = cameras
        .first()
        .ok_or_else(|| TokenizerError::RigMismatch("no cameras".into()))?;
    let hw = (first.height, first.width);
    for c in cameras {
        c.validate()?;
        if (c.height, c.width) != hw {
            return Err(TokenizerError::RigMismatch(
                "cameras must share one image size".into(),
            ));
        }
    }
    if hw.0 % IMAGE_STRIDE != 0 || hw.1 % IMAGE_STRIDE != 0 {
        return Err(TokenizerError::RigMismatch(format!(
            "image size {}x{} is not a multiple of {IMAGE_STRIDE}",
            hw.0, hw.1
        )));
    }
    Ok(hw)
}

impl RigTables {
    pub fn new(config: &TokenizerConfig, cameras: &[CameraModel]) -> Result<Self, TokenizerError> {
        let image_hw = rig_image_hw(cameras)?;
        Ok(RigTables {
            fusion: FusionTable::new(config, cameras),
            camera_rays: RayBatch::cameras(config, cameras)?,
            image_hw,
            feature_hw: (image_hw.0 / IMAGE_STRIDE, image_hw.1 / IMAGE_STRIDE),
        })
    }
}

/// Stack frame images into `[cameras, H, W, 3]`.
pub fn images_tensor(images: &[Image]) -> Tensor<f32> {
    let (h, w) = images
        .first()
        .map(|i| (i.height, i.width))
        .unwrap_or((0, 0));
    let data = images.iter().flat_map(|i| i.data.iter().copied()).collect();
    Tensor::from_vec(&[images.len(), h, w, 3], data)
}

/// Split `[cameras, H, W, 3]` back into images.
pub fn tensor_images(t: &Tensor<f32>) -> Vec<Image> {
    let s = t.shape();
    let n = s[1] * s[2] * 3;
    (0..s[0])
        .map(|c| Image {
            height: s[1],
            width: s[2],
            data: t.data()[c * n..(c + 1) * n].to_vec(),
        })
        .collect()
}

impl Tokenizer {
    /// Freshly initialized tokenizer for a sensor rig.
    pub fn new(
        config: TokenizerConfig,
        cameras: Vec<CameraModel>,
        lidar: LidarSpec,
    ) -> Result<Self, TokenizerError> {
        config.validate().map_err(TokenizerError::Config)?;
        lidar.validate()?;
        let tables = RigTables::new(&config, &cameras)?;
        let mut store = ParamStore::new();
        encoder::init_encoder(&mut store, &config, tables.image_hw, cameras.len());
        render::init_decoder(&mut store, &config);
        Ok(Tokenizer {
            config,
            cameras,
            lidar,
            store,
            tables,
        })
    }

    pub fn for_scene(config: TokenizerConfig, scene: &SceneConfig) -> Result<Self, TokenizerError> {
        Self::new(config, scene.cameras.clone(), scene.lidar.clone())
    }

    pub fn check_frame(&self, frame: &FrameObservation) -> Result<(), TokenizerError> {
        if frame.images.len() != self.cameras.len() {
            return Err(TokenizerError::RigMismatch(format!(
                "frame has {} images, rig has {} cameras",
                frame.images.len(),
                self.cameras.len()
            )));
        }
        for (i, img) in frame.images.iter().enumerate() {
            if (img.height, img.width) != self.tables.image_hw
                || img.data.len() != img.height * img.width * 3
            {
                return Err(TokenizerError::RigMismatch(format!(
                    "camera {i} image is {}x{}, expected {}x{}",
                    img.height, img.width, self.tables.image_hw.0, self.tables.image_hw.1
                )));
            }
        }
        Ok(())
    }

    pub fn encoder_input(
        &self,
        frame: &FrameObservation,
    ) -> Result<EncoderInput<f32>, TokenizerError> {
        self.check_frame(frame)?;
        Ok(EncoderInput::new(
            &self.config,
            images_tensor(&frame.images),
            &frame.lidar_f64(),
        ))
    }

    /// Token rows `[H_b·W_b, C′]` as a graph node.
    pub fn encode_graph(
        &self,
        g: &mut Graph<f32>,
        store: &ParamStore<f32>,
        input: &EncoderInput<f32>,
    ) -> Result<Var, TokenizerError> {
        Ok(encoder::encode(
            g,
            store,
            &self.config,
            &self.tables.fusion,
            input,
        )?)
    }

    pub fn encode(&self, frame: &FrameObservation) -> Result<BevToken, TokenizerError> {
        let input = self.encoder_input(frame)?;
        let mut g = Graph::new();
        let t = self.encode_graph(&mut g, &self.store, &input)?;
        BevToken::from_tensor(g.value(t), self.config.bev_h, self.config.bev_w)
    }

    /// Lidar rays of the fixed scan pattern, as used at inference.
    pub fn pattern_rays(&self) -> Result<Vec<LidarRay>, TokenizerError> {
        Ok(geometry::lidar_rays_from_spec(&self.lidar)?)
    }

    /// Rays through observed points that end inside the voxel volume; these
    /// carry the depth targets for training and tokenizer evaluation.
    pub fn target_rays(&self, points: &[Vec3]) -> Result<Vec<LidarRay>, TokenizerError> {
        let bounds = self.config.voxel_spec().bounds();
        let inside: Vec<Vec3> = points
            .iter()
            .copied()
            .filter(|p| bounds.contains(*p))
            .collect();
        Ok(geometry::lidar_rays_from_points(&inside, &self.lidar)?)
    }

    pub fn lidar_batch(&self, rays: &[LidarRay]) -> RayBatch<f32> {
        RayBatch::lidar(&self.config, self.lidar.center(), rays)
    }

    /// Render images and lidar depths from a token.
    pub fn decode(
        &self,
        token: &BevToken,
        rays: &[LidarRay],
    ) -> Result<ReconstructionOutput, TokenizerError> {
        let (c, h, w) = self.config.token_shape();
        if token.shape() != (c, h, w) {
            return Err(TokenizerError::RigMismatch(format!(
                "token shape {:?}, expected {:?}",
                token.shape(),
                (c, h, w)
            )));
        }
        let mut g = Graph::new();
        let t = g.constant(token.to_tensor())?;
        self.decode_graph(&mut g, t, rays)
    }

    fn decode_graph(
        &self,
        g: &mut Graph<f32>,
        token: Var,
        rays: &[LidarRay],
    ) -> Result<ReconstructionOutput, TokenizerError> {
        let voxel = render::decode_to_voxel(g, &self.store, &self.config, token)?;
        let images = render::render_images(
            g,
            &self.store,
            voxel,
            &self.tables.camera_rays,
            self.cameras.len(),
            self.tables.feature_hw,
        )?;
        let images = tensor_images(g.value(images));
        let (depths, opacity) = if rays.is_empty() {
            (Vec::new(), Vec::new())
        } else {
            let batch = self.lidar_batch(rays);
            let comp = render::composite_ray(g, &self.store, voxel, &batch)?;
            let depths = g.value(comp.depth).data().to_vec();
            let wts = g.value(comp.weights);
            let opacity = wts
                .data()
                .chunks(batch.samples)
                .map(|r| r.iter().sum::<f32>())
                .collect();
            (depths, opacity)
        };
        let c = self.lidar.center();
        let points = rays
            .iter()
            .zip(depths.iter().zip(&opacity))
            .filter(|(_, (_, &o))| o >= POINT_OPACITY)
            .map(|(r, (&d, _))| {
                let p = geometry::spherical_to_cartesian(d as f64, r.theta, r.phi);
                [
                    (p[0] + c[0]) as f32,
                    (p[1] + c[1]) as f32,
                    (p[2] + c[2]) as f32,
                ]
            })
            .collect();
        Ok(ReconstructionOutput {
            images,
            depths,
            opacity,
            points,
        })
    }

    /// Expected-depth points along `rays`, one per ray whatever its opacity,
    /// without rendering the cameras. This is how predictions are scored
    /// against a ground-truth scan.
    pub fn depth_points(
        &self,
        token: &BevToken,
        rays: &[LidarRay],
    ) -> Result<Vec<[f32; 3]>, TokenizerError> {
        let (c, h, w) = self.config.token_shape();
        if token.shape() != (c, h, w) {
            return Err(TokenizerError::RigMismatch(format!(
                "token shape {:?}, expected {:?}",
                token.shape(),
                (c, h, w)
            )));
        }
        if rays.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let t = g.constant(token.to_tensor())?;
        let voxel = render::decode_to_voxel(&mut g, &self.store, &self.config, t)?;
        let comp = render::composite_ray(&mut g, &self.store, voxel, &self.lidar_batch(rays))?;
        let o = self.lidar.center();
        Ok(rays
            .iter()
            .zip(g.value(comp.depth).data())
            .map(|(r, &d)| {
                let p = geometry::spherical_to_cartesian(d as f64, r.theta, r.phi);
                [
                    (p[0] + o[0]) as f32,
                    (p[1] + o[1]) as f32,
                    (p[2] + o[2]) as f32,
                ]
            })
            .collect())
    }

    /// Encode then decode, querying depth along `rays`.
    pub fn reconstruct(
        &self,
        frame: &FrameObservation,
        rays: &[LidarRay],
    ) -> Result<(BevToken, ReconstructionOutput), TokenizerError> {
        let token = self.encode(frame)?;
        let out = self.decode(&token, rays)?;
        Ok((token, out))
    }

    pub fn meta(&self) -> TokenizerMeta {
        TokenizerMeta {
            config: self.config.clone(),
            cameras: self.cameras.clone(),
            lidar: self.lidar.clone(),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.add_store(PARAM_PREFIX, &self.store);
        c
    }

    /// Write the parameters (plus `extra` tensors) and the JSON sidecar.
    pub fn save(&self, path: &Path, extra: &Checkpoint) -> Result<(), TokenizerError> {
        let mut c = self.to_checkpoint();
        for (k, v) in &extra.tensors {
            c.insert(k, v.clone());
        }
        c.write(path)?;
        let meta = serde_json::to_string_pretty(&self.meta()).expect("metadata serializes");
        let mp = meta_path(path);
        crate::checkpoint::write_atomic(&mp, meta.as_bytes()).map_err(|source| TokenizerError::Io {
            path: mp.display().to_string(),
            source,
        })
    }

    /// Load a tokenizer and the full checkpoint it came from.
    pub fn load(path: &Path) -> Result<(Self, Checkpoint), TokenizerError> {
        let mp = meta_path(path);
        let text = std::fs::read_to_string(&mp).map_err(|source| TokenizerError::Io {
            path: mp.display().to_string(),
            source,
        })?;
        let meta: TokenizerMeta =
            serde_json::from_str(&text).map_err(|e| TokenizerError::Metadata {
                path: mp.display().to_string(),
                detail: e.to_string(),
            })?;
        let ckpt = Checkpoint::read(path)?;
        let mut tok = Tokenizer::new(meta.config, meta.cameras, meta.lidar)?;
        ckpt.load_into(PARAM_PREFIX, &mut tok.store)?;
        Ok((tok, ckpt))
    }
}
