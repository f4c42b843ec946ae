use serde::{Deserialize, Serialize};

use crate::geometry::{PillarConfig, VoxelGridSpec};

/// Weights of the reconstruction objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub rgb: f64,
    pub lidar: f64,
    pub perceptual: f64,
    /// Generator-side adversarial weight.
    pub gan_generator: f64,
    /// Discriminator loss weight.
    pub gan_discriminator: f64,
    /// Iteration from which the adversarial terms are active.
    pub gan_warmup: usize,
    pub gan_enabled: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            rgb: 1.0,
            lidar: 1.0,
            perceptual: 0.1,
            gan_generator: 0.1,
            gan_discriminator: 1.0,
            gan_warmup: 2000,
            gan_enabled: true,
        }
    }
}

/// Frozen random convolutional feature stack used by the perceptual loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerceptualConfig {
    pub seed: u64,
    /// Output channels of the three stages.
    pub channels: [usize; 3],
    /// Stages whose activations enter the loss.
    pub layers: Vec<usize>,
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        PerceptualConfig {
            seed: 0x5eed_f00d,
            channels: [8, 16, 32],
            layers: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerConfig {
    pub seed: u64,
    /// BEV token grid: `bev_h` rows along +x starting at `bev_x_min`,
    /// `bev_w` columns along +y starting at `bev_y_min`, square cells.
    pub bev_x_min: f64,
    pub bev_y_min: f64,
    pub bev_cell: f64,
    pub bev_h: usize,
    pub bev_w: usize,
    pub z_min: f64,
    pub z_max: f64,
    /// Channels of the compressed token (C′).
    pub token_channels: usize,
    /// Channels of the fused BEV feature (C_f).
    pub fused_channels: usize,
    pub heads: usize,
    pub window: usize,
    pub mlp_ratio: usize,
    /// Patch-embedding width of the image backbone; doubled by its merge.
    pub image_embed: usize,
    pub image_blocks: [usize; 2],
    /// Per-pillar width of the lidar backbone (pillars at twice the BEV resolution).
    pub pillar_channels: usize,
    pub lidar_blocks: [usize; 2],
    /// Heights sampled per BEV cell for camera fusion (K).
    pub fusion_heights: usize,
    pub fusion_heads: usize,
    /// Width after the first decoder projection; halved by patch expanding.
    pub decoder_width: usize,
    pub decoder_blocks: [usize; 2],
    pub voxel_z: usize,
    pub voxel_channels: usize,
    pub ray_samples: usize,
    pub alpha_hidden: usize,
    /// Initial bias of the opacity head, keeps early renders mostly transparent.
    pub alpha_bias_init: f64,
    /// Widths of the image decoder convolutions (input stage, then after each 2× upsampling).
    pub cnn_channels: [usize; 4],
    pub loss: LossConfig,
    pub perceptual: PerceptualConfig,
}

impl TokenizerConfig {
    /// Desk-scale model: (4, 48, 48) tokens over an 80 m square, (16, 8, 96, 96) voxels.
    pub fn desk() -> Self {
        TokenizerConfig {
            seed: 0,
            bev_x_min: -40.0,
            bev_y_min: -40.0,
            bev_cell: 80.0 / 48.0,
            bev_h: 48,
            bev_w: 48,
            z_min: -4.5,
            z_max: 4.5,
            token_channels: 4,
            fused_channels: 64,
            heads: 4,
            window: 4,
            mlp_ratio: 2,
            image_embed: 32,
            image_blocks: [2, 2],
            pillar_channels: 32,
            lidar_blocks: [2, 2],
            fusion_heights: 4,
            fusion_heads: 4,
            decoder_width: 128,
            decoder_blocks: [2, 2],
            voxel_z: 8,
            voxel_channels: 16,
            ray_samples: 48,
            alpha_hidden: 16,
            alpha_bias_init: -3.0,
            cnn_channels: [64, 48, 32, 16],
            loss: LossConfig::default(),
            perceptual: PerceptualConfig::default(),
        }
    }

    /// Tiny model for tests: (4, 12, 12) tokens over a 24 m square.
    pub fn ci() -> Self {
        TokenizerConfig {
            seed: 0,
            bev_x_min: -12.0,
            bev_y_min: -12.0,
            bev_cell: 2.0,
            bev_h: 12,
            bev_w: 12,
            z_min: -1.5,
            z_max: 4.5,
            token_channels: 4,
            fused_channels: 32,
            heads: 2,
            window: 4,
            mlp_ratio: 2,
            image_embed: 16,
            image_blocks: [1, 1],
            pillar_channels: 16,
            lidar_blocks: [1, 1],
            fusion_heights: 4,
            fusion_heads: 4,
            decoder_width: 32,
            decoder_blocks: [1, 1],
            voxel_z: 8,
            voxel_channels: 16,
            ray_samples: 32,
            alpha_hidden: 16,
            alpha_bias_init: -3.0,
            cnn_channels: [32, 32, 16, 16],
            loss: LossConfig {
                gan_enabled: false,
                ..LossConfig::default()
            },
            perceptual: PerceptualConfig::default(),
        }
    }

    /// 2×2 token grid decoding to a 4×4×4 voxel volume, for gradient checks.
    pub fn toy() -> Self {
        TokenizerConfig {
            bev_x_min: -2.0,
            bev_y_min: -2.0,
            bev_cell: 2.0,
            bev_h: 2,
            bev_w: 2,
            z_min: -2.0,
            z_max: 2.0,
            token_channels: 3,
            fused_channels: 8,
            heads: 2,
            window: 2,
            image_embed: 4,
            pillar_channels: 4,
            decoder_width: 8,
            decoder_blocks: [1, 1],
            voxel_z: 4,
            voxel_channels: 4,
            ray_samples: 6,
            alpha_hidden: 5,
            alpha_bias_init: 0.0,
            ..TokenizerConfig::ci()
        }
    }

    pub fn token_shape(&self) -> (usize, usize, usize) {
        (self.token_channels, self.bev_h, self.bev_w)
    }

    /// Voxel grid over the BEV extent at twice its horizontal resolution.
    pub fn voxel_spec(&self) -> VoxelGridSpec {
        VoxelGridSpec {
            origin: [self.bev_x_min, self.bev_y_min, self.z_min],
            cell: [
                self.bev_cell / 2.0,
                self.bev_cell / 2.0,
                (self.z_max - self.z_min) / self.voxel_z as f64,
            ],
            nx: 2 * self.bev_h,
            ny: 2 * self.bev_w,
            nz: self.voxel_z,
        }
    }

    pub fn pillar_config(&self) -> PillarConfig {
        PillarConfig {
            x_min: self.bev_x_min,
            y_min: self.bev_y_min,
            cell: self.bev_cell / 2.0,
            nx: 2 * self.bev_h,
            ny: 2 * self.bev_w,
            z_min: self.z_min,
            z_max: self.z_max,
        }
    }

    pub fn image_channels(&self) -> usize {
        2 * self.image_embed
    }

    pub fn validate(&self) -> Result<(), String> {
        let even = |v: usize| v % 2 == 0;
        if self.token_channels == 0 {
            return Err("token channels must be >= 1".into());
        }
        if self.bev_h == 0
            || self.bev_w == 0
            || !(self.bev_cell > 0.0)
            || !(self.z_max > self.z_min)
        {
            return Err("empty BEV extent".into());
        }
        if !even(self.decoder_width) || !even(self.image_embed) || !even(self.pillar_channels) {
            return Err("decoder, image and pillar widths must be even".into());
        }
        for (name, dim) in [
            ("image", self.image_embed),
            ("image stage 2", 2 * self.image_embed),
            ("pillar", self.pillar_channels),
            ("lidar stage 2", 2 * self.pillar_channels),
            ("decoder", self.decoder_width),
            ("decoder stage 2", self.decoder_width / 2),
        ] {
            if dim % self.heads != 0 {
                return Err(format!(
                    "{name} width {dim} not divisible by {} heads",
                    self.heads
                ));
            }
        }
        if self.fused_channels % self.fusion_heads != 0 {
            return Err("fused channels not divisible by fusion heads".into());
        }
        if self.fusion_heights == 0
            || self.ray_samples < 2
            || self.voxel_z == 0
            || self.voxel_channels == 0
        {
            return Err("fusion heights, ray samples and voxel sizes must be positive".into());
        }
        Ok(())
    }
}
