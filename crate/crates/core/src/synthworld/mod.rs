//! Procedural multi-sensor driving world with exact ground truth.
//!
//! The world frame coincides with the ego frame of the first frame. Ground is
//! the plane `z = 0` with a checker albedo; dynamic objects are yawed boxes
//! resting on the ground and moving at constant velocity. The ego follows a
//! unicycle model. Poses, actions, pixels and points are kept at `f32`
//! precision so that the on-disk format round-trips losslessly.

mod dataset;

pub use dataset::{
    decode_sequence, encode_sequence, read_dataset, read_manifest, read_sequence_file,
    write_dataset, write_sequence_file, DatasetManifest, SequenceEntry, DATASET_MAGIC,
    DATASET_VERSION, MANIFEST_FILE,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    self, cartesian_to_spherical, mat_t_vec, spherical_to_cartesian, sub, CameraModel,
    GeometryError, LidarSpec, Pose, Vec3,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("scene must have at least one frame")]
    ZeroFrames,
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated data: {0}")]
    Truncated(String),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("invalid manifest: {0}")]
    Manifest(String),
}

/// Everything needed to regenerate a sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub seed: u64,
    /// Objects are spawned in `[-half, half]²` around the start position.
    pub world_half_extent: f64,
    /// No object is spawned closer than this to the start position.
    pub spawn_clearance: f64,
    pub num_boxes: usize,
    /// Length, width, height ranges in meters.
    pub box_size_min: [f64; 3],
    pub box_size_max: [f64; 3],
    pub box_speed: [f64; 2],
    pub ego_speed: [f64; 2],
    pub ego_yaw_rate: [f64; 2],
    /// Per-frame uniform perturbation of speed and yaw rate.
    pub ego_speed_jitter: f64,
    pub ego_yaw_rate_jitter: f64,
    pub cameras: Vec<CameraModel>,
    pub lidar: LidarSpec,
    pub frames: usize,
    /// Seconds between frames.
    pub dt: f64,
    pub checker_size: f64,
    pub ground_albedo: [[f64; 3]; 2],
    pub sky_color: [f64; 3],
    /// Distance over which color fades towards the sky color; `None` disables it.
    pub fog_distance: Option<f64>,
    /// Sub-pixel grid side for anti-aliased camera rendering (1 = one ray per pixel).
    pub supersample: usize,
}

impl SceneConfig {
    /// Defaults used for desk-scale experiments.
    pub fn desk(seed: u64) -> Self {
        let lidar_inclinations = (0..16)
            .map(|i| (92.0 + 28.0 * i as f64 / 15.0).to_radians())
            .collect();
        SceneConfig {
            seed,
            world_half_extent: 40.0,
            spawn_clearance: 5.0,
            num_boxes: 12,
            box_size_min: [3.5, 1.7, 1.4],
            box_size_max: [5.0, 2.2, 2.2],
            box_speed: [0.0, 6.0],
            ego_speed: [2.0, 5.0],
            ego_yaw_rate: [-0.15, 0.15],
            ego_speed_jitter: 0.5,
            ego_yaw_rate_jitter: 0.05,
            cameras: vec![
                CameraModel::with_fov(160, 96, 100f64.to_radians(), [1.0, 0.0, 1.6], 0.0, 0.12),
                CameraModel::with_fov(
                    160,
                    96,
                    100f64.to_radians(),
                    [-1.0, 0.0, 1.6],
                    std::f64::consts::PI,
                    0.12,
                ),
            ],
            lidar: LidarSpec {
                inclinations: lidar_inclinations,
                azimuths: 180,
                pose: lidar_pose(1.8),
                max_range: 40.0,
            },
            frames: 12,
            dt: 0.5,
            checker_size: 2.0,
            ground_albedo: [[0.32, 0.33, 0.36], [0.52, 0.52, 0.48]],
            sky_color: [0.62, 0.74, 0.9],
            fog_distance: Some(45.0),
            supersample: 2,
        }
    }

    /// Tiny world for tests and continuous integration.
    pub fn ci(seed: u64) -> Self {
        let lidar_inclinations = (0..8)
            .map(|i| (96.0 + 34.0 * i as f64 / 7.0).to_radians())
            .collect();
        SceneConfig {
            seed,
            world_half_extent: 11.0,
            spawn_clearance: 3.0,
            num_boxes: 4,
            box_size_min: [2.5, 1.4, 1.2],
            box_size_max: [3.5, 1.8, 1.8],
            box_speed: [0.5, 2.5],
            ego_speed: [0.5, 2.0],
            ego_yaw_rate: [-0.2, 0.2],
            ego_speed_jitter: 0.3,
            ego_yaw_rate_jitter: 0.08,
            cameras: vec![
                CameraModel::with_fov(64, 32, 110f64.to_radians(), [1.0, 0.0, 1.6], 0.0, 0.25),
                CameraModel::with_fov(
                    64,
                    32,
                    110f64.to_radians(),
                    [-1.0, 0.0, 1.6],
                    std::f64::consts::PI,
                    0.25,
                ),
            ],
            lidar: LidarSpec {
                inclinations: lidar_inclinations,
                azimuths: 64,
                pose: lidar_pose(1.8),
                max_range: 12.0,
            },
            frames: 12,
            dt: 0.5,
            checker_size: 2.0,
            ground_albedo: [[0.36, 0.37, 0.4], [0.5, 0.5, 0.47]],
            sky_color: [0.62, 0.74, 0.9],
            fog_distance: Some(14.0),
            supersample: 2,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.frames == 0 {
            return Err(SynthError::ZeroFrames);
        }
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        if !(self.dt > 0.0) {
            return bad("timestep must be positive");
        }
        if !(self.world_half_extent > 0.0) || !(self.checker_size > 0.0) {
            return bad("extents must be positive");
        }
        if self.supersample == 0 {
            return bad("supersample must be >= 1");
        }
        for (lo, hi) in [self.box_speed, self.ego_speed, self.ego_yaw_rate]
            .iter()
            .map(|r| (r[0], r[1]))
        {
            if lo > hi {
                return bad("range with min > max");
            }
        }
        if (0..3)
            .any(|a| self.box_size_min[a] <= 0.0 || self.box_size_min[a] > self.box_size_max[a])
        {
            return bad("box size range");
        }
        if self.ego_speed[0] < 0.0 || self.ego_speed_jitter < 0.0 || self.ego_yaw_rate_jitter < 0.0
        {
            return bad("negative ego speed or jitter");
        }
        for cam in &self.cameras {
            cam.validate()?;
        }
        self.lidar.validate()?;
        Ok(())
    }
}

fn lidar_pose(height: f64) -> Pose {
    Pose {
        rotation: geometry::IDENTITY,
        translation: [0.0, 0.0, height],
    }
}

/// Row-major `H × W × 3` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn pixel(&self, i: usize, j: usize) -> [f32; 3] {
        let o = (i * self.width + j) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameObservation {
    pub images: Vec<Image>,
    /// Ego-frame lidar returns.
    pub lidar: Vec<[f32; 3]>,
    /// Ego-to-world transform.
    pub pose: Pose,
    /// Ego-frame motion to the next frame: `(Δforward, Δlateral, Δyaw)`.
    pub action: [f64; 3],
}

impl FrameObservation {
    pub fn lidar_f64(&self) -> Vec<Vec3> {
        self.lidar
            .iter()
            .map(|p| [p[0] as f64, p[1] as f64, p[2] as f64])
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSequence {
    pub config: SceneConfig,
    pub frames: Vec<FrameObservation>,
}

/// Rigid 2-D motion of an ego-frame action.
pub fn action_pose(action: [f64; 3]) -> Pose {
    Pose::from_yaw(action[0], action[1], action[2])
}

/// Compose per-frame actions starting from `start`; returns `actions.len() + 1` poses.
pub fn integrate_actions(start: &Pose, actions: &[[f64; 3]]) -> Vec<Pose> {
    let mut poses = vec![*start];
    for a in actions {
        let next = poses.last().unwrap().compose(&action_pose(*a));
        poses.push(next);
    }
    poses
}

impl SceneSequence {
    /// Largest translation gap between stored poses and the chain obtained by
    /// composing the stored actions from the first pose.
    pub fn pose_chain_error(&self) -> f64 {
        let actions: Vec<[f64; 3]> = self.frames.iter().map(|f| f.action).collect();
        let chain = integrate_actions(&self.frames[0].pose, &actions[..actions.len() - 1]);
        chain
            .iter()
            .zip(&self.frames)
            .map(|(c, f)| geometry::norm(sub(c.translation, f.pose.translation)))
            .fold(0.0, f64::max)
    }
}

fn round32(x: f64) -> f64 {
    x as f32 as f64
}

fn round_pose(p: &Pose) -> Pose {
    let a = p.to_array().map(round32);
    Pose::from_array(&a)
}

/// A yawed box resting on the ground, moving at constant velocity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxObject {
    /// Center at time 0 (z is half the height).
    pub center: Vec3,
    /// Length, width, height.
    pub size: Vec3,
    pub yaw: f64,
    pub velocity: [f64; 2],
    pub albedo: [f64; 3],
}

impl BoxObject {
    pub fn center_at(&self, time: f64) -> Vec3 {
        [
            self.center[0] + self.velocity[0] * time,
            self.center[1] + self.velocity[1] * time,
            self.center[2],
        ]
    }

    /// Slab-method entry distance of a world ray, if it hits (origin outside).
    pub fn intersect(&self, time: f64, origin: Vec3, dir: Vec3) -> Option<f64> {
        let pose = Pose::from_yaw(0.0, 0.0, self.yaw);
        let c = self.center_at(time);
        let o = mat_t_vec(&pose.rotation, sub(origin, c));
        let d = mat_t_vec(&pose.rotation, dir);
        let half = [self.size[0] / 2.0, self.size[1] / 2.0, self.size[2] / 2.0];
        let aabb = geometry::Aabb {
            min: [-half[0], -half[1], -half[2]],
            max: half,
        };
        aabb.intersect(o, d).map(|(t0, _)| t0)
    }
}

/// Scene content at one instant.
#[derive(Clone, Debug)]
pub struct SceneState<'a> {
    pub config: &'a SceneConfig,
    pub boxes: &'a [BoxObject],
    pub time: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub albedo: [f64; 3],
}

impl SceneState<'_> {
    /// Nearest surface hit along a world-frame ray with unit direction.
    pub fn cast(&self, origin: Vec3, dir: Vec3, t_max: f64) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        if dir[2] < -1e-12 && origin[2] > 0.0 {
            let t = -origin[2] / dir[2];
            if t <= t_max {
                let p = [origin[0] + t * dir[0], origin[1] + t * dir[1]];
                let s = self.config.checker_size;
                let parity =
                    ((p[0] / s).floor() as i64 + (p[1] / s).floor() as i64).rem_euclid(2) as usize;
                best = Some(Hit {
                    t,
                    albedo: self.config.ground_albedo[parity],
                });
            }
        }
        for b in self.boxes {
            if let Some(t) = b.intersect(self.time, origin, dir) {
                if t > 1e-9 && t <= t_max && best.map_or(true, |h| t < h.t) {
                    best = Some(Hit {
                        t,
                        albedo: b.albedo,
                    });
                }
            }
        }
        best
    }

    fn shade(&self, hit: Option<Hit>) -> [f64; 3] {
        let sky = self.config.sky_color;
        match hit {
            None => sky,
            Some(h) => match self.config.fog_distance {
                None => h.albedo,
                Some(l) => {
                    let f = (-h.t / l).exp();
                    [0, 1, 2].map(|c| h.albedo[c] * f + sky[c] * (1.0 - f))
                }
            },
        }
    }
}

/// Maximum distance considered by camera ray casts.
const CAMERA_FAR: f64 = 1e4;

/// Ray-cast camera image for an ego pose (ego-to-world).
pub fn render_gt_camera(state: &SceneState, pose: &Pose, camera: &CameraModel) -> Image {
    let s = state.config.supersample.max(1);
    let origin = pose.apply(camera.center());
    let mut img = Image::new(camera.height, camera.width);
    img.data
        .par_chunks_mut(camera.width * 3)
        .enumerate()
        .for_each(|(i, row)| {
            for j in 0..camera.width {
                let mut acc = [0.0; 3];
                for si in 0..s {
                    for sj in 0..s {
                        let u = j as f64 + (sj as f64 + 0.5) / s as f64;
                        let v = i as f64 + (si as f64 + 0.5) / s as f64;
                        let dir = pose.rotate(camera.direction(u, v));
                        let c = state.shade(state.cast(origin, dir, CAMERA_FAR));
                        for k in 0..3 {
                            acc[k] += c[k];
                        }
                    }
                }
                for k in 0..3 {
                    row[j * 3 + k] = (acc[k] / (s * s) as f64).clamp(0.0, 1.0) as f32;
                }
            }
        });
    img
}

/// Camera-frame depth (z) of the first surface through image point `(u, v)`.
pub fn camera_depth_at(
    state: &SceneState,
    pose: &Pose,
    camera: &CameraModel,
    u: f64,
    v: f64,
) -> Option<f64> {
    let dir_ego = camera.direction(u, v);
    let dir_cam = mat_t_vec(&camera.pose.rotation, dir_ego);
    state
        .cast(
            pose.apply(camera.center()),
            pose.rotate(dir_ego),
            CAMERA_FAR,
        )
        .map(|h| h.t * dir_cam[2])
}

/// Lidar returns for the scan pattern: ego-frame points and, per ray
/// (beam-major), the hit depth if any.
pub fn render_gt_lidar(
    state: &SceneState,
    pose: &Pose,
    spec: &LidarSpec,
) -> (Vec<Vec3>, Vec<Option<f64>>) {
    let center = spec.center();
    let origin = pose.apply(center);
    let n_az = spec.azimuths;
    let depths: Vec<Option<f64>> = (0..spec.inclinations.len() * n_az)
        .into_par_iter()
        .map(|r| {
            let dir =
                spherical_to_cartesian(1.0, spec.inclinations[r / n_az], spec.azimuth(r % n_az));
            state
                .cast(origin, pose.rotate(dir), spec.max_range)
                .map(|h| h.t)
        })
        .collect();
    let points = depths
        .iter()
        .enumerate()
        .filter_map(|(r, d)| {
            d.map(|d| {
                let dir = spherical_to_cartesian(
                    1.0,
                    spec.inclinations[r / n_az],
                    spec.azimuth(r % n_az),
                );
                geometry::add(center, geometry::scale(dir, d))
            })
        })
        .collect();
    (points, depths)
}

/// Deterministic world content of a sequence: objects, ego poses and actions.
#[derive(Clone, Debug)]
pub struct World {
    pub config: SceneConfig,
    pub boxes: Vec<BoxObject>,
    /// `frames` ego poses (f32-exact).
    pub poses: Vec<Pose>,
    /// Per-frame action to the next frame (f32-exact).
    pub actions: Vec<[f64; 3]>,
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.gen_range(r[0]..r[1])
    } else {
        r[0]
    }
}

impl World {
    pub fn new(config: &SceneConfig) -> Result<Self, SynthError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let hue0: f64 = rng.gen();
        let half = config.world_half_extent;
        let mut boxes = Vec::with_capacity(config.num_boxes);
        for i in 0..config.num_boxes {
            let center = loop {
                let x = rng.gen_range(-half..half);
                let y = rng.gen_range(-half..half);
                if (x * x + y * y).sqrt() >= config.spawn_clearance {
                    break [x, y];
                }
            };
            let size: Vec3 = [0, 1, 2]
                .map(|a| uniform(&mut rng, [config.box_size_min[a], config.box_size_max[a]]));
            let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let speed = uniform(&mut rng, config.box_speed);
            // golden-ratio hue spacing keeps albedos distinct
            let albedo = hsv(hue0 + i as f64 * 0.618_033_988_75, 0.75, 0.85);
            boxes.push(BoxObject {
                center: [center[0], center[1], size[2] / 2.0],
                size,
                yaw,
                velocity: [speed * yaw.cos(), speed * yaw.sin()],
                albedo,
            });
        }
        let v0 = uniform(&mut rng, config.ego_speed);
        let w0 = uniform(&mut rng, config.ego_yaw_rate);
        let mut poses = vec![Pose::identity()];
        let mut actions = Vec::with_capacity(config.frames);
        for _ in 0..config.frames {
            let jv = if config.ego_speed_jitter > 0.0 {
                rng.gen_range(-1.0..1.0) * config.ego_speed_jitter
            } else {
                0.0
            };
            let jw = if config.ego_yaw_rate_jitter > 0.0 {
                rng.gen_range(-1.0..1.0) * config.ego_yaw_rate_jitter
            } else {
                0.0
            };
            let (v, w) = ((v0 + jv).max(0.0), w0 + jw);
            let dyaw = w * config.dt;
            let (df, dl) = if dyaw.abs() < 1e-9 {
                (v * config.dt, 0.0)
            } else {
                (v / w * dyaw.sin(), v / w * (1.0 - dyaw.cos()))
            };
            let action = [round32(df), round32(dl), round32(dyaw)];
            actions.push(action);
            // integrate in f64 from the stored action, then store at f32 precision
            let exact = poses.last().unwrap().compose(&action_pose(action));
            poses.push(exact);
        }
        poses.truncate(config.frames);
        let poses = poses.iter().map(round_pose).collect();
        Ok(World {
            config: config.clone(),
            boxes,
            poses,
            actions,
        })
    }

    pub fn state_at(&self, frame: usize) -> SceneState<'_> {
        SceneState {
            config: &self.config,
            boxes: &self.boxes,
            time: frame as f64 * self.config.dt,
        }
    }

    pub fn observe(&self, frame: usize) -> FrameObservation {
        let state = self.state_at(frame);
        let pose = self.poses[frame];
        let images = self
            .config
            .cameras
            .iter()
            .map(|c| render_gt_camera(&state, &pose, c))
            .collect();
        let (points, _) = render_gt_lidar(&state, &pose, &self.config.lidar);
        let lidar = points.iter().map(|p| p.map(|v| v as f32)).collect();
        FrameObservation {
            images,
            lidar,
            pose,
            action: self.actions[frame],
        }
    }
}

pub fn generate_scene(config: &SceneConfig) -> Result<SceneSequence, SynthError> {
    let world = World::new(config)?;
    let frames = (0..config.frames).map(|t| world.observe(t)).collect();
    Ok(SceneSequence {
        config: config.clone(),
        frames,
    })
}

/// Per-ray range of the observed lidar points relative to the sensor center.
pub fn lidar_ranges(points: &[Vec3], spec: &LidarSpec) -> Vec<f64> {
    points
        .iter()
        .filter_map(|&p| {
            cartesian_to_spherical(sub(p, spec.center()))
                .ok()
                .map(|s| s.0)
        })
        .collect()
}

#[cfg(test)]
mod tests;
