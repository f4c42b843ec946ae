//! Camera and lidar ray models, ray sampling, interpolation stencils,
//! projection and pillarization.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{GatherTable, Real};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate camera intrinsics: {0}")]
    DegenerateIntrinsics(String),
    #[error("rotation is not orthonormal (error {0:.2e})")]
    NotOrthonormal(f64),
    #[error("zero-length direction")]
    ZeroLength,
    #[error("invalid ray bounds: near {near} >= far {far}")]
    InvalidBounds { near: f64, far: f64 },
    #[error("need at least 2 samples per ray, got {0}")]
    TooFewSamples(usize),
    #[error("invalid lidar spec: {0}")]
    InvalidLidar(String),
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Result<Vec3, GeometryError> {
    let n = norm(a);
    if n <= 1e-12 {
        return Err(GeometryError::ZeroLength);
    }
    Ok(scale(a, 1.0 / n))
}

pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

pub fn mat_t_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Rigid transform `p ↦ R p + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Pose::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: IDENTITY,
            translation: [0.0; 3],
        }
    }

    pub fn from_yaw(x: f64, y: f64, yaw: f64) -> Self {
        let (s, c) = yaw.sin_cos();
        Pose {
            rotation: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
            translation: [x, y, 0.0],
        }
    }

    /// Yaw angle of the rotation about +z.
    pub fn yaw(&self) -> f64 {
        self.rotation[1][0].atan2(self.rotation[0][0])
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        add(mat_vec(&self.rotation, p), self.translation)
    }

    pub fn rotate(&self, v: Vec3) -> Vec3 {
        mat_vec(&self.rotation, v)
    }

    pub fn inverse(&self) -> Pose {
        let rt = [
            [
                self.rotation[0][0],
                self.rotation[1][0],
                self.rotation[2][0],
            ],
            [
                self.rotation[0][1],
                self.rotation[1][1],
                self.rotation[2][1],
            ],
            [
                self.rotation[0][2],
                self.rotation[1][2],
                self.rotation[2][2],
            ],
        ];
        let t = mat_vec(&rt, self.translation);
        Pose {
            rotation: rt,
            translation: [-t[0], -t[1], -t[2]],
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: mat_mul(&self.rotation, &other.rotation),
            translation: self.apply(other.translation),
        }
    }

    pub fn orthonormality_error(&self) -> f64 {
        let rrt = mat_mul(&self.rotation, &self.inverse().rotation);
        let mut e = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                e = e.max((rrt[i][j] - if i == j { 1.0 } else { 0.0 }).abs());
            }
        }
        e
    }

    /// 12 values: row-major rotation then translation.
    pub fn to_array(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2], t[0],
            t[1], t[2],
        ]
    }

    pub fn from_array(a: &[f64; 12]) -> Self {
        Pose {
            rotation: [[a[0], a[1], a[2]], [a[3], a[4], a[5]], [a[6], a[7], a[8]]],
            translation: [a[9], a[10], a[11]],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn new(origin: Vec3, dir: Vec3, near: f64, far: f64) -> Result<Self, GeometryError> {
        if !(near >= 0.0 && near < far) {
            return Err(GeometryError::InvalidBounds { near, far });
        }
        Ok(Ray {
            origin,
            dir: normalize(dir)?,
            near,
            far,
        })
    }

    pub fn at(&self, t: f64) -> Vec3 {
        add(self.origin, scale(self.dir, t))
    }
}

/// Pinhole camera. Camera axes: +x right, +y down, +z forward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Sensor-to-ego transform.
    pub pose: Pose,
}

/// Rotation taking camera axes to ego axes (x forward, y left, z up) for a
/// camera looking along ego yaw `yaw`, pitched down by `pitch` radians.
pub fn camera_rotation(yaw: f64, pitch: f64) -> Mat3 {
    // columns: camera x (right), y (down), z (forward) expressed in ego frame
    let (sy, cy) = yaw.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let fwd = [cp * cy, cp * sy, -sp];
    let right = [sy, -cy, 0.0];
    let down = [-sp * cy, -sp * sy, -cp];
    [
        [right[0], down[0], fwd[0]],
        [right[1], down[1], fwd[1]],
        [right[2], down[2], fwd[2]],
    ]
}

impl CameraModel {
    /// Camera with horizontal field of view `hfov` radians and square pixels.
    pub fn with_fov(
        width: usize,
        height: usize,
        hfov: f64,
        position: Vec3,
        yaw: f64,
        pitch: f64,
    ) -> Self {
        let f = width as f64 / 2.0 / (hfov / 2.0).tan();
        CameraModel {
            fx: f,
            fy: f,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            pose: Pose {
                rotation: camera_rotation(yaw, pitch),
                translation: position,
            },
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(GeometryError::DegenerateIntrinsics(format!(
                "fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::DegenerateIntrinsics("empty image".into()));
        }
        let e = self.pose.orthonormality_error();
        if e > 1e-6 {
            return Err(GeometryError::NotOrthonormal(e));
        }
        Ok(())
    }

    pub fn center(&self) -> Vec3 {
        self.pose.translation
    }

    /// Ego-frame unit direction through image point `(u, v)` (pixel units,
    /// pixel `(i, j)` spans `[j, j+1) × [i, i+1)`).
    pub fn direction(&self, u: f64, v: f64) -> Vec3 {
        let d = [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0];
        let n = norm(d);
        self.pose.rotate(scale(d, 1.0 / n))
    }

    pub fn project(&self, p_ego: Vec3) -> Projection {
        let pc = mat_t_vec(&self.pose.rotation, sub(p_ego, self.pose.translation));
        if pc[2] <= 1e-6 {
            return Projection {
                u: f64::NAN,
                v: f64::NAN,
                depth: pc[2],
                visible: false,
            };
        }
        let u = self.fx * pc[0] / pc[2] + self.cx;
        let v = self.fy * pc[1] / pc[2] + self.cy;
        let visible = u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64;
        Projection {
            u,
            v,
            depth: pc[2],
            visible,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    /// Camera-frame z of the point.
    pub depth: f64,
    pub visible: bool,
}

/// Pinhole projection of an ego-frame point; invisible if behind the camera
/// or outside the image.
pub fn project_to_image(point: Vec3, camera: &CameraModel) -> Projection {
    camera.project(point)
}

/// One ray per pixel center of the image downsampled by `stride`, expressed
/// in the frame given by `ego_pose` (identity for the ego/BEV frame). Bounds
/// are left at `[0, ∞)`-like placeholders; renderers clip them to a volume.
pub fn make_camera_rays(
    camera: &CameraModel,
    ego_pose: &Pose,
    stride: usize,
) -> Result<Vec<Ray>, GeometryError> {
    camera.validate()?;
    let e = ego_pose.orthonormality_error();
    if e > 1e-6 {
        return Err(GeometryError::NotOrthonormal(e));
    }
    if stride == 0 || camera.width % stride != 0 || camera.height % stride != 0 {
        return Err(GeometryError::DegenerateIntrinsics(format!(
            "image {}x{} not divisible by stride {stride}",
            camera.height, camera.width
        )));
    }
    let (hf, wf) = (camera.height / stride, camera.width / stride);
    let s = stride as f64;
    let origin = ego_pose.apply(camera.center());
    let mut rays = Vec::with_capacity(hf * wf);
    for i in 0..hf {
        for j in 0..wf {
            let d = ego_pose.rotate(camera.direction((j as f64 + 0.5) * s, (i as f64 + 0.5) * s));
            rays.push(Ray {
                origin,
                dir: d,
                near: 0.0,
                far: f64::MAX,
            });
        }
    }
    Ok(rays)
}

/// Fixed scan pattern of a spinning lidar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LidarSpec {
    /// Beam inclinations from +z, radians, strictly increasing.
    pub inclinations: Vec<f64>,
    pub azimuths: usize,
    /// Sensor-to-ego transform (translation only is used by the renderers).
    pub pose: Pose,
    pub max_range: f64,
}

impl LidarSpec {
    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.inclinations.is_empty() || self.azimuths == 0 {
            return Err(GeometryError::InvalidLidar("empty scan pattern".into()));
        }
        if self.inclinations.windows(2).any(|w| w[0] >= w[1]) {
            return Err(GeometryError::InvalidLidar(
                "inclinations not strictly increasing".into(),
            ));
        }
        if !(self.max_range > 0.0) {
            return Err(GeometryError::InvalidLidar(
                "max range must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn center(&self) -> Vec3 {
        self.pose.translation
    }

    pub fn azimuth(&self, k: usize) -> f64 {
        2.0 * std::f64::consts::PI * k as f64 / self.azimuths as f64
    }
}

/// Lidar ray in sensor-centred spherical coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LidarRay {
    pub theta: f64,
    pub phi: f64,
    /// Ground-truth range when the ray comes from an observed point.
    pub depth: Option<f64>,
}

impl LidarRay {
    pub fn direction(&self) -> Vec3 {
        spherical_to_cartesian(1.0, self.theta, self.phi)
    }
}

/// `(D sinθ cosφ, D sinθ sinφ, D cosθ)`.
pub fn spherical_to_cartesian(d: f64, theta: f64, phi: f64) -> Vec3 {
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    [d * st * cp, d * st * sp, d * ct]
}

/// Inverse of [`spherical_to_cartesian`]: `(D, θ from +z, φ = atan2(y, x))`.
pub fn cartesian_to_spherical(p: Vec3) -> Result<(f64, f64, f64), GeometryError> {
    let d = norm(p);
    if d <= 1e-12 {
        return Err(GeometryError::ZeroLength);
    }
    let theta = (p[2] / d).clamp(-1.0, 1.0).acos();
    let phi = p[1].atan2(p[0]);
    Ok((d, theta, phi))
}

/// Rays through observed points (ego frame), as seen from the lidar center.
pub fn lidar_rays_from_points(
    points: &[Vec3],
    spec: &LidarSpec,
) -> Result<Vec<LidarRay>, GeometryError> {
    let c = spec.center();
    points
        .iter()
        .map(|&p| {
            let (d, theta, phi) = cartesian_to_spherical(sub(p, c))?;
            Ok(LidarRay {
                theta,
                phi,
                depth: Some(d),
            })
        })
        .collect()
}

/// Rays of the fixed scan pattern, beam-major.
pub fn lidar_rays_from_spec(spec: &LidarSpec) -> Result<Vec<LidarRay>, GeometryError> {
    spec.validate()?;
    let mut rays = Vec::with_capacity(spec.inclinations.len() * spec.azimuths);
    for &theta in &spec.inclinations {
        for k in 0..spec.azimuths {
            rays.push(LidarRay {
                theta,
                phi: spec.azimuth(k),
                depth: None,
            });
        }
    }
    Ok(rays)
}

/// `n` evenly spaced depths at the midpoints of `n` equal cells of `[near, far]`.
pub fn sample_along_ray(near: f64, far: f64, n: usize) -> Result<Vec<f64>, GeometryError> {
    if n < 2 {
        return Err(GeometryError::TooFewSamples(n));
    }
    if !(near < far) {
        return Err(GeometryError::InvalidBounds { near, far });
    }
    let step = (far - near) / n as f64;
    Ok((0..n).map(|i| near + (i as f64 + 0.5) * step).collect())
}

/// Stratified variant: one uniform draw inside each cell.
pub fn sample_along_ray_jittered<R: Rng>(
    near: f64,
    far: f64,
    n: usize,
    rng: &mut R,
) -> Result<Vec<f64>, GeometryError> {
    let mut t = sample_along_ray(near, far, n)?;
    let step = (far - near) / n as f64;
    for v in &mut t {
        *v += (rng.gen::<f64>() - 0.5) * step;
    }
    Ok(t)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    /// Slab-method entry/exit distances along the ray, clipped to `t >= 0`.
    pub fn intersect(&self, origin: Vec3, dir: Vec3) -> Option<(f64, f64)> {
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            if dir[a].abs() < 1e-12 {
                if origin[a] < self.min[a] || origin[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[a];
            let mut ta = (self.min[a] - origin[a]) * inv;
            let mut tb = (self.max[a] - origin[a]) * inv;
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
            if t0 > t1 {
                return None;
            }
        }
        Some((t0, t1))
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }
}

/// Axis-aligned regular 3-D grid. Cell `(iz, ix, iy)` has center
/// `origin + (i + 0.5) * cell` per axis. Feature rows are stored
/// `[(ix * ny + iy) * nz + iz]`, i.e. x-major, then y, then z.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoxelGridSpec {
    pub origin: Vec3,
    pub cell: Vec3,
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl VoxelGridSpec {
    pub fn bounds(&self) -> Aabb {
        Aabb {
            min: self.origin,
            max: [
                self.origin[0] + self.cell[0] * self.nx as f64,
                self.origin[1] + self.cell[1] * self.ny as f64,
                self.origin[2] + self.cell[2] * self.nz as f64,
            ],
        }
    }

    pub fn cells(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn row(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.ny + iy) * self.nz + iz
    }

    pub fn cell_center(&self, ix: usize, iy: usize, iz: usize) -> Vec3 {
        [
            self.origin[0] + (ix as f64 + 0.5) * self.cell[0],
            self.origin[1] + (iy as f64 + 0.5) * self.cell[1],
            self.origin[2] + (iz as f64 + 0.5) * self.cell[2],
        ]
    }

    /// Continuous lattice coordinates (cell centers at integers).
    fn lattice(&self, p: Vec3) -> Vec3 {
        [
            (p[0] - self.origin[0]) / self.cell[0] - 0.5,
            (p[1] - self.origin[1]) / self.cell[1] - 0.5,
            (p[2] - self.origin[2]) / self.cell[2] - 0.5,
        ]
    }

    /// The 8 trilinear taps of `p`; taps outside the grid are `None`
    /// (zero padding), so far-away positions read zero.
    pub fn trilinear_taps(&self, p: Vec3) -> [(Option<usize>, f64); 8] {
        let l = self.lattice(p);
        let base = [l[0].floor(), l[1].floor(), l[2].floor()];
        let frac = [l[0] - base[0], l[1] - base[1], l[2] - base[2]];
        let dims = [self.nx as isize, self.ny as isize, self.nz as isize];
        let mut taps = [(None, 0.0); 8];
        for (c, tap) in taps.iter_mut().enumerate() {
            let mut w = 1.0;
            let mut idx = [0isize; 3];
            let mut inside = true;
            for a in 0..3 {
                let bit = (c >> a) & 1;
                idx[a] = base[a] as isize + bit as isize;
                w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
                inside &= idx[a] >= 0 && idx[a] < dims[a];
            }
            let row = inside.then(|| self.row(idx[0] as usize, idx[1] as usize, idx[2] as usize));
            *tap = (row, w);
        }
        taps
    }

    /// Stencil for [`crate::numerics::Graph::weighted_gather`] over rows of this grid.
    pub fn trilinear_table<T: Real>(&self, positions: &[Vec3]) -> GatherTable<T> {
        let mut index = Vec::with_capacity(positions.len() * 8);
        let mut weight = Vec::with_capacity(positions.len() * 8);
        for &p in positions {
            for (row, w) in self.trilinear_taps(p) {
                match row {
                    Some(r) if w != 0.0 => {
                        index.push(r as u32);
                        weight.push(T::of(w));
                    }
                    _ => {
                        index.push(GatherTable::<T>::INVALID);
                        weight.push(T::zero());
                    }
                }
            }
        }
        GatherTable {
            taps: 8,
            rows_in: self.cells(),
            index,
            weight,
        }
    }
}

/// Trilinear interpolation of a grid whose rows follow [`VoxelGridSpec::row`].
/// Differentiable counterpart: [`VoxelGridSpec::trilinear_table`].
pub fn trilinear_sample(
    values: &[f64],
    channels: usize,
    spec: &VoxelGridSpec,
    p: Vec3,
) -> Vec<f64> {
    let mut out = vec![0.0; channels];
    for (row, w) in spec.trilinear_taps(p) {
        if let Some(r) = row {
            for c in 0..channels {
                out[c] += w * values[r * channels + c];
            }
        }
    }
    out
}

/// Bilinear stencil over an `[h, w]` row-major feature map for points given
/// in continuous pixel coordinates `(x, y)` where pixel `(i, j)` has its
/// center at `(j + 0.5, i + 0.5)`. Taps outside the map read zero.
pub fn bilinear_table<T: Real>(h: usize, w: usize, points: &[(f64, f64)]) -> GatherTable<T> {
    let mut index = Vec::with_capacity(points.len() * 4);
    let mut weight = Vec::with_capacity(points.len() * 4);
    for &(x, y) in points {
        let (lx, ly) = (x - 0.5, y - 0.5);
        let (bx, by) = (lx.floor(), ly.floor());
        let (fx, fy) = (lx - bx, ly - by);
        for c in 0..4 {
            let (dx, dy) = (c & 1, c >> 1);
            let (ix, iy) = (bx as isize + dx as isize, by as isize + dy as isize);
            let wgt = if dx == 1 { fx } else { 1.0 - fx } * if dy == 1 { fy } else { 1.0 - fy };
            if ix >= 0 && iy >= 0 && (ix as usize) < w && (iy as usize) < h && wgt != 0.0 {
                index.push((iy as usize * w + ix as usize) as u32);
                weight.push(T::of(wgt));
            } else {
                index.push(GatherTable::<T>::INVALID);
                weight.push(T::zero());
            }
        }
    }
    GatherTable {
        taps: 4,
        rows_in: h * w,
        index,
        weight,
    }
}

/// BEV pillar layout: `nx × ny` cells over `[x_min, x_min + nx*cell) ×
/// [y_min, y_min + ny*cell)`, with points restricted to `[z_min, z_max]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PillarConfig {
    pub x_min: f64,
    pub y_min: f64,
    pub cell: f64,
    pub nx: usize,
    pub ny: usize,
    pub z_min: f64,
    pub z_max: f64,
}

/// Per-point raw pillar features: offsets from the pillar center in cell
/// units, height scaled to `[-1, 1]` over the z range, and a constant 1.
pub const PILLAR_POINT_FEATURES: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct PillarGrid {
    pub config: PillarConfig,
    /// For each kept point: `(index into the input cloud, cell)`.
    pub assignments: Vec<(usize, usize)>,
    /// Raw features of kept points, row-aligned with `assignments`.
    pub point_features: Vec<[f64; PILLAR_POINT_FEATURES]>,
    /// Per-cell elementwise max of the raw features (zero for empty cells).
    pub cell_features: Vec<[f64; PILLAR_POINT_FEATURES]>,
    pub counts: Vec<usize>,
}

impl PillarConfig {
    pub fn cell_of(&self, p: Vec3) -> Option<usize> {
        if !(p[2] >= self.z_min && p[2] <= self.z_max) {
            return None;
        }
        let fx = (p[0] - self.x_min) / self.cell;
        let fy = (p[1] - self.y_min) / self.cell;
        if fx < 0.0 || fy < 0.0 {
            return None;
        }
        let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
        (ix < self.nx && iy < self.ny).then_some(ix * self.ny + iy)
    }

    pub fn cells(&self) -> usize {
        self.nx * self.ny
    }
}

pub fn pillarize(points: &[Vec3], config: &PillarConfig) -> PillarGrid {
    let mut assignments = Vec::new();
    let mut point_features = Vec::new();
    let mut cell_features = vec![[0.0; PILLAR_POINT_FEATURES]; config.cells()];
    let mut counts = vec![0usize; config.cells()];
    let zc = 0.5 * (config.z_min + config.z_max);
    let zh = (0.5 * (config.z_max - config.z_min)).max(1e-9);
    for (i, &p) in points.iter().enumerate() {
        let Some(cell) = config.cell_of(p) else {
            continue;
        };
        let (ix, iy) = (cell / config.ny, cell % config.ny);
        let f = [
            (p[0] - config.x_min) / config.cell - (ix as f64 + 0.5),
            (p[1] - config.y_min) / config.cell - (iy as f64 + 0.5),
            (p[2] - zc) / zh,
            1.0,
        ];
        let agg = &mut cell_features[cell];
        for k in 0..PILLAR_POINT_FEATURES {
            agg[k] = if counts[cell] == 0 {
                f[k]
            } else {
                agg[k].max(f[k])
            };
        }
        counts[cell] += 1;
        assignments.push((i, cell));
        point_features.push(f);
    }
    PillarGrid {
        config: *config,
        assignments,
        point_features,
        cell_features,
        counts,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    fn front_cam() -> CameraModel {
        CameraModel::with_fov(64, 32, FRAC_PI_2, [1.0, 0.0, 1.6], 0.0, 0.0)
    }

    #[test]
    fn principal_point_ray_is_optical_axis() {
        let cam = front_cam();
        let d = cam.direction(cam.cx, cam.cy);
        assert!((d[0] - 1.0).abs() < 1e-12 && d[1].abs() < 1e-12 && d[2].abs() < 1e-12);
    }

    #[test]
    fn adjacent_pixels_differ_horizontally_only() {
        let cam = front_cam();
        let rays = make_camera_rays(&cam, &Pose::identity(), 8).unwrap();
        let (a, b) = (rays[9], rays[10]);
        // image rows map to ego z; horizontal neighbours share the vertical camera component
        let (ca, cb) = (
            mat_t_vec(&cam.pose.rotation, a.dir),
            mat_t_vec(&cam.pose.rotation, b.dir),
        );
        assert!((ca[1] / ca[2] - cb[1] / cb[2]).abs() < 1e-12);
        assert!((ca[0] / ca[2] - cb[0] / cb[2]).abs() > 1e-3);
    }

    #[test]
    fn camera_ray_matches_hand_inverse_intrinsics() {
        let cam = CameraModel {
            fx: 50.0,
            fy: 40.0,
            cx: 30.0,
            cy: 20.0,
            width: 64,
            height: 48,
            pose: Pose {
                rotation: camera_rotation(0.0, 0.0),
                translation: [0.0; 3],
            },
        };
        // pixel (u, v) = (45, 8): K^-1 [u v 1] = [0.3, -0.3, 1]
        let d = cam.direction(45.0, 8.0);
        let n = (0.09f64 + 0.09 + 1.0).sqrt();
        // camera x→ -ego y, camera y → -ego z, camera z → ego x
        let expect = [1.0 / n, -0.3 / n, 0.3 / n];
        for a in 0..3 {
            assert!((d[a] - expect[a]).abs() < 1e-12, "{d:?} vs {expect:?}");
        }
    }

    #[test]
    fn degenerate_camera_rejected() {
        let mut cam = front_cam();
        cam.fx = 0.0;
        assert!(matches!(
            make_camera_rays(&cam, &Pose::identity(), 8),
            Err(GeometryError::DegenerateIntrinsics(_))
        ));
    }

    #[test]
    fn lidar_angle_examples() {
        let (_, t, p) = cartesian_to_spherical([0.0, 0.0, 5.0]).unwrap();
        assert!(t.abs() < 1e-12 && p == 0.0);
        let (_, t, p) = cartesian_to_spherical([3.0, 0.0, 0.0]).unwrap();
        assert!((t - FRAC_PI_2).abs() < 1e-12 && p.abs() < 1e-12);
        let (d, t, p) = cartesian_to_spherical([1.0, 1.0, 2f64.sqrt()]).unwrap();
        assert!(
            (d - 2.0).abs() < 1e-12
                && (t - FRAC_PI_4).abs() < 1e-12
                && (p - FRAC_PI_4).abs() < 1e-12
        );
        assert_eq!(
            cartesian_to_spherical([0.0; 3]),
            Err(GeometryError::ZeroLength)
        );
    }

    #[test]
    fn spherical_examples() {
        let close = |a: Vec3, b: Vec3| (0..3).all(|i| (a[i] - b[i]).abs() < 1e-12);
        assert!(close(
            spherical_to_cartesian(7.0, 0.0, 1.234),
            [0.0, 0.0, 7.0]
        ));
        assert!(close(
            spherical_to_cartesian(2.0, FRAC_PI_2, FRAC_PI_2),
            [0.0, 2.0, 0.0]
        ));
        let h = 2f64.sqrt() / 2.0;
        assert!(close(
            spherical_to_cartesian(1.0, FRAC_PI_4, 0.0),
            [h, 0.0, h]
        ));
    }

    #[test]
    fn ray_sampling() {
        assert_eq!(
            sample_along_ray(0.0, 10.0, 5).unwrap(),
            vec![1.0, 3.0, 5.0, 7.0, 9.0]
        );
        let t = sample_along_ray(0.3, 71.9, 150).unwrap();
        let d: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
        let spread =
            d.iter().cloned().fold(f64::MIN, f64::max) - d.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread < 1e-9);
        assert!(matches!(
            sample_along_ray(5.0, 5.0, 4),
            Err(GeometryError::InvalidBounds { .. })
        ));
        assert!(matches!(
            sample_along_ray(0.0, 5.0, 1),
            Err(GeometryError::TooFewSamples(1))
        ));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let j = sample_along_ray_jittered(0.0, 10.0, 5, &mut rng).unwrap();
        assert!(j.windows(2).all(|w| w[0] < w[1]) && j[0] >= 0.0 && j[4] <= 10.0);
    }

    fn grid() -> (VoxelGridSpec, Vec<f64>) {
        let spec = VoxelGridSpec {
            origin: [-2.0, -1.0, 0.0],
            cell: [1.0, 0.5, 2.0],
            nx: 4,
            ny: 3,
            nz: 2,
        };
        let vals = crate::numerics::trunc_normal::<f64>(5, "grid", spec.cells() * 3, 1.0);
        (spec, vals)
    }

    #[test]
    fn trilinear_lattice_and_midpoint() {
        let (spec, vals) = grid();
        let c = spec.cell_center(1, 2, 1);
        let r = spec.row(1, 2, 1);
        assert_eq!(
            trilinear_sample(&vals, 3, &spec, c),
            vals[r * 3..r * 3 + 3].to_vec()
        );
        let (a, b) = (spec.cell_center(1, 1, 0), spec.cell_center(2, 1, 0));
        let m = scale(add(a, b), 0.5);
        let got = trilinear_sample(&vals, 3, &spec, m);
        let (ra, rb) = (spec.row(1, 1, 0), spec.row(2, 1, 0));
        for ch in 0..3 {
            assert!((got[ch] - 0.5 * (vals[ra * 3 + ch] + vals[rb * 3 + ch])).abs() < 1e-12);
        }
        assert_eq!(
            trilinear_sample(&vals, 3, &spec, [100.0, 0.0, 0.0]),
            vec![0.0; 3]
        );
    }

    #[test]
    fn trilinear_matches_corner_expansion() {
        let (spec, vals) = grid();
        let p = [-0.73, -0.12, 1.9];
        // independent 8-corner expansion
        let l: Vec3 = [
            (p[0] + 2.0) / 1.0 - 0.5,
            (p[1] + 1.0) / 0.5 - 0.5,
            p[2] / 2.0 - 0.5,
        ];
        let mut expect = [0.0; 3];
        for dx in 0..2 {
            for dy in 0..2 {
                for dz in 0..2 {
                    let (ix, iy, iz) = (
                        l[0].floor() as usize + dx,
                        l[1].floor() as usize + dy,
                        l[2].floor() as usize + dz,
                    );
                    let w = (1.0 - (l[0] - ix as f64).abs())
                        * (1.0 - (l[1] - iy as f64).abs())
                        * (1.0 - (l[2] - iz as f64).abs());
                    let r = (ix * 3 + iy) * 2 + iz;
                    for ch in 0..3 {
                        expect[ch] += w * vals[r * 3 + ch];
                    }
                }
            }
        }
        let got = trilinear_sample(&vals, 3, &spec, p);
        for ch in 0..3 {
            assert!((got[ch] - expect[ch]).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_examples() {
        let cam = front_cam();
        let p = cam.project([11.0, 0.0, 1.6]);
        assert!(p.visible && (p.u - cam.cx).abs() < 1e-9 && (p.v - cam.cy).abs() < 1e-9);
        assert!(!cam.project([-5.0, 0.0, 1.6]).visible);
        // off-axis: camera-frame point (x=1, y=-0.5, z=4) -> ego (1+4, -1, 1.6+0.5)
        let p = cam.project([5.0, -1.0, 2.1]);
        assert!((p.u - (32.0 * 1.0 / 4.0 + 32.0)).abs() < 1e-9);
        assert!((p.v - (32.0 * -0.5 / 4.0 + 16.0)).abs() < 1e-9);
        assert!((p.depth - 4.0).abs() < 1e-12);
    }

    #[test]
    fn camera_rays_and_projection_agree() {
        let cam = CameraModel::with_fov(64, 32, 1.4, [0.5, 0.2, 1.5], 0.3, 0.15);
        let rays = make_camera_rays(&cam, &Pose::identity(), 8).unwrap();
        for (k, r) in rays.iter().enumerate() {
            let (i, j) = (k / 8, k % 8);
            for t in [0.5, 3.0, 40.0] {
                let p = cam.project(r.at(t));
                assert!(
                    (p.u - (j as f64 + 0.5) * 8.0).abs() < 1e-4
                        && (p.v - (i as f64 + 0.5) * 8.0).abs() < 1e-4
                );
            }
        }
    }

    fn pcfg() -> PillarConfig {
        PillarConfig {
            x_min: -4.0,
            y_min: -4.0,
            cell: 1.0,
            nx: 8,
            ny: 8,
            z_min: -1.0,
            z_max: 3.0,
        }
    }

    #[test]
    fn pillarize_examples() {
        let g = pillarize(&[], &pcfg());
        assert!(g.cell_features.iter().all(|f| *f == [0.0; 4]));

        let g = pillarize(&[[1.25, -2.5, 0.5], [40.0, 0.0, 0.0]], &pcfg());
        let nonzero: Vec<usize> = (0..64).filter(|&c| g.counts[c] > 0).collect();
        assert_eq!(nonzero, vec![5 * 8 + 1]);
        assert_eq!(g.assignments, vec![(0, 41)]);

        // two points in one cell: brute-force elementwise max of their raw features
        let pts = [[0.2, 0.9, 2.0], [0.7, 0.1, -0.5]];
        let g = pillarize(&pts, &pcfg());
        let cell = 4 * 8 + 4;
        let raw = |p: Vec3| [p[0] - 4.0 + 4.0 - 0.5, p[1] - 0.5, (p[2] - 1.0) / 2.0, 1.0];
        let (a, b) = (raw(pts[0]), raw(pts[1]));
        for k in 0..4 {
            assert!((g.cell_features[cell][k] - a[k].max(b[k])).abs() < 1e-12);
        }
        assert_eq!(g.counts[cell], 2);
    }

    #[test]
    fn aabb_slab() {
        let b = Aabb {
            min: [-1.0, -1.0, -1.0],
            max: [1.0, 1.0, 1.0],
        };
        assert_eq!(
            b.intersect([-5.0, 0.0, 0.0], [1.0, 0.0, 0.0]),
            Some((4.0, 6.0))
        );
        assert_eq!(
            b.intersect([0.0, 0.0, 0.0], [0.0, 0.0, 1.0]),
            Some((0.0, 1.0))
        );
        assert_eq!(b.intersect([-5.0, 3.0, 0.0], [1.0, 0.0, 0.0]), None);
    }

    proptest! {
        #[test]
        fn spherical_round_trip(d in 0.01f64..100.0, theta in 0.001f64..(PI - 0.001), phi in (0.001 - PI)..(PI - 0.001)) {
            let p = spherical_to_cartesian(d, theta, phi);
            let (d2, t2, p2) = cartesian_to_spherical(p).unwrap();
            prop_assert!((d - d2).abs() < 1e-6 && (theta - t2).abs() < 1e-6 && (phi - p2).abs() < 1e-6);
        }

        #[test]
        fn trilinear_is_linear(a in -2.0f64..2.0, b in -2.0f64..2.0, x in -3.0f64..3.0, y in -2.0f64..2.0, z in -1.0f64..5.0) {
            let (spec, g1) = grid();
            let g2 = crate::numerics::trunc_normal::<f64>(6, "grid", g1.len(), 1.0);
            let mix: Vec<f64> = g1.iter().zip(&g2).map(|(u, v)| a * u + b * v).collect();
            let p = [x, y, z];
            let lhs = trilinear_sample(&mix, 3, &spec, p);
            let (s1, s2) = (trilinear_sample(&g1, 3, &spec, p), trilinear_sample(&g2, 3, &spec, p));
            for c in 0..3 {
                prop_assert!((lhs[c] - (a * s1[c] + b * s2[c])).abs() < 1e-9);
            }
        }
    }
}
