//! Chamfer distance, PSNR, the copy-last-frame forecasting baseline, and
//! metric reports.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Vec3;
use crate::synthworld::{FrameObservation, Image};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("{0} point cloud is empty after ROI filtering")]
    EmptyCloud(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid ROI: min must be below max on every axis")]
    InvalidRoi,
}

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoiBox {
    pub min: Vec3,
    pub max: Vec3,
}

impl RoiBox {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self, MetricError> {
        if (0..3).any(|a| !(min[a] < max[a])) {
            return Err(MetricError::InvalidRoi);
        }
        Ok(RoiBox { min, max })
    }

    /// ±70 m in x and y, ±4.5 m in z.
    pub fn long_range() -> Self {
        RoiBox {
            min: [-70.0, -70.0, -4.5],
            max: [70.0, 70.0, 4.5],
        }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn filter(&self, pts: &[Vec3]) -> Vec<Vec3> {
        pts.iter().filter(|p| self.contains(p)).copied().collect()
    }
}

fn dist(a: &Vec3, b: &Vec3) -> f64 {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Uniform-grid spatial hash for exact nearest-neighbour queries.
pub struct SpatialHash<'a> {
    points: &'a [Vec3],
    cell: f64,
    buckets: HashMap<[i64; 3], Vec<usize>>,
    lo: [i64; 3],
    hi: [i64; 3],
}

impl<'a> SpatialHash<'a> {
    pub fn new(points: &'a [Vec3]) -> Self {
        let mut mn = [f64::MAX; 3];
        let mut mx = [f64::MIN; 3];
        for p in points {
            for a in 0..3 {
                mn[a] = mn[a].min(p[a]);
                mx[a] = mx[a].max(p[a]);
            }
        }
        let vol: f64 = (0..3).map(|a| (mx[a] - mn[a]).max(1e-3)).product();
        // about two points per occupied cell for surface-like clouds
        let cell = (vol / points.len().max(1) as f64).cbrt().max(1e-3) * 1.5;
        let mut buckets: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        let mut lo = [i64::MAX; 3];
        let mut hi = [i64::MIN; 3];
        for (i, p) in points.iter().enumerate() {
            let k = Self::key(cell, p);
            for a in 0..3 {
                lo[a] = lo[a].min(k[a]);
                hi[a] = hi[a].max(k[a]);
            }
            buckets.entry(k).or_default().push(i);
        }
        SpatialHash {
            points,
            cell,
            buckets,
            lo,
            hi,
        }
    }

    fn key(cell: f64, p: &Vec3) -> [i64; 3] {
        [
            (p[0] / cell).floor() as i64,
            (p[1] / cell).floor() as i64,
            (p[2] / cell).floor() as i64,
        ]
    }

    /// Distance from `q` to the nearest stored point (`None` if empty).
    pub fn nearest(&self, q: &Vec3) -> Option<f64> {
        if self.points.is_empty() {
            return None;
        }
        let k = Self::key(self.cell, q);
        let mut best = f64::INFINITY;
        // rings closer than the occupied key box are empty; rings beyond its far side too
        let r0 = (0..3)
            .map(|a| (self.lo[a] - k[a]).max(k[a] - self.hi[a]).max(0))
            .max()
            .unwrap_or(0);
        let r1 = (0..3)
            .map(|a| (k[a] - self.lo[a]).abs().max((self.hi[a] - k[a]).abs()))
            .max()
            .unwrap_or(0);
        for ring in r0..=r1 {
            // points in cells at Chebyshev offset >= ring are at least (ring - 1) cells away
            if ring > 1 && best < (ring - 1) as f64 * self.cell * (1.0 - 1e-9) {
                break;
            }
            let range = |a: usize| (-ring).max(self.lo[a] - k[a])..=ring.min(self.hi[a] - k[a]);
            for dx in range(0) {
                for dy in range(1) {
                    for dz in range(2) {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        if let Some(b) = self.buckets.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                            for &i in b {
                                best = best.min(dist(q, &self.points[i]));
                            }
                        }
                    }
                }
            }
        }
        Some(best)
    }
}

fn directed_mean(from: &[Vec3], to: &[Vec3]) -> f64 {
    let index = SpatialHash::new(to);
    let total: f64 = from.iter().map(|p| index.nearest(p).unwrap()).sum();
    total / from.len() as f64
}

/// O(n·m) reference nearest-neighbour scan.
pub fn directed_mean_brute(from: &[Vec3], to: &[Vec3]) -> f64 {
    let total: f64 = from
        .iter()
        .map(|p| to.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min))
        .sum();
    total / from.len() as f64
}

/// Sum of the two directed mean nearest-neighbour distances, after keeping
/// only points inside `roi` in both clouds.
pub fn chamfer(pred: &[Vec3], gt: &[Vec3], roi: &RoiBox) -> Result<f64, MetricError> {
    let p = roi.filter(pred);
    let q = roi.filter(gt);
    if p.is_empty() {
        return Err(MetricError::EmptyCloud("predicted"));
    }
    if q.is_empty() {
        return Err(MetricError::EmptyCloud("ground-truth"));
    }
    Ok(directed_mean(&p, &q) + directed_mean(&q, &p))
}

pub fn chamfer_brute(pred: &[Vec3], gt: &[Vec3], roi: &RoiBox) -> Result<f64, MetricError> {
    let p = roi.filter(pred);
    let q = roi.filter(gt);
    if p.is_empty() || q.is_empty() {
        return Err(MetricError::EmptyCloud(if p.is_empty() {
            "predicted"
        } else {
            "ground-truth"
        }));
    }
    Ok(directed_mean_brute(&p, &q) + directed_mean_brute(&q, &p))
}

pub fn mse(pred: &Image, gt: &Image) -> Result<f64, MetricError> {
    if pred.height != gt.height || pred.width != gt.width || pred.data.len() != gt.data.len() {
        return Err(MetricError::Shape(format!(
            "{}x{} vs {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    let s: f64 = pred
        .data
        .iter()
        .zip(&gt.data)
        .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
        .sum();
    Ok(s / pred.data.len() as f64)
}

/// `10·log10(1 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(pred: &Image, gt: &Image) -> Result<f64, MetricError> {
    let m = mse(pred, gt)?;
    if m <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

pub fn mean_abs_error(pred: &Image, gt: &Image) -> Result<f64, MetricError> {
    mse(pred, gt)?;
    let s: f64 = pred
        .data
        .iter()
        .zip(&gt.data)
        .map(|(a, b)| (*a as f64 - *b as f64).abs())
        .sum();
    Ok(s / pred.data.len() as f64)
}

/// Predicted observation at one horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub images: Vec<Image>,
    /// Ego-frame point cloud.
    pub points: Vec<Vec3>,
}

/// Repeat the last condition frame for `horizon` steps.
pub fn copy_last_baseline(condition: &[FrameObservation], horizon: usize) -> Vec<Prediction> {
    let Some(last) = condition.last() else {
        return Vec::new();
    };
    let p = Prediction {
        images: last.images.clone(),
        points: last.lidar_f64(),
    };
    vec![p; horizon]
}

/// Aggregated metrics at one forecast horizon.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub horizon: usize,
    pub chamfer: f64,
    pub chamfer_baseline: f64,
    pub psnr: f64,
    pub psnr_baseline: f64,
    pub image_l1: f64,
    pub image_l1_baseline: f64,
    /// Rollouts contributing to the averages.
    pub samples: usize,
    /// Rollouts skipped because a cloud was empty after ROI filtering.
    pub missing: usize,
}

/// Running sums for one horizon.
#[derive(Clone, Debug, Default)]
pub struct HorizonAccumulator {
    pub horizon: usize,
    sums: [f64; 6],
    samples: usize,
    missing: usize,
}

impl HorizonAccumulator {
    pub fn new(horizon: usize) -> Self {
        HorizonAccumulator {
            horizon,
            ..Default::default()
        }
    }

    /// Score one predicted frame and its baseline against the ground truth.
    pub fn add(
        &mut self,
        pred: &Prediction,
        baseline: &Prediction,
        gt: &FrameObservation,
        roi: &RoiBox,
    ) -> Result<(), MetricError> {
        let gt_pts = gt.lidar_f64();
        let (c, cb) = match (
            chamfer(&pred.points, &gt_pts, roi),
            chamfer(&baseline.points, &gt_pts, roi),
        ) {
            (Ok(c), Ok(cb)) => (c, cb),
            (Err(MetricError::EmptyCloud(_)), _) | (_, Err(MetricError::EmptyCloud(_))) => {
                self.missing += 1;
                return Ok(());
            }
            (Err(e), _) | (_, Err(e)) => return Err(e),
        };
        let n = gt.images.len() as f64;
        let mut vals = [c, cb, 0.0, 0.0, 0.0, 0.0];
        for (k, g) in gt.images.iter().enumerate() {
            vals[2] += psnr(&pred.images[k], g)? / n;
            vals[3] += psnr(&baseline.images[k], g)? / n;
            vals[4] += mean_abs_error(&pred.images[k], g)? / n;
            vals[5] += mean_abs_error(&baseline.images[k], g)? / n;
        }
        for (s, v) in self.sums.iter_mut().zip(vals) {
            *s += v;
        }
        self.samples += 1;
        Ok(())
    }

    pub fn finish(&self) -> HorizonMetrics {
        let n = self.samples.max(1) as f64;
        HorizonMetrics {
            horizon: self.horizon,
            chamfer: self.sums[0] / n,
            chamfer_baseline: self.sums[1] / n,
            psnr: self.sums[2] / n,
            psnr_baseline: self.sums[3] / n,
            image_l1: self.sums[4] / n,
            image_l1_baseline: self.sums[5] / n,
            samples: self.samples,
            missing: self.missing,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub roi: Option<RoiBox>,
    pub horizons: Vec<HorizonMetrics>,
    /// Reconstruction quality of the tokenizer on its training frames.
    pub tokenizer_psnr: Option<f64>,
    pub tokenizer_chamfer: Option<f64>,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metric report serializes")
    }

    pub fn horizon(&self, h: usize) -> Option<&HorizonMetrics> {
        self.horizons.iter().find(|m| m.horizon == h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn cloud(seed: u64, n: usize, scale: f64) -> Vec<Vec3> {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                [
                    r.gen_range(-scale..scale),
                    r.gen_range(-scale..scale),
                    r.gen_range(-1.0..1.0),
                ]
            })
            .collect()
    }

    #[test]
    fn chamfer_examples() {
        let roi = RoiBox::long_range();
        let p = cloud(1, 50, 10.0);
        assert_eq!(chamfer(&p, &p, &roi).unwrap(), 0.0);
        assert_eq!(chamfer(&[[0.0; 3]], &[[1.0, 0.0, 0.0]], &roi).unwrap(), 2.0);
        // the far point is excluded, leaving identical clouds
        let mut q = p.clone();
        q.push([100.0, 0.0, 0.0]);
        assert_eq!(chamfer(&p, &q, &roi).unwrap(), 0.0);
        assert_eq!(
            chamfer(&[[100.0, 0.0, 0.0]], &p, &roi),
            Err(MetricError::EmptyCloud("predicted"))
        );
        assert_eq!(
            chamfer(&p, &[], &roi),
            Err(MetricError::EmptyCloud("ground-truth"))
        );
    }

    #[test]
    fn chamfer_symmetric_and_translation_invariant() {
        let roi = RoiBox::long_range();
        let (p, q) = (cloud(2, 300, 20.0), cloud(3, 200, 20.0));
        assert_eq!(
            chamfer(&p, &q, &roi).unwrap(),
            chamfer(&q, &p, &roi).unwrap()
        );
        let shift = |c: &[Vec3]| {
            c.iter()
                .map(|v| [v[0] + 3.25, v[1] - 1.5, v[2] + 0.5])
                .collect::<Vec<_>>()
        };
        let a = chamfer(&p, &q, &roi).unwrap();
        let b = chamfer(&shift(&p), &shift(&q), &roi).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn spatial_hash_equals_brute_force() {
        let roi = RoiBox::long_range();
        for seed in 0..8 {
            let n = 100 + 250 * seed as usize;
            let (p, q) = (
                cloud(seed, n.min(2000), 30.0),
                cloud(seed + 100, 2000 - n.min(1900), 5.0),
            );
            assert_eq!(
                chamfer(&p, &q, &roi).unwrap(),
                chamfer_brute(&p, &q, &roi).unwrap()
            );
        }
        // degenerate layouts: duplicates and a single plane
        let flat: Vec<Vec3> = (0..400)
            .map(|i| [(i % 20) as f64, (i / 20) as f64, 0.0])
            .collect();
        let dup = vec![[1.0, 1.0, 0.0]; 30];
        assert_eq!(
            chamfer(&flat, &dup, &roi).unwrap(),
            chamfer_brute(&flat, &dup, &roi).unwrap()
        );
    }

    fn img(vals: Vec<f32>, h: usize, w: usize) -> Image {
        Image {
            height: h,
            width: w,
            data: vals,
        }
    }

    #[test]
    fn psnr_examples() {
        let a = img((0..48).map(|i| 0.2 + 0.01 * i as f32).collect(), 4, 4);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = img(a.data.iter().map(|v| v + 0.1).collect(), 4, 4);
        assert!((psnr(&b, &a).unwrap() - 20.0).abs() < 1e-4);
        let c = img(vec![0.0; 12], 2, 2);
        assert!(matches!(psnr(&a, &c), Err(MetricError::Shape(_))));
        // two-pass oracle
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let x = img((0..300).map(|_| r.gen::<f32>()).collect(), 10, 10);
        let y = img((0..300).map(|_| r.gen::<f32>()).collect(), 10, 10);
        let diffs: Vec<f64> = x
            .data
            .iter()
            .zip(&y.data)
            .map(|(a, b)| *a as f64 - *b as f64)
            .collect();
        let m = diffs.iter().map(|d| d * d).sum::<f64>() / 300.0;
        assert!((psnr(&x, &y).unwrap() - 10.0 * (1.0 / m).log10()).abs() < 1e-9);
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let base = img((0..768).map(|_| r.gen_range(0.2f32..0.8)).collect(), 16, 16);
        let mut wins = 0;
        for _ in 0..100 {
            let noisy = |amp: f32, r: &mut rand_chacha::ChaCha8Rng| {
                img(
                    base.data
                        .iter()
                        .map(|v| v + amp * r.gen_range(-1.0f32..1.0))
                        .collect(),
                    16,
                    16,
                )
            };
            let (a, b) = (noisy(0.02, &mut r), noisy(0.05, &mut r));
            if psnr(&a, &base).unwrap() > psnr(&b, &base).unwrap() {
                wins += 1;
            }
        }
        assert_eq!(wins, 100);
    }

    fn frame(points: Vec<[f32; 3]>) -> FrameObservation {
        FrameObservation {
            images: vec![img(vec![0.5; 12], 2, 2)],
            lidar: points,
            pose: crate::geometry::Pose::identity(),
            action: [0.0; 3],
        }
    }

    #[test]
    fn baseline_examples() {
        let f = frame(vec![[1.0, 2.0, 0.0]]);
        assert!(copy_last_baseline(&[f.clone()], 0).is_empty());
        let b = copy_last_baseline(&[f.clone()], 3);
        assert_eq!(b.len(), 3);
        // static scene: zero Chamfer at every horizon
        for p in &b {
            assert_eq!(
                chamfer(&p.points, &f.lidar_f64(), &RoiBox::long_range()).unwrap(),
                0.0
            );
        }
    }

    #[test]
    fn baseline_against_moving_box() {
        // face of a box sampled on a grid, moving 2.5 m along x (5 m/s for 0.5 s)
        let face: Vec<[f32; 3]> = (0..10)
            .flat_map(|i| (0..5).map(move |k| [10.0, -1.0 + 0.2 * i as f32, 0.2 + 0.3 * k as f32]))
            .collect();
        let moved: Vec<[f32; 3]> = face.iter().map(|p| [p[0] + 2.5, p[1], p[2]]).collect();
        let b = copy_last_baseline(&[frame(face)], 1);
        let gt = frame(moved).lidar_f64();
        // every point's nearest neighbour is its own translate: 2.5 m each way
        let c = chamfer(&b[0].points, &gt, &RoiBox::long_range()).unwrap();
        assert!((c - 5.0).abs() < 1e-6);
        assert_eq!(
            c,
            chamfer_brute(&b[0].points, &gt, &RoiBox::long_range()).unwrap()
        );
    }

    #[test]
    fn accumulator_counts_missing() {
        let roi = RoiBox::long_range();
        let gt = frame(vec![[1.0, 0.0, 0.0]]);
        let pred = Prediction {
            images: gt.images.clone(),
            points: vec![],
        };
        let mut acc = HorizonAccumulator::new(1);
        acc.add(&pred, &pred, &gt, &roi).unwrap();
        let p2 = Prediction {
            images: gt.images.clone(),
            points: vec![[0.0; 3]],
        };
        acc.add(&p2, &p2, &gt, &roi).unwrap();
        let m = acc.finish();
        assert_eq!((m.samples, m.missing), (1, 1));
        assert_eq!(m.chamfer, 2.0);
        assert_eq!(m.psnr, PSNR_CAP);
        let r = MetricReport {
            roi: Some(roi),
            horizons: vec![m],
            ..Default::default()
        };
        let back: MetricReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }

    proptest! {
        #[test]
        fn hash_matches_scan(seed in 0u64..1000, n in 1usize..200, m in 1usize..200) {
            let (p, q) = (cloud(seed, n, 8.0), cloud(seed ^ 0xabc, m, 8.0));
            prop_assert_eq!(directed_mean(&p, &q), directed_mean_brute(&p, &q));
        }
    }
}
