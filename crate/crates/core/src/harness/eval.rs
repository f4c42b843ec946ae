use std::path::{Path, PathBuf};

use super::{HarnessError, RunConfig};
use crate::evalmetrics::{
    chamfer, copy_last_baseline, psnr, HorizonAccumulator, MetricError, MetricReport, Prediction,
    RoiBox,
};
use crate::synthworld::{FrameObservation, Image, SceneSequence};
use crate::tokenizer::export::{comparison_grid, write_ply, write_ppm};
use crate::tokenizer::{BevToken, Tokenizer};
use crate::worldmodel::{incoming_actions, rollout, NormalizationStats, RolloutOutput, WorldModel};

/// A rollout: condition frames `start, start+stride, …` followed by the
/// frames to forecast at the same spacing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RolloutWindow {
    pub sequence: usize,
    pub start: usize,
}

/// `per_sequence` windows per sequence, spread evenly over the valid starts.
pub fn rollout_windows(lengths: &[usize], span: usize, per_sequence: usize) -> Vec<RolloutWindow> {
    let mut out = Vec::new();
    for (sequence, &len) in lengths.iter().enumerate() {
        if len < span || per_sequence == 0 {
            continue;
        }
        let last = len - span;
        let n = per_sequence.min(last + 1);
        let mut starts: Vec<usize> = (0..n)
            .map(|k| if n == 1 { 0 } else { k * last / (n - 1) })
            .collect();
        starts.dedup();
        out.extend(
            starts
                .into_iter()
                .map(|start| RolloutWindow { sequence, start }),
        );
    }
    out
}

/// Write per-camera PPMs and a PLY per horizon (`cam{i}_t+{k}.ppm`,
/// `lidar_t+{k}.ply`), plus `compare_t+{k}.ppm` (ground truth above
/// prediction) when ground truth is given.
pub fn export_rollout(
    out: &RolloutOutput,
    gt: Option<&[FrameObservation]>,
    dir: &Path,
) -> Result<Vec<PathBuf>, HarnessError> {
    if out.frames.is_empty() {
        return Err(HarnessError::Config(
            "nothing to export: rollout is empty".into(),
        ));
    }
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let mut files = Vec::new();
    for (k, f) in out.frames.iter().enumerate() {
        let h = k + 1;
        for (i, img) in f.images.iter().enumerate() {
            let p = dir.join(format!("cam{i}_t+{h}.ppm"));
            write_ppm(&p, img)?;
            files.push(p);
        }
        let p = dir.join(format!("lidar_t+{h}.ply"));
        write_ply(&p, &f.points)?;
        files.push(p);
        if let Some(g) = gt.and_then(|g| g.get(k)) {
            let p = dir.join(format!("compare_t+{h}.ppm"));
            write_ppm(&p, &comparison_grid(&g.images, &f.images)?)?;
            files.push(p);
        }
    }
    Ok(files)
}

fn to_prediction(images: &[Image], points: &[[f32; 3]]) -> Prediction {
    Prediction {
        images: images.to_vec(),
        points: points
            .iter()
            .map(|p| [p[0] as f64, p[1] as f64, p[2] as f64])
            .collect(),
    }
}

pub fn roi_for(cfg: &RunConfig) -> RoiBox {
    cfg.eval.roi.unwrap_or_else(|| {
        let b = cfg.tokenizer.voxel_spec().bounds();
        RoiBox {
            min: b.min,
            max: b.max,
        }
    })
}

/// Chamfer between the ground-truth scan and the depths `token` renders
/// along that scan's own rays; `None` when either cloud leaves the ROI empty.
pub fn scan_chamfer(
    tok: &Tokenizer,
    token: &BevToken,
    truth: &FrameObservation,
    roi: &RoiBox,
) -> Result<Option<f64>, HarnessError> {
    let gt = truth.lidar_f64();
    let rays = tok.target_rays(&gt)?;
    let pred = tok.depth_points(token, &rays)?;
    match chamfer(&to_prediction(&[], &pred).points, &gt, roi) {
        Ok(v) => Ok(Some(v)),
        Err(MetricError::EmptyCloud(_)) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Mean PSNR and Chamfer of encode→decode on the first frame of every sequence.
pub fn reconstruction_quality(
    tok: &Tokenizer,
    sequences: &[SceneSequence],
    roi: &RoiBox,
) -> Result<(f64, f64), HarnessError> {
    let (mut p, mut c, mut n, mut nc) = (0.0, 0.0, 0usize, 0usize);
    for s in sequences {
        let f = &s.frames[0];
        let (token, out) = tok.reconstruct(f, &[])?;
        for (a, b) in out.images.iter().zip(&f.images) {
            p += psnr(a, b)?;
            n += 1;
        }
        if let Some(v) = scan_chamfer(tok, &token, f, roi)? {
            c += v;
            nc += 1;
        }
    }
    Ok((
        p / n.max(1) as f64,
        if nc == 0 { f64::NAN } else { c / nc as f64 },
    ))
}

/// Roll the model out over held-in windows and score it against the
/// copy-last baseline at every configured horizon. Rollout `k <
/// export_rollouts` is also written under `export_dir/rollout_{k}`.
pub fn evaluate(
    tok: &Tokenizer,
    model: &WorldModel,
    stats: &NormalizationStats,
    sequences: &[SceneSequence],
    cfg: &RunConfig,
    export_dir: Option<&Path>,
) -> Result<(MetricReport, Vec<PathBuf>), HarnessError> {
    let stage = cfg.eval_stage()?;
    let (p, stride) = (stage.cond_frames, stage.stride);
    let future = cfg.rollout_future();
    let span = (p + future - 1) * stride + 1;
    let lengths: Vec<usize> = sequences.iter().map(|s| s.frames.len()).collect();
    let windows = rollout_windows(&lengths, span, cfg.eval.rollouts_per_sequence);
    if windows.is_empty() {
        return Err(HarnessError::Config(format!(
            "no sequence is long enough for a {span}-frame rollout"
        )));
    }
    let roi = roi_for(cfg);
    let mut acc: Vec<HorizonAccumulator> = cfg
        .eval
        .horizons
        .iter()
        .map(|&h| HorizonAccumulator::new(h))
        .collect();
    let mut files = Vec::new();
    for (k, w) in windows.iter().enumerate() {
        let seq = &sequences[w.sequence];
        let idx: Vec<usize> = (0..p + future).map(|i| w.start + i * stride).collect();
        let past: Vec<FrameObservation> = idx[..p].iter().map(|&i| seq.frames[i].clone()).collect();
        let truth: Vec<FrameObservation> =
            idx[p..].iter().map(|&i| seq.frames[i].clone()).collect();
        let actions: Vec<[f64; 3]> = seq.frames.iter().map(|f| f.action).collect();
        let acts = incoming_actions(&actions, w.start, p + future, stride)[1..].to_vec();
        let seed = cfg
            .worldmodel_train
            .seed
            .wrapping_mul(7919)
            .wrapping_add(k as u64);
        let out = rollout(tok, model, stats, &past, &acts, future, seed)?;
        let baseline = copy_last_baseline(&past, future);
        for a in acc.iter_mut() {
            let h = a.horizon;
            // lidar is scored along the true scan's rays; the exported cloud uses the scan pattern
            let rays = tok.target_rays(&truth[h - 1].lidar_f64())?;
            let pts = tok.depth_points(&out.tokens[h - 1], &rays)?;
            a.add(
                &to_prediction(&out.frames[h - 1].images, &pts),
                &baseline[h - 1],
                &truth[h - 1],
                &roi,
            )?;
        }
        if let Some(dir) = export_dir {
            if k < cfg.eval.export_rollouts {
                files.extend(export_rollout(
                    &out,
                    Some(&truth),
                    &dir.join(format!("rollout_{k}")),
                )?);
            }
        }
    }
    let (tp, tc) = reconstruction_quality(tok, sequences, &roi)?;
    let report = MetricReport {
        roi: Some(roi),
        horizons: acc.iter().map(|a| a.finish()).collect(),
        tokenizer_psnr: Some(tp),
        tokenizer_chamfer: tc.is_finite().then_some(tc),
    };
    Ok((report, files))
}
