//! On-disk dataset: a directory with `manifest.json` and one little-endian
//! binary file per sequence, each ending in a CRC32 of everything before it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FrameObservation, Image, SceneConfig, SceneSequence, SynthError};
use crate::geometry::{CameraModel, LidarSpec, Pose};

pub const DATASET_MAGIC: [u8; 4] = *b"BWDS";
pub const DATASET_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceEntry {
    pub file: String,
    pub frames: usize,
    pub config: SceneConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub cameras: Vec<CameraModel>,
    pub lidar: LidarSpec,
    pub total_frames: usize,
    pub sequences: Vec<SequenceEntry>,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f32(buf: &mut Vec<u8>, v: f32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Serialize one sequence to the binary layout.
pub fn encode_sequence(seq: &SceneSequence) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&DATASET_MAGIC);
    put_u32(&mut buf, DATASET_VERSION);
    put_u32(&mut buf, seq.frames.len() as u32);
    for f in &seq.frames {
        for v in f.pose.to_array() {
            put_f32(&mut buf, v as f32);
        }
        for v in f.action {
            put_f32(&mut buf, v as f32);
        }
        for img in &f.images {
            put_u32(&mut buf, img.height as u32);
            put_u32(&mut buf, img.width as u32);
            for &v in &img.data {
                put_f32(&mut buf, v);
            }
        }
        put_u32(&mut buf, f.lidar.len() as u32);
        for p in &f.lidar {
            for &v in p {
                put_f32(&mut buf, v);
            }
        }
    }
    let crc = crc32fast::hash(&buf);
    put_u32(&mut buf, crc);
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8], SynthError> {
        if self.bytes.len() - self.pos < n {
            return Err(SynthError::Truncated(format!(
                "need {n} bytes for {what} at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, SynthError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>, SynthError> {
        let raw = self.take(
            n.checked_mul(4)
                .ok_or_else(|| SynthError::Truncated(what.into()))?,
            what,
        )?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Parse one sequence file. `cameras` is the rig size and `expected_frames`
/// the frame count recorded in the manifest.
pub fn decode_sequence(
    bytes: &[u8],
    cameras: usize,
    expected_frames: usize,
    config: SceneConfig,
) -> Result<SceneSequence, SynthError> {
    if bytes.len() < 4 {
        return Err(SynthError::Truncated("file shorter than magic".into()));
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != DATASET_MAGIC {
        return Err(SynthError::BadMagic(magic));
    }
    if bytes.len() < 16 {
        return Err(SynthError::Truncated("file shorter than header".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != DATASET_VERSION {
        return Err(SynthError::VersionMismatch {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(SynthError::Checksum { stored, computed });
    }
    let mut r = Reader {
        bytes: payload,
        pos: 8,
    };
    let count = r.u32("frame count")? as usize;
    if count != expected_frames {
        return Err(SynthError::Truncated(format!(
            "manifest lists {expected_frames} frames, payload has {count}"
        )));
    }
    let mut frames = Vec::with_capacity(count);
    for _ in 0..count {
        let pose_raw = r.f32s(12, "pose")?;
        let mut pose = [0.0f64; 12];
        for (d, s) in pose.iter_mut().zip(&pose_raw) {
            *d = *s as f64;
        }
        let a = r.f32s(3, "action")?;
        let mut images = Vec::with_capacity(cameras);
        for _ in 0..cameras {
            let height = r.u32("image height")? as usize;
            let width = r.u32("image width")? as usize;
            let data = r.f32s(height.saturating_mul(width).saturating_mul(3), "image")?;
            images.push(Image {
                height,
                width,
                data,
            });
        }
        let n = r.u32("point count")? as usize;
        let pts = r.f32s(n.saturating_mul(3), "points")?;
        let lidar = pts.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        frames.push(FrameObservation {
            images,
            lidar,
            pose: Pose::from_array(&pose),
            action: [a[0] as f64, a[1] as f64, a[2] as f64],
        });
    }
    if r.pos != payload.len() {
        return Err(SynthError::Truncated(format!(
            "{} trailing bytes after last frame",
            payload.len() - r.pos
        )));
    }
    Ok(SceneSequence { config, frames })
}

pub fn write_sequence_file(seq: &SceneSequence, path: &Path) -> Result<(), SynthError> {
    fs::write(path, encode_sequence(seq))?;
    Ok(())
}

pub fn read_sequence_file(
    path: &Path,
    cameras: usize,
    frames: usize,
    config: SceneConfig,
) -> Result<SceneSequence, SynthError> {
    decode_sequence(&fs::read(path)?, cameras, frames, config)
}

/// Write `sequences` (which must share one sensor rig) into directory `dir`.
pub fn write_dataset(
    sequences: &[SceneSequence],
    dir: &Path,
) -> Result<DatasetManifest, SynthError> {
    let first = sequences
        .first()
        .ok_or_else(|| SynthError::Manifest("no sequences to write".into()))?;
    for s in sequences {
        if s.config.cameras != first.config.cameras || s.config.lidar != first.config.lidar {
            return Err(SynthError::Manifest(
                "sequences use different sensor rigs".into(),
            ));
        }
        if s.frames.is_empty() {
            return Err(SynthError::ZeroFrames);
        }
    }
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(sequences.len());
    for (i, s) in sequences.iter().enumerate() {
        let file = format!("seq_{i:04}.bin");
        write_sequence_file(s, &dir.join(&file))?;
        entries.push(SequenceEntry {
            file,
            frames: s.frames.len(),
            config: s.config.clone(),
        });
    }
    let manifest = DatasetManifest {
        version: DATASET_VERSION,
        cameras: first.config.cameras.clone(),
        lidar: first.config.lidar.clone(),
        total_frames: entries.iter().map(|e| e.frames).sum(),
        sequences: entries,
    };
    let text =
        serde_json::to_string_pretty(&manifest).map_err(|e| SynthError::Manifest(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest, SynthError> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let m: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| SynthError::Manifest(e.to_string()))?;
    if m.version != DATASET_VERSION {
        return Err(SynthError::VersionMismatch {
            found: m.version,
            expected: DATASET_VERSION,
        });
    }
    if m.total_frames != m.sequences.iter().map(|e| e.frames).sum::<usize>() {
        return Err(SynthError::Manifest(
            "total frame count disagrees with sequence entries".into(),
        ));
    }
    Ok(m)
}

pub fn read_dataset(dir: &Path) -> Result<Vec<SceneSequence>, SynthError> {
    let m = read_manifest(dir)?;
    m.sequences
        .iter()
        .map(|e| {
            read_sequence_file(
                &dir.join(&e.file),
                m.cameras.len(),
                e.frames,
                e.config.clone(),
            )
        })
        .collect()
}
