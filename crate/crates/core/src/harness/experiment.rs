use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::eval::evaluate;
use super::{HarnessError, RunConfig};
use crate::checkpoint::{write_atomic, Checkpoint};
use crate::evalmetrics::MetricReport;
use crate::numerics::{fnv1a, Tensor};
use crate::synthworld::{
    generate_scene, read_dataset, write_dataset, DatasetManifest, SceneSequence,
};
use crate::tokenizer::{train_tokenizer, IterationLog, Tokenizer};
use crate::worldmodel::{
    train_stage, NormalizationStats, StageLog, TokenSequence, WorldModel, WorldModelError,
};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".lock";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Data,
    Tokenizer,
    Stats,
    Stage1,
    Stage2,
    Stage3,
    Eval,
}

impl Phase {
    pub const ALL: [Phase; 7] = [
        Phase::Data,
        Phase::Tokenizer,
        Phase::Stats,
        Phase::Stage1,
        Phase::Stage2,
        Phase::Stage3,
        Phase::Eval,
    ];

    pub fn stage(self) -> Option<u8> {
        match self {
            Phase::Stage1 => Some(1),
            Phase::Stage2 => Some(2),
            Phase::Stage3 => Some(3),
            _ => None,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Phase::Data => "gen-data",
            Phase::Tokenizer => "train-tokenizer",
            Phase::Stats => "normalization-stats",
            Phase::Stage1 => "train-wm-stage1",
            Phase::Stage2 => "train-wm-stage2",
            Phase::Stage3 => "train-wm-stage3",
            Phase::Eval => "eval",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub crc32: u32,
    pub bytes: u64,
}

impl FileRecord {
    pub fn of(path: &Path) -> Result<Self, HarnessError> {
        let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
        Ok(FileRecord {
            crc32: crc32fast::hash(&bytes),
            bytes: bytes.len() as u64,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase: Phase,
    pub done: bool,
    pub error: Option<String>,
    /// Outputs of the phase, relative to the experiment directory.
    pub files: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub spec_version: u32,
    pub config: RunConfig,
    /// Content hash of the resolved configuration.
    pub input_hash: String,
    pub phases: Vec<PhaseRecord>,
    /// Every produced file with its CRC32.
    pub files: BTreeMap<String, FileRecord>,
    pub tokenizer_checkpoint: Option<String>,
    pub worldmodel_checkpoint: Option<String>,
    pub metrics: Option<MetricReport>,
    /// Wall-clock seconds per phase; the only field left out of `hash`.
    pub timings: BTreeMap<String, f64>,
    pub hash: String,
}

fn hex(h: u64) -> String {
    format!("{h:016x}")
}

impl ExperimentManifest {
    fn new(config: RunConfig) -> Self {
        let input_hash = hex(fnv1a(config.to_json().as_bytes()));
        let mut m = ExperimentManifest {
            spec_version: super::SPEC_VERSION,
            config,
            input_hash,
            phases: Vec::new(),
            files: BTreeMap::new(),
            tokenizer_checkpoint: None,
            worldmodel_checkpoint: None,
            metrics: None,
            timings: BTreeMap::new(),
            hash: String::new(),
        };
        m.hash = m.content_hash();
        m
    }

    /// Hash of everything but the timings and the hash itself.
    pub fn content_hash(&self) -> String {
        let mut c = self.clone();
        c.timings.clear();
        c.hash.clear();
        hex(fnv1a(
            serde_json::to_string(&c)
                .expect("manifest serializes")
                .as_bytes(),
        ))
    }

    pub fn phase(&self, p: Phase) -> Option<&PhaseRecord> {
        self.phases.iter().find(|r| r.phase == p)
    }

    pub fn is_done(&self, p: Phase) -> bool {
        self.phase(p).map(|r| r.done).unwrap_or(false)
    }

    pub fn load(dir: &Path) -> Result<Self, HarnessError> {
        let p = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&p).map_err(|e| HarnessError::io(&p, e))?;
        serde_json::from_str(&text)
            .map_err(|e| HarnessError::Manifest(format!("{}: {e}", p.display())))
    }

    fn save(&mut self, dir: &Path) -> Result<(), HarnessError> {
        self.hash = self.content_hash();
        let p = dir.join(MANIFEST_FILE);
        write_atomic(
            &p,
            serde_json::to_string_pretty(self)
                .expect("manifest serializes")
                .as_bytes(),
        )
        .map_err(|e| HarnessError::io(&p, e))
    }

    /// Check every listed file against its recorded CRC32.
    pub fn verify(&self, dir: &Path) -> Result<(), HarnessError> {
        for (name, rec) in &self.files {
            let got = FileRecord::of(&dir.join(name))?;
            if &got != rec {
                return Err(HarnessError::Manifest(format!(
                    "{name}: CRC32 {:08x}, manifest says {:08x}",
                    got.crc32, rec.crc32
                )));
            }
        }
        Ok(())
    }

    fn phase_intact(&self, dir: &Path, p: Phase) -> bool {
        let Some(r) = self.phase(p).filter(|r| r.done) else {
            return false;
        };
        r.files.iter().all(
            |f| match (self.files.get(f), FileRecord::of(&dir.join(f))) {
                (Some(want), Ok(got)) => *want == got,
                _ => false,
            },
        )
    }

    /// Forget `p` and every later phase.
    fn truncate_from(&mut self, p: Phase) {
        let dropped: Vec<PhaseRecord> = self
            .phases
            .iter()
            .filter(|r| r.phase >= p)
            .cloned()
            .collect();
        for r in &dropped {
            for f in &r.files {
                self.files.remove(f);
            }
            self.timings.remove(&r.phase.to_string());
        }
        self.phases.retain(|r| r.phase < p);
        if p <= Phase::Tokenizer {
            self.tokenizer_checkpoint = None;
        }
        if p <= Phase::Stage3 {
            self.worldmodel_checkpoint = self
                .phases
                .iter()
                .filter_map(|r| r.phase.stage())
                .max()
                .map(wm_name);
        }
        if p <= Phase::Eval {
            self.metrics = None;
        }
    }
}

/// Single-writer guard on an experiment directory; a lock left by a dead
/// process is taken over.
struct DirLock(PathBuf);

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self, HarnessError> {
        let p = dir.join(LOCK_FILE);
        let me = std::process::id();
        if let Ok(text) = std::fs::read_to_string(&p) {
            if let Ok(pid) = text.trim().parse::<u32>() {
                if Path::new(&format!("/proc/{pid}")).exists() {
                    return Err(HarnessError::Locked(dir.display().to_string()));
                }
            }
        }
        std::fs::write(&p, me.to_string()).map_err(|e| HarnessError::io(&p, e))?;
        Ok(DirLock(p))
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

pub fn wm_name(stage: u8) -> String {
    format!("wm_stage{stage}.bwck")
}

pub const DATA_DIR: &str = "data";
pub const TOKENIZER_FILE: &str = "tokenizer.bwck";
pub const TOKENS_FILE: &str = "tokens.bwck";
pub const METRICS_FILE: &str = "eval/metrics.json";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    write_atomic(
        path,
        serde_json::to_string_pretty(value)
            .expect("log serializes")
            .as_bytes(),
    )
    .map_err(|e| HarnessError::io(path, e))
}

/// Generate `cfg.dataset.sequences` scenes into `dir`.
pub fn gen_data(cfg: &RunConfig, dir: &Path) -> Result<DatasetManifest, HarnessError> {
    let seqs = (0..cfg.dataset.sequences)
        .map(|i| {
            generate_scene(&crate::synthworld::SceneConfig {
                seed: cfg.sequence_seed(i),
                ..cfg.scene.clone()
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(write_dataset(&seqs, dir)?)
}

fn dataset_files(dir: &Path, m: &DatasetManifest) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = m.sequences.iter().map(|e| dir.join(&e.file)).collect();
    v.push(dir.join(crate::synthworld::MANIFEST_FILE));
    v
}

/// Train the tokenizer on every frame of the dataset and save it with its log.
pub fn train_tokenizer_phase(
    cfg: &RunConfig,
    sequences: &[SceneSequence],
    ckpt: &Path,
) -> Result<Vec<PathBuf>, HarnessError> {
    let first = sequences
        .first()
        .ok_or_else(|| HarnessError::Config("dataset has no sequences".into()))?;
    let mut tok = Tokenizer::new(
        cfg.tokenizer.clone(),
        first.config.cameras.clone(),
        first.config.lidar.clone(),
    )?;
    let frames: Vec<_> = sequences
        .iter()
        .flat_map(|s| s.frames.iter().cloned())
        .collect();
    let empty = Checkpoint::new();
    let periodic = (cfg.tokenizer_train.checkpoint_every > 0).then(|| (ckpt.to_path_buf(), &empty));
    let summary = train_tokenizer(&mut tok, &frames, &cfg.tokenizer_train, periodic, |l| {
        log::info!(
            "tokenizer it {:>5} loss {:.4} rgb {:.4} lidar {:.4}",
            l.iteration,
            l.terms.total,
            l.terms.rgb_l1,
            l.terms.lidar_l1
        );
    })?;
    tok.save(ckpt, &Checkpoint::new())?;
    let log_path = ckpt.with_file_name("tokenizer_log.json");
    let log: Vec<&IterationLog> = summary.log.iter().collect();
    write_json(&log_path, &log)?;
    Ok(vec![
        ckpt.to_path_buf(),
        crate::tokenizer::meta_path(ckpt),
        log_path,
    ])
}

/// Encode every frame, compute the per-channel statistics, store them in the
/// tokenizer checkpoint and cache the raw tokens.
pub fn stats_phase(
    sequences: &[SceneSequence],
    tok_path: &Path,
    tokens_path: &Path,
) -> Result<Vec<PathBuf>, HarnessError> {
    let (tok, _) = Tokenizer::load(tok_path)?;
    let mut cache = Checkpoint::new();
    let mut all = Vec::new();
    for (i, s) in sequences.iter().enumerate() {
        let tokens = s
            .frames
            .iter()
            .map(|f| tok.encode(f))
            .collect::<Result<Vec<_>, _>>()?;
        let dim = tokens[0].data.len();
        let data: Vec<f32> = tokens.iter().flat_map(|t| t.data.iter().copied()).collect();
        cache.insert(
            &format!("seq{i:04}"),
            Tensor::from_vec(&[tokens.len(), dim], data),
        );
        all.extend(tokens);
    }
    let stats = NormalizationStats::compute(&all)?;
    let mut extra = Checkpoint::new();
    stats.write_to(&mut extra);
    tok.save(tok_path, &extra)?;
    cache.write(tokens_path)?;
    Ok(vec![
        tok_path.to_path_buf(),
        crate::tokenizer::meta_path(tok_path),
        tokens_path.to_path_buf(),
    ])
}

/// Normalized token sequences with their actions, from the token cache when
/// present and by encoding otherwise.
pub fn token_sequences(
    sequences: &[SceneSequence],
    tok: &Tokenizer,
    stats: &NormalizationStats,
    cache: Option<&Path>,
) -> Result<Vec<TokenSequence>, HarnessError> {
    let cache = match cache.filter(|p| p.exists()) {
        Some(p) => Some(Checkpoint::read(p)?),
        None => None,
    };
    let (c, h, w) = tok.config.token_shape();
    sequences
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let cached = cache
                .as_ref()
                .and_then(|c| c.tensors.get(&format!("seq{i:04}")).cloned());
            let raw: Vec<crate::tokenizer::BevToken> = match cached {
                Some(t) if t.shape() == [s.frames.len(), c * h * w] => t
                    .data()
                    .chunks(c * h * w)
                    .map(|d| crate::tokenizer::BevToken {
                        channels: c,
                        h,
                        w,
                        data: d.to_vec(),
                    })
                    .collect(),
                _ => s
                    .frames
                    .iter()
                    .map(|f| tok.encode(f))
                    .collect::<Result<_, _>>()?,
            };
            let tokens = raw
                .iter()
                .map(|t| stats.normalize(t))
                .collect::<Result<Vec<_>, WorldModelError>>()?;
            Ok(TokenSequence {
                tokens,
                actions: s.frames.iter().map(|f| f.action).collect(),
            })
        })
        .collect()
}

/// Run one curriculum stage, starting from `prev` when given, and save the
/// model with its loss log. The tokenizer is checked to stay bitwise frozen.
pub fn train_wm_phase(
    cfg: &RunConfig,
    stage: u8,
    sequences: &[SceneSequence],
    tok_path: &Path,
    tokens_cache: Option<&Path>,
    prev: Option<&Path>,
    out: &Path,
) -> Result<Vec<PathBuf>, HarnessError> {
    let (tok, ckpt) = Tokenizer::load(tok_path)?;
    let stats = NormalizationStats::read_from(&ckpt)?;
    let frozen = tok.store.clone();
    let data = token_sequences(sequences, &tok, &stats, tokens_cache)?;
    let mut model = match prev {
        Some(p) => WorldModel::load(p)?,
        None => WorldModel::new(cfg.worldmodel.clone(), tok.config.token_shape())?,
    };
    let sc = cfg.worldmodel_train.stage(stage)?;
    let summary = train_stage(&mut model, &data, sc, &cfg.worldmodel_train, |l| {
        log::info!(
            "wm stage {} it {:>5} loss {:.4} |g| {:.3}",
            l.stage,
            l.iteration,
            l.loss,
            l.grad_norm
        );
    })?;
    if !tok.store.values_equal(&frozen) {
        return Err(HarnessError::TokenizerMutated);
    }
    model.save(out)?;
    let log_path = out.with_file_name(format!("wm_stage{stage}_log.json"));
    let log: Vec<&StageLog> = summary.log.iter().collect();
    write_json(&log_path, &log)?;
    Ok(vec![
        out.to_path_buf(),
        crate::tokenizer::meta_path(out),
        log_path,
    ])
}

/// Score the final model and export sample rollouts under `dir`.
pub fn eval_phase(
    cfg: &RunConfig,
    sequences: &[SceneSequence],
    tok_path: &Path,
    wm_path: &Path,
    dir: &Path,
) -> Result<(MetricReport, Vec<PathBuf>), HarnessError> {
    let (tok, ckpt) = Tokenizer::load(tok_path)?;
    let stats = NormalizationStats::read_from(&ckpt)?;
    let model = WorldModel::load(wm_path)?;
    let (report, mut files) = evaluate(&tok, &model, &stats, sequences, cfg, Some(dir))?;
    let p = dir.join("metrics.json");
    write_atomic(&p, report.to_json().as_bytes()).map_err(|e| HarnessError::io(&p, e))?;
    files.push(p);
    Ok((report, files))
}

fn relative(dir: &Path, p: &Path) -> String {
    p.strip_prefix(dir)
        .unwrap_or(p)
        .to_string_lossy()
        .replace('\\', "/")
}

/// Run every phase not already completed in `dir`, recording outputs in the
/// manifest after each one. A manifest from a different configuration is
/// an error; a phase whose files no longer match is re-run with all later ones.
pub fn run_experiment(cfg: &RunConfig, dir: &Path) -> Result<ExperimentManifest, HarnessError> {
    cfg.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let _lock = DirLock::acquire(dir)?;
    let mut m = if dir.join(MANIFEST_FILE).exists() {
        let m = ExperimentManifest::load(dir)?;
        if m.config != *cfg {
            return Err(HarnessError::Config(format!(
                "{} holds an experiment with a different configuration",
                dir.display()
            )));
        }
        m
    } else {
        ExperimentManifest::new(cfg.clone())
    };
    let cfg_path = dir.join("config.json");
    write_atomic(&cfg_path, cfg.to_json().as_bytes())
        .map_err(|e| HarnessError::io(&cfg_path, e))?;
    m.files
        .insert("config.json".into(), FileRecord::of(&cfg_path)?);

    let data_dir = dir.join(DATA_DIR);
    let tok_path = dir.join(TOKENIZER_FILE);
    let tokens_path = dir.join(TOKENS_FILE);
    let mut sequences: Option<Vec<SceneSequence>> = None;
    for phase in Phase::ALL {
        if m.phase_intact(dir, phase) {
            continue;
        }
        m.truncate_from(phase);
        if phase != Phase::Data && sequences.is_none() {
            sequences = Some(read_dataset(&data_dir)?);
        }
        let start = Instant::now();
        log::info!("phase {phase}");
        let result: Result<Vec<PathBuf>, HarnessError> = match phase {
            Phase::Data => gen_data(cfg, &data_dir).map(|dm| dataset_files(&data_dir, &dm)),
            Phase::Tokenizer => {
                train_tokenizer_phase(cfg, sequences.as_deref().unwrap(), &tok_path)
            }
            Phase::Stats => stats_phase(sequences.as_deref().unwrap(), &tok_path, &tokens_path),
            Phase::Stage1 | Phase::Stage2 | Phase::Stage3 => {
                let stage = phase.stage().unwrap();
                let prev = (stage > 1).then(|| dir.join(wm_name(stage - 1)));
                train_wm_phase(
                    cfg,
                    stage,
                    sequences.as_deref().unwrap(),
                    &tok_path,
                    Some(&tokens_path),
                    prev.as_deref(),
                    &dir.join(wm_name(stage)),
                )
            }
            Phase::Eval => eval_phase(
                cfg,
                sequences.as_deref().unwrap(),
                &tok_path,
                &dir.join(wm_name(3)),
                &dir.join("eval"),
            )
            .map(|(r, f)| {
                m.metrics = Some(r);
                f
            }),
        };
        match result {
            Ok(files) => {
                let mut names = Vec::new();
                for f in &files {
                    let name = relative(dir, f);
                    m.files.insert(name.clone(), FileRecord::of(f)?);
                    names.push(name);
                }
                // a later phase may rewrite an earlier phase's file (stats into the tokenizer checkpoint)
                for r in m.phases.iter_mut() {
                    r.files.retain(|f| !names.contains(f));
                }
                m.phases.push(PhaseRecord {
                    phase,
                    done: true,
                    error: None,
                    files: names,
                });
                m.timings
                    .insert(phase.to_string(), start.elapsed().as_secs_f64());
                match phase {
                    Phase::Stats => m.tokenizer_checkpoint = Some(TOKENIZER_FILE.into()),
                    Phase::Tokenizer => m.tokenizer_checkpoint = Some(TOKENIZER_FILE.into()),
                    p if p.stage().is_some() => {
                        m.worldmodel_checkpoint = Some(wm_name(p.stage().unwrap()))
                    }
                    _ => {}
                }
                m.save(dir)?;
            }
            Err(e) => {
                m.phases.push(PhaseRecord {
                    phase,
                    done: false,
                    error: Some(e.to_string()),
                    files: Vec::new(),
                });
                m.save(dir)?;
                return Err(HarnessError::Phase {
                    phase,
                    source: Box::new(e),
                });
            }
        }
    }
    m.save(dir)?;
    Ok(m)
}
