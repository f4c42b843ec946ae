use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use bevworld::harness::experiment::{self, wm_name, DATA_DIR, TOKENIZER_FILE, TOKENS_FILE};
use bevworld::harness::{export_rollout, gradsuite, init_threads, run_experiment, RunConfig};
use bevworld::synthworld::{read_dataset, SceneSequence};
use bevworld::tokenizer::Tokenizer;
use bevworld::worldmodel::{
    incoming_actions, rollout, NormalizationStats, RolloutOutput, WorldModel,
};

#[derive(Parser, Debug)]
#[command(
    name = "bevworld",
    version,
    about = "BEV tokenizer and diffusion world model on a synthetic driving world"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON configuration merged onto its preset (default: the ci preset)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed; every component seed is derived from it
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (experiment directory, or dataset directory for gen-data)
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run every phase, resuming from the manifest in --out
    Run,
    /// Generate the synthetic dataset into --out
    GenData,
    /// Train the tokenizer and compute normalization statistics
    TrainTokenizer {
        /// Dataset directory (default: <out>/data)
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train one world model curriculum stage
    TrainWm {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        stage: u8,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Starting weights (default: the previous stage in --out)
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Forecast from observed frames of a dataset sequence
    Rollout {
        #[arg(long)]
        past: usize,
        #[arg(long)]
        future: usize,
        /// JSON list of [dx, dy, dyaw]: either one per future frame, or one per
        /// frame after the first (past - 1 + future)
        #[arg(long)]
        actions: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        sequence: usize,
        #[arg(long, default_value_t = 0)]
        start: usize,
        /// World model checkpoint (default: the latest stage in --out)
        #[arg(long)]
        model: Option<PathBuf>,
        /// Sampling seed
        #[arg(long, default_value_t = 0)]
        sample_seed: u64,
        /// Directory for images and clouds (default: <out>/rollout)
        #[arg(long)]
        to: Option<PathBuf>,
    },
    /// Score the final model against the copy-last baseline
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable op and composed chain
    GradCheck,
    /// Write tokenizer reconstructions of dataset frames as PPM/PLY
    Export {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        sequence: usize,
        #[arg(long, default_value_t = 0)]
        start: usize,
        #[arg(long, default_value_t = 1)]
        frames: usize,
        #[arg(long)]
        to: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    init_threads();
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::ci(),
    };
    if let Some(s) = c.seed {
        cfg = cfg.with_seed(s);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dataset(out: &Path, data: Option<PathBuf>) -> Result<Vec<SceneSequence>> {
    let dir = data.unwrap_or_else(|| out.join(DATA_DIR));
    let seqs = read_dataset(&dir).with_context(|| format!("reading dataset {}", dir.display()))?;
    if seqs.is_empty() {
        bail!("dataset {} has no sequences", dir.display());
    }
    Ok(seqs)
}

fn latest_model(out: &Path) -> Result<PathBuf> {
    (1..=3u8)
        .rev()
        .map(|s| out.join(wm_name(s)))
        .find(|p| p.exists())
        .with_context(|| format!("no world model checkpoint in {}", out.display()))
}

fn load_tokenizer(out: &Path) -> Result<(Tokenizer, NormalizationStats)> {
    let path = out.join(TOKENIZER_FILE);
    let (tok, ckpt) =
        Tokenizer::load(&path).with_context(|| format!("loading {}", path.display()))?;
    let stats = NormalizationStats::read_from(&ckpt)?;
    Ok((tok, stats))
}

fn dispatch(cli: Cli) -> Result<bool> {
    let cfg = load_config(&cli.common)?;
    let out = cli.common.out.as_path();
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    match cli.command {
        Command::Run => {
            let m = run_experiment(&cfg, out)?;
            if let Some(r) = &m.metrics {
                println!("{}", r.to_json());
            }
            println!("manifest hash {}", m.hash);
        }
        Command::GenData => {
            let m = experiment::gen_data(&cfg, out)?;
            println!("wrote {} sequences to {}", m.sequences.len(), out.display());
            std::fs::write(out.join("config.json"), cfg.to_json())?;
        }
        Command::TrainTokenizer { data } => {
            let seqs = dataset(out, data)?;
            let tok = out.join(TOKENIZER_FILE);
            experiment::train_tokenizer_phase(&cfg, &seqs, &tok)?;
            experiment::stats_phase(&seqs, &tok, &out.join(TOKENS_FILE))?;
            println!("tokenizer and statistics saved to {}", tok.display());
        }
        Command::TrainWm { stage, data, init } => {
            let seqs = dataset(out, data)?;
            let prev = match init {
                Some(p) => Some(p),
                None if stage > 1 => Some(out.join(wm_name(stage - 1))),
                None => None,
            };
            if let Some(p) = &prev {
                if !p.exists() {
                    bail!(
                        "stage {stage} starts from {}, which does not exist",
                        p.display()
                    );
                }
            }
            let target = out.join(wm_name(stage));
            let cache = out.join(TOKENS_FILE);
            experiment::train_wm_phase(
                &cfg,
                stage,
                &seqs,
                &out.join(TOKENIZER_FILE),
                Some(&cache),
                prev.as_deref(),
                &target,
            )?;
            println!("stage {stage} saved to {}", target.display());
        }
        Command::Rollout {
            past,
            future,
            actions,
            data,
            sequence,
            start,
            model,
            sample_seed,
            to,
        } => {
            let seqs = dataset(out, data)?;
            let (tok, stats) = load_tokenizer(out)?;
            let model = WorldModel::load(&model.map_or_else(|| latest_model(out), Ok)?)?;
            let seq = seqs.get(sequence).with_context(|| {
                format!(
                    "sequence {sequence} out of range ({} available)",
                    seqs.len()
                )
            })?;
            if past == 0 || future == 0 {
                bail!("--past and --future must be positive");
            }
            if start + past > seq.frames.len() {
                bail!(
                    "sequence {sequence} has {} frames; cannot observe {past} from {start}",
                    seq.frames.len()
                );
            }
            let frames = &seq.frames[start..start + past];
            let recorded: Vec<[f64; 3]> = seq.frames.iter().map(|f| f.action).collect();
            let acts = match actions {
                Some(p) => {
                    let text = std::fs::read_to_string(&p)
                        .with_context(|| format!("reading {}", p.display()))?;
                    let a: Vec<[f64; 3]> = serde_json::from_str(&text)
                        .with_context(|| format!("parsing {}", p.display()))?;
                    if a.len() == past - 1 + future {
                        a
                    } else if a.len() == future {
                        let mut v = incoming_actions(&recorded[..start + past], start, past, 1)
                            [1..]
                            .to_vec();
                        v.extend(a);
                        v
                    } else {
                        bail!(
                            "{} holds {} actions; expected {future} or {}",
                            p.display(),
                            a.len(),
                            past - 1 + future
                        );
                    }
                }
                None => {
                    if start + past + future > seq.frames.len() {
                        bail!(
                            "no --actions given and the sequence has no recorded actions that far"
                        );
                    }
                    incoming_actions(&recorded, start, past + future, 1)[1..].to_vec()
                }
            };
            let out_r = rollout(&tok, &model, &stats, frames, &acts, future, sample_seed)?;
            let gt_end = (start + past + future).min(seq.frames.len());
            let gt = &seq.frames[start + past..gt_end];
            let dir = to.unwrap_or_else(|| out.join("rollout"));
            let files = export_rollout(&out_r, (!gt.is_empty()).then_some(gt), &dir)?;
            println!("wrote {} files to {}", files.len(), dir.display());
        }
        Command::Eval { data, model } => {
            let seqs = dataset(out, data)?;
            let model = model.map_or_else(|| latest_model(out), Ok)?;
            let (report, files) = experiment::eval_phase(
                &cfg,
                &seqs,
                &out.join(TOKENIZER_FILE),
                &model,
                &out.join("eval"),
            )?;
            println!("{}", report.to_json());
            log::info!("wrote {} files", files.len());
        }
        Command::GradCheck => {
            let reports = gradsuite::run_suite()?;
            for r in &reports {
                println!("{r}");
            }
            let failed = reports.iter().filter(|r| !r.pass).count();
            println!("{} checks, {failed} failed", reports.len());
            return Ok(failed == 0);
        }
        Command::Export {
            data,
            sequence,
            start,
            frames,
            to,
        } => {
            let seqs = dataset(out, data)?;
            let (tok, _) = load_tokenizer(out)?;
            let seq = seqs
                .get(sequence)
                .with_context(|| format!("sequence {sequence} out of range"))?;
            let end = (start + frames).min(seq.frames.len());
            if start >= end {
                bail!("no frames selected");
            }
            let rays = tok.pattern_rays()?;
            let mut rec = RolloutOutput {
                tokens: Vec::new(),
                frames: Vec::new(),
            };
            for f in &seq.frames[start..end] {
                let (t, o) = tok.reconstruct(f, &rays)?;
                rec.tokens.push(t);
                rec.frames.push(o);
            }
            let dir = to.unwrap_or_else(|| out.join("export"));
            let files = export_rollout(&rec, Some(&seq.frames[start..end]), &dir)?;
            println!("wrote {} files to {}", files.len(), dir.display());
        }
    }
    Ok(true)
}
