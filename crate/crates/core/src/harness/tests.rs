use super::experiment::{wm_name, MANIFEST_FILE};
use super::*;
use crate::tokenizer::export::{read_ply, read_ppm};
use crate::worldmodel::StageConfig;

/// Seconds-scale experiment on the ci rig.
fn micro() -> RunConfig {
    let mut c = RunConfig::ci().with_seed(4);
    c.dataset.sequences = 2;
    c.scene.frames = 7;
    c.tokenizer_train.iterations = 4;
    c.tokenizer_train.log_every = 0;
    c.worldmodel.width = 8;
    c.worldmodel.heads = 2;
    c.worldmodel.blocks = 1;
    c.worldmodel.schedule.ddim_steps = 2;
    for s in c.worldmodel_train.stages.iter_mut() {
        s.iterations = 2;
        s.batch = 2;
    }
    c.eval.rollouts_per_sequence = 1;
    c.eval.export_rollouts = 1;
    c
}

#[test]
fn presets_validate_and_round_trip() {
    for c in [RunConfig::ci(), RunConfig::desk(), micro()] {
        c.validate().unwrap();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        assert_eq!(c.spec_version, 1);
    }
    assert!(RunConfig::to_json(&RunConfig::ci()).contains("\"spec_version\": 1"));
}

#[test]
fn partial_json_merges_onto_the_preset() {
    let c = RunConfig::from_json(
        r#"{"preset": "ci", "seed": 7, "dataset": {"sequences": 3}, "eval": {"horizons": [1, 2]}}"#,
    )
    .unwrap();
    assert_eq!(c.dataset.sequences, 3);
    assert_eq!(c.eval.horizons, vec![1, 2]);
    assert_eq!(c.seed, 7);
    assert_eq!(c.worldmodel_train.seed, 9);
    assert_eq!(
        c.tokenizer,
        crate::tokenizer::TokenizerConfig {
            seed: 7,
            ..RunConfig::ci().tokenizer
        }
    );
    assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::ci());

    for bad in [
        r#"{"spec_version": 2}"#,
        r#"{"preset": "huge"}"#,
        r#"{"tokenizer": {"no_such_key": 1}}"#,
        r#"{"no_such_section": {}}"#,
        r#"{"eval": {"horizons": [0]}}"#,
        r#"{"eval": {"horizons": [9]}}"#,
        "[1, 2]",
        "not json",
    ] {
        assert!(
            matches!(RunConfig::from_json(bad), Err(HarnessError::Config(_))),
            "{bad}"
        );
    }
}

#[test]
fn windows_spread_over_each_sequence() {
    let w = rollout_windows(&[12, 5, 6], 6, 3);
    let starts: Vec<(usize, usize)> = w.iter().map(|w| (w.sequence, w.start)).collect();
    assert_eq!(starts, vec![(0, 0), (0, 3), (0, 6), (2, 0)]);
    assert!(rollout_windows(&[12], 6, 0).is_empty());
    assert_eq!(rollout_windows(&[7], 6, 5).len(), 2);
}

#[test]
fn grad_suite_passes() {
    let reports = gradsuite::run_suite().unwrap();
    assert!(reports.len() >= 18);
    for r in &reports {
        assert!(r.pass, "{r}");
    }
    let names: Vec<&str> = reports.iter().map(|r| r.op.as_str()).collect();
    for want in [
        "AdaLN",
        "spatial-temporal blocks",
        "token→voxel→composite→depth L1",
        "composite_weights",
        "weighted_gather (bi/trilinear)",
    ] {
        assert!(names.contains(&want), "{want}");
    }
}

#[test]
fn micro_experiment_resumes_to_the_same_hash() {
    let cfg = micro();
    let a = tempfile::tempdir().unwrap();
    let m = run_experiment(&cfg, a.path()).unwrap();
    assert!(Phase::ALL.iter().all(|&p| m.is_done(p)));
    m.verify(a.path()).unwrap();
    assert!(!a.path().join(experiment::LOCK_FILE).exists());
    assert_eq!(m.worldmodel_checkpoint.as_deref(), Some("wm_stage3.bwck"));
    let metrics = m.metrics.as_ref().unwrap();
    assert_eq!(metrics.horizons.len(), 2);
    assert!(metrics.horizons.iter().all(|h| h.samples + h.missing == 2));
    // every file on disk except the manifest and lock is listed
    let mut on_disk = Vec::new();
    for e in walk(a.path()) {
        let rel = e
            .strip_prefix(a.path())
            .unwrap()
            .to_string_lossy()
            .to_string();
        if rel != MANIFEST_FILE {
            on_disk.push(rel);
        }
    }
    on_disk.sort();
    assert_eq!(on_disk, m.files.keys().cloned().collect::<Vec<_>>());
    assert_eq!(ExperimentManifest::load(a.path()).unwrap(), m);

    // a second call is a no-op
    assert_eq!(run_experiment(&cfg, a.path()).unwrap().hash, m.hash);

    // "killed" during stage 2: manifest only through stage 1, stage-2 output torn
    let b = tempfile::tempdir().unwrap();
    run_experiment(&cfg, b.path()).unwrap();
    let mut partial = ExperimentManifest::load(b.path()).unwrap();
    partial.phases.retain(|r| r.phase <= Phase::Stage1);
    std::fs::write(
        b.path().join(MANIFEST_FILE),
        serde_json::to_string(&partial).unwrap(),
    )
    .unwrap();
    std::fs::write(b.path().join(wm_name(2)), b"BWCK torn").unwrap();
    std::fs::write(b.path().join(experiment::LOCK_FILE), "4000000000").unwrap();
    let resumed = run_experiment(&cfg, b.path()).unwrap();
    assert_eq!(resumed.hash, m.hash);
    assert_eq!(resumed.content_hash(), resumed.hash);

    // a tampered earlier output reruns from its phase and still converges
    std::fs::write(b.path().join("tokenizer_log.json"), "[]").unwrap();
    assert_eq!(run_experiment(&cfg, b.path()).unwrap().hash, m.hash);

    let mut other = cfg.clone();
    other.seed = 99;
    assert!(matches!(
        run_experiment(&other, b.path()),
        Err(HarnessError::Config(_))
    ));
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn live_lock_blocks_a_second_writer() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(
        d.path().join(experiment::LOCK_FILE),
        std::process::id().to_string(),
    )
    .unwrap();
    assert!(matches!(
        run_experiment(&micro(), d.path()),
        Err(HarnessError::Locked(_))
    ));
}

#[test]
fn empty_dataset_fails_its_phase() {
    let mut cfg = micro();
    cfg.dataset.sequences = 0;
    let d = tempfile::tempdir().unwrap();
    match run_experiment(&cfg, d.path()) {
        Err(HarnessError::Phase {
            phase: Phase::Data, ..
        }) => {}
        other => panic!("expected a data-phase failure, got {other:?}"),
    }
    let m = ExperimentManifest::load(d.path()).unwrap();
    let r = m.phase(Phase::Data).unwrap();
    assert!(!r.done && r.error.is_some());
}

#[test]
fn missing_stats_is_reported() {
    let cfg = micro();
    let d = tempfile::tempdir().unwrap();
    let data = d.path().join("data");
    experiment::gen_data(&cfg, &data).unwrap();
    let seqs = crate::synthworld::read_dataset(&data).unwrap();
    let tok = d.path().join("tok.bwck");
    experiment::train_tokenizer_phase(&cfg, &seqs, &tok).unwrap();
    let err =
        experiment::train_wm_phase(&cfg, 1, &seqs, &tok, None, None, &d.path().join("wm.bwck"))
            .unwrap_err();
    assert!(
        matches!(
            err,
            HarnessError::WorldModel(crate::worldmodel::WorldModelError::MissingStats)
        ),
        "{err}"
    );
}

#[test]
fn export_naming_and_round_trip() {
    let cfg = micro();
    let d = tempfile::tempdir().unwrap();
    let data = d.path().join("data");
    experiment::gen_data(&cfg, &data).unwrap();
    let seqs = crate::synthworld::read_dataset(&data).unwrap();
    let tok = crate::tokenizer::Tokenizer::new(
        cfg.tokenizer.clone(),
        cfg.scene.cameras.clone(),
        cfg.scene.lidar.clone(),
    )
    .unwrap();
    let stats = crate::worldmodel::NormalizationStats::compute(&[
        tok.encode(&seqs[0].frames[0]).unwrap(),
        tok.encode(&seqs[0].frames[1]).unwrap(),
    ])
    .unwrap();
    let model =
        crate::worldmodel::WorldModel::new(cfg.worldmodel.clone(), tok.config.token_shape())
            .unwrap();
    let out = crate::worldmodel::rollout(
        &tok,
        &model,
        &stats,
        &seqs[0].frames[..3],
        &[[0.5, 0.0, 0.0]; 5],
        3,
        1,
    )
    .unwrap();
    assert_eq!(out.frames.len(), 3);
    assert!(out.frames.iter().all(|f| f.images.len() == 2));
    let files = export_rollout(&out, Some(&seqs[0].frames[3..6]), d.path()).unwrap();
    let mut names: Vec<String> = files
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().to_string())
        .collect();
    names.sort();
    let ppm: Vec<&String> = names.iter().filter(|n| n.starts_with("cam")).collect();
    assert_eq!(
        ppm,
        [
            "cam0_t+1.ppm",
            "cam0_t+2.ppm",
            "cam0_t+3.ppm",
            "cam1_t+1.ppm",
            "cam1_t+2.ppm",
            "cam1_t+3.ppm"
        ]
    );
    for k in 0..3 {
        let pts = read_ply(&d.path().join(format!("lidar_t+{}.ply", k + 1))).unwrap();
        assert_eq!(pts.len(), out.frames[k].points.len());
        let grid = read_ppm(&d.path().join(format!("compare_t+{}.ppm", k + 1))).unwrap();
        assert!(grid.height > 2 * 32);
    }
    let mut empty = out.clone();
    empty.frames.truncate(1);
    empty.frames[0].points.clear();
    let e = tempfile::tempdir().unwrap();
    export_rollout(&empty, None, e.path()).unwrap();
    assert!(read_ply(&e.path().join("lidar_t+1.ply"))
        .unwrap()
        .is_empty());
    empty.frames.clear();
    assert!(export_rollout(&empty, None, e.path()).is_err());
    let _ = StageConfig {
        stage: 1,
        cond_frames: 1,
        future_frames: 1,
        stride: 1,
        iterations: 0,
        batch: 1,
    };
}
