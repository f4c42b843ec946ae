use super::*;
use crate::geometry::{camera_rotation, norm};

fn small(seed: u64) -> SceneConfig {
    let mut c = SceneConfig::ci(seed);
    c.frames = 4;
    c
}

fn static_cfg() -> SceneConfig {
    let mut c = small(3);
    c.num_boxes = 0;
    c.ego_speed = [0.0, 0.0];
    c.ego_speed_jitter = 0.0;
    c.ego_yaw_rate = [0.0, 0.0];
    c.ego_yaw_rate_jitter = 0.0;
    c
}

/// Ray/box entry distance by testing the six face planes directly.
fn face_oracle(b: &BoxObject, time: f64, o: Vec3, d: Vec3) -> Option<f64> {
    assert_eq!(b.yaw, 0.0);
    let c = b.center_at(time);
    let half = [b.size[0] / 2.0, b.size[1] / 2.0, b.size[2] / 2.0];
    let mut best: Option<f64> = None;
    for a in 0..3 {
        for s in [-1.0, 1.0] {
            if d[a] == 0.0 {
                continue;
            }
            let t = (c[a] + s * half[a] - o[a]) / d[a];
            if t <= 0.0 {
                continue;
            }
            let p = [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
            let inside = (0..3).all(|k| k == a || (p[k] - c[k]).abs() <= half[k] + 1e-12);
            if inside && best.map_or(true, |bt| t < bt) {
                best = Some(t);
            }
        }
    }
    best
}

fn test_box(center: Vec3, size: Vec3) -> BoxObject {
    BoxObject {
        center,
        size,
        yaw: 0.0,
        velocity: [0.0, 0.0],
        albedo: [0.9, 0.2, 0.1],
    }
}

#[test]
fn same_seed_is_bitwise_identical() {
    let a = generate_scene(&small(1)).unwrap();
    let b = generate_scene(&small(1)).unwrap();
    assert_eq!(a, b);
    let c = generate_scene(&small(2)).unwrap();
    assert_ne!(a.frames[0].images, c.frames[0].images);
}

#[test]
fn zero_frames_rejected() {
    let mut c = small(1);
    c.frames = 0;
    assert!(matches!(generate_scene(&c), Err(SynthError::ZeroFrames)));
    let mut c = small(1);
    c.dt = 0.0;
    assert!(matches!(
        generate_scene(&c),
        Err(SynthError::InvalidConfig(_))
    ));
}

#[test]
fn static_world_frames_identical() {
    let s = generate_scene(&static_cfg()).unwrap();
    for f in &s.frames[1..] {
        assert_eq!(f.images, s.frames[0].images);
        assert_eq!(f.lidar, s.frames[0].lidar);
        assert_eq!(f.pose, s.frames[0].pose);
    }
}

#[test]
fn straight_road_kinematics() {
    let mut c = static_cfg();
    c.ego_speed = [3.0, 3.0];
    let w = World::new(&c).unwrap();
    for p in w.poses.windows(2) {
        let d = norm(sub(p[1].translation, p[0].translation));
        assert!((d - 3.0 * c.dt).abs() < 1e-6, "{d}");
        assert!(p[1].translation[1].abs() < 1e-12);
    }
}

#[test]
fn pose_chain_matches_actions() {
    for seed in 0..6 {
        for cfg in [SceneConfig::ci(seed), SceneConfig::desk(seed)] {
            let w = World::new(&cfg).unwrap();
            let seq = SceneSequence {
                config: cfg.clone(),
                frames: w
                    .poses
                    .iter()
                    .zip(&w.actions)
                    .map(|(p, a)| FrameObservation {
                        images: vec![],
                        lidar: vec![],
                        pose: *p,
                        action: *a,
                    })
                    .collect(),
            };
            assert!(
                seq.pose_chain_error() < 1e-6,
                "seed {seed}: {}",
                seq.pose_chain_error()
            );
        }
    }
}

#[test]
fn albedos_distinct_and_values_in_range() {
    let cfg = small(7);
    let w = World::new(&cfg).unwrap();
    for (i, a) in w.boxes.iter().enumerate() {
        for b in &w.boxes[i + 1..] {
            let d: f64 = (0..3).map(|k| (a.albedo[k] - b.albedo[k]).abs()).sum();
            assert!(d > 0.05);
        }
    }
    let f = w.observe(1);
    assert!(f
        .images
        .iter()
        .all(|im| im.data.iter().all(|v| (0.0..=1.0).contains(v))));
    let c = cfg.lidar.center();
    assert!(f
        .lidar_f64()
        .iter()
        .all(|p| norm(sub(*p, c)) <= cfg.lidar.max_range + 1e-4));
}

#[test]
fn upward_camera_sees_uniform_sky() {
    let cfg = static_cfg();
    let boxes = [];
    let state = SceneState {
        config: &cfg,
        boxes: &boxes,
        time: 0.0,
    };
    let mut cam = cfg.cameras[0].clone();
    cam.pose.rotation = camera_rotation(0.0, -1.3);
    let img = render_gt_camera(&state, &Pose::identity(), &cam);
    let sky = cfg.sky_color.map(|v| v as f32);
    assert!(img.data.chunks(3).all(|p| p == sky));
}

#[test]
fn box_on_axis_shows_albedo() {
    let mut cfg = static_cfg();
    cfg.fog_distance = None;
    cfg.supersample = 1;
    let boxes = [test_box([8.0, 0.0, 1.5], [2.0, 4.0, 3.0])];
    let state = SceneState {
        config: &cfg,
        boxes: &boxes,
        time: 0.0,
    };
    let mut cam = cfg.cameras[0].clone();
    cam.pose.rotation = camera_rotation(0.0, 0.0);
    let img = render_gt_camera(&state, &Pose::identity(), &cam);
    let (i, j) = (cam.cy as usize, cam.cx as usize);
    assert_eq!(img.pixel(i, j), boxes[0].albedo.map(|v| v as f32));
}

#[test]
fn camera_depth_matches_face_oracle() {
    let cfg = static_cfg();
    let boxes = [
        test_box([6.0, 1.0, 1.0], [2.0, 2.0, 2.0]),
        test_box([5.0, -3.0, 0.75], [1.0, 3.0, 1.5]),
    ];
    let state = SceneState {
        config: &cfg,
        boxes: &boxes,
        time: 0.0,
    };
    let cam = &cfg.cameras[0];
    let pose = Pose::from_yaw(0.3, -0.2, 0.05);
    let mut box_hits = 0;
    for i in 0..cam.height {
        for j in 0..cam.width {
            let (u, v) = (j as f64 + 0.5, i as f64 + 0.5);
            let dir_ego = cam.direction(u, v);
            let (o, d) = (pose.apply(cam.center()), pose.rotate(dir_ego));
            let ground = (d[2] < 0.0).then(|| -o[2] / d[2]);
            let oracle = boxes
                .iter()
                .filter_map(|b| face_oracle(b, 0.0, o, d))
                .chain(ground)
                .fold(None, |m: Option<f64>, t| Some(m.map_or(t, |m| m.min(t))));
            let zc = mat_t_vec(&cam.pose.rotation, dir_ego)[2];
            let got = camera_depth_at(&state, &pose, cam, u, v);
            match (got, oracle) {
                (Some(g), Some(t)) => {
                    assert!(
                        (g - t * zc).abs() < 1e-9,
                        "pixel ({i},{j}): {g} vs {}",
                        t * zc
                    );
                    if ground.map_or(true, |gt| t < gt - 1e-9) {
                        box_hits += 1;
                    }
                }
                (None, None) => {}
                other => panic!("pixel ({i},{j}): {other:?}"),
            }
        }
    }
    assert!(box_hits > 20);
}

#[test]
fn lidar_ground_depth_is_height_over_cosine() {
    let cfg = static_cfg();
    let state = SceneState {
        config: &cfg,
        boxes: &[],
        time: 0.0,
    };
    let (_, depths) = render_gt_lidar(&state, &Pose::identity(), &cfg.lidar);
    let h = cfg.lidar.center()[2];
    for (r, d) in depths.iter().enumerate() {
        let theta = cfg.lidar.inclinations[r / cfg.lidar.azimuths];
        let expect = h / (std::f64::consts::PI - theta).cos();
        if expect <= cfg.lidar.max_range {
            assert!((d.unwrap() - expect).abs() < 1e-9);
        } else {
            assert!(d.is_none());
        }
    }
}

#[test]
fn lidar_misses_omitted() {
    let cfg = static_cfg();
    let state = SceneState {
        config: &cfg,
        boxes: &[],
        time: 0.0,
    };
    let mut spec = cfg.lidar.clone();
    spec.inclinations = vec![0.5, 1.0, 1.5];
    let (pts, depths) = render_gt_lidar(&state, &Pose::identity(), &spec);
    assert!(pts.is_empty() && depths.iter().all(|d| d.is_none()));
}

#[test]
fn lidar_box_depth_matches_face_oracle() {
    let cfg = static_cfg();
    let boxes = [test_box([4.0, 2.0, 1.0], [2.0, 2.0, 2.0])];
    let state = SceneState {
        config: &cfg,
        boxes: &boxes,
        time: 1.0,
    };
    let spec = &cfg.lidar;
    let (_, depths) = render_gt_lidar(&state, &Pose::identity(), spec);
    let o = spec.center();
    let mut hits = 0;
    for (r, d) in depths.iter().enumerate() {
        let dir = spherical_to_cartesian(
            1.0,
            spec.inclinations[r / spec.azimuths],
            spec.azimuth(r % spec.azimuths),
        );
        if let Some(t) = face_oracle(&boxes[0], 1.0, o, dir) {
            let ground = -o[2] / dir[2];
            if t < ground && t <= spec.max_range {
                assert!((d.unwrap() - t).abs() < 1e-9);
                hits += 1;
            }
        }
    }
    assert!(hits > 5);
}

#[test]
fn lidar_and_camera_agree() {
    let cfg = small(11);
    let w = World::new(&cfg).unwrap();
    let mut checked = 0;
    for t in 0..cfg.frames {
        let state = w.state_at(t);
        let pose = w.poses[t];
        let (pts, _) = render_gt_lidar(&state, &pose, &cfg.lidar);
        for cam in &cfg.cameras {
            for &p in &pts {
                let pr = cam.project(p);
                if !pr.visible {
                    continue;
                }
                let cast = camera_depth_at(&state, &pose, cam, pr.u, pr.v)
                    .expect("visible point must hit");
                // occluders can only make the camera hit nearer
                assert!(cast <= pr.depth * 1.02, "cast {cast} vs {}", pr.depth);
                let occluded = cast < pr.depth * 0.98;
                if !occluded {
                    assert!((cast - pr.depth).abs() <= 0.02 * pr.depth);
                    checked += 1;
                }
            }
        }
    }
    assert!(checked > 100);
}

mod io {
    use super::*;

    fn dataset() -> Vec<SceneSequence> {
        let mut c = small(5);
        c.frames = 2;
        let mut d = c.clone();
        d.seed = 6;
        vec![generate_scene(&c).unwrap(), generate_scene(&d).unwrap()]
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let seqs = dataset();
        let m = write_dataset(&seqs, dir.path()).unwrap();
        assert_eq!(m.total_frames, 4);
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, seqs);
        // re-encoding is byte-identical
        assert_eq!(
            encode_sequence(&back[0]),
            std::fs::read(dir.path().join(&m.sequences[0].file)).unwrap()
        );
    }

    #[test]
    fn corrupted_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_dataset(&dataset(), dir.path()).unwrap();
        let p = dir.path().join(&m.sequences[0].file);
        let mut b = std::fs::read(&p).unwrap();
        b[0] = b'X';
        std::fs::write(&p, b).unwrap();
        assert!(matches!(
            read_dataset(dir.path()),
            Err(SynthError::BadMagic(_))
        ));
    }

    #[test]
    fn version_mismatch_rejected() {
        let mut b = encode_sequence(&dataset()[0]);
        b[4] = 2;
        assert!(matches!(
            decode_sequence(&b, 2, 2, small(5)),
            Err(SynthError::VersionMismatch {
                found: 2,
                expected: 1
            })
        ));
    }

    #[test]
    fn frame_count_mismatch_is_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_dataset(&dataset(), dir.path()).unwrap();
        let mut m2 = m.clone();
        m2.sequences[1].frames = 3;
        m2.total_frames = 5;
        std::fs::write(
            dir.path().join(MANIFEST_FILE),
            serde_json::to_string(&m2).unwrap(),
        )
        .unwrap();
        assert!(matches!(
            read_dataset(dir.path()),
            Err(SynthError::Truncated(_))
        ));
    }

    #[test]
    fn corruption_detected_by_checksum() {
        let seq = &dataset()[0];
        let good = encode_sequence(seq);
        for pos in [20, good.len() / 2, good.len() - 5] {
            let mut b = good.clone();
            b[pos] ^= 0x10;
            assert!(
                matches!(
                    decode_sequence(&b, 2, 2, small(5)),
                    Err(SynthError::Checksum { .. })
                ),
                "byte {pos}"
            );
        }
        let cut = &good[..good.len() - 100];
        assert!(decode_sequence(cut, 2, 2, small(5)).is_err());
    }
}
