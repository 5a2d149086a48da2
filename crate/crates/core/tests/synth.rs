use flowtrack::geometry::*;
use flowtrack::par::Execution;
use flowtrack::seqio::*;
use flowtrack::synth::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Where a point attached to `from` ends up when the box moves to `to`.
fn carry(p: [f64; 2], from: &Box3D, to: &Box3D) -> [f64; 2] {
    let local = rotate(-from.yaw, [p[0] - from.center[0], p[1] - from.center[1]]);
    let q = rotate(to.yaw, local);
    [to.center[0] + q[0], to.center[1] + q[1]]
}

fn noise_free(seed: u64) -> ScenarioConfig {
    let mut cfg = ScenarioConfig::clean(seed, 8);
    cfg.speed = 0.8;
    cfg.yaw_rate = 0.07;
    cfg.start_heading = 0.3;
    cfg.ego_speed = 0.5;
    cfg.ego_yaw_amplitude = 0.02;
    cfg
}

#[test]
fn static_and_constant_velocity_motion() {
    let seq = generate_sequence(&ScenarioConfig::clean(1, 4)).unwrap();
    for w in seq.frames.windows(2) {
        let m = RelativeMotion::between(&w[0].gt_box, &w[1].gt_box);
        assert_eq!(m, RelativeMotion::zero());
    }

    let mut cfg = ScenarioConfig::clean(2, 5);
    cfg.speed = 1.0;
    let seq = generate_sequence(&cfg).unwrap();
    for w in seq.frames.windows(2) {
        let m = RelativeMotion::between(&w[0].gt_box, &w[1].gt_box);
        assert!((m.translation[0] - 1.0).abs() < 1e-12 && m.translation[1].abs() < 1e-12);
        assert!(m.rotation.abs() < 1e-12);
    }
}

#[test]
fn heavy_dropout_leaves_about_ten_target_points() {
    let mut cfg = ScenarioConfig::clean(3, 200);
    cfg.dropout = 0.95;
    let seq = generate_sequence(&cfg).unwrap();
    let mean = seq.frames.iter().map(|f| f.target_points as f64).sum::<f64>() / seq.len() as f64;
    // binomial(200, 0.05): mean 10, standard error of the mean about 0.22
    assert!((mean - 10.0).abs() < 1.0, "mean {mean}");
}

#[test]
fn occlusion_examples() {
    let seq = generate_sequence(&ScenarioConfig::sample(ScenarioClass::Easy, 4, 3)).unwrap();
    let f = &seq.frames[1];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let gone = apply_occlusion(f, 1.0, &mut rng);
    assert_eq!(gone.target_points, 0);
    assert_eq!(apply_occlusion(f, 0.0, &mut rng), *f);

    // supervision depends only on boxes, so occlusion cannot change it
    let coords = CoordMap::regular([f.gt_box.center[0] - 8.0, f.gt_box.center[1] - 8.0], 0.4, 40, 40);
    let m = RelativeMotion::between(&seq.frames[0].gt_box, &f.gt_box);
    let a = flow_ground_truth(&coords, &f.gt_box, &m, RotationCenter::BoxCenter);
    let b = flow_ground_truth(&coords, &gone.gt_box, &m, RotationCenter::BoxCenter);
    assert_eq!(a, b);
}

#[test]
fn occlusion_class_windows_thin_the_target() {
    let cfg = ScenarioConfig::sample(ScenarioClass::Occlusion, 11, 20);
    let w = cfg.occlusions[0];
    let seq = generate_sequence(&cfg).unwrap();
    let inside: f64 = (w.start..w.end).map(|t| seq.frames[t].target_points as f64).sum::<f64>() / (w.end - w.start) as f64;
    let outside: Vec<f64> = (0..seq.len()).filter(|t| !w.contains(*t)).map(|t| seq.frames[t].target_points as f64).collect();
    let outside = outside.iter().sum::<f64>() / outside.len() as f64;
    assert!(inside < 0.3 * outside, "inside {inside}, outside {outside}");
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = ScenarioConfig::clean(0, 3);
    cfg.dropout = 1.5;
    assert!(generate_sequence(&cfg).is_err());
    let mut cfg = ScenarioConfig::clean(0, 3);
    cfg.points_min = 10;
    cfg.points_max = 5;
    assert!(generate_sequence(&cfg).is_err());
}

#[test]
fn same_seed_gives_identical_bytes() {
    let classes = ScenarioClass::ALL;
    let a = generate_dataset(&classes, 6, 5, 42, Execution::Parallel).unwrap();
    let b = generate_dataset(&classes, 6, 5, 42, Execution::Sequential).unwrap();
    let c = generate_dataset(&classes, 6, 5, 43, Execution::Sequential).unwrap();
    let bytes = |s: &[Sequence]| -> Vec<Vec<u8>> { s.iter().flat_map(|q| q.frames.iter().map(encode_frame)).collect() };
    assert_eq!(bytes(&a), bytes(&b));
    assert_ne!(bytes(&a), bytes(&c));
    let classes_seen: Vec<_> = a.iter().map(|s| s.class).collect();
    assert_eq!(&classes_seen[..4], &ScenarioClass::ALL);
}

#[test]
fn dataset_directory_round_trip() {
    let seqs = generate_dataset(&ScenarioClass::ALL, 4, 3, 7, Execution::Sequential).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&seqs, dir.path()).unwrap();
    let mut back = load_dataset(dir.path()).unwrap();
    back.sort_by(|x, y| x.id.cmp(&y.id));
    let mut want = seqs.clone();
    want.sort_by(|x, y| x.id.cmp(&y.id));
    assert_eq!(back, want);

    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(&seqs[0].id).join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta["frames"], 3);
    assert_eq!(meta["grid_hint"]["cells"], 40);

    std::fs::write(dir.path().join(&seqs[1].id).join("frame_00001.bin"), b"FTF1\x01").unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(flowtrack::Error::Format(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn flow_agrees_with_carried_target_points(seed in any::<u64>()) {
        let seq = generate_sequence(&noise_free(seed)).unwrap();
        for t in 1..seq.len() {
            let (prev, cur) = (&seq.frames[t - 1], &seq.frames[t]);
            let to = compensate_box(&cur.gt_box, &cur.frame.ego_pose, &prev.frame.ego_pose);
            let m = RelativeMotion::between(&prev.gt_box, &to);
            for p in &prev.frame.points[..prev.target_points] {
                let p2 = [p[0], p[1]];
                // returns sit on the box surface up to f32 storage precision
                prop_assert!(prev.gt_box.contains_bev_with_margin(p2, 1e-4));
                let f = rigid_flow_at(p2, &prev.gt_box, &m, RotationCenter::BoxCenter);
                let q = carry(p2, &prev.gt_box, &to);
                prop_assert!((p2[0] + f[0] - q[0]).abs() <= 1e-9 && (p2[1] + f[1] - q[1]).abs() <= 1e-9);
            }
        }
    }
}
