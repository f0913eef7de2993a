use std::collections::{BTreeMap, BTreeSet};

use mcmot::association::giou::{giou_3d, iou_3d, Box3D};
use mcmot::association::hungarian::hungarian;
use mcmot::geometry::{apply_projection, compose_cross_camera_transform, Camera, CameraIntrinsics, CameraRig, Vec3};
use mcmot::graph::NodeKind;
use mcmot::gtn::{Gtn, GtnConfig};
use mcmot::metrics::{eval_clearmot, eval_detection, DetEvalConfig, EvalBox, TrackBox};
use mcmot::motion_baseline::{KalmanConfig, KalmanTrack};
use mcmot::numeric::{matmul, softmax_rows, Matrix};
use mcmot::pipeline::{group_by_frame, run_tracking, PipelineConfig, Tracker};
use mcmot::simulator::{generate, NoiseConfig, ScenarioConfig, SimFeatureProvider};
use mcmot::training::{set_loss, GtBox, LossWeights, SetItem};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize, range: f64) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-range..range, rows * cols).prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

fn shuffled(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    order
}

fn arb_box() -> impl Strategy<Value = Box3D> {
    (
        prop::array::uniform3(-3.0f64..3.0),
        prop::array::uniform3(0.3f64..4.0),
        -3.2f64..3.2,
    )
        .prop_map(|(c, s, yaw)| Box3D::new(Vec3::from(c), s, yaw))
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_ignore_row_shifts(m in (1usize..6, 1usize..8).prop_flat_map(|(r, c)| matrix(r, c, 50.0)), shift in -100.0f64..100.0) {
        let s = softmax_rows(&m);
        let shifted = softmax_rows(&m.map(|v| v + shift));
        for r in 0..m.rows() {
            prop_assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for c in 0..m.cols() {
                prop_assert!((s.get(r, c) - shifted.get(r, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_is_associative((a, b, c) in (1usize..5, 1usize..5, 1usize..5, 1usize..5).prop_flat_map(|(n, k, l, m)| (matrix(n, k, 3.0), matrix(k, l, 3.0), matrix(l, m, 3.0)))) {
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        prop_assert!(left.sub(&right).unwrap().max_abs() < 1e-9);
    }

    #[test]
    fn hungarian_is_valid_and_beats_random_assignments(cost in (1usize..8, 1usize..8).prop_flat_map(|(n, m)| matrix(n, m, 10.0)), seed in any::<u64>()) {
        let a = hungarian(&cost);
        let (n, m) = cost.shape();
        prop_assert_eq!(a.pairs.len(), n.min(m));
        prop_assert_eq!(a.pairs.iter().map(|p| p.0).collect::<BTreeSet<_>>().len(), a.pairs.len());
        prop_assert_eq!(a.pairs.iter().map(|p| p.1).collect::<BTreeSet<_>>().len(), a.pairs.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..200 {
            let rows = shuffled(&mut rng, n);
            let cols = shuffled(&mut rng, m);
            let cost_of: f64 = rows.iter().zip(&cols).map(|(&r, &c)| cost.get(r, c)).sum();
            prop_assert!(a.total_cost <= cost_of + 1e-9);
        }
    }

    #[test]
    fn giou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
        let g = giou_3d(&a, &b).unwrap();
        prop_assert_eq!(g.to_bits(), giou_3d(&b, &a).unwrap().to_bits());
        prop_assert!(g > -1.0 && g <= 1.0);
        prop_assert!(g <= iou_3d(&a, &b).unwrap() + 1e-12);
    }

    #[test]
    fn contained_box_giou_equals_iou(a in arb_box(), shrink in prop::array::uniform3(0.1f64..0.9)) {
        let inner = Box3D::new(a.center_vec(), std::array::from_fn(|i| a.size[i] * shrink[i]), a.yaw);
        let (g, i) = (giou_3d(&a, &inner).unwrap(), iou_3d(&a, &inner).unwrap());
        prop_assert!((g - i).abs() < 1e-9);
    }
}

fn ring_pair(count: usize, pick: usize) -> (CameraRig, String, String) {
    let rig = CameraRig::ring(count, 85f64.to_radians().max(std::f64::consts::TAU / count as f64 + 0.3), 1280, 720);
    let (a, b) = rig.adjacency().nth(pick % count).cloned().unwrap();
    (rig, a, b)
}

proptest! {
    #[test]
    fn cross_camera_transform_matches_direct_projection(count in 3usize..9, pick in 0usize..8, r in 3.0f64..60.0, theta in -3.2f64..3.2, z in -1.0f64..3.0) {
        let (rig, a, b) = ring_pair(count, pick);
        let world = Vec3::new(r * theta.cos(), r * theta.sin(), z);
        let (ca, cb) = (rig.camera(&a).unwrap(), rig.camera(&b).unwrap());
        if let (Some(_), Some(direct)) = (ca.project(&world), cb.project(&world)) {
            let local = ca.extrinsics.world_to_camera_point(&world);
            let (u, v, depth) = apply_projection(&compose_cross_camera_transform(&rig, &a, &b).unwrap(), &local);
            prop_assert!((u - direct.u).hypot(v - direct.v) < 1e-6);
            prop_assert!((depth - direct.depth).abs() < 1e-9);
        }
    }

    #[test]
    fn self_transform_with_identity_intrinsics_is_identity(count in 1usize..7, x in -20.0f64..20.0, y in -20.0f64..20.0, z in 0.5f64..50.0) {
        let base = CameraRig::ring(count, 1.5, 640, 480);
        let cameras: Vec<Camera> = base
            .cameras()
            .iter()
            .map(|c| Camera { intrinsics: CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 640, 480), ..c.clone() })
            .collect();
        let adjacency: Vec<(String, String)> = base.adjacency().cloned().collect();
        let rig = CameraRig::new(cameras, &adjacency).unwrap();
        let p = Vec3::new(x, y, z);
        for cam in rig.cameras() {
            let (u, v, d) = apply_projection(&compose_cross_camera_transform(&rig, &cam.id, &cam.id).unwrap(), &p);
            prop_assert!((Vec3::new(u * d, v * d, d) - p).norm() < 1e-9);
        }
    }

    #[test]
    fn extrinsics_round_trip(count in 1usize..9, p in prop::array::uniform3(-100.0f64..100.0)) {
        let rig = CameraRig::ring(count, 1.2, 640, 480);
        let p = Vec3::from(p);
        for cam in rig.cameras() {
            let e = &cam.extrinsics;
            prop_assert!((e.camera_to_world_point(&e.world_to_camera_point(&p)) - p).norm() < 1e-9);
            let m = e.world_to_cam() * e.cam_to_world;
            prop_assert!((m - nalgebra::Matrix4::identity()).abs().max() < 1e-9);
        }
    }

    #[test]
    fn mahalanobis_ignores_joint_translation(obs in prop::array::uniform3(-3.0f64..3.0), shift in prop::array::uniform3(-80.0f64..80.0), dt in 0.1f64..2.0) {
        let start = Box3D::new(Vec3::new(1.0, 2.0, 0.5), [1.9, 4.5, 1.6], 0.3);
        let t = KalmanTrack::new(&start, KalmanConfig::default()).predict(dt).unwrap();
        let obs = Box3D::new(Vec3::from(obs), [2.0, 4.4, 1.5], 0.2);
        let shift = Vec3::from(shift);
        let mut moved = t.clone();
        for i in 0..3 {
            moved.state[i] += shift[i];
        }
        let moved_obs = Box3D::new(obs.center_vec() + shift, obs.size, obs.yaw);
        let (d1, d2) = (t.mahalanobis(&obs).unwrap(), moved.mahalanobis(&moved_obs).unwrap());
        prop_assert!((d1 - d2).abs() <= 1e-9 * d1.max(1.0));
    }

    #[test]
    fn kalman_predicts_constant_velocity_exactly(p0 in prop::array::uniform3(-20.0f64..20.0), v in prop::array::uniform3(-3.0f64..3.0), dt in 0.1f64..1.0) {
        let (p0, v) = (Vec3::from(p0), Vec3::from(v));
        let at = |k: usize| Box3D::new(p0 + v * (dt * k as f64), [1.9, 4.5, 1.6], 0.0);
        let exact = KalmanConfig {
            q_state: 0.0,
            q_velocity: 0.0,
            r: 1e-14,
            p0_state: 1.0,
            p0_velocity: 1e8,
        };
        let mut t = KalmanTrack::new(&at(0), exact);
        for k in 1..6 {
            let pred = t.predict(dt).unwrap();
            if k > 2 {
                prop_assert!((pred.location() - at(k).center_vec()).norm() < 1e-9);
            }
            t = pred.update(&at(k)).unwrap().0;
        }
    }
}

fn track_box(frame: u64, id: u64, x: f64, y: f64) -> TrackBox {
    TrackBox {
        frame,
        id,
        center: [x, y, 0.0],
        score: 1.0,
    }
}

fn arb_tracks(ids: u64) -> impl Strategy<Value = Vec<TrackBox>> {
    prop::collection::vec((0u64..6, 0..ids, -10.0f64..10.0, -10.0f64..10.0), 0..25).prop_map(|v| {
        let mut seen = BTreeSet::new();
        v.into_iter()
            .filter(|(f, id, _, _)| seen.insert((*f, *id)))
            .map(|(f, id, x, y)| track_box(f, id, x, y))
            .collect()
    })
}

fn arb_eval_boxes() -> impl Strategy<Value = Vec<EvalBox>> {
    prop::collection::vec((0u64..3, -10.0f64..10.0, 0.0f64..1.0, prop::bool::ANY), 1..15).prop_map(|v| {
        v.into_iter()
            .map(|(frame, x, score, car)| EvalBox {
                frame,
                camera: "cam0".into(),
                center: [x, 0.0, 0.8],
                size: [1.9, 4.5, 1.6],
                yaw: 0.0,
                class: if car { "car".into() } else { "pedestrian".into() },
                score,
                velocity: None,
                attribute: None,
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn mota_is_at_most_one_and_drops_with_a_false_positive(gt in arb_tracks(4), preds in arb_tracks(6), frame in 0u64..6) {
        prop_assume!(!gt.is_empty());
        let before = eval_clearmot(&preds, &gt, 2.0);
        let mota = before.get("MOTA").unwrap();
        prop_assert!(mota <= 1.0);
        let mut more = preds.clone();
        more.push(track_box(frame, 99, 500.0, 500.0));
        let after = eval_clearmot(&more, &gt, 2.0).get("MOTA").unwrap();
        prop_assert!(after < mota);
        prop_assert_eq!(before, eval_clearmot(&preds, &gt, 2.0));
    }

    #[test]
    fn map_ignores_prediction_order(gt in arb_eval_boxes(), preds in arb_eval_boxes(), seed in any::<u64>()) {
        let cfg = DetEvalConfig::default();
        let base = eval_detection(&preds, &gt, &cfg).unwrap();
        let order = shuffled(&mut ChaCha8Rng::seed_from_u64(seed), preds.len());
        let permuted: Vec<EvalBox> = order.iter().map(|&i| preds[i].clone()).collect();
        // distinct scores make the ranking order-free
        let distinct = preds.iter().map(|p| p.score.to_bits()).collect::<BTreeSet<_>>().len() == preds.len();
        prop_assume!(distinct);
        prop_assert_eq!(base.get("mAP"), eval_detection(&permuted, &gt, &cfg).unwrap().get("mAP"));
        prop_assert_eq!(&base, &eval_detection(&preds, &gt, &cfg).unwrap());
    }

    #[test]
    fn set_loss_ignores_detection_and_gt_order(n in 1usize..5, g in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let classes = 2;
        let items: Vec<SetItem> = (0..n)
            .map(|_| SetItem {
                prev_location: Vec3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), 0.8),
                prev_size: [1.9, 4.5, 1.6],
                prev_yaw: rng.random_range(-1.0..1.0),
                camera: "cam0".into(),
                track: None,
            })
            .collect();
        let gt: Vec<GtBox> = (0..g)
            .map(|k| GtBox {
                bbox: Box3D::new(
                    Vec3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), 0.8),
                    [rng.random_range(1.0..2.5), rng.random_range(1.0..5.0), 1.6],
                    rng.random_range(-1.0..1.0),
                ),
                class: rng.random_range(0..classes),
                camera: "cam0".into(),
                track_id: k as u64,
            })
            .collect();
        let raw = Matrix::from_rows(&(0..n).map(|_| (0..7 + classes + 1).map(|_| rng.random_range(-0.5..0.5)).collect()).collect::<Vec<_>>());
        let w = LossWeights::default();
        let base = set_loss(&raw, &items, &gt, &w, classes).unwrap().value;

        let go = shuffled(&mut rng, g);
        let gt_perm: Vec<GtBox> = go.iter().map(|&i| gt[i].clone()).collect();
        let io = shuffled(&mut rng, n);
        let items_perm: Vec<SetItem> = io.iter().map(|&i| items[i].clone()).collect();
        let raw_perm = Matrix::from_rows(&io.iter().map(|&i| raw.row(i).to_vec()).collect::<Vec<_>>());
        let permuted = set_loss(&raw_perm, &items_perm, &gt_perm, &w, classes).unwrap().value;
        // equal up to the order of the final summation
        prop_assert!((base - permuted).abs() <= 1e-12 * base.abs().max(1.0));
    }
}

fn small_model(seed: u64) -> Gtn {
    Gtn::new(
        GtnConfig {
            d_z: 16,
            ffn_hidden: 16,
            ..GtnConfig::default()
        },
        seed,
    )
    .unwrap()
}

fn small_scene(seed: u64, dropout: f64, duplicates: f64) -> ScenarioConfig {
    ScenarioConfig {
        n_objects: 4,
        n_frames: 8,
        dropout_per_camera: dropout,
        duplicate_rate: duplicates,
        seed,
        ..ScenarioConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn tracker_keeps_ids_unique_per_camera_and_bounded(seed in 0u64..10_000, dropout in 0.0f64..0.4, duplicates in 0.0f64..0.3) {
        let scenario = generate(&small_scene(seed, dropout, duplicates)).unwrap();
        let provider = SimFeatureProvider::new(&scenario);
        let mut tracker = Tracker::new(scenario.rig.clone(), small_model(seed), PipelineConfig::default()).unwrap();
        let mut ingested = 0usize;
        let mut emitted = BTreeSet::new();
        for (frame, dets) in group_by_frame(&scenario.detections, Some(scenario.frames() as u64)) {
            ingested += dets.len();
            let out = tracker.step_frame(frame, &dets, Some(&provider)).unwrap();
            emitted.extend(out.records.iter().map(|r| r.track_id));
            let mut owners: BTreeMap<(String, u64), usize> = BTreeMap::new();
            for node in tracker.graph.nodes().filter(|n| n.kind == NodeKind::Tracklet && n.age == 0) {
                *owners.entry((node.camera.clone(), node.track_id.unwrap().0)).or_default() += 1;
            }
            prop_assert!(owners.values().all(|&c| c == 1), "frame {frame}: {owners:?}");
        }
        prop_assert!(emitted.len() <= ingested);
    }

    #[test]
    fn tracking_is_deterministic(seed in 0u64..10_000) {
        let scenario = generate(&small_scene(seed, 0.2, 0.1)).unwrap();
        let provider = SimFeatureProvider::new(&scenario);
        let cfg = PipelineConfig { enhance_detections: true, ..PipelineConfig::default() };
        let run = || run_tracking(&scenario.detections, Some(8), &scenario.rig, &small_model(seed), &cfg, Some(&provider)).unwrap();
        let (a, b) = (run(), run());
        prop_assert_eq!(&a.records, &b.records);
        prop_assert_eq!(&a.enhanced, &b.enhanced);
    }

    #[test]
    fn simulated_detections_pass_schema(seed in any::<u64>(), dropout in 0.0f64..0.5, duplicates in 0.0f64..0.5) {
        let cfg = small_scene(seed, dropout, duplicates);
        let scenario = generate(&cfg).unwrap();
        for d in &scenario.detections {
            prop_assert!(d.validate(cfg.feature_dim).is_ok(), "{d:?}");
        }
    }
}

#[test]
fn detection_noise_matches_configured_sigma() {
    let sigma = 0.2;
    let scenario = generate(&ScenarioConfig {
        noise: NoiseConfig {
            center: sigma,
            ..NoiseConfig::none()
        },
        seed: 17,
        ..ScenarioConfig::default()
    })
    .unwrap();
    let truth: BTreeMap<(u64, u64), [f64; 3]> = scenario
        .tracks
        .iter()
        .flat_map(|t| t.states.iter().map(move |s| ((s.frame, t.track_id), s.center)))
        .collect();
    let errors: Vec<f64> = scenario
        .detections
        .iter()
        .zip(&scenario.labels)
        .filter(|(_, l)| !l.duplicate)
        .flat_map(|(d, l)| {
            let c = truth[&(d.frame, l.track_id)];
            (0..3).map(move |k| (d.center[k] - c[k]).abs())
        })
        .collect();
    assert!(errors.len() >= 1000);
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    let expect = sigma * (2.0 / std::f64::consts::PI).sqrt();
    assert!(mean >= 0.8 * expect && mean <= 1.2 * expect, "mean {mean} vs {expect}");
}
