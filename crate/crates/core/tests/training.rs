mod common;

use avloc::data::{generate_synthetic, EventInstance, Subset, SubsetCounts, SyntheticSpec};
use avloc::inference::{decode_candidates, DecodeConfig};
use avloc::model::{forward, init_params, ModelConfig, ModelInput, RawPredictions};
use avloc::numerics::{ParamStore, SeededRng, Session, Tensor};
use avloc::training::*;
use proptest::prelude::*;

fn ev(label: usize, s: f64, e: f64) -> EventInstance {
    EventInstance {
        label_id: label,
        start_s: s,
        end_s: e,
    }
}

fn desk(levels: usize, classes: usize) -> ModelConfig {
    ModelConfig {
        pyramid_levels: levels,
        classes,
        ..Default::default()
    }
}

#[test]
fn assignment_matches_brute_force_oracle() {
    let tcfg = TrainConfig::default();
    for seed in 0..200 {
        let mut rng = SeededRng::new(seed);
        let levels = rng.int(1, 6);
        let classes = rng.int(1, 4);
        let len = rng.int(8, 64);
        let valid = rng.int(1, len);
        let hop = [0.32, 0.5, 1.0][rng.int(0, 2)];
        let events = common::random_events(&mut rng, valid, hop, classes);
        let cfg = desk(levels, classes);
        let grid = PyramidGrid::new(&cfg, len, valid, hop, 0.0);
        let got = assign_targets(&events, &grid, &tcfg).unwrap();
        let want = common::brute_force_assignment(&events, valid, levels, classes, hop, &tcfg.level_ranges);
        let mut flat = Vec::new();
        for (l, lt) in got.levels.iter().enumerate() {
            for p in &lt.positives {
                flat.push((l, p.step, p.class, p.start, p.end));
                assert_eq!(lt.labels[p.step * classes + p.class], 1.0);
                assert!(p.start >= 0.0 && p.end >= 0.0 && p.start + p.end > 0.0);
            }
            assert_eq!(lt.labels.iter().sum::<f64>() as usize, lt.positives.len());
        }
        assert_eq!(flat.len(), want.len(), "seed {seed}");
        for (a, b) in flat.iter().zip(&want) {
            assert_eq!((a.0, a.1, a.2), (b.0, b.1, b.2), "seed {seed}");
            assert!((a.3 - b.3).abs() < 1e-12 && (a.4 - b.4).abs() < 1e-12);
        }
    }
}

#[test]
fn whole_sequence_event_lands_on_the_top_band() {
    let cfg = desk(4, 2);
    let grid = PyramidGrid::new(&cfg, 64, 64, 0.32, 0.0);
    let t = assign_targets(&[ev(1, 0.0, 64.0 * 0.32)], &grid, &TrainConfig::default()).unwrap();
    // Every step is at least 32 base steps from one boundary.
    let counts: Vec<usize> = t.levels.iter().map(|l| l.positives.len()).collect();
    assert_eq!(counts, vec![0, 0, 0, 8]);
    assert!(t.skipped.is_empty());
}

#[test]
fn event_between_step_centers_is_skipped() {
    let cfg = desk(3, 2);
    let grid = PyramidGrid::new(&cfg, 16, 16, 1.0, 0.0);
    // Centers sit at 0.5, 1.5, ...; this event covers none of them.
    let t = assign_targets(&[ev(0, 0.6, 1.4), ev(1, 2.0, 5.0)], &grid, &TrainConfig::default()).unwrap();
    assert_eq!(t.skipped, vec![0]);
    assert!(t.levels.iter().flat_map(|l| &l.positives).all(|p| p.event == 1));
}

#[test]
fn events_beyond_the_span_are_dropped() {
    let cfg = desk(2, 1);
    let grid = PyramidGrid::new(&cfg, 8, 8, 1.0, 0.0);
    let t = assign_targets(&[ev(0, 9.0, 12.0), ev(0, 1.0, 3.0)], &grid, &TrainConfig::default()).unwrap();
    assert_eq!(t.dropped, vec![0]);
    assert!(t.skipped.is_empty());
}

#[test]
fn overlapping_classes_are_both_positive() {
    let cfg = desk(1, 3);
    let grid = PyramidGrid::new(&cfg, 8, 8, 1.0, 0.0);
    let t = assign_targets(&[ev(0, 1.0, 4.0), ev(2, 2.0, 6.0)], &grid, &TrainConfig::default()).unwrap();
    let at: Vec<_> = t.levels[0].positives.iter().filter(|p| p.step == 3).collect();
    assert_eq!(at.len(), 2);
    assert_eq!((at[0].class, at[0].start, at[0].end), (0, 2.5, 0.5));
    assert_eq!((at[1].class, at[1].start, at[1].end), (2, 1.5, 2.5));
}

#[test]
fn shortest_same_class_event_wins() {
    let cfg = desk(1, 1);
    let grid = PyramidGrid::new(&cfg, 8, 8, 1.0, 0.0);
    let t = assign_targets(&[ev(0, 0.0, 7.0), ev(0, 2.0, 4.0)], &grid, &TrainConfig::default()).unwrap();
    let p = t.levels[0].positives.iter().find(|p| p.step == 3).unwrap();
    assert_eq!(p.event, 1);
    assert_eq!((p.start, p.end), (1.5, 0.5));
}

#[test]
fn center_sampling_restricts_positives() {
    let cfg = desk(1, 1);
    let grid = PyramidGrid::new(&cfg, 16, 16, 1.0, 0.0);
    let tcfg = TrainConfig {
        center_sampling: Some(1.0),
        ..Default::default()
    };
    let t = assign_targets(&[ev(0, 4.0, 10.0)], &grid, &tcfg).unwrap();
    let steps: Vec<usize> = t.levels[0].positives.iter().map(|p| p.step).collect();
    assert_eq!(steps, vec![6, 7]);
}

#[test]
fn decoding_assigned_targets_recovers_boundaries() {
    let tcfg = TrainConfig::default();
    let dcfg = DecodeConfig {
        score_threshold: 0.0,
        pre_nms_top_k: usize::MAX,
        ..Default::default()
    };
    for seed in 0..200 {
        let mut rng = SeededRng::new(1000 + seed);
        let hop = 0.32;
        let len = rng.int(16, 64);
        let cfg = desk(4, 3);
        let events = common::random_events(&mut rng, len, hop, 3);
        let grid = PyramidGrid::new(&cfg, 64, len, hop, 0.0);
        let t = assign_targets(&events, &grid, &tcfg).unwrap();
        let raw = common::raw_from_targets(&t, hop as f32, 0.0);
        let cands = decode_candidates("v", &raw, len as f64 * hop, &dcfg);
        let positives: Vec<(usize, &Positive)> = t
            .levels
            .iter()
            .enumerate()
            .flat_map(|(l, lt)| lt.positives.iter().map(move |p| (l, p)))
            .collect();
        assert_eq!(cands.len(), positives.len());
        for (c, (l, p)) in cands.iter().zip(positives) {
            let e = &events[p.event];
            let tol = 0.5 * hop * (1 << l) as f64;
            assert_eq!(c.label_id, e.label_id);
            assert!((c.start_s - e.start_s).abs() <= tol && (c.end_s - e.end_s).abs() <= tol);
        }
    }
}

#[test]
fn focal_loss_reference_values() {
    let want = 0.25 * 0.01 * -(0.9f64.ln());
    assert!((focal_loss(0.9, 1.0, 0.25, 2.0) - want).abs() < 1e-15);
    assert!((want - 2.634e-4).abs() < 1e-7);
    assert!(focal_loss(1.0 - 1e-9, 1.0, 0.25, 2.0) < 1e-12);
    for p in [0.1, 0.4, 0.77] {
        for y in [0.0, 1.0] {
            let bce = -(y * f64::ln(p) + (1.0 - y) * f64::ln(1.0 - p));
            assert!((focal_loss(p, y, 0.5, 0.0) - 0.5 * bce).abs() < 1e-15);
        }
    }
}

#[test]
fn giou_reference_values() {
    assert_eq!(giou_loss((1.0, 1.0), (2.0, 2.0)).unwrap(), 0.5);
    assert_eq!(giou_loss((1.5, 0.3), (1.5, 0.3)).unwrap(), 0.0);
    assert!(giou_loss((1.0, 1.0), (0.0, 0.0)).is_err());
}

proptest! {
    #[test]
    fn anchored_giou_is_at_most_one(ps in 0.0f64..50.0, pe in 0.0f64..50.0, ts in 0.0f64..50.0, te in 0.01f64..50.0) {
        let l = giou_loss((ps, pe), (ts, te)).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&l));
    }
}

fn toy_assignment() -> (TargetAssignment, ModelConfig) {
    let cfg = ModelConfig {
        pyramid_levels: 2,
        classes: 3,
        ..Default::default()
    };
    let grid = PyramidGrid::new(&cfg, 12, 10, 1.0, 0.0);
    let t = assign_targets(&[ev(0, 0.0, 3.0), ev(2, 1.0, 9.5), ev(1, 4.0, 5.0)], &grid, &TrainConfig::default()).unwrap();
    (t, cfg)
}

fn random_raw(t: &TargetAssignment, seed: u64) -> RawPredictions {
    let mut raw = common::raw_from_targets(t, 1.0, 0.0);
    let mut rng = SeededRng::new(seed);
    for l in raw.levels.iter_mut() {
        l.probs.data_mut().iter_mut().for_each(|p| *p = rng.range(0.01, 0.99) as f32);
        l.distances.data_mut().iter_mut().for_each(|d| *d = rng.range(0.0, 4.0) as f32);
    }
    raw
}

#[test]
fn loss_terms_follow_their_definitions() {
    let (t, _) = toy_assignment();
    assert!(t.num_positives() > 0);
    let raw = random_raw(&t, 1);
    let cfg = TrainConfig::default();
    let lb = total_loss(&raw, &t, &cfg).unwrap();
    assert_eq!(lb.steps, 10 + 5);
    assert!((lb.total - (lb.cls / 15.0 + lb.reg / lb.positives as f64)).abs() < 1e-12);
    let no_reg = total_loss(&raw, &t, &TrainConfig { lambda: 0.0, ..cfg.clone() }).unwrap();
    assert!((no_reg.total - lb.cls / 15.0).abs() < 1e-12);
    let perfect = total_loss(&common::raw_from_targets(&t, 1.0, 0.0), &t, &cfg).unwrap();
    assert!(perfect.reg < 1e-6);
    assert!(perfect.cls < 1e-4 * perfect.steps as f64);
}

#[test]
fn classification_term_is_equivariant_under_relabeling() {
    let (t, _) = toy_assignment();
    let raw = random_raw(&t, 2);
    let perm = [2usize, 0, 1];
    let c = 3;
    let mut t2 = t.clone();
    let mut raw2 = raw.clone();
    for (lt, (lt2, (lv, lv2))) in t.levels.iter().zip(t2.levels.iter_mut().zip(raw.levels.iter().zip(raw2.levels.iter_mut()))) {
        let n = lt.len;
        for i in 0..n {
            for (k, &pk) in perm.iter().enumerate() {
                lt2.labels[i * c + pk] = lt.labels[i * c + k];
                lv2.probs.data_mut()[i * c + pk] = lv.probs.data()[i * c + k];
                for side in 0..2 {
                    lv2.distances.data_mut()[(side * c + pk) * n + i] = lv.distances.data()[(side * c + k) * n + i];
                }
            }
        }
        for p in lt2.positives.iter_mut() {
            p.class = perm[p.class];
        }
    }
    let a = total_loss(&raw, &t, &TrainConfig::default()).unwrap();
    let b = total_loss(&raw2, &t2, &TrainConfig::default()).unwrap();
    assert!((a.total - b.total).abs() < 1e-12);
}

fn tiny() -> ModelConfig {
    ModelConfig::tiny()
}

fn tiny_input(seed: u64, valid: usize) -> ModelInput<f64> {
    let mut rng = SeededRng::new(seed);
    let mut gen = |d: usize| Tensor::new(vec![8, d], (0..8 * d).map(|_| rng.normal()).collect()).unwrap();
    let (audio, visual) = (gen(4), gen(5));
    ModelInput {
        audio,
        visual,
        mask: (0..8).map(|i| if i < valid { 1.0 } else { 0.0 }).collect(),
    }
}

#[test]
fn graph_loss_matches_detached_loss() {
    let cfg = tiny();
    let store: ParamStore<f64> = init_params(&cfg, 3).unwrap().cast();
    let input = tiny_input(4, 7);
    let grid = PyramidGrid::new(&cfg, 8, 7, 1.0, 0.0);
    let tcfg = TrainConfig::default();
    let t = assign_targets(&[ev(0, 0.2, 3.7), ev(2, 2.0, 6.5)], &grid, &tcfg).unwrap();
    let mut s = Session::new(&store);
    let out = forward(&mut s, &cfg, &input).unwrap();
    let sums = loss_sums(&mut s.graph, &out, &t, &tcfg).unwrap();
    let loss = weighted_loss(&mut s.graph, sums, t.valid_steps() as f64, t.num_positives(), 1.0).unwrap();
    let raw = RawPredictions {
        levels: out
            .levels
            .iter()
            .enumerate()
            .map(|(l, lo)| avloc::model::LevelPredictions {
                probs: s.graph.value(lo.cls).cast(),
                distances: avloc::model::distances_to_planes(&s.graph.value(lo.reg).cast(), 3).unwrap(),
                valid_len: lo.valid_len,
                scale: cfg.level_scale(l),
            })
            .collect(),
        hop_s: 1.0,
        offset_s: 0.0,
    };
    let lb = total_loss(&raw, &t, &tcfg).unwrap();
    assert!((s.graph.value(loss).data()[0] - lb.total).abs() < 1e-5);
}

#[test]
fn end_to_end_gradient_check() {
    let report = end_to_end_grad_check(1e-3, None, 7).unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
    let store = init_params(&ModelConfig::tiny(), 11).unwrap();
    assert_eq!(report.checked, store.count());
}

#[test]
fn no_positives_means_no_regression_gradient() {
    let cfg = tiny();
    let store: ParamStore<f64> = init_params(&cfg, 1).unwrap().cast();
    let grid = PyramidGrid::new(&cfg, 8, 8, 1.0, 0.0);
    let tcfg = TrainConfig::default();
    let t = assign_targets(&[], &grid, &tcfg).unwrap();
    let mut s = Session::new(&store);
    let out = forward(&mut s, &cfg, &tiny_input(2, 8)).unwrap();
    let sums = loss_sums(&mut s.graph, &out, &t, &tcfg).unwrap();
    assert!(sums.1.is_none());
    let loss = weighted_loss(&mut s.graph, sums, 12.0, 0, 1.0).unwrap();
    s.graph.backward(loss).unwrap();
    for (name, g) in s.gradients() {
        if name.starts_with("heads.reg") {
            assert!(g.iter().all(|&v| v == 0.0), "{name}");
        }
    }
}

#[test]
fn schedule_warms_up_then_decays_to_zero() {
    let base = 1e-3;
    assert_eq!(learning_rate(50, 400, 50, base), base);
    assert!((learning_rate(25, 400, 50, base) - base / 2.0).abs() < 1e-15);
    assert!(learning_rate(400, 400, 50, base) < 1e-12);
    let mut prev = base;
    for step in 51..=400 {
        let lr = learning_rate(step, 400, 50, base);
        assert!(lr <= prev);
        prev = lr;
    }
}

#[test]
fn first_adam_step_moves_each_weight_by_lr() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::new(vec![2], vec![1.0f32, -2.0]).unwrap()).unwrap();
    store.get_mut("w").unwrap().grad = vec![0.3, -7.0];
    let mut adam = Adam::new(0.9, 0.999, 1e-8, 0.0);
    adam.update(&mut store, 0.01);
    let v = store.value("w").unwrap().data();
    assert!((v[0] - 0.99).abs() < 1e-6 && (v[1] + 1.99).abs() < 1e-6);
}

#[test]
fn invalid_train_config_is_rejected() {
    let bad = TrainConfig {
        level_ranges: vec![0.0, 4.0, 4.0],
        ..Default::default()
    };
    assert!(bad.validate(3).is_err());
    assert!(TrainConfig::default().validate(7).is_err());
    assert!(TrainConfig {
        lambda: -1.0,
        ..Default::default()
    }
    .validate(2)
    .is_err());
}

fn small_corpus() -> (Vec<Sample>, Vec<Sample>, ModelConfig) {
    let spec = SyntheticSpec {
        classes: 3,
        videos: SubsetCounts {
            train: 10,
            val: 3,
            test: 3,
        },
        min_steps: 12,
        max_steps: 16,
        audio_dim: 4,
        visual_dim: 4,
        min_event_steps: 2,
        max_event_steps: 6,
        ..Default::default()
    };
    let corpus = generate_synthetic(&spec).unwrap();
    let cfg = ModelConfig {
        audio_dim: 4,
        visual_dim: 4,
        classes: 3,
        max_len: 16,
        ..tiny()
    };
    (
        corpus_samples(&corpus, Subset::Train, 16).unwrap(),
        corpus_samples(&corpus, Subset::Val, 16).unwrap(),
        cfg,
    )
}

#[test]
fn fit_is_deterministic_and_writes_its_log() {
    let (train, val, cfg) = small_corpus();
    let tcfg = TrainConfig {
        epochs: 2,
        warmup_epochs: 1,
        lr: 1e-3,
        batch_size: 4,
        ..Default::default()
    };
    let dcfg = DecodeConfig::default();
    let dir = tempfile::tempdir().unwrap();
    let a = fit(&cfg, &tcfg, &dcfg, &train, &val, Some(dir.path())).unwrap();
    let b = fit(&cfg, &TrainConfig { threads: 2, ..tcfg.clone() }, &dcfg, &train, &val, None).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.last.params.value("heads.cls.conv2.b").unwrap(), b.last.params.value("heads.cls.conv2.b").unwrap());
    let log = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    for key in ["epoch", "lr", "train_loss", "cls", "reg", "val_avg_mAP"] {
        assert!(lines[0].get(key).is_some(), "{key}");
    }
    assert!(dir.path().join("checkpoint.davt").exists());
    let reloaded = avloc::model::Model::load(&dir.path().join("checkpoint.davt")).unwrap();
    assert_eq!(reloaded.params.value("heads.cls.conv2.b").unwrap(), a.best.params.value("heads.cls.conv2.b").unwrap());
}

#[test]
fn fit_rejects_empty_training_set() {
    let (_, val, cfg) = small_corpus();
    assert!(fit(&cfg, &TrainConfig::default(), &DecodeConfig::default(), &[], &val, None).is_err());
}
