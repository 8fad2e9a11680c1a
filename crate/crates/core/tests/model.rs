use avloc::data::FeatureStreams;
use avloc::model::*;
use avloc::numerics::{ParamStore, SeededRng, Session, Tensor};
use proptest::prelude::*;

fn tiny() -> ModelConfig {
    ModelConfig {
        audio_dim: 5,
        visual_dim: 7,
        embed_dim: 8,
        unimodal_blocks: 1,
        pyramid_levels: 2,
        heads: 4,
        classes: 3,
        hidden_classes: 2,
        dependency_dim: 4,
        dependency_heads: 4,
        ffn_ratio: 2,
        max_len: 8,
        ..Default::default()
    }
}

fn random_input(cfg: &ModelConfig, t: usize, valid: usize, seed: u64) -> ModelInput<f64> {
    let mut rng = SeededRng::new(seed);
    let mut gen = |d: usize| Tensor::new(vec![t, d], (0..t * d).map(|_| rng.normal()).collect()).unwrap();
    let audio = gen(cfg.audio_dim);
    let visual = gen(cfg.visual_dim);
    ModelInput {
        audio,
        visual,
        mask: (0..t).map(|i| if i < valid { 1.0 } else { 0.0 }).collect(),
    }
}

fn params64(cfg: &ModelConfig, seed: u64) -> ParamStore<f64> {
    init_params(cfg, seed).unwrap().cast()
}

#[test]
fn level_lengths_halve_with_ceiling() {
    let cfg = ModelConfig::default();
    assert_eq!(cfg.level_lengths(224), vec![224, 112, 56, 28, 14, 7]);
    let desk = ModelConfig {
        pyramid_levels: 4,
        ..Default::default()
    };
    assert_eq!(desk.level_lengths(64), vec![64, 32, 16, 8]);
    assert_eq!(desk.level_lengths(45), vec![45, 23, 12, 6]);
    let flat = ModelConfig {
        temporal_downsampling: false,
        pyramid_levels: 3,
        ..Default::default()
    };
    assert_eq!(flat.level_lengths(10), vec![10, 10, 10]);
    assert_eq!(desk.level_scale(3), 8);
}

#[test]
fn tiny_forward_shapes() {
    let cfg = tiny();
    let store = params64(&cfg, 1);
    let input = random_input(&cfg, 8, 8, 2);
    let mut s = Session::new(&store);
    let out = forward(&mut s, &cfg, &input).unwrap();
    let lens: Vec<_> = out.levels.iter().map(|l| s.graph.shape(l.cls).to_vec()).collect();
    assert_eq!(lens, vec![vec![8, 3], vec![4, 3]]);
    for (lvl, refined) in out.pyramid.iter().zip(&out.refined) {
        assert_eq!(s.graph.shape(lvl.features)[1], 16);
        assert_eq!(s.graph.shape(lvl.features), s.graph.shape(*refined));
    }
    for l in &out.levels {
        let planes = distances_to_planes(s.graph.value(l.reg), 3).unwrap();
        assert_eq!(planes.shape(), [2, 3, s.graph.shape(l.cls)[0]]);
        assert!(s.graph.value(l.cls).data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        assert!(planes.data().iter().all(|&d| d >= 0.0));
    }
}

#[test]
fn projection_of_zero_input_with_zero_bias_is_zero() {
    let cfg = tiny();
    let mut store = params64(&cfg, 3);
    for (name, p) in store.iter_mut() {
        if name.starts_with("proj.") && name.ends_with(".b") {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let input = ModelInput {
        audio: Tensor::zeros(&[8, 5]),
        visual: Tensor::zeros(&[8, 7]),
        mask: vec![1.0; 8],
    };
    let mut s = Session::new(&store);
    let (a, v) = project_inputs(&mut s, &cfg, &input).unwrap();
    assert!(s.graph.value(a).data().iter().all(|&x| x == 0.0));
    assert!(s.graph.value(v).data().iter().all(|&x| x == 0.0));
}

#[test]
fn projection_rejects_wrong_feature_width() {
    let cfg = tiny();
    let store = params64(&cfg, 3);
    let mut input = random_input(&cfg, 8, 8, 1);
    input.audio = Tensor::zeros(&[8, 6]);
    let mut s = Session::new(&store);
    let err = project_inputs(&mut s, &cfg, &input).unwrap_err();
    assert!(err.to_string().contains("forward"), "{err}");
}

#[test]
fn zero_unimodal_blocks_only_add_positions() {
    let cfg = ModelConfig {
        unimodal_blocks: 0,
        use_positional: false,
        ..tiny()
    };
    let store = params64(&cfg, 3);
    let input = random_input(&cfg, 8, 8, 5);
    let mut s = Session::new(&store);
    let (a, v) = project_inputs(&mut s, &cfg, &input).unwrap();
    let (a2, v2) = encode_unimodal(&mut s, &cfg, a, v, &input.mask).unwrap();
    assert_eq!(s.graph.value(a), s.graph.value(a2));
    assert_eq!(s.graph.value(v), s.graph.value(v2));
}

#[test]
fn heads_and_dependency_are_shared_across_levels() {
    let mut cfg = tiny();
    let names = |cfg: &ModelConfig| -> Vec<String> { param_specs(cfg).into_iter().map(|p| p.name).collect() };
    let two = names(&cfg);
    cfg.pyramid_levels = 5;
    let five = names(&cfg);
    let shared = |v: &[String]| -> Vec<String> {
        v.iter()
            .filter(|n| n.starts_with("heads.") || n.starts_with("dependency."))
            .cloned()
            .collect()
    };
    assert_eq!(shared(&two), shared(&five));
    // Every bound parameter is a single leaf no matter how many levels use it.
    let store = params64(&cfg, 1);
    let input = random_input(&cfg, 16, 13, 2);
    let mut s = Session::new(&store);
    forward(&mut s, &cfg, &input).unwrap();
    assert_eq!(s.bound().len(), store.len());
}

#[test]
fn padded_tail_does_not_leak_into_valid_steps() {
    let cfg = tiny();
    let store = params64(&cfg, 11);
    let base = random_input(&cfg, 8, 5, 3);
    let mut other = base.clone();
    for r in 5..8 {
        for j in 0..cfg.audio_dim {
            other.audio.data_mut()[r * cfg.audio_dim + j] = 100.0 + r as f64;
        }
        for j in 0..cfg.visual_dim {
            other.visual.data_mut()[r * cfg.visual_dim + j] = -50.0;
        }
    }
    let run = |inp: &ModelInput<f64>| {
        let mut s = Session::new(&store);
        let out = forward(&mut s, &cfg, inp).unwrap();
        out.levels
            .iter()
            .map(|l| {
                let c = s.graph.value(l.cls);
                let r = s.graph.value(l.reg);
                (c.data()[..l.valid_len * 3].to_vec(), r.data()[..l.valid_len * 6].to_vec())
            })
            .collect::<Vec<_>>()
    };
    let (a, b) = (run(&base), run(&other));
    for ((ca, ra), (cb, rb)) in a.iter().zip(&b) {
        for (x, y) in ca.iter().chain(ra).zip(cb.iter().chain(rb)) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }
}

#[test]
fn padding_length_does_not_change_valid_outputs() {
    let cfg = ModelConfig {
        use_positional: true,
        ..tiny()
    };
    let store = params64(&cfg, 4);
    let short = random_input(&cfg, 8, 6, 9);
    let mut long = random_input(&cfg, 12, 6, 9);
    long.audio.data_mut()[..8 * 5].copy_from_slice(short.audio.data());
    long.visual.data_mut()[..8 * 7].copy_from_slice(short.visual.data());
    let probs = |inp: &ModelInput<f64>| {
        let mut s = Session::new(&store);
        let out = forward(&mut s, &cfg, inp).unwrap();
        let l = &out.levels[1];
        s.graph.value(l.cls).data()[..l.valid_len * 3].to_vec()
    };
    let (a, b) = (probs(&short), probs(&long));
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn dependency_preserves_shape_and_collapses_without_branches() {
    let cfg = ModelConfig {
        simultaneous_branch: false,
        consecutive_branch: false,
        ..tiny()
    };
    let specs = param_specs(&cfg);
    assert!(specs.iter().any(|p| p.name == "dependency.in.w"));
    assert!(!specs.iter().any(|p| p.name.starts_with("dependency.simultaneous")));
    let store = params64(&cfg, 2);
    let mut s = Session::new(&store);
    let z = s.graph.constant(Tensor::full(&[4, 16], 0.5)).unwrap();
    let out = model_dependencies(&mut s, &cfg, z, &[1.0, 1.0, 1.0, 0.0]).unwrap();
    assert_eq!(s.graph.shape(out), [4, 16]);
    // With no branches the module is z + out(in(z)).
    let w_in = store.value("dependency.in.w").unwrap();
    let b_in = store.value("dependency.in.b").unwrap();
    let w_out = store.value("dependency.out.w").unwrap();
    let b_out = store.value("dependency.out.b").unwrap();
    let hidden: Vec<f64> = (0..8)
        .map(|j| b_in.data()[j] + (0..16).map(|i| 0.5 * w_in.at(&[i, j])).sum::<f64>())
        .collect();
    for c in 0..16 {
        let want = 0.5 + b_out.data()[c] + (0..8).map(|j| hidden[j] * w_out.at(&[j, c])).sum::<f64>();
        assert!((s.graph.value(out).at(&[0, c]) - want).abs() < 1e-12);
        assert_eq!(s.graph.value(out).at(&[3, c]), 0.0);
    }
}

#[test]
fn class_agnostic_regression_repeats_across_classes() {
    let cfg = ModelConfig {
        class_aware_regression: false,
        ..tiny()
    };
    let store = params64(&cfg, 5);
    let input = random_input(&cfg, 8, 8, 1);
    let mut s = Session::new(&store);
    let out = forward(&mut s, &cfg, &input).unwrap();
    let planes = distances_to_planes(s.graph.value(out.levels[0].reg), 3).unwrap();
    for k in 0..2 {
        for t in 0..8 {
            let a = planes.at(&[k, 0, t]);
            assert!((1..3).all(|c| planes.at(&[k, c, t]) == a));
        }
    }
}

#[test]
fn initial_scores_start_near_the_prior() {
    let cfg = tiny();
    let store = params64(&cfg, 8);
    let input = random_input(&cfg, 8, 8, 4);
    let mut s = Session::new(&store);
    let out = forward(&mut s, &cfg, &input).unwrap();
    let p = s.graph.value(out.levels[0].cls).data();
    let mean = p.iter().sum::<f64>() / p.len() as f64;
    assert!(mean < 0.1, "mean initial score {mean}");
}

#[test]
fn invalid_config_is_rejected() {
    let cfg = ModelConfig {
        embed_dim: 10,
        heads: 4,
        ..tiny()
    };
    assert!(init_params(&cfg, 0).is_err());
    let cfg = ModelConfig {
        pyramid_levels: 0,
        ..tiny()
    };
    assert!(cfg.validate().is_err());
}

#[test]
fn predict_and_checkpoint_round_trip() {
    let cfg = tiny();
    let model = Model::new(cfg.clone(), 6).unwrap();
    let mut rng = SeededRng::new(1);
    let mut gen = |d: usize| Tensor::new(vec![6, d], (0..6 * d).map(|_| rng.normal() as f32).collect()).unwrap();
    let streams = FeatureStreams::new(gen(5), gen(7), 0.32, 0.0).unwrap();
    let raw = model.predict(&streams).unwrap();
    assert_eq!(raw.levels.len(), 2);
    assert_eq!(raw.levels[0].valid_len, 6);
    assert_eq!(raw.levels[1].valid_len, 3);
    assert_eq!(raw.levels[1].scale, 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("checkpoint.davt");
    model.save(&path).unwrap();
    let back = Model::load(&path).unwrap();
    assert_eq!(back.config, cfg);
    assert_eq!(back.predict(&streams).unwrap(), raw);
}

#[test]
fn checkpoint_for_other_config_is_rejected() {
    let model = Model::new(tiny(), 6).unwrap();
    let other = ModelConfig {
        use_dependency: false,
        ..tiny()
    };
    assert!(Model::from_params(other, model.params.clone()).is_err());
}

#[test]
fn positional_table_is_sinusoidal() {
    let pe = positional_encoding(3, 4);
    assert_eq!(&pe[0..4], &[0.0, 1.0, 0.0, 1.0]);
    assert!((pe[4] - 1f64.sin()).abs() < 1e-15);
    assert!((pe[7] - (1.0 / 100f64).cos()).abs() < 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn forward_is_deterministic(valid in 1usize..=8, seed in 0u64..1000) {
        let cfg = tiny();
        let store = params64(&cfg, seed);
        let input = random_input(&cfg, 8, valid, seed + 1);
        let run = || {
            let mut s = Session::new(&store);
            let out = forward(&mut s, &cfg, &input).unwrap();
            s.graph.value(out.levels[1].reg).clone()
        };
        prop_assert_eq!(run(), run());
    }
}
