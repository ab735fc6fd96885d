use mimo_jscc::channel::ChannelRng;
use mimo_jscc::data::Dataset;
use mimo_jscc::error::Error;
use mimo_jscc::net::{Group, JsccNet, ModelConfig, ParameterStore, Variant};
use mimo_jscc::tensor::{Graph, Tensor};
use mimo_jscc::train::*;
use rand::{Rng, SeedableRng};

fn setup(steps: usize) -> (ModelConfig, TrainConfig, Dataset<f64>) {
    let model = ModelConfig::miniature();
    let cfg = TrainConfig {
        batch_size: 4,
        steps,
        ..TrainConfig::default()
    };
    (model, cfg, Dataset::procedural([3, 8, 8], 24, 5))
}

fn run(stages: &[Stage], steps: usize, master: u64) -> (Trained<f64>, Vec<LogRecord>) {
    let (model, cfg, data) = setup(steps);
    let mut done = Trained::new();
    let mut log = Vec::new();
    train_pipeline(
        &model,
        &cfg,
        &data,
        master,
        stages,
        &mut done,
        &mut |r| {
            log.push(r.clone());
            Ok(())
        },
        &mut |_, _| Ok(()),
    )
    .unwrap();
    (done, log)
}

#[test]
fn stage1_leaves_semantic_codec_bitwise_unchanged() {
    let (done, _) = run(
        &[Stage::PretrainBaseline, Stage::Stage1, Stage::NaiveFt],
        6,
        1,
    );
    let base = &done[&Stage::PretrainBaseline];
    for stage in [Stage::Stage1, Stage::NaiveFt] {
        let s = &done[&stage];
        for g in [Group::SemanticEnc, Group::SemanticDec] {
            let (a, b) = (base.group_values(g), s.group_values(g));
            assert!(!a.is_empty());
            assert!(
                a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()),
                "{stage} moved {g:?}"
            );
        }
        assert_ne!(
            base.group_values(Group::ChannelEnc),
            s.group_values(Group::ChannelEnc)
        );
    }
    let s1 = &done[&Stage::Stage1];
    assert!(s1.group_values(Group::AdaptorTx).iter().any(|v| *v != 0.0));
}

#[test]
fn stage2_leaves_teacher_bitwise_unchanged_and_moves_student() {
    let (model, cfg, data) = setup(4);
    let mut done = Trained::new();
    train_pipeline(
        &model,
        &cfg,
        &data,
        3,
        &[Stage::PretrainBaseline, Stage::Teacher, Stage::Stage1],
        &mut done,
        &mut |_| Ok(()),
        &mut |_, _| Ok(()),
    )
    .unwrap();
    let teacher_before = done[&Stage::Teacher].clone();
    assert_eq!(teacher_before.frozen_groups().len(), Group::ALL.len());
    let out = train_stage(
        Stage::Stage2,
        &model,
        &cfg,
        &data,
        3,
        &done,
        &mut |_| Ok(()),
    )
    .unwrap();
    assert!(done[&Stage::Teacher].values_equal(&teacher_before));
    assert!(!out.store.values_equal(&teacher_before));
    assert!(!out.store.values_equal(&done[&Stage::Stage1]));
    // all student groups train in Stage II
    for g in Group::ALL {
        assert_ne!(
            out.store.group_values(g),
            done[&Stage::Stage1].group_values(g),
            "{g:?}"
        );
    }
    assert!(out.log.iter().all(|r| r.kl > 0.0));
}

#[test]
fn pipeline_is_deterministic_from_master_seed() {
    let (a, la) = run(&Stage::ORDER, 3, 11);
    let (b, lb) = run(&Stage::ORDER, 3, 11);
    assert_eq!(a.len(), Stage::ORDER.len());
    for (s, store) in &a {
        assert!(store.values_equal(&b[s]), "{s}");
    }
    assert_eq!(la, lb);
    let (c, _) = run(&[Stage::PretrainBaseline], 3, 12);
    assert!(!c[&Stage::PretrainBaseline].values_equal(&a[&Stage::PretrainBaseline]));
}

#[test]
fn beta_zero_stage2_equals_unfrozen_stage1_training() {
    let (model, cfg, data) = setup(4);
    let cfg = TrainConfig { beta: 0.0, ..cfg };
    let mut done = Trained::new();
    train_pipeline(
        &model,
        &cfg,
        &data,
        5,
        &[Stage::PretrainBaseline, Stage::Teacher, Stage::Stage1],
        &mut done,
        &mut |_| Ok(()),
        &mut |_, _| Ok(()),
    )
    .unwrap();
    let student = done[&Stage::Stage1].clone();
    let teacher = &done[&Stage::Teacher];
    let with_kd = StageSpec::new(Stage::Stage2, &cfg, Some(teacher)).unwrap();
    let plain = StageSpec {
        distill: None,
        ..with_kd.clone()
    };
    assert!(plain.frozen.is_empty() && plain.batch == 2 * cfg.batch_size);
    let a = run_stage(
        &with_kd,
        &model,
        &cfg,
        student.clone(),
        &data,
        77,
        &mut |_| Ok(()),
    )
    .unwrap();
    let b = run_stage(&plain, &model, &cfg, student, &data, 77, &mut |_| Ok(())).unwrap();
    let la: Vec<f64> = a.log.iter().map(|r| r.loss).collect();
    let lb: Vec<f64> = b.log.iter().map(|r| r.loss).collect();
    assert_eq!(la, lb);
    assert!(a.store.values_equal(&b.store));
}

#[test]
fn kd_loss_with_identical_features_is_l1() {
    let mut rng = ChannelRng::seed_from_u64(2);
    let mut t = |shape: Vec<usize>| {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    };
    let (xh, x, zc, zs) = (
        t(vec![3, 12]),
        t(vec![3, 12]),
        t(vec![3, 4, 6]),
        t(vec![3, 2, 2, 2]),
    );
    for beta in [0.0, 0.5, 1.0, 7.0] {
        for order in [KlOrder::StudentFirst, KlOrder::TeacherFirst] {
            let mut g = Graph::<f64>::new();
            let (a, b, c, d) = (
                g.constant(xh.clone()),
                g.constant(x.clone()),
                g.param(zc.clone()),
                g.param(zs.clone()),
            );
            let k = kd_loss(&mut g, a, b, (c, d), (&zc, &zs), beta, order).unwrap();
            let total = g.value(k.total).item();
            let l1 = g.value(k.l1).item();
            assert!((total - l1).abs() <= 1e-12, "beta {beta}: {total} vs {l1}");
            assert!(g.value(k.kl).item().abs() <= 1e-12);
        }
    }
}

#[test]
fn adam_first_step_is_lr_times_sign() {
    // m̂ = g, v̂ = g², step = lr·g/(|g| + ε)
    let mut store = ParameterStore::<f64>::new();
    store
        .insert(
            "channel_enc.w",
            Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap(),
        )
        .unwrap();
    store
        .insert("semantic_enc.w", Tensor::new(vec![1], vec![4.0]).unwrap())
        .unwrap();
    store.freeze(Group::SemanticEnc);
    let mut adam = Adam::new(&store, AdamConfig::default());
    let grads = vec![Some(vec![0.3, -4.0, 1e-3]), Some(vec![9.0])];
    adam.step(&mut store, &grads, 0.01);
    let w = store.get("channel_enc.w").unwrap().data().to_vec();
    let expect = |p: f64, g: f64| p - 0.01 * g / (g.abs() + 1e-8);
    for ((got, p), g) in w.iter().zip([1.0, -2.0, 0.5]).zip([0.3, -4.0, 1e-3]) {
        assert!(
            (got - expect(p, g)).abs() < 1e-15,
            "{got} vs {}",
            expect(p, g)
        );
    }
    assert_eq!(store.get("semantic_enc.w").unwrap().data(), &[4.0]);
}

#[test]
fn cosine_schedule_endpoints_are_exact() {
    assert_eq!(cosine_lr(0, 100, 1e-3), 1e-3);
    assert_eq!(cosine_lr(100, 100, 1e-3), 0.0);
    assert!((cosine_lr(50, 100, 1e-3) - 5e-4).abs() < 1e-18);
}

#[test]
fn nan_loss_is_a_divergence_error() {
    let (model, cfg, data) = setup(3);
    let (_, mut store) = init_from::<f64>(&model, Variant::NoAdaptor, None, 1).unwrap();
    let name = store.entries()[0].name.clone();
    store.get_mut(&name).unwrap().data_mut()[0] = f64::NAN;
    let spec = StageSpec::new(Stage::PretrainBaseline, &cfg, None).unwrap();
    match run_stage(&spec, &model, &cfg, store, &data, 1, &mut |_| Ok(())) {
        Err(Error::Divergence { stage, step, .. }) => {
            assert_eq!((stage.as_str(), step), ("PRETRAIN_BASELINE", 0))
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn training_reduces_held_out_loss() {
    let (model, cfg, data) = setup(60);
    let (_, init) = init_from::<f64>(
        &model,
        Variant::NoAdaptor,
        None,
        stage_seed(2, Stage::PretrainBaseline),
    )
    .unwrap();
    let (done, _) = run(&[Stage::PretrainBaseline], 60, 2);
    let before = held_out_l1(&model, &cfg, &init, &data, 16, false, 9).unwrap();
    let after = held_out_l1(
        &model,
        &cfg,
        &done[&Stage::PretrainBaseline],
        &data,
        16,
        false,
        9,
    )
    .unwrap();
    assert!(after < before, "{after} !< {before}");
}

#[test]
fn stages_need_their_predecessors() {
    let (model, cfg, data) = setup(1);
    let done = Trained::<f64>::new();
    for s in [Stage::Teacher, Stage::Stage1, Stage::NaiveFt, Stage::Stage2] {
        assert!(
            matches!(
                train_stage(s, &model, &cfg, &data, 0, &done, &mut |_| Ok(())),
                Err(Error::Missing(_))
            ),
            "{s}"
        );
    }
}

#[test]
fn log_lines_round_trip_and_carry_every_field() {
    let (_, log) = run(&[Stage::PretrainBaseline], 2, 4);
    for r in &log {
        let line = r.to_line();
        for key in ["step", "stage", "loss", "l1", "kl", "lr", "seed"] {
            assert!(line.contains(&format!("\"{key}\"")), "{line}");
        }
        assert_eq!(&LogRecord::parse_line(&line).unwrap(), r);
    }
    assert_eq!(log[0].seed, stage_seed(4, Stage::PretrainBaseline));
}

#[test]
fn teacher_trains_on_perfect_csi_and_is_frozen() {
    let (done, log) = run(&[Stage::PretrainBaseline, Stage::Teacher], 3, 8);
    let t = &done[&Stage::Teacher];
    assert_eq!(t.frozen_groups().len(), 6);
    let model = ModelConfig::miniature();
    JsccNet::new(&model.with_variant(Variant::Hana))
        .unwrap()
        .check_store(t)
        .unwrap();
    assert!(log.iter().any(|r| r.stage == Stage::Teacher));
    let cfg = TrainConfig::default();
    let spec = StageSpec::<f64>::new(Stage::Teacher, &cfg, None).unwrap();
    assert!(spec.perfect_csi && spec.distill.is_none());
    assert_eq!(spec.frozen, vec![Group::SemanticEnc, Group::SemanticDec]);
}
