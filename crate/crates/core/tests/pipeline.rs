mod common;

use common::{random_model, small_config, tiny_config, tiny_task};
use rosita_core::distillation::KdConfig;
use rosita_core::io::{decode_checkpoint, encode_checkpoint, read_ndjson, Checkpoint, MetricsLog, RecordKind};
use rosita_core::model::{Model, ModelConfig};
use rosita_core::pipeline::*;
use rosita_core::pruning::{apply_surgery, ArchitectureTarget, Removal, UnitId};

fn grads_of_square(model: &Model) -> rosita_core::model::ParamStore {
    // L = Σ w², ∂L/∂w = 2w
    let mut g = model.params.clone();
    g.visit_mut(|_, t| t.data_mut().iter_mut().for_each(|x| *x *= 2.0));
    g
}

#[test]
fn adam_matches_hand_iterated_scalar_updates() {
    let config = small_config(1, 1, 2, 2, 0, 3);
    let mut model = random_model(&config, 1);
    let start = model.params.clone();
    let mut state = AdamState::new(AdamConfig::default(), &model.params);
    let lr = 0.01;
    for _ in 0..3 {
        let g = grads_of_square(&model);
        adam_step(&mut model.params, &g, &mut state, lr).unwrap();
    }
    // independent scalar oracle
    let oracle = |mut w: f64| {
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=3 {
            let g = 2.0 * w;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= lr * mh / (vh.sqrt() + 1e-8);
        }
        w
    };
    for (a, b) in model.params.leaves().iter().zip(start.leaves()) {
        for (x, w0) in a.data().iter().zip(b.data()) {
            assert!((x - oracle(*w0)).abs() < 1e-10);
        }
    }
    assert_eq!(state.step, 3);
}

#[test]
fn adam_first_step_size_is_lr() {
    let config = small_config(1, 1, 2, 2, 0, 3);
    let mut model = random_model(&config, 2);
    let before = model.params.clone();
    let mut state = AdamState::new(AdamConfig::default(), &model.params);
    let g = grads_of_square(&model);
    adam_step(&mut model.params, &g, &mut state, 1e-3).unwrap();
    for (a, b) in model.params.leaves().iter().zip(before.leaves()) {
        for (x, w) in a.data().iter().zip(b.data()) {
            if w.abs() > 1e-3 {
                assert!(((x - w) + 1e-3 * w.signum()).abs() < 1e-9);
            }
        }
    }

    let mut frozen = model.clone();
    let mut st = AdamState::new(AdamConfig::default(), &frozen.params);
    let zero = frozen.params.zeros_like();
    adam_step(&mut frozen.params, &zero, &mut st, 1e-3).unwrap();
    assert_eq!(frozen.params, model.params);
}

#[test]
fn adam_rejects_non_finite_gradients_without_mutation() {
    let config = small_config(1, 1, 2, 2, 0, 3);
    let mut model = random_model(&config, 3);
    let mut state = AdamState::new(AdamConfig::default(), &model.params);
    let mut g = grads_of_square(&model);
    g.layers[0].w_fo.data_mut()[1] = f64::NAN;
    let (p0, s0) = (model.params.clone(), state.clone());
    assert!(adam_step(&mut model.params, &g, &mut state, 1e-3).is_err());
    assert_eq!(model.params, p0);
    assert_eq!(state, s0);
}

#[test]
fn optimizer_moments_follow_surgery() {
    let config = small_config(4, 2, 16, 24, 0, 20);
    let mut model = random_model(&config, 4);
    let mut state = AdamState::new(AdamConfig::default(), &model.params);
    let g = grads_of_square(&model);
    adam_step(&mut model.params, &g, &mut state, 1e-3).unwrap();
    let old_m = state.m.clone();
    let set = vec![UnitId::head(0, 1), UnitId::head(1, 3), UnitId::neuron(0, 5), UnitId::neuron(1, 0)];
    let plan = apply_surgery(&mut model, &set).unwrap();
    state.apply_surgery(&plan).unwrap();
    for (m, p) in state.m.leaves().iter().zip(model.params.leaves()) {
        assert_eq!(m.shape(), p.shape());
    }
    // neuron 6 of layer 0 is now at index 5; its moment moved with it
    assert_eq!(state.m.layers[0].b_fi.data()[5], old_m.layers[0].b_fi.data()[6]);
    assert_eq!(state.m.layers[0].w_fo.row(5), old_m.layers[0].w_fo.row(6));
    let g = grads_of_square(&model);
    adam_step(&mut model.params, &g, &mut state, 1e-3).unwrap();
}

#[test]
fn learning_rate_schedules() {
    let lin = LrSchedule {
        kind: LrKind::LinearDecay,
        base_lr: 2e-5,
        total_steps: 1000,
    };
    assert_eq!(lr_at(&lin, 0).unwrap(), 2e-5);
    assert!((lr_at(&lin, 500).unwrap() - 1e-5).abs() < 1e-18);
    assert_eq!(lr_at(&lin, 1000).unwrap(), 0.0);
    let c = LrSchedule {
        kind: LrKind::Constant,
        ..lin
    };
    assert_eq!(lr_at(&c, 999).unwrap(), 2e-5);
}

#[test]
fn schedule_reference_run() {
    let cfg = ModelConfig::bert_base();
    let target = ArchitectureTarget {
        heads: 2,
        layers: 12,
        intermediate: 512,
        rank: 128,
    };
    let s = PruneSchedule {
        total_steps: 10_000,
        prune_fraction: 0.1,
        n_events: 10,
        per_event: Some(Removal {
            heads_per_layer: 1,
            neurons_per_layer: 256,
            ranks: 64,
            layers: 0,
        }),
    };
    let events = schedule_events(&s, &cfg, &target).unwrap();
    assert_eq!(events.iter().map(|e| e.step).collect::<Vec<_>>(), (1..=10).map(|k| 100 * k).collect::<Vec<_>>());

    let bad = PruneSchedule {
        per_event: Some(Removal {
            heads_per_layer: 2,
            ..s.per_event.unwrap()
        }),
        ..s.clone()
    };
    assert!(schedule_events(&bad, &cfg, &target).is_err());
    let narrow = PruneSchedule {
        total_steps: 50,
        ..s
    };
    assert!(schedule_events(&narrow, &cfg, &target).is_err());
}

fn finetune(config: &ModelConfig, epochs: usize) -> StageConfig {
    StageConfig {
        name: "finetune".into(),
        teacher: TeacherSource::None,
        student: StudentInit::Scratch { config: config.clone() },
        kd: None,
        cross_entropy: Some(true),
        prune: PruneSpec::None,
        lr: LrSpec {
            kind: LrKind::LinearDecay,
            base_lr: 3e-3,
        },
        adam: AdamConfig::default(),
        dataset: DatasetId::Train,
        epochs,
        batch_size: 8,
        dropout: 0.1,
        eval_every: None,
        score_loss: ScoreLoss::Active,
        allow_hidden: false,
    }
}

fn kd_stage(name: &str, teacher: TeacherSource, kd: KdConfig, prune: PruneSpec) -> StageConfig {
    StageConfig {
        name: name.into(),
        teacher,
        student: StudentInit::CopyOfTeacher,
        kd: Some(kd),
        cross_entropy: None,
        prune,
        dataset: DatasetId::Augmented,
        ..finetune(&ModelConfig::bert_base(), 2)
    }
}

#[test]
fn iterative_stage_ends_at_target_architecture() {
    let data = tiny_task(0);
    let config = tiny_config(&data);
    let teacher = random_model(&config, 5);
    let target = ArchitectureTarget {
        heads: 2,
        layers: 2,
        intermediate: 8,
        rank: 6,
    };
    let stage = kd_stage(
        "kd",
        TeacherSource::Original,
        KdConfig::pred_only(),
        PruneSpec::Iterative {
            target,
            prune_fraction: 0.5,
            n_events: 2,
            per_event: None,
            layers_up_front: false,
        },
    );
    let mut log = MetricsLog::in_memory();
    let out = run_stage(0, &stage, Some(&teacher), teacher.clone(), &data, 0, &mut log).unwrap();
    assert_eq!(ArchitectureTarget::of(&out.student.config), target);
    assert_eq!(out.student.param_count(), target.apply_to(&config).count_params());
    let prunes: Vec<_> = log.records.iter().filter(|r| r.kind == RecordKind::Prune).collect();
    assert_eq!(prunes.len(), 2);
    let steps = log.records.iter().filter(|r| r.kind == RecordKind::Step).count();
    assert_eq!(steps, 2 * data.distillation_set().batches_per_epoch(8));
    for (m, p) in out.adam.m.leaves().iter().zip(out.student.params.leaves()) {
        assert_eq!(m.shape(), p.shape());
    }
}

#[test]
fn one_step_stage_prunes_before_training() {
    let data = tiny_task(1);
    let config = tiny_config(&data);
    let teacher = random_model(&config, 6);
    let target = ArchitectureTarget {
        heads: 1,
        layers: 3,
        intermediate: 6,
        rank: 4,
    };
    let stage = kd_stage(
        "kd",
        TeacherSource::Original,
        KdConfig::pred_and_hidden(),
        PruneSpec::OneStep { target },
    );
    let mut log = MetricsLog::in_memory();
    let out = run_stage(0, &stage, Some(&teacher), teacher.clone(), &data, 0, &mut log).unwrap();
    assert_eq!(ArchitectureTarget::of(&out.student.config), target);
    let first = &log.records[0];
    assert_eq!((first.kind, first.step), (RecordKind::Prune, 0));
}

#[test]
fn stages_chain_through_checkpoints_bit_identically() {
    let data = tiny_task(2);
    let config = tiny_config(&data);
    let plan = StagePlan {
        version: PLAN_VERSION,
        name: "chain".into(),
        stages: vec![
            finetune(&config, 1),
            kd_stage("kd1", TeacherSource::Previous, KdConfig::pred_only(), PruneSpec::None),
        ],
    };
    let dir = tempfile::tempdir().unwrap();
    let out = run_plan(
        &plan,
        &data,
        &RunOptions {
            seed: 3,
            out_dir: Some(dir.path().into()),
            teacher: None,
        },
    )
    .unwrap();

    // replay: stage 0 alone, then stage 1 from the decoded stage-0 checkpoint
    let mut log = MetricsLog::in_memory();
    let s0 = init_student(&plan.stages[0], None, stage_seed(3, 0) ^ 0x5EED).unwrap();
    let mut first = run_stage(0, &plan.stages[0], None, s0, &data, 3, &mut log).unwrap().student;
    first.round_to_f32();
    let saved = std::fs::read(dir.path().join("stage0_finetune.rsta")).unwrap();
    let decoded = decode_checkpoint(&saved).unwrap().model;
    assert_eq!(decoded.params, first.params);

    let s1 = init_student(&plan.stages[1], Some(&decoded), 0).unwrap();
    let mut second = run_stage(1, &plan.stages[1], Some(&decoded), s1, &data, 3, &mut log).unwrap().student;
    second.round_to_f32();
    assert_eq!(out.student.params, second.params);
    assert_eq!(out.stages.len(), 2);
}

#[test]
fn metrics_are_deterministic() {
    let data = tiny_task(3);
    let config = tiny_config(&data);
    let plan = StagePlan {
        version: PLAN_VERSION,
        name: "det".into(),
        stages: vec![
            finetune(&config, 1),
            kd_stage(
                "kd",
                TeacherSource::Previous,
                KdConfig::pred_and_hidden(),
                PruneSpec::Iterative {
                    target: ArchitectureTarget {
                        heads: 2,
                        layers: 4,
                        intermediate: 12,
                        rank: 8,
                    },
                    prune_fraction: 0.5,
                    n_events: 2,
                    per_event: None,
                    layers_up_front: false,
                },
            ),
        ],
    };
    let run = |seed| {
        let dir = tempfile::tempdir().unwrap();
        run_plan(
            &plan,
            &data,
            &RunOptions {
                seed,
                out_dir: Some(dir.path().into()),
                teacher: None,
            },
        )
        .unwrap();
        std::fs::read(dir.path().join("metrics.ndjson")).unwrap()
    };
    let a = run(7);
    assert_eq!(a, run(7));
    assert_ne!(a, run(8));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ndjson");
    std::fs::write(&path, &a).unwrap();
    let records = read_ndjson(&path).unwrap();
    assert!(records.iter().any(|r| r.kind == RecordKind::Eval));
    assert!(records.iter().filter(|r| r.kind == RecordKind::Step).all(|r| r.lr.is_some() && r.loss.is_some()));
}

#[test]
fn plan_validation_and_round_trip() {
    let data = tiny_task(4);
    let config = tiny_config(&data);
    let hidden_early = StagePlan {
        version: PLAN_VERSION,
        name: "bad".into(),
        stages: vec![
            finetune(&config, 1),
            kd_stage("a", TeacherSource::Previous, KdConfig::pred_and_hidden(), PruneSpec::None),
            kd_stage("b", TeacherSource::Previous, KdConfig::pred_only(), PruneSpec::None),
        ],
    };
    assert!(hidden_early.validate().is_err());
    let no_teacher = StagePlan {
        stages: vec![kd_stage("a", TeacherSource::None, KdConfig::pred_only(), PruneSpec::None)],
        ..hidden_early.clone()
    };
    assert!(no_teacher.validate().is_err());

    let settings = PresetSettings {
        teacher: config.clone(),
        target: ArchitectureTarget {
            heads: 2,
            layers: 2,
            intermediate: 6,
            rank: 4,
        },
        include_finetune: true,
        finetune_epochs: 1,
        finetune_lr: 1e-3,
        kd_epochs: 1,
        kd_lr: 1e-3,
        lr_kind: LrKind::LinearDecay,
        prune_fraction: 0.5,
        n_events: 2,
        batch_size: 8,
        dropout: 0.1,
        eval_every: None,
    };
    for preset in Preset::ALL {
        let plan = settings.plan(preset);
        plan.validate().unwrap();
        assert_eq!(StagePlan::from_json(&plan.to_json().unwrap()).unwrap(), plan);
        assert_eq!(Preset::parse(preset.name()).unwrap(), preset);
    }
    assert_eq!(settings.plan(Preset::IterativeWidthDepthThreeStage).stages.len(), 4);
}

#[test]
fn checkpoint_round_trip_of_stage_output_includes_optimizer() {
    let data = tiny_task(5);
    let config = tiny_config(&data);
    let mut log = MetricsLog::in_memory();
    let stage = finetune(&config, 1);
    let s = init_student(&stage, None, 1).unwrap();
    let out = run_stage(0, &stage, None, s, &data, 0, &mut log).unwrap();
    let ck = Checkpoint {
        model: out.student,
        adam: Some(out.adam),
        seed: 0,
        stage: 0,
    };
    let bytes = encode_checkpoint(&ck).unwrap();
    let back = decode_checkpoint(&bytes).unwrap();
    assert_eq!(back.adam.as_ref().unwrap().step, ck.adam.as_ref().unwrap().step);
    assert_eq!(back.adam.as_ref().unwrap().m, ck.adam.as_ref().unwrap().m);
    assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
}
