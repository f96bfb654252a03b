//! The training loop of one stage.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::optim::{adam_step, lr_at, AdamState, LrSchedule};
use super::plan::{DatasetId, PruneSpec, ScoreLoss, StageConfig, StudentInit};
use super::schedule::{schedule_events, PruneEvent, PruneSchedule};
use crate::distillation::{build_layer_map, kd_total_loss, KdInputs, LayerMap};
use crate::error::{Error, Result};
use crate::factorization::factorize_embedding;
use crate::io::{eval_metric, Dataset, EvalValue, LossComponents, MetricsLog, MetricsRecord, RecordKind, TaskData};
use crate::model::{argmax, Batch, ForwardOptions, Model, ModelConfig, ParamStore};
use crate::pruning::{
    apply_surgery, cross_entropy_gradients, rank_importance, record_gradients, select_prune_set, ArchitectureTarget,
    ImportanceLedger, Removal, ScoreMode, UnitId,
};
use crate::tensor::Graph;

/// Result of [`run_stage`].
#[derive(Clone, Debug)]
pub struct StageOutput {
    pub student: Model,
    pub adam: AdamState,
    pub final_metric: f64,
}

/// Mixes a run seed with a stage index.
pub fn stage_seed(seed: u64, stage: usize) -> u64 {
    let mut z = seed ^ (stage as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Dev-set metric of `model`.
pub fn evaluate(model: &Model, dataset: &Dataset, kind: crate::io::MetricKind) -> Result<f64> {
    let labeled = dataset.labeled();
    let mut preds = Vec::with_capacity(labeled.len());
    let mut labels = Vec::with_capacity(labeled.len());
    for idx in labeled.sequential(128) {
        let (batch, l) = labeled.batch(&idx)?;
        preds.extend(model.predict(&batch)?);
        labels.extend(l.into_iter().map(|x| x.expect("labeled")));
    }
    eval_metric(&preds, &labels, kind)
}

/// Checks that a student architecture fits the task's data.
pub fn check_against_task(config: &ModelConfig, data: &TaskData) -> Result<()> {
    if config.vocab_size < data.vocab.len() {
        return Err(Error::config(format!(
            "vocab_size {} is smaller than the task vocabulary ({})",
            config.vocab_size,
            data.vocab.len()
        )));
    }
    if config.max_len < data.spec.max_len {
        return Err(Error::config(format!(
            "max_len {} is shorter than the task's {}",
            config.max_len, data.spec.max_len
        )));
    }
    if config.n_classes != data.spec.n_classes {
        return Err(Error::config(format!(
            "model has {} classes, task has {}",
            config.n_classes, data.spec.n_classes
        )));
    }
    Ok(())
}

/// Builds the initial student for a stage.
pub fn init_student(stage: &StageConfig, teacher: Option<&Model>, seed: u64) -> Result<Model> {
    match &stage.student {
        StudentInit::CopyOfTeacher => {
            let t = teacher.ok_or_else(|| Error::config("copy_of_teacher needs a teacher"))?;
            Ok(t.clone())
        }
        StudentInit::Scratch { config } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Model::init(config.clone(), &mut rng)
        }
    }
}

fn labels_or_pseudo(labels: &[Option<usize>], teacher_logits: Option<&crate::tensor::Tensor>) -> Result<Vec<usize>> {
    labels
        .iter()
        .enumerate()
        .map(|(i, l)| match (l, teacher_logits) {
            (Some(l), _) => Ok(*l),
            (None, Some(t)) => Ok(argmax(t.row(i))),
            (None, None) => Err(Error::input("unlabeled row and no teacher to supply a label")),
        })
        .collect()
}

struct Pruner {
    events: Vec<PruneEvent>,
    next: usize,
    ledger: ImportanceLedger,
}

fn prune_record(stage: usize, step: usize, model: &Model, removed: Vec<UnitId>) -> MetricsRecord {
    let mut r = MetricsRecord::new(RecordKind::Prune, stage, step, &model.config, model.param_count());
    r.removed = Some(removed);
    r
}

/// Removes `removal` worth of units using `scores`, slicing `adam` alongside.
fn prune_now(
    model: &mut Model,
    adam: Option<&mut AdamState>,
    ledger: &ImportanceLedger,
    removal: &Removal,
) -> Result<Vec<UnitId>> {
    let mut scores = ledger.report();
    if removal.ranks > 0 {
        scores.ranks = rank_importance(model, Some(ledger))?;
    }
    let set = select_prune_set(&scores, &model.config, removal)?;
    let plan = apply_surgery(model, &set)?;
    if let Some(adam) = adam {
        adam.apply_surgery(&plan)?;
    }
    Ok(set)
}

/// Scores averaged over the labelled training set, then one surgery to
/// `target`. A dense embedding is factorized straight to the target rank.
fn one_step_prune(model: &mut Model, target: &ArchitectureTarget, data: &TaskData, batch_size: usize) -> Result<Vec<UnitId>> {
    let mut ledger = ImportanceLedger::new(ScoreMode::OneStepAverage, &model.config);
    let labeled = data.train.labeled();
    if labeled.is_empty() {
        return Err(Error::input("one-step pruning needs labelled training rows"));
    }
    for idx in labeled.sequential(batch_size) {
        let (batch, labels) = labeled.batch(&idx)?;
        let labels: Vec<usize> = labels.into_iter().map(|l| l.expect("labeled")).collect();
        let (_, grads) = cross_entropy_gradients(model, &batch, &labels)?;
        record_gradients(&mut ledger, ScoreMode::OneStepAverage, model, &grads)?;
    }
    let mut removed = Vec::new();
    let full_rank = model.config.max_rank();
    if !model.config.is_factorized() && target.rank < full_rank {
        // the SVD itself keeps the components with the largest σ
        factorize_embedding(model, target.rank)?;
        removed.extend((target.rank..full_rank).map(UnitId::rank));
    }
    let removal = Removal::between(&model.config, target)?;
    removed.extend(prune_now(model, None, &ledger, &removal)?);
    Ok(removed)
}

/// Runs one stage: optional one-step prune, then the training loop with KD,
/// iterative pruning events, per-step metrics and periodic evaluation.
pub fn run_stage(
    stage_index: usize,
    stage: &StageConfig,
    teacher: Option<&Model>,
    mut student: Model,
    data: &TaskData,
    seed: u64,
    log: &mut MetricsLog,
) -> Result<StageOutput> {
    check_against_task(&student.config, data)?;
    let kd = stage.kd.clone();
    if kd.is_some() && teacher.is_none() {
        return Err(Error::config(format!("stage {:?} distills but has no teacher", stage.name)));
    }
    let use_cross = stage.uses_cross();
    let dataset = match (stage.dataset, kd.is_some()) {
        (DatasetId::Train, _) => data.train.clone(),
        (DatasetId::Augmented, true) => data.distillation_set(),
        (DatasetId::Augmented, false) => data.distillation_set().labeled(),
    };
    let dataset = if kd.is_none() { dataset.labeled() } else { dataset };
    if dataset.is_empty() {
        return Err(Error::input(format!("stage {:?}: no usable training rows", stage.name)));
    }
    let total_steps = stage.epochs * dataset.batches_per_epoch(stage.batch_size);
    let lr = LrSchedule {
        kind: stage.lr.kind,
        base_lr: stage.lr.base_lr,
        total_steps,
    };

    let mut pruner: Option<Pruner> = None;
    match &stage.prune {
        PruneSpec::None => {}
        PruneSpec::OneStep { target } => {
            let removed = one_step_prune(&mut student, target, data, stage.batch_size)?;
            log.push(prune_record(stage_index, 0, &student, removed))?;
        }
        PruneSpec::Iterative {
            target,
            prune_fraction,
            n_events,
            per_event,
            layers_up_front,
        } => {
            if *layers_up_front && target.layers < student.config.layers {
                let set: Vec<UnitId> = (target.layers..student.config.layers).rev().map(UnitId::layer).collect();
                apply_surgery(&mut student, &set)?;
                log.push(prune_record(stage_index, 0, &student, set))?;
            }
            if kd.as_ref().is_some_and(|k| k.use_hidden) && target.layers < student.config.layers && !stage.allow_hidden {
                return Err(Error::config(format!(
                    "stage {:?}: hidden-state loss is inactive while layers are pruned iteratively",
                    stage.name
                )));
            }
            if !student.config.is_factorized() && target.rank < student.config.max_rank() {
                let full = student.config.max_rank();
                factorize_embedding(&mut student, full)?;
            }
            let schedule = PruneSchedule {
                total_steps,
                prune_fraction: *prune_fraction,
                n_events: *n_events,
                per_event: *per_event,
            };
            let events = schedule_events(&schedule, &student.config, target)?;
            pruner = Some(Pruner {
                events,
                next: 0,
                ledger: ImportanceLedger::new(ScoreMode::IterativeAccumulate, &student.config),
            });
        }
    }
    check_against_task(&student.config, data)?;

    let mut layer_map: Option<LayerMap> = match (&kd, teacher) {
        (Some(k), Some(t)) if k.use_hidden => Some(build_layer_map(t.config.layers, student.config.layers)?),
        _ => None,
    };
    let mut adam = AdamState::new(stage.adam, &student.params);
    let run_seed = stage_seed(seed, stage_index);
    let eval_every = stage.eval_every.unwrap_or(dataset.batches_per_epoch(stage.batch_size)).max(1);
    let metric_kind = data.spec.metric;

    let mut step = 0usize;
    let mut last_metric = None;
    for epoch in 0..stage.epochs {
        for idx in dataset.epoch_order(stage.batch_size, run_seed, epoch as u64) {
            let (batch, labels) = dataset.batch(&idx)?;
            let rate = lr_at(&lr, step)?;
            let (loss, grads, teacher_logits) =
                training_gradients(&student, teacher, &batch, &labels, stage, use_cross, layer_map.as_ref(), run_seed, step)?;

            if let Some(p) = &mut pruner {
                if p.next < p.events.len() {
                    let grads_for_scores = match stage.score_loss {
                        ScoreLoss::Active => grads.clone(),
                        ScoreLoss::Task => {
                            let l = labels_or_pseudo(&labels, teacher_logits.as_ref())?;
                            cross_entropy_gradients(&student, &batch, &l)?.1
                        }
                    };
                    record_gradients(&mut p.ledger, ScoreMode::IterativeAccumulate, &student, &grads_for_scores)?;
                }
            }

            adam_step(&mut student.params, &grads, &mut adam, rate)?;
            student.singular_values = None;
            step += 1;

            let mut rec = MetricsRecord::new(RecordKind::Step, stage_index, step, &student.config, student.param_count());
            rec.lr = Some(rate);
            rec.loss = Some(loss);
            log.push(rec)?;

            if let Some(p) = &mut pruner {
                while p.next < p.events.len() && p.events[p.next].step == step {
                    let removal = p.events[p.next].removal;
                    let removed = prune_now(&mut student, Some(&mut adam), &p.ledger, &removal)?;
                    p.ledger.reset(&student.config);
                    p.next += 1;
                    if let (Some(map), Some(t)) = (&mut layer_map, teacher) {
                        if map.student_layers != student.config.layers {
                            *map = build_layer_map(t.config.layers, student.config.layers)?;
                        }
                    }
                    log.push(prune_record(stage_index, step, &student, removed))?;
                }
            }

            if step % eval_every == 0 || step == total_steps {
                let value = evaluate(&student, &data.dev, metric_kind)?;
                let mut rec = MetricsRecord::new(RecordKind::Eval, stage_index, step, &student.config, student.param_count());
                rec.metric = Some(EvalValue {
                    kind: metric_kind,
                    value,
                });
                log.push(rec)?;
                last_metric = Some(value);
            }
        }
    }
    if let Some(p) = &pruner {
        if p.next != p.events.len() {
            return Err(Error::contract(format!(
                "stage {:?}: only {} of {} pruning events ran",
                stage.name,
                p.next,
                p.events.len()
            )));
        }
    }
    log.flush()?;
    Ok(StageOutput {
        student,
        adam,
        final_metric: last_metric.expect("at least one step"),
    })
}

/// Forward, loss and backward for one batch.
#[allow(clippy::too_many_arguments)]
fn training_gradients(
    student: &Model,
    teacher: Option<&Model>,
    batch: &Batch,
    labels: &[Option<usize>],
    stage: &StageConfig,
    use_cross: bool,
    map: Option<&LayerMap>,
    seed: u64,
    step: usize,
) -> Result<(LossComponents, ParamStore, Option<crate::tensor::Tensor>)> {
    let mut g = Graph::new();
    let bound = student.bind(&mut g, true);
    let opts = ForwardOptions {
        dropout: stage.dropout,
        seed,
        step: step as u64,
    };
    let trace = student.forward(&mut g, &bound, batch, opts)?;
    let mut components = LossComponents::default();
    let mut total = None;

    if use_cross {
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_some()).collect();
        if !rows.is_empty() {
            let targets: Vec<usize> = rows.iter().map(|&i| labels[i].expect("filtered")).collect();
            let picked = g.gather_rows(trace.logits, &rows)?;
            let ce = g.cross_entropy(picked, &targets)?;
            components.cross = Some(g.value(ce).data()[0]);
            total = Some(ce);
        }
    }

    let mut teacher_logits = None;
    if let Some(kd) = &stage.kd {
        let t = teacher.expect("checked by caller");
        let tv = t.trace_values(batch)?;
        let tl = g.constant(tv.logits.clone());
        let th: Vec<_> = if kd.use_hidden {
            tv.hidden.iter().map(|h| g.constant(h.clone())).collect()
        } else {
            Vec::new()
        };
        let parts = kd_total_loss(
            &mut g,
            kd,
            &KdInputs {
                teacher_logits: tl,
                student_logits: trace.logits,
                teacher_hidden: &th,
                student_hidden: &trace.hidden,
                row_mask: &trace.row_mask,
                map,
            },
        )?;
        components.pred = parts.pred.map(|v| g.value(v).data()[0]);
        components.hidden = parts.hidden.map(|v| g.value(v).data()[0]);
        total = Some(match total {
            Some(ce) => g.add(ce, parts.total)?,
            None => parts.total,
        });
        teacher_logits = Some(tv.logits);
    }

    let total = total.ok_or_else(|| Error::input("batch has no labelled rows and the stage does not distill"))?;
    components.total = g.value(total).data()[0];
    let grads = g.backward(total)?;
    Ok((components, bound.map(|_, v| grads.wrt(*v)), teacher_logits))
}
