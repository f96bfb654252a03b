//! Optimization, pruning schedules and multi-stage orchestration.

mod optim;
mod plan;
mod schedule;
mod stage;

pub use optim::{adam_step, lr_at, AdamConfig, AdamState, LrKind, LrSchedule};
pub use plan::{
    DatasetId, LrSpec, Preset, PresetSettings, PruneSpec, ScoreLoss, StageConfig, StagePlan, StudentInit, TeacherSource,
    PLAN_VERSION,
};
pub use schedule::{schedule_events, PruneEvent, PruneSchedule};
pub use stage::{check_against_task, evaluate, init_student, run_stage, stage_seed, StageOutput};

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::io::{decode_checkpoint, encode_checkpoint, Checkpoint, MetricsLog, TaskData};
use crate::model::Model;

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub seed: u64,
    /// Where stage checkpoints and `metrics.ndjson` go; nothing is written
    /// when absent.
    pub out_dir: Option<PathBuf>,
    /// The fine-tuned original model. When absent it is the output of the
    /// first stage that trains without a teacher.
    pub teacher: Option<Model>,
}

#[derive(Clone, Debug)]
pub struct StageSummary {
    pub name: String,
    pub final_metric: f64,
    pub param_count: usize,
    pub checkpoint: Option<PathBuf>,
}

pub struct PlanOutput {
    pub student: Model,
    pub stages: Vec<StageSummary>,
    pub log: MetricsLog,
}

/// Runs every stage in order. Each stage's student is rounded to checkpoint
/// precision, serialized, and the decoded checkpoint is what later stages
/// see as their teacher.
pub fn run_plan(plan: &StagePlan, data: &TaskData, opts: &RunOptions) -> Result<PlanOutput> {
    plan.validate()?;
    let mut log = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            MetricsLog::to_file(&dir.join("metrics.ndjson"))?
        }
        None => MetricsLog::in_memory(),
    };
    let mut original = opts.teacher.clone();
    let mut previous: Option<Model> = None;
    let mut summaries = Vec::with_capacity(plan.stages.len());
    for (i, stage) in plan.stages.iter().enumerate() {
        let teacher = match stage.teacher {
            TeacherSource::None => None,
            TeacherSource::Original => Some(original.as_ref().ok_or_else(|| {
                Error::config(format!("stage {:?}: no fine-tuned teacher checkpoint available", stage.name))
            })?),
            TeacherSource::Previous => Some(previous.as_ref().ok_or_else(|| {
                Error::config(format!("stage {:?}: previous stage produced no checkpoint", stage.name))
            })?),
        };
        let student = init_student(stage, teacher, stage_seed(opts.seed, i) ^ 0x5EED)?;
        let out = run_stage(i, stage, teacher, student, data, opts.seed, &mut log)?;
        let mut trained = out.student;
        trained.round_to_f32();
        let bytes = encode_checkpoint(&Checkpoint {
            model: trained,
            adam: Some(out.adam),
            seed: opts.seed,
            stage: i as u32,
        })?;
        let path = match &opts.out_dir {
            Some(dir) => {
                let p = dir.join(format!("stage{i}_{}.rsta", stage.name));
                std::fs::write(&p, &bytes)?;
                Some(p)
            }
            None => None,
        };
        let reloaded = decode_checkpoint(&bytes)?.model;
        summaries.push(StageSummary {
            name: stage.name.clone(),
            final_metric: out.final_metric,
            param_count: reloaded.param_count(),
            checkpoint: path,
        });
        if stage.teacher == TeacherSource::None && original.is_none() {
            original = Some(reloaded.clone());
        }
        previous = Some(reloaded);
    }
    log.flush()?;
    Ok(PlanOutput {
        student: previous.expect("plan has stages"),
        stages: summaries,
        log,
    })
}
