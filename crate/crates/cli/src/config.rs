//! JSON configuration files accepted by the subcommands.

use anyhow::{bail, Result};
use serde::Deserialize;

use rosita_core::distillation::KdConfig;
use rosita_core::io::TaskData;
use rosita_core::model::ModelConfig;
use rosita_core::pipeline::{
    AdamConfig, DatasetId, LrKind, LrSpec, PruneSpec, ScoreLoss, StageConfig, StagePlan, StudentInit, TeacherSource,
    PLAN_VERSION,
};
use rosita_core::pruning::ArchitectureTarget;

/// Architecture; vocabulary size, length and class count default to the task's.
#[derive(Clone, Debug, Deserialize)]
pub struct ModelSpec {
    pub heads: usize,
    pub layers: usize,
    pub hidden: usize,
    pub intermediate: usize,
    pub head_dim: usize,
    #[serde(default)]
    pub rank: usize,
    pub vocab_size: Option<usize>,
    pub max_len: Option<usize>,
    pub n_classes: Option<usize>,
    pub eps: Option<f64>,
}

impl ModelSpec {
    pub fn resolve(&self, data: &TaskData) -> ModelConfig {
        ModelConfig {
            heads: self.heads,
            layers: self.layers,
            hidden: self.hidden,
            intermediate: self.intermediate,
            head_dim: self.head_dim,
            rank: self.rank,
            vocab_size: self.vocab_size.unwrap_or(data.vocab.len()),
            max_len: self.max_len.unwrap_or(data.spec.max_len),
            n_classes: self.n_classes.unwrap_or(data.spec.n_classes),
            eps: self.eps.unwrap_or(1e-12),
        }
    }
}

fn default_lr() -> f64 {
    1e-3
}
fn default_kind() -> LrKind {
    LrKind::LinearDecay
}
fn default_batch() -> usize {
    32
}
fn default_dropout() -> f64 {
    0.1
}
fn default_events() -> usize {
    10
}

#[derive(Clone, Debug, Deserialize)]
pub struct TrainSpec {
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_kind")]
    pub lr_schedule: LrKind,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default)]
    pub eval_every: Option<usize>,
}

pub fn parse_lr_kind(s: &str) -> Result<LrKind> {
    Ok(match s {
        "linear" | "linear_decay" => LrKind::LinearDecay,
        "constant" => LrKind::Constant,
        other => bail!("unknown learning-rate schedule {other:?} (expected linear or constant)"),
    })
}

/// A single stage learning from the supplied teacher (or none).
pub fn stage(name: &str, train: &TrainSpec, kd: Option<KdConfig>, prune: PruneSpec) -> StageConfig {
    let distill = kd.is_some();
    StageConfig {
        name: name.into(),
        teacher: if distill { TeacherSource::Original } else { TeacherSource::None },
        student: StudentInit::CopyOfTeacher,
        kd,
        cross_entropy: None,
        prune,
        lr: LrSpec {
            kind: train.lr_schedule,
            base_lr: train.lr,
        },
        adam: AdamConfig::default(),
        dataset: if distill { DatasetId::Augmented } else { DatasetId::Train },
        epochs: train.epochs,
        batch_size: train.batch_size,
        dropout: train.dropout,
        eval_every: train.eval_every,
        score_loss: ScoreLoss::Active,
        allow_hidden: false,
    }
}

fn single(name: &str, stage: StageConfig) -> StagePlan {
    StagePlan {
        version: PLAN_VERSION,
        name: name.into(),
        stages: vec![stage],
    }
}

#[derive(Clone, Debug, Deserialize)]
pub struct FinetuneConfig {
    pub model: ModelSpec,
    pub train: TrainSpec,
}

impl FinetuneConfig {
    pub fn plan(&self, data: &TaskData) -> StagePlan {
        let mut s = stage("finetune", &self.train, None, PruneSpec::None);
        s.student = StudentInit::Scratch {
            config: self.model.resolve(data),
        };
        single("finetune", s)
    }
}

/// One-step pruning followed by cross-entropy training, or by distillation
/// from the unpruned checkpoint when `kd` is given.
#[derive(Clone, Debug, Deserialize)]
pub struct PruneConfig {
    pub target: ArchitectureTarget,
    pub train: TrainSpec,
    #[serde(default)]
    pub kd: Option<KdConfig>,
}

impl PruneConfig {
    pub fn plan(&self) -> StagePlan {
        let prune = PruneSpec::OneStep { target: self.target };
        let mut s = stage("prune_one_step", &self.train, self.kd.clone(), prune);
        // the checkpoint is still the starting point without distillation
        s.teacher = TeacherSource::Original;
        if self.kd.is_none() {
            s.cross_entropy = Some(true);
        }
        single("prune_one_step", s)
    }
}

#[derive(Clone, Debug, Deserialize)]
pub struct SweepArchConfig {
    pub targets: Vec<ArchitectureTarget>,
    pub train: TrainSpec,
    #[serde(default)]
    pub kd: Option<KdConfig>,
}

fn default_kd() -> KdConfig {
    KdConfig::pred_and_hidden()
}

#[derive(Clone, Debug, Deserialize)]
pub struct SweepFreqConfig {
    pub target: ArchitectureTarget,
    pub train: TrainSpec,
    #[serde(default = "default_events")]
    pub n_events: usize,
    #[serde(default = "default_kd")]
    pub kd: KdConfig,
}

impl SweepFreqConfig {
    pub fn plan(&self, fraction: f64, kind: LrKind) -> StagePlan {
        let train = TrainSpec {
            lr_schedule: kind,
            ..self.train.clone()
        };
        let prune = PruneSpec::Iterative {
            target: self.target,
            prune_fraction: fraction,
            n_events: self.n_events,
            per_event: None,
            layers_up_front: true,
        };
        single("iterative_prune", stage("iterative_prune", &train, Some(self.kd.clone()), prune))
    }
}
