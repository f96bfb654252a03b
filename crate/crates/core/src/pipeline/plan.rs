//! Stage plans: the JSON-configurable description of a compression run.

use serde::{Deserialize, Serialize};

use super::optim::{AdamConfig, LrKind};
use crate::distillation::KdConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::pruning::{ArchitectureTarget, Removal};

pub const PLAN_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherSource {
    /// No teacher: plain training with the task loss.
    None,
    /// The fine-tuned original model.
    Original,
    /// The student produced by the preceding stage.
    Previous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum StudentInit {
    /// Start from an exact copy of the stage's teacher (pruned afterwards if
    /// the stage prunes).
    CopyOfTeacher,
    /// Fresh random initialization with this architecture.
    Scratch { config: ModelConfig },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetId {
    Train,
    /// Training rows plus the augmented rows.
    Augmented,
}

fn default_events() -> usize {
    10
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PruneSpec {
    #[default]
    None,
    /// Prune to `target` before the first training step, using scores
    /// averaged over the labelled training set.
    OneStep { target: ArchitectureTarget },
    /// Prune to `target` in `n_events` equally spaced events within the
    /// first `prune_fraction` of the stage.
    Iterative {
        target: ArchitectureTarget,
        prune_fraction: f64,
        #[serde(default = "default_events")]
        n_events: usize,
        #[serde(default)]
        per_event: Option<Removal>,
        /// Drop layers to the target before training instead of one per event.
        #[serde(default)]
        layers_up_front: bool,
    },
}

/// Loss whose gradients feed the Taylor scores during iterative pruning.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreLoss {
    /// The stage's total training loss (reuses the training backward pass).
    #[default]
    Active,
    /// Cross-entropy against labels, or teacher predictions for unlabeled rows.
    Task,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSpec {
    pub kind: LrKind,
    pub base_lr: f64,
}

fn default_batch() -> usize {
    32
}

fn default_dropout() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub name: String,
    pub teacher: TeacherSource,
    pub student: StudentInit,
    #[serde(default)]
    pub kd: Option<KdConfig>,
    /// Adds cross-entropy on labelled rows; defaults to on only when the
    /// stage has no distillation.
    #[serde(default)]
    pub cross_entropy: Option<bool>,
    #[serde(default)]
    pub prune: PruneSpec,
    pub lr: LrSpec,
    #[serde(default)]
    pub adam: AdamConfig,
    pub dataset: DatasetId,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    /// Evaluate on the dev split every this many steps; once per epoch when
    /// absent.
    #[serde(default)]
    pub eval_every: Option<usize>,
    #[serde(default)]
    pub score_loss: ScoreLoss,
    /// Permits hidden-state distillation outside the final stage and in
    /// stages that drop layers iteratively.
    #[serde(default)]
    pub allow_hidden: bool,
}

impl StageConfig {
    pub fn uses_cross(&self) -> bool {
        self.cross_entropy.unwrap_or(self.kd.is_none())
    }

    fn validate(&self, is_final: bool) -> Result<()> {
        let fail = |msg: String| Err(Error::config(format!("stage {:?}: {msg}", self.name)));
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be ≥ 1".into());
        }
        if !(self.lr.base_lr >= 0.0 && self.lr.base_lr.is_finite()) {
            return fail("base_lr must be finite and ≥ 0".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must be in [0, 1)".into());
        }
        if let Some(kd) = &self.kd {
            kd.validate()?;
            if self.teacher == TeacherSource::None {
                return fail("distillation needs a teacher".into());
            }
            if kd.use_hidden && !is_final && !self.allow_hidden {
                return fail("hidden-state loss is only active in the final stage".into());
            }
        } else if !self.uses_cross() {
            return fail("no active loss".into());
        }
        if self.teacher == TeacherSource::None && self.student == StudentInit::CopyOfTeacher {
            return fail("copy_of_teacher needs a teacher".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub version: u32,
    pub name: String,
    pub stages: Vec<StageConfig>,
}

impl StagePlan {
    pub fn validate(&self) -> Result<()> {
        if self.version != PLAN_VERSION {
            return Err(Error::config(format!(
                "plan version {} unsupported (expected {PLAN_VERSION})",
                self.version
            )));
        }
        if self.stages.is_empty() {
            return Err(Error::config("plan has no stages"));
        }
        let last = self.stages.len() - 1;
        for (i, s) in self.stages.iter().enumerate() {
            s.validate(i == last)?;
            if i == 0 && s.teacher == TeacherSource::Previous {
                return Err(Error::config("the first stage has no previous stage to learn from"));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let plan: Self = serde_json::from_str(text)?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// The four multi-stage compression strategies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    OneStepOneStage,
    OneStepTwoStage,
    IterativeWidthTwoStage,
    IterativeWidthDepthThreeStage,
}

impl Preset {
    pub const ALL: [Preset; 4] = [
        Preset::OneStepOneStage,
        Preset::OneStepTwoStage,
        Preset::IterativeWidthTwoStage,
        Preset::IterativeWidthDepthThreeStage,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Preset::OneStepOneStage => "one_step_one_stage",
            Preset::OneStepTwoStage => "one_step_two_stage",
            Preset::IterativeWidthTwoStage => "iterative_width_two_stage",
            Preset::IterativeWidthDepthThreeStage => "iterative_width_depth_three_stage",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::config(format!("unknown preset {s:?}")))
    }
}

/// Knobs shared by the preset plans.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PresetSettings {
    pub teacher: ModelConfig,
    pub target: ArchitectureTarget,
    /// Prepend a stage fine-tuning the teacher from scratch on the task.
    pub include_finetune: bool,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub kd_epochs: usize,
    pub kd_lr: f64,
    pub lr_kind: LrKind,
    pub prune_fraction: f64,
    pub n_events: usize,
    pub batch_size: usize,
    pub dropout: f64,
    pub eval_every: Option<usize>,
}

impl PresetSettings {
    fn stage(&self, name: &str, teacher: TeacherSource, kd: KdConfig, prune: PruneSpec) -> StageConfig {
        StageConfig {
            name: name.into(),
            teacher,
            student: StudentInit::CopyOfTeacher,
            kd: Some(kd),
            cross_entropy: None,
            prune,
            lr: LrSpec {
                kind: self.lr_kind,
                base_lr: self.kd_lr,
            },
            adam: AdamConfig::default(),
            dataset: DatasetId::Augmented,
            epochs: self.kd_epochs,
            batch_size: self.batch_size,
            dropout: self.dropout,
            eval_every: self.eval_every,
            score_loss: ScoreLoss::Active,
            allow_hidden: false,
        }
    }

    /// Fine-tunes the teacher architecture from scratch with cross-entropy.
    pub fn finetune_stage(&self) -> StageConfig {
        StageConfig {
            name: "finetune".into(),
            teacher: TeacherSource::None,
            student: StudentInit::Scratch {
                config: self.teacher.clone(),
            },
            kd: None,
            cross_entropy: Some(true),
            prune: PruneSpec::None,
            lr: LrSpec {
                kind: self.lr_kind,
                base_lr: self.finetune_lr,
            },
            adam: AdamConfig::default(),
            dataset: DatasetId::Train,
            epochs: self.finetune_epochs,
            batch_size: self.batch_size,
            dropout: self.dropout,
            eval_every: self.eval_every,
            score_loss: ScoreLoss::Active,
            allow_hidden: false,
        }
    }

    fn iterative(&self, target: ArchitectureTarget, layers_up_front: bool) -> PruneSpec {
        PruneSpec::Iterative {
            target,
            prune_fraction: self.prune_fraction,
            n_events: self.n_events,
            per_event: None,
            layers_up_front,
        }
    }

    pub fn plan(&self, preset: Preset) -> StagePlan {
        use TeacherSource::{Original, Previous};
        let full = ArchitectureTarget::of(&self.teacher);
        let pred = KdConfig::pred_only();
        let both = KdConfig::pred_and_hidden();
        let mut stages = Vec::new();
        if self.include_finetune {
            stages.push(self.finetune_stage());
        }
        match preset {
            Preset::OneStepOneStage => {
                stages.push(self.stage("kd_prune", Original, both, PruneSpec::OneStep { target: self.target }));
            }
            Preset::OneStepTwoStage => {
                stages.push(self.stage("kd_same_size", Original, pred.clone(), PruneSpec::None));
                stages.push(self.stage("kd_prune", Previous, both, PruneSpec::OneStep { target: self.target }));
            }
            Preset::IterativeWidthTwoStage => {
                stages.push(self.stage("kd_same_size", Original, pred.clone(), PruneSpec::None));
                // depth is cut up front so hidden-state KD sees a fixed map
                stages.push(self.stage("kd_width", Previous, both, self.iterative(self.target, true)));
            }
            Preset::IterativeWidthDepthThreeStage => {
                stages.push(self.stage("kd_same_size", Original, pred.clone(), PruneSpec::None));
                let depth = ArchitectureTarget {
                    layers: self.target.layers,
                    ..full
                };
                stages.push(self.stage("kd_depth", Previous, pred.clone(), self.iterative(depth, false)));
                stages.push(self.stage("kd_width", Previous, both, self.iterative(self.target, false)));
            }
        }
        StagePlan {
            version: PLAN_VERSION,
            name: preset.name().into(),
            stages,
        }
    }
}
