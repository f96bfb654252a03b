//! Adam and learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::pruning::SurgeryPlan;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrKind {
    Constant,
    LinearDecay,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub kind: LrKind,
    pub base_lr: f64,
    pub total_steps: usize,
}

/// Learning rate at step `t`; linear decay reaches 0 at `t = T`.
pub fn lr_at(schedule: &LrSchedule, t: usize) -> Result<f64> {
    if t > schedule.total_steps {
        return Err(Error::contract(format!(
            "step {t} is past the schedule's {} steps",
            schedule.total_steps
        )));
    }
    Ok(match schedule.kind {
        LrKind::Constant => schedule.base_lr,
        LrKind::LinearDecay => schedule.base_lr * (1.0 - t as f64 / schedule.total_steps as f64),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments, shaped like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        Self {
            config,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// Slices the moments with the same index sets as the parameters.
    pub fn apply_surgery(&mut self, plan: &SurgeryPlan) -> Result<()> {
        let m = plan.apply(&self.m)?;
        let v = plan.apply(&self.v)?;
        self.m = m;
        self.v = v;
        Ok(())
    }
}

/// One bias-corrected Adam update. A non-finite gradient aborts the step
/// before anything is modified.
pub fn adam_step(params: &mut ParamStore, grads: &ParamStore, state: &mut AdamState, lr: f64) -> Result<()> {
    let (pl, gl, ml) = (params.leaves(), grads.leaves(), state.m.leaves());
    if pl.len() != gl.len()
        || pl.len() != ml.len()
        || pl.iter().zip(&gl).zip(&ml).any(|((p, g), m)| p.shape() != g.shape() || p.shape() != m.shape())
    {
        return Err(Error::contract("adam: parameters, gradients and moments disagree in shape"));
    }
    if let Some(name) = grads
        .names()
        .into_iter()
        .zip(&gl)
        .find(|(_, g)| g.data().iter().any(|x| !x.is_finite()))
        .map(|(n, _)| n)
    {
        return Err(Error::Numeric(format!("adam: non-finite gradient for {name}")));
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let c1 = 1.0 - beta1.powi(state.step as i32);
    let c2 = 1.0 - beta2.powi(state.step as i32);
    let mut grads_iter = gl.into_iter();
    let mut m_iter = state.m.leaves_mut().into_iter();
    let mut v_iter = state.v.leaves_mut().into_iter();
    params.visit_mut(|_, p| {
        let g = grads_iter.next().expect("checked");
        let m = m_iter.next().expect("checked");
        let v = v_iter.next().expect("checked");
        for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    });
    Ok(())
}
