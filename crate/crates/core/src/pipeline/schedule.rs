//! Placement and sizing of iterative pruning events.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::pruning::{ArchitectureTarget, Removal};

fn default_events() -> usize {
    10
}

/// Iterative pruning within the first `⌊p·T⌋` training steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    pub total_steps: usize,
    pub prune_fraction: f64,
    #[serde(default = "default_events")]
    pub n_events: usize,
    /// Removed at every event. When absent, the delta to the target is
    /// spread as evenly as possible over the events.
    #[serde(default)]
    pub per_event: Option<Removal>,
}

/// One scheduled pruning event.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneEvent {
    /// Fires after this many completed optimizer steps.
    pub step: usize,
    pub removal: Removal,
}

/// `⌊⌊p·T⌋·k/n⌋` for `k = 1..n`, each with its removal amounts; the
/// cumulative removal equals the delta from `config` to `target`.
pub fn schedule_events(schedule: &PruneSchedule, config: &ModelConfig, target: &ArchitectureTarget) -> Result<Vec<PruneEvent>> {
    let p = schedule.prune_fraction;
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::config(format!("prune_fraction {p} outside (0, 1]")));
    }
    let n = schedule.n_events;
    let window = (p * schedule.total_steps as f64).floor() as usize;
    if n == 0 || window < n {
        return Err(Error::config(format!(
            "{n} pruning events do not fit in a window of {window} steps"
        )));
    }
    let delta = Removal::between(config, target)?;
    let amounts: Vec<Removal> = match schedule.per_event {
        Some(each) => {
            let check = |name: &str, a: usize, d: usize| {
                if a * n == d {
                    Ok(())
                } else {
                    Err(Error::config(format!(
                        "{n} events removing {a} {name} each give {}, target needs {d}",
                        a * n
                    )))
                }
            };
            check("heads", each.heads_per_layer, delta.heads_per_layer)?;
            check("neurons", each.neurons_per_layer, delta.neurons_per_layer)?;
            check("ranks", each.ranks, delta.ranks)?;
            check("layers", each.layers, delta.layers)?;
            vec![each; n]
        }
        None => (1..=n)
            .map(|k| {
                let share = |d: usize| d * k / n - d * (k - 1) / n;
                Removal {
                    heads_per_layer: share(delta.heads_per_layer),
                    neurons_per_layer: share(delta.neurons_per_layer),
                    ranks: share(delta.ranks),
                    layers: share(delta.layers),
                }
            })
            .collect(),
    };
    Ok(amounts
        .into_iter()
        .enumerate()
        .map(|(i, removal)| PruneEvent {
            step: window * (i + 1) / n,
            removal,
        })
        .collect())
}
