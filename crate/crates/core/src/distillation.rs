//! Knowledge-distillation losses and the teacher→student layer mapping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

/// Student layer `l` learns from teacher layer `map[l]`; index 0 is the
/// embedding output on both sides.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMap {
    pub teacher_layers: usize,
    pub student_layers: usize,
    pub map: Vec<usize>,
}

impl LayerMap {
    pub fn teacher_for(&self, student_layer: usize) -> usize {
        self.map[student_layer]
    }

    /// Teacher layers (1-indexed) that no student layer learns from.
    pub fn dropped_teacher_layers(&self) -> Vec<usize> {
        (1..=self.teacher_layers).filter(|l| !self.map.contains(l)).collect()
    }

    fn check(&self) -> Result<()> {
        let ok = self.map.len() == self.student_layers + 1
            && self.map[0] == 0
            && self.map.windows(2).all(|w| w[0] < w[1])
            && self.map.last().is_some_and(|&l| l <= self.teacher_layers);
        if ok {
            Ok(())
        } else {
            Err(Error::contract(format!("malformed layer map {:?}", self.map)))
        }
    }
}

/// Builds `g(l)` for a `teacher`-layer teacher and `student`-layer student.
///
/// When `student` divides `teacher`, layers are picked evenly,
/// `g(l) = l·teacher/student`. Otherwise every teacher layer whose 1-based
/// index is an integer multiple of `teacher/student` is dropped and the
/// remaining layers are assigned in order; this must leave exactly `student`
/// layers or the call fails.
pub fn build_layer_map(teacher: usize, student: usize) -> Result<LayerMap> {
    if student == 0 || student > teacher {
        return Err(Error::contract(format!(
            "layer map needs 1 ≤ student ({student}) ≤ teacher ({teacher})"
        )));
    }
    let map = if teacher % student == 0 {
        let stride = teacher / student;
        (0..=student).map(|l| l * stride).collect()
    } else {
        // (i)·student ≡ 0 (mod teacher)  ⇔  i is a multiple of teacher/student
        let kept: Vec<usize> = (1..=teacher).filter(|i| (i * student) % teacher != 0).collect();
        if kept.len() != student {
            return Err(Error::contract(format!(
                "dropping multiples of {teacher}/{student} leaves {} teacher layers, student has {student}",
                kept.len()
            )));
        }
        std::iter::once(0).chain(kept).collect()
    };
    let out = LayerMap {
        teacher_layers: teacher,
        student_layers: student,
        map,
    };
    out.check()?;
    Ok(out)
}

fn default_one() -> f64 {
    1.0
}

/// Which distillation losses a stage optimizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdConfig {
    pub use_pred: bool,
    pub use_hidden: bool,
    /// Weight λ on the hidden-state loss.
    #[serde(default = "default_one")]
    pub hidden_weight: f64,
    #[serde(default = "default_one")]
    pub temperature: f64,
}

impl KdConfig {
    pub fn pred_only() -> Self {
        Self {
            use_pred: true,
            use_hidden: false,
            hidden_weight: 1.0,
            temperature: 1.0,
        }
    }

    pub fn pred_and_hidden() -> Self {
        Self {
            use_hidden: true,
            ..Self::pred_only()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.use_pred && !self.use_hidden {
            return Err(Error::config("distillation needs at least one active loss"));
        }
        if !(self.hidden_weight >= 0.0 && self.hidden_weight.is_finite()) {
            return Err(Error::config("hidden_weight must be finite and ≥ 0"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("temperature must be finite and > 0"));
        }
        Ok(())
    }
}

/// Mean over the batch of `−softmax(z_T/τ)·log softmax(z_S/τ)`; only the
/// student receives gradients.
pub fn soft_cross_entropy(g: &mut Graph, teacher_logits: Var, student_logits: Var, temperature: f64) -> Result<Var> {
    g.soft_cross_entropy(teacher_logits, student_logits, temperature)
}

/// `Σ_{l=0..L'} MSE(X^T_{g(l)}, X^S_l)`, each term a mean over unmasked
/// positions and features.
pub fn hidden_mse(g: &mut Graph, teacher: &[Var], student: &[Var], row_mask: &[bool], map: &LayerMap) -> Result<Var> {
    if student.len() != map.student_layers + 1 {
        return Err(Error::contract(format!(
            "student trace holds {} hidden states, map expects {}",
            student.len(),
            map.student_layers + 1
        )));
    }
    if teacher.len() != map.teacher_layers + 1 {
        return Err(Error::contract(format!(
            "teacher trace holds {} hidden states, map expects {}",
            teacher.len(),
            map.teacher_layers + 1
        )));
    }
    let (td, sd) = (g.value(teacher[0]).cols(), g.value(student[0]).cols());
    if td != sd {
        return Err(Error::contract(format!("hidden size differs: teacher {td}, student {sd}")));
    }
    let mut total: Option<Var> = None;
    for (l, &s) in student.iter().enumerate() {
        let term = g.masked_mse(teacher[map.teacher_for(l)], s, row_mask)?;
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    Ok(total.expect("at least the embedding term"))
}

/// Inputs to [`kd_total_loss`]: teacher values recorded as graph constants
/// and the student's live handles.
pub struct KdInputs<'a> {
    pub teacher_logits: Var,
    pub student_logits: Var,
    pub teacher_hidden: &'a [Var],
    pub student_hidden: &'a [Var],
    pub row_mask: &'a [bool],
    pub map: Option<&'a LayerMap>,
}

#[derive(Clone, Copy, Debug)]
pub struct KdLoss {
    pub total: Var,
    pub pred: Option<Var>,
    pub hidden: Option<Var>,
}

/// `use_pred·L_pred + use_hidden·λ·L_hidden`
pub fn kd_total_loss(g: &mut Graph, config: &KdConfig, inputs: &KdInputs<'_>) -> Result<KdLoss> {
    config.validate()?;
    let pred = if config.use_pred {
        Some(soft_cross_entropy(g, inputs.teacher_logits, inputs.student_logits, config.temperature)?)
    } else {
        None
    };
    let hidden = if config.use_hidden {
        let map = inputs
            .map
            .ok_or_else(|| Error::contract("hidden-state distillation requires a layer map"))?;
        Some(hidden_mse(g, inputs.teacher_hidden, inputs.student_hidden, inputs.row_mask, map)?)
    } else {
        None
    };
    let total = match (pred, hidden) {
        (Some(p), None) => p,
        (None, Some(h)) => g.scale(h, config.hidden_weight),
        (Some(p), Some(h)) => {
            let weighted = g.scale(h, config.hidden_weight);
            g.add(p, weighted)?
        }
        (None, None) => unreachable!("validated"),
    };
    Ok(KdLoss { total, pred, hidden })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn even_map() {
        assert_eq!(build_layer_map(12, 4).unwrap().map, vec![0, 3, 6, 9, 12]);
        assert_eq!(build_layer_map(5, 5).unwrap().map, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn drop_rule_map() {
        let m = build_layer_map(12, 8).unwrap();
        assert_eq!(m.dropped_teacher_layers(), vec![3, 6, 9, 12]);
        assert_eq!(m.map, vec![0, 1, 2, 4, 5, 7, 8, 10, 11]);
    }

    #[test]
    fn drop_rule_mismatch_errors() {
        // 8/5 = 1.6: only layer 8 is a multiple, leaving 7 ≠ 5
        let err = build_layer_map(8, 5).unwrap_err().to_string();
        assert!(err.contains("leaves 7"), "{err}");
        assert!(build_layer_map(3, 4).is_err());
        assert!(build_layer_map(3, 0).is_err());
    }

    #[test]
    fn soft_ce_reference_values() {
        let mut g = Graph::new();
        let t = g.constant(Tensor::from_rows(&[&[0.0, 0.0]]));
        let s = g.param(Tensor::from_rows(&[&[0.0, 0.0]]));
        let l = soft_cross_entropy(&mut g, t, s, 1.0).unwrap();
        assert!((g.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);

        let t = g.constant(Tensor::from_rows(&[&[1.0, 0.0]]));
        let s = g.param(Tensor::from_rows(&[&[0.0, 1.0]]));
        let l = soft_cross_entropy(&mut g, t, s, 1.0).unwrap();
        assert!((g.value(l).data()[0] - 1.044_320_266_148_227_8).abs() < 1e-12);
    }

    #[test]
    fn kd_needs_an_active_loss() {
        let cfg = KdConfig {
            use_pred: false,
            use_hidden: false,
            hidden_weight: 1.0,
            temperature: 1.0,
        };
        assert!(cfg.validate().is_err());
    }
}
