mod common;

use common::{random_tensor, rng};
use proptest::prelude::*;
use rand::Rng;
use rosita_core::distillation::*;
use rosita_core::tensor::{Graph, Tensor};

/// Independent layer-map oracle: enumerate teacher layers, cross out each
/// whose index is an exact multiple of teacher/student in rational terms.
fn enumerate_map(teacher: usize, student: usize) -> Option<Vec<usize>> {
    if teacher % student == 0 {
        return Some((0..=student).map(|l| l * teacher / student).collect());
    }
    let mut kept = vec![0];
    for i in 1..=teacher {
        let ratio = teacher as f64 / student as f64;
        let k = (i as f64 / ratio).round();
        let is_multiple = (k * ratio - i as f64).abs() < 1e-9;
        if !is_multiple {
            kept.push(i);
        }
    }
    (kept.len() == student + 1).then_some(kept)
}

#[test]
fn layer_maps_match_enumeration() {
    for teacher in 1..=16 {
        for student in 1..=teacher {
            match (build_layer_map(teacher, student), enumerate_map(teacher, student)) {
                (Ok(m), Some(want)) => {
                    assert_eq!(m.map, want, "{teacher}->{student}");
                    assert_eq!(m.teacher_for(0), 0);
                }
                (Err(_), None) => {}
                (got, want) => panic!("{teacher}->{student}: {got:?} vs {want:?}"),
            }
        }
    }
    assert_eq!(build_layer_map(12, 4).unwrap().map, vec![0, 3, 6, 9, 12]);
    let m = build_layer_map(12, 8).unwrap();
    assert_eq!(m.dropped_teacher_layers(), vec![3, 6, 9, 12]);
    assert_eq!(m.map.len(), 9);
}

#[test]
fn hidden_mse_matches_loop_oracle() {
    let map = build_layer_map(4, 2).unwrap();
    let rows = 6;
    let mask = [true, true, false, true, false, true];
    let teacher: Vec<Tensor> = (0..5).map(|l| random_tensor(&[rows, 3], 10 + l)).collect();
    let student: Vec<Tensor> = (0..3).map(|l| random_tensor(&[rows, 3], 20 + l)).collect();
    let mut want = 0.0;
    for (l, s) in student.iter().enumerate() {
        let t = &teacher[map.map[l]];
        let mut sum = 0.0;
        let mut n = 0;
        for r in (0..rows).filter(|&r| mask[r]) {
            for c in 0..3 {
                sum += (t.at(r, c) - s.at(r, c)).powi(2);
                n += 1;
            }
        }
        want += sum / n as f64;
    }
    let mut g = Graph::new();
    let tv: Vec<_> = teacher.iter().map(|t| g.constant(t.clone())).collect();
    let sv: Vec<_> = student.iter().map(|t| g.param(t.clone())).collect();
    let l = hidden_mse(&mut g, &tv, &sv, &mask, &map).unwrap();
    assert!((g.value(l).data()[0] - want).abs() < 1e-12);
    assert!(hidden_mse(&mut g, &tv[..4], &sv, &mask, &map).is_err());
}

#[test]
fn identical_states_give_zero_hidden_loss() {
    let map = build_layer_map(2, 2).unwrap();
    let states: Vec<Tensor> = (0..3).map(|l| random_tensor(&[4, 5], l)).collect();
    let mut g = Graph::new();
    let tv: Vec<_> = states.iter().map(|t| g.constant(t.clone())).collect();
    let sv: Vec<_> = states.iter().map(|t| g.param(t.clone())).collect();
    let l = hidden_mse(&mut g, &tv, &sv, &[true; 4], &map).unwrap();
    assert_eq!(g.value(l).data()[0], 0.0);
}

#[test]
fn soft_cross_entropy_examples() {
    let mut g = Graph::new();
    let t = g.constant(Tensor::from_rows(&[&[1.0, 0.0]]));
    let s = g.param(Tensor::from_rows(&[&[0.0, 1.0]]));
    let l = soft_cross_entropy(&mut g, t, s, 1.0).unwrap();
    assert!((g.value(l).data()[0] - 1.0443).abs() < 1e-3);

    // matching logits: only the student entropy remains and the gradient vanishes
    let z = random_tensor(&[3, 4], 5);
    let mut g = Graph::new();
    let t = g.constant(z.clone());
    let s = g.param(z.clone());
    let l = soft_cross_entropy(&mut g, t, s, 2.0).unwrap();
    let grad = g.backward(l).unwrap().wrt(s);
    assert!(grad.data().iter().all(|x| x.abs() < 1e-15));
}

#[test]
fn total_is_weighted_sum_of_components() {
    let map = build_layer_map(2, 1).unwrap();
    let mut g = Graph::new();
    let tz = g.constant(random_tensor(&[2, 3], 1));
    let sz = g.param(random_tensor(&[2, 3], 2));
    let th: Vec<_> = (0..3).map(|l| g.constant(random_tensor(&[4, 2], 10 + l))).collect();
    let sh: Vec<_> = (0..2).map(|l| g.param(random_tensor(&[4, 2], 20 + l))).collect();
    let mask = [true, true, true, false];
    let inputs = KdInputs {
        teacher_logits: tz,
        student_logits: sz,
        teacher_hidden: &th,
        student_hidden: &sh,
        row_mask: &mask,
        map: Some(&map),
    };
    let cfg = KdConfig {
        hidden_weight: 0.7,
        ..KdConfig::pred_and_hidden()
    };
    let out = kd_total_loss(&mut g, &cfg, &inputs).unwrap();
    let (p, h) = (g.value(out.pred.unwrap()).data()[0], g.value(out.hidden.unwrap()).data()[0]);
    assert!((g.value(out.total).data()[0] - (p + 0.7 * h)).abs() < 1e-12);

    let only = kd_total_loss(&mut g, &KdConfig::pred_only(), &inputs).unwrap();
    assert!(only.hidden.is_none());
    assert_eq!(g.value(only.total).data()[0], p);

    let no_map = KdInputs { map: None, ..inputs };
    assert!(kd_total_loss(&mut g, &cfg, &no_map).is_err());
}

proptest! {
    #[test]
    fn soft_cross_entropy_is_at_least_teacher_entropy(seed in 0u64..10_000, tau in 0.5f64..4.0) {
        let mut r = rng(seed);
        let t: Vec<f64> = (0..4).map(|_| r.gen_range(-3.0..3.0)).collect();
        let s: Vec<f64> = (0..4).map(|_| r.gen_range(-3.0..3.0)).collect();
        let mut g = Graph::new();
        let tv = g.constant(Tensor::from_rows(&[&t]));
        let sv = g.param(Tensor::from_rows(&[&s]));
        let tself = g.param(Tensor::from_rows(&[&t]));
        let cross = soft_cross_entropy(&mut g, tv, sv, tau).unwrap();
        let entropy = soft_cross_entropy(&mut g, tv, tself, tau).unwrap();
        prop_assert!(g.value(cross).data()[0] >= g.value(entropy).data()[0] - 1e-12);
    }
}
