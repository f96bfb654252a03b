mod common;

use common::{random_batch, random_model, random_prune_set, small_config, spearman};
use proptest::prelude::*;
use rosita_core::factorization::factorize_embedding;
use rosita_core::model::{Batch, ForwardOptions, Model, ParamStore, TokenEmbedding};
use rosita_core::pruning::*;
use rosita_core::tensor::{Graph, Tensor};

fn labels(batch: &Batch) -> Vec<usize> {
    (0..batch.batch).map(|b| batch.ids[b * batch.seq] % 2).collect()
}

fn factorized_model(seed: u64) -> Model {
    let config = small_config(4, 2, 16, 24, 0, 30);
    let mut m = random_model(&config, seed);
    factorize_embedding(&mut m, 10).unwrap();
    m
}

fn loss_of(model: &Model, batch: &Batch, labels: &[usize]) -> f64 {
    cross_entropy_gradients(model, batch, labels).unwrap().0
}

#[test]
fn symbolic_oracle_for_weight_scores() {
    // L(w) = (w·1 − 2)², at w = 1: dL/dw = 2(w − 2) = −2, score |−2·1| = 2
    let mut g = Graph::new();
    let w = g.param(Tensor::scalar(1.0));
    let one = g.constant(Tensor::scalar(1.0));
    let two = g.constant(Tensor::scalar(2.0));
    let wx = g.mul(w, one).unwrap();
    let d = g.sub(wx, two).unwrap();
    let sq = g.mul(d, d).unwrap();
    let loss = g.sum(sq);
    let grad = g.backward(loss).unwrap().wrt(w).data()[0];
    assert_eq!(grad, -2.0);
    assert_eq!((grad * 1.0f64).abs(), 2.0);
}

#[test]
fn weight_scores_zero_cases_and_missing_gradients() {
    let config = small_config(2, 1, 8, 12, 0, 20);
    let mut model = random_model(&config, 1);
    model.params.layers[0].w_fi.data_mut()[5] = 0.0;
    let batch = random_batch(&config, 3, 2);
    let (_, grads) = cross_entropy_gradients(&model, &batch, &labels(&batch)).unwrap();
    let s = weight_taylor_scores(&model.params, &grads).unwrap();
    assert_eq!(s.layers[0].w_fi.data()[5], 0.0);

    let zero = weight_taylor_scores(&model.params, &model.params.zeros_like()).unwrap();
    assert!(zero.leaves().iter().all(|t| t.data().iter().all(|&x| x == 0.0)));

    let other = random_model(&small_config(2, 1, 8, 10, 0, 20), 3);
    assert!(weight_taylor_scores(&model.params, &other.params).is_err());
}

fn random_scores(model: &Model, seed: u64) -> ParamStore {
    let mut r = common::rng(seed);
    let mut s = model.params.zeros_like();
    s.visit_mut(|_, t| {
        for x in t.data_mut() {
            *x = rand::Rng::gen_range(&mut r, 0.0..1.0);
        }
    });
    s
}

#[test]
fn neuron_scores_match_loop_oracle() {
    let model = factorized_model(4);
    let s = random_scores(&model, 5);
    for l in 0..2 {
        let got = neuron_importance(&s, l);
        let p = &s.layers[l];
        for j in 0..24 {
            let mut want = p.b_fi.data()[j];
            for i in 0..16 {
                want += p.w_fi.at(i, j);
            }
            for k in 0..16 {
                want += p.w_fo.at(j, k);
            }
            assert!((got[j] - want).abs() < 1e-12);
        }
    }
    let mut single = model.params.zeros_like();
    single.layers[0].w_fi.set(0, 3, 1.5);
    let got = neuron_importance(&single, 0);
    assert!(got.iter().enumerate().all(|(j, &v)| (v != 0.0) == (j == 3)));
}

#[test]
fn head_scores_match_loop_oracle() {
    let model = factorized_model(6);
    let s = random_scores(&model, 7);
    let hd = model.config.head_dim;
    let got = head_importance(&s, 1, hd);
    assert_eq!(got.len(), 4);
    for h in 0..4 {
        let mut want = 0.0;
        for r in h * hd..(h + 1) * hd {
            for c in 0..16 {
                want += s.layers[1].w_ao.at(r, c);
            }
        }
        assert!((got[h] - want).abs() < 1e-12);
    }
    let mut single = model.params.zeros_like();
    single.layers[0].w_ao.set(hd + 1, 2, 0.5);
    let got = head_importance(&single, 0, hd);
    assert_eq!(got, vec![0.0, 0.5, 0.0, 0.0]);
}

#[test]
fn rank_scores_match_summation_oracle_for_a_probe_loss() {
    let model = factorized_model(8);
    let TokenEmbedding::Factorized { u, v } = &model.params.embedding else {
        unreachable!()
    };
    // quadratic probe ½‖E_U‖² + ½‖E_V‖²: gradient equals the weights, so
    // each weight scores w²
    let mut grads = model.params.zeros_like();
    grads.embedding = TokenEmbedding::Factorized { u: u.clone(), v: v.clone() };
    let s = weight_taylor_scores(&model.params, &grads).unwrap();
    let got = rank_taylor_scores(&s);
    for i in 0..10 {
        let want: f64 = (0..30).map(|r| u.at(r, i).powi(2)).sum::<f64>() + (0..16).map(|c| v.at(i, c).powi(2)).sum::<f64>();
        assert!((got[i] - want).abs() < 1e-12);
    }
}

#[test]
fn rank_importance_sources() {
    let mut m = random_model(&small_config(1, 1, 3, 2, 0, 3), 0);
    let TokenEmbedding::Dense(t) = &mut m.params.embedding else { unreachable!() };
    *t = Tensor::from_rows(&[&[3.0, 0.0, 0.0], &[0.0, 2.0, 0.0], &[0.0, 0.0, 1.0]]);
    assert!(rank_importance(&m, None).is_err());
    factorize_embedding(&mut m, 3).unwrap();
    let s = rank_importance(&m, None).unwrap();
    for (a, b) in s.iter().zip([3.0, 2.0, 1.0]) {
        assert!((a - b).abs() < 1e-12);
    }
    // after a training step the singular values are stale
    m.singular_values = None;
    assert!(rank_importance(&m, None).is_err());
    let mut ledger = ImportanceLedger::new(ScoreMode::IterativeAccumulate, &m.config);
    record_gradients(&mut ledger, ScoreMode::IterativeAccumulate, &m, &m.params.zeros_like()).unwrap();
    assert_eq!(rank_importance(&m, Some(&ledger)).unwrap(), vec![0.0; 3]);
}

#[test]
fn ledger_modes() {
    let model = factorized_model(9);
    let c = &model.config;
    let batches: Vec<Batch> = (0..4).map(|i| random_batch(c, 3, 100 + i)).collect();
    let per_batch: Vec<UnitScores> = batches
        .iter()
        .map(|b| {
            let (_, g) = cross_entropy_gradients(&model, b, &labels(b)).unwrap();
            aggregate_unit_scores(&weight_taylor_scores(&model.params, &g).unwrap(), c)
        })
        .collect();

    let mut avg = ImportanceLedger::new(ScoreMode::OneStepAverage, c);
    record_batch_scores(&mut avg, ScoreMode::OneStepAverage, &model, &batches[0], &labels(&batches[0])).unwrap();
    assert_eq!(avg.report(), per_batch[0]);
    record_batch_scores(&mut avg, ScoreMode::OneStepAverage, &model, &batches[0], &labels(&batches[0])).unwrap();
    let twice = avg.report();
    for (a, b) in twice.neurons[1].iter().zip(&per_batch[0].neurons[1]) {
        assert!((a - b).abs() < 1e-12);
    }

    let mut acc = ImportanceLedger::new(ScoreMode::IterativeAccumulate, c);
    for (b, _) in batches.iter().zip(&per_batch) {
        record_batch_scores(&mut acc, ScoreMode::IterativeAccumulate, &model, b, &labels(b)).unwrap();
    }
    let rep = acc.report();
    for l in 0..c.layers {
        for h in 0..c.heads {
            let want: f64 = per_batch.iter().map(|s| s.heads[l][h]).sum();
            assert!((rep.heads[l][h] - want).abs() < 1e-12 * want.max(1.0));
        }
        for n in 0..c.intermediate {
            let want: f64 = per_batch.iter().map(|s| s.neurons[l][n]).sum();
            assert!((rep.neurons[l][n] - want).abs() < 1e-12 * want.max(1.0));
        }
    }
    for r in 0..c.rank {
        let want: f64 = per_batch.iter().map(|s| s.ranks[r]).sum();
        assert!((rep.ranks[r] - want).abs() < 1e-12 * want.max(1.0));
    }
    assert_eq!(acc.batches_seen, 4);
    assert!(acc.record(ScoreMode::OneStepAverage, &per_batch[0]).is_err());
    acc.reset(c);
    assert_eq!(acc.report(), UnitScores::zeros(c));
}

#[test]
fn selection_examples() {
    let config = small_config(3, 2, 6, 3, 0, 10);
    let mut scores = UnitScores::zeros(&config);
    assert!(select_prune_set(&scores, &config, &Removal::default()).unwrap().is_empty());
    scores.neurons = vec![vec![5.0, 1.0, 3.0], vec![2.0, 2.0, 7.0]];
    let one = Removal {
        neurons_per_layer: 1,
        ..Removal::default()
    };
    let set = select_prune_set(&scores, &config, &one).unwrap();
    assert_eq!(set, vec![UnitId::neuron(0, 1), UnitId::neuron(1, 0)]);
    assert_eq!(select_prune_set(&scores, &config, &one).unwrap(), set);

    let empty_layer = Removal {
        heads_per_layer: 3,
        ..Removal::default()
    };
    assert!(select_prune_set(&scores, &config, &empty_layer).is_err());
    let ranks_on_dense = Removal {
        ranks: 1,
        ..Removal::default()
    };
    assert!(select_prune_set(&scores, &config, &ranks_on_dense).is_err());

    let layer = Removal {
        layers: 1,
        neurons_per_layer: 1,
        ..Removal::default()
    };
    // units inside the dropped top layer are not selected
    assert_eq!(
        select_prune_set(&scores, &config, &layer).unwrap(),
        vec![UnitId::neuron(0, 1), UnitId::layer(1)]
    );
}

#[test]
fn head_scores_are_permutation_equivariant() {
    let config = small_config(4, 1, 16, 24, 0, 30);
    let model = random_model(&config, 11);
    let batch = random_batch(&config, 4, 12);
    let y = labels(&batch);
    let base = {
        let (_, g) = cross_entropy_gradients(&model, &batch, &y).unwrap();
        aggregate_unit_scores(&weight_taylor_scores(&model.params, &g).unwrap(), &config)
    };
    // relabel heads by permuting their column/row blocks, neurons by swapping
    let perm = [2usize, 0, 3, 1];
    let hd = config.head_dim;
    let mut m2 = model.clone();
    {
        let src = &model.params.layers[0];
        let dst = &mut m2.params.layers[0];
        for (new, &old) in perm.iter().enumerate() {
            for k in 0..hd {
                for r in 0..16 {
                    dst.w_q.set(r, new * hd + k, src.w_q.at(r, old * hd + k));
                    dst.w_k.set(r, new * hd + k, src.w_k.at(r, old * hd + k));
                    dst.w_v.set(r, new * hd + k, src.w_v.at(r, old * hd + k));
                    dst.w_ao.set(new * hd + k, r, src.w_ao.at(old * hd + k, r));
                }
            }
        }
        let nperm: Vec<usize> = (0..24).rev().collect();
        for (new, &old) in nperm.iter().enumerate() {
            for r in 0..16 {
                dst.w_fi.set(r, new, src.w_fi.at(r, old));
                dst.w_fo.set(new, r, src.w_fo.at(old, r));
            }
            dst.b_fi.data_mut()[new] = src.b_fi.data()[old];
        }
    }
    let (_, g) = cross_entropy_gradients(&m2, &batch, &y).unwrap();
    let permuted = aggregate_unit_scores(&weight_taylor_scores(&m2.params, &g).unwrap(), &config);
    for (new, &old) in perm.iter().enumerate() {
        assert!((permuted.heads[0][new] - base.heads[0][old]).abs() < 1e-10);
    }
    for new in 0..24 {
        assert!((permuted.neurons[0][new] - base.neurons[0][23 - new]).abs() < 1e-10);
    }
}

#[test]
fn head_scores_track_leave_one_head_out_loss() {
    let mut total = 0.0;
    for seed in 0..10 {
        let config = small_config(6, 1, 24, 32, 0, 40);
        let mut model = random_model(&config, 200 + seed);
        // heads of clearly different strength, in a seed-dependent order
        let mut scales = [0.05, 0.15, 0.4, 0.8, 1.5, 3.0];
        rand::seq::SliceRandom::shuffle(&mut scales[..], &mut common::rng(seed));
        let hd = config.head_dim;
        let w_ao = &mut model.params.layers[0].w_ao;
        for (h, s) in scales.iter().enumerate() {
            for r in h * hd..(h + 1) * hd {
                for c in 0..24 {
                    w_ao.set(r, c, w_ao.at(r, c) * s);
                }
            }
        }
        let batch = random_batch(&config, 16, 300 + seed);
        let y = labels(&batch);
        let base = loss_of(&model, &batch, &y);
        let (_, g) = cross_entropy_gradients(&model, &batch, &y).unwrap();
        let taylor = aggregate_unit_scores(&weight_taylor_scores(&model.params, &g).unwrap(), &config).heads[0].clone();
        let actual: Vec<f64> = (0..6)
            .map(|h| (loss_of(&zero_mask(&model, &[UnitId::head(0, h)]).unwrap(), &batch, &y) - base).abs())
            .collect();
        total += spearman(&taylor, &actual);
    }
    let mean = total / 10.0;
    assert!(mean >= 0.8, "mean Spearman {mean}");
}

#[test]
fn zero_blocks_prune_without_changing_outputs() {
    let config = small_config(4, 2, 16, 24, 0, 30);
    let model = random_model(&config, 13);
    let set = [UnitId::head(0, 1), UnitId::head(1, 2)];
    let masked = zero_mask(&model, &set).unwrap();
    let mut pruned = masked.clone();
    apply_surgery(&mut pruned, &set).unwrap();
    let batch = random_batch(&config, 3, 14);
    assert!(pruned.logits(&batch).unwrap().max_abs_diff(&masked.logits(&batch).unwrap()) < 1e-12);

    let mut same = model.clone();
    apply_surgery(&mut same, &[]).unwrap();
    assert_eq!(same, model);
}

#[test]
fn invalid_surgery_leaves_model_untouched() {
    let model = factorized_model(15);
    for bad in [
        vec![UnitId::head(0, 1), UnitId::head(0, 1)],
        vec![UnitId::head(0, 9)],
        vec![UnitId::head(0, 1)], // layer 1 keeps 4 heads
        vec![UnitId::neuron(0, 0), UnitId::neuron(1, 1), UnitId::rank(10)],
        (0..4).flat_map(|h| [UnitId::head(0, h), UnitId::head(1, h)]).collect(),
    ] {
        let mut m = model.clone();
        assert!(apply_surgery(&mut m, &bad).is_err(), "{bad:?}");
        assert_eq!(m, model);
    }
    let mut m = model.clone();
    assert!(drop_layers(&mut m, 0).is_err());
    assert!(drop_layers(&mut m, 3).is_err());
    drop_layers(&mut m, 2).unwrap();
    assert_eq!(m, model);
}

fn check_mask_equivalence(model: &Model, set: &[UnitId], batch: &Batch) -> f64 {
    let masked = zero_mask(model, set).unwrap();
    let mut pruned = model.clone();
    apply_surgery(&mut pruned, set).unwrap();
    let a = masked.trace_values(batch).unwrap();
    let b = pruned.trace_values(batch).unwrap();
    let mut diff = a.logits.max_abs_diff(&b.logits);
    for (x, y) in a.hidden.iter().zip(&b.hidden) {
        diff = diff.max(x.max_abs_diff(y));
    }
    diff
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn surgery_equals_zero_mask(seed in 0u64..10_000) {
        let mut model = factorized_model(seed);
        let config = model.config.clone();
        model.singular_values = None;
        let set = random_prune_set(&config, seed + 1);
        let batch = random_batch(&config, 3, seed + 2);
        prop_assert!(check_mask_equivalence(&model, &set, &batch) <= 1e-10);
    }

    #[test]
    fn pruned_model_trains_and_counts(seed in 0u64..10_000) {
        let mut model = factorized_model(seed);
        let set = random_prune_set(&model.config.clone(), seed + 1);
        let before = model.param_count();
        apply_surgery(&mut model, &set).unwrap();
        prop_assert_eq!(model.param_count(), model.params.numel());
        prop_assert!(set.is_empty() || model.param_count() < before);
        let batch = random_batch(&model.config, 2, seed);
        let mut g = Graph::new();
        let p = model.bind(&mut g, true);
        let t = model.forward(&mut g, &p, &batch, ForwardOptions::default()).unwrap();
        let l = g.cross_entropy(t.logits, &labels(&batch)).unwrap();
        let grads = g.backward(l).unwrap();
        let gs = p.map(|_, v| grads.wrt(*v));
        prop_assert!(weight_taylor_scores(&model.params, &gs).is_ok());
    }
}
