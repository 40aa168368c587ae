mod common;

use common::{emb, oracle_distance, random_batch, rng};
use proptest::prelude::*;
use quitlab::losses::{
    batch_objective, quit_quad_loss, quit_trihard_loss, LossKind, LossSpec, Margins, Role,
};
use quitlab::mining::{MiningBatch, PositivePolicy};
use quitlab::trainer::{Gradients, Mlp, MlpConfig};
use quitlab::{Embedding, Metric};

fn metric_of(l2: bool) -> Metric {
    if l2 {
        Metric::L2
    } else {
        Metric::SquaredL2
    }
}

fn kind_strategy() -> impl Strategy<Value = LossKind> {
    prop::sample::select(LossKind::ALL.to_vec())
}

/// Batch with 2..=4 places of 2..=3 views each, coordinates in [-3, 3].
fn batch_strategy() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<String>)> {
    (1usize..=4, 2usize..=4, prop::collection::vec(2usize..=3, 4)).prop_flat_map(
        |(dim, n_places, views)| {
            let ids: Vec<String> = (0..n_places)
                .flat_map(|p| std::iter::repeat_n(format!("p{p}"), views[p]))
                .collect();
            let n = ids.len();
            (
                prop::collection::vec(prop::collection::vec(-3.0f64..3.0, dim), n),
                Just(ids),
            )
        },
    )
}

fn to_embs(points: &[Vec<f64>]) -> Vec<Embedding> {
    points.iter().map(|p| emb(p)).collect()
}

fn spec(kind: LossKind, metric: Metric, alpha: f64) -> LossSpec {
    let mut s = LossSpec::new(kind, 2);
    s.metric = metric;
    s.margins = Margins::new(alpha, 0.2).unwrap();
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn every_loss_is_nonnegative(kind in kind_strategy(), l2 in any::<bool>(), (pts, ids) in batch_strategy(), alpha in 0.0f64..2.0) {
        let embs = to_embs(&pts);
        let s = spec(kind, metric_of(l2), alpha);
        for a in 0..embs.len() {
            let batch = MiningBatch::new(&embs, &ids, a).unwrap();
            if let Ok(l) = s.anchor_loss(&batch, 9) {
                prop_assert!(l.value() >= 0.0);
            }
        }
    }

    #[test]
    fn translation_leaves_values_unchanged(kind in kind_strategy(), l2 in any::<bool>(), (pts, ids) in batch_strategy(), shift in -5.0f64..5.0) {
        let embs = to_embs(&pts);
        let moved: Vec<Embedding> = pts.iter().map(|p| emb(&p.iter().enumerate().map(|(i, x)| x + shift * (i as f64 + 1.0)).collect::<Vec<_>>())).collect();
        let s = spec(kind, metric_of(l2), 0.3);
        for a in 0..embs.len() {
            let before = s.anchor_loss(&MiningBatch::new(&embs, &ids, a).unwrap(), 4);
            let after = s.anchor_loss(&MiningBatch::new(&moved, &ids, a).unwrap(), 4);
            match (before, after) {
                (Ok(b), Ok(c)) => prop_assert!((b.value() - c.value()).abs() <= 1e-9 * (1.0 + b.value().abs()), "{} vs {}", b.value(), c.value()),
                (Err(e1), Err(e2)) => prop_assert_eq!(e1, e2),
                _ => prop_assert!(false, "mining outcome changed under translation"),
            }
        }
    }

    #[test]
    fn larger_alpha_never_decreases_loss(kind in kind_strategy(), l2 in any::<bool>(), (pts, ids) in batch_strategy(), alpha in 0.0f64..1.0, delta in 0.0f64..1.0) {
        let embs = to_embs(&pts);
        let (lo, hi) = (spec(kind, metric_of(l2), alpha), spec(kind, metric_of(l2), alpha + delta));
        for a in 0..embs.len() {
            let batch = MiningBatch::new(&embs, &ids, a).unwrap();
            if let (Ok(x), Ok(y)) = (lo.anchor_loss(&batch, 1), hi.anchor_loss(&batch, 1)) {
                prop_assert!(y.value() >= x.value());
            }
        }
    }

    #[test]
    fn pushing_hardest_negative_away_never_increases_quit_trihard(l2 in any::<bool>(), (pts, ids) in batch_strategy(), scale in 1.0f64..4.0, k in 1usize..=3) {
        let metric = metric_of(l2);
        let m = Margins::default();
        let embs = to_embs(&pts);
        for a in 0..embs.len() {
            let batch = MiningBatch::new(&embs, &ids, a).unwrap();
            let Ok(before) = quit_trihard_loss(&batch, k, &m, metric, PositivePolicy::Clamp) else { continue };
            let n = before.members[&Role::Negative(0)];
            let mut moved = pts.clone();
            moved[n] = pts[a].iter().zip(&pts[n]).map(|(x, y)| x + scale * (y - x)).collect();
            let moved = to_embs(&moved);
            let after = quit_trihard_loss(&MiningBatch::new(&moved, &ids, a).unwrap(), k, &m, metric, PositivePolicy::Clamp).unwrap();
            prop_assert!(after.value() <= before.value(), "{} > {}", after.value(), before.value());
        }
    }

    #[test]
    fn zero_value_without_exact_kinks_has_zero_gradients(kind in kind_strategy(), l2 in any::<bool>(), (pts, ids) in batch_strategy()) {
        let embs = to_embs(&pts);
        let s = spec(kind, metric_of(l2), 0.3);
        for a in 0..embs.len() {
            let Ok(l) = s.anchor_loss(&MiningBatch::new(&embs, &ids, a).unwrap(), 2) else { continue };
            if l.value() == 0.0 && l.hinge_args.iter().all(|&h| h != 0.0) {
                prop_assert!(l.result.grads.values().flatten().all(|&g| g == 0.0));
            }
        }
    }
}

/// quit_quad on random 3-D batches against a term-by-term expansion with
/// independently mined members.
#[test]
fn quit_quad_matches_term_expansion() {
    let m = Margins::default();
    let mut r = rng(314);
    let mut checked = 0;
    for trial in 0..500 {
        let metric = if trial % 2 == 0 {
            Metric::SquaredL2
        } else {
            Metric::L2
        };
        let (embs, ids) = random_batch(&mut r, 4, 4, 3, false);
        for a in 0..embs.len() {
            let d = |i: usize, j: usize| oracle_distance(&embs[i], &embs[j], metric);
            let mut pos: Vec<usize> = (0..embs.len())
                .filter(|&i| i != a && ids[i] == ids[a])
                .collect();
            pos.sort_by(|&i, &j| d(a, i).total_cmp(&d(a, j)).then(i.cmp(&j)));
            pos.truncate(2);
            let mut neg: Vec<usize> = (0..embs.len()).filter(|&i| ids[i] != ids[a]).collect();
            neg.sort_by(|&i, &j| d(a, i).total_cmp(&d(a, j)).then(i.cmp(&j)));
            let got = quit_quad_loss(
                &MiningBatch::new(&embs, &ids, a).unwrap(),
                2,
                &m,
                metric,
                PositivePolicy::Clamp,
            );
            let (Some(&n1), false) = (neg.first(), pos.is_empty()) else {
                assert!(got.is_err());
                continue;
            };
            let Some(&n2) = neg.iter().find(|&&i| ids[i] != ids[n1]) else {
                assert!(got.is_err());
                continue;
            };
            let expect: f64 = pos
                .iter()
                .map(|&p| (d(a, p) - d(a, n1) + m.alpha).max(0.0))
                .sum::<f64>()
                + pos
                    .iter()
                    .map(|&p| (d(a, p) - d(n1, n2) + m.beta).max(0.0))
                    .sum::<f64>();
            let got = got.unwrap().value();
            assert!(
                (got - expect).abs() <= 1e-12 * (1.0 + expect),
                "trial {trial} anchor {a}: {got} vs {expect}"
            );
            checked += 1;
        }
    }
    assert!(checked > 1000, "only {checked} anchors checked");
}

/// A small SGD step through the network along the analytic gradient never
/// raises the batch objective beyond float noise.
#[test]
fn small_sgd_step_does_not_increase_batch_loss() {
    let mut r = rng(2718);
    for trial in 0..40u64 {
        let kind = LossKind::ALL[trial as usize % LossKind::ALL.len()];
        let mut s = LossSpec::new(kind, 2);
        s.metric = if trial % 2 == 0 {
            Metric::SquaredL2
        } else {
            Metric::L2
        };
        let mut model = Mlp::new(MlpConfig {
            input_dim: 6,
            hidden_dims: vec![8],
            output_dim: 4,
            seed: trial,
            ..MlpConfig::default()
        })
        .unwrap();
        let (feats, ids) = random_batch(&mut r, 3, 3, 6, false);
        let objective = |model: &Mlp| {
            let traces: Vec<_> = feats
                .iter()
                .map(|f| model.forward_trace(f.as_slice()).unwrap())
                .collect();
            let out: Vec<Embedding> = traces.iter().map(|t| t.output.clone()).collect();
            (batch_objective(&out, &ids, &s, trial).unwrap(), traces)
        };
        let (Some(before), traces) = objective(&model) else {
            continue;
        };
        let mut grads = Gradients::zeros_like(&model);
        for (t, g) in traces.iter().zip(&before.grads) {
            model.backward(t, g, &mut grads).unwrap();
        }
        model.sgd_step(&grads, 1e-6);
        let after = objective(&model).0.unwrap();
        assert!(
            after.value <= before.value + 1e-9,
            "{kind}: {} -> {}",
            before.value,
            after.value
        );
    }
}
