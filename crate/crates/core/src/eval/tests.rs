use super::*;
use crate::data::synthetic::PlantedBlocks;
use crate::data::{build_negative_pool, FilterConfig};
use crate::models::{BaseModelKind, ModelSpec};
use crate::rng::{derive_seed, Rng as ChaRng, Stream};
use rand::{Rng, SeedableRng};

struct FnScorer<F> {
    items: usize,
    f: F,
}

impl<F: Fn(usize, usize) -> f64 + Sync> Scorer for FnScorer<F> {
    fn num_items(&self) -> usize {
        self.items
    }
    fn score(&self, user: usize, item: usize) -> f64 {
        (self.f)(user, item)
    }
}

fn synthetic(users: usize, items: usize) -> InteractionDataset {
    let gen = PlantedBlocks {
        num_users: users,
        num_items: items,
        ..Default::default()
    };
    InteractionDataset::from_log(&gen.generate(3), FilterConfig::users(3)).unwrap()
}

#[test]
fn closed_form_metrics() {
    assert_eq!(rank_metrics(Some(1), 5), RankMetrics { hit: 1.0, mrr: 1.0, ndcg: 1.0 });
    let m = rank_metrics(Some(3), 5);
    assert_eq!(m.hit, 1.0);
    assert_eq!(m.mrr, 1.0 / 3.0);
    assert_eq!(m.ndcg, 0.5);
    assert_eq!(rank_metrics(Some(7), 5), RankMetrics::default());
    let m = rank_metrics(Some(7), 10);
    assert_eq!((m.hit, m.mrr), (1.0, 1.0 / 7.0));
    assert!((m.ndcg - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(rank_metrics(None, 20), RankMetrics::default());
}

#[test]
fn metric_orderings_on_random_positions() {
    let mut rng = ChaRng::seed_from_u64(1);
    for _ in 0..1000 {
        let p = rng.random_range(1..=500);
        let ms: Vec<RankMetrics> = CUTOFFS.iter().map(|&n| rank_metrics(Some(p), n)).collect();
        for m in &ms {
            assert!(m.hit >= m.ndcg && m.ndcg >= m.mrr && m.mrr >= 0.0 && m.hit <= 1.0);
        }
        for w in ms.windows(2) {
            assert!(w[0].hit <= w[1].hit && w[0].mrr <= w[1].mrr && w[0].ndcg <= w[1].ndcg);
        }
    }
}

#[test]
fn oracle_scorer_scores_perfectly() {
    let ds = synthetic(60, 600);
    let pool = build_negative_pool(&ds, 1);
    let oracle = FnScorer {
        items: ds.num_items,
        f: |u: usize, i: usize| if i == ds.test_item[u] { 1.0 } else { 0.0 },
    };
    let report = evaluate(&oracle, &ds, &pool, Phase::Test, Execution::Parallel);
    for metric in Metric::ALL {
        for n in CUTOFFS {
            assert_eq!(report.mean(metric, n), 1.0);
        }
    }
    // same scorer on validation: the test item outranks the validation item
    let report = evaluate(&oracle, &ds, &pool, Phase::Validation, Execution::Parallel);
    assert!(report.positions.iter().all(|ps| ps.iter().all(|&p| p >= 1)));
}

#[test]
fn ties_break_by_item_id() {
    let ds = synthetic(30, 600);
    let pool = build_negative_pool(&ds, 2);
    let flat = FnScorer {
        items: ds.num_items,
        f: |_: usize, _: usize| 0.0,
    };
    let report = evaluate(&flat, &ds, &pool, Phase::Test, Execution::Sequential);
    for u in 0..ds.num_users {
        for r in 0..pool.repeats {
            let smaller = pool.draw(u, r).iter().filter(|&&j| (j as usize) < ds.test_item[u]).count();
            assert_eq!(report.positions[u][r] as usize, 1 + smaller);
        }
    }
}

#[test]
fn random_scorer_hits_at_chance() {
    let ds = synthetic(2000, 600);
    let pool = build_negative_pool(&ds, 3);
    let noise = FnScorer {
        items: ds.num_items,
        f: |u: usize, i: usize| derive_seed(11, Stream::Synthetic, &[u as u64, i as u64]) as f64,
    };
    let report = evaluate(&noise, &ds, &pool, Phase::Test, Execution::Parallel);
    let h5 = report.mean(Metric::Hit, 5);
    assert!((h5 - 0.01).abs() <= 0.005, "H@5 = {h5}");
}

fn bpr(ds: &InteractionDataset, width: usize, seed: u64) -> (Model, ParamStore) {
    let mut p = ParamStore::new();
    let spec = ModelSpec {
        kind: BaseModelKind::Bpr,
        num_users: ds.num_users,
        num_items: ds.num_items,
        width,
        neumf_layers: 1,
    };
    let m = Model::build(&spec, &mut p, "m", &mut ChaRng::seed_from_u64(seed)).unwrap();
    (m, p)
}

#[test]
fn evaluation_is_pure_and_splits_by_repeat() {
    let ds = synthetic(80, 600);
    let pool = build_negative_pool(&ds, 4);
    let (m, p) = bpr(&ds, 8, 1);
    let scorer = crate::models::Bound::new(&m, &p);
    let a = evaluate(&scorer, &ds, &pool, Phase::Test, Execution::Parallel);
    let b = evaluate(&scorer, &ds, &pool, Phase::Test, Execution::Sequential);
    assert_eq!(a, b);
    assert_eq!(a.repeats(), 5);
    for metric in Metric::ALL {
        for n in CUTOFFS {
            let singles: f64 = (0..5)
                .map(|r| evaluate(&scorer, &ds, &pool.single_repeat(r), Phase::Test, Execution::Parallel).mean(metric, n))
                .sum::<f64>()
                / 5.0;
            assert!((singles - a.mean(metric, n)).abs() < 1e-12);
        }
    }
    for r in &a.per_repeat {
        assert!(r[0].hit <= r[1].hit && r[1].hit <= r[2].hit);
        for m in r {
            assert!(m.mrr <= m.ndcg && m.ndcg <= m.hit && m.hit <= 1.0 && m.mrr >= 0.0);
        }
    }
    let per_user = a.per_user(Metric::Hit, 5);
    assert_eq!(per_user.len(), ds.num_users);
    let mean = per_user.iter().sum::<f64>() / per_user.len() as f64;
    assert!((mean - a.mean(Metric::Hit, 5)).abs() < 1e-12);

    let csv = a.csv_rows("student", 0.1);
    assert_eq!(csv.lines().count(), 3 * 3 * 6);
    assert!(csv.lines().all(|l| l.starts_with("student,0.1,") && l.split(',').count() == 6));
    assert!(a.summary().starts_with("H@5="));
}

#[test]
fn early_stopping_traces() {
    assert_eq!(early_stop(&[0.3; 100], 30), (Some(31), 1));
    let mut h: Vec<f64> = (1..=7).map(|k| k as f64 / 10.0).collect();
    h.extend(std::iter::repeat_n(0.7, 100));
    assert_eq!(early_stop(&h, 30), (Some(37), 7));
    let rising: Vec<f64> = (0..1000).map(|k| k as f64).collect();
    assert_eq!(early_stop(&rising, 30), (None, 1000));
    // a dip that recovers without beating the best still counts as stale
    let mut h = vec![0.5, 0.4];
    h.extend(std::iter::repeat_n(0.5, 29));
    assert_eq!(early_stop(&h, 30), (Some(31), 1));
}

#[test]
fn paired_ttest_reference_values() {
    let a = [0.9, 0.8, 0.75, 0.6, 0.95];
    let b = [0.7, 0.82, 0.6, 0.55, 0.8];
    // by hand: d = (0.2, -0.02, 0.15, 0.05, 0.15), mean 0.106
    let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / 5.0;
    let sd = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
    let t = mean / (sd / 5f64.sqrt());
    assert!((t - 2.661670393044675).abs() < 1e-12);
    // two-sided tail of Student's t with 4 dof
    let p = paired_ttest(&a, &b).unwrap();
    assert!((p - 0.05629225807578871).abs() < 1e-10, "{p}");
    let closed = 1.0 - t / (t * t + 4.0).sqrt() * (1.0 + 2.0 / (t * t + 4.0));
    assert!((p - closed).abs() < 1e-12);

    let a = [3.1, 2.4, 5.0, 4.2, 3.3, 2.9, 4.8, 3.9];
    let b = [2.2, 2.5, 4.1, 3.0, 3.1, 2.2, 4.0, 3.6];
    assert!((paired_ttest(&a, &b).unwrap() - 0.005349138207252688).abs() < 1e-10);
    assert_eq!(paired_ttest(&a, &b).unwrap(), paired_ttest(&b, &a).unwrap());
}

#[test]
fn paired_ttest_degenerate_cases() {
    let a = [0.1, 0.5, 0.9];
    assert_eq!(paired_ttest(&a, &a).unwrap(), 1.0);
    assert_eq!(paired_ttest(&[1.0; 5], &[0.0; 5]).unwrap(), 0.0);
    assert!(paired_ttest(&[1.0], &[0.0]).is_err());
    assert!(paired_ttest(&[1.0, 2.0], &[0.0]).is_err());
}

#[test]
fn latency_report() {
    let ds = synthetic(40, 600);
    let (m, p) = bpr(&ds, 8, 1);
    let one = bench_latency(&m, &p, &ds, 1, Execution::Sequential);
    assert_eq!(one.timings.len(), 1);
    assert_eq!(one.seconds, one.timings[0]);
    assert!(one.seconds > 0.0);
    assert_eq!(one.param_count, (ds.num_users + ds.num_items) * 8);
    let three = bench_latency(&m, &p, &ds, 4, Execution::Parallel);
    let mut t = three.timings.clone();
    t.sort_by(f64::total_cmp);
    assert_eq!(three.seconds, 0.5 * (t[1] + t[2]));
}
