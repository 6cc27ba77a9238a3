//! Leave-one-out ranking evaluation, early stopping, paired t-tests and the
//! inference latency benchmark.

use std::fmt::{self, Write as _};
use std::time::Instant;

use log::warn;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::{InteractionDataset, NegativePool};
use crate::error::{Error, Result};
use crate::gradcore::ParamStore;
use crate::models::{Model, Scorer};
use crate::par::Execution;

pub const CUTOFFS: [usize; 3] = [5, 10, 20];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Metric {
    Hit,
    Mrr,
    Ndcg,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Hit, Metric::Mrr, Metric::Ndcg];

    /// Short column label: `H`, `M` or `N`.
    pub fn label(self) -> &'static str {
        match self {
            Metric::Hit => "H",
            Metric::Mrr => "M",
            Metric::Ndcg => "N",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Hit, reciprocal rank and NDCG of a single held-out item.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RankMetrics {
    pub hit: f64,
    pub mrr: f64,
    pub ndcg: f64,
}

impl RankMetrics {
    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Hit => self.hit,
            Metric::Mrr => self.mrr,
            Metric::Ndcg => self.ndcg,
        }
    }
}

/// Metrics at cutoff `n` for a held-out item at 1-based `position`
/// (`None` for a miss).
pub fn rank_metrics(position: Option<usize>, n: usize) -> RankMetrics {
    match position {
        Some(p) if p >= 1 && p <= n => RankMetrics {
            hit: 1.0,
            mrr: 1.0 / p as f64,
            ndcg: std::f64::consts::LN_2 / ((p + 1) as f64).ln(),
        },
        _ => RankMetrics::default(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    Validation,
    Test,
}

impl Phase {
    pub fn held_out(self, ds: &InteractionDataset, user: usize) -> usize {
        match self {
            Phase::Validation => ds.val_item[user],
            Phase::Test => ds.test_item[user],
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Validation => "validation",
            Phase::Test => "test",
        })
    }
}

/// Rank of `target` among `negatives`: one plus the negatives scoring higher,
/// plus the tied negatives with a smaller id.
pub fn held_out_rank<S: Scorer + ?Sized>(scorer: &S, user: usize, target: usize, negatives: &[u32]) -> usize {
    let s = scorer.score(user, target);
    1 + negatives
        .iter()
        .map(|&j| (j as usize, scorer.score(user, j as usize)))
        .filter(|&(j, sj)| sj > s || (sj == s && j < target))
        .count()
}

/// Result of one evaluation pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub phase: Phase,
    /// `per_repeat[r][c]`: user-averaged metrics of repeat `r` at `CUTOFFS[c]`.
    pub per_repeat: Vec<[RankMetrics; 3]>,
    /// `positions[u][r]`: 1-based rank of user `u`'s held-out item in repeat `r`.
    pub positions: Vec<Vec<u32>>,
}

fn cutoff_index(n: usize) -> usize {
    CUTOFFS
        .iter()
        .position(|&c| c == n)
        .unwrap_or_else(|| panic!("cutoff {n} is not one of {CUTOFFS:?}"))
}

impl EvalReport {
    pub fn repeats(&self) -> usize {
        self.per_repeat.len()
    }

    /// Per-repeat values of one metric.
    pub fn values(&self, metric: Metric, n: usize) -> Vec<f64> {
        let c = cutoff_index(n);
        self.per_repeat.iter().map(|r| r[c].get(metric)).collect()
    }

    /// Mean over repeats.
    pub fn mean(&self, metric: Metric, n: usize) -> f64 {
        let v = self.values(metric, n);
        v.iter().sum::<f64>() / v.len() as f64
    }

    /// Per-user metric averaged over repeats: the pairing unit of the t-test.
    pub fn per_user(&self, metric: Metric, n: usize) -> Vec<f64> {
        self.positions
            .iter()
            .map(|ps| ps.iter().map(|&p| rank_metrics(Some(p as usize), n).get(metric)).sum::<f64>() / ps.len() as f64)
            .collect()
    }

    /// CSV rows `method,phi,metric,cutoff,repeat,value`, one per repeat plus
    /// a `mean` row per metric and cutoff. No header.
    pub fn csv_rows(&self, method: &str, phi: f64) -> String {
        let mut out = String::new();
        for metric in Metric::ALL {
            for n in CUTOFFS {
                for (r, v) in self.values(metric, n).iter().enumerate() {
                    let _ = writeln!(out, "{method},{phi},{metric},{n},{r},{v:.6}");
                }
                let _ = writeln!(out, "{method},{phi},{metric},{n},mean,{:.6}", self.mean(metric, n));
            }
        }
        out
    }

    /// One-line summary: every metric at every cutoff, repeat-averaged.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        for metric in Metric::ALL {
            for n in CUTOFFS {
                if !s.is_empty() {
                    s.push(' ');
                }
                let _ = write!(s, "{metric}@{n}={:.4}", self.mean(metric, n));
            }
        }
        s
    }
}

pub const CSV_HEADER: &str = "method,phi,metric,cutoff,repeat,value";

/// Rank every user's held-out item against each repeat of the pool and
/// average the metrics over users, per repeat.
pub fn evaluate<S: Scorer + ?Sized>(
    scorer: &S,
    ds: &InteractionDataset,
    pool: &NegativePool,
    phase: Phase,
    exec: Execution,
) -> EvalReport {
    assert_eq!(pool.num_users(), ds.num_users, "pool and dataset disagree on users");
    let repeats = pool.repeats;
    let positions: Vec<Vec<u32>> = exec.map(ds.num_users, |u| {
        let target = phase.held_out(ds, u);
        (0..repeats)
            .map(|r| held_out_rank(scorer, u, target, pool.draw(u, r)) as u32)
            .collect()
    });
    let users = ds.num_users.max(1) as f64;
    let per_repeat = (0..repeats)
        .map(|r| {
            let mut acc = [RankMetrics::default(); 3];
            for ps in &positions {
                for (c, &n) in CUTOFFS.iter().enumerate() {
                    let m = rank_metrics(Some(ps[r] as usize), n);
                    acc[c].hit += m.hit;
                    acc[c].mrr += m.mrr;
                    acc[c].ndcg += m.ndcg;
                }
            }
            acc.map(|m| RankMetrics {
                hit: m.hit / users,
                mrr: m.mrr / users,
                ndcg: m.ndcg / users,
            })
        })
        .collect();
    EvalReport {
        phase,
        per_repeat,
        positions,
    }
}

/// Stops after `patience` successive epochs without a strict improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopper {
    pub patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: None,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, value: f64) -> StopDecision {
        let improved = match self.best {
            None => true,
            Some((_, b)) => value > b,
        };
        if improved {
            self.best = Some((epoch, value));
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        StopDecision {
            improved,
            stop: self.stale >= self.patience,
        }
    }

    /// `(epoch, value)` of the best observation so far.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

/// Replay a 1-based validation history. Returns the epoch at which training
/// stops (`None` if it runs to the end of the history) and the best epoch.
pub fn early_stop(history: &[f64], patience: usize) -> (Option<usize>, usize) {
    assert!(!history.is_empty(), "empty validation history");
    let mut es = EarlyStopper::new(patience);
    for (k, &v) in history.iter().enumerate() {
        if es.observe(k + 1, v).stop {
            return (Some(k + 1), es.best().unwrap().0);
        }
    }
    (None, es.best().unwrap().0)
}

/// Two-sided paired t-test p-value for `a` against `b`.
///
/// When every difference is equal the statistic is undefined: the p-value
/// is 1 for a zero mean difference and 0 otherwise.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::InvalidArgument("a paired t-test needs at least two pairs".into()));
    }
    let n = a.len() as f64;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        if mean == 0.0 {
            return Ok(1.0);
        }
        warn!("paired differences have zero variance with mean {mean}; reporting p = 0");
        return Ok(0.0);
    }
    let t = mean / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).expect("positive degrees of freedom");
    Ok((2.0 * dist.sf(t.abs())).min(1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyReport {
    /// Median wall time over the repeats, seconds.
    pub seconds: f64,
    pub timings: Vec<f64>,
    pub param_count: usize,
    /// Test H@5 relative to the teacher's, when known.
    pub h5_ratio: Option<f64>,
}

/// Time producing the full ranked list of training-unseen items for every
/// user, `repeats` times, and report the median.
pub fn bench_latency(model: &Model, params: &ParamStore, ds: &InteractionDataset, repeats: usize, exec: Execution) -> LatencyReport {
    assert!(repeats >= 1, "at least one timed run");
    let v = params.values();
    let mut timings: Vec<f64> = (0..repeats)
        .map(|_| {
            let start = Instant::now();
            let lists = exec.map(ds.num_users, |u| model.full_ranking(&v, u, |i| ds.is_train(u, i)));
            let elapsed = start.elapsed().as_secs_f64();
            std::hint::black_box(lists);
            elapsed
        })
        .collect();
    let recorded = timings.clone();
    timings.sort_unstable_by(f64::total_cmp);
    let mid = timings.len() / 2;
    let seconds = if timings.len() % 2 == 1 {
        timings[mid]
    } else {
        0.5 * (timings[mid - 1] + timings[mid])
    };
    LatencyReport {
        seconds,
        timings: recorded,
        param_count: model.param_count(),
        h5_ratio: None,
    }
}

#[cfg(test)]
mod tests;
