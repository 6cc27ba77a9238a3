//! Relaxed ranking distillation.
//!
//! Per user, `K` "interesting" items are sampled from the head of the frozen
//! teacher's ranking (rank `k` with probability `∝ exp(-k/T)`) and `L`
//! "uninteresting" items uniformly from everything the teacher ranks below
//! the worst sampled interesting item. The student is trained to maximize a
//! relaxed Plackett-Luce likelihood: interesting items in teacher order, all
//! of them above every uninteresting item, no order among the latter.

use std::borrow::Cow;
use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use log::warn;
use rand::Rng;

use crate::data::InteractionDataset;
use crate::de::TeacherTaps;
use crate::error::{Error, Result};
use crate::gradcore::ParamStore;
use crate::kd::sample_ranked_positions;
use crate::models::{score_order, top_k, Model, TapLayout};
use crate::par::Execution;
use crate::rng::{stream_rng, Stream};

/// Default length of the cached teacher list per user.
pub const DEFAULT_CACHE_SIZE: usize = 500;

/// A frozen teacher with its per-user top-C lists of training-unseen items.
#[derive(Debug, Clone)]
pub struct TeacherSnapshot {
    pub model: Model,
    pub params: ParamStore,
    pub dataset_checksum: u64,
    capacity: usize,
    ranked: Vec<Vec<usize>>,
    scores: Vec<Vec<f64>>,
    /// `ranked[u]` sorted by id, for membership tests.
    members: Vec<Vec<usize>>,
}

impl TeacherSnapshot {
    /// Cache the `capacity` best items per user among those not in the
    /// user's training set.
    pub fn build(model: Model, params: ParamStore, ds: &InteractionDataset, capacity: usize, exec: Execution) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("teacher cache size must be at least 1".into()));
        }
        if model.num_users() != ds.num_users || model.num_items() != ds.num_items {
            return Err(Error::Config(format!(
                "teacher is {}x{} but the dataset is {}x{}",
                model.num_users(),
                model.num_items(),
                ds.num_users,
                ds.num_items
            )));
        }
        let lists: Vec<(Vec<usize>, Vec<f64>)> = {
            let v = params.values();
            let model = &model;
            exec.map_init(
                ds.num_users,
                || vec![0.0; ds.num_items],
                |buf, u| {
                    model.score_all(&v, u, buf);
                    let ids = top_k(buf, capacity, |i| ds.is_train(u, i));
                    let s = ids.iter().map(|&i| buf[i]).collect();
                    (ids, s)
                },
            )
        };
        let (ranked, scores): (Vec<_>, Vec<_>) = lists.into_iter().unzip();
        let members = ranked
            .iter()
            .map(|l: &Vec<usize>| {
                let mut s = l.clone();
                s.sort_unstable();
                s
            })
            .collect();
        Ok(TeacherSnapshot {
            model,
            params,
            dataset_checksum: ds.checksum(),
            capacity,
            ranked,
            scores,
            members,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn num_users(&self) -> usize {
        self.ranked.len()
    }

    /// Cached ranked list of `user`, best first.
    pub fn ranked(&self, user: usize) -> &[usize] {
        &self.ranked[user]
    }

    /// Teacher scores aligned with [`ranked`](Self::ranked).
    pub fn ranked_scores(&self, user: usize) -> &[f64] {
        &self.scores[user]
    }

    pub fn is_cached(&self, user: usize, item: usize) -> bool {
        self.members[user].binary_search(&item).is_ok()
    }

    pub fn score(&self, user: usize, item: usize) -> f64 {
        self.model.score(&self.params.values(), user, item)
    }

    /// Refuse a dataset other than the one the teacher was cached against.
    pub fn verify(&self, ds: &InteractionDataset) -> Result<()> {
        let got = ds.checksum();
        if got != self.dataset_checksum {
            return Err(Error::Snapshot(format!(
                "dataset checksum {got:016x} does not match teacher cache {:016x}",
                self.dataset_checksum
            )));
        }
        Ok(())
    }

    /// Error unless every user's cached list holds at least `k` items.
    pub fn require_depth(&self, k: usize) -> Result<()> {
        if let Some((u, l)) = self.ranked.iter().enumerate().find(|(_, l)| l.len() < k) {
            return Err(Error::Config(format!(
                "user {u} has only {} cached teacher items but {k} are needed; raise the cache size",
                l.len()
            )));
        }
        Ok(())
    }
}

impl TeacherTaps for TeacherSnapshot {
    fn tap_layout(&self) -> TapLayout {
        self.model.tap_layout()
    }

    fn user_tap(&self, user: usize) -> Cow<'_, [f64]> {
        Cow::Borrowed(self.model.user_tap(&self.params.values(), user))
    }

    fn item_tap(&self, item: usize) -> Cow<'_, [f64]> {
        Cow::Borrowed(self.model.item_tap(&self.params.values(), item))
    }

    fn joint_tap(&self, user: usize, item: usize) -> Cow<'_, [f64]> {
        Cow::Owned(self.model.joint_tap(&self.params.values(), user, item))
    }
}

/// Which likelihood the loss uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RrdMode {
    /// Ordered interesting items above an unordered uninteresting set.
    Relaxed,
    /// Exact Plackett-Luce over all `K + L` items in teacher order.
    FullRanking,
    /// Exact Plackett-Luce over the interesting items; uninteresting ignored.
    InterestingOnly,
}

impl FromStr for RrdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relaxed" => Ok(RrdMode::Relaxed),
            "full_ranking" => Ok(RrdMode::FullRanking),
            "interesting_only" => Ok(RrdMode::InterestingOnly),
            other => Err(Error::Config(format!("unknown rrd mode `{other}`"))),
        }
    }
}

impl fmt::Display for RrdMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RrdMode::Relaxed => "relaxed",
            RrdMode::FullRanking => "full_ranking",
            RrdMode::InterestingOnly => "interesting_only",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RrdConfig {
    pub k: usize,
    pub l: usize,
    pub temperature: f64,
    pub lambda: f64,
    pub mode: RrdMode,
}

impl Default for RrdConfig {
    fn default() -> Self {
        RrdConfig {
            k: 10,
            l: 10,
            temperature: 10.0,
            lambda: 1e-3,
            mode: RrdMode::Relaxed,
        }
    }
}

/// One user's sampled lists for one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillSample {
    pub user: usize,
    /// In teacher order.
    pub interesting: Vec<usize>,
    /// In teacher order (descending teacher score, ascending id on ties).
    /// Only the full-ranking ablation depends on this order.
    pub uninteresting: Vec<usize>,
    pub epoch: usize,
}

/// Draw `k` items of the user's cached list by position importance, returned
/// as cache positions in ascending order.
pub fn sample_interesting<R: Rng + ?Sized>(
    snapshot: &TeacherSnapshot,
    user: usize,
    k: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let list = snapshot.ranked(user);
    if list.len() < k {
        return Err(Error::Config(format!(
            "user {user} has only {} cached teacher items but K = {k}",
            list.len()
        )));
    }
    sample_ranked_positions(list.len(), k, temperature, rng)
}

/// Draw `l` items uniformly without replacement from the training-unseen
/// items the teacher ranks strictly below cache position `worst`: the rest of
/// the cached list plus everything outside it. Fewer are returned, with a
/// warning, when fewer are eligible. Output is sorted by item id.
pub fn sample_uninteresting<R: Rng + ?Sized>(
    snapshot: &TeacherSnapshot,
    ds: &InteractionDataset,
    user: usize,
    worst: usize,
    l: usize,
    rng: &mut R,
) -> Vec<usize> {
    if l == 0 {
        return Vec::new();
    }
    let cached = snapshot.ranked(user);
    let tail = &cached[(worst + 1).min(cached.len())..];
    let unseen = ds.num_items - ds.train[user].len();
    let outside = unseen - cached.len();
    let eligible = tail.len() + outside;
    let is_outside = |i: usize| !ds.is_train(user, i) && !snapshot.is_cached(user, i);

    let mut picks: Vec<usize> = if eligible <= l {
        if eligible < l {
            warn!("user {user}: only {eligible} uninteresting items eligible, wanted {l}");
        }
        tail.iter().copied().chain((0..ds.num_items).filter(|&i| is_outside(i))).collect()
    } else if 4 * eligible >= tail.len() + ds.num_items {
        // dense enough for rejection over [tail positions | item ids]
        let space = tail.len() + ds.num_items;
        let mut seen = HashSet::with_capacity(l);
        let mut out = Vec::with_capacity(l);
        while out.len() < l {
            let x = rng.random_range(0..space);
            let item = if x < tail.len() {
                tail[x]
            } else if is_outside(x - tail.len()) {
                x - tail.len()
            } else {
                continue;
            };
            if seen.insert(item) {
                out.push(item);
            }
        }
        out
    } else {
        let pool: Vec<usize> = tail.iter().copied().chain((0..ds.num_items).filter(|&i| is_outside(i))).collect();
        rand::seq::index::sample(rng, pool.len(), l).into_iter().map(|k| pool[k]).collect()
    };
    picks.sort_unstable();
    picks
}

/// Fresh samples for every user, deterministic in `(seed, epoch)`.
pub fn resample_epoch(
    snapshot: &TeacherSnapshot,
    ds: &InteractionDataset,
    cfg: &RrdConfig,
    seed: u64,
    epoch: usize,
    exec: Execution,
) -> Result<Vec<DistillSample>> {
    if cfg.k == 0 {
        return Err(Error::Config("RRD needs at least one interesting item".into()));
    }
    snapshot.require_depth(cfg.k)?;
    let samples = exec.map_init(
        ds.num_users,
        || vec![0.0; ds.num_items],
        |buf, u| -> Result<DistillSample> {
            let mut rng = stream_rng(seed, Stream::RrdSampling, &[epoch as u64, u as u64]);
            let positions = sample_interesting(snapshot, u, cfg.k, cfg.temperature, &mut rng)?;
            let worst = positions[positions.len() - 1];
            let interesting = positions.iter().map(|&j| snapshot.ranked(u)[j]).collect();
            let mut uninteresting = sample_uninteresting(snapshot, ds, u, worst, cfg.l, &mut rng);
            if uninteresting.len() > 1 {
                for &i in &uninteresting {
                    buf[i] = snapshot.score(u, i);
                }
                uninteresting.sort_unstable_by(|&a, &b| score_order(buf, a, b));
            }
            Ok(DistillSample {
                user: u,
                interesting,
                uninteresting,
                epoch,
            })
        },
    );
    samples.into_iter().collect()
}

/// Per-user negative log-likelihood with its score gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ListLoss {
    pub loss: f64,
    pub d_ordered: Vec<f64>,
    pub d_unordered: Vec<f64>,
}

/// `-Σ_k [x_k - ln(Σ_{i≥k} e^{x_i} + Σ_j e^{z_j})]` over the ordered scores
/// `x` with the unordered scores `z` appended to every denominator.
///
/// The `z` terms are summed in sorted order, so any permutation of
/// `unordered` gives a bitwise identical loss.
pub fn list_loss(ordered: &[f64], unordered: &[f64]) -> ListLoss {
    let mut z: Vec<(f64, usize)> = unordered.iter().copied().zip(0..).collect();
    z.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let z_max = z.last().map_or(f64::NEG_INFINITY, |p| p.0);

    let n = ordered.len();
    let mut suffix_max = vec![z_max; n + 1];
    for k in (0..n).rev() {
        suffix_max[k] = suffix_max[k + 1].max(ordered[k]);
    }

    let mut loss = 0.0;
    let mut d_ordered = vec![0.0; n];
    let mut d_unordered = vec![0.0; unordered.len()];
    let mut w = vec![0.0; n];
    let mut wz = vec![0.0; z.len()];
    for k in 0..n {
        let m = suffix_max[k];
        let mut denom = 0.0;
        for (i, x) in ordered.iter().enumerate().skip(k) {
            w[i] = (x - m).exp();
            denom += w[i];
        }
        for (j, &(s, _)) in z.iter().enumerate() {
            wz[j] = (s - m).exp();
            denom += wz[j];
        }
        loss -= ordered[k] - (m + denom.ln());
        d_ordered[k] -= 1.0;
        for i in k..n {
            d_ordered[i] += w[i] / denom;
        }
        for (j, &(_, orig)) in z.iter().enumerate() {
            d_unordered[orig] += wz[j] / denom;
        }
    }
    ListLoss {
        loss,
        d_ordered,
        d_unordered,
    }
}

/// Mean over `samples` of the per-user loss selected by `mode`; gradients
/// times `scale` go into the student's parameters.
pub fn rrd_loss(model: &Model, params: &mut ParamStore, samples: &[DistillSample], mode: RrdMode, scale: f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let user_scale = scale / samples.len() as f64;
    let (v, mut g) = params.split();
    let mut total = 0.0;
    for s in samples {
        let r: Vec<f64> = s.interesting.iter().map(|&i| model.score(&v, s.user, i)).collect();
        let z: Vec<f64> = s.uninteresting.iter().map(|&i| model.score(&v, s.user, i)).collect();
        let (ordered_items, ordered, unordered_items, unordered): (Vec<usize>, Vec<f64>, &[usize], &[f64]) = match mode {
            RrdMode::Relaxed => (s.interesting.clone(), r, &s.uninteresting, &z),
            RrdMode::InterestingOnly => (s.interesting.clone(), r, &[], &[]),
            RrdMode::FullRanking => {
                let items = s.interesting.iter().chain(&s.uninteresting).copied().collect();
                (items, r.into_iter().chain(z.iter().copied()).collect(), &[], &[])
            }
        };
        let out = list_loss(&ordered, unordered);
        total += out.loss;
        for (&i, &d) in ordered_items.iter().zip(&out.d_ordered) {
            model.accumulate_score(&v, &mut g, s.user, i, d * user_scale);
        }
        // by item id, so the user-side sums do not depend on list order
        let mut pending: Vec<(usize, f64)> = unordered_items.iter().copied().zip(out.d_unordered).collect();
        pending.sort_unstable_by_key(|p| p.0);
        for (i, d) in pending {
            model.accumulate_score(&v, &mut g, s.user, i, d * user_scale);
        }
    }
    total / samples.len() as f64
}
