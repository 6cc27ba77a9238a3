//! Implicit-feedback interaction data: ingestion, filtering, leave-one-out
//! splits and negative sampling.

mod negatives;
pub mod synthetic;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;

use crate::error::{Error, Result};

pub(crate) use negatives::sample_one_negative;
pub use negatives::{build_negative_pool, build_negative_pool_with, sample_train_negatives, NegativePool, POOL_REPEATS, POOL_SIZE};

/// Minimum distinct items a user needs so that one item can be held out for
/// validation, one for test, and at least one remains for training.
pub const MIN_ITEMS_FOR_SPLIT: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FilterConfig {
    pub min_user_interactions: usize,
    pub min_item_interactions: usize,
}

impl FilterConfig {
    pub fn users(min_user_interactions: usize) -> Self {
        FilterConfig {
            min_user_interactions,
            min_item_interactions: 1,
        }
    }
}

/// Binary user-item interactions with a leave-one-out split.
///
/// Dense user and item ids are assigned in first-seen order of the filtered
/// log. `train[u]` is sorted ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionDataset {
    pub num_users: usize,
    pub num_items: usize,
    pub train: Vec<Vec<usize>>,
    pub val_item: Vec<usize>,
    pub test_item: Vec<usize>,
    pub user_index: HashMap<String, usize>,
    pub item_index: HashMap<String, usize>,
    user_names: Vec<String>,
    item_names: Vec<String>,
}

/// Parse a `user<TAB>item` log. Blank lines and lines starting with `#` are
/// skipped; extra columns are ignored.
pub fn read_tsv(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut cols = line.split('\t');
        match (cols.next(), cols.next()) {
            (Some(u), Some(i)) if !u.is_empty() && !i.is_empty() => {
                out.push((u.to_string(), i.to_string()))
            }
            _ => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: n + 1,
                    message: "expected `user<TAB>item`".into(),
                })
            }
        }
    }
    Ok(out)
}

pub fn write_tsv(path: impl AsRef<Path>, log: &[(String, String)]) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::with_capacity(log.len() * 12);
    for (u, i) in log {
        let _ = writeln!(s, "{u}\t{i}");
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn load_interactions(path: impl AsRef<Path>, min_user_interactions: usize) -> Result<InteractionDataset> {
    let log = read_tsv(path)?;
    InteractionDataset::from_log(&log, FilterConfig::users(min_user_interactions))
}

/// The deduplicated, filtered log in its original order. Building a dataset
/// from it gives the same dataset as building from `log`.
pub fn filter_log(log: &[(String, String)], cfg: FilterConfig) -> Vec<(String, String)> {
    filter_to_fixpoint(dedupe(log), cfg)
        .into_iter()
        .map(|(u, i)| (u.to_string(), i.to_string()))
        .collect()
}

/// Remove duplicate pairs, keeping the first occurrence.
fn dedupe(log: &[(String, String)]) -> Vec<(&str, &str)> {
    let mut seen = std::collections::HashSet::with_capacity(log.len());
    log.iter()
        .filter(|(u, i)| seen.insert((u.as_str(), i.as_str())))
        .map(|(u, i)| (u.as_str(), i.as_str()))
        .collect()
}

/// Drop users and items below their support thresholds until nothing changes.
/// Users that cannot be split (fewer than [`MIN_ITEMS_FOR_SPLIT`] items) are
/// dropped as well.
fn filter_to_fixpoint<'a>(mut pairs: Vec<(&'a str, &'a str)>, cfg: FilterConfig) -> Vec<(&'a str, &'a str)> {
    let min_user = cfg.min_user_interactions.max(MIN_ITEMS_FOR_SPLIT);
    loop {
        let mut user_count: HashMap<&str, usize> = HashMap::new();
        let mut item_count: HashMap<&str, usize> = HashMap::new();
        for &(u, i) in &pairs {
            *user_count.entry(u).or_default() += 1;
            *item_count.entry(i).or_default() += 1;
        }
        let before = pairs.len();
        for (&u, &c) in &user_count {
            if c >= cfg.min_user_interactions && c < MIN_ITEMS_FOR_SPLIT {
                warn!("user `{u}` has only {c} distinct items; too few to split, dropping");
            }
        }
        pairs.retain(|(u, i)| user_count[u] >= min_user && item_count[i] >= cfg.min_item_interactions);
        if pairs.len() == before {
            return pairs;
        }
    }
}

impl InteractionDataset {
    /// Build a dataset from a raw `(user, item)` log in file order.
    ///
    /// Per user, the last distinct item in file order is the test item and
    /// the one before it the validation item.
    pub fn from_log(log: &[(String, String)], cfg: FilterConfig) -> Result<Self> {
        let pairs = filter_to_fixpoint(dedupe(log), cfg);
        if pairs.is_empty() {
            return Err(Error::EmptyDataset);
        }

        let mut user_index = HashMap::new();
        let mut item_index = HashMap::new();
        let mut user_names = Vec::new();
        let mut item_names = Vec::new();
        let mut per_user: Vec<Vec<usize>> = Vec::new();
        for &(u, i) in &pairs {
            let uid = *user_index.entry(u.to_string()).or_insert_with(|| {
                user_names.push(u.to_string());
                per_user.push(Vec::new());
                user_names.len() - 1
            });
            let iid = *item_index.entry(i.to_string()).or_insert_with(|| {
                item_names.push(i.to_string());
                item_names.len() - 1
            });
            per_user[uid].push(iid);
        }

        let mut train = Vec::with_capacity(per_user.len());
        let mut val_item = Vec::with_capacity(per_user.len());
        let mut test_item = Vec::with_capacity(per_user.len());
        for mut items in per_user {
            debug_assert!(items.len() >= MIN_ITEMS_FOR_SPLIT);
            test_item.push(items.pop().expect("filtered"));
            val_item.push(items.pop().expect("filtered"));
            items.sort_unstable();
            train.push(items);
        }

        Ok(InteractionDataset {
            num_users: user_names.len(),
            num_items: item_names.len(),
            train,
            val_item,
            test_item,
            user_index,
            item_index,
            user_names,
            item_names,
        })
    }

    /// Total interactions, held-out items included.
    pub fn num_interactions(&self) -> usize {
        self.train.iter().map(Vec::len).sum::<usize>() + 2 * self.num_users
    }

    pub fn num_train_interactions(&self) -> usize {
        self.train.iter().map(Vec::len).sum()
    }

    pub fn is_train(&self, user: usize, item: usize) -> bool {
        self.train[user].binary_search(&item).is_ok()
    }

    /// Observed anywhere: training set or either held-out item.
    pub fn is_observed(&self, user: usize, item: usize) -> bool {
        self.val_item[user] == item || self.test_item[user] == item || self.is_train(user, item)
    }

    pub fn num_observed(&self, user: usize) -> usize {
        self.train[user].len() + 2
    }

    pub fn user_name(&self, user: usize) -> &str {
        &self.user_names[user]
    }

    pub fn item_name(&self, item: usize) -> &str {
        &self.item_names[item]
    }

    /// Training pairs `(user, item)` in user-major order.
    pub fn train_pairs(&self) -> Vec<(usize, usize)> {
        self.train
            .iter()
            .enumerate()
            .flat_map(|(u, items)| items.iter().map(move |&i| (u, i)))
            .collect()
    }

    /// 64-bit FNV-1a over the split: sorted train pairs, then validation
    /// pairs, then test pairs, each as little-endian `u64` user and item.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv1a::default();
        for (u, i) in self.train_pairs() {
            h.write_pair(u, i);
        }
        for (u, &i) in self.val_item.iter().enumerate() {
            h.write_pair(u, i);
        }
        for (u, &i) in self.test_item.iter().enumerate() {
            h.write_pair(u, i);
        }
        h.0
    }

    pub fn density(&self) -> f64 {
        self.num_interactions() as f64 / (self.num_users as f64 * self.num_items as f64)
    }

    /// Human-readable manifest for reproducibility audits.
    pub fn manifest(&self) -> String {
        format!(
            "users: {}\nitems: {}\ninteractions: {}\ntrain_interactions: {}\ndensity: {:.6}\nsplit_checksum: {:016x}\n",
            self.num_users,
            self.num_items,
            self.num_interactions(),
            self.num_train_interactions(),
            self.density(),
            self.checksum()
        )
    }
}

struct Fnv1a(u64);

impl Default for Fnv1a {
    fn default() -> Self {
        Fnv1a(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv1a {
    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    fn write_pair(&mut self, u: usize, i: usize) {
        self.write(&(u as u64).to_le_bytes());
        self.write(&(i as u64).to_le_bytes());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{BTreeSet, HashSet};

    fn log(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(u, i)| (u.to_string(), i.to_string())).collect()
    }

    #[test]
    fn minimal_split() {
        let ds = InteractionDataset::from_log(&log(&[("x", "a"), ("x", "b"), ("x", "c")]), FilterConfig::users(1)).unwrap();
        assert_eq!(ds.num_users, 1);
        let a = ds.item_index["a"];
        assert_eq!(ds.train[0], vec![a]);
        assert_eq!(ds.val_item[0], ds.item_index["b"]);
        assert_eq!(ds.test_item[0], ds.item_index["c"]);
    }

    #[test]
    fn duplicates_are_removed_and_first_occurrence_orders() {
        let ds = InteractionDataset::from_log(
            &log(&[("x", "a"), ("x", "b"), ("x", "a"), ("x", "c"), ("x", "b")]),
            FilterConfig::users(1),
        )
        .unwrap();
        assert_eq!(ds.num_interactions(), 3);
        assert_eq!(ds.test_item[0], ds.item_index["c"]);
    }

    #[test]
    fn too_small_users_are_rejected_and_empty_is_fatal() {
        let err = InteractionDataset::from_log(&log(&[("x", "a"), ("x", "b")]), FilterConfig::users(1)).unwrap_err();
        assert!(matches!(err, Error::EmptyDataset));

        let ds = InteractionDataset::from_log(
            &log(&[("x", "a"), ("y", "a"), ("y", "b"), ("y", "c")]),
            FilterConfig::users(1),
        )
        .unwrap();
        assert_eq!(ds.num_users, 1);
        assert!(!ds.user_index.contains_key("x"));
    }

    /// Reference filter: repeatedly recount from scratch and drop the first
    /// violating user or item until none is left.
    fn reference_fixpoint(pairs: &[(String, String)], min_user: usize, min_item: usize) -> BTreeSet<(String, String)> {
        let mut set: BTreeSet<(String, String)> = pairs.iter().cloned().collect();
        loop {
            let bad_user = set
                .iter()
                .map(|(u, _)| u.clone())
                .find(|u| set.iter().filter(|(v, _)| v == u).count() < min_user.max(3));
            if let Some(u) = bad_user {
                set.retain(|(v, _)| *v != u);
                continue;
            }
            let bad_item = set
                .iter()
                .map(|(_, i)| i.clone())
                .find(|i| set.iter().filter(|(_, j)| j == i).count() < min_item);
            if let Some(i) = bad_item {
                set.retain(|(_, j)| *j != i);
                continue;
            }
            return set;
        }
    }

    fn random_log(seed: u64, users: usize, items: usize, n: usize) -> Vec<(String, String)> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                // skew so that some users fall under the threshold
                let u = (rng.random::<f64>().powi(2) * users as f64) as usize;
                let i = rng.random_range(0..items);
                (format!("u{u}"), format!("i{i}"))
            })
            .collect()
    }

    #[test]
    fn filter_matches_reference_fixpoint() {
        for seed in 0..5 {
            let raw = random_log(seed, 50, 40, 400);
            for &(min_user, min_item) in &[(5, 1), (5, 3), (8, 2)] {
                let expected = reference_fixpoint(&raw, min_user, min_item);
                let ds = InteractionDataset::from_log(
                    &raw,
                    FilterConfig {
                        min_user_interactions: min_user,
                        min_item_interactions: min_item,
                    },
                )
                .unwrap();
                let users: HashSet<&String> = expected.iter().map(|(u, _)| u).collect();
                assert_eq!(ds.num_users, users.len());
                assert_eq!(ds.num_interactions(), expected.len());
            }
        }
    }

    #[test]
    fn split_round_trip_and_idempotent_filter() {
        let raw = random_log(11, 50, 60, 800);
        let ds = InteractionDataset::from_log(&raw, FilterConfig::users(5)).unwrap();

        let mut rebuilt = BTreeSet::new();
        for u in 0..ds.num_users {
            let name = ds.user_name(u).to_string();
            let held = [ds.val_item[u], ds.test_item[u]];
            assert!(!ds.train[u].contains(&held[0]) && !ds.train[u].contains(&held[1]));
            assert_ne!(held[0], held[1]);
            for &i in ds.train[u].iter().chain(held.iter()) {
                assert!(rebuilt.insert((name.clone(), ds.item_name(i).to_string())));
            }
        }
        let expected = reference_fixpoint(&raw, 5, 1);
        assert_eq!(rebuilt, expected);

        // Re-filtering the output (in file order, first occurrences) changes nothing.
        let mut seen = HashSet::new();
        let again: Vec<(String, String)> = raw
            .iter()
            .filter(|p| expected.contains(*p) && seen.insert((*p).clone()))
            .cloned()
            .collect();
        let ds2 = InteractionDataset::from_log(&again, FilterConfig::users(5)).unwrap();
        assert_eq!(ds2.checksum(), ds.checksum());
        assert_eq!(ds2.num_users, ds.num_users);
        let filtered = filter_log(&raw, FilterConfig::users(5));
        assert_eq!(filtered, again);
        assert_eq!(InteractionDataset::from_log(&filtered, FilterConfig::users(5)).unwrap(), ds);
    }

    #[test]
    fn checksum_depends_on_split() {
        let base = [("x", "a"), ("x", "b"), ("x", "c"), ("y", "a"), ("y", "b"), ("y", "c")];
        let swapped = [("x", "a"), ("x", "b"), ("x", "c"), ("y", "a"), ("y", "c"), ("y", "b")];
        let a = InteractionDataset::from_log(&log(&base), FilterConfig::users(1)).unwrap();
        let b = InteractionDataset::from_log(&log(&swapped), FilterConfig::users(1)).unwrap();
        assert_ne!(a.checksum(), b.checksum());
        assert!(a.manifest().contains("users: 2"));
    }

    #[test]
    fn tsv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.tsv");
        let raw = log(&[("x", "a"), ("x", "b"), ("x", "c"), ("y", "a")]);
        write_tsv(&path, &raw).unwrap();
        assert_eq!(read_tsv(&path).unwrap(), raw);
        std::fs::write(&path, "x\ta\nbroken\n").unwrap();
        assert!(matches!(read_tsv(&path), Err(Error::Parse { line: 2, .. })));
    }
}
