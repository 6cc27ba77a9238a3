use log::warn;
use rand::seq::index;
use rand::Rng;

use super::InteractionDataset;
use crate::error::{Error, Result};
use crate::par::Execution;
use crate::rng::{stream_rng, Stream};

/// Sampled unobserved items per evaluation repeat.
pub const POOL_SIZE: usize = 499;
/// Independent evaluation repeats.
pub const POOL_REPEATS: usize = 5;

/// Per-user evaluation negatives: [`POOL_REPEATS`] independent draws of up to
/// [`POOL_SIZE`] distinct unobserved items each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegativePool {
    pub seed: u64,
    pub repeats: usize,
    draws: Vec<Vec<u32>>,
}

impl NegativePool {
    pub fn draw(&self, user: usize, repeat: usize) -> &[u32] {
        &self.draws[user * self.repeats + repeat]
    }

    pub fn num_users(&self) -> usize {
        self.draws.len() / self.repeats.max(1)
    }

    /// A pool that keeps only one repeat, for single-repeat evaluations.
    pub fn single_repeat(&self, repeat: usize) -> NegativePool {
        let users = self.num_users();
        NegativePool {
            seed: self.seed,
            repeats: 1,
            draws: (0..users).map(|u| self.draw(u, repeat).to_vec()).collect(),
        }
    }
}

/// Map `k` in `[0, num_unobserved)` to the `k`-th unobserved item id of `user`
/// in ascending order.
fn nth_unobserved(ds: &InteractionDataset, user: usize, k: usize) -> usize {
    let (a, b) = (ds.val_item[user], ds.test_item[user]);
    let held = [a.min(b), a.max(b)];
    let train = &ds.train[user];
    let (mut ti, mut hi) = (0, 0);
    let mut item = k;
    loop {
        let next = match (train.get(ti), held.get(hi)) {
            (Some(&t), Some(&h)) if t < h => {
                ti += 1;
                t
            }
            (_, Some(&h)) => {
                hi += 1;
                h
            }
            (Some(&t), None) => {
                ti += 1;
                t
            }
            (None, None) => return item,
        };
        if next <= item {
            item += 1;
        } else {
            return item;
        }
    }
}

fn num_unobserved(ds: &InteractionDataset, user: usize) -> usize {
    ds.num_items - ds.num_observed(user)
}

/// Draw `n` independent training negatives for `user`, each uniform over the
/// items the user has not interacted with (held-out items count as observed).
pub fn sample_train_negatives<R: Rng + ?Sized>(
    ds: &InteractionDataset,
    user: usize,
    n: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::InvalidArgument("number of negatives must be at least 1".into()));
    }
    let free = num_unobserved(ds, user);
    if free == 0 {
        return Err(Error::NoUnobservedItems { user });
    }
    Ok((0..n)
        .map(|_| nth_unobserved(ds, user, rng.random_range(0..free)))
        .collect())
}

pub(crate) fn sample_one_negative<R: Rng + ?Sized>(ds: &InteractionDataset, user: usize, rng: &mut R) -> Result<usize> {
    let free = num_unobserved(ds, user);
    if free == 0 {
        return Err(Error::NoUnobservedItems { user });
    }
    Ok(nth_unobserved(ds, user, rng.random_range(0..free)))
}

fn draw_distinct(ds: &InteractionDataset, user: usize, seed: u64, repeat: usize) -> Vec<u32> {
    let free = num_unobserved(ds, user);
    if free <= POOL_SIZE {
        return (0..free).map(|k| nth_unobserved(ds, user, k) as u32).collect();
    }
    let mut rng = stream_rng(seed, Stream::EvalPool, &[user as u64, repeat as u64]);
    let mut picks: Vec<u32> = index::sample(&mut rng, free, POOL_SIZE)
        .into_iter()
        .map(|k| nth_unobserved(ds, user, k) as u32)
        .collect();
    picks.sort_unstable();
    picks
}

/// Build the evaluation pool. Every `(seed, user, repeat)` draw is
/// reproducible on its own, independent of the other users.
pub fn build_negative_pool(ds: &InteractionDataset, seed: u64) -> NegativePool {
    build_negative_pool_with(ds, seed, Execution::default())
}

pub fn build_negative_pool_with(ds: &InteractionDataset, seed: u64, exec: Execution) -> NegativePool {
    for u in 0..ds.num_users {
        let free = num_unobserved(ds, u);
        if free < POOL_SIZE {
            warn!("user {u} has only {free} unobserved items; evaluation draws shrink to that size");
        }
    }
    let draws = exec.map(ds.num_users * POOL_REPEATS, |k| {
        draw_distinct(ds, k / POOL_REPEATS, seed, k % POOL_REPEATS)
    });
    NegativePool {
        seed,
        repeats: POOL_REPEATS,
        draws,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FilterConfig;
    use crate::rng::Rng as ChaRng;
    use rand::SeedableRng;
    use std::collections::HashSet;

    fn dense_user(num_items: usize, missing: &[usize]) -> InteractionDataset {
        let log: Vec<(String, String)> = (0..num_items)
            .filter(|i| !missing.contains(i))
            .map(|i| ("u".to_string(), format!("{i}")))
            .chain(missing.iter().map(|&i| ("other".to_string(), format!("{i}"))))
            .chain((0..3).map(|k| ("other".to_string(), format!("{k}"))))
            .collect();
        InteractionDataset::from_log(&log, FilterConfig::users(1)).unwrap()
    }

    #[test]
    fn nth_unobserved_enumerates_complement() {
        let ds = dense_user(30, &[4, 17, 29]);
        let u = ds.user_index["u"];
        let mut got: Vec<usize> = (0..num_unobserved(&ds, u)).map(|k| nth_unobserved(&ds, u, k)).collect();
        let expected: Vec<usize> = (0..ds.num_items).filter(|&i| !ds.is_observed(u, i)).collect();
        assert_eq!(got, expected);
        got.dedup();
        assert_eq!(got.len(), 3);
    }

    #[test]
    fn forced_single_negative() {
        let ds = dense_user(20, &[7]);
        let u = ds.user_index["u"];
        let only = ds.item_index["7"];
        let mut rng = ChaRng::seed_from_u64(1);
        for _ in 0..50 {
            assert_eq!(sample_train_negatives(&ds, u, 1, &mut rng).unwrap(), vec![only]);
        }
        assert!(sample_train_negatives(&ds, u, 0, &mut rng).is_err());
    }

    #[test]
    fn no_unobserved_is_an_error() {
        let ds = dense_user(10, &[]);
        let u = ds.user_index["u"];
        let mut rng = ChaRng::seed_from_u64(1);
        assert!(matches!(
            sample_train_negatives(&ds, u, 1, &mut rng),
            Err(Error::NoUnobservedItems { .. })
        ));
    }

    #[test]
    fn train_negatives_are_uniform() {
        let ds = dense_user(24, &[2, 9, 13, 21]);
        let u = ds.user_index["u"];
        let mut rng = ChaRng::seed_from_u64(99);
        let draws = sample_train_negatives(&ds, u, 10_000, &mut rng).unwrap();
        let mut counts = std::collections::HashMap::new();
        for d in draws {
            *counts.entry(d).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 4);
        // chi-square with 3 dof; 11.34 is the 0.01 critical value
        let chi: f64 = counts.values().map(|&c| (c as f64 - 2500.0).powi(2) / 2500.0).sum();
        assert!(chi < 11.34, "chi2 = {chi}");
        for &c in counts.values() {
            assert!((c as f64 / 10_000.0 - 0.25).abs() < 0.02);
        }
    }

    fn sparse_dataset(users: usize, items: usize) -> InteractionDataset {
        use rand::Rng;
        let mut rng = ChaRng::seed_from_u64(5);
        let log: Vec<(String, String)> = (0..users)
            .flat_map(|u| (0..8).map(move |k| (u, k)))
            .map(|(u, _)| (format!("u{u}"), format!("i{}", rng.random_range(0..items))))
            .chain((0..items).map(|i| ("all".to_string(), format!("i{i}"))))
            .collect();
        InteractionDataset::from_log(&log, FilterConfig::users(3)).unwrap()
    }

    #[test]
    fn pool_invariants_and_determinism() {
        let ds = sparse_dataset(40, 800);
        let pool = build_negative_pool(&ds, 17);
        let again = build_negative_pool_with(&ds, 17, Execution::Sequential);
        assert_eq!(pool, again);
        assert_ne!(pool, build_negative_pool(&ds, 18));
        for u in 0..ds.num_users {
            let free = num_unobserved(&ds, u);
            for r in 0..POOL_REPEATS {
                let draw = pool.draw(u, r);
                assert_eq!(draw.len(), free.min(POOL_SIZE));
                let set: HashSet<_> = draw.iter().collect();
                assert_eq!(set.len(), draw.len());
                assert!(draw.iter().all(|&i| !ds.is_observed(u, i as usize)));
            }
        }
    }

    #[test]
    fn pool_with_exactly_pool_size_unobserved_is_the_full_set() {
        let log: Vec<(String, String)> = (0..POOL_SIZE + 3)
            .map(|i| ("other".to_string(), format!("{i}")))
            .chain((0..3).map(|i| ("u".to_string(), format!("{i}"))))
            .collect();
        let ds2 = InteractionDataset::from_log(&log, FilterConfig::users(1)).unwrap();
        let u = ds2.user_index["u"];
        assert_eq!(num_unobserved(&ds2, u), POOL_SIZE);
        let pool = build_negative_pool(&ds2, 3);
        let full: Vec<u32> = (0..ds2.num_items).filter(|&i| !ds2.is_observed(u, i)).map(|i| i as u32).collect();
        for r in 0..POOL_REPEATS {
            assert_eq!(pool.draw(u, r), full.as_slice());
        }
    }
}
