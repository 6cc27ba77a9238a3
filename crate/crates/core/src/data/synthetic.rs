//! Planted-block interaction logs for desk-scale experiments.
//!
//! Users and items are partitioned into blocks. Each user has a primary and a
//! secondary block; most interactions come from those two blocks, the rest are
//! uniform noise. Within a block, item popularity follows a power law so the
//! ordering inside a block carries signal too.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedBlocks {
    pub num_users: usize,
    pub num_items: usize,
    pub num_blocks: usize,
    pub min_per_user: usize,
    pub max_per_user: usize,
    pub primary_share: f64,
    pub secondary_share: f64,
    pub popularity_exponent: f64,
}

impl Default for PlantedBlocks {
    fn default() -> Self {
        PlantedBlocks {
            num_users: 200,
            num_items: 500,
            num_blocks: 20,
            min_per_user: 15,
            max_per_user: 30,
            primary_share: 0.7,
            secondary_share: 0.2,
            popularity_exponent: 0.8,
        }
    }
}

impl PlantedBlocks {
    pub fn block_of_user(&self, user: usize) -> usize {
        user % self.num_blocks
    }

    pub fn block_of_item(&self, item: usize) -> usize {
        item % self.num_blocks
    }

    /// Generate a raw log with ids `u<k>` / `i<k>`, in randomized file order
    /// per user.
    pub fn generate(&self, seed: u64) -> Vec<(String, String)> {
        assert!(self.num_blocks >= 1 && self.num_items >= self.num_blocks);
        assert!(self.min_per_user >= 3 && self.max_per_user >= self.min_per_user);
        let mut rng = stream_rng(seed, Stream::Synthetic, &[]);

        let blocks: Vec<Vec<usize>> = (0..self.num_blocks)
            .map(|b| (0..self.num_items).filter(|&i| self.block_of_item(i) == b).collect())
            .collect();
        // shared popularity profile per position inside a block
        let weights: Vec<f64> = (0..self.num_items)
            .map(|k| 1.0 / ((k + 1) as f64).powf(self.popularity_exponent))
            .collect();

        let mut log = Vec::new();
        for u in 0..self.num_users {
            let primary = self.block_of_user(u);
            let secondary = (primary + 1 + rng.random_range(0..self.num_blocks.max(2) - 1)) % self.num_blocks;
            let target = rng.random_range(self.min_per_user..=self.max_per_user).min(self.num_items);
            let mut chosen = HashSet::new();
            let mut order = Vec::new();
            let mut guard = 0;
            while order.len() < target && guard < 100 * target {
                guard += 1;
                let x: f64 = rng.random();
                let item = if x < self.primary_share {
                    pick_weighted(&blocks[primary], &weights, &mut rng)
                } else if x < self.primary_share + self.secondary_share {
                    pick_weighted(&blocks[secondary], &weights, &mut rng)
                } else {
                    rng.random_range(0..self.num_items)
                };
                if chosen.insert(item) {
                    order.push(item);
                }
            }
            order.shuffle(&mut rng);
            log.extend(order.into_iter().map(|i| (format!("u{u}"), format!("i{i}"))));
        }
        log
    }
}

fn pick_weighted<R: Rng + ?Sized>(items: &[usize], weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights[..items.len()].iter().sum();
    let mut x = rng.random::<f64>() * total;
    for (k, &item) in items.iter().enumerate() {
        x -= weights[k];
        if x <= 0.0 {
            return item;
        }
    }
    *items.last().expect("non-empty block")
}
