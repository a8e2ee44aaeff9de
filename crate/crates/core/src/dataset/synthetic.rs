//! Planted-factor synthetic logs.
//!
//! Items carry one category per latent factor; users prefer one category per
//! factor. Later behaviors require agreement on more factors: views match
//! the first factor, carts and buys match progressively more, and the last
//! behavior draws only from the user's fully matching cell. Records obey
//! the cascade: every buy is also carted, every cart also viewed.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::RawInteraction;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub users: usize,
    pub items: usize,
    pub factors: usize,
    pub categories: usize,
    pub behaviors: Vec<String>,
    /// Interactions per user for each behavior, same order as `behaviors`.
    pub per_user: Vec<usize>,
    /// Uniformly random extra interactions with the first behavior.
    pub noise: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            users: 200,
            items: 100,
            factors: 2,
            categories: 4,
            behaviors: vec!["view".into(), "cart".into(), "buy".into()],
            per_user: vec![15, 7, 4],
            noise: 3,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub records: Vec<RawInteraction>,
    /// `user_pref[u][k]`: preferred category of user `u` on factor `k`.
    pub user_pref: Vec<Vec<usize>>,
    /// `item_cat[i][k]`: category of item `i` on factor `k`.
    pub item_cat: Vec<Vec<usize>>,
}

/// Factors a behavior at stage `s` of `n` must agree on.
fn required_factors(stage: usize, stages: usize, factors: usize) -> usize {
    ((factors * (stage + 1)).div_ceil(stages)).clamp(1, factors)
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> SyntheticData {
    assert_eq!(cfg.behaviors.len(), cfg.per_user.len(), "per_user length");
    assert!(cfg.factors >= 1 && cfg.categories >= 1 && cfg.items >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let stages = cfg.behaviors.len();

    // Round-robin cell assignment over a shuffled item order keeps every
    // category combination populated as evenly as possible.
    let cells = cfg.categories.pow(cfg.factors as u32);
    let mut order: Vec<usize> = (0..cfg.items).collect();
    order.shuffle(&mut rng);
    let mut item_cat = vec![Vec::new(); cfg.items];
    for (slot, &item) in order.iter().enumerate() {
        let mut cell = slot % cells;
        let mut cats = Vec::with_capacity(cfg.factors);
        for _ in 0..cfg.factors {
            cats.push(cell % cfg.categories);
            cell /= cfg.categories;
        }
        item_cat[item] = cats;
    }
    let user_pref: Vec<Vec<usize>> = (0..cfg.users)
        .map(|_| (0..cfg.factors).map(|_| rng.gen_range(0..cfg.categories)).collect())
        .collect();

    let mut records = Vec::new();
    for (u, pref) in user_pref.iter().enumerate() {
        let matches = |i: usize, n: usize| (0..n).all(|k| item_cat[i][k] == pref[k]);
        // Build from the narrowest behavior outwards so each stage contains
        // the next one.
        let mut chosen: Vec<Vec<usize>> = vec![Vec::new(); stages];
        let mut carry: Vec<usize> = Vec::new();
        for s in (0..stages).rev() {
            let need = required_factors(s, stages, cfg.factors);
            let mut pool: Vec<usize> = (0..cfg.items)
                .filter(|&i| matches(i, need) && !carry.contains(&i))
                .collect();
            pool.shuffle(&mut rng);
            let mut picked = carry.clone();
            let want = cfg.per_user[s].max(carry.len());
            picked.extend(pool.into_iter().take(want - carry.len()));
            if s == 0 {
                for _ in 0..cfg.noise {
                    let i = rng.gen_range(0..cfg.items);
                    if !picked.contains(&i) {
                        picked.push(i);
                    }
                }
            }
            carry = picked.clone();
            chosen[s] = picked;
        }
        let base: u64 = rng.gen_range(0..100_000);
        for (s, items) in chosen.iter().enumerate() {
            let mut items = items.clone();
            items.shuffle(&mut rng);
            for (j, &i) in items.iter().enumerate() {
                records.push(RawInteraction {
                    user_key: format!("u{u}"),
                    item_key: format!("i{i}"),
                    behavior: cfg.behaviors[s].clone(),
                    timestamp: base + 1000 * s as u64 + j as u64,
                });
            }
        }
    }
    SyntheticData {
        records,
        user_pref,
        item_cat,
    }
}
