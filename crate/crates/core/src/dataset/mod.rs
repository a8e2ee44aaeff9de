//! Multi-behavior interaction logs: ingestion, deduplication, ID remapping
//! and leave-one-out splitting.

mod cache;
mod synthetic;
mod tsv;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use cache::{SplitEntry, SplitManifest, DATASET_MAGIC, DATASET_VERSION};
pub use synthetic::{generate_synthetic, SyntheticConfig, SyntheticData};
pub use tsv::{parse_tsv, parse_tsv_line, write_tsv};

/// One raw log line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawInteraction {
    pub user_key: String,
    pub item_key: String,
    pub behavior: String,
    pub timestamp: u64,
}

impl RawInteraction {
    pub fn new(user: &str, item: &str, behavior: &str, timestamp: u64) -> Self {
        RawInteraction {
            user_key: user.to_string(),
            item_key: item.to_string(),
            behavior: behavior.to_string(),
            timestamp,
        }
    }
}

/// A deduplicated interaction with dense indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub behavior: usize,
    pub timestamp: u64,
}

/// Deduplicated, ID-remapped interactions plus the optional leave-one-out
/// hold-out for the target (last) behavior.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionDataset {
    behaviors: Vec<String>,
    user_keys: Vec<String>,
    item_keys: Vec<String>,
    /// First-occurrence order of each (user, item, behavior) triple.
    records: Vec<Interaction>,
    test_item: Vec<Option<usize>>,
    validation_item: Vec<Option<usize>>,
}

/// Builds a dataset from raw records. Duplicate (user, item, behavior)
/// triples collapse onto their first occurrence, keeping the earliest
/// timestamp. Keys get dense indices in first-seen order.
pub fn ingest<I>(records: I, chain: &[String]) -> Result<InteractionDataset>
where
    I: IntoIterator<Item = RawInteraction>,
{
    if chain.is_empty() {
        return Err(Error::Config("behavior chain is empty".into()));
    }
    let behavior_index: HashMap<&str, usize> = chain
        .iter()
        .enumerate()
        .map(|(i, b)| (b.as_str(), i))
        .collect();
    if behavior_index.len() != chain.len() {
        return Err(Error::Config(format!("duplicate behavior in chain {chain:?}")));
    }
    let mut user_ids: HashMap<String, usize> = HashMap::new();
    let mut item_ids: HashMap<String, usize> = HashMap::new();
    let mut user_keys = Vec::new();
    let mut item_keys = Vec::new();
    let mut seen: HashMap<(usize, usize, usize), usize> = HashMap::new();
    let mut out: Vec<Interaction> = Vec::new();

    for raw in records {
        let Some(&behavior) = behavior_index.get(raw.behavior.as_str()) else {
            return Err(Error::UnknownBehavior {
                behavior: raw.behavior.clone(),
                record: format!(
                    "{}\t{}\t{}\t{}",
                    raw.user_key, raw.item_key, raw.behavior, raw.timestamp
                ),
            });
        };
        let user = *user_ids.entry(raw.user_key.clone()).or_insert_with(|| {
            user_keys.push(raw.user_key.clone());
            user_keys.len() - 1
        });
        let item = *item_ids.entry(raw.item_key.clone()).or_insert_with(|| {
            item_keys.push(raw.item_key.clone());
            item_keys.len() - 1
        });
        match seen.get(&(user, item, behavior)) {
            Some(&pos) => {
                let rec = &mut out[pos];
                rec.timestamp = rec.timestamp.min(raw.timestamp);
            }
            None => {
                seen.insert((user, item, behavior), out.len());
                out.push(Interaction {
                    user,
                    item,
                    behavior,
                    timestamp: raw.timestamp,
                });
            }
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let num_users = user_keys.len();
    Ok(InteractionDataset {
        behaviors: chain.to_vec(),
        user_keys,
        item_keys,
        records: out,
        test_item: vec![None; num_users],
        validation_item: vec![None; num_users],
    })
}

impl InteractionDataset {
    pub(crate) fn from_parts(
        behaviors: Vec<String>,
        user_keys: Vec<String>,
        item_keys: Vec<String>,
        records: Vec<Interaction>,
        test_item: Vec<Option<usize>>,
        validation_item: Vec<Option<usize>>,
    ) -> Self {
        InteractionDataset {
            behaviors,
            user_keys,
            item_keys,
            records,
            test_item,
            validation_item,
        }
    }

    pub fn num_users(&self) -> usize {
        self.user_keys.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_keys.len()
    }

    pub fn num_behaviors(&self) -> usize {
        self.behaviors.len()
    }

    pub fn behaviors(&self) -> &[String] {
        &self.behaviors
    }

    pub fn target_behavior(&self) -> usize {
        self.behaviors.len() - 1
    }

    pub fn user_keys(&self) -> &[String] {
        &self.user_keys
    }

    pub fn item_keys(&self) -> &[String] {
        &self.item_keys
    }

    pub fn user_index(&self, key: &str) -> Option<usize> {
        self.user_keys.iter().position(|k| k == key)
    }

    pub fn item_index(&self, key: &str) -> Option<usize> {
        self.item_keys.iter().position(|k| k == key)
    }

    pub fn records(&self) -> &[Interaction] {
        &self.records
    }

    pub fn test_item(&self, user: usize) -> Option<usize> {
        self.test_item[user]
    }

    pub fn validation_item(&self, user: usize) -> Option<usize> {
        self.validation_item[user]
    }

    pub fn is_split(&self) -> bool {
        self.test_item.iter().any(Option::is_some)
    }

    /// All (user, item) pairs of behavior `b`, hold-outs included.
    pub fn interactions(&self, b: usize) -> Vec<(usize, usize)> {
        self.records
            .iter()
            .filter(|r| r.behavior == b)
            .map(|r| (r.user, r.item))
            .collect()
    }

    fn is_held_out(&self, r: &Interaction) -> bool {
        r.behavior == self.target_behavior()
            && (self.test_item[r.user] == Some(r.item)
                || self.validation_item[r.user] == Some(r.item))
    }

    /// Training (user, item) pairs of behavior `b`: everything except the
    /// target-behavior test and validation hold-outs.
    pub fn train_pairs(&self, b: usize) -> Vec<(usize, usize)> {
        self.records
            .iter()
            .filter(|r| r.behavior == b && !self.is_held_out(r))
            .map(|r| (r.user, r.item))
            .collect()
    }

    /// Per-user sorted training items of the target behavior.
    pub fn train_target_items(&self) -> Vec<Vec<usize>> {
        let mut items = vec![Vec::new(); self.num_users()];
        for (u, i) in self.train_pairs(self.target_behavior()) {
            items[u].push(i);
        }
        items.iter_mut().for_each(|v| v.sort_unstable());
        items
    }

    /// Leave-one-out split of the target behavior. Each user's latest target
    /// interaction becomes the test item; users with at least three target
    /// interactions also give up the second-latest as validation item. Equal
    /// timestamps order by item key, the larger key counting as later.
    pub fn split_leave_one_out(mut self) -> Self {
        let target = self.target_behavior();
        let mut per_user: Vec<Vec<(u64, usize)>> = vec![Vec::new(); self.num_users()];
        for r in self.records.iter().filter(|r| r.behavior == target) {
            per_user[r.user].push((r.timestamp, r.item));
        }
        let mut without_target = 0;
        for (u, events) in per_user.iter_mut().enumerate() {
            events.sort_by(|a, b| {
                a.0.cmp(&b.0)
                    .then_with(|| self.item_keys[a.1].cmp(&self.item_keys[b.1]))
            });
            self.test_item[u] = events.last().map(|e| e.1);
            self.validation_item[u] = if events.len() >= 3 {
                Some(events[events.len() - 2].1)
            } else {
                None
            };
            if events.is_empty() {
                without_target += 1;
            }
        }
        if without_target > 0 {
            log::info!(
                "{without_target} users have no `{}` interaction and get no test item",
                self.behaviors[target]
            );
        }
        self
    }
}
