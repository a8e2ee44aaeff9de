//! Leave-one-out ranking metrics.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::ScoringModel;
use crate::dataset::InteractionDataset;
use crate::error::{Error, Result};

pub const DEFAULT_CUTOFFS: [usize; 3] = [10, 20, 50];

/// Which held-out item is ranked.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HoldOut {
    Validation,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub cutoffs: Vec<usize>,
    /// Rank against every item, including known positives.
    pub unmasked: bool,
    /// Seeded uniform user sample of this size.
    pub max_users: Option<usize>,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            cutoffs: DEFAULT_CUTOFFS.to_vec(),
            unmasked: false,
            max_users: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CutoffMetrics {
    pub recall: f64,
    pub ndcg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserRank {
    pub user: usize,
    pub item: usize,
    /// 1-based.
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub evaluated_users: usize,
    pub metrics: BTreeMap<usize, CutoffMetrics>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ranks: Vec<UserRank>,
}

impl RankingReport {
    /// Aggregates per-user ranks.
    pub fn from_ranks(ranks: Vec<UserRank>, cutoffs: &[usize]) -> Self {
        let n = ranks.len();
        let metrics = cutoffs
            .iter()
            .map(|&c| {
                let (mut hits, mut gain) = (0usize, 0.0);
                for r in &ranks {
                    if r.rank <= c {
                        hits += 1;
                        gain += 1.0 / ((r.rank + 1) as f64).log2();
                    }
                }
                let m = if n == 0 {
                    CutoffMetrics::default()
                } else {
                    CutoffMetrics {
                        recall: hits as f64 / n as f64,
                        ndcg: gain / n as f64,
                    }
                };
                (c, m)
            })
            .collect();
        RankingReport {
            evaluated_users: n,
            metrics,
            ranks,
        }
    }

    pub fn recall(&self, cutoff: usize) -> Option<f64> {
        self.metrics.get(&cutoff).map(|m| m.recall)
    }

    pub fn ndcg(&self, cutoff: usize) -> Option<f64> {
        self.metrics.get(&cutoff).map(|m| m.ndcg)
    }

    /// Per-user ranks as `user,item,rank` CSV using dataset keys.
    pub fn ranks_csv(&self, ds: &InteractionDataset) -> String {
        let mut out = String::from("user,item,rank\n");
        for r in &self.ranks {
            out.push_str(&format!("{},{},{}\n", ds.user_keys()[r.user], ds.item_keys()[r.item], r.rank));
        }
        out
    }
}

/// 1-based rank of `target` among items `j` with `!masked(j)`. Higher score
/// wins; equal scores go to the smaller item index.
pub fn rank_of(scores: &[f64], target: usize, masked: impl Fn(usize) -> bool) -> usize {
    let t = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| j != target && !masked(j) && (s > t || (s == t && j < target)))
        .count()
}

/// Users with a held-out item of the requested kind, optionally subsampled.
pub fn eligible_users(ds: &InteractionDataset, holdout: HoldOut, opts: &EvalOptions) -> Vec<usize> {
    let mut users: Vec<usize> = (0..ds.num_users())
        .filter(|&u| held_out(ds, holdout, u).is_some())
        .collect();
    if let Some(n) = opts.max_users {
        if n < users.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            users.shuffle(&mut rng);
            users.truncate(n);
            users.sort_unstable();
        }
    }
    users
}

fn held_out(ds: &InteractionDataset, holdout: HoldOut, u: usize) -> Option<usize> {
    match holdout {
        HoldOut::Validation => ds.validation_item(u),
        HoldOut::Test => ds.test_item(u),
    }
}

/// Ranks each eligible user's held-out item against all items minus the
/// user's other known target-behavior items.
pub fn evaluate(
    model: &ScoringModel,
    ds: &InteractionDataset,
    holdout: HoldOut,
    opts: &EvalOptions,
) -> Result<RankingReport> {
    if !ds.is_split() {
        return Err(Error::Config("dataset has no leave-one-out split".into()));
    }
    if model.num_users() != ds.num_users() || model.num_items() != ds.num_items() {
        return Err(Error::Config(format!(
            "model covers {} users / {} items, dataset has {} / {}",
            model.num_users(),
            model.num_items(),
            ds.num_users(),
            ds.num_items()
        )));
    }
    let users = eligible_users(ds, holdout, opts);
    let train = ds.train_target_items();
    let all_items: Vec<usize> = (0..ds.num_items()).collect();
    let ranks = users
        .par_iter()
        .map(|&u| {
            let target = held_out(ds, holdout, u).expect("eligible user");
            let other = match holdout {
                HoldOut::Validation => ds.test_item(u),
                HoldOut::Test => ds.validation_item(u),
            };
            let scores = model.score_all_items(u, &all_items);
            let rank = if opts.unmasked {
                rank_of(&scores, target, |_| false)
            } else {
                let known = &train[u];
                rank_of(&scores, target, |j| Some(j) == other || known.binary_search(&j).is_ok())
            };
            UserRank { user: u, item: target, rank }
        })
        .collect();
    Ok(RankingReport::from_ranks(ranks, &opts.cutoffs))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    pub metrics: BTreeMap<usize, CutoffMetrics>,
    /// Percent change against the first report; `None` when its value is 0.
    pub recall_delta: BTreeMap<usize, Option<f64>>,
    pub ndcg_delta: BTreeMap<usize, Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: String,
    pub rows: Vec<ComparisonRow>,
}

fn percent(x: f64, base: f64) -> Option<f64> {
    (base != 0.0).then(|| (x - base) / base * 100.0)
}

/// Tabulates reports with relative deltas against the first one.
pub fn compare_runs(reports: &[(String, RankingReport)]) -> Result<Comparison> {
    if reports.len() < 2 {
        return Err(Error::Config("comparison needs at least two reports".into()));
    }
    let base = &reports[0].1;
    let rows = reports
        .iter()
        .map(|(name, r)| {
            let mut recall_delta = BTreeMap::new();
            let mut ndcg_delta = BTreeMap::new();
            for (&c, m) in &r.metrics {
                let b = base.metrics.get(&c).copied().unwrap_or_default();
                recall_delta.insert(c, percent(m.recall, b.recall));
                ndcg_delta.insert(c, percent(m.ndcg, b.ndcg));
            }
            ComparisonRow {
                name: name.clone(),
                metrics: r.metrics.clone(),
                recall_delta,
                ndcg_delta,
            }
        })
        .collect();
    Ok(Comparison {
        baseline: reports[0].0.clone(),
        rows,
    })
}

impl Comparison {
    /// Markdown table: one row per run, Recall/NDCG per cutoff with deltas.
    pub fn to_markdown(&self) -> String {
        let cutoffs: Vec<usize> = self.rows[0].metrics.keys().copied().collect();
        let mut header = String::from("| run |");
        let mut rule = String::from("|---|");
        for c in &cutoffs {
            header.push_str(&format!(" R@{c} | N@{c} |"));
            rule.push_str("---|---|");
        }
        let mut out = format!("{header}\n{rule}\n");
        let fmt_delta = |d: Option<f64>| match d {
            Some(d) => format!("{d:+.2}%"),
            None => "n/a".to_string(),
        };
        for row in &self.rows {
            out.push_str(&format!("| {} |", row.name));
            for c in &cutoffs {
                let m = row.metrics.get(c).copied().unwrap_or_default();
                out.push_str(&format!(
                    " {:.4} ({}) | {:.4} ({}) |",
                    m.recall,
                    fmt_delta(row.recall_delta.get(c).copied().flatten()),
                    m.ndcg,
                    fmt_delta(row.ndcg_delta.get(c).copied().flatten())
                ));
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(pairs: &[(usize, f64, f64)]) -> RankingReport {
        RankingReport {
            evaluated_users: 1,
            metrics: pairs
                .iter()
                .map(|&(c, recall, ndcg)| (c, CutoffMetrics { recall, ndcg }))
                .collect(),
            ranks: vec![],
        }
    }

    #[test]
    fn rank_ties_favor_smaller_index() {
        let s = [0.5, 0.9, 0.5, 0.1];
        assert_eq!(rank_of(&s, 1, |_| false), 1);
        assert_eq!(rank_of(&s, 0, |_| false), 2);
        assert_eq!(rank_of(&s, 2, |_| false), 3);
        assert_eq!(rank_of(&s, 2, |j| j == 1), 2);
    }

    #[test]
    fn rank_one_and_two_contributions() {
        let r = RankingReport::from_ranks(
            vec![UserRank { user: 0, item: 0, rank: 1 }, UserRank { user: 1, item: 0, rank: 2 }],
            &[1, 10],
        );
        assert_eq!(r.recall(1), Some(0.5));
        assert_eq!(r.ndcg(1), Some(0.5));
        assert_eq!(r.ndcg(10), Some((1.0 + 1.0 / 3f64.log2()) / 2.0));
    }

    #[test]
    fn identical_reports_have_zero_delta() {
        let a = report(&[(10, 0.4, 0.2)]);
        let c = compare_runs(&[("a".into(), a.clone()), ("b".into(), a)]).unwrap();
        assert_eq!(c.rows[1].recall_delta[&10], Some(0.0));
        assert_eq!(c.rows[1].ndcg_delta[&10], Some(0.0));
        assert!(c.to_markdown().contains("+0.00%"));
    }

    #[test]
    fn dominated_report_has_negative_deltas_and_zero_baseline_is_none() {
        let a = report(&[(10, 0.4, 0.2)]);
        let b = report(&[(10, 0.3, 0.1)]);
        let c = compare_runs(&[("b".into(), b.clone()), ("a".into(), a.clone())]).unwrap();
        assert!(c.rows[1].recall_delta[&10].unwrap() > 0.0);
        let zero = report(&[(10, 0.0, 0.0)]);
        let c = compare_runs(&[("z".into(), zero), ("a".into(), a)]).unwrap();
        assert_eq!(c.rows[1].recall_delta[&10], None);
        assert!(compare_runs(&[("b".into(), b)]).is_err());
    }

    #[test]
    fn report_json_round_trip() {
        let r = RankingReport::from_ranks(vec![UserRank { user: 2, item: 1, rank: 7 }], &DEFAULT_CUTOFFS);
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"10\""));
        let back: RankingReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }
}
