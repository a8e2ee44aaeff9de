mod common;

use common::*;
use disen_cgcn::dataset::{generate_synthetic, ingest, SyntheticConfig};
use disen_cgcn::evaluator::{evaluate, EvalOptions, HoldOut};
use disen_cgcn::graph::build_graphs;
use disen_cgcn::model::Variant;
use disen_cgcn::trainer::{train, NegativeSampler, StopReason, TrainingConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn synthetic() -> disen_cgcn::dataset::InteractionDataset {
    let syn = generate_synthetic(&SyntheticConfig::default());
    let chain: Vec<String> = ["view", "cart", "buy"].map(String::from).to_vec();
    ingest(syn.records, &chain).unwrap().split_leave_one_out()
}

fn small_config() -> TrainingConfig {
    TrainingConfig {
        dim: 16,
        factors: 2,
        layers: vec![2, 2, 2],
        batch_size: 128,
        lr: 0.01,
        seed: 5,
        ..TrainingConfig::default()
    }
}

#[test]
fn negatives_never_hit_target_positives() {
    let ds = synthetic();
    let sampler = NegativeSampler::new(&ds);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let target = ds.target_behavior();
    let positives: std::collections::HashSet<(usize, usize)> = ds.interactions(target).into_iter().collect();
    for _ in 0..100_000 {
        let u = rng.gen_range(0..ds.num_users());
        let i = sampler.sample(u, &mut rng).unwrap();
        assert!(!positives.contains(&(u, i)));
    }
}

#[test]
fn training_loss_falls_on_planted_data() {
    let ds = synthetic();
    let cfg = TrainingConfig { max_epochs: 10, patience: 100, ..small_config() };
    let out = train(&cfg, &ds).unwrap();
    assert_eq!(out.epochs.len(), 10);
    assert!(out.epochs[9].loss_rec < out.epochs[0].loss_rec);
}

#[test]
fn same_seed_gives_identical_runs() {
    let ds = synthetic();
    let cfg = TrainingConfig { max_epochs: 4, variant: Variant::WPost, ..small_config() };
    let a = train(&cfg, &ds).unwrap();
    let b = train(&cfg, &ds).unwrap();
    assert_eq!(a.log_lines(), b.log_lines());
    for ((_, x), (_, y)) in a.final_params.iter().zip(b.final_params.iter()) {
        assert_eq!(x, y);
    }
    let c = train(&TrainingConfig { seed: 6, ..cfg }, &ds).unwrap();
    assert_ne!(a.log_lines(), c.log_lines());
}

#[test]
fn memorizes_a_tiny_planted_signal() {
    // Two clusters of four users, each buying its cluster's four items in a
    // rotated order: every validation item is bought by cluster mates in
    // training and is the only unmasked in-cluster candidate.
    let mut recs = Vec::new();
    for u in 0..8usize {
        let g = 4 * (u / 4);
        for j in 0..4 {
            let i = g + (u + j) % 4;
            recs.push((u, i, "view", j as u64));
            recs.push((u, i, "buy", 10 + j as u64));
        }
    }
    let ds = dataset(&["view", "buy"], &recs).split_leave_one_out();
    let cfg = TrainingConfig {
        dim: 8,
        factors: 2,
        layers: vec![1, 1],
        batch_size: 8,
        lr: 0.01,
        max_epochs: 200,
        patience: 200,
        seed: 1,
        ..TrainingConfig::default()
    };
    let out = train(&cfg, &ds).unwrap();
    let scorer = cfg.model(&ds).unwrap().scoring_model(&out.final_params, &build_graphs(&ds).unwrap()).unwrap();
    let rep = evaluate(&scorer, &ds, HoldOut::Validation, &EvalOptions { cutoffs: vec![1], ..EvalOptions::default() }).unwrap();
    assert_eq!(rep.evaluated_users, 8);
    assert_eq!(rep.recall(1), Some(1.0));
}

#[test]
fn huge_learning_rate_diverges_and_keeps_last_good_state() {
    let ds = toy_4x4();
    let cfg = TrainingConfig {
        dim: 8,
        factors: 2,
        layers: vec![1, 1],
        batch_size: 4,
        lr: 1e200,
        max_epochs: 20,
        ..TrainingConfig::default()
    };
    let out = train(&cfg, &ds).unwrap();
    assert!(matches!(out.stop, StopReason::Diverged { .. }), "{:?}", out.stop);
    assert!(out.final_params.iter().all(|(_, m)| m.is_finite()));
}
