//! BPR training with the independence penalty, negative sampling and early
//! stopping on validation Recall@20.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::ScoringModel;
use crate::dataset::InteractionDataset;
use crate::disentangle::{check_factors, independence_loss, mean_block_dcor};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, EvalOptions, HoldOut};
use crate::graph::{build_graphs, BehaviorGraph};
use crate::model::{CascadeOutput, Model, ModelConfig, Variant};
use crate::tensor::{adam_step, AdamConfig, AdamState, BoundParams, Checkpoint, Matrix, ParamStore, Tape, Var};

/// Validation cutoff driving early stopping.
pub const VALIDATION_CUTOFF: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub dim: usize,
    pub factors: usize,
    pub rho: f64,
    pub layers: Vec<usize>,
    pub variant: Variant,
    pub batch_size: usize,
    pub lr: f64,
    /// L2 coefficient on all parameters.
    pub l2: f64,
    /// Weight of the independence penalty.
    pub beta: f64,
    pub seed: u64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Row cap per matrix for the batch independence penalty and the
    /// per-epoch diagnostics.
    pub dcor_rows: usize,
    /// Validate on a seeded sample of this many users.
    pub eval_users: Option<usize>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            dim: 64,
            factors: 4,
            rho: 4.0,
            layers: vec![3, 4, 3],
            variant: Variant::Full,
            batch_size: 1024,
            lr: 1e-3,
            l2: 1e-3,
            beta: 1e-2,
            seed: 2024,
            max_epochs: 400,
            patience: 10,
            dcor_rows: 1024,
            eval_users: None,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        check_factors(self.dim, self.factors)?;
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be finite and non-negative, got {}", self.lr));
        }
        if !(self.l2 >= 0.0 && self.beta >= 0.0) {
            return bad("l2 and beta must be non-negative".into());
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return bad(format!("rho must be positive, got {}", self.rho));
        }
        if self.layers.is_empty() {
            return bad("layers must list one depth per behavior".into());
        }
        if self.dcor_rows < 2 {
            return bad("dcor_rows must be at least 2".into());
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            factors: self.factors,
            rho: self.rho,
            layers: self.layers.clone(),
            variant: self.variant,
        }
    }

    pub fn model(&self, ds: &InteractionDataset) -> Result<Model> {
        self.validate()?;
        Model::new(self.model_config(), ds.num_users(), ds.num_items(), ds.num_behaviors())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainingSample {
    pub user: usize,
    pub pos: usize,
    pub neg: usize,
}

/// Uniform negatives among items a user never interacted with under the
/// target behavior.
#[derive(Clone, Debug)]
pub struct NegativeSampler {
    num_items: usize,
    positives: Vec<Vec<usize>>,
}

impl NegativeSampler {
    pub fn new(ds: &InteractionDataset) -> Self {
        let mut positives = vec![Vec::new(); ds.num_users()];
        for (u, i) in ds.interactions(ds.target_behavior()) {
            positives[u].push(i);
        }
        positives.iter_mut().for_each(|v| v.sort_unstable());
        NegativeSampler {
            num_items: ds.num_items(),
            positives,
        }
    }

    pub fn is_positive(&self, u: usize, i: usize) -> bool {
        self.positives[u].binary_search(&i).is_ok()
    }

    /// `None` when the user has interacted with every item.
    pub fn sample<R: Rng>(&self, u: usize, rng: &mut R) -> Option<usize> {
        if self.positives[u].len() >= self.num_items {
            return None;
        }
        loop {
            let i = rng.gen_range(0..self.num_items);
            if !self.is_positive(u, i) {
                return Some(i);
            }
        }
    }
}

/// `sum(-log sigmoid(pos - neg)) + l2 * sum_p ||p||^2`.
pub fn bpr_loss(tape: &mut Tape, pos: Var, neg: Var, params: &BoundParams, l2: f64) -> Result<Var> {
    let diff = tape.sub(pos, neg)?;
    let ls = tape.log_sigmoid(diff);
    let s = tape.sum(ls);
    let mut loss = tape.scale(s, -1.0);
    if l2 != 0.0 {
        for &p in params.vars() {
            let sq = tape.mul(p, p)?;
            let sq = tape.sum(sq);
            let sq = tape.scale(sq, l2);
            loss = tape.add(loss, sq)?;
        }
    }
    Ok(loss)
}

/// `rec + beta * indep`.
pub fn total_loss(tape: &mut Tape, rec: Var, indep: Var, beta: f64) -> Result<Var> {
    let weighted = tape.scale(indep, beta);
    tape.add(rec, weighted)
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub rec: Var,
    pub indep: Var,
}

fn unique_capped(ids: impl IntoIterator<Item = usize>, cap: usize) -> Vec<usize> {
    let mut seen = std::collections::HashSet::new();
    ids.into_iter().filter(|&i| seen.insert(i)).take(cap).collect()
}

/// Full objective of one mini-batch. The independence penalty covers the
/// initial embeddings and the first behavior's output, restricted to the
/// batch's distinct users and items.
pub fn batch_loss(
    model: &Model,
    tape: &mut Tape,
    params: &BoundParams,
    out: &CascadeOutput,
    batch: &[TrainingSample],
    cfg: &TrainingConfig,
) -> Result<LossTerms> {
    let users: Vec<usize> = batch.iter().map(|s| s.user).collect();
    let pos: Vec<usize> = batch.iter().map(|s| s.pos).collect();
    let neg: Vec<usize> = batch.iter().map(|s| s.neg).collect();
    let sp = model.score_pairs(tape, params, out, &users, &pos)?;
    let sn = model.score_pairs(tape, params, out, &users, &neg)?;
    let rec = bpr_loss(tape, sp, sn, params, cfg.l2)?;

    let user_rows = unique_capped(users.iter().copied(), cfg.dcor_rows);
    let item_rows = unique_capped(pos.iter().chain(&neg).copied(), cfg.dcor_rows);
    let mut terms: Vec<(Var, &[usize])> = Vec::new();
    if user_rows.len() >= 2 {
        terms.push((out.initial_users, &user_rows));
        terms.push((out.users[0], &user_rows));
    }
    if item_rows.len() >= 2 {
        terms.push((out.initial_items, &item_rows));
        terms.push((out.items[0], &item_rows));
    }
    let indep = independence_loss(tape, &terms, cfg.factors)?;
    let total = total_loss(tape, rec, indep, cfg.beta)?;
    Ok(LossTerms { total, rec, indep })
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-batch ranking loss including the L2 term.
    pub loss_rec: f64,
    /// Mean per-batch independence penalty (unweighted).
    pub loss_d: f64,
    #[serde(rename = "val_recall@20")]
    pub val_recall: f64,
}

impl EpochRecord {
    pub fn to_log_line(&self) -> String {
        serde_json::to_string(self).expect("epoch record serializes")
    }
}

/// Mean inter-block distance correlation after an epoch. Index 0 is the
/// initial embedding table, index `b + 1` the output of active behavior `b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DcorDiagnostics {
    pub epoch: usize,
    pub users: Vec<f64>,
    pub items: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum StopReason {
    EarlyStopped,
    MaxEpochs,
    Diverged { epoch: usize, message: String },
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch (initial ones if no epoch
    /// finished).
    pub best_params: ParamStore,
    /// Parameters when training stopped; the last good state on divergence.
    pub final_params: ParamStore,
    pub best_epoch: usize,
    pub best_val_recall: f64,
    pub epochs: Vec<EpochRecord>,
    pub diagnostics: Vec<DcorDiagnostics>,
    /// Seconds per epoch, kept apart from the deterministic log.
    pub wall_times: Vec<f64>,
    pub stop: StopReason,
}

impl TrainOutcome {
    pub fn log_lines(&self) -> String {
        self.epochs.iter().map(|e| e.to_log_line() + "\n").collect()
    }

    pub fn diagnostics_at(&self, epoch: usize) -> Option<&DcorDiagnostics> {
        self.diagnostics.iter().find(|d| d.epoch == epoch)
    }
}

fn diagnostics(epoch: usize, model: &Model, scorer: &ScoringModel, params: &ParamStore, rows: usize) -> Result<DcorDiagnostics> {
    let k = model.config().factors;
    let head = |m: &Matrix| m.slice_rows(0, m.rows().min(rows));
    let mut users = vec![mean_block_dcor(&head(params.require(crate::model::USER_EMBEDDING)?), k)?];
    let mut items = vec![mean_block_dcor(&head(params.require(crate::model::ITEM_EMBEDDING)?), k)?];
    for b in 0..scorer.num_behaviors() {
        users.push(mean_block_dcor(&head(scorer.user_embeddings(b)), k)?);
        items.push(mean_block_dcor(&head(scorer.item_embeddings(b)), k)?);
    }
    Ok(DcorDiagnostics { epoch, users, items })
}

/// Trains with `cfg` on a split dataset.
pub fn train(cfg: &TrainingConfig, ds: &InteractionDataset) -> Result<TrainOutcome> {
    train_with(cfg, ds, |_| {})
}

/// Like [`train`], calling `on_epoch` after every finished epoch.
pub fn train_with(
    cfg: &TrainingConfig,
    ds: &InteractionDataset,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    if !ds.is_split() {
        return Err(Error::Config("dataset has no leave-one-out split".into()));
    }
    let model = cfg.model(ds)?;
    let graphs = build_graphs(ds)?;
    let sampler = NegativeSampler::new(ds);
    let positives = ds.train_pairs(ds.target_behavior());
    if positives.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut params = model.init_params(cfg.seed);
    let mut adam = AdamState::new(&params);
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let eval_opts = EvalOptions {
        cutoffs: vec![VALIDATION_CUTOFF],
        unmasked: false,
        max_users: cfg.eval_users,
        seed: cfg.seed,
    };

    let mut order = positives;
    let mut outcome = TrainOutcome {
        best_params: params.clone(),
        final_params: ParamStore::new(),
        best_epoch: 0,
        best_val_recall: f64::NEG_INFINITY,
        epochs: Vec::new(),
        diagnostics: Vec::new(),
        wall_times: Vec::new(),
        stop: StopReason::MaxEpochs,
    };
    let mut since_best = 0;
    'epochs: for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let (mut rec_sum, mut indep_sum, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<TrainingSample> = chunk
                .iter()
                .filter_map(|&(user, pos)| sampler.sample(user, &mut rng).map(|neg| TrainingSample { user, pos, neg }))
                .collect();
            if batch.is_empty() {
                continue;
            }
            match step(&model, &graphs, &mut params, &mut adam, &adam_cfg, &batch, cfg) {
                Ok((rec, indep)) => {
                    rec_sum += rec;
                    indep_sum += indep;
                    batches += 1;
                }
                Err(e @ (Error::NonFiniteLoss { .. } | Error::NonFiniteGradient(_))) => {
                    let e = match e {
                        Error::NonFiniteLoss { rec, indep, .. } => Error::NonFiniteLoss { epoch, rec, indep },
                        other => other,
                    };
                    log::error!("epoch {epoch}: {e}");
                    outcome.stop = StopReason::Diverged {
                        epoch,
                        message: e.to_string(),
                    };
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let scorer = model.scoring_model(&params, &graphs)?;
        let report = evaluate(&scorer, ds, HoldOut::Validation, &eval_opts)?;
        let val_recall = report.recall(VALIDATION_CUTOFF).unwrap_or(0.0);
        outcome
            .diagnostics
            .push(diagnostics(epoch, &model, &scorer, &params, cfg.dcor_rows)?);
        let n = batches.max(1) as f64;
        let record = EpochRecord {
            epoch,
            loss_rec: rec_sum / n,
            loss_d: indep_sum / n,
            val_recall,
        };
        log::info!(
            "epoch {epoch}: loss_rec {:.6} loss_d {:.6} val_recall@{VALIDATION_CUTOFF} {:.4}",
            record.loss_rec,
            record.loss_d,
            val_recall
        );
        on_epoch(&record);
        outcome.epochs.push(record);
        outcome.wall_times.push(started.elapsed().as_secs_f64());
        if val_recall > outcome.best_val_recall {
            outcome.best_val_recall = val_recall;
            outcome.best_epoch = epoch;
            outcome.best_params = params.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                outcome.stop = StopReason::EarlyStopped;
                break;
            }
        }
    }
    if outcome.best_epoch == 0 {
        outcome.best_val_recall = 0.0;
    }
    outcome.final_params = params;
    Ok(outcome)
}

fn step(
    model: &Model,
    graphs: &[BehaviorGraph],
    params: &mut ParamStore,
    adam: &mut AdamState,
    adam_cfg: &AdamConfig,
    batch: &[TrainingSample],
    cfg: &TrainingConfig,
) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = model.forward(&mut tape, &bound, graphs)?;
    let terms = batch_loss(model, &mut tape, &bound, &out, batch, cfg)?;
    let (rec, indep) = (tape.value(terms.rec).item(), tape.value(terms.indep).item());
    if !tape.value(terms.total).item().is_finite() {
        return Err(Error::NonFiniteLoss { epoch: 0, rec, indep });
    }
    tape.backward(terms.total)?;
    let grads = bound.gradients(&tape);
    adam_step(params, &grads, adam, adam_cfg)?;
    Ok((rec, indep))
}

pub const META_CONFIG: &str = "config";
pub const META_BEHAVIORS: &str = "behaviors";
pub const META_USERS: &str = "num_users";
pub const META_ITEMS: &str = "num_items";

/// Checkpoint carrying `params` plus the config and dataset dimensions.
pub fn make_checkpoint(cfg: &TrainingConfig, ds: &InteractionDataset, params: ParamStore) -> Checkpoint {
    let mut ckpt = Checkpoint::new(params);
    ckpt.metadata.insert(META_CONFIG.into(), serde_json::to_string(cfg).expect("config serializes"));
    ckpt.metadata.insert(META_BEHAVIORS.into(), ds.behaviors().join(","));
    ckpt.metadata.insert(META_USERS.into(), ds.num_users().to_string());
    ckpt.metadata.insert(META_ITEMS.into(), ds.num_items().to_string());
    ckpt
}

/// Config stored in a checkpoint.
pub fn checkpoint_config(ckpt: &Checkpoint) -> Result<TrainingConfig> {
    let raw = ckpt
        .metadata
        .get(META_CONFIG)
        .ok_or_else(|| Error::Format("checkpoint has no config".into()))?;
    Ok(serde_json::from_str(raw)?)
}

/// Frozen scorer for a checkpoint on the dataset it was trained on.
pub fn load_scoring_model(ckpt: &Checkpoint, ds: &InteractionDataset) -> Result<(TrainingConfig, ScoringModel)> {
    let cfg = checkpoint_config(ckpt)?;
    if let Some(b) = ckpt.metadata.get(META_BEHAVIORS) {
        if *b != ds.behaviors().join(",") {
            return Err(Error::Config(format!(
                "checkpoint behaviors `{b}` differ from dataset `{}`",
                ds.behaviors().join(",")
            )));
        }
    }
    let model = cfg.model(ds)?;
    model.check_params(&ckpt.params)?;
    let graphs = build_graphs(ds)?;
    let scorer = model.scoring_model(&ckpt.params, &graphs)?;
    Ok((cfg, scorer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ingest, RawInteraction};

    fn tiny() -> InteractionDataset {
        let chain = vec!["view".to_string(), "buy".to_string()];
        let mut recs = Vec::new();
        for u in 0..6 {
            for j in 0..4 {
                let item = format!("i{}", (u + j) % 8);
                recs.push(RawInteraction::new(&format!("u{u}"), &item, "view", j as u64));
                recs.push(RawInteraction::new(&format!("u{u}"), &item, "buy", 10 + j as u64));
            }
        }
        ingest(recs, &chain).unwrap().split_leave_one_out()
    }

    fn config() -> TrainingConfig {
        TrainingConfig {
            dim: 4,
            factors: 2,
            layers: vec![1, 1],
            batch_size: 8,
            lr: 0.01,
            max_epochs: 3,
            seed: 3,
            ..TrainingConfig::default()
        }
    }

    #[test]
    fn negatives_avoid_target_positives() {
        let ds = tiny();
        let s = NegativeSampler::new(&ds);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..2000 {
            let u = rng.gen_range(0..ds.num_users());
            let i = s.sample(u, &mut rng).unwrap();
            assert!(!s.is_positive(u, i));
        }
    }

    #[test]
    fn equal_scores_cost_ln2_each() {
        let mut t = Tape::new();
        let p = ParamStore::new().bind(&mut t);
        let a = t.constant(Matrix::filled(3, 1, 0.7));
        let l = bpr_loss(&mut t, a, a, &p, 0.0).unwrap();
        assert!((t.value(l).item() - 3.0 * std::f64::consts::LN_2).abs() < 1e-12);
        let big = t.constant(Matrix::filled(1, 1, 800.0));
        let zero = t.constant(Matrix::filled(1, 1, 0.0));
        let l = bpr_loss(&mut t, big, zero, &p, 0.0).unwrap();
        assert!(t.value(l).item().abs() < 1e-300);
    }

    #[test]
    fn total_loss_with_zero_beta_is_rec() {
        let mut t = Tape::new();
        let r = t.constant(Matrix::scalar(1.25));
        let d = t.constant(Matrix::scalar(7.0));
        let l = total_loss(&mut t, r, d, 0.0).unwrap();
        assert_eq!(t.value(l).item(), 1.25);
        let l = total_loss(&mut t, r, d, 0.5).unwrap();
        assert_eq!(t.value(l).item(), 4.75);
    }

    #[test]
    fn config_validation_and_toml_like_round_trip() {
        assert!(TrainingConfig::default().validate().is_ok());
        let bad = TrainingConfig { factors: 3, ..TrainingConfig::default() };
        assert!(bad.validate().is_err());
        let json = serde_json::to_string(&TrainingConfig::default()).unwrap();
        let back: TrainingConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, TrainingConfig::default());
        assert!(serde_json::from_str::<TrainingConfig>("{\"dimm\": 3}").is_err());
    }

    #[test]
    fn zero_learning_rate_stops_at_patience() {
        let ds = tiny();
        let cfg = TrainingConfig { lr: 0.0, max_epochs: 50, patience: 4, ..config() };
        let out = train(&cfg, &ds).unwrap();
        assert_eq!(out.epochs.len(), 5);
        assert_eq!(out.stop, StopReason::EarlyStopped);
        assert_eq!(out.best_epoch, 1);
        let first = out.epochs[0].val_recall;
        assert!(out.epochs.iter().all(|e| e.val_recall == first));
        let init = cfg.model(&ds).unwrap().init_params(cfg.seed);
        for ((_, a), (_, b)) in init.iter().zip(out.final_params.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn checkpoint_restores_scorer() {
        let ds = tiny();
        let cfg = config();
        let out = train(&cfg, &ds).unwrap();
        let ckpt = make_checkpoint(&cfg, &ds, out.best_params.clone());
        let (back_cfg, scorer) = load_scoring_model(&ckpt, &ds).unwrap();
        assert_eq!(back_cfg, cfg);
        let model = cfg.model(&ds).unwrap();
        let direct = model.scoring_model(&out.best_params, &build_graphs(&ds).unwrap()).unwrap();
        assert_eq!(scorer.score(1, 2), direct.score(1, 2));
    }
}
