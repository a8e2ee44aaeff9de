use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use disen_cgcn::dataset::{generate_synthetic, ingest, parse_tsv, InteractionDataset, SyntheticConfig};
use disen_cgcn::evaluator::{compare_runs, evaluate, CutoffMetrics, EvalOptions, HoldOut, RankingReport};
use disen_cgcn::model::Variant;
use disen_cgcn::tensor::Checkpoint;
use disen_cgcn::trainer::{checkpoint_config, load_scoring_model, make_checkpoint, train, StopReason, TrainOutcome, TrainingConfig};
use serde::Serialize;

use crate::args::*;
use crate::manifest::{sha256_file, write_json, RunManifest};

pub const DATASET_FILE: &str = "dataset.bin";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const MANIFEST_KEY: &str = "manifest_id";

/// Runs `command`. `snapshot` replaces defaults and config files when
/// replaying a manifest.
pub fn run(command: &Command, snapshot: Option<&TrainingConfig>) -> Result<()> {
    match command {
        Command::Preprocess(a) => preprocess(command, a),
        Command::GenSynthetic(a) => gen_synthetic(command, a),
        Command::Train(a) => train_cmd(command, a, snapshot),
        Command::Evaluate(a) => evaluate_cmd(command, a),
        Command::Ablate(a) => ablate(command, a, snapshot),
        Command::Sweep(a) => sweep(command, a, snapshot),
        Command::ExportAttention(a) => export_attention(command, a),
        Command::Replay(a) => replay(a),
    }
}

fn out_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn dataset_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join(DATASET_FILE)
    } else {
        data.to_path_buf()
    }
}

fn load_dataset(data: &Path) -> Result<(InteractionDataset, String)> {
    let path = dataset_path(data);
    let ds = InteractionDataset::load_cache(&path).with_context(|| format!("loading dataset {}", path.display()))?;
    Ok((ds, sha256_file(&path)?))
}

#[derive(Serialize)]
struct BehaviorStats {
    behavior: String,
    interactions: usize,
    train_edges: usize,
}

#[derive(Serialize)]
struct DatasetStats {
    input_records: usize,
    unique_records: usize,
    duplicates_removed: usize,
    users: usize,
    items: usize,
    users_with_test: usize,
    users_with_validation: usize,
    behaviors: Vec<BehaviorStats>,
}

fn preprocess(command: &Command, a: &PreprocessArgs) -> Result<()> {
    let reader = BufReader::new(File::open(&a.input).with_context(|| format!("opening {}", a.input.display()))?);
    let raw = parse_tsv(reader).with_context(|| format!("parsing {}", a.input.display()))?;
    let input_records = raw.len();
    let ds = ingest(raw, &a.chain)?.split_leave_one_out();
    out_dir(&a.out)?;
    let mut manifest = RunManifest::new(command, None, Some(sha256_file(&a.input)?), BTreeMap::new());

    let cache = a.out.join(DATASET_FILE);
    ds.save_cache(&cache)?;
    manifest.record(&a.out, &cache);
    let split = a.out.join("split.json");
    write_json(&split, &ds.split_manifest())?;
    manifest.record(&a.out, &split);
    let stats = DatasetStats {
        input_records,
        unique_records: ds.records().len(),
        duplicates_removed: input_records - ds.records().len(),
        users: ds.num_users(),
        items: ds.num_items(),
        users_with_test: (0..ds.num_users()).filter(|&u| ds.test_item(u).is_some()).count(),
        users_with_validation: (0..ds.num_users()).filter(|&u| ds.validation_item(u).is_some()).count(),
        behaviors: (0..ds.num_behaviors())
            .map(|b| BehaviorStats {
                behavior: ds.behaviors()[b].clone(),
                interactions: ds.interactions(b).len(),
                train_edges: ds.train_pairs(b).len(),
            })
            .collect(),
    };
    let stats_path = a.out.join("stats.json");
    write_json(&stats_path, &stats)?;
    manifest.record(&a.out, &stats_path);
    log::info!(
        "{} records ({} duplicates removed), {} users, {} items",
        stats.unique_records,
        stats.duplicates_removed,
        stats.users,
        stats.items
    );
    manifest.write(&a.out)
}

fn gen_synthetic(command: &Command, a: &GenSyntheticArgs) -> Result<()> {
    if a.behaviors.len() != a.per_user.len() {
        bail!("configuration error: {} behaviors but {} per-user counts", a.behaviors.len(), a.per_user.len());
    }
    if a.factors == 0 || a.categories == 0 || a.items == 0 {
        bail!("configuration error: factors, categories and items must be positive");
    }
    let cfg = SyntheticConfig {
        users: a.users,
        items: a.items,
        factors: a.factors,
        categories: a.categories,
        behaviors: a.behaviors.clone(),
        per_user: a.per_user.clone(),
        noise: a.noise,
        seed: a.seed,
    };
    let data = generate_synthetic(&cfg);
    out_dir(&a.out)?;
    let mut manifest = RunManifest::new(command, None, None, BTreeMap::new());
    let tsv = a.out.join("interactions.tsv");
    let mut w = BufWriter::new(File::create(&tsv)?);
    for r in &data.records {
        writeln!(w, "{}\t{}\t{}\t{}", r.user_key, r.item_key, r.behavior, r.timestamp)?;
    }
    w.flush()?;
    manifest.record(&a.out, &tsv);
    #[derive(Serialize)]
    struct Planted<'a> {
        config: &'a SyntheticConfig,
        user_preferences: &'a [Vec<usize>],
        item_categories: &'a [Vec<usize>],
    }
    let planted = a.out.join("planted.json");
    write_json(
        &planted,
        &Planted {
            config: &cfg,
            user_preferences: &data.user_pref,
            item_categories: &data.item_cat,
        },
    )?;
    manifest.record(&a.out, &planted);
    log::info!("wrote {} records to {}", data.records.len(), tsv.display());
    manifest.write(&a.out)
}

/// Metrics file written next to every evaluation.
#[derive(Serialize)]
struct ReportFile<'a> {
    manifest_id: &'a str,
    split: Split,
    unmasked: bool,
    evaluated_users: usize,
    metrics: &'a BTreeMap<usize, CutoffMetrics>,
}

fn write_report(path: &Path, manifest_id: &str, split: Split, unmasked: bool, r: &RankingReport) -> Result<()> {
    write_json(
        path,
        &ReportFile {
            manifest_id,
            split,
            unmasked,
            evaluated_users: r.evaluated_users,
            metrics: &r.metrics,
        },
    )
}

fn write_lines(path: &Path, lines: impl IntoIterator<Item = String>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("writing {}", path.display()))?);
    for l in lines {
        writeln!(w, "{l}")?;
    }
    Ok(w.flush()?)
}

struct TrainedRun {
    outcome: TrainOutcome,
    test: RankingReport,
}

/// Trains into `dir`: checkpoint, logs and the test report at save time.
fn train_into(dir: &Path, cfg: &TrainingConfig, ds: &InteractionDataset, manifest: &mut RunManifest, root: &Path) -> Result<TrainedRun> {
    out_dir(dir)?;
    let outcome = train(cfg, ds)?;
    let files = [
        ("train_log.jsonl", outcome.epochs.iter().map(|e| e.to_log_line()).collect::<Vec<_>>()),
        (
            "timing.jsonl",
            outcome
                .wall_times
                .iter()
                .enumerate()
                .map(|(e, t)| format!("{{\"epoch\":{},\"wall_time\":{t}}}", e + 1))
                .collect(),
        ),
        ("dcor.jsonl", outcome.diagnostics.iter().map(|d| serde_json::to_string(d).unwrap()).collect()),
    ];
    for (name, lines) in files {
        let path = dir.join(name);
        write_lines(&path, lines)?;
        manifest.record(root, &path);
    }
    let save = |params, name: &str, manifest: &mut RunManifest| -> Result<()> {
        let mut ckpt = make_checkpoint(cfg, ds, params);
        ckpt.metadata.insert(MANIFEST_KEY.into(), manifest.manifest_id.clone());
        let path = dir.join(name);
        ckpt.save(&path)?;
        manifest.record(root, &path);
        Ok(())
    };
    if let StopReason::Diverged { epoch, message } = &outcome.stop {
        save(outcome.final_params.clone(), "last_good.bin", manifest)?;
        manifest.write(root)?;
        bail!("training diverged at epoch {epoch}: {message}; last good parameters saved to {}", dir.join("last_good.bin").display());
    }
    save(outcome.best_params.clone(), CHECKPOINT_FILE, manifest)?;
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let (_, scorer) = load_scoring_model(&Checkpoint::load(&ckpt_path)?, ds)?;
    let test = evaluate(&scorer, ds, HoldOut::Test, &EvalOptions::default())?;
    let report = dir.join("report.json");
    write_report(&report, &manifest.manifest_id, Split::Test, false, &test)?;
    manifest.record(root, &report);
    log::info!(
        "best epoch {} (val recall@20 {:.4}); test recall@20 {:.4}",
        outcome.best_epoch,
        outcome.best_val_recall,
        test.recall(20).unwrap_or(0.0)
    );
    Ok(TrainedRun { outcome, test })
}

fn train_cmd(command: &Command, a: &TrainArgs, snapshot: Option<&TrainingConfig>) -> Result<()> {
    let cfg = a.flags.resolve(snapshot)?;
    let (ds, hash) = load_dataset(&a.data)?;
    out_dir(&a.out)?;
    let mut manifest = RunManifest::new(command, Some(cfg.clone()), Some(hash), BTreeMap::new());
    train_into(&a.out, &cfg, &ds, &mut manifest, &a.out)?;
    manifest.write(&a.out)
}

fn evaluate_cmd(command: &Command, a: &EvaluateArgs) -> Result<()> {
    let (ds, hash) = load_dataset(&a.data)?;
    let ckpt = Checkpoint::load(&a.checkpoint).with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let (cfg, scorer) = load_scoring_model(&ckpt, &ds)?;
    let inputs = BTreeMap::from([("checkpoint".to_string(), sha256_file(&a.checkpoint)?)]);
    out_dir(&a.out)?;
    let mut manifest = RunManifest::new(command, Some(cfg), Some(hash), inputs);
    let holdout = match a.split {
        Split::Test => HoldOut::Test,
        Split::Validation => HoldOut::Validation,
    };
    let opts = EvalOptions {
        cutoffs: a.cutoffs.clone(),
        unmasked: a.unmasked,
        max_users: a.eval_users,
        seed: a.eval_seed,
    };
    let report = evaluate(&scorer, &ds, holdout, &opts)?;
    let path = a.out.join("report.json");
    write_report(&path, &manifest.manifest_id, a.split, a.unmasked, &report)?;
    manifest.record(&a.out, &path);
    let ranks = a.out.join("ranks.csv");
    std::fs::write(&ranks, report.ranks_csv(&ds))?;
    manifest.record(&a.out, &ranks);
    manifest.write(&a.out)
}

const ABLATIONS: [Variant; 4] = [Variant::Full, Variant::WoA, Variant::WoT, Variant::WoAT];

fn ablate(command: &Command, a: &AblateArgs, snapshot: Option<&TrainingConfig>) -> Result<()> {
    if a.flags.variant.is_some() || a.flags.w_post {
        bail!("configuration error: ablate runs a fixed variant set; drop --variant/--w-post");
    }
    let base = a.flags.resolve(snapshot)?;
    if base.variant != Variant::Full {
        bail!("configuration error: ablate needs variant `full` in the base config, got `{}`", base.variant);
    }
    let (ds, hash) = load_dataset(&a.data)?;
    out_dir(&a.out)?;
    let mut manifest = RunManifest::new(command, Some(base.clone()), Some(hash), BTreeMap::new());
    let mut reports = Vec::new();
    for v in ABLATIONS {
        let cfg = TrainingConfig { variant: v, ..base.clone() };
        log::info!("training {v}");
        let run = train_into(&a.out.join(v.name()), &cfg, &ds, &mut manifest, &a.out)?;
        reports.push((v.name().to_string(), run.test));
    }
    let table = compare_runs(&reports)?;
    let md = a.out.join("comparison.md");
    std::fs::write(&md, format!("<!-- manifest_id: {} -->\n{}", manifest.manifest_id, table.to_markdown()))?;
    manifest.record(&a.out, &md);
    #[derive(Serialize)]
    struct ComparisonFile<'a> {
        manifest_id: &'a str,
        #[serde(flatten)]
        table: &'a disen_cgcn::evaluator::Comparison,
    }
    let json = a.out.join("comparison.json");
    write_json(&json, &ComparisonFile { manifest_id: &manifest.manifest_id, table: &table })?;
    manifest.record(&a.out, &json);
    manifest.write(&a.out)
}

#[derive(Serialize)]
struct SweepEntry {
    value: String,
    best_epoch: usize,
    #[serde(rename = "best_val_recall@20")]
    best_val_recall: f64,
    test: BTreeMap<usize, CutoffMetrics>,
}

fn sweep(command: &Command, a: &SweepArgs, snapshot: Option<&TrainingConfig>) -> Result<()> {
    let base = a.flags.resolve(snapshot)?;
    if a.param == SweepParam::Rho && !base.variant.uses_attention() {
        bail!("configuration error: sweeping rho has no effect for variant `{}` (uniform attention)", base.variant);
    }
    let values = a.values.clone().unwrap_or_else(|| a.param.default_grid());
    if values.is_empty() {
        bail!("configuration error: empty sweep grid");
    }
    let mut configs = Vec::new();
    for v in &values {
        let mut cfg = base.clone();
        a.param.apply(&mut cfg, v)?;
        cfg.validate().with_context(|| format!("{} = {v}", a.param.name()))?;
        configs.push(cfg);
    }
    let (ds, hash) = load_dataset(&a.data)?;
    out_dir(&a.out)?;
    let mut manifest = RunManifest::new(command, Some(base), Some(hash), BTreeMap::new());
    let mut entries = Vec::new();
    for (v, cfg) in values.iter().zip(&configs) {
        log::info!("{} = {v}", a.param.name());
        let dir = a.out.join(format!("{}={v}", a.param.name()));
        let run = train_into(&dir, cfg, &ds, &mut manifest, &a.out)?;
        entries.push(SweepEntry {
            value: v.clone(),
            best_epoch: run.outcome.best_epoch,
            best_val_recall: run.outcome.best_val_recall,
            test: run.test.metrics,
        });
    }
    let best = entries
        .iter()
        .max_by(|x, y| x.best_val_recall.total_cmp(&y.best_val_recall))
        .map(|e| e.value.clone());
    #[derive(Serialize)]
    struct SweepFile<'a> {
        manifest_id: &'a str,
        param: &'static str,
        selected_by_validation: Option<String>,
        runs: &'a [SweepEntry],
    }
    let path = a.out.join("sweep.json");
    write_json(
        &path,
        &SweepFile {
            manifest_id: &manifest.manifest_id,
            param: a.param.name(),
            selected_by_validation: best,
            runs: &entries,
        },
    )?;
    manifest.record(&a.out, &path);
    manifest.write(&a.out)
}

fn export_attention(command: &Command, a: &ExportAttentionArgs) -> Result<()> {
    let (ds, hash) = load_dataset(&a.data)?;
    let ckpt = Checkpoint::load(&a.checkpoint).with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let cfg = checkpoint_config(&ckpt)?;
    let (_, scorer) = load_scoring_model(&ckpt, &ds)?;
    let users = a
        .users
        .iter()
        .map(|k| ds.user_index(k).map(|u| (k, u)).ok_or_else(|| anyhow!("unknown user key `{k}`")))
        .collect::<Result<Vec<_>>>()?;
    let items = a
        .items
        .iter()
        .map(|k| ds.item_index(k).map(|i| (k, i)).ok_or_else(|| anyhow!("unknown item key `{k}`")))
        .collect::<Result<Vec<_>>>()?;
    let behaviors: Vec<&str> = cfg.model(&ds)?.active_behaviors().into_iter().map(|b| ds.behaviors()[b].as_str()).collect();
    let inputs = BTreeMap::from([("checkpoint".to_string(), sha256_file(&a.checkpoint)?)]);
    out_dir(&a.out)?;
    let mut manifest = RunManifest::new(command, Some(cfg), Some(hash), inputs);
    let mut csv = format!("# manifest_id={}\nuser,item,behavior,factor,weight\n", manifest.manifest_id);
    for (uk, u) in &users {
        for (ik, i) in &items {
            for (b, row) in scorer.attention(*u, *i).iter().enumerate() {
                for (k, w) in row.iter().enumerate() {
                    csv.push_str(&format!("{uk},{ik},{},{k},{w:?}\n", behaviors[b]));
                }
            }
        }
    }
    let path = a.out.join("attention.csv");
    std::fs::write(&path, csv)?;
    manifest.record(&a.out, &path);
    manifest.write(&a.out)
}

fn replay(a: &ReplayArgs) -> Result<()> {
    let recorded = RunManifest::load(&a.manifest)?;
    let mut command = recorded.invocation.clone();
    if matches!(command, Command::Replay(_)) {
        bail!("manifest records a replay; replay the original manifest instead");
    }
    command.set_out(a.out.clone());
    run(&command, recorded.config.as_ref())?;
    let fresh = RunManifest::load(&a.out.join(crate::manifest::MANIFEST_FILE))?;
    if fresh.manifest_id != recorded.manifest_id {
        bail!(
            "replay produced manifest {} but {} was recorded; inputs changed",
            fresh.manifest_id,
            recorded.manifest_id
        );
    }
    Ok(())
}
