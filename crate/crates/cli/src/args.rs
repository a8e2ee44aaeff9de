use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use disen_cgcn::model::Variant;
use disen_cgcn::trainer::TrainingConfig;
use serde::{Deserialize, Serialize};

#[derive(Parser, Debug)]
#[command(name = "disen-cgcn", version, about = "Disentangled cascading GCN for multi-behavior recommendation")]
pub struct Cli {
    /// Log filter, e.g. `warn`, `info`, `debug`.
    #[arg(long, global = true, default_value = "info")]
    pub log: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Ingest a TSV log, deduplicate, split and cache it.
    Preprocess(PreprocessArgs),
    /// Write a planted-factor synthetic TSV log.
    GenSynthetic(GenSyntheticArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Rank held-out items with a checkpoint.
    Evaluate(EvaluateArgs),
    /// Train full, wo_A, wo_T and wo_AT with one seed and compare them.
    Ablate(AblateArgs),
    /// Train over a grid of one hyperparameter.
    Sweep(SweepArgs),
    /// Dump per-factor attention weights for user/item pairs.
    ExportAttention(ExportAttentionArgs),
    /// Re-run the command recorded in a run manifest.
    Replay(ReplayArgs),
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct PreprocessArgs {
    /// Tab-separated `user item behavior timestamp` log.
    #[arg(long)]
    pub input: PathBuf,
    /// Behavior chain, target last.
    #[arg(long, value_delimiter = ',', default_value = "view,cart,buy")]
    pub chain: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct GenSyntheticArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub users: usize,
    #[arg(long, default_value_t = 100)]
    pub items: usize,
    /// Planted latent factors.
    #[arg(long, default_value_t = 2)]
    pub factors: usize,
    /// Categories per factor.
    #[arg(long, default_value_t = 4)]
    pub categories: usize,
    #[arg(long, value_delimiter = ',', default_value = "view,cart,buy")]
    pub behaviors: Vec<String>,
    /// Interactions per user and behavior.
    #[arg(long, value_delimiter = ',', default_value = "15,7,4")]
    pub per_user: Vec<usize>,
    /// Random extra interactions of the first behavior per user.
    #[arg(long, default_value_t = 3)]
    pub noise: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

/// Training hyperparameters. Precedence: flags, then `--config`, then
/// built-in defaults.
#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct ConfigFlags {
    /// TOML file with any `TrainingConfig` keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub factors: Option<usize>,
    #[arg(long)]
    pub rho: Option<f64>,
    /// Propagation layers per behavior, e.g. `3,4,3`.
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,
    /// full, wo_A, wo_T, wo_AT, w_post or single_behavior.
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Meta-knowledge from the current behavior's output (variant w_post).
    #[arg(long)]
    #[serde(default)]
    pub w_post: bool,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// L2 coefficient.
    #[arg(long)]
    pub l2: Option<f64>,
    /// Independence penalty weight.
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub dcor_rows: Option<usize>,
    /// Validate on a seeded sample of this many users.
    #[arg(long)]
    pub eval_users: Option<usize>,
}

pub fn read_config_file(path: &Path) -> Result<TrainingConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

impl ConfigFlags {
    /// Resolved config. `base` replaces defaults and the config file.
    pub fn resolve(&self, base: Option<&TrainingConfig>) -> Result<TrainingConfig> {
        let mut cfg = match (base, &self.config) {
            (Some(b), _) => b.clone(),
            (None, Some(path)) => read_config_file(path)?,
            (None, None) => TrainingConfig::default(),
        };
        macro_rules! set {
            ($($f:ident),*) => {$(
                if let Some(v) = &self.$f {
                    cfg.$f = v.clone();
                }
            )*};
        }
        set!(dim, factors, rho, layers, variant, batch_size, lr, l2, beta, seed, max_epochs, patience, dcor_rows);
        if self.eval_users.is_some() {
            cfg.eval_users = self.eval_users;
        }
        if self.w_post {
            if self.variant.is_some_and(|v| v != Variant::WPost) {
                bail!("configuration error: --w-post conflicts with --variant {}", self.variant.unwrap());
            }
            cfg.variant = Variant::WPost;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Preprocessed dataset directory or cache file.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub flags: ConfigFlags,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Test,
    Validation,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    pub split: Split,
    /// Rank against all items, known positives included.
    #[arg(long)]
    #[serde(default)]
    pub unmasked: bool,
    /// Evaluate a seeded uniform sample of this many users.
    #[arg(long)]
    pub eval_users: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub eval_seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "10,20,50")]
    pub cutoffs: Vec<usize>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub flags: ConfigFlags,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    Lr,
    L2,
    Beta,
    Factors,
    Rho,
}

impl SweepParam {
    pub fn default_grid(self) -> Vec<String> {
        let list: &[&str] = match self {
            SweepParam::Lr => &["1e-2", "1e-3", "1e-4"],
            SweepParam::L2 | SweepParam::Beta => &["1e1", "1", "1e-1", "1e-2", "1e-3", "1e-4", "1e-5"],
            SweepParam::Factors | SweepParam::Rho => &["1", "2", "4", "8"],
        };
        list.iter().map(|s| s.to_string()).collect()
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Lr => "lr",
            SweepParam::L2 => "l2",
            SweepParam::Beta => "beta",
            SweepParam::Factors => "factors",
            SweepParam::Rho => "rho",
        }
    }

    pub fn apply(self, cfg: &mut TrainingConfig, value: &str) -> Result<()> {
        let float = || value.parse::<f64>().with_context(|| format!("invalid {} value `{value}`", self.name()));
        match self {
            SweepParam::Lr => cfg.lr = float()?,
            SweepParam::L2 => cfg.l2 = float()?,
            SweepParam::Beta => cfg.beta = float()?,
            SweepParam::Rho => cfg.rho = float()?,
            SweepParam::Factors => {
                cfg.factors = value.parse().with_context(|| format!("invalid factors value `{value}`"))?
            }
        }
        Ok(())
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub param: SweepParam,
    /// Grid values; defaults to the standard grid of the parameter.
    #[arg(long, value_delimiter = ',')]
    pub values: Option<Vec<String>>,
    #[command(flatten)]
    pub flags: ConfigFlags,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ExportAttentionArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// User keys; every user is paired with every item.
    #[arg(long, value_delimiter = ',', required = true)]
    pub users: Vec<String>,
    #[arg(long, value_delimiter = ',', required = true)]
    pub items: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Preprocess(_) => "preprocess",
            Command::GenSynthetic(_) => "gen-synthetic",
            Command::Train(_) => "train",
            Command::Evaluate(_) => "evaluate",
            Command::Ablate(_) => "ablate",
            Command::Sweep(_) => "sweep",
            Command::ExportAttention(_) => "export-attention",
            Command::Replay(_) => "replay",
        }
    }

    pub fn set_out(&mut self, out: PathBuf) {
        match self {
            Command::Preprocess(a) => a.out = out,
            Command::GenSynthetic(a) => a.out = out,
            Command::Train(a) => a.out = out,
            Command::Evaluate(a) => a.out = out,
            Command::Ablate(a) => a.out = out,
            Command::Sweep(a) => a.out = out,
            Command::ExportAttention(a) => a.out = out,
            Command::Replay(a) => a.out = out,
        }
    }
}
