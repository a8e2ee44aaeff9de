//! Parameter layout, the cascading forward pass and batch scoring.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attention_logits, attention_weights, score, AttentionParams, AttentionVars, ScoringModel};
use crate::disentangle::{check_factors, split, FactorizedEmbeddings};
use crate::encoder::{combine, propagate};
use crate::error::{Error, Result};
use crate::graph::BehaviorGraph;
use crate::meta::{
    generate_transform, meta_knowledge, personalized_transform, shared_transform, MetaNetwork,
};
use crate::tensor::{xavier_with, BoundParams, Matrix, ParamStore, Tape, Var};

/// Model variant: the full model or one of its ablations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[default]
    #[serde(rename = "full")]
    Full,
    /// Uniform factor weights.
    #[serde(rename = "wo_A")]
    WoA,
    /// One shared transform per transition instead of meta-networks.
    #[serde(rename = "wo_T")]
    WoT,
    #[serde(rename = "wo_AT")]
    WoAT,
    /// Meta-knowledge aggregated from the current behavior's output.
    #[serde(rename = "w_post")]
    WPost,
    /// Target behavior only.
    #[serde(rename = "single_behavior")]
    SingleBehavior,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::WoA,
        Variant::WoT,
        Variant::WoAT,
        Variant::WPost,
        Variant::SingleBehavior,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WoA => "wo_A",
            Variant::WoT => "wo_T",
            Variant::WoAT => "wo_AT",
            Variant::WPost => "w_post",
            Variant::SingleBehavior => "single_behavior",
        }
    }

    pub fn uses_attention(self) -> bool {
        !matches!(self, Variant::WoA | Variant::WoAT)
    }

    pub fn personalized_transforms(self) -> bool {
        !matches!(self, Variant::WoT | Variant::WoAT)
    }

    pub fn post_conv_knowledge(self) -> bool {
        self == Variant::WPost
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub factors: usize,
    pub rho: f64,
    /// Propagation depth per behavior, in chain order.
    pub layers: Vec<usize>,
    pub variant: Variant,
}

/// Embeddings produced by the cascade.
#[derive(Clone, Debug)]
pub struct CascadeOutput {
    pub initial_users: Var,
    pub initial_items: Var,
    /// Combined output per active behavior (`N x d` / `M x d`).
    pub users: Vec<Var>,
    pub items: Vec<Var>,
}

/// A model bound to dataset sizes.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    num_users: usize,
    num_items: usize,
    num_behaviors: usize,
}

pub const USER_EMBEDDING: &str = "embedding.user";
pub const ITEM_EMBEDDING: &str = "embedding.item";

fn meta_name(t: usize, k: usize, side: &str, part: &str) -> String {
    format!("meta.{t}.{k}.{side}.{part}")
}

fn shared_name(t: usize, k: usize, side: &str) -> String {
    format!("shared.{t}.{k}.{side}")
}

fn attention_name(b: usize, part: &str) -> String {
    format!("attention.{b}.{part}")
}

const SIDES: [&str; 2] = ["user", "item"];

impl Model {
    /// `num_behaviors` is the length of the full chain; the target is the
    /// last behavior.
    pub fn new(config: ModelConfig, num_users: usize, num_items: usize, num_behaviors: usize) -> Result<Self> {
        check_factors(config.dim, config.factors)?;
        if config.layers.len() != num_behaviors {
            return Err(Error::Config(format!(
                "{} layer counts given for {num_behaviors} behaviors",
                config.layers.len()
            )));
        }
        if !(config.rho > 0.0 && config.rho.is_finite()) {
            return Err(Error::Config(format!("attention coefficient must be positive, got {}", config.rho)));
        }
        Ok(Model {
            config,
            num_users,
            num_items,
            num_behaviors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    /// Behaviors the cascade actually runs, as chain indices.
    pub fn active_behaviors(&self) -> Vec<usize> {
        if self.config.variant == Variant::SingleBehavior {
            vec![self.num_behaviors - 1]
        } else {
            (0..self.num_behaviors).collect()
        }
    }

    fn block(&self) -> usize {
        self.config.dim / self.config.factors
    }

    /// Every tensor name with its shape, in initialization order.
    pub fn layout(&self) -> Vec<(String, (usize, usize))> {
        let d = self.config.dim;
        let m = self.block();
        let active = self.active_behaviors().len();
        let mut out = vec![
            (USER_EMBEDDING.to_string(), (self.num_users, d)),
            (ITEM_EMBEDDING.to_string(), (self.num_items, d)),
        ];
        for t in 0..active.saturating_sub(1) {
            for k in 0..self.config.factors {
                for side in SIDES {
                    if self.config.variant.personalized_transforms() {
                        out.push((meta_name(t, k, side, "w1"), (2 * m, m)));
                        out.push((meta_name(t, k, side, "b1"), (1, m)));
                        out.push((meta_name(t, k, side, "w2"), (m, m * m)));
                        out.push((meta_name(t, k, side, "b2"), (1, m * m)));
                    } else {
                        out.push((shared_name(t, k, side), (m, m)));
                    }
                }
            }
        }
        if self.config.variant.uses_attention() {
            for b in 0..active {
                out.push((attention_name(b, "w"), (2 * m, d)));
                out.push((attention_name(b, "bias"), (1, d)));
                out.push((attention_name(b, "h"), (d, 1)));
            }
        }
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        self.layout().into_iter().map(|(n, _)| n).collect()
    }

    /// Xavier-uniform initialization of every tensor from one seeded stream.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (name, (r, c)) in self.layout() {
            store.insert(name, xavier_with(r, c, &mut rng));
        }
        store
    }

    /// Checks that `params` holds every tensor with the expected shape.
    pub fn check_params(&self, params: &ParamStore) -> Result<()> {
        params.check_contains(&self.param_names())?;
        for (name, shape) in self.layout() {
            let got = params.require(&name)?.shape();
            if got != shape {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {got:?}, expected {shape:?}"
                )));
            }
        }
        Ok(())
    }

    /// Runs the cascade. `graphs` holds one graph per chain behavior.
    pub fn forward(&self, tape: &mut Tape, params: &BoundParams, graphs: &[BehaviorGraph]) -> Result<CascadeOutput> {
        let k = self.config.factors;
        let active = self.active_behaviors();
        let initial_users = params.var(USER_EMBEDDING);
        let initial_items = params.var(ITEM_EMBEDDING);
        let (mut in_u, mut in_i) = (initial_users, initial_items);
        let mut prev_u = split(tape, initial_users, k)?;
        let mut prev_i = split(tape, initial_items, k)?;
        let (mut users, mut items) = (Vec::new(), Vec::new());
        for (t, &b) in active.iter().enumerate() {
            let graph = &graphs[b];
            let stack = propagate(tape, graph, in_u, in_i, self.config.layers[b])?;
            let (out_u, out_i) = combine(tape, &stack)?;
            users.push(out_u);
            items.push(out_i);
            let cur_u = split(tape, out_u, k)?;
            let cur_i = split(tape, out_i, k)?;
            if t + 1 < active.len() {
                let (next_u, next_i) = self.transition(tape, params, graph, t, &cur_u, &cur_i, &prev_u, &prev_i)?;
                in_u = tape.concat(&next_u)?;
                in_i = tape.concat(&next_i)?;
            }
            prev_u = cur_u;
            prev_i = cur_i;
        }
        Ok(CascadeOutput {
            initial_users,
            initial_items,
            users,
            items,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn transition(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        graph: &BehaviorGraph,
        t: usize,
        cur_u: &FactorizedEmbeddings,
        cur_i: &FactorizedEmbeddings,
        prev_u: &FactorizedEmbeddings,
        prev_i: &FactorizedEmbeddings,
    ) -> Result<(Vec<Var>, Vec<Var>)> {
        let factors = self.config.factors;
        let (mut next_u, mut next_i) = (Vec::with_capacity(factors), Vec::with_capacity(factors));
        if !self.config.variant.personalized_transforms() {
            for k in 0..factors {
                next_u.push(shared_transform(tape, cur_u.blocks[k], params.var(&shared_name(t, k, "user")))?);
                next_i.push(shared_transform(tape, cur_i.blocks[k], params.var(&shared_name(t, k, "item")))?);
            }
            return Ok((next_u, next_i));
        }
        let (nb_u, nb_i) = if self.config.variant.post_conv_knowledge() {
            (cur_u, cur_i)
        } else {
            (prev_u, prev_i)
        };
        let know = meta_knowledge(tape, graph, cur_u, cur_i, nb_u, nb_i)?;
        for k in 0..factors {
            for (side, knowledge, block, out) in [
                ("user", know.users[k], cur_u.blocks[k], &mut next_u),
                ("item", know.items[k], cur_i.blocks[k], &mut next_i),
            ] {
                let net = MetaNetwork {
                    w1: params.var(&meta_name(t, k, side, "w1")),
                    b1: params.var(&meta_name(t, k, side, "b1")),
                    w2: params.var(&meta_name(t, k, side, "w2")),
                    b2: params.var(&meta_name(t, k, side, "b2")),
                };
                let mats = generate_transform(tape, knowledge, &net)?;
                out.push(personalized_transform(tape, block, mats)?);
            }
        }
        Ok((next_u, next_i))
    }

    /// Scores of the `(users[n], items[n])` pairs, `n x 1`.
    pub fn score_pairs(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        out: &CascadeOutput,
        users: &[usize],
        items: &[usize],
    ) -> Result<Var> {
        let k = self.config.factors;
        let n = users.len();
        let (mut ub, mut ib, mut weights) = (Vec::new(), Vec::new(), Vec::new());
        for b in 0..out.users.len() {
            let gu = tape.gather_rows(out.users[b], users)?;
            let gi = tape.gather_rows(out.items[b], items)?;
            let su = split(tape, gu, k)?.blocks;
            let si = split(tape, gi, k)?.blocks;
            let w = if self.config.variant.uses_attention() {
                let p = AttentionVars {
                    w: params.var(&attention_name(b, "w")),
                    bias: params.var(&attention_name(b, "bias")),
                    h: params.var(&attention_name(b, "h")),
                };
                let logits = (0..k)
                    .map(|f| attention_logits(tape, su[f], si[f], &p))
                    .collect::<Result<Vec<_>>>()?;
                let logits = tape.concat(&logits)?;
                attention_weights(tape, logits, self.config.rho)
            } else {
                tape.constant(Matrix::filled(n, k, self.config.rho / k as f64))
            };
            ub.push(su);
            ib.push(si);
            weights.push(w);
        }
        score(tape, &ub, &ib, &weights)
    }

    /// Frozen scorer built from a forward pass over `params`.
    pub fn scoring_model(&self, params: &ParamStore, graphs: &[BehaviorGraph]) -> Result<ScoringModel> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let out = self.forward(&mut tape, &bound, graphs)?;
        let users = out.users.iter().map(|&v| tape.value(v).clone()).collect();
        let items = out.items.iter().map(|&v| tape.value(v).clone()).collect();
        let attention = if self.config.variant.uses_attention() {
            Some(
                (0..out.users.len())
                    .map(|b| {
                        Ok(AttentionParams {
                            w: params.require(&attention_name(b, "w"))?.clone(),
                            bias: params.require(&attention_name(b, "bias"))?.clone(),
                            h: params.require(&attention_name(b, "h"))?.clone(),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        ScoringModel::new(users, items, self.config.factors, self.config.rho, attention)
    }
}
