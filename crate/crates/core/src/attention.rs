//! Factor-level attention and the preference score.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{softmax_in_place, Matrix, Tape, Var};

/// Items scored per block in [`ScoringModel::score_all_items`].
pub const SCORE_BLOCK: usize = 2048;

/// Attention parameters of one behavior: `w` is `(2d/K) x d`, `bias` is
/// `1 x d` and `h` is `d x 1`. They are shared by all factors.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub w: Var,
    pub bias: Var,
    pub h: Var,
}

/// `tanh([e_u ; e_i] W + bias) h` for each row pair, `n x 1`.
pub fn attention_logits(tape: &mut Tape, user_block: Var, item_block: Var, p: &AttentionVars) -> Result<Var> {
    let x = tape.concat(&[user_block, item_block])?;
    let hidden = tape.matmul(x, p.w)?;
    let hidden = tape.add_row(hidden, p.bias)?;
    let hidden = tape.tanh(hidden);
    tape.matmul(hidden, p.h)
}

/// `rho * softmax` over the `K` logit columns of each row.
pub fn attention_weights(tape: &mut Tape, logits: Var, rho: f64) -> Var {
    let s = tape.softmax_lastdim(logits);
    tape.scale(s, rho)
}

/// Plain-slice variant of [`attention_weights`].
pub fn attention_weights_of(logits: &[f64], rho: f64) -> Vec<f64> {
    let mut w = logits.to_vec();
    softmax_in_place(&mut w);
    w.iter_mut().for_each(|x| *x *= rho);
    w
}

/// Batched score on the tape.
///
/// `users[b][k]` and `items[b][k]` are the `n x (d/K)` gathered blocks of
/// behavior `b`; `weights[b]` is `n x K`. Returns `n x 1`:
/// `sum_k (sum_b a^(b,k) e_u^(b,k)) . (sum_b e_i^(b,k))`.
pub fn score(tape: &mut Tape, users: &[Vec<Var>], items: &[Vec<Var>], weights: &[Var]) -> Result<Var> {
    let behaviors = users.len();
    let factors = users[0].len();
    let mut total: Option<Var> = None;
    for k in 0..factors {
        let mut user_agg: Option<Var> = None;
        let mut item_agg: Option<Var> = None;
        for b in 0..behaviors {
            let a = tape.slice_cols(weights[b], k, k + 1)?;
            let wu = tape.mul_col(users[b][k], a)?;
            user_agg = Some(match user_agg {
                Some(acc) => tape.add(acc, wu)?,
                None => wu,
            });
            item_agg = Some(match item_agg {
                Some(acc) => tape.add(acc, items[b][k])?,
                None => items[b][k],
            });
        }
        let prod = tape.mul(user_agg.unwrap(), item_agg.unwrap())?;
        let s = tape.row_sum(prod);
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    Ok(total.expect("at least one factor"))
}

/// Plain attention parameters of one behavior.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub w: Matrix,
    pub bias: Matrix,
    pub h: Matrix,
}

/// Frozen per-behavior embeddings plus attention, for ranking.
///
/// User-side and item-side halves of each `W` are projected once per node,
/// so a (user, item) pair only costs the `tanh` and the dot products.
#[derive(Clone, Debug)]
pub struct ScoringModel {
    factors: usize,
    rho: f64,
    users: Vec<Matrix>,
    items: Vec<Matrix>,
    item_sum: Matrix,
    attention: Option<Vec<AttentionParams>>,
    /// `[b]`: `M x (K*d)`, block `k` holds `e_u^(b,k) W_top`.
    user_proj: Vec<Matrix>,
    item_proj: Vec<Matrix>,
}

impl ScoringModel {
    /// `attention = None` means uniform weights `rho / K`.
    pub fn new(
        users: Vec<Matrix>,
        items: Vec<Matrix>,
        factors: usize,
        rho: f64,
        attention: Option<Vec<AttentionParams>>,
    ) -> Result<Self> {
        let behaviors = users.len();
        if behaviors == 0 || items.len() != behaviors {
            return Err(Error::Config("scoring model needs embeddings for every behavior".into()));
        }
        let d = users[0].cols();
        let w = crate::disentangle::check_factors(d, factors)?;
        let mut item_sum = Matrix::zeros(items[0].rows(), d);
        for m in &items {
            item_sum.add_assign(m);
        }
        let (mut user_proj, mut item_proj) = (Vec::new(), Vec::new());
        if let Some(att) = &attention {
            if att.len() != behaviors {
                return Err(Error::Config("attention parameters per behavior".into()));
            }
            for b in 0..behaviors {
                let top = att[b].w.slice_rows(0, w);
                let bottom = att[b].w.slice_rows(w, 2 * w);
                user_proj.push(project(&users[b], &top, factors));
                item_proj.push(project(&items[b], &bottom, factors));
            }
        }
        Ok(ScoringModel {
            factors,
            rho,
            users,
            items,
            item_sum,
            attention,
            user_proj,
            item_proj,
        })
    }

    pub fn num_users(&self) -> usize {
        self.users[0].rows()
    }

    pub fn num_items(&self) -> usize {
        self.items[0].rows()
    }

    pub fn num_behaviors(&self) -> usize {
        self.users.len()
    }

    pub fn factors(&self) -> usize {
        self.factors
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn user_embeddings(&self, b: usize) -> &Matrix {
        &self.users[b]
    }

    pub fn item_embeddings(&self, b: usize) -> &Matrix {
        &self.items[b]
    }

    fn block_width(&self) -> usize {
        self.users[0].cols() / self.factors
    }

    /// Raw logits `[b][k]` for one pair, computed directly from `W`.
    pub fn attention_logits(&self, u: usize, i: usize) -> Option<Vec<Vec<f64>>> {
        let att = self.attention.as_ref()?;
        let w = self.block_width();
        Some(
            (0..self.num_behaviors())
                .map(|b| {
                    (0..self.factors)
                        .map(|k| {
                            let span = k * w..(k + 1) * w;
                            let x: Vec<f64> = self.users[b].row(u)[span.clone()]
                                .iter()
                                .chain(&self.items[b].row(i)[span])
                                .copied()
                                .collect();
                            let p = &att[b];
                            (0..p.w.cols())
                                .map(|j| {
                                    let pre: f64 = x.iter().enumerate().map(|(r, v)| v * p.w[(r, j)]).sum::<f64>()
                                        + p.bias[(0, j)];
                                    pre.tanh() * p.h[(j, 0)]
                                })
                                .sum()
                        })
                        .collect()
                })
                .collect(),
        )
    }

    /// Attention weights `[b][k]` for one pair; rows sum to `rho`.
    pub fn attention(&self, u: usize, i: usize) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.factors]; self.num_behaviors()];
        self.attention_into(u, i, &mut out);
        out
    }

    fn attention_into(&self, u: usize, i: usize, out: &mut [Vec<f64>]) {
        let Some(att) = &self.attention else {
            let uniform = self.rho / self.factors as f64;
            out.iter_mut().for_each(|row| row.iter_mut().for_each(|a| *a = uniform));
            return;
        };
        let hidden = att[0].bias.cols();
        for (b, row) in out.iter_mut().enumerate() {
            let (pu, pi) = (self.user_proj[b].row(u), self.item_proj[b].row(i));
            let (bias, h) = (att[b].bias.data(), att[b].h.data());
            for (k, logit) in row.iter_mut().enumerate() {
                let span = k * hidden..(k + 1) * hidden;
                *logit = pu[span.clone()]
                    .iter()
                    .zip(&pi[span])
                    .zip(bias)
                    .zip(h)
                    .map(|(((a, c), b0), hv)| (a + c + b0).tanh() * hv)
                    .sum();
            }
            softmax_in_place(row);
            row.iter_mut().for_each(|a| *a *= self.rho);
        }
    }

    fn score_with(&self, u: usize, i: usize, weights: &mut [Vec<f64>]) -> f64 {
        self.attention_into(u, i, weights);
        let w = self.block_width();
        let item = self.item_sum.row(i);
        let mut total = 0.0;
        for k in 0..self.factors {
            for j in k * w..(k + 1) * w {
                let agg: f64 = (0..self.num_behaviors())
                    .map(|b| weights[b][k] * self.users[b][(u, j)])
                    .sum();
                total += agg * item[j];
            }
        }
        total
    }

    pub fn score(&self, u: usize, i: usize) -> f64 {
        let mut weights = vec![vec![0.0; self.factors]; self.num_behaviors()];
        self.score_with(u, i, &mut weights)
    }

    /// Scores of `candidates` for user `u`, in candidate order. Attention is
    /// recomputed per candidate.
    pub fn score_all_items(&self, u: usize, candidates: &[usize]) -> Vec<f64> {
        let mut weights = vec![vec![0.0; self.factors]; self.num_behaviors()];
        let mut out = Vec::with_capacity(candidates.len());
        for chunk in candidates.chunks(SCORE_BLOCK) {
            out.extend(chunk.iter().map(|&i| self.score_with(u, i, &mut weights)));
        }
        out
    }

    /// Scores for many users in parallel; row order follows `users`.
    pub fn score_users(&self, users: &[usize], candidates: &[usize]) -> Vec<Vec<f64>> {
        users
            .par_iter()
            .map(|&u| self.score_all_items(u, candidates))
            .collect()
    }
}

fn project(e: &Matrix, half: &Matrix, factors: usize) -> Matrix {
    let w = e.cols() / factors;
    let hidden = half.cols();
    let mut out = Matrix::zeros(e.rows(), factors * hidden);
    for k in 0..factors {
        let block = e.slice_cols(k * w, (k + 1) * w);
        let p = block.matmul(half);
        for r in 0..e.rows() {
            out.row_mut(r)[k * hidden..(k + 1) * hidden].copy_from_slice(p.row(r));
        }
    }
    out
}
