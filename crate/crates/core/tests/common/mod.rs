//! Plain nested-loop reference implementations shared by the integration
//! tests. Nothing here touches the autodiff tape.
#![allow(dead_code)]

use disen_cgcn::dataset::{ingest, InteractionDataset, RawInteraction};
use disen_cgcn::model::{ModelConfig, Variant};
use disen_cgcn::tensor::{Matrix, ParamStore};
use rand::Rng;

pub type M = Vec<Vec<f64>>;

pub fn rows(m: &Matrix) -> M {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

pub fn matrix(m: &M) -> Matrix {
    Matrix::from_rows(m).unwrap()
}

pub fn random<R: Rng>(rng: &mut R, r: usize, c: usize) -> Matrix {
    let data = (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Matrix::from_vec(r, c, data).unwrap()
}

pub fn zeros(r: usize, c: usize) -> M {
    vec![vec![0.0; c]; r]
}

pub fn mm(a: &M, b: &M) -> M {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = zeros(n, m);
    for i in 0..n {
        for j in 0..m {
            for t in 0..k {
                out[i][j] += a[i][t] * b[t][j];
            }
        }
    }
    out
}

pub fn transpose(a: &M) -> M {
    if a.is_empty() {
        return vec![];
    }
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn cols(a: &M, start: usize, end: usize) -> M {
    a.iter().map(|r| r[start..end].to_vec()).collect()
}

/// Dense `A[u][i] = 1/sqrt(deg u * deg i)` over the given edges.
pub fn dense_adjacency(nu: usize, ni: usize, pairs: &[(usize, usize)]) -> M {
    let mut du = vec![0.0; nu];
    let mut di = vec![0.0; ni];
    for &(u, i) in pairs {
        du[u] += 1.0;
        di[i] += 1.0;
    }
    let mut a = zeros(nu, ni);
    for &(u, i) in pairs {
        a[u][i] = 1.0 / (du[u] * di[i] as f64).sqrt();
    }
    a
}

/// Layer-averaged propagation through the full bipartite adjacency
/// `[[0, A], [A^T, 0]]`.
pub fn dense_propagate(a: &M, eu: &M, ei: &M, layers: usize) -> (M, M) {
    let (nu, ni) = (eu.len(), ei.len());
    let n = nu + ni;
    let mut adj = zeros(n, n);
    for u in 0..nu {
        for i in 0..ni {
            adj[u][nu + i] = a[u][i];
            adj[nu + i][u] = a[u][i];
        }
    }
    let mut cur: M = eu.iter().chain(ei.iter()).cloned().collect();
    let mut acc = cur.clone();
    for _ in 0..layers {
        cur = mm(&adj, &cur);
        for (r, row) in acc.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v += cur[r][c];
            }
        }
    }
    let w = 1.0 / (layers + 1) as f64;
    let acc: M = acc.into_iter().map(|r| r.into_iter().map(|v| v * w).collect()).collect();
    (acc[..nu].to_vec(), acc[nu..].to_vec())
}

fn centered_distances(x: &M) -> M {
    let n = x.len();
    let mut d = zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            d[i][j] = x[i].iter().zip(&x[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        }
    }
    let row: Vec<f64> = d.iter().map(|r| r.iter().sum::<f64>() / n as f64).collect();
    let grand = row.iter().sum::<f64>() / n as f64;
    for i in 0..n {
        for j in 0..n {
            d[i][j] = d[i][j] - row[i] - row[j] + grand;
        }
    }
    d
}

fn mean_product(a: &M, b: &M) -> f64 {
    let n = a.len() as f64;
    a.iter().zip(b).map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x * y).sum::<f64>()).sum::<f64>() / (n * n)
}

/// Textbook sample distance correlation (biased V-statistics).
pub fn dcor_reference(x: &M, y: &M) -> f64 {
    let a = centered_distances(x);
    let b = centered_distances(y);
    let vx = mean_product(&a, &a);
    let vy = mean_product(&b, &b);
    if vx <= 1e-12 || vy <= 1e-12 {
        return 0.0;
    }
    let cov = mean_product(&a, &b).max(0.0);
    cov.sqrt() / (vx.sqrt() * vy.sqrt()).sqrt()
}

fn p(params: &ParamStore, name: &str) -> M {
    rows(params.get(name).unwrap_or_else(|| panic!("missing {name}")))
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Meta-network transform of one block, written with explicit loops.
fn meta_apply(params: &ParamStore, prefix: &str, own: &M, neighbor: &M, block: &M) -> M {
    let (w1, b1, w2, b2) = (
        p(params, &format!("{prefix}.w1")),
        p(params, &format!("{prefix}.b1")),
        p(params, &format!("{prefix}.w2")),
        p(params, &format!("{prefix}.b2")),
    );
    let m = block[0].len();
    block
        .iter()
        .enumerate()
        .map(|(n, x)| {
            let t: Vec<f64> = own[n].iter().chain(&neighbor[n]).copied().collect();
            let hidden: Vec<f64> = (0..m)
                .map(|h| relu(b1[0][h] + t.iter().enumerate().map(|(r, v)| v * w1[r][h]).sum::<f64>()))
                .collect();
            let flat: Vec<f64> = (0..m * m)
                .map(|o| b2[0][o] + hidden.iter().enumerate().map(|(h, v)| v * w2[h][o]).sum::<f64>())
                .collect();
            (0..m).map(|r| (0..m).map(|c| flat[r * m + c] * x[c]).sum()).collect()
        })
        .collect()
}

fn shared_apply(params: &ParamStore, name: &str, block: &M) -> M {
    let s = p(params, name);
    block
        .iter()
        .map(|x| (0..x.len()).map(|r| (0..x.len()).map(|c| s[r][c] * x[c]).sum()).collect())
        .collect()
}

fn join(blocks: &[M]) -> M {
    (0..blocks[0].len())
        .map(|n| blocks.iter().flat_map(|b| b[n].iter().copied()).collect())
        .collect()
}

/// Per-behavior combined user and item embeddings of the cascade.
pub fn cascade_reference(
    params: &ParamStore,
    cfg: &ModelConfig,
    nu: usize,
    ni: usize,
    graphs: &[Vec<(usize, usize)>],
) -> (Vec<M>, Vec<M>) {
    let k = cfg.factors;
    let w = cfg.dim / k;
    let active: Vec<usize> = if cfg.variant == Variant::SingleBehavior {
        vec![graphs.len() - 1]
    } else {
        (0..graphs.len()).collect()
    };
    let mut in_u = p(params, "embedding.user");
    let mut in_i = p(params, "embedding.item");
    let (mut prev_u, mut prev_i) = (in_u.clone(), in_i.clone());
    let (mut users, mut items) = (Vec::new(), Vec::new());
    for (t, &b) in active.iter().enumerate() {
        let a = dense_adjacency(nu, ni, &graphs[b]);
        let (cu, ci) = dense_propagate(&a, &in_u, &in_i, cfg.layers[b]);
        if t + 1 < active.len() {
            let (mut nu_blocks, mut ni_blocks) = (Vec::new(), Vec::new());
            let (src_u, src_i) = if cfg.variant == Variant::WPost { (&cu, &ci) } else { (&prev_u, &prev_i) };
            for f in 0..k {
                let (bu, bi) = (cols(&cu, f * w, (f + 1) * w), cols(&ci, f * w, (f + 1) * w));
                if matches!(cfg.variant, Variant::WoT | Variant::WoAT) {
                    nu_blocks.push(shared_apply(params, &format!("shared.{t}.{f}.user"), &bu));
                    ni_blocks.push(shared_apply(params, &format!("shared.{t}.{f}.item"), &bi));
                } else {
                    let agg_u = mm(&a, &cols(src_i, f * w, (f + 1) * w));
                    let agg_i = mm(&transpose(&a), &cols(src_u, f * w, (f + 1) * w));
                    nu_blocks.push(meta_apply(params, &format!("meta.{t}.{f}.user"), &bu, &agg_u, &bu));
                    ni_blocks.push(meta_apply(params, &format!("meta.{t}.{f}.item"), &bi, &agg_i, &bi));
                }
            }
            in_u = join(&nu_blocks);
            in_i = join(&ni_blocks);
        }
        prev_u = cu.clone();
        prev_i = ci.clone();
        users.push(cu);
        items.push(ci);
    }
    (users, items)
}

/// Attention weights `[b][k]` of one pair from explicit sums.
pub fn attention_reference(params: &ParamStore, cfg: &ModelConfig, users: &[M], items: &[M], u: usize, i: usize) -> Vec<Vec<f64>> {
    let k = cfg.factors;
    let w = cfg.dim / k;
    let uses_attention = !matches!(cfg.variant, Variant::WoA | Variant::WoAT);
    (0..users.len())
        .map(|b| {
            if !uses_attention {
                return vec![cfg.rho / k as f64; k];
            }
            let (wm, bias, h) = (
                p(params, &format!("attention.{b}.w")),
                p(params, &format!("attention.{b}.bias")),
                p(params, &format!("attention.{b}.h")),
            );
            let logits: Vec<f64> = (0..k)
                .map(|f| {
                    let x: Vec<f64> = users[b][u][f * w..(f + 1) * w]
                        .iter()
                        .chain(&items[b][i][f * w..(f + 1) * w])
                        .copied()
                        .collect();
                    (0..cfg.dim)
                        .map(|j| {
                            let pre = bias[0][j] + x.iter().enumerate().map(|(r, v)| v * wm[r][j]).sum::<f64>();
                            h[j][0] * pre.tanh()
                        })
                        .sum()
                })
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            logits.iter().map(|l| cfg.rho * l.exp() / z).collect()
        })
        .collect()
}

/// Fully expanded preference score.
pub fn score_reference(params: &ParamStore, cfg: &ModelConfig, users: &[M], items: &[M], u: usize, i: usize) -> f64 {
    let a = attention_reference(params, cfg, users, items, u, i);
    let w = cfg.dim / cfg.factors;
    let mut total = 0.0;
    for f in 0..cfg.factors {
        for j in f * w..(f + 1) * w {
            let user: f64 = (0..users.len()).map(|b| a[b][f] * users[b][u][j]).sum();
            let item: f64 = (0..items.len()).map(|b| items[b][i][j]).sum();
            total += user * item;
        }
    }
    total
}

fn distinct(ids: impl IntoIterator<Item = usize>) -> Vec<usize> {
    let mut out = Vec::new();
    for i in ids {
        if !out.contains(&i) {
            out.push(i);
        }
    }
    out
}

fn block_dcor_sum(m: &M, rows_: &[usize], k: usize) -> f64 {
    if k == 1 || rows_.len() < 2 {
        return 0.0;
    }
    let w = m[0].len() / k;
    let sub: M = rows_.iter().map(|&r| m[r].clone()).collect();
    let mut s = 0.0;
    for a in 0..k {
        for b in (a + 1)..k {
            s += dcor_reference(&cols(&sub, a * w, (a + 1) * w), &cols(&sub, b * w, (b + 1) * w));
        }
    }
    s
}

/// `(ranking loss with L2, independence penalty)` for one batch of
/// `(user, positive, negative)` triples.
pub fn loss_reference(
    params: &ParamStore,
    cfg: &ModelConfig,
    nu: usize,
    ni: usize,
    graphs: &[Vec<(usize, usize)>],
    batch: &[(usize, usize, usize)],
    l2: f64,
) -> (f64, f64) {
    let (users, items) = cascade_reference(params, cfg, nu, ni, graphs);
    let mut rec = 0.0;
    for &(u, i, j) in batch {
        let x = score_reference(params, cfg, &users, &items, u, i) - score_reference(params, cfg, &users, &items, u, j);
        rec += (1.0 + (-x).exp()).ln();
    }
    rec += l2 * params.iter().map(|(_, m)| m.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>();
    let urows = distinct(batch.iter().map(|b| b.0));
    let irows = distinct(batch.iter().map(|b| b.1).chain(batch.iter().map(|b| b.2)));
    let k = cfg.factors;
    let indep = block_dcor_sum(&p(params, "embedding.user"), &urows, k)
        + block_dcor_sum(&users[0], &urows, k)
        + block_dcor_sum(&p(params, "embedding.item"), &irows, k)
        + block_dcor_sum(&items[0], &irows, k);
    (rec, indep)
}

/// Dataset from `(user, item, behavior, timestamp)` tuples.
pub fn dataset(chain: &[&str], recs: &[(usize, usize, &str, u64)]) -> InteractionDataset {
    let chain: Vec<String> = chain.iter().map(|s| s.to_string()).collect();
    let raw = recs
        .iter()
        .map(|&(u, i, b, t)| RawInteraction::new(&format!("u{u}"), &format!("i{i}"), b, t));
    ingest(raw, &chain).unwrap()
}

/// Four users and four items with two behaviors; every user has three
/// purchases so a validation item exists.
pub fn toy_4x4() -> InteractionDataset {
    let mut recs = Vec::new();
    for u in 0..4usize {
        for j in 0..3usize {
            recs.push((u, (u + j) % 4, "view", j as u64));
        }
        recs.push((u, (u + 3) % 4, "view", 3));
        for j in 0..3usize {
            recs.push((u, (u + j) % 4, "buy", 10 + j as u64));
        }
    }
    dataset(&["view", "buy"], &recs).split_leave_one_out()
}

use disen_cgcn::graph::build_graphs;
use disen_cgcn::model::Model;
use disen_cgcn::tensor::Tape;
use disen_cgcn::trainer::{batch_loss, TrainingConfig, TrainingSample};

/// Total loss of one batch evaluated on a fresh tape.
pub fn total_loss_value(model: &Model, ds: &InteractionDataset, params: &ParamStore, batch: &[TrainingSample], cfg: &TrainingConfig) -> f64 {
    let graphs = build_graphs(ds).unwrap();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = model.forward(&mut tape, &bound, &graphs).unwrap();
    let terms = batch_loss(model, &mut tape, &bound, &out, batch, cfg).unwrap();
    tape.value(terms.total).item()
}

pub struct GradCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Autodiff gradient of the batch objective against central differences
/// for every scalar parameter.
pub fn grad_check(model: &Model, ds: &InteractionDataset, params: &ParamStore, batch: &[TrainingSample], cfg: &TrainingConfig, h: f64) -> Vec<GradCheck> {
    let graphs = build_graphs(ds).unwrap();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = model.forward(&mut tape, &bound, &graphs).unwrap();
    let terms = batch_loss(model, &mut tape, &bound, &out, batch, cfg).unwrap();
    tape.backward(terms.total).unwrap();
    let grads = bound.gradients(&tape);
    let mut checks = Vec::new();
    for (t, name) in params.names().iter().enumerate() {
        for idx in 0..params.get(name).unwrap().len() {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[idx] += h;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[idx] -= h;
            let numeric = (total_loss_value(model, ds, &plus, batch, cfg) - total_loss_value(model, ds, &minus, batch, cfg)) / (2.0 * h);
            let analytic = grads[t].data()[idx];
            let rel_err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            checks.push(GradCheck { name: name.clone(), index: idx, analytic, numeric, rel_err });
        }
    }
    checks
}
