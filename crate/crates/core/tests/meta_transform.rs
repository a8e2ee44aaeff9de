mod common;

use common::*;
use disen_cgcn::disentangle::split;
use disen_cgcn::graph::BehaviorGraph;
use disen_cgcn::meta::{generate_transform, meta_knowledge, personalized_transform, post_conv_meta_knowledge, MetaNetwork};
use disen_cgcn::tensor::{Matrix, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn meta_network_matches_loop_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (n, m) = (5, 3);
    let know = random(&mut rng, n, 2 * m);
    let e = random(&mut rng, n, m);
    let (w1, b1, w2, b2) = (random(&mut rng, 2 * m, m), random(&mut rng, 1, m), random(&mut rng, m, m * m), random(&mut rng, 1, m * m));
    let mut t = Tape::new();
    let net = MetaNetwork {
        w1: t.constant(w1.clone()),
        b1: t.constant(b1.clone()),
        w2: t.constant(w2.clone()),
        b2: t.constant(b2.clone()),
    };
    let kv = t.constant(know.clone());
    let ev = t.constant(e.clone());
    let mats = generate_transform(&mut t, kv, &net).unwrap();
    let out = personalized_transform(&mut t, ev, mats).unwrap();
    for r in 0..n {
        let hidden: Vec<f64> = (0..m)
            .map(|h| (b1[(0, h)] + (0..2 * m).map(|c| know[(r, c)] * w1[(c, h)]).sum::<f64>()).max(0.0))
            .collect();
        for a in 0..m {
            let mut y = 0.0;
            for c in 0..m {
                let entry = b2[(0, a * m + c)] + (0..m).map(|h| hidden[h] * w2[(h, a * m + c)]).sum::<f64>();
                y += entry * e[(r, c)];
            }
            assert!((t.value(out)[(r, a)] - y).abs() < 1e-12);
        }
    }
}

#[test]
fn neighbor_part_is_normalized_aggregate() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let pairs = [(0, 0), (0, 1), (1, 1), (2, 2), (3, 0)];
    let g = BehaviorGraph::from_pairs(4, 3, &pairs).unwrap();
    let (cu, ci, pu, pi) = (random(&mut rng, 4, 4), random(&mut rng, 3, 4), random(&mut rng, 4, 4), random(&mut rng, 3, 4));
    let mut t = Tape::new();
    let vars: Vec<_> = [&cu, &ci, &pu, &pi].iter().map(|m| t.constant((*m).clone())).collect();
    let f: Vec<_> = vars.iter().map(|&v| split(&mut t, v, 2).unwrap()).collect();
    let mk = meta_knowledge(&mut t, &g, &f[0], &f[1], &f[2], &f[3]).unwrap();
    let a = dense_adjacency(4, 3, &pairs);
    for k in 0..2 {
        let agg_u = mm(&a, &cols(&rows(&pi), 2 * k, 2 * k + 2));
        let agg_i = mm(&transpose(&a), &cols(&rows(&pu), 2 * k, 2 * k + 2));
        let want_u: M = cols(&rows(&cu), 2 * k, 2 * k + 2).into_iter().zip(agg_u).map(|(mut a, b)| { a.extend(b); a }).collect();
        let want_i: M = cols(&rows(&ci), 2 * k, 2 * k + 2).into_iter().zip(agg_i).map(|(mut a, b)| { a.extend(b); a }).collect();
        assert!(t.value(mk.users[k]).max_abs_diff(&matrix(&want_u)) < 1e-12);
        assert!(t.value(mk.items[k]).max_abs_diff(&matrix(&want_i)) < 1e-12);
    }
    let post = post_conv_meta_knowledge(&mut t, &g, &f[0], &f[1]).unwrap();
    let agg = mm(&a, &cols(&rows(&ci), 0, 2));
    assert!(t.value(post.users[0]).slice_cols(2, 4).max_abs_diff(&matrix(&agg)) < 1e-12);
}

#[test]
fn transforms_stay_within_their_block() {
    // Perturbing block 1 of the inputs leaves block 0 of the meta-knowledge
    // (and so its transform) untouched.
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let g = BehaviorGraph::from_pairs(3, 3, &[(0, 0), (1, 1), (2, 2), (0, 2)]).unwrap();
    let (eu, ei) = (random(&mut rng, 3, 4), random(&mut rng, 3, 4));
    let mut eu2 = eu.clone();
    let mut ei2 = ei.clone();
    for r in 0..3 {
        eu2.row_mut(r)[2] += 1.0;
        ei2.row_mut(r)[3] -= 2.0;
    }
    let block0 = |u: &Matrix, i: &Matrix| {
        let mut t = Tape::new();
        let (uv, iv) = (t.constant(u.clone()), t.constant(i.clone()));
        let (fu, fi) = (split(&mut t, uv, 2).unwrap(), split(&mut t, iv, 2).unwrap());
        let mk = meta_knowledge(&mut t, &g, &fu, &fi, &fu, &fi).unwrap();
        (t.value(mk.users[0]).clone(), t.value(mk.items[0]).clone(), t.value(mk.users[1]).clone())
    };
    let (a, b, c) = block0(&eu, &ei);
    let (a2, b2, c2) = block0(&eu2, &ei2);
    assert_eq!(a, a2);
    assert_eq!(b, b2);
    assert_ne!(c, c2);
}
