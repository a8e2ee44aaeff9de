mod common;

use common::*;
use disen_cgcn::encoder::{combine, propagate};
use disen_cgcn::graph::BehaviorGraph;
use disen_cgcn::tensor::{Matrix, Tape};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_pairs(rng: &mut ChaCha8Rng, nu: usize, ni: usize, p: f64) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for u in 0..nu {
        for i in 0..ni {
            if rng.gen_bool(p) {
                pairs.push((u, i));
            }
        }
    }
    pairs
}

fn run(g: &BehaviorGraph, eu: &Matrix, ei: &Matrix, layers: usize) -> (Matrix, Matrix) {
    let mut t = Tape::new();
    let (u, i) = (t.constant(eu.clone()), t.constant(ei.clone()));
    let stack = propagate(&mut t, g, u, i, layers).unwrap();
    let (cu, ci) = combine(&mut t, &stack).unwrap();
    (t.value(cu).clone(), t.value(ci).clone())
}

#[test]
fn sparse_propagation_equals_dense_adjacency_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..20 {
        let nu = rng.gen_range(1..40);
        let ni = rng.gen_range(1..=64 - nu);
        let layers = rng.gen_range(0..=4);
        let pairs = random_pairs(&mut rng, nu, ni, 0.15);
        let g = BehaviorGraph::from_pairs(nu, ni, &pairs).unwrap();
        let (eu, ei) = (random(&mut rng, nu, 6), random(&mut rng, ni, 6));
        let (su, si) = run(&g, &eu, &ei, layers);
        let (du, di) = dense_propagate(&dense_adjacency(nu, ni, &pairs), &rows(&eu), &rows(&ei), layers);
        assert!(su.max_abs_diff(&matrix(&du)) <= 1e-12);
        assert!(si.max_abs_diff(&matrix(&di)) <= 1e-12);
    }
}

#[test]
fn zero_layers_return_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g = BehaviorGraph::from_pairs(3, 2, &[(0, 1), (2, 0)]).unwrap();
    let (eu, ei) = (random(&mut rng, 3, 4), random(&mut rng, 2, 4));
    let (su, si) = run(&g, &eu, &ei, 0);
    assert_eq!(su, eu);
    assert_eq!(si, ei);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn propagation_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, layers in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (nu, ni) = (rng.gen_range(1..10), rng.gen_range(1..10));
        let g = BehaviorGraph::from_pairs(nu, ni, &random_pairs(&mut rng, nu, ni, 0.4)).unwrap();
        let (x, y) = ((random(&mut rng, nu, 3), random(&mut rng, ni, 3)), (random(&mut rng, nu, 3), random(&mut rng, ni, 3)));
        let mix = |p: &Matrix, q: &Matrix| p.zip_map(q, |s, t| a * s + t);
        let (lu, li) = run(&g, &mix(&x.0, &y.0), &mix(&x.1, &y.1), layers);
        let (xu, xi) = run(&g, &x.0, &x.1, layers);
        let (yu, yi) = run(&g, &y.0, &y.1, layers);
        prop_assert!(lu.max_abs_diff(&mix(&xu, &yu)) < 1e-12);
        prop_assert!(li.max_abs_diff(&mix(&xi, &yi)) < 1e-12);
    }

    #[test]
    fn relabeling_users_permutes_output_rows(seed in 0u64..1000, layers in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (nu, ni) = (rng.gen_range(2..10), rng.gen_range(1..10));
        let pairs = random_pairs(&mut rng, nu, ni, 0.4);
        let mut perm: Vec<usize> = (0..nu).collect();
        for k in (1..nu).rev() {
            perm.swap(k, rng.gen_range(0..=k));
        }
        let moved: Vec<_> = pairs.iter().map(|&(u, i)| (perm[u], i)).collect();
        let (eu, ei) = (random(&mut rng, nu, 3), random(&mut rng, ni, 3));
        let mut peu = Matrix::zeros(nu, 3);
        for u in 0..nu {
            peu.row_mut(perm[u]).copy_from_slice(eu.row(u));
        }
        let (su, si) = run(&BehaviorGraph::from_pairs(nu, ni, &pairs).unwrap(), &eu, &ei, layers);
        let (pu, pi) = run(&BehaviorGraph::from_pairs(nu, ni, &moved).unwrap(), &peu, &ei, layers);
        for u in 0..nu {
            for (a, b) in su.row(u).iter().zip(pu.row(perm[u])) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
        prop_assert!(si.max_abs_diff(&pi) < 1e-12);
    }
}
