//! Attention outputs against naive loop implementations.

use cat_core::attention::{multi_head_attention, scaled_dot_product_attention, MultiHeadParams};
use cat_core::numerics::{seeded_rng, Graph, ParamStore, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;

type Mat = Vec<Vec<f64>>;

fn to_mat(t: &Tensor) -> Mat {
    let c = t.shape()[1];
    t.data().chunks(c).map(|r| r.to_vec()).collect()
}

fn naive_matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i][p] * b[p][j];
            }
            out[i][j] = s;
        }
    }
    out
}

fn naive_attention(q: &Mat, k: &Mat, v: &Mat) -> Mat {
    let dk = q[0].len() as f64;
    q.iter()
        .map(|qi| {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / dk.sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            (0..v[0].len())
                .map(|c| e.iter().zip(v).map(|(w, vj)| w / z * vj[c]).sum())
                .collect()
        })
        .collect()
}

fn cols(m: &Mat, lo: usize, hi: usize) -> Mat {
    m.iter().map(|r| r[lo..hi].to_vec()).collect()
}

fn max_diff(a: &Tensor, b: &Mat) -> f64 {
    to_mat(a)
        .iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn rand(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.5, 1.5, &mut seeded_rng(seed))
}

#[test]
fn sdpa_matches_loops() {
    for (seed, (n, m, dk, dv)) in [(3, 5, 4, 2), (1, 1, 3, 3), (7, 11, 8, 5)].into_iter().enumerate() {
        let s = seed as u64 * 3;
        let (q, k, v) = (rand(&[n, dk], s), rand(&[m, dk], s + 1), rand(&[m, dv], s + 2));
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let (out, _) = scaled_dot_product_attention(&mut g, qv, kv, vv).unwrap();
        let expect = naive_attention(&to_mat(&q), &to_mat(&k), &to_mat(&v));
        assert!(max_diff(g.value(out), &expect) <= 1e-10);
    }
}

#[test]
fn multi_head_matches_per_head_loops() {
    let (d, heads) = (12, 3);
    let mut store = ParamStore::new();
    let p = MultiHeadParams::register(&mut store, "mha", d, heads, false, &mut seeded_rng(40)).unwrap();
    let (x, ctx) = (rand(&[5, d], 41), rand(&[7, d], 42));
    let mut g = Graph::with_params(&store);
    let (xv, cv) = (g.constant(x.clone()), g.constant(ctx.clone()));
    let out = multi_head_attention(&mut g, xv, cv, cv, &p).unwrap();

    let w = |id| to_mat(store.get(id));
    let q = naive_matmul(&to_mat(&x), &w(p.w_q));
    let k = naive_matmul(&to_mat(&ctx), &w(p.w_k));
    let v = naive_matmul(&to_mat(&ctx), &w(p.w_v));
    let hd = d / heads;
    let mut concat = vec![Vec::new(); 5];
    for h in 0..heads {
        let o = naive_attention(
            &cols(&q, h * hd, (h + 1) * hd),
            &cols(&k, h * hd, (h + 1) * hd),
            &cols(&v, h * hd, (h + 1) * hd),
        );
        for (row, part) in concat.iter_mut().zip(o) {
            row.extend(part);
        }
    }
    let expect = naive_matmul(&concat, &w(p.w_o));
    assert!(max_diff(g.value(out), &expect) <= 1e-10);
}

#[test]
fn single_head_identity_projections_reduce_to_sdpa() {
    for (seed, (d, n, m)) in [(1, 3, 4), (4, 1, 8), (8, 8, 8)].into_iter().enumerate() {
        let s = 70 + 3 * seed as u64;
        let mut store = ParamStore::new();
        let p = MultiHeadParams::register(&mut store, "mha", d, 1, false, &mut seeded_rng(s)).unwrap();
        let eye = Tensor::eye(d);
        for id in [p.w_q, p.w_k, p.w_v, p.w_o] {
            *store.get_mut(id) = eye.clone();
        }
        let (x, k, v) = (rand(&[n, d], s), rand(&[m, d], s + 1), rand(&[m, d], s + 2));
        let mut g = Graph::with_params(&store);
        let (xv, kv, vv) = (g.constant(x), g.constant(k), g.constant(v));
        let mha = multi_head_attention(&mut g, xv, kv, vv, &p).unwrap();
        let (sdpa, _) = scaled_dot_product_attention(&mut g, xv, kv, vv).unwrap();
        assert!(g.value(mha).max_abs_diff(g.value(sdpa)) <= 1e-10);
    }
}

#[test]
fn attention_weights_are_row_stochastic() {
    let mut g = Graph::new();
    let q = g.constant(rand(&[4, 6], 50));
    let k = g.constant(rand(&[9, 6], 51));
    let (_, w) = scaled_dot_product_attention(&mut g, q, k, k).unwrap();
    for row in to_mat(g.value(w)) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&p| p > 0.0));
    }
}

#[test]
fn twenty_key_value_permutations() {
    let mut store = ParamStore::new();
    let p = MultiHeadParams::register(&mut store, "mha", 8, 2, true, &mut seeded_rng(60)).unwrap();
    let x = rand(&[6, 8], 61);
    let ctx = rand(&[10, 8], 62);
    let run = |ctx: &Tensor| {
        let mut g = Graph::with_params(&store);
        let (xv, cv) = (g.constant(x.clone()), g.constant(ctx.clone()));
        let out = multi_head_attention(&mut g, xv, cv, cv, &p).unwrap();
        g.value(out).clone()
    };
    let base = run(&ctx);
    let rows = to_mat(&ctx);
    let mut rng = seeded_rng(63);
    for _ in 0..20 {
        let mut perm: Vec<usize> = (0..rows.len()).collect();
        perm.shuffle(&mut rng);
        let shuffled: Mat = perm.iter().map(|&i| rows[i].clone()).collect();
        let t = Tensor::from_rows(&shuffled).unwrap();
        assert!(run(&t).max_abs_diff(&base) <= 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn sdpa_output_lies_in_value_hull(seed in 0u64..10_000, n in 1usize..5, m in 1usize..6) {
        let (q, k, v) = (rand(&[n, 3], seed), rand(&[m, 3], seed + 1), rand(&[m, 2], seed + 2));
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(q), g.constant(k), g.constant(v.clone()));
        let (out, _) = scaled_dot_product_attention(&mut g, qv, kv, vv).unwrap();
        let vm = to_mat(&v);
        for row in to_mat(g.value(out)) {
            for (c, x) in row.iter().enumerate() {
                let lo = vm.iter().map(|r| r[c]).fold(f64::INFINITY, f64::min);
                let hi = vm.iter().map(|r| r[c]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(*x >= lo - 1e-12 && *x <= hi + 1e-12);
            }
        }
    }
}
