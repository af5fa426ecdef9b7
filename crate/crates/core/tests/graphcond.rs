mod common;

use common::oracles::*;
use common::random_graph;
use gcdlab::autodiff::{finite_diff_check, Tape, Tensor};
use gcdlab::embed::{FeatureConfig, NodeFeatures};
use gcdlab::graphcond::{masked_attention, AttentionMode, GraphBatch, GraphEncoderConfig};
use gcdlab::maskgraph::TissueGraph;
use gcdlab::rng;
use rand::Rng as _;

#[test]
fn two_node_softmax_matches_hand_values() {
    let q = Tensor::matrix(2, 2, vec![2.0, 1.0, 1.0, 2.0]).unwrap();
    let k = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let (w, _, _) = masked_attention(&q, &k, &k, &Tensor::filled(2, 2, 1.0), AttentionMode::Additive).unwrap();
    let s = 2f64.sqrt();
    let (hi, lo) = ((2.0 / s).exp(), (1.0 / s).exp());
    let want = [hi / (hi + lo), lo / (hi + lo), lo / (hi + lo), hi / (hi + lo)];
    for (a, b) in w.data().iter().zip(want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn additive_mode_zeroes_non_adjacent_keys() {
    let mut r = rng::rng(4);
    for n in 1..=16 {
        let q = Tensor::randn(n, 8, 2.0, &mut r);
        let k = Tensor::randn(n, 8, 2.0, &mut r);
        let a: Vec<f64> = (0..n * n).map(|_| if r.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
        let a = Tensor::matrix(n, n, a).unwrap();
        let (w, out, diag) = masked_attention(&q, &k, &k, &a, AttentionMode::Additive).unwrap();
        for i in 0..n {
            let admissible = a.row(i).iter().any(|&x| x != 0.0);
            assert_eq!(diag.empty_rows.contains(&i), !admissible);
            let total: f64 = w.row(i).iter().sum();
            assert!((total - if admissible { 1.0 } else { 0.0 }).abs() < 1e-12);
            for j in 0..n {
                if a.get(i, j) == 0.0 {
                    assert_eq!(w.get(i, j), 0.0);
                }
            }
        }
        assert!(out.is_finite());
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n;
    x.iter().enumerate().map(|(i, a)| (a - m) / (v + 1e-10).sqrt() * g[i] + b[i]).collect()
}

fn vec_mat(x: &[f64], w: &Tensor) -> Vec<f64> {
    (0..w.cols()).map(|c| x.iter().enumerate().map(|(r, v)| v * w.get(r, c)).sum()).collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

#[test]
fn single_node_token_matches_hand_trace() {
    let cfg = GraphEncoderConfig { f_dim: 5, d_model: 4, d_k: 4, layers: 1, ff_hidden: 4, mode: AttentionMode::Additive };
    let (enc, store) = encoder(cfg, 10);
    let x = vec![0.3, -1.2, 0.5, 2.0, -0.7];
    let feats = NodeFeatures { n_max: 1, f_dim: 5, data: x.clone(), valid: vec![true] };
    let got = enc.encode(&store, &feats, &[0.0]).unwrap();

    let p = |name: &str| store.get(store.id(name).unwrap()).clone();
    let h = add(&vec_mat(&x, &p("g.in.w")), p("g.in.b").data());
    // self-loop only: the attention weight is exactly 1
    let att = vec_mat(&vec_mat(&h, &p("g.l0.wv")), &p("g.l0.wo"));
    let h = layer_norm(&add(&h, &att), p("g.l0.ln1.g").data(), p("g.l0.ln1.b").data());
    let f: Vec<f64> = add(&vec_mat(&h, &p("g.l0.ff1.w")), p("g.l0.ff1.b").data()).into_iter().map(silu).collect();
    let f = add(&vec_mat(&f, &p("g.l0.ff2.w")), p("g.l0.ff2.b").data());
    let want = layer_norm(&add(&h, &f), p("g.l0.ln2.g").data(), p("g.l0.ln2.b").data());
    for (a, b) in got.row(0).iter().zip(&want) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn encoder_is_permutation_equivariant() {
    let fc = FeatureConfig::default();
    for mode in [AttentionMode::Additive, AttentionMode::Literal] {
        let (enc, store) = encoder(GraphEncoderConfig { mode, ..Default::default() }, 20);
        let mut r = rng::rng(21);
        for _ in 0..30 {
            let n = r.random_range(1..=16);
            let g = random_graph(&mut r, n, 16, 0.3);
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, r.random_range(0..=i));
            }
            let a = tokens(&enc, &store, &g, &fc);
            let b = tokens(&enc, &store, &permuted(&g, &perm), &fc);
            for k in 0..n {
                for (x, y) in b[k].iter().zip(&a[perm[k]]) {
                    assert!((x - y).abs() < 1e-9);
                }
            }
            for row in &a[n..] {
                assert!(row.iter().all(|&v| v == 0.0));
            }
        }
    }
}

#[test]
fn single_layer_does_not_leak_from_non_neighbors() {
    let fc = FeatureConfig::default();
    let (enc, store) = encoder(GraphEncoderConfig { layers: 1, ..Default::default() }, 30);
    let mut r = rng::rng(31);
    let mut checked = 0;
    for _ in 0..40 {
        let n = r.random_range(2..=16);
        let g = random_graph(&mut r, n, 16, 0.25);
        let base = tokens(&enc, &store, &g, &fc);
        for j in 0..n {
            let mut h = g.clone();
            let node = &mut h.nodes_mut()[j];
            node.class = r.random_range(1..=3);
            node.com = [r.random_range(0.0..31.0), r.random_range(0.0..31.0)];
            for v in node.embedding.iter_mut() {
                *v = r.random_range(-5.0..5.0);
            }
            let moved = tokens(&enc, &store, &h, &fc);
            for i in 0..n {
                if i != j && !g.has_edge(i, j) {
                    for (x, y) in moved[i].iter().zip(&base[i]) {
                        assert!((x - y).abs() < 1e-9);
                    }
                    checked += 1;
                }
            }
        }
    }
    assert!(checked > 100);
}

#[test]
fn isolated_nodes_give_finite_tokens() {
    let fc = FeatureConfig::default();
    let (enc, store) = encoder(GraphEncoderConfig::default(), 40);
    let g = random_graph(&mut rng::rng(41), 16, 16, 0.0);
    let t = tokens(&enc, &store, &g, &fc);
    assert!(t.iter().flatten().all(|v| v.is_finite()));
}

#[test]
fn batched_encoding_matches_one_at_a_time() {
    let fc = FeatureConfig::default();
    for mode in [AttentionMode::Additive, AttentionMode::Literal] {
        let (enc, store) = encoder(GraphEncoderConfig { mode, ..Default::default() }, 50);
        let mut r = rng::rng(51);
        let graphs: Vec<TissueGraph> = (0..5).map(|_| {
            let n = r.random_range(0..=16);
            random_graph(&mut r, n, 16, 0.3)
        }).collect();
        let refs: Vec<Option<&TissueGraph>> = vec![Some(&graphs[0]), None, Some(&graphs[1]), Some(&graphs[2]), Some(&graphs[3]), Some(&graphs[4])];
        let batch = GraphBatch::from_graphs(&refs, &fc).unwrap();
        let mut tape = Tape::new();
        let out = enc.forward(&mut tape, &store, &batch).unwrap();
        let out = tape.value(out);
        for (b, g) in refs.iter().enumerate() {
            for i in 0..16 {
                let row = out.row(b * 16 + i);
                match g {
                    Some(g) => {
                        let single = tokens(&enc, &store, g, &fc);
                        for (x, y) in row.iter().zip(&single[i]) {
                            assert!((x - y).abs() < 1e-12);
                        }
                    }
                    None => assert!(row.iter().all(|&v| v == 0.0)),
                }
            }
        }
    }
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let cfg = GraphEncoderConfig { f_dim: 5, d_model: 4, d_k: 3, layers: 2, ff_hidden: 6, mode: AttentionMode::Additive };
    let (enc, store) = encoder(cfg, 60);
    let mut r = rng::rng(61);
    let data: Vec<f64> = (0..4 * 5).map(|_| r.random_range(-1.0..1.0)).collect();
    let feats = NodeFeatures { n_max: 4, f_dim: 5, data, valid: vec![true, true, true, false] };
    let adj = [0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
    let batch = GraphBatch::from_parts(&[Some((&feats, &adj[..]))], 4, 5).unwrap();
    let mut tape = Tape::new();
    let out = enc.forward(&mut tape, &store, &batch).unwrap();
    let target = tape.input(Tensor::randn(4, 4, 1.0, &mut r)).unwrap();
    let prod = tape.mul(out, target).unwrap();
    let loss = tape.sum(prod).unwrap();
    let err = finite_diff_check(&mut tape, &[], loss, 1e-5).unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn feature_width_mismatch_is_rejected() {
    let (enc, store) = encoder(GraphEncoderConfig::default(), 70);
    let feats = NodeFeatures { n_max: 2, f_dim: 7, data: vec![0.0; 14], valid: vec![true, false] };
    assert!(enc.encode(&store, &feats, &[0.0]).is_err());
}
