#![allow(dead_code)]

pub mod geometry;
pub mod oracles;

use std::rc::Rc;

use gcdlab::autodiff::{ParamStore, Tape, Tensor, Var, GATHER_ZERO};
use rand::Rng as _;

/// Random smooth computation graph over at most `max_params` parameters.
///
/// Returns the tape, its loss node and the parameter count. Only smooth
/// primitives are used so central differences are accurate.
pub fn random_tape(seed: u64, max_params: usize) -> (Tape, Var, usize) {
    let mut rng = gcdlab::rng::rng(seed);
    let rows = rng.random_range(2..5);
    let d_in = rng.random_range(2..6);
    let hidden = rng.random_range(2..8);
    let mut store = ParamStore::new();
    let (w1, b1) = store.add_linear("l1", d_in, hidden, &mut rng);
    let (w2, b2) = store.add_linear("l2", hidden, hidden, &mut rng);
    for id in [b1, b2] {
        *store.get_mut(id) = Tensor::randn(1, hidden, 0.3, &mut rng);
    }
    let gain = store.add("gain", Tensor::randn(1, hidden, 1.0, &mut rng));
    let s = store.add("s", Tensor::scalar(rng.random_range(0.5..1.5)));
    assert!(store.num_scalars() <= max_params);

    let mut t = Tape::new();
    let x = t.input(Tensor::randn(rows, d_in, 1.0, &mut rng)).unwrap();
    let w1 = t.param(&store, w1).unwrap();
    let b1 = t.param(&store, b1).unwrap();
    let w2 = t.param(&store, w2).unwrap();
    let b2 = t.param(&store, b2).unwrap();
    let gain = t.param(&store, gain).unwrap();
    let s = t.param(&store, s).unwrap();

    let mut h = t.linear(x, w1, b1).unwrap();
    let n_ops = rng.random_range(3..8);
    for _ in 0..n_ops {
        h = match rng.random_range(0..10) {
            0 => t.tanh(h).unwrap(),
            1 => t.silu(h).unwrap(),
            2 => t.act(h, gcdlab::autodiff::Activation::Sigmoid).unwrap(),
            3 => {
                let ln = t.layer_norm(h).unwrap();
                t.mul_row(ln, gain).unwrap()
            }
            4 => t.softmax(h).unwrap(),
            5 => {
                let mut m = Tensor::zeros(rows, hidden);
                for r in 0..rows {
                    for c in 0..hidden {
                        if c == r % hidden || rng.random_bool(0.6) {
                            m.data_mut()[r * hidden + c] = 1.0;
                        }
                    }
                }
                let m = t.input(m).unwrap();
                t.masked_softmax(h, m).unwrap()
            }
            6 => {
                let z = t.linear(h, w2, b2).unwrap();
                t.tanh(z).unwrap()
            }
            7 => {
                let sc = t.matmul_nt(h, h).unwrap();
                let att = t.softmax(sc).unwrap();
                t.matmul(att, h).unwrap()
            }
            8 => {
                let a = t.slice_cols(h, 0, hidden / 2 + 1).unwrap();
                let b = t.slice_cols(h, hidden / 2 + 1, hidden - hidden / 2 - 1).unwrap();
                let bs = t.scale_by(b, s).unwrap();
                let c = t.concat_cols(&[bs, a]).unwrap();
                let n = rows * hidden;
                let idx: Vec<usize> = (0..n)
                    .map(|i| if i % 7 == 3 { GATHER_ZERO } else { (i * 5 + 1) % n })
                    .collect();
                t.gather(c, Rc::from(idx), rows, hidden).unwrap()
            }
            _ => {
                let q = t.mul(h, h).unwrap();
                let q = t.scale(q, 0.5).unwrap();
                t.add(q, h).unwrap()
            }
        };
    }
    let weights = t.input(Tensor::randn(rows, hidden, 1.0, &mut rng)).unwrap();
    let wsum = t.mul(h, weights).unwrap();
    let lin = t.sum(wsum).unwrap();
    let sq = t.mse(h, weights).unwrap();
    let loss = t.add(lin, sq).unwrap();
    (t, loss, store.num_scalars())
}

/// Random graph with `n` nodes, classes in 1..=3, COMs inside 32x32,
/// `embed_dim`-wide descriptors and edge probability `p`.
pub fn random_graph(rng: &mut gcdlab::rng::Rng, n: usize, embed_dim: usize, p: f64) -> gcdlab::maskgraph::TissueGraph {
    use gcdlab::maskgraph::{Node, TissueGraph};
    let nodes = (0..n)
        .map(|_| Node {
            class: rng.random_range(1..=3),
            com: [rng.random_range(0.0..31.0), rng.random_range(0.0..31.0)],
            embedding: (0..embed_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            source: None,
        })
        .collect();
    let mut g = TissueGraph::new(nodes);
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(p) {
                g.set_edge(i, j, true);
            }
        }
    }
    g
}
