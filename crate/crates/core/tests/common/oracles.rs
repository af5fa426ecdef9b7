//! Independent reference implementations shared by the module tests and
//! the acceptance suite.

use std::collections::BTreeMap;

use gcdlab::autodiff::ParamStore;
use gcdlab::diffusion::{DenoiseRequest, Denoiser};
use gcdlab::embed::{node_features, FeatureConfig};
use gcdlab::graphcond::{GraphEncoder, GraphEncoderConfig};
use gcdlab::image::LabeledMask;
use gcdlab::maskgraph::TissueGraph;
use gcdlab::rng;
use nalgebra::{DMatrix, DVector};
use rand::Rng as _;

use super::random_graph;

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix (row-major).
pub fn jacobi(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|(i, j)| i != j).map(|(i, j)| a[i * n + j].powi(2)).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p * n + q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * a[p * n + q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i * n + i]).collect(), v)
}

pub fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            for j in 0..n {
                c[i * n + j] += a[i * n + k] * b[k * n + j];
            }
        }
    }
    c
}

pub fn sqrtm(a: &[f64], n: usize) -> Vec<f64> {
    let (vals, v) = jacobi(a.to_vec(), n);
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = (0..n).map(|k| v[i * n + k] * vals[k].max(0.0).sqrt() * v[j * n + k]).sum();
        }
    }
    out
}

/// Trace of sqrt(Σr Σg) computed through Σg^{1/2} Σr Σg^{1/2}.
pub fn fid_oracle(mr: &[f64], cr: &[f64], mg: &[f64], cg: &[f64], n: usize) -> f64 {
    let rg = sqrtm(cg, n);
    let inner = matmul(&matmul(&rg, cr, n), &rg, n);
    let sym: Vec<f64> = (0..n * n).map(|k| 0.5 * (inner[k] + inner[(k % n) * n + k / n])).collect();
    let (vals, _) = jacobi(sym, n);
    let tr: f64 = vals.iter().map(|v| v.max(0.0).sqrt()).sum();
    let dmu: f64 = mr.iter().zip(mg).map(|(a, b)| (a - b).powi(2)).sum();
    dmu + (0..n).map(|i| cr[i * n + i] + cg[i * n + i]).sum::<f64>() - 2.0 * tr
}

pub fn random_gaussian(r: &mut rng::Rng, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mu: Vec<f64> = (0..d).map(|_| r.random_range(-2.0..2.0)).collect();
    let a: Vec<f64> = (0..d * d).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut c = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            c[i * d + j] = (0..d).map(|k| a[i * d + k] * a[j * d + k]).sum();
        }
    }
    (mu, c)
}

pub fn as_na(mu: &[f64], c: &[f64], d: usize) -> (DVector<f64>, DMatrix<f64>) {
    (DVector::from_column_slice(mu), DMatrix::from_row_slice(d, d, c))
}

pub fn brute_pr(real: &[Vec<f64>], gen: &[Vec<f64>], k: usize) -> (f64, f64) {
    let d2 = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum() };
    let inside = |support: &[Vec<f64>], q: &[f64]| {
        support.iter().enumerate().any(|(i, s)| {
            let mut ds: Vec<f64> = support.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, o)| d2(s, o)).collect();
            ds.sort_by(f64::total_cmp);
            d2(s, q) <= ds[k - 1]
        })
    };
    let p = gen.iter().filter(|g| inside(real, g)).count() as f64 / gen.len() as f64;
    let rc = real.iter().filter(|x| inside(gen, x)).count() as f64 / real.len() as f64;
    (p, rc)
}

pub fn cloud(r: &mut rng::Rng, n: usize, d: usize, shift: f64) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| r.random_range(0.0..1.0) + shift).collect()).collect()
}

pub fn inst(ids: &[u32], classes: &[(u32, u8)], w: usize) -> LabeledMask {
    LabeledMask::new(ids.len() / w, w, ids.to_vec(), classes.iter().copied().collect()).unwrap()
}

pub fn random_mask(r: &mut rng::Rng, h: usize, w: usize) -> LabeledMask {
    let k = r.random_range(0..5u32);
    let ids: Vec<u32> = (0..h * w).map(|_| if r.random_bool(0.4) { 0 } else { r.random_range(0..=k) }).collect();
    let classes: BTreeMap<u32, u8> = (1..=k).map(|i| (i, r.random_range(1..=3))).collect();
    let present: BTreeMap<u32, u8> = classes.into_iter().filter(|(i, _)| ids.contains(i)).collect();
    LabeledMask::new(h, w, ids, present).unwrap()
}

/// AJI straight from its definition, scanning pixels per instance pair.
pub fn brute_aji(pred: &LabeledMask, gt: &LabeledMask) -> f64 {
    let (p, g) = (pred.ids(), gt.ids());
    let px = |f: &dyn Fn(usize) -> bool| (0..p.len()).filter(|&i| f(i)).count();
    let mut used = vec![];
    let (mut num, mut den) = (0, 0);
    for gi in gt.instance_ids() {
        let mut best: Option<(f64, u32)> = None;
        for pj in pred.instance_ids() {
            let i = px(&|k| g[k] == gi && p[k] == pj);
            if i == 0 {
                continue;
            }
            let u = px(&|k| g[k] == gi || p[k] == pj);
            let iou = i as f64 / u as f64;
            if best.is_none_or(|(b, _)| iou > b) {
                best = Some((iou, pj));
            }
        }
        match best {
            Some((_, pj)) => {
                num += px(&|k| g[k] == gi && p[k] == pj);
                den += px(&|k| g[k] == gi || p[k] == pj);
                used.push(pj);
            }
            None => den += px(&|k| g[k] == gi),
        }
    }
    for pj in pred.instance_ids() {
        if !used.contains(&pj) {
            den += px(&|k| p[k] == pj);
        }
    }
    if den == 0 {
        100.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

pub fn count_components(g: &TissueGraph) -> usize {
    // union-find, independent of the DFS in the library
    let mut parent: Vec<usize> = (0..g.len()).collect();
    fn find(p: &mut Vec<usize>, x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        p[x] = r;
        r
    }
    for (i, j) in g.edges() {
        let (a, b) = (find(&mut parent, i), find(&mut parent, j));
        parent[a] = b;
    }
    (0..g.len()).filter(|&i| find(&mut parent, i) == i).count()
}

pub fn brute_bridges(g: &TissueGraph) -> Vec<(usize, usize)> {
    let base = count_components(g);
    g.edges()
        .into_iter()
        .filter(|&(i, j)| {
            let mut h = g.clone();
            h.set_edge(i, j, false);
            count_components(&h) > base
        })
        .collect()
}

pub fn ensemble(seed: u64) -> TissueGraph {
    let mut r = rng::rng(seed);
    let n = r.random_range(0..=12);
    let p = r.random_range(0.05..0.6);
    random_graph(&mut r, n, 4, p)
}

pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0))
}

/// Returns a fixed `x_0*` regardless of its input.
pub struct Fixed {
    pub res: usize,
    pub ch: usize,
    pub x: Vec<f64>,
}

impl Denoiser for Fixed {
    fn resolution(&self) -> usize {
        self.res
    }
    fn channels(&self) -> usize {
        self.ch
    }
    fn predict(&self, req: &DenoiseRequest) -> gcdlab::Result<Vec<Vec<f64>>> {
        Ok(vec![self.x.clone(); req.x_t.len()])
    }
}

pub fn encoder(cfg: GraphEncoderConfig, seed: u64) -> (GraphEncoder, ParamStore) {
    let mut store = ParamStore::new();
    let enc = GraphEncoder::new(&mut store, "g.", cfg, &mut rng::rng(seed));
    // perturb norm gains and biases away from their identity init
    let mut r = rng::rng(seed + 1);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += r.random_range(-0.2..0.2);
        }
    }
    (enc, store)
}

pub fn tokens(enc: &GraphEncoder, store: &ParamStore, g: &TissueGraph, fc: &FeatureConfig) -> Vec<Vec<f64>> {
    let f = node_features(g, fc).unwrap();
    let t = enc.encode(store, &f, &g.adjacency()).unwrap();
    (0..fc.n_max).map(|i| t.row(i).to_vec()).collect()
}

pub fn permuted(g: &TissueGraph, perm: &[usize]) -> TissueGraph {
    // new node k is old node perm[k]
    let nodes = perm.iter().map(|&o| g.node(o).clone()).collect();
    let mut out = TissueGraph::new(nodes);
    for a in 0..perm.len() {
        for b in 0..perm.len() {
            if a != b && g.has_edge(perm[a], perm[b]) {
                out.set_edge(a, b, true);
            }
        }
    }
    out
}


/// One ancestral step written out from the cosine schedule by hand, with
/// the standard normal draw `e` supplied.
pub fn hand_step(t: f64, s: f64, xt: f64, xh: f64, gamma: f64, e: f64) -> f64 {
    use std::f64::consts::PI;
    let (at, st) = ((PI * t / 2.0).cos(), (PI * t / 2.0).sin());
    let (as_, ss) = ((PI * s / 2.0).cos(), (PI * s / 2.0).sin());
    let lt = (at * at / (st * st)).ln();
    let ls = (as_ * as_ / (ss * ss)).ln();
    let r = (lt - ls).exp();
    let mean = r * (as_ / at) * xt + (1.0 - r) * as_ * xh;
    let v_post = (1.0 - r) * ss * ss;
    let v_fwd = (1.0 - r) * st * st;
    mean + (v_post.powf(1.0 - gamma) * v_fwd.powf(gamma)).sqrt() * e
}
