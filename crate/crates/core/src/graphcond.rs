//! Graph encoder: transformer blocks whose attention is restricted to
//! adjacent nodes. Its output tokens condition the denoisers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Linear, Norm, ParamId, ParamStore, Tape, Tensor, Var};
use crate::embed::{node_features, FeatureConfig, NodeFeatures};
use crate::error::{Error, Result};
use crate::maskgraph::TissueGraph;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionMode {
    /// Non-adjacent logits are dropped before the softmax (weight exactly 0).
    #[default]
    Additive,
    /// Logits are multiplied elementwise by the adjacency, then softmaxed.
    Literal,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AttentionDiagnostics {
    /// Query rows with no admissible key; their output is zero.
    pub empty_rows: Vec<usize>,
}

/// Attention on the tape.
///
/// `adj` is the 0/1 admissibility matrix. `scope` marks which keys exist
/// for each query at all (same graph, real node); in literal mode the
/// softmax runs over `scope` with logits scaled by `adj`. Returns
/// `(weights, output)`.
pub fn attention_on_tape(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    adj: Var,
    scope: Var,
    mode: AttentionMode,
) -> Result<(Var, Var)> {
    let d_k = tape.value(q).cols();
    if tape.value(k).cols() != d_k {
        return Err(Error::shape("masked_attention", "query and key widths differ"));
    }
    let scores = tape.matmul_nt(q, k)?;
    let scores = tape.scale(scores, 1.0 / (d_k as f64).sqrt())?;
    let weights = match mode {
        AttentionMode::Additive => tape.masked_softmax(scores, adj)?,
        AttentionMode::Literal => {
            let logits = tape.mul(scores, adj)?;
            let w = tape.masked_softmax(logits, scope)?;
            let a = tape.value(adj);
            let any: Vec<f64> = (0..a.rows())
                .map(|r| if a.row(r).iter().any(|&x| x != 0.0) { 1.0 } else { 0.0 })
                .collect();
            let any = tape.input(Tensor::matrix(any.len(), 1, any)?)?;
            tape.mul_col(w, any)?
        }
    };
    let out = tape.matmul(weights, v)?;
    Ok((weights, out))
}

/// Single-graph attention on plain tensors: `(weights, output, diagnostics)`.
pub fn masked_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    adj: &Tensor,
    mode: AttentionMode,
) -> Result<(Tensor, Tensor, AttentionDiagnostics)> {
    if adj.shape() != [q.rows(), k.rows()] || v.rows() != k.rows() {
        return Err(Error::shape(
            "masked_attention",
            format!("Q {:?}, K {:?}, V {:?}, A {:?}", q.shape(), k.shape(), v.shape(), adj.shape()),
        ));
    }
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.input(q.clone())?, tape.input(k.clone())?, tape.input(v.clone())?);
    let av = tape.input(adj.clone())?;
    let scope = tape.input(Tensor::filled(q.rows(), k.rows(), 1.0))?;
    let (w, out) = attention_on_tape(&mut tape, qv, kv, vv, av, scope, mode)?;
    let empty_rows = (0..adj.rows())
        .filter(|&r| adj.row(r).iter().all(|&x| x == 0.0))
        .collect();
    Ok((tape.value(w).clone(), tape.value(out).clone(), AttentionDiagnostics { empty_rows }))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphEncoderConfig {
    pub f_dim: usize,
    pub d_model: usize,
    pub d_k: usize,
    pub layers: usize,
    pub ff_hidden: usize,
    pub mode: AttentionMode,
}

impl Default for GraphEncoderConfig {
    fn default() -> Self {
        GraphEncoderConfig { f_dim: 35, d_model: 32, d_k: 32, layers: 2, ff_hidden: 64, mode: AttentionMode::Additive }
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    norm1: Norm,
    ff1: Linear,
    ff2: Linear,
    norm2: Norm,
}

/// Parameter handles of one graph encoder inside a shared [`ParamStore`].
#[derive(Clone, Debug)]
pub struct GraphEncoder {
    pub config: GraphEncoderConfig,
    input: Linear,
    layers: Vec<EncoderLayer>,
}

fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::matrix(rows, cols, data).expect("shape")
}

impl GraphEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, config: GraphEncoderConfig, rng: &mut R) -> Self {
        let c = config;
        let input = Linear::new(store, &format!("{prefix}in"), c.f_dim, c.d_model, rng);
        let layers = (0..c.layers)
            .map(|l| {
                let p = format!("{prefix}l{l}.");
                EncoderLayer {
                    wq: store.add(format!("{p}wq"), glorot(c.d_model, c.d_k, rng)),
                    wk: store.add(format!("{p}wk"), glorot(c.d_model, c.d_k, rng)),
                    wv: store.add(format!("{p}wv"), glorot(c.d_model, c.d_k, rng)),
                    wo: store.add(format!("{p}wo"), glorot(c.d_k, c.d_model, rng)),
                    norm1: Norm::new(store, &format!("{p}ln1"), c.d_model),
                    ff1: Linear::new(store, &format!("{p}ff1"), c.d_model, c.ff_hidden, rng),
                    ff2: Linear::new(store, &format!("{p}ff2"), c.ff_hidden, c.d_model, rng),
                    norm2: Norm::new(store, &format!("{p}ln2"), c.d_model),
                }
            })
            .collect();
        GraphEncoder { config, input, layers }
    }

    /// Tokens `[rows, d_model]` for a (possibly block-diagonal) batch;
    /// invalid rows come out as zero.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, batch: &GraphBatch) -> Result<Var> {
        if batch.features.cols() != self.config.f_dim {
            return Err(Error::shape(
                "encode_graph",
                format!("feature width {} but encoder expects {}", batch.features.cols(), self.config.f_dim),
            ));
        }
        let x = tape.input(batch.features.clone())?;
        let adj = tape.input(batch.adjacency.clone())?;
        let scope = tape.input(batch.scope.clone())?;
        let valid = tape.input(batch.valid.clone())?;
        let mut h = self.input.forward(tape, store, x)?;
        for layer in &self.layers {
            let wq = tape.param(store, layer.wq)?;
            let wk = tape.param(store, layer.wk)?;
            let wv = tape.param(store, layer.wv)?;
            let wo = tape.param(store, layer.wo)?;
            let q = tape.matmul(h, wq)?;
            let k = tape.matmul(h, wk)?;
            let v = tape.matmul(h, wv)?;
            let (_, att) = attention_on_tape(tape, q, k, v, adj, scope, self.config.mode)?;
            let att = tape.matmul(att, wo)?;
            let r = tape.add(h, att)?;
            h = layer.norm1.forward(tape, store, r)?;
            let f = layer.ff1.forward(tape, store, h)?;
            let f = tape.silu(f)?;
            let f = layer.ff2.forward(tape, store, f)?;
            let r = tape.add(h, f)?;
            h = layer.norm2.forward(tape, store, r)?;
        }
        tape.mul_col(h, valid)
    }

    /// Inference for one graph.
    pub fn encode(&self, store: &ParamStore, features: &NodeFeatures, adjacency: &[f64]) -> Result<ConditioningTokens> {
        let batch = GraphBatch::from_parts(&[Some((features, adjacency))], features.n_max, features.f_dim)?;
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, store, &batch)?;
        Ok(ConditioningTokens {
            n_max: features.n_max,
            d_model: self.config.d_model,
            data: tape.value(out).data().to_vec(),
            valid: features.valid.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningTokens {
    pub n_max: usize,
    pub d_model: usize,
    pub data: Vec<f64>,
    pub valid: Vec<bool>,
}

impl ConditioningTokens {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d_model..(i + 1) * self.d_model]
    }
}

/// Several graphs stacked as one disconnected graph: graph `b` owns rows
/// `b * n_max .. (b + 1) * n_max`.
#[derive(Clone, Debug)]
pub struct GraphBatch {
    pub n_max: usize,
    pub graphs: usize,
    pub features: Tensor,
    /// Effective adjacency `A + I` over valid nodes, block diagonal.
    pub adjacency: Tensor,
    /// 1 where query and key are valid nodes of the same graph.
    pub scope: Tensor,
    pub valid: Tensor,
}

impl GraphBatch {
    /// `parts[b]` is `(features, N x N adjacency)` or `None` for a graph
    /// with every node dropped.
    pub fn from_parts(parts: &[Option<(&NodeFeatures, &[f64])>], n_max: usize, f_dim: usize) -> Result<Self> {
        let rows = parts.len() * n_max;
        let mut features = vec![0.0; rows * f_dim];
        let mut adjacency = vec![0.0; rows * rows];
        let mut scope = vec![0.0; rows * rows];
        let mut valid = vec![0.0; rows];
        for (b, part) in parts.iter().enumerate() {
            let Some((feats, adj)) = part else { continue };
            if feats.n_max != n_max || feats.f_dim != f_dim {
                return Err(Error::shape("graph_batch", "feature matrices differ in shape"));
            }
            let n = feats.num_valid();
            if adj.len() != n * n || feats.valid[..n].iter().any(|v| !v) {
                return Err(Error::shape(
                    "graph_batch",
                    format!("adjacency has {} entries for {n} valid nodes", adj.len()),
                ));
            }
            let base = b * n_max;
            features[base * f_dim..(base + n_max) * f_dim].copy_from_slice(&feats.data);
            for i in 0..n {
                valid[base + i] = 1.0;
                for j in 0..n {
                    let a = adj[i * n + j];
                    if a != adj[j * n + i] {
                        return Err(Error::InvalidInput("adjacency is not symmetric".into()));
                    }
                    let idx = (base + i) * rows + base + j;
                    scope[idx] = 1.0;
                    adjacency[idx] = if i == j || a != 0.0 { 1.0 } else { 0.0 };
                }
            }
        }
        Ok(GraphBatch {
            n_max,
            graphs: parts.len(),
            features: Tensor::matrix(rows, f_dim, features)?,
            adjacency: Tensor::matrix(rows, rows, adjacency)?,
            scope: Tensor::matrix(rows, rows, scope)?,
            valid: Tensor::matrix(rows, 1, valid)?,
        })
    }

    /// Build from graphs; `None` entries are fully dropped.
    pub fn from_graphs(graphs: &[Option<&TissueGraph>], cfg: &FeatureConfig) -> Result<Self> {
        let feats: Vec<Option<(NodeFeatures, Vec<f64>)>> = graphs
            .iter()
            .map(|g| g.map(|g| Ok((node_features(g, cfg)?, g.adjacency()))).transpose())
            .collect::<Result<_>>()?;
        let parts: Vec<Option<(&NodeFeatures, &[f64])>> =
            feats.iter().map(|p| p.as_ref().map(|(f, a)| (f, a.as_slice()))).collect();
        GraphBatch::from_parts(&parts, cfg.n_max, cfg.f_dim())
    }

    pub fn is_valid(&self, row: usize) -> bool {
        self.valid.data()[row] != 0.0
    }
}
