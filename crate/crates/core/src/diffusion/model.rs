//! Per-stage denoiser.
//!
//! Every pixel is processed by the same residual perceptron. Its input is
//! the local `k x k` neighbourhood of `x_t` (and of the upsampled low-res
//! sample for super-resolution stages), a positional code and a noise-level
//! code. Each block reads the graph tokens through a cross-attention whose
//! logits carry a learned penalty on squared pixel-to-node distance; a
//! learned null token lets pixels far from every node attend to nothing.
//! Besides the attended values, each block sees the attention-weighted
//! offset from the pixel to the node centers.

use std::f64::consts::PI;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::data::channels;
use super::schedule::NoiseSchedule;
use crate::autodiff::{Linear, Norm, ParamId, ParamStore, Tape, Tensor, Var};
use crate::embed::{pos_encoding, FeatureConfig};
use crate::error::{Error, Result};
use crate::graphcond::{GraphBatch, GraphEncoder, GraphEncoderConfig};
use crate::maskgraph::TissueGraph;
use crate::rng::Rng;

const TIME_FEATURES: usize = 7;
/// Clamp for offset features, in units of `dist_scale`.
const OFFSET_CLAMP: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub resolution: usize,
    /// Resolution of the previous stage, if this is a super-resolution stage.
    pub lowres: Option<usize>,
    pub hidden: usize,
    pub ff_hidden: usize,
    pub blocks: usize,
    pub d_attn: usize,
    pub patch: usize,
    pub d_pos: usize,
    /// Length unit (pixels at the base resolution) of the distance bias.
    pub dist_scale: f64,
    pub gamma: f64,
    /// Sampling steps.
    pub steps: usize,
}

impl StageConfig {
    pub fn new(resolution: usize, lowres: Option<usize>) -> Self {
        StageConfig {
            resolution,
            lowres,
            hidden: 64,
            ff_hidden: 128,
            blocks: 2,
            d_attn: 16,
            patch: 3,
            d_pos: 16,
            dist_scale: 3.0,
            gamma: 0.3,
            steps: 24,
        }
    }

    /// Default 8 -> 16 -> 32 cascade.
    pub fn cascade() -> Vec<StageConfig> {
        vec![StageConfig::new(8, None), StageConfig::new(16, Some(8)), StageConfig::new(32, Some(16))]
    }

    pub fn input_dim(&self, num_classes: usize) -> usize {
        let patch = self.patch * self.patch * channels(num_classes);
        let lowres = if self.lowres.is_some() { patch } else { 0 };
        patch + lowres + 2 + self.d_pos + TIME_FEATURES
    }

    pub fn validate(&self, base: usize) -> Result<()> {
        if self.resolution == 0 || !base.is_multiple_of(self.resolution) {
            return Err(Error::Config(format!("stage resolution {} must divide {base}", self.resolution)));
        }
        if let Some(lo) = self.lowres {
            if lo == 0 || !self.resolution.is_multiple_of(lo) {
                return Err(Error::Config(format!("low-res {lo} must divide {}", self.resolution)));
            }
        }
        if self.patch.is_multiple_of(2) || !self.d_pos.is_multiple_of(4) || self.steps == 0 || !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config("stage needs odd patch, d_pos % 4 == 0, steps > 0, gamma in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    norm_a: Norm,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    wg: ParamId,
    beta: ParamId,
    norm_f: Norm,
    ff1: Linear,
    ff2: Linear,
}

/// A trainable stage: graph encoder and denoiser sharing one parameter store.
#[derive(Clone, Debug)]
pub struct StageModel {
    pub config: StageConfig,
    pub features: FeatureConfig,
    pub store: ParamStore,
    /// Optimizer steps taken so far; 0 means untrained.
    pub trained_steps: usize,
    encoder: GraphEncoder,
    null_token: ParamId,
    input: Linear,
    blocks: Vec<Block>,
    out_norm: Norm,
    out: Linear,
}

fn uniform(rows: usize, cols: usize, limit: f64, rng: &mut Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::matrix(rows, cols, data).expect("shape")
}

fn glorot(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    uniform(rows, cols, (6.0 / (rows + cols) as f64).sqrt(), rng)
}

/// Model inputs for a set of samples, each restricted to chosen pixels.
pub struct PreparedBatch {
    pub pixel_inputs: Tensor,
    /// `(first row, row count)` per sample.
    pub spans: Vec<(usize, usize)>,
    pub graphs: GraphBatch,
    geometry: Vec<Geometry>,
}

struct Geometry {
    mask: Tensor,
    neg_d2: Tensor,
    dr: Tensor,
    dc: Tensor,
    d2: Tensor,
}

pub(crate) fn time_features(schedule: &NoiseSchedule, t: f64) -> [f64; TIME_FEATURES] {
    let p = schedule.at(t);
    let t = p.t;
    [
        p.alpha,
        p.sigma,
        p.lambda / 13.0,
        (PI * t).sin(),
        (PI * t).cos(),
        (2.0 * PI * t).sin(),
        (2.0 * PI * t).cos(),
    ]
}

impl StageModel {
    pub fn new(config: StageConfig, features: FeatureConfig, encoder: GraphEncoderConfig, seed: u64) -> Result<Self> {
        config.validate(features.height)?;
        if features.height != features.width {
            return Err(Error::Config("the cascade needs square images".into()));
        }
        if encoder.f_dim != features.f_dim() {
            return Err(Error::Config(format!(
                "graph encoder expects F_dim {} but node features have {}",
                encoder.f_dim,
                features.f_dim()
            )));
        }
        let mut rng = crate::rng::sub_rng(seed, &format!("stage{}/init", config.resolution));
        let mut store = ParamStore::new();
        let enc = GraphEncoder::new(&mut store, "genc.", encoder, &mut rng);
        let (h, da, dm) = (config.hidden, config.d_attn, encoder.d_model);
        let null_token = store.add("null_token", uniform(1, dm, 0.1, &mut rng));
        let input = Linear::new(&mut store, "in", config.input_dim(features.num_classes), h, &mut rng);
        let blocks = (0..config.blocks)
            .map(|b| {
                let p = format!("b{b}.");
                Block {
                    norm_a: Norm::new(&mut store, &format!("{p}ln_a"), h),
                    wq: store.add(format!("{p}wq"), glorot(h, da, &mut rng)),
                    wk: store.add(format!("{p}wk"), glorot(dm, da, &mut rng)),
                    wv: store.add(format!("{p}wv"), glorot(dm, da, &mut rng)),
                    wo: store.add(format!("{p}wo"), glorot(da, h, &mut rng)),
                    wg: store.add(format!("{p}wg"), glorot(3, h, &mut rng)),
                    beta: store.add(format!("{p}beta"), Tensor::scalar(1.0)),
                    norm_f: Norm::new(&mut store, &format!("{p}ln_f"), h),
                    ff1: Linear::new(&mut store, &format!("{p}ff1"), h, config.ff_hidden, &mut rng),
                    ff2: Linear::new(&mut store, &format!("{p}ff2"), config.ff_hidden, h, &mut rng),
                }
            })
            .collect();
        let out_norm = Norm::new(&mut store, "out_ln", h);
        let out = Linear::new(&mut store, "out", h, channels(features.num_classes), &mut rng);
        Ok(StageModel {
            config,
            features,
            store,
            trained_steps: 0,
            encoder: enc,
            null_token,
            input,
            blocks,
            out_norm,
            out,
        })
    }

    pub fn channels(&self) -> usize {
        channels(self.features.num_classes)
    }

    pub fn encoder_config(&self) -> GraphEncoderConfig {
        self.encoder.config
    }

    pub fn pixels(&self) -> usize {
        self.config.resolution * self.config.resolution
    }

    /// Pixel center in base-resolution coordinates.
    fn base_coord(&self, i: usize) -> f64 {
        let f = self.features.height as f64 / self.config.resolution as f64;
        (i as f64 + 0.5) * f - 0.5
    }

    /// Build model inputs. `pixels[b]` lists the pixel indices used for
    /// sample `b` (all pixels when `None`).
    pub fn prepare(
        &self,
        schedule: &NoiseSchedule,
        x_t: &[&[f64]],
        lowres: Option<&[&[f64]]>,
        t: &[f64],
        graphs: &[Option<&TissueGraph>],
        pixels: Option<&[Vec<usize>]>,
    ) -> Result<PreparedBatch> {
        let cfg = &self.config;
        let (res, ch) = (cfg.resolution, self.channels());
        let n = x_t.len();
        if t.len() != n || graphs.len() != n || lowres.is_some_and(|l| l.len() != n) {
            return Err(Error::shape("denoiser", "per-sample inputs differ in count"));
        }
        if cfg.lowres.is_some() != lowres.is_some() {
            return Err(Error::InvalidInput(format!(
                "stage {res} {} a low-res input",
                if cfg.lowres.is_some() { "needs" } else { "takes no" }
            )));
        }
        for (b, x) in x_t.iter().enumerate() {
            if x.len() != res * res * ch || lowres.is_some_and(|l| l[b].len() != res * res * ch) {
                return Err(Error::shape("denoiser", format!("sample {b} is not {res}x{res}x{ch}")));
            }
        }
        let all: Vec<usize> = (0..res * res).collect();
        let in_dim = cfg.input_dim(self.features.num_classes);
        let half = (cfg.patch / 2) as isize;
        let mut data = Vec::new();
        let mut spans = Vec::with_capacity(n);
        let mut geometry = Vec::with_capacity(n);
        let s = cfg.dist_scale;
        let cols = self.features.n_max + 1;
        for b in 0..n {
            let px = pixels.map(|p| p[b].as_slice()).unwrap_or(&all);
            spans.push((data.len() / in_dim, px.len()));
            let tf = time_features(schedule, t[b]);
            for &p in px {
                let (r, c) = ((p / res) as isize, (p % res) as isize);
                let sources = std::iter::once(x_t[b]).chain(lowres.map(|l| l[b]));
                for src in sources {
                    for dy in -half..=half {
                        for dx in -half..=half {
                            let (rr, cc) = (r + dy, c + dx);
                            if rr < 0 || cc < 0 || rr >= res as isize || cc >= res as isize {
                                data.extend(std::iter::repeat_n(0.0, ch));
                            } else {
                                let i = (rr as usize * res + cc as usize) * ch;
                                data.extend_from_slice(&src[i..i + ch]);
                            }
                        }
                    }
                }
                let (br, bc) = (self.base_coord(r as usize), self.base_coord(c as usize));
                data.push(br / self.features.height as f64 * 2.0 - 1.0);
                data.push(bc / self.features.width as f64 * 2.0 - 1.0);
                data.extend(pos_encoding([br, bc], cfg.d_pos, (self.features.height, self.features.width))?);
                data.extend_from_slice(&tf);
            }
            let rows = px.len();
            let mut g = Geometry {
                mask: Tensor::zeros(rows, cols),
                neg_d2: Tensor::zeros(rows, cols),
                dr: Tensor::zeros(rows, cols),
                dc: Tensor::zeros(rows, cols),
                d2: Tensor::zeros(rows, cols),
            };
            for (row, &p) in px.iter().enumerate() {
                g.mask.data_mut()[row * cols + cols - 1] = 1.0;
                let (br, bc) = (self.base_coord(p / res), self.base_coord(p % res));
                if let Some(graph) = graphs[b] {
                    for (j, node) in graph.nodes().iter().enumerate() {
                        let (dr, dc) = ((br - node.com[0]) / s, (bc - node.com[1]) / s);
                        let d2 = dr * dr + dc * dc;
                        let k = row * cols + j;
                        g.mask.data_mut()[k] = 1.0;
                        g.neg_d2.data_mut()[k] = -d2;
                        g.dr.data_mut()[k] = dr.clamp(-OFFSET_CLAMP, OFFSET_CLAMP);
                        g.dc.data_mut()[k] = dc.clamp(-OFFSET_CLAMP, OFFSET_CLAMP);
                        g.d2.data_mut()[k] = d2.min(OFFSET_CLAMP * OFFSET_CLAMP);
                    }
                }
            }
            geometry.push(g);
        }
        let rows = data.len() / in_dim;
        Ok(PreparedBatch {
            pixel_inputs: Tensor::matrix(rows, in_dim, data)?,
            spans,
            graphs: GraphBatch::from_graphs(graphs, &self.features)?,
            geometry,
        })
    }

    /// Predicted `x_0` for every prepared row, `[rows, channels]`.
    pub fn forward(&self, tape: &mut Tape, batch: &PreparedBatch) -> Result<Var> {
        let store = &self.store;
        let n_max = self.features.n_max;
        let tokens = self.encoder.forward(tape, store, &batch.graphs)?;
        let null = tape.param(store, self.null_token)?;
        let x = tape.input(batch.pixel_inputs.clone())?;
        let mut h = self.input.forward(tape, store, x)?;
        let ones = tape.input(Tensor::filled(n_max + 1, 1, 1.0))?;
        let scale = 1.0 / (self.config.d_attn as f64).sqrt();
        for blk in &self.blocks {
            let u = blk.norm_a.forward(tape, store, h)?;
            let wq = tape.param(store, blk.wq)?;
            let wk = tape.param(store, blk.wk)?;
            let wv = tape.param(store, blk.wv)?;
            let q = tape.matmul(u, wq)?;
            let keys = tape.matmul(tokens, wk)?;
            let vals = tape.matmul(tokens, wv)?;
            let null_k = tape.matmul(null, wk)?;
            let null_v = tape.matmul(null, wv)?;
            let beta = tape.param(store, blk.beta)?;
            let mut att_parts = Vec::with_capacity(batch.spans.len());
            let mut geo_parts = Vec::with_capacity(batch.spans.len());
            for (b, &(start, len)) in batch.spans.iter().enumerate() {
                if len == 0 {
                    continue;
                }
                let geo = &batch.geometry[b];
                let qb = tape.slice_rows(q, start, len)?;
                let kb = tape.slice_rows(keys, b * n_max, n_max)?;
                let kb = tape.concat_rows(&[kb, null_k])?;
                let vb = tape.slice_rows(vals, b * n_max, n_max)?;
                let vb = tape.concat_rows(&[vb, null_v])?;
                let scores = tape.matmul_nt(qb, kb)?;
                let scores = tape.scale(scores, scale)?;
                let nd2 = tape.input(geo.neg_d2.clone())?;
                let bias = tape.scale_by(nd2, beta)?;
                let scores = tape.add(scores, bias)?;
                let mask = tape.input(geo.mask.clone())?;
                let w = tape.masked_softmax(scores, mask)?;
                att_parts.push(tape.matmul(w, vb)?);
                let mut g = Vec::with_capacity(3);
                for m in [&geo.dr, &geo.dc, &geo.d2] {
                    let mv = tape.input(m.clone())?;
                    let wm = tape.mul(w, mv)?;
                    g.push(tape.matmul(wm, ones)?);
                }
                geo_parts.push(tape.concat_cols(&g)?);
            }
            let att = tape.concat_rows(&att_parts)?;
            let geo = tape.concat_rows(&geo_parts)?;
            let wo = tape.param(store, blk.wo)?;
            let wg = tape.param(store, blk.wg)?;
            let a = tape.matmul(att, wo)?;
            let gproj = tape.matmul(geo, wg)?;
            h = tape.add(h, a)?;
            h = tape.add(h, gproj)?;
            let u = blk.norm_f.forward(tape, store, h)?;
            let f = blk.ff1.forward(tape, store, u)?;
            let f = tape.silu(f)?;
            let f = blk.ff2.forward(tape, store, f)?;
            h = tape.add(h, f)?;
        }
        let u = self.out_norm.forward(tape, store, h)?;
        self.out.forward(tape, store, u)
    }

    pub fn to_named(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.store.to_named(prefix)
    }
}
