//! Per-node feature rows `[one-hot class | object descriptor | position]`.

mod byol;
mod conv;

pub use byol::{byol_loss_value, ema_update, ByolConfig, ByolEncoder, ByolNet};
pub use conv::ConvLayer;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::image::{LabeledMask, RgbImage};
use crate::maskgraph::TissueGraph;

/// Produces the descriptor vector attached to a graph node.
pub trait ObjectEmbedder {
    fn dim(&self) -> usize;
    fn embed(&self, image: &RgbImage, mask: &LabeledMask, id: u32) -> Result<Vec<f64>>;
}

/// Keep only the pixels of instance `id`; everything else becomes zero.
pub fn mask_object(image: &RgbImage, mask: &LabeledMask, id: u32) -> Result<RgbImage> {
    if image.height() != mask.height() || image.width() != mask.width() {
        return Err(Error::shape("mask_object", "image and mask sizes differ"));
    }
    if id == 0 || mask.class_of(id).is_none() {
        return Err(Error::InvalidInput(format!("instance {id} not in mask")));
    }
    let mut out = RgbImage::filled(image.height(), image.width(), [0.0; 3]);
    for r in 0..image.height() {
        for c in 0..image.width() {
            if mask.id_at(r, c) == id {
                out.set_pixel(r, c, image.pixel(r, c));
            }
        }
    }
    Ok(out)
}

/// Sinusoidal encoding of a `(row, col)` position.
///
/// Each axis is rescaled to `[0, 100)` by its image extent, then encoded as
/// `d_pos / 4` interleaved `(sin, cos)` pairs with frequencies
/// `10000^(-2k / (d_pos / 2))`. Row entries come first.
pub fn pos_encoding(com: [f64; 2], d_pos: usize, size: (usize, usize)) -> Result<Vec<f64>> {
    if d_pos == 0 || !d_pos.is_multiple_of(4) {
        return Err(Error::Config(format!("d_pos must be a positive multiple of 4, got {d_pos}")));
    }
    let half = d_pos / 2;
    let mut out = Vec::with_capacity(d_pos);
    for (value, extent) in [(com[0], size.0), (com[1], size.1)] {
        let p = value / extent as f64 * 100.0;
        for k in 0..d_pos / 4 {
            let freq = 10000f64.powf(-(2.0 * k as f64) / half as f64);
            out.push((p * freq).sin());
            out.push((p * freq).cos());
        }
    }
    Ok(out)
}

/// Which descriptor fills the middle block of each feature row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureLayout {
    /// Self-supervised object embedding.
    Extracted,
    /// Raw masked-object pixels, average-pooled to a small grayscale grid.
    Image,
    /// Centroid, area and bounding box.
    Manual,
}

impl FeatureLayout {
    pub const ALL: [FeatureLayout; 3] = [FeatureLayout::Manual, FeatureLayout::Extracted, FeatureLayout::Image];

    pub fn name(self) -> &'static str {
        match self {
            FeatureLayout::Extracted => "extracted",
            FeatureLayout::Image => "image",
            FeatureLayout::Manual => "manual",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub num_classes: usize,
    pub embed_dim: usize,
    pub d_pos: usize,
    pub n_max: usize,
    /// Image size the node COMs refer to.
    pub height: usize,
    pub width: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig { num_classes: 3, embed_dim: 16, d_pos: 16, n_max: 16, height: 32, width: 32 }
    }
}

impl FeatureConfig {
    pub fn f_dim(&self) -> usize {
        self.num_classes + self.embed_dim + self.d_pos
    }
}

/// `n_max x f_dim` feature matrix; padded rows are zero with `valid == false`.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeFeatures {
    pub n_max: usize,
    pub f_dim: usize,
    pub data: Vec<f64>,
    pub valid: Vec<bool>,
}

impl NodeFeatures {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.f_dim..(i + 1) * self.f_dim]
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.n_max, self.f_dim, self.data.clone()).expect("shape")
    }
}

/// Assemble feature rows in graph node order from the attached descriptors.
pub fn node_features(graph: &TissueGraph, cfg: &FeatureConfig) -> Result<NodeFeatures> {
    if graph.len() > cfg.n_max {
        return Err(Error::Capacity { what: format!("graph has {} nodes", graph.len()), limit: cfg.n_max });
    }
    let f_dim = cfg.f_dim();
    let mut data = vec![0.0; cfg.n_max * f_dim];
    let mut valid = vec![false; cfg.n_max];
    for (i, node) in graph.nodes().iter().enumerate() {
        if node.embedding.len() != cfg.embed_dim {
            return Err(Error::Config(format!(
                "node {i} descriptor has {} entries but the experiment uses {} (F_dim {})",
                node.embedding.len(),
                cfg.embed_dim,
                f_dim
            )));
        }
        let class = node.class as usize;
        if class == 0 || class > cfg.num_classes {
            return Err(Error::InvalidInput(format!("node {i} class {class} outside 1..={}", cfg.num_classes)));
        }
        let row = &mut data[i * f_dim..(i + 1) * f_dim];
        row[class - 1] = 1.0;
        row[cfg.num_classes..cfg.num_classes + cfg.embed_dim].copy_from_slice(&node.embedding);
        let pos = pos_encoding(node.com, cfg.d_pos, (cfg.height, cfg.width))?;
        row[cfg.num_classes + cfg.embed_dim..].copy_from_slice(&pos);
        valid[i] = true;
    }
    Ok(NodeFeatures { n_max: cfg.n_max, f_dim, data, valid })
}

/// Replace every node descriptor using `embedder` on the node's source instance.
pub fn attach_embeddings(graph: &mut TissueGraph, image: &RgbImage, mask: &LabeledMask, embedder: &dyn ObjectEmbedder) -> Result<()> {
    for (i, node) in graph.nodes_mut().iter_mut().enumerate() {
        let id = node
            .source
            .ok_or_else(|| Error::InvalidInput(format!("node {i} has no source instance")))?;
        node.embedding = embedder.embed(image, mask, id)?;
    }
    Ok(())
}

/// Masked object, average-pooled to a `grid x grid` luminance image.
#[derive(Clone, Copy, Debug)]
pub struct PixelDescriptor {
    pub grid: usize,
}

impl ObjectEmbedder for PixelDescriptor {
    fn dim(&self) -> usize {
        self.grid * self.grid
    }

    fn embed(&self, image: &RgbImage, mask: &LabeledMask, id: u32) -> Result<Vec<f64>> {
        let masked = mask_object(image, mask, id)?;
        let (h, w) = (image.height(), image.width());
        let mut out = vec![0.0; self.grid * self.grid];
        let mut counts = vec![0usize; self.grid * self.grid];
        for r in 0..h {
            for c in 0..w {
                let cell = (r * self.grid / h) * self.grid + c * self.grid / w;
                let p = masked.pixel(r, c);
                out[cell] += (p[0] + p[1] + p[2]) / 3.0;
                counts[cell] += 1;
            }
        }
        for (o, n) in out.iter_mut().zip(counts) {
            if n > 0 {
                *o /= n as f64;
            }
        }
        Ok(out)
    }
}

/// Hand-crafted geometry: normalized centroid, area, bounding box, zero padded.
#[derive(Clone, Copy, Debug)]
pub struct ManualDescriptor {
    pub dim: usize,
}

impl ObjectEmbedder for ManualDescriptor {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, image: &RgbImage, mask: &LabeledMask, id: u32) -> Result<Vec<f64>> {
        if image.height() != mask.height() || image.width() != mask.width() {
            return Err(Error::shape("manual_descriptor", "image and mask sizes differ"));
        }
        let px = mask.pixels_of(id);
        if px.is_empty() {
            return Err(Error::InvalidInput(format!("instance {id} not in mask")));
        }
        let (h, w) = (mask.height() as f64, mask.width() as f64);
        let n = px.len() as f64;
        let cr = px.iter().map(|p| p.0 as f64).sum::<f64>() / n;
        let cc = px.iter().map(|p| p.1 as f64).sum::<f64>() / n;
        let r0 = px.iter().map(|p| p.0).min().unwrap_or(0) as f64;
        let r1 = px.iter().map(|p| p.0).max().unwrap_or(0) as f64;
        let c0 = px.iter().map(|p| p.1).min().unwrap_or(0) as f64;
        let c1 = px.iter().map(|p| p.1).max().unwrap_or(0) as f64;
        let feats = [cr / h, cc / w, n / (h * w) * 10.0, r0 / h, c0 / w, r1 / h, c1 / w];
        let mut out = vec![0.0; self.dim];
        for (o, f) in out.iter_mut().zip(feats) {
            *o = f;
        }
        Ok(out)
    }
}
