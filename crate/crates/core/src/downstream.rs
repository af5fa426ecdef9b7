//! Per-pixel patch classifier trained on (image, mask) pairs.

use std::path::{Path, PathBuf};
use std::rc::Rc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, Checkpoint, Linear, ParamStore, Tape, Tensor};
use crate::error::{Error, Result};
use crate::image::{ClassLabel, LabeledMask, RgbImage};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmenterConfig {
    pub num_classes: usize,
    /// Odd patch side.
    pub patch: usize,
    pub hidden: usize,
    pub steps: usize,
    /// Pixels per step.
    pub batch: usize,
    pub lr: f64,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        SegmenterConfig { num_classes: 3, patch: 5, hidden: 64, steps: 2000, batch: 256, lr: 3e-3 }
    }
}

impl SegmenterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch.is_multiple_of(2) || self.patch == 0 {
            return Err(Error::Config(format!("segmenter patch must be odd, got {}", self.patch)));
        }
        if self.num_classes == 0 || self.hidden == 0 || self.batch == 0 {
            return Err(Error::Config("segmenter sizes must be positive".into()));
        }
        Ok(())
    }

    fn input_dim(&self) -> usize {
        self.patch * self.patch * 3
    }
}

/// Zero-padded `p x p` RGB neighbourhood of `(r, c)`, centred on `[-1, 1]`.
pub fn patch_at(img: &RgbImage, r: usize, c: usize, p: usize, out: &mut Vec<f64>) {
    let half = (p / 2) as isize;
    for dr in -half..=half {
        for dc in -half..=half {
            let (rr, cc) = (r as isize + dr, c as isize + dc);
            if rr < 0 || cc < 0 || rr >= img.height() as isize || cc >= img.width() as isize {
                out.extend_from_slice(&[0.0; 3]);
            } else {
                out.extend(img.pixel(rr as usize, cc as usize).iter().map(|v| 2.0 * v - 1.0));
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Segmenter {
    pub config: SegmenterConfig,
    pub store: ParamStore,
    l1: Linear,
    l2: Linear,
    out: Linear,
}

impl Segmenter {
    pub fn new(config: SegmenterConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::sub_rng(seed, "segmenter/init");
        let mut store = ParamStore::new();
        let l1 = Linear::new(&mut store, "l1", config.input_dim(), config.hidden, &mut r);
        let l2 = Linear::new(&mut store, "l2", config.hidden, config.hidden, &mut r);
        let out = Linear::new(&mut store, "out", config.hidden, config.num_classes + 1, &mut r);
        Ok(Segmenter { config, store, l1, l2, out })
    }

    fn logits(&self, tape: &mut Tape, x: Tensor) -> Result<crate::autodiff::Var> {
        let x = tape.input(x)?;
        let h = self.l1.forward(tape, &self.store, x)?;
        let h = tape.relu(h)?;
        let h = self.l2.forward(tape, &self.store, h)?;
        let h = tape.relu(h)?;
        self.out.forward(tape, &self.store, h)
    }

    /// Cross-entropy over uniformly sampled pixels; returns the loss history.
    pub fn train(&mut self, pairs: &[(RgbImage, LabeledMask)], seed: u64) -> Result<Vec<f64>> {
        if pairs.is_empty() {
            return Err(Error::InvalidInput("no training pairs for the segmenter".into()));
        }
        for (img, m) in pairs {
            if img.height() != m.height() || img.width() != m.width() {
                return Err(Error::shape("segmenter", "image and mask sizes differ"));
            }
        }
        let semantic: Vec<Vec<ClassLabel>> = pairs.iter().map(|(_, m)| m.semantic()).collect();
        let cfg = self.config.clone();
        let mut adam = AdamState::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, &self.store);
        let mut r = rng::sub_rng(seed, "segmenter/train");
        let mut history = Vec::with_capacity(cfg.steps);
        for _ in 0..cfg.steps {
            let mut x = Vec::with_capacity(cfg.batch * cfg.input_dim());
            let mut labels = Vec::with_capacity(cfg.batch);
            for _ in 0..cfg.batch {
                let k = r.random_range(0..pairs.len());
                let img = &pairs[k].0;
                let (pr, pc) = (r.random_range(0..img.height()), r.random_range(0..img.width()));
                patch_at(img, pr, pc, cfg.patch, &mut x);
                let class = semantic[k][pr * img.width() + pc] as usize;
                if class > cfg.num_classes {
                    return Err(Error::InvalidInput(format!("mask class {class} exceeds {}", cfg.num_classes)));
                }
                labels.push(class);
            }
            let mut tape = Tape::new();
            let logits = self.logits(&mut tape, Tensor::matrix(cfg.batch, cfg.input_dim(), x)?)?;
            let loss = tape.softmax_cross_entropy(logits, Rc::from(labels))?;
            history.push(tape.value(loss).item());
            let grads = tape.backward(loss)?.param_grads(&self.store);
            adam.step(&mut self.store, &grads)?;
        }
        Ok(history)
    }

    /// Per-pixel class indices `0..=C`.
    pub fn predict_classes(&self, img: &RgbImage) -> Result<Vec<ClassLabel>> {
        let (h, w, p) = (img.height(), img.width(), self.config.patch);
        let mut x = Vec::with_capacity(h * w * self.config.input_dim());
        for r in 0..h {
            for c in 0..w {
                patch_at(img, r, c, p, &mut x);
            }
        }
        let mut tape = Tape::new();
        let logits = self.logits(&mut tape, Tensor::matrix(h * w, self.config.input_dim(), x)?)?;
        let l = tape.value(logits);
        Ok((0..h * w)
            .map(|i| {
                let row = l.row(i);
                (0..row.len()).fold(0, |best, k| if row[k] > row[best] { k } else { best }) as ClassLabel
            })
            .collect())
    }

    /// Semantic prediction with instances as 8-connected components per class.
    pub fn predict_mask(&self, img: &RgbImage) -> Result<LabeledMask> {
        LabeledMask::from_semantic(img.height(), img.width(), &self.predict_classes(img)?)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.meta.insert("kind".into(), "segmenter".into());
        ck.meta.insert("config".into(), serde_json::to_value(&self.config)?);
        ck.extend(self.store.to_named(""));
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta.get("kind").and_then(|k| k.as_str()) != Some("segmenter") {
            return Err(Error::InvalidInput("not a segmenter checkpoint".into()));
        }
        let config: SegmenterConfig = serde_json::from_value(ck.meta["config"].clone())?;
        let mut s = Segmenter::new(config, 0)?;
        s.store.load_named(&ck.with_prefix(""))?;
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact { stage: "segment-train", path: PathBuf::from(path) });
        }
        Segmenter::from_checkpoint(&Checkpoint::load(path)?)
    }
}
