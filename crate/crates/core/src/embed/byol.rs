//! Bootstrap-your-own-latent embedding of masked object crops.
//!
//! The online branch is encoder, projector and predictor; the target branch
//! is an exponential moving average of the online weights and only runs the
//! encoder and projector.

use std::rc::Rc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::conv::ConvLayer;
use super::{mask_object, ObjectEmbedder};
use crate::autodiff::{AdamConfig, AdamState, Checkpoint, Linear, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::image::{LabeledMask, RgbImage};
use crate::rng::{self, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ByolConfig {
    pub height: usize,
    pub width: usize,
    pub embed_dim: usize,
    pub proj_hidden: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub tau: f64,
    pub max_shift: i32,
    pub brightness: f64,
}

impl Default for ByolConfig {
    fn default() -> Self {
        ByolConfig {
            height: 32,
            width: 32,
            embed_dim: 16,
            proj_hidden: 32,
            steps: 500,
            batch: 32,
            lr: 1e-3,
            tau: 0.99,
            max_shift: 2,
            brightness: 0.2,
        }
    }
}

/// Parameter layout shared by the online and target stores.
#[derive(Clone, Debug)]
pub struct ByolNet {
    convs: [ConvLayer; 3],
    flat: Linear,
    proj: [Linear; 2],
    pred: [Linear; 2],
    height: usize,
    width: usize,
}

impl ByolNet {
    pub fn new(cfg: &ByolConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        if !cfg.height.is_multiple_of(8) || !cfg.width.is_multiple_of(8) || cfg.height == 0 || cfg.width == 0 {
            return Err(Error::Config(format!("embedder input {}x{} must be a multiple of 8", cfg.height, cfg.width)));
        }
        let convs = [
            ConvLayer::new(store, "enc.conv1", 3, 8, 4, 2, 1, rng),
            ConvLayer::new(store, "enc.conv2", 8, 16, 4, 2, 1, rng),
            ConvLayer::new(store, "enc.conv3", 16, 16, 4, 2, 1, rng),
        ];
        let flat_in = (cfg.height / 8) * (cfg.width / 8) * 16;
        let flat = Linear::new(store, "enc.flat", flat_in, cfg.embed_dim, rng);
        let proj = [
            Linear::new(store, "proj.0", cfg.embed_dim, cfg.proj_hidden, rng),
            Linear::new(store, "proj.1", cfg.proj_hidden, cfg.embed_dim, rng),
        ];
        let pred = [
            Linear::new(store, "pred.0", cfg.embed_dim, cfg.proj_hidden, rng),
            Linear::new(store, "pred.1", cfg.proj_hidden, cfg.embed_dim, rng),
        ];
        Ok(ByolNet { convs, flat, proj, pred, height: cfg.height, width: cfg.width })
    }

    /// Representation `[batch, embed_dim]` of images stacked as `[batch*h*w, 3]`.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, x: Var, batch: usize) -> Result<Var> {
        let (mut h, mut w) = (self.height, self.width);
        let mut cur = x;
        for conv in &self.convs {
            let y = conv.forward(tape, store, cur, batch, h, w)?;
            cur = tape.relu(y)?;
            (h, w) = conv.out_size(h, w);
        }
        let per = h * w * 16;
        let index: Rc<[usize]> = (0..batch * per).collect::<Vec<_>>().into();
        let flat = tape.gather(cur, index, batch, per)?;
        self.flat.forward(tape, store, flat)
    }

    fn mlp(&self, layers: &[Linear; 2], tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = layers[0].forward(tape, store, x)?;
        let h = tape.relu(h)?;
        layers[1].forward(tape, store, h)
    }

    pub fn project(&self, tape: &mut Tape, store: &ParamStore, x: Var, batch: usize) -> Result<Var> {
        let y = self.encode(tape, store, x, batch)?;
        self.mlp(&self.proj, tape, store, y)
    }

    pub fn predict(&self, tape: &mut Tape, store: &ParamStore, x: Var, batch: usize) -> Result<Var> {
        let z = self.project(tape, store, x, batch)?;
        self.mlp(&self.pred, tape, store, z)
    }
}

/// `2 - 2 cos(p, z)`.
pub fn byol_loss_value(p: &[f64], z: &[f64]) -> f64 {
    let dot: f64 = p.iter().zip(z).map(|(a, b)| a * b).sum();
    let np = p.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nz = z.iter().map(|a| a * a).sum::<f64>().sqrt();
    2.0 - 2.0 * dot / (np * nz).max(1e-12)
}

/// `target <- tau * target + (1 - tau) * online`, parameter by parameter.
pub fn ema_update(target: &mut ParamStore, online: &ParamStore, tau: f64) -> Result<()> {
    if target.len() != online.len() {
        return Err(Error::shape("ema_update", "stores differ in layout"));
    }
    let ids: Vec<_> = online.ids().collect();
    for id in ids {
        let src = online.get(id).data().to_vec();
        let dst = target.get_mut(id);
        if dst.len() != src.len() {
            return Err(Error::shape("ema_update", "parameter sizes differ"));
        }
        for (t, o) in dst.data_mut().iter_mut().zip(src) {
            *t = tau * *t + (1.0 - tau) * o;
        }
    }
    Ok(())
}

/// Trained embedder: the online encoder is used for inference.
#[derive(Clone, Debug)]
pub struct ByolEncoder {
    pub config: ByolConfig,
    net: ByolNet,
    pub online: ParamStore,
    pub target: ParamStore,
}

fn stack_images(images: &[RgbImage], h: usize, w: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * h * w * 3);
    for img in images {
        if img.height() != h || img.width() != w {
            return Err(Error::shape(
                "embedder",
                format!("expected {h}x{w} input, got {}x{}", img.height(), img.width()),
            ));
        }
        data.extend_from_slice(img.data());
    }
    Tensor::matrix(images.len() * h * w, 3, data)
}

fn augment(img: &RgbImage, cfg: &ByolConfig, rng: &mut Rng) -> RgbImage {
    let (h, w) = (img.height(), img.width());
    let flip_v = rng.random_bool(0.5);
    let flip_h = rng.random_bool(0.5);
    let dy = rng.random_range(-cfg.max_shift..=cfg.max_shift);
    let dx = rng.random_range(-cfg.max_shift..=cfg.max_shift);
    let gain = 1.0 + rng.random_range(-cfg.brightness..=cfg.brightness);
    let mut out = RgbImage::filled(h, w, [0.0; 3]);
    for r in 0..h {
        for c in 0..w {
            let sr = r as i32 - dy;
            let sc = c as i32 - dx;
            if sr < 0 || sc < 0 || sr >= h as i32 || sc >= w as i32 {
                continue;
            }
            let sr = if flip_v { h - 1 - sr as usize } else { sr as usize };
            let sc = if flip_h { w - 1 - sc as usize } else { sc as usize };
            let p = img.pixel(sr, sc);
            out.set_pixel(r, c, [p[0] * gain, p[1] * gain, p[2] * gain]);
        }
    }
    out
}

impl ByolEncoder {
    pub fn new(config: ByolConfig, seed: u64) -> Result<Self> {
        let mut rng = rng::sub_rng(seed, "byol/init");
        let mut online = ParamStore::new();
        let net = ByolNet::new(&config, &mut online, &mut rng)?;
        let target = online.clone();
        Ok(ByolEncoder { config, net, online, target })
    }

    /// Symmetrized loss of one batch of views; returns the loss and the
    /// online-parameter gradients.
    fn step_loss(&self, v1: &[RgbImage], v2: &[RgbImage]) -> Result<(f64, Vec<Tensor>)> {
        let (h, w) = (self.config.height, self.config.width);
        let b = v1.len();
        let mut views = v1.to_vec();
        views.extend_from_slice(v2);
        let x = stack_images(&views, h, w)?;

        let mut ttape = Tape::new();
        let tx = ttape.input(x.clone())?;
        let tz = self.net.project(&mut ttape, &self.target, tx, 2 * b)?;
        let tz = ttape.l2_normalize_rows(tz)?;
        let tz = ttape.value(tz).clone();
        // view 1 predicts the target of view 2 and vice versa
        let mut swapped = tz.data()[b * tz.cols()..].to_vec();
        swapped.extend_from_slice(&tz.data()[..b * tz.cols()]);
        let swapped = Tensor::matrix(2 * b, tz.cols(), swapped)?;

        let mut tape = Tape::new();
        let xv = tape.input(x)?;
        let p = self.net.predict(&mut tape, &self.online, xv, 2 * b)?;
        let p = tape.l2_normalize_rows(p)?;
        let t = tape.input(swapped)?;
        let prod = tape.mul(p, t)?;
        let s = tape.sum(prod)?;
        let s = tape.scale(s, -2.0 / (2 * b) as f64)?;
        let two = tape.input(Tensor::scalar(2.0))?;
        let loss = tape.add(s, two)?;
        let value = tape.value(loss).item();
        let grads = tape.backward(loss)?.param_grads(&self.online);
        Ok((value, grads))
    }

    /// Train on masked crops; returns the per-step loss history.
    pub fn train(&mut self, crops: &[RgbImage], seed: u64) -> Result<Vec<f64>> {
        if crops.is_empty() {
            return Err(Error::InvalidInput("no crops to train the embedder on".into()));
        }
        let cfg = self.config.clone();
        let mut adam = AdamState::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, &self.online);
        let mut rng = rng::sub_rng(seed, "byol/train");
        let mut history = Vec::with_capacity(cfg.steps);
        for step in 0..cfg.steps {
            let picks: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(0..crops.len())).collect();
            let v1: Vec<RgbImage> = picks.iter().map(|&i| augment(&crops[i], &cfg, &mut rng)).collect();
            let v2: Vec<RgbImage> = picks.iter().map(|&i| augment(&crops[i], &cfg, &mut rng)).collect();
            let (loss, grads) = self.step_loss(&v1, &v2)?;
            adam.step(&mut self.online, &grads)?;
            ema_update(&mut self.target, &self.online, cfg.tau)?;
            log::debug!("byol step {step} loss {loss:.4}");
            history.push(loss);
        }
        Ok(history)
    }

    /// Online-encoder representations of whole images, in batches.
    pub fn encode_images(&self, images: &[RgbImage]) -> Result<Vec<Vec<f64>>> {
        let (h, w) = (self.config.height, self.config.width);
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let mut tape = Tape::new();
            let x = tape.input(stack_images(chunk, h, w)?)?;
            let y = self.net.encode(&mut tape, &self.online, x, chunk.len())?;
            let y = tape.value(y);
            out.extend((0..chunk.len()).map(|i| y.row(i).to_vec()));
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.meta.insert("kind".into(), "embedder".into());
        ck.meta.insert("config".into(), serde_json::to_value(&self.config)?);
        ck.extend(self.online.to_named("online."));
        ck.extend(self.target.to_named("target."));
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: ByolConfig = ck
            .meta
            .get("config")
            .cloned()
            .map(serde_json::from_value)
            .transpose()?
            .ok_or_else(|| Error::InvalidInput("embedder checkpoint lacks config".into()))?;
        let mut enc = ByolEncoder::new(config, 0)?;
        enc.online.load_named(&ck.with_prefix("online."))?;
        enc.target.load_named(&ck.with_prefix("target."))?;
        Ok(enc)
    }
}

impl ObjectEmbedder for ByolEncoder {
    fn dim(&self) -> usize {
        self.config.embed_dim
    }

    fn embed(&self, image: &RgbImage, mask: &LabeledMask, id: u32) -> Result<Vec<f64>> {
        let crop = mask_object(image, mask, id)?;
        Ok(self.encode_images(std::slice::from_ref(&crop))?.remove(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_value_extremes() {
        assert!(byol_loss_value(&[1.0, 2.0], &[2.0, 4.0]).abs() < 1e-12);
        assert!((byol_loss_value(&[1.0, 0.0], &[0.0, 3.0]) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn ema_moves_one_percent() {
        let mut online = ParamStore::new();
        online.add("a", Tensor::filled(1, 2, 1.0));
        let mut target = ParamStore::new();
        target.add("a", Tensor::zeros(1, 2));
        ema_update(&mut target, &online, 0.99).unwrap();
        assert!(target.get(target.id("a").unwrap()).data().iter().all(|v| (v - 0.01).abs() < 1e-15));
    }

    #[test]
    fn encoder_output_has_embed_dim() {
        let enc = ByolEncoder::new(ByolConfig::default(), 1).unwrap();
        let imgs = vec![RgbImage::filled(32, 32, [0.2, 0.4, 0.6]); 3];
        let e = enc.encode_images(&imgs).unwrap();
        assert_eq!(e.len(), 3);
        assert!(e.iter().all(|v| v.len() == 16));
    }
}
