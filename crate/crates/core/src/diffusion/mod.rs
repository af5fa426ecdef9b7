//! Graph-conditioned cascaded diffusion over joint image and mask channels.

mod data;
mod model;
mod schedule;

pub use data::{channels, decode_pair, downsample, encode_pair, upsample};
pub use model::{PreparedBatch, StageConfig, StageModel};
pub use schedule::{ancestral_step, q_sample, step_coefficients, NoiseSchedule, SchedulePoint, StepCoefficients};

use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, Checkpoint, Tape, Tensor};
use crate::embed::FeatureConfig;
use crate::error::{Error, Result};
use crate::graphcond::GraphEncoderConfig;
use crate::image::{LabeledMask, RgbImage};
use crate::maskgraph::TissueGraph;
use crate::rng::{self, Rng};

/// Denoiser inputs for a batch of samples at one stage.
pub struct DenoiseRequest<'a> {
    pub x_t: &'a [&'a [f64]],
    /// Upsampled previous-stage sample, for super-resolution stages.
    pub lowres: Option<&'a [&'a [f64]]>,
    pub t: &'a [f64],
    /// `None` drops the conditioning for that sample.
    pub graphs: &'a [Option<&'a TissueGraph>],
}

/// Anything that predicts `x_0` from `x_t`.
pub trait Denoiser {
    fn resolution(&self) -> usize;
    fn channels(&self) -> usize;
    fn predict(&self, req: &DenoiseRequest) -> Result<Vec<Vec<f64>>>;
}

/// Samples per forward pass at inference.
const INFER_CHUNK: usize = 8;

impl StageModel {
    fn predict_with(&self, schedule: &NoiseSchedule, req: &DenoiseRequest) -> Result<Vec<Vec<f64>>> {
        let n = req.x_t.len();
        let mut out = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let end = (start + INFER_CHUNK).min(n);
            let lowres = req.lowres.map(|l| &l[start..end]);
            let batch = self.prepare(schedule, &req.x_t[start..end], lowres, &req.t[start..end], &req.graphs[start..end], None)?;
            let mut tape = Tape::new();
            let y = self.forward(&mut tape, &batch)?;
            let y = tape.value(y);
            let per = self.pixels() * self.channels();
            out.extend(y.data().chunks(per).map(|c| c.to_vec()));
            start = end;
        }
        Ok(out)
    }
}

/// A stage model paired with the schedule it was trained under.
pub struct StageDenoiser<'a> {
    pub model: &'a StageModel,
    pub schedule: &'a NoiseSchedule,
}

impl Denoiser for StageDenoiser<'_> {
    fn resolution(&self) -> usize {
        self.model.config.resolution
    }

    fn channels(&self) -> usize {
        self.model.channels()
    }

    fn predict(&self, req: &DenoiseRequest) -> Result<Vec<Vec<f64>>> {
        self.model.predict_with(self.schedule, req)
    }
}

/// One training pair at a stage's resolution.
#[derive(Clone, Debug)]
pub struct StageExample {
    pub x0: Vec<f64>,
    /// Ground truth pooled to the previous stage and upsampled back.
    pub lowres: Option<Vec<f64>>,
    pub graph: TissueGraph,
}

/// Build stage examples from full-resolution pairs.
pub fn stage_examples(
    pairs: &[(Vec<f64>, TissueGraph)],
    base: usize,
    stage: &StageConfig,
    num_classes: usize,
) -> Result<Vec<StageExample>> {
    let ch = channels(num_classes);
    pairs
        .iter()
        .map(|(x, g)| {
            let x0 = downsample(x, base, stage.resolution, ch)?;
            let lowres = stage
                .lowres
                .map(|lo| upsample(&downsample(x, base, lo, ch)?, lo, stage.resolution, ch))
                .transpose()?;
            Ok(StageExample { x0, lowres, graph: g.clone() })
        })
        .collect()
}

struct Noised {
    t: Vec<f64>,
    x_t: Vec<Vec<f64>>,
}

fn noise_batch(schedule: &NoiseSchedule, batch: &[&StageExample], rng: &mut Rng) -> Result<Noised> {
    let mut t = Vec::with_capacity(batch.len());
    let mut x_t = Vec::with_capacity(batch.len());
    for ex in batch {
        let ti = rng.random_range(schedule.eps..1.0 - schedule.eps);
        let eps = rng::normals(rng, ex.x0.len());
        x_t.push(q_sample(schedule, &ex.x0, ti, &eps)?);
        t.push(ti);
    }
    Ok(Noised { t, x_t })
}

fn non_finite_loss(t: &[f64], schedule: &NoiseSchedule) -> Error {
    let lams: Vec<String> = t.iter().map(|&ti| format!("t={ti:.4} lambda={:.3}", schedule.at(ti).lambda)).collect();
    Error::NumericOverflow { op: "training_loss", context: lams.join(", ") }
}

/// Monte-Carlo estimate of `E ||x_hat - x_0||^2` (unit weighting) over the
/// examples, one `(t, eps)` draw each; the mean over examples of the
/// squared error summed over pixels and channels.
pub fn training_loss(denoiser: &dyn Denoiser, schedule: &NoiseSchedule, examples: &[StageExample], seed: u64) -> Result<f64> {
    let mut rng = rng::sub_rng(seed, "training_loss");
    let refs: Vec<&StageExample> = examples.iter().collect();
    let noised = noise_batch(schedule, &refs, &mut rng)?;
    let x_t: Vec<&[f64]> = noised.x_t.iter().map(|v| v.as_slice()).collect();
    let lowres: Option<Vec<&[f64]>> = examples.iter().map(|e| e.lowres.as_deref()).collect();
    let graphs: Vec<Option<&TissueGraph>> = examples.iter().map(|e| Some(&e.graph)).collect();
    let pred = denoiser.predict(&DenoiseRequest { x_t: &x_t, lowres: lowres.as_deref(), t: &noised.t, graphs: &graphs })?;
    let total: f64 = pred
        .iter()
        .zip(examples)
        .map(|(p, e)| p.iter().zip(&e.x0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum();
    let loss = total / examples.len() as f64;
    if !loss.is_finite() {
        return Err(non_finite_loss(&noised.t, schedule));
    }
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub cond_dropout: f64,
    /// Pixels per sample entering the loss each step (all when larger than
    /// the image); the estimate is rescaled to the full image.
    pub pixels_per_sample: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { steps: 2000, batch: 16, lr: 2e-3, cond_dropout: 0.1, pixels_per_sample: 256, checkpoint_every: 0 }
    }
}

/// Where and how often `train_stage` writes intermediate checkpoints.
pub struct CheckpointSink<'a> {
    pub path: &'a Path,
    pub schedule: &'a NoiseSchedule,
}

/// Adam on the per-step loss. Returns the loss history.
pub fn train_stage(
    model: &mut StageModel,
    schedule: &NoiseSchedule,
    examples: &[StageExample],
    config: &TrainConfig,
    seed: u64,
    sink: Option<CheckpointSink>,
) -> Result<Vec<f64>> {
    if examples.is_empty() {
        return Err(Error::InvalidInput("no training examples".into()));
    }
    let res = model.config.resolution;
    let ch = model.channels();
    for (i, ex) in examples.iter().enumerate() {
        if ex.x0.len() != res * res * ch {
            return Err(Error::shape("train_stage", format!("example {i} does not match stage resolution {res}")));
        }
    }
    if !(0.0..=1.0).contains(&config.cond_dropout) || config.batch == 0 || config.pixels_per_sample == 0 {
        return Err(Error::Config("train config needs batch > 0, pixels > 0, dropout in [0, 1]".into()));
    }
    let mut adam = AdamState::new(AdamConfig { lr: config.lr, ..AdamConfig::default() }, &model.store);
    let mut rng = rng::sub_rng(seed, &format!("train/stage{res}"));
    let npix = res * res;
    let keep = config.pixels_per_sample.min(npix);
    let mut history = Vec::with_capacity(config.steps);
    let mut initial = None;
    for step in 0..config.steps {
        let batch: Vec<&StageExample> = (0..config.batch).map(|_| &examples[rng.random_range(0..examples.len())]).collect();
        let noised = noise_batch(schedule, &batch, &mut rng)?;
        let graphs: Vec<Option<&TissueGraph>> =
            batch.iter().map(|e| if rng.random_bool(config.cond_dropout) { None } else { Some(&e.graph) }).collect();
        let pixels: Vec<Vec<usize>> = batch
            .iter()
            .map(|_| if keep == npix { (0..npix).collect() } else { rand::seq::index::sample(&mut rng, npix, keep).into_vec() })
            .collect();
        let x_t: Vec<&[f64]> = noised.x_t.iter().map(|v| v.as_slice()).collect();
        let lowres: Option<Vec<&[f64]>> = batch.iter().map(|e| e.lowres.as_deref()).collect();
        let prepared = model.prepare(schedule, &x_t, lowres.as_deref(), &noised.t, &graphs, Some(&pixels))?;
        let mut target = Vec::with_capacity(batch.len() * keep * ch);
        for (ex, px) in batch.iter().zip(&pixels) {
            for &p in px {
                target.extend_from_slice(&ex.x0[p * ch..(p + 1) * ch]);
            }
        }
        let mut tape = Tape::new();
        let pred = model.forward(&mut tape, &prepared)?;
        let target = tape.input(Tensor::matrix(batch.len() * keep, ch, target)?)?;
        let diff = tape.sub(pred, target)?;
        let sq = tape.mul(diff, diff)?;
        let sum = tape.sum(sq)?;
        let loss = tape.scale(sum, npix as f64 / keep as f64 / batch.len() as f64)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(non_finite_loss(&noised.t, schedule));
        }
        let init = *initial.get_or_insert(value);
        if value > 1e3 * init {
            return Err(Error::NumericOverflow {
                op: "train_stage",
                context: format!("stage {res} diverged at step {step}: loss {value:.4e} exceeds 1000x initial {init:.4e}"),
            });
        }
        let grads = tape.backward(loss)?.param_grads(&model.store);
        adam.step(&mut model.store, &grads)?;
        model.trained_steps += 1;
        history.push(value);
        if step % 100 == 0 {
            log::info!("stage {res} step {step} loss {value:.4}");
        }
        if let Some(sink) = &sink {
            if config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 {
                stage_checkpoint(model, sink.schedule)?.save(sink.path)?;
            }
        }
    }
    Ok(history)
}

/// Reverse-process sampling at one stage for a batch of samples.
///
/// Runs `steps` ancestral steps from `1 - eps` down to `eps` (the last one
/// noiseless) and returns the denoiser's estimate at `eps`, clamped to
/// `[-1, 1]`. Each sample draws noise from its own stream `seeds[b]`.
pub fn sample_stage(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    graphs: &[Option<&TissueGraph>],
    lowres: Option<&[Vec<f64>]>,
    steps: usize,
    gamma: f64,
    seeds: &[u64],
) -> Result<Vec<Vec<f64>>> {
    if steps == 0 {
        return Err(Error::Config("sampling needs at least one step".into()));
    }
    if seeds.len() != graphs.len() {
        return Err(Error::shape("sample_stage", "one seed per sample required"));
    }
    let size = denoiser.resolution() * denoiser.resolution() * denoiser.channels();
    let mut rngs: Vec<Rng> = seeds.iter().map(|&s| rng::sub_rng(s, &format!("sample/{}", denoiser.resolution()))).collect();
    let mut x: Vec<Vec<f64>> = rngs.iter_mut().map(|r| rng::normals(r, size)).collect();
    let low: Option<Vec<&[f64]>> = lowres.map(|l| l.iter().map(|v| v.as_slice()).collect());
    let grid = schedule.grid(steps);
    let predict = |x: &[Vec<f64>], t: f64| -> Result<Vec<Vec<f64>>> {
        let xs: Vec<&[f64]> = x.iter().map(|v| v.as_slice()).collect();
        let ts = vec![t; x.len()];
        let mut pred = denoiser.predict(&DenoiseRequest { x_t: &xs, lowres: low.as_deref(), t: &ts, graphs })?;
        for p in pred.iter_mut().flatten() {
            *p = p.clamp(-1.0, 1.0);
        }
        Ok(pred)
    };
    for w in grid.windows(2) {
        let (t, s) = (w[0], w[1]);
        let pred = predict(&x, t)?;
        for ((xb, pb), rb) in x.iter_mut().zip(&pred).zip(rngs.iter_mut()) {
            *xb = ancestral_step(schedule, xb, t, s, pb, gamma, rb)?;
        }
    }
    predict(&x, schedule.eps)
}

/// Run every stage in order; each super-resolution stage receives the
/// previous stage's output upsampled by nearest neighbour. Returns the
/// model-space output of every stage.
pub fn sample_cascade_with(
    stages: &[&dyn Denoiser],
    schedule: &NoiseSchedule,
    graphs: &[Option<&TissueGraph>],
    steps: &[usize],
    gammas: &[f64],
    seeds: &[u64],
) -> Result<Vec<Vec<Vec<f64>>>> {
    if stages.is_empty() || steps.len() != stages.len() || gammas.len() != stages.len() {
        return Err(Error::Config("one step count and gamma per stage required".into()));
    }
    let mut outputs: Vec<Vec<Vec<f64>>> = Vec::with_capacity(stages.len());
    for (k, stage) in stages.iter().enumerate() {
        let low = match outputs.last() {
            None => None,
            Some(prev) => {
                let from = stages[k - 1].resolution();
                Some(
                    prev.iter()
                        .map(|x| upsample(x, from, stage.resolution(), stage.channels()))
                        .collect::<Result<Vec<_>>>()?,
                )
            }
        };
        let stage_seeds: Vec<u64> = seeds.iter().map(|&s| rng::derive_seed(s, &format!("stage{k}"))).collect();
        outputs.push(sample_stage(*stage, schedule, graphs, low.as_deref(), steps[k], gammas[k], &stage_seeds)?);
    }
    Ok(outputs)
}

/// All trained stages plus the settings shared between them.
#[derive(Clone, Debug)]
pub struct Cascade {
    pub schedule: NoiseSchedule,
    pub stages: Vec<StageModel>,
}

pub const CASCADE_KIND: &str = "cascade";

impl Cascade {
    pub fn new(
        stages: Vec<StageConfig>,
        features: FeatureConfig,
        encoder: GraphEncoderConfig,
        schedule: NoiseSchedule,
        seed: u64,
    ) -> Result<Self> {
        for (k, s) in stages.iter().enumerate() {
            let prev = k.checked_sub(1).map(|p| stages[p].resolution);
            if s.lowres != prev {
                return Err(Error::Config(format!("stage {k} low-res input must be {prev:?}, got {:?}", s.lowres)));
            }
        }
        if stages.last().is_some_and(|s| s.resolution != features.height) {
            return Err(Error::Config("last stage must produce the base resolution".into()));
        }
        let stages = stages
            .into_iter()
            .enumerate()
            .map(|(k, cfg)| StageModel::new(cfg, features, encoder, rng::derive_seed(seed, &format!("stage{k}"))))
            .collect::<Result<_>>()?;
        Ok(Cascade { schedule, stages })
    }

    pub fn features(&self) -> &FeatureConfig {
        &self.stages[0].features
    }

    /// Generate one `(image, mask)` per entry of `graphs` (`None` samples
    /// unconditionally). `seeds[b]` fully determines sample `b`.
    pub fn sample(&self, graphs: &[Option<&TissueGraph>], seeds: &[u64]) -> Result<Vec<(RgbImage, LabeledMask)>> {
        self.sample_with(graphs, seeds, None, None)
    }

    pub fn sample_with(
        &self,
        graphs: &[Option<&TissueGraph>],
        seeds: &[u64],
        steps: Option<usize>,
        gamma: Option<f64>,
    ) -> Result<Vec<(RgbImage, LabeledMask)>> {
        for (k, s) in self.stages.iter().enumerate() {
            if s.trained_steps == 0 {
                return Err(Error::InvalidInput(format!("stage {k} ({}x{}) is untrained", s.config.resolution, s.config.resolution)));
            }
        }
        for g in graphs.iter().flatten() {
            g.validate(self.features().num_classes, self.features().n_max, Some((self.features().height, self.features().width)))?;
        }
        let dens: Vec<StageDenoiser> = self.stages.iter().map(|m| StageDenoiser { model: m, schedule: &self.schedule }).collect();
        let refs: Vec<&dyn Denoiser> = dens.iter().map(|d| d as &dyn Denoiser).collect();
        let steps: Vec<usize> = self.stages.iter().map(|s| steps.unwrap_or(s.config.steps)).collect();
        let gammas: Vec<f64> = self.stages.iter().map(|s| gamma.unwrap_or(s.config.gamma)).collect();
        let out = sample_cascade_with(&refs, &self.schedule, graphs, &steps, &gammas, seeds)?;
        let last = out.last().expect("at least one stage");
        let res = self.stages.last().expect("stage").config.resolution;
        last.iter().map(|x| decode_pair(x, res, self.features().num_classes)).collect()
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.meta.insert("kind".into(), CASCADE_KIND.into());
        ck.meta.insert("schedule".into(), serde_json::to_value(self.schedule)?);
        ck.meta.insert("features".into(), serde_json::to_value(self.features())?);
        ck.meta.insert("encoder".into(), serde_json::to_value(self.stages[0].encoder_config())?);
        let stages: Vec<serde_json::Value> = self
            .stages
            .iter()
            .map(|s| serde_json::json!({"config": s.config, "trained_steps": s.trained_steps}))
            .collect();
        ck.meta.insert("stages".into(), stages.into());
        for (k, s) in self.stages.iter().enumerate() {
            ck.extend(s.to_named(&format!("stage{k}.")));
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta.get("kind").and_then(|k| k.as_str()) != Some(CASCADE_KIND) {
            return Err(Error::InvalidInput("checkpoint is not a diffusion cascade".into()));
        }
        let get = |k: &str| ck.meta.get(k).cloned().ok_or_else(|| Error::InvalidInput(format!("checkpoint lacks '{k}'")));
        let schedule: NoiseSchedule = serde_json::from_value(get("schedule")?)?;
        let features: FeatureConfig = serde_json::from_value(get("features")?)?;
        let encoder: GraphEncoderConfig = serde_json::from_value(get("encoder")?)?;
        #[derive(Deserialize)]
        struct StageMeta {
            config: StageConfig,
            trained_steps: usize,
        }
        let metas: Vec<StageMeta> = serde_json::from_value(get("stages")?)?;
        let mut stages = Vec::with_capacity(metas.len());
        for (k, m) in metas.into_iter().enumerate() {
            let mut s = StageModel::new(m.config, features, encoder, 0)?;
            s.store.load_named(&ck.with_prefix(&format!("stage{k}.")))?;
            s.trained_steps = m.trained_steps;
            stages.push(s);
        }
        Ok(Cascade { schedule, stages })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact { stage: "train-diffusion", path: PathBuf::from(path) });
        }
        Cascade::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Single-stage checkpoint used for periodic saves during training.
pub fn stage_checkpoint(model: &StageModel, schedule: &NoiseSchedule) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new();
    ck.meta.insert("kind".into(), "stage".into());
    ck.meta.insert("schedule".into(), serde_json::to_value(schedule)?);
    ck.meta.insert("features".into(), serde_json::to_value(model.features)?);
    ck.meta.insert("encoder".into(), serde_json::to_value(model.encoder_config())?);
    ck.meta.insert("config".into(), serde_json::to_value(&model.config)?);
    ck.meta.insert("trained_steps".into(), model.trained_steps.into());
    ck.extend(model.to_named(""));
    Ok(ck)
}

/// Restore a stage saved by [`stage_checkpoint`].
pub fn stage_from_checkpoint(ck: &Checkpoint) -> Result<StageModel> {
    if ck.meta.get("kind").and_then(|k| k.as_str()) != Some("stage") {
        return Err(Error::InvalidInput("checkpoint is not a diffusion stage".into()));
    }
    let get = |k: &str| ck.meta.get(k).cloned().ok_or_else(|| Error::InvalidInput(format!("checkpoint lacks '{k}'")));
    let features: FeatureConfig = serde_json::from_value(get("features")?)?;
    let encoder: GraphEncoderConfig = serde_json::from_value(get("encoder")?)?;
    let config: StageConfig = serde_json::from_value(get("config")?)?;
    let mut s = StageModel::new(config, features, encoder, 0)?;
    s.store.load_named(&ck.tensors)?;
    s.trained_steps = serde_json::from_value(get("trained_steps")?)?;
    Ok(s)
}
