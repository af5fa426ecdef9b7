//! Experiment orchestration: synthetic data, graphs, embedder, cascades,
//! interventions, generation and evaluation, with per-stage caching keyed
//! by configuration hashes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Checkpoint;
use crate::diffusion::{encode_pair, stage_examples, train_stage, Cascade, NoiseSchedule, StageConfig, TrainConfig};
use crate::downstream::{Segmenter, SegmenterConfig};
use crate::embed::{mask_object, ByolConfig, ByolEncoder, FeatureConfig, FeatureLayout, ManualDescriptor, ObjectEmbedder, PixelDescriptor};
use crate::error::{Error, Result};
use crate::graphcond::GraphEncoderConfig;
use crate::image::{LabeledMask, RgbImage};
use crate::interventions::{InterventionKind, Intervener};
use crate::maskgraph::{build_graph, TissueGraph, GRAPH_EXTENSION};
use crate::metrics::{fid_from_features, improved_precision_recall, segmentation_scores, FeatureSet, FeatureSource, MetricsReport};
use crate::rng::derive_seed;
use crate::synthdata::{build_dataset, load_split, write_dataset, Sample, Split, SynthConfig};
use crate::util::{config_hash, read_json, write_json};

pub const REPORT_VERSION: u32 = 1;
pub const STAGE_MARKER: &str = "stage.json";
pub const EMBEDDER_FILE: &str = "embedder.ckpt.json";
pub const CASCADE_FILE: &str = "cascade.ckpt.json";
pub const SEGMENTER_FILE: &str = "segmenter.ckpt.json";
pub const REPORT_FILE: &str = "report.json";
pub const TABLE_FILE: &str = "ablation.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub synth: SynthConfig,
    pub n_train: usize,
    pub n_test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedderConfig {
    pub byol: ByolConfig,
    /// Masked object crops used for training, taken in sample order.
    pub max_crops: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    pub schedule: NoiseSchedule,
    pub stages: Vec<StageConfig>,
    pub encoder: GraphEncoderConfig,
    pub train: TrainConfig,
    /// Overrides of the per-stage sampling steps and gamma.
    pub sample_steps: Option<usize>,
    pub gamma: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterventionPlan {
    pub kind: InterventionKind,
    /// Graphs (and therefore generated pairs) produced for this kind.
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    pub segmenter: SegmenterConfig,
    /// Neighbourhood size of the precision/recall manifolds.
    pub k: usize,
    /// Pairs generated from unmodified training graphs.
    pub real_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_root: PathBuf,
    pub data: DataConfig,
    pub embedder: EmbedderConfig,
    pub features: FeatureConfig,
    pub layouts: Vec<FeatureLayout>,
    pub diffusion: DiffusionConfig,
    pub interventions: Vec<InterventionPlan>,
    pub evaluation: EvaluationConfig,
}

impl ExperimentConfig {
    /// Full ablation grid at desk scale.
    pub fn desk(output_root: PathBuf, seed: u64) -> Self {
        ExperimentConfig {
            seed,
            output_root,
            data: DataConfig { synth: SynthConfig::default(), n_train: 2000, n_test: 200 },
            embedder: EmbedderConfig { byol: ByolConfig::default(), max_crops: 200 },
            features: FeatureConfig::default(),
            layouts: FeatureLayout::ALL.to_vec(),
            diffusion: DiffusionConfig {
                schedule: NoiseSchedule::default(),
                stages: StageConfig::cascade(),
                encoder: GraphEncoderConfig::default(),
                train: TrainConfig { steps: 1000, ..TrainConfig::default() },
                sample_steps: None,
                gamma: None,
            },
            interventions: [InterventionKind::CutPaste, InterventionKind::CutPasteShort, InterventionKind::Interpolate]
                .into_iter()
                .map(|kind| InterventionPlan { kind, count: 200 })
                .collect(),
            evaluation: EvaluationConfig { segmenter: SegmenterConfig::default(), k: 3, real_count: 200 },
        }
    }

    /// Tiny end-to-end configuration: 8 training samples, 10 diffusion
    /// steps, one intervention.
    pub fn smoke(output_root: PathBuf, seed: u64) -> Self {
        let mut stages = StageConfig::cascade();
        for s in &mut stages {
            s.hidden = 16;
            s.ff_hidden = 16;
            s.blocks = 1;
            s.d_attn = 8;
            s.steps = 10;
        }
        ExperimentConfig {
            seed,
            output_root,
            data: DataConfig { synth: SynthConfig::default(), n_train: 8, n_test: 6 },
            embedder: EmbedderConfig { byol: ByolConfig { steps: 10, batch: 8, ..ByolConfig::default() }, max_crops: 32 },
            features: FeatureConfig::default(),
            layouts: vec![FeatureLayout::Extracted],
            diffusion: DiffusionConfig {
                schedule: NoiseSchedule::default(),
                stages,
                encoder: GraphEncoderConfig { d_model: 16, d_k: 16, ff_hidden: 16, layers: 1, ..GraphEncoderConfig::default() },
                train: TrainConfig { steps: 10, batch: 4, pixels_per_sample: 32, ..TrainConfig::default() },
                sample_steps: None,
                gamma: None,
            },
            interventions: vec![InterventionPlan { kind: InterventionKind::CutPasteShort, count: 6 }],
            evaluation: EvaluationConfig {
                segmenter: SegmenterConfig { steps: 20, batch: 64, hidden: 16, ..SegmenterConfig::default() },
                k: 3,
                real_count: 6,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.synth.validate()?;
        if self.data.n_train == 0 || self.data.n_test == 0 {
            return Err(Error::Config("data.n_train and data.n_test must be positive".into()));
        }
        if self.features.num_classes != self.data.synth.num_classes() {
            return Err(Error::Config("features.num_classes must match the synthetic class list".into()));
        }
        if (self.features.height, self.features.width) != (self.data.synth.height, self.data.synth.width) {
            return Err(Error::Config("features image size must match the synthetic image size".into()));
        }
        if self.features.embed_dim != self.embedder.byol.embed_dim {
            return Err(Error::Config("features.embed_dim must equal embedder.byol.embed_dim".into()));
        }
        let grid = (self.features.embed_dim as f64).sqrt() as usize;
        if self.layouts.contains(&FeatureLayout::Image) && grid * grid != self.features.embed_dim {
            return Err(Error::Config("image layout needs a square embed_dim".into()));
        }
        if self.layouts.is_empty() {
            return Err(Error::Config("at least one feature layout is required".into()));
        }
        if self.diffusion.encoder.f_dim != self.features.f_dim() {
            return Err(Error::Config(format!(
                "diffusion.encoder.f_dim is {} but the feature rows have {} entries",
                self.diffusion.encoder.f_dim,
                self.features.f_dim()
            )));
        }
        for s in &self.diffusion.stages {
            s.validate(self.features.height)?;
        }
        self.evaluation.segmenter.validate()?;
        if self.evaluation.segmenter.num_classes != self.features.num_classes {
            return Err(Error::Config("segmenter.num_classes must match features.num_classes".into()));
        }
        if self.evaluation.k == 0 {
            return Err(Error::Config("evaluation.k must be positive".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact { stage: "run", path: path.into() });
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hash of everything except the output location.
    pub fn hash(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        v.as_object_mut().expect("struct").remove("output_root");
        config_hash(&v)
    }
}

fn short(h: &str) -> &str {
    &h[..12]
}

#[derive(Serialize, Deserialize, PartialEq)]
struct Marker {
    stage: String,
    hash: String,
}

/// Run `body` into `dir` unless a marker with the same hash is present.
/// Returns whether the stage executed.
fn cached(dir: &Path, stage: &str, hash: &str, body: impl FnOnce(&Path) -> Result<()>) -> Result<bool> {
    let marker = dir.join(STAGE_MARKER);
    if marker.exists() {
        if let Ok(m) = read_json::<Marker>(&marker) {
            if m.hash == hash {
                log::info!("cache hit: {stage} ({})", short(hash));
                return Ok(false);
            }
        }
    }
    log::info!("running {stage} ({})", short(hash));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    body(dir)?;
    write_json(&marker, &Marker { stage: stage.into(), hash: hash.into() })?;
    Ok(true)
}

/// Masked crops of the first objects of `samples`.
pub fn object_crops(samples: &[Sample], max: usize) -> Result<Vec<RgbImage>> {
    let mut crops = Vec::new();
    for s in samples {
        for id in s.mask.instance_ids() {
            if crops.len() >= max {
                return Ok(crops);
            }
            crops.push(mask_object(&s.image, &s.mask, id)?);
        }
    }
    Ok(crops)
}

pub fn train_embedder(samples: &[Sample], cfg: &EmbedderConfig, seed: u64) -> Result<ByolEncoder> {
    let crops = object_crops(samples, cfg.max_crops)?;
    let mut enc = ByolEncoder::new(cfg.byol.clone(), derive_seed(seed, "embedder"))?;
    let hist = enc.train(&crops, derive_seed(seed, "embedder/train"))?;
    if let (Some(a), Some(b)) = (hist.first(), hist.last()) {
        log::info!("embedder loss {a:.4} -> {b:.4} over {} crops", crops.len());
    }
    Ok(enc)
}

pub fn load_embedder(path: &Path) -> Result<ByolEncoder> {
    if !path.exists() {
        return Err(Error::MissingArtifact { stage: "train-embedder", path: path.into() });
    }
    ByolEncoder::from_checkpoint(&Checkpoint::load(path)?)
}

/// Descriptor for a feature layout; the extracted layout needs the embedder.
pub fn descriptor<'a>(layout: FeatureLayout, features: &FeatureConfig, embedder: Option<&'a ByolEncoder>) -> Result<Box<dyn ObjectEmbedder + 'a>> {
    Ok(match layout {
        FeatureLayout::Extracted => {
            let e = embedder.ok_or(Error::MissingArtifact { stage: "train-embedder", path: PathBuf::from(EMBEDDER_FILE) })?;
            Box::new(EmbedderRef(e))
        }
        FeatureLayout::Image => Box::new(PixelDescriptor { grid: (features.embed_dim as f64).sqrt() as usize }),
        FeatureLayout::Manual => Box::new(ManualDescriptor { dim: features.embed_dim }),
    })
}

struct EmbedderRef<'a>(&'a ByolEncoder);

impl ObjectEmbedder for EmbedderRef<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn embed(&self, image: &RgbImage, mask: &LabeledMask, id: u32) -> Result<Vec<f64>> {
        self.0.embed(image, mask, id)
    }
}

pub fn extract_graphs(samples: &[Sample], features: &FeatureConfig, embedder: &dyn ObjectEmbedder) -> Result<Vec<TissueGraph>> {
    if embedder.dim() != features.embed_dim {
        return Err(Error::Config(format!("descriptor width {} differs from embed_dim {}", embedder.dim(), features.embed_dim)));
    }
    samples.iter().map(|s| build_graph(&s.mask, Some((&s.image, embedder)), features.n_max, 0)).collect()
}

pub fn save_graphs(dir: &Path, named: &[(String, TissueGraph)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (id, g) in named {
        g.save(&dir.join(format!("{id}.{GRAPH_EXTENSION}")))?;
    }
    Ok(())
}

/// Every `*.graph.json` under `dir`, sorted by file name.
pub fn load_graphs(dir: &Path) -> Result<Vec<(String, TissueGraph)>> {
    if !dir.is_dir() {
        return Err(Error::MissingArtifact { stage: "extract", path: dir.into() });
    }
    let suffix = format!(".{GRAPH_EXTENSION}");
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.ends_with(&suffix))
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|n| Ok((n.trim_end_matches(&suffix).to_string(), TissueGraph::load(&dir.join(&n))?)))
        .collect()
}

/// Train every stage of a fresh cascade on `(sample, graph)` pairs.
pub fn train_cascade(samples: &[Sample], graphs: &[TissueGraph], features: &FeatureConfig, cfg: &DiffusionConfig, seed: u64) -> Result<Cascade> {
    if samples.len() != graphs.len() || samples.is_empty() {
        return Err(Error::InvalidInput(format!("{} samples for {} graphs", samples.len(), graphs.len())));
    }
    let pairs: Vec<(Vec<f64>, TissueGraph)> = samples
        .iter()
        .zip(graphs)
        .map(|(s, g)| Ok((encode_pair(&s.image, &s.mask, features.num_classes)?, g.clone())))
        .collect::<Result<_>>()?;
    let mut cascade = Cascade::new(cfg.stages.clone(), *features, cfg.encoder, cfg.schedule, derive_seed(seed, "cascade"))?;
    let schedule = cascade.schedule;
    for (k, stage) in cascade.stages.iter_mut().enumerate() {
        let ex = stage_examples(&pairs, features.height, &stage.config, features.num_classes)?;
        let hist = train_stage(stage, &schedule, &ex, &cfg.train, derive_seed(seed, &format!("cascade/train{k}")), None)?;
        let w = hist.len().min(50);
        if w > 0 {
            let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
            log::info!(
                "stage {k} ({}px) loss {:.3} -> {:.3}",
                stage.config.resolution,
                mean(&hist[..w]),
                mean(&hist[hist.len() - w..])
            );
        }
    }
    Ok(cascade)
}

/// Sample one pair per graph; sample `i` uses a seed derived from `(seed, i)`.
pub fn generate(cascade: &Cascade, graphs: &[Option<&TissueGraph>], cfg: &DiffusionConfig, seed: u64) -> Result<Vec<(RgbImage, LabeledMask)>> {
    let mut out = Vec::with_capacity(graphs.len());
    for (c, chunk) in graphs.chunks(32).enumerate() {
        let seeds: Vec<u64> = (0..chunk.len()).map(|i| derive_seed(seed, &format!("sample/{}", c * 32 + i))).collect();
        out.extend(cascade.sample_with(chunk, &seeds, cfg.sample_steps, cfg.gamma)?);
    }
    Ok(out)
}

/// `count` graphs of the given kind built from `sources`. `None` returns
/// the sources themselves, cycled.
pub fn plan_graphs(sources: &[TissueGraph], kind: Option<InterventionKind>, count: usize, features: &FeatureConfig, seed: u64) -> Result<Vec<TissueGraph>> {
    if sources.is_empty() {
        return Err(Error::InvalidInput("no source graphs".into()));
    }
    let Some(kind) = kind else {
        return Ok((0..count).map(|i| sources[i % sources.len()].clone()).collect());
    };
    let it = Intervener::new(sources, features.num_classes, features.n_max, (features.height, features.width))?;
    (0..count)
        .map(|i| {
            let s = derive_seed(seed, &format!("{}/{i}", kind.name()));
            let spec = it.random_spec(kind, s)?;
            it.apply(&spec, s)
        })
        .collect()
}

pub fn method_name(kind: Option<InterventionKind>) -> &'static str {
    kind.map_or("real", |k| k.name())
}

/// IP, IR and FID of generated images against real ones in embedder space.
pub fn fidelity(embedder: &ByolEncoder, real: &[RgbImage], generated: &[RgbImage], k: usize) -> Result<(f64, f64, f64)> {
    let fr = FeatureSet::from_rows(&embedder.encode_images(real)?, FeatureSource::Real)?;
    let fg = FeatureSet::from_rows(&embedder.encode_images(generated)?, FeatureSource::Generated)?;
    let (ip, ir) = improved_precision_recall(&fr, &fg, k)?;
    Ok((ip, ir, fid_from_features(&fr, &fg)?))
}

pub fn train_segmenter(pairs: &[(RgbImage, LabeledMask)], cfg: &SegmenterConfig, seed: u64) -> Result<Segmenter> {
    let mut s = Segmenter::new(cfg.clone(), derive_seed(seed, "segmenter"))?;
    s.train(pairs, derive_seed(seed, "segmenter/train"))?;
    Ok(s)
}

/// Mean Dice and AJI of `segmenter` on held-out samples.
pub fn segment_eval(segmenter: &Segmenter, test: &[Sample]) -> Result<(f64, f64)> {
    let pairs = test
        .iter()
        .map(|s| Ok((segmenter.predict_mask(&s.image)?, s.mask.clone())))
        .collect::<Result<Vec<_>>>()?;
    segmentation_scores(&pairs)
}

pub fn to_samples(pairs: Vec<(RgbImage, LabeledMask)>, prefix: &str) -> Vec<Sample> {
    pairs
        .into_iter()
        .enumerate()
        .map(|(i, (image, mask))| Sample { id: format!("{prefix}_{i:05}"), image, mask })
        .collect()
}

fn pairs_of(samples: &[Sample]) -> Vec<(RgbImage, LabeledMask)> {
    samples.iter().map(|s| (s.image.clone(), s.mask.clone())).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub method: String,
    pub encoding: FeatureLayout,
    #[serde(flatten)]
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub version: u32,
    pub config_hash: String,
    /// Segmenter trained on the real training split.
    pub original: MetricsReport,
    pub rows: Vec<AblationRow>,
}

/// Paths of one finished run.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub table: PathBuf,
    pub reports: BTreeMap<String, PathBuf>,
    /// Stages that executed (not cache hits).
    pub executed: Vec<String>,
}

pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let root = &cfg.output_root;
    let seed = cfg.seed;
    let mut executed = Vec::new();
    let mut note = |ran: bool, name: String| {
        if ran {
            executed.push(name);
        }
    };

    let data_hash = config_hash(&(seed, &cfg.data))?;
    let data_dir = root.join(format!("data-{}", short(&data_hash)));
    note(
        cached(&data_dir, "synth", &data_hash, |d| {
            build_dataset(&cfg.data.synth, cfg.data.n_train, cfg.data.n_test, derive_seed(seed, "data"), d).map(|_| ())
        })?,
        "synth".into(),
    );
    let (_, train) = load_split(&data_dir, Split::Train)?;
    let (_, test) = load_split(&data_dir, Split::Test)?;

    let embed_hash = config_hash(&(&data_hash, &cfg.embedder, seed))?;
    let embed_dir = root.join(format!("embedder-{}", short(&embed_hash)));
    note(
        cached(&embed_dir, "train-embedder", &embed_hash, |d| train_embedder(&train, &cfg.embedder, seed)?.to_checkpoint()?.save(&d.join(EMBEDDER_FILE)))?,
        "train-embedder".into(),
    );
    let embedder = load_embedder(&embed_dir.join(EMBEDDER_FILE))?;

    let seg_hash = config_hash(&(&data_hash, &cfg.evaluation.segmenter, seed))?;
    let seg_dir = root.join(format!("original-{}", short(&seg_hash)));
    note(
        cached(&seg_dir, "segment-original", &seg_hash, |d| {
            let seg = train_segmenter(&pairs_of(&train), &cfg.evaluation.segmenter, seed)?;
            seg.save(&d.join(SEGMENTER_FILE))?;
            let (dice, aji) = segment_eval(&seg, &test)?;
            write_json(&d.join(REPORT_FILE), &MetricsReport { dice: Some(dice), aji: Some(aji), ..Default::default() })
        })?,
        "segment-original".into(),
    );
    let original: MetricsReport = read_json(&seg_dir.join(REPORT_FILE))?;

    let real_test: Vec<RgbImage> = test.iter().map(|s| s.image.clone()).collect();
    let mut rows = Vec::new();
    let mut reports = BTreeMap::new();
    for &layout in &cfg.layouts {
        let graph_hash = config_hash(&(&data_hash, layout, &cfg.features, (layout == FeatureLayout::Extracted).then_some(&embed_hash)))?;
        let graph_dir = root.join(format!("graphs-{}-{}", layout.name(), short(&graph_hash)));
        note(
            cached(&graph_dir, "extract", &graph_hash, |d| {
                let desc = descriptor(layout, &cfg.features, Some(&embedder))?;
                let graphs = extract_graphs(&train, &cfg.features, desc.as_ref())?;
                let named: Vec<(String, TissueGraph)> = train.iter().map(|s| s.id.clone()).zip(graphs).collect();
                save_graphs(d, &named)
            })?,
            format!("extract/{}", layout.name()),
        );
        let graphs: Vec<TissueGraph> = load_graphs(&graph_dir)?.into_iter().map(|(_, g)| g).collect();

        let casc_hash = config_hash(&(&graph_hash, &cfg.diffusion.stages, &cfg.diffusion.encoder, &cfg.diffusion.schedule, &cfg.diffusion.train, seed))?;
        let casc_dir = root.join(format!("cascade-{}-{}", layout.name(), short(&casc_hash)));
        note(
            cached(&casc_dir, "train-diffusion", &casc_hash, |d| {
                train_cascade(&train, &graphs, &cfg.features, &cfg.diffusion, seed)?.save(&d.join(CASCADE_FILE))
            })?,
            format!("train-diffusion/{}", layout.name()),
        );
        let cascade = Cascade::load(&casc_dir.join(CASCADE_FILE))?;

        let methods: Vec<(Option<InterventionKind>, usize)> = std::iter::once((None, cfg.evaluation.real_count))
            .chain(cfg.interventions.iter().map(|p| (Some(p.kind), p.count)))
            .collect();
        for (kind, count) in methods {
            let name = format!("{}-{}", method_name(kind), layout.name());
            let m_hash = config_hash(&(
                &casc_hash,
                method_name(kind),
                count,
                cfg.diffusion.sample_steps,
                cfg.diffusion.gamma,
                &cfg.evaluation,
                seed,
            ))?;
            let m_dir = root.join(format!("method-{name}-{}", short(&m_hash)));
            note(
                cached(&m_dir, "sample+evaluate", &m_hash, |d| {
                    let mseed = derive_seed(seed, &name);
                    let new_graphs = plan_graphs(&graphs, kind, count, &cfg.features, mseed)?;
                    let named: Vec<(String, TissueGraph)> =
                        new_graphs.iter().enumerate().map(|(i, g)| (format!("graph_{i:05}"), g.clone())).collect();
                    save_graphs(&d.join("graphs"), &named)?;
                    let refs: Vec<Option<&TissueGraph>> = new_graphs.iter().map(Some).collect();
                    let generated = generate(&cascade, &refs, &cfg.diffusion, mseed)?;
                    let seg = train_segmenter(&generated, &cfg.evaluation.segmenter, mseed)?;
                    let (dice, aji) = segment_eval(&seg, &test)?;
                    let gen_images: Vec<RgbImage> = generated.iter().map(|p| p.0.clone()).collect();
                    let (ip, ir, fid) = fidelity(&embedder, &real_test, &gen_images, cfg.evaluation.k)?;
                    let samples: Vec<(Sample, Split)> =
                        to_samples(generated, "gen").into_iter().map(|s| (s, Split::Train)).collect();
                    write_dataset(&cfg.data.synth, mseed, &samples, &d.join("generated"))?;
                    seg.save(&d.join(SEGMENTER_FILE))?;
                    let report = MetricsReport { ip: Some(ip), ir: Some(ir), fid: Some(fid), dice: Some(dice), aji: Some(aji) };
                    report.validate()?;
                    write_json(&d.join(REPORT_FILE), &report)
                })?,
                format!("method/{name}"),
            );
            let metrics: MetricsReport = read_json(&m_dir.join(REPORT_FILE))?;
            reports.insert(name, m_dir.join(REPORT_FILE));
            rows.push(AblationRow { method: method_name(kind).into(), encoding: layout, metrics });
        }
    }

    let table = AblationTable { version: REPORT_VERSION, config_hash: cfg.hash()?, original, rows };
    let table_path = root.join(TABLE_FILE);
    write_json(&table_path, &table)?;
    Ok(RunOutput { table: table_path, reports, executed })
}
