use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use gcdlab::diffusion::Cascade;
use gcdlab::downstream::Segmenter;
use gcdlab::embed::FeatureLayout;
use gcdlab::image::RgbImage;
use gcdlab::interventions::{InterventionKind, InterventionSpec, Intervener};
use gcdlab::maskgraph::TissueGraph;
use gcdlab::metrics::MetricsReport;
use gcdlab::pipeline::{self, AblationTable, ExperimentConfig};
use gcdlab::rng::derive_seed;
use gcdlab::synthdata::{build_dataset, load_split, write_dataset, DatasetManifest, Sample, Split};
use gcdlab::util::{read_json, write_json};
use gcdlab::{Error, Result};

#[derive(Parser)]
#[command(name = "gcdlab", version, about = "Graph-conditioned cascaded diffusion at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Remove,
    Change,
    Cutpaste,
    CutpasteShort,
    Interp,
}

#[derive(Clone, Copy, ValueEnum)]
enum Layout {
    Extracted,
    Image,
    Manual,
}

impl From<Layout> for FeatureLayout {
    fn from(l: Layout) -> Self {
        match l {
            Layout::Extracted => FeatureLayout::Extracted,
            Layout::Image => FeatureLayout::Image,
            Layout::Manual => FeatureLayout::Manual,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Smoke,
}

#[derive(Subcommand)]
enum Command {
    /// Write an experiment configuration to start from.
    Config {
        #[arg(long, value_enum, default_value = "desk")]
        preset: Preset,
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the self-supervised object embedder on a dataset's training split.
    TrainEmbedder {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Extract one graph per sample.
    Extract {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "extracted")]
        layout: Layout,
        #[arg(long)]
        embedder: Option<PathBuf>,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a cascade on a training split and its extracted graphs.
    TrainDiffusion {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        graphs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Apply an intervention to a directory of graphs.
    Intervene {
        #[arg(long)]
        graphs: PathBuf,
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long)]
        node: Option<usize>,
        #[arg(long)]
        to_class: Option<u8>,
        #[arg(long)]
        t: Option<f64>,
        /// Outputs for the composing kinds (defaults to the input count).
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Generate one (image, mask) pair per graph.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        graphs: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        gamma: Option<f64>,
    },
    /// Train the patch segmenter on every pair of a dataset directory.
    SegmentTrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Dice and AJI of a segmenter on a dataset's test split.
    SegmentEval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// IP, IR and FID of generated against real (test split) images.
    Evaluate {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        gen: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        k: usize,
    },
    /// Print the ablation table of a finished run.
    Report {
        #[arg(long)]
        root: PathBuf,
    },
    /// Full pipeline from an experiment configuration.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
}

fn experiment(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::desk(PathBuf::from("runs"), 0)),
    }
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(Error::Config(format!("split must be 'train' or 'test', got '{other}'"))),
    }
}

/// Every sample of a dataset directory regardless of split.
fn load_all(dir: &Path) -> Result<(DatasetManifest, Vec<Sample>)> {
    let (m, mut a) = load_split(dir, Split::Train)?;
    a.extend(load_split(dir, Split::Test)?.1);
    Ok((m, a))
}

fn intervene(graphs: &[(String, TissueGraph)], cmd: &Command, cfg: &ExperimentConfig) -> Result<Vec<(String, TissueGraph)>> {
    let Command::Intervene { kind, node, to_class, t, count, seed, .. } = cmd else { unreachable!() };
    let plain: Vec<TissueGraph> = graphs.iter().map(|(_, g)| g.clone()).collect();
    let f = &cfg.features;
    let it = Intervener::new(&plain, f.num_classes, f.n_max, (f.height, f.width))?;
    let count = count.unwrap_or(plain.len());
    let mut out = Vec::new();
    match kind {
        Kind::Remove | Kind::Change => {
            for (i, (id, g)) in graphs.iter().enumerate() {
                if g.is_empty() {
                    log::warn!("{id}: empty graph skipped");
                    continue;
                }
                let s = derive_seed(*seed, &format!("graph/{i}"));
                let ik = if matches!(kind, Kind::Remove) { InterventionKind::Remove } else { InterventionKind::ChangeClass };
                let spec = match (it.random_spec(ik, s)?, node, to_class) {
                    (InterventionSpec::Remove { .. }, Some(v), _) => InterventionSpec::Remove { graph: i, node: *v },
                    (InterventionSpec::Remove { node: v, .. }, None, _) => InterventionSpec::Remove { graph: i, node: v % g.len() },
                    (InterventionSpec::ChangeClass { node: rv, to_class: rc, .. }, v, c) => InterventionSpec::ChangeClass {
                        graph: i,
                        node: v.unwrap_or(rv % g.len()),
                        to_class: c.unwrap_or(rc),
                    },
                    _ => unreachable!(),
                };
                out.push((id.clone(), it.apply(&spec, s)?));
            }
        }
        Kind::Cutpaste | Kind::CutpasteShort | Kind::Interp => {
            let ik = match kind {
                Kind::Cutpaste => InterventionKind::CutPaste,
                Kind::CutpasteShort => InterventionKind::CutPasteShort,
                _ => InterventionKind::Interpolate,
            };
            for i in 0..count {
                let s = derive_seed(*seed, &format!("graph/{i}"));
                let mut spec = it.random_spec(ik, s)?;
                if let (InterventionSpec::Interpolate { t: tt, .. }, Some(v)) = (&mut spec, t) {
                    *tt = *v;
                }
                out.push((format!("graph_{i:05}"), it.apply(&spec, s)?));
            }
        }
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Config { preset, root, seed, out } => {
            let cfg = match preset {
                Preset::Desk => ExperimentConfig::desk(root.clone(), *seed),
                Preset::Smoke => ExperimentConfig::smoke(root.clone(), *seed),
            };
            write_json(out, &cfg)
        }
        Command::Synth { out, seed, n_train, n_test, config } => {
            let cfg = experiment(config.as_deref())?;
            let m = build_dataset(
                &cfg.data.synth,
                n_train.unwrap_or(cfg.data.n_train),
                n_test.unwrap_or(cfg.data.n_test),
                *seed,
                out,
            )?;
            println!("wrote {} samples to {}", m.records.len(), out.display());
            Ok(())
        }
        Command::TrainEmbedder { data, out, seed, config } => {
            let cfg = experiment(config.as_deref())?;
            let (_, train) = load_split(data, Split::Train)?;
            pipeline::train_embedder(&train, &cfg.embedder, *seed)?.to_checkpoint()?.save(out)
        }
        Command::Extract { data, out, layout, embedder, split, config } => {
            let cfg = experiment(config.as_deref())?;
            let (_, samples) = load_split(data, parse_split(split)?)?;
            let enc = embedder.as_deref().map(pipeline::load_embedder).transpose()?;
            let layout = FeatureLayout::from(*layout);
            if layout == FeatureLayout::Extracted && enc.is_none() {
                return Err(Error::Config("--layout extracted needs --embedder <ckpt>".into()));
            }
            let desc = pipeline::descriptor(layout, &cfg.features, enc.as_ref())?;
            let graphs = pipeline::extract_graphs(&samples, &cfg.features, desc.as_ref())?;
            let named: Vec<(String, TissueGraph)> = samples.iter().map(|s| s.id.clone()).zip(graphs).collect();
            pipeline::save_graphs(out, &named)?;
            println!("wrote {} graphs to {}", named.len(), out.display());
            Ok(())
        }
        Command::TrainDiffusion { data, graphs, out, seed, config } => {
            let cfg = experiment(config.as_deref())?;
            let (_, train) = load_split(data, Split::Train)?;
            let named = pipeline::load_graphs(graphs)?;
            let by_id: std::collections::BTreeMap<&str, &TissueGraph> = named.iter().map(|(k, g)| (k.as_str(), g)).collect();
            let gs = train
                .iter()
                .map(|s| {
                    by_id
                        .get(s.id.as_str())
                        .map(|g| (*g).clone())
                        .ok_or_else(|| Error::MissingArtifact { stage: "extract", path: graphs.join(&s.id) })
                })
                .collect::<Result<Vec<_>>>()?;
            pipeline::train_cascade(&train, &gs, &cfg.features, &cfg.diffusion, *seed)?.save(out)
        }
        Command::Intervene { graphs, out, config, .. } => {
            let cfg = experiment(config.as_deref())?;
            let named = pipeline::load_graphs(graphs)?;
            let result = intervene(&named, &cli.command, &cfg)?;
            pipeline::save_graphs(out, &result)?;
            println!("wrote {} graphs to {}", result.len(), out.display());
            Ok(())
        }
        Command::Sample { ckpt, graphs, seed, out, steps, gamma } => {
            let cascade = Cascade::load(ckpt)?;
            let named = pipeline::load_graphs(graphs)?;
            let refs: Vec<Option<&TissueGraph>> = named.iter().map(|(_, g)| Some(g)).collect();
            let mut dcfg = ExperimentConfig::desk(PathBuf::new(), 0).diffusion;
            dcfg.sample_steps = *steps;
            dcfg.gamma = *gamma;
            let pairs = pipeline::generate(&cascade, &refs, &dcfg, *seed)?;
            let samples: Vec<(Sample, Split)> = named
                .iter()
                .zip(pairs)
                .map(|((id, _), (image, mask))| (Sample { id: id.clone(), image, mask }, Split::Train))
                .collect();
            let mut synth = gcdlab::synthdata::SynthConfig::default();
            let f = cascade.features();
            synth.height = f.height;
            synth.width = f.width;
            synth.classes.truncate(f.num_classes);
            write_dataset(&synth, *seed, &samples, out)?;
            println!("wrote {} samples to {}", samples.len(), out.display());
            Ok(())
        }
        Command::SegmentTrain { data, out, seed, config } => {
            let cfg = experiment(config.as_deref())?;
            let (_, samples) = load_split(data, Split::Train)?;
            let pairs: Vec<_> = samples.into_iter().map(|s| (s.image, s.mask)).collect();
            pipeline::train_segmenter(&pairs, &cfg.evaluation.segmenter, *seed)?.save(out)
        }
        Command::SegmentEval { ckpt, test, out } => {
            let seg = Segmenter::load(ckpt)?;
            let (_, samples) = load_split(test, Split::Test)?;
            let (dice, aji) = pipeline::segment_eval(&seg, &samples)?;
            let report = MetricsReport { dice: Some(dice), aji: Some(aji), ..Default::default() };
            write_json(out, &report)?;
            println!("dice {dice:.2} aji {aji:.2}");
            Ok(())
        }
        Command::Evaluate { real, gen, ckpt, out, k } => {
            let enc = pipeline::load_embedder(ckpt)?;
            let (_, real) = load_split(real, Split::Test)?;
            let (_, gen) = load_all(gen)?;
            let imgs = |s: Vec<Sample>| -> Vec<RgbImage> { s.into_iter().map(|x| x.image).collect() };
            let (ip, ir, fid) = pipeline::fidelity(&enc, &imgs(real), &imgs(gen), *k)?;
            write_json(out, &MetricsReport { ip: Some(ip), ir: Some(ir), fid: Some(fid), ..Default::default() })?;
            println!("ip {ip:.3} ir {ir:.3} fid {fid:.4}");
            Ok(())
        }
        Command::Report { root } => {
            let path = root.join(pipeline::TABLE_FILE);
            if !path.exists() {
                return Err(Error::MissingArtifact { stage: "run", path });
            }
            let table: AblationTable = read_json(&path)?;
            let cell = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
            println!("{:<18} {:<10} {:>7} {:>7} {:>9} {:>7} {:>7}", "method", "encoding", "ip", "ir", "fid", "dice", "aji");
            let o = &table.original;
            println!("{:<18} {:<10} {:>7} {:>7} {:>9} {:>7} {:>7}", "original", "-", "-", "-", "-", cell(o.dice), cell(o.aji));
            for r in &table.rows {
                let m = &r.metrics;
                println!(
                    "{:<18} {:<10} {:>7} {:>7} {:>9} {:>7} {:>7}",
                    r.method,
                    r.encoding.name(),
                    cell(m.ip),
                    cell(m.ir),
                    cell(m.fid),
                    cell(m.dice),
                    cell(m.aji)
                );
            }
            Ok(())
        }
        Command::Run { config } => {
            let cfg = ExperimentConfig::load(config)?;
            let out = pipeline::run_pipeline(&cfg)?;
            println!("ablation table: {}", out.table.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
