//! Procedural "tissue-like" scenes: non-overlapping textured ellipses of a
//! few semantic classes on a noisy background, with exact instance masks.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ClassLabel, LabeledMask, RgbImage};
use crate::rng::{self, derive_seed, Rng};
use crate::util::{config_hash, read_json, write_json};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    /// Inclusive object-count range.
    pub count: (usize, usize),
    /// Semi-axis ranges in pixels.
    pub major: (f64, f64),
    pub minor: (f64, f64),
    pub color: [f64; 3],
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub classes: Vec<ClassSpec>,
    pub background: [f64; 3],
    pub background_noise: f64,
    /// Minimum number of background pixels between two objects.
    pub margin: usize,
    pub max_retries: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 32,
            width: 32,
            classes: vec![
                ClassSpec {
                    name: "tubule".into(),
                    count: (1, 6),
                    major: (2.0, 3.0),
                    minor: (1.4, 2.0),
                    color: [0.86, 0.48, 0.62],
                    noise: 0.04,
                },
                ClassSpec {
                    name: "glomerulus".into(),
                    count: (0, 2),
                    major: (3.6, 4.6),
                    minor: (3.2, 4.0),
                    color: [0.45, 0.22, 0.62],
                    noise: 0.04,
                },
                ClassSpec {
                    name: "vessel".into(),
                    count: (0, 5),
                    major: (1.6, 2.4),
                    minor: (1.0, 1.3),
                    color: [0.78, 0.12, 0.18],
                    noise: 0.04,
                },
            ],
            background: [0.94, 0.88, 0.90],
            background_noise: 0.03,
            margin: 2,
            max_retries: 1000,
        }
    }
}

impl SynthConfig {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// An empty scene of the same geometry.
    pub fn without_objects(&self) -> Self {
        let mut c = self.clone();
        for spec in &mut c.classes {
            spec.count = (0, 0);
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        if self.classes.is_empty() || self.classes.len() > u8::MAX as usize {
            return Err(Error::Config("need between 1 and 255 classes".into()));
        }
        for (i, c) in self.classes.iter().enumerate() {
            let ok = c.count.0 <= c.count.1
                && c.major.0 <= c.major.1
                && c.minor.0 <= c.minor.1
                && c.minor.0 >= 1.0
                && c.minor.1 <= c.major.1
                && c.noise >= 0.0;
            if !ok {
                return Err(Error::Config(format!("class {} ({}) has inconsistent ranges (minor semi-axis must be >= 1)", i + 1, c.name)));
            }
        }
        Ok(())
    }
}

struct Placed {
    pixels: Vec<(usize, usize)>,
}

fn rasterize_ellipse(cr: f64, cc: f64, a: f64, b: f64, theta: f64, h: usize, w: usize) -> Vec<(usize, usize)> {
    let (s, c) = theta.sin_cos();
    let er = (a * a * s * s + b * b * c * c).sqrt();
    let ec = (a * a * c * c + b * b * s * s).sqrt();
    let r0 = (cr - er).floor().max(0.0) as usize;
    let r1 = ((cr + er).ceil() as usize).min(h - 1);
    let c0 = (cc - ec).floor().max(0.0) as usize;
    let c1 = ((cc + ec).ceil() as usize).min(w - 1);
    let mut out = Vec::new();
    for r in r0..=r1 {
        for col in c0..=c1 {
            let dr = r as f64 - cr;
            let dc = col as f64 - cc;
            // major axis direction (row, col) = (sin, cos)
            let u = dr * s + dc * c;
            let v = dr * c - dc * s;
            if (u / a).powi(2) + (v / b).powi(2) <= 1.0 {
                out.push((r, col));
            }
        }
    }
    out
}

fn eight_connected(pixels: &[(usize, usize)]) -> bool {
    if pixels.is_empty() {
        return false;
    }
    let set: std::collections::HashSet<(usize, usize)> = pixels.iter().copied().collect();
    let mut seen = std::collections::HashSet::new();
    let mut stack = vec![pixels[0]];
    seen.insert(pixels[0]);
    while let Some((r, c)) = stack.pop() {
        for dr in -1isize..=1 {
            for dc in -1isize..=1 {
                let q = ((r as isize + dr) as usize, (c as isize + dc) as usize);
                if set.contains(&q) && seen.insert(q) {
                    stack.push(q);
                }
            }
        }
    }
    seen.len() == set.len()
}

/// Draw one scene. Pure in `(seed, config)`.
pub fn generate_sample(seed: u64, config: &SynthConfig) -> Result<(RgbImage, LabeledMask)> {
    config.validate()?;
    let (h, w) = (config.height, config.width);
    let mut rng = rng::rng(seed);

    // Larger classes first so packing rarely fails.
    let mut order: Vec<usize> = (0..config.classes.len()).collect();
    order.sort_by(|&x, &y| config.classes[y].major.1.total_cmp(&config.classes[x].major.1).then(x.cmp(&y)));
    let counts: Vec<usize> = config.classes.iter().map(|c| rng.random_range(c.count.0..=c.count.1)).collect();

    let mut ids = vec![0u32; h * w];
    let mut blocked = vec![false; h * w];
    let mut classes: BTreeMap<u32, ClassLabel> = BTreeMap::new();
    let mut placed: Vec<(usize, Placed)> = Vec::new();

    for &ci in &order {
        let spec = &config.classes[ci];
        for _ in 0..counts[ci] {
            let mut accepted = None;
            for _ in 0..config.max_retries {
                let a = sample_range(&mut rng, spec.major);
                let b = sample_range(&mut rng, spec.minor).min(a);
                let theta = rng.random_range(0.0..std::f64::consts::PI);
                let (s, c) = theta.sin_cos();
                let er = (a * a * s * s + b * b * c * c).sqrt();
                let ec = (a * a * c * c + b * b * s * s).sqrt();
                if 2.0 * er > (h - 1) as f64 || 2.0 * ec > (w - 1) as f64 {
                    continue;
                }
                let cr = rng.random_range(er..=(h - 1) as f64 - er);
                let cc = rng.random_range(ec..=(w - 1) as f64 - ec);
                let pixels = rasterize_ellipse(cr, cc, a, b, theta, h, w);
                if pixels.iter().any(|&(r, c)| blocked[r * w + c]) || !eight_connected(&pixels) {
                    continue;
                }
                accepted = Some(pixels);
                break;
            }
            let pixels = accepted.ok_or_else(|| Error::Capacity {
                what: format!(
                    "could not place a '{}' object without overlap after {} retries; use smaller object counts or sizes",
                    spec.name, config.max_retries
                ),
                limit: config.max_retries,
            })?;
            let id = placed.len() as u32 + 1;
            let m = config.margin as isize;
            for &(r, c) in &pixels {
                assert_eq!(ids[r * w + c], 0, "overlapping instances");
                ids[r * w + c] = id;
                for dr in -m..=m {
                    for dc in -m..=m {
                        let (nr, nc) = (r as isize + dr, c as isize + dc);
                        if nr >= 0 && nc >= 0 && (nr as usize) < h && (nc as usize) < w {
                            blocked[nr as usize * w + nc as usize] = true;
                        }
                    }
                }
            }
            classes.insert(id, (ci + 1) as ClassLabel);
            placed.push((ci, Placed { pixels }));
        }
    }

    let mut image = RgbImage::filled(h, w, [0.0; 3]);
    for r in 0..h {
        for c in 0..w {
            let id = ids[r * w + c];
            let (base, amp) = if id == 0 {
                (config.background, config.background_noise)
            } else {
                let spec = &config.classes[classes[&id] as usize - 1];
                (spec.color, spec.noise)
            };
            let px = [0, 1, 2].map(|k| base[k] + amp * rng::normal(&mut rng));
            image.set_pixel(r, c, px);
        }
    }
    debug_assert!(placed.iter().all(|(_, p)| !p.pixels.is_empty()));
    let mask = LabeledMask::new(h, w, ids, classes)?;
    Ok((image, mask))
}

fn sample_range(rng: &mut Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

pub fn sample_seed(dataset_seed: u64, index: usize) -> u64 {
    derive_seed(dataset_seed, &format!("sample/{index}"))
}

/// Generate `n` scenes in memory with the same per-index seeds `build_dataset` uses.
pub fn generate_samples(config: &SynthConfig, n: usize, seed: u64) -> Result<Vec<(RgbImage, LabeledMask)>> {
    (0..n).map(|i| generate_sample(sample_seed(seed, i), config)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
    pub class_map: PathBuf,
    pub split: Split,
}

/// `manifest.json` of a dataset directory; paths are relative to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub test_fraction: f64,
    pub config: SynthConfig,
    pub records: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn count(&self, split: Split) -> usize {
        self.records.iter().filter(|r| r.split == split).count()
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(Error::MissingArtifact { stage: "synth", path });
        }
        read_json(&path)
    }
}

/// Write `n_train + n_test` scenes plus a manifest under `out`.
pub fn build_dataset(config: &SynthConfig, n_train: usize, n_test: usize, seed: u64, out: &Path) -> Result<DatasetManifest> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::Config("n_train and n_test must both be positive".into()));
    }
    config.validate()?;
    let total = n_train + n_test;
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut rng::sub_rng(seed, "split"));
    let mut is_test = vec![false; total];
    for &i in &order[..n_test] {
        is_test[i] = true;
    }
    let samples = (0..total)
        .map(|i| {
            let (image, mask) = generate_sample(sample_seed(seed, i), config)?;
            let split = if is_test[i] { Split::Test } else { Split::Train };
            Ok((Sample { id: format!("sample_{i:05}"), image, mask }, split))
        })
        .collect::<Result<Vec<_>>>()?;
    write_dataset(config, seed, &samples, out)
}

/// Write samples and their manifest under `out`. `config` records the
/// geometry and class list the samples follow.
pub fn write_dataset(config: &SynthConfig, seed: u64, samples: &[(Sample, Split)], out: &Path) -> Result<DatasetManifest> {
    for sub in ["images", "masks"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut records = Vec::with_capacity(samples.len());
    for (s, split) in samples {
        let rec = SampleRecord {
            image: PathBuf::from(format!("images/{}.ppm", s.id)),
            mask: PathBuf::from(format!("masks/{}.pgm", s.id)),
            class_map: PathBuf::from(format!("masks/{}.classes.json", s.id)),
            split: *split,
            id: s.id.clone(),
        };
        s.image.write_ppm(&out.join(&rec.image))?;
        s.mask.write_pgm(&out.join(&rec.mask))?;
        s.mask.write_class_map(&out.join(&rec.class_map), config.num_classes())?;
        records.push(rec);
    }
    let n_test = records.iter().filter(|r| r.split == Split::Test).count();
    let manifest = DatasetManifest {
        version: 1,
        seed,
        config_hash: config_hash(config)?,
        num_classes: config.num_classes(),
        height: config.height,
        width: config.width,
        test_fraction: if records.is_empty() { 0.0 } else { n_test as f64 / records.len() as f64 },
        config: config.clone(),
        records,
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: RgbImage,
    pub mask: LabeledMask,
}

/// Load every sample of one split from a dataset directory.
pub fn load_split(dir: &Path, split: Split) -> Result<(DatasetManifest, Vec<Sample>)> {
    let manifest = DatasetManifest::load(dir)?;
    let samples = manifest
        .records
        .iter()
        .filter(|r| r.split == split)
        .map(|r| {
            Ok(Sample {
                id: r.id.clone(),
                image: RgbImage::read_ppm(&dir.join(&r.image))?,
                mask: LabeledMask::read(&dir.join(&r.mask), &dir.join(&r.class_map))?,
            })
        })
        .collect::<Result<_>>()?;
    Ok((manifest, samples))
}
