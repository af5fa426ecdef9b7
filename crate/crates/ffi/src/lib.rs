//! C ABI over `gcdlab`.
//!
//! Objects cross the boundary as opaque heap handles created by `*_preset`,
//! `*_load` or a producing call and released by the matching `*_free`.
//! Every fallible call returns a `GcdStatus`; on failure the message is kept
//! per thread and read back with `gcd_last_error_message`. Panics are caught
//! and reported as `GCD_STATUS_PANIC`.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use gcdlab::diffusion::Cascade;
use gcdlab::image::{LabeledMask, RgbImage};
use gcdlab::interventions;
use gcdlab::maskgraph::TissueGraph;
use gcdlab::metrics::{self, FeatureSet, FeatureSource};
use gcdlab::pipeline::{self, ExperimentConfig};
use gcdlab::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GcdStatus {
    Ok = 0,
    NullArgument = 1,
    Config = 2,
    Numeric = 3,
    MissingArtifact = 4,
    Io = 5,
    InvalidInput = 6,
    Capacity = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

pub struct GcdConfig(ExperimentConfig);
pub struct GcdGraph(TissueGraph);
pub struct GcdCascade(Cascade);
pub struct GcdSample {
    image: RgbImage,
    mask: LabeledMask,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> GcdStatus {
    match e {
        Error::Config(_) => GcdStatus::Config,
        Error::NumericOverflow { .. } | Error::Shape { .. } => GcdStatus::Numeric,
        Error::MissingArtifact { .. } => GcdStatus::MissingArtifact,
        Error::Io { .. } | Error::Format { .. } => GcdStatus::Io,
        Error::InvalidInput(_) | Error::Json(_) => GcdStatus::InvalidInput,
        Error::Capacity { .. } => GcdStatus::Capacity,
    }
}

enum Fail {
    Null(&'static str),
    Core(Error),
    Buffer(usize),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn guard(body: impl FnOnce() -> Result<(), Fail>) -> GcdStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_error(String::new());
            GcdStatus::Ok
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null argument: {what}"));
            GcdStatus::NullArgument
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Fail::Buffer(need))) => {
            set_error(format!("buffer too small: need {need} elements"));
            GcdStatus::BufferTooSmall
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            GcdStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

unsafe fn path_arg(p: *const c_char, what: &'static str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| Error::InvalidInput(format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Copy `s` plus a NUL into `buf`; `needed` receives the full size.
unsafe fn write_str(s: &str, buf: *mut c_char, cap: usize, needed: *mut usize) -> Result<(), Fail> {
    let need = s.len() + 1;
    if let Some(n) = needed.as_mut() {
        *n = need;
    }
    if cap < need || buf.is_null() {
        return Err(Fail::Buffer(need));
    }
    std::ptr::copy_nonoverlapping(s.as_ptr(), buf as *mut u8, s.len());
    *buf.add(s.len()) = 0;
    Ok(())
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Copies the calling thread's last error message. Returns the number of
/// bytes needed including the NUL; nothing is written if `cap` is smaller.
#[no_mangle]
pub unsafe extern "C" fn gcd_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let need = e.len() + 1;
        if !buf.is_null() && cap >= need {
            std::ptr::copy_nonoverlapping(e.as_ptr(), buf as *mut u8, e.len());
            *buf.add(e.len()) = 0;
        }
        need
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gcd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

// ---- experiment configuration ----

/// `preset` is 0 for the small smoke preset, 1 for the desk-scale one.
#[no_mangle]
pub unsafe extern "C" fn gcd_config_preset(preset: u32, root: *const c_char, seed: u64, out: *mut *mut GcdConfig) -> GcdStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let root = path_arg(root, "root")?;
        let cfg = match preset {
            0 => ExperimentConfig::smoke(root, seed),
            1 => ExperimentConfig::desk(root, seed),
            p => return Err(Error::Config(format!("unknown preset {p}")).into()),
        };
        *out = boxed(GcdConfig(cfg));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn gcd_config_load(path: *const c_char, out: *mut *mut GcdConfig) -> GcdStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let cfg = ExperimentConfig::load(&path_arg(path, "path")?)?;
        *out = boxed(GcdConfig(cfg));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn gcd_config_save(cfg: *const GcdConfig, path: *const c_char) -> GcdStatus {
    guard(|| {
        let cfg = deref(cfg, "cfg")?;
        gcdlab::util::write_json(&path_arg(path, "path")?, &cfg.0)?;
        Ok(())
    })
}

/// Hex content hash of the configuration (independent of the output root).
#[no_mangle]
pub unsafe extern "C" fn gcd_config_hash(cfg: *const GcdConfig, buf: *mut c_char, cap: usize, needed: *mut usize) -> GcdStatus {
    guard(|| {
        let h = deref(cfg, "cfg")?.0.hash()?;
        write_str(&h, buf, cap, needed)
    })
}

#[no_mangle]
pub unsafe extern "C" fn gcd_config_free(cfg: *mut GcdConfig) {
    free(cfg)
}

/// Runs every stage with caching and writes the ablation table path into
/// `buf`.
#[no_mangle]
pub unsafe extern "C" fn gcd_run_pipeline(cfg: *const GcdConfig, buf: *mut c_char, cap: usize, needed: *mut usize) -> GcdStatus {
    guard(|| {
        let out = pipeline::run_pipeline(&deref(cfg, "cfg")?.0)?;
        write_str(&out.table.display().to_string(), buf, cap, needed)
    })
}

// ---- graphs and interventions ----

#[no_mangle]
pub unsafe extern "C" fn gcd_graph_load(path: *const c_char, out: *mut *mut GcdGraph) -> GcdStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = boxed(GcdGraph(TissueGraph::load(&path_arg(path, "path")?)?));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn gcd_graph_save(g: *const GcdGraph, path: *const c_char) -> GcdStatus {
    guard(|| {
        deref(g, "graph")?.0.save(&path_arg(path, "path")?)?;
        Ok(())
    })
}

/// Node count, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn gcd_graph_num_nodes(g: *const GcdGraph) -> usize {
    g.as_ref().map_or(0, |g| g.0.len())
}

#[no_mangle]
pub unsafe extern "C" fn gcd_graph_num_edges(g: *const GcdGraph) -> usize {
    g.as_ref().map_or(0, |g| g.0.edges().len())
}

/// Class of node `v` (1-based); 0 if out of range.
#[no_mangle]
pub unsafe extern "C" fn gcd_graph_node_class(g: *const GcdGraph, v: usize) -> u8 {
    g.as_ref().and_then(|g| g.0.nodes().get(v)).map_or(0, |n| n.class)
}

/// Writes the `(row, col)` center of node `v`.
#[no_mangle]
pub unsafe extern "C" fn gcd_graph_node_com(g: *const GcdGraph, v: usize, com: *mut f64) -> GcdStatus {
    guard(|| {
        let g = deref(g, "graph")?;
        let node = g.0.nodes().get(v).ok_or_else(|| Error::InvalidInput(format!("node {v} out of range")))?;
        if com.is_null() {
            return Err(Fail::Null("com"));
        }
        *com = node.com[0];
        *com.add(1) = node.com[1];
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn gcd_graph_remove_node(g: *const GcdGraph, v: usize, out: *mut *mut GcdGraph) -> GcdStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = boxed(GcdGraph(interventions::remove_node(&deref(g, "graph")?.0, v)?));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn gcd_graph_change_class(
    g: *const GcdGraph,
    v: usize,
    class: u8,
    num_classes: usize,
    out: *mut *mut GcdGraph,
) -> GcdStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = boxed(GcdGraph(interventions::change_class(&deref(g, "graph")?.0, v, class, num_classes)?));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn gcd_graph_interpolate(a: *const GcdGraph, b: *const GcdGraph, t: f64, out: *mut *mut GcdGraph) -> GcdStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = boxed(GcdGraph(interventions::interpolate(&deref(a, "a")?.0, &deref(b, "b")?.0, t)?));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn gcd_graph_free(g: *mut GcdGraph) {
    free(g)
}

// ---- diffusion cascade ----

#[no_mangle]
pub unsafe extern "C" fn gcd_cascade_load(path: *const c_char, out: *mut *mut GcdCascade) -> GcdStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = boxed(GcdCascade(Cascade::load(&path_arg(path, "path")?)?));
        Ok(())
    })
}

/// Draws one sample. `graph` may be null for unconditional generation;
/// `steps == 0` keeps each stage's configured step count.
#[no_mangle]
pub unsafe extern "C" fn gcd_cascade_sample(
    c: *const GcdCascade,
    graph: *const GcdGraph,
    seed: u64,
    steps: usize,
    out: *mut *mut GcdSample,
) -> GcdStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let c = deref(c, "cascade")?;
        let g = graph.as_ref().map(|g| &g.0);
        let steps = (steps > 0).then_some(steps);
        let (image, mask) = c.0.sample_with(&[g], &[seed], steps, None)?.pop().expect("one sample");
        *out = boxed(GcdSample { image, mask });
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn gcd_cascade_free(c: *mut GcdCascade) {
    free(c)
}

#[no_mangle]
pub unsafe extern "C" fn gcd_sample_dims(s: *const GcdSample, height: *mut usize, width: *mut usize) -> GcdStatus {
    guard(|| {
        let s = deref(s, "sample")?;
        *out_ptr(height, "height")? = s.image.height();
        *out_ptr(width, "width")? = s.image.width();
        Ok(())
    })
}

/// Copies the `height * width * 3` row-major RGB values in `[0, 1]`.
#[no_mangle]
pub unsafe extern "C" fn gcd_sample_image(s: *const GcdSample, buf: *mut f64, len: usize) -> GcdStatus {
    guard(|| {
        let data = deref(s, "sample")?.image.data();
        if len < data.len() || buf.is_null() {
            return Err(Fail::Buffer(data.len()));
        }
        std::ptr::copy_nonoverlapping(data.as_ptr(), buf, data.len());
        Ok(())
    })
}

/// Copies per-pixel instance ids (0 = background).
#[no_mangle]
pub unsafe extern "C" fn gcd_sample_instance_ids(s: *const GcdSample, buf: *mut u32, len: usize) -> GcdStatus {
    guard(|| {
        let ids = deref(s, "sample")?.mask.ids();
        if len < ids.len() || buf.is_null() {
            return Err(Fail::Buffer(ids.len()));
        }
        std::ptr::copy_nonoverlapping(ids.as_ptr(), buf, ids.len());
        Ok(())
    })
}

/// Copies per-pixel classes (0 = background).
#[no_mangle]
pub unsafe extern "C" fn gcd_sample_classes(s: *const GcdSample, buf: *mut u8, len: usize) -> GcdStatus {
    guard(|| {
        let sem = deref(s, "sample")?.mask.semantic();
        if len < sem.len() || buf.is_null() {
            return Err(Fail::Buffer(sem.len()));
        }
        std::ptr::copy_nonoverlapping(sem.as_ptr(), buf, sem.len());
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn gcd_sample_instance_count(s: *const GcdSample) -> usize {
    s.as_ref().map_or(0, |s| s.mask.instance_count())
}

#[no_mangle]
pub unsafe extern "C" fn gcd_sample_free(s: *mut GcdSample) {
    free(s)
}

// ---- metrics ----

unsafe fn features(p: *const f64, rows: usize, dim: usize, source: FeatureSource, what: &'static str) -> Result<FeatureSet, Fail> {
    if dim == 0 {
        return Err(Error::InvalidInput("feature dimension must be positive".into()).into());
    }
    let data = slice_arg(p, rows * dim, what)?;
    let rows: Vec<Vec<f64>> = data.chunks(dim).map(|c| c.to_vec()).collect();
    Ok(FeatureSet::from_rows(&rows, source)?)
}

/// Fréchet distance between Gaussians fitted to two row-major feature sets.
#[no_mangle]
pub unsafe extern "C" fn gcd_fid(
    real: *const f64,
    n_real: usize,
    gen: *const f64,
    n_gen: usize,
    dim: usize,
    out: *mut f64,
) -> GcdStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let r = features(real, n_real, dim, FeatureSource::Real, "real")?;
        let g = features(gen, n_gen, dim, FeatureSource::Generated, "gen")?;
        *out = metrics::fid_from_features(&r, &g)?;
        Ok(())
    })
}

/// Improved precision and recall in `[0, 1]` with `k`-NN radii.
#[no_mangle]
pub unsafe extern "C" fn gcd_precision_recall(
    real: *const f64,
    n_real: usize,
    gen: *const f64,
    n_gen: usize,
    dim: usize,
    k: usize,
    precision: *mut f64,
    recall: *mut f64,
) -> GcdStatus {
    guard(|| {
        let r = features(real, n_real, dim, FeatureSource::Real, "real")?;
        let g = features(gen, n_gen, dim, FeatureSource::Generated, "gen")?;
        let (p, rc) = metrics::improved_precision_recall(&r, &g, k)?;
        *out_ptr(precision, "precision")? = p;
        *out_ptr(recall, "recall")? = rc;
        Ok(())
    })
}

/// Dice and AJI (both in `[0, 100]`) from two labeled masks given as
/// per-pixel instance ids plus per-pixel classes.
#[no_mangle]
pub unsafe extern "C" fn gcd_segmentation_scores(
    pred_ids: *const u32,
    pred_classes: *const u8,
    gt_ids: *const u32,
    gt_classes: *const u8,
    height: usize,
    width: usize,
    dice: *mut f64,
    aji: *mut f64,
) -> GcdStatus {
    guard(|| {
        let n = height * width;
        let pred = mask_from(slice_arg(pred_ids, n, "pred_ids")?, slice_arg(pred_classes, n, "pred_classes")?, height, width)?;
        let gt = mask_from(slice_arg(gt_ids, n, "gt_ids")?, slice_arg(gt_classes, n, "gt_classes")?, height, width)?;
        *out_ptr(dice, "dice")? = metrics::dice(&pred, &gt)?;
        *out_ptr(aji, "aji")? = metrics::aji(&pred, &gt)?;
        Ok(())
    })
}

fn mask_from(ids: &[u32], classes: &[u8], h: usize, w: usize) -> Result<LabeledMask, Fail> {
    let mut map = std::collections::BTreeMap::new();
    for (&id, &c) in ids.iter().zip(classes) {
        if id == 0 {
            continue;
        }
        if *map.entry(id).or_insert(c) != c {
            return Err(Error::InvalidInput(format!("instance {id} has more than one class")).into());
        }
    }
    Ok(LabeledMask::new(h, w, ids.to_vec(), map)?)
}
