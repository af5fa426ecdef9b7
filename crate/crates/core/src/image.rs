//! RGB images, instance-labeled masks and their on-disk formats
//! (binary PPM `P6`/255 for images, binary PGM `P5`/65535 big-endian for
//! instance ids, JSON for the instance-to-class map).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ClassLabel = u8;

#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    /// Row-major, channel-interleaved, values in `[0, 1]`.
    data: Vec<f64>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, mut data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::shape("rgb_image", format!("{}x{}x3 needs {} values, got {}", height, width, height * width * 3, data.len())));
        }
        for v in &mut data {
            if !v.is_finite() {
                return Err(Error::InvalidInput("non-finite pixel value".into()));
            }
            *v = v.clamp(0.0, 1.0);
        }
        Ok(RgbImage { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).map(|v| v.clamp(0.0, 1.0)).collect();
        RgbImage { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, r: usize, c: usize) -> [f64; 3] {
        let i = (r * self.width + c) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, r: usize, c: usize, rgb: [f64; 3]) {
        let i = (r * self.width + c) * 3;
        for k in 0..3 {
            self.data[i + k] = rgb[k].clamp(0.0, 1.0);
        }
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut bytes = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        bytes.extend(self.data.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (w, h, maxval, body) = parse_pnm(&bytes, b"P6").map_err(|d| Error::Format { path: path.into(), detail: d })?;
        if maxval != 255 || body.len() < w * h * 3 {
            return Err(Error::Format { path: path.into(), detail: "expected 8-bit P6 body".into() });
        }
        let data = body[..w * h * 3].iter().map(|&b| b as f64 / 255.0).collect();
        RgbImage::new(h, w, data)
    }
}

/// Instance grid (0 = background) plus instance-id to semantic-class map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledMask {
    height: usize,
    width: usize,
    ids: Vec<u32>,
    classes: BTreeMap<u32, ClassLabel>,
}

impl LabeledMask {
    /// Validates that every nonzero id is mapped, every mapped id is present
    /// and every class is at least 1.
    pub fn new(height: usize, width: usize, ids: Vec<u32>, classes: BTreeMap<u32, ClassLabel>) -> Result<Self> {
        if ids.len() != height * width {
            return Err(Error::shape("labeled_mask", format!("{}x{} grid needs {} ids, got {}", height, width, height * width, ids.len())));
        }
        let present: BTreeSet<u32> = ids.iter().copied().filter(|&i| i != 0).collect();
        for id in &present {
            if !classes.contains_key(id) {
                return Err(Error::InvalidInput(format!("instance {id} has no class")));
            }
        }
        for (id, cls) in &classes {
            if *id == 0 || !present.contains(id) {
                return Err(Error::InvalidInput(format!("mapped instance {id} occupies no pixel")));
            }
            if *cls == 0 {
                return Err(Error::InvalidInput(format!("instance {id} has class 0")));
            }
        }
        Ok(LabeledMask { height, width, ids, classes })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        LabeledMask { height, width, ids: vec![0; height * width], classes: BTreeMap::new() }
    }

    /// Instances are the 8-connected components of each nonzero class,
    /// numbered in raster order of their first pixel.
    pub fn from_semantic(height: usize, width: usize, semantic: &[ClassLabel]) -> Result<Self> {
        if semantic.len() != height * width {
            return Err(Error::shape("from_semantic", format!("{} labels for {}x{}", semantic.len(), height, width)));
        }
        let mut ids = vec![0u32; height * width];
        let mut classes = BTreeMap::new();
        let mut next = 1u32;
        let mut stack = Vec::new();
        for start in 0..semantic.len() {
            let cls = semantic[start];
            if cls == 0 || ids[start] != 0 {
                continue;
            }
            ids[start] = next;
            stack.push(start);
            while let Some(p) = stack.pop() {
                let (r, c) = ((p / width) as isize, (p % width) as isize);
                for dr in -1..=1 {
                    for dc in -1..=1 {
                        let (nr, nc) = (r + dr, c + dc);
                        if nr < 0 || nc < 0 || nr >= height as isize || nc >= width as isize {
                            continue;
                        }
                        let q = nr as usize * width + nc as usize;
                        if semantic[q] == cls && ids[q] == 0 {
                            ids[q] = next;
                            stack.push(q);
                        }
                    }
                }
            }
            classes.insert(next, cls);
            next += 1;
        }
        Ok(LabeledMask { height, width, ids, classes })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn id_at(&self, r: usize, c: usize) -> u32 {
        self.ids[r * self.width + c]
    }

    pub fn classes(&self) -> &BTreeMap<u32, ClassLabel> {
        &self.classes
    }

    pub fn class_of(&self, id: u32) -> Option<ClassLabel> {
        self.classes.get(&id).copied()
    }

    pub fn instance_ids(&self) -> Vec<u32> {
        self.classes.keys().copied().collect()
    }

    pub fn instance_count(&self) -> usize {
        self.classes.len()
    }

    /// Semantic class per pixel (0 = background).
    pub fn semantic(&self) -> Vec<ClassLabel> {
        self.ids.iter().map(|&i| if i == 0 { 0 } else { self.classes[&i] }).collect()
    }

    /// Number of instances of each class `1..=num_classes` (index 0 unused).
    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes + 1];
        for &c in self.classes.values() {
            if (c as usize) <= num_classes {
                counts[c as usize] += 1;
            }
        }
        counts
    }

    pub fn pixels_of(&self, id: u32) -> Vec<(usize, usize)> {
        self.ids
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == id)
            .map(|(p, _)| (p / self.width, p % self.width))
            .collect()
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut bytes = format!("P5\n{} {}\n65535\n", self.width, self.height).into_bytes();
        for &id in &self.ids {
            let v = u16::try_from(id).map_err(|_| Error::InvalidInput(format!("instance id {id} exceeds 16 bits")))?;
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn write_class_map(&self, path: &Path, num_classes: usize) -> Result<()> {
        let map = ClassMapFile {
            num_classes,
            instances: self.classes.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        };
        fs::write(path, serde_json::to_string_pretty(&map)?).map_err(|e| Error::io(path, e))
    }

    /// Read a PGM instance grid and its class-map JSON.
    pub fn read(pgm: &Path, class_map: &Path) -> Result<Self> {
        let bytes = fs::read(pgm).map_err(|e| Error::io(pgm, e))?;
        let (w, h, maxval, body) = parse_pnm(&bytes, b"P5").map_err(|d| Error::Format { path: pgm.into(), detail: d })?;
        let ids: Vec<u32> = if maxval > 255 {
            if body.len() < w * h * 2 {
                return Err(Error::Format { path: pgm.into(), detail: "truncated 16-bit body".into() });
            }
            body[..w * h * 2].chunks(2).map(|b| u16::from_be_bytes([b[0], b[1]]) as u32).collect()
        } else {
            if body.len() < w * h {
                return Err(Error::Format { path: pgm.into(), detail: "truncated 8-bit body".into() });
            }
            body[..w * h].iter().map(|&b| b as u32).collect()
        };
        let text = fs::read_to_string(class_map).map_err(|e| Error::io(class_map, e))?;
        let map: ClassMapFile = serde_json::from_str(&text).map_err(|e| Error::Format { path: class_map.into(), detail: e.to_string() })?;
        let mut classes = BTreeMap::new();
        for (k, v) in map.instances {
            let id: u32 = k.parse().map_err(|_| Error::Format { path: class_map.into(), detail: format!("bad instance key {k:?}") })?;
            classes.insert(id, v);
        }
        LabeledMask::new(h, w, ids, classes)
    }
}

/// Class-map JSON: `{"num_classes": C, "instances": {"<id>": <class>, ...}}`.
#[derive(Serialize, Deserialize)]
struct ClassMapFile {
    num_classes: usize,
    instances: BTreeMap<String, ClassLabel>,
}

fn parse_pnm<'a>(bytes: &'a [u8], magic: &[u8]) -> std::result::Result<(usize, usize, usize, &'a [u8]), String> {
    if !bytes.starts_with(magic) {
        return Err(format!("expected {} header", String::from_utf8_lossy(magic)));
    }
    let mut pos = magic.len();
    let mut fields = [0usize; 3];
    for f in &mut fields {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| "malformed header".to_string())?;
    }
    // exactly one whitespace byte separates header and raster
    pos += 1;
    if pos > bytes.len() {
        return Err("missing raster".into());
    }
    Ok((fields[0], fields[1], fields[2], &bytes[pos..]))
}
