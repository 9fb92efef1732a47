//! Reference datasets: JSON-lines manifests, concept masks and mask resizing.
//!
//! A manifest line looks like
//!
//! ```json
//! {"id":"img_0001","image":"images/img_0001.png","width":64,"height":64,"group":"A",
//!  "annotations":[{"concept":"disc","mask":{"kind":"png","path":"masks/img_0001_0.png"}}]}
//! ```
//!
//! `id`, `width`, `height` and `group` are optional. Relative paths resolve
//! against the manifest's directory. Mask kinds are `full`, `bbox` (with
//! `"bbox":[x0,y0,x1,y1]`, end-exclusive pixel coordinates) and `png` (nonzero
//! pixel means inside).

use std::collections::{BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary mask, `true` means inside.
pub type Mask = Array2<bool>;

/// Smallest accepted image side.
pub const MIN_IMAGE_SIDE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Group {
    A,
    B,
}

impl Group {
    pub fn other(self) -> Group {
        match self {
            Group::A => Group::B,
            Group::B => Group::A,
        }
    }
}

/// How a concept mask was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Segmentation,
    Bbox,
    Full,
}

/// Where a mask comes from; materialized on demand.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MaskSource {
    Full,
    Bbox { bbox: [u32; 4] },
    Png { path: PathBuf },
}

impl MaskSource {
    pub fn source_kind(&self) -> SourceKind {
        match self {
            MaskSource::Full => SourceKind::Full,
            MaskSource::Bbox { .. } => SourceKind::Bbox,
            MaskSource::Png { .. } => SourceKind::Segmentation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub concept: String,
    pub mask: MaskSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub id: String,
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<Group>,
    #[serde(default)]
    pub annotations: Vec<AnnotationRecord>,
}

/// A concept with its binary mask at image resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptMask {
    pub concept: String,
    pub mask: Mask,
    pub source_kind: SourceKind,
}

/// A materialized image (3×h×w, values in [0,1]) with its concept masks.
#[derive(Debug, Clone)]
pub struct AnnotatedImage {
    pub id: String,
    pub image: Array3<f32>,
    pub annotations: Vec<ConceptMask>,
    pub group: Option<Group>,
}

impl AnnotatedImage {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

/// Train / held-out partition of the concept set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptSplit {
    pub train: Vec<String>,
    pub heldout: Vec<String>,
}

/// Parsed, validated manifest. Image dimensions are known for every entry.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    root: PathBuf,
    entries: Vec<ManifestEntry>,
    concepts: Vec<String>,
}

impl DatasetManifest {
    /// Builds a manifest from in-memory entries (paths relative to `root`).
    pub fn from_entries(root: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Result<Self> {
        let root = root.into();
        let mut seen = HashSet::new();
        let mut concepts = BTreeSet::new();
        let mut out = Vec::with_capacity(entries.len());
        for (i, mut entry) in entries.into_iter().enumerate() {
            if entry.id.is_empty() {
                entry.id = entry
                    .image
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| format!("entry{i}"));
            }
            if !seen.insert(entry.id.clone()) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate image id `{}`",
                    entry.id
                )));
            }
            let (w, h) = match (entry.width, entry.height) {
                (Some(w), Some(h)) => (w, h),
                _ => {
                    let path = resolve(&root, &entry.image);
                    image::image_dimensions(&path).map_err(|source| Error::Image {
                        path: path.clone(),
                        source,
                    })?
                }
            };
            if (w as usize) < MIN_IMAGE_SIDE || (h as usize) < MIN_IMAGE_SIDE {
                return Err(Error::InvalidArgument(format!(
                    "entry `{}`: image {}x{} is smaller than {}x{}",
                    entry.id, w, h, MIN_IMAGE_SIDE, MIN_IMAGE_SIDE
                )));
            }
            entry.width = Some(w);
            entry.height = Some(h);
            for ann in &mut entry.annotations {
                ann.concept = ann.concept.trim().to_lowercase();
                if ann.concept.is_empty() {
                    return Err(Error::InvalidArgument(format!(
                        "entry `{}`: empty concept name",
                        entry.id
                    )));
                }
                if let MaskSource::Bbox { bbox: [x0, y0, x1, y1] } = ann.mask {
                    if x0 >= x1 || y0 >= y1 || x1 > w || y1 > h {
                        return Err(Error::InvalidArgument(format!(
                            "entry `{}`: bbox [{x0},{y0},{x1},{y1}] outside {w}x{h} image",
                            entry.id
                        )));
                    }
                }
                concepts.insert(ann.concept.clone());
            }
            out.push(entry);
        }
        Ok(Self {
            root,
            entries: out,
            concepts: concepts.into_iter().collect(),
        })
    }

    /// Reads a JSON-lines manifest.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| {
                let id = serde_json::from_str::<serde_json::Value>(&line)
                    .ok()
                    .and_then(|v| {
                        v.get("id")
                            .or_else(|| v.get("image"))
                            .and_then(|x| x.as_str().map(str::to_string))
                    })
                    .unwrap_or_default();
                Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("entry `{id}`: {e}"),
                }
            })?;
            entries.push(entry);
        }
        Self::from_entries(root, entries)
    }

    /// Writes the manifest as JSON lines (paths as stored, i.e. relative).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for entry in &self.entries {
            let line = serde_json::to_string(entry)?;
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The concept set C, sorted.
    pub fn concepts(&self) -> &[String] {
        &self.concepts
    }

    pub fn image_path(&self, entry: &ManifestEntry) -> PathBuf {
        resolve(&self.root, &entry.image)
    }

    /// Loads the image (3×h×w in [0,1]) and materializes every mask.
    pub fn load_entry(&self, index: usize) -> Result<AnnotatedImage> {
        let entry = self
            .entries
            .get(index)
            .ok_or_else(|| Error::NotFound(format!("manifest entry {index}")))?;
        let image = load_rgb(&self.image_path(entry))?;
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let annotations = entry
            .annotations
            .iter()
            .map(|ann| {
                Ok(ConceptMask {
                    concept: ann.concept.clone(),
                    mask: self.materialize(&ann.mask, h, w)?,
                    source_kind: ann.mask.source_kind(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AnnotatedImage {
            id: entry.id.clone(),
            image,
            annotations,
            group: entry.group,
        })
    }

    /// Loads every entry, in manifest order.
    pub fn load_all(&self) -> Result<Vec<AnnotatedImage>> {
        (0..self.entries.len())
            .into_par_iter()
            .map(|i| self.load_entry(i))
            .collect()
    }

    pub fn materialize(&self, source: &MaskSource, h: usize, w: usize) -> Result<Mask> {
        match source {
            MaskSource::Full => Ok(Mask::from_elem((h, w), true)),
            MaskSource::Bbox { bbox } => bbox_mask(*bbox, h, w),
            MaskSource::Png { path } => {
                let path = resolve(&self.root, path);
                let img = image::open(&path)
                    .map_err(|source| Error::Image {
                        path: path.clone(),
                        source,
                    })?
                    .into_luma16();
                if img.width() as usize != w || img.height() as usize != h {
                    return Err(Error::Shape(format!(
                        "mask `{}` is {}x{}, image is {}x{}",
                        path.display(),
                        img.width(),
                        img.height(),
                        w,
                        h
                    )));
                }
                Ok(Mask::from_shape_fn((h, w), |(y, x)| {
                    img.get_pixel(x as u32, y as u32).0[0] != 0
                }))
            }
        }
    }

    /// Restricts to entries matching a predicate (keeps concept set recomputed).
    pub fn filter<F: Fn(&ManifestEntry) -> bool>(&self, keep: F) -> Result<Self> {
        Self::from_entries(
            self.root.clone(),
            self.entries.iter().filter(|e| keep(e)).cloned().collect(),
        )
    }
}

fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

/// Loads a raster image as 3×h×w floats in [0,1].
pub fn load_rgb(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Array3::from_shape_fn((3, h, w), |(c, y, x)| {
        img.get_pixel(x as u32, y as u32).0[c] as f32 / 255.0
    }))
}

/// Filled axis-aligned rectangle, end-exclusive.
pub fn bbox_mask(bbox: [u32; 4], h: usize, w: usize) -> Result<Mask> {
    let [x0, y0, x1, y1] = bbox.map(|v| v as usize);
    if x0 >= x1 || y0 >= y1 || x1 > w || y1 > h {
        return Err(Error::InvalidArgument(format!(
            "bbox [{x0},{y0},{x1},{y1}] outside {w}x{h} image"
        )));
    }
    Ok(Mask::from_shape_fn((h, w), |(y, x)| {
        (y0..y1).contains(&y) && (x0..x1).contains(&x)
    }))
}

/// Deterministic concept partition.
///
/// Concepts are sorted, shuffled with a seeded generator, and the first
/// `round(train_fraction·|C|)` become the training split (clamped so both
/// sides are nonempty). With a fixed seed, splits at increasing fractions are
/// nested.
pub fn split_concepts(concepts: &[String], train_fraction: f64, seed: u64) -> Result<ConceptSplit> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train_fraction must lie in (0,1), got {train_fraction}"
        )));
    }
    let mut all: Vec<String> = concepts
        .iter()
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if all.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 concepts to split, have {}",
            all.len()
        )));
    }
    let n = all.len();
    let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    all.shuffle(&mut rng);
    let mut train = all[..n_train].to_vec();
    let mut heldout = all[n_train..].to_vec();
    train.sort();
    heldout.sort();
    Ok(ConceptSplit { train, heldout })
}

/// Resizes a binary mask by area averaging followed by a `>= 0.5` threshold.
pub fn resize_mask(mask: &Mask, target: (usize, usize)) -> Result<Mask> {
    let (th, tw) = target;
    if th < 1 || tw < 1 {
        return Err(Error::InvalidArgument(format!(
            "target size {th}x{tw} must be at least 1x1"
        )));
    }
    let (h, w) = mask.dim();
    if h == 0 || w == 0 {
        return Err(Error::Shape("source mask is empty".into()));
    }
    if (h, w) == (th, tw) {
        return Ok(mask.clone());
    }
    let wy = area_weights(h, th);
    let wx = area_weights(w, tw);
    let cell_area = (h as f64 / th as f64) * (w as f64 / tw as f64);
    let mut out = Mask::from_elem((th, tw), false);
    for (ty, ys) in wy.iter().enumerate() {
        for (tx, xs) in wx.iter().enumerate() {
            let mut covered = 0.0;
            for &(sy, fy) in ys {
                for &(sx, fx) in xs {
                    if mask[[sy, sx]] {
                        covered += fy * fx;
                    }
                }
            }
            // tolerance absorbs rounding in non-integer ratios; exact halves count as inside
            out[[ty, tx]] = covered / cell_area >= 0.5 - 1e-9;
        }
    }
    Ok(out)
}

/// For each target index, the source indices it overlaps and the overlap length.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|t| {
            let lo = t as f64 * scale;
            let hi = (t + 1) as f64 * scale;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src);
            (first..last)
                .filter_map(|s| {
                    let overlap = (hi.min((s + 1) as f64) - lo.max(s as f64)).max(0.0);
                    (overlap > 0.0).then_some((s, overlap))
                })
                .collect()
        })
        .collect()
}

pub fn count_ones(mask: &Mask) -> usize {
    mask.iter().filter(|&&b| b).count()
}
