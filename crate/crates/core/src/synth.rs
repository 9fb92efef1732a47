//! Planted-concept synthetic corpora.
//!
//! Every image is a low-amplitude noise background with one or more
//! non-overlapping colored shapes; each shape is a concept with an exact
//! pixel mask. A matching synthetic word-embedding vocabulary can be written
//! alongside, with compositional structure (color word + shape word), synonym
//! clusters and filler tokens, so that word selection has real competition.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::Array1;
use rand::seq::index::sample;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    count_ones, resize_mask, AnnotationRecord, DatasetManifest, Group, ManifestEntry, Mask,
    MaskSource,
};
use crate::error::{Error, Result};

const PLACEMENT_RETRIES: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Square,
    Disc,
    Triangle,
    Stripes,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::Square,
        ShapeKind::Disc,
        ShapeKind::Triangle,
        ShapeKind::Stripes,
    ];

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Disc => "disc",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Stripes => "stripes",
        }
    }

    /// Whether pixel `(y, x)` (relative to the shape's `size×size` box) is painted.
    fn paints(self, y: usize, x: usize, size: usize) -> bool {
        let (fy, fx, s) = (y as f32 + 0.5, x as f32 + 0.5, size as f32);
        match self {
            ShapeKind::Square => true,
            ShapeKind::Disc => {
                let r = s / 2.0;
                (fy - r).powi(2) + (fx - r).powi(2) <= r * r
            }
            ShapeKind::Triangle => (fx - s / 2.0).abs() <= fy / 2.0,
            ShapeKind::Stripes => (y / 2).is_multiple_of(2),
        }
    }

    /// Whether pixel `(y, x)` belongs to the object's mask. Stripes own their whole patch.
    fn covers(self, y: usize, x: usize, size: usize) -> bool {
        match self {
            ShapeKind::Stripes => true,
            other => other.paints(y, x, size),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConcept {
    pub name: String,
    pub shape: ShapeKind,
    /// RGB in [0,1].
    pub color: [f32; 3],
    /// Color word used to compose the concept's embedding; `None` gives the concept its own direction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color_name: Option<String>,
}

fn default_shape_size() -> [usize; 2] {
    [16, 26]
}
fn default_noise() -> f32 {
    0.15
}
fn default_jitter() -> f32 {
    0.08
}
fn default_grid() -> [usize; 2] {
    [8, 8]
}
fn default_min_concepts() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_images: usize,
    /// `[h, w]`.
    pub image_size: [usize; 2],
    pub concepts: Vec<SynthConcept>,
    #[serde(default = "default_min_concepts")]
    pub min_concepts_per_image: usize,
    pub max_concepts_per_image: usize,
    /// Concept → probability an image containing it is in group A.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_bias: Option<BTreeMap<String, f64>>,
    pub seed: u64,
    /// Inclusive `[min, max]` side of a shape's bounding box, in pixels.
    #[serde(default = "default_shape_size")]
    pub shape_size: [usize; 2],
    #[serde(default = "default_noise")]
    pub noise_amplitude: f32,
    #[serde(default = "default_jitter")]
    pub color_jitter: f32,
    /// Feature-map grid every planted mask must survive resizing to.
    #[serde(default = "default_grid")]
    pub feature_grid: [usize; 2],
}

pub fn named_color(name: &str) -> Option<[f32; 3]> {
    PALETTE
        .iter()
        .find(|c| c.name == name)
        .map(|c| c.rgb)
}

impl SynthSpec {
    /// Eight concepts: {red, blue} × {square, disc, triangle, stripes}, at most two per image.
    pub fn default_shapes(n_images: usize, seed: u64) -> Self {
        let mut concepts = Vec::new();
        for color in ["red", "blue"] {
            for shape in ShapeKind::ALL {
                concepts.push(SynthConcept {
                    name: format!("{color}{}", shape.word()),
                    shape,
                    color: named_color(color).unwrap(),
                    color_name: Some(color.to_string()),
                });
            }
        }
        Self {
            n_images,
            image_size: [64, 64],
            concepts,
            min_concepts_per_image: 1,
            max_concepts_per_image: 2,
            group_bias: None,
            seed,
            shape_size: default_shape_size(),
            noise_amplitude: default_noise(),
            color_jitter: default_jitter(),
            feature_grid: default_grid(),
        }
    }

    /// Five single-concept-per-image concepts with planted group probabilities 0.9 … 0.1.
    pub fn planted_bias(n_images: usize, seed: u64) -> Self {
        let picks = [
            ("red", ShapeKind::Square, 0.9),
            ("blue", ShapeKind::Disc, 0.7),
            ("red", ShapeKind::Triangle, 0.5),
            ("blue", ShapeKind::Stripes, 0.3),
            ("red", ShapeKind::Disc, 0.1),
        ];
        let mut base = Self::default_shapes(n_images, seed);
        base.concepts = picks
            .iter()
            .map(|(color, shape, _)| SynthConcept {
                name: format!("{color}{}", shape.word()),
                shape: *shape,
                color: named_color(color).unwrap(),
                color_name: Some(color.to_string()),
            })
            .collect();
        base.group_bias = Some(
            picks
                .iter()
                .map(|(color, shape, p)| (format!("{color}{}", shape.word()), *p))
                .collect(),
        );
        base.max_concepts_per_image = 1;
        base
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.concepts.is_empty() {
            return bad("synthetic corpus has no concepts".into());
        }
        let [h, w] = self.image_size;
        if h < crate::data::MIN_IMAGE_SIDE || w < crate::data::MIN_IMAGE_SIDE {
            return bad(format!("image size {h}x{w} too small"));
        }
        let [lo, hi] = self.shape_size;
        if lo == 0 || lo > hi || hi > h.min(w) {
            return bad(format!("shape_size [{lo},{hi}] invalid for {h}x{w} images"));
        }
        if self.min_concepts_per_image == 0
            || self.min_concepts_per_image > self.max_concepts_per_image
            || self.max_concepts_per_image > self.concepts.len()
        {
            return bad(format!(
                "concepts per image [{}, {}] invalid for {} concepts",
                self.min_concepts_per_image,
                self.max_concepts_per_image,
                self.concepts.len()
            ));
        }
        let mut names = std::collections::HashSet::new();
        for c in &self.concepts {
            if !names.insert(c.name.to_lowercase()) {
                return bad(format!("duplicate concept `{}`", c.name));
            }
        }
        if let Some(bias) = &self.group_bias {
            for (k, p) in bias {
                if !(0.0..=1.0).contains(p) {
                    return bad(format!("group_bias[{k}] = {p} outside [0,1]"));
                }
                if !names.contains(&k.to_lowercase()) {
                    return bad(format!("group_bias names unknown concept `{k}`"));
                }
            }
        }
        Ok(())
    }

    fn concept_probability_a(&self, names: &[&str]) -> Option<f64> {
        let bias = self.group_bias.as_ref()?;
        let sum: f64 = names
            .iter()
            .map(|n| bias.get(*n).copied().unwrap_or(0.5))
            .sum();
        Some(sum / names.len() as f64)
    }
}

/// One rendered image before it is written to disk.
#[derive(Debug, Clone)]
pub struct RenderedImage {
    pub id: String,
    pub pixels: RgbImage,
    /// (concept index, exact mask).
    pub shapes: Vec<(usize, Mask)>,
    pub group: Option<Group>,
}

/// Renders image `index` of the corpus. Pure function of `(spec, index)`.
pub fn render(spec: &SynthSpec, index: usize) -> Result<RenderedImage> {
    let [h, w] = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);

    let mut pixels = RgbImage::new(w as u32, h as u32);
    for px in pixels.pixels_mut() {
        let mut v = [0u8; 3];
        for c in &mut v {
            *c = to_u8(rng.random::<f32>() * spec.noise_amplitude);
        }
        *px = Rgb(v);
    }

    let k = rng.random_range(spec.min_concepts_per_image..=spec.max_concepts_per_image);
    let chosen: Vec<usize> = sample(&mut rng, spec.concepts.len(), k).into_vec();
    let mut boxes: Vec<[usize; 3]> = Vec::new();
    let mut shapes = Vec::with_capacity(k);
    for &ci in &chosen {
        let concept = &spec.concepts[ci];
        let mut placed = None;
        for _ in 0..PLACEMENT_RETRIES {
            let size = rng.random_range(spec.shape_size[0]..=spec.shape_size[1]);
            let y0 = rng.random_range(0..=h - size);
            let x0 = rng.random_range(0..=w - size);
            let clear = boxes.iter().all(|&[by, bx, bs]| {
                // 2px gap between bounding boxes
                y0 + size + 2 <= by || by + bs + 2 <= y0 || x0 + size + 2 <= bx || bx + bs + 2 <= x0
            });
            if !clear {
                continue;
            }
            let mask = Mask::from_shape_fn((h, w), |(y, x)| {
                y >= y0
                    && y < y0 + size
                    && x >= x0
                    && x < x0 + size
                    && concept.shape.covers(y - y0, x - x0, size)
            });
            let grid = (spec.feature_grid[0], spec.feature_grid[1]);
            if count_ones(&resize_mask(&mask, grid)?) == 0 {
                continue;
            }
            placed = Some((y0, x0, size, mask));
            break;
        }
        let (y0, x0, size, mask) = placed.ok_or_else(|| {
            Error::InvalidArgument(format!(
                "could not place {k} non-overlapping shapes in image {index} after {PLACEMENT_RETRIES} tries; use smaller shapes or fewer concepts per image"
            ))
        })?;
        let jitter = |rng: &mut ChaCha8Rng, v: f32| {
            (v + (rng.random::<f32>() * 2.0 - 1.0) * spec.color_jitter).clamp(0.0, 1.0)
        };
        let color = [
            jitter(&mut rng, concept.color[0]),
            jitter(&mut rng, concept.color[1]),
            jitter(&mut rng, concept.color[2]),
        ];
        for y in 0..size {
            for x in 0..size {
                if concept.shape.paints(y, x, size) {
                    pixels.put_pixel(
                        (x0 + x) as u32,
                        (y0 + y) as u32,
                        Rgb(color.map(to_u8)),
                    );
                }
            }
        }
        boxes.push([y0, x0, size]);
        shapes.push((ci, mask));
    }

    let names: Vec<&str> = chosen.iter().map(|&c| spec.concepts[c].name.as_str()).collect();
    let group = spec.concept_probability_a(&names).map(|p| {
        if rng.random::<f64>() < p {
            Group::A
        } else {
            Group::B
        }
    });
    Ok(RenderedImage {
        id: format!("img_{index:05}"),
        pixels,
        shapes,
        group,
    })
}

/// Renders the whole corpus into `out_dir` (`images/`, `masks/`, `manifest.jsonl`).
pub fn generate(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    for sub in ["images", "masks"] {
        let p = out_dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let [h, w] = spec.image_size;
    let entries = (0..spec.n_images)
        .into_par_iter()
        .map(|i| {
            let r = render(spec, i)?;
            let image_rel = PathBuf::from(format!("images/{}.png", r.id));
            let p = out_dir.join(&image_rel);
            r.pixels
                .save(&p)
                .map_err(|source| Error::Image { path: p, source })?;
            let mut annotations = Vec::with_capacity(r.shapes.len());
            for (j, (ci, mask)) in r.shapes.iter().enumerate() {
                let mask_rel = PathBuf::from(format!("masks/{}_{j}.png", r.id));
                let p = out_dir.join(&mask_rel);
                let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
                    Luma([if mask[[y as usize, x as usize]] { 255 } else { 0 }])
                });
                img.save(&p)
                    .map_err(|source| Error::Image { path: p, source })?;
                annotations.push(AnnotationRecord {
                    concept: spec.concepts[*ci].name.to_lowercase(),
                    mask: MaskSource::Png { path: mask_rel },
                });
            }
            Ok(ManifestEntry {
                id: r.id,
                image: image_rel,
                width: Some(w as u32),
                height: Some(h as u32),
                group: r.group,
                annotations,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest::from_entries(out_dir, entries)?;
    manifest.save(out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

struct PaletteColor {
    name: &'static str,
    rgb: [f32; 3],
    synonyms: [&'static str; 3],
}

const PALETTE: &[PaletteColor] = &[
    PaletteColor { name: "red", rgb: [0.85, 0.15, 0.15], synonyms: ["crimson", "scarlet", "ruby"] },
    PaletteColor { name: "blue", rgb: [0.15, 0.30, 0.90], synonyms: ["azure", "navy", "cobalt"] },
    PaletteColor { name: "green", rgb: [0.15, 0.75, 0.20], synonyms: ["emerald", "olive", "jade"] },
    PaletteColor { name: "yellow", rgb: [0.90, 0.85, 0.15], synonyms: ["golden", "amber", "lemon"] },
    PaletteColor { name: "purple", rgb: [0.60, 0.20, 0.75], synonyms: ["violet", "lilac", "mauve"] },
    PaletteColor { name: "orange", rgb: [0.95, 0.55, 0.10], synonyms: ["tangerine", "apricot", "copper"] },
    PaletteColor { name: "pink", rgb: [0.95, 0.55, 0.70], synonyms: ["rose", "salmon", "magenta"] },
    PaletteColor { name: "white", rgb: [0.95, 0.95, 0.95], synonyms: ["ivory", "snowy", "pale"] },
];

const SHAPE_WORDS: &[(&str, [&str; 3])] = &[
    ("square", ["box", "block", "tile"]),
    ("disc", ["circle", "round", "dot"]),
    ("triangle", ["wedge", "pyramid", "arrowhead"]),
    ("stripes", ["striped", "lines", "bands"]),
    ("ring", ["hoop", "loop", "annulus"]),
    ("cross", ["plus", "crossed", "intersect"]),
    ("star", ["starry", "asterisk", "pentagram"]),
    ("diamond", ["rhombus", "lozenge", "kite"]),
];

const HUB_WORDS: &[&str] = &["shape", "object", "thing", "pattern", "color", "figure", "form", "item"];

/// Knobs for the synthetic vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabularySpec {
    pub dim: usize,
    pub seed: u64,
    /// Noise added to composite (color+shape) tokens, relative to a unit attribute vector.
    pub composite_noise: f64,
    /// Noise added to synonyms of attribute words.
    pub synonym_noise: f64,
    /// Noise around the hub direction (mean of all composites).
    pub hub_noise: f64,
    /// Random unit vectors with pronounceable names.
    pub filler_words: usize,
}

impl Default for VocabularySpec {
    fn default() -> Self {
        Self {
            dim: 64,
            seed: 7,
            composite_noise: 0.25,
            synonym_noise: 0.45,
            hub_noise: 0.3,
            filler_words: 400,
        }
    }
}

/// Builds a GloVe-style vocabulary covering every concept of `concepts`.
///
/// Attribute words (colors, shapes) get independent random directions;
/// `<color><shape>` tokens are the normalized sum of their attributes plus
/// noise; each attribute word has three noisy synonyms; hub words sit near
/// the centroid of all composites. Rows are unit length, in a deterministic
/// order.
pub fn generate_vocabulary(
    concepts: &[SynthConcept],
    spec: &VocabularySpec,
) -> Result<Vec<(String, Vec<f32>)>> {
    if spec.dim < 2 {
        return Err(Error::InvalidArgument("vocabulary dim must be >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dim = spec.dim;
    let gauss = |rng: &mut ChaCha8Rng| -> Array1<f64> {
        let v: Array1<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.dot(&v).sqrt();
        v / n
    };

    let mut words: BTreeMap<String, Array1<f64>> = BTreeMap::new();
    let mut colors: BTreeMap<String, Array1<f64>> = BTreeMap::new();
    let mut shapes: BTreeMap<String, Array1<f64>> = BTreeMap::new();

    let mut color_names: Vec<String> = PALETTE.iter().map(|c| c.name.to_string()).collect();
    for c in concepts {
        if let Some(name) = &c.color_name {
            if !color_names.contains(name) {
                color_names.push(name.clone());
            }
        }
    }
    let mut shape_names: Vec<String> = SHAPE_WORDS.iter().map(|(s, _)| s.to_string()).collect();
    for c in concepts {
        let w = c.shape.word().to_string();
        if !shape_names.contains(&w) {
            shape_names.push(w);
        }
    }

    for name in &color_names {
        let base = gauss(&mut rng);
        let synonyms: Vec<&str> = PALETTE
            .iter()
            .find(|c| c.name == name)
            .map(|c| c.synonyms.to_vec())
            .unwrap_or_default();
        for syn in synonyms {
            let v = unit(&base + &(gauss(&mut rng) * spec.synonym_noise));
            words.insert(syn.to_string(), v);
        }
        words.insert(name.clone(), base.clone());
        colors.insert(name.clone(), base);
    }
    for name in &shape_names {
        let base = gauss(&mut rng);
        let synonyms: Vec<&str> = SHAPE_WORDS
            .iter()
            .find(|(s, _)| s == name)
            .map(|(_, syn)| syn.to_vec())
            .unwrap_or_default();
        for syn in synonyms {
            let v = unit(&base + &(gauss(&mut rng) * spec.synonym_noise));
            words.insert(syn.to_string(), v);
        }
        words.insert(name.clone(), base.clone());
        shapes.insert(name.clone(), base);
    }

    let mut centroid = Array1::<f64>::zeros(dim);
    for (cname, cvec) in &colors {
        for (sname, svec) in &shapes {
            let v = unit(cvec + svec + &(gauss(&mut rng) * spec.composite_noise));
            centroid += &v;
            words.insert(format!("{cname}{sname}"), v);
        }
    }
    for c in concepts {
        let key = c.name.to_lowercase();
        if words.contains_key(&key) {
            continue;
        }
        let color = match &c.color_name {
            Some(n) => colors[n].clone(),
            None => gauss(&mut rng),
        };
        let v = unit(&color + &shapes[c.shape.word()] + &(gauss(&mut rng) * spec.composite_noise));
        words.insert(key, v);
    }
    let centroid = unit(centroid);
    for hub in HUB_WORDS {
        let v = unit(&centroid + &(gauss(&mut rng) * spec.hub_noise));
        words.entry(hub.to_string()).or_insert(v);
    }
    let mut filler = 0;
    while filler < spec.filler_words {
        let name = pseudo_word(&mut rng);
        if words.contains_key(&name) {
            continue;
        }
        words.insert(name, gauss(&mut rng));
        filler += 1;
    }

    Ok(words
        .into_iter()
        .map(|(k, v)| (k, v.iter().map(|&x| x as f32).collect()))
        .collect())
}

fn unit(v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    v / n
}

fn pseudo_word(rng: &mut impl RngCore) -> String {
    const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "tr", "st"];
    const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];
    let syllables = rng.random_range(2..=3);
    let mut s = String::new();
    for _ in 0..syllables {
        s.push_str(ONSETS[rng.random_range(0..ONSETS.len())]);
        s.push_str(VOWELS[rng.random_range(0..VOWELS.len())]);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_concept(n: usize) -> SynthSpec {
        let mut spec = SynthSpec::default_shapes(n, 5);
        spec.concepts.truncate(1);
        spec.max_concepts_per_image = 1;
        spec
    }

    #[test]
    fn one_concept_ten_images() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate(&one_concept(10), dir.path()).unwrap();
        assert_eq!(m.len(), 10);
        assert!(m.entries().iter().all(|e| e.annotations.len() == 1));
        let img = m.load_entry(3).unwrap();
        assert_eq!(img.image.shape(), &[3, 64, 64]);
        assert!(count_ones(&img.annotations[0].mask) > 0);
    }

    #[test]
    fn same_seed_gives_identical_manifest_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let spec = SynthSpec::default_shapes(12, 9);
        generate(&spec, a.path()).unwrap();
        generate(&spec, b.path()).unwrap();
        let read = |d: &Path, f: &str| fs::read(d.join(f)).unwrap();
        assert_eq!(read(a.path(), "manifest.jsonl"), read(b.path(), "manifest.jsonl"));
        assert_eq!(
            read(a.path(), "images/img_00007.png"),
            read(b.path(), "images/img_00007.png")
        );
    }

    #[test]
    fn planted_group_fraction_within_binomial_tolerance() {
        // p = 0.9, n = 1000: 3 sigma ≈ 0.028
        let mut spec = one_concept(1000);
        let name = spec.concepts[0].name.clone();
        spec.group_bias = Some([(name, 0.9)].into());
        let a = (0..1000)
            .filter(|&i| render(&spec, i).unwrap().group == Some(Group::A))
            .count();
        let frac = a as f64 / 1000.0;
        assert!((frac - 0.9).abs() <= 0.03, "A-fraction {frac}");
    }

    #[test]
    fn shapes_do_not_overlap_and_survive_grid_resize() {
        let spec = SynthSpec::default_shapes(60, 1);
        for i in 0..60 {
            let r = render(&spec, i).unwrap();
            for (a, (_, ma)) in r.shapes.iter().enumerate() {
                assert!(count_ones(&resize_mask(ma, (8, 8)).unwrap()) >= 1);
                for (_, mb) in r.shapes.iter().skip(a + 1) {
                    assert!(ma.iter().zip(mb.iter()).all(|(&x, &y)| !(x && y)));
                }
            }
        }
    }

    #[test]
    fn impossible_placement_errors() {
        let mut spec = SynthSpec::default_shapes(1, 0);
        spec.image_size = [16, 16];
        spec.shape_size = [14, 14];
        spec.min_concepts_per_image = 2;
        spec.feature_grid = [2, 2];
        let err = render(&spec, 0).unwrap_err();
        assert!(err.to_string().contains("smaller shapes"));
    }

    #[test]
    fn vocabulary_contains_concepts_and_is_compositional() {
        let spec = SynthSpec::default_shapes(1, 0);
        let rows = generate_vocabulary(&spec.concepts, &VocabularySpec::default()).unwrap();
        let (table, _) = crate::embedding::EmbeddingTable::from_rows(rows).unwrap();
        for c in &spec.concepts {
            assert!(table.contains(&c.name));
        }
        let dot = |a: &str, b: &str| {
            let (x, y) = (table.lookup(a).unwrap(), table.lookup(b).unwrap());
            x.dot(&y)
        };
        // composite is closer to its attributes than to an unrelated composite
        assert!(dot("redsquare", "red") > 0.4);
        assert!(dot("redsquare", "square") > 0.4);
        assert!(dot("redsquare", "bluedisc").abs() < 0.4);
    }
}
