//! Target feature extractors, per-filter activation statistics and thresholds.

mod cnn;
mod dump;

use std::path::Path;

use ndarray::{Array2, Array3, ArrayView3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use cnn::{
    average_precision, train_toy_backbone, BackboneConfig, CnnArch, LabelMode, ToyCnn,
    TrainingReport,
};
pub use dump::{is_dump_file, write_dump, FeatureDump, DUMP_LAYER, DUMP_MAGIC, HEADER_BYTES};

use crate::data::AnnotatedImage;
use crate::{Error, Result};

pub const DEFAULT_QUANTILE_P: f64 = 0.005;
pub const DEFAULT_SAMPLE_CAP: usize = 10_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub image_id: String,
    pub layer: String,
    /// d × h' × w'.
    pub values: Array3<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    NativeCnn,
    FeatureDump,
}

#[derive(Debug, Clone)]
pub enum BackboneHandle {
    Native(ToyCnn),
    Dump(FeatureDump),
}

impl BackboneHandle {
    /// Opens either a feature dump (sniffed by magic) or a JSON CNN checkpoint.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if is_dump_file(path) {
            Ok(Self::Dump(FeatureDump::open(path)?))
        } else {
            Ok(Self::Native(ToyCnn::load(path)?))
        }
    }

    pub fn kind(&self) -> BackboneKind {
        match self {
            Self::Native(_) => BackboneKind::NativeCnn,
            Self::Dump(_) => BackboneKind::FeatureDump,
        }
    }

    pub fn supports_extraction(&self) -> bool {
        matches!(self, Self::Native(_))
    }

    pub fn layer_names(&self) -> Vec<String> {
        match self {
            Self::Native(net) => net.layer_names(),
            Self::Dump(_) => vec![DUMP_LAYER.to_string()],
        }
    }

    /// The deepest layer, the usual explanation target.
    pub fn default_layer(&self) -> String {
        self.layer_names().pop().expect("at least one layer")
    }

    pub fn extract(&self, image: ArrayView3<f32>, layer: &str) -> Result<Array3<f32>> {
        match self {
            Self::Native(net) => net.extract(image, layer),
            Self::Dump(_) => Err(Error::Unsupported(
                "feature-dump backends cannot run a forward pass; use lookup_dump".into(),
            )),
        }
    }

    pub fn lookup_dump(&self, image_id: &str) -> Result<FeatureMap> {
        match self {
            Self::Dump(d) => d.lookup(image_id),
            Self::Native(_) => Err(Error::Unsupported(
                "lookup_dump needs a feature-dump backend".into(),
            )),
        }
    }

    /// Feature map of a dataset image: forward pass or dump lookup.
    pub fn features(&self, image: &AnnotatedImage, layer: &str) -> Result<FeatureMap> {
        match self {
            Self::Native(net) => Ok(FeatureMap {
                image_id: image.id.clone(),
                layer: layer.to_string(),
                values: net.extract(image.image.view(), layer)?,
            }),
            Self::Dump(d) => {
                check_dump_layer(layer)?;
                d.lookup(&image.id)
            }
        }
    }
}

fn check_dump_layer(layer: &str) -> Result<()> {
    if layer == DUMP_LAYER {
        Ok(())
    } else {
        Err(Error::NotFound(format!(
            "layer `{layer}` (feature dumps expose only `{DUMP_LAYER}`)"
        )))
    }
}

/// Feature maps of one layer over a dataset, with per-filter spatial maxima.
#[derive(Debug, Clone)]
pub struct FeatureBank {
    layer: String,
    ids: Vec<String>,
    maps: Vec<Array3<f32>>,
    /// n_images × d.
    max: Array2<f32>,
}

impl FeatureBank {
    pub fn build(handle: &BackboneHandle, images: &[AnnotatedImage], layer: &str) -> Result<Self> {
        let maps: Vec<Array3<f32>> = images
            .par_iter()
            .map(|im| handle.features(im, layer).map(|f| f.values))
            .collect::<Result<_>>()?;
        Self::from_maps(
            layer,
            images.iter().map(|im| im.id.clone()).collect(),
            maps,
        )
    }

    pub fn from_maps(layer: &str, ids: Vec<String>, maps: Vec<Array3<f32>>) -> Result<Self> {
        if maps.is_empty() {
            return Err(Error::Empty("feature bank has no images".into()));
        }
        if ids.len() != maps.len() {
            return Err(Error::Shape("one id per feature map required".into()));
        }
        let shape = maps[0].dim();
        for (id, m) in ids.iter().zip(&maps) {
            if m.dim() != shape {
                return Err(Error::Shape(format!(
                    "map `{id}` is {:?}, expected {shape:?}",
                    m.dim()
                )));
            }
            if let Some(v) = m.iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("activation {v} in map `{id}`")));
            }
        }
        let d = shape.0;
        let mut max = Array2::zeros((maps.len(), d));
        for (mut row, m) in max.outer_iter_mut().zip(&maps) {
            for (u, ch) in m.outer_iter().enumerate() {
                row[u] = ch.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            }
        }
        Ok(Self {
            layer: layer.to_string(),
            ids,
            maps,
            max,
        })
    }

    pub fn layer(&self) -> &str {
        &self.layer
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// (d, h', w').
    pub fn shape(&self) -> (usize, usize, usize) {
        self.maps[0].dim()
    }

    pub fn n_filters(&self) -> usize {
        self.shape().0
    }

    pub fn map(&self, i: usize) -> &Array3<f32> {
        &self.maps[i]
    }

    pub fn feature_map(&self, i: usize) -> FeatureMap {
        FeatureMap {
            image_id: self.ids[i].clone(),
            layer: self.layer.clone(),
            values: self.maps[i].clone(),
        }
    }

    /// Spatial maximum of filter `u` on image `i`.
    pub fn max_activation(&self, i: usize, u: usize) -> f32 {
        self.max[[i, u]]
    }

    pub fn write_dump(&self, path: impl AsRef<Path>) -> Result<()> {
        write_dump(
            path,
            self.ids.iter().map(String::as_str).zip(self.maps.iter().map(|m| m.view())),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    pub layer: String,
    pub quantile_p: f64,
    pub thresholds: Vec<f32>,
    /// Filters whose sampled activations are all equal.
    pub degenerate: Vec<bool>,
    /// Activations pooled per filter.
    pub sample_count: usize,
}

/// Upper `quantile_p` point of a pooled sample: sorted ascending, the value at
/// index N − 1 − round(p·N). Returns (threshold, constant-sample flag).
pub fn pooled_quantile(values: &mut [f32], quantile_p: f64) -> (f32, bool) {
    assert!(!values.is_empty());
    values.sort_unstable_by(f32::total_cmp);
    let n = values.len();
    let k = n - 1 - ((quantile_p * n as f64).round() as usize).min(n - 1);
    (values[k], values[0] == values[n - 1])
}

/// Per-filter thresholds from the activations of every spatial position of
/// every (sampled) image. Images are subsampled at an even stride once the
/// pooled count would exceed `sample_cap`.
pub fn compute_thresholds(
    bank: &FeatureBank,
    quantile_p: f64,
    sample_cap: usize,
) -> Result<ThresholdTable> {
    if !(quantile_p > 0.0 && quantile_p < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "quantile_p must be in (0,1), got {quantile_p}"
        )));
    }
    let (d, h, w) = bank.shape();
    let per_image = h * w;
    let n = bank.len();
    let keep = (sample_cap / per_image).clamp(1, n);
    let picked: Vec<usize> = (0..keep).map(|j| j * n / keep).collect();
    let (thresholds, degenerate): (Vec<f32>, Vec<bool>) = (0..d)
        .into_par_iter()
        .map(|u| {
            let mut pool: Vec<f32> = Vec::with_capacity(picked.len() * per_image);
            for &i in &picked {
                pool.extend(bank.map(i).index_axis(Axis(0), u).iter());
            }
            pooled_quantile(&mut pool, quantile_p)
        })
        .unzip();
    Ok(ThresholdTable {
        layer: bank.layer().to_string(),
        quantile_p,
        thresholds,
        degenerate,
        sample_count: picked.len() * per_image,
    })
}

/// Indices of the `p_images` images with the largest spatial max on filter
/// `u`; ties go to the lexicographically smaller id.
pub fn top_activated_images(bank: &FeatureBank, u: usize, p_images: usize) -> Result<Vec<usize>> {
    if u >= bank.n_filters() {
        return Err(Error::InvalidArgument(format!(
            "filter {u} out of range (d = {})",
            bank.n_filters()
        )));
    }
    if p_images == 0 || p_images > bank.len() {
        return Err(Error::InvalidArgument(format!(
            "p_images must be in 1..={}, got {p_images}",
            bank.len()
        )));
    }
    let mut order: Vec<usize> = (0..bank.len()).collect();
    order.sort_by(|&a, &b| {
        bank.max_activation(b, u)
            .total_cmp(&bank.max_activation(a, u))
            .then_with(|| bank.ids[a].cmp(&bank.ids[b]))
    });
    order.truncate(p_images);
    Ok(order)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bank_from(values: Vec<Vec<f32>>, d: usize, h: usize, w: usize) -> FeatureBank {
        let ids = (0..values.len()).map(|i| format!("img{i:03}")).collect();
        let maps = values
            .into_iter()
            .map(|v| Array3::from_shape_vec((d, h, w), v).unwrap())
            .collect();
        FeatureBank::from_maps("conv4", ids, maps).unwrap()
    }

    #[test]
    fn uniform_one_to_thousand() {
        // pooled values 1..=1000 across 10 images of 10×10
        let values = (0..10)
            .map(|i| (0..100).map(|j| (i * 100 + j + 1) as f32).collect())
            .collect();
        let bank = bank_from(values, 1, 10, 10);
        let t = compute_thresholds(&bank, 0.005, DEFAULT_SAMPLE_CAP).unwrap();
        // sorted ascending, index 1000 - 1 - 5 = 994 → value 995
        assert_eq!(t.thresholds, vec![995.0]);
        assert_eq!(t.sample_count, 1000);
        let above = (1..=1000).filter(|&v| v as f32 > t.thresholds[0]).count();
        assert_eq!(above, 5);
    }

    #[test]
    fn median_and_degenerate_filters() {
        let mut v: Vec<f32> = (-50..=50).map(|x| x as f32).collect();
        // 101 values: index 100 - round(50.5) = 49 → one below the median
        assert_eq!(pooled_quantile(&mut v, 0.5), (-1.0, false));
        let bank = bank_from(vec![vec![0.0; 2 * 4], vec![0.0; 2 * 4]], 2, 2, 2);
        let t = compute_thresholds(&bank, 0.005, DEFAULT_SAMPLE_CAP).unwrap();
        assert_eq!(t.thresholds, vec![0.0, 0.0]);
        assert_eq!(t.degenerate, vec![true, true]);
    }

    #[test]
    fn rejects_bad_quantile() {
        let bank = bank_from(vec![vec![1.0; 4]], 1, 2, 2);
        assert!(compute_thresholds(&bank, 0.0, 10).is_err());
        assert!(compute_thresholds(&bank, 1.0, 10).is_err());
    }

    #[test]
    fn calibration_on_a_million_activations() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (n_img, h, w) = (1000, 25, 40);
        let values = (0..n_img)
            .map(|_| {
                (0..h * w)
                    .map(|_| {
                        // ReLU-like: half exact zeros, half exponential tail
                        let x: f32 = rng.random();
                        if x < 0.5 { 0.0 } else { -(1.0 - rng.random::<f32>()).ln() }
                    })
                    .collect()
            })
            .collect();
        let bank = bank_from(values, 1, h, w);
        let t = compute_thresholds(&bank, 0.005, DEFAULT_SAMPLE_CAP).unwrap();
        let n = t.sample_count;
        assert_eq!(n, 1_000_000);
        let above = (0..n_img)
            .flat_map(|i| bank.map(i).iter().copied().collect::<Vec<_>>())
            .filter(|&v| v > t.thresholds[0])
            .count();
        let tol = 0.001f64.max(2.0 / (n as f64).sqrt());
        assert!((above as f64 / n as f64 - 0.005).abs() <= tol);
    }

    #[test]
    fn sample_cap_strides_images() {
        let values = (0..10).map(|i| vec![i as f32; 4]).collect();
        let bank = bank_from(values, 1, 2, 2);
        let t = compute_thresholds(&bank, 0.5, 8).unwrap();
        // cap 8 → 2 images (0 and 5)
        assert_eq!(t.sample_count, 8);
        assert_eq!(t.thresholds, vec![0.0]);
    }

    #[test]
    fn top_images_rank_by_max_then_id() {
        let values = vec![
            vec![0.1, 0.9, 0.0, 0.0],
            vec![0.9, 0.0, 0.0, 0.0],
            vec![0.5, 0.5, 0.5, 0.5],
            vec![2.0, 0.0, 0.0, 0.0],
        ];
        let bank = bank_from(values, 1, 2, 2);
        assert_eq!(top_activated_images(&bank, 0, 4).unwrap(), vec![3, 0, 1, 2]);
        assert_eq!(top_activated_images(&bank, 0, 1).unwrap(), vec![3]);
        assert!(top_activated_images(&bank, 0, 5).is_err());
        assert!(top_activated_images(&bank, 0, 0).is_err());
        assert!(top_activated_images(&bank, 1, 1).is_err());
    }

    #[test]
    fn dump_handle_rejects_extraction() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.fmd");
        let bank = bank_from(vec![vec![1.0; 8]], 2, 2, 2);
        bank.write_dump(&path).unwrap();
        let handle = BackboneHandle::open(&path).unwrap();
        assert_eq!(handle.kind(), BackboneKind::FeatureDump);
        let img = Array3::zeros((3, 8, 8));
        assert!(matches!(handle.extract(img.view(), "dump"), Err(Error::Unsupported(_))));
        assert_eq!(handle.lookup_dump("img000").unwrap().values, *bank.map(0));
    }

    proptest! {
        #[test]
        fn threshold_exceedance_is_bounded(values in prop::collection::vec(-100i32..100, 1..400),
                                          p in 0.001f64..0.999) {
            let mut v: Vec<f32> = values.iter().map(|&x| x as f32).collect();
            let n = v.len();
            let (t, _) = pooled_quantile(&mut v, p);
            let above = v.iter().filter(|&&x| x > t).count();
            let at_or_above = v.iter().filter(|&&x| x >= t).count();
            // with ties, the threshold sits on a value whose tie group straddles rank p·N
            let target = (p * n as f64).round() as usize;
            prop_assert!(above <= target.min(n - 1));
            prop_assert!(at_or_above > target.min(n - 1));
        }
    }
}
