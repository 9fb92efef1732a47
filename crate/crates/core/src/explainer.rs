//! Feature explainer: maps (masked) feature tensors onto the unit sphere of the
//! word-embedding space, trained with a margin ranking objective.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use log::{info, warn};
use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureBank;
use crate::data::{resize_mask, AnnotatedImage, Mask};
use crate::embedding::EmbeddingTable;
use crate::optim::Adam;
use crate::{Error, Result};

/// Zeroes every channel outside `mask` (given at image resolution).
pub fn masked_features(features: ArrayView3<f32>, mask: &Mask) -> Result<Array3<f32>> {
    let (_, h, w) = features.dim();
    let small = resize_mask(mask, (h, w))?;
    if !small.iter().any(|&b| b) {
        return Err(Error::EmptyMask);
    }
    let mut out = features.to_owned();
    for mut ch in out.outer_iter_mut() {
        ndarray::Zip::from(&mut ch).and(&small).for_each(|v, &keep| {
            if !keep {
                *v = 0.0;
            }
        });
    }
    Ok(out)
}

/// Mean over negatives of `max(0, margin − v_tᵀv̂ + v_cᵀv̂)`; `negatives` holds one
/// concept vector per row.
pub fn hinge_rank_loss(
    v_hat: ArrayView1<f64>,
    target: ArrayView1<f64>,
    negatives: ArrayView2<f64>,
    margin: f64,
) -> Result<f64> {
    Ok(hinge_rank_loss_grad(v_hat, target, negatives, margin)?.0)
}

/// Loss and its gradient with respect to `v_hat`.
pub fn hinge_rank_loss_grad(
    v_hat: ArrayView1<f64>,
    target: ArrayView1<f64>,
    negatives: ArrayView2<f64>,
    margin: f64,
) -> Result<(f64, Array1<f64>)> {
    if negatives.nrows() == 0 {
        return Err(Error::Undefined("hinge loss needs at least one negative".into()));
    }
    let k = negatives.nrows() as f64;
    let pos = target.dot(&v_hat);
    let mut loss = 0.0;
    let mut grad = Array1::zeros(v_hat.len());
    let mut active = 0usize;
    for neg in negatives.outer_iter() {
        let term = margin - pos + neg.dot(&v_hat);
        if term > 0.0 {
            loss += term;
            grad += &neg;
            active += 1;
        }
    }
    grad.scaled_add(-(active as f64), &target);
    grad /= k;
    Ok((loss / k, grad))
}

/// Loss as a function of the un-normalized output `z` (v̂ = z/‖z‖), with the
/// gradient pulled back through the normalization.
pub fn hinge_rank_loss_unnormalized(
    z: ArrayView1<f64>,
    target: ArrayView1<f64>,
    negatives: ArrayView2<f64>,
    margin: f64,
) -> Result<(f64, Array1<f64>)> {
    let norm = z.dot(&z).sqrt();
    if norm == 0.0 {
        return Err(Error::ZeroVector);
    }
    let v_hat = &z / norm;
    let (loss, g) = hinge_rank_loss_grad(v_hat.view(), target, negatives, margin)?;
    // (I − v̂v̂ᵀ) g / ‖z‖
    let radial = v_hat.dot(&g);
    Ok((loss, (&g - &(&v_hat * radial)) / norm))
}

/// Table-backed form: concepts are resolved to their unit vectors first.
pub fn concept_hinge_loss(
    v_hat: ArrayView1<f64>,
    target: &str,
    negatives: &[&str],
    table: &EmbeddingTable,
    margin: f64,
) -> Result<f64> {
    if negatives.contains(&target) {
        return Err(Error::InvalidArgument(format!(
            "negatives must exclude the target `{target}`"
        )));
    }
    let t = table.concept_vector(target)?;
    let mut rows = Array2::zeros((negatives.len(), table.dim()));
    for (mut row, n) in rows.outer_iter_mut().zip(negatives) {
        row.assign(&table.concept_vector(n)?);
    }
    hinge_rank_loss(v_hat, t.view(), rows.view(), margin)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Negatives per positive; 0 uses every other training concept.
    pub negatives: usize,
    pub margin: f64,
    /// Width of an optional ReLU layer before the projection.
    pub hidden: Option<usize>,
    /// Share of pairs held out to monitor generalization.
    pub monitor_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 1e-2,
            batch_size: 32,
            negatives: 0,
            margin: 1.0,
            hidden: None,
            monitor_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.margin.is_nan() || self.margin <= 0.0 {
            return Err(Error::InvalidArgument("margin must be positive".into()));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if self.hidden == Some(0) {
            return Err(Error::InvalidArgument("hidden width must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.monitor_fraction) {
            return Err(Error::InvalidArgument("monitor_fraction must be in [0,1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub monitor_loss: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SkipCounts {
    pub empty_mask: usize,
    pub zero_features: usize,
    pub unknown_concept: usize,
    pub outside_split: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLog {
    /// Entry 0 is the untrained model.
    pub history: Vec<EpochLog>,
    pub pairs: usize,
    pub monitor_pairs: usize,
    pub negatives_per_term: usize,
    pub skipped: SkipCounts,
    pub unknown_concepts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
struct Hidden {
    weight: Array2<f64>,
    bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplainerModel {
    input_shape: (usize, usize, usize),
    /// Scale applied after pooling (inverse RMS over training pairs).
    input_scale: Array1<f64>,
    hidden: Option<Hidden>,
    /// e × (d or hidden width), no bias.
    projection: Array2<f64>,
    table_fingerprint: String,
    concepts: Vec<String>,
}

struct Cache {
    x: Array1<f64>,
    h: Option<Array1<f64>>,
    z: Array1<f64>,
}

impl ExplainerModel {
    pub fn new(
        input_shape: (usize, usize, usize),
        embed_dim: usize,
        hidden: Option<usize>,
        seed: u64,
    ) -> Self {
        let d = input_shape.0;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden = hidden.map(|width| {
            let n = Normal::new(0.0, (2.0 / d as f64).sqrt()).unwrap();
            Hidden {
                weight: Array2::from_shape_simple_fn((width, d), || n.sample(&mut rng)),
                bias: Array1::zeros(width),
            }
        });
        let fan_in = hidden.as_ref().map_or(d, |h| h.bias.len());
        let n = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).unwrap();
        Self {
            input_shape,
            input_scale: Array1::ones(d),
            hidden,
            projection: Array2::from_shape_simple_fn((embed_dim, fan_in), || n.sample(&mut rng)),
            table_fingerprint: String::new(),
            concepts: Vec::new(),
        }
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    pub fn embed_dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn table_fingerprint(&self) -> &str {
        &self.table_fingerprint
    }

    /// Concepts seen during training.
    pub fn concepts(&self) -> &[String] {
        &self.concepts
    }

    pub fn check_table(&self, table: &EmbeddingTable) -> Result<()> {
        if !self.table_fingerprint.is_empty() && self.table_fingerprint != table.fingerprint() {
            return Err(Error::InvalidArgument(
                "embedding table differs from the one the explainer was trained against".into(),
            ));
        }
        if table.dim() != self.embed_dim() {
            return Err(Error::Shape(format!(
                "explainer outputs {} dims, table has {}",
                self.embed_dim(),
                table.dim()
            )));
        }
        Ok(())
    }

    /// Unit vector for a d×h'×w' feature tensor.
    pub fn embed(&self, features: ArrayView3<f32>) -> Result<Array1<f64>> {
        if features.dim() != self.input_shape {
            return Err(Error::Shape(format!(
                "explainer expects {:?}, got {:?}",
                self.input_shape,
                features.dim()
            )));
        }
        self.embed_pooled(pool(features).view())
    }

    pub fn embed_pooled(&self, pooled: ArrayView1<f64>) -> Result<Array1<f64>> {
        let z = self.forward(pooled).z;
        let norm = z.dot(&z).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::ZeroVector);
        }
        Ok(z / norm)
    }

    fn forward(&self, pooled: ArrayView1<f64>) -> Cache {
        let x = &pooled * &self.input_scale;
        let (h, z) = match &self.hidden {
            Some(hd) => {
                let h = (hd.weight.dot(&x) + &hd.bias).mapv(|v| v.max(0.0));
                let z = self.projection.dot(&h);
                (Some(h), z)
            }
            None => (None, self.projection.dot(&x)),
        };
        Cache { x, h, z }
    }

    fn zero_grads(&self) -> Vec<Array1<f64>> {
        let mut out = vec![Array1::zeros(self.projection.len())];
        if let Some(h) = &self.hidden {
            out.push(Array1::zeros(h.weight.len()));
            out.push(Array1::zeros(h.bias.len()));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.projection.as_slice_mut().unwrap()];
        if let Some(h) = &mut self.hidden {
            out.push(h.weight.as_slice_mut().unwrap());
            out.push(h.bias.as_slice_mut().unwrap());
        }
        out
    }

    /// Accumulates d loss / d params for one pair into `grads` (same layout as
    /// `params_mut`).
    fn backward(&self, cache: &Cache, dz: &Array1<f64>, grads: &mut [Array1<f64>]) {
        let input = cache.h.as_ref().unwrap_or(&cache.x);
        let e = self.projection.nrows();
        let n = input.len();
        {
            let g = grads[0].as_slice_mut().unwrap();
            for i in 0..e {
                for j in 0..n {
                    g[i * n + j] += dz[i] * input[j];
                }
            }
        }
        if let (Some(hd), Some(h)) = (&self.hidden, &cache.h) {
            let mut dh = self.projection.t().dot(dz);
            ndarray::Zip::from(&mut dh).and(h).for_each(|g, &a| {
                if a <= 0.0 {
                    *g = 0.0;
                }
            });
            let d = cache.x.len();
            let gw = grads[1].as_slice_mut().unwrap();
            for i in 0..hd.bias.len() {
                for j in 0..d {
                    gw[i * d + j] += dh[i] * cache.x[j];
                }
            }
            grads[2] += &dh;
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string(&ExplainerCheckpoint::from(self))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: ExplainerCheckpoint = serde_json::from_str(&text)?;
        ckpt.into_model().map_err(|message| Error::Format {
            path: path.to_path_buf(),
            message,
        })
    }
}

/// Global average over the spatial grid, per channel.
pub fn pool(features: ArrayView3<f32>) -> Array1<f64> {
    let (_, h, w) = features.dim();
    let n = (h * w) as f64;
    features
        .outer_iter()
        .map(|ch| ch.iter().map(|&v| v as f64).sum::<f64>() / n)
        .collect()
}

const EXPLAINER_FORMAT: &str = "explainer_v1";

#[derive(Serialize, Deserialize)]
struct ExplainerCheckpoint {
    format: String,
    input_shape: [usize; 3],
    embed_dim: usize,
    hidden: Option<usize>,
    table_fingerprint: String,
    concepts: Vec<String>,
    input_scale: Vec<f64>,
    hidden_weight: Option<Vec<f64>>,
    hidden_bias: Option<Vec<f64>>,
    projection: Vec<f64>,
}

impl From<&ExplainerModel> for ExplainerCheckpoint {
    fn from(m: &ExplainerModel) -> Self {
        let (d, h, w) = m.input_shape;
        Self {
            format: EXPLAINER_FORMAT.into(),
            input_shape: [d, h, w],
            embed_dim: m.embed_dim(),
            hidden: m.hidden.as_ref().map(|h| h.bias.len()),
            table_fingerprint: m.table_fingerprint.clone(),
            concepts: m.concepts.clone(),
            input_scale: m.input_scale.to_vec(),
            hidden_weight: m.hidden.as_ref().map(|h| h.weight.iter().copied().collect()),
            hidden_bias: m.hidden.as_ref().map(|h| h.bias.to_vec()),
            projection: m.projection.iter().copied().collect(),
        }
    }
}

impl ExplainerCheckpoint {
    fn into_model(self) -> std::result::Result<ExplainerModel, String> {
        if self.format != EXPLAINER_FORMAT {
            return Err(format!("unexpected checkpoint format `{}`", self.format));
        }
        let [d, h, w] = self.input_shape;
        if self.input_scale.len() != d {
            return Err("input_scale length does not match d".into());
        }
        let hidden = match (self.hidden, self.hidden_weight, self.hidden_bias) {
            (None, None, None) => None,
            (Some(width), Some(weight), Some(bias)) if bias.len() == width => Some(Hidden {
                weight: Array2::from_shape_vec((width, d), weight).map_err(|e| e.to_string())?,
                bias: Array1::from(bias),
            }),
            _ => return Err("inconsistent hidden layer".into()),
        };
        let fan_in = hidden.as_ref().map_or(d, |h| h.bias.len());
        let projection = Array2::from_shape_vec((self.embed_dim, fan_in), self.projection)
            .map_err(|e| e.to_string())?;
        Ok(ExplainerModel {
            input_shape: (d, h, w),
            input_scale: Array1::from(self.input_scale),
            hidden,
            projection,
            table_fingerprint: self.table_fingerprint,
            concepts: self.concepts,
        })
    }
}

/// One (image, annotation) training example, already pooled.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub image_id: String,
    pub concept: String,
    pub pooled: Array1<f64>,
}

/// Pools `F ⊙ M` for every annotation whose concept is in `concepts` and
/// resolvable in `table`.
pub fn collect_pairs(
    bank: &FeatureBank,
    images: &[AnnotatedImage],
    table: &EmbeddingTable,
    concepts: &[String],
) -> Result<(Vec<TrainingPair>, SkipCounts, Vec<String>)> {
    if bank.len() != images.len() {
        return Err(Error::Shape("feature bank and image list differ in length".into()));
    }
    let mut skipped = SkipCounts::default();
    let mut unknown: BTreeMap<String, bool> = BTreeMap::new();
    let mut pairs = Vec::new();
    for (i, im) in images.iter().enumerate() {
        if bank.ids()[i] != im.id {
            return Err(Error::Shape(format!(
                "feature bank row {i} is `{}`, image is `{}`",
                bank.ids()[i],
                im.id
            )));
        }
        for ann in &im.annotations {
            if !concepts.contains(&ann.concept) {
                skipped.outside_split += 1;
                continue;
            }
            if let Some(resolvable) = unknown.get(&ann.concept) {
                if !*resolvable {
                    skipped.unknown_concept += 1;
                    continue;
                }
            } else {
                let ok = table.concept_vector(&ann.concept).is_ok();
                unknown.insert(ann.concept.clone(), ok);
                if !ok {
                    warn!("concept `{}` is not in the embedding table; skipping", ann.concept);
                    skipped.unknown_concept += 1;
                    continue;
                }
            }
            let masked = match masked_features(bank.map(i).view(), &ann.mask) {
                Ok(m) => m,
                Err(Error::EmptyMask) => {
                    skipped.empty_mask += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let pooled = pool(masked.view());
            if pooled.iter().all(|&v| v == 0.0) {
                skipped.zero_features += 1;
                continue;
            }
            pairs.push(TrainingPair {
                image_id: im.id.clone(),
                concept: ann.concept.clone(),
                pooled,
            });
        }
    }
    let unknown_list = unknown
        .into_iter()
        .filter(|(_, ok)| !ok)
        .map(|(c, _)| c)
        .collect();
    Ok((pairs, skipped, unknown_list))
}

/// Trains the explainer on the features of `images` restricted to `concepts`.
pub fn train_explainer(
    bank: &FeatureBank,
    images: &[AnnotatedImage],
    table: &EmbeddingTable,
    concepts: &[String],
    cfg: &TrainConfig,
) -> Result<(ExplainerModel, TrainLog)> {
    cfg.validate()?;
    let (pairs, skipped, unknown) = collect_pairs(bank, images, table, concepts)?;
    if pairs.is_empty() {
        return Err(Error::Empty("every training pair was skipped".into()));
    }
    let mut vocab: Vec<String> = pairs.iter().map(|p| p.concept.clone()).collect();
    vocab.sort();
    vocab.dedup();
    if vocab.len() < 2 {
        return Err(Error::InvalidArgument(
            "ranking loss needs at least two training concepts".into(),
        ));
    }
    let mut concept_vecs = Array2::zeros((vocab.len(), table.dim()));
    for (mut row, c) in concept_vecs.outer_iter_mut().zip(&vocab) {
        row.assign(&table.concept_vector(c)?);
    }
    let target_of: Vec<usize> = pairs
        .iter()
        .map(|p| vocab.binary_search(&p.concept).unwrap())
        .collect();
    let n_neg = if cfg.negatives == 0 {
        vocab.len() - 1
    } else {
        cfg.negatives.min(vocab.len() - 1)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    let n_monitor = ((pairs.len() as f64 * cfg.monitor_fraction).round() as usize).min(pairs.len() - 1);
    let (monitor, train) = order.split_at(n_monitor);
    let mut train = train.to_vec();

    let mut model = ExplainerModel::new(bank.shape(), table.dim(), cfg.hidden, cfg.seed);
    model.table_fingerprint = table.fingerprint();
    model.concepts = vocab.clone();
    let d = bank.shape().0;
    let mut sq = Array1::<f64>::zeros(d);
    for &i in &train {
        sq += &pairs[i].pooled.mapv(|v| v * v);
    }
    // one global scale: per-channel scaling would amplify filters that are
    // nearly silent during training and whose projection columns stay random
    let rms = (sq.sum() / (train.len() * d) as f64).sqrt();
    model.input_scale.fill(if rms > 0.0 { 1.0 / rms } else { 1.0 });

    let all_negatives = |t: usize| -> Array2<f64> {
        let rows: Vec<usize> = (0..vocab.len()).filter(|&c| c != t).collect();
        concept_vecs.select(Axis(0), &rows)
    };
    // full-set negatives are fixed per target; cache them
    let full_negs: Vec<Array2<f64>> = (0..vocab.len()).map(all_negatives).collect();

    let eval = |model: &ExplainerModel, idx: &[usize]| -> Option<f64> {
        let mut total = 0.0;
        let mut n = 0usize;
        for &i in idx {
            let cache = model.forward(pairs[i].pooled.view());
            let t = target_of[i];
            if let Ok((l, _)) = hinge_rank_loss_unnormalized(
                cache.z.view(),
                concept_vecs.row(t),
                full_negs[t].view(),
                cfg.margin,
            ) {
                total += l;
                n += 1;
            }
        }
        (n > 0).then(|| total / n as f64)
    };

    let mut history = vec![EpochLog {
        epoch: 0,
        train_loss: eval(&model, &train).unwrap_or(f64::NAN),
        monitor_loss: eval(&model, monitor),
    }];
    let mut opt = Adam::new(cfg.learning_rate);
    for epoch in 1..=cfg.epochs {
        train.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut counted = 0usize;
        for batch in train.chunks(cfg.batch_size) {
            let mut grads: Vec<Array1<f64>> = model.zero_grads();
            let mut batch_n = 0usize;
            for &i in batch {
                let t = target_of[i];
                let sampled;
                let negs = if n_neg == vocab.len() - 1 {
                    full_negs[t].view()
                } else {
                    let pick = rand::seq::index::sample(&mut rng, vocab.len() - 1, n_neg);
                    let rows: Vec<usize> = pick
                        .iter()
                        .map(|r| if r >= t { r + 1 } else { r })
                        .collect();
                    sampled = concept_vecs.select(Axis(0), &rows);
                    sampled.view()
                };
                let cache = model.forward(pairs[i].pooled.view());
                let (l, dz) = match hinge_rank_loss_unnormalized(
                    cache.z.view(),
                    concept_vecs.row(t),
                    negs,
                    cfg.margin,
                ) {
                    Ok(v) => v,
                    Err(Error::ZeroVector) => continue,
                    Err(e) => return Err(e),
                };
                model.backward(&cache, &dz, &mut grads);
                epoch_loss += l;
                batch_n += 1;
            }
            if batch_n == 0 {
                continue;
            }
            counted += batch_n;
            for g in &mut grads {
                *g /= batch_n as f64;
            }
            let gs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice().unwrap()).collect();
            let mut params = model.params_mut();
            opt.step(&mut params, &gs);
        }
        let train_loss = epoch_loss / counted.max(1) as f64;
        if !train_loss.is_finite() {
            return Err(Error::NonFinite(format!("explainer loss at epoch {epoch}")));
        }
        let monitor_loss = eval(&model, monitor);
        info!("explainer epoch {epoch}/{}: train {train_loss:.4}, monitor {monitor_loss:?}", cfg.epochs);
        history.push(EpochLog {
            epoch,
            train_loss,
            monitor_loss,
        });
    }
    Ok((
        model,
        TrainLog {
            history,
            pairs: train.len(),
            monitor_pairs: monitor.len(),
            negatives_per_term: n_neg,
            skipped,
            unknown_concepts: unknown,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn unit(v: Array1<f64>) -> Array1<f64> {
        let n = v.dot(&v).sqrt();
        v / n
    }

    #[test]
    fn satisfied_margin_gives_zero() {
        let t = array![1.0, 0.0, 0.0];
        let negs = array![[0.0, 1.0, 0.0]];
        assert_eq!(hinge_rank_loss(t.view(), t.view(), negs.view(), 1.0).unwrap(), 0.0);
    }

    #[test]
    fn hand_computed_losses() {
        let v = array![0.0, 1.0, 0.0];
        let t = array![1.0, 0.0, 0.0];
        let negs = array![[0.0, 1.0, 0.0]];
        assert_eq!(hinge_rank_loss(v.view(), t.view(), negs.view(), 1.0).unwrap(), 2.0);
        // terms 0 and 2 → mean 1
        let negs = array![[0.0, -1.0, 0.0], [0.0, 1.0, 0.0]];
        let v = array![0.0, 1.0, 0.0];
        assert_eq!(hinge_rank_loss(v.view(), t.view(), negs.view(), 1.0).unwrap(), 1.0);
    }

    #[test]
    fn empty_negatives_are_an_error() {
        let t = array![1.0, 0.0];
        let negs = Array2::<f64>::zeros((0, 2));
        assert!(matches!(
            hinge_rank_loss(t.view(), t.view(), negs.view(), 1.0),
            Err(Error::Undefined(_))
        ));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e = 6;
        let mut gauss = || -> f64 { Normal::new(0.0, 1.0).unwrap().sample(&mut rng) };
        for _ in 0..10 {
            let t = unit(Array1::from_shape_simple_fn(e, &mut gauss));
            let negs = Array2::from_shape_simple_fn((4, e), &mut gauss);
            let negs = Array2::from_shape_fn((4, e), |(r, c)| {
                let row = negs.row(r);
                row[c] / row.dot(&row).sqrt()
            });
            let z = Array1::from_shape_simple_fn(e, &mut gauss);
            let (_, g) = hinge_rank_loss_unnormalized(z.view(), t.view(), negs.view(), 1.0).unwrap();
            let h = 1e-6;
            let fd = Array1::from_shape_fn(e, |k| {
                let mut zp = z.clone();
                zp[k] += h;
                let mut zm = z.clone();
                zm[k] -= h;
                let lp = hinge_rank_loss_unnormalized(zp.view(), t.view(), negs.view(), 1.0).unwrap().0;
                let lm = hinge_rank_loss_unnormalized(zm.view(), t.view(), negs.view(), 1.0).unwrap().0;
                (lp - lm) / (2.0 * h)
            });
            let diff = (&fd - &g).mapv(|v| v * v).sum().sqrt();
            let scale = fd.mapv(|v| v * v).sum().sqrt().max(g.mapv(|v| v * v).sum().sqrt());
            assert!(diff <= 1e-3 * scale.max(1e-12), "rel error {}", diff / scale);
        }
    }

    #[test]
    fn masked_features_examples() {
        let f = Array3::from_shape_fn((2, 4, 4), |(c, y, x)| (c * 16 + y * 4 + x) as f32 + 1.0);
        let full = Mask::from_elem((16, 16), true);
        assert_eq!(masked_features(f.view(), &full).unwrap(), f);
        let left = Mask::from_shape_fn((16, 16), |(_, x)| x < 8);
        let m = masked_features(f.view(), &left).unwrap();
        for c in 0..2 {
            for y in 0..4 {
                for x in 0..4 {
                    assert_eq!(m[[c, y, x]] == 0.0, x >= 2);
                }
            }
        }
        let speck = Mask::from_shape_fn((16, 16), |(y, x)| y == 0 && x == 0);
        assert!(matches!(masked_features(f.view(), &speck), Err(Error::EmptyMask)));
    }

    #[test]
    fn embed_contract() {
        let model = ExplainerModel::new((3, 2, 2), 5, None, 1);
        let zeros = Array3::<f32>::zeros((3, 2, 2));
        assert!(matches!(model.embed(zeros.view()), Err(Error::ZeroVector)));
        let x = Array3::from_shape_fn((3, 2, 2), |(c, y, x)| (c + y + x) as f32 * 0.3);
        let v = model.embed(x.view()).unwrap();
        assert!((v.dot(&v).sqrt() - 1.0).abs() < 1e-6);
        assert_eq!(v, model.embed(x.view()).unwrap());
        assert!(matches!(model.embed(Array3::zeros((3, 3, 2)).view()), Err(Error::Shape(_))));

        let mut zero_proj = ExplainerModel::new((3, 2, 2), 5, Some(4), 1);
        zero_proj.projection.fill(0.0);
        assert!(matches!(zero_proj.embed(x.view()), Err(Error::ZeroVector)));
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for hidden in [None, Some(5)] {
            let model = ExplainerModel::new((4, 1, 1), 3, hidden, 2);
            let x: Array1<f64> = (0..4).map(|_| rng.random_range(0.1..1.0)).collect();
            let t = unit(array![1.0, 0.2, -0.3]);
            let negs = array![[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
            let loss = |m: &ExplainerModel| {
                let z = m.forward(x.view()).z;
                hinge_rank_loss_unnormalized(z.view(), t.view(), negs.view(), 1.0).unwrap().0
            };
            let cache = model.forward(x.view());
            let (_, dz) =
                hinge_rank_loss_unnormalized(cache.z.view(), t.view(), negs.view(), 1.0).unwrap();
            let mut grads: Vec<Array1<f64>> = model.zero_grads();
            model.backward(&cache, &dz, &mut grads);
            for (k, g) in grads.iter().enumerate() {
                for j in 0..g.len() {
                    let h = 1e-6;
                    let mut p = model.clone();
                    p.params_mut()[k][j] += h;
                    let mut m = model.clone();
                    m.params_mut()[k][j] -= h;
                    let fd = (loss(&p) - loss(&m)) / (2.0 * h);
                    assert!((fd - g[j]).abs() < 1e-5, "tensor {k}[{j}]: {fd} vs {}", g[j]);
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        for hidden in [None, Some(3)] {
            let mut m = ExplainerModel::new((4, 2, 2), 6, hidden, 9);
            m.input_scale = array![0.1, 1.0 / 3.0, 7.25, 1e-300];
            m.table_fingerprint = "abc".into();
            m.concepts = vec!["x".into(), "y".into()];
            let path = dir.path().join("e.json");
            m.save(&path).unwrap();
            assert_eq!(ExplainerModel::load(&path).unwrap(), m);
        }
    }

    proptest! {
        #[test]
        fn loss_is_zero_iff_all_margins_hold(
            raw in prop::collection::vec(-1.0f64..1.0, 3 * 4),
            margin in 0.1f64..1.5,
        ) {
            let v = unit(Array1::from(raw[0..3].to_vec()) + 1e-3);
            let t = unit(Array1::from(raw[3..6].to_vec()) + 1e-3);
            let negs = Array2::from_shape_vec((2, 3), raw[6..12].to_vec()).unwrap();
            let loss = hinge_rank_loss(v.view(), t.view(), negs.view(), margin).unwrap();
            let pos = t.dot(&v);
            let all_hold = negs.outer_iter().all(|n| margin - pos + n.dot(&v) <= 0.0);
            prop_assert!(loss >= 0.0);
            prop_assert_eq!(loss == 0.0, all_hold);
        }

        #[test]
        fn loss_is_invariant_to_negative_order(raw in prop::collection::vec(-1.0f64..1.0, 3 * 5)) {
            let v = Array1::from(raw[0..3].to_vec());
            let t = Array1::from(raw[3..6].to_vec());
            let negs = Array2::from_shape_vec((3, 3), raw[6..15].to_vec()).unwrap();
            let rev = negs.select(Axis(0), &[2, 0, 1]);
            let a = hinge_rank_loss(v.view(), t.view(), negs.view(), 1.0).unwrap();
            let b = hinge_rank_loss(v.view(), t.view(), rev.view(), 1.0).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
