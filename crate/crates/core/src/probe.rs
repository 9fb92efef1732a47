//! Per-filter explanations: filter attention, the masking baselines, and
//! frequency-ranked word selection over the most activating images.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array3, ArrayView3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{top_activated_images, BackboneHandle, FeatureBank, ThresholdTable};
use crate::data::{AnnotatedImage, Mask};
use crate::embedding::EmbeddingTable;
use crate::explainer::ExplainerModel;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    FilterAttention,
    OriginalImage,
    ImageMasking,
    ActivationMasking,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::FilterAttention,
        Strategy::OriginalImage,
        Strategy::ImageMasking,
        Strategy::ActivationMasking,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::FilterAttention => "filter_attention",
            Strategy::OriginalImage => "original_image",
            Strategy::ImageMasking => "image_masking",
            Strategy::ActivationMasking => "activation_masking",
        }
    }

    /// Short command-line spelling.
    pub fn flag(self) -> &'static str {
        match self {
            Strategy::FilterAttention => "attention",
            Strategy::OriginalImage => "original",
            Strategy::ImageMasking => "image-mask",
            Strategy::ActivationMasking => "act-mask",
        }
    }

    pub fn needs_thresholds(self) -> bool {
        matches!(self, Strategy::ImageMasking | Strategy::ActivationMasking)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s || st.flag() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown strategy `{s}` (expected attention, original, image-mask or act-mask)"
                ))
            })
    }
}

/// Cosine similarity of each flattened channel with channel `u` (0 when either
/// is all-zero). Channel `u` itself gets exactly 1 when nonzero.
pub fn attention_weights(features: ArrayView3<f32>, u: usize) -> Result<Vec<f64>> {
    let d = features.dim().0;
    if u >= d {
        return Err(Error::InvalidArgument(format!("filter {u} out of range (d = {d})")));
    }
    let target = features.index_axis(Axis(0), u);
    let sq = |ch: &ndarray::ArrayView2<f32>| ch.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
    let su = sq(&target);
    Ok(features
        .outer_iter()
        .enumerate()
        .map(|(k, ch)| {
            let sk = sq(&ch);
            if su == 0.0 || sk == 0.0 {
                0.0
            } else if k == u {
                1.0
            } else {
                let dot: f64 = ch.iter().zip(target.iter()).map(|(&a, &b)| a as f64 * b as f64).sum();
                (dot / (su * sk).sqrt()).clamp(-1.0, 1.0)
            }
        })
        .collect())
}

/// Reweights every channel by its attention weight to channel `u`. With
/// `clamp_negative`, negative weights become 0.
pub fn filter_attention(features: ArrayView3<f32>, u: usize, clamp_negative: bool) -> Result<Array3<f32>> {
    let weights = attention_weights(features, u)?;
    let mut out = features.to_owned();
    for (k, mut ch) in out.outer_iter_mut().enumerate() {
        if k == u {
            continue;
        }
        let a = if clamp_negative { weights[k].max(0.0) } else { weights[k] };
        ch.mapv_inplace(|v| (a * v as f64) as f32);
    }
    Ok(out)
}

/// Cells of channel `u` strictly above `threshold`.
pub fn activated_region(features: ArrayView3<f32>, u: usize, threshold: f32) -> Mask {
    features.index_axis(Axis(0), u).mapv(|v| v > threshold)
}

/// Nearest-neighbour upscaling of a feature-grid mask to `(h, w)` pixels.
pub fn upscale_mask(mask: &Mask, (h, w): (usize, usize)) -> Mask {
    let (mh, mw) = mask.dim();
    Mask::from_shape_fn((h, w), |(y, x)| mask[[y * mh / h, x * mw / w]])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeParams {
    pub strategy: Strategy,
    /// Nearest words kept per image.
    pub s: usize,
    pub p_images: usize,
    pub top_x: usize,
    pub clamp_attention: bool,
}

impl Default for ProbeParams {
    fn default() -> Self {
        Self {
            strategy: Strategy::FilterAttention,
            s: 5,
            p_images: 10,
            top_x: 5,
            clamp_attention: false,
        }
    }
}

impl ProbeParams {
    pub fn validate(&self) -> Result<()> {
        if self.s == 0 || self.p_images == 0 || self.top_x == 0 {
            return Err(Error::InvalidArgument("s, p_images and top_x must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Everything needed to explain the filters of one layer.
pub struct Probe<'a> {
    pub backbone: &'a BackboneHandle,
    pub explainer: &'a ExplainerModel,
    pub table: &'a EmbeddingTable,
    pub images: &'a [AnnotatedImage],
    pub bank: &'a FeatureBank,
    pub thresholds: Option<&'a ThresholdTable>,
}

impl Probe<'_> {
    fn threshold(&self, u: usize) -> Result<f32> {
        let table = self.thresholds.ok_or_else(|| {
            Error::InvalidArgument("masking strategies need a threshold table".into())
        })?;
        if table.layer != self.bank.layer() {
            return Err(Error::InvalidArgument(format!(
                "thresholds are for layer `{}`, probing `{}`",
                table.layer,
                self.bank.layer()
            )));
        }
        table
            .thresholds
            .get(u)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("no threshold for filter {u}")))
    }

    /// Explainer input for image `i` and filter `u`. Empty activation regions
    /// of the masking strategies surface as [`Error::EmptyMask`].
    pub fn apply_strategy(&self, strategy: Strategy, i: usize, u: usize, clamp: bool) -> Result<Array3<f32>> {
        let f = self.bank.map(i);
        match strategy {
            Strategy::OriginalImage => Ok(f.clone()),
            Strategy::FilterAttention => filter_attention(f.view(), u, clamp),
            Strategy::ActivationMasking => {
                let region = activated_region(f.view(), u, self.threshold(u)?);
                if !region.iter().any(|&b| b) {
                    return Err(Error::EmptyMask);
                }
                let mut out = f.clone();
                for mut ch in out.outer_iter_mut() {
                    ndarray::Zip::from(&mut ch).and(&region).for_each(|v, &keep| {
                        if !keep {
                            *v = 0.0;
                        }
                    });
                }
                Ok(out)
            }
            Strategy::ImageMasking => {
                if !self.backbone.supports_extraction() {
                    return Err(Error::Unsupported(
                        "image masking re-runs the backbone on masked pixels; feature dumps cannot".into(),
                    ));
                }
                let region = activated_region(f.view(), u, self.threshold(u)?);
                if !region.iter().any(|&b| b) {
                    return Err(Error::EmptyMask);
                }
                let image = &self.images[i];
                let pixels = upscale_mask(&region, (image.height(), image.width()));
                let mut masked = image.image.clone();
                for mut ch in masked.outer_iter_mut() {
                    ndarray::Zip::from(&mut ch).and(&pixels).for_each(|v, &keep| {
                        if !keep {
                            *v = 0.0;
                        }
                    });
                }
                self.backbone.extract(masked.view(), self.bank.layer())
            }
        }
    }

    pub fn explain_filter(&self, u: usize, params: &ProbeParams) -> Result<Explanation> {
        params.validate()?;
        let top = top_activated_images(self.bank, u, params.p_images.min(self.bank.len()))?;
        let mut evidence = Vec::with_capacity(top.len());
        let mut skipped = Vec::new();
        for &i in &top {
            let id = self.bank.ids()[i].clone();
            let input = match self.apply_strategy(params.strategy, i, u, params.clamp_attention) {
                Ok(x) => x,
                Err(Error::EmptyMask) => {
                    skipped.push(id);
                    continue;
                }
                Err(e) => return Err(e),
            };
            let v = match self.explainer.embed(input.view()) {
                Ok(v) => v,
                Err(Error::ZeroVector) => {
                    skipped.push(id);
                    continue;
                }
                Err(e) => return Err(e),
            };
            let words = self.table.nearest_words(v.view(), params.s)?;
            evidence.push(Evidence {
                image: id,
                max_act: self.bank.max_activation(i, u),
                tokens: words.iter().map(|(t, _)| t.clone()).collect(),
                similarities: words.iter().map(|(_, s)| *s).collect(),
            });
        }
        if evidence.is_empty() {
            return Err(Error::Empty(format!(
                "filter {u}: every top image produced an empty input"
            )));
        }
        Ok(Explanation {
            filter: u,
            layer: self.bank.layer().to_string(),
            strategy: params.strategy,
            params: ExplanationParams {
                s: params.s,
                p: params.p_images,
                x: params.top_x,
            },
            words: rank_words(&evidence),
            evidence,
            skipped_images: skipped,
        })
    }

    /// Explains `filters` (all when `None`), in order; failures are collected.
    pub fn explain_model(&self, filters: Option<&[usize]>, params: &ProbeParams) -> ExplainOutcome {
        let all: Vec<usize>;
        let filters = match filters {
            Some(f) => f,
            None => {
                all = (0..self.bank.n_filters()).collect();
                &all
            }
        };
        let results: Vec<(usize, Result<Explanation>)> = filters
            .par_iter()
            .map(|&u| (u, self.explain_filter(u, params)))
            .collect();
        let mut outcome = ExplainOutcome::default();
        for (u, r) in results {
            match r {
                Ok(e) => outcome.explanations.push(e),
                Err(e) => outcome.failures.push(FilterFailure {
                    filter: u,
                    kind: e.kind().to_string(),
                    message: e.to_string(),
                }),
            }
        }
        outcome
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordScore {
    pub token: String,
    pub count: usize,
    pub mean_sim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub image: String,
    pub tokens: Vec<String>,
    pub similarities: Vec<f64>,
    pub max_act: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExplanationParams {
    pub s: usize,
    pub p: usize,
    pub x: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub filter: usize,
    pub layer: String,
    pub strategy: Strategy,
    pub params: ExplanationParams,
    /// Full ranking; the explanation proper is the first `params.x`.
    pub words: Vec<WordScore>,
    pub evidence: Vec<Evidence>,
    #[serde(default)]
    pub skipped_images: Vec<String>,
}

impl Explanation {
    pub fn top_words(&self, x: usize) -> Vec<&str> {
        self.words.iter().take(x).map(|w| w.token.as_str()).collect()
    }

    pub fn top1(&self) -> Option<&str> {
        self.words.first().map(|w| w.token.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterFailure {
    pub filter: usize,
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExplainOutcome {
    pub explanations: Vec<Explanation>,
    pub failures: Vec<FilterFailure>,
}

impl ExplainOutcome {
    /// One JSON object per line, filters in order, failures after successes.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.explanations {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        for f in &self.failures {
            out.push_str(&serde_json::to_string(&serde_json::json!({ "failure": f }))?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn get(&self, filter: usize) -> Option<&Explanation> {
        self.explanations.iter().find(|e| e.filter == filter)
    }
}

/// Aggregates per-image word lists: frequency descending, then mean similarity
/// descending, then token.
pub fn rank_words(evidence: &[Evidence]) -> Vec<WordScore> {
    let mut acc: HashMap<&str, (usize, f64)> = HashMap::new();
    for ev in evidence {
        for (t, s) in ev.tokens.iter().zip(&ev.similarities) {
            let e = acc.entry(t.as_str()).or_insert((0, 0.0));
            e.0 += 1;
            e.1 += s;
        }
    }
    let mut words: Vec<WordScore> = acc
        .into_iter()
        .map(|(token, (count, sum))| WordScore {
            token: token.to_string(),
            count,
            mean_sim: sum / count as f64,
        })
        .collect();
    words.sort_by(|a, b| {
        b.count
            .cmp(&a.count)
            .then(b.mean_sim.total_cmp(&a.mean_sim))
            .then_with(|| a.token.cmp(&b.token))
    });
    words
}
