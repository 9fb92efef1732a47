//! Small ReLU conv net trained from scratch on the reference corpus.
//!
//! Convolutions are 3×3 with padding 1, lowered to GEMM via im2col; the
//! backward pass is written out by hand.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use log::info;
use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array3, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{AnnotatedImage, Group};
use crate::optim::Adam;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnArch {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
}

impl Default for CnnArch {
    /// 64×64 input → 32×8×8 at the last layer.
    fn default() -> Self {
        Self {
            in_channels: 3,
            widths: vec![16, 32, 32, 32],
            strides: vec![2, 2, 2, 1],
        }
    }
}

impl CnnArch {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.strides.len() {
            return Err(Error::InvalidArgument(
                "arch needs one stride per conv width".into(),
            ));
        }
        if self.widths.contains(&0) || self.strides.contains(&0) || self.in_channels == 0 {
            return Err(Error::InvalidArgument("arch widths/strides must be positive".into()));
        }
        Ok(())
    }

    pub fn layer_names(&self) -> Vec<String> {
        (1..=self.widths.len()).map(|i| format!("conv{i}")).collect()
    }

    /// Output (d, h', w') of layer `index` for an `h`×`w` input.
    pub fn output_shape(&self, index: usize, h: usize, w: usize) -> (usize, usize, usize) {
        let (mut h, mut w) = (h, w);
        for &s in &self.strides[..=index] {
            h = conv_out(h, s);
            w = conv_out(w, s);
        }
        (self.widths[index], h, w)
    }
}

fn conv_out(n: usize, stride: usize) -> usize {
    (n - 1) / stride + 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// One sigmoid output per manifest concept (multi-label).
    Concepts,
    /// A single sigmoid output: P(group = A).
    Group,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub arch: CnnArch,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub val_fraction: f64,
    pub labels: LabelMode,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            arch: CnnArch::default(),
            epochs: 10,
            learning_rate: 3e-3,
            batch_size: 32,
            val_fraction: 0.1,
            labels: LabelMode::Concepts,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingReport {
    pub classes: Vec<String>,
    /// Mean training loss per epoch.
    pub loss_trace: Vec<f64>,
    /// Average precision per class on the validation split (`None` without positives).
    pub val_ap: Vec<Option<f64>>,
    pub train_images: usize,
    pub val_images: usize,
}

impl TrainingReport {
    pub fn mean_val_ap(&self) -> Option<f64> {
        let aps: Vec<f64> = self.val_ap.iter().flatten().copied().collect();
        (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Conv {
    /// cout × (cin·9), rows laid out as (c, ky, kx).
    weight: Array2<f32>,
    bias: Array1<f32>,
    stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyCnn {
    arch: CnnArch,
    convs: Vec<Conv>,
    head_weight: Array2<f32>,
    head_bias: Array1<f32>,
    classes: Vec<String>,
}

struct Grads {
    convs: Vec<(Array2<f32>, Array1<f32>)>,
    head_weight: Array2<f32>,
    head_bias: Array1<f32>,
}

impl Grads {
    fn zeros_like(net: &ToyCnn) -> Self {
        Self {
            convs: net
                .convs
                .iter()
                .map(|c| (Array2::zeros(c.weight.raw_dim()), Array1::zeros(c.bias.len())))
                .collect(),
            head_weight: Array2::zeros(net.head_weight.raw_dim()),
            head_bias: Array1::zeros(net.head_bias.len()),
        }
    }

    fn add_assign(&mut self, other: &Grads) {
        for ((w, b), (ow, ob)) in self.convs.iter_mut().zip(&other.convs) {
            *w += ow;
            *b += ob;
        }
        self.head_weight += &other.head_weight;
        self.head_bias += &other.head_bias;
    }

    fn scale(&mut self, k: f32) {
        for (w, b) in &mut self.convs {
            *w *= k;
            *b *= k;
        }
        self.head_weight *= k;
        self.head_bias *= k;
    }
}

/// Everything the backward pass needs from one forward pass.
struct Trace {
    cols: Vec<Array2<f32>>,
    outs: Vec<Array2<f32>>,
    in_shapes: Vec<(usize, usize, usize)>,
}

impl ToyCnn {
    /// He-normal conv weights, zero biases.
    pub fn new(arch: CnnArch, classes: Vec<String>, seed: u64) -> Result<Self> {
        arch.validate()?;
        if classes.is_empty() {
            return Err(Error::InvalidArgument("classifier needs at least one class".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = arch.in_channels;
        let mut convs = Vec::new();
        for (&cout, &stride) in arch.widths.iter().zip(&arch.strides) {
            let fan_in = cin * 9;
            let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).unwrap();
            convs.push(Conv {
                weight: Array2::from_shape_simple_fn((cout, fan_in), || normal.sample(&mut rng)),
                bias: Array1::zeros(cout),
                stride,
            });
            cin = cout;
        }
        let normal = Normal::new(0.0f32, (1.0 / cin as f32).sqrt()).unwrap();
        let head_weight =
            Array2::from_shape_simple_fn((classes.len(), cin), || normal.sample(&mut rng));
        Ok(Self {
            head_bias: Array1::zeros(classes.len()),
            arch,
            convs,
            head_weight,
            classes,
        })
    }

    pub fn arch(&self) -> &CnnArch {
        &self.arch
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn layer_names(&self) -> Vec<String> {
        self.arch.layer_names()
    }

    pub fn layer_index(&self, layer: &str) -> Result<usize> {
        self.layer_names()
            .iter()
            .position(|l| l == layer)
            .ok_or_else(|| {
                Error::NotFound(format!(
                    "layer `{layer}` (available: {})",
                    self.layer_names().join(", ")
                ))
            })
    }

    /// Post-ReLU activations of `layer` for a 3×h×w image.
    pub fn extract(&self, image: ArrayView3<f32>, layer: &str) -> Result<Array3<f32>> {
        let idx = self.layer_index(layer)?;
        self.check_input(image)?;
        let mut x = image.to_owned();
        for conv in &self.convs[..=idx] {
            let (cols, oh, ow) = im2col(x.view(), conv.stride);
            let out = conv_forward(conv, &cols);
            x = out.into_shape_with_order((conv.weight.nrows(), oh, ow)).unwrap();
        }
        Ok(x)
    }

    /// Sigmoid class scores.
    pub fn predict(&self, image: ArrayView3<f32>) -> Result<Array1<f32>> {
        self.check_input(image)?;
        let (_, logits) = self.forward_trace(image);
        Ok(logits.mapv(sigmoid))
    }

    fn check_input(&self, image: ArrayView3<f32>) -> Result<()> {
        let (c, h, w) = image.dim();
        if c != self.arch.in_channels || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "expected {}×h×w input, got {c}×{h}×{w}",
                self.arch.in_channels
            )));
        }
        Ok(())
    }

    fn forward_trace(&self, image: ArrayView3<f32>) -> (Trace, Array1<f32>) {
        let mut trace = Trace {
            cols: Vec::with_capacity(self.convs.len()),
            outs: Vec::with_capacity(self.convs.len()),
            in_shapes: Vec::with_capacity(self.convs.len()),
        };
        let mut x = image.to_owned();
        for conv in &self.convs {
            trace.in_shapes.push(x.dim());
            let (cols, oh, ow) = im2col(x.view(), conv.stride);
            let out = conv_forward(conv, &cols);
            x = out
                .clone()
                .into_shape_with_order((conv.weight.nrows(), oh, ow))
                .unwrap();
            trace.cols.push(cols);
            trace.outs.push(out);
        }
        let pooled = trace.outs.last().unwrap().mean_axis(Axis(1)).unwrap();
        let logits = self.head_weight.dot(&pooled) + &self.head_bias;
        (trace, logits)
    }

    /// Mean binary cross-entropy over classes, and its gradient.
    fn loss_and_grad(&self, image: ArrayView3<f32>, target: &[f32]) -> (f64, Grads) {
        let (trace, logits) = self.forward_trace(image);
        let k = logits.len() as f32;
        let mut loss = 0.0f64;
        let mut dz = Array1::<f32>::zeros(logits.len());
        for (j, (&z, &y)) in logits.iter().zip(target).enumerate() {
            loss += (z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()) as f64;
            dz[j] = (sigmoid(z) - y) / k;
        }
        loss /= k as f64;

        let mut grads = Grads::zeros_like(self);
        let last = trace.outs.last().unwrap();
        let pooled = last.mean_axis(Axis(1)).unwrap();
        grads.head_weight = outer(&dz, &pooled);
        grads.head_bias = dz.clone();

        // d loss / d pooled, spread evenly over spatial positions
        let dpool = self.head_weight.t().dot(&dz);
        let positions = last.ncols() as f32;
        let mut dout = Array2::from_shape_fn(last.raw_dim(), |(c, _)| dpool[c] / positions);

        for li in (0..self.convs.len()).rev() {
            let conv = &self.convs[li];
            let out = &trace.outs[li];
            ndarray::Zip::from(&mut dout).and(out).for_each(|g, &o| {
                if o <= 0.0 {
                    *g = 0.0;
                }
            });
            let (gw, gb) = &mut grads.convs[li];
            general_mat_mul(1.0, &dout, &trace.cols[li].t(), 0.0, gw);
            *gb = dout.sum_axis(Axis(1));
            if li > 0 {
                let dcols = conv.weight.t().dot(&dout);
                let (cin, h, w) = trace.in_shapes[li];
                let dx = col2im(&dcols, cin, h, w, conv.stride);
                dout = dx.into_shape_with_order((cin, h * w)).unwrap();
            }
        }
        (loss, grads)
    }

    fn apply(&mut self, opt: &mut Adam, grads: &Grads) {
        let mut params: Vec<&mut [f32]> = Vec::new();
        for conv in &mut self.convs {
            params.push(conv.weight.as_slice_mut().unwrap());
            params.push(conv.bias.as_slice_mut().unwrap());
        }
        params.push(self.head_weight.as_slice_mut().unwrap());
        params.push(self.head_bias.as_slice_mut().unwrap());
        let mut gs: Vec<&[f32]> = Vec::new();
        for (w, b) in &grads.convs {
            gs.push(w.as_slice().unwrap());
            gs.push(b.as_slice().unwrap());
        }
        gs.push(grads.head_weight.as_slice().unwrap());
        gs.push(grads.head_bias.as_slice().unwrap());
        opt.step(&mut params, &gs);
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string(&CnnCheckpoint::from(self))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: CnnCheckpoint = serde_json::from_str(&text)?;
        ckpt.into_model().map_err(|message| Error::Format {
            path: path.to_path_buf(),
            message,
        })
    }
}

pub(crate) const CHECKPOINT_FORMAT: &str = "toy_cnn_v1";

/// JSON checkpoint. Weights are widened to f64 so the text form round-trips
/// bit-exactly back to f32.
#[derive(Serialize, Deserialize)]
pub(crate) struct CnnCheckpoint {
    format: String,
    arch: CnnArch,
    classes: Vec<String>,
    convs: Vec<ConvCheckpoint>,
    head_weight: Vec<f64>,
    head_bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ConvCheckpoint {
    weight: Vec<f64>,
    bias: Vec<f64>,
}

fn widen(a: &[f32]) -> Vec<f64> {
    a.iter().map(|&v| v as f64).collect()
}

fn narrow(a: &[f64]) -> Vec<f32> {
    a.iter().map(|&v| v as f32).collect()
}

impl From<&ToyCnn> for CnnCheckpoint {
    fn from(net: &ToyCnn) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            arch: net.arch.clone(),
            classes: net.classes.clone(),
            convs: net
                .convs
                .iter()
                .map(|c| ConvCheckpoint {
                    weight: widen(c.weight.as_slice().unwrap()),
                    bias: widen(c.bias.as_slice().unwrap()),
                })
                .collect(),
            head_weight: widen(net.head_weight.as_slice().unwrap()),
            head_bias: widen(net.head_bias.as_slice().unwrap()),
        }
    }
}

impl CnnCheckpoint {
    fn into_model(self) -> std::result::Result<ToyCnn, String> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(format!("unexpected checkpoint format `{}`", self.format));
        }
        self.arch.validate().map_err(|e| e.to_string())?;
        if self.convs.len() != self.arch.widths.len() {
            return Err("conv count does not match arch".into());
        }
        let mut cin = self.arch.in_channels;
        let mut convs = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            let cout = self.arch.widths[i];
            let weight = Array2::from_shape_vec((cout, cin * 9), narrow(&c.weight))
                .map_err(|e| format!("conv{}: {e}", i + 1))?;
            if c.bias.len() != cout {
                return Err(format!("conv{}: bias length {}", i + 1, c.bias.len()));
            }
            convs.push(Conv {
                weight,
                bias: Array1::from(narrow(&c.bias)),
                stride: self.arch.strides[i],
            });
            cin = cout;
        }
        let k = self.classes.len();
        let head_weight = Array2::from_shape_vec((k, cin), narrow(&self.head_weight))
            .map_err(|e| format!("head: {e}"))?;
        if self.head_bias.len() != k {
            return Err("head bias length does not match classes".into());
        }
        Ok(ToyCnn {
            arch: self.arch,
            convs,
            head_weight,
            head_bias: Array1::from(narrow(&self.head_bias)),
            classes: self.classes,
        })
    }
}

fn sigmoid(z: f32) -> f32 {
    1.0 / (1.0 + (-z).exp())
}

fn outer(a: &Array1<f32>, b: &Array1<f32>) -> Array2<f32> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

fn conv_forward(conv: &Conv, cols: &Array2<f32>) -> Array2<f32> {
    let mut out = Array2::zeros((conv.weight.nrows(), cols.ncols()));
    general_mat_mul(1.0, &conv.weight, cols, 0.0, &mut out);
    for (mut row, &b) in out.outer_iter_mut().zip(&conv.bias) {
        row.mapv_inplace(|v| (v + b).max(0.0));
    }
    out
}

/// Lowers a c×h×w input to a (c·9)×(oh·ow) patch matrix (3×3 kernel, pad 1).
fn im2col(x: ArrayView3<f32>, stride: usize) -> (Array2<f32>, usize, usize) {
    let (c, h, w) = x.dim();
    let (oh, ow) = (conv_out(h, stride), conv_out(w, stride));
    let x = x.as_standard_layout();
    let src = x.as_slice().unwrap();
    let mut cols = vec![0.0f32; c * 9 * oh * ow];
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ch * 9 + ky * 3 + kx) * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = ch * h * w + iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            cols[row + oy * ow + ox] = src[base + ix as usize];
                        }
                    }
                }
            }
        }
    }
    (Array2::from_shape_vec((c * 9, oh * ow), cols).unwrap(), oh, ow)
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input grid.
fn col2im(cols: &Array2<f32>, c: usize, h: usize, w: usize, stride: usize) -> Array3<f32> {
    let (oh, ow) = (conv_out(h, stride), conv_out(w, stride));
    let cols = cols.as_standard_layout();
    let src = cols.as_slice().unwrap();
    let mut dx = vec![0.0f32; c * h * w];
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ch * 9 + ky * 3 + kx) * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = ch * h * w + iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            dx[base + ix as usize] += src[row + oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    Array3::from_shape_vec((c, h, w), dx).unwrap()
}

fn targets(images: &[AnnotatedImage], mode: LabelMode) -> Result<(Vec<String>, Vec<Vec<f32>>)> {
    match mode {
        LabelMode::Concepts => {
            let classes: Vec<String> = images
                .iter()
                .flat_map(|im| im.annotations.iter().map(|a| a.concept.clone()))
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            if classes.is_empty() {
                return Err(Error::InvalidArgument(
                    "no concept annotations to train on".into(),
                ));
            }
            let ys = images
                .iter()
                .map(|im| {
                    classes
                        .iter()
                        .map(|c| im.annotations.iter().any(|a| &a.concept == c) as u8 as f32)
                        .collect()
                })
                .collect();
            Ok((classes, ys))
        }
        LabelMode::Group => {
            let ys = images
                .iter()
                .map(|im| match im.group {
                    Some(g) => Ok(vec![(g == Group::A) as u8 as f32]),
                    None => Err(Error::InvalidArgument(format!(
                        "image `{}` has no group label",
                        im.id
                    ))),
                })
                .collect::<Result<_>>()?;
            Ok((vec!["group_a".into()], ys))
        }
    }
}

/// Trains a classifier on `images`. `epochs = 0` returns the random initialization.
pub fn train_toy_backbone(
    images: &[AnnotatedImage],
    cfg: &BackboneConfig,
) -> Result<(ToyCnn, TrainingReport)> {
    if images.is_empty() {
        return Err(Error::Empty("no training images".into()));
    }
    if cfg.batch_size == 0 || cfg.learning_rate.is_nan() || cfg.learning_rate <= 0.0 {
        return Err(Error::InvalidArgument(
            "batch size and learning rate must be positive".into(),
        ));
    }
    if !(0.0..1.0).contains(&cfg.val_fraction) {
        return Err(Error::InvalidArgument("val_fraction must be in [0,1)".into()));
    }
    let (classes, ys) = targets(images, cfg.labels)?;
    let mut net = ToyCnn::new(cfg.arch.clone(), classes.clone(), cfg.seed)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ba55);
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((images.len() as f64 * cfg.val_fraction).round() as usize).min(images.len() - 1);
    let (val, train) = order.split_at(n_val);
    let mut train = train.to_vec();

    let mut opt = Adam::new(cfg.learning_rate);
    let mut loss_trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        train.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (bi, batch) in train.chunks(cfg.batch_size).enumerate() {
            let parts: Vec<(f64, Grads)> = batch
                .par_iter()
                .map(|&i| net.loss_and_grad(images[i].image.view(), &ys[i]))
                .collect();
            let mut total = Grads::zeros_like(&net);
            let mut batch_loss = 0.0;
            for (l, g) in &parts {
                batch_loss += l;
                total.add_assign(g);
            }
            batch_loss /= batch.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss {batch_loss} at epoch {epoch}, batch {bi} (lr {})",
                    cfg.learning_rate
                )));
            }
            total.scale(1.0 / batch.len() as f32);
            net.apply(&mut opt, &total);
            epoch_loss += batch_loss * batch.len() as f64;
        }
        let mean = epoch_loss / train.len() as f64;
        info!("backbone epoch {}/{}: loss {mean:.5}", epoch + 1, cfg.epochs);
        loss_trace.push(mean);
    }

    let scores: Vec<Array1<f32>> = val
        .par_iter()
        .map(|&i| net.predict(images[i].image.view()))
        .collect::<Result<_>>()?;
    let val_ap = (0..classes.len())
        .map(|k| {
            let s: Vec<f32> = scores.iter().map(|v| v[k]).collect();
            let y: Vec<bool> = val.iter().map(|&i| ys[i][k] > 0.5).collect();
            average_precision(&s, &y)
        })
        .collect();
    let report = TrainingReport {
        classes,
        loss_trace,
        val_ap,
        train_images: train.len(),
        val_images: val.len(),
    };
    if let Some(ap) = report.mean_val_ap() {
        info!("backbone validation mean AP {ap:.4}");
    }
    Ok((net, report))
}

/// Non-interpolated average precision; ties broken by input order.
pub fn average_precision(scores: &[f32], labels: &[bool]) -> Option<f64> {
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in idx.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / positives as f64)
}
