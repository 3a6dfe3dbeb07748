//! A miniature dilated fully convolutional segmenter.
//!
//! Five `conv3×3 → batch norm → relu` stages with channel widths from the
//! config. Stages 1–3 downsample by 2; stages 4–5 keep resolution and dilate
//! by 2 and 4, for an overall output stride of 8. The segmentation head pools
//! the last stage over a small pyramid of grids, upsamples the pooled maps back,
//! concatenates them with the stage output, classifies with a 1×1 convolution
//! and bilinearly upsamples the scores to the input resolution.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ops::{NormMode, RunningStats};
use crate::tape::{BatchStats, BnMode};
use crate::{rng, Error, Grads, Result, Tape, Tensor, Var};

pub const STAGES: usize = 5;
pub const STRIDES: [usize; STAGES] = [2, 2, 2, 1, 1];
pub const DILATIONS: [usize; STAGES] = [1, 1, 1, 2, 4];
pub const OUTPUT_STRIDE: usize = 8;
/// Smallest image side accepted by [`forward_features`] and [`segment`].
pub const MIN_INPUT_SIDE: usize = 32;
/// Fewest images [`adapt_bn_stats`] accepts.
pub const MIN_ABN_IMAGES: usize = 8;

/// Named backbone stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layer {
    C1,
    C2,
    C3,
    C4,
    C5,
}

impl Layer {
    pub const ALL: [Layer; STAGES] = [Layer::C1, Layer::C2, Layer::C3, Layer::C4, Layer::C5];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        ["c1", "c2", "c3", "c4", "c5"][self.index()]
    }

    pub fn from_name(name: &str) -> Option<Layer> {
        Layer::ALL.into_iter().find(|l| l.name() == name)
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub channels: [usize; STAGES],
    pub num_classes: usize,
    /// Grid sizes of the head's pooling pyramid.
    pub pyramid_bins: Vec<usize>,
    /// Per-channel mean subtracted from `[0,1]` images before stage 1.
    pub input_mean: [f64; 3],
    pub init_seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            channels: [16, 32, 64, 96, 128],
            num_classes: 5,
            pyramid_bins: vec![1, 2],
            input_mean: [0.5; 3],
            init_seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("backbone", "need at least 2 classes"));
        }
        if self.channels.contains(&0) {
            return Err(Error::invalid("backbone", "stage widths must be positive"));
        }
        if self.pyramid_bins.contains(&0) {
            return Err(Error::invalid("backbone", "pyramid bins must be positive"));
        }
        Ok(())
    }
}

/// One `conv → batch norm → relu` stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub conv: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub stats: RunningStats,
    pub stride: usize,
    pub dilation: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiniFcn {
    config: BackboneConfig,
    stages: Vec<Stage>,
    head_weight: Tensor,
    head_bias: Tensor,
}

/// Tape handles for every parameter of a [`MiniFcn`], in canonical order.
#[derive(Debug, Clone)]
pub struct BoundFcn {
    vars: Vec<Var>,
}

impl BoundFcn {
    /// Wraps handles in [`MiniFcn::params`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        BoundFcn { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn stage(&self, i: usize) -> (Var, Var, Var) {
        (self.vars[3 * i], self.vars[3 * i + 1], self.vars[3 * i + 2])
    }

    fn head(&self) -> (Var, Var) {
        (self.vars[3 * STAGES], self.vars[3 * STAGES + 1])
    }
}

/// Stage outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct Features {
    pub layers: Vec<Var>,
    /// Batch statistics per computed stage (train mode only).
    pub batch_stats: Vec<BatchStats>,
}

impl Features {
    pub fn get(&self, layer: Layer) -> Option<Var> {
        self.layers.get(layer.index()).copied()
    }

    pub fn last(&self) -> Var {
        *self.layers.last().expect("at least one stage")
    }
}

fn he_normal(shape: [usize; 4], fan_in: usize, rng: &mut rng::Rng) -> Tensor {
    let std = libm::sqrt(2.0 / fan_in as f64);
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| normal.sample(rng)).with_requires_grad(true)
}

impl MiniFcn {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut r = rng::derived(config.init_seed, 0xB0B);
        let mut stages = Vec::with_capacity(STAGES);
        let mut c_in = 3;
        for (i, &c) in config.channels.iter().enumerate() {
            stages.push(Stage {
                conv: he_normal([c, c_in, 3, 3], c_in * 9, &mut r),
                gamma: Tensor::full([c], 1.0).with_requires_grad(true),
                beta: Tensor::zeros([c]).with_requires_grad(true),
                stats: RunningStats::identity(c),
                stride: STRIDES[i],
                dilation: DILATIONS[i],
            });
            c_in = c;
        }
        let head_in = config.channels[STAGES - 1] * (1 + config.pyramid_bins.len());
        let k = config.num_classes;
        let normal = Normal::new(0.0, libm::sqrt(1.0 / head_in as f64)).expect("finite std");
        let head_weight = Tensor::from_fn([k, head_in, 1, 1], |_| normal.sample(&mut r)).with_requires_grad(true);
        Ok(MiniFcn {
            config,
            stages,
            head_weight,
            head_bias: Tensor::zeros([k]).with_requires_grad(true),
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn stages_mut(&mut self) -> &mut [Stage] {
        &mut self.stages
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p: Vec<&Tensor> = Vec::with_capacity(3 * STAGES + 2);
        for s in &self.stages {
            p.extend([&s.conv, &s.gamma, &s.beta]);
        }
        p.extend([&self.head_weight, &self.head_bias]);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p: Vec<&mut Tensor> = Vec::with_capacity(3 * STAGES + 2);
        for s in &mut self.stages {
            p.extend([&mut s.conv, &mut s.gamma, &mut s.beta]);
        }
        p.extend([&mut self.head_weight, &mut self.head_bias]);
        p
    }

    /// Names matching [`MiniFcn::params`] one to one.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for l in Layer::ALL {
            for p in ["weight", "gamma", "beta"] {
                names.push(alloc::format!("{l}.{p}"));
            }
        }
        names.push("head.weight".into());
        names.push("head.bias".into());
        names
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Registers all parameters on `tape`; frozen parameters are constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundFcn {
        let vars = self
            .params()
            .into_iter()
            .map(|p| if trainable { tape.leaf(p) } else { tape.constant(p) })
            .collect();
        BoundFcn { vars }
    }

    pub fn accumulate_grads(&mut self, bound: &BoundFcn, grads: &Grads) -> Result<()> {
        for (p, &v) in self.params_mut().into_iter().zip(&bound.vars) {
            grads.accumulate_into(v, p)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Tensor::zero_grad);
    }

    /// Folds train-mode batch statistics into the running statistics.
    pub fn apply_batch_stats(&mut self, stats: &[BatchStats]) {
        for (stage, b) in self.stages.iter_mut().zip(stats) {
            b.update_running(&mut stage.stats.mean, &mut stage.stats.var);
        }
    }

    /// Runs the first `depth` stages on `x` (`[3,H,W]` or `[N,3,H,W]`,
    /// values in `[0,1]`).
    pub fn forward(&self, tape: &mut Tape, bound: &BoundFcn, x: Var, mode: NormMode, depth: usize) -> Result<Features> {
        let depth = depth.clamp(1, STAGES);
        let offsets: Vec<f64> = self.config.input_mean.iter().map(|m| -m).collect();
        let mut h = tape.add_channel(x, &offsets)?;
        let mut layers = Vec::with_capacity(depth);
        let mut batch_stats = Vec::new();
        for (i, stage) in self.stages.iter().take(depth).enumerate() {
            let (w, g, b) = bound.stage(i);
            let conv = tape.conv2d(h, w, None, stage.stride, stage.dilation, stage.dilation)?;
            let bn_mode = match mode {
                NormMode::Train => BnMode::Train,
                NormMode::Eval => BnMode::Eval {
                    mean: &stage.stats.mean,
                    var: &stage.stats.var,
                },
            };
            let (norm, stats) = tape.batch_norm(conv, g, b, bn_mode)?;
            batch_stats.extend(stats);
            h = tape.relu(norm);
            layers.push(h);
        }
        Ok(Features { layers, batch_stats })
    }

    /// Pyramid-pooling head on the last-stage features, producing class
    /// scores at `out_h × out_w`.
    pub fn head(&self, tape: &mut Tape, bound: &BoundFcn, c5: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let shape = tape.shape(c5).to_vec();
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let mut parts = vec![c5];
        for &bins in &self.config.pyramid_bins {
            let pooled = tape.adaptive_avg_pool(c5, bins.min(h).min(w))?;
            parts.push(tape.resize_bilinear(pooled, h, w)?);
        }
        let cat = tape.concat_channels(&parts)?;
        let (hw, hb) = bound.head();
        let scores = tape.conv2d(cat, hw, Some(hb), 1, 0, 1)?;
        tape.resize_bilinear(scores, out_h, out_w)
    }

    /// Full forward to class scores at input resolution.
    pub fn logits(&self, tape: &mut Tape, bound: &BoundFcn, x: Var, mode: NormMode) -> Result<(Var, Features)> {
        let shape = tape.shape(x).to_vec();
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let feats = self.forward(tape, bound, x, mode, STAGES)?;
        let scores = self.head(tape, bound, feats.last(), h, w)?;
        Ok((scores, feats))
    }
}

/// Named per-stage feature maps of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    maps: Vec<(Layer, Tensor)>,
}

impl FeaturePyramid {
    pub fn new(maps: Vec<(Layer, Tensor)>) -> Self {
        FeaturePyramid { maps }
    }

    pub fn get(&self, layer: Layer) -> Option<&Tensor> {
        self.maps.iter().find(|(l, _)| *l == layer).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Layer, &Tensor)> {
        self.maps.iter().map(|(l, t)| (*l, t))
    }

    pub fn layers(&self) -> Vec<Layer> {
        self.maps.iter().map(|(l, _)| *l).collect()
    }
}

fn check_image(op: &'static str, image: &Tensor) -> Result<()> {
    match *image.shape() {
        [3, h, w] if h >= MIN_INPUT_SIDE && w >= MIN_INPUT_SIDE => Ok(()),
        [3, h, w] => Err(Error::invalid(
            op,
            alloc::format!("input {h}x{w} is smaller than {MIN_INPUT_SIDE}x{MIN_INPUT_SIDE}"),
        )),
        _ => Err(Error::invalid(
            op,
            alloc::format!("expected a [3,H,W] image, got {:?}", image.shape()),
        )),
    }
}

/// Eval-mode stage outputs for one `[3,H,W]` image.
pub fn forward_features(model: &MiniFcn, image: &Tensor) -> Result<FeaturePyramid> {
    check_image("forward_features", image)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let x = tape.constant(image);
    let feats = model.forward(&mut tape, &bound, x, NormMode::Eval, STAGES)?;
    Ok(FeaturePyramid::new(
        Layer::ALL
            .iter()
            .zip(&feats.layers)
            .map(|(&l, &v)| (l, tape.tensor(v)))
            .collect(),
    ))
}

/// Eval-mode class scores `[K,H,W]` for one `[3,H,W]` image.
pub fn segment(model: &MiniFcn, image: &Tensor) -> Result<Tensor> {
    check_image("segment", image)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let x = tape.constant(image);
    let (scores, _) = model.logits(&mut tape, &bound, x, NormMode::Eval)?;
    Ok(tape.tensor(scores))
}

/// Streaming per-channel mean / variance (Chan et al. pairwise merge).
#[derive(Debug, Clone)]
struct ChannelMoments {
    count: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl ChannelMoments {
    fn new(channels: usize) -> Self {
        ChannelMoments {
            count: 0.0,
            mean: vec![0.0; channels],
            m2: vec![0.0; channels],
        }
    }

    /// Merges one `[C, plane]` block.
    fn push(&mut self, data: &[f64], plane: usize) {
        let nb = plane as f64;
        for (c, chunk) in data.chunks(plane).enumerate() {
            let mb = chunk.iter().sum::<f64>() / nb;
            let m2b: f64 = chunk.iter().map(|v| (v - mb) * (v - mb)).sum();
            let n = self.count + nb;
            let delta = mb - self.mean[c];
            self.mean[c] += delta * nb / n;
            self.m2[c] += m2b + delta * delta * self.count * nb / n;
        }
        self.count += nb;
    }

    fn finish(self) -> RunningStats {
        let n = self.count;
        RunningStats {
            mean: self.mean,
            var: self.m2.into_iter().map(|m| m / n).collect(),
        }
    }
}

/// Replaces every stage's stored statistics with statistics measured on
/// `target_images`, stage by stage, so each stage sees inputs normalized with
/// the already-adapted statistics upstream. Learnable parameters are copied
/// unchanged.
pub fn adapt_bn_stats(model: &MiniFcn, target_images: &[Tensor]) -> Result<MiniFcn> {
    if target_images.is_empty() {
        return Err(Error::Empty("adapt_bn_stats"));
    }
    if target_images.len() < MIN_ABN_IMAGES {
        return Err(Error::invalid(
            "adapt_bn_stats",
            alloc::format!("need at least {MIN_ABN_IMAGES} images, got {}", target_images.len()),
        ));
    }
    let mut adapted = model.clone();
    let offsets: Vec<f64> = model.config.input_mean.iter().map(|m| -m).collect();
    let mut acts: Vec<Tensor> = Vec::with_capacity(target_images.len());
    for img in target_images {
        if img.rank() != 3 || img.shape()[0] != 3 {
            return Err(Error::invalid("adapt_bn_stats", "expected [3,H,W] images"));
        }
        let mut tape = Tape::new();
        let x = tape.constant(img);
        let v = tape.add_channel(x, &offsets)?;
        acts.push(tape.tensor(v));
    }
    for i in 0..STAGES {
        let stage = adapted.stages[i].clone();
        let c = stage.conv.shape()[0];
        let mut moments = ChannelMoments::new(c);
        let mut pre = Vec::with_capacity(acts.len());
        for a in &acts {
            let out = crate::ops::conv2d(a, &stage.conv, stage.stride, stage.dilation, stage.dilation)?;
            let plane = out.numel() / c;
            moments.push(out.data(), plane);
            pre.push(out);
        }
        let stats = moments.finish();
        for (a, p) in acts.iter_mut().zip(pre) {
            let mut s = stats.clone();
            let norm = crate::ops::batch_norm(&p, &stage.gamma, &stage.beta, &mut s, NormMode::Eval)?;
            *a = crate::ops::relu(&norm);
        }
        adapted.stages[i].stats = stats;
    }
    Ok(adapted)
}
