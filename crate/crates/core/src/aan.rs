//! Appearance adaptation: pixel-space optimization that keeps one image's
//! deep content while matching another domain's averaged Gram statistics.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::backbone::{forward_features, FeaturePyramid, Layer, MiniFcn, STAGES};
use crate::ops::NormMode;
use crate::{rng, Error, Result, Tape, Tensor, Var};

/// Channel Gram matrix of one feature map, already divided by `normalizer`.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    size: usize,
    values: Vec<f64>,
    normalizer: f64,
}

impl GramMatrix {
    pub fn new(size: usize, values: Vec<f64>, normalizer: f64) -> Result<Self> {
        if size == 0 || values.len() != size * size {
            return Err(Error::shape("gram", &[size, size], &[values.len()]));
        }
        Ok(GramMatrix {
            size,
            values,
            normalizer,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size + j]
    }

    /// Spatial size `H·W` of the source map.
    pub fn normalizer(&self) -> f64 {
        self.normalizer
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([self.size, self.size], self.values.clone()).expect("square gram")
    }
}

/// Gram matrix of a `[N,H,W]` feature map.
pub fn gram(feature_map: &Tensor) -> Result<GramMatrix> {
    let &[n, h, w] = feature_map.shape() else {
        return Err(Error::invalid("gram", "expected an [N,H,W] feature map"));
    };
    let mut tape = Tape::new();
    let x = tape.constant(feature_map);
    let g = tape.gram(x)?;
    GramMatrix::new(n, tape.value(g).to_vec(), (h * w) as f64)
}

/// Per-layer Grams averaged over a set of images.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainStyle {
    grams: Vec<(Layer, GramMatrix)>,
    count: usize,
}

impl DomainStyle {
    pub fn new(grams: Vec<(Layer, GramMatrix)>, count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::Empty("domain style"));
        }
        Ok(DomainStyle { grams, count })
    }

    pub fn get(&self, layer: Layer) -> Option<&GramMatrix> {
        self.grams.iter().find(|(l, _)| *l == layer).map(|(_, g)| g)
    }

    pub fn layers(&self) -> Vec<Layer> {
        self.grams.iter().map(|(l, _)| *l).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Layer, &GramMatrix)> {
        self.grams.iter().map(|(l, g)| (*l, g))
    }

    /// Number of images averaged.
    pub fn count(&self) -> usize {
        self.count
    }
}

pub fn domain_style(images: &[Tensor], extractor: &MiniFcn, layers: &[Layer]) -> Result<DomainStyle> {
    if images.is_empty() {
        return Err(Error::Empty("domain_style"));
    }
    if layers.is_empty() {
        return Err(Error::Empty("domain_style layers"));
    }
    let mut sums: Vec<(Layer, Vec<f64>, f64, usize)> = Vec::new();
    for img in images {
        let pyr = forward_features(extractor, img)?;
        for &layer in layers {
            let map = pyr.get(layer).expect("all stages computed");
            let g = gram(map)?;
            match sums.iter_mut().find(|(l, ..)| *l == layer) {
                Some((_, acc, area, size)) => {
                    if *size != g.size {
                        return Err(Error::shape("domain_style", &[*size], &[g.size]));
                    }
                    acc.iter_mut().zip(g.values()).for_each(|(a, v)| *a += v);
                    *area += g.normalizer;
                }
                None => sums.push((layer, g.values, g.normalizer, g.size)),
            }
        }
    }
    let m = images.len() as f64;
    // With mixed image sizes the recorded normalizer is the mean area.
    let grams = sums
        .into_iter()
        .map(|(layer, mut acc, area, size)| {
            acc.iter_mut().for_each(|v| *v /= m);
            Ok((layer, GramMatrix::new(size, acc, area / m)?))
        })
        .collect::<Result<Vec<_>>>()?;
    DomainStyle::new(grams, images.len())
}

/// One weight per backbone stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LayerWeights(pub [f64; STAGES]);

impl LayerWeights {
    pub fn only(layer: Layer, weight: f64) -> Self {
        let mut w = [0.0; STAGES];
        w[layer.index()] = weight;
        LayerWeights(w)
    }

    pub fn uniform(weight: f64) -> Self {
        LayerWeights([weight; STAGES])
    }

    pub fn get(&self, layer: Layer) -> f64 {
        self.0[layer.index()]
    }

    /// Layers with a nonzero weight, shallow to deep.
    pub fn active(&self) -> Vec<(Layer, f64)> {
        Layer::ALL
            .iter()
            .map(|&l| (l, self.get(l)))
            .filter(|&(_, w)| w != 0.0)
            .collect()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        LayerWeights(self.0.map(|w| w * factor))
    }
}

pub fn content_loss(pyr_o: &FeaturePyramid, pyr_s: &FeaturePyramid, weights: &LayerWeights) -> Result<f64> {
    let mut total = 0.0;
    for (layer, w) in weights.active() {
        let (Some(a), Some(b)) = (pyr_o.get(layer), pyr_s.get(layer)) else {
            return Err(Error::invalid("content_loss", alloc::format!("layer {layer} missing")));
        };
        if a.shape() != b.shape() {
            return Err(Error::shape("content_loss", a.shape(), b.shape()));
        }
        total += w * mean_sq(a.data(), b.data());
    }
    Ok(total)
}

pub fn style_loss(grams_o: &[(Layer, GramMatrix)], style: &DomainStyle, weights: &LayerWeights) -> Result<f64> {
    let mut total = 0.0;
    for (layer, w) in weights.active() {
        let ours = grams_o.iter().find(|(l, _)| *l == layer).map(|(_, g)| g);
        let (Some(a), Some(b)) = (ours, style.get(layer)) else {
            return Err(Error::invalid("style_loss", alloc::format!("layer {layer} missing")));
        };
        if a.size() != b.size() {
            return Err(Error::shape("style_loss", &[a.size()], &[b.size()]));
        }
        total += w * mean_sq(a.values(), b.values());
    }
    Ok(total)
}

fn mean_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// How the style weight is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Alpha {
    Fixed(f64),
    /// Scale the style term so its pixel-gradient L1 norm is `ratio` times
    /// the content term's, measured on a white-noise image.
    Auto {
        ratio: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Uniform noise on `[0,1]`.
    WhiteNoise,
    /// Start from the content image.
    Source,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AanConfig {
    pub content_weights: LayerWeights,
    pub style_weights: LayerWeights,
    pub alpha: Alpha,
    /// Initial step length in L1 pixel units.
    pub beta: f64,
    pub iterations: usize,
    pub init: Init,
    pub seed: u64,
}

impl Default for AanConfig {
    fn default() -> Self {
        AanConfig {
            content_weights: LayerWeights::only(Layer::C4, 1.0),
            style_weights: LayerWeights::uniform(1.0),
            alpha: Alpha::Auto { ratio: 0.1 },
            beta: 10.0,
            iterations: 1000,
            init: Init::WhiteNoise,
            seed: 0,
        }
    }
}

impl AanConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::invalid("aan config", msg));
        match self.alpha {
            Alpha::Fixed(a) if !(a >= 0.0 && a.is_finite()) => return bad("alpha must be non-negative"),
            Alpha::Auto { ratio } if !(ratio >= 0.0 && ratio.is_finite()) => {
                return bad("alpha ratio must be non-negative")
            }
            _ => {}
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta must be positive");
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1");
        }
        let valid = |w: &LayerWeights| w.0.iter().all(|v| v.is_finite() && *v >= 0.0);
        if !valid(&self.content_weights) || !valid(&self.style_weights) {
            return bad("layer weights must be finite and non-negative");
        }
        if self.content_weights.active().is_empty() || self.style_weights.active().is_empty() {
            return bad("need a nonzero content weight and a nonzero style weight");
        }
        Ok(())
    }
}

/// Content and style terms recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct AanTerms {
    pub content: Var,
    pub style: Var,
}

/// Fixed targets of one rendering problem: the content image's feature
/// maps and the target Grams, both seen through a frozen extractor.
#[derive(Debug, Clone)]
pub struct AanProblem<'a> {
    extractor: &'a MiniFcn,
    content: Vec<(Layer, f64, Tensor)>,
    style: Vec<(Layer, f64, Tensor)>,
    depth: usize,
}

impl<'a> AanProblem<'a> {
    pub fn new(
        extractor: &'a MiniFcn,
        content_image: &Tensor,
        style: &DomainStyle,
        content_weights: &LayerWeights,
        style_weights: &LayerWeights,
    ) -> Result<Self> {
        let cw = content_weights.active();
        let sw = style_weights.active();
        let depth = cw.iter().chain(&sw).map(|(l, _)| l.index() + 1).max().unwrap_or(1);
        let mut tape = Tape::new();
        let bound = extractor.bind(&mut tape, false);
        let x = tape.constant(content_image);
        let feats = extractor.forward(&mut tape, &bound, x, NormMode::Eval, depth)?;
        let content = cw
            .iter()
            .map(|&(l, w)| (l, w, tape.tensor(feats.layers[l.index()])))
            .collect();
        let style = sw
            .iter()
            .map(|&(l, w)| {
                let g = style
                    .get(l)
                    .ok_or_else(|| Error::invalid("aan", alloc::format!("style has no Gram for {l}")))?;
                Ok((l, w, g.to_tensor()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AanProblem {
            extractor,
            content,
            style,
            depth,
        })
    }

    /// Records both loss terms for the image `x` (`[3,H,W]`).
    pub fn terms(&self, tape: &mut Tape, x: Var) -> Result<AanTerms> {
        let bound = self.extractor.bind(tape, false);
        let feats = self.extractor.forward(tape, &bound, x, NormMode::Eval, self.depth)?;
        let mut content = Vec::with_capacity(self.content.len());
        for (l, w, target) in &self.content {
            let t = tape.constant(target);
            content.push((*w, tape.mean_sq_diff(feats.layers[l.index()], t)?));
        }
        let mut style = Vec::with_capacity(self.style.len());
        for (l, w, target) in &self.style {
            let g = tape.gram(feats.layers[l.index()])?;
            let t = tape.constant(target);
            style.push((*w, tape.mean_sq_diff(g, t)?));
        }
        Ok(AanTerms {
            content: tape.weighted_sum(&content)?,
            style: tape.weighted_sum(&style)?,
        })
    }

    /// `content + alpha·style` on the tape.
    pub fn objective(&self, tape: &mut Tape, x: Var, alpha: f64) -> Result<Var> {
        let t = self.terms(tape, x)?;
        tape.weighted_sum(&[(1.0, t.content), (alpha, t.style)])
    }

    /// `(content, style)` values at `x`.
    pub fn evaluate(&self, x: &Tensor) -> Result<(f64, f64)> {
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let t = self.terms(&mut tape, v)?;
        Ok((tape.scalar(t.content), tape.scalar(t.style)))
    }

    pub fn loss(&self, x: &Tensor, alpha: f64) -> Result<f64> {
        let (c, s) = self.evaluate(x)?;
        Ok(c + alpha * s)
    }

    fn loss_and_grad(&self, x: &Tensor, alpha: f64) -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let v = tape.input(x.shape().to_vec(), x.data().to_vec(), true);
        let loss = self.objective(&mut tape, v, alpha)?;
        let grads = tape.backward(loss)?;
        let g = grads
            .get(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; x.numel()]);
        Ok((tape.scalar(loss), g))
    }

    /// Style weight giving `‖∇style‖₁·α = ratio·‖∇content‖₁` at `reference`.
    pub fn calibrate_alpha(&self, reference: &Tensor, ratio: f64) -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.input(reference.shape().to_vec(), reference.data().to_vec(), true);
        let t = self.terms(&mut tape, v)?;
        let l1 = |g: Option<&[f64]>| g.map_or(0.0, |g| g.iter().map(|x| x.abs()).sum::<f64>());
        let gc = l1(tape.backward(t.content)?.get(v));
        let gs = l1(tape.backward(t.style)?.get(v));
        if gs == 0.0 || !gs.is_finite() || !gc.is_finite() {
            return Err(Error::Numerical(alloc::format!(
                "cannot calibrate alpha: content gradient {gc}, style gradient {gs}"
            )));
        }
        Ok(ratio * gc / gs)
    }
}

/// Resolves the configured style weight for `problem`.
pub fn resolve_alpha(problem: &AanProblem<'_>, shape: &[usize], config: &AanConfig) -> Result<f64> {
    match config.alpha {
        Alpha::Fixed(a) => Ok(a),
        Alpha::Auto { ratio } => problem.calibrate_alpha(&white_noise(shape, config.seed), ratio),
    }
}

/// `content + α·style` for `x_o` against `x_s` and `style`.
pub fn aan_loss(
    x_o: &Tensor,
    x_s: &Tensor,
    style: &DomainStyle,
    extractor: &MiniFcn,
    config: &AanConfig,
) -> Result<f64> {
    config.validate()?;
    let problem = AanProblem::new(extractor, x_s, style, &config.content_weights, &config.style_weights)?;
    let alpha = resolve_alpha(&problem, x_s.shape(), config)?;
    problem.loss(x_o, alpha)
}

/// Step length `β·(I - i)/I` for iteration `i` in `1..=I`.
pub fn step_size(beta: f64, iter: usize, iterations: usize) -> f64 {
    beta * (iterations - iter.min(iterations)) as f64 / iterations as f64
}

/// `step · g / ‖g‖₁`, or `None` when the gradient vanishes.
pub fn normalized_step(grad: &[f64], step: f64) -> Option<Vec<f64>> {
    let norm: f64 = grad.iter().map(|g| g.abs()).sum();
    (norm > 0.0 && norm.is_finite()).then(|| grad.iter().map(|g| step * g / norm).collect())
}

pub fn white_noise(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::derived(seed, 0xA11);
    Tensor::from_fn(shape.to_vec(), |_| r.gen::<f64>())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AanOutcome {
    pub image: Tensor,
    /// Loss at every iterate, initial and final included (`I + 1` values).
    pub losses: Vec<f64>,
    pub alpha: f64,
    /// Iterations whose gradient vanished.
    pub skipped: usize,
}

impl AanOutcome {
    /// Best loss seen up to each iterate.
    pub fn running_min(&self) -> Vec<f64> {
        self.losses
            .iter()
            .scan(f64::INFINITY, |best, &l| {
                *best = best.min(l);
                Some(*best)
            })
            .collect()
    }
}

/// Renders `x_s`'s content with `style` by L1-normalized gradient descent
/// with a linearly decaying step, clamping pixels to `[0,1]` after each step.
pub fn adapt_image(x_s: &Tensor, style: &DomainStyle, extractor: &MiniFcn, config: &AanConfig) -> Result<AanOutcome> {
    config.validate()?;
    let problem = AanProblem::new(extractor, x_s, style, &config.content_weights, &config.style_weights)?;
    let alpha = resolve_alpha(&problem, x_s.shape(), config)?;
    let mut x = match config.init {
        Init::WhiteNoise => white_noise(x_s.shape(), config.seed),
        Init::Source => x_s.clone(),
    };
    let iters = config.iterations;
    let mut losses = Vec::with_capacity(iters + 1);
    let mut skipped = 0;
    for i in 1..=iters {
        let (loss, g) = problem.loss_and_grad(&x, alpha)?;
        if !loss.is_finite() {
            return Err(Error::Numerical(alloc::format!(
                "appearance loss became {loss} at iteration {i}"
            )));
        }
        losses.push(loss);
        match normalized_step(&g, step_size(config.beta, i, iters)) {
            Some(delta) => {
                for (p, d) in x.data_mut().iter_mut().zip(delta) {
                    *p = (*p - d).clamp(0.0, 1.0);
                }
            }
            None => skipped += 1,
        }
    }
    losses.push(problem.loss(&x, alpha)?);
    Ok(AanOutcome {
        image: x,
        losses,
        alpha,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_helpers() {
        let w = LayerWeights::only(Layer::C4, 2.0);
        assert_eq!(w.active(), vec![(Layer::C4, 2.0)]);
        assert_eq!(w.scaled(2.0).get(Layer::C4), 4.0);
        assert_eq!(LayerWeights::uniform(1.0).active().len(), STAGES);
    }

    #[test]
    fn step_decays_to_zero() {
        assert!((step_size(10.0, 1, 1000) - 9.99).abs() < 1e-12);
        assert_eq!(step_size(10.0, 1000, 1000), 0.0);
        assert!(normalized_step(&[0.0, 0.0], 1.0).is_none());
    }

    #[test]
    fn config_rejects_degenerate_weights() {
        let mut c = AanConfig::default();
        assert!(c.validate().is_ok());
        c.style_weights = LayerWeights::uniform(0.0);
        assert!(c.validate().is_err());
        c = AanConfig {
            beta: 0.0,
            ..AanConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn gram_rejects_wrong_rank() {
        assert!(gram(&Tensor::zeros([2, 2])).is_err());
    }
}
