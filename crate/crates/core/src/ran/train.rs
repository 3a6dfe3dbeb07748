use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::discriminator::{adversarial_loss_on, AdversarialLoss, BoundDiscriminator, Discriminator};
use super::optim::{poly_lr, Sgd};
use crate::backbone::{BoundFcn, MiniFcn, STAGES};
use crate::data::{crop_image, flip_image, Sample, IGNORE};
use crate::ops::NormMode;
use crate::tape::BatchStats;
use crate::{rng, Error, Grads, Result, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Adversarial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub phase: Phase,
    /// Weight of the segmentation loss against the adversarial loss.
    pub lambda: f64,
    /// Source segmentation weight in the semi-supervised objective;
    /// falls back to `lambda`.
    pub lambda_source: Option<f64>,
    /// Labeled-target segmentation weight.
    pub lambda_target: f64,
    pub base_lr: f64,
    /// Discriminator base LR; falls back to `base_lr`.
    pub disc_lr: Option<f64>,
    pub power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub d_steps: usize,
    pub f_steps: usize,
    /// Square random-crop side; `None` trains on full images.
    pub crop: Option<usize>,
    pub flip: bool,
    pub seed: u64,
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        TrainConfig {
            phase: Phase::Pretrain,
            lambda: 5.0,
            lambda_source: None,
            lambda_target: 0.0,
            base_lr: 0.0025,
            disc_lr: None,
            power: 0.9,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: 6,
            iterations: 1000,
            d_steps: 1,
            f_steps: 1,
            crop: None,
            flip: false,
            seed: 0,
        }
    }

    pub fn adversarial() -> Self {
        TrainConfig {
            phase: Phase::Adversarial,
            base_lr: 0.0001,
            batch_size: 8,
            ..Self::pretrain()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::invalid("train config", msg))
            }
        };
        check(positive(self.lambda), "lambda must be positive")?;
        check(positive(self.base_lr), "base_lr must be positive")?;
        check(self.disc_lr.is_none_or(positive), "disc_lr must be positive")?;
        check(positive(self.power), "power must be positive")?;
        check(self.iterations >= 1, "iterations must be at least 1")?;
        check(self.batch_size >= 1, "batch_size must be at least 1")?;
        check(
            self.d_steps >= 1 && self.f_steps >= 1,
            "step ratio entries must be at least 1",
        )?;
        check((0.0..1.0).contains(&self.momentum), "momentum must lie in [0, 1)")?;
        check(self.weight_decay >= 0.0, "weight_decay must be non-negative")?;
        check(
            self.lambda_target >= 0.0 && self.lambda_source.is_none_or(|l| l >= 0.0),
            "semi-supervised weights must be non-negative",
        )?;
        Ok(())
    }

    pub fn weights(&self) -> ObjectiveWeights {
        ObjectiveWeights {
            source: self.lambda_source.unwrap_or(self.lambda),
            target: self.lambda_target,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::pretrain()
    }
}

/// Segmentation weights of the F-side objective
/// `source·L_seg(source) + target·L_seg(labeled target) - L_adv`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveWeights {
    pub source: f64,
    pub target: f64,
}

/// A minibatch `[N,3,h,w]` with optional per-pixel labels in `N·h·w` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Option<Vec<u8>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labeled(samples: &[Sample]) -> Result<Batch> {
        if samples.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
        let labels = samples.iter().flat_map(|s| s.labels.data().iter().copied()).collect();
        Ok(Batch {
            images: Tensor::stack(&images)?,
            labels: Some(labels),
        })
    }

    pub fn unlabeled(images: &[Tensor]) -> Result<Batch> {
        if images.is_empty() {
            return Err(Error::Empty("batch"));
        }
        Ok(Batch {
            images: Tensor::stack(images)?,
            labels: None,
        })
    }
}

/// Epoch-shuffled index stream with random crops and flips.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    len: usize,
    batch: usize,
    crop: Option<usize>,
    flip: bool,
    order: Vec<usize>,
    pos: usize,
    rng: rng::Rng,
}

/// Crop rectangle and flip flag applied to one sampled image.
#[derive(Debug, Clone, Copy)]
struct Window {
    y0: usize,
    x0: usize,
    h: usize,
    w: usize,
    flip: bool,
}

impl BatchSampler {
    pub fn new(len: usize, batch: usize, crop: Option<usize>, flip: bool, seed: u64, stream: u64) -> Result<Self> {
        if len == 0 {
            return Err(Error::Empty("batch sampler"));
        }
        Ok(BatchSampler {
            len,
            batch,
            crop,
            flip,
            order: Vec::new(),
            pos: 0,
            rng: rng::derived(seed, stream),
        })
    }

    fn next_index(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order = (0..self.len).collect();
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }

    /// Draws a crop window and flip flag for an `h × w` image.
    fn augmentation(&mut self, h: usize, w: usize) -> Window {
        let (ch, cw) = match self.crop {
            Some(c) => (c.min(h), c.min(w)),
            None => (h, w),
        };
        let y0 = if ch < h { self.rng.gen_range(0..=h - ch) } else { 0 };
        let x0 = if cw < w { self.rng.gen_range(0..=w - cw) } else { 0 };
        let flip = self.flip && self.rng.gen_bool(0.5);
        Window {
            y0,
            x0,
            h: ch,
            w: cw,
            flip,
        }
    }

    fn view(&mut self, image: &Tensor) -> Result<(Tensor, Window)> {
        let &[_, h, w] = image.shape() else {
            return Err(Error::invalid("batch sampler", "expected [3,H,W] images"));
        };
        let win = self.augmentation(h, w);
        let mut img = if (win.h, win.w) == (h, w) {
            image.clone()
        } else {
            crop_image(image, win.y0, win.x0, win.h, win.w)?
        };
        if win.flip {
            img = flip_image(&img);
        }
        Ok((img, win))
    }

    pub fn labeled(&mut self, samples: &[Sample]) -> Result<Batch> {
        if samples.len() != self.len {
            return Err(Error::shape("batch sampler", &[self.len], &[samples.len()]));
        }
        let mut images = Vec::with_capacity(self.batch);
        let mut labels = Vec::new();
        for _ in 0..self.batch {
            let s = &samples[self.next_index()];
            let (img, win) = self.view(&s.image)?;
            let mut lbl = s.labels.crop(win.y0, win.x0, win.h, win.w);
            if win.flip {
                lbl = lbl.flip_horizontal();
            }
            images.push(img);
            labels.extend_from_slice(lbl.data());
        }
        Ok(Batch {
            images: Tensor::stack(&images)?,
            labels: Some(labels),
        })
    }

    pub fn unlabeled(&mut self, images: &[Tensor]) -> Result<Batch> {
        if images.len() != self.len {
            return Err(Error::shape("batch sampler", &[self.len], &[images.len()]));
        }
        let mut out = Vec::with_capacity(self.batch);
        for _ in 0..self.batch {
            let idx = self.next_index();
            out.push(self.view(&images[idx])?.0);
        }
        Batch::unlabeled(&out)
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub iter: usize,
    pub lr: f64,
    pub seg: f64,
    /// Discriminator loss; absent while pretraining.
    pub adv: Option<f64>,
}

fn finite(what: &str, iter: usize, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical(alloc::format!(
            "{what} became {v} at iteration {iter}"
        )))
    }
}

fn labels_of(batch: &Batch) -> Result<&[u8]> {
    batch
        .labels
        .as_deref()
        .ok_or_else(|| Error::invalid("segmentation loss", "batch has no labels"))
}

/// Segmentation cross-entropy of `batch` on `tape` (train-mode BN).
pub fn seg_loss_on(
    model: &MiniFcn,
    tape: &mut Tape,
    bound: &BoundFcn,
    batch: &Batch,
) -> Result<(Var, Vec<BatchStats>, Var)> {
    let x = tape.constant(&batch.images);
    let (logits, feats) = model.logits(tape, bound, x, NormMode::Train)?;
    let (loss, _) = tape.softmax_ce(logits, labels_of(batch)?, IGNORE)?;
    let last = feats.last();
    Ok((loss, feats.batch_stats, last))
}

/// Supervised training on labeled source data with SGD + momentum + weight
/// decay under the poly schedule. Returns one log row per iteration.
pub fn pretrain_segmenter(model: &mut MiniFcn, source: &[Sample], config: &TrainConfig) -> Result<Vec<LossRow>> {
    config.validate()?;
    let mut sampler = BatchSampler::new(
        source.len(),
        config.batch_size,
        config.crop,
        config.flip,
        config.seed,
        10,
    )?;
    let mut opt = Sgd::new(config.momentum, config.weight_decay);
    let mut rows = Vec::with_capacity(config.iterations);
    model.zero_grad();
    for iter in 0..config.iterations {
        let lr = poly_lr(config.base_lr, iter, config.iterations, config.power)?;
        let batch = sampler.labeled(source)?;
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true);
        let (loss, stats, _) = seg_loss_on(model, &mut tape, &bound, &batch)?;
        let seg = finite("segmentation loss", iter, tape.scalar(loss))?;
        let grads = tape.backward(loss)?;
        model.accumulate_grads(&bound, &grads)?;
        opt.step(model.params_mut(), lr)?;
        model.apply_batch_stats(&stats);
        rows.push(LossRow {
            iter,
            lr,
            seg,
            adv: None,
        });
    }
    Ok(rows)
}

/// A trainable domain classifier over feature maps.
pub trait DomainCritic {
    type Bound;

    fn bind_critic(&self, tape: &mut Tape, trainable: bool) -> Self::Bound;

    /// Target-domain probabilities for `features`.
    fn score(&self, tape: &mut Tape, bound: &Self::Bound, features: Var) -> Result<Var>;

    fn critic_params_mut(&mut self) -> Vec<&mut Tensor>;

    fn accumulate_critic(&mut self, bound: &Self::Bound, grads: &Grads) -> Result<()>;
}

impl DomainCritic for Discriminator {
    type Bound = BoundDiscriminator;

    fn bind_critic(&self, tape: &mut Tape, trainable: bool) -> BoundDiscriminator {
        self.bind(tape, trainable)
    }

    fn score(&self, tape: &mut Tape, bound: &BoundDiscriminator, features: Var) -> Result<Var> {
        self.forward(tape, bound, features)
    }

    fn critic_params_mut(&mut self) -> Vec<&mut Tensor> {
        self.params_mut()
    }

    fn accumulate_critic(&mut self, bound: &BoundDiscriminator, grads: &Grads) -> Result<()> {
        self.accumulate_grads(bound, grads)
    }
}

/// One discriminator update on fixed features. Returns the loss measured
/// before the update.
pub fn d_step<C: DomainCritic>(
    critic: &mut C,
    opt: &mut Sgd,
    features_s: &Tensor,
    features_t: &Tensor,
    lr: f64,
) -> Result<AdversarialLoss> {
    let mut tape = Tape::new();
    let bound = critic.bind_critic(&mut tape, true);
    let fs = tape.constant(features_s);
    let ft = tape.constant(features_t);
    let ss = critic.score(&mut tape, &bound, fs)?;
    let st = critic.score(&mut tape, &bound, ft)?;
    let (loss, clamped) = adversarial_loss_on(&mut tape, ss, st)?;
    let grads = tape.backward(loss)?;
    critic.accumulate_critic(&bound, &grads)?;
    opt.step(critic.critic_params_mut(), lr)?;
    Ok(AdversarialLoss {
        value: tape.scalar(loss),
        clamped,
    })
}

/// Minibatches for one adversarial iteration.
#[derive(Debug, Clone, Copy)]
pub struct StepBatches<'a> {
    pub source: &'a Batch,
    pub target: &'a Batch,
    pub labeled_target: Option<&'a Batch>,
}

/// Terms of the F-side objective recorded on a tape.
#[derive(Debug, Clone)]
pub struct FObjective {
    pub total: Var,
    pub seg_source: Var,
    pub seg_target: Option<Var>,
    pub adv: Var,
    pub clamped: usize,
    pub features_s: Var,
    pub features_t: Var,
    /// Source-batch BN statistics; the only ones folded into the running
    /// estimates.
    pub source_stats: Vec<BatchStats>,
}

/// Source and target last-stage features plus segmentation losses.
struct FForward {
    seg_source: Var,
    seg_target: Option<Var>,
    features_s: Var,
    features_t: Var,
    source_stats: Vec<BatchStats>,
}

fn forward_f(model: &MiniFcn, tape: &mut Tape, bound: &BoundFcn, batches: StepBatches<'_>) -> Result<FForward> {
    let (seg_source, source_stats, features_s) = seg_loss_on(model, tape, bound, batches.source)?;
    // Each domain is normalized with its own batch statistics.
    let xt = tape.constant(&batches.target.images);
    let features_t = model.forward(tape, bound, xt, NormMode::Train, STAGES)?.last();
    let seg_target = match batches.labeled_target {
        Some(b) if !b.is_empty() => Some(seg_loss_on(model, tape, bound, b)?.0),
        _ => None,
    };
    Ok(FForward {
        seg_source,
        seg_target,
        features_s,
        features_t,
        source_stats,
    })
}

fn f_terms<C: DomainCritic>(
    tape: &mut Tape,
    critic: &C,
    critic_bound: &C::Bound,
    fwd: FForward,
    weights: ObjectiveWeights,
) -> Result<FObjective> {
    let ss = critic.score(tape, critic_bound, fwd.features_s)?;
    let st = critic.score(tape, critic_bound, fwd.features_t)?;
    let (adv, clamped) = adversarial_loss_on(tape, ss, st)?;
    let mut terms = alloc::vec![(weights.source, fwd.seg_source), (-1.0, adv)];
    if let Some(t) = fwd.seg_target {
        terms.push((weights.target, t));
    }
    let total = tape.weighted_sum(&terms)?;
    Ok(FObjective {
        total,
        seg_source: fwd.seg_source,
        seg_target: fwd.seg_target,
        adv,
        clamped,
        features_s: fwd.features_s,
        features_t: fwd.features_t,
        source_stats: fwd.source_stats,
    })
}

/// Records `source·L_seg(s) + target·L_seg(t_l) - L_adv` for the backbone
/// bound as `bound`, with the critic frozen.
pub fn f_objective_on<C: DomainCritic>(
    model: &MiniFcn,
    tape: &mut Tape,
    bound: &BoundFcn,
    critic: &C,
    batches: StepBatches<'_>,
    weights: ObjectiveWeights,
) -> Result<FObjective> {
    let fwd = forward_f(model, tape, bound, batches)?;
    let cb = critic.bind_critic(tape, false);
    f_terms(tape, critic, &cb, fwd, weights)
}

/// Losses observed during one adversarial iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub seg_source: f64,
    pub seg_target: Option<f64>,
    /// Discriminator loss before its first update.
    pub adv_d: f64,
    /// Adversarial loss seen by the last F update.
    pub adv_f: f64,
    pub clamped: usize,
}

/// Alternating minimax trainer: `d_steps` discriminator updates on detached
/// features, then `f_steps` backbone updates against the frozen
/// discriminator.
#[derive(Debug, Clone)]
pub struct AdversarialTrainer<C> {
    pub model: MiniFcn,
    pub critic: C,
    opt_f: Sgd,
    opt_d: Sgd,
    d_steps: usize,
    f_steps: usize,
    weights: ObjectiveWeights,
}

impl<C: DomainCritic> AdversarialTrainer<C> {
    pub fn new(model: MiniFcn, critic: C, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(AdversarialTrainer {
            model,
            critic,
            opt_f: Sgd::new(config.momentum, config.weight_decay),
            opt_d: Sgd::new(config.momentum, config.weight_decay),
            d_steps: config.d_steps,
            f_steps: config.f_steps,
            weights: config.weights(),
        })
    }

    pub fn into_parts(self) -> (MiniFcn, C) {
        (self.model, self.critic)
    }

    pub fn step(&mut self, batches: StepBatches<'_>, lr_f: f64, lr_d: f64) -> Result<StepLosses> {
        let mut adv_d = f64::NAN;
        let mut clamped = 0;
        let mut seg_source = f64::NAN;
        let mut seg_target = None;
        let mut adv_f = f64::NAN;
        for f in 0..self.f_steps {
            self.model.zero_grad();
            let mut tape = Tape::new();
            let bound = self.model.bind(&mut tape, true);
            let fwd = forward_f(&self.model, &mut tape, &bound, batches)?;
            if f == 0 {
                let fs = tape.tensor(fwd.features_s);
                let ft = tape.tensor(fwd.features_t);
                for d in 0..self.d_steps {
                    let l = d_step(&mut self.critic, &mut self.opt_d, &fs, &ft, lr_d)?;
                    clamped += l.clamped;
                    if d == 0 {
                        adv_d = l.value;
                    }
                }
            }
            let cb = self.critic.bind_critic(&mut tape, false);
            let obj = f_terms(&mut tape, &self.critic, &cb, fwd, self.weights)?;
            clamped += obj.clamped;
            seg_source = tape.scalar(obj.seg_source);
            seg_target = obj.seg_target.map(|v| tape.scalar(v));
            adv_f = tape.scalar(obj.adv);
            if !tape.scalar(obj.total).is_finite() {
                return Err(Error::Numerical(alloc::format!(
                    "adversarial objective is not finite (L_seg {seg_source}, L_adv {adv_f})"
                )));
            }
            let grads = tape.backward(obj.total)?;
            self.model.accumulate_grads(&bound, &grads)?;
            self.opt_f.step(self.model.params_mut(), lr_f)?;
            self.model.apply_batch_stats(&obj.source_stats);
        }
        Ok(StepLosses {
            seg_source,
            seg_target,
            adv_d,
            adv_f,
            clamped,
        })
    }
}

/// Joint adversarial fine-tuning. `labeled_target` may be empty; with
/// samples and a positive `lambda_target` this is the semi-supervised
/// objective.
pub fn train_ran<C: DomainCritic>(
    model: MiniFcn,
    critic: C,
    source: &[Sample],
    target: &[Tensor],
    labeled_target: &[Sample],
    config: &TrainConfig,
) -> Result<(MiniFcn, C, Vec<LossRow>)> {
    config.validate()?;
    let mut trainer = AdversarialTrainer::new(model, critic, config)?;
    let mut src = BatchSampler::new(
        source.len(),
        config.batch_size,
        config.crop,
        config.flip,
        config.seed,
        20,
    )?;
    let mut tgt = BatchSampler::new(
        target.len(),
        config.batch_size,
        config.crop,
        config.flip,
        config.seed,
        21,
    )?;
    let mut lab = if labeled_target.is_empty() {
        None
    } else {
        Some(BatchSampler::new(
            labeled_target.len(),
            config.batch_size.min(labeled_target.len()),
            config.crop,
            config.flip,
            config.seed,
            22,
        )?)
    };
    let mut rows = Vec::with_capacity(config.iterations);
    for iter in 0..config.iterations {
        let lr = poly_lr(config.base_lr, iter, config.iterations, config.power)?;
        let lr_d = poly_lr(
            config.disc_lr.unwrap_or(config.base_lr),
            iter,
            config.iterations,
            config.power,
        )?;
        let bs = src.labeled(source)?;
        let bt = tgt.unlabeled(target)?;
        let bl = match lab.as_mut() {
            Some(s) => Some(s.labeled(labeled_target)?),
            None => None,
        };
        let losses = trainer.step(
            StepBatches {
                source: &bs,
                target: &bt,
                labeled_target: bl.as_ref(),
            },
            lr,
            lr_d,
        )?;
        rows.push(LossRow {
            iter,
            lr,
            seg: finite("segmentation loss", iter, losses.seg_source)?,
            adv: Some(finite("adversarial loss", iter, losses.adv_d)?),
        });
    }
    let (model, critic) = trainer.into_parts();
    Ok((model, critic, rows))
}

/// Trains a fresh probe on the first half of each feature set and returns
/// its per-unit domain accuracy on the second half.
pub fn probe_domain_accuracy(
    source: &[Tensor],
    target: &[Tensor],
    probe: Discriminator,
    config: &ProbeConfig,
) -> Result<f64> {
    if source.len() < 2 || target.len() < 2 {
        return Err(Error::invalid("probe", "need at least two feature maps per domain"));
    }
    let (s_train, s_test) = source.split_at(source.len() / 2);
    let (t_train, t_test) = target.split_at(target.len() / 2);
    let mut probe = probe;
    let mut opt = Sgd::new(config.momentum, 0.0);
    let mut rs = BatchSampler::new(s_train.len(), config.batch_size, None, false, config.seed, 30)?;
    let mut rt = BatchSampler::new(t_train.len(), config.batch_size, None, false, config.seed, 31)?;
    for iter in 0..config.iterations {
        let lr = poly_lr(config.lr, iter, config.iterations, 0.9)?;
        let bs = rs.unlabeled(s_train)?;
        let bt = rt.unlabeled(t_train)?;
        let l = d_step(&mut probe, &mut opt, &bs.images, &bt.images, lr)?;
        finite("probe loss", iter, l.value)?;
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    for (maps, is_target) in [(s_test, false), (t_test, true)] {
        for m in maps {
            let scores = super::discriminate(&probe, m)?;
            for &v in scores.values().data() {
                correct += usize::from((v > 0.5) == is_target);
                total += 1;
            }
        }
    }
    Ok(correct as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            iterations: 200,
            lr: 0.01,
            momentum: 0.9,
            batch_size: 8,
            seed: 7,
        }
    }
}

/// Eval-mode last-stage features of each image.
pub fn last_stage_features(model: &MiniFcn, images: &[Tensor]) -> Result<Vec<Tensor>> {
    images
        .iter()
        .map(|img| {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, false);
            let x = tape.constant(img);
            let f = model.forward(&mut tape, &bound, x, NormMode::Eval, STAGES)?;
            Ok(tape.tensor(f.last()))
        })
        .collect()
}
