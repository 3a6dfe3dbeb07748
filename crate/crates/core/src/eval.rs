//! Segmentation metrics, score-map fusion and multi-scale inference.

use alloc::vec;
use alloc::vec::Vec;

use crate::backbone::{segment, MiniFcn, MIN_INPUT_SIDE};
use crate::data::{LabelMap, Sample, IGNORE};
use crate::ops::{resize_bilinear, softmax_channels};
use crate::{Error, Result, Tensor};

/// Pixel counts indexed by (ground truth, prediction).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, gt: usize) -> u64 {
        self.counts[gt * self.classes..(gt + 1) * self.classes].iter().sum()
    }

    pub fn col_sum(&self, pred: usize) -> u64 {
        (0..self.classes).map(|g| self.get(g, pred)).sum()
    }

    pub fn is_diagonal(&self) -> bool {
        (0..self.classes).all(|g| (0..self.classes).all(|p| g == p || self.get(g, p) == 0))
    }

    /// Accumulates one prediction / ground-truth pair.
    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
            return Err(Error::shape(
                "confusion",
                &[pred.height(), pred.width()],
                &[gt.height(), gt.width()],
            ));
        }
        let k = self.classes;
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if g == IGNORE {
                continue;
            }
            if g as usize >= k || p as usize >= k {
                return Err(Error::invalid(
                    "confusion",
                    alloc::format!("label pair (gt {g}, pred {p}) outside [0, {k})"),
                ));
            }
            self.counts[g as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::shape("confusion merge", &[self.classes], &[other.classes]));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }
}

pub fn confusion(pred: &LabelMap, gt: &LabelMap, classes: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.add(pred, gt)?;
    Ok(cm)
}

/// Per-class IoU; `None` marks a class absent from both prediction and
/// ground truth, which is left out of the mean.
#[derive(Debug, Clone, PartialEq)]
pub struct IoUReport {
    pub per_class: Vec<Option<f64>>,
    pub miou: Option<f64>,
}

impl IoUReport {
    /// mIoU, or 0 when no class was applicable.
    pub fn miou_or_zero(&self) -> f64 {
        self.miou.unwrap_or(0.0)
    }
}

pub fn iou_report(cm: &ConfusionMatrix) -> IoUReport {
    let per_class: Vec<Option<f64>> = (0..cm.classes())
        .map(|k| {
            let tp = cm.get(k, k);
            let union = cm.row_sum(k) + cm.col_sum(k) - tp;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let applicable: Vec<f64> = per_class.iter().flatten().copied().collect();
    let miou = (!applicable.is_empty()).then(|| applicable.iter().sum::<f64>() / applicable.len() as f64);
    IoUReport { per_class, miou }
}

/// Arithmetic mean of equally shaped score maps.
pub fn fuse_scores(maps: &[Tensor]) -> Result<Tensor> {
    let first = maps.first().ok_or(Error::Empty("fuse_scores"))?;
    let mut acc = vec![0.0; first.numel()];
    for m in maps {
        if m.shape() != first.shape() {
            return Err(Error::shape("fuse_scores", first.shape(), m.shape()));
        }
        acc.iter_mut().zip(m.data()).for_each(|(a, b)| *a += b);
    }
    let n = maps.len() as f64;
    acc.iter_mut().for_each(|v| *v /= n);
    Tensor::new(first.shape().to_vec(), acc)
}

/// Per-pixel argmax over the channel axis of a `[K,H,W]` map. Ties go to
/// the lowest class index.
pub fn argmax(scores: &Tensor) -> Result<LabelMap> {
    let &[k, h, w] = scores.shape() else {
        return Err(Error::invalid("argmax", "expected [K,H,W]"));
    };
    if k > IGNORE as usize {
        return Err(Error::invalid("argmax", "too many classes for a label map"));
    }
    let plane = h * w;
    let x = scores.data();
    let labels = (0..plane)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if x[c * plane + p] > x[best * plane + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(h, w, labels)
}

pub fn predict(model: &MiniFcn, image: &Tensor) -> Result<LabelMap> {
    argmax(&segment(model, image)?)
}

/// Confusion matrix of single-scale predictions over a labeled set.
pub fn evaluate(model: &MiniFcn, samples: &[Sample]) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.num_classes());
    for s in samples {
        cm.add(&predict(model, &s.image)?, &s.labels)?;
    }
    Ok(cm)
}

pub const DEFAULT_SCALES: [f64; 3] = [0.75, 1.0, 1.25];

#[derive(Debug, Clone, PartialEq)]
pub struct MultiScale {
    /// Fused per-pixel class probabilities `[K,H,W]`.
    pub probs: Tensor,
    /// Scales dropped because the resized input would be too small.
    pub skipped: Vec<f64>,
}

/// Softmax scores averaged over rescaled copies of `image`.
pub fn multiscale_infer(model: &MiniFcn, image: &Tensor, scales: &[f64]) -> Result<MultiScale> {
    if scales.is_empty() {
        return Err(Error::Empty("multiscale_infer scales"));
    }
    if scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::invalid("multiscale_infer", "scales must be positive"));
    }
    let &[_, h, w] = image.shape() else {
        return Err(Error::invalid("multiscale_infer", "expected [3,H,W]"));
    };
    let mut maps = Vec::new();
    let mut skipped = Vec::new();
    for &s in scales {
        let sh = libm::round(h as f64 * s) as usize;
        let sw = libm::round(w as f64 * s) as usize;
        if sh < MIN_INPUT_SIDE || sw < MIN_INPUT_SIDE {
            skipped.push(s);
            continue;
        }
        let probs = if (sh, sw) == (h, w) {
            softmax_channels(&segment(model, image)?)?
        } else {
            let resized = resize_bilinear(image, sh, sw)?;
            let p = softmax_channels(&segment(model, &resized)?)?;
            resize_bilinear(&p, h, w)?
        };
        maps.push(probs);
    }
    if maps.is_empty() {
        return Err(Error::invalid("multiscale_infer", "every scale was too small"));
    }
    Ok(MultiScale {
        probs: fuse_scores(&maps)?,
        skipped,
    })
}

/// Confusion matrix of multi-scale predictions over a labeled set.
pub fn evaluate_multiscale(model: &MiniFcn, samples: &[Sample], scales: &[f64]) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.num_classes());
    for s in samples {
        let ms = multiscale_infer(model, &s.image, scales)?;
        cm.add(&argmax(&ms.probs)?, &s.labels)?;
    }
    Ok(cm)
}
