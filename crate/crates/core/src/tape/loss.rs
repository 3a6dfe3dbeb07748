use alloc::vec;
use alloc::vec::Vec;

use super::{GradSink, Nchw, Op, Tape, Var};
use crate::linalg::gemm;
use crate::math;
use crate::{Error, Result};

/// Bookkeeping from a cross-entropy evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CeStats {
    /// Pixels that contributed to the mean.
    pub valid: usize,
    /// Set when every pixel was ignored and the loss was defined as zero.
    pub all_ignored: bool,
}

/// Bookkeeping from a log-loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LogLossStats {
    /// Scores that had to be clamped into `[eps, 1 - eps]`.
    pub clamped: usize,
}

impl Tape {
    /// Channel Gram matrix `G[i][j] = <Mᵢ, Mⱼ> / (H·W)`, per sample.
    pub fn gram(&mut self, input: Var) -> Result<Var> {
        let d = Nchw::of("gram", self.shape(input))?;
        let plane = d.plane();
        let x = self.value(input);
        let mut out = vec![0.0; d.n * d.c * d.c];
        for n in 0..d.n {
            let m = &x[n * d.c * plane..(n + 1) * d.c * plane];
            gemm(
                d.c,
                plane,
                d.c,
                m,
                false,
                m,
                true,
                0.0,
                &mut out[n * d.c * d.c..(n + 1) * d.c * d.c],
            );
        }
        let inv = 1.0 / plane as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let shape = if d.batched { vec![d.n, d.c, d.c] } else { vec![d.c, d.c] };
        Ok(self.push(
            shape,
            out,
            Op::Gram {
                input,
                batch: d.n,
                channels: d.c,
                plane,
            },
        ))
    }

    /// Mean of squared elementwise differences.
    pub fn mean_sq_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mean_sq_diff", self.shape(a), self.shape(b)));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let s: f64 = va.iter().zip(vb).map(|(x, y)| (x - y) * (x - y)).sum();
        let v = s / va.len() as f64;
        Ok(self.push(Vec::new(), vec![v], Op::MeanSqDiff(a, b)))
    }

    /// Mean per-pixel `-log softmax(logits)[label]` over non-ignored pixels.
    ///
    /// `labels` holds one class index per pixel in `N·H·W` order.
    pub fn softmax_ce(&mut self, logits: Var, labels: &[u8], ignore: u8) -> Result<(Var, CeStats)> {
        let d = Nchw::of("softmax_ce", self.shape(logits))?;
        let (k, plane) = (d.c, d.plane());
        if labels.len() != d.n * plane {
            return Err(Error::shape("softmax_ce", self.shape(logits), &[labels.len()]));
        }
        if let Some(bad) = labels.iter().find(|&&l| l != ignore && l as usize >= k) {
            return Err(Error::invalid(
                "softmax_ce",
                alloc::format!("label {bad} outside [0, {k})"),
            ));
        }
        let x = self.value(logits);
        let mut probs = vec![0.0; x.len()];
        let mut total = 0.0;
        let mut valid = 0;
        for n in 0..d.n {
            let base = n * k * plane;
            for p in 0..plane {
                let idx = |c: usize| base + c * plane + p;
                let max = (0..k).map(|c| x[idx(c)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for c in 0..k {
                    let e = math::exp(x[idx(c)] - max);
                    probs[idx(c)] = e;
                    z += e;
                }
                for c in 0..k {
                    probs[idx(c)] /= z;
                }
                let label = labels[n * plane + p];
                if label != ignore {
                    total -= x[idx(label as usize)] - max - math::ln(z);
                    valid += 1;
                }
            }
        }
        let stats = CeStats {
            valid,
            all_ignored: valid == 0,
        };
        let loss = if valid == 0 { 0.0 } else { total / valid as f64 };
        let v = self.push(
            Vec::new(),
            vec![loss],
            Op::SoftmaxCe {
                logits,
                probs,
                labels: labels.to_vec(),
                ignore,
                classes: k,
                plane,
                valid,
            },
        );
        Ok((v, stats))
    }

    /// `-mean(log p)` when `positive`, else `-mean(log(1 - p))`, with `p`
    /// clamped to `[eps, 1 - eps]`. Clamped entries pass no gradient.
    pub fn log_loss(&mut self, scores: Var, positive: bool, eps: f64) -> (Var, LogLossStats) {
        let p = self.value(scores);
        let mut clamped = Vec::with_capacity(p.len());
        let mut total = 0.0;
        for &s in p {
            let c = s.clamp(eps, 1.0 - eps);
            clamped.push(c != s);
            total -= if positive { math::ln(c) } else { math::ln(1.0 - c) };
        }
        let stats = LogLossStats {
            clamped: clamped.iter().filter(|&&c| c).count(),
        };
        let v = total / p.len() as f64;
        let var = self.push(
            Vec::new(),
            vec![v],
            Op::LogLoss {
                input: scores,
                positive,
                clamped,
            },
        );
        (var, stats)
    }
}

pub(super) fn gram_backward(sink: &mut GradSink<'_>, input: Var, batch: usize, c: usize, plane: usize, gout: &[f64]) {
    let nodes = sink.nodes;
    let Some(gx) = sink.slot(input) else {
        return;
    };
    let x = &nodes[input.0].value;
    let inv = 1.0 / plane as f64;
    let mut sym = vec![0.0; c * c];
    for n in 0..batch {
        let g = &gout[n * c * c..(n + 1) * c * c];
        for i in 0..c {
            for j in 0..c {
                sym[i * c + j] = (g[i * c + j] + g[j * c + i]) * inv;
            }
        }
        let range = n * c * plane..(n + 1) * c * plane;
        gemm(c, c, plane, &sym, false, &x[range.clone()], false, 1.0, &mut gx[range]);
    }
}

pub(super) fn msd_backward(sink: &mut GradSink<'_>, a: Var, b: Var, gout: &[f64]) {
    let nodes = sink.nodes;
    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
    let s = 2.0 * gout[0] / va.len() as f64;
    if let Some(g) = sink.slot(a) {
        for ((g, x), y) in g.iter_mut().zip(va).zip(vb) {
            *g += s * (x - y);
        }
    }
    if let Some(g) = sink.slot(b) {
        for ((g, x), y) in g.iter_mut().zip(va).zip(vb) {
            *g -= s * (x - y);
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn ce_backward(
    sink: &mut GradSink<'_>,
    logits: Var,
    probs: &[f64],
    labels: &[u8],
    ignore: u8,
    classes: usize,
    plane: usize,
    valid: usize,
    gout: &[f64],
) {
    if valid == 0 {
        return;
    }
    let Some(g) = sink.slot(logits) else {
        return;
    };
    let s = gout[0] / valid as f64;
    for (i, &label) in labels.iter().enumerate() {
        if label == ignore {
            continue;
        }
        let (n, p) = (i / plane, i % plane);
        for c in 0..classes {
            let idx = (n * classes + c) * plane + p;
            let target = if c == label as usize { 1.0 } else { 0.0 };
            g[idx] += s * (probs[idx] - target);
        }
    }
}

pub(super) fn log_loss_backward(sink: &mut GradSink<'_>, input: Var, positive: bool, clamped: &[bool], gout: &[f64]) {
    let nodes = sink.nodes;
    let p = &nodes[input.0].value;
    let Some(g) = sink.slot(input) else {
        return;
    };
    let s = gout[0] / p.len() as f64;
    for ((g, &p), &c) in g.iter_mut().zip(p).zip(clamped) {
        if c {
            continue;
        }
        *g += if positive { -s / p } else { s / (1.0 - p) };
    }
}
