use alloc::vec;
use alloc::vec::Vec;

use super::{GradSink, Nchw, Op, Tape, Var};
use crate::math;
use crate::{Error, Result};

/// Variance floor added before the square root.
pub const BN_EPS: f64 = 1e-5;
/// Weight kept on the old running statistic in the exponential moving average.
pub const BN_MOMENTUM: f64 = 0.9;

/// Which statistics batch normalization divides by.
#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a> {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with stored per-channel statistics.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel population statistics of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchStats {
    /// Folds these batch statistics into running statistics.
    pub fn update_running(&self, running_mean: &mut [f64], running_var: &mut [f64]) {
        for (r, b) in running_mean.iter_mut().zip(&self.mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
        for (r, b) in running_var.iter_mut().zip(&self.var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
    }
}

impl Tape {
    /// Batch normalization over the batch and spatial axes.
    ///
    /// In train mode the batch statistics are returned so the caller can fold
    /// them into its running estimates.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let d = Nchw::of("batch_norm", self.shape(input))?;
        if d.n * d.plane() == 0 {
            return Err(Error::Empty("batch_norm channel"));
        }
        for p in [gamma, beta] {
            if self.shape(p) != [d.c] {
                return Err(Error::shape("batch_norm", self.shape(input), self.shape(p)));
            }
        }
        let plane = d.plane();
        let count = (d.n * plane) as f64;
        let x = self.value(input);
        let channel = |i: usize| (i / plane) % d.c;

        let (mean, var, stats) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0; d.c];
                for (i, v) in x.iter().enumerate() {
                    mean[channel(i)] += v;
                }
                mean.iter_mut().for_each(|m| *m /= count);
                let mut var = vec![0.0; d.c];
                for (i, v) in x.iter().enumerate() {
                    let c = channel(i);
                    var[c] += (v - mean[c]) * (v - mean[c]);
                }
                var.iter_mut().for_each(|s| *s /= count);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                };
                (mean, var, Some(stats))
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != d.c || var.len() != d.c {
                    return Err(Error::shape("batch_norm stats", &[d.c], &[mean.len(), var.len()]));
                }
                if var.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                    return Err(Error::invalid(
                        "batch_norm",
                        "stored variance must be finite and non-negative",
                    ));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / math::sqrt(v + BN_EPS)).collect();
        let xhat: Vec<f64> = x
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let c = channel(i);
                (v - mean[c]) * inv_std[c]
            })
            .collect();
        let g = self.value(gamma);
        let b = self.value(beta);
        let out = xhat
            .iter()
            .enumerate()
            .map(|(i, xh)| {
                let c = channel(i);
                g[c] * xh + b[c]
            })
            .collect();
        let shape = self.shape(input).to_vec();
        let var = self.push(
            shape,
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                channels: d.c,
                plane,
                batch: d.n,
                xhat,
                inv_std,
                train: matches!(mode, BnMode::Train),
            },
        );
        Ok((var, stats))
    }
}

pub(super) struct BnSaved<'a> {
    pub input: Var,
    pub gamma: Var,
    pub beta: Var,
    pub channels: usize,
    pub plane: usize,
    pub batch: usize,
    pub xhat: &'a [f64],
    pub inv_std: &'a [f64],
    pub train: bool,
}

pub(super) fn backward(sink: &mut GradSink<'_>, s: BnSaved<'_>, gout: &[f64]) {
    let nodes = sink.nodes;
    let c_n = s.channels;
    let channel = |i: usize| (i / s.plane) % c_n;
    let mut sum_g = vec![0.0; c_n];
    let mut sum_gx = vec![0.0; c_n];
    for (i, (g, xh)) in gout.iter().zip(s.xhat).enumerate() {
        let c = channel(i);
        sum_g[c] += g;
        sum_gx[c] += g * xh;
    }
    if let Some(gg) = sink.slot(s.gamma) {
        gg.iter_mut().zip(&sum_gx).for_each(|(a, b)| *a += b);
    }
    if let Some(gb) = sink.slot(s.beta) {
        gb.iter_mut().zip(&sum_g).for_each(|(a, b)| *a += b);
    }
    if !sink.wants(s.input) {
        return;
    }
    let gamma = &nodes[s.gamma.0].value;
    let gx = sink.slot(s.input).expect("input wants grad");
    if s.train {
        // dx = γ·inv_std/M · (M·g − Σg − x̂·Σ(g·x̂))
        let m = (s.batch * s.plane) as f64;
        for (i, (gxi, (g, xh))) in gx.iter_mut().zip(gout.iter().zip(s.xhat)).enumerate() {
            let c = channel(i);
            *gxi += gamma[c] * s.inv_std[c] / m * (m * g - sum_g[c] - xh * sum_gx[c]);
        }
    } else {
        for (i, (gxi, g)) in gx.iter_mut().zip(gout).enumerate() {
            let c = channel(i);
            *gxi += g * gamma[c] * s.inv_std[c];
        }
    }
}
