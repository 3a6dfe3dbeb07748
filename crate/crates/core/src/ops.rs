//! Value-level wrappers over the tape operations, for callers that only need
//! forward results.

use alloc::vec::Vec;

use crate::tape::{BnMode, CeStats};
use crate::{Error, Result, Tape, Tensor};

/// Stored per-channel normalization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn identity(channels: usize) -> Self {
        RunningStats {
            mean: alloc::vec![0.0; channels],
            var: alloc::vec![1.0; channels],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

fn run(f: impl FnOnce(&mut Tape) -> Result<crate::Var>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let out = f(&mut tape)?;
    Ok(tape.tensor(out))
}

pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize, dilation: usize) -> Result<Tensor> {
    run(|t| {
        let x = t.constant(input);
        let k = t.constant(kernel);
        t.conv2d(x, k, None, stride, pad, dilation)
    })
}

pub fn conv2d_bias(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
    dilation: usize,
) -> Result<Tensor> {
    run(|t| {
        let x = t.constant(input);
        let k = t.constant(kernel);
        let b = t.constant(bias);
        t.conv2d(x, k, Some(b), stride, pad, dilation)
    })
}

/// Batch normalization. Train mode normalizes with the batch statistics and
/// folds them into `stats`; eval mode normalizes with `stats`.
pub fn batch_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: &mut RunningStats,
    mode: NormMode,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let g = tape.constant(gamma);
    let b = tape.constant(beta);
    let bn_mode = match mode {
        NormMode::Train => BnMode::Train,
        NormMode::Eval => BnMode::Eval {
            mean: &stats.mean,
            var: &stats.var,
        },
    };
    let (out, batch) = tape.batch_norm(xv, g, b, bn_mode)?;
    if let Some(batch) = batch {
        batch.update_running(&mut stats.mean, &mut stats.var);
    }
    Ok(tape.tensor(out))
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut t = Tape::new();
    let v = t.constant(x);
    let r = t.relu(v);
    t.tensor(r)
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    let mut t = Tape::new();
    let v = t.constant(x);
    let r = t.sigmoid(v);
    t.tensor(r)
}

pub fn bilinear_upsample(x: &Tensor, factor: usize) -> Result<Tensor> {
    run(|t| {
        let v = t.constant(x);
        t.upsample(v, factor)
    })
}

pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    run(|t| {
        let v = t.constant(x);
        t.resize_bilinear(v, out_h, out_w)
    })
}

/// Mean cross-entropy over non-ignored pixels; zero (with
/// `all_ignored` set) when nothing is labeled.
pub fn softmax_ce_loss(logits: &Tensor, labels: &[u8], ignore: u8) -> Result<(f64, CeStats)> {
    let mut t = Tape::new();
    let v = t.constant(logits);
    let (l, stats) = t.softmax_ce(v, labels, ignore)?;
    Ok((t.scalar(l), stats))
}

/// Per-pixel softmax over the channel axis of a `[K,H,W]` score map.
pub fn softmax_channels(scores: &Tensor) -> Result<Tensor> {
    let &[k, h, w] = scores.shape() else {
        return Err(Error::invalid("softmax", "expected [K,H,W]"));
    };
    let plane = h * w;
    let x = scores.data();
    let mut out = alloc::vec![0.0; x.len()];
    for p in 0..plane {
        let max = (0..k).map(|c| x[c * plane + p]).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for c in 0..k {
            let e = crate::math::exp(x[c * plane + p] - max);
            out[c * plane + p] = e;
            z += e;
        }
        for c in 0..k {
            out[c * plane + p] /= z;
        }
    }
    Tensor::new(scores.shape().to_vec(), out)
}
