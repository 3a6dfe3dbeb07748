//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward pass. Nodes are only ever appended after their
//! inputs, so walking the tape from the end visits each node once in reverse
//! topological order.
//!
//! Leaves are registered from [`Tensor`]s; a leaf participates in
//! differentiation iff the tensor has `requires_grad` set. [`Tape::backward`]
//! returns a [`Grads`] table that can be folded into the original tensors with
//! [`Grads::accumulate_into`]; repeated accumulation sums, so objectives with
//! several terms compose by running backward once per term or once on their
//! sum.

mod conv;
mod elementwise;
mod loss;
mod norm;
mod spatial;

use alloc::vec;
use alloc::vec::Vec;

use crate::linalg::ConvGeom;
use crate::{Error, Result, Tensor};

pub use loss::{CeStats, LogLossStats};
pub use norm::{BatchStats, BnMode, BN_EPS, BN_MOMENTUM};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddChannel(Var),
    Relu(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        batch: usize,
        cols: Vec<f64>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        channels: usize,
        plane: usize,
        batch: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Resize {
        input: Var,
        dims: spatial::ResizeDims,
    },
    AvgPool {
        input: Var,
        dims: spatial::PoolDims,
    },
    Concat {
        inputs: Vec<Var>,
        channels: Vec<usize>,
        batch: usize,
        plane: usize,
    },
    Gram {
        input: Var,
        batch: usize,
        channels: usize,
        plane: usize,
    },
    MeanSqDiff(Var, Var),
    SoftmaxCe {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<u8>,
        ignore: u8,
        classes: usize,
        plane: usize,
        valid: usize,
    },
    LogLoss {
        input: Var,
        positive: bool,
        clamped: Vec<bool>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MeanSqDiff(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::AddChannel(a) | Op::Relu(a) | Op::Sigmoid(a) | Op::Sum(a) | Op::Mean(a) => vec![*a],
            Op::Conv2d {
                input, weight, bias, ..
            } => {
                let mut v = vec![*input, *weight];
                v.extend(*bias);
                v
            }
            Op::BatchNorm { input, gamma, beta, .. } => vec![*input, *gamma, *beta],
            Op::Resize { input, .. }
            | Op::AvgPool { input, .. }
            | Op::Gram { input, .. }
            | Op::LogLoss { input, .. } => vec![*input],
            Op::SoftmaxCe { logits, .. } => vec![*logits],
            Op::Concat { inputs, .. } => inputs.clone(),
        }
    }
}

/// A record of executed differentiable operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` (if any reached it) onto `t`'s gradient.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        match self.get(v) {
            Some(g) => t.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a tensor; it is differentiated iff it requires grad.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.input(t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    /// Registers a tensor as a constant regardless of its grad flag.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.input(t.shape().to_vec(), t.data().to_vec(), false)
    }

    pub fn input(&mut self, shape: Vec<usize>, value: Vec<f64>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Copies a node's value out as a tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape nodes are well formed")
    }

    /// The value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let n = &self.nodes[v.0];
        assert_eq!(n.value.len(), 1, "node is not a scalar");
        n.value[0]
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        let needs_grad = op.inputs().iter().any(|i| self.nodes[i.0].needs_grad);
        // Saved activations are dead weight when nothing upstream wants grads.
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse-mode pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::invalid(
                "backward",
                alloc::format!("loss must be a scalar, got shape {:?}", root.shape),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Ok(Grads { grads })
    }

    fn backward_node(&self, idx: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut sink = GradSink {
            nodes: &self.nodes,
            grads,
        };
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                sink.add(*a, gout);
                sink.add(*b, gout);
            }
            Op::Sub(a, b) => {
                sink.add(*a, gout);
                if let Some(g) = sink.slot(*b) {
                    g.iter_mut().zip(gout).for_each(|(g, d)| *g -= d);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if let Some(g) = sink.slot(*a) {
                    for ((g, d), y) in g.iter_mut().zip(gout).zip(vb) {
                        *g += d * y;
                    }
                }
                if let Some(g) = sink.slot(*b) {
                    for ((g, d), x) in g.iter_mut().zip(gout).zip(va) {
                        *g += d * x;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(g) = sink.slot(*a) {
                    g.iter_mut().zip(gout).for_each(|(g, d)| *g += s * d);
                }
            }
            Op::AddChannel(a) => sink.add(*a, gout),
            Op::Relu(a) => {
                let x = &self.nodes[a.0].value;
                if let Some(g) = sink.slot(*a) {
                    for ((g, d), x) in g.iter_mut().zip(gout).zip(x) {
                        if *x > 0.0 {
                            *g += d;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[idx].value;
                if let Some(g) = sink.slot(*a) {
                    for ((g, d), y) in g.iter_mut().zip(gout).zip(y) {
                        *g += d * y * (1.0 - y);
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(g) = sink.slot(*a) {
                    g.iter_mut().for_each(|g| *g += gout[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(g) = sink.slot(*a) {
                    let s = gout[0] / g.len() as f64;
                    g.iter_mut().for_each(|g| *g += s);
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                batch,
                cols,
            } => conv::backward(&mut sink, *input, *weight, *bias, geom, *batch, cols, gout),
            Op::BatchNorm {
                input,
                gamma,
                beta,
                channels,
                plane,
                batch,
                xhat,
                inv_std,
                train,
            } => norm::backward(
                &mut sink,
                norm::BnSaved {
                    input: *input,
                    gamma: *gamma,
                    beta: *beta,
                    channels: *channels,
                    plane: *plane,
                    batch: *batch,
                    xhat,
                    inv_std,
                    train: *train,
                },
                gout,
            ),
            Op::Resize { input, dims } => spatial::resize_backward(&mut sink, *input, dims, gout),
            Op::AvgPool { input, dims } => spatial::pool_backward(&mut sink, *input, dims, gout),
            Op::Concat {
                inputs,
                channels,
                batch,
                plane,
            } => spatial::concat_backward(&mut sink, inputs, channels, *batch, *plane, gout),
            Op::Gram {
                input,
                batch,
                channels,
                plane,
            } => loss::gram_backward(&mut sink, *input, *batch, *channels, *plane, gout),
            Op::MeanSqDiff(a, b) => loss::msd_backward(&mut sink, *a, *b, gout),
            Op::SoftmaxCe {
                logits,
                probs,
                labels,
                ignore,
                classes,
                plane,
                valid,
            } => loss::ce_backward(
                &mut sink, *logits, probs, labels, *ignore, *classes, *plane, *valid, gout,
            ),
            Op::LogLoss {
                input,
                positive,
                clamped,
            } => loss::log_loss_backward(&mut sink, *input, *positive, clamped, gout),
        }
    }
}

/// Write access to input gradients while reading node values.
struct GradSink<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
}

impl GradSink<'_> {
    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient buffer of `v`, allocated on first touch; `None` when `v` is
    /// not differentiated.
    fn slot(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn add(&mut self, v: Var, g: &[f64]) {
        if let Some(slot) = self.slot(v) {
            slot.iter_mut().zip(g).for_each(|(s, g)| *s += g);
        }
    }
}

/// Interprets a rank-3 `[C,H,W]` or rank-4 `[N,C,H,W]` shape.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Nchw {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub batched: bool,
}

impl Nchw {
    pub fn of(op: &'static str, shape: &[usize]) -> Result<Self> {
        match *shape {
            [c, h, w] => Ok(Nchw {
                n: 1,
                c,
                h,
                w,
                batched: false,
            }),
            [n, c, h, w] => Ok(Nchw {
                n,
                c,
                h,
                w,
                batched: true,
            }),
            _ => Err(Error::invalid(
                op,
                alloc::format!("expected [C,H,W] or [N,C,H,W], got {shape:?}"),
            )),
        }
    }

    pub fn shape(&self, c: usize, h: usize, w: usize) -> Vec<usize> {
        if self.batched {
            vec![self.n, c, h, w]
        } else {
            vec![c, h, w]
        }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}
