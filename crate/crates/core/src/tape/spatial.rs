use alloc::vec;
use alloc::vec::Vec;

use super::{GradSink, Nchw, Op, Tape, Var};
use crate::math;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub(super) struct ResizeDims {
    maps: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    ys: Vec<Tap>,
    xs: Vec<Tap>,
}

/// Two-point interpolation along one axis.
#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

/// Half-pixel-centre sampling (`align_corners = false`), clamped at the
/// border.
fn taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (math::floor(src) as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            Tap {
                lo,
                hi,
                frac: src - lo as f64,
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub(super) struct PoolDims {
    maps: usize,
    h: usize,
    w: usize,
    rows: Vec<(usize, usize)>,
    cols: Vec<(usize, usize)>,
}

/// Adaptive pooling bin boundaries: `[⌊i·n/b⌋, ⌈(i+1)·n/b⌉)`.
fn bins(n: usize, b: usize) -> Vec<(usize, usize)> {
    (0..b).map(|i| (i * n / b, ((i + 1) * n).div_ceil(b))).collect()
}

impl Tape {
    /// Bilinear resize of each `H×W` plane to `out_h × out_w`.
    pub fn resize_bilinear(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let d = Nchw::of("resize_bilinear", self.shape(input))?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("resize_bilinear", "output size must be positive"));
        }
        let dims = ResizeDims {
            maps: d.n * d.c,
            h: d.h,
            w: d.w,
            oh: out_h,
            ow: out_w,
            ys: taps(d.h, out_h),
            xs: taps(d.w, out_w),
        };
        let x = self.value(input);
        let mut out = vec![0.0; dims.maps * out_h * out_w];
        for m in 0..dims.maps {
            let src = &x[m * d.h * d.w..(m + 1) * d.h * d.w];
            let dst = &mut out[m * out_h * out_w..(m + 1) * out_h * out_w];
            for (oy, ty) in dims.ys.iter().enumerate() {
                let (r0, r1) = (&src[ty.lo * d.w..], &src[ty.hi * d.w..]);
                for (ox, tx) in dims.xs.iter().enumerate() {
                    let top = r0[tx.lo] + (r0[tx.hi] - r0[tx.lo]) * tx.frac;
                    let bot = r1[tx.lo] + (r1[tx.hi] - r1[tx.lo]) * tx.frac;
                    dst[oy * out_w + ox] = top + (bot - top) * ty.frac;
                }
            }
        }
        let shape = d.shape(d.c, out_h, out_w);
        Ok(self.push(shape, out, Op::Resize { input, dims }))
    }

    /// Bilinear upsampling by an integer factor; factor 1 is the identity.
    pub fn upsample(&mut self, input: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::invalid("bilinear_upsample", "factor must be at least 1"));
        }
        let d = Nchw::of("bilinear_upsample", self.shape(input))?;
        self.resize_bilinear(input, d.h * factor, d.w * factor)
    }

    /// Average pooling into a `bins × bins` grid of (possibly overlapping)
    /// regions.
    pub fn adaptive_avg_pool(&mut self, input: Var, grid: usize) -> Result<Var> {
        let d = Nchw::of("adaptive_avg_pool", self.shape(input))?;
        if grid == 0 || grid > d.h || grid > d.w {
            return Err(Error::invalid(
                "adaptive_avg_pool",
                alloc::format!("cannot pool {}x{} into {grid}x{grid} bins", d.h, d.w),
            ));
        }
        let dims = PoolDims {
            maps: d.n * d.c,
            h: d.h,
            w: d.w,
            rows: bins(d.h, grid),
            cols: bins(d.w, grid),
        };
        let x = self.value(input);
        let mut out = Vec::with_capacity(dims.maps * grid * grid);
        for m in 0..dims.maps {
            let src = &x[m * d.h * d.w..(m + 1) * d.h * d.w];
            for &(r0, r1) in &dims.rows {
                for &(c0, c1) in &dims.cols {
                    let mut s = 0.0;
                    for r in r0..r1 {
                        s += src[r * d.w + c0..r * d.w + c1].iter().sum::<f64>();
                    }
                    out.push(s / ((r1 - r0) * (c1 - c0)) as f64);
                }
            }
        }
        let shape = d.shape(d.c, grid, grid);
        Ok(self.push(shape, out, Op::AvgPool { input, dims }))
    }

    /// Concatenates maps with equal batch and spatial size along channels.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs.first().ok_or(Error::Empty("concat_channels"))?;
        let d0 = Nchw::of("concat_channels", self.shape(first))?;
        let mut channels = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let d = Nchw::of("concat_channels", self.shape(v))?;
            if (d.n, d.h, d.w, d.batched) != (d0.n, d0.h, d0.w, d0.batched) {
                return Err(Error::shape("concat_channels", self.shape(first), self.shape(v)));
            }
            channels.push(d.c);
        }
        let total: usize = channels.iter().sum();
        let plane = d0.plane();
        let mut out = Vec::with_capacity(d0.n * total * plane);
        for n in 0..d0.n {
            for (&v, &c) in inputs.iter().zip(&channels) {
                out.extend_from_slice(&self.value(v)[n * c * plane..(n + 1) * c * plane]);
            }
        }
        let shape = d0.shape(total, d0.h, d0.w);
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                channels,
                batch: d0.n,
                plane,
            },
        ))
    }
}

pub(super) fn resize_backward(sink: &mut GradSink<'_>, input: Var, dims: &ResizeDims, gout: &[f64]) {
    let Some(gx) = sink.slot(input) else {
        return;
    };
    let (h, w, oh, ow) = (dims.h, dims.w, dims.oh, dims.ow);
    for m in 0..dims.maps {
        let dst = &mut gx[m * h * w..(m + 1) * h * w];
        let src = &gout[m * oh * ow..(m + 1) * oh * ow];
        for (oy, ty) in dims.ys.iter().enumerate() {
            for (ox, tx) in dims.xs.iter().enumerate() {
                let g = src[oy * ow + ox];
                let top = g * (1.0 - ty.frac);
                let bot = g * ty.frac;
                dst[ty.lo * w + tx.lo] += top * (1.0 - tx.frac);
                dst[ty.lo * w + tx.hi] += top * tx.frac;
                dst[ty.hi * w + tx.lo] += bot * (1.0 - tx.frac);
                dst[ty.hi * w + tx.hi] += bot * tx.frac;
            }
        }
    }
}

pub(super) fn pool_backward(sink: &mut GradSink<'_>, input: Var, dims: &PoolDims, gout: &[f64]) {
    let Some(gx) = sink.slot(input) else {
        return;
    };
    let cells = dims.rows.len() * dims.cols.len();
    for m in 0..dims.maps {
        let dst = &mut gx[m * dims.h * dims.w..(m + 1) * dims.h * dims.w];
        let mut k = m * cells;
        for &(r0, r1) in &dims.rows {
            for &(c0, c1) in &dims.cols {
                let g = gout[k] / ((r1 - r0) * (c1 - c0)) as f64;
                for r in r0..r1 {
                    dst[r * dims.w + c0..r * dims.w + c1].iter_mut().for_each(|v| *v += g);
                }
                k += 1;
            }
        }
    }
}

pub(super) fn concat_backward(
    sink: &mut GradSink<'_>,
    inputs: &[Var],
    channels: &[usize],
    batch: usize,
    plane: usize,
    gout: &[f64],
) {
    let total: usize = channels.iter().sum();
    let mut offset = 0;
    for (&v, &c) in inputs.iter().zip(channels) {
        if let Some(g) = sink.slot(v) {
            for n in 0..batch {
                let src = &gout[(n * total + offset) * plane..(n * total + offset + c) * plane];
                g[n * c * plane..(n + 1) * c * plane]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(a, b)| *a += b);
            }
        }
        offset += c;
    }
}
