use alloc::vec;
use alloc::vec::Vec;

use super::{GradSink, Nchw, Op, Tape, Var};
use crate::linalg::{col2im, gemm, im2col, ConvGeom};
use crate::{Error, Result};

impl Tape {
    /// 2-D cross-correlation of `input` (`[C,H,W]` or `[N,C,H,W]`) with
    /// `weight` (`[O,C,kh,kw]`) plus an optional per-output-channel bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        dilation: usize,
    ) -> Result<Var> {
        let d = Nchw::of("conv2d", self.shape(input))?;
        let &[c_out, c_in, kh, kw] = self.shape(weight) else {
            return Err(Error::invalid(
                "conv2d",
                alloc::format!("kernel must be [O,C,kh,kw], got {:?}", self.shape(weight)),
            ));
        };
        if c_in != d.c {
            return Err(Error::shape("conv2d", self.shape(input), self.shape(weight)));
        }
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(Error::shape("conv2d bias", self.shape(b), &[c_out]));
            }
        }
        let geom = ConvGeom::new(d.c, d.h, d.w, c_out, kh, kw, stride, pad, dilation)?;
        let keep_cols = self.needs_grad(weight);
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let in_len = d.c * d.plane();
        let out_len = c_out * ncols;

        let mut out = vec![0.0; d.n * out_len];
        let mut saved = Vec::new();
        let mut scratch = if geom.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; rows * ncols]
        };
        {
            let x = self.value(input);
            let w = self.value(weight);
            for n in 0..d.n {
                let xn = &x[n * in_len..(n + 1) * in_len];
                let col: &[f64] = if geom.is_pointwise() {
                    xn
                } else {
                    im2col(xn, &geom, &mut scratch);
                    &scratch
                };
                gemm(
                    c_out,
                    rows,
                    ncols,
                    w,
                    false,
                    col,
                    false,
                    0.0,
                    &mut out[n * out_len..(n + 1) * out_len],
                );
                if keep_cols {
                    saved.extend_from_slice(col);
                }
            }
            if let Some(b) = bias {
                let b = self.value(b);
                for (i, chunk) in out.chunks_mut(ncols).enumerate() {
                    let bo = b[i % c_out];
                    chunk.iter_mut().for_each(|v| *v += bo);
                }
            }
        }
        let shape = d.shape(c_out, geom.out_h, geom.out_w);
        Ok(self.push(
            shape,
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                batch: d.n,
                cols: saved,
            },
        ))
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn backward(
    sink: &mut GradSink<'_>,
    input: Var,
    weight: Var,
    bias: Option<Var>,
    geom: &ConvGeom,
    batch: usize,
    cols: &[f64],
    gout: &[f64],
) {
    let nodes = sink.nodes;
    let (rows, ncols, c_out) = (geom.col_rows(), geom.col_cols(), geom.c_out);
    let out_len = c_out * ncols;
    let in_len = geom.c_in * geom.h * geom.w;

    if let Some(gw) = sink.slot(weight) {
        for n in 0..batch {
            gemm(
                c_out,
                ncols,
                rows,
                &gout[n * out_len..(n + 1) * out_len],
                false,
                &cols[n * rows * ncols..(n + 1) * rows * ncols],
                true,
                1.0,
                gw,
            );
        }
    }
    if let Some(b) = bias {
        if let Some(gb) = sink.slot(b) {
            for (i, chunk) in gout.chunks(ncols).enumerate() {
                gb[i % c_out] += chunk.iter().sum::<f64>();
            }
        }
    }
    if sink.wants(input) {
        let w = &nodes[weight.0].value;
        let gx = sink.slot(input).expect("input wants grad");
        let mut gcol = vec![0.0; rows * ncols];
        for n in 0..batch {
            let gxn = &mut gx[n * in_len..(n + 1) * in_len];
            if geom.is_pointwise() {
                gemm(
                    rows,
                    c_out,
                    ncols,
                    w,
                    true,
                    &gout[n * out_len..(n + 1) * out_len],
                    false,
                    1.0,
                    gxn,
                );
            } else {
                gemm(
                    rows,
                    c_out,
                    ncols,
                    w,
                    true,
                    &gout[n * out_len..(n + 1) * out_len],
                    false,
                    0.0,
                    &mut gcol,
                );
                col2im(&gcol, geom, gxn);
            }
        }
    }
}
