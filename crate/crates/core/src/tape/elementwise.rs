use alloc::vec;
use alloc::vec::Vec;

use super::{Nchw, Op, Tape, Var};
use crate::math;
use crate::{Error, Result};

impl Tape {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).iter().map(|x| x * s).collect();
        self.push(self.shape(a).to_vec(), v, Op::Scale(a, s))
    }

    /// Adds a constant per-channel offset to a `[C,H,W]` / `[N,C,H,W]` map.
    pub fn add_channel(&mut self, a: Var, offsets: &[f64]) -> Result<Var> {
        let d = Nchw::of("add_channel", self.shape(a))?;
        if offsets.len() != d.c {
            return Err(Error::shape("add_channel", self.shape(a), &[offsets.len()]));
        }
        let plane = d.plane();
        let mut v = self.value(a).to_vec();
        for (i, x) in v.iter_mut().enumerate() {
            *x += offsets[(i / plane) % d.c];
        }
        Ok(self.push(self.shape(a).to_vec(), v, Op::AddChannel(a)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        self.push(self.shape(a).to_vec(), v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|&x| math::sigmoid(x)).collect();
        self.push(self.shape(a).to_vec(), v, Op::Sigmoid(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(Vec::new(), vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push(Vec::new(), vec![s], Op::Mean(a))
    }

    /// `Σ wᵢ·termᵢ` over scalar nodes, skipping zero weights.
    pub fn weighted_sum(&mut self, terms: &[(f64, Var)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(w, t) in terms {
            if w == 0.0 {
                continue;
            }
            if self.value(t).len() != 1 {
                return Err(Error::invalid("weighted_sum", "terms must be scalars"));
            }
            let scaled = if w == 1.0 { t } else { self.scale(t, w) };
            acc = Some(match acc {
                None => scaled,
                Some(prev) => self.add(prev, scaled)?,
            });
        }
        Ok(match acc {
            Some(v) => v,
            None => self.input(Vec::new(), vec![0.0], false),
        })
    }
}
