//! Central-difference verification of reverse-mode gradients.

use crate::{Error, Result, Tape, Tensor, Var};

/// Compares the tape gradient of a scalar function against central
/// differences `(f(x+h·e) − f(x−h·e)) / 2h`, coordinate by coordinate.
///
/// Returns the maximum over coordinates of `|a − b| / max(1, |a|, |b|)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&h) {
        return Err(Error::invalid("grad_check", "step must lie in [1e-7, 1e-4]"));
    }
    let eval = |point: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(point);
        let out = f(&mut tape, v)?;
        Ok(tape.scalar(out))
    };

    let mut tape = Tape::new();
    let xv = tape.leaf(&x.clone().with_requires_grad(true));
    let out = f(&mut tape, xv)?;
    let grads = tape.backward(out)?;
    let zeros = alloc::vec![0.0; x.numel()];
    let analytic = grads.get(xv).unwrap_or(&zeros);

    let mut probe = x.clone();
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}
