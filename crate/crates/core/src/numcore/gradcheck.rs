//! Central-difference gradient checking for tape-built functions.

use crate::error::{Error, Result};
use crate::numcore::{Tape, Tensor, Var};

/// Which coordinates of each input to probe.
#[derive(Debug, Clone, Copy)]
pub enum Probe {
    All,
    /// Probe at most this many evenly spaced coordinates per input.
    Strided(usize),
}

/// Largest relative discrepancy between tape gradients and
/// `(f(x+ε) − f(x−ε)) / 2ε`, over the probed coordinates of every input.
///
/// Relative error is `|a − n| / max(|a|, |n|, floor)`; the floor keeps
/// coordinates with vanishing gradient from dividing by zero.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64, probe: Probe) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    const FLOOR: f64 = 1e-6;
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.input(t, false)).collect();
        let out = f(&mut tape, &vars)?;
        let y = tape.scalar(out);
        if !y.is_finite() {
            return Err(Error::NonFinite("grad_check objective".into()));
        }
        Ok(y)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t, true)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let n = input.len();
        let zeros = vec![0.0; n];
        let analytic = grads.get(vars[k]).unwrap_or(&zeros);
        let stride = match probe {
            Probe::All => 1,
            Probe::Strided(m) => n.div_ceil(m.max(1)).max(1),
        };
        for i in (0..n).step_by(stride) {
            let orig = input.data()[i];
            work[k].data_mut()[i] = orig + eps;
            let up = eval(&work)?;
            work[k].data_mut()[i] = orig - eps;
            let down = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
