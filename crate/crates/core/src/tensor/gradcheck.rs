//! Central-difference gradient checking against the tape.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Outcome of a [`grad_check`] run.
#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// Worst `|analytic - numeric| / max(|analytic|, |numeric|, 1e-3)`.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub probes: usize,
    /// Coordinates skipped because the input value is not finite.
    pub skipped: usize,
}

const REL_FLOOR: f64 = 1e-3;

fn eval<T: Scalar, F>(f: &F, inputs: &[Tensor<T>]) -> Result<f64>
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::Contract("grad_check needs a scalar-valued f".into()));
    }
    Ok(v.data()[0].to_f64().unwrap())
}

/// Compares tape gradients of scalar `f` with central differences of step
/// `eps`, probing every coordinate of every input.
pub fn grad_check<T: Scalar, F>(f: F, inputs: &[Tensor<T>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    grad_check_sampled(f, inputs, eps, usize::MAX)
}

/// Like [`grad_check`] but probes at most `max_probes` evenly strided
/// coordinates per input, for graphs too large to probe exhaustively.
pub fn grad_check_sampled<T: Scalar, F>(
    f: F,
    inputs: &[Tensor<T>],
    eps: f64,
    max_probes: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport::default();
    let mut probe = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        let n = inputs[which].numel();
        let stride = n.div_ceil(max_probes.max(1)).max(1);
        for i in (0..n).step_by(stride) {
            let x0 = inputs[which].data()[i];
            if !x0.is_finite() {
                report.skipped += 1;
                continue;
            }
            probe[which].data_mut()[i] = x0 + T::lit(eps);
            let up = eval(&f, &probe)?;
            probe[which].data_mut()[i] = x0 - T::lit(eps);
            let down = eval(&f, &probe)?;
            probe[which].data_mut()[i] = x0;

            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[i].to_f64().unwrap();
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.max_abs_err = report.max_abs_err.max(abs);
            report.max_rel_err = report.max_rel_err.max(rel);
            report.probes += 1;
        }
    }
    Ok(report)
}
