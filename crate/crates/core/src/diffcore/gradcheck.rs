//! Central finite-difference checks of tape gradients.

use super::network::{Bound, Network};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{invalid, Result};

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are compared in absolute terms instead.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(input, coordinate)` with the largest error.
    pub worst: Option<(usize, usize)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.scalar(out))
}

/// Compare autodiff gradients of the scalar `f(inputs)` against central
/// differences. At most `per_input` evenly spaced coordinates are probed in
/// each input (`None` probes all of them).
pub fn check_function<F>(
    f: F,
    inputs: &[Tensor],
    eps: f64,
    per_input: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    let mut probe = inputs.to_vec();
    for (k, (&v, input)) in vars.iter().zip(inputs).enumerate() {
        let n = input.len();
        let stride = match per_input {
            Some(m) if m > 0 && m < n => n.div_ceil(m),
            _ => 1,
        };
        for j in (0..n).step_by(stride) {
            let analytic = grads.get(v).map_or(0.0, |g| g.data()[j]);
            let orig = input.data()[j];
            probe[k].data_mut()[j] = orig + eps;
            let plus = eval(&f, &probe)?;
            probe[k].data_mut()[j] = orig - eps;
            let minus = eval(&f, &probe)?;
            probe[k].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((k, j));
            }
        }
    }
    Ok(report)
}

/// Check d(cross-entropy)/d(parameters) of `net` on one labeled batch.
pub fn grad_check(
    net: &Network,
    input: &Tensor,
    labels: &[usize],
    eps: f64,
) -> Result<GradCheckReport> {
    grad_check_sampled(net, input, labels, eps, None)
}

pub fn grad_check_sampled(
    net: &Network,
    input: &Tensor,
    labels: &[usize],
    eps: f64,
    per_param: Option<usize>,
) -> Result<GradCheckReport> {
    if !(1e-5..=1e-3).contains(&eps) {
        return Err(invalid(format!("eps {eps} outside [1e-5, 1e-3]")));
    }
    let f = |tape: &mut Tape, vars: &[Var]| {
        let bound = Bound::from_vars(vars.to_vec());
        let x = tape.leaf(input.clone());
        let out = net.forward(tape, &bound, x)?;
        tape.sparse_cross_entropy(out.output, labels)
    };
    check_function(f, net.params(), eps, per_param)
}
