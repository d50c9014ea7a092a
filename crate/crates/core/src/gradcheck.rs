//! Analytic-vs-numeric gradient verification.
//!
//! Each input coordinate is nudged by `±step` and the central difference is
//! compared with the tape gradient. The relative error of one coordinate is
//! `|analytic - numeric| / max(|analytic|, |numeric|, floor)`; `floor` keeps
//! near-zero gradients from turning rounding noise into huge ratios.

use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tol: f64,
    pub floor: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: 1e-5,
            tol: 1e-5,
            floor: 1e-3,
        }
    }
}

impl GradcheckOptions {
    pub fn with_tol(tol: f64) -> Self {
        GradcheckOptions {
            tol,
            ..Self::default()
        }
    }
}

/// Where the largest error (or the first non-finite value) was found.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradLocation {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub tol: f64,
    pub checked: usize,
    /// Coordinates skipped because a non-differentiable point (ReLU or max
    /// switch) lies inside the probe interval.
    pub skipped: usize,
    pub worst: Option<GradLocation>,
    pub failure: Option<String>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failure.is_none() && self.max_rel_err < self.tol
    }
}

/// Checks `f` (which must return a one-element tensor) at `inputs`.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], opts: GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| tape.constant(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        if tape.value(out).numel() != 1 {
            return Err(dim_err!("gradcheck needs a scalar function"));
        }
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.param(v.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let f0 = tape.value(out).item();
    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        tol: opts.tol,
        checked: 0,
        skipped: 0,
        worst: None,
        failure: None,
    };
    if !f0.is_finite() {
        report.failure = Some(format!("non-finite function value {f0}"));
        return Ok(report);
    }
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| {
            tape.grad(v)
                .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()))
        })
        .collect();

    let h = opts.step;
    let mut probe = inputs.to_vec();
    for (input, grad) in analytic.iter().enumerate() {
        for index in 0..inputs[input].numel() {
            let a = grad.data()[index];
            let orig = inputs[input].data()[index];
            probe[input].data_mut()[index] = orig + h;
            let fp = eval(&probe)?;
            probe[input].data_mut()[index] = orig - h;
            let fm = eval(&probe)?;
            probe[input].data_mut()[index] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            if !a.is_finite() || !numeric.is_finite() {
                report.failure = Some(format!(
                    "non-finite gradient at input {input} index {index}: analytic {a}, numeric {numeric}"
                ));
                report.worst = Some(GradLocation {
                    input,
                    index,
                    analytic: a,
                    numeric,
                });
                return Ok(report);
            }
            let scale = a.abs().max(numeric.abs()).max(opts.floor);
            let err = (a - numeric).abs() / scale;
            if err >= opts.tol {
                let far_gap = ((fp - f0) / h - (f0 - fm) / h).abs();
                if far_gap >= (a - numeric).abs()
                    && crosses_kink(
                        &eval,
                        &mut probe,
                        (input, index),
                        orig,
                        h,
                        f0,
                        far_gap,
                        a,
                        scale,
                        opts.tol,
                    )?
                {
                    report.skipped += 1;
                    continue;
                }
            }
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some(GradLocation {
                    input,
                    index,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

/// Distinguishes a kink inside the probe interval from a wrong gradient.
///
/// Across a kink the one-sided slopes differ by the derivative jump, and
/// that gap does not shrink with the step when the kink sits at the probe
/// point. When the kink sits elsewhere in the interval, a much smaller probe
/// no longer crosses it and recovers the analytic value. A smooth function
/// with a wrong analytic gradient satisfies neither.
#[allow(clippy::too_many_arguments)]
fn crosses_kink<E>(
    eval: &E,
    probe: &mut [Tensor],
    (input, index): (usize, usize),
    orig: f64,
    h: f64,
    f0: f64,
    far_gap: f64,
    analytic: f64,
    scale: f64,
    tol: f64,
) -> Result<bool>
where
    E: Fn(&[Tensor]) -> Result<f64>,
{
    let small = h * 1e-2;
    probe[input].data_mut()[index] = orig + small;
    let fp = eval(probe)?;
    probe[input].data_mut()[index] = orig - small;
    let fm = eval(probe)?;
    probe[input].data_mut()[index] = orig;
    let near_gap = ((fp - f0) / small - (f0 - fm) / small).abs();
    if near_gap > 0.5 * far_gap {
        return Ok(true);
    }
    let near_central = (fp - fm) / (2.0 * small);
    Ok((analytic - near_central).abs() / scale < tol)
}
