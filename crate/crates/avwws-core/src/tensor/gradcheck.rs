//! Finite-difference verification of recorded gradients.
//!
//! Runs in 64-bit only: central differences at eps ~1e-4 resolve relative
//! errors down to ~1e-10 there, while 32-bit differences drown in rounding.

use crate::error::Result;
use crate::runtime;
use crate::tensor::{Tape, Tensor, Var};

/// Outcome of a [`check_gradient`] run.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over all checked elements.
    pub max_rel_err: f64,
    /// Number of (input, element) pairs checked.
    pub checked: usize,
    /// Probes excluded because the two-scale difference estimates disagreed
    /// (the perturbation crossed an activation kink, so no finite-difference
    /// reference exists there). A wrong VJP still fails: its analytic value
    /// disagrees with two consistent difference estimates.
    pub skipped_nonsmooth: usize,
    pub tol: f64,
    /// Location of the worst element: (input index, flat element index,
    /// analytic, numeric).
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

// Elements where both gradients sit below this scale are compared against
// it instead of their own magnitude. Central differences only resolve
// absolute gradients down to ~|loss|·(machine eps)/h ≈ 1e-11, so
// mathematically-zero gradients (e.g. key biases under softmax shift
// invariance) read as roundoff noise; dividing that noise by anything
// smaller than 1e-5 would flag phantom errors at the 1e-5 tolerance.
const REL_FLOOR: f64 = 1e-5;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compare recorded gradients of a scalar-valued program against central
/// finite differences over every element of every input.
///
/// `program` receives a fresh tape plus one leaf per input and must return
/// the scalar output var. Probes are independent forward evaluations, so
/// they run in parallel.
pub fn check_gradient<F>(
    program: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Sync,
{
    check_gradient_sampled(program, inputs, eps, tol, usize::MAX)
}

/// [`check_gradient`] probing at most `max_probes` elements per input
/// (evenly strided), for programs too large to probe exhaustively.
pub fn check_gradient_sampled<F>(
    program: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    tol: f64,
    max_probes: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Sync,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t, true)).collect();
    let out = program(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; tape.numel(v)]))
        .collect();
    drop(tape);

    // Probe plan: (input index, element index).
    let mut probes: Vec<(usize, usize)> = Vec::new();
    for (ii, t) in inputs.iter().enumerate() {
        let n = t.numel();
        if n <= max_probes {
            probes.extend((0..n).map(|e| (ii, e)));
        } else {
            let stride = n as f64 / max_probes as f64;
            probes.extend((0..max_probes).map(|k| (ii, (k as f64 * stride) as usize)));
        }
    }

    let eval = |ii: usize, e: usize, delta: f64| -> Result<f64> {
        let mut bumped: Vec<Tensor<f64>> = inputs.to_vec();
        let mut data = bumped[ii].data().to_vec();
        data[e] += delta;
        bumped[ii] = Tensor::new(bumped[ii].shape().to_vec(), data).expect("same shape");
        let mut tape = Tape::new();
        let vars: Vec<Var> = bumped.iter().map(|t| tape.leaf(t, false)).collect();
        let out = program(&mut tape, &vars)?;
        Ok(tape.value(out)[0])
    };

    // Two difference scales per probe: the full-step estimate is the
    // reference; disagreement with the half-step estimate marks a probe
    // whose perturbation crossed an activation kink.
    let numeric: Vec<Result<(f64, f64)>> = runtime::map_collect(probes.len(), |k| {
        let (ii, e) = probes[k];
        let plus = eval(ii, e, eps)?;
        let minus = eval(ii, e, -eps)?;
        let plus_h = eval(ii, e, eps / 2.0)?;
        let minus_h = eval(ii, e, -eps / 2.0)?;
        Ok(((plus - minus) / (2.0 * eps), (plus_h - minus_h) / eps))
    });

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        skipped_nonsmooth: 0,
        tol,
        worst: None,
    };
    for (k, num) in numeric.into_iter().enumerate() {
        let (num_full, num_half) = num?;
        let (ii, e) = probes[k];
        let ana = analytic[ii][e];
        if rel_err(num_full, num_half) > tol {
            report.skipped_nonsmooth += 1;
            continue;
        }
        // Richardson extrapolation cancels the leading O(eps^2) term.
        let num_rich = (4.0 * num_half - num_full) / 3.0;
        let err = rel_err(ana, num_rich);
        report.checked += 1;
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = Some((ii, e, ana, num_rich));
        }
    }
    Ok(report)
}
