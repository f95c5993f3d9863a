//! Central finite-difference gradient checking.
//!
//! The checker runs a scalar-valued function twice per probed coordinate
//! (x+h and x-h at 64-bit precision) and compares the symmetric quotient
//! against the reverse-mode gradient. It is the independent oracle for
//! every differentiable operation in the crate; the full suite behind
//! [`run_suite`] is also what the `gradcheck` CLI subcommand executes.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) mod suite;
pub use suite::{run_suite, suite_names, SuiteOutcome};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Base finite-difference step; scaled by max(1, |x|) per coordinate.
    pub step: f64,
    /// Relative tolerance on |analytic - numeric|.
    pub rel_tol: f64,
    /// Absolute floor below which disagreement is ignored.
    pub abs_tol: f64,
    /// Probe at most this many coordinates per input (None = all);
    /// coordinates are chosen by a seeded shuffle, so runs are repeatable.
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            rel_tol: 1e-4,
            abs_tol: 1e-7,
            max_coords_per_input: None,
            seed: 0x9e3779b9,
        }
    }
}

impl GradCheckConfig {
    pub fn with_rel_tol(mut self, rel_tol: f64) -> Self {
        self.rel_tol = rel_tol;
        self
    }

    pub fn subsampled(mut self, per_input: usize) -> Self {
        self.max_coords_per_input = Some(per_input);
        self
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    /// max over verified coordinates of err / max(|g|, abs_tol/rel_tol),
    /// so `max_rel_err <= rel_tol` exactly when every coordinate passed.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub coords_checked: usize,
    /// Coordinates where the two-step central differences disagreed with
    /// each other: the quotient oracle is invalid there (a kink crossed
    /// the probe interval), so they witness nothing either way.
    pub coords_skipped: usize,
    pub passed: bool,
    /// (input index, flat coordinate, analytic, numeric) of the worst probe.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Check d(f)/d(inputs) by central differences.
///
/// `f` must be a pure function of its inputs (same inputs, same loss).
/// All inputs are treated as differentiable leaves.
pub fn gradcheck<F>(
    name: &str,
    f: F,
    inputs: &[Tensor<f64>],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|t| t.with_requires_grad(true)).collect();
    let loss = f(&leaves)?;
    if loss.numel() != 1 {
        return Err(Error::NonScalarLoss {
            shape: loss.shape().to_vec(),
        });
    }
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();

    // Graph-free copies for the perturbed evaluations.
    let base: Vec<Tensor<f64>> = inputs.iter().map(|t| t.detach()).collect();

    let mut report = GradCheckReport {
        name: name.to_string(),
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        coords_checked: 0,
        coords_skipped: 0,
        passed: true,
        worst: None,
    };
    // Effective magnitude floor: errors below abs_tol count as relative
    // error against this scale.
    let floor = cfg.abs_tol / cfg.rel_tol;

    for (i, input) in base.iter().enumerate() {
        let numel = input.numel();
        let coords: Vec<usize> = match cfg.max_coords_per_input {
            Some(k) if k < numel => {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (i as u64).wrapping_mul(0xa24b));
                let mut all: Vec<usize> = (0..numel).collect();
                all.shuffle(&mut rng);
                all.truncate(k);
                all
            }
            _ => (0..numel).collect(),
        };

        for &j in &coords {
            let x = input.data()[j];
            let h = cfg.step * x.abs().max(1.0);

            let eval = |value: f64| -> Result<f64> {
                let mut data = input.data().to_vec();
                data[j] = value;
                let mut probe: Vec<Tensor<f64>> = base.clone();
                probe[i] = Tensor::from_vec(data, input.shape())?;
                f(&probe)?.item()
            };
            let a = analytic[i][j];
            let within = |numeric: f64| {
                let err = (a - numeric).abs();
                err <= cfg.abs_tol.max(cfg.rel_tol * a.abs().max(numeric.abs()))
            };

            let mut numeric = (eval(x + h)? - eval(x - h)?) / (2.0 * h);
            if !within(numeric) {
                // Refine with half the step. If the two estimates disagree
                // with each other, a kink crossed the probe interval and
                // the symmetric quotient proves nothing at this point.
                let refined = (eval(x + h / 2.0)? - eval(x - h / 2.0)?) / h;
                let dn = (numeric - refined).abs();
                if dn > cfg.abs_tol.max(cfg.rel_tol * numeric.abs().max(refined.abs())) {
                    report.coords_skipped += 1;
                    continue;
                }
                numeric = refined;
            }

            let err = (a - numeric).abs();
            let mag = a.abs().max(numeric.abs());
            let rel = err / mag.max(floor);
            report.coords_checked += 1;
            report.max_abs_err = report.max_abs_err.max(err);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((i, j, a, numeric));
            }
            if !within(numeric) {
                report.passed = false;
            }
        }
    }
    // A handful of kink-straddling probes is expected for nets full of
    // relus; wholesale skipping would mean the check verified nothing.
    if report.coords_skipped * 5 > (report.coords_checked + report.coords_skipped).max(1) {
        report.passed = false;
    }
    Ok(report)
}
