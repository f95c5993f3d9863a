//! The registry of finite-difference checks behind `gradcheck`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{gradcheck, GradCheckConfig, GradCheckReport};
use crate::error::Result;
use crate::tensor::Tensor;

/// One suite entry's outcome, printable as a PASS/FAIL line.
#[derive(Clone, Debug)]
pub struct SuiteOutcome {
    pub report: GradCheckReport,
}

impl std::fmt::Display for SuiteOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let r = &self.report;
        write!(
            f,
            "{} {:<28} max_rel_err={:.3e} coords={}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.max_rel_err,
            r.coords_checked
        )?;
        if r.coords_skipped > 0 {
            write!(f, " (skipped {} nonsmooth)", r.coords_skipped)?;
        }
        Ok(())
    }
}

fn rnd(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| lo + (hi - lo) * rng.random::<f64>())
}

/// Uniform values bounded away from zero, for ops with a kink there.
fn rnd_offset(rng: &mut ChaCha8Rng, shape: &[usize], min_abs: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v = rng.random::<f64>() * 2.0 - 1.0;
        v.signum() * (v.abs() + min_abs)
    })
}

pub(crate) type Check = (
    &'static str,
    f64, // relative tolerance
    fn(&mut ChaCha8Rng, &GradCheckConfig) -> Result<GradCheckReport>,
);

fn tensor_checks() -> Vec<Check> {
    vec![
        ("elementwise_mul", 1e-4, |rng, cfg| {
            let a = rnd(rng, &[3, 4], -1.0, 1.0);
            let b = rnd(rng, &[3, 4], -1.0, 1.0);
            gradcheck(
                "elementwise_mul",
                |ins| ins[0].mul(&ins[1])?.sum(),
                &[a, b],
                cfg,
            )
        }),
        ("elementwise_div", 1e-4, |rng, cfg| {
            let a = rnd(rng, &[3, 4], -1.0, 1.0);
            let b = rnd_offset(rng, &[3, 4], 0.5);
            gradcheck(
                "elementwise_div",
                |ins| ins[0].div(&ins[1])?.sum(),
                &[a, b],
                cfg,
            )
        }),
        ("broadcast_mul", 1e-4, |rng, cfg| {
            let a = rnd(rng, &[1, 1, 4], -1.0, 1.0);
            let b = rnd(rng, &[3, 2, 4], -1.0, 1.0);
            gradcheck(
                "broadcast_mul",
                |ins| ins[0].mul(&ins[1])?.mul(&ins[1])?.sum(),
                &[a, b],
                cfg,
            )
        }),
        ("matmul", 1e-4, |rng, cfg| {
            let a = rnd(rng, &[4, 5], -1.0, 1.0);
            let b = rnd(rng, &[5, 3], -1.0, 1.0);
            gradcheck(
                "matmul",
                |ins| {
                    let y = ins[0].matmul(&ins[1])?;
                    y.mul(&y)?.sum()
                },
                &[a, b],
                cfg,
            )
        }),
        ("conv2d", 1e-4, |rng, cfg| {
            let x = rnd(rng, &[6, 6, 2], -1.0, 1.0);
            let w = rnd(rng, &[3, 3, 2, 3], -1.0, 1.0);
            let b = rnd(rng, &[3], -0.5, 0.5);
            gradcheck(
                "conv2d",
                |ins| {
                    let y = ins[0].conv2d(&ins[1], Some(&ins[2]), 1, 1)?;
                    y.mul(&y)?.sum()
                },
                &[x, w, b],
                cfg,
            )
        }),
        ("conv2d_strided", 1e-4, |rng, cfg| {
            let x = rnd(rng, &[8, 8, 2], -1.0, 1.0);
            let w = rnd(rng, &[4, 4, 2, 3], -1.0, 1.0);
            let b = rnd(rng, &[3], -0.5, 0.5);
            gradcheck(
                "conv2d_strided",
                |ins| {
                    let y = ins[0].conv2d(&ins[1], Some(&ins[2]), 2, 1)?;
                    y.mul(&y)?.sum()
                },
                &[x, w, b],
                cfg,
            )
        }),
        ("conv_transpose2d", 1e-4, |rng, cfg| {
            let x = rnd(rng, &[4, 4, 3], -1.0, 1.0);
            let w = rnd(rng, &[4, 4, 2, 3], -1.0, 1.0);
            let b = rnd(rng, &[2], -0.5, 0.5);
            gradcheck(
                "conv_transpose2d",
                |ins| {
                    let y = ins[0].conv_transpose2d(&ins[1], Some(&ins[2]), 2, 1)?;
                    y.mul(&y)?.sum()
                },
                &[x, w, b],
                cfg,
            )
        }),
        ("avgpool2d", 1e-4, |rng, cfg| {
            let x = rnd(rng, &[6, 6, 2], -1.0, 1.0);
            gradcheck(
                "avgpool2d",
                |ins| {
                    let y = ins[0].avgpool2d(2)?;
                    y.mul(&y)?.sum()
                },
                &[x],
                cfg,
            )
        }),
        ("global_avg_pool", 1e-4, |rng, cfg| {
            let x = rnd(rng, &[5, 4, 3], -1.0, 1.0);
            gradcheck(
                "global_avg_pool",
                |ins| {
                    let y = ins[0].global_avg_pool()?;
                    y.mul(&y)?.sum()
                },
                &[x],
                cfg,
            )
        }),
        ("global_max_pool", 1e-4, |rng, cfg| {
            // Spread values far enough apart that the argmax is unique and
            // stays put under the probe step.
            let mut vals: Vec<f64> = (0..4 * 4 * 2).map(|i| i as f64 * 0.1).collect();
            let mut rng2 = ChaCha8Rng::seed_from_u64(rng.random());
            use rand::seq::SliceRandom;
            vals.shuffle(&mut rng2);
            let x = Tensor::from_vec(vals, &[4, 4, 2]).unwrap();
            gradcheck(
                "global_max_pool",
                |ins| {
                    let y = ins[0].global_max_pool()?;
                    y.mul(&y)?.sum()
                },
                &[x],
                cfg,
            )
        }),
        ("upsample2d", 1e-4, |rng, cfg| {
            let x = rnd(rng, &[3, 4, 2], -1.0, 1.0);
            gradcheck(
                "upsample2d",
                |ins| {
                    let y = ins[0].upsample2d(2)?;
                    y.mul(&y)?.sum()
                },
                &[x],
                cfg,
            )
        }),
        ("softmax", 1e-4, |rng, cfg| {
            let x = rnd(rng, &[3, 5], -2.0, 2.0);
            let w = rnd(rng, &[3, 5], -1.0, 1.0);
            gradcheck(
                "softmax",
                |ins| ins[0].softmax(1)?.mul(&ins[1])?.sum(),
                &[x, w],
                cfg,
            )
        }),
        ("layernorm", 1e-4, |rng, cfg| {
            let x = rnd(rng, &[3, 6], -2.0, 2.0);
            let gamma = rnd(rng, &[6], 0.5, 1.5);
            let beta = rnd(rng, &[6], -0.5, 0.5);
            let w = rnd(rng, &[3, 6], -1.0, 1.0);
            gradcheck(
                "layernorm",
                |ins| ins[0].layernorm(&ins[1], &ins[2], 1)?.mul(&ins[3])?.sum(),
                &[x, gamma, beta, w],
                cfg,
            )
        }),
        ("gelu", 1e-4, |rng, cfg| {
            let x = rnd(rng, &[4, 4], -2.0, 2.0);
            gradcheck(
                "gelu",
                |ins| {
                    let y = ins[0].gelu();
                    y.mul(&y)?.sum()
                },
                &[x],
                cfg,
            )
        }),
        ("relu", 1e-4, |rng, cfg| {
            let x = rnd_offset(rng, &[4, 4], 0.05);
            gradcheck(
                "relu",
                |ins| {
                    let y = ins[0].relu();
                    y.mul(&y)?.sum()
                },
                &[x],
                cfg,
            )
        }),
        ("sigmoid", 1e-4, |rng, cfg| {
            let x = rnd(rng, &[4, 4], -2.0, 2.0);
            gradcheck(
                "sigmoid",
                |ins| {
                    let y = ins[0].sigmoid();
                    y.mul(&y)?.sum()
                },
                &[x],
                cfg,
            )
        }),
        ("sqrt", 1e-4, |rng, cfg| {
            let x = rnd(rng, &[4, 4], 0.5, 2.0);
            gradcheck(
                "sqrt",
                |ins| {
                    let y = ins[0].sqrt_elem()?;
                    y.mul(&y)?.sum()
                },
                &[x],
                cfg,
            )
        }),
        ("concat_narrow", 1e-4, |rng, cfg| {
            let a = rnd(rng, &[2, 3, 2], -1.0, 1.0);
            let b = rnd(rng, &[2, 3, 4], -1.0, 1.0);
            gradcheck(
                "concat_narrow",
                |ins| {
                    let cat = Tensor::concat(&[ins[0].clone(), ins[1].clone()], 2)?;
                    let band = cat.narrow(2, 1, 3)?;
                    band.mul(&band)?.sum()
                },
                &[a, b],
                cfg,
            )
        }),
        ("spatial_diff", 1e-4, |rng, cfg| {
            let x = rnd(rng, &[4, 5, 2], -1.0, 1.0);
            gradcheck(
                "spatial_diff",
                |ins| {
                    let dx = ins[0].spatial_diff_x()?;
                    let dy = ins[0].spatial_diff_y()?;
                    dx.mul(&dx)?.sum()?.add(&dy.mul(&dy)?.sum()?)
                },
                &[x],
                cfg,
            )
        }),
        ("conv_ln_gelu_pipeline", 1e-4, |rng, cfg| {
            // Composite from the tensor contract: conv -> layernorm -> gelu -> sum.
            let x = rnd(rng, &[5, 5, 2], -1.0, 1.0);
            let w = rnd(rng, &[3, 3, 2, 4], -1.0, 1.0);
            let b = rnd(rng, &[4], -0.5, 0.5);
            let gamma = rnd(rng, &[4], 0.5, 1.5);
            let beta = rnd(rng, &[4], -0.5, 0.5);
            gradcheck(
                "conv_ln_gelu_pipeline",
                |ins| {
                    let y = ins[0].conv2d(&ins[1], Some(&ins[2]), 1, 1)?;
                    let y = y.layernorm(&ins[3], &ins[4], 2)?;
                    y.gelu().sum()
                },
                &[x, w, b, gamma, beta],
                cfg,
            )
        }),
    ]
}

/// All registered check names, in execution order.
pub fn suite_names() -> Vec<&'static str> {
    all_checks().into_iter().map(|(n, _, _)| n).collect()
}

fn all_checks() -> Vec<Check> {
    let mut checks = tensor_checks();
    checks.extend(crate::vit::gradchecks());
    checks.extend(crate::blocks::gradchecks());
    checks.extend(crate::cfsm::gradchecks());
    checks.extend(crate::net::gradchecks());
    checks.extend(crate::loss::gradchecks());
    checks
}

/// Run the whole finite-difference suite (optionally filtered by
/// substring match on the check name). Deterministic for a fixed seed.
pub fn run_suite(filter: Option<&str>, seed: u64) -> Result<Vec<SuiteOutcome>> {
    let mut out = Vec::new();
    for (name, rel_tol, f) in all_checks() {
        if let Some(pat) = filter {
            if !name.contains(pat) {
                continue;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fxhash(name));
        let cfg = GradCheckConfig::default().with_rel_tol(rel_tol);
        let report = f(&mut rng, &cfg)?;
        out.push(SuiteOutcome { report });
    }
    Ok(out)
}

fn fxhash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_op_checks_all_pass() {
        let outcomes = run_suite(Some("conv"), 7).unwrap();
        assert!(!outcomes.is_empty());
        for o in outcomes {
            assert!(o.report.passed, "{o}");
        }
    }
}
