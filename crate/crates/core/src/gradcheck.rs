//! Central finite-difference checking of autodiff gradients.

use crate::tensor::{no_grad, Tensor};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    fn from_errors(op_name: &str, max_rel: f64, max_abs: f64, tolerance: f64) -> Self {
        GradCheckReport {
            op_name: op_name.to_string(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
            tolerance,
            passed: max_rel <= tolerance || max_abs <= tolerance * 1e-2,
        }
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<28} rel {:>12.3e}  abs {:>12.3e}  tol {:>8.0e}  {}",
            self.op_name,
            self.max_rel_error,
            self.max_abs_error,
            self.tolerance,
            if self.passed { "pass" } else { "FAIL" }
        )
    }
}

/// Compares the autodiff gradient of the scalar function `f` against central
/// finite differences, probing every element of every tensor in `inputs`.
///
/// `f` must read `inputs` through captured handles so that in-place probes are
/// visible; every probed tensor must be a leaf with `requires_grad` set.
/// Step size is `1e-5 * max(1, |x|)` per element; always runs in 64-bit.
pub fn finite_diff_check(
    op_name: &str,
    inputs: &[Tensor<f64>],
    f: impl Fn() -> Tensor<f64>,
    tolerance: f64,
) -> GradCheckReport {
    for t in inputs {
        assert!(
            t.is_leaf() && t.needs_grad(),
            "finite_diff_check probes must be grad-requiring leaves"
        );
        t.zero_grad();
    }

    let loss = f();
    assert_eq!(loss.numel(), 1, "finite_diff_check needs a scalar function");
    loss.backward().expect("backward on checked function");

    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    for t in inputs {
        let analytic = t.grad().unwrap_or_else(|| vec![0.0; t.numel()]);
        let base = t.to_vec();
        for j in 0..base.len() {
            let x = base[j];
            let h = 1e-5 * x.abs().max(1.0);
            let mut probe = base.clone();
            probe[j] = x + h;
            t.set_data(&probe);
            let y1 = no_grad(|| f().item());
            probe[j] = x - h;
            t.set_data(&probe);
            let y2 = no_grad(|| f().item());
            probe[j] = x;
            t.set_data(&probe);

            let numeric = (y1 - y2) / (2.0 * h);
            let abs = (analytic[j] - numeric).abs();
            let denom = analytic[j].abs().max(numeric.abs());
            let rel = if denom > 0.0 { abs / denom } else { 0.0 };
            if rel > max_rel {
                max_rel = rel;
            }
            if abs > max_abs {
                max_abs = abs;
            }
        }
    }
    GradCheckReport::from_errors(op_name, max_rel, max_abs, tolerance)
}
