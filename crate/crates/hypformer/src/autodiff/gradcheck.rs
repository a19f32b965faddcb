//! Central finite-difference verification of reverse-mode gradients.

use ndarray::Array2;

use super::{backward, clear_tape, no_grad, Tensor};

/// Compare analytic gradients of a scalar-valued function against central
/// finite differences.
///
/// `f` is evaluated on `leaves` (values are nudged in place between calls);
/// it must be scalar-valued and differentiable away from kinks, and the
/// evaluation point should avoid kinks by a margin larger than `h`.
///
/// Returns the max over all coordinates of
/// `|analytic - central_difference| / max(1, |analytic|)`.
pub fn grad_check(f: impl Fn(&[Tensor]) -> Tensor, leaves: &[Tensor], h: f64) -> f64 {
    for leaf in leaves {
        assert!(leaf.requires_grad(), "grad_check leaves must require grad");
        leaf.zero_grad();
    }
    clear_tape();

    let loss = f(leaves);
    backward(&loss).expect("grad_check loss must be scalar with a non-empty tape");
    let analytic: Vec<Array2<f64>> = leaves
        .iter()
        .map(|l| {
            l.grad()
                .unwrap_or_else(|| Array2::zeros(l.shape()))
        })
        .collect();

    let mut max_rel = 0.0_f64;
    for (li, leaf) in leaves.iter().enumerate() {
        let (rows, cols) = leaf.shape();
        for i in 0..rows {
            for j in 0..cols {
                let orig = leaf.with_values(|v| v[(i, j)]);
                let eval_at = |x: f64| -> f64 {
                    leaf.update_values(|v| v[(i, j)] = x);
                    let y = no_grad(|| f(leaves)).item();
                    leaf.update_values(|v| v[(i, j)] = orig);
                    y
                };
                let fd = (eval_at(orig + h) - eval_at(orig - h)) / (2.0 * h);
                let a = analytic[li][(i, j)];
                let rel = (a - fd).abs() / a.abs().max(1.0);
                if rel > max_rel {
                    max_rel = rel;
                }
            }
        }
    }
    for leaf in leaves {
        leaf.zero_grad();
    }
    max_rel
}
