//! Finite-difference checking of reverse-mode gradients.

use crate::graph::{Graph, Node};
use crate::matrix::Matrix;
use crate::params::{ParamId, ParamStore};

/// Central-difference step. At f64 precision this balances truncation and
/// round-off error around 1e-10 relative for O(1) gradients.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative error over all checked coordinates.
    pub max_rel_error: f64,
    /// Parameter name, coordinate, analytic and numeric values at the worst
    /// coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_error <= rel_tol
    }
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Compare reverse-mode gradients of a scalar-valued builder against central
/// finite differences over every coordinate of the given parameters.
///
/// `build` must construct the full forward pass from the store's current
/// values and return the scalar loss node; it is re-run twice per coordinate,
/// so keep the instances small.
pub fn grad_check<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    build: F,
) -> GradCheckReport
where
    F: Fn(&mut Graph, &ParamStore) -> Node,
{
    let mut g = Graph::new();
    let loss = build(&mut g, store);
    assert_eq!(g.value(loss).shape(), (1, 1), "grad_check needs a scalar loss");
    g.backward(loss);
    store.zero_grads();
    g.collect_grads(store);
    let analytic: Vec<Matrix> = ids.iter().map(|&id| store.grad(id).clone()).collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    for (k, &id) in ids.iter().enumerate() {
        let n_coords = store.value(id).len();
        for c in 0..n_coords {
            let orig = store.value(id).data()[c];

            store.value_mut(id).data_mut()[c] = orig + FD_STEP;
            let mut gp = Graph::new();
            let lp = build(&mut gp, store);
            let f_plus = gp.value(lp).get(0, 0);

            store.value_mut(id).data_mut()[c] = orig - FD_STEP;
            let mut gm = Graph::new();
            let lm = build(&mut gm, store);
            let f_minus = gm.value(lm).get(0, 0);

            store.value_mut(id).data_mut()[c] = orig;

            let numeric = (f_plus - f_minus) / (2.0 * FD_STEP);
            let a = analytic[k].data()[c];
            let err = rel_error(a, numeric);
            report.coords_checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.name(id).to_string(), c, a, numeric));
            }
        }
    }
    store.zero_grads();
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::UnaryFn;

    #[test]
    fn square_at_three() {
        let mut store = ParamStore::new();
        let x = store.insert("x", Matrix::from_vec(1, 1, vec![3.0]));
        let report = grad_check(&mut store, &[x], |g, s| {
            let xn = g.param(s, x);
            let y = g.unary(xn, UnaryFn::Square);
            g.sum_all(y)
        });
        assert!(report.passes(1e-6), "max rel {}", report.max_rel_error);
    }

    #[test]
    fn relu_away_from_kink_is_exact_to_fd_accuracy() {
        let mut store = ParamStore::new();
        let x = store.insert("x", Matrix::from_vec(1, 1, vec![1.0]));
        let report = grad_check(&mut store, &[x], |g, s| {
            let xn = g.param(s, x);
            let y = g.unary(xn, UnaryFn::Relu);
            g.sum_all(y)
        });
        // locally linear, so the central difference is exact up to round-off
        assert!(report.max_rel_error < 1e-10, "max rel {}", report.max_rel_error);
    }
}
