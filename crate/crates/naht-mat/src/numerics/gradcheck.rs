//! Finite-difference verification of analytic gradients.
//!
//! The checker perturbs randomly sampled parameter coordinates by ±h,
//! re-evaluates the loss, and compares the central difference against the
//! gradient produced by one backward pass. It is the independent oracle
//! for everything the graph computes.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::numerics::graph::GradNode;
use crate::numerics::params::ParamStore;
use crate::numerics::NumericsError;

#[derive(Clone, Debug)]
pub struct WorstCoord {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct FiniteDiffReport {
    pub n_checked: usize,
    pub max_rel_err: f64,
    pub tol: f64,
    pub worst: Option<WorstCoord>,
}

impl FiniteDiffReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Check the gradients of a scalar-valued function of the store's
/// parameters. `loss` must be deterministic given the parameter values and
/// build a fresh graph on every call.
///
/// Coordinates are sampled without replacement across all parameters; if
/// `n_coords` covers them all, every coordinate is checked.
pub fn finite_diff_check(
    store: &ParamStore,
    mut loss: impl FnMut() -> GradNode,
    n_coords: usize,
    h: f64,
    tol: f64,
    rng: &mut impl Rng,
) -> Result<FiniteDiffReport, NumericsError> {
    store.zero_grads();
    let root = loss();
    root.backward()?;
    let grads: Vec<(String, Vec<f64>)> = store
        .iter()
        .map(|(name, node)| {
            let g = node
                .grad()
                .map(|g| g.into_data())
                .unwrap_or_else(|| vec![0.0; node.numel()]);
            (name.clone(), g)
        })
        .collect();
    store.zero_grads();

    let mut coords: Vec<(usize, usize)> = Vec::new();
    for (pi, (_, g)) in grads.iter().enumerate() {
        for i in 0..g.len() {
            coords.push((pi, i));
        }
    }
    coords.shuffle(rng);
    coords.truncate(n_coords);

    let names: Vec<String> = grads.iter().map(|(n, _)| n.clone()).collect();
    let mut report = FiniteDiffReport {
        n_checked: coords.len(),
        max_rel_err: 0.0,
        tol,
        worst: None,
    };
    for (pi, idx) in coords {
        let node = store.get(&names[pi]).expect("param");
        node.nudge_value(idx, h);
        let up = loss().item();
        node.nudge_value(idx, -2.0 * h);
        let down = loss().item();
        node.nudge_value(idx, h);

        let numeric = (up - down) / (2.0 * h);
        let analytic = grads[pi].1[idx];
        let err = rel_err(analytic, numeric);
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = Some(WorstCoord {
                name: names[pi].clone(),
                index: idx,
                analytic,
                numeric,
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_function_is_exact() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::new(vec![3], vec![0.4, -1.2, 2.0]).unwrap());
        let coeffs = Tensor::new(vec![3], vec![1.5, -0.5, 2.5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let report = finite_diff_check(
            &store,
            || x.mul(&GradNode::leaf(coeffs.clone())).sum_all(),
            3,
            1e-5,
            1e-10,
            &mut rng,
        )
        .unwrap();
        assert!(report.passed(), "max err {}", report.max_rel_err);
    }

    #[test]
    fn wrong_backward_rule_fails() {
        // Value matches x^2 but the graph only sees one factor, so the
        // analytic gradient is x instead of 2x.
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(1.7));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let report = finite_diff_check(
            &store,
            || {
                let detached = GradNode::leaf(x.value());
                x.mul(&detached)
            },
            1,
            1e-5,
            1e-3,
            &mut rng,
        )
        .unwrap();
        assert!(!report.passed());
    }

    #[test]
    fn composed_nonlinear_graph_passes() {
        let mut store = ParamStore::new();
        let w = store.add(
            "w",
            Tensor::new(vec![3, 2], vec![0.3, -0.8, 0.1, 0.9, -0.4, 0.2]).unwrap(),
        );
        let b = store.add("b", Tensor::new(vec![2], vec![0.05, -0.3]).unwrap());
        let x = Tensor::new(vec![2, 3], vec![0.7, -0.2, 0.5, -1.0, 0.4, 0.3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let report = finite_diff_check(
            &store,
            || {
                let input = GradNode::leaf(x.clone());
                let y = input.matmul(&w).unwrap().add_row(&b).gelu();
                y.log_softmax_rows().mul(&y.softmax_rows()).sum_all().scale(-1.0)
            },
            8,
            1e-5,
            1e-6,
            &mut rng,
        )
        .unwrap();
        assert!(report.passed(), "max err {}", report.max_rel_err);
    }
}
