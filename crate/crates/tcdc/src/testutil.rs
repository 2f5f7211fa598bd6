//! Finite-difference assertions shared by unit tests.

use crate::gradcheck::{central_difference, grad_of, layout};
use crate::nn::Params;
use crate::tensor::Tensor;

const H: f64 = 1e-5;

fn assert_close(what: &str, analytic: f64, numeric: f64, tol: f64) {
    let err = (analytic - numeric).abs();
    assert!(err <= tol + 1e-5 * numeric.abs(), "{what}: analytic {analytic} vs numeric {numeric}");
}

/// Checks every accumulated parameter gradient of `m` against `loss`.
pub fn check_param_grads<M: Params>(m: &mut M, mut loss: impl FnMut(&M) -> f64, tol: f64) {
    for (i, (name, len)) in layout(m).into_iter().enumerate() {
        for j in 0..len {
            let numeric = central_difference(m, i, j, H, &mut loss);
            assert_close(&format!("{name}[{j}]"), grad_of(m, i, j), numeric, tol);
        }
    }
}

/// Checks an input gradient `dx` against `loss`.
pub fn check_input_grad(x: &Tensor, dx: &Tensor, mut loss: impl FnMut(&Tensor) -> f64, tol: f64) {
    let mut probe = x.clone();
    for j in 0..x.len() {
        probe.data[j] = x.data[j] + H;
        let up = loss(&probe);
        probe.data[j] = x.data[j] - H;
        let down = loss(&probe);
        probe.data[j] = x.data[j];
        assert_close(&format!("input[{j}]"), dx.data[j], (up - down) / (2.0 * H), tol);
    }
}
