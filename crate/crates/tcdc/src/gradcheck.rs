//! Central finite-difference checks of analytic gradients.

use crate::nn::{Param, Params};

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Mutable access to element `j` of the `i`-th parameter in visit order.
pub fn with_element<M: Params + ?Sized, R>(m: &mut M, i: usize, j: usize, f: impl FnOnce(&mut f64) -> R) -> R {
    let mut f = Some(f);
    let mut out = None;
    let mut k = 0;
    m.visit_mut(&mut |p: &mut Param| {
        if k == i {
            out = Some((f.take().expect("visited once"))(&mut p.value[j]));
        }
        k += 1;
    });
    out.expect("parameter index in range")
}

/// Names and lengths of every parameter, in visit order.
pub fn layout<M: Params + ?Sized>(m: &M) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    m.visit(&mut |p| out.push((p.name.clone(), p.len())));
    out
}

/// Analytic gradient of element `j` of parameter `i`.
pub fn grad_of<M: Params + ?Sized>(m: &M, i: usize, j: usize) -> f64 {
    let mut k = 0;
    let mut g = f64::NAN;
    m.visit(&mut |p| {
        if k == i {
            g = p.grad[j];
        }
        k += 1;
    });
    g
}

/// `(f(θ + h) - f(θ - h)) / 2h` for element `j` of parameter `i`, restoring θ afterwards.
pub fn central_difference<M: Params + ?Sized>(
    m: &mut M,
    i: usize,
    j: usize,
    h: f64,
    mut loss: impl FnMut(&M) -> f64,
) -> f64 {
    let orig = with_element(m, i, j, |v| {
        let o = *v;
        *v = o + h;
        o
    });
    let up = loss(m);
    with_element(m, i, j, |v| *v = orig - h);
    let down = loss(m);
    with_element(m, i, j, |v| *v = orig);
    (up - down) / (2.0 * h)
}
