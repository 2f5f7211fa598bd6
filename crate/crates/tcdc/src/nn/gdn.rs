use super::{Need, Param};
use crate::impl_params;
use crate::tensor::{gemm, Tensor};

const BETA_PEDESTAL: f64 = 1e-6;

/// Generalized divisive normalization, or its inverse.
///
/// `y_i = x_i · (β_i + Σ_j γ_ij x_j²)^e` with `e = -½` (GDN) or `e = ½` (IGDN).
/// Stored as `β = b² + 1e-6` and `γ = g²`, keeping both non-negative.
#[derive(Debug, Clone, PartialEq)]
pub struct Gdn {
    pub b: Param,
    pub g: Param,
    pub channels: usize,
    pub inverse: bool,
}

impl_params!(Gdn; b, g);

impl Gdn {
    pub fn new(name: &str, channels: usize, inverse: bool) -> Self {
        let b = Param::new(format!("{name}.beta"), &[channels], vec![1.0; channels]);
        let mut g = vec![1e-3; channels * channels];
        for i in 0..channels {
            g[i * channels + i] = 0.1f64.sqrt();
        }
        let g = Param::new(format!("{name}.gamma"), &[channels, channels], g);
        Self { b, g, channels, inverse }
    }

    fn exponent(&self) -> f64 {
        if self.inverse {
            0.5
        } else {
            -0.5
        }
    }

    fn beta(&self) -> Vec<f64> {
        self.b.value.iter().map(|b| b * b + BETA_PEDESTAL).collect()
    }

    fn gamma(&self) -> Vec<f64> {
        self.g.value.iter().map(|g| g * g).collect()
    }

    /// Returns `x²` and the normalizer `n = β + γ·x²` for one batch item.
    fn norm(&self, x: &[f64], plane: usize, beta: &[f64], gamma: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let c = self.channels;
        let sq: Vec<f64> = x.iter().map(|v| v * v).collect();
        let mut n = vec![0.0; c * plane];
        for (row, &b) in n.chunks_exact_mut(plane).zip(beta) {
            row.fill(b);
        }
        gemm(c, c, plane, gamma, false, &sq, false, 1.0, &mut n);
        (sq, n)
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let (beta, gamma) = (self.beta(), self.gamma());
        let e = self.exponent();
        let mut out = Tensor::zeros(x.shape());
        for b in 0..x.batch() {
            let xi = x.item(b);
            let (_, n) = self.norm(xi, x.plane(), &beta, &gamma);
            let o = out.item_mut(b);
            for ((o, &v), &n) in o.iter_mut().zip(xi).zip(&n) {
                *o = v * scale(n, e);
            }
        }
        out
    }

    pub fn backward(&mut self, x: &Tensor, dy: &Tensor, need: Need) -> Option<Tensor> {
        let c = self.channels;
        let plane = x.plane();
        let (beta, gamma) = (self.beta(), self.gamma());
        let e = self.exponent();
        let mut dx = need.input.then(|| Tensor::zeros(x.shape()));
        let mut d_gamma = vec![0.0; c * c];
        let mut d_beta = vec![0.0; c];
        let mut a = vec![0.0; c * plane];
        let mut t = vec![0.0; c * plane];
        for b in 0..x.batch() {
            let (xi, di) = (x.item(b), dy.item(b));
            let (sq, n) = self.norm(xi, plane, &beta, &gamma);
            // a = dy · x · e · n^(e-1)
            for k in 0..a.len() {
                a[k] = di[k] * xi[k] * e * scale(n[k], e) / n[k];
            }
            if need.params {
                gemm(c, plane, c, &a, false, &sq, true, 1.0, &mut d_gamma);
                for (db, row) in d_beta.iter_mut().zip(a.chunks_exact(plane)) {
                    *db += row.iter().sum::<f64>();
                }
            }
            if let Some(dx) = dx.as_mut() {
                gemm(c, c, plane, &gamma, true, &a, false, 0.0, &mut t);
                let d = dx.item_mut(b);
                for k in 0..d.len() {
                    d[k] = di[k] * scale(n[k], e) + 2.0 * xi[k] * t[k];
                }
            }
        }
        if need.params {
            for ((g, &v), d) in self.b.grad.iter_mut().zip(&self.b.value).zip(&d_beta) {
                *g += 2.0 * v * d;
            }
            for ((g, &v), d) in self.g.grad.iter_mut().zip(&self.g.value).zip(&d_gamma) {
                *g += 2.0 * v * d;
            }
        }
        dx
    }
}

#[inline]
fn scale(n: f64, e: f64) -> f64 {
    if e < 0.0 {
        1.0 / n.sqrt()
    } else {
        n.sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Params;
    use crate::testutil::{check_input_grad, check_param_grads};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn forward_matches_closed_form_for_diagonal_gamma() {
        let mut gdn = Gdn::new("g", 3, false);
        gdn.g.value.iter_mut().enumerate().for_each(|(i, v)| {
            if i % 4 != 0 {
                *v = 0.0
            }
        });
        let mut igdn = Gdn::new("i", 3, true);
        igdn.g.value.clone_from(&gdn.g.value);
        let x = Tensor::from_vec([1, 3, 1, 2], vec![0.3, -1.2, 2.0, 0.0, -0.7, 0.9]).unwrap();
        let y = gdn.forward(&x);
        for (i, (&xv, &yv)) in x.data.iter().zip(&y.data).enumerate() {
            let c = i / 2;
            let n = 1.0 + 1e-6 + gdn.g.value[c * 4] * gdn.g.value[c * 4] * xv * xv;
            assert!((yv - xv / n.sqrt()).abs() < 1e-15);
        }
        let z = igdn.forward(&x);
        assert!((z.data[0] - 0.3 * (1.0 + 1e-6 + 0.1 * 0.09f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for inverse in [false, true] {
            let mut gdn = Gdn::new("g", 3, inverse);
            gdn.g.value.iter_mut().for_each(|v| *v += rng.random_range(0.0..0.3));
            gdn.b.value.iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
            let data: Vec<f64> = (0..2 * 3 * 4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let x = Tensor::from_vec([2, 3, 2, 2], data).unwrap();
            let probe: Vec<f64> = (0..x.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let loss = |m: &Gdn, x: &Tensor| m.forward(x).data.iter().zip(&probe).map(|(a, b)| a * b).sum::<f64>();
            let dy = Tensor::from_vec(x.shape(), probe.clone()).unwrap();
            gdn.zero_grad();
            let dx = gdn.backward(&x, &dy, Need::ALL).unwrap();
            check_param_grads(&mut gdn, |m| loss(m, &x), 1e-7);
            check_input_grad(&x, &dx, |x| loss(&gdn, x), 1e-7);
        }
    }
}
