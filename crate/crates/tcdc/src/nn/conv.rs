use rand::Rng;
use rand_distr::StandardNormal;

use super::{Init, Need, Param};
use crate::impl_params;
use crate::tensor::{gemm, Tensor};

/// Geometry of a strided convolution from a `(c, h, w)` image to `(oh, ow)` positions.
#[derive(Debug, Clone, Copy)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geom {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col(g: &Geom, x: &[f64], cols: &mut [f64]) {
    let p = g.positions();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let seg = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        seg.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in seg.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix >= 0 && ix < g.w as isize { src[ix as usize] } else { 0.0 };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back into the image.
fn col2im(g: &Geom, cols: &[f64], x: &mut [f64]) {
    let p = g.positions();
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &s) in src[oy * g.ow..(oy + 1) * g.ow].iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

fn init_weights(
    name: &str,
    shape: &[usize],
    bias_len: usize,
    fan_in: usize,
    init: Init,
    rng: &mut impl Rng,
) -> (Param, Param) {
    match init {
        Init::Uniform => {
            let bound = 1.0 / (fan_in as f64).sqrt();
            (
                Param::uniform(format!("{name}.weight"), shape, bound, rng),
                Param::uniform(format!("{name}.bias"), &[bias_len], bound, rng),
            )
        }
        Init::He(scale) => {
            let std = scale * (2.0 / fan_in as f64).sqrt();
            let n = shape.iter().product();
            let w = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
            (Param::new(format!("{name}.weight"), shape, w), Param::new(format!("{name}.bias"), &[bias_len], vec![0.0; bias_len]))
        }
    }
}

fn add_bias(out: &mut [f64], bias: &[f64], plane: usize) {
    for (chunk, &b) in out.chunks_exact_mut(plane).zip(bias) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn accumulate_bias_grad(dy: &[f64], grad: &mut [f64], plane: usize) {
    for (chunk, g) in dy.chunks_exact(plane).zip(grad) {
        *g += chunk.iter().sum::<f64>();
    }
}

/// 2-D convolution, weight shape `(out, in, k, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl_params!(Conv2d; weight, bias);

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let (weight, bias) = init_weights(name, &[cout, cin, k, k], cout, cin * k * k, init, rng);
        Self { weight, bias, cin, cout, k, stride, pad }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        ((h + 2 * self.pad - self.k) / self.stride + 1, (w + 2 * self.pad - self.k) / self.stride + 1)
    }

    fn geom(&self, x: &Tensor) -> Geom {
        let (oh, ow) = self.out_size(x.height(), x.width());
        Geom { c: self.cin, h: x.height(), w: x.width(), k: self.k, stride: self.stride, pad: self.pad, oh, ow }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        debug_assert_eq!(x.channels(), self.cin);
        let g = self.geom(x);
        let (kk, p) = (g.rows(), g.positions());
        let mut out = Tensor::zeros([x.batch(), self.cout, g.oh, g.ow]);
        let mut cols = vec![0.0; kk * p];
        for b in 0..x.batch() {
            im2col(&g, x.item(b), &mut cols);
            let o = out.item_mut(b);
            gemm(self.cout, kk, p, &self.weight.value, false, &cols, false, 0.0, o);
            add_bias(o, &self.bias.value, p);
        }
        out
    }

    pub fn backward(&mut self, x: &Tensor, dy: &Tensor, need: Need) -> Option<Tensor> {
        let g = self.geom(x);
        let (kk, p) = (g.rows(), g.positions());
        let mut cols = vec![0.0; kk * p];
        let mut dx = need.input.then(|| Tensor::zeros(x.shape()));
        for b in 0..x.batch() {
            let d = dy.item(b);
            if need.params {
                im2col(&g, x.item(b), &mut cols);
                gemm(self.cout, p, kk, d, false, &cols, true, 1.0, &mut self.weight.grad);
                accumulate_bias_grad(d, &mut self.bias.grad, p);
            }
            if let Some(dx) = dx.as_mut() {
                gemm(kk, self.cout, p, &self.weight.value, true, d, false, 0.0, &mut cols);
                col2im(&g, &cols, dx.item_mut(b));
            }
        }
        dx
    }
}

/// Transposed 2-D convolution, weight shape `(in, out, k, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose2d {
    pub weight: Param,
    pub bias: Param,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub output_pad: usize,
}

impl_params!(ConvTranspose2d; weight, bias);

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        output_pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let (weight, bias) = init_weights(name, &[cin, cout, k, k], cout, cout * k * k, Init::Uniform, rng);
        Self { weight, bias, cin, cout, k, stride, pad, output_pad }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let f = |n: usize| (n - 1) * self.stride + self.k + self.output_pad - 2 * self.pad;
        (f(h), f(w))
    }

    /// Geometry of the adjoint convolution, from the output back to the input grid.
    fn geom(&self, x: &Tensor) -> Geom {
        let (oh, ow) = self.out_size(x.height(), x.width());
        Geom { c: self.cout, h: oh, w: ow, k: self.k, stride: self.stride, pad: self.pad, oh: x.height(), ow: x.width() }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        debug_assert_eq!(x.channels(), self.cin);
        let g = self.geom(x);
        let (kk, p) = (g.rows(), g.positions());
        let mut out = Tensor::zeros([x.batch(), self.cout, g.h, g.w]);
        let mut cols = vec![0.0; kk * p];
        for b in 0..x.batch() {
            gemm(kk, self.cin, p, &self.weight.value, true, x.item(b), false, 0.0, &mut cols);
            let o = out.item_mut(b);
            col2im(&g, &cols, o);
            add_bias(o, &self.bias.value, g.h * g.w);
        }
        out
    }

    pub fn backward(&mut self, x: &Tensor, dy: &Tensor, need: Need) -> Option<Tensor> {
        let g = self.geom(x);
        let (kk, p) = (g.rows(), g.positions());
        let mut cols = vec![0.0; kk * p];
        let mut dx = need.input.then(|| Tensor::zeros(x.shape()));
        for b in 0..x.batch() {
            let d = dy.item(b);
            im2col(&g, d, &mut cols);
            if need.params {
                gemm(self.cin, p, kk, x.item(b), false, &cols, true, 1.0, &mut self.weight.grad);
                accumulate_bias_grad(d, &mut self.bias.grad, g.h * g.w);
            }
            if let Some(dx) = dx.as_mut() {
                gemm(self.cin, kk, p, &self.weight.value, false, &cols, false, 0.0, dx.item_mut(b));
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Params;
    use crate::testutil::{check_input_grad, check_param_grads};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv2d::new("c", 2, 3, 3, 2, 1, Init::Uniform, &mut rng);
        let x = rand_tensor([1, 2, 5, 4], &mut rng);
        let y = conv.forward(&x);
        assert_eq!(y.shape(), [1, 3, 3, 2]);
        for o in 0..3 {
            for oy in 0..3 {
                for ox in 0..2 {
                    let mut s = conv.bias.value[o];
                    for c in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let iy = (oy * 2 + ki) as isize - 1;
                                let ix = (ox * 2 + kj) as isize - 1;
                                if (0..5).contains(&iy) && (0..4).contains(&ix) {
                                    s += conv.weight.value[((o * 2 + c) * 3 + ki) * 3 + kj]
                                        * x.data[(c * 5 + iy as usize) * 4 + ix as usize];
                                }
                            }
                        }
                    }
                    assert!((y.data[(o * 3 + oy) * 2 + ox] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        // <conv(x), v> = <x, convT(v)> when both share weights and have zero bias.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut conv = Conv2d::new("c", 3, 4, 5, 2, 2, Init::Uniform, &mut rng);
        let mut tconv = ConvTranspose2d::new("t", 4, 3, 5, 2, 2, 1, &mut rng);
        conv.bias.value.fill(0.0);
        tconv.bias.value.fill(0.0);
        tconv.weight.value.clone_from(&conv.weight.value);
        let x = rand_tensor([2, 3, 8, 8], &mut rng);
        let v = rand_tensor([2, 4, 4, 4], &mut rng);
        let cx = conv.forward(&x);
        let tv = tconv.forward(&v);
        assert_eq!(tv.shape(), x.shape());
        let lhs: f64 = cx.data.iter().zip(&v.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&tv.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor([2, 2, 6, 6], &mut rng);
        let mut conv = Conv2d::new("c", 2, 3, 3, 2, 1, Init::Uniform, &mut rng);
        let probe = rand_tensor([2, 3, 3, 3], &mut rng);
        let loss = |m: &Conv2d, x: &Tensor| m.forward(x).data.iter().zip(&probe.data).map(|(a, b)| a * b).sum::<f64>();
        conv.zero_grad();
        let dx = conv.backward(&x, &probe, Need::ALL).unwrap();
        check_param_grads(&mut conv, |m| loss(m, &x), 1e-6);
        check_input_grad(&x, &dx, |x| loss(&conv, x), 1e-6);
    }

    #[test]
    fn transposed_conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor([2, 3, 3, 3], &mut rng);
        let mut tconv = ConvTranspose2d::new("t", 3, 2, 5, 2, 2, 1, &mut rng);
        let probe = rand_tensor([2, 2, 6, 6], &mut rng);
        let loss = |m: &ConvTranspose2d, x: &Tensor| m.forward(x).data.iter().zip(&probe.data).map(|(a, b)| a * b).sum::<f64>();
        tconv.zero_grad();
        let dx = tconv.backward(&x, &probe, Need::ALL).unwrap();
        check_param_grads(&mut tconv, |m| loss(m, &x), 1e-6);
        check_input_grad(&x, &dx, |x| loss(&tconv, x), 1e-6);
    }
}
