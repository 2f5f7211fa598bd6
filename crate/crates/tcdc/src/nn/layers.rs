use rand::Rng;

use super::{Need, Param};
use crate::impl_params;
use crate::tensor::{gemm, Tensor};

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Gradient through a ReLU given its output (or input; the sign pattern is the same).
pub fn relu_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let data = y.data.iter().zip(&dy.data).map(|(&y, &d)| if y > 0.0 { d } else { 0.0 }).collect();
    Tensor::from_vec(dy.shape(), data).expect("same shape")
}

/// Global average pool to `(B, C, 1, 1)`.
pub fn gap(x: &Tensor) -> Tensor {
    let p = x.plane() as f64;
    let data = x.data.chunks_exact(x.plane()).map(|c| c.iter().sum::<f64>() / p).collect();
    Tensor::from_vec([x.batch(), x.channels(), 1, 1], data).expect("one value per channel")
}

pub fn gap_backward(shape: [usize; 4], dy: &Tensor) -> Tensor {
    let p = shape[2] * shape[3];
    let mut dx = Tensor::zeros(shape);
    for (chunk, &d) in dx.data.chunks_exact_mut(p).zip(&dy.data) {
        chunk.fill(d / p as f64);
    }
    dx
}

/// Inverted-dropout mask: each entry is `0` with probability `p`, else `1/(1-p)`.
pub fn dropout_mask(len: usize, p: f64, rng: &mut impl Rng) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..len).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect()
}

pub fn dropout_backward(mask: &[f64], dy: &Tensor) -> Tensor {
    let data = dy.data.iter().zip(mask).map(|(d, m)| d * m).collect();
    Tensor::from_vec(dy.shape(), data).expect("same shape")
}

/// Fully connected layer on `(B, F, 1, 1)` inputs, weight `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    pub fin: usize,
    pub fout: usize,
}

impl_params!(Linear; weight, bias);

impl Linear {
    pub fn new(name: &str, fin: usize, fout: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fin as f64).sqrt();
        Self {
            weight: Param::uniform(format!("{name}.weight"), &[fout, fin], bound, rng),
            bias: Param::uniform(format!("{name}.bias"), &[fout], bound, rng),
            fin,
            fout,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let b = x.batch();
        let mut out = Tensor::zeros([b, self.fout, 1, 1]);
        gemm(b, self.fin, self.fout, &x.data, false, &self.weight.value, true, 0.0, &mut out.data);
        for row in out.data.chunks_exact_mut(self.fout) {
            row.iter_mut().zip(&self.bias.value).for_each(|(o, b)| *o += b);
        }
        out
    }

    pub fn backward(&mut self, x: &Tensor, dy: &Tensor, need: Need) -> Option<Tensor> {
        let b = x.batch();
        if need.params {
            gemm(self.fout, b, self.fin, &dy.data, true, &x.data, false, 1.0, &mut self.weight.grad);
            for row in dy.data.chunks_exact(self.fout) {
                self.bias.grad.iter_mut().zip(row).for_each(|(g, d)| *g += d);
            }
        }
        need.input.then(|| {
            let mut dx = Tensor::zeros(x.shape());
            gemm(b, self.fout, self.fin, &dy.data, false, &self.weight.value, false, 0.0, &mut dx.data);
            dx
        })
    }
}

/// Max pooling with square window, stride and zero-free padding (padded cells never win).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaxPool {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl MaxPool {
    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        ((h + 2 * self.pad - self.k) / self.stride + 1, (w + 2 * self.pad - self.k) / self.stride + 1)
    }

    /// Pooled output and, per output cell, the flat input index of the maximum.
    pub fn forward(&self, x: &Tensor) -> (Tensor, Vec<usize>) {
        let [b, c, h, w] = x.shape();
        let (oh, ow) = self.out_size(h, w);
        let mut out = Tensor::zeros([b, c, oh, ow]);
        let mut arg = vec![0; out.len()];
        let mut o = 0;
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let (mut best, mut at) = (f64::NEG_INFINITY, base);
                    for ky in 0..self.k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..self.k {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = base + iy as usize * w + ix as usize;
                            if x.data[idx] > best {
                                best = x.data[idx];
                                at = idx;
                            }
                        }
                    }
                    out.data[o] = best;
                    arg[o] = at;
                    o += 1;
                }
            }
        }
        (out, arg)
    }

    pub fn backward(shape: [usize; 4], arg: &[usize], dy: &Tensor) -> Tensor {
        let mut dx = Tensor::zeros(shape);
        for (&i, &d) in arg.iter().zip(&dy.data) {
            dx.data[i] += d;
        }
        dx
    }
}
