//! Dense `(batch, channels, height, width)` tensors of `f64`.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorError {
    #[error("data length {got} does not match shape {shape:?}")]
    Length { shape: [usize; 4], got: usize },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape([usize; 4], [usize; 4]),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self { shape, data: vec![0.0; shape.iter().product()] }
    }

    pub fn full(shape: [usize; 4], v: f64) -> Self {
        Self { shape, data: vec![v; shape.iter().product()] }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self, TensorError> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(TensorError::Length { shape, got: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    /// Elements per spatial plane.
    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.shape[1] * self.plane()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self, b: usize) -> &[f64] {
        let n = self.item_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn item_mut(&mut self, b: usize) -> &mut [f64] {
        let n = self.item_len();
        &mut self.data[b * n..(b + 1) * n]
    }

    pub fn check_finite(&self, what: &'static str) -> Result<(), TensorError> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFinite(what))
        }
    }

    pub fn expect_shape(&self, shape: [usize; 4]) -> Result<(), TensorError> {
        if self.shape == shape {
            Ok(())
        } else {
            Err(TensorError::Shape(self.shape, shape))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn clamp01(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// Split along the channel axis into `[0, k)` and `[k, C)`.
    pub fn split_channels(&self, k: usize) -> (Tensor, Tensor) {
        let [b, c, h, w] = self.shape;
        let p = h * w;
        let mut lo = Tensor::zeros([b, k, h, w]);
        let mut hi = Tensor::zeros([b, c - k, h, w]);
        for i in 0..b {
            let src = self.item(i);
            lo.item_mut(i).copy_from_slice(&src[..k * p]);
            hi.item_mut(i).copy_from_slice(&src[k * p..]);
        }
        (lo, hi)
    }

    /// Inverse of [`split_channels`](Self::split_channels).
    pub fn concat_channels(lo: &Tensor, hi: &Tensor) -> Tensor {
        let [b, c1, h, w] = lo.shape;
        let c2 = hi.shape[1];
        let mut out = Tensor::zeros([b, c1 + c2, h, w]);
        for i in 0..b {
            let dst = out.item_mut(i);
            dst[..lo.item_len()].copy_from_slice(lo.item(i));
            dst[lo.item_len()..].copy_from_slice(hi.item(i));
        }
        out
    }

    /// Gather batch items by index.
    pub fn select(&self, idx: &[usize]) -> Tensor {
        let mut s = self.shape;
        s[0] = idx.len();
        let mut data = Vec::with_capacity(idx.len() * self.item_len());
        for &i in idx {
            data.extend_from_slice(self.item(i));
        }
        Tensor { shape: s, data }
    }
}

/// `C = A·B + beta·C` for row-major matrices, either operand optionally transposed.
///
/// `a` is `m×k` (or `k×m` when `ta`), `b` is `k×n` (or `n×k` when `tb`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, beta: f64, c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides describe matrices inside the checked slice bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_handles_transposes() {
        // A = [[1,2],[3,4]], B = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, 1.0, &mut c);
        assert_eq!(c, [26.0 + 17.0, 30.0 + 23.0, 38.0 + 39.0, 44.0 + 53.0]);
    }

    #[test]
    fn channel_split_round_trips() {
        let t = Tensor::from_vec([2, 3, 1, 2], (0..12).map(f64::from).collect()).unwrap();
        let (a, b) = t.split_channels(1);
        assert_eq!(a.data, [0.0, 1.0, 6.0, 7.0]);
        assert_eq!(Tensor::concat_channels(&a, &b), t);
        assert!(Tensor::from_vec([1, 1, 1, 2], vec![0.0]).is_err());
    }
}
