//! Bjontegaard deltas between rate–accuracy curves.
//!
//! BD-accuracy is the mean vertical gap, in percentage points, between the
//! accuracy-vs-`log10(bpp)` interpolants over their common rate range.
//! BD-rate is `100·(10^Δ − 1)` percent where Δ is the mean gap between the
//! `log10(bpp)`-vs-accuracy interpolants over their common accuracy range.
//!
//! Interpolation defaults to monotone piecewise cubic Hermite (PCHIP, with
//! Fritsch–Carlson interior slopes and the three-point shape-preserving end
//! rule). The classic single cubic least-squares fit is available for
//! sensitivity comparisons. Nothing is ever extrapolated: integrals run over
//! the overlap of the two curves only.
//!
//! Rate mode needs accuracy to rise with rate. Curves that dip are first
//! made non-decreasing by isotonic regression (pool-adjacent-violators),
//! and each pooled run of equal accuracies is collapsed to a single point at
//! the mean of its log-rates. The number of pooled points is reported.

use alloc::vec::Vec;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum BdError {
    #[error("curve has {0} points, at least 4 are required")]
    TooFewPoints(usize),
    #[error("bpp values must be positive, finite and strictly increasing")]
    NonIncreasingRate,
    #[error("accuracy values must lie in [0, 1]")]
    InvalidAccuracy,
    #[error("curves do not overlap on the {0} axis")]
    InsufficientOverlap(&'static str),
    #[error("accuracy curve collapses to {0} distinct levels after isotonic regularization")]
    NotInvertible(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub bpp: f64,
    /// Top-1 accuracy as a fraction.
    pub accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BdMode {
    Accuracy,
    Rate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Interpolation {
    #[default]
    Pchip,
    /// Single least-squares cubic, as in the original Bjontegaard method.
    Cubic,
}

/// One Bjontegaard delta with the interval it was integrated over.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BdValue {
    /// Percentage points (accuracy mode) or percent (rate mode).
    pub value: f64,
    /// `log10(bpp)` range (accuracy mode) or accuracy range in points (rate mode).
    pub overlap: (f64, f64),
    /// Points merged by isotonic regularization across both curves.
    pub pooled_points: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BdResult {
    pub bd_accuracy: f64,
    pub bd_rate: f64,
    pub rate_overlap: (f64, f64),
    pub accuracy_overlap: (f64, f64),
    pub pooled_points: usize,
}

/// Piecewise cubic in Hermite form: values and slopes at the knots.
#[derive(Debug, Clone, PartialEq)]
pub struct Hermite {
    xs: Vec<f64>,
    ys: Vec<f64>,
    ds: Vec<f64>,
}

impl Hermite {
    /// Monotone cubic interpolant through the points (`xs` strictly increasing).
    pub fn pchip(xs: &[f64], ys: &[f64]) -> Self {
        let n = xs.len();
        assert!(n >= 2 && ys.len() == n);
        let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
        let delta: Vec<f64> = (0..n - 1).map(|k| (ys[k + 1] - ys[k]) / h[k]).collect();
        let mut ds = alloc::vec![0.0; n];
        if n == 2 {
            ds[0] = delta[0];
            ds[1] = delta[0];
        } else {
            for k in 1..n - 1 {
                let (d0, d1) = (delta[k - 1], delta[k]);
                if d0 * d1 > 0.0 {
                    let w1 = 2.0 * h[k] + h[k - 1];
                    let w2 = h[k] + 2.0 * h[k - 1];
                    ds[k] = (w1 + w2) / (w1 / d0 + w2 / d1);
                }
            }
            ds[0] = end_slope(h[0], h[1], delta[0], delta[1]);
            ds[n - 1] = end_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
        }
        Self { xs: xs.to_vec(), ys: ys.to_vec(), ds }
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.xs[0], self.xs[self.xs.len() - 1])
    }

    fn piece(&self, x: f64) -> usize {
        let k = self.xs.partition_point(|&v| v <= x);
        k.saturating_sub(1).min(self.xs.len() - 2)
    }

    pub fn eval(&self, x: f64) -> f64 {
        let k = self.piece(x);
        let h = self.xs[k + 1] - self.xs[k];
        let t = (x - self.xs[k]) / h;
        let (t2, t3) = (t * t, t * t * t);
        (2.0 * t3 - 3.0 * t2 + 1.0) * self.ys[k]
            + (t3 - 2.0 * t2 + t) * h * self.ds[k]
            + (-2.0 * t3 + 3.0 * t2) * self.ys[k + 1]
            + (t3 - t2) * h * self.ds[k + 1]
    }

    pub fn slope(&self, x: f64) -> f64 {
        let k = self.piece(x);
        let h = self.xs[k + 1] - self.xs[k];
        let t = (x - self.xs[k]) / h;
        let t2 = t * t;
        ((6.0 * t2 - 6.0 * t) * self.ys[k] + (-6.0 * t2 + 6.0 * t) * self.ys[k + 1]) / h
            + (3.0 * t2 - 4.0 * t + 1.0) * self.ds[k]
            + (3.0 * t2 - 2.0 * t) * self.ds[k + 1]
    }

    /// Antiderivative of piece `k` from its left knot to fraction `t`.
    fn piece_integral(&self, k: usize, t: f64) -> f64 {
        let h = self.xs[k + 1] - self.xs[k];
        let (t2, t3, t4) = (t * t, t * t * t, t * t * t * t);
        h * (self.ys[k] * (0.5 * t4 - t3 + t)
            + h * self.ds[k] * (0.25 * t4 - 2.0 * t3 / 3.0 + 0.5 * t2)
            + self.ys[k + 1] * (-0.5 * t4 + t3)
            + h * self.ds[k + 1] * (0.25 * t4 - t3 / 3.0))
    }

    /// Exact integral over `[a, b]`, both inside the domain.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        let (ka, kb) = (self.piece(a), self.piece(b));
        let frac = |k: usize, x: f64| (x - self.xs[k]) / (self.xs[k + 1] - self.xs[k]);
        if ka == kb {
            return self.piece_integral(ka, frac(ka, b)) - self.piece_integral(ka, frac(ka, a));
        }
        let mut total = self.piece_integral(ka, 1.0) - self.piece_integral(ka, frac(ka, a));
        for k in ka + 1..kb {
            total += self.piece_integral(k, 1.0);
        }
        total + self.piece_integral(kb, frac(kb, b))
    }

    /// The same function restricted to `[lo, hi]`, with new end knots carrying
    /// the interpolant's value and slope there.
    pub fn restrict(&self, lo: f64, hi: f64) -> Self {
        let mut xs = alloc::vec![lo];
        let mut ys = alloc::vec![self.eval(lo)];
        let mut ds = alloc::vec![self.slope(lo)];
        for i in 0..self.xs.len() {
            if self.xs[i] > lo && self.xs[i] < hi {
                xs.push(self.xs[i]);
                ys.push(self.ys[i]);
                ds.push(self.ds[i]);
            }
        }
        xs.push(hi);
        ys.push(self.eval(hi));
        ds.push(self.slope(hi));
        Self { xs, ys, ds }
    }
}

/// Three-point end slope with the shape-preserving corrections.
fn end_slope(h0: f64, h1: f64, m0: f64, m1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * m0 - h0 * m1) / (h0 + h1);
    if sign(d) != sign(m0) {
        0.0
    } else if sign(m0) != sign(m1) && libm::fabs(d) > libm::fabs(3.0 * m0) {
        3.0 * m0
    } else {
        d
    }
}

fn sign(v: f64) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

/// Least-squares cubic over a centred and scaled abscissa.
#[derive(Debug, Clone, PartialEq)]
pub struct CubicFit {
    coef: [f64; 4],
    centre: f64,
    scale: f64,
    domain: (f64, f64),
}

impl CubicFit {
    pub fn fit(xs: &[f64], ys: &[f64]) -> Self {
        let n = xs.len() as f64;
        let centre = xs.iter().sum::<f64>() / n;
        let spread = xs.iter().map(|x| libm::fabs(x - centre)).fold(0.0, f64::max);
        let scale = if spread > 0.0 { spread } else { 1.0 };
        let mut ata = [[0.0; 4]; 4];
        let mut atb = [0.0; 4];
        for (&x, &y) in xs.iter().zip(ys) {
            let u = (x - centre) / scale;
            let pows = [1.0, u, u * u, u * u * u];
            for i in 0..4 {
                atb[i] += pows[i] * y;
                for j in 0..4 {
                    ata[i][j] += pows[i] * pows[j];
                }
            }
        }
        let coef = solve4(ata, atb);
        Self { coef, centre, scale, domain: (xs[0], xs[xs.len() - 1]) }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let u = (x - self.centre) / self.scale;
        ((self.coef[3] * u + self.coef[2]) * u + self.coef[1]) * u + self.coef[0]
    }

    pub fn integral(&self, a: f64, b: f64) -> f64 {
        let anti = |x: f64| {
            let u = (x - self.centre) / self.scale;
            let c = &self.coef;
            self.scale * u * (c[0] + u * (c[1] / 2.0 + u * (c[2] / 3.0 + u * c[3] / 4.0)))
        };
        anti(b) - anti(a)
    }
}

fn solve4(mut a: [[f64; 4]; 4], mut b: [f64; 4]) -> [f64; 4] {
    for col in 0..4 {
        let mut piv = col;
        for r in col + 1..4 {
            if libm::fabs(a[r][col]) > libm::fabs(a[piv][col]) {
                piv = r;
            }
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..4 {
            let f = a[r][col] / a[col][col];
            for c in col..4 {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = [0.0; 4];
    for r in (0..4).rev() {
        let mut s = b[r];
        for c in r + 1..4 {
            s -= a[r][c] * x[c];
        }
        x[r] = s / a[r][r];
    }
    x
}

/// A curve ready for integration.
#[derive(Debug, Clone, PartialEq)]
pub enum Interpolant {
    Hermite(Hermite),
    Cubic(CubicFit),
}

impl Interpolant {
    fn build(xs: &[f64], ys: &[f64], interp: Interpolation) -> Result<Self, BdError> {
        match interp {
            Interpolation::Pchip => Ok(Self::Hermite(Hermite::pchip(xs, ys))),
            Interpolation::Cubic if xs.len() >= 4 => Ok(Self::Cubic(CubicFit::fit(xs, ys))),
            Interpolation::Cubic => Err(BdError::TooFewPoints(xs.len())),
        }
    }

    pub fn domain(&self) -> (f64, f64) {
        match self {
            Self::Hermite(h) => h.domain(),
            Self::Cubic(c) => c.domain,
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Self::Hermite(h) => h.eval(x),
            Self::Cubic(c) => c.eval(x),
        }
    }

    pub fn integral(&self, a: f64, b: f64) -> f64 {
        match self {
            Self::Hermite(h) => h.integral(a, b),
            Self::Cubic(c) => c.integral(a, b),
        }
    }

    /// Restriction of the interpolated function to `[lo, hi]`.
    pub fn restrict(&self, lo: f64, hi: f64) -> Self {
        match self {
            Self::Hermite(h) => Self::Hermite(h.restrict(lo, hi)),
            Self::Cubic(c) => Self::Cubic(CubicFit { domain: (lo, hi), ..c.clone() }),
        }
    }
}

/// Mean of `test − reference` over the overlap of their domains.
pub fn mean_gap(
    reference: &Interpolant,
    test: &Interpolant,
    axis: &'static str,
) -> Result<(f64, (f64, f64)), BdError> {
    let (r0, r1) = reference.domain();
    let (t0, t1) = test.domain();
    let (lo, hi) = (r0.max(t0), r1.min(t1));
    if !(hi - lo > 1e-12) {
        return Err(BdError::InsufficientOverlap(axis));
    }
    let gap = (test.integral(lo, hi) - reference.integral(lo, hi)) / (hi - lo);
    Ok((gap, (lo, hi)))
}

fn validate(curve: &[CurvePoint]) -> Result<(), BdError> {
    if curve.len() < 4 {
        return Err(BdError::TooFewPoints(curve.len()));
    }
    for p in curve {
        if !(p.bpp.is_finite() && p.bpp > 0.0) {
            return Err(BdError::NonIncreasingRate);
        }
        if !(p.accuracy >= 0.0 && p.accuracy <= 1.0) {
            return Err(BdError::InvalidAccuracy);
        }
    }
    if curve.windows(2).any(|w| w[1].bpp <= w[0].bpp) {
        return Err(BdError::NonIncreasingRate);
    }
    Ok(())
}

/// Accuracy in percentage points against `log10(bpp)`.
pub fn accuracy_interpolant(curve: &[CurvePoint], interp: Interpolation) -> Result<Interpolant, BdError> {
    validate(curve)?;
    let xs: Vec<f64> = curve.iter().map(|p| libm::log10(p.bpp)).collect();
    let ys: Vec<f64> = curve.iter().map(|p| 100.0 * p.accuracy).collect();
    Interpolant::build(&xs, &ys, interp)
}

/// Non-decreasing least-squares fit (pool adjacent violators), returned as
/// `(level, first index, last index)` blocks.
pub fn isotonic_blocks(values: &[f64]) -> Vec<(f64, usize, usize)> {
    let mut blocks: Vec<(f64, usize, usize, f64)> = Vec::new(); // (mean, start, end, weight)
    for (i, &v) in values.iter().enumerate() {
        blocks.push((v, i, i, 1.0));
        while blocks.len() > 1 {
            let last = blocks[blocks.len() - 1];
            let prev = blocks[blocks.len() - 2];
            if prev.0 < last.0 {
                break;
            }
            let w = prev.3 + last.3;
            let mean = (prev.0 * prev.3 + last.0 * last.3) / w;
            blocks.pop();
            let n = blocks.len();
            blocks[n - 1] = (mean, prev.1, last.2, w);
        }
    }
    blocks.into_iter().map(|(m, s, e, _)| (m, s, e)).collect()
}

/// `log10(bpp)` against accuracy in percentage points, after isotonic
/// regularization. Returns the interpolant and the number of pooled points.
pub fn rate_interpolant(curve: &[CurvePoint], interp: Interpolation) -> Result<(Interpolant, usize), BdError> {
    validate(curve)?;
    let acc: Vec<f64> = curve.iter().map(|p| 100.0 * p.accuracy).collect();
    let logr: Vec<f64> = curve.iter().map(|p| libm::log10(p.bpp)).collect();
    let blocks = isotonic_blocks(&acc);
    let mut xs = Vec::with_capacity(blocks.len());
    let mut ys = Vec::with_capacity(blocks.len());
    let mut pooled = 0;
    for &(level, s, e) in &blocks {
        let n = (e - s + 1) as f64;
        pooled += e - s;
        xs.push(level);
        ys.push(logr[s..=e].iter().sum::<f64>() / n);
    }
    if xs.len() < 2 {
        return Err(BdError::NotInvertible(xs.len()));
    }
    Ok((Interpolant::build(&xs, &ys, interp)?, pooled))
}

/// One Bjontegaard delta of `test` relative to `reference`.
pub fn bd_metric(
    reference: &[CurvePoint],
    test: &[CurvePoint],
    mode: BdMode,
    interp: Interpolation,
) -> Result<BdValue, BdError> {
    match mode {
        BdMode::Accuracy => {
            let r = accuracy_interpolant(reference, interp)?;
            let t = accuracy_interpolant(test, interp)?;
            let (gap, overlap) = mean_gap(&r, &t, "rate")?;
            Ok(BdValue { value: gap, overlap, pooled_points: 0 })
        }
        BdMode::Rate => {
            let (r, pr) = rate_interpolant(reference, interp)?;
            let (t, pt) = rate_interpolant(test, interp)?;
            let (gap, overlap) = mean_gap(&r, &t, "accuracy")?;
            Ok(BdValue { value: 100.0 * (libm::pow(10.0, gap) - 1.0), overlap, pooled_points: pr + pt })
        }
    }
}

/// Both deltas of `test` relative to `reference`.
pub fn bjontegaard(reference: &[CurvePoint], test: &[CurvePoint], interp: Interpolation) -> Result<BdResult, BdError> {
    let acc = bd_metric(reference, test, BdMode::Accuracy, interp)?;
    let rate = bd_metric(reference, test, BdMode::Rate, interp)?;
    Ok(BdResult {
        bd_accuracy: acc.value,
        bd_rate: rate.value,
        rate_overlap: acc.overlap,
        accuracy_overlap: rate.overlap,
        pooled_points: rate.pooled_points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn curve(points: &[(f64, f64)]) -> Vec<CurvePoint> {
        points.iter().map(|&(bpp, accuracy)| CurvePoint { bpp, accuracy }).collect()
    }

    #[test]
    fn pchip_reproduces_a_line_and_integrates_exactly() {
        let xs = [0.0, 0.5, 2.0, 3.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        let h = Hermite::pchip(&xs, &ys);
        assert!(libm::fabs(h.eval(1.3) - 3.6) < 1e-12);
        // ∫_{0.25}^{2.5} (2x+1) dx = x² + x
        let exact = (2.5 * 2.5 + 2.5) - (0.25 * 0.25 + 0.25);
        assert!(libm::fabs(h.integral(0.25, 2.5) - exact) < 1e-12);
    }

    #[test]
    fn pchip_matches_scipy_reference_values() {
        // scipy.interpolate.PchipInterpolator on the same knots.
        let xs = [0.0, 1.0, 2.5, 3.0, 4.5];
        let ys = [0.0, 2.0, 2.5, 4.0, 4.2];
        let h = Hermite::pchip(&xs, &ys);
        let probes = [(0.4, 1.030_4), (1.7, 2.223_888_319_088_319), (2.9, 3.835_796_588_348_889), (4.0, 4.181_620_951_495_429)];
        for (x, want) in probes {
            assert!(libm::fabs(h.eval(x) - want) < 1e-9, "{x}: {} vs {want}", h.eval(x));
        }
        assert!(libm::fabs(h.integral(0.0, 4.5) - 12.369_546_811_858_527) < 1e-9);
        assert!(libm::fabs(h.integral(0.3, 3.7) - 8.903_240_936_296_774) < 1e-9);
    }

    #[test]
    fn identity_is_exactly_zero() {
        let c = curve(&[(0.05, 0.4), (0.1, 0.55), (0.2, 0.62), (0.4, 0.7), (0.8, 0.71)]);
        let r = bjontegaard(&c, &c, Interpolation::Pchip).unwrap();
        assert_eq!(r.bd_accuracy, 0.0);
        assert_eq!(r.bd_rate, 0.0);
    }

    #[test]
    fn halved_rate_gives_minus_fifty_percent() {
        let c = curve(&[(0.05, 0.4), (0.1, 0.55), (0.2, 0.62), (0.4, 0.7), (0.8, 0.71)]);
        let half: Vec<CurvePoint> = c.iter().map(|p| CurvePoint { bpp: p.bpp / 2.0, ..*p }).collect();
        let r = bjontegaard(&c, &half, Interpolation::Pchip).unwrap();
        assert!(libm::fabs(r.bd_rate + 50.0) < 1e-9, "{}", r.bd_rate);
        assert!(r.bd_accuracy > 0.0);
    }

    #[test]
    fn isotonic_pools_violators() {
        let blocks = isotonic_blocks(&[1.0, 3.0, 2.0, 4.0, 3.0, 3.0, 5.0]);
        assert_eq!(blocks, vec![(1.0, 0, 0), (2.5, 1, 2), (3.0 + 1.0 / 3.0, 3, 5), (5.0, 6, 6)]);
    }

    #[test]
    fn errors() {
        let c = curve(&[(0.1, 0.4), (0.2, 0.5), (0.3, 0.6)]);
        assert_eq!(bjontegaard(&c, &c, Interpolation::Pchip), Err(BdError::TooFewPoints(3)));
        let a = curve(&[(0.1, 0.4), (0.2, 0.5), (0.3, 0.6), (0.4, 0.7)]);
        let b = curve(&[(1.1, 0.8), (1.2, 0.85), (1.3, 0.9), (1.4, 0.95)]);
        assert_eq!(
            bd_metric(&a, &b, BdMode::Accuracy, Interpolation::Pchip),
            Err(BdError::InsufficientOverlap("rate"))
        );
        assert_eq!(bd_metric(&a, &b, BdMode::Rate, Interpolation::Pchip), Err(BdError::InsufficientOverlap("accuracy")));
        let flat = curve(&[(0.1, 0.9), (0.2, 0.9), (0.3, 0.9), (0.4, 0.9)]);
        assert_eq!(bd_metric(&flat, &a, BdMode::Rate, Interpolation::Pchip), Err(BdError::NotInvertible(1)));
        let unordered = curve(&[(0.2, 0.4), (0.1, 0.5), (0.3, 0.6), (0.4, 0.7)]);
        assert_eq!(bd_metric(&unordered, &a, BdMode::Accuracy, Interpolation::Pchip), Err(BdError::NonIncreasingRate));
    }
}
