//! Real scalar used by the measurement side (discrepancy, fits, bounds).
//!
//! Flows, masks and the torus action are exact and do not go through this trait.

use num_traits::{Float, FloatConst, FromPrimitive, NumCast};

pub trait Scalar: Float + FloatConst + FromPrimitive + NumCast + Send + Sync + std::fmt::Debug + 'static {
    fn of(x: f64) -> Self {
        <Self as NumCast>::from(x).expect("finite f64 fits the scalar")
    }

    fn of_usize(x: usize) -> Self {
        Self::of(x as f64)
    }

    fn to_f64_lossy(self) -> f64 {
        NumCast::from(self).unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Debug)]
pub struct KahanSum<T> {
    sum: T,
    c: T,
}

impl<T: Scalar> Default for KahanSum<T> {
    fn default() -> Self {
        Self { sum: T::zero(), c: T::zero() }
    }
}

impl<T: Scalar> KahanSum<T> {
    pub fn add(&mut self, x: T) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.c = self.c + ((self.sum - t) + x);
        } else {
            self.c = self.c + ((x - t) + self.sum);
        }
        self.sum = t;
    }

    pub fn value(&self) -> T {
        self.sum + self.c
    }
}

/// Ordinary least squares `y = a + b x`; returns `(a, b)`.
pub fn ols<T: Scalar>(xs: &[T], ys: &[T]) -> Option<(T, T)> {
    let n = xs.len();
    if n < 2 || n != ys.len() {
        return None;
    }
    let nf = T::of_usize(n);
    let mx = xs.iter().fold(T::zero(), |a, &x| a + x) / nf;
    let my = ys.iter().fold(T::zero(), |a, &y| a + y) / nf;
    let mut sxx = T::zero();
    let mut sxy = T::zero();
    for (&x, &y) in xs.iter().zip(ys) {
        sxx = sxx + (x - mx) * (x - mx);
        sxy = sxy + (x - mx) * (y - my);
    }
    if sxx == T::zero() {
        return None;
    }
    let b = sxy / sxx;
    Some((my - b * mx, b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kahan_recovers_small_terms() {
        let mut s = KahanSum::<f64>::default();
        s.add(1e16);
        for _ in 0..1000 {
            s.add(1.0);
        }
        s.add(-1e16);
        assert_eq!(s.value(), 1000.0);
    }

    #[test]
    fn ols_exact_line() {
        let xs = [1.0f32, 2.0, 3.0, 4.0];
        let ys: Vec<f32> = xs.iter().map(|x| 0.5 + 2.0 * x).collect();
        let (a, b) = ols(&xs, &ys).unwrap();
        assert!((a - 0.5).abs() < 1e-5 && (b - 2.0).abs() < 1e-5);
    }
}
