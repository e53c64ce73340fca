//! Discrepancy of finite orbit sets, cube sweeps with exponent fits, and the
//! Erdős–Turán–Koksma and strip log bounds.

use fixedbitset::FixedBitSet;
use num_bigint::{BigInt, BigUint};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::PrefixCount;
use crate::lattice::Window;
use crate::scalar::{ols, KahanSum, Scalar};
use crate::torus::{Region, TorusPoint};

/// Measure of a region: exact `num / 2^exp`, or a real value with an error band.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum Measure {
    Exact { num: u128, exp: u32 },
    Approx { value: f64, band: f64 },
}

impl Measure {
    pub fn of_region(region: &Region, k: usize, bits: u32) -> Self {
        match region.exact_measure(k, bits) {
            Some(num) => Measure::Exact { num, exp: bits * k as u32 },
            // f64 ball volume: relative error a few ulps
            None => {
                let value = region.measure_f64(k, bits);
                Measure::Approx { value, band: value.abs() * 8.0 * f64::EPSILON + f64::MIN_POSITIVE }
            }
        }
    }

    pub fn to_f64(&self) -> f64 {
        match self {
            Measure::Exact { num, exp } => *num as f64 / (2f64).powi(*exp as i32),
            Measure::Approx { value, .. } => *value,
        }
    }
}

/// A discrepancy value: exact dyadic when the measure is exact.
#[derive(Clone, Debug, PartialEq)]
pub struct Discrepancy {
    pub exact: Option<(BigUint, u32)>,
    pub value: f64,
    pub band: f64,
}

impl Discrepancy {
    /// `p/2^e` in lowest terms.
    pub fn exact_string(&self) -> Option<String> {
        let (num, exp) = self.exact.as_ref()?;
        let tz = num.trailing_zeros().unwrap_or(*exp as u64).min(*exp as u64) as u32;
        let n = num >> tz;
        let e = exp - tz;
        Some(if e == 0 { n.to_string() } else { format!("{n}/2^{e}") })
    }
}

/// `| hits - total * measure |`.
pub fn discrepancy_from_counts(hits: u64, total: u64, measure: &Measure) -> Discrepancy {
    match measure {
        Measure::Exact { num, exp } => {
            let lhs = BigInt::from(hits) << (*exp as usize);
            let rhs = BigInt::from(total) * BigInt::from(*num);
            let diff = (lhs - rhs).magnitude().clone();
            let value = big_to_f64(&diff) / (2f64).powi(*exp as i32);
            Discrepancy { exact: Some((diff, *exp)), value, band: 0.0 }
        }
        Measure::Approx { value, band } => {
            Discrepancy { exact: None, value: (hits as f64 - total as f64 * value).abs(), band: total as f64 * band }
        }
    }
}

fn big_to_f64(x: &BigUint) -> f64 {
    let bits = x.bits();
    if bits <= 64 {
        return x.iter_u64_digits().next().unwrap_or(0) as f64;
    }
    let shift = bits - 64;
    let top = (x >> shift).iter_u64_digits().next().unwrap_or(0) as f64;
    top * (2f64).powi(shift as i32)
}

/// `D(F, X)` for lattice points `F` of the window.
pub fn discrepancy(w: &Window, f: &[Vec<i64>], region: &Region, measure: &Measure) -> Discrepancy {
    let hits = f.iter().filter(|n| region.contains(&w.act(n), w.gen.bits)).count() as u64;
    discrepancy_from_counts(hits, f.len() as u64, measure)
}

/// Same, for torus points given directly.
pub fn discrepancy_points(points: &[TorusPoint], region: &Region, measure: &Measure, bits: u32) -> Discrepancy {
    let hits = points.iter().filter(|p| region.contains(p, bits)).count() as u64;
    discrepancy_from_counts(hits, points.len() as u64, measure)
}

pub fn region_mask(w: &Window, region: &Region) -> FixedBitSet {
    if *region == w.shape_a {
        return w.mask_a.clone();
    }
    if *region == w.shape_b {
        return w.mask_b.clone();
    }
    let hits: Vec<bool> = (0..w.cube.len).into_par_iter().map(|i| region.contains(&w.act(&w.cube.coords(i)), w.gen.bits)).collect();
    crate::grid::to_bitset(&hits)
}

#[derive(Clone, Debug, Serialize)]
pub struct DiscrepancyReport<T: Scalar> {
    pub radii: Vec<i64>,
    /// Max over anchors of `D(N_n^+[u], X)` per radius.
    pub values: Vec<T>,
    /// Exact dyadic strings when available.
    pub exact: Vec<Option<String>>,
    pub band: T,
    pub fitted_exponent: Option<T>,
    pub fitted_constant: Option<T>,
    /// Why no fit was produced, if none was.
    pub fit_note: Option<String>,
    pub anchors_used: usize,
    pub seed: u64,
}

/// OLS of `log D` against `log n` for radii `≥ 4` with positive values; needs ≥ 3 points.
pub fn fit_exponent<T: Scalar>(radii: &[i64], values: &[T]) -> std::result::Result<(T, T), String> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (&n, &v) in radii.iter().zip(values) {
        if n >= 4 && v > T::zero() {
            xs.push(T::of(n as f64).ln());
            ys.push(v.ln());
        }
    }
    if xs.len() < 3 {
        return Err(format!("fit needs at least 3 radii >= 4 with nonzero discrepancy, have {}", xs.len()));
    }
    let (a, b) = ols(&xs, &ys).ok_or_else(|| "degenerate fit".to_string())?;
    Ok((b, a.exp()))
}

/// Max discrepancy of discrete cubes `N_n^+[u]` over anchors, per radius, and the fitted exponent.
pub fn cube_discrepancy_sweep<T: Scalar>(
    w: &Window,
    region: &Region,
    radii: &[i64],
    anchors: &[Vec<i64>],
) -> Result<DiscrepancyReport<T>> {
    let mask = region_mask(w, region);
    let pc = PrefixCount::new(&w.cube, &mask);
    let measure = Measure::of_region(region, w.gen.k, w.gen.bits);
    let d = w.d();
    let mut values = Vec::with_capacity(radii.len());
    let mut exact = Vec::with_capacity(radii.len());
    let mut band = 0f64;
    for &n in radii {
        if n < 0 {
            return Err(Error::InvalidArgument("negative radius".into()));
        }
        let total = ((n + 1) as u64).pow(d as u32);
        let mut best: Option<Discrepancy> = None;
        for a in anchors {
            let hi: Vec<i64> = a.iter().map(|x| x + n).collect();
            if !w.cube.contains(a) || !w.cube.contains(&hi) {
                return Err(Error::WindowTooSmall(format!("cube N_{n}^+ at {a:?} leaves the window")));
            }
            let hits = pc.count(a, &hi) as u64;
            let dv = discrepancy_from_counts(hits, total, &measure);
            if best.as_ref().map_or(true, |b| dv.value > b.value) {
                best = Some(dv);
            }
        }
        let best = best.ok_or_else(|| Error::InvalidArgument("no anchors".into()))?;
        band = band.max(best.band);
        values.push(T::of(best.value));
        exact.push(best.exact_string());
    }
    let (fitted_exponent, fitted_constant, fit_note) = match fit_exponent(radii, &values) {
        Ok((e, c)) => (Some(e), Some(c), None),
        Err(msg) => (None, None, Some(msg)),
    };
    Ok(DiscrepancyReport {
        radii: radii.to_vec(),
        values,
        exact,
        band: T::of(band),
        fitted_exponent,
        fitted_constant,
        fit_note,
        anchors_used: anchors.len(),
        seed: w.gen.seed,
    })
}

/// `r(h) = Π max(1, |h_i|)`.
pub fn r_of(h: &[i64]) -> u128 {
    h.iter().map(|&x| x.unsigned_abs().max(1) as u128).product()
}

/// Erdős–Turán–Koksma bound for the box discrepancy of `points`. The phase
/// `⟨h, x⟩ mod 1` is reduced exactly in fixed point before the trig call.
pub fn etk_bound<T: Scalar>(points: &[TorusPoint], n0: i64, bits: u32, budget: u64) -> Result<T> {
    if n0 < 1 || points.is_empty() {
        return Err(Error::InvalidArgument("etk needs n0 >= 1 and a nonempty set".into()));
    }
    let k = points[0].k;
    let count = ((2 * n0 + 1) as u128).pow(k as u32);
    if count > budget as u128 {
        return Err(Error::Budget { what: "ETK harmonics", needed: count, limit: budget as u128 });
    }
    let hs: Vec<Vec<i64>> = crate::lattice::neighborhood(&vec![0; k], n0, false)
        .into_iter()
        // h and -h contribute equal magnitudes: keep the lex-positive one, weight 2
        .filter(|h| h.iter().find(|&&x| x != 0).is_some_and(|&x| x > 0))
        .collect();
    let mask = crate::torus::modmask(bits);
    let scale = T::of((2f64).powi(-(bits as i32))) * T::TAU();
    let terms: Vec<T> = hs
        .par_iter()
        .map(|h| {
            let mut re = KahanSum::<T>::default();
            let mut im = KahanSum::<T>::default();
            for p in points {
                let mut ph: u64 = 0;
                for i in 0..k {
                    ph = ph.wrapping_add(p.c[i].wrapping_mul(h[i] as u64));
                }
                let ang = T::of((ph & mask) as f64) * scale;
                re.add(ang.cos());
                im.add(ang.sin());
            }
            let mag = re.value().hypot(im.value());
            T::of(2.0) * mag / T::of(r_of(h) as f64)
        })
        .collect();
    let mut sum = KahanSum::<T>::default();
    for t in terms {
        sum.add(t);
    }
    let lead = T::of(2.0 * points.len() as f64 / (n0 + 1) as f64);
    Ok(T::of(1.5).powi(k as i32) * (lead + sum.value()))
}

#[derive(Clone, Debug, Serialize)]
pub struct EtkReport<T: Scalar> {
    pub n0: i64,
    pub set_size: usize,
    pub bound: T,
    pub max_measured: T,
    pub boxes: usize,
    pub violations: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct StripLogReport<T: Scalar> {
    pub r: i64,
    pub exponent: u32,
    pub max_discrepancy: T,
    pub per_strip: Vec<T>,
    /// Smallest `C` with `max_discrepancy ≤ C (log 2r)^{k+d+1}`.
    pub constant: T,
}

/// Max strip discrepancy of `N_r^+[u]` over anchors, and the constant of the log bound.
pub fn strip_orbit_log_bound<T: Scalar>(w: &Window, r: i64, strips: &[Region], anchors: &[Vec<i64>]) -> Result<StripLogReport<T>> {
    if r < 1 {
        return Err(Error::InvalidArgument("r must be >= 1".into()));
    }
    let mut per_strip = Vec::new();
    for s in strips {
        if !matches!(s, Region::Strip { .. }) {
            return Err(Error::InvalidArgument("strip_orbit_log_bound takes strips".into()));
        }
        let rep = cube_discrepancy_sweep::<T>(w, s, &[r], anchors)?;
        per_strip.push(rep.values[0]);
    }
    let max = per_strip.iter().copied().fold(T::zero(), T::max);
    let exponent = (w.gen.k + w.d() + 1) as u32;
    let lg = T::of((2.0 * r as f64).ln()).powi(exponent as i32);
    Ok(StripLogReport { r, exponent, max_discrepancy: max, per_strip, constant: max / lg })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::torus::{fx_from_f64, sample_generators};
    use proptest::prelude::*;

    const B: u32 = 62;

    #[test]
    fn counts_example() {
        let m = Measure::Exact { num: 1, exp: 2 };
        let d = discrepancy_from_counts(4, 10, &m);
        assert_eq!(d.value, 1.5);
        assert_eq!(d.exact_string().unwrap(), "3/2^1");
        assert_eq!(discrepancy_from_counts(0, 0, &m).value, 0.0);
    }

    #[test]
    fn whole_torus_has_zero_discrepancy() {
        let g = sample_generators(1, 2, 2, B, 4).unwrap();
        let w = Window::new(g, TorusPoint::zero(2), 10, Region::Torus, Region::Torus).unwrap();
        let rep = cube_discrepancy_sweep::<f64>(&w, &Region::Torus, &[4, 6, 8], &[vec![-10, -10], vec![0, 0]]).unwrap();
        assert!(rep.values.iter().all(|&v| v == 0.0));
        assert!(rep.fitted_exponent.is_none());
    }

    #[test]
    fn single_radius_refuses_fit() {
        let g = sample_generators(1, 2, 2, B, 4).unwrap();
        let (a, b) = crate::torus::demo_regions(0.125, B);
        let w = Window::new(g, TorusPoint::zero(2), 10, a.clone(), b).unwrap();
        let rep = cube_discrepancy_sweep::<f64>(&w, &a, &[1], &[vec![0, 0]]).unwrap();
        assert_eq!(rep.values.len(), 1);
        assert!(rep.fit_note.is_some());
    }

    #[test]
    fn r_of_example() {
        assert_eq!(r_of(&[2, -3]), 6);
        assert_eq!(r_of(&[0, 0]), 1);
    }

    #[test]
    fn singleton_etk_at_least_one() {
        let p = TorusPoint::from_coords(&[fx_from_f64(0.3, B), fx_from_f64(0.7, B)], B);
        let b: f64 = etk_bound(&[p], 3, B, 1 << 20).unwrap();
        assert!(b >= 1.0);
        let b32: f32 = etk_bound(&[p], 3, B, 1 << 20).unwrap();
        assert!((b32 as f64 - b).abs() < 1e-3 * b);
    }

    #[test]
    fn union_split_is_subadditive() {
        let g = sample_generators(2, 2, 2, B, 4).unwrap();
        let w = Window::new(g, TorusPoint::zero(2), 12, Region::Torus, Region::Torus).unwrap();
        let b1 = Region::Box { corner: vec![0, 0], sides: vec![fx_from_f64(0.25, B), fx_from_f64(0.5, B)] };
        let b2 = Region::Box { corner: vec![fx_from_f64(0.5, B), 0], sides: vec![fx_from_f64(0.25, B), fx_from_f64(0.25, B)] };
        let m1 = Measure::of_region(&b1, 2, B);
        let m2 = Measure::of_region(&b2, 2, B);
        let (Measure::Exact { num: n1, exp }, Measure::Exact { num: n2, .. }) = (&m1, &m2) else { panic!() };
        let mu = Measure::Exact { num: n1 + n2, exp: *exp };
        let f = crate::lattice::neighborhood(&[-5, -5], 9, true);
        let u = Region::Union { parts: vec![b1.clone(), b2.clone()] };
        let whole = discrepancy(&w, &f, &u, &mu).value;
        let parts = discrepancy(&w, &f, &b1, &m1).value + discrepancy(&w, &f, &b2, &m2).value;
        assert!(whole <= parts + 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn discrepancy_bounded_by_size(seed in 0u64..50, n in 0i64..6) {
            let g = sample_generators(seed, 2, 2, B, 4).unwrap();
            let (a, b) = crate::torus::demo_regions(0.125, B);
            let w = Window::new(g, TorusPoint::zero(2), 8, a.clone(), b).unwrap();
            let f = crate::lattice::neighborhood(&[0, 0], n, true);
            let m = Measure::of_region(&a, 2, B);
            let dv = discrepancy(&w, &f, &a, &m);
            prop_assert!(dv.value <= f.len() as f64 + 1e-9);
        }

        #[test]
        fn sweep_is_translation_covariant(seed in 0u64..20, sx in -3i64..3, sy in -3i64..3) {
            let g = sample_generators(seed, 2, 2, B, 4).unwrap();
            let (a, b) = crate::torus::demo_regions(0.125, B);
            let w = Window::new(g.clone(), TorusPoint::zero(2), 12, a.clone(), b.clone()).unwrap();
            // moving the anchor of the window by s equals shifting every cube anchor by s
            let shift = vec![sx, sy];
            let w2 = Window::new(g, w.act(&shift), 12, a.clone(), b).unwrap();
            let anchors = vec![vec![-4, -4], vec![0, 1]];
            let moved: Vec<Vec<i64>> = anchors.iter().map(|x| vec![x[0] + sx, x[1] + sy]).collect();
            let r1 = cube_discrepancy_sweep::<f64>(&w, &a, &[4], &moved).unwrap();
            let r2 = cube_discrepancy_sweep::<f64>(&w2, &a, &[4], &anchors).unwrap();
            prop_assert_eq!(r1.values, r2.values);
        }
    }
}
