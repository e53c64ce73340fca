//! Fixed-point torus `T^k`, generator sets and region membership.
//!
//! A coordinate is an integer in `[0, 2^bits)` standing for `c / 2^bits`.
//! All arithmetic is wrapping modulo `2^bits`, so the action is exact.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_K: usize = 4;
pub const MAX_D: usize = 6;
const MAX_REDRAWS: u32 = 1000;

#[inline]
pub fn modmask(bits: u32) -> u64 {
    if bits >= 64 {
        u64::MAX
    } else {
        (1u64 << bits) - 1
    }
}

/// Fixed-point value of a dyadic/decimal fraction in `[0,1)`.
pub fn fx_from_f64(x: f64, bits: u32) -> u64 {
    let x = x.rem_euclid(1.0);
    let scaled = x * (2f64).powi(bits as i32);
    (scaled as u128).min(modmask(bits) as u128) as u64
}

pub fn fx_to_f64(c: u64, bits: u32) -> f64 {
    c as f64 / (2f64).powi(bits as i32)
}

/// Signed wrap distance of `a - b` on the circle, as a magnitude in `[0, 2^(bits-1)]`.
#[inline]
pub fn wrap_dist(a: u64, b: u64, bits: u32) -> u64 {
    let m = modmask(bits);
    let diff = a.wrapping_sub(b) & m;
    let other = (m - diff).wrapping_add(1) & m;
    diff.min(other)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TorusPoint {
    pub k: usize,
    pub c: [u64; MAX_K],
}

impl TorusPoint {
    pub fn zero(k: usize) -> Self {
        Self { k, c: [0; MAX_K] }
    }

    pub fn from_coords(coords: &[u64], bits: u32) -> Self {
        let mut c = [0; MAX_K];
        for (i, &v) in coords.iter().enumerate() {
            c[i] = v & modmask(bits);
        }
        Self { k: coords.len(), c }
    }

    pub fn coords(&self) -> &[u64] {
        &self.c[..self.k]
    }

    #[inline]
    pub fn add_scaled(&mut self, x: &[u64; MAX_K], n: i64, bits: u32) {
        let m = modmask(bits);
        for i in 0..self.k {
            self.c[i] = self.c[i].wrapping_add(x[i].wrapping_mul(n as u64)) & m;
        }
    }

    pub fn to_f64(&self, bits: u32) -> Vec<f64> {
        self.coords().iter().map(|&c| fx_to_f64(c, bits)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneratorSet {
    pub k: usize,
    pub d: usize,
    pub bits: u32,
    pub x: Vec<[u64; MAX_K]>,
    pub seed: u64,
    pub freeness_radius: u32,
    pub redraws: u32,
}

impl GeneratorSet {
    /// `Σ n_j x_j` as a torus vector.
    pub fn combo(&self, n: &[i64]) -> TorusPoint {
        let mut p = TorusPoint::zero(self.k);
        for (j, &nj) in n.iter().enumerate() {
            p.add_scaled(&self.x[j], nj, self.bits);
        }
        p
    }

    /// Explicit generators (for hand-built examples); runs the freeness check.
    pub fn from_vectors(k: usize, bits: u32, x: Vec<Vec<u64>>, freeness_radius: u32) -> Result<Self> {
        let d = x.len();
        check_dims(k, d, bits)?;
        let mut xs = Vec::with_capacity(d);
        for v in &x {
            if v.len() != k {
                return Err(Error::InvalidArgument(format!("generator has {} coords, k={k}", v.len())));
            }
            let mut a = [0u64; MAX_K];
            for (i, &c) in v.iter().enumerate() {
                a[i] = c & modmask(bits);
            }
            xs.push(a);
        }
        let g = Self { k, d, bits, x: xs, seed: 0, freeness_radius, redraws: 0 };
        if freeness_radius > 0 && !is_free(&g, freeness_radius, u64::MAX)? {
            return Err(Error::Freeness(0));
        }
        Ok(g)
    }
}

fn check_dims(k: usize, d: usize, bits: u32) -> Result<()> {
    if k == 0 || k > MAX_K {
        return Err(Error::InvalidArgument(format!("k={k} outside 1..={MAX_K}")));
    }
    if d == 0 || d > MAX_D {
        return Err(Error::InvalidArgument(format!("d={d} outside 1..={MAX_D}")));
    }
    if !(32..=62).contains(&bits) {
        return Err(Error::InvalidArgument(format!("bits={bits} outside 32..=62")));
    }
    Ok(())
}

/// Exhaustive window-freeness: no nonzero `n` with `‖n‖∞ ≤ radius` maps to zero.
pub fn is_free(g: &GeneratorSet, radius: u32, budget: u64) -> Result<bool> {
    let side = 2 * radius as u128 + 1;
    let total = side.pow(g.d as u32);
    if total > budget as u128 {
        return Err(Error::Budget { what: "freeness enumeration", needed: total, limit: budget as u128 });
    }
    let r = radius as i64;
    let mut n = vec![-r; g.d];
    // Partial sums per level avoid recomputing the full combination.
    let mut partial = vec![TorusPoint::zero(g.k); g.d + 1];
    for j in 0..g.d {
        let mut p = partial[j];
        p.add_scaled(&g.x[j], n[j], g.bits);
        partial[j + 1] = p;
    }
    loop {
        if n.iter().any(|&v| v != 0) && partial[g.d].coords().iter().all(|&c| c == 0) {
            return Ok(false);
        }
        let mut j = g.d;
        loop {
            if j == 0 {
                return Ok(true);
            }
            j -= 1;
            if n[j] < r {
                n[j] += 1;
                break;
            }
            n[j] = -r;
        }
        for l in j..g.d {
            let mut p = partial[l];
            p.add_scaled(&g.x[l], n[l], g.bits);
            partial[l + 1] = p;
        }
    }
}

pub fn sample_generators(seed: u64, k: usize, d: usize, bits: u32, freeness_radius: u32) -> Result<GeneratorSet> {
    sample_generators_budget(seed, k, d, bits, freeness_radius, 1 << 31)
}

pub fn sample_generators_budget(
    seed: u64,
    k: usize,
    d: usize,
    bits: u32,
    freeness_radius: u32,
    budget: u64,
) -> Result<GeneratorSet> {
    check_dims(k, d, bits)?;
    if freeness_radius < 1 {
        return Err(Error::InvalidArgument("freeness_radius must be >= 1".into()));
    }
    let m = modmask(bits);
    for attempt in 0..MAX_REDRAWS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt as u64));
        let mut x = Vec::with_capacity(d);
        for _ in 0..d {
            let mut v = [0u64; MAX_K];
            for c in v.iter_mut().take(k) {
                *c = rng.gen::<u64>() & m;
            }
            x.push(v);
        }
        let g = GeneratorSet { k, d, bits, x, seed, freeness_radius, redraws: attempt };
        if is_free(&g, freeness_radius, budget)? {
            return Ok(g);
        }
    }
    Err(Error::Freeness(MAX_REDRAWS))
}

/// Region descriptors. Parameters are fixed-point in the generator set's bit width.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Region {
    Torus,
    /// Closed Euclidean ball (torus metric).
    Disk {
        #[serde(with = "crate::io::hex_vec")]
        center: Vec<u64>,
        #[serde(with = "crate::io::hex_u64")]
        radius: u64,
    },
    /// Closed box `corner + [0, sides]` coordinatewise (mod 1).
    Box {
        #[serde(with = "crate::io::hex_vec")]
        corner: Vec<u64>,
        #[serde(with = "crate::io::hex_vec")]
        sides: Vec<u64>,
    },
    /// `[a, a+width) × [0,1)^{k-1}`; `width = 2^bits` is the whole torus.
    Strip {
        #[serde(with = "crate::io::hex_u64")]
        a: u64,
        #[serde(with = "crate::io::hex_u64")]
        width: u64,
    },
    Union { parts: Vec<Region> },
    Difference { base: std::boxed::Box<Region>, minus: std::boxed::Box<Region> },
}

impl Region {
    pub fn contains(&self, p: &TorusPoint, bits: u32) -> bool {
        match self {
            Region::Torus => true,
            Region::Disk { center, radius } => {
                let r2 = (*radius as u128) * (*radius as u128);
                let mut s: u128 = 0;
                for (i, &c) in center.iter().enumerate() {
                    let dlt = wrap_dist(p.c[i], c, bits) as u128;
                    s += dlt * dlt;
                    if s > r2 {
                        return false;
                    }
                }
                true
            }
            Region::Box { corner, sides } => {
                let m = modmask(bits);
                corner.iter().zip(sides).enumerate().all(|(i, (&a, &s))| (p.c[i].wrapping_sub(a) & m) <= s)
            }
            Region::Strip { a, width } => {
                let m = modmask(bits);
                (p.c[0].wrapping_sub(*a) & m) < *width
            }
            Region::Union { parts } => parts.iter().any(|r| r.contains(p, bits)),
            Region::Difference { base, minus } => base.contains(p, bits) && !minus.contains(p, bits),
        }
    }

    /// Exact measure as a fraction `num / 2^(bits*k)` when representable.
    pub fn exact_measure(&self, k: usize, bits: u32) -> Option<u128> {
        let one: u128 = 1u128 << bits;
        match self {
            Region::Torus => Some(one.checked_pow(k as u32)?),
            Region::Box { sides, .. } => {
                let mut acc: u128 = 1;
                for &s in sides {
                    acc = acc.checked_mul((s as u128).min(one))?;
                }
                Some(acc)
            }
            Region::Strip { width, .. } => {
                let mut acc = (*width as u128).min(one);
                for _ in 1..k {
                    acc = acc.checked_mul(one)?;
                }
                Some(acc)
            }
            _ => None,
        }
    }

    /// Measure as a real number. Disks use the Euclidean ball volume, valid for diameter < 1.
    pub fn measure_f64(&self, k: usize, bits: u32) -> f64 {
        match self {
            Region::Disk { radius, .. } => {
                let r = fx_to_f64(*radius, bits);
                ball_volume(k, r)
            }
            Region::Union { parts } => parts.iter().map(|p| p.measure_f64(k, bits)).sum(),
            Region::Difference { base, minus } => base.measure_f64(k, bits) - minus.measure_f64(k, bits),
            _ => {
                let num = self.exact_measure(k, bits).unwrap_or(0);
                num as f64 / (2f64).powi((bits as usize * k) as i32)
            }
        }
    }

    /// `ℓ∞` diameter of a disk or box, in units of the torus.
    pub fn linf_diameter(&self, bits: u32) -> Option<f64> {
        match self {
            Region::Disk { radius, .. } => Some(2.0 * fx_to_f64(*radius, bits)),
            Region::Box { sides, .. } => sides.iter().map(|&s| fx_to_f64(s, bits)).reduce(f64::max),
            _ => None,
        }
    }
}

fn ball_volume(k: usize, r: f64) -> f64 {
    use std::f64::consts::PI;
    match k {
        1 => 2.0 * r,
        2 => PI * r * r,
        3 => 4.0 / 3.0 * PI * r.powi(3),
        4 => PI * PI / 2.0 * r.powi(4),
        _ => f64::NAN,
    }
}

/// Disk at `center` (k=2) with area `area`, plus a closed square of equal area at `square_center`.
pub fn disk_and_square(area: f64, center: [f64; 2], square_center: [f64; 2], bits: u32) -> (Region, Region) {
    let radius = (area / std::f64::consts::PI).sqrt();
    let side = area.sqrt();
    let disk = Region::Disk {
        center: vec![fx_from_f64(center[0], bits), fx_from_f64(center[1], bits)],
        radius: fx_from_f64(radius, bits),
    };
    let sq = Region::Box {
        corner: vec![
            fx_from_f64(square_center[0] - side / 2.0, bits),
            fx_from_f64(square_center[1] - side / 2.0, bits),
        ],
        sides: vec![fx_from_f64(side, bits), fx_from_f64(side, bits)],
    };
    (disk, sq)
}

/// The standard demo pair: disk centred at (1/4,1/4), square centred at (3/4,1/4).
pub fn demo_regions(area: f64, bits: u32) -> (Region, Region) {
    disk_and_square(area, [0.25, 0.25], [0.75, 0.25], bits)
}

#[cfg(test)]
mod tests {
    use super::*;

    const B: u32 = 62;

    #[test]
    fn mod_one_addition() {
        let g = GeneratorSet::from_vectors(2, B, vec![vec![fx_from_f64(0.75, B), fx_from_f64(0.5, B)]], 0).unwrap();
        let mut p = TorusPoint::from_coords(&[fx_from_f64(0.5, B), fx_from_f64(0.75, B)], B);
        p.add_scaled(&g.x[0], 1, B);
        assert_eq!(p.coords(), &[fx_from_f64(0.25, B), fx_from_f64(0.25, B)]);
    }

    #[test]
    fn sampler_is_deterministic() {
        let a = sample_generators(1, 2, 3, B, 8).unwrap();
        let b = sample_generators(1, 2, 3, B, 8).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.redraws, 0);
    }

    #[test]
    fn freeness_detects_torsion() {
        // x = 1/4 has 4x = 0.
        let quarter = 1u64 << (B - 2);
        assert!(GeneratorSet::from_vectors(1, B, vec![vec![quarter]], 4).is_err());
        assert!(GeneratorSet::from_vectors(1, B, vec![vec![quarter]], 3).is_ok());
    }

    #[test]
    fn disk_boundary_is_closed() {
        let r = fx_from_f64(0.125, B);
        let disk = Region::Disk { center: vec![0, 0], radius: r };
        let p = TorusPoint::from_coords(&[r, 0], B);
        assert!(disk.contains(&p, B));
        let q = TorusPoint::from_coords(&[r + 1, 0], B);
        assert!(!disk.contains(&q, B));
        // wraps around zero
        let w = TorusPoint::from_coords(&[modmask(B) - r + 1, 0], B);
        assert!(disk.contains(&w, B));
    }

    #[test]
    fn strip_width_one_is_everything() {
        let s = Region::Strip { a: 12345, width: 1u64 << B };
        assert!(s.contains(&TorusPoint::from_coords(&[12344, 7], B), B));
    }

    #[test]
    fn demo_regions_have_small_diameter() {
        let (a, b) = demo_regions(0.125, B);
        assert!(a.linf_diameter(B).unwrap() < 0.5);
        assert!(b.linf_diameter(B).unwrap() < 0.5);
        assert!((a.measure_f64(2, B) - 0.125).abs() < 1e-12);
        assert!((b.measure_f64(2, B) - 0.125).abs() < 1e-12);
    }
}
