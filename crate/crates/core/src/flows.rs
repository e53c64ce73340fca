//! Exact dyadic flows `f_m` on a window.
//!
//! Values are `num / 2^exp` with `i128` numerators. Only lex-positive
//! directions are stored; the negative direction reads the negated value at
//! the other endpoint, so antisymmetry holds by construction.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::PrefixCount;
use crate::lattice::{directions, linf, neg_dir, Cube, Window};
use crate::scalar::Scalar;

/// Edge flow on the cube `‖n‖∞ ≤ valid_radius`, lex-positive directions stored.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DyadicFlow {
    pub d: usize,
    pub m: u32,
    pub exp: u32,
    pub valid_radius: i64,
    pub cube: Cube,
    pub num: Vec<i128>,
    dirs: Vec<Vec<i64>>,
    offs: Vec<isize>,
}

impl DyadicFlow {
    pub fn zero(d: usize, valid_radius: i64, exp: u32, m: u32) -> Self {
        let cube = Cube::new(d, valid_radius.max(0));
        let dirs = directions(d);
        let offs = dirs.iter().map(|g| cube.offset(g)).collect();
        let npos = dirs.len() / 2;
        Self { d, m, exp, valid_radius, num: vec![0; cube.len * npos], cube, dirs, offs }
    }

    pub fn npos(&self) -> usize {
        self.dirs.len() / 2
    }

    pub fn dirs(&self) -> &[Vec<i64>] {
        &self.dirs
    }

    /// Own-cube index of the edge slot holding `(v, v+γ)`, with the sign to apply.
    #[inline]
    fn slot(&self, v: usize, dir: usize) -> Option<(usize, i128)> {
        let half = self.npos();
        let mut c = [0i64; 8];
        self.cube.coords_into(v, &mut c[..self.d]);
        let g = &self.dirs[dir];
        if !(0..self.d).all(|i| (c[i] + g[i]).abs() <= self.cube.r) {
            return None;
        }
        if dir >= half {
            Some((v * half + (dir - half), 1))
        } else {
            let w = (v as isize + self.offs[dir]) as usize;
            let p = neg_dir(self.d, dir) - half;
            Some((w * half + p, -1))
        }
    }

    /// Numerator of `f(v, γ·v)` for `v` an index of `self.cube`.
    #[inline]
    pub fn get_idx(&self, v: usize, dir: usize) -> Option<i128> {
        self.slot(v, dir).map(|(s, sg)| sg * self.num[s])
    }

    pub fn get(&self, n: &[i64], dir: usize) -> Option<i128> {
        self.cube.try_index(n).and_then(|v| self.get_idx(v, dir))
    }

    /// Adds `x` to `f(v, γ·v)` (and `-x` to the reverse).
    pub fn add_idx(&mut self, v: usize, dir: usize, x: i128) -> Result<()> {
        let (s, sg) = self.slot(v, dir).ok_or_else(|| Error::WindowTooSmall("edge outside flow cube".into()))?;
        self.num[s] = self.num[s].checked_add(sg * x).ok_or(Error::Overflow("flow update"))?;
        Ok(())
    }

    pub fn set_idx(&mut self, v: usize, dir: usize, x: i128) -> Result<()> {
        let (s, sg) = self.slot(v, dir).ok_or_else(|| Error::WindowTooSmall("edge outside flow cube".into()))?;
        self.num[s] = sg * x;
        Ok(())
    }

    /// Numerator of the flow out of `v`; `None` if some edge at `v` is outside.
    pub fn fout_idx(&self, v: usize) -> Option<i128> {
        let mut s: i128 = 0;
        for k in 0..self.dirs.len() {
            s += self.get_idx(v, k)?;
        }
        Some(s)
    }

    pub fn value_f64(&self, v: usize, dir: usize) -> Option<f64> {
        self.get_idx(v, dir).map(|x| x as f64 / (2f64).powi(self.exp as i32))
    }

    pub fn sup_num(&self) -> i128 {
        self.num.iter().map(|x| x.abs()).max().unwrap_or(0)
    }

    pub fn sup_norm<T: Scalar>(&self) -> T {
        T::of(self.sup_num() as f64 / (2f64).powi(self.exp as i32))
    }

    /// Rescale to a larger exponent.
    pub fn with_exp(&self, exp: u32) -> Result<Self> {
        if exp < self.exp {
            return Err(Error::InvalidArgument("cannot lower the exponent".into()));
        }
        let sh = exp - self.exp;
        let mut out = self.clone();
        out.exp = exp;
        for x in out.num.iter_mut() {
            *x = x.checked_mul(1i128 << sh).ok_or(Error::Overflow("exponent rescale"))?;
        }
        Ok(out)
    }

    /// The same flow on a smaller cube.
    pub fn restrict(&self, radius: i64) -> Self {
        let mut out = Self::zero(self.d, radius, self.exp, self.m);
        let half = self.npos();
        for v in 0..out.cube.len {
            let src = out.cube.reindex(v, &self.cube).expect("smaller cube");
            for p in 0..half {
                if out.slot(v, half + p).is_some() {
                    out.num[v * half + p] = self.num[src * half + p];
                }
            }
        }
        out
    }

    /// Stored entries inside the cube: `(n, direction index, numerator)` for nonzero values.
    pub fn entries(&self) -> Vec<(Vec<i64>, usize, i128)> {
        let half = self.npos();
        let mut out = Vec::new();
        for v in 0..self.cube.len {
            for p in 0..half {
                let x = self.num[v * half + p];
                if x != 0 {
                    out.push((self.cube.coords(v), half + p, x));
                }
            }
        }
        out
    }

    pub fn to_doc(&self) -> FlowDoc {
        FlowDoc {
            d: self.d,
            m: self.m,
            exp: self.exp,
            valid_radius: self.valid_radius,
            entries: self.entries().into_iter().map(|(n, k, x)| (n, k, x.to_string())).collect(),
        }
    }

    pub fn from_doc(doc: &FlowDoc) -> Result<Self> {
        let mut f = Self::zero(doc.d, doc.valid_radius, doc.exp, doc.m);
        for (n, k, x) in &doc.entries {
            let v = f.cube.try_index(n).ok_or_else(|| Error::InvalidArgument("entry outside cube".into()))?;
            let val: i128 = x.parse().map_err(|_| Error::InvalidArgument(format!("bad numerator {x}")))?;
            f.set_idx(v, *k, val)?;
        }
        Ok(f)
    }
}

/// JSON form: header plus `(n, direction index, numerator)` entries.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct FlowDoc {
    pub d: usize,
    pub m: u32,
    pub exp: u32,
    pub valid_radius: i64,
    pub entries: Vec<(Vec<i64>, usize, String)>,
}

/// `ξ(Q)` for the discrete `2^m`-cube at `base`: `(|Q∩A| - |Q∩B|, d·m)`.
pub fn xi(w: &Window, base: &[i64], m: u32) -> Result<(i64, u32)> {
    let side = 1i64 << m;
    let hi: Vec<i64> = base.iter().map(|x| x + side - 1).collect();
    if !w.cube.contains(base) || !w.cube.contains(&hi) {
        return Err(Error::WindowTooSmall(format!("2^{m}-cube at {base:?}")));
    }
    let mut diff = 0i64;
    for n in crate::lattice::neighborhood(base, side - 1, true) {
        diff += w.demand(w.cube.index(&n));
    }
    Ok((diff, w.d() as u32 * m))
}

/// The unit flow along `u, u+γ, …, u+nγ` as `(from, to)` pairs, each carrying +1.
pub fn path_flow(u: &[i64], gamma: &[i64], n: i64) -> Vec<(Vec<i64>, Vec<i64>)> {
    (0..n.max(0))
        .map(|j| {
            let a: Vec<i64> = u.iter().zip(gamma).map(|(x, g)| x + j * g).collect();
            let b: Vec<i64> = a.iter().zip(gamma).map(|(x, g)| x + g).collect();
            (a, b)
        })
        .collect()
}

fn demand_array(w: &Window) -> Vec<i64> {
    (0..w.cube.len).map(|i| w.demand(i)).collect()
}

/// Sliding window sum along each axis: `forward` sums `x .. x+L-1`, backward `x-L+1 .. x`.
fn box_pass(cube: &Cube, src: &[i64], l: i64, forward: bool) -> Vec<i64> {
    let mut cur = src.to_vec();
    let side = cube.side;
    for axis in 0..cube.d {
        let stride = cube.strides[axis];
        let block = stride * side;
        let mut next = vec![0i64; cube.len];
        let mut base = 0;
        let mut pre = vec![0i64; side + 1];
        while base < cube.len {
            for off in 0..stride {
                let start = base + off;
                for t in 0..side {
                    pre[t + 1] = pre[t] + cur[start + t * stride];
                }
                for t in 0..side {
                    let (a, b) = if forward {
                        (t, (t + l as usize).min(side))
                    } else {
                        (t.saturating_sub(l as usize - 1), t + 1)
                    };
                    next[start + t * stride] = pre[b] - pre[a];
                }
            }
            base += block;
        }
        cur = next;
    }
    cur
}

/// `T(u) = Σ_{C ∋ u} (|C∩A| - |C∩B|)` over discrete `L`-cubes, on the window
/// cube. Trusted where `‖u‖∞ ≤ W - (L-1)`.
fn tent_sums(w: &Window, l: i64) -> Vec<i64> {
    let a = demand_array(w);
    let boxes = box_pass(&w.cube, &a, l, true);
    box_pass(&w.cube, &boxes, l, false)
}

/// Numerators of `θ_m` over `2^{2dm}` on edges with both ends in `‖n‖∞ ≤ radius`.
fn theta_numerators(w: &Window, m: u32, radius: i64) -> Result<DyadicFlow> {
    let d = w.d();
    let l = 1i64 << (m - 1);
    let t = tent_sums(w, l);
    let mut out = DyadicFlow::zero(d, radius, 2 * d as u32 * m, m);
    let half = out.npos();
    let pos_dirs: Vec<Vec<i64>> = out.dirs[half..].to_vec();
    let wc = &w.cube;
    let oc = out.cube.clone();
    out.num.par_chunks_mut(half).enumerate().try_for_each(|(v, slots)| -> Result<()> {
        let c = oc.coords(v);
        for (p, g) in pos_dirs.iter().enumerate() {
            let tip: Vec<i64> = c.iter().zip(g).map(|(a, b)| a + b).collect();
            if linf(&tip) > oc.r {
                continue;
            }
            let z = g.iter().filter(|&&x| x == 0).count() as u32;
            let mut acc: i128 = 0;
            let mut q = vec![0i64; d];
            for j in 0..l {
                for i in 0..d {
                    q[i] = c[i] - j * g[i];
                }
                acc += t[wc.index(&q)] as i128;
                for i in 0..d {
                    q[i] = c[i] + (j + 1) * g[i];
                }
                acc -= t[wc.index(&q)] as i128;
            }
            slots[p] = acc.checked_mul(1i128 << z).ok_or(Error::Overflow("theta numerator"))?;
        }
        Ok(())
    })?;
    Ok(out)
}

/// `f_0, f_1, …, f_m` with `f_j = f_{j-1} + θ_j`, each on its valid cube
/// `‖n‖∞ ≤ W - (2^j - 1)`, exponent `2dj`.
pub fn build_fm_sequence(w: &Window, m: u32) -> Result<Vec<DyadicFlow>> {
    let d = w.d();
    let need = (1i64 << m) - 1;
    if w.w - need < 1 {
        return Err(Error::WindowTooSmall(format!("stage {m} needs W >= {}", need + 1)));
    }
    let mut seq = vec![DyadicFlow::zero(d, w.w, 0, 0)];
    for j in 1..=m {
        let radius = w.w - ((1i64 << j) - 1);
        let theta = theta_numerators(w, j, radius)?;
        let prev = seq.last().unwrap().restrict(radius).with_exp(2 * d as u32 * j)?;
        let mut f = theta;
        for (a, b) in f.num.iter_mut().zip(&prev.num) {
            *a = a.checked_add(*b).ok_or(Error::Overflow("f_m accumulation"))?;
        }
        f.m = j;
        seq.push(f);
    }
    Ok(seq)
}

pub fn build_fm(w: &Window, m: u32) -> Result<DyadicFlow> {
    Ok(build_fm_sequence(w, m)?.pop().unwrap())
}

/// First vertex where the flow-out identity fails.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct IdentityViolation {
    pub n: Vec<i64>,
    pub lhs: String,
    pub rhs: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct IdentityCheck {
    pub ok: bool,
    pub checked: usize,
    pub worst: Option<IdentityViolation>,
}

/// Checks `1_A(u) - 1_B(u) - fout(u) = 2^{-dm} Σ_{Q ∋ u} ξ(Q)` exactly at every
/// vertex whose edges all lie in the flow cube, the right side by prefix counts
/// over all `2^{dm}` cubes containing `u`.
pub fn verify_fout_identity(w: &Window, f: &DyadicFlow, m: u32) -> IdentityCheck {
    let d = w.d();
    let pa = PrefixCount::new(&w.cube, &w.mask_a);
    let pb = PrefixCount::new(&w.cube, &w.mask_b);
    let side = 1i64 << m;
    let dm = d as u32 * m;
    let interior = f.valid_radius - 1;
    if interior < 0 {
        return IdentityCheck { ok: true, checked: 0, worst: None };
    }
    let results: Vec<Option<IdentityViolation>> = (0..f.cube.len)
        .into_par_iter()
        .filter(|&v| f.cube.norm(v) <= interior)
        .map(|v| {
            let n = f.cube.coords(v);
            let widx = w.cube.index(&n);
            let fout = f.fout_idx(v).expect("interior vertex");
            // scale both sides by 2^{2dm}
            let lhs = ((w.demand(widx) as i128) << f.exp) - fout;
            let mut sum: i128 = 0;
            for b in crate::lattice::neighborhood(&n, side - 1, true) {
                let lo: Vec<i64> = b.iter().map(|x| x - (side - 1)).collect();
                let diff = pa.count(&lo, &b) as i128 - pb.count(&lo, &b) as i128;
                sum += diff;
            }
            // 2^{2dm} · 2^{-dm} · Σ diff / 2^{dm} = Σ diff, adjusted if exp ≠ 2dm
            let rhs = if f.exp >= 2 * dm { sum << (f.exp - 2 * dm) } else { sum >> (2 * dm - f.exp) };
            (lhs != rhs).then(|| IdentityViolation { n, lhs: lhs.to_string(), rhs: rhs.to_string() })
        })
        .collect();
    let checked = results.len();
    let worst = results.into_iter().flatten().next();
    IdentityCheck { ok: worst.is_none(), checked, worst }
}

/// Reduced dyadic rational `num / 2^exp`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Dyadic {
    pub num: i128,
    pub exp: u32,
}

impl Dyadic {
    pub fn new(num: i128, exp: u32) -> Self {
        let mut r = Self { num, exp };
        r.reduce();
        r
    }

    fn reduce(&mut self) {
        if self.num == 0 {
            self.exp = 0;
            return;
        }
        let tz = self.num.trailing_zeros().min(self.exp);
        self.num >>= tz;
        self.exp -= tz;
    }

    pub fn add(self, o: Self) -> Self {
        let e = self.exp.max(o.exp);
        Self::new((self.num << (e - self.exp)) + (o.num << (e - o.exp)), e)
    }

    /// Numerator at a fixed exponent, if exact.
    pub fn at_exp(self, e: u32) -> Option<i128> {
        (self.exp <= e).then(|| self.num << (e - self.exp))
    }
}

/// Direct evaluation of `θ_m` from the per-cube definition: for every `u`,
/// every `2^{m-1}`-cube `C ∋ u`, every `2^m`-cube `Q` with `C ∈ P(Q)`, spread
/// `ξ(C)` along the `2^d` straight paths of `φ_{u,Q}`. Edges with both ends in
/// `‖n‖∞ ≤ radius`; the result is in reduced dyadic form, not a fixed exponent.
pub fn theta_oracle(w: &Window, m: u32, radius: i64) -> Result<Vec<(Vec<i64>, usize, Dyadic)>> {
    let d = w.d();
    let l = 1i64 << (m - 1);
    let cube = Cube::new(d, radius);
    let dirs = directions(d);
    let half = dirs.len() / 2;
    let mut acc = vec![Dyadic::default(); cube.len * half];
    let reach = 2 * l; // sources within 2L of the region can touch it
    let src_r = radius + reach;
    if src_r + 2 * l > w.w {
        return Err(Error::WindowTooSmall("oracle needs a wider window".into()));
    }
    let dm = d as u32 * m;
    for u in crate::lattice::neighborhood(&vec![0; d], src_r, false) {
        for c in crate::lattice::neighborhood(&u, l - 1, true) {
            let base: Vec<i64> = c.iter().map(|x| x - (l - 1)).collect();
            // the cube C has base `base`, contains u
            let mut diff = 0i64;
            for x in crate::lattice::neighborhood(&base, l - 1, true) {
                diff += w.demand(w.cube.index(&x));
            }
            if diff == 0 {
                continue;
            }
            // ξ(C) / 2^{dm} / 2^d per path unit: diff / 2^{d(m-1)} / 2^{dm} / 2^d
            let unit = Dyadic::new(diff as i128, d as u32 * (m - 1) + dm + d as u32);
            for s in crate::lattice::neighborhood(&vec![0; d], 1, true) {
                let q: Vec<i64> = base.iter().zip(&s).map(|(b, si)| b - l * si).collect();
                for g in dirs.iter().chain(std::iter::once(&vec![0; d])) {
                    let tgt: Vec<i64> = u.iter().zip(g).map(|(a, b)| a + l * b).collect();
                    let inside = (0..d).all(|i| tgt[i] >= q[i] && tgt[i] < q[i] + 2 * l);
                    if !inside || g.iter().all(|&x| x == 0) {
                        continue;
                    }
                    let k = dirs.iter().position(|h| h == g).unwrap();
                    for (a, b) in path_flow(&u, g, l) {
                        let (from, dir, sign) = if k >= half { (a, k, 1) } else { (b, neg_dir(d, k), -1) };
                        let to: Vec<i64> = from.iter().zip(&dirs[dir]).map(|(x, y)| x + y).collect();
                        if cube.contains(&from) && cube.contains(&to) {
                            let slot = cube.index(&from) * half + (dir - half);
                            acc[slot] = acc[slot].add(Dyadic::new(sign * unit.num, unit.exp));
                        }
                    }
                }
            }
        }
    }
    let mut out = Vec::new();
    for v in 0..cube.len {
        for p in 0..half {
            let x = acc[v * half + p];
            let to: Vec<i64> = cube.coords(v).iter().zip(&dirs[half + p]).map(|(a, b)| a + b).collect();
            if cube.contains(&to) {
                out.push((cube.coords(v), half + p, x));
            }
        }
    }
    Ok(out)
}

/// `c·2^{1+ε} / (2^{d+εm} (2^ε - 1))`, the sup-norm tail `‖f_∞ - f_m‖∞` bound.
pub fn tail_bound<T: Scalar>(m: u32, c: T, d: usize, eps: T) -> T {
    let two = T::of(2.0);
    c * two.powf(T::one() + eps) / (two.powf(T::of_usize(d) + eps * T::of(m as f64)) * (two.powf(eps) - T::one()))
}

/// `max |f_m - f_{m-1}|` over edges of the smaller cube.
pub fn increment_sup<T: Scalar>(fm: &DyadicFlow, fprev: &DyadicFlow) -> Result<T> {
    let p = fprev.restrict(fm.valid_radius).with_exp(fm.exp)?;
    let sup = fm.num.iter().zip(&p.num).map(|(a, b)| (a - b).abs()).max().unwrap_or(0);
    Ok(T::of(sup as f64 / (2f64).powi(fm.exp as i32)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::torus::{fx_from_f64, sample_generators, GeneratorSet, Region, TorusPoint};
    use fixedbitset::FixedBitSet;

    const B: u32 = 62;

    /// A 1-d window with hand-set masks.
    fn line_window(wr: i64, a: &[i64], b: &[i64]) -> Window {
        let g = GeneratorSet::from_vectors(1, B, vec![vec![fx_from_f64(0.1234567, B)]], 0).unwrap();
        let mut w = Window::new(g, TorusPoint::zero(1), wr, Region::Torus, Region::Torus).unwrap();
        w.mask_a = FixedBitSet::with_capacity(w.cube.len);
        w.mask_b = FixedBitSet::with_capacity(w.cube.len);
        for &x in a {
            w.mask_a.insert(w.cube.index(&[x]));
        }
        for &x in b {
            w.mask_b.insert(w.cube.index(&[x]));
        }
        w
    }

    #[test]
    fn one_dimensional_stage_one() {
        let w = line_window(8, &[0], &[2]);
        let f = build_fm(&w, 1).unwrap();
        assert_eq!(f.exp, 2);
        let quarter = |n: i64, dir: usize| f.get(&[n], dir).unwrap();
        // direction 1 is +1, direction 0 is -1 in d = 1
        assert_eq!(quarter(0, 1), 1);
        assert_eq!(quarter(1, 1), 1);
        assert_eq!(quarter(0, 0), 1);
        assert_eq!(quarter(2, 1), -1);
        let v = f.cube.index(&[0]);
        assert_eq!(f.fout_idx(v).unwrap(), 2); // 1/2
        assert!(verify_fout_identity(&w, &f, 1).ok);
    }

    #[test]
    fn equal_masks_give_zero() {
        let g = sample_generators(1, 2, 2, B, 8).unwrap();
        let (a, _) = crate::torus::demo_regions(0.125, B);
        let w = Window::new(g, TorusPoint::zero(2), 12, a.clone(), a).unwrap();
        for f in build_fm_sequence(&w, 3).unwrap() {
            assert_eq!(f.sup_num(), 0);
        }
    }

    #[test]
    fn stage_zero_identity() {
        let g = sample_generators(2, 2, 2, B, 8).unwrap();
        let (a, b) = crate::torus::demo_regions(0.125, B);
        let w = Window::new(g, TorusPoint::zero(2), 6, a, b).unwrap();
        let f = build_fm(&w, 0).unwrap();
        assert!(verify_fout_identity(&w, &f, 0).ok);
    }

    #[test]
    fn xi_examples() {
        let w = line_window(6, &[0, 1], &[]);
        assert_eq!(xi(&w, &[0], 0).unwrap(), (1, 0));
        assert_eq!(xi(&w, &[0], 1).unwrap(), (2, 1));
        assert_eq!(xi(&w, &[3], 1).unwrap(), (0, 1));
        assert!(xi(&w, &[6], 1).is_err());
    }

    #[test]
    fn xi_two_dimensional_example() {
        let g = sample_generators(4, 2, 2, B, 4).unwrap();
        let mut w = Window::new(g, TorusPoint::zero(2), 4, Region::Torus, Region::Torus).unwrap();
        w.mask_a = FixedBitSet::with_capacity(w.cube.len);
        w.mask_b = FixedBitSet::with_capacity(w.cube.len);
        for n in [[0, 0], [0, 1], [1, 0]] {
            w.mask_a.insert(w.cube.index(&n));
        }
        w.mask_b.insert(w.cube.index(&[1, 1]));
        // (3 - 1) / 4 = 1/2
        assert_eq!(xi(&w, &[0, 0], 1).unwrap(), (2, 2));
    }

    #[test]
    fn path_flow_shapes() {
        assert!(path_flow(&[0, 0], &[1, 0], 0).is_empty());
        assert_eq!(path_flow(&[0, 0], &[1, 1], 1), vec![(vec![0, 0], vec![1, 1])]);
        let p = path_flow(&[0, 0], &[0, -1], 3);
        assert_eq!(p.len(), 3);
        assert_eq!(p[2].1, vec![0, -3]);
    }

    #[test]
    fn tail_bound_examples() {
        assert_eq!(tail_bound::<f64>(0, 1.0, 1, 1.0), 2.0);
        assert!(tail_bound::<f64>(5, 1.0, 2, 0.5) < tail_bound::<f64>(4, 1.0, 2, 0.5));
        assert!((tail_bound::<f32>(3, 2.0, 2, 0.5) as f64 - tail_bound::<f64>(3, 2.0, 2, 0.5)).abs() < 1e-5);
    }

    #[test]
    fn straight_line_form_matches_cube_form() {
        for (seed, d) in [(3u64, 1usize), (5, 2), (6, 2)] {
            let g = sample_generators(seed, 2, d, B, 8).unwrap();
            let (a, b) = crate::torus::demo_regions(0.2, B);
            let w = Window::new(g, TorusPoint::zero(2), 14, a, b).unwrap();
            for m in 1..=2u32 {
                let fast = theta_numerators(&w, m, 3).unwrap();
                let slow = theta_oracle(&w, m, 3).unwrap();
                for (n, k, x) in slow {
                    assert_eq!(Some(fast.get(&n, k).unwrap()), x.at_exp(fast.exp), "d={d} m={m} n={n:?} k={k}");
                }
            }
        }
    }

    #[test]
    fn flow_doc_roundtrip() {
        let g = sample_generators(8, 2, 2, B, 8).unwrap();
        let (a, b) = crate::torus::demo_regions(0.125, B);
        let w = Window::new(g, TorusPoint::zero(2), 10, a, b).unwrap();
        let f = build_fm(&w, 2).unwrap();
        let doc = f.to_doc();
        let s = serde_json::to_string(&doc).unwrap();
        let back = DyadicFlow::from_doc(&serde_json::from_str(&s).unwrap()).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn antisymmetry() {
        let g = sample_generators(8, 2, 2, B, 8).unwrap();
        let (a, b) = crate::torus::demo_regions(0.125, B);
        let w = Window::new(g, TorusPoint::zero(2), 10, a, b).unwrap();
        let f = build_fm(&w, 2).unwrap();
        let dirs = directions(2);
        for v in 0..f.cube.len {
            for k in 0..dirs.len() {
                if let Some(x) = f.get_idx(v, k) {
                    let u = f.cube.coords(v);
                    let t: Vec<i64> = u.iter().zip(&dirs[k]).map(|(p, q)| p + q).collect();
                    assert_eq!(f.get(&t, neg_dir(2, k)).unwrap(), -x);
                }
            }
        }
    }

    #[test]
    fn identity_and_locality_up_to_stage_three() {
        let g = sample_generators(11, 2, 2, B, 8).unwrap();
        let (a, b) = crate::torus::demo_regions(0.2, B);
        let small = Window::new(g.clone(), TorusPoint::zero(2), 12, a.clone(), b.clone()).unwrap();
        let big = Window::new(g, TorusPoint::zero(2), 18, a, b).unwrap();
        let fs = build_fm_sequence(&small, 3).unwrap();
        let fb = build_fm_sequence(&big, 3).unwrap();
        for m in 0..=3u32 {
            let f = &fs[m as usize];
            assert_eq!(f.exp, 4 * m);
            assert!(verify_fout_identity(&small, f, m).ok, "m={m}");
            assert_eq!(fb[m as usize].restrict(f.valid_radius), *f);
        }
    }
}
