//! Lattice side of the action: cubes of `Z^d`, directions, lex order, windows.

use std::cmp::Ordering;

use fixedbitset::FixedBitSet;

use crate::error::{Error, Result};
use crate::torus::{GeneratorSet, Region, TorusPoint};

/// All nonzero `γ ∈ {-1,0,1}^d` in lex order. Index `i` and `len-1-i` are negatives.
pub fn directions(d: usize) -> Vec<Vec<i64>> {
    let total = 3usize.pow(d as u32);
    let mut out = Vec::with_capacity(total - 1);
    for code in 0..total {
        let mut g = vec![0i64; d];
        let mut c = code;
        for i in (0..d).rev() {
            g[i] = (c % 3) as i64 - 1;
            c /= 3;
        }
        if g.iter().any(|&x| x != 0) {
            out.push(g);
        }
    }
    out
}

/// Lex-positive directions (first nonzero entry positive), in lex order.
pub fn positive_directions(d: usize) -> Vec<Vec<i64>> {
    let all = directions(d);
    let half = all.len() / 2;
    all[half..].to_vec()
}

/// Index of `γ` in [`directions`].
pub fn dir_index(g: &[i64]) -> usize {
    let d = g.len();
    let t = g.iter().fold(0usize, |a, &x| a * 3 + (x + 1) as usize);
    let zero = (3usize.pow(d as u32) - 1) / 2;
    if t < zero {
        t
    } else {
        t - 1
    }
}

pub fn neg_dir(d: usize, i: usize) -> usize {
    3usize.pow(d as u32) - 2 - i
}

/// `m ≺ n` iff the first nonzero entry of `n - m` is positive, which is plain
/// lexicographic order on integer vectors.
pub fn lex_compare(m: &[i64], n: &[i64]) -> Ordering {
    m.cmp(n)
}

pub fn linf(n: &[i64]) -> i64 {
    n.iter().map(|v| v.abs()).max().unwrap_or(0)
}

pub fn linf_dist(a: &[i64], b: &[i64]) -> i64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).max().unwrap_or(0)
}

/// `N_r[n]` (`plus = false`) or the discrete cube `n + {0..r}^d` (`plus = true`).
pub fn neighborhood(n: &[i64], r: i64, plus: bool) -> Vec<Vec<i64>> {
    let d = n.len();
    let (lo, hi) = if plus { (0, r) } else { (-r, r) };
    let side = (hi - lo + 1) as usize;
    let mut out = Vec::with_capacity(side.pow(d as u32));
    let mut off = vec![lo; d];
    loop {
        out.push(n.iter().zip(&off).map(|(a, b)| a + b).collect());
        let mut j = d;
        loop {
            if j == 0 {
                return out;
            }
            j -= 1;
            if off[j] < hi {
                off[j] += 1;
                break;
            }
            off[j] = lo;
        }
    }
}

/// The cube `‖n‖∞ ≤ r`, indexed with the first coordinate most significant so
/// index order equals lex order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cube {
    pub d: usize,
    pub r: i64,
    pub side: usize,
    pub len: usize,
    pub strides: Vec<usize>,
}

impl Cube {
    pub fn new(d: usize, r: i64) -> Self {
        assert!(r >= 0 && d >= 1);
        let side = (2 * r + 1) as usize;
        let mut strides = vec![1usize; d];
        for i in (0..d.saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * side;
        }
        Self { d, r, side, len: side.pow(d as u32), strides }
    }

    #[inline]
    pub fn contains(&self, n: &[i64]) -> bool {
        n.iter().all(|&v| v.abs() <= self.r)
    }

    #[inline]
    pub fn index(&self, n: &[i64]) -> usize {
        let mut idx = 0;
        for i in 0..self.d {
            idx += (n[i] + self.r) as usize * self.strides[i];
        }
        idx
    }

    pub fn try_index(&self, n: &[i64]) -> Option<usize> {
        self.contains(n).then(|| self.index(n))
    }

    #[inline]
    pub fn coords_into(&self, mut idx: usize, out: &mut [i64]) {
        for i in 0..self.d {
            let q = idx / self.strides[i];
            idx -= q * self.strides[i];
            out[i] = q as i64 - self.r;
        }
    }

    pub fn coords(&self, idx: usize) -> Vec<i64> {
        let mut v = vec![0; self.d];
        self.coords_into(idx, &mut v);
        v
    }

    #[inline]
    pub fn norm(&self, idx: usize) -> i64 {
        let mut buf = [0i64; 8];
        self.coords_into(idx, &mut buf[..self.d]);
        linf(&buf[..self.d])
    }

    /// Index offset for a direction vector (valid only when the target stays inside).
    pub fn offset(&self, g: &[i64]) -> isize {
        g.iter().zip(&self.strides).map(|(&a, &s)| a as isize * s as isize).sum()
    }

    /// Calls `f(dir_index, neighbor_index)` for every neighbor inside the cube.
    #[inline]
    pub fn for_each_neighbor(&self, idx: usize, dirs: &[Vec<i64>], offs: &[isize], mut f: impl FnMut(usize, usize)) {
        let mut c = [0i64; 8];
        self.coords_into(idx, &mut c[..self.d]);
        let interior = c[..self.d].iter().all(|v| v.abs() < self.r);
        for (k, g) in dirs.iter().enumerate() {
            if interior || g.iter().zip(&c[..self.d]).all(|(a, b)| (a + b).abs() <= self.r) {
                f(k, (idx as isize + offs[k]) as usize);
            }
        }
    }

    /// Index of the same lattice point in another cube with the same center.
    pub fn reindex(&self, idx: usize, other: &Cube) -> Option<usize> {
        let mut c = [0i64; 8];
        self.coords_into(idx, &mut c[..self.d]);
        other.try_index(&c[..self.d])
    }
}

/// Precomputed neighbor tables for a cube.
#[derive(Clone, Debug)]
pub struct Adjacency {
    pub dirs: Vec<Vec<i64>>,
    pub offs: Vec<isize>,
}

impl Adjacency {
    pub fn new(cube: &Cube) -> Self {
        let dirs = directions(cube.d);
        let offs = dirs.iter().map(|g| cube.offset(g)).collect();
        Self { dirs, offs }
    }
}

/// A finite patch of one orbit: the cube `‖n‖∞ ≤ W` around an anchor, with masks.
#[derive(Clone, Debug)]
pub struct Window {
    pub gen: GeneratorSet,
    pub anchor: TorusPoint,
    pub w: i64,
    pub cube: Cube,
    pub mask_a: FixedBitSet,
    pub mask_b: FixedBitSet,
    pub shape_a: Region,
    pub shape_b: Region,
}

impl Window {
    pub fn new(gen: GeneratorSet, anchor: TorusPoint, w: i64, shape_a: Region, shape_b: Region) -> Result<Self> {
        Self::with_budget(gen, anchor, w, shape_a, shape_b, 1 << 34)
    }

    pub fn with_budget(
        gen: GeneratorSet,
        anchor: TorusPoint,
        w: i64,
        shape_a: Region,
        shape_b: Region,
        max_points: u64,
    ) -> Result<Self> {
        if w < 0 {
            return Err(Error::InvalidArgument("negative window half-width".into()));
        }
        if anchor.k != gen.k {
            return Err(Error::InvalidArgument("anchor dimension differs from k".into()));
        }
        let cube = Cube::new(gen.d, w);
        if cube.len as u64 > max_points {
            return Err(Error::Budget { what: "window points", needed: cube.len as u128, limit: max_points as u128 });
        }
        let mut mask_a = FixedBitSet::with_capacity(cube.len);
        let mut mask_b = FixedBitSet::with_capacity(cube.len);
        let mut n = vec![0i64; gen.d];
        for idx in 0..cube.len {
            cube.coords_into(idx, &mut n);
            let p = act_from(&gen, &anchor, &n);
            if shape_a.contains(&p, gen.bits) {
                mask_a.insert(idx);
            }
            if shape_b.contains(&p, gen.bits) {
                mask_b.insert(idx);
            }
        }
        Ok(Self { gen, anchor, w, cube, mask_a, mask_b, shape_a, shape_b })
    }

    pub fn d(&self) -> usize {
        self.gen.d
    }

    pub fn act(&self, n: &[i64]) -> TorusPoint {
        act_from(&self.gen, &self.anchor, n)
    }

    /// Valid at radius `r` means the `r`-ball around `n` lies in the window.
    pub fn valid(&self, n: &[i64], r: i64) -> bool {
        linf(n) <= self.w - r
    }

    pub fn in_a(&self, idx: usize) -> bool {
        self.mask_a.contains(idx)
    }

    pub fn in_b(&self, idx: usize) -> bool {
        self.mask_b.contains(idx)
    }

    /// `1_A - 1_B` at a window index.
    pub fn demand(&self, idx: usize) -> i64 {
        self.in_a(idx) as i64 - self.in_b(idx) as i64
    }

    /// Same generators and anchor, different half-width.
    pub fn resized(&self, w: i64) -> Result<Self> {
        Self::new(self.gen.clone(), self.anchor, w, self.shape_a.clone(), self.shape_b.clone())
    }
}

pub fn act_from(gen: &GeneratorSet, anchor: &TorusPoint, n: &[i64]) -> TorusPoint {
    let mut p = *anchor;
    for (j, &nj) in n.iter().enumerate() {
        p.add_scaled(&gen.x[j], nj, gen.bits);
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn dir_index_inverts_directions() {
        for d in 1..=4 {
            for (i, g) in directions(d).iter().enumerate() {
                assert_eq!(dir_index(g), i);
            }
        }
    }

    #[test]
    fn direction_counts_and_negation() {
        for d in 1..=4 {
            let dirs = directions(d);
            assert_eq!(dirs.len(), 3usize.pow(d as u32) - 1);
            for (i, g) in dirs.iter().enumerate() {
                let neg: Vec<i64> = g.iter().map(|v| -v).collect();
                assert_eq!(dirs[neg_dir(d, i)], neg);
            }
            for g in positive_directions(d) {
                assert!(g.iter().find(|&&v| v != 0).unwrap() > &0);
            }
        }
    }

    #[test]
    fn lex_examples() {
        assert_eq!(lex_compare(&[0, 0], &[1, -5]), Ordering::Less);
        assert_eq!(lex_compare(&[0, -1], &[0, 1]), Ordering::Less);
        assert_eq!(lex_compare(&[3, 4], &[3, 4]), Ordering::Equal);
    }

    #[test]
    fn neighborhood_sizes() {
        for d in 1..=4usize {
            for r in 0..=6i64 {
                let n = vec![2; d];
                assert_eq!(neighborhood(&n, r, false).len(), ((2 * r + 1) as usize).pow(d as u32));
                assert_eq!(neighborhood(&n, r, true).len(), ((r + 1) as usize).pow(d as u32));
            }
        }
    }

    #[test]
    fn cube_index_is_lex_order() {
        let c = Cube::new(3, 2);
        let mut prev: Option<Vec<i64>> = None;
        for idx in 0..c.len {
            let n = c.coords(idx);
            assert_eq!(c.index(&n), idx);
            if let Some(p) = prev {
                assert_eq!(lex_compare(&p, &n), Ordering::Less);
            }
            prev = Some(n);
        }
    }

    proptest! {
        #[test]
        fn lex_is_a_strict_total_order(a in prop::collection::vec(-5i64..5, 3),
                                        b in prop::collection::vec(-5i64..5, 3),
                                        c in prop::collection::vec(-5i64..5, 3)) {
            let ab = lex_compare(&a, &b);
            prop_assert_eq!(ab.reverse(), lex_compare(&b, &a));
            if ab == Ordering::Less && lex_compare(&b, &c) == Ordering::Less {
                prop_assert_eq!(lex_compare(&a, &c), Ordering::Less);
            }
            let diff: Vec<i64> = b.iter().zip(&a).map(|(x, y)| x - y).collect();
            let first = diff.iter().find(|&&v| v != 0).copied();
            prop_assert_eq!(ab == Ordering::Less, first.map_or(false, |v| v > 0));
        }
    }
}
