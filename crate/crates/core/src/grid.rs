//! Set operations on cube masks: dilation, components, holes, boundaries.

use std::collections::VecDeque;

use fixedbitset::FixedBitSet;
use serde::Serialize;

use crate::lattice::{Adjacency, Cube};

/// `N_r[S]` truncated to the cube. Separable sliding window per axis.
pub fn dilate(cube: &Cube, s: &FixedBitSet, r: i64) -> FixedBitSet {
    if r <= 0 {
        return s.clone();
    }
    let mut cur: Vec<bool> = (0..cube.len).map(|i| s.contains(i)).collect();
    let mut next = vec![false; cube.len];
    let side = cube.side;
    for axis in 0..cube.d {
        let stride = cube.strides[axis];
        for start in line_starts(cube, axis) {
            // distance to the nearest member on the line, forward then backward
            let mut last: Option<usize> = None;
            for t in 0..side {
                let i = start + t * stride;
                if cur[i] {
                    last = Some(t);
                }
                next[i] = last.is_some_and(|l| (t - l) as i64 <= r);
            }
            let mut last: Option<usize> = None;
            for t in (0..side).rev() {
                let i = start + t * stride;
                if cur[i] {
                    last = Some(t);
                }
                if last.is_some_and(|l| (l - t) as i64 <= r) {
                    next[i] = true;
                }
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }
    to_bitset(&cur)
}

fn line_starts(cube: &Cube, axis: usize) -> Vec<usize> {
    let stride = cube.strides[axis];
    let block = stride * cube.side;
    let mut out = Vec::with_capacity(cube.len / cube.side);
    let mut base = 0;
    while base < cube.len {
        for off in 0..stride {
            out.push(base + off);
        }
        base += block;
    }
    out
}

pub fn to_bitset(v: &[bool]) -> FixedBitSet {
    let mut b = FixedBitSet::with_capacity(v.len());
    for (i, &x) in v.iter().enumerate() {
        if x {
            b.insert(i);
        }
    }
    b
}

/// Points of the cube with `‖n‖∞ ≤ r`.
pub fn ball_mask(cube: &Cube, r: i64) -> FixedBitSet {
    let mut b = FixedBitSet::with_capacity(cube.len);
    for i in 0..cube.len {
        if cube.norm(i) <= r {
            b.insert(i);
        }
    }
    b
}

/// A connected component of an induced subgraph, with derived data.
#[derive(Clone, Debug, Serialize)]
pub struct Component {
    /// Sorted cube indices.
    pub vertices: Vec<usize>,
    pub lo: Vec<i64>,
    pub hi: Vec<i64>,
    pub holes: Vec<Vec<usize>>,
    /// A hole search was cut short by the cube boundary.
    pub ambiguous: bool,
    pub clipped: bool,
}

impl Component {
    /// `ℓ∞` diameter.
    pub fn diameter(&self) -> i64 {
        self.lo.iter().zip(&self.hi).map(|(a, b)| b - a).max().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    /// The component together with its holes, sorted.
    pub fn filled(&self) -> Vec<usize> {
        let mut v = self.vertices.clone();
        for h in &self.holes {
            v.extend_from_slice(h);
        }
        v.sort_unstable();
        v
    }
}

/// Connected components under `ℓ∞` adjacency, in order of their least index.
pub fn components(cube: &Cube, s: &FixedBitSet) -> Vec<Component> {
    let adj = Adjacency::new(cube);
    let mut seen = FixedBitSet::with_capacity(cube.len);
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    let mut c = vec![0i64; cube.d];
    for start in s.ones() {
        if seen.contains(start) {
            continue;
        }
        seen.insert(start);
        queue.push_back(start);
        let mut verts = Vec::new();
        let mut lo = vec![i64::MAX; cube.d];
        let mut hi = vec![i64::MIN; cube.d];
        while let Some(v) = queue.pop_front() {
            verts.push(v);
            cube.coords_into(v, &mut c);
            for i in 0..cube.d {
                lo[i] = lo[i].min(c[i]);
                hi[i] = hi[i].max(c[i]);
            }
            cube.for_each_neighbor(v, &adj.dirs, &adj.offs, |_, w| {
                if s.contains(w) && !seen.contains(w) {
                    seen.insert(w);
                    queue.push_back(w);
                }
            });
        }
        verts.sort_unstable();
        out.push(Component { vertices: verts, lo, hi, holes: Vec::new(), ambiguous: false, clipped: false });
    }
    out
}

/// Components plus holes and the clipped flag at validity radius `valid_r`
/// (clipped when `N_3` of the component leaves `‖n‖∞ ≤ valid_r`).
pub fn analyse(cube: &Cube, s: &FixedBitSet, valid_r: i64) -> Vec<Component> {
    let mut comps = components(cube, s);
    for comp in comps.iter_mut() {
        fill_holes(cube, comp);
        comp.clipped = comp.lo.iter().chain(&comp.hi).any(|&x| x.abs() + 3 > valid_r);
    }
    comps
}

/// Holes: complement components inside the bounding box grown by one that do
/// not reach the grown box's boundary.
pub fn fill_holes(cube: &Cube, comp: &mut Component) {
    let d = cube.d;
    let mut lo = vec![0i64; d];
    let mut hi = vec![0i64; d];
    let mut clamped = false;
    for i in 0..d {
        lo[i] = comp.lo[i] - 1;
        hi[i] = comp.hi[i] + 1;
        if lo[i] < -cube.r {
            lo[i] = -cube.r;
            clamped = true;
        }
        if hi[i] > cube.r {
            hi[i] = cube.r;
            clamped = true;
        }
    }
    let sub_sides: Vec<usize> = (0..d).map(|i| (hi[i] - lo[i] + 1) as usize).collect();
    let total: usize = sub_sides.iter().product();
    let mut sub_strides = vec![1usize; d];
    for i in (0..d.saturating_sub(1)).rev() {
        sub_strides[i] = sub_strides[i + 1] * sub_sides[i + 1];
    }
    let to_local = |c: &[i64]| -> usize { (0..d).map(|i| (c[i] - lo[i]) as usize * sub_strides[i]).sum() };
    let from_local = |mut l: usize, out: &mut [i64]| {
        for i in 0..d {
            let q = l / sub_strides[i];
            l -= q * sub_strides[i];
            out[i] = q as i64 + lo[i];
        }
    };
    let mut inside = vec![false; total];
    let mut c = vec![0i64; d];
    for &v in &comp.vertices {
        cube.coords_into(v, &mut c);
        inside[to_local(&c)] = true;
    }
    let mut seen = inside.clone();
    let dirs = crate::lattice::directions(d);
    let mut holes = Vec::new();
    let mut queue = VecDeque::new();
    let mut nb = vec![0i64; d];
    for start in 0..total {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut part = Vec::new();
        let mut touches = false;
        while let Some(l) = queue.pop_front() {
            from_local(l, &mut c);
            if (0..d).any(|i| c[i] == lo[i] || c[i] == hi[i]) {
                touches = true;
            }
            part.push(cube.index(&c));
            for g in &dirs {
                let mut ok = true;
                for i in 0..d {
                    nb[i] = c[i] + g[i];
                    if nb[i] < lo[i] || nb[i] > hi[i] {
                        ok = false;
                        break;
                    }
                }
                if ok {
                    let j = to_local(&nb);
                    if !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        if !touches {
            part.sort_unstable();
            holes.push(part);
        }
    }
    holes.sort();
    comp.holes = holes;
    comp.ambiguous = clamped;
}

/// Edge boundary `∂_E S` as `(inner, direction index)` pairs, lex ordered.
/// Directions whose target leaves the cube are included with `None` target.
pub fn edge_boundary(cube: &Cube, adj: &Adjacency, set: &FixedBitSet, verts: &[usize]) -> Vec<(usize, usize, Option<usize>)> {
    let mut out = Vec::new();
    let mut c = vec![0i64; cube.d];
    for &v in verts {
        cube.coords_into(v, &mut c);
        for (k, g) in adj.dirs.iter().enumerate() {
            let inside = g.iter().zip(&c).all(|(a, b)| (a + b).abs() <= cube.r);
            if !inside {
                out.push((v, k, None));
                continue;
            }
            let w = (v as isize + adj.offs[k]) as usize;
            if !set.contains(w) {
                out.push((v, k, Some(w)));
            }
        }
    }
    out
}

/// Bitset of a vertex list.
pub fn set_of(len: usize, verts: &[usize]) -> FixedBitSet {
    let mut b = FixedBitSet::with_capacity(len);
    for &v in verts {
        b.insert(v);
    }
    b
}

/// `ℓ∞` distance between two vertex lists (brute force, for small sets).
pub fn set_distance(cube: &Cube, a: &[usize], b: &[usize]) -> i64 {
    let mut best = i64::MAX;
    let mut ca = vec![0i64; cube.d];
    let mut cb = vec![0i64; cube.d];
    for &x in a {
        cube.coords_into(x, &mut ca);
        for &y in b {
            cube.coords_into(y, &mut cb);
            best = best.min(crate::lattice::linf_dist(&ca, &cb));
        }
    }
    best
}


/// Prefix counts of a mask: `count(lo, hi)` is the number of members in the
/// closed box `[lo, hi]` in O(2^d).
#[derive(Clone, Debug)]
pub struct PrefixCount {
    d: usize,
    r: i64,
    side: usize,
    strides: Vec<usize>,
    p: Vec<u32>,
}

impl PrefixCount {
    pub fn new(cube: &Cube, s: &FixedBitSet) -> Self {
        let d = cube.d;
        let side = cube.side + 1;
        let mut strides = vec![1usize; d];
        for i in (0..d.saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * side;
        }
        let total = side.pow(d as u32);
        let mut p = vec![0u32; total];
        let mut c = vec![0i64; d];
        for i in s.ones() {
            cube.coords_into(i, &mut c);
            let j: usize = (0..d).map(|a| (c[a] + cube.r + 1) as usize * strides[a]).sum();
            p[j] += 1;
        }
        for a in 0..d {
            let st = strides[a];
            for j in 0..total {
                if (j / st) % side != 0 {
                    p[j] += p[j - st];
                }
            }
        }
        Self { d, r: cube.r, side, strides, p }
    }

    pub fn count(&self, lo: &[i64], hi: &[i64]) -> u32 {
        let mut total: i64 = 0;
        for mask in 0..(1usize << self.d) {
            let mut j = 0usize;
            let mut neg = false;
            let mut empty = false;
            for a in 0..self.d {
                let v = if mask >> a & 1 == 1 {
                    neg = !neg;
                    lo[a] + self.r
                } else {
                    hi[a] + self.r + 1
                };
                if v < 0 {
                    empty = true;
                    break;
                }
                j += (v as usize).min(self.side - 1) * self.strides[a];
            }
            if empty {
                continue;
            }
            let x = self.p[j] as i64;
            total += if neg { -x } else { x };
        }
        total as u32
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_dilate(cube: &Cube, s: &FixedBitSet, r: i64) -> FixedBitSet {
        let mut out = FixedBitSet::with_capacity(cube.len);
        for i in 0..cube.len {
            let ci = cube.coords(i);
            if s.ones().any(|j| crate::lattice::linf_dist(&ci, &cube.coords(j)) <= r) {
                out.insert(i);
            }
        }
        out
    }

    proptest! {
        #[test]
        fn dilation_matches_brute_force(bits in prop::collection::vec(prop::bool::weighted(0.05), 121), r in 0i64..4) {
            let cube = Cube::new(2, 5);
            let s = to_bitset(&bits);
            prop_assert_eq!(dilate(&cube, &s, r), brute_dilate(&cube, &s, r));
        }

        #[test]
        fn components_partition_the_set(bits in prop::collection::vec(prop::bool::weighted(0.3), 343)) {
            let cube = Cube::new(3, 3);
            let s = to_bitset(&bits);
            let comps = components(&cube, &s);
            let total: usize = comps.iter().map(|c| c.len()).sum();
            prop_assert_eq!(total, s.count_ones(..));
            for (i, a) in comps.iter().enumerate() {
                for b in comps.iter().skip(i + 1) {
                    prop_assert!(set_distance(&cube, &a.vertices, &b.vertices) >= 2);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn prefix_counts_match(bits in prop::collection::vec(prop::bool::weighted(0.4), 125),
                               a in prop::collection::vec(-2i64..=2, 3), e in prop::collection::vec(0i64..=4, 3)) {
            let cube = Cube::new(3, 2);
            let s = to_bitset(&bits);
            let pc = PrefixCount::new(&cube, &s);
            let hi: Vec<i64> = a.iter().zip(&e).map(|(x, y)| (x + y).min(2)).collect();
            let brute = s.ones().filter(|&i| {
                let c = cube.coords(i);
                (0..3).all(|k| c[k] >= a[k] && c[k] <= hi[k])
            }).count() as u32;
            prop_assert_eq!(pc.count(&a, &hi), brute);
        }
    }

    #[test]
    fn ring_has_one_hole() {
        let cube = Cube::new(2, 4);
        let mut s = FixedBitSet::with_capacity(cube.len);
        for n in crate::lattice::neighborhood(&[0, 0], 1, false) {
            if n != vec![0, 0] {
                s.insert(cube.index(&n));
            }
        }
        let comps = analyse(&cube, &s, 4);
        assert_eq!(comps.len(), 1);
        assert_eq!(comps[0].holes, vec![vec![cube.index(&[0, 0])]]);
        assert_eq!(comps[0].diameter(), 2);
        assert!(!comps[0].clipped);
        assert_eq!(comps[0].filled().len(), 9);
    }

    #[test]
    fn diagonal_is_connected_and_encloses_nothing() {
        let cube = Cube::new(2, 4);
        let s = set_of(cube.len, &[cube.index(&[0, 0]), cube.index(&[1, 1])]);
        let comps = analyse(&cube, &s, 4);
        assert_eq!(comps.len(), 1);
        assert!(comps[0].holes.is_empty());
    }

    #[test]
    fn singleton_boundary_has_all_directions() {
        let cube = Cube::new(2, 3);
        let adj = Adjacency::new(&cube);
        let v = cube.index(&[0, 0]);
        let s = set_of(cube.len, &[v]);
        assert_eq!(edge_boundary(&cube, &adj, &s, &[v]).len(), 8);
    }
}
