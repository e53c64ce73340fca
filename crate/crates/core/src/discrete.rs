//! Strip discreteness and greedy maximally `r`-discrete sets.

use fixedbitset::FixedBitSet;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lattice::{Cube, Window};
use crate::torus::{modmask, wrap_dist, GeneratorSet, Region};

/// Minimum circle distance from 0 of the first coordinate of `Σ n_j x_j` over
/// nonzero `‖n‖∞ ≤ r`.
pub fn strip_min_gap(gen: &GeneratorSet, r: i64, budget: u64) -> Result<u64> {
    let d = gen.d;
    let total = ((2 * r + 1) as u128).pow(d as u32);
    if total > budget as u128 {
        return Err(Error::Budget { what: "strip discreteness enumeration", needed: total, limit: budget as u128 });
    }
    let m = modmask(gen.bits);
    let x: Vec<u64> = gen.x.iter().map(|v| v[0]).collect();
    // Only half the vectors are needed: n and -n give the same distance.
    // Enumerate lex-positive n: first nonzero coordinate positive.
    let mut best = u64::MAX;
    for lead in 0..d {
        // n_0..n_{lead-1} = 0, n_lead in 1..=r, rest free
        let rest = d - lead - 1;
        let inner = ((2 * r + 1) as usize).pow(rest as u32);
        let part: u64 = (1..=r)
            .into_par_iter()
            .map(|a| {
                let base = x[lead].wrapping_mul(a as u64);
                let mut local = u64::MAX;
                let mut n = vec![-r; rest];
                let mut acc = vec![0u64; rest + 1];
                acc[0] = base;
                for j in 0..rest {
                    acc[j + 1] = acc[j].wrapping_add(x[lead + 1 + j].wrapping_mul(n[j] as u64));
                }
                for _ in 0..inner {
                    local = local.min(wrap_dist(acc[rest] & m, 0, gen.bits));
                    let mut j = rest;
                    while j > 0 {
                        j -= 1;
                        if n[j] < r {
                            n[j] += 1;
                            break;
                        }
                        n[j] = -r;
                    }
                    for l in j..rest {
                        acc[l + 1] = acc[l].wrapping_add(x[lead + 1 + l].wrapping_mul(n[l] as u64));
                    }
                }
                local
            })
            .min()
            .unwrap_or(u64::MAX);
        best = best.min(part);
    }
    Ok(best)
}

/// Strip `[a, a+width) × [0,1)^{k-1}` is `r`-discrete for the action.
pub fn strip_is_discrete(gen: &GeneratorSet, width: u64, r: i64, budget: u64) -> Result<bool> {
    if r < 1 {
        return Err(Error::InvalidArgument("r must be >= 1".into()));
    }
    if width == 0 {
        return Err(Error::InvalidArgument("width must be positive".into()));
    }
    if width as u128 >= (1u128 << gen.bits) {
        return Ok(false);
    }
    Ok(strip_min_gap(gen, r, budget)? >= width)
}

/// The strips a discrete set is built from, in greedy priority order.
#[derive(Clone, Debug)]
pub enum Cover {
    /// Explicit strips; a point belongs to the first strip containing it.
    Strips(Vec<Region>),
    /// The partition of the torus into consecutive strips `[j·w, (j+1)·w)`.
    Uniform { width: u64 },
}

#[derive(Clone, Debug)]
pub struct DiscreteSet {
    pub r: i64,
    pub members: FixedBitSet,
    /// Membership agrees with every extension of the window.
    pub certain: FixedBitSet,
    /// Largest `R` with every point of `‖n‖∞ ≤ R` certain (-1 if none).
    pub certain_radius: i64,
    pub strips: u128,
    /// `r (m - 1)`, the declared locality radius of the greedy rule.
    pub locality_radius: u128,
}

impl DiscreteSet {
    pub fn count(&self) -> usize {
        self.members.count_ones(..)
    }
}

/// The widest uniform cover whose strips are `r`-discrete.
pub fn uniform_cover(gen: &GeneratorSet, r: i64, budget: u64) -> Result<Cover> {
    let gap = strip_min_gap(gen, r, budget)?;
    if gap == 0 {
        return Err(Error::Freeness(0));
    }
    Ok(Cover::Uniform { width: gap.min(1u64 << (gen.bits - 1)) })
}

/// Row-range budget for certainty tracking.
pub const CERTAINTY_WORK: u128 = 1 << 28;

/// Greedy `C'_1 = C_1`, `C'_j = C_j \ N_r[C'_1 ∪ … ∪ C'_{j-1}]` on the window.
/// Certainty is left empty when tracking would exceed [`CERTAINTY_WORK`].
pub fn build_discrete_set(w: &Window, r: i64, cover: &Cover, budget: u64) -> Result<DiscreteSet> {
    if r < 1 {
        return Err(Error::InvalidArgument("r must be >= 1".into()));
    }
    let cube = &w.cube;
    let bits = w.gen.bits;
    // enumeration radius beyond the window diameter tells nothing new
    let eff_r = r.min(2 * w.w + 1).max(1);
    let (classes, strips): (Vec<u64>, u128) = match cover {
        Cover::Uniform { width } => {
            if !strip_is_discrete(&w.gen, *width, eff_r, budget)? {
                return Err(Error::Precondition(format!("strip width {width:#x} is not {r}-discrete")));
            }
            let m = (1u128 << bits).div_ceil(*width as u128);
            let cl = (0..cube.len)
                .into_par_iter()
                .map(|i| w.act(&cube.coords(i)).c[0] / *width)
                .collect();
            (cl, m)
        }
        Cover::Strips(list) => {
            for s in list {
                let Region::Strip { width, .. } = s else {
                    return Err(Error::InvalidArgument("cover entries must be strips".into()));
                };
                if !strip_is_discrete(&w.gen, *width, eff_r, budget)? {
                    return Err(Error::Precondition(format!("strip width {width:#x} is not {r}-discrete")));
                }
            }
            let mut cl = Vec::with_capacity(cube.len);
            for i in 0..cube.len {
                let p = w.act(&cube.coords(i));
                match list.iter().position(|s| s.contains(&p, bits)) {
                    Some(j) => cl.push(j as u64),
                    None => {
                        return Err(Error::Coverage(format!("point {:?} lies in no strip of the cover", cube.coords(i))))
                    }
                }
            }
            (cl, list.len() as u128)
        }
    };
    let mut keyed: Vec<(u64, u32)> = classes.into_par_iter().enumerate().map(|(i, c)| (c, i as u32)).collect();
    keyed.par_sort_unstable();
    let order: Vec<u32> = keyed.into_iter().map(|(_, i)| i).collect();

    let mut members = FixedBitSet::with_capacity(cube.len);
    let mut certain = FixedBitSet::with_capacity(cube.len);
    let mut sel_block = FixedBitSet::with_capacity(cube.len);
    let mut cert_block = FixedBitSet::with_capacity(cube.len);
    let mut maybe_block = FixedBitSet::with_capacity(cube.len);
    // rim balls dominate certainty tracking; beyond this many bit-words it is skipped
    let rows = (2 * r as u128 + 1).pow(cube.d as u32 - 1);
    let track = (cube.len as u128).saturating_mul(rows) <= CERTAINTY_WORK;
    let mut c = vec![0i64; cube.d];
    for &i in &order {
        let i = i as usize;
        cube.coords_into(i, &mut c);
        let is_member = !sel_block.contains(i);
        if is_member {
            members.insert(i);
            mark_ball(cube, &c, r, &mut sel_block);
        }
        if !track {
            continue;
        }
        if cert_block.contains(i) {
            certain.insert(i);
        } else if cube.norm(i) + r > cube.r || maybe_block.contains(i) {
            mark_ball(cube, &c, r, &mut maybe_block);
        } else {
            certain.insert(i);
            mark_ball(cube, &c, r, &mut cert_block);
        }
    }
    let mut certain_radius = if track { cube.r } else { -1 };
    for i in (0..cube.len).filter(|_| track) {
        if !certain.contains(i) {
            certain_radius = certain_radius.min(cube.norm(i) - 1);
        }
    }
    let locality_radius = (r as u128).saturating_mul(strips.saturating_sub(1));
    Ok(DiscreteSet { r, members, certain, certain_radius, strips, locality_radius })
}

fn mark_ball(cube: &Cube, c: &[i64], r: i64, out: &mut FixedBitSet) {
    let d = cube.d;
    let lo: Vec<i64> = c.iter().map(|&x| (x - r).max(-cube.r)).collect();
    let hi: Vec<i64> = c.iter().map(|&x| (x + r).min(cube.r)).collect();
    let mut cur = lo.clone();
    // innermost axis handled as a contiguous range
    loop {
        let mut start = cur.clone();
        start[d - 1] = lo[d - 1];
        let a = cube.index(&start);
        out.insert_range(a..a + (hi[d - 1] - lo[d - 1] + 1) as usize);
        if d == 1 {
            return;
        }
        let mut j = d - 1;
        loop {
            if j == 0 {
                return;
            }
            j -= 1;
            if cur[j] < hi[j] {
                cur[j] += 1;
                break;
            }
            cur[j] = lo[j];
        }
    }
}

/// Exhaustive check: members pairwise farther than `r`, every point of
/// `‖n‖∞ ≤ valid` within `r` of a member.
pub fn check_discrete_maximal(cube: &Cube, members: &FixedBitSet, r: i64, valid: i64) -> (bool, bool) {
    let pts: Vec<Vec<i64>> = members.ones().map(|i| cube.coords(i)).collect();
    let mut discrete = true;
    for (a, p) in pts.iter().enumerate() {
        for q in pts.iter().skip(a + 1) {
            if crate::lattice::linf_dist(p, q) <= r {
                discrete = false;
            }
        }
    }
    let mut maximal = true;
    for i in 0..cube.len {
        if cube.norm(i) > valid {
            continue;
        }
        let c = cube.coords(i);
        if !pts.iter().any(|p| crate::lattice::linf_dist(p, &c) <= r) {
            maximal = false;
        }
    }
    (discrete, maximal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::torus::{fx_from_f64, sample_generators, Region, TorusPoint};

    const B: u32 = 62;

    fn line_gen() -> GeneratorSet {
        GeneratorSet::from_vectors(1, B, vec![vec![fx_from_f64(0.3, B)]], 0).unwrap()
    }

    #[test]
    fn one_dimensional_example() {
        let g = line_gen();
        assert!(strip_is_discrete(&g, fx_from_f64(0.05, B), 3, 1 << 20).unwrap());
        assert!(!strip_is_discrete(&g, fx_from_f64(0.2, B), 3, 1 << 20).unwrap());
        assert!(!strip_is_discrete(&g, 1 << B, 3, 1 << 20).unwrap());
    }

    #[test]
    fn narrow_strip_is_discrete() {
        let g = sample_generators(1, 2, 2, B, 8).unwrap();
        assert!(strip_is_discrete(&g, 1 << (B - 40), 8, 1 << 20).unwrap());
    }

    #[test]
    fn gap_matches_naive_enumeration() {
        let g = sample_generators(5, 2, 3, B, 3).unwrap();
        let mut best = u64::MAX;
        for n in crate::lattice::neighborhood(&[0, 0, 0], 3, false) {
            if n.iter().any(|&v| v != 0) {
                best = best.min(wrap_dist(g.combo(&n).c[0], 0, B));
            }
        }
        assert_eq!(strip_min_gap(&g, 3, 1 << 20).unwrap(), best);
    }

    fn toy_window() -> Window {
        let g = sample_generators(3, 2, 2, B, 20).unwrap();
        Window::new(g, TorusPoint::zero(2), 8, Region::Torus, Region::Torus).unwrap()
    }

    #[test]
    fn three_strip_cover_is_discrete_and_maximal() {
        let w = toy_window();
        let gap = strip_min_gap(&w.gen, 2, 1 << 20).unwrap();
        let width = gap;
        let m = (1u128 << B).div_ceil(width as u128) as u64;
        assert!(m >= 3);
        // three strips in a fixed order, followed by the rest of the partition
        let mut list = Vec::new();
        for j in [2u64, 0, 1].into_iter().chain(3..m) {
            list.push(Region::Strip { a: j.wrapping_mul(width), width });
        }
        let ds = build_discrete_set(&w, 2, &Cover::Strips(list), 1 << 20).unwrap();
        let (disc, max) = check_discrete_maximal(&w.cube, &ds.members, 2, w.w);
        assert!(disc && max);
    }

    fn partition_after(width: u64, first: &Region) -> Vec<Region> {
        let m = (1u128 << B).div_ceil(width as u128) as u64;
        let mut list = vec![first.clone()];
        list.extend((1..m).map(|j| Region::Strip { a: j * width, width }));
        list
    }

    #[test]
    fn first_strip_kept_whole_and_duplicate_contributes_nothing() {
        let w = toy_window();
        let width = strip_min_gap(&w.gen, 2, 1 << 20).unwrap();
        let s = Region::Strip { a: 0, width };
        let one = partition_after(width, &s);
        let mut two = vec![s.clone()];
        two.extend(one.iter().cloned());
        let a = build_discrete_set(&w, 2, &Cover::Strips(one), 1 << 20).unwrap();
        let b = build_discrete_set(&w, 2, &Cover::Strips(two), 1 << 20).unwrap();
        assert_eq!(a.members, b.members);
        for i in 0..w.cube.len {
            if s.contains(&w.act(&w.cube.coords(i)), B) {
                assert!(a.members.contains(i));
            }
        }
    }

    #[test]
    fn uncovered_point_is_a_coverage_failure() {
        let w = toy_window();
        let width = strip_min_gap(&w.gen, 2, 1 << 20).unwrap();
        let r = build_discrete_set(&w, 2, &Cover::Strips(vec![Region::Strip { a: 0, width }]), 1 << 20);
        assert!(matches!(r, Err(Error::Coverage(_))));
    }

    #[test]
    fn uniform_cover_certainty() {
        let g = sample_generators(9, 2, 2, B, 40).unwrap();
        let w = Window::new(g, TorusPoint::zero(2), 30, Region::Torus, Region::Torus).unwrap();
        let cover = uniform_cover(&w.gen, 3, 1 << 20).unwrap();
        let ds = build_discrete_set(&w, 3, &cover, 1 << 20).unwrap();
        let (disc, max) = check_discrete_maximal(&w.cube, &ds.members, 3, w.w);
        assert!(disc && max);
        // certain membership must agree with a larger window
        let big = w.resized(40).unwrap();
        let ds2 = build_discrete_set(&big, 3, &cover, 1 << 20).unwrap();
        for i in ds.certain.ones() {
            let j = w.cube.reindex(i, &big.cube).unwrap();
            assert_eq!(ds.members.contains(i), ds2.members.contains(j));
        }
    }
}
