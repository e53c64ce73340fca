//! Toast sequences on a window: schedule, closure, cores `I_i`, layers
//! `J_i, K_i, L_i`, shifted variants, tilde removal and validation.
//!
//! Everything here treats the window as the whole orbit. Components whose
//! `N_3` leaves the window are marked clipped and excluded from checks.

use std::collections::VecDeque;

use fixedbitset::FixedBitSet;
use num_bigint::BigUint;
use num_traits::{ToPrimitive, Zero};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};

use crate::discrete::{build_discrete_set, uniform_cover, DiscreteSet};
use crate::error::{Error, Result};
use crate::grid::{analyse, dilate, Component};
use crate::lattice::{linf_dist, Cube, Window};

// ---------------------------------------------------------------- schedule

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Strict,
    Relaxed,
}

fn big_str<S: Serializer>(v: &BigUint, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&v.to_string())
}

/// One level `(r_i, r'_i, t_i, q_i, t'_i, q'_i)` with the status of the three inequalities.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Level {
    pub i: usize,
    #[serde(serialize_with = "big_str")]
    pub r: BigUint,
    #[serde(serialize_with = "big_str")]
    pub r_prime: BigUint,
    #[serde(serialize_with = "big_str")]
    pub t: BigUint,
    #[serde(serialize_with = "big_str")]
    pub q: BigUint,
    #[serde(serialize_with = "big_str")]
    pub t_prime: BigUint,
    #[serde(serialize_with = "big_str")]
    pub q_prime: BigUint,
    /// `r_i ≥ 5r'_{i-1} - 1`
    pub r_vs_prev: bool,
    /// `5r'_i ≥ 5q'_i + 9`
    pub rprime_vs_qprime: bool,
    /// `r'_i ≥ 15q_i + 25`
    pub rprime_vs_q: bool,
}

/// Level parameters as machine integers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct SmallLevel {
    pub r: i64,
    pub r_prime: i64,
    pub t: i64,
    pub q: i64,
    pub t_prime: i64,
    pub q_prime: i64,
}

impl Level {
    pub fn small(&self) -> Result<SmallLevel> {
        let c = |x: &BigUint| x.to_i64().ok_or(Error::Overflow("schedule constant"));
        Ok(SmallLevel {
            r: c(&self.r)?,
            r_prime: c(&self.r_prime)?,
            t: c(&self.t)?,
            q: c(&self.q)?,
            t_prime: c(&self.t_prime)?,
            q_prime: c(&self.q_prime)?,
        })
    }

    pub fn all_hold(&self) -> bool {
        self.r_vs_prev && self.rprime_vs_qprime && self.rprime_vs_q
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Overrides {
    /// `r_1`.
    pub r1: Option<i64>,
    /// `r'_0`; default is the least value with `5r'_0 ≥ 9`.
    pub r_prime0: Option<i64>,
    /// `r'_i` for `i = 1, 2, …`; missing entries take the least value meeting both inequalities.
    #[serde(default)]
    pub r_prime: Vec<i64>,
    /// `r_i` for `i = 2, 3, …`; missing entries take `5r'_{i-1} - 1`.
    #[serde(default)]
    pub r: Vec<i64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Schedule {
    pub preset: Preset,
    #[serde(serialize_with = "big_str")]
    pub r_prime0: BigUint,
    /// `levels[0]` is level 1.
    pub levels: Vec<Level>,
    /// `5r'_0 ≥ 9`.
    pub level0_ok: bool,
}

impl Schedule {
    pub fn level(&self, i: usize) -> &Level {
        &self.levels[i - 1]
    }

    pub fn small(&self, i: usize) -> Result<SmallLevel> {
        self.levels[i - 1].small()
    }

    /// `r'_{i-1}` for `i ≥ 1`.
    pub fn r_prime_before(&self, i: usize) -> Result<i64> {
        let v = if i == 1 { &self.r_prime0 } else { &self.levels[i - 2].r_prime };
        v.to_i64().ok_or(Error::Overflow("schedule constant"))
    }

    /// `q'_{i-1}` for `i ≥ 1` (`q'_0 = 0`).
    pub fn q_prime_before(&self, i: usize) -> Result<i64> {
        if i == 1 {
            Ok(0)
        } else {
            self.small(i - 1).map(|l| l.q_prime)
        }
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }
}

fn level_from(i: usize, r: BigUint, rp: BigUint, rp_prev: &BigUint, qp_prev: &BigUint) -> Level {
    let two = BigUint::from(2u32);
    let four = BigUint::from(4u32);
    let five = BigUint::from(5u32);
    let t = &two * &r + &four * qp_prev + 4u32;
    let q = &t + &two * qp_prev + 4u32;
    let t_prime = (&four * &rp) / &five + &two * &q;
    let q_prime = &t_prime + &two * &q + 4u32;
    let r_vs_prev = &r + 1u32 >= &five * rp_prev;
    let rprime_vs_qprime = &five * &rp >= &five * &q_prime + 9u32;
    let rprime_vs_q = rp >= BigUint::from(15u32) * &q + 25u32;
    Level { i, r, r_prime: rp, t, q, t_prime, q_prime, r_vs_prev, rprime_vs_qprime, rprime_vs_q }
}

/// Least `r'` with `5r' ≥ 5q'(r') + 9` and `r' ≥ 15q + 25` for the given `q`, `q'_{i-1}`.
pub fn min_r_prime(r: i64, qp_prev: i64) -> i64 {
    let t = 2 * r + 4 * qp_prev + 4;
    let q = t + 2 * qp_prev + 4;
    let mut rp = (15 * q + 25).max(1);
    loop {
        let qp = 4 * rp / 5 + 2 * q + 2 * q + 4;
        if 5 * rp >= 5 * qp + 9 {
            return rp;
        }
        rp += 1;
    }
}

/// Strict constants `r_i = 100^{2^{i+1}-2}`, `r'_i = 100^{2^{i+1}-1}`, or the relaxed schedule.
pub fn make_schedule(preset: Preset, depth: usize, ov: &Overrides) -> Result<Schedule> {
    if depth < 1 {
        return Err(Error::InvalidArgument("depth must be >= 1".into()));
    }
    let hundred = BigUint::from(100u32);
    let mut levels = Vec::with_capacity(depth);
    let r_prime0 = match preset {
        Preset::Strict => hundred.clone(),
        Preset::Relaxed => {
            let v = ov.r_prime0.unwrap_or(2);
            if v <= 0 {
                return Err(Error::InvalidArgument("r'_0 must be positive".into()));
            }
            BigUint::from(v as u64)
        }
    };
    let mut rp_prev = r_prime0.clone();
    let mut qp_prev = BigUint::zero();
    for i in 1..=depth {
        let (r, rp) = match preset {
            Preset::Strict => {
                let e = (1u32 << (i + 1)) - 2;
                (hundred.pow(e), hundred.pow(e + 1))
            }
            Preset::Relaxed => {
                let r = if i == 1 {
                    ov.r1.ok_or_else(|| Error::InvalidArgument("relaxed schedule needs r1".into()))?
                } else {
                    match ov.r.get(i - 2) {
                        Some(&v) => v,
                        None => 5 * rp_prev.to_i64().ok_or(Error::Overflow("schedule"))? - 1,
                    }
                };
                if r <= 0 {
                    return Err(Error::InvalidArgument("nonpositive r_i".into()));
                }
                let qp = qp_prev.to_i64().ok_or(Error::Overflow("schedule"))?;
                let rp = match ov.r_prime.get(i - 1) {
                    Some(&v) if v > 0 => v,
                    Some(_) => return Err(Error::InvalidArgument("nonpositive r'_i".into())),
                    None => min_r_prime(r, qp),
                };
                (BigUint::from(r as u64), BigUint::from(rp as u64))
            }
        };
        let lv = level_from(i, r, rp, &rp_prev, &qp_prev);
        rp_prev = lv.r_prime.clone();
        qp_prev = lv.q_prime.clone();
        levels.push(lv);
    }
    let level0_ok = BigUint::from(5u32) * &r_prime0 >= BigUint::from(9u32);
    Ok(Schedule { preset, r_prime0, levels, level0_ok })
}

// ------------------------------------------------------------ label dilation

const NONE: u32 = u32::MAX;

/// Two smallest distinct labels.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
struct Two(u32, u32);

impl Two {
    const EMPTY: Two = Two(NONE, NONE);

    #[inline]
    fn merge(self, o: Two) -> Two {
        let mut v = [self.0, self.1, o.0, o.1];
        v.sort_unstable();
        let a = v[0];
        let b = v.iter().copied().find(|&x| x != a).unwrap_or(NONE);
        Two(a, b)
    }
}

/// For each point, the two smallest distinct labels within `ℓ∞` distance `r`.
/// Van Herk/Gil-Werman blocks along each axis; the merge is idempotent.
fn label_dilate(cube: &Cube, labels: &[u32], r: i64) -> Vec<Two> {
    let mut cur: Vec<Two> = labels.iter().map(|&l| Two(l, NONE)).collect();
    if r <= 0 {
        return cur;
    }
    let side = cube.side;
    let win = (2 * r + 1) as usize;
    for axis in 0..cube.d {
        let stride = cube.strides[axis];
        let block = stride * side;
        let mut next = vec![Two::EMPTY; cube.len];
        let mut line = vec![Two::EMPTY; side + 2 * r as usize];
        let mut pre = vec![Two::EMPTY; line.len()];
        let mut suf = vec![Two::EMPTY; line.len()];
        let mut base = 0;
        while base < cube.len {
            for off in 0..stride {
                let start = base + off;
                line.iter_mut().for_each(|x| *x = Two::EMPTY);
                for t in 0..side {
                    line[t + r as usize] = cur[start + t * stride];
                }
                let n = line.len();
                for i in 0..n {
                    pre[i] = if i % win == 0 { line[i] } else { pre[i - 1].merge(line[i]) };
                }
                for i in (0..n).rev() {
                    suf[i] = if i % win == win - 1 || i == n - 1 { line[i] } else { suf[i + 1].merge(line[i]) };
                }
                for t in 0..side {
                    // window [t, t + win - 1] in padded coordinates
                    let a = t;
                    let b = t + win - 1;
                    next[start + t * stride] = suf[a].merge(pre[b]);
                }
            }
            base += block;
        }
        cur = next;
    }
    cur
}

/// Close pairs of distinct labels at `ℓ∞` distance `≤ r`, sorted. Every label
/// with some other label within `r` appears in at least one returned pair.
pub fn close_label_pairs(cube: &Cube, labels: &[u32], r: i64) -> Vec<(u32, u32)> {
    let dil = label_dilate(cube, labels, r);
    let mut pairs: Vec<(u32, u32)> = (0..cube.len)
        .into_par_iter()
        .filter_map(|i| {
            let l = labels[i];
            if l == NONE {
                return None;
            }
            let Two(a, b) = dil[i];
            let other = if a != l { a } else { b };
            (other != NONE).then(|| (l.min(other), l.max(other)))
        })
        .collect();
    pairs.sort_unstable();
    pairs.dedup();
    pairs
}

fn label_map(len: usize, comps: &[Component]) -> Vec<u32> {
    let mut labels = vec![NONE; len];
    for (k, c) in comps.iter().enumerate() {
        for &v in &c.vertices {
            labels[v] = k as u32;
        }
    }
    labels
}

// ---------------------------------------------------------------- closure

/// `N_b[S]` of a vertex list, truncated to the cube.
pub fn ball_of(cube: &Cube, verts: &[usize], b: i64, lo: &[i64], hi: &[i64]) -> Vec<usize> {
    let d = cube.d;
    let blo: Vec<i64> = lo.iter().map(|x| (x - b).max(-cube.r)).collect();
    let bhi: Vec<i64> = hi.iter().map(|x| (x + b).min(cube.r)).collect();
    let sub = Cube::new(d, 0);
    let _ = sub;
    let sides: Vec<usize> = (0..d).map(|i| (bhi[i] - blo[i] + 1) as usize).collect();
    let total: usize = sides.iter().product();
    let mut strides = vec![1usize; d];
    for i in (0..d.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * sides[i + 1];
    }
    // local separable dilation
    let mut cur = vec![false; total];
    let mut c = vec![0i64; d];
    for &v in verts {
        cube.coords_into(v, &mut c);
        let l: usize = (0..d).map(|i| (c[i] - blo[i]) as usize * strides[i]).sum();
        cur[l] = true;
    }
    for axis in 0..d {
        let st = strides[axis];
        let sd = sides[axis];
        let mut next = vec![false; total];
        for start in 0..total {
            if (start / st) % sd != 0 {
                continue;
            }
            let mut last: Option<usize> = None;
            for t in 0..sd {
                let i = start + t * st;
                if cur[i] {
                    last = Some(t);
                }
                next[i] = last.is_some_and(|p| (t - p) as i64 <= b);
            }
            let mut last: Option<usize> = None;
            for t in (0..sd).rev() {
                let i = start + t * st;
                if cur[i] {
                    last = Some(t);
                }
                if last.is_some_and(|p| (p - t) as i64 <= b) {
                    next[i] = true;
                }
            }
        }
        cur = next;
    }
    let mut out = Vec::new();
    for (l, &x) in cur.iter().enumerate() {
        if x {
            let mut rem = l;
            for i in 0..d {
                let q = rem / strides[i];
                rem -= q * strides[i];
                c[i] = q as i64 + blo[i];
            }
            out.push(cube.index(&c));
        }
    }
    out.sort_unstable();
    out
}

/// `C_b(D_1, …, D_{i-1}, seed)`: absorb `N_b[S]` for every prior component `S`
/// whose `N_b[S]` is cut by the current set, until none is. `order_seed`
/// permutes the processing order (the result does not depend on it).
pub fn closure(cube: &Cube, priors: &[&[Component]], seed: &FixedBitSet, b: i64, order_seed: Option<u64>) -> FixedBitSet {
    let mut balls: Vec<Vec<usize>> = Vec::new();
    for layer in priors {
        for c in layer.iter() {
            balls.push(ball_of(cube, &c.vertices, b, &c.lo, &c.hi));
        }
    }
    closure_of_balls(cube.len, &balls, seed, order_seed)
}

fn closure_of_balls(len: usize, balls: &[Vec<usize>], seed: &FixedBitSet, order_seed: Option<u64>) -> FixedBitSet {
    let mut cur = seed.clone();
    if balls.is_empty() {
        return cur;
    }
    // CSR: point -> balls containing it
    let mut deg = vec![0u32; len + 1];
    for ball in balls {
        for &v in ball {
            deg[v + 1] += 1;
        }
    }
    for i in 0..len {
        deg[i + 1] += deg[i];
    }
    let mut fill = deg.clone();
    let mut owners = vec![0u32; deg[len] as usize];
    for (k, ball) in balls.iter().enumerate() {
        for &v in ball {
            owners[fill[v] as usize] = k as u32;
            fill[v] += 1;
        }
    }
    let mut inside: Vec<usize> = balls.iter().map(|ball| ball.iter().filter(|&&v| cur.contains(v)).count()).collect();
    let mut queued = vec![false; balls.len()];
    let mut order: Vec<usize> = (0..balls.len()).collect();
    if let Some(s) = order_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
    }
    let mut work: VecDeque<usize> = VecDeque::new();
    for &k in &order {
        if inside[k] > 0 && inside[k] < balls[k].len() {
            queued[k] = true;
            work.push_back(k);
        }
    }
    while let Some(k) = work.pop_front() {
        for &v in &balls[k] {
            if cur.contains(v) {
                continue;
            }
            cur.insert(v);
            for &o in &owners[deg[v] as usize..deg[v + 1] as usize] {
                let o = o as usize;
                inside[o] += 1;
                if !queued[o] && inside[o] < balls[o].len() {
                    queued[o] = true;
                    work.push_back(o);
                }
            }
        }
    }
    cur
}

// ---------------------------------------------------------------- centers

/// Bucket grid over center points. Centers are numbered in index order,
/// which is lex order, so smaller ids win lex ties.
#[derive(Clone, Debug)]
pub struct CenterIndex {
    d: usize,
    wr: i64,
    cell: i64,
    nb: usize,
    /// `d` coordinates per center.
    flat: Vec<i64>,
    start: Vec<u32>,
    ids: Vec<u32>,
}

impl CenterIndex {
    pub fn new(cube: &Cube, members: &FixedBitSet, cell: i64) -> Self {
        let d = cube.d;
        let cell = cell.max(1);
        let nb = (cube.side as i64 + cell - 1) as usize / cell as usize;
        let mut flat = Vec::new();
        for i in members.ones() {
            flat.extend(cube.coords(i));
        }
        let n = flat.len() / d;
        let key = |c: &[i64]| c.iter().fold(0usize, |a, &x| a * nb + ((x + cube.r) / cell) as usize);
        let mut count = vec![0u32; nb.pow(d as u32) + 1];
        for k in 0..n {
            count[key(&flat[k * d..k * d + d]) + 1] += 1;
        }
        for b in 0..count.len() - 1 {
            count[b + 1] += count[b];
        }
        let mut fill = count.clone();
        let mut ids = vec![0u32; n];
        for k in 0..n {
            let b = key(&flat[k * d..k * d + d]);
            ids[fill[b] as usize] = k as u32;
            fill[b] += 1;
        }
        Self { d, wr: cube.r, cell, nb, flat, start: count, ids }
    }

    pub fn len(&self) -> usize {
        self.flat.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn center(&self, k: usize) -> &[i64] {
        &self.flat[k * self.d..(k + 1) * self.d]
    }

    /// Evaluates `f(point, candidates)` at every cube point, where the
    /// candidates are the centers of the surrounding `3^d` buckets (ascending
    /// ids). Every center within `cell` of the point is a candidate.
    pub fn scan<T: Clone + Default>(&self, cube: &Cube, mut f: impl FnMut(&[i64], &[u32]) -> T) -> Vec<T> {
        let d = self.d;
        let nb = self.nb as i64;
        let mut out = vec![T::default(); cube.len];
        let mut b = vec![0i64; d];
        let mut cands: Vec<u32> = Vec::new();
        let mut off = vec![0i64; d];
        let mut p = vec![0i64; d];
        loop {
            cands.clear();
            off.iter_mut().for_each(|o| *o = -1);
            'n: loop {
                let mut key = 0usize;
                let mut ok = true;
                for i in 0..d {
                    let x = b[i] + off[i];
                    if x < 0 || x >= nb {
                        ok = false;
                    }
                    key = key * self.nb + x.max(0) as usize;
                }
                if ok {
                    cands.extend_from_slice(&self.ids[self.start[key] as usize..self.start[key + 1] as usize]);
                }
                let mut j = d;
                loop {
                    if j == 0 {
                        break 'n;
                    }
                    j -= 1;
                    if off[j] < 1 {
                        off[j] += 1;
                        break;
                    }
                    off[j] = -1;
                }
            }
            cands.sort_unstable();
            let lo: Vec<i64> = b.iter().map(|&x| -self.wr + x * self.cell).collect();
            let hi: Vec<i64> = lo.iter().map(|&x| (x + self.cell - 1).min(self.wr)).collect();
            p.copy_from_slice(&lo);
            'p: loop {
                out[cube.index(&p)] = f(&p, &cands);
                let mut j = d;
                loop {
                    if j == 0 {
                        break 'p;
                    }
                    j -= 1;
                    if p[j] < hi[j] {
                        p[j] += 1;
                        break;
                    }
                    p[j] = lo[j];
                }
            }
            let mut j = d;
            loop {
                if j == 0 {
                    return out;
                }
                j -= 1;
                if b[j] < nb - 1 {
                    b[j] += 1;
                    break;
                }
                b[j] = 0;
            }
        }
    }

    /// Nearest candidate within `radius` (least id among ties) with its
    /// distance, and the least distance to any other candidate within `radius`.
    pub fn nearest_two(&self, v: &[i64], cands: &[u32], radius: i64) -> (Option<(u32, i64)>, Option<i64>) {
        let mut best: Option<(u32, i64)> = None;
        let mut second: Option<i64> = None;
        for &k in cands {
            let dist = linf_dist(v, self.center(k as usize));
            if dist > radius {
                continue;
            }
            match best {
                None => best = Some((k, dist)),
                Some((_, bd)) if dist < bd => {
                    second = Some(bd);
                    best = Some((k, dist));
                }
                Some(_) => second = Some(second.map_or(dist, |s| s.min(dist))),
            }
        }
        (best, second)
    }
}

// ---------------------------------------------------------------- layers

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    I,
    J,
    K,
    L,
}

#[derive(Clone, Debug, Serialize)]
pub struct ToastLayer {
    pub index: usize,
    pub role: Role,
    #[serde(skip)]
    pub members: FixedBitSet,
    #[serde(skip)]
    pub components: Vec<Component>,
    pub shift: Option<Vec<i64>>,
    /// Component diameter bound this layer should respect.
    pub diameter_bound: i64,
}

impl ToastLayer {
    pub fn new(cube: &Cube, index: usize, role: Role, members: FixedBitSet, diameter_bound: i64) -> Self {
        let components = analyse(cube, &members, cube.r);
        Self { index, role, members, components, shift: None, diameter_bound }
    }

    pub fn clipped_count(&self) -> usize {
        self.components.iter().filter(|c| c.clipped).count()
    }

    pub fn summary(&self) -> LayerSummary {
        let live: Vec<&Component> = self.components.iter().filter(|c| !c.clipped).collect();
        LayerSummary {
            index: self.index,
            role: self.role,
            points: self.members.count_ones(..),
            components: self.components.len(),
            clipped: self.clipped_count(),
            max_size: live.iter().map(|c| c.len()).max().unwrap_or(0),
            max_diameter: live.iter().map(|c| c.diameter()).max().unwrap_or(0),
            with_holes: live.iter().filter(|c| !c.holes.is_empty()).count(),
            hole_count: live.iter().map(|c| c.holes.len()).sum(),
            diameter_bound: self.diameter_bound,
            members_rle: crate::io::rle_hex(&self.members),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct LayerSummary {
    pub index: usize,
    pub role: Role,
    pub points: usize,
    pub components: usize,
    pub clipped: usize,
    pub max_size: usize,
    pub max_diameter: i64,
    pub with_holes: usize,
    pub hole_count: usize,
    pub diameter_bound: i64,
    pub members_rle: String,
}

/// `I`: points whose nearest center beats every other center by `sep`.
#[derive(Clone, Debug)]
pub struct CoreReport {
    pub layer: ToastLayer,
    pub sep: i64,
    pub degenerate: bool,
    /// Non-clipped components with diameter above `2r`.
    pub diameter_violations: usize,
    /// Pairs of non-clipped components closer than `sep`.
    pub separation_violations: usize,
}

/// `v ∈ I` iff some `u ∈ X` has `dist(v,u') ≥ dist(v,u) + sep` for all other `u' ∈ X`.
pub fn build_core_i(w: &Window, x: &FixedBitSet, r: i64, sep: i64, index: usize) -> Result<CoreReport> {
    let cube = &w.cube;
    if x.count_ones(..) == 0 {
        return Err(Error::Precondition("X is empty on the window".into()));
    }
    // any rival closer than d1 + sep lies within r + sep of a covered point
    let search = r + sep.max(0);
    let idx = CenterIndex::new(cube, x, search.max(1));
    let flags: Vec<bool> = idx.scan(cube, |c, cands| match idx.nearest_two(c, cands, search) {
        (Some((_, d1)), second) => d1 <= r && second.map_or(true, |d2| d2 >= d1 + sep),
        (None, _) => false,
    });
    let members = crate::grid::to_bitset(&flags);
    let layer = ToastLayer::new(cube, index, Role::I, members, 2 * r);
    let live: Vec<&Component> = layer.components.iter().filter(|c| !c.clipped).collect();
    let diameter_violations = live.iter().filter(|c| c.diameter() > 2 * r).count();
    let separation_violations = if sep >= 2 {
        let labels = label_map(cube.len, &layer.components);
        close_label_pairs(cube, &labels, sep - 1)
            .into_iter()
            .filter(|&(a, b)| !layer.components[a as usize].clipped && !layer.components[b as usize].clipped)
            .count()
    } else {
        0
    };
    Ok(CoreReport { layer, sep, degenerate: sep == 0, diameter_violations, separation_violations })
}

/// Lattice shift `⌊r'/3⌋ (p - 3)` of the shifted `Y_i^p`.
pub fn shift_vector(r_prime: i64, p: &[i64]) -> Vec<i64> {
    p.iter().map(|&x| (r_prime / 3) * (x - 3)).collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct Containment {
    pub i: usize,
    pub j_in_core: bool,
    pub k_in_j: bool,
    pub i_in_j: bool,
    pub j_in_k: bool,
    pub y_in_l: bool,
}

#[derive(Clone, Debug)]
pub struct ToastBuild {
    pub schedule: Schedule,
    pub shift: Option<Vec<i64>>,
    pub x: Vec<DiscreteSet>,
    pub y: Vec<DiscreteSet>,
    pub cores: Vec<CoreReport>,
    pub j: Vec<ToastLayer>,
    pub k: Vec<ToastLayer>,
    pub l: Vec<ToastLayer>,
    pub containments: Vec<Containment>,
}

fn subset(a: &FixedBitSet, b: &FixedBitSet) -> bool {
    a.is_subset(b)
}

fn discrete_on(w: &Window, r: i64, budget: u64) -> Result<DiscreteSet> {
    let eff = r.min(2 * w.w + 1).max(1);
    let cover = uniform_cover(&w.gen, eff, budget)?;
    build_discrete_set(w, r, &cover, budget)
}

/// Builds `X_i, Y_i, I_i, J_i, K_i, L_i` for `i = 1..=depth`; `shift` selects `Y_i^p`.
pub fn build_layers(w: &Window, schedule: &Schedule, depth: usize, shift: Option<&[i64]>, budget: u64) -> Result<ToastBuild> {
    if depth > schedule.depth() {
        return Err(Error::InvalidArgument(format!("schedule has {} levels, depth {depth} requested", schedule.depth())));
    }
    if let Some(p) = shift {
        if p.len() != w.d() || p.iter().any(|&x| !(0..=5).contains(&x)) {
            return Err(Error::InvalidArgument("shift must lie in {0..5}^d".into()));
        }
    }
    let cube = &w.cube;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut cores = Vec::new();
    let mut js: Vec<ToastLayer> = Vec::new();
    let mut ks: Vec<ToastLayer> = Vec::new();
    let mut ls: Vec<ToastLayer> = Vec::new();
    let mut padded_j: Vec<Vec<Component>> = Vec::new();
    let mut containments = Vec::new();
    for i in 1..=depth {
        let lv = schedule.small(i)?;
        let rp_prev = schedule.r_prime_before(i)?;
        let qp_prev = schedule.q_prime_before(i)?;
        let x = discrete_on(w, lv.r, budget)?;
        let y = match shift {
            Some(p) if p.iter().any(|&v| v != 3) => {
                let s = shift_vector(lv.r_prime, p);
                let moved = Window {
                    anchor: w.act(&s),
                    ..w.clone()
                };
                let moved = Window::new(moved.gen, moved.anchor, w.w, w.shape_a.clone(), w.shape_b.clone())?;
                discrete_on(&moved, lv.r_prime, budget)?
            }
            _ => discrete_on(w, lv.r_prime, budget)?,
        };
        let core = build_core_i(w, &x.members, lv.r, 5 * rp_prev, i)?;

        // J_i = C_2(N_{q'_0+2}[J_1], …, N_{q'_{i-2}+2}[J_{i-1}], I_i)
        let prior_j: Vec<&[Component]> = padded_j.iter().map(|v| v.as_slice()).collect();
        let j_set = closure(cube, &prior_j, &core.layer.members, 2, None);
        let j_bound = 2 * lv.r + 2 * qp_prev;
        let j_layer = ToastLayer::new(cube, i, Role::J, j_set, j_bound);

        // K_i = C_2(K_1, L_1, …, K_{i-1}, L_{i-1}, N_2[J_i])
        let mut prior_kl: Vec<&[Component]> = Vec::new();
        for t in 0..ks.len() {
            prior_kl.push(&ks[t].components);
            prior_kl.push(&ls[t].components);
        }
        let n2j = dilate(cube, &j_layer.members, 2);
        let k_set = closure(cube, &prior_kl, &n2j, 2, None);
        let k_layer = ToastLayer::new(cube, i, Role::K, k_set, lv.t);

        // L_i = C_2(K_1, L_1, …, K_{i-1}, L_{i-1}, K_i, N_{⌊2r'_i/5⌋}[Y_i])
        let mut prior_l = prior_kl.clone();
        prior_l.push(&k_layer.components);
        let ny = dilate(cube, &y.members, 2 * lv.r_prime / 5);
        let l_set = closure(cube, &prior_l, &ny, 2, None);
        let l_layer = ToastLayer::new(cube, i, Role::L, l_set, lv.t_prime);

        containments.push(Containment {
            i,
            j_in_core: subset(&j_layer.members, &dilate(cube, &core.layer.members, qp_prev)),
            k_in_j: subset(&k_layer.members, &dilate(cube, &j_layer.members, qp_prev + 2)),
            i_in_j: subset(&core.layer.members, &j_layer.members),
            j_in_k: subset(&n2j, &k_layer.members),
            y_in_l: subset(&ny, &l_layer.members),
        });

        let pad = dilate(cube, &j_layer.members, qp_prev + 2);
        padded_j.push(analyse(cube, &pad, cube.r));
        xs.push(x);
        ys.push(y);
        cores.push(core);
        let mut k_layer = k_layer;
        let mut l_layer = l_layer;
        if let Some(p) = shift {
            k_layer.shift = Some(p.to_vec());
            l_layer.shift = Some(p.to_vec());
        }
        js.push(j_layer);
        ks.push(k_layer);
        ls.push(l_layer);
    }
    Ok(ToastBuild {
        schedule: schedule.clone(),
        shift: shift.map(|p| p.to_vec()),
        x: xs,
        y: ys,
        cores,
        j: js,
        k: ks,
        l: ls,
        containments,
    })
}

// ------------------------------------------------------------ tilde, validate

/// Removes components of `K_i` within distance 2 of a later `J_j` and of `L_i`
/// within distance 2 of a later `K_j`; returns `(K̃, L̃)`.
pub fn tilde_remove(cube: &Cube, b: &ToastBuild) -> (Vec<ToastLayer>, Vec<ToastLayer>) {
    let depth = b.j.len();
    let mut kt = Vec::with_capacity(depth);
    let mut lt = Vec::with_capacity(depth);
    for i in 0..depth {
        let mut later_j = FixedBitSet::with_capacity(cube.len);
        let mut later_k = FixedBitSet::with_capacity(cube.len);
        for j in i + 1..depth {
            later_j.union_with(&b.j[j].members);
            later_k.union_with(&b.k[j].members);
        }
        let near_j = dilate(cube, &later_j, 2);
        let near_k = dilate(cube, &later_k, 2);
        kt.push(keep_far(&b.k[i], &near_j));
        lt.push(keep_far(&b.l[i], &near_k));
    }
    (kt, lt)
}

fn keep_far(layer: &ToastLayer, near: &FixedBitSet) -> ToastLayer {
    let mut out = layer.clone();
    out.components.retain(|c| !c.vertices.iter().any(|&v| near.contains(v)));
    out.members.clear();
    for c in &out.components {
        for &v in &c.vertices {
            out.members.insert(v);
        }
    }
    out
}

/// The interleaved sequence `J_1, K̃_1, L̃_1, J_2, …`.
pub fn interleave(b: &ToastBuild, kt: &[ToastLayer], lt: &[ToastLayer]) -> Vec<ToastLayer> {
    let mut out = Vec::new();
    for i in 0..b.j.len() {
        out.push(b.j[i].clone());
        out.push(kt[i].clone());
        out.push(lt[i].clone());
    }
    out
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct ToastValidation {
    pub layers: usize,
    pub components_checked: usize,
    pub clipped_excluded: usize,
    /// (layer, component index, diameter, bound)
    pub bounded_failures: Vec<(usize, usize, i64, i64)>,
    /// (layer, component a, component b)
    pub distance_failures: Vec<(usize, u32, u32)>,
    /// (earlier layer, component, later layer)
    pub nesting_failures: Vec<(usize, usize, usize)>,
}

impl ToastValidation {
    pub fn ok(&self) -> bool {
        self.bounded_failures.is_empty() && self.distance_failures.is_empty() && self.nesting_failures.is_empty()
    }
}

/// Exhaustive check of the three toast properties on non-clipped components:
/// (1) diameter within the layer bound, (2) components of one layer at
/// distance ≥ 3, (3) for earlier `S` and later `D`, `N_2[S] ⊆ D` or `dist(S, D) ≥ 3`.
pub fn validate_toast(cube: &Cube, seq: &[ToastLayer]) -> ToastValidation {
    let mut v = ToastValidation { layers: seq.len(), ..Default::default() };
    for (li, layer) in seq.iter().enumerate() {
        for (ci, c) in layer.components.iter().enumerate() {
            if c.clipped {
                v.clipped_excluded += 1;
                continue;
            }
            v.components_checked += 1;
            if c.diameter() > layer.diameter_bound {
                v.bounded_failures.push((li, ci, c.diameter(), layer.diameter_bound));
            }
        }
        let labels = label_map(cube.len, &layer.components);
        for (a, b) in close_label_pairs(cube, &labels, 2) {
            if !layer.components[a as usize].clipped && !layer.components[b as usize].clipped {
                v.distance_failures.push((li, a, b));
            }
        }
    }
    for (lj, earlier) in seq.iter().enumerate() {
        let fails: Vec<(usize, usize, usize)> = earlier
            .components
            .par_iter()
            .enumerate()
            .filter(|(_, c)| !c.clipped)
            .flat_map_iter(|(ci, c)| {
                let ball = ball_of(cube, &c.vertices, 2, &c.lo, &c.hi);
                seq.iter()
                    .enumerate()
                    .skip(lj + 1)
                    .filter_map(|(li, later)| {
                        let hit = ball.iter().filter(|&&p| later.members.contains(p)).count();
                        (hit != 0 && hit != ball.len()).then_some((lj, ci, li))
                    })
                    .collect::<Vec<_>>()
            })
            .collect();
        v.nesting_failures.extend(fails);
    }
    v
}

/// Fraction of points of `‖n‖∞ ≤ valid` that lie in `set`.
pub fn fraction_in(cube: &Cube, set: &FixedBitSet, valid: i64) -> f64 {
    let mut hit = 0usize;
    let mut tot = 0usize;
    for i in 0..cube.len {
        if cube.norm(i) <= valid {
            tot += 1;
            if set.contains(i) {
                hit += 1;
            }
        }
    }
    if tot == 0 {
        0.0
    } else {
        hit as f64 / tot as f64
    }
}

/// `∪(J ∪ K̃ ∪ L̃) ⊇ ∪ L` on `‖n‖∞ ≤ valid`.
pub fn tilde_covers_l(cube: &Cube, b: &ToastBuild, kt: &[ToastLayer], lt: &[ToastLayer], valid: i64) -> bool {
    let mut cov = FixedBitSet::with_capacity(cube.len);
    let mut all_l = FixedBitSet::with_capacity(cube.len);
    for i in 0..b.j.len() {
        cov.union_with(&b.j[i].members);
        cov.union_with(&kt[i].members);
        cov.union_with(&lt[i].members);
        all_l.union_with(&b.l[i].members);
    }
    (0..cube.len).all(|v| cube.norm(v) > valid || !all_l.contains(v) || cov.contains(v))
}

#[derive(Clone, Debug, Serialize)]
pub struct ShiftCoverage {
    pub shifts: usize,
    pub valid_points: usize,
    pub covered_fraction: f64,
}

/// Fraction of valid points covered by `∪_p (J ∪ K̃^p ∪ L̃^p)` over all `6^d` shifts.
pub fn shift_coverage(w: &Window, schedule: &Schedule, depth: usize, valid: i64, budget: u64) -> Result<ShiftCoverage> {
    let d = w.d();
    let cube = &w.cube;
    let mut cov = FixedBitSet::with_capacity(cube.len);
    let shifts = crate::lattice::neighborhood(&vec![0; d], 5, true);
    for p in &shifts {
        let b = build_layers(w, schedule, depth, Some(p), budget)?;
        let (kt, lt) = tilde_remove(cube, &b);
        for i in 0..depth {
            cov.union_with(&b.j[i].members);
            cov.union_with(&kt[i].members);
            cov.union_with(&lt[i].members);
        }
    }
    let valid_points = (0..cube.len).filter(|&v| cube.norm(v) <= valid).count();
    Ok(ShiftCoverage { shifts: shifts.len(), valid_points, covered_fraction: fraction_in(cube, &cov, valid) })
}
