//! From an integer flow to explicit translation pieces: Voronoi cells,
//! aggregated cell flows, lex assignment, pre-selection, Z-sets, box counting
//! and verification.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use fixedbitset::FixedBitSet;
use serde::{Deserialize, Serialize};

use crate::discrete::{build_discrete_set, uniform_cover};
use crate::error::{Error, Result};
use crate::flows::DyadicFlow;
use crate::io::{rle_hex, rle_hex_decode};
use crate::lattice::{dir_index, directions, linf, linf_dist, Cube, Window};
use crate::scalar::{ols, Scalar};
use crate::toast::CenterIndex;
use crate::torus::fx_to_f64;

const NONE: u32 = u32::MAX;

/// `A` and `B` restricted to a working cube inside the window.
#[derive(Clone, Debug)]
pub struct Masks {
    pub a: FixedBitSet,
    pub b: FixedBitSet,
}

pub fn masks_on(w: &Window, cube: &Cube) -> Result<Masks> {
    if cube.d != w.d() || cube.r > w.w {
        return Err(Error::InvalidArgument("working cube must sit inside the window".into()));
    }
    let mut a = FixedBitSet::with_capacity(cube.len);
    let mut b = FixedBitSet::with_capacity(cube.len);
    for v in 0..cube.len {
        let src = cube.reindex(v, &w.cube).expect("inside window");
        a.set(v, w.in_a(src));
        b.set(v, w.in_b(src));
    }
    Ok(Masks { a, b })
}

// ------------------------------------------------------------ Voronoi

#[derive(Clone, Debug)]
pub struct VoronoiDecomposition {
    pub r: i64,
    pub cube: Cube,
    /// Centers of the maximal `r`-discrete set on the window, lex order.
    pub centers: Vec<Vec<i64>>,
    /// Center id per working-cube point (`u32::MAX` when no center lies within `r`).
    pub cell_of: Vec<u32>,
    /// Cell lies in the interior of the working cube and every point is trusted.
    pub valid: Vec<bool>,
}

impl VoronoiDecomposition {
    /// Points of each cell in the working cube, ascending.
    pub fn cells(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.centers.len()];
        for (v, &c) in self.cell_of.iter().enumerate() {
            if c != NONE {
                out[c as usize].push(v);
            }
        }
        out
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&x| x).count()
    }

    /// Points in valid cells.
    pub fn valid_region(&self) -> FixedBitSet {
        let mut s = FixedBitSet::with_capacity(self.cube.len);
        for (v, &c) in self.cell_of.iter().enumerate() {
            if c != NONE && self.valid[c as usize] {
                s.insert(v);
            }
        }
        s
    }
}

/// Nearest-center cells on `cube` (inside the window), centers from the
/// greedy maximal `r`-discrete set of the window.
pub fn voronoi(w: &Window, cube: &Cube, r: i64, trusted: &FixedBitSet, budget: u64) -> Result<VoronoiDecomposition> {
    let eff = r.min(2 * w.w + 1).max(1);
    let cover = uniform_cover(&w.gen, eff, budget)?;
    let ds = build_discrete_set(w, r, &cover, budget)?;
    let idx = CenterIndex::new(&w.cube, &ds.members, r);
    let centers: Vec<Vec<i64>> = (0..idx.len()).map(|k| idx.center(k).to_vec()).collect();
    let labels = idx.scan(&w.cube, |p, cands| {
        let mut best = (NONE, i64::MAX);
        for &k in cands {
            let dist = linf_dist(p, idx.center(k as usize));
            // candidates ascend, so strict comparison keeps the lex-least tie
            if dist <= r && dist < best.1 {
                best = (k, dist);
            }
        }
        Some(best.0)
    });
    let mut cell_of = vec![NONE; cube.len];
    for (v, c) in cell_of.iter_mut().enumerate() {
        *c = labels[cube.reindex(v, &w.cube).expect("inside window")].unwrap_or(NONE);
    }
    let mut valid: Vec<bool> = centers.iter().map(|c| linf(c) + r < cube.r).collect();
    let mut nonempty = vec![false; centers.len()];
    for (v, &c) in cell_of.iter().enumerate() {
        if c != NONE {
            nonempty[c as usize] = true;
            if !trusted.contains(v) {
                valid[c as usize] = false;
            }
        }
    }
    for (k, ok) in valid.iter_mut().enumerate() {
        *ok &= nonempty[k];
    }
    Ok(VoronoiDecomposition { r, cube: cube.clone(), centers, cell_of, valid })
}

#[derive(Clone, Debug, Serialize)]
pub struct CellCertificate {
    pub center: Vec<i64>,
    pub a: usize,
    pub b: usize,
    pub rhs: i64,
}

#[derive(Clone, Debug, Serialize)]
pub struct VoronoiCertificate {
    pub r: i64,
    pub strict: bool,
    pub valid_cells: usize,
    pub failing: Vec<CellCertificate>,
    /// Least `min(|V∩A|, |V∩B|) - rhs` over valid cells.
    pub min_slack: Option<i64>,
    pub tried: Vec<i64>,
}

impl VoronoiCertificate {
    pub fn holds(&self) -> bool {
        self.valid_cells > 0 && self.failing.is_empty()
    }
}

fn int_value(f: &DyadicFlow, v: usize, k: usize) -> Option<i64> {
    f.get_idx(v, k).map(|x| (x >> f.exp) as i64)
}

/// Exhaustive per-cell check of `min(|V∩A|,|V∩B|) ≥ Σ_{∂V} |f|` (`+1` per
/// boundary edge when `strict`).
pub fn check_certificate(f: &DyadicFlow, vor: &VoronoiDecomposition, masks: &Masks, strict: bool) -> Result<VoronoiCertificate> {
    if f.exp != 0 || f.cube != vor.cube {
        return Err(Error::InvalidArgument("an integer flow on the Voronoi cube is required".into()));
    }
    let cube = &vor.cube;
    let dirs = directions(cube.d);
    let offs: Vec<isize> = dirs.iter().map(|g| cube.offset(g)).collect();
    let n = vor.centers.len();
    let mut a = vec![0usize; n];
    let mut b = vec![0usize; n];
    let mut rhs = vec![0i64; n];
    for v in 0..cube.len {
        let c = vor.cell_of[v];
        if c == NONE || !vor.valid[c as usize] {
            continue;
        }
        let c = c as usize;
        a[c] += masks.a.contains(v) as usize;
        b[c] += masks.b.contains(v) as usize;
        let mut err = false;
        cube.for_each_neighbor(v, &dirs, &offs, |k, u| {
            if vor.cell_of[u] != c as u32 {
                match int_value(f, v, k) {
                    Some(x) => rhs[c] += x.abs() + strict as i64,
                    None => err = true,
                }
            }
        });
        if err {
            return Err(Error::Precondition("valid cell touches the flow cube rim".into()));
        }
    }
    let mut failing = Vec::new();
    let mut min_slack: Option<i64> = None;
    for k in 0..n {
        if !vor.valid[k] {
            continue;
        }
        let slack = a[k].min(b[k]) as i64 - rhs[k];
        min_slack = Some(min_slack.map_or(slack, |s| s.min(slack)));
        if slack < 0 {
            failing.push(CellCertificate { center: vor.centers[k].clone(), a: a[k], b: b[k], rhs: rhs[k] });
        }
    }
    Ok(VoronoiCertificate { r: vor.r, strict, valid_cells: vor.valid_count(), failing, min_slack, tried: vec![vor.r] })
}

/// Doubling search `r = 1, 2, 4, …` for the first radius whose certificate holds.
pub fn choose_voronoi_r(
    f: &DyadicFlow,
    w: &Window,
    masks: &Masks,
    trusted: &FixedBitSet,
    strict: bool,
    budget: u64,
) -> Result<(VoronoiDecomposition, VoronoiCertificate)> {
    let cube = &f.cube;
    let mut tried = Vec::new();
    let mut r = 1i64;
    while 2 * r < cube.r {
        let vor = voronoi(w, cube, r, trusted, budget)?;
        let mut cert = check_certificate(f, &vor, masks, strict)?;
        tried.push(r);
        if cert.holds() {
            cert.tried = tried;
            return Ok((vor, cert));
        }
        r *= 2;
    }
    Err(Error::NoVoronoiRadius(r as u32))
}

/// `F(u, u') = Σ f(v, w)` over edges from cell `u` to cell `u' ≠ u`.
pub fn aggregate_cell_flow(f: &DyadicFlow, vor: &VoronoiDecomposition) -> BTreeMap<(u32, u32), i64> {
    let cube = &vor.cube;
    let dirs = directions(cube.d);
    let offs: Vec<isize> = dirs.iter().map(|g| cube.offset(g)).collect();
    let mut out = BTreeMap::new();
    for v in 0..cube.len {
        let c = vor.cell_of[v];
        if c == NONE {
            continue;
        }
        cube.for_each_neighbor(v, &dirs, &offs, |k, u| {
            let c2 = vor.cell_of[u];
            if c2 != NONE && c2 != c {
                if let Some(x) = int_value(f, v, k) {
                    if x != 0 {
                        *out.entry((c, c2)).or_insert(0) += x;
                    }
                }
            }
        });
    }
    out.retain(|_, x| *x != 0);
    out
}

// ------------------------------------------------------------ assignment

#[derive(Clone, Debug)]
pub struct PieceAssignment {
    pub d: usize,
    pub r: i64,
    pub cube: Cube,
    /// `(a, b)` pairs of working-cube indices, sorted by `a`; excludes pre-selected pairs.
    pub matched: Vec<(usize, usize)>,
    /// Pre-selected `(a, a + t)` pairs.
    pub preselected: Vec<(usize, usize)>,
    /// A-points of valid cells left without a partner.
    pub unresolved: Vec<usize>,
    /// B-points of valid cells left without a partner.
    pub unmatched_b: Vec<usize>,
    pub valid_region: FixedBitSet,
    /// Valid cells whose A or B supply ran out.
    pub short_cells: usize,
    /// Cells whose leftover A and B counts differ.
    pub mismatched_cells: usize,
}

impl PieceAssignment {
    pub fn offset(&self, a: usize, b: usize) -> Vec<i64> {
        let ca = self.cube.coords(a);
        self.cube.coords(b).iter().zip(&ca).map(|(x, y)| x - y).collect()
    }

    /// Pieces keyed by offset, A-points ascending (pre-selected points included).
    pub fn pieces(&self) -> BTreeMap<Vec<i64>, Vec<usize>> {
        let mut out: BTreeMap<Vec<i64>, Vec<usize>> = BTreeMap::new();
        for &(a, b) in self.matched.iter().chain(&self.preselected) {
            out.entry(self.offset(a, b)).or_default().push(a);
        }
        out.values_mut().for_each(|v| v.sort_unstable());
        out
    }

    pub fn used_offsets(&self) -> BTreeSet<Vec<i64>> {
        self.matched.iter().map(|&(a, b)| self.offset(a, b)).collect()
    }

    pub fn to_doc(&self) -> AssignmentDoc {
        let piece_docs = |pairs: &[(usize, usize)]| {
            let mut m: BTreeMap<Vec<i64>, FixedBitSet> = BTreeMap::new();
            for &(a, b) in pairs {
                m.entry(self.offset(a, b)).or_insert_with(|| FixedBitSet::with_capacity(self.cube.len)).insert(a);
            }
            m.into_iter()
                .map(|(offset, s)| PieceDoc { count: s.count_ones(..), points: rle_hex(&s), offset })
                .collect::<Vec<_>>()
        };
        let mut un = FixedBitSet::with_capacity(self.cube.len);
        self.unresolved.iter().for_each(|&v| un.insert(v));
        let mut ub = FixedBitSet::with_capacity(self.cube.len);
        self.unmatched_b.iter().for_each(|&v| ub.insert(v));
        AssignmentDoc {
            d: self.d,
            r: self.r,
            cube_r: self.cube.r,
            pieces: piece_docs(&self.matched),
            preselected: piece_docs(&self.preselected),
            unresolved: rle_hex(&un),
            unmatched_b: rle_hex(&ub),
            valid_region: rle_hex(&self.valid_region),
            short_cells: self.short_cells,
            mismatched_cells: self.mismatched_cells,
        }
    }

    pub fn from_doc(doc: &AssignmentDoc) -> Result<Self> {
        let cube = Cube::new(doc.d, doc.cube_r);
        let decode = |s: &str| -> Result<FixedBitSet> {
            let b = rle_hex_decode(s)?;
            if b.len() != cube.len {
                return Err(Error::InvalidArgument("point list does not match the cube".into()));
            }
            Ok(b)
        };
        let pairs = |docs: &[PieceDoc]| -> Result<Vec<(usize, usize)>> {
            let mut out = Vec::new();
            for p in docs {
                if p.offset.len() != doc.d {
                    return Err(Error::InvalidArgument("offset dimension".into()));
                }
                let s = decode(&p.points)?;
                if s.count_ones(..) != p.count {
                    return Err(Error::Counting(format!("piece {:?} lists {} points, count says {}", p.offset, s.count_ones(..), p.count)));
                }
                for a in s.ones() {
                    let c: Vec<i64> = cube.coords(a).iter().zip(&p.offset).map(|(x, y)| x + y).collect();
                    let b = cube.try_index(&c).ok_or_else(|| Error::InvalidArgument(format!("image of {a} leaves the cube")))?;
                    out.push((a, b));
                }
            }
            out.sort_unstable();
            Ok(out)
        };
        Ok(Self {
            d: doc.d,
            r: doc.r,
            matched: pairs(&doc.pieces)?,
            preselected: pairs(&doc.preselected)?,
            unresolved: decode(&doc.unresolved)?.ones().collect(),
            unmatched_b: decode(&doc.unmatched_b)?.ones().collect(),
            valid_region: decode(&doc.valid_region)?,
            short_cells: doc.short_cells,
            mismatched_cells: doc.mismatched_cells,
            cube,
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct PieceDoc {
    pub offset: Vec<i64>,
    pub count: usize,
    /// Run-length hex bitset over the working cube.
    pub points: String,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct AssignmentDoc {
    pub d: usize,
    pub r: i64,
    pub cube_r: i64,
    pub pieces: Vec<PieceDoc>,
    pub preselected: Vec<PieceDoc>,
    pub unresolved: String,
    pub unmatched_b: String,
    pub valid_region: String,
    pub short_cells: usize,
    pub mismatched_cells: usize,
}

/// Lex assignment of `A` to `B` along the aggregated cell flow. Points of
/// `pre` are removed from `A` and `B` beforehand and carried over unchanged.
pub fn assign_pieces(f: &DyadicFlow, vor: &VoronoiDecomposition, masks: &Masks, pre: Option<&Preselection>) -> Result<PieceAssignment> {
    let cube = &vor.cube;
    let agg = aggregate_cell_flow(f, vor);
    let cells = vor.cells();
    let n = cells.len();
    let mut taken_a = FixedBitSet::with_capacity(cube.len);
    let mut taken_b = FixedBitSet::with_capacity(cube.len);
    let mut preselected = Vec::new();
    if let Some(p) = pre {
        for (t, a) in &p.picks {
            let c: Vec<i64> = cube.coords(*a).iter().zip(t).map(|(x, y)| x + y).collect();
            let b = cube.index(&c);
            taken_a.insert(*a);
            taken_b.insert(b);
            preselected.push((*a, b));
        }
    }
    preselected.sort_unstable();
    let a_list: Vec<Vec<usize>> = cells.iter().map(|c| c.iter().copied().filter(|&v| masks.a.contains(v) && !taken_a.contains(v)).collect()).collect();
    let b_list: Vec<Vec<usize>> = cells.iter().map(|c| c.iter().copied().filter(|&v| masks.b.contains(v) && !taken_b.contains(v)).collect()).collect();

    // A(u,u') and B(u,u') in lex order of u'
    let mut out_a: HashMap<(u32, u32), (usize, usize)> = HashMap::new();
    let mut res_b: HashMap<(u32, u32), (usize, usize)> = HashMap::new();
    let mut ptr_a = vec![0usize; n];
    let mut ptr_b = vec![0usize; n];
    let mut short = vec![false; n];
    for u in 0..n as u32 {
        if !vor.valid[u as usize] {
            continue;
        }
        for (&(_, u2), &x) in agg.range((u, 0)..(u + 1, 0)) {
            let (ptr, list, map) = if x > 0 { (&mut ptr_a, &a_list, &mut out_a) } else { (&mut ptr_b, &b_list, &mut res_b) };
            let k = x.unsigned_abs() as usize;
            let s = ptr[u as usize];
            if s + k > list[u as usize].len() {
                short[u as usize] = true;
                continue;
            }
            map.insert((u, u2), (s, s + k));
            ptr[u as usize] = s + k;
        }
    }
    let live = |u: u32| vor.valid[u as usize] && !short[u as usize];
    let mut matched = Vec::new();
    let mut unresolved = Vec::new();
    let mut unmatched_b = Vec::new();
    let mut mismatched = 0;
    for u in 0..n as u32 {
        let ui = u as usize;
        if !vor.valid[ui] {
            continue;
        }
        if short[ui] {
            unresolved.extend(&a_list[ui]);
            unmatched_b.extend(&b_list[ui]);
            continue;
        }
        for (&(_, u2), &x) in agg.range((u, 0)..(u + 1, 0)) {
            if x > 0 {
                let (s, e) = out_a[&(u, u2)];
                if live(u2) {
                    let (bs, _) = res_b[&(u2, u)];
                    for i in 0..e - s {
                        matched.push((a_list[ui][s + i], b_list[u2 as usize][bs + i]));
                    }
                } else {
                    unresolved.extend(&a_list[ui][s..e]);
                }
            } else if !live(u2) {
                let (s, e) = res_b[&(u, u2)];
                unmatched_b.extend(&b_list[ui][s..e]);
            }
        }
        let ra = &a_list[ui][ptr_a[ui]..];
        let rb = &b_list[ui][ptr_b[ui]..];
        if ra.len() != rb.len() {
            mismatched += 1;
        }
        // points of A ∩ B stay put; the rest pair up in lex order
        let (mut i, mut j) = (0, 0);
        let (mut xa, mut xb) = (Vec::new(), Vec::new());
        while i < ra.len() || j < rb.len() {
            match (ra.get(i), rb.get(j)) {
                (Some(&x), Some(&y)) if x == y => {
                    matched.push((x, x));
                    i += 1;
                    j += 1;
                }
                (Some(&x), Some(&y)) if x < y => {
                    xa.push(x);
                    i += 1;
                }
                (Some(&x), None) => {
                    xa.push(x);
                    i += 1;
                }
                (_, Some(&y)) => {
                    xb.push(y);
                    j += 1;
                }
                (None, None) => unreachable!(),
            }
        }
        let k = xa.len().min(xb.len());
        matched.extend(xa[..k].iter().copied().zip(xb[..k].iter().copied()));
        unresolved.extend(&xa[k..]);
        unmatched_b.extend(&xb[k..]);
    }
    matched.sort_unstable();
    unresolved.sort_unstable();
    unmatched_b.sort_unstable();
    Ok(PieceAssignment {
        d: cube.d,
        r: vor.r,
        cube: cube.clone(),
        matched,
        preselected,
        unresolved,
        unmatched_b,
        valid_region: vor.valid_region(),
        short_cells: short.iter().filter(|&&s| s).count(),
        mismatched_cells: mismatched,
    })
}

// ------------------------------------------------------------ pre-selection

#[derive(Clone, Debug)]
pub struct Preselection {
    /// `(t, a)` with `a ∈ A`, `a + t ∈ B`, in offset order.
    pub picks: Vec<(Vec<i64>, usize)>,
    /// Offsets for which no admissible point exists.
    pub missing: Vec<Vec<i64>>,
    pub spacing: i64,
    /// `f*`: unit flows along lex-least shortest paths `a → a + t`.
    pub flow: DyadicFlow,
}

/// Least pairwise distance of pre-selected points: paths of length at most
/// `4r + 1` from points this far apart share no vertex and no image.
pub fn preselect_spacing(r: i64) -> i64 {
    2 * (4 * r + 1) + 3
}

/// Lex-least shortest path from `u` to `u + t` in `G_d`.
pub fn lex_path(u: &[i64], t: &[i64]) -> Vec<Vec<i64>> {
    let target: Vec<i64> = u.iter().zip(t).map(|(a, b)| a + b).collect();
    let mut cur = u.to_vec();
    let mut out = vec![cur.clone()];
    let mut left = linf(t);
    while left > 0 {
        // smallest coordinates first, subject to staying on a shortest path
        let next: Vec<i64> = cur.iter().zip(&target).map(|(&c, &g)| if (g - (c - 1)).abs() <= left - 1 { c - 1 } else if (g - c).abs() <= left - 1 { c } else { c + 1 }).collect();
        cur = next;
        out.push(cur.clone());
        left -= 1;
    }
    out
}

/// Greedy singleton pre-selection: for each offset `t` (in the given order)
/// the lex-least admissible `a ∈ A ∩ region` with `a + t ∈ B ∩ region`, at
/// distance at least `spacing` from earlier picks.
pub fn preselect_nonnull(cube: &Cube, masks: &Masks, region: &FixedBitSet, offsets: &[Vec<i64>], r: i64) -> Result<Preselection> {
    let spacing = preselect_spacing(r);
    let mut picks: Vec<(Vec<i64>, usize)> = Vec::new();
    let mut missing = Vec::new();
    let mut flow = DyadicFlow::zero(cube.d, cube.r, 0, 0);
    let mut chosen: Vec<Vec<i64>> = Vec::new();
    let a_pts: Vec<usize> = masks.a.ones().filter(|&v| region.contains(v)).collect();
    for t in offsets {
        if t.len() != cube.d {
            return Err(Error::InvalidArgument("offset dimension".into()));
        }
        let hit = a_pts.iter().copied().find(|&a| {
            let ca = cube.coords(a);
            let cb: Vec<i64> = ca.iter().zip(t).map(|(x, y)| x + y).collect();
            match cube.try_index(&cb) {
                Some(b) if masks.b.contains(b) && region.contains(b) => chosen.iter().all(|c| linf_dist(c, &ca) >= spacing),
                _ => false,
            }
        });
        match hit {
            Some(a) => {
                let ca = cube.coords(a);
                let path = lex_path(&ca, t);
                for step in path.windows(2) {
                    let g: Vec<i64> = step[1].iter().zip(&step[0]).map(|(x, y)| x - y).collect();
                    flow.add_idx(cube.index(&step[0]), dir_index(&g), 1)?;
                }
                chosen.push(ca);
                picks.push((t.clone(), a));
            }
            None => missing.push(t.clone()),
        }
    }
    Ok(Preselection { picks, missing, spacing, flow })
}

/// `f - f*` for integer flows on one cube.
pub fn subtract_flow(f: &DyadicFlow, g: &DyadicFlow) -> Result<DyadicFlow> {
    if f.cube != g.cube || f.exp != g.exp {
        return Err(Error::InvalidArgument("flows must share cube and exponent".into()));
    }
    let mut out = f.clone();
    for (x, y) in out.num.iter_mut().zip(&g.num) {
        *x = x.checked_sub(*y).ok_or(Error::Overflow("flow difference"))?;
    }
    Ok(out)
}

// ------------------------------------------------------------ Z-sets

/// `Z_{γ,ℓ} = {v : f(v, v+γ) = ℓ}` over points whose edge lies in the cube,
/// keyed by direction index and value.
pub fn extract_z_sets(f: &DyadicFlow) -> BTreeMap<(usize, i64), FixedBitSet> {
    let cube = &f.cube;
    let ndir = f.dirs().len();
    let mut out: BTreeMap<(usize, i64), FixedBitSet> = BTreeMap::new();
    for v in 0..cube.len {
        for k in 0..ndir {
            if let Some(x) = int_value(f, v, k) {
                out.entry((k, x)).or_insert_with(|| FixedBitSet::with_capacity(cube.len)).insert(v);
            }
        }
    }
    out
}

/// The integer flow encoded by a Z-set family.
pub fn flow_from_z_sets(cube: &Cube, z: &BTreeMap<(usize, i64), FixedBitSet>) -> Result<DyadicFlow> {
    let mut f = DyadicFlow::zero(cube.d, cube.r, 0, 0);
    for (&(k, x), s) in z {
        for v in s.ones() {
            f.set_idx(v, k, x as i128)?;
        }
    }
    Ok(f)
}

// ------------------------------------------------------------ box counting

#[derive(Clone, Debug, Serialize)]
pub struct BoxDimensionReport<T: Scalar> {
    pub deltas: Vec<T>,
    /// Boxes meeting a piece boundary or the unresolved region.
    pub counts: Vec<u64>,
    /// Boxes that meet only the boundary of `A` (no label change inside `A`).
    pub a_boundary_only: Vec<u64>,
    pub unresolved_boxes: Vec<u64>,
    pub slope: Option<T>,
    pub fine: u32,
    pub samples: usize,
    pub note: String,
}

const OUTSIDE: u32 = u32::MAX;
const UNRESOLVED: u32 = u32::MAX - 1;

/// Box counts of piece boundaries for `k = 2`. The torus is rasterised at
/// `1/fine`; each raster cell in `A` takes the label (piece, or unresolved)
/// of its nearest `A`-sample, cells outside `A` are labelled outside. A
/// `δ`-box counts when it holds two labels or an unresolved cell.
pub fn box_dimension_estimate<T: Scalar>(pa: &PieceAssignment, w: &Window, inv_deltas: &[u32], fine: u32) -> Result<BoxDimensionReport<T>> {
    if w.gen.k != 2 {
        return Err(Error::InvalidArgument("box counting renders k = 2 only".into()));
    }
    if inv_deltas.len() < 3 {
        return Err(Error::InvalidArgument("at least 3 resolutions are needed".into()));
    }
    if inv_deltas.iter().any(|&m| m == 0 || fine % m != 0) {
        return Err(Error::InvalidArgument("each 1/delta must divide the raster size".into()));
    }
    let bits = w.gen.bits;
    let pieces = pa.pieces();
    let mut label_of: HashMap<usize, u32> = HashMap::new();
    for (id, pts) in pieces.values().enumerate() {
        for &a in pts {
            label_of.insert(a, id as u32);
        }
    }
    // samples: every A-point of the working cube
    let mut samples: Vec<([f64; 2], u32)> = Vec::new();
    let cube = &pa.cube;
    let masks = masks_on(w, cube)?;
    for a in masks.a.ones() {
        let p = w.act(&cube.coords(a)).to_f64(bits);
        samples.push(([p[0], p[1]], label_of.get(&a).copied().unwrap_or(UNRESOLVED)));
    }
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no A-samples on the working cube".into()));
    }
    let nb = (((samples.len() as f64).sqrt() / 2.0) as usize).clamp(1, 1024);
    let mut buckets: Vec<Vec<u32>> = vec![Vec::new(); nb * nb];
    let bk = |x: f64| ((x * nb as f64) as usize).min(nb - 1);
    for (i, (p, _)) in samples.iter().enumerate() {
        buckets[bk(p[0]) * nb + bk(p[1])].push(i as u32);
    }
    let tdist = |a: f64, b: f64| {
        let d = (a - b).abs();
        d.min(1.0 - d)
    };
    let nearest = |x: f64, y: f64| -> u32 {
        let (bx, by) = (bk(x) as i64, bk(y) as i64);
        let mut best = (f64::INFINITY, UNRESOLVED);
        let mut ring = 0i64;
        loop {
            for dx in -ring..=ring {
                for dy in -ring..=ring {
                    if dx.abs() != ring && dy.abs() != ring {
                        continue;
                    }
                    let cx = (bx + dx).rem_euclid(nb as i64) as usize;
                    let cy = (by + dy).rem_euclid(nb as i64) as usize;
                    for &s in &buckets[cx * nb + cy] {
                        let (p, l) = samples[s as usize];
                        let d2 = tdist(p[0], x).powi(2) + tdist(p[1], y).powi(2);
                        if d2 < best.0 || (d2 == best.0 && l < best.1) {
                            best = (d2, l);
                        }
                    }
                }
            }
            // every unseen sample is at least `ring / nb` away
            let reach = ring as f64 / nb as f64;
            if (best.0.is_finite() && reach * reach >= best.0) || 2 * ring + 1 >= nb as i64 {
                return best.1;
            }
            ring += 1;
        }
    };
    let n = fine as usize;
    let mut raster = vec![OUTSIDE; n * n];
    for i in 0..n {
        for j in 0..n {
            let x = (i as f64 + 0.5) / n as f64;
            let y = (j as f64 + 0.5) / n as f64;
            let p = crate::torus::TorusPoint::from_coords(&[crate::torus::fx_from_f64(x, bits), crate::torus::fx_from_f64(y, bits)], bits);
            if w.shape_a.contains(&p, bits) {
                raster[i * n + j] = nearest(x, y);
            }
        }
    }
    let mut counts = Vec::new();
    let mut a_only = Vec::new();
    let mut unres = Vec::new();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for &m in inv_deltas {
        let s = n / m as usize;
        let (mut c, mut ao, mut u) = (0u64, 0u64, 0u64);
        for bi in 0..m as usize {
            for bj in 0..m as usize {
                let mut first: Option<u32> = None;
                let (mut mixed, mut has_unres, mut in_a, mut out_a, mut two_pieces) = (false, false, false, false, false);
                // closed boxes: one raster cell of overlap with each neighbour
                for i in (bi * s) as i64 - 1..=((bi + 1) * s) as i64 {
                    for j in (bj * s) as i64 - 1..=((bj + 1) * s) as i64 {
                        let l = raster[i.rem_euclid(n as i64) as usize * n + j.rem_euclid(n as i64) as usize];
                        has_unres |= l == UNRESOLVED;
                        if l == OUTSIDE {
                            out_a = true;
                        } else {
                            in_a = true;
                        }
                        match first {
                            None => first = Some(l),
                            Some(f0) if f0 != l => {
                                mixed = true;
                                if f0 != OUTSIDE && l != OUTSIDE {
                                    two_pieces = true;
                                }
                            }
                            _ => {}
                        }
                    }
                }
                if mixed || has_unres {
                    c += 1;
                }
                if has_unres {
                    u += 1;
                }
                if in_a && out_a && !two_pieces && !has_unres {
                    ao += 1;
                }
            }
        }
        counts.push(c);
        a_only.push(ao);
        unres.push(u);
        if c > 0 {
            xs.push(T::of(m as f64).ln());
            ys.push(T::of(c as f64).ln());
        }
    }
    let slope = if xs.len() >= 3 { ols(&xs, &ys).map(|(_, b)| b) } else { None };
    Ok(BoxDimensionReport {
        deltas: inv_deltas.iter().map(|&m| T::one() / T::of(m as f64)).collect(),
        counts,
        a_boundary_only: a_only,
        unresolved_boxes: unres,
        slope,
        fine,
        samples: samples.len(),
        note: "window-scale trend only; the target regime (slope <= 2 - zeta, zeta < 1/49) is far beyond desk scale".into(),
    })
}

/// Torus coordinates of a working-cube point, as floats.
pub fn sample_position(w: &Window, cube: &Cube, v: usize) -> Vec<f64> {
    w.act(&cube.coords(v)).coords().iter().map(|&c| fx_to_f64(c, w.gen.bits)).collect()
}

// ------------------------------------------------------------ verification

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EquiVerification {
    pub injective: bool,
    /// Two A-points sent to one B-point.
    pub collision: Option<(Vec<i64>, Vec<i64>, Vec<i64>)>,
    pub images_in_b: bool,
    pub domain_ok: bool,
    pub offsets_ok: bool,
    pub max_offset: i64,
    pub offset_bound: i64,
    pub pieces: usize,
    pub matched: usize,
    pub preselected: usize,
    pub unresolved: usize,
    pub valid_b: usize,
    pub covered_b: usize,
    pub b_coverage: f64,
    pub violations: Vec<String>,
}

impl EquiVerification {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn verify_equidecomposition(pa: &PieceAssignment, w: &Window) -> Result<EquiVerification> {
    let cube = &pa.cube;
    let masks = masks_on(w, cube)?;
    let mut violations = Vec::new();
    let mut image_of: HashMap<usize, usize> = HashMap::new();
    let mut collision = None;
    let mut images_in_b = true;
    let mut max_offset = 0;
    let all: Vec<(usize, usize)> = pa.matched.iter().chain(&pa.preselected).copied().collect();
    let mut domain = FixedBitSet::with_capacity(cube.len);
    for &(a, b) in &all {
        if let Some(prev) = image_of.insert(b, a) {
            if collision.is_none() {
                collision = Some((cube.coords(prev), cube.coords(a), cube.coords(b)));
                violations.push(format!("points {:?} and {:?} both map to {:?}", cube.coords(prev), cube.coords(a), cube.coords(b)));
            }
        }
        if domain.put(a) {
            violations.push(format!("point {:?} is assigned twice", cube.coords(a)));
        }
        if !masks.b.contains(b) && images_in_b {
            images_in_b = false;
            violations.push(format!("image {:?} is not in B", cube.coords(b)));
        }
        if !masks.a.contains(a) {
            violations.push(format!("domain point {:?} is not in A", cube.coords(a)));
        }
        max_offset = max_offset.max(linf(&pa.offset(a, b)));
    }
    let bound = 4 * pa.r + 1;
    let offsets_ok = max_offset <= bound;
    if !offsets_ok {
        violations.push(format!("offset norm {max_offset} exceeds {bound}"));
    }
    let mut expected = masks.a.clone();
    expected.intersect_with(&pa.valid_region);
    let mut covered = domain.clone();
    for &v in &pa.unresolved {
        if covered.put(v) {
            violations.push(format!("unresolved point {:?} is also assigned", cube.coords(v)));
        }
    }
    let domain_ok = covered == expected;
    if !domain_ok {
        violations.push("assigned and unresolved points do not partition the A-points of valid cells".into());
    }
    let mut vb = masks.b.clone();
    vb.intersect_with(&pa.valid_region);
    let valid_b = vb.count_ones(..);
    let covered_b = image_of.keys().filter(|&&b| vb.contains(b)).count();
    let pieces = pa.pieces().len();
    Ok(EquiVerification {
        injective: collision.is_none(),
        collision,
        images_in_b,
        domain_ok,
        offsets_ok,
        max_offset,
        offset_bound: bound,
        pieces,
        matched: pa.matched.len(),
        preselected: pa.preselected.len(),
        unresolved: pa.unresolved.len(),
        valid_b,
        covered_b,
        b_coverage: if valid_b == 0 { 1.0 } else { covered_b as f64 / valid_b as f64 },
        violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::torus::{demo_regions, sample_generators, Region, TorusPoint};
    use proptest::prelude::*;

    fn window(seed: u64, d: usize, w: i64, same: bool) -> Window {
        let g = sample_generators(seed, 2, d, 62, 8).unwrap();
        let (a, b) = demo_regions(0.125, 62);
        let b = if same { a.clone() } else { b };
        Window::new(g, TorusPoint::zero(2), w, a, b).unwrap()
    }

    fn all_trusted(cube: &Cube) -> FixedBitSet {
        let mut s = FixedBitSet::with_capacity(cube.len);
        s.insert_range(..);
        s
    }

    #[test]
    fn voronoi_invariants() {
        let w = window(1, 2, 40, false);
        let cube = Cube::new(2, 30);
        let r = 5;
        let vor = voronoi(&w, &cube, r, &all_trusted(&cube), 1 << 30).unwrap();
        let cells = vor.cells();
        for (k, pts) in cells.iter().enumerate() {
            let c = &vor.centers[k];
            for &v in pts {
                assert!(linf_dist(&cube.coords(v), c) <= r);
            }
            for a in pts {
                for b in pts {
                    assert!(linf_dist(&cube.coords(*a), &cube.coords(*b)) <= 2 * r);
                }
            }
            if let Some(ci) = cube.try_index(c) {
                for v in 0..cube.len {
                    if linf_dist(&cube.coords(v), c) <= r / 2 {
                        assert_eq!(vor.cell_of[v], k as u32);
                    }
                }
                assert_eq!(vor.cell_of[ci], k as u32);
            }
        }
        assert!(vor.cell_of.iter().all(|&c| c != NONE));
    }

    #[test]
    fn zero_flow_a_equals_b_matches_in_place() {
        let w = window(2, 2, 30, true);
        let cube = Cube::new(2, 24);
        let masks = masks_on(&w, &cube).unwrap();
        let f = DyadicFlow::zero(2, 24, 0, 0);
        let (vor, cert) = choose_voronoi_r(&f, &w, &masks, &all_trusted(&cube), false, 1 << 30).unwrap();
        assert_eq!(cert.r, 1);
        assert!(aggregate_cell_flow(&f, &vor).is_empty());
        let pa = assign_pieces(&f, &vor, &masks, None).unwrap();
        assert!(pa.matched.iter().all(|&(a, b)| a == b));
        let ver = verify_equidecomposition(&pa, &w).unwrap();
        assert!(ver.ok(), "{:?}", ver.violations);
        assert_eq!(ver.b_coverage, 1.0);
    }

    /// Two cells on a line, one unit of flow across their boundary.
    fn two_cell_instance() -> (Cube, VoronoiDecomposition, Masks, DyadicFlow) {
        let cube = Cube::new(2, 6);
        let centers = vec![vec![-2, 0], vec![3, 0]];
        let mut cell_of = vec![NONE; cube.len];
        for v in 0..cube.len {
            let c = cube.coords(v);
            if c[1].abs() <= 2 && (-4..=5).contains(&c[0]) {
                cell_of[v] = if c[0] <= 0 { 0 } else { 1 };
            }
        }
        let vor = VoronoiDecomposition { r: 2, cube: cube.clone(), centers, cell_of, valid: vec![true, true] };
        let mut a = FixedBitSet::with_capacity(cube.len);
        let mut b = FixedBitSet::with_capacity(cube.len);
        for p in [[-3, 0], [-2, 1], [-1, -1]] {
            a.insert(cube.index(&p));
        }
        for p in [[-4, 2], [-1, 2]] {
            b.insert(cube.index(&p));
        }
        b.insert(cube.index(&[4, 1]));
        let mut f = DyadicFlow::zero(2, 6, 0, 0);
        let x = [1i64, 0];
        f.add_idx(cube.index(&[0, 0]), dir_index(&x), 1).unwrap();
        (cube, vor, Masks { a, b }, f)
    }

    #[test]
    fn one_unit_across_moves_the_lex_least_point() {
        let (cube, vor, masks, f) = two_cell_instance();
        let agg = aggregate_cell_flow(&f, &vor);
        assert_eq!(agg.get(&(0, 1)), Some(&1));
        assert_eq!(agg.get(&(1, 0)), Some(&-1));
        let pa = assign_pieces(&f, &vor, &masks, None).unwrap();
        let a0 = cube.index(&[-3, 0]);
        let crossing: Vec<_> = pa.matched.iter().filter(|&&(a, b)| vor.cell_of[a] != vor.cell_of[b]).collect();
        assert_eq!(crossing, vec![&(a0, cube.index(&[4, 1]))]);
        assert_eq!(pa.matched.len(), 3);
        assert_eq!(pa.mismatched_cells, 0);
    }

    #[test]
    fn corrupted_assignment_is_caught() {
        let w = window(2, 2, 30, true);
        let cube = Cube::new(2, 24);
        let masks = masks_on(&w, &cube).unwrap();
        let f = DyadicFlow::zero(2, 24, 0, 0);
        let (vor, _) = choose_voronoi_r(&f, &w, &masks, &all_trusted(&cube), false, 1 << 30).unwrap();
        let mut pa = assign_pieces(&f, &vor, &masks, None).unwrap();
        let b0 = pa.matched[0].1;
        pa.matched[1].1 = b0;
        let ver = verify_equidecomposition(&pa, &w).unwrap();
        assert!(!ver.injective && ver.collision.is_some());
    }

    #[test]
    fn doc_round_trip() {
        let (_, vor, masks, f) = two_cell_instance();
        let pa = assign_pieces(&f, &vor, &masks, None).unwrap();
        let doc = pa.to_doc();
        let back = PieceAssignment::from_doc(&serde_json::from_str(&serde_json::to_string(&doc).unwrap()).unwrap()).unwrap();
        assert_eq!(back.matched, pa.matched);
        assert_eq!(back.unresolved, pa.unresolved);
        let mut bad = doc.clone();
        bad.pieces[0].count += 1;
        assert!(PieceAssignment::from_doc(&bad).is_err());
    }

    #[test]
    fn lex_path_is_shortest_and_lex_least() {
        let p = lex_path(&[0, 0], &[2, -1]);
        assert_eq!(p, vec![vec![0, 0], vec![1, -1], vec![2, -1]]);
        let p = lex_path(&[0, 0, 0], &[0, 3, 1]);
        assert_eq!(p.len(), 4);
        assert_eq!(p[1], vec![-1, 1, -1]);
        assert_eq!(p.last().unwrap(), &vec![0, 3, 1]);
        for s in p.windows(2) {
            assert_eq!(linf_dist(&s[0], &s[1]), 1);
        }
    }

    #[test]
    fn preselection_properties() {
        let w = window(3, 2, 60, false);
        let cube = Cube::new(2, 50);
        let masks = masks_on(&w, &cube).unwrap();
        let region = all_trusted(&cube);
        assert!(preselect_nonnull(&cube, &masks, &region, &[], 2).unwrap().picks.is_empty());
        let offsets = vec![vec![0, 1], vec![1, 1], vec![-2, 3]];
        let pre = preselect_nonnull(&cube, &masks, &region, &offsets, 2).unwrap();
        let mut images = BTreeSet::new();
        for (t, a) in &pre.picks {
            let c: Vec<i64> = cube.coords(*a).iter().zip(t).map(|(x, y)| x + y).collect();
            let b = cube.index(&c);
            assert!(masks.a.contains(*a) && masks.b.contains(b));
            assert!(images.insert(b));
        }
        for (i, (_, a)) in pre.picks.iter().enumerate() {
            for (_, b) in &pre.picks[i + 1..] {
                assert!(linf_dist(&cube.coords(*a), &cube.coords(*b)) >= pre.spacing);
            }
        }
        // f* has flow-out +1 at picks, -1 at images
        for v in 0..cube.len {
            if cube.norm(v) >= cube.r {
                continue;
            }
            let want = pre.picks.iter().map(|(t, a)| {
                let c: Vec<i64> = cube.coords(*a).iter().zip(t).map(|(x, y)| x + y).collect();
                (*a == v) as i128 - (cube.index(&c) == v) as i128
            }).sum::<i128>();
            assert_eq!(pre.flow.fout_idx(v), Some(want));
        }
        assert!(pre.flow.sup_num() <= 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn z_sets_partition_and_rebuild(seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut f = DyadicFlow::zero(2, 4, 0, 0);
            for x in f.num.iter_mut() { *x = rng.gen_range(-2..=2); }
            let f = f.restrict(4);
            let z = extract_z_sets(&f);
            let ndir = f.dirs().len();
            for k in 0..ndir {
                let mut seen = FixedBitSet::with_capacity(f.cube.len);
                for ((kk, l), s) in &z {
                    if *kk != k { continue; }
                    prop_assert!(l.abs() <= 2);
                    prop_assert!(seen.is_disjoint(s));
                    seen.union_with(s);
                }
                let expect = (0..f.cube.len).filter(|&v| f.get_idx(v, k).is_some()).count();
                prop_assert_eq!(seen.count_ones(..), expect);
            }
            prop_assert_eq!(flow_from_z_sets(&f.cube, &z).unwrap().num, f.num);
        }
    }

    #[test]
    fn zero_flow_z_sets() {
        let f = DyadicFlow::zero(2, 3, 0, 0);
        let z = extract_z_sets(&f);
        assert!(z.keys().all(|&(_, l)| l == 0));
    }

    #[test]
    fn square_piece_has_slope_near_one() {
        // A = B = a square; f = 0 gives one piece, so only the square's boundary counts
        let g = sample_generators(5, 2, 2, 62, 8).unwrap();
        let sq = Region::Box { corner: vec![crate::torus::fx_from_f64(0.25, 62); 2], sides: vec![crate::torus::fx_from_f64(0.5, 62); 2] };
        let w = Window::new(g, TorusPoint::zero(2), 40, sq.clone(), sq).unwrap();
        let cube = Cube::new(2, 40);
        let masks = masks_on(&w, &cube).unwrap();
        let pa = PieceAssignment {
            d: 2,
            r: 1,
            matched: masks.a.ones().map(|a| (a, a)).collect(),
            preselected: vec![],
            unresolved: vec![],
            unmatched_b: vec![],
            valid_region: all_trusted(&cube),
            short_cells: 0,
            mismatched_cells: 0,
            cube,
        };
        let rep: BoxDimensionReport<f64> = box_dimension_estimate(&pa, &w, &[16, 32, 64], 256).unwrap();
        let s = rep.slope.unwrap_or_else(|| panic!("{:?}", rep));
        assert!((s - 1.0).abs() < 0.15, "slope {s}");
        assert!(box_dimension_estimate::<f64>(&pa, &w, &[16, 32], 256).is_err());
    }
}
