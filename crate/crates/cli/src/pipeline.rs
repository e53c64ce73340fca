//! Orchestration: window, discrepancy, flows, toast, rounding, matching.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use fixedbitset::FixedBitSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use squaring_core::discrepancy::cube_discrepancy_sweep;
use squaring_core::equi::{
    assign_pieces, box_dimension_estimate, check_certificate, choose_voronoi_r, masks_on, preselect_nonnull, subtract_flow,
    verify_equidecomposition, EquiVerification, Masks, PieceAssignment, Preselection, VoronoiCertificate, VoronoiDecomposition,
};
use squaring_core::flows::{build_fm_sequence, verify_fout_identity, DyadicFlow, IdentityCheck};
use squaring_core::lattice::{Cube, Window};
use squaring_core::rounding::{round_sequence, CompletionSummary, LayerInput, LayerRoundingReport, RoundingOutcome};
use squaring_core::toast::{build_layers, interleave, make_schedule, tilde_remove, validate_toast, Containment, LayerSummary, Schedule, ToastLayer, ToastValidation};
use squaring_core::torus::{sample_generators_budget, TorusPoint};
use squaring_core::{BoxDimensionReport, DiscrepancyReport};

use crate::config::{ExperimentConfig, VoronoiMode};
use crate::report::{Assertion, ExperimentReport, Metric, Timings};
use crate::{CliError, CliResult};

fn stage<T>(name: &'static str, r: squaring_core::Result<T>) -> CliResult<T> {
    r.map_err(|e| CliError::Stage { stage: name, source: e })
}

pub fn build_window(cfg: &ExperimentConfig) -> CliResult<Window> {
    cfg.validate()?;
    let gen = stage("sample_generators", sample_generators_budget(cfg.seed, cfg.k, cfg.d, cfg.bits, cfg.freeness_radius, cfg.budget.work))?;
    let a = cfg.region_a.to_region(cfg.k, cfg.bits)?;
    let b = cfg.region_b.to_region(cfg.k, cfg.bits)?;
    stage("window", Window::with_budget(gen, TorusPoint::zero(cfg.k), cfg.window, a, b, cfg.budget.max_points))
}

/// Anchors for the discrepancy sweep, uniform over positions where the largest cube fits.
pub fn discrepancy_anchors(cfg: &ExperimentConfig, n_max: i64, count: usize) -> Vec<Vec<i64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x00d1_5c4e);
    let lo = -cfg.window;
    let hi = cfg.window - n_max;
    (0..count).map(|_| (0..cfg.d).map(|_| rng.gen_range(lo..=hi)).collect()).collect()
}

pub fn discrepancy_stage(cfg: &ExperimentConfig, w: &Window) -> CliResult<Option<DiscrepancyReport>> {
    let Some(dc) = &cfg.discrepancy else { return Ok(None) };
    let n_max = *dc.radii.iter().max().unwrap_or(&0);
    let anchors = discrepancy_anchors(cfg, n_max, dc.anchors);
    stage("discrepancy", cube_discrepancy_sweep(w, &w.shape_a, &dc.radii, &anchors)).map(Some)
}

#[derive(Clone, Debug, Serialize)]
pub struct FlowStageReport {
    pub m: u32,
    pub exp: u32,
    pub valid_radius: i64,
    pub sup_norm: f64,
    /// Numerators are integers over `2^{2dm}` by construction of the representation.
    pub dyadic_integral: bool,
    pub identity: Option<IdentityCheck>,
}

pub fn flow_stage(cfg: &ExperimentConfig, w: &Window) -> CliResult<(Vec<DyadicFlow>, Vec<FlowStageReport>)> {
    let seq = stage("build_fm", build_fm_sequence(w, cfg.flows.m))?;
    let reports = seq
        .iter()
        .map(|f| FlowStageReport {
            m: f.m,
            exp: f.exp,
            valid_radius: f.cube.r,
            sup_norm: f.sup_norm::<f64>(),
            dyadic_integral: f.exp == 2 * cfg.d as u32 * f.m,
            identity: cfg.flows.check_identity.then(|| verify_fout_identity(w, f, f.m)),
        })
        .collect();
    Ok((seq, reports))
}

#[derive(Clone, Debug, Serialize)]
pub struct ToastStageReport {
    pub schedule: Schedule,
    pub layers: Vec<LayerSummary>,
    pub validation: ToastValidation,
    pub containments: Vec<Containment>,
    pub core_fraction: Vec<f64>,
}

pub struct ToastOutput {
    pub sequence: Vec<ToastLayer>,
    pub report: ToastStageReport,
}

pub fn toast_stage(cfg: &ExperimentConfig, w: &Window) -> CliResult<ToastOutput> {
    let sc = &cfg.schedule;
    let schedule = stage("schedule", make_schedule(sc.preset, sc.depth, &sc.overrides))?;
    let build = stage("build_layers", build_layers(w, &schedule, sc.depth, None, cfg.budget.work))?;
    let (kt, lt) = tilde_remove(&w.cube, &build);
    let sequence = interleave(&build, &kt, &lt);
    let validation = validate_toast(&w.cube, &sequence);
    let core_fraction = build.cores.iter().map(|c| squaring_core::toast::fraction_in(&w.cube, &c.layer.members, w.w)).collect();
    let report = ToastStageReport {
        schedule,
        layers: sequence.iter().map(|l| l.summary()).collect(),
        validation,
        containments: build.containments.clone(),
        core_fraction,
    };
    Ok(ToastOutput { sequence, report })
}

/// The layer re-read on a smaller cube; components are recomputed there.
pub fn restrict_layer(layer: &ToastLayer, from: &Cube, to: &Cube) -> ToastLayer {
    let mut members = FixedBitSet::with_capacity(to.len);
    for v in 0..to.len {
        if layer.members.contains(to.reindex(v, from).expect("smaller cube")) {
            members.insert(v);
        }
    }
    let mut out = ToastLayer::new(to, layer.index, layer.role, members, layer.diameter_bound);
    out.shift = layer.shift.clone();
    out
}

#[derive(Clone, Debug, Serialize)]
pub struct RoundingStageReport {
    pub cube_radius: i64,
    pub stages: Vec<u32>,
    pub layers: Vec<LayerRoundingReport>,
    pub completion: CompletionSummary,
    pub completed: usize,
    pub unresolved: usize,
    pub integral: bool,
    pub demand_ok: bool,
    pub snapshots_ok: bool,
    pub sup_norm: i64,
}

pub fn rounding_stage(cfg: &ExperimentConfig, w: &Window, flows: &[DyadicFlow], toast: &[ToastLayer]) -> CliResult<(RoundingOutcome, RoundingStageReport)> {
    let rr = cfg.rounding_radius();
    let cube = Cube::new(cfg.d, rr);
    let stages = cfg.flows.stages.clone().unwrap_or_else(|| vec![cfg.flows.m; toast.len()]);
    let layers: Vec<ToastLayer> = toast.iter().map(|l| restrict_layer(l, &w.cube, &cube)).collect();
    for l in &layers {
        if let Some(c) = l.components.iter().filter(|c| !c.clipped).max_by_key(|c| c.len()) {
            if c.len() > cfg.budget.max_component {
                return Err(CliError::Config(format!("a toast component has {} vertices, budget.max_component is {}", c.len(), cfg.budget.max_component)));
            }
        }
    }
    let gs: Vec<DyadicFlow> = stages.iter().map(|&m| flows[m as usize].restrict(rr)).collect();
    let inputs: Vec<LayerInput> = layers.iter().zip(&gs).map(|(layer, flow)| LayerInput { layer, flow }).collect();
    let chi: Vec<i64> = (0..cube.len).map(|v| w.demand(cube.reindex(v, &w.cube).expect("inside window"))).collect();
    let out = stage("round_sequence", round_sequence(&inputs, &chi, &cfg.rounding))?;
    let report = RoundingStageReport {
        cube_radius: rr,
        stages,
        layers: out.layers.clone(),
        completion: out.completion.clone(),
        completed: out.completed.count_ones(..),
        unresolved: out.unresolved.count_ones(..),
        integral: out.integral,
        demand_ok: out.demand_ok,
        snapshots_ok: out.snapshots_ok,
        sup_norm: out.flow.sup_num() as i64,
    };
    Ok((out, report))
}

#[derive(Clone, Debug, Serialize)]
pub struct PreselectReport {
    pub rounds: usize,
    pub stable: bool,
    pub offsets: usize,
    pub picks: usize,
    pub missing: Vec<Vec<i64>>,
    pub spacing: i64,
    /// Used offsets without a pre-selected point.
    pub uncovered_offsets: Vec<Vec<i64>>,
    pub images_disjoint: bool,
    pub certificate_after: VoronoiCertificate,
}

#[derive(Clone, Debug, Serialize)]
pub struct MatchingStageReport {
    pub r: i64,
    pub certificate: VoronoiCertificate,
    pub cells: usize,
    pub valid_cells: usize,
    pub short_cells: usize,
    pub mismatched_cells: usize,
    pub preselect: Option<PreselectReport>,
    pub verification: EquiVerification,
}

pub struct MatchingOutput {
    pub vor: VoronoiDecomposition,
    pub assignment: PieceAssignment,
    pub preselection: Option<Preselection>,
    pub report: MatchingStageReport,
}

fn images_disjoint(cube: &Cube, pre: &Preselection) -> bool {
    let mut seen = BTreeSet::new();
    pre.picks.iter().all(|(t, a)| {
        let c: Vec<i64> = cube.coords(*a).iter().zip(t).map(|(x, y)| x + y).collect();
        seen.insert(c)
    })
}

pub fn matching_stage(cfg: &ExperimentConfig, w: &Window, rounded: &RoundingOutcome) -> CliResult<MatchingOutput> {
    let f = &rounded.flow;
    let masks: Masks = stage("masks", masks_on(w, &f.cube))?;
    let (vor, certificate) = match cfg.voronoi.mode {
        VoronoiMode::Auto => stage("choose_voronoi_r", choose_voronoi_r(f, w, &masks, &rounded.completed, false, cfg.budget.work))?,
        VoronoiMode::Fixed { r } => {
            let vor = stage("voronoi", squaring_core::equi::voronoi(w, &f.cube, r, &rounded.completed, cfg.budget.work))?;
            let cert = stage("certificate", check_certificate(f, &vor, &masks, false))?;
            (vor, cert)
        }
    };
    let mut assignment = stage("assign_pieces", assign_pieces(f, &vor, &masks, None))?;
    let mut preselection = None;
    let mut pre_report = None;
    if cfg.voronoi.preselect {
        let region = vor.valid_region();
        let mut offsets: BTreeSet<Vec<i64>> = assignment.used_offsets();
        let mut rounds = 0;
        let mut stable = false;
        let mut last = None;
        while rounds < cfg.voronoi.preselect_rounds.max(1) {
            rounds += 1;
            let list: Vec<Vec<i64>> = offsets.iter().cloned().collect();
            let pre = stage("preselect_nonnull", preselect_nonnull(&f.cube, &masks, &region, &list, vor.r))?;
            let f2 = stage("subtract_preselected", subtract_flow(f, &pre.flow))?;
            let cert = stage("certificate", check_certificate(&f2, &vor, &masks, false))?;
            let pa = stage("assign_pieces", assign_pieces(&f2, &vor, &masks, Some(&pre)))?;
            let used = pa.used_offsets();
            let grown = !used.is_subset(&offsets);
            offsets.extend(used);
            assignment = pa;
            last = Some((pre, cert));
            if !grown {
                stable = true;
                break;
            }
        }
        let (pre, cert) = last.expect("at least one round");
        let picked: BTreeSet<Vec<i64>> = pre.picks.iter().map(|(t, _)| t.clone()).collect();
        let uncovered: Vec<Vec<i64>> = assignment.used_offsets().into_iter().filter(|t| !picked.contains(t)).collect();
        pre_report = Some(PreselectReport {
            rounds,
            stable,
            offsets: offsets.len(),
            picks: pre.picks.len(),
            missing: pre.missing.clone(),
            spacing: pre.spacing,
            uncovered_offsets: uncovered,
            images_disjoint: images_disjoint(&f.cube, &pre),
            certificate_after: cert,
        });
        preselection = Some(pre);
    }
    let verification = stage("verify_equidecomposition", verify_equidecomposition(&assignment, w))?;
    let report = MatchingStageReport {
        r: vor.r,
        certificate,
        cells: vor.centers.len(),
        valid_cells: vor.valid_count(),
        short_cells: assignment.short_cells,
        mismatched_cells: assignment.mismatched_cells,
        preselect: pre_report,
        verification,
    };
    Ok(MatchingOutput { vor, assignment, preselection, report })
}

/// Everything a run produces in memory.
pub struct RunOutput {
    pub window: Window,
    pub report: ExperimentReport,
    pub flows: Vec<DyadicFlow>,
    pub toast: Vec<ToastLayer>,
    pub rounded: RoundingOutcome,
    pub matching: MatchingOutput,
}

pub fn run(cfg: &ExperimentConfig) -> CliResult<RunOutput> {
    let mut timings = Timings::default();
    let t = Instant::now();
    let w = build_window(cfg)?;
    timings.push("window", t);

    let t = Instant::now();
    let discrepancy = discrepancy_stage(cfg, &w)?;
    timings.push("discrepancy", t);

    let t = Instant::now();
    let (flows, flow_reports) = flow_stage(cfg, &w)?;
    timings.push("flows", t);

    let t = Instant::now();
    let toast = toast_stage(cfg, &w)?;
    timings.push("toast", t);

    let t = Instant::now();
    let (rounded, rounding) = rounding_stage(cfg, &w, &flows, &toast.sequence)?;
    timings.push("rounding", t);

    let t = Instant::now();
    let matching = matching_stage(cfg, &w, &rounded)?;
    timings.push("matching", t);

    let t = Instant::now();
    let box_count: Option<BoxDimensionReport> = match &cfg.box_count {
        Some(bc) => Some(stage("box_dimension_estimate", box_dimension_estimate(&matching.assignment, &w, &bc.inv_deltas, bc.fine))?),
        None => None,
    };
    timings.push("box_count", t);

    let metrics = collect_metrics(cfg, &w, &flow_reports, &toast.report, &rounding, &matching.report, box_count.as_ref());
    let assertions = Assertion::evaluate(&metrics);
    let report = ExperimentReport::new(cfg.clone(), metrics, assertions, discrepancy, flow_reports, toast.report.clone(), rounding, matching.report.clone(), box_count, timings);
    Ok(RunOutput { window: w, report, flows, toast: toast.sequence, rounded, matching })
}

fn collect_metrics(
    cfg: &ExperimentConfig,
    w: &Window,
    flows: &[FlowStageReport],
    toast: &ToastStageReport,
    rounding: &RoundingStageReport,
    matching: &MatchingStageReport,
    box_count: Option<&BoxDimensionReport>,
) -> BTreeMap<String, Metric> {
    let mut m = BTreeMap::new();
    let mut put = |k: &str, v: serde_json::Value, unit: &str, measured: bool| {
        m.insert(k.to_string(), Metric::new(v, unit, measured));
    };
    put("window_points", w.cube.len.into(), "lattice points", false);
    put("flow_stage_max", cfg.flows.m.into(), "stage", false);
    put("flows_dyadic_integral", flows.iter().all(|f| f.dyadic_integral).into(), "bool", true);
    if cfg.flows.check_identity {
        put("flow_identity_ok", flows.iter().all(|f| f.identity.as_ref().is_some_and(|c| c.ok)).into(), "bool", true);
    }
    put("toast_valid", toast.validation.ok().into(), "bool", true);
    put("toast_components_checked", toast.validation.components_checked.into(), "components", true);
    put("toast_containments", toast.containments.iter().all(|c| c.j_in_core && c.k_in_j && c.i_in_j && c.j_in_k && c.y_in_l).into(), "bool", true);
    put("rounding_integral", rounding.integral.into(), "bool", true);
    put("rounding_demand_ok", rounding.demand_ok.into(), "bool", true);
    put("rounding_locked_unchanged", rounding.snapshots_ok.into(), "bool", true);
    put("rounding_completed", rounding.completed.into(), "vertices", true);
    put("rounding_sea_vertices", rounding.completion.sea_vertices.into(), "vertices", true);
    put("kept_components", rounding.layers.iter().map(|l| l.kept).sum::<usize>().into(), "components", true);
    put("demoted_components", rounding.layers.iter().map(|l| l.demoted).sum::<usize>().into(), "components", true);
    put("voronoi_r", matching.r.into(), "lattice steps", true);
    put("voronoi_certificate", matching.certificate.holds().into(), "bool", true);
    let v = &matching.verification;
    put("assignment_injective", v.injective.into(), "bool", true);
    put("images_in_b", v.images_in_b.into(), "bool", true);
    put("domain_ok", v.domain_ok.into(), "bool", true);
    put("max_offset", v.max_offset.into(), "lattice steps", true);
    put("offset_bound", v.offset_bound.into(), "lattice steps", true);
    put("pieces", v.pieces.into(), "pieces", true);
    put("b_coverage", v.b_coverage.into(), "fraction of valid B-points", true);
    if let Some(p) = &matching.preselect {
        put("preselect_stable", p.stable.into(), "bool", true);
        put("preselect_uncovered_offsets", p.uncovered_offsets.len().into(), "offsets", true);
        put("preselect_images_disjoint", p.images_disjoint.into(), "bool", true);
    }
    if let Some(b) = box_count {
        if let Some(s) = b.slope {
            put("box_slope", s.into(), "log N / log(1/delta)", true);
        }
    }
    m
}
