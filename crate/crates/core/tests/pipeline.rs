//! Whole-pipeline properties on small windows, using the library API only.

use fixedbitset::FixedBitSet;
use proptest::prelude::*;
use squaring_core::equi::{
    assign_pieces, check_certificate, choose_voronoi_r, extract_z_sets, flow_from_z_sets, masks_on, verify_equidecomposition,
};
use squaring_core::flows::{build_fm_sequence, verify_fout_identity, DyadicFlow};
use squaring_core::rounding::{round_sequence, LayerInput, RoundingConfig, RoundingOutcome};
use squaring_core::toast::{build_layers, interleave, make_schedule, tilde_remove, validate_toast, Overrides, Preset, ToastLayer};
use squaring_core::torus::{demo_regions, sample_generators};
use squaring_core::{Cube, TorusPoint, Window, DEFAULT_BITS};

const M: u32 = 3;

fn window(seed: u64, w: i64, same: bool) -> Window {
    let g = sample_generators(seed, 2, 2, DEFAULT_BITS, 8).unwrap();
    let (a, b) = demo_regions(0.125, DEFAULT_BITS);
    let b = if same { a.clone() } else { b };
    Window::new(g, TorusPoint::zero(2), w, a, b).unwrap()
}

fn restrict(layer: &ToastLayer, from: &Cube, to: &Cube) -> ToastLayer {
    let mut members = FixedBitSet::with_capacity(to.len);
    members.extend((0..to.len).filter(|&v| layer.members.contains(to.reindex(v, from).unwrap())));
    ToastLayer::new(to, layer.index, layer.role, members, layer.diameter_bound)
}

fn rounded(w: &Window) -> RoundingOutcome {
    let flows = build_fm_sequence(w, M).unwrap();
    let schedule = make_schedule(Preset::Relaxed, 1, &Overrides { r1: Some(12), ..Default::default() }).unwrap();
    let b = build_layers(w, &schedule, 1, None, 1 << 31).unwrap();
    let (kt, lt) = tilde_remove(&w.cube, &b);
    let seq = interleave(&b, &kt, &lt);
    assert!(validate_toast(&w.cube, &seq).ok());
    let rr = w.w - ((1 << M) - 1);
    let cube = Cube::new(2, rr);
    let layers: Vec<ToastLayer> = seq.iter().map(|l| restrict(l, &w.cube, &cube)).collect();
    let g: DyadicFlow = flows[M as usize].restrict(rr);
    let inputs: Vec<LayerInput> = layers.iter().map(|layer| LayerInput { layer, flow: &g }).collect();
    let chi: Vec<i64> = (0..cube.len).map(|v| w.demand(cube.reindex(v, &w.cube).unwrap())).collect();
    round_sequence(&inputs, &chi, &RoundingConfig::default()).unwrap()
}

#[test]
fn flow_identity_holds_for_every_stage() {
    let w = window(4, 40, false);
    for f in build_fm_sequence(&w, M).unwrap() {
        let c = verify_fout_identity(&w, &f, f.m);
        assert!(c.ok, "stage {}: {:?}", f.m, c.worst);
        assert_eq!(f.exp, 4 * f.m);
    }
}

#[test]
fn a_equals_b_gives_zero_flow_and_fixed_points() {
    let w = window(6, 48, true);
    let out = rounded(&w);
    assert!(out.flow.num.iter().all(|&x| x == 0));
    let masks = masks_on(&w, &out.flow.cube).unwrap();
    let (vor, cert) = choose_voronoi_r(&out.flow, &w, &masks, &out.completed, false, 1 << 31).unwrap();
    assert!(cert.holds());
    let pa = assign_pieces(&out.flow, &vor, &masks, None).unwrap();
    assert!(pa.matched.iter().all(|&(a, b)| a == b));
    let v = verify_equidecomposition(&pa, &w).unwrap();
    assert!(v.ok(), "{:?}", v.violations);
    assert_eq!(v.b_coverage, 1.0);
    assert_eq!(v.pieces, 1);
}

#[test]
fn pieces_rebuilt_from_z_sets_match() {
    let w = window(9, 64, false);
    let out = rounded(&w);
    assert!(out.integral && out.demand_ok && out.snapshots_ok);
    let masks = masks_on(&w, &out.flow.cube).unwrap();
    let vor = squaring_core::equi::voronoi(&w, &out.flow.cube, 8, &out.completed, 1 << 31).unwrap();
    let direct = assign_pieces(&out.flow, &vor, &masks, None).unwrap();
    let rebuilt_flow = flow_from_z_sets(&out.flow.cube, &extract_z_sets(&out.flow)).unwrap();
    assert_eq!(rebuilt_flow.num, out.flow.num);
    let rebuilt = assign_pieces(&rebuilt_flow, &vor, &masks, None).unwrap();
    assert_eq!(direct.matched, rebuilt.matched);
    assert_eq!(direct.unresolved, rebuilt.unresolved);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]
    #[test]
    fn certified_cells_balance_and_assignment_verifies(seed in 0u64..1000) {
        let w = window(seed, 64, false);
        let out = rounded(&w);
        prop_assert!(out.integral && out.demand_ok);
        let masks = masks_on(&w, &out.flow.cube).unwrap();
        let vor = squaring_core::equi::voronoi(&w, &out.flow.cube, 16, &out.completed, 1 << 31).unwrap();
        let cert = check_certificate(&out.flow, &vor, &masks, false).unwrap();
        let pa = assign_pieces(&out.flow, &vor, &masks, None).unwrap();
        let v = verify_equidecomposition(&pa, &w).unwrap();
        prop_assert!(v.injective && v.images_in_b && v.domain_ok && v.offsets_ok, "{:?}", v.violations);
        if cert.holds() {
            prop_assert_eq!(pa.short_cells, 0);
            prop_assert_eq!(pa.mismatched_cells, 0);
        }
    }
}
