//! SVG 1.1 figure: source panel with coloured pieces, target panel with the
//! translated pieces, legend of offset vectors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};
use squaring_core::equi::PieceAssignment;
use squaring_core::lattice::Window;
use squaring_core::torus::{fx_to_f64, Region};

use crate::{CliError, CliResult};

const PANEL: f64 = 400.0;
const GAP: f64 = 40.0;
const LEGEND_ROWS: usize = 40;

/// Deterministic colour per offset vector.
pub fn offset_color(offset: &[i64]) -> String {
    let mut h = Sha256::new();
    for x in offset {
        h.update(x.to_le_bytes());
    }
    let b = h.finalize();
    let hue = u16::from_le_bytes([b[0], b[1]]) % 360;
    let sat = 55 + b[2] % 35;
    let light = 40 + b[3] % 25;
    format!("hsl({hue},{sat}%,{light}%)")
}

fn outline(out: &mut String, region: &Region, x0: f64, bits: u32) {
    let px = |v: u64| fx_to_f64(v, bits) * PANEL;
    match region {
        Region::Disk { center, radius } if center.len() == 2 => {
            let _ = writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="{:.2}" fill="none" stroke="black" stroke-width="1"/>"#, x0 + px(center[0]), PANEL - px(center[1]), px(*radius));
        }
        Region::Box { corner, sides } if corner.len() == 2 => {
            let (w, h) = (px(sides[0]), px(sides[1]));
            let _ = writeln!(out, r#"<rect x="{:.2}" y="{:.2}" width="{w:.2}" height="{h:.2}" fill="none" stroke="black" stroke-width="1"/>"#, x0 + px(corner[0]), PANEL - px(corner[1]) - h);
        }
        _ => {}
    }
}

/// Counts of pieces drawn in each panel, for cross-checks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RenderSummary {
    pub pieces: usize,
    pub source_marks: usize,
    pub target_marks: usize,
}

pub fn svg_string(pa: &PieceAssignment, w: &Window) -> CliResult<(String, RenderSummary)> {
    if w.gen.k != 2 {
        return Err(CliError::Config("rendering needs k = 2".into()));
    }
    let bits = w.gen.bits;
    let pieces: BTreeMap<Vec<i64>, Vec<usize>> = pa.pieces();
    let width = 2.0 * PANEL + GAP + 220.0;
    let height = PANEL.max(20.0 + 14.0 * pieces.len().min(LEGEND_ROWS + 1) as f64) + 30.0;
    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#);
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{PANEL}" height="{PANEL}" fill="white" stroke="gray"/>"#);
    let _ = writeln!(s, r#"<rect x="{}" y="0" width="{PANEL}" height="{PANEL}" fill="white" stroke="gray"/>"#, PANEL + GAP);
    let _ = writeln!(s, r#"<text x="4" y="{}" font-size="12">source A</text>"#, PANEL + 16.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="12">target B</text>"#, PANEL + GAP + 4.0, PANEL + 16.0);
    let mut summary = RenderSummary { pieces: pieces.len(), source_marks: 0, target_marks: 0 };
    for (offset, pts) in &pieces {
        let color = offset_color(offset);
        let _ = writeln!(s, r#"<g fill="{color}" data-offset="{offset:?}">"#);
        for &a in pts {
            let ca = pa.cube.coords(a);
            let p = w.act(&ca).to_f64(bits);
            let tgt: Vec<i64> = ca.iter().zip(offset).map(|(x, y)| x + y).collect();
            let q = w.act(&tgt).to_f64(bits);
            let _ = writeln!(s, r#"<rect x="{:.2}" y="{:.2}" width="1.5" height="1.5"/>"#, p[0] * PANEL, PANEL - p[1] * PANEL);
            let _ = writeln!(s, r#"<rect x="{:.2}" y="{:.2}" width="1.5" height="1.5"/>"#, PANEL + GAP + q[0] * PANEL, PANEL - q[1] * PANEL);
            summary.source_marks += 1;
            summary.target_marks += 1;
        }
        let _ = writeln!(s, "</g>");
    }
    outline(&mut s, &w.shape_a, 0.0, bits);
    outline(&mut s, &w.shape_b, PANEL + GAP, bits);
    let lx = 2.0 * PANEL + GAP + 12.0;
    let _ = writeln!(s, r#"<text x="{lx}" y="14" font-size="12">{} pieces</text>"#, pieces.len());
    for (i, offset) in pieces.keys().take(LEGEND_ROWS).enumerate() {
        let y = 20.0 + 14.0 * i as f64;
        let _ = writeln!(s, r#"<rect x="{lx}" y="{y}" width="10" height="10" fill="{}"/>"#, offset_color(offset));
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="10">{offset:?}</text>"#, lx + 14.0, y + 9.0);
    }
    if pieces.len() > LEGEND_ROWS {
        let _ = writeln!(s, r#"<text x="{lx}" y="{}" font-size="10">and {} more</text>"#, 20.0 + 14.0 * LEGEND_ROWS as f64 + 9.0, pieces.len() - LEGEND_ROWS);
    }
    let _ = writeln!(s, "</svg>");
    Ok((s, summary))
}

pub fn render_svg(pa: &PieceAssignment, w: &Window, path: &Path) -> CliResult<RenderSummary> {
    let (s, summary) = svg_string(pa, w)?;
    squaring_core::io::atomic_write(path, s.as_bytes()).map_err(|e| CliError::Stage { stage: "render_svg", source: e })?;
    Ok(summary)
}
