//! Experiment configuration: one JSON document, validated before any work.

use std::path::Path;

use serde::{Deserialize, Serialize};
use squaring_core::rounding::RoundingConfig;
use squaring_core::toast::{Overrides, Preset};
use squaring_core::torus::{demo_regions, fx_from_f64, Region};

use crate::{CliError, CliResult};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RegionSpec {
    /// Disk of the given area centred at (1/4, 1/4); `k = 2`.
    DemoDisk { area: f64 },
    /// Square of the given area centred at (3/4, 1/4); `k = 2`.
    DemoSquare { area: f64 },
    Disk { center: Vec<f64>, radius: f64 },
    Box { corner: Vec<f64>, sides: Vec<f64> },
    Torus,
    /// Fixed-point descriptor, passed through unchanged.
    Exact { region: Region },
}

impl RegionSpec {
    pub fn to_region(&self, k: usize, bits: u32) -> CliResult<Region> {
        let dim = |v: &[f64], what: &str| {
            if v.len() == k {
                Ok(())
            } else {
                Err(CliError::Config(format!("{what} has {} coordinates, k = {k}", v.len())))
            }
        };
        Ok(match self {
            RegionSpec::DemoDisk { area } | RegionSpec::DemoSquare { area } => {
                if k != 2 {
                    return Err(CliError::Config("demo regions need k = 2".into()));
                }
                if !(*area > 0.0 && *area < 0.25) {
                    return Err(CliError::Config(format!("demo area {area} outside (0, 1/4)")));
                }
                let (a, b) = demo_regions(*area, bits);
                if matches!(self, RegionSpec::DemoDisk { .. }) {
                    a
                } else {
                    b
                }
            }
            RegionSpec::Disk { center, radius } => {
                dim(center, "disk center")?;
                Region::Disk { center: center.iter().map(|&x| fx_from_f64(x.rem_euclid(1.0), bits)).collect(), radius: fx_from_f64(*radius, bits) }
            }
            RegionSpec::Box { corner, sides } => {
                dim(corner, "box corner")?;
                dim(sides, "box sides")?;
                Region::Box {
                    corner: corner.iter().map(|&x| fx_from_f64(x.rem_euclid(1.0), bits)).collect(),
                    sides: sides.iter().map(|&x| fx_from_f64(x, bits)).collect(),
                }
            }
            RegionSpec::Torus => Region::Torus,
            RegionSpec::Exact { region } => region.clone(),
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSpec {
    pub preset: Preset,
    pub depth: usize,
    pub overrides: Overrides,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self { preset: Preset::Relaxed, depth: 1, overrides: Overrides { r1: Some(4), ..Default::default() } }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct FlowSpec {
    /// Largest stage `m`; the rounding cube is `‖n‖∞ ≤ W - (2^m - 1)`.
    pub m: u32,
    /// Stage per toast layer `J_1, K̃_1, L̃_1, J_2, …`; all `m` when absent.
    pub stages: Option<Vec<u32>>,
    /// Check the flow-out identity exactly at every stage.
    pub check_identity: bool,
}

impl Default for FlowSpec {
    fn default() -> Self {
        Self { m: 3, stages: None, check_identity: false }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum VoronoiMode {
    /// Doubling search for the least certified radius.
    Auto,
    Fixed { r: i64 },
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct VoronoiSpec {
    pub mode: VoronoiMode,
    pub preselect: bool,
    /// Rounds of enlarging the pre-selected offset set to the offsets in use.
    pub preselect_rounds: usize,
}

impl Default for VoronoiSpec {
    fn default() -> Self {
        Self { mode: VoronoiMode::Auto, preselect: false, preselect_rounds: 6 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DiscrepancySpec {
    pub radii: Vec<i64>,
    pub anchors: usize,
}

impl Default for DiscrepancySpec {
    fn default() -> Self {
        Self { radii: vec![4, 8, 16], anchors: 32 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct BoxCountSpec {
    /// Values of `1/δ`.
    pub inv_deltas: Vec<u32>,
    /// Raster cells per unit length.
    pub fine: u32,
}

impl Default for BoxCountSpec {
    fn default() -> Self {
        Self { inv_deltas: vec![64, 128, 256], fine: 1024 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct Budget {
    /// Lattice points in the window.
    pub max_points: u64,
    /// Enumeration work for freeness and strip checks.
    pub work: u64,
    /// Vertices of the largest toast component handed to rounding.
    pub max_component: usize,
}

impl Default for Budget {
    fn default() -> Self {
        Self { max_points: 4_000_000, work: 1 << 31, max_component: 200_000 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: Option<String>,
    pub svg: bool,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self { dir: None, svg: true }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub k: usize,
    pub d: usize,
    #[serde(default = "default_bits")]
    pub bits: u32,
    #[serde(default = "default_freeness")]
    pub freeness_radius: u32,
    /// Window half-width `W`.
    pub window: i64,
    pub region_a: RegionSpec,
    pub region_b: RegionSpec,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub flows: FlowSpec,
    #[serde(default)]
    pub rounding: RoundingConfig,
    #[serde(default)]
    pub voronoi: VoronoiSpec,
    #[serde(default)]
    pub discrepancy: Option<DiscrepancySpec>,
    #[serde(default)]
    pub box_count: Option<BoxCountSpec>,
    #[serde(default)]
    pub budget: Budget,
    #[serde(default)]
    pub output: OutputSpec,
}

fn default_bits() -> u32 {
    squaring_core::DEFAULT_BITS
}

fn default_freeness() -> u32 {
    8
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Rounding cube half-width `W - (2^m - 1)`.
    pub fn rounding_radius(&self) -> i64 {
        self.window - ((1i64 << self.flows.m) - 1)
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.k == 0 || self.k > squaring_core::torus::MAX_K {
            return bad(format!("k = {} outside 1..={}", self.k, squaring_core::torus::MAX_K));
        }
        if self.d == 0 || self.d > 4 {
            return bad(format!("d = {} outside 1..=4", self.d));
        }
        if !(8..=62).contains(&self.bits) {
            return bad(format!("bits = {} outside 8..=62", self.bits));
        }
        if self.window < 1 {
            return bad("window must be positive".into());
        }
        let side = (2 * self.window + 1) as u128;
        let points = side.pow(self.d as u32);
        if points > self.budget.max_points as u128 {
            return bad(format!("window has {points} points, budget.max_points is {}", self.budget.max_points));
        }
        if self.flows.m > 16 {
            return bad("flow stage m above 16".into());
        }
        if self.rounding_radius() < 4 {
            return bad(format!("window {} leaves no room for stage m = {} (needs W >= 2^m + 3)", self.window, self.flows.m));
        }
        if self.d < 2 {
            return bad("rounding needs d >= 2".into());
        }
        if self.schedule.depth == 0 {
            return bad("toast depth must be at least 1".into());
        }
        if let Some(st) = &self.flows.stages {
            if st.len() != 3 * self.schedule.depth {
                return bad(format!("flows.stages needs {} entries (J, K, L per level)", 3 * self.schedule.depth));
            }
            if st.iter().any(|&m| m > self.flows.m) {
                return bad("a layer stage exceeds flows.m".into());
            }
        }
        if let VoronoiMode::Fixed { r } = self.voronoi.mode {
            if r < 1 || 2 * r >= self.rounding_radius() {
                return bad(format!("fixed Voronoi radius {r} does not fit the rounding cube"));
            }
        }
        if let Some(dc) = &self.discrepancy {
            if dc.anchors == 0 || dc.radii.is_empty() {
                return bad("discrepancy needs radii and anchors".into());
            }
            if dc.radii.iter().any(|&n| n < 0 || n > 2 * self.window) {
                return bad("discrepancy radius does not fit the window".into());
            }
        }
        if let Some(bc) = &self.box_count {
            if self.k != 2 {
                return bad("box counting renders k = 2 only".into());
            }
            if bc.inv_deltas.len() < 3 || bc.inv_deltas.iter().any(|&m| m == 0 || bc.fine % m != 0) {
                return bad("box_count needs at least 3 resolutions dividing `fine`".into());
            }
        }
        Ok(())
    }
}
