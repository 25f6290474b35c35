//! Synthetic DIMM error model and characterization harness.
//!
//! A [`DimmProfile`] describes where and how often a module fails when its
//! supply voltage drops below `v_min`. A cache line at voltage `v` fails with
//! probability
//!
//! ```text
//! p = min(1, f0 * exp(k * (v_min - v) / 25 mV)) * w(bank, row)
//! ```
//!
//! unless the activation and precharge latencies cover what the profile
//! requires at that voltage. Below the optional channel-failure floor no
//! latency is enough.

mod anova;
mod campaign;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::timing::NOMINAL_VOLTAGE;

pub use anova::{anova_oneway, AnovaResult};
pub use campaign::{
    ber_csv, parse_ber_csv, secded_classify, spatial_heatmap, voltage_test, BeatHistogram, BerRow, ErrorReport,
    SecdedOutcome, SpatialHeatmap,
};

/// Voltage step that `k` is expressed in.
pub const GROWTH_STEP_V: f64 = 0.025;
/// Reliable activation/precharge latency above `v_min`, and the start of the
/// experimental latency search.
pub const RELIABLE_LATENCY_NS: f64 = 10.0;
pub const LATENCY_STEP_NS: f64 = 2.5;
pub const MAX_TEST_LATENCY_NS: f64 = 20.0;
/// Lowest voltage the Vmin scan visits.
pub const MAX_BITS_PER_BAD_LINE: f64 = 32.0;
pub const SCAN_FLOOR_V: f64 = 0.90;
/// Vmin values observed on real modules.
pub const LISTED_VMIN: [f64; 5] = [1.100, 1.125, 1.150, 1.250, 1.300];

const EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Vendor {
    A,
    B,
    C,
}

/// The data pattern written to even rows and its companion for odd rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DataPatternPair {
    #[serde(rename = "00ff")]
    P00Ff,
    #[serde(rename = "aa33")]
    PAa33,
    #[serde(rename = "cc55")]
    PCc55,
}

impl DataPatternPair {
    pub const ALL: [DataPatternPair; 3] = [Self::P00Ff, Self::PAa33, Self::PCc55];

    pub fn bytes(self) -> (u8, u8) {
        match self {
            Self::P00Ff => (0x00, 0xff),
            Self::PAa33 => (0xaa, 0x33),
            Self::PCc55 => (0xcc, 0x55),
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::P00Ff => "00ff",
            Self::PAa33 => "aa33",
            Self::PCc55 => "cc55",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.label() == s)
    }

    pub fn from_bytes(pattern: u8, companion: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.bytes() == (pattern, companion))
    }
}

impl std::fmt::Display for DataPatternPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// A band of rows with its own error weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RowCluster {
    pub center: u32,
    pub width: u32,
    pub weight: f64,
}

impl RowCluster {
    fn contains(&self, row: u32) -> bool {
        let half = self.width / 2;
        row + half >= self.center && row < self.center + (self.width - half)
    }
}

/// Latencies needed for error-free operation at and below `v`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RequiredLatency {
    pub v: f64,
    pub trcd_ns: f64,
    pub trp_ns: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub banks: u32,
    pub rows: u32,
    pub lines_per_row: u32,
}

impl Default for Geometry {
    fn default() -> Self {
        Self { banks: 8, rows: 32768, lines_per_row: 128 }
    }
}

impl Geometry {
    pub fn lines(&self) -> u64 {
        self.banks as u64 * self.rows as u64 * self.lines_per_row as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimmProfile {
    pub name: String,
    pub vendor: Vendor,
    pub v_min: f64,
    /// Error growth per 25 mV below `v_min`, as a natural-log rate.
    pub k: f64,
    /// Line-error probability just below `v_min`.
    pub f0: f64,
    pub bank_weights: Vec<f64>,
    #[serde(default)]
    pub row_clusters: Vec<RowCluster>,
    /// Row weight outside every cluster.
    #[serde(default = "one")]
    pub row_weight_outside: f64,
    /// Step function below `v_min`, sorted by decreasing voltage. A voltage
    /// uses the entry with the highest voltage not above it, or the last
    /// entry if it lies below all of them.
    pub required_latencies: Vec<RequiredLatency>,
    /// Below this voltage no latency prevents errors and bit flips spread
    /// over the whole line.
    #[serde(default)]
    pub channel_floor_v: Option<f64>,
    /// Expected flipped bits in an erroneous line 25 mV below `v_min`.
    #[serde(default = "four")]
    pub bits_per_bad_line: f64,
    /// Added to `bits_per_bad_line` for every further 25 mV step.
    #[serde(default = "half")]
    pub bits_growth_per_step: f64,
    /// Optional per-pattern error-rate multipliers, in [`DataPatternPair::ALL`]
    /// order.
    #[serde(default)]
    pub pattern_multipliers: Option<[f64; 3]>,
    /// Added to every required latency; a stand-in for temperature.
    #[serde(default)]
    pub latency_offset_ns: f64,
    #[serde(default)]
    pub geometry: Geometry,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

fn four() -> f64 {
    4.0
}

fn half() -> f64 {
    0.5
}

fn req(v: f64, trcd_ns: f64, trp_ns: f64) -> RequiredLatency {
    RequiredLatency { v, trcd_ns, trp_ns }
}

impl DimmProfile {
    /// Error-prone everywhere, with a channel-failure floor at 1.05 V.
    pub fn vendor_a() -> Self {
        Self {
            name: "vendor-a".into(),
            vendor: Vendor::A,
            v_min: 1.125,
            k: std::f64::consts::LN_10,
            f0: 1e-6,
            bank_weights: vec![1.0; 8],
            row_clusters: vec![],
            row_weight_outside: 1.0,
            required_latencies: vec![req(1.100, 12.5, 12.5), req(1.075, 15.0, 12.5), req(1.050, 17.5, 15.0)],
            channel_floor_v: Some(1.05),
            bits_per_bad_line: 4.0,
            bits_growth_per_step: 0.5,
            pattern_multipliers: None,
            latency_offset_ns: 0.0,
            geometry: Geometry::default(),
            seed: 0xA,
        }
    }

    /// Errors concentrated in a few row bands.
    pub fn vendor_b() -> Self {
        Self {
            name: "vendor-b".into(),
            vendor: Vendor::B,
            v_min: 1.100,
            k: std::f64::consts::LN_10,
            f0: 1e-6,
            bank_weights: vec![1.0; 8],
            row_clusters: vec![
                RowCluster { center: 4096, width: 1024, weight: 1.0 },
                RowCluster { center: 20480, width: 2048, weight: 0.6 },
            ],
            row_weight_outside: 0.02,
            required_latencies: vec![
                req(1.075, 12.5, 12.5),
                req(1.050, 12.5, 15.0),
                req(1.000, 15.0, 15.0),
                req(0.950, 17.5, 17.5),
                req(0.900, 20.0, 20.0),
            ],
            channel_floor_v: None,
            bits_per_bad_line: 4.0,
            bits_growth_per_step: 0.5,
            pattern_multipliers: None,
            latency_offset_ns: 0.0,
            geometry: Geometry::default(),
            seed: 0xB,
        }
    }

    /// High Vmin, errors confined to banks 0 and 1, precharge-sensitive.
    pub fn vendor_c() -> Self {
        Self {
            name: "vendor-c".into(),
            vendor: Vendor::C,
            v_min: 1.300,
            k: std::f64::consts::LN_10,
            f0: 1e-6,
            bank_weights: vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            row_clusters: vec![],
            row_weight_outside: 1.0,
            required_latencies: vec![
                req(1.250, 10.0, 12.5),
                req(1.200, 12.5, 12.5),
                req(1.150, 12.5, 15.0),
                req(1.100, 15.0, 17.5),
                req(1.050, 17.5, 20.0),
                req(1.000, 20.0, 22.5),
            ],
            channel_floor_v: None,
            bits_per_bad_line: 4.0,
            bits_growth_per_step: 0.5,
            pattern_multipliers: None,
            latency_offset_ns: 0.0,
            geometry: Geometry::default(),
            seed: 0xC,
        }
    }

    pub fn bundled(vendor: Vendor) -> Self {
        match vendor {
            Vendor::A => Self::vendor_a(),
            Vendor::B => Self::vendor_b(),
            Vendor::C => Self::vendor_c(),
        }
    }

    pub fn bundled_all() -> Vec<Self> {
        vec![Self::vendor_a(), Self::vendor_b(), Self::vendor_c()]
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(text).map_err(|e| Error::InvalidProfile(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("profile serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidProfile(format!("{}: {m}", self.name)));
        if !LISTED_VMIN.iter().any(|&v| (v - self.v_min).abs() < EPS) {
            return bad(format!("v_min {} is not one of {:?}", self.v_min, LISTED_VMIN));
        }
        if !(0.0..=1.0).contains(&self.f0) {
            return bad("f0 must lie in [0, 1]".into());
        }
        if !(self.k >= 0.0 && self.k.is_finite()) {
            return bad("k must be non-negative".into());
        }
        let g = &self.geometry;
        if g.banks == 0 || g.rows == 0 || g.lines_per_row == 0 {
            return bad("geometry must be non-empty".into());
        }
        if self.bank_weights.len() != g.banks as usize {
            return bad(format!("expected {} bank weights", g.banks));
        }
        let unit = |w: f64| (0.0..=1.0).contains(&w);
        if !self.bank_weights.iter().all(|&w| unit(w)) || !unit(self.row_weight_outside) {
            return bad("weights must lie in [0, 1]".into());
        }
        for c in &self.row_clusters {
            if !unit(c.weight) || c.width == 0 || c.center >= g.rows {
                return bad(format!("invalid row cluster {c:?}"));
            }
        }
        let r = &self.required_latencies;
        if r.is_empty() {
            return bad("required latencies are empty".into());
        }
        if r[0].v >= self.v_min - EPS {
            return bad("required latencies must lie below v_min".into());
        }
        if r[0].trcd_ns <= RELIABLE_LATENCY_NS && r[0].trp_ns <= RELIABLE_LATENCY_NS {
            return bad("the first entry below v_min must require more than the reliable latency".into());
        }
        for w in r.windows(2) {
            if w[1].v >= w[0].v - EPS || w[1].trcd_ns < w[0].trcd_ns || w[1].trp_ns < w[0].trp_ns {
                return bad("required latencies must grow as voltage decreases".into());
            }
        }
        if let Some(f) = self.channel_floor_v {
            if !(f > 0.0 && f < self.v_min) {
                return bad("channel floor must lie below v_min".into());
            }
        }
        if !(self.bits_per_bad_line > 1.0 && self.bits_per_bad_line < 64.0) {
            return bad("bits_per_bad_line must lie in (1, 64)".into());
        }
        if !(self.bits_growth_per_step >= 0.0 && self.bits_growth_per_step.is_finite()) {
            return bad("bits_growth_per_step must be non-negative".into());
        }
        if let Some(m) = self.pattern_multipliers {
            if m.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return bad("pattern multipliers must be non-negative".into());
            }
        }
        if !(self.latency_offset_ns >= 0.0) {
            return bad("latency offset must be non-negative".into());
        }
        Ok(())
    }

    pub fn below_floor(&self, v: f64) -> bool {
        self.channel_floor_v.is_some_and(|f| v < f - EPS)
    }

    /// Latencies needed at `v`, or `None` when no latency is enough.
    pub fn required_at(&self, v: f64) -> Option<(f64, f64)> {
        if self.below_floor(v) {
            return None;
        }
        let off = self.latency_offset_ns;
        if v >= self.v_min - EPS {
            return Some((RELIABLE_LATENCY_NS + off, RELIABLE_LATENCY_NS + off));
        }
        let r = &self.required_latencies;
        let e = r.iter().find(|e| e.v <= v + EPS).unwrap_or(&r[r.len() - 1]);
        Some((e.trcd_ns + off, e.trp_ns + off))
    }

    pub fn spatial_weight(&self, bank: u32, row: u32) -> f64 {
        let bw = self.bank_weights.get(bank as usize).copied().unwrap_or(0.0);
        let rw = self
            .row_clusters
            .iter()
            .filter(|c| c.contains(row))
            .map(|c| c.weight)
            .reduce(f64::max)
            .unwrap_or(self.row_weight_outside);
        bw * rw
    }

    fn max_spatial_weight(&self) -> f64 {
        let bw = self.bank_weights.iter().copied().fold(0.0, f64::max);
        let rows_in_clusters: u64 = self.row_clusters.iter().map(|c| c.width as u64).sum();
        let mut rw = self.row_clusters.iter().map(|c| c.weight).fold(0.0, f64::max);
        if self.row_clusters.is_empty() || rows_in_clusters < self.geometry.rows as u64 {
            rw = rw.max(self.row_weight_outside);
        }
        bw * rw
    }

    /// Line-error probability before spatial weighting.
    pub fn base_probability(&self, v: f64, trcd_ns: f64, trp_ns: f64) -> f64 {
        if v >= self.v_min - EPS {
            return 0.0;
        }
        if let Some((rcd, rp)) = self.required_at(v) {
            if trcd_ns >= rcd - EPS && trp_ns >= rp - EPS {
                return 0.0;
            }
        }
        (self.f0 * (self.k * (self.v_min - v) / GROWTH_STEP_V).exp()).min(1.0)
    }

    /// Whether any line can fail at this setting.
    pub fn errors_possible(&self, v: f64, trcd_ns: f64, trp_ns: f64) -> bool {
        self.base_probability(v, trcd_ns, trp_ns) > 0.0 && self.max_spatial_weight() > 0.0
    }

    /// Expected flipped bits in an erroneous line at `v`, capped at
    /// [`MAX_BITS_PER_BAD_LINE`].
    pub fn bits_per_bad_line_at(&self, v: f64) -> f64 {
        let steps = ((self.v_min - v) / GROWTH_STEP_V - 1.0).round().max(0.0);
        (self.bits_per_bad_line + self.bits_growth_per_step * steps).min(MAX_BITS_PER_BAD_LINE)
    }

    /// Per-bit flip probability `q` of an erroneous beat at `v`, chosen so
    /// that a Binomial(64, q) beat conditioned on at least one flip averages
    /// [`Self::bits_per_bad_line_at`] flips.
    pub fn bit_flip_probability(&self, v: f64) -> f64 {
        let target = self.bits_per_bad_line_at(v);
        let mean = |q: f64| 64.0 * q / (1.0 - (1.0 - q).powi(64));
        let (mut lo, mut hi) = (1e-12, 1.0 - 1e-12);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mean(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

/// Probability that one cache line fails a read at this setting.
pub fn line_error_probability(p: &DimmProfile, v: f64, trcd_ns: f64, trp_ns: f64, bank: u32, row: u32) -> f64 {
    (p.base_probability(v, trcd_ns, trp_ns) * p.spatial_weight(bank, row)).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VminScan {
    pub v_min: f64,
    /// No errors were found down to the scan floor.
    pub floor_reached: bool,
}

/// Scans down from 1.35 V in 50 mV steps to the first failing voltage, then
/// checks the point 25 mV above it.
pub fn find_vmin(p: &DimmProfile, trcd_ns: f64, trp_ns: f64) -> Result<VminScan> {
    let fails = |mv: i64| p.errors_possible(mv as f64 / 1000.0, trcd_ns, trp_ns);
    let top = (NOMINAL_VOLTAGE * 1000.0).round() as i64;
    let bottom = (SCAN_FLOOR_V * 1000.0).round() as i64;
    if fails(top) {
        return Err(Error::InvalidProfile(format!("{} fails at the nominal voltage", p.name)));
    }
    let mut mv = top;
    while mv - 50 >= bottom {
        if fails(mv - 50) {
            let mid = mv - 25;
            let v = if fails(mid) { mv } else { mid };
            return Ok(VminScan { v_min: v as f64 / 1000.0, floor_reached: false });
        }
        mv -= 50;
    }
    Ok(VminScan { v_min: SCAN_FLOOR_V, floor_reached: true })
}

/// Smallest tRCD and tRP on the 2.5 ns grid between 10 and 20 ns that make
/// the module error-free at `v`.
pub fn find_min_latencies_experimental(p: &DimmProfile, v: f64) -> Option<(f64, f64)> {
    let steps = ((MAX_TEST_LATENCY_NS - RELIABLE_LATENCY_NS) / LATENCY_STEP_NS).round() as u32;
    let grid: Vec<f64> = (0..=steps).map(|i| RELIABLE_LATENCY_NS + i as f64 * LATENCY_STEP_NS).collect();
    for &rcd in &grid {
        for &rp in &grid {
            if !p.errors_possible(v, rcd, rp) {
                return Some((rcd, rp));
            }
        }
    }
    None
}
