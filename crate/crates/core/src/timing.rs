//! Deployable DRAM timing sets and voltage operating points.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::circuit::{derive_min_latencies, CircuitParams, RawLatencies};
use crate::error::{invalid, Error, Result};

pub const NOMINAL_VOLTAGE: f64 = 1.35;
pub const DEFAULT_T_CK_NS: f64 = 1.25;
pub const DEFAULT_GUARDBAND: f64 = 1.375;
/// tCL and tCWL stay at their nominal value for every array voltage.
pub const DEFAULT_T_CL_NS: f64 = 13.75;
pub const DEFAULT_T_CWL_NS: f64 = 13.75;

const VOLTAGE_EPS: f64 = 1e-9;

/// Integer cycle count for a latency, rounding up. The tolerance keeps
/// values that are exact multiples of `t_ck` from being bumped by
/// floating-point noise.
pub fn ns_to_cycles(ns: f64, t_ck_ns: f64) -> u32 {
    (ns / t_ck_ns - 1e-9).ceil().max(0.0) as u32
}

/// One DRAM timing set. Latencies are stored as clock cycles so that every
/// nanosecond value is an exact multiple of `t_ck_ns`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingParams {
    pub t_ck_ns: f64,
    pub rcd: u32,
    pub rp: u32,
    pub ras: u32,
    pub cl: u32,
    pub cwl: u32,
}

impl TimingParams {
    /// Builds a timing set from nanosecond values, rounding each up to the
    /// clock.
    pub fn from_ns(t_ck_ns: f64, rcd: f64, rp: f64, ras: f64, cl: f64, cwl: f64) -> Self {
        let c = |ns| ns_to_cycles(ns, t_ck_ns);
        Self { t_ck_ns, rcd: c(rcd), rp: c(rp), ras: c(ras), cl: c(cl), cwl: c(cwl) }
    }

    /// DDR3L-1600 datasheet values at 1.35 V with the manufacturer guardband:
    /// 13.75/13.75/36.25 ns, tCL = tCWL = 13.75 ns.
    pub fn nominal() -> Self {
        Self::from_ns(DEFAULT_T_CK_NS, 13.75, 13.75, 36.25, DEFAULT_T_CL_NS, DEFAULT_T_CWL_NS)
    }

    pub fn t_rcd_ns(&self) -> f64 {
        self.rcd as f64 * self.t_ck_ns
    }
    pub fn t_rp_ns(&self) -> f64 {
        self.rp as f64 * self.t_ck_ns
    }
    pub fn t_ras_ns(&self) -> f64 {
        self.ras as f64 * self.t_ck_ns
    }
    pub fn t_cl_ns(&self) -> f64 {
        self.cl as f64 * self.t_ck_ns
    }
    pub fn t_cwl_ns(&self) -> f64 {
        self.cwl as f64 * self.t_ck_ns
    }

    /// Latency input of the performance-loss predictor: tRAS + tRP.
    pub fn predictor_latency_ns(&self) -> f64 {
        self.t_ras_ns() + self.t_rp_ns()
    }

    /// Re-expresses the same nanosecond latencies at another clock period.
    pub fn retimed(&self, t_ck_ns: f64) -> Self {
        Self::from_ns(t_ck_ns, self.t_rcd_ns(), self.t_rp_ns(), self.t_ras_ns(), self.t_cl_ns(), self.t_cwl_ns())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_ck_ns > 0.0) {
            return Err(invalid("t_ck must be positive"));
        }
        if self.rcd == 0 || self.rp == 0 || self.ras == 0 || self.cl == 0 || self.cwl == 0 {
            return Err(invalid("timings must be positive"));
        }
        if self.ras <= self.rcd {
            return Err(invalid("tRAS must exceed tRCD"));
        }
        Ok(())
    }

    /// True when every latency is at least as long as in `other`.
    pub fn dominates(&self, other: &TimingParams) -> bool {
        self.t_rcd_ns() >= other.t_rcd_ns() - 1e-9
            && self.t_rp_ns() >= other.t_rp_ns() - 1e-9
            && self.t_ras_ns() >= other.t_ras_ns() - 1e-9
    }
}

/// Guardband and clock used to turn raw latencies into a timing set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Guardband {
    pub factor: f64,
    pub t_ck_ns: f64,
    pub t_cl_ns: f64,
    pub t_cwl_ns: f64,
}

impl Default for Guardband {
    fn default() -> Self {
        Self {
            factor: DEFAULT_GUARDBAND,
            t_ck_ns: DEFAULT_T_CK_NS,
            t_cl_ns: DEFAULT_T_CL_NS,
            t_cwl_ns: DEFAULT_T_CWL_NS,
        }
    }
}

impl Guardband {
    pub fn new(factor: f64, t_ck_ns: f64) -> Self {
        Self { factor, t_ck_ns, ..Self::default() }
    }

    /// Cycles for one raw latency: `ceil(raw * factor / t_ck)`.
    pub fn cycles(&self, raw_ns: f64) -> u32 {
        ns_to_cycles(raw_ns * self.factor, self.t_ck_ns)
    }
}

/// Applies the guardband to raw latencies and rounds up to the clock.
/// tCL/tCWL are taken from the guardband configuration unchanged.
pub fn apply_guardband(raw: &RawLatencies, gb: &Guardband) -> Result<TimingParams> {
    if !(gb.factor >= 1.0) {
        return Err(invalid("guardband factor must be at least 1"));
    }
    if !(gb.t_ck_ns > 0.0) {
        return Err(invalid("t_ck must be positive"));
    }
    if raw.t_rcd_raw < 0.0 || raw.t_ras_raw < 0.0 || raw.t_rp_raw < 0.0 {
        return Err(invalid("raw latencies must be non-negative"));
    }
    Ok(TimingParams {
        t_ck_ns: gb.t_ck_ns,
        rcd: gb.cycles(raw.t_rcd_raw),
        rp: gb.cycles(raw.t_rp_raw),
        ras: gb.cycles(raw.t_ras_raw),
        cl: ns_to_cycles(gb.t_cl_ns, gb.t_ck_ns),
        cwl: ns_to_cycles(gb.t_cwl_ns, gb.t_ck_ns),
    })
}

/// DDR3L transfer rates used by the frequency-scaling baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ChannelRate {
    #[serde(rename = "1066")]
    Mts1066,
    #[serde(rename = "1333")]
    Mts1333,
    #[serde(rename = "1600")]
    Mts1600,
}

impl ChannelRate {
    pub fn from_mts(mts: u32) -> Result<Self> {
        match mts {
            1600 => Ok(Self::Mts1600),
            1333 => Ok(Self::Mts1333),
            1066 => Ok(Self::Mts1066),
            other => Err(Error::UnsupportedRate(other)),
        }
    }

    pub fn mts(self) -> u32 {
        match self {
            Self::Mts1600 => 1600,
            Self::Mts1333 => 1333,
            Self::Mts1066 => 1066,
        }
    }

    /// Clock period. The nominal rates are 1600, 1333⅓ and 1066⅔ MT/s.
    pub fn t_ck_ns(self) -> f64 {
        match self {
            Self::Mts1600 => 1.25,
            Self::Mts1333 => 1.5,
            Self::Mts1066 => 1.875,
        }
    }

    /// Clock period in picoseconds (exact).
    pub fn t_ck_ps(self) -> u64 {
        match self {
            Self::Mts1600 => 1250,
            Self::Mts1333 => 1500,
            Self::Mts1066 => 1875,
        }
    }
}

impl fmt::Display for ChannelRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.mts())
    }
}

/// Array voltage, peripheral voltage, channel rate and the timings that are
/// safe at that combination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoltageOperatingPoint {
    pub v_array: f64,
    pub v_peripheral: f64,
    pub channel_rate: ChannelRate,
    pub timings: TimingParams,
}

impl VoltageOperatingPoint {
    /// A reduced array-voltage point: peripheral voltage and channel rate stay
    /// nominal.
    pub fn array_scaled(v_array: f64, timings: TimingParams) -> Self {
        Self { v_array, v_peripheral: NOMINAL_VOLTAGE, channel_rate: ChannelRate::Mts1600, timings }
    }

    pub fn nominal() -> Self {
        Self::array_scaled(NOMINAL_VOLTAGE, TimingParams::nominal())
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.90 - VOLTAGE_EPS..=NOMINAL_VOLTAGE + VOLTAGE_EPS).contains(&self.v_array) {
            return Err(invalid(format!("array voltage {} outside [0.90, 1.35]", self.v_array)));
        }
        self.timings.validate()
    }
}

/// The published voltage/latency rows: (Varr, tRCD, tRP, tRAS) in ns.
pub const PUBLISHED_ROWS: [(f64, f64, f64, f64); 10] = [
    (1.35, 13.75, 13.75, 36.25),
    (1.30, 13.75, 13.75, 36.25),
    (1.25, 13.75, 15.00, 36.25),
    (1.20, 13.75, 15.00, 37.50),
    (1.15, 15.00, 15.00, 37.50),
    (1.10, 15.00, 16.25, 40.00),
    (1.05, 16.25, 17.50, 41.25),
    (1.00, 17.50, 18.75, 45.00),
    (0.95, 18.75, 21.25, 48.75),
    (0.90, 21.25, 26.25, 52.50),
];

/// The ten candidate array voltages, 1.35 V down to 0.90 V in 50 mV steps.
pub fn default_voltages() -> Vec<f64> {
    PUBLISHED_ROWS.iter().map(|r| r.0).collect()
}

/// Where latency-table rows come from.
#[derive(Debug, Clone, PartialEq)]
pub enum LatencySource {
    /// The published rows, verbatim.
    Published,
    /// Bitline model followed by guardband and clock rounding.
    Model { params: CircuitParams, guardband: Guardband },
}

/// Candidate operating points ordered by decreasing array voltage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyTable {
    rows: Vec<VoltageOperatingPoint>,
}

impl LatencyTable {
    pub fn new(mut rows: Vec<VoltageOperatingPoint>) -> Result<Self> {
        if rows.is_empty() {
            return Err(invalid("latency table is empty"));
        }
        rows.sort_by(|a, b| b.v_array.total_cmp(&a.v_array));
        for w in rows.windows(2) {
            if (w[0].v_array - w[1].v_array).abs() < VOLTAGE_EPS {
                return Err(invalid(format!("duplicate voltage {}", w[0].v_array)));
            }
            // w[1] has the lower voltage and may not be faster.
            if !w[1].timings.dominates(&w[0].timings) {
                return Err(invalid(format!("timings at {} V are shorter than at {} V", w[1].v_array, w[0].v_array)));
            }
        }
        Ok(Self { rows })
    }

    /// The published table at the nominal clock.
    pub fn published() -> Self {
        build_latency_table(&LatencySource::Published, &default_voltages()).expect("published rows are valid")
    }

    pub fn rows(&self) -> &[VoltageOperatingPoint] {
        &self.rows
    }

    /// Highest-voltage row.
    pub fn nominal(&self) -> &VoltageOperatingPoint {
        &self.rows[0]
    }

    /// Exact lookup; there is no interpolation between rows.
    pub fn lookup(&self, v: f64) -> Result<&VoltageOperatingPoint> {
        self.rows.iter().find(|r| (r.v_array - v).abs() <= VOLTAGE_EPS).ok_or(Error::NoSuchOperatingPoint(v))
    }

    /// CSV with header `v_array,trcd_ns,trp_ns,tras_ns,trcd_cyc,trp_cyc,tras_cyc`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("v_array,trcd_ns,trp_ns,tras_ns,trcd_cyc,trp_cyc,tras_cyc\n");
        for r in &self.rows {
            let t = &r.timings;
            out.push_str(&format!(
                "{:.2},{:.2},{:.2},{:.2},{},{},{}\n",
                r.v_array,
                t.t_rcd_ns(),
                t.t_rp_ns(),
                t.t_ras_ns(),
                t.rcd,
                t.rp,
                t.ras
            ));
        }
        out
    }

    /// Parses the CSV written by [`LatencyTable::to_csv`]. tCL/tCWL are not
    /// part of the file and are restored to their nominal values.
    pub fn from_csv(text: &str, t_ck_ns: f64) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == "v_array,trcd_ns,trp_ns,tras_ns,trcd_cyc,trp_cyc,tras_cyc" => {}
            _ => return Err(Error::CsvParse { line: 1, message: "unexpected header".into() }),
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let err = |m: &str| Error::CsvParse { line: i + 1, message: m.to_string() };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(err("expected 7 fields"));
            }
            let v: f64 = f[0].trim().parse().map_err(|_| err("bad voltage"))?;
            let cyc = |s: &str| s.trim().parse::<u32>().map_err(|_| err("bad cycle count"));
            let timings = TimingParams {
                t_ck_ns,
                rcd: cyc(f[4])?,
                rp: cyc(f[5])?,
                ras: cyc(f[6])?,
                cl: ns_to_cycles(DEFAULT_T_CL_NS, t_ck_ns),
                cwl: ns_to_cycles(DEFAULT_T_CWL_NS, t_ck_ns),
            };
            rows.push(VoltageOperatingPoint::array_scaled(v, timings));
        }
        Self::new(rows)
    }
}

/// Builds a latency table for `voltages`.
pub fn build_latency_table(source: &LatencySource, voltages: &[f64]) -> Result<LatencyTable> {
    let rows = voltages
        .iter()
        .map(|&v| match source {
            LatencySource::Published => {
                let &(va, rcd, rp, ras) = PUBLISHED_ROWS
                    .iter()
                    .find(|r| (r.0 - v).abs() <= VOLTAGE_EPS)
                    .ok_or(Error::NoSuchOperatingPoint(v))?;
                let t = TimingParams::from_ns(DEFAULT_T_CK_NS, rcd, rp, ras, DEFAULT_T_CL_NS, DEFAULT_T_CWL_NS);
                Ok(VoltageOperatingPoint::array_scaled(va, t))
            }
            LatencySource::Model { params, guardband } => {
                let raw = derive_min_latencies(params, v)?;
                Ok(VoltageOperatingPoint::array_scaled(v, apply_guardband(&raw, guardband)?))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    LatencyTable::new(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(rcd: f64, ras: f64, rp: f64) -> RawLatencies {
        RawLatencies { t_rcd_raw: rcd, t_ras_raw: ras, t_rp_raw: rp }
    }

    #[test]
    fn guardband_reproduces_nominal_from_ten_ns() {
        let t = apply_guardband(&raw(10.0, 30.0, 10.0), &Guardband::default()).unwrap();
        assert_eq!(t.rcd, 11);
        assert_eq!(t.t_rcd_ns(), 13.75);
        assert_eq!(t.t_rp_ns(), 13.75);
        assert_eq!(t.t_cl_ns(), 13.75);
        assert_eq!(t.t_cwl_ns(), 13.75);
    }

    #[test]
    fn guardband_rounds_up_to_the_clock() {
        // 11.0 * 1.375 = 15.125 ns -> 13 cycles = 16.25 ns
        let t = apply_guardband(&raw(11.0, 30.0, 0.0), &Guardband::default()).unwrap();
        assert_eq!(t.rcd, 13);
        assert_eq!(t.t_rcd_ns(), 16.25);
        assert_eq!(t.rp, 0);
    }

    #[test]
    fn guardband_is_idempotent_with_unit_factor() {
        let gb = Guardband::new(1.0, 1.25);
        for cycles in 1..60u32 {
            let ns = cycles as f64 * 1.25;
            assert_eq!(gb.cycles(ns), cycles);
        }
    }

    #[test]
    fn guardband_rejects_bad_factor() {
        assert!(apply_guardband(&raw(1.0, 2.0, 1.0), &Guardband::new(0.9, 1.25)).is_err());
        assert!(apply_guardband(&raw(1.0, 2.0, 1.0), &Guardband::new(1.1, 0.0)).is_err());
    }

    #[test]
    fn published_rows_verbatim() {
        let t = LatencyTable::published();
        let p = t.lookup(1.10).unwrap().timings;
        assert_eq!((p.t_rcd_ns(), p.t_rp_ns(), p.t_ras_ns()), (15.00, 16.25, 40.00));
        assert_eq!(t.lookup(1.30).unwrap().timings, t.lookup(1.35).unwrap().timings);
        let p = t.lookup(1.00).unwrap().timings;
        assert_eq!((p.t_rcd_ns(), p.t_rp_ns(), p.t_ras_ns()), (17.50, 18.75, 45.00));
        assert_eq!(t.lookup(1.35).unwrap().timings, TimingParams::nominal());
        assert!(matches!(t.lookup(1.02), Err(Error::NoSuchOperatingPoint(_))));
    }

    #[test]
    fn predictor_latency_endpoints() {
        let t = LatencyTable::published();
        assert_eq!(t.lookup(1.35).unwrap().timings.predictor_latency_ns(), 50.0);
        assert_eq!(t.lookup(0.90).unwrap().timings.predictor_latency_ns(), 78.75);
        let rows = t.rows();
        for w in rows.windows(2) {
            let (hi, lo) = (w[0].timings.predictor_latency_ns(), w[1].timings.predictor_latency_ns());
            let (a, b) = (w[0].timings, w[1].timings);
            if (a.ras, a.rp) != (b.ras, b.rp) {
                assert!(lo > hi);
            } else {
                assert_eq!(lo, hi);
            }
        }
    }

    #[test]
    fn ns_values_are_cycle_multiples() {
        for r in LatencyTable::published().rows() {
            let t = r.timings;
            for (ns, c) in [(t.t_rcd_ns(), t.rcd), (t.t_rp_ns(), t.rp), (t.t_ras_ns(), t.ras)] {
                assert_eq!(ns, c as f64 * t.t_ck_ns);
            }
        }
    }

    #[test]
    fn csv_round_trip() {
        let t = LatencyTable::published();
        let csv = t.to_csv();
        assert!(csv.starts_with(
            "v_array,trcd_ns,trp_ns,tras_ns,trcd_cyc,trp_cyc,tras_cyc\n1.35,13.75,13.75,36.25,11,11,29\n"
        ));
        assert_eq!(LatencyTable::from_csv(&csv, 1.25).unwrap(), t);
    }

    #[test]
    fn table_rejects_duplicates_and_non_monotone_rows() {
        let a = VoltageOperatingPoint::array_scaled(1.2, TimingParams::nominal());
        assert!(LatencyTable::new(vec![a, a]).is_err());
        let slow = TimingParams::from_ns(1.25, 20.0, 20.0, 45.0, 13.75, 13.75);
        let fast_low = VoltageOperatingPoint::array_scaled(1.0, TimingParams::nominal());
        let slow_high = VoltageOperatingPoint::array_scaled(1.3, slow);
        assert!(LatencyTable::new(vec![slow_high, fast_low]).is_err());
        assert!(LatencyTable::new(vec![]).is_err());
    }

    #[test]
    fn model_source_out_of_range() {
        let src = LatencySource::Model { params: CircuitParams::default(), guardband: Guardband::default() };
        let floor = CircuitParams::default().model_floor();
        assert!(matches!(build_latency_table(&src, &[floor]), Err(Error::OutOfModelRange { .. })));
    }

    #[test]
    fn retiming_rounds_up() {
        let t = TimingParams::nominal().retimed(ChannelRate::Mts1333.t_ck_ns());
        assert_eq!(t.rcd, 10); // 13.75 / 1.5 = 9.17
        assert_eq!(t.ras, 25); // 36.25 / 1.5 = 24.17
        let t = TimingParams::nominal().retimed(ChannelRate::Mts1066.t_ck_ns());
        assert_eq!(t.rcd, 8); // 13.75 / 1.875 = 7.33
    }
}
