//! DRAM and CPU energy accounting.
//!
//! DRAM energy is split into an array part, supplied by `v_array`, and a
//! peripheral part, supplied by `v_peripheral`. Per-operation energies scale
//! with the square of their supply voltage; background power additionally
//! scales linearly with the channel frequency. The CPU is modelled as a
//! constant active power per core while it has work and a constant idle
//! power afterwards.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::timing::{ChannelRate, NOMINAL_VOLTAGE};

const PS_PER_S: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PowerConfig {
    /// Array energy of one ACT and its matching PRE, per rank (nJ).
    pub e_act_pre: f64,
    /// Array energy of one read burst, per rank (nJ).
    pub e_rd_array: f64,
    /// Array energy of one write burst, per rank (nJ).
    pub e_wr_array: f64,
    /// Energy of one all-bank refresh, per rank (nJ).
    pub e_ref: f64,
    /// Peripheral and I/O energy of one read burst, per rank (nJ).
    pub e_rd_io: f64,
    /// Peripheral and I/O energy of one write burst, per rank (nJ).
    pub e_wr_io: f64,
    /// Background power of the array, per device (mW).
    pub p_static_array: f64,
    /// Background power of the peripheral logic, per device (mW).
    pub p_static_peri: f64,
    pub devices_per_rank: u32,
    /// Per-core power while the core still has instructions to run (W).
    pub cpu_active_w: f64,
    /// Per-core power after its trace is exhausted (W).
    pub cpu_idle_w: f64,
    pub v_nominal: f64,
}

impl Default for PowerConfig {
    fn default() -> Self {
        Self {
            e_act_pre: 38.0,
            e_rd_array: 15.0,
            e_wr_array: 16.5,
            e_ref: 455.0,
            e_rd_io: 20.0,
            e_wr_io: 23.0,
            p_static_array: 72.0,
            p_static_peri: 72.0,
            devices_per_rank: 8,
            cpu_active_w: 3.5,
            cpu_idle_w: 1.0,
            v_nominal: NOMINAL_VOLTAGE,
        }
    }
}

impl PowerConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.e_act_pre,
            self.e_rd_array,
            self.e_wr_array,
            self.e_ref,
            self.e_rd_io,
            self.e_wr_io,
            self.p_static_array,
            self.p_static_peri,
            self.cpu_active_w,
            self.cpu_idle_w,
        ];
        if fields.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(invalid("power configuration values must be finite and non-negative"));
        }
        if !(self.v_nominal > 0.0) {
            return Err(invalid("nominal voltage must be positive"));
        }
        Ok(())
    }
}

/// `e_nominal * (v_array / v_nominal)^2`.
pub fn scale_array_energy(e_nominal: f64, v_array: f64, cfg: &PowerConfig) -> f64 {
    let r = v_array / cfg.v_nominal;
    e_nominal * r * r
}

/// `p_nominal * (v / v_nominal)^2 * (freq / 1600)`.
pub fn scale_peripheral_power(p_nominal: f64, v: f64, freq_mts: u32, cfg: &PowerConfig) -> Result<f64> {
    let rate = ChannelRate::from_mts(freq_mts)?;
    Ok(p_nominal * voltage_factor(v, cfg) * frequency_factor(rate))
}

fn voltage_factor(v: f64, cfg: &PowerConfig) -> f64 {
    let r = v / cfg.v_nominal;
    r * r
}

fn frequency_factor(rate: ChannelRate) -> f64 {
    rate.mts() as f64 / 1600.0
}

/// DRAM commands issued in one segment, summed over channels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandCounts {
    pub act: u64,
    pub pre: u64,
    pub rd: u64,
    pub wr: u64,
    #[serde(rename = "ref")]
    pub refresh: u64,
}

impl CommandCounts {
    pub fn total(&self) -> u64 {
        self.act + self.pre + self.rd + self.wr + self.refresh
    }

    pub fn add(&mut self, o: &CommandCounts) {
        self.act += o.act;
        self.pre += o.pre;
        self.rd += o.rd;
        self.wr += o.wr;
        self.refresh += o.refresh;
    }
}

/// A stretch of simulated time with one operating point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start_ps: u64,
    pub end_ps: u64,
    pub v_array: f64,
    pub v_peripheral: f64,
    pub channel_rate: ChannelRate,
    pub counts: CommandCounts,
}

/// What the accounting needs to know about a run beyond the segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunUsage {
    pub runtime_ps: u64,
    /// Per core, the time during which the core had instructions left.
    pub core_active_ps: Vec<u64>,
    pub instructions: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub runtime_s: f64,
    pub dram_array_dynamic_j: f64,
    pub dram_peripheral_dynamic_j: f64,
    pub dram_array_static_j: f64,
    pub dram_peripheral_static_j: f64,
    pub cpu_j: f64,
    pub total_j: f64,
    pub instructions: u64,
}

impl EnergyReport {
    pub fn dram_dynamic_j(&self) -> f64 {
        self.dram_array_dynamic_j + self.dram_peripheral_dynamic_j
    }

    pub fn dram_static_j(&self) -> f64 {
        self.dram_array_static_j + self.dram_peripheral_static_j
    }

    pub fn dram_j(&self) -> f64 {
        self.dram_dynamic_j() + self.dram_static_j()
    }

    fn power(&self, e: f64) -> f64 {
        if self.runtime_s > 0.0 {
            e / self.runtime_s
        } else {
            0.0
        }
    }

    pub fn dram_power_w(&self) -> f64 {
        self.power(self.dram_j())
    }

    pub fn cpu_power_w(&self) -> f64 {
        self.power(self.cpu_j)
    }

    pub fn system_power_w(&self) -> f64 {
        self.power(self.total_j)
    }

    /// Instructions per second per watt, i.e. instructions per joule.
    pub fn perf_per_watt(&self) -> f64 {
        if self.total_j > 0.0 {
            self.instructions as f64 / self.total_j
        } else {
            0.0
        }
    }

    /// Sum of two reports for consecutive stretches of one run.
    pub fn combine(&self, o: &EnergyReport) -> EnergyReport {
        EnergyReport {
            runtime_s: self.runtime_s + o.runtime_s,
            dram_array_dynamic_j: self.dram_array_dynamic_j + o.dram_array_dynamic_j,
            dram_peripheral_dynamic_j: self.dram_peripheral_dynamic_j + o.dram_peripheral_dynamic_j,
            dram_array_static_j: self.dram_array_static_j + o.dram_array_static_j,
            dram_peripheral_static_j: self.dram_peripheral_static_j + o.dram_peripheral_static_j,
            cpu_j: self.cpu_j + o.cpu_j,
            total_j: self.total_j + o.total_j,
            instructions: self.instructions + o.instructions,
        }
    }

    /// Component rows of the CSV breakdown, in output order.
    pub fn components(&self) -> [(&'static str, f64); 7] {
        [
            ("dram_array_dynamic", self.dram_array_dynamic_j),
            ("dram_peripheral_dynamic", self.dram_peripheral_dynamic_j),
            ("dram_array_static", self.dram_array_static_j),
            ("dram_peripheral_static", self.dram_peripheral_static_j),
            ("dram_total", self.dram_j()),
            ("cpu", self.cpu_j),
            ("total", self.total_j),
        ]
    }

    /// `component,energy_j,power_w`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("component,energy_j,power_w\n");
        for (name, e) in self.components() {
            out.push_str(&format!("{name},{e:e},{:e}\n", self.power(e)));
        }
        out
    }

    /// Parses the CSV breakdown back into `(component, energy, power)` rows.
    pub fn parse_csv(text: &str) -> Result<Vec<(String, f64, f64)>> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "component,energy_j,power_w")) => {}
            _ => return Err(Error::CsvParse { line: 1, message: "bad header".into() }),
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            let err = |m: &str| Error::CsvParse { line: i + 1, message: m.into() };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 {
                return Err(err("expected 3 fields"));
            }
            let e = f[1].parse().map_err(|_| err("bad energy"))?;
            let p = f[2].parse().map_err(|_| err("bad power"))?;
            rows.push((f[0].to_string(), e, p));
        }
        Ok(rows)
    }
}

/// Turns per-segment command counts and the run's usage into energy.
///
/// The segments must be sorted, contiguous, and cover `[0, runtime]`.
pub fn account(usage: &RunUsage, channels: &[Vec<Segment>], cfg: &PowerConfig) -> Result<EnergyReport> {
    cfg.validate()?;
    if channels.is_empty() {
        return Err(Error::Accounting("no channel histories".into()));
    }
    for segments in channels {
        let mut t = 0u64;
        for s in segments {
            if s.start_ps != t {
                return Err(Error::Accounting(format!(
                    "operating-point history has a gap or overlap at {} ps",
                    t.min(s.start_ps)
                )));
            }
            if s.end_ps < s.start_ps {
                return Err(Error::Accounting("segment ends before it starts".into()));
            }
            t = s.end_ps;
        }
        if t != usage.runtime_ps {
            return Err(Error::Accounting(format!(
                "operating-point history ends at {t} ps but the run lasts {} ps",
                usage.runtime_ps
            )));
        }
    }
    if let Some(&a) = usage.core_active_ps.iter().find(|&&a| a > usage.runtime_ps) {
        return Err(Error::Accounting(format!("core active for {a} ps exceeds runtime")));
    }

    let mut r = EnergyReport { instructions: usage.instructions, ..Default::default() };
    let devices = cfg.devices_per_rank as f64;
    for s in channels.iter().flatten() {
        let sa = voltage_factor(s.v_array, cfg);
        let sp = voltage_factor(s.v_peripheral, cfg);
        let c = &s.counts;
        let array_nj = c.act as f64 * cfg.e_act_pre
            + c.rd as f64 * cfg.e_rd_array
            + c.wr as f64 * cfg.e_wr_array
            + c.refresh as f64 * cfg.e_ref;
        let peri_nj = c.rd as f64 * cfg.e_rd_io + c.wr as f64 * cfg.e_wr_io;
        r.dram_array_dynamic_j += array_nj * sa * 1e-9;
        r.dram_peripheral_dynamic_j += peri_nj * sp * 1e-9;

        let secs = (s.end_ps - s.start_ps) as f64 / PS_PER_S;
        let ff = frequency_factor(s.channel_rate);
        r.dram_array_static_j += cfg.p_static_array * 1e-3 * devices * sa * ff * secs;
        r.dram_peripheral_static_j += cfg.p_static_peri * 1e-3 * devices * sp * ff * secs;
    }
    for &active in &usage.core_active_ps {
        let idle = usage.runtime_ps - active;
        r.cpu_j += (cfg.cpu_active_w * active as f64 + cfg.cpu_idle_w * idle as f64) / PS_PER_S;
    }
    r.runtime_s = usage.runtime_ps as f64 / PS_PER_S;
    r.total_j = r.dram_j() + r.cpu_j;
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn seg(start: u64, end: u64, v: f64, counts: CommandCounts) -> Segment {
        Segment {
            start_ps: start,
            end_ps: end,
            v_array: v,
            v_peripheral: NOMINAL_VOLTAGE,
            channel_rate: ChannelRate::Mts1600,
            counts,
        }
    }

    fn usage(runtime: u64) -> RunUsage {
        RunUsage { runtime_ps: runtime, core_active_ps: vec![runtime], instructions: 1000 }
    }

    #[test]
    fn array_energy_scaling() {
        let cfg = PowerConfig::default();
        assert_eq!(scale_array_energy(10.0, 1.35, &cfg), 10.0);
        assert_relative_eq!(scale_array_energy(10.0, 0.90, &cfg), 4.444444444444445, epsilon = 1e-12);
        for e in [1.0, 7.5, 123.0] {
            let r = scale_array_energy(e, 1.35, &cfg) / scale_array_energy(e, 0.90, &cfg);
            assert_relative_eq!(r, 2.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn peripheral_power_scaling() {
        let cfg = PowerConfig::default();
        assert_eq!(scale_peripheral_power(2.0, 1.35, 1600, &cfg).unwrap(), 2.0);
        let p = scale_peripheral_power(1.0, 1.25, 1066, &cfg).unwrap();
        assert_relative_eq!(p, 0.571202, epsilon = 1e-6);
        let steps = [(1.35, 1600), (1.30, 1333), (1.25, 1066)];
        for w in steps.windows(2) {
            let hi = scale_peripheral_power(1.0, w[0].0, w[0].1, &cfg).unwrap();
            let lo = scale_peripheral_power(1.0, w[1].0, w[1].1, &cfg).unwrap();
            assert!(lo <= hi);
        }
        assert!(matches!(scale_peripheral_power(1.0, 1.35, 2133, &cfg), Err(Error::UnsupportedRate(2133))));
    }

    #[test]
    fn zero_commands_only_static() {
        let cfg = PowerConfig::default();
        let r = account(&usage(1_000_000), &[vec![seg(0, 1_000_000, 1.35, CommandCounts::default())]], &cfg).unwrap();
        assert_eq!(r.dram_dynamic_j(), 0.0);
        assert!(r.dram_static_j() > 0.0);
    }

    #[test]
    fn one_act_pre_pair() {
        let cfg = PowerConfig { p_static_array: 0.0, p_static_peri: 0.0, ..Default::default() };
        let c = CommandCounts { act: 1, pre: 1, ..Default::default() };
        let r = account(&usage(1000), &[vec![seg(0, 1000, 1.35, c)]], &cfg).unwrap();
        assert_relative_eq!(r.dram_array_dynamic_j, cfg.e_act_pre * 1e-9, max_relative = 1e-15);
        assert_eq!(r.dram_peripheral_dynamic_j, 0.0);
    }

    #[test]
    fn identical_logs_scale_quadratically() {
        let cfg = PowerConfig::default();
        let c = CommandCounts { act: 100, pre: 100, rd: 400, wr: 120, refresh: 3 };
        let hi = account(&usage(5000), &[vec![seg(0, 5000, 1.35, c)]], &cfg).unwrap();
        let lo = account(&usage(5000), &[vec![seg(0, 5000, 1.10, c)]], &cfg).unwrap();
        let ratio = lo.dram_array_dynamic_j / hi.dram_array_dynamic_j;
        assert!((ratio - (1.10f64 / 1.35).powi(2)).abs() < 1e-12);
        assert_eq!(lo.dram_peripheral_dynamic_j, hi.dram_peripheral_dynamic_j);
        assert!(lo.dram_j() < hi.dram_j());
    }

    #[test]
    fn gaps_are_rejected() {
        let cfg = PowerConfig::default();
        let c = CommandCounts::default();
        let gap = [seg(0, 100, 1.35, c), seg(150, 1000, 1.35, c)];
        assert!(matches!(account(&usage(1000), &[gap.to_vec()], &cfg), Err(Error::Accounting(_))));
        let short = [seg(0, 100, 1.35, c)];
        assert!(matches!(account(&usage(1000), &[short.to_vec()], &cfg), Err(Error::Accounting(_))));
    }

    #[test]
    fn report_identities() {
        let cfg = PowerConfig::default();
        let c = CommandCounts { act: 10, pre: 10, rd: 40, wr: 12, refresh: 1 };
        let u = RunUsage { runtime_ps: 8_000_000, core_active_ps: vec![8_000_000, 3_000_000], instructions: 5 };
        let r = account(&u, &[vec![seg(0, 8_000_000, 1.2, c)]], &cfg).unwrap();
        let parts = r.dram_array_dynamic_j
            + r.dram_peripheral_dynamic_j
            + r.dram_array_static_j
            + r.dram_peripheral_static_j
            + r.cpu_j;
        assert_relative_eq!(r.total_j, parts, max_relative = 1e-12);
        assert_relative_eq!(r.system_power_w() * r.runtime_s, r.total_j, max_relative = 1e-9);
        let cpu = (3.5 * 8e-6) + (3.5 * 3e-6 + 1.0 * 5e-6);
        assert_relative_eq!(r.cpu_j, cpu, max_relative = 1e-12);
    }

    #[test]
    fn csv_round_trip() {
        let cfg = PowerConfig::default();
        let c = CommandCounts { act: 3, pre: 3, rd: 9, wr: 2, refresh: 0 };
        let r = account(&usage(4000), &[vec![seg(0, 4000, 1.0, c)]], &cfg).unwrap();
        let rows = EnergyReport::parse_csv(&r.to_csv()).unwrap();
        assert_eq!(rows.len(), 7);
        for ((name, e, _), (n2, e2)) in rows.iter().zip(r.components()) {
            assert_eq!(name, n2);
            assert_eq!(*e, e2);
        }
    }
}
