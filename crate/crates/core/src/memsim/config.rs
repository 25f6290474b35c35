use serde::{Deserialize, Serialize};

use super::addr::{AddressMapper, AddressMapping};
use super::controller::QueueConfig;
use crate::error::{Error, Result};

/// Timing constraints that do not depend on the array voltage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeviceTimings {
    pub t_rtp_ns: f64,
    pub t_wr_ns: f64,
    pub t_wtr_ns: f64,
    pub t_rrd_ns: f64,
    pub t_ccd_cycles: u32,
    /// Clock cycles of one BL8 data burst.
    pub burst_cycles: u32,
    pub t_rfc_ns: f64,
    pub t_refi_ns: f64,
}

impl Default for DeviceTimings {
    fn default() -> Self {
        Self {
            t_rtp_ns: 7.5,
            t_wr_ns: 15.0,
            t_wtr_ns: 7.5,
            t_rrd_ns: 6.0,
            t_ccd_cycles: 4,
            burst_cycles: 4,
            t_rfc_ns: 260.0,
            t_refi_ns: 7800.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub channels: u32,
    pub ranks: u32,
    pub banks: u32,
    pub rows: u32,
    /// Cache lines per row.
    pub columns: u32,
    pub mapping: AddressMapping,
    pub read_queue: usize,
    pub write_queue: usize,
    pub write_high_watermark: usize,
    pub write_low_watermark: usize,
    pub window: u32,
    pub issue_width: u32,
    pub cpu_period_ps: u64,
    pub interval_cycles: u64,
    pub device: DeviceTimings,
    /// Keep the full command log and per-read latencies.
    pub record_commands: bool,
    /// Abort if the run has not finished after this many CPU cycles.
    pub max_cycles: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            channels: 2,
            ranks: 1,
            banks: 8,
            rows: 32768,
            columns: 128,
            mapping: AddressMapping::default(),
            read_queue: 64,
            write_queue: 64,
            write_high_watermark: 32,
            write_low_watermark: 16,
            window: 192,
            issue_width: 4,
            cpu_period_ps: 500,
            interval_cycles: 4_000_000,
            device: DeviceTimings::default(),
            record_commands: false,
            max_cycles: 50_000_000_000,
        }
    }
}

impl SimConfig {
    pub fn mapper(&self) -> AddressMapper {
        AddressMapper {
            mapping: self.mapping,
            channels: self.channels,
            ranks: self.ranks,
            banks: self.banks,
            rows: self.rows,
            columns: self.columns,
        }
    }

    pub fn queues(&self) -> QueueConfig {
        QueueConfig {
            read_capacity: self.read_queue,
            write_capacity: self.write_queue,
            write_high: self.write_high_watermark,
            write_low: self.write_low_watermark,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.channels == 0 || self.banks == 0 || self.rows == 0 || self.columns == 0 {
            return bad("channels, banks, rows and columns must be positive");
        }
        if self.ranks != 1 {
            return bad("only one rank per channel is modelled");
        }
        if self.read_queue == 0 || self.write_queue == 0 {
            return bad("queues must have room for at least one request");
        }
        if !(self.write_low_watermark < self.write_high_watermark && self.write_high_watermark <= self.write_queue) {
            return bad("write watermarks must satisfy low < high <= write queue size");
        }
        if self.window == 0 || self.issue_width == 0 || self.cpu_period_ps == 0 {
            return bad("window, issue width and CPU period must be positive");
        }
        if self.interval_cycles == 0 {
            return bad("interval_cycles must be positive");
        }
        let d = &self.device;
        let times = [d.t_rtp_ns, d.t_wr_ns, d.t_wtr_ns, d.t_rrd_ns, d.t_rfc_ns, d.t_refi_ns];
        if times.iter().any(|x| !(x.is_finite() && *x > 0.0)) || d.t_ccd_cycles == 0 || d.burst_cycles == 0 {
            return bad("device timings must be positive");
        }
        if d.t_rfc_ns * 4.0 > d.t_refi_ns {
            return bad("tRFC must be well below tREFI");
        }
        Ok(())
    }
}
