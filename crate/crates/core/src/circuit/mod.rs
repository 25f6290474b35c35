//! Lumped-element model of one DRAM bitline.
//!
//! An access goes through four observable points:
//!
//! * **T1**: the wordline connects the cell and the bitline moves from
//!   `Vdd/2` by the charge-sharing perturbation.
//! * **T2**: the sense amplifier has driven the bitline to the
//!   *ready-to-access* level (`thresh_access * Vdd`). This bounds `tRCD`.
//! * **T3**: the cell is restored to the *ready-to-precharge* level
//!   (`thresh_restore * Vdd`). This bounds `tRAS`.
//! * **T4**: after `PRE`, the bitline is back within
//!   `thresh_precharge_band * Vdd/2` of `Vdd/2`. This bounds `tRP`.
//!
//! Between the markers the bitline relaxes exponentially towards the rail
//! (or towards `Vdd/2` while precharging). Each phase has its own drive
//! strength whose time constant grows as the array voltage approaches the
//! transistor overdrive threshold:
//!
//! ```text
//! tau(v) = tau0 * (v_nominal - v_th) / (v - v_th)
//! ```

mod bitline;
mod calibrate;

pub use bitline::{simulate_bitline, BitlinePhase, BitlineSample, BitlineTrajectory, PhaseMarkers};
pub use calibrate::{
    calibrate, calibrate_with, published_targets, Calibration, CalibrationOptions, CalibrationTarget, ColumnResidual,
};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Default horizon for threshold searches.
pub const DEFAULT_HORIZON_NS: f64 = 200.0;

/// Drive strength of one phase of the bitline operation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseDrive {
    /// Time constant at the nominal voltage, in ns.
    pub tau0_ns: f64,
    /// Overdrive threshold voltage. The time constant diverges as the array
    /// voltage approaches it from above.
    pub v_threshold: f64,
}

impl PhaseDrive {
    pub const fn new(tau0_ns: f64, v_threshold: f64) -> Self {
        Self { tau0_ns, v_threshold }
    }

    /// Time constant at array voltage `vdd`.
    pub fn tau_at(&self, v_nominal: f64, vdd: f64) -> Result<f64> {
        if vdd <= self.v_threshold {
            return Err(Error::OutOfModelRange { vdd, threshold: self.v_threshold });
        }
        Ok(self.tau0_ns * (v_nominal - self.v_threshold) / (vdd - self.v_threshold))
    }
}

/// Parameters of the lumped bitline model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CircuitParams {
    /// Cell capacitance (fF).
    pub c_cell_ff: f64,
    /// Bitline capacitance (fF).
    pub c_bitline_ff: f64,
    pub v_nominal: f64,
    pub sense: PhaseDrive,
    pub restore: PhaseDrive,
    pub precharge: PhaseDrive,
    /// Delay from ACT until charge sharing completes (T1), in ns.
    pub t_charge_share_ns: f64,
    /// Ready-to-access level as a fraction of Vdd.
    pub thresh_access: f64,
    /// Ready-to-precharge level as a fraction of Vdd.
    pub thresh_restore: f64,
    /// Precharge completion band as a fraction of Vdd/2.
    pub thresh_precharge_band: f64,
}

impl Default for CircuitParams {
    /// Parameters calibrated against the published reduced-voltage latency
    /// table (guardband 1.375, tCK 1.25 ns). See `calibrate`.
    fn default() -> Self {
        Self {
            c_cell_ff: 24.0,
            c_bitline_ff: 144.0,
            v_nominal: 1.35,
            sense: PhaseDrive::new(CALIBRATED_SENSE.0, CALIBRATED_SENSE.1),
            restore: PhaseDrive::new(CALIBRATED_RESTORE.0, CALIBRATED_RESTORE.1),
            precharge: PhaseDrive::new(CALIBRATED_PRECHARGE.0, CALIBRATED_PRECHARGE.1),
            t_charge_share_ns: CALIBRATED_T_CHARGE_SHARE,
            thresh_access: 0.75,
            thresh_restore: 0.98,
            thresh_precharge_band: 0.02,
        }
    }
}

// Output of `calibrate(&CircuitParams::uncalibrated(), &published_targets(), 1.375, 1.25)`.
// The `shipped_defaults_match_calibration` test keeps these in sync.
const CALIBRATED_SENSE: (f64, f64) = (2.721_828_208_356_951, 0.805);
const CALIBRATED_RESTORE: (f64, f64) = (6.429_736_337_547_348, -0.6);
const CALIBRATED_PRECHARGE: (f64, f64) = (2.360_703_036_373_195, 0.4);
const CALIBRATED_T_CHARGE_SHARE: f64 = 7.75;

impl CircuitParams {
    /// Physically plausible starting point for calibration: published
    /// capacitances and thresholds with generic drive strengths.
    pub fn uncalibrated() -> Self {
        Self {
            sense: PhaseDrive::new(3.0, 0.5),
            restore: PhaseDrive::new(6.0, 0.5),
            precharge: PhaseDrive::new(2.5, 0.5),
            t_charge_share_ns: 5.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c_cell_ff >= 0.0 && self.c_bitline_ff > 0.0) {
            return Err(invalid("capacitances must be positive"));
        }
        if !(self.v_nominal > 0.0) {
            return Err(invalid("nominal voltage must be positive"));
        }
        if !(0.0 < self.thresh_access && self.thresh_access < self.thresh_restore && self.thresh_restore <= 1.0) {
            return Err(invalid("thresholds must satisfy 0 < access < restore <= 1"));
        }
        if !(0.0 < self.thresh_precharge_band && self.thresh_precharge_band < 0.5) {
            return Err(invalid("precharge band must lie in (0, 0.5)"));
        }
        for (name, d) in [("sense", self.sense), ("restore", self.restore), ("precharge", self.precharge)] {
            if !(d.tau0_ns > 0.0) || !d.tau0_ns.is_finite() {
                return Err(invalid(format!("{name} tau0 must be positive")));
            }
            if !(d.v_threshold < self.v_nominal) {
                return Err(invalid(format!("{name} threshold must be below nominal voltage")));
            }
        }
        if !(self.t_charge_share_ns >= 0.0) {
            return Err(invalid("charge-share delay must be non-negative"));
        }
        Ok(())
    }

    /// Ratio `c_cell / (c_cell + c_bitline)`.
    pub fn transfer_ratio(&self) -> f64 {
        self.c_cell_ff / (self.c_cell_ff + self.c_bitline_ff)
    }

    /// Highest overdrive threshold across the three phases: the model is
    /// defined strictly above this voltage.
    pub fn model_floor(&self) -> f64 {
        self.sense.v_threshold.max(self.restore.v_threshold).max(self.precharge.v_threshold)
    }

    /// `ln` factor between charge-sharing level and ready-to-access level.
    pub(crate) fn sense_log_factor(&self) -> f64 {
        let r = self.transfer_ratio();
        // distance to the rail after sharing / distance at the access threshold
        ((1.0 - r) / 2.0 / (1.0 - self.thresh_access)).ln().max(0.0)
    }

    pub(crate) fn restore_log_factor(&self) -> f64 {
        ((1.0 - self.thresh_access) / (1.0 - self.thresh_restore)).ln()
    }

    pub(crate) fn precharge_log_factor(&self) -> f64 {
        ((self.thresh_restore - 0.5) / (0.5 * self.thresh_precharge_band)).ln()
    }
}

/// Pre-guardband minimum reliable latencies at one array voltage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawLatencies {
    pub t_rcd_raw: f64,
    pub t_ras_raw: f64,
    pub t_rp_raw: f64,
}

/// Bitline voltage right after charge sharing.
pub fn charge_share(params: &CircuitParams, cell_stores_one: bool, vdd: f64) -> Result<f64> {
    if !(vdd > 0.0) {
        return Err(invalid("vdd must be positive"));
    }
    if !(params.c_cell_ff >= 0.0 && params.c_bitline_ff > 0.0) {
        return Err(invalid("capacitances must be positive"));
    }
    let delta = vdd * params.c_cell_ff / (2.0 * (params.c_cell_ff + params.c_bitline_ff));
    Ok(if cell_stores_one { vdd / 2.0 + delta } else { vdd / 2.0 - delta })
}

/// Minimum reliable tRCD/tRAS/tRP at array voltage `vdd`, from the closed
/// form of the piecewise-exponential trajectory.
pub fn derive_min_latencies(params: &CircuitParams, vdd: f64) -> Result<RawLatencies> {
    derive_min_latencies_within(params, vdd, DEFAULT_HORIZON_NS)
}

pub fn derive_min_latencies_within(params: &CircuitParams, vdd: f64, horizon_ns: f64) -> Result<RawLatencies> {
    params.validate()?;
    let tau_s = params.sense.tau_at(params.v_nominal, vdd)?;
    let tau_r = params.restore.tau_at(params.v_nominal, vdd)?;
    let tau_p = params.precharge.tau_at(params.v_nominal, vdd)?;

    let t_rcd_raw = params.t_charge_share_ns + tau_s * params.sense_log_factor();
    if t_rcd_raw > horizon_ns {
        return Err(Error::UnreachableThreshold { what: "ready-to-access", horizon_ns });
    }
    let restore = params.restore_log_factor();
    let t_ras_raw = t_rcd_raw + tau_r * restore;
    if !t_ras_raw.is_finite() || t_ras_raw > horizon_ns {
        return Err(Error::UnreachableThreshold { what: "ready-to-precharge", horizon_ns });
    }
    let t_rp_raw = tau_p * params.precharge_log_factor();
    if t_rp_raw > horizon_ns {
        return Err(Error::UnreachableThreshold { what: "precharge", horizon_ns });
    }
    Ok(RawLatencies { t_rcd_raw, t_ras_raw, t_rp_raw })
}
