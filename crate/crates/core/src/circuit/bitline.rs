use std::fmt;

use serde::{Deserialize, Serialize};

use super::{charge_share, CircuitParams, DEFAULT_HORIZON_NS};
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BitlinePhase {
    Precharged,
    Sharing,
    Sensing,
    Restoring,
    Precharging,
}

impl BitlinePhase {
    pub fn as_str(self) -> &'static str {
        match self {
            BitlinePhase::Precharged => "precharged",
            BitlinePhase::Sharing => "sharing",
            BitlinePhase::Sensing => "sensing",
            BitlinePhase::Restoring => "restoring",
            BitlinePhase::Precharging => "precharging",
        }
    }
}

impl fmt::Display for BitlinePhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BitlineSample {
    pub time_ns: f64,
    pub voltage_v: f64,
    pub phase: BitlinePhase,
}

/// Threshold-crossing times. A marker is `None` when the trajectory never
/// reached it (for example when PRE is issued before restoration finishes).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseMarkers {
    pub charge_shared: Option<f64>,
    pub ready_to_access: Option<f64>,
    pub ready_to_precharge: Option<f64>,
    pub precharged: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BitlineTrajectory {
    pub vdd: f64,
    pub cell_stores_one: bool,
    pub t_pre_issue_ns: f64,
    pub samples: Vec<BitlineSample>,
    pub markers: PhaseMarkers,
}

impl BitlineTrajectory {
    /// CSV with header `time_ns,voltage_v,phase`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("time_ns,voltage_v,phase\n");
        for s in &self.samples {
            out.push_str(&format!("{:.6},{:.9},{}\n", s.time_ns, s.voltage_v, s.phase));
        }
        out
    }
}

/// One exponential-relaxation segment: dV/dt = (target - V) / tau.
#[derive(Clone, Copy)]
struct Drive {
    target: f64,
    tau: f64,
}

impl Drive {
    fn rk4(self, v: f64, h: f64) -> f64 {
        let f = |x: f64| (self.target - x) / self.tau;
        let k1 = f(v);
        let k2 = f(v + 0.5 * h * k1);
        let k3 = f(v + 0.5 * h * k2);
        let k4 = f(v + h * k3);
        v + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    }
}

struct Integrator {
    t: f64,
    v: f64,
    samples: Vec<BitlineSample>,
}

impl Integrator {
    fn push(&mut self, phase: BitlinePhase) {
        match self.samples.last_mut() {
            Some(last) if self.t - last.time_ns <= 1e-12 => {
                last.voltage_v = self.v;
                last.phase = phase;
            }
            _ => self.samples.push(BitlineSample { time_ns: self.t, voltage_v: self.v, phase }),
        }
    }

    /// Integrates on the global `dt` grid until `t_end`, or until `crossed`
    /// holds. Returns the crossing time if one occurred. The crossing point
    /// inside a step is located by bisection on the RK4 step length, so it
    /// is consistent with the integrator rather than with the closed form.
    fn run(
        &mut self,
        drive: Drive,
        dt: f64,
        t_end: f64,
        phase: BitlinePhase,
        crossed: &dyn Fn(f64) -> bool,
    ) -> Option<f64> {
        if crossed(self.v) {
            return Some(self.t);
        }
        while self.t < t_end - 1e-12 {
            let next_grid = ((self.t / dt + 1e-9).floor() + 1.0) * dt;
            let h = next_grid.min(t_end) - self.t;
            let v_next = drive.rk4(self.v, h);
            if crossed(v_next) {
                let (mut lo, mut hi) = (0.0, h);
                for _ in 0..100 {
                    let mid = 0.5 * (lo + hi);
                    if crossed(drive.rk4(self.v, mid)) {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                self.v = drive.rk4(self.v, hi);
                self.t += hi;
                self.push(phase);
                return Some(self.t);
            }
            self.v = v_next;
            self.t += h;
            self.push(phase);
        }
        None
    }
}

/// Simulates one ACT ... PRE sequence on a bitline with a fixed-step RK4
/// integrator (step `dt_ns`). PRE is issued at `t_pre_issue_ns`; the
/// trajectory ends once the bitline is back inside the precharge band, or at
/// `t_pre_issue_ns + 200 ns` otherwise.
pub fn simulate_bitline(
    params: &CircuitParams,
    vdd: f64,
    cell_stores_one: bool,
    t_pre_issue_ns: f64,
    dt_ns: f64,
) -> Result<BitlineTrajectory> {
    params.validate()?;
    if !(dt_ns > 0.0) {
        return Err(invalid("dt must be positive"));
    }
    if !(t_pre_issue_ns > 0.0) {
        return Err(invalid("PRE issue time must be positive"));
    }
    let floor = params.model_floor();
    if vdd <= floor {
        return Err(Error::OutOfModelRange { vdd, threshold: floor });
    }
    let vn = params.v_nominal;
    let tau_s = params.sense.tau_at(vn, vdd)?;
    let tau_r = params.restore.tau_at(vn, vdd)?;
    let tau_p = params.precharge.tau_at(vn, vdd)?;

    let half = vdd / 2.0;
    let rail = if cell_stores_one { vdd } else { 0.0 };
    let swing = |v: f64| (v - half).abs();
    let access_swing = (params.thresh_access - 0.5) * vdd;
    let restore_swing = (params.thresh_restore - 0.5) * vdd;
    let band = params.thresh_precharge_band * half;

    let mut markers = PhaseMarkers::default();
    let mut integ = Integrator { t: 0.0, v: half, samples: Vec::new() };
    integ.push(BitlinePhase::Precharged);

    let t_cs = params.t_charge_share_ns;
    let hold = Drive { target: half, tau: f64::INFINITY };
    let never = |_: f64| false;
    integ.run(hold, dt_ns, t_cs.min(t_pre_issue_ns), BitlinePhase::Precharged, &never);

    if t_cs < t_pre_issue_ns {
        integ.v = charge_share(params, cell_stores_one, vdd)?;
        integ.push(BitlinePhase::Sharing);
        markers.charge_shared = Some(integ.t);

        let sense = Drive { target: rail, tau: tau_s };
        let reached_access = |v: f64| swing(v) >= access_swing;
        markers.ready_to_access = integ.run(sense, dt_ns, t_pre_issue_ns, BitlinePhase::Sensing, &reached_access);

        if markers.ready_to_access.is_some() {
            let restore = Drive { target: rail, tau: tau_r };
            let reached_restore = |v: f64| swing(v) >= restore_swing;
            markers.ready_to_precharge =
                integ.run(restore, dt_ns, t_pre_issue_ns, BitlinePhase::Restoring, &reached_restore);
            if markers.ready_to_precharge.is_some() {
                integ.run(restore, dt_ns, t_pre_issue_ns, BitlinePhase::Restoring, &never);
            }
        }
    }

    let precharge = Drive { target: half, tau: tau_p };
    let settled = |v: f64| swing(v) <= band;
    let end = t_pre_issue_ns + DEFAULT_HORIZON_NS;
    markers.precharged = integ.run(precharge, dt_ns, end, BitlinePhase::Precharging, &settled);
    // A bitline that never left the band is trivially precharged at PRE.
    if markers.precharged.is_some_and(|t| t <= t_pre_issue_ns) {
        markers.precharged = Some(t_pre_issue_ns);
    }

    Ok(BitlineTrajectory { vdd, cell_stores_one, t_pre_issue_ns, samples: integ.samples, markers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::derive_min_latencies;

    fn params() -> CircuitParams {
        CircuitParams::default()
    }

    #[test]
    fn starts_precharged() {
        let tr = simulate_bitline(&params(), 1.2, true, 40.0, 0.01).unwrap();
        assert_eq!(tr.samples[0].time_ns, 0.0);
        assert_eq!(tr.samples[0].voltage_v, 0.6);
        assert_eq!(tr.samples[0].phase, BitlinePhase::Precharged);
    }

    #[test]
    fn times_strictly_increase_and_voltages_bounded() {
        for cell in [true, false] {
            let tr = simulate_bitline(&params(), 1.0, cell, 55.0, 0.05).unwrap();
            for w in tr.samples.windows(2) {
                assert!(w[1].time_ns > w[0].time_ns);
            }
            assert!(tr.samples.iter().all(|s| (0.0..=1.0).contains(&s.voltage_v)));
        }
    }

    #[test]
    fn rising_between_sharing_and_pre() {
        let tr = simulate_bitline(&params(), 1.35, true, 40.0, 0.01).unwrap();
        let t1 = tr.markers.charge_shared.unwrap();
        let window: Vec<_> = tr.samples.iter().filter(|s| s.time_ns >= t1 && s.time_ns <= tr.t_pre_issue_ns).collect();
        assert!(window.windows(2).all(|w| w[1].voltage_v >= w[0].voltage_v));
    }

    #[test]
    fn markers_ordered() {
        let tr = simulate_bitline(&params(), 1.1, true, 60.0, 0.01).unwrap();
        let m = tr.markers;
        let (t1, t2, t3, t4) = (
            m.charge_shared.unwrap(),
            m.ready_to_access.unwrap(),
            m.ready_to_precharge.unwrap(),
            m.precharged.unwrap(),
        );
        assert!(t1 <= t2 && t2 <= t3 && t3 < t4);
    }

    #[test]
    fn marker_voltages_hit_thresholds() {
        let p = params();
        let vdd = 1.2;
        let tr = simulate_bitline(&p, vdd, true, 50.0, 0.01).unwrap();
        let at = |t: f64| tr.samples.iter().find(|s| (s.time_ns - t).abs() < 1e-12).unwrap().voltage_v;
        assert!((at(tr.markers.ready_to_access.unwrap()) / vdd - p.thresh_access).abs() < 1e-9);
        assert!((at(tr.markers.ready_to_precharge.unwrap()) / vdd - p.thresh_restore).abs() < 1e-9);
        let settled = at(tr.markers.precharged.unwrap());
        assert!(((settled - vdd / 2.0).abs() - p.thresh_precharge_band * vdd / 2.0).abs() < 1e-9);
    }

    #[test]
    fn matches_closed_form_exponentials() {
        let p = params();
        let vdd = 1.15;
        let tr = simulate_bitline(&p, vdd, true, 45.0, 0.01).unwrap();
        let m = tr.markers;
        let tau_s = p.sense.tau_at(p.v_nominal, vdd).unwrap();
        let tau_r = p.restore.tau_at(p.v_nominal, vdd).unwrap();
        let tau_p = p.precharge.tau_at(p.v_nominal, vdd).unwrap();
        let t1 = m.charge_shared.unwrap();
        let t2 = m.ready_to_access.unwrap();
        let v1 = charge_share(&p, true, vdd).unwrap();
        let v2 = p.thresh_access * vdd;
        // Voltage at PRE from the closed form, used as the start of precharge.
        let v_pre = vdd - (vdd - v2) * (-(tr.t_pre_issue_ns - t2) / tau_r).exp();
        for s in &tr.samples {
            let t = s.time_ns;
            let expected = if t < t1 {
                vdd / 2.0
            } else if t <= t2 {
                vdd - (vdd - v1) * (-(t - t1) / tau_s).exp()
            } else if t <= tr.t_pre_issue_ns {
                vdd - (vdd - v2) * (-(t - t2) / tau_r).exp()
            } else {
                vdd / 2.0 + (v_pre - vdd / 2.0) * (-(t - tr.t_pre_issue_ns) / tau_p).exp()
            };
            assert!((s.voltage_v - expected).abs() < 1e-6, "t={t} got {} want {expected}", s.voltage_v);
        }
    }

    #[test]
    fn crossings_agree_with_closed_form_latencies() {
        let p = params();
        let dt = 0.01;
        for vdd in [1.35, 1.2, 1.05, 0.9] {
            let raw = derive_min_latencies(&p, vdd).unwrap();
            let tr = simulate_bitline(&p, vdd, true, raw.t_ras_raw + 1e-6, dt).unwrap();
            let m = tr.markers;
            assert!((m.ready_to_access.unwrap() - raw.t_rcd_raw).abs() <= dt);
            assert!((m.ready_to_precharge.unwrap() - raw.t_ras_raw).abs() <= dt);
            assert!((m.precharged.unwrap() - raw.t_ras_raw - raw.t_rp_raw).abs() <= dt);
        }
    }

    #[test]
    fn halving_dt_converges() {
        let p = params();
        let coarse = simulate_bitline(&p, 1.0, true, 50.0, 0.02).unwrap();
        let fine = simulate_bitline(&p, 1.0, true, 50.0, 0.01).unwrap();
        for s in &coarse.samples {
            if let Some(f) = fine.samples.iter().find(|f| (f.time_ns - s.time_ns).abs() < 1e-9) {
                assert!((f.voltage_v - s.voltage_v).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn early_pre_leaves_markers_unset() {
        let p = params();
        let tr = simulate_bitline(&p, 1.35, true, 8.0, 0.01).unwrap();
        assert!(tr.markers.charge_shared.is_some());
        assert!(tr.markers.ready_to_access.is_none());
        assert!(tr.markers.ready_to_precharge.is_none());
    }

    #[test]
    fn rejects_out_of_range() {
        let p = params();
        assert!(matches!(simulate_bitline(&p, p.model_floor(), true, 40.0, 0.01), Err(Error::OutOfModelRange { .. })));
        assert!(simulate_bitline(&p, 1.2, true, 40.0, 0.0).is_err());
        assert!(simulate_bitline(&p, 1.2, true, 0.0, 0.01).is_err());
    }

    #[test]
    fn csv_has_header_and_phases() {
        let tr = simulate_bitline(&params(), 1.35, false, 40.0, 0.5).unwrap();
        let csv = tr.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("time_ns,voltage_v,phase"));
        let phases: std::collections::BTreeSet<_> = lines.map(|l| l.rsplit(',').next().unwrap().to_string()).collect();
        for p in ["precharged", "sharing", "sensing", "restoring", "precharging"] {
            assert!(phases.contains(p), "missing {p}");
        }
    }
}
