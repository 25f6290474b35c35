//! Fitting the bitline model to a measured voltage/latency table.
//!
//! Model latencies at voltage `v` are
//!
//! ```text
//! tRCD(v) = t_cs + S_sense   * g(v; x_sense)
//! tRAS(v) = tRCD(v) + S_restore * g(v; x_restore)
//! tRP(v)  = S_pre * g(v; x_pre)
//! g(v; x) = (v_nominal - x) / (v - x)
//! ```
//!
//! where each `S` is the phase's raw latency at nominal voltage. Residuals
//! are measured in clock cycles after guardband and rounding, so for a fixed
//! shape `(t_cs, x)` the residual vector only changes at a finite set of
//! breakpoints in `S`. The fit enumerates those breakpoints exactly and grid
//! searches the remaining shape parameters, first coarsely and then around
//! the best coarse point. tRCD and tRAS share `t_cs` and the sense drive, so
//! they are fitted jointly; tRP is independent.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::{CircuitParams, PhaseDrive};
use crate::error::{Error, Result};
use crate::timing::TimingParams;

/// One measured row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTarget {
    pub v_array: f64,
    pub timings: TimingParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationOptions {
    /// Rows within this distance of the highest target voltage must be
    /// reproduced exactly whenever possible.
    pub anchor_window_v: f64,
    /// Overdrive thresholds stay at least this far below the lowest target.
    pub threshold_margin_v: f64,
    /// Lowest overdrive threshold considered.
    pub threshold_floor_v: f64,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self { anchor_window_v: 0.05, threshold_margin_v: 0.05, threshold_floor_v: -1.0 }
    }
}

/// Model minus target, in cycles, for one row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnResidual {
    pub rcd: i64,
    pub ras: i64,
    pub rp: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub params: CircuitParams,
    /// Per target row, in the order the targets were given.
    pub residuals: Vec<ColumnResidual>,
}

impl Calibration {
    pub fn max_abs_residual_cycles(&self) -> i64 {
        self.residuals.iter().map(|r| r.rcd.abs().max(r.ras.abs()).max(r.rp.abs())).max().unwrap_or(0)
    }

    pub fn sum_squared_residual(&self) -> i64 {
        self.residuals.iter().map(|r| r.rcd.pow(2) + r.ras.pow(2) + r.rp.pow(2)).sum()
    }
}

/// Lexicographic fit quality: missed anchor rows, worst row, squared sum,
/// then distance from the centre of each target rounding interval.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Score {
    anchor_misses: u32,
    max_abs: i64,
    sum_sq: i64,
    slack: f64,
}

impl Score {
    const ZERO: Score = Score { anchor_misses: 0, max_abs: 0, sum_sq: 0, slack: 0.0 };

    fn combine(self, o: Score) -> Score {
        Score {
            anchor_misses: self.anchor_misses + o.anchor_misses,
            max_abs: self.max_abs.max(o.max_abs),
            sum_sq: self.sum_sq + o.sum_sq,
            slack: self.slack + o.slack,
        }
    }

    fn cmp(&self, o: &Score) -> Ordering {
        (self.anchor_misses, self.max_abs, self.sum_sq)
            .cmp(&(o.anchor_misses, o.max_abs, o.sum_sq))
            .then(self.slack.total_cmp(&o.slack))
    }

    fn better_than(&self, o: &Score) -> bool {
        self.cmp(o) == Ordering::Less
    }
}

/// One latency column of the target table.
struct Column {
    target: Vec<i64>,
    anchor: Vec<bool>,
    /// guardband / t_ck: raw ns to fractional cycles.
    scale: f64,
}

impl Column {
    fn cycles(&self, raw: f64) -> i64 {
        (raw * self.scale - 1e-9).ceil() as i64
    }

    fn score(&self, raws: &[f64]) -> Score {
        let mut s = Score::ZERO;
        for (i, &raw) in raws.iter().enumerate() {
            let k = self.target[i];
            let res = self.cycles(raw) - k;
            if self.anchor[i] && res != 0 {
                s.anchor_misses += 1;
            }
            s.max_abs = s.max_abs.max(res.abs());
            s.sum_sq += res * res;
            s.slack += (raw * self.scale - (k as f64 - 0.5)).powi(2);
        }
        s
    }

    /// Values of `S` in `raw_i = base_i + S * g_i` worth evaluating: points
    /// inside every interval between consecutive rounding breakpoints near
    /// the targets.
    fn scale_candidates(&self, base: &[f64], g: &[f64], per_interval: &[f64]) -> Vec<f64> {
        const REACH: i64 = 3;
        let mut bps: Vec<f64> = Vec::with_capacity(self.target.len() * (2 * REACH as usize + 1) + 1);
        bps.push(0.0);
        for i in 0..self.target.len() {
            for j in (self.target[i] - REACH)..=(self.target[i] + REACH) {
                let s = (j as f64 / self.scale - base[i]) / g[i];
                if s > 0.0 {
                    bps.push(s);
                }
            }
        }
        bps.sort_by(f64::total_cmp);
        bps.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        let mut out = Vec::with_capacity(bps.len() * per_interval.len());
        for w in bps.windows(2) {
            for f in per_interval {
                out.push(w[0] + f * (w[1] - w[0]));
            }
        }
        out
    }

    /// Best `S` for fixed `base` and shape `g`.
    fn best_scale(&self, base: &[f64], g: &[f64]) -> Option<(f64, Score)> {
        let mut raws = vec![0.0; base.len()];
        let mut best: Option<(f64, Score)> = None;
        for s in self.scale_candidates(base, g, &[0.5]) {
            for i in 0..raws.len() {
                raws[i] = base[i] + s * g[i];
            }
            let sc = self.score(&raws);
            if best.as_ref().is_none_or(|(_, b)| sc.better_than(b)) {
                best = Some((s, sc));
            }
        }
        best
    }
}

fn shape(volts: &[f64], v_nominal: f64, x: f64) -> Vec<f64> {
    volts.iter().map(|&v| (v_nominal - x) / (v - x)).collect()
}

fn grid(lo: f64, hi: f64, step: f64) -> impl Iterator<Item = f64> {
    let n = ((hi - lo) / step + 1e-9).floor() as i64;
    (0..=n.max(0)).map(move |i| lo + i as f64 * step)
}

#[derive(Debug, Clone, Copy)]
struct ActFit {
    t_cs: f64,
    x_sense: f64,
    s_sense: f64,
    x_restore: f64,
    s_restore: f64,
    score: Score,
}

struct Problem<'a> {
    volts: &'a [f64],
    v_nominal: f64,
    rcd: Column,
    ras: Column,
    rp: Column,
    x_lo: f64,
    x_hi: f64,
    t_cs_max: f64,
}

impl Problem<'_> {
    fn act_score(&self, t_cs: f64, x_s: f64, s_s: f64, x_r: f64, s_r: f64) -> Score {
        let gs = shape(self.volts, self.v_nominal, x_s);
        let gr = shape(self.volts, self.v_nominal, x_r);
        let rcd: Vec<f64> = gs.iter().map(|g| t_cs + s_s * g).collect();
        let ras: Vec<f64> = rcd.iter().zip(&gr).map(|(r, g)| r + s_r * g).collect();
        self.rcd.score(&rcd).combine(self.ras.score(&ras))
    }

    /// Searches `t_cs x x_sense x x_restore`, solving both scales exactly.
    fn search_act(&self, t_cs_grid: &[f64], x_s_grid: &[f64], x_r_grid: &[f64], best: &mut Option<ActFit>) {
        const SENSE_KEEP: usize = 12;
        let n = self.volts.len();
        let x_r_shapes: Vec<(f64, Vec<f64>)> =
            x_r_grid.iter().map(|&x| (x, shape(self.volts, self.v_nominal, x))).collect();
        let mut rcd = vec![0.0; n];
        for &t_cs in t_cs_grid {
            let base = vec![t_cs; n];
            for &x_s in x_s_grid {
                let gs = shape(self.volts, self.v_nominal, x_s);
                let mut sense: Vec<(f64, Score)> = self
                    .rcd
                    .scale_candidates(&base, &gs, &[0.25, 0.5, 0.75])
                    .into_iter()
                    .map(|s| {
                        let raws: Vec<f64> = gs.iter().map(|g| t_cs + s * g).collect();
                        (s, self.rcd.score(&raws))
                    })
                    .collect();
                sense.sort_by(|a, b| a.1.cmp(&b.1));
                sense.truncate(SENSE_KEEP);
                for (s_s, rcd_score) in sense {
                    if let Some(b) = best {
                        // The tRAS column can only add to the score.
                        if (rcd_score.anchor_misses, rcd_score.max_abs) > (b.score.anchor_misses, b.score.max_abs) {
                            continue;
                        }
                    }
                    for i in 0..n {
                        rcd[i] = t_cs + s_s * gs[i];
                    }
                    for (x_r, gr) in &x_r_shapes {
                        if let Some((s_r, ras_score)) = self.ras.best_scale(&rcd, gr) {
                            let score = rcd_score.combine(ras_score);
                            if best.as_ref().is_none_or(|b| score.better_than(&b.score)) {
                                *best = Some(ActFit {
                                    t_cs,
                                    x_sense: x_s,
                                    s_sense: s_s,
                                    x_restore: *x_r,
                                    s_restore: s_r,
                                    score,
                                });
                            }
                        }
                    }
                }
            }
        }
    }

    fn fit_act(&self, initial: ActFit) -> ActFit {
        let mut best = Some(initial);
        let t_cs: Vec<f64> = grid(0.0, self.t_cs_max, 0.5).collect();
        let xs: Vec<f64> = grid(self.x_lo, self.x_hi, 0.05).collect();
        let xr: Vec<f64> = grid(self.x_lo, self.x_hi, 0.1).collect();
        self.search_act(&t_cs, &xs, &xr, &mut best);

        let c = best.unwrap();
        let local = |centre: f64, half: f64, step: f64, lo: f64, hi: f64| -> Vec<f64> {
            grid((centre - half).max(lo), (centre + half).min(hi), step).collect()
        };
        let t_cs = local(c.t_cs, 0.5, 0.05, 0.0, self.t_cs_max);
        let xs = local(c.x_sense, 0.05, 0.005, self.x_lo, self.x_hi);
        let xr = local(c.x_restore, 0.1, 0.01, self.x_lo, self.x_hi);
        self.search_act(&t_cs, &xs, &xr, &mut best);
        best.unwrap()
    }

    fn fit_precharge(&self, initial: (f64, f64, Score)) -> (f64, f64, Score) {
        let n = self.volts.len();
        let zero = vec![0.0; n];
        let mut best = initial;
        let scan = |xs: Vec<f64>, best: &mut (f64, f64, Score)| {
            for x in xs {
                let g = shape(self.volts, self.v_nominal, x);
                if let Some((s, sc)) = self.rp.best_scale(&zero, &g) {
                    if sc.better_than(&best.2) {
                        *best = (x, s, sc);
                    }
                }
            }
        };
        scan(grid(self.x_lo, self.x_hi, 0.01).collect(), &mut best);
        let x0 = best.0;
        scan(grid((x0 - 0.01).max(self.x_lo), (x0 + 0.01).min(self.x_hi), 0.0005).collect(), &mut best);
        best
    }
}

/// Fits sense, restore and precharge drives plus the charge-sharing delay
/// so that guardbanded, clock-rounded model latencies match `targets`.
/// Capacitances and voltage thresholds are kept from `initial`.
pub fn calibrate(
    initial: &CircuitParams,
    targets: &[CalibrationTarget],
    guardband: f64,
    t_ck_ns: f64,
) -> Result<Calibration> {
    calibrate_with(initial, targets, guardband, t_ck_ns, &CalibrationOptions::default())
}

pub fn calibrate_with(
    initial: &CircuitParams,
    targets: &[CalibrationTarget],
    guardband: f64,
    t_ck_ns: f64,
    opts: &CalibrationOptions,
) -> Result<Calibration> {
    initial.validate()?;
    if targets.is_empty() {
        return Err(Error::InvalidCalibrationInput("no targets".into()));
    }
    if !(guardband >= 1.0 && t_ck_ns > 0.0) {
        return Err(Error::InvalidCalibrationInput("guardband must be >= 1 and t_ck positive".into()));
    }
    let mut order: Vec<usize> = (0..targets.len()).collect();
    order.sort_by(|&a, &b| targets[b].v_array.total_cmp(&targets[a].v_array));
    for w in order.windows(2) {
        let (hi, lo) = (&targets[w[0]], &targets[w[1]]);
        if (hi.v_array - lo.v_array).abs() < 1e-9 {
            return Err(Error::InvalidCalibrationInput(format!("duplicate voltage {}", hi.v_array)));
        }
        if !lo.timings.dominates(&hi.timings) {
            return Err(Error::InvalidCalibrationInput(format!(
                "latencies at {} V are shorter than at {} V",
                lo.v_array, hi.v_array
            )));
        }
    }

    let volts: Vec<f64> = order.iter().map(|&i| targets[i].v_array).collect();
    let v_max = volts[0];
    let v_min = *volts.last().unwrap();
    let to_cycles = |ns: f64| (ns / t_ck_ns).round() as i64;
    let anchor: Vec<bool> = volts.iter().map(|&v| v >= v_max - opts.anchor_window_v - 1e-9).collect();
    let column = |f: &dyn Fn(&TimingParams) -> f64| Column {
        target: order.iter().map(|&i| to_cycles(f(&targets[i].timings))).collect(),
        anchor: anchor.clone(),
        scale: guardband / t_ck_ns,
    };
    let rcd = column(&|t| t.t_rcd_ns());
    let ras = column(&|t| t.t_ras_ns());
    let rp = column(&|t| t.t_rp_ns());
    let x_hi = (v_min - opts.threshold_margin_v).min(initial.v_nominal - opts.threshold_margin_v);
    if x_hi <= opts.threshold_floor_v {
        return Err(Error::InvalidCalibrationInput("target voltages leave no room for a threshold".into()));
    }
    let min_rcd = rcd.target.iter().copied().min().unwrap_or(0).max(1) as f64;
    let problem = Problem {
        volts: &volts,
        v_nominal: initial.v_nominal,
        t_cs_max: (min_rcd - 1.0) / rcd.scale,
        rcd,
        ras,
        rp,
        x_lo: opts.threshold_floor_v,
        x_hi,
    };

    let (ls, lr, lp) = (initial.sense_log_factor(), initial.restore_log_factor(), initial.precharge_log_factor());
    if !(ls > 0.0 && lr.is_finite() && lr > 0.0 && lp > 0.0) {
        return Err(Error::InvalidCalibrationInput("thresholds leave a phase with zero duration".into()));
    }

    // Score the starting point so the fit never returns something worse.
    let init_act = {
        let (t_cs, x_s, s_s) = (initial.t_charge_share_ns, initial.sense.v_threshold, initial.sense.tau0_ns * ls);
        let (x_r, s_r) = (initial.restore.v_threshold, initial.restore.tau0_ns * lr);
        let usable = x_s < v_min && x_r < v_min;
        let score = if usable {
            problem.act_score(t_cs, x_s, s_s, x_r, s_r)
        } else {
            Score { anchor_misses: u32::MAX, max_abs: i64::MAX, sum_sq: i64::MAX, slack: f64::INFINITY }
        };
        ActFit { t_cs, x_sense: x_s, s_sense: s_s, x_restore: x_r, s_restore: s_r, score }
    };
    let init_pre = {
        let (x, s) = (initial.precharge.v_threshold, initial.precharge.tau0_ns * lp);
        let score = if x < v_min {
            let raws: Vec<f64> = shape(&volts, initial.v_nominal, x).iter().map(|g| s * g).collect();
            problem.rp.score(&raws)
        } else {
            Score { anchor_misses: u32::MAX, max_abs: i64::MAX, sum_sq: i64::MAX, slack: f64::INFINITY }
        };
        (x, s, score)
    };

    let act = problem.fit_act(init_act);
    let (x_p, s_p, _) = problem.fit_precharge(init_pre);

    let params = CircuitParams {
        sense: PhaseDrive::new(act.s_sense / ls, act.x_sense),
        restore: PhaseDrive::new(act.s_restore / lr, act.x_restore),
        precharge: PhaseDrive::new(s_p / lp, x_p),
        t_charge_share_ns: act.t_cs,
        ..*initial
    };
    params.validate()?;

    let residuals = targets
        .iter()
        .map(|t| {
            let g = |x: f64| (params.v_nominal - x) / (t.v_array - x);
            let rcd_raw = params.t_charge_share_ns + act.s_sense * g(params.sense.v_threshold);
            let ras_raw = rcd_raw + act.s_restore * g(params.restore.v_threshold);
            let rp_raw = s_p * g(params.precharge.v_threshold);
            let cyc = |raw: f64| (raw * guardband / t_ck_ns - 1e-9).ceil() as i64;
            ColumnResidual {
                rcd: cyc(rcd_raw) - to_cycles(t.timings.t_rcd_ns()),
                ras: cyc(ras_raw) - to_cycles(t.timings.t_ras_ns()),
                rp: cyc(rp_raw) - to_cycles(t.timings.t_rp_ns()),
            }
        })
        .collect();
    Ok(Calibration { params, residuals })
}

/// The published table as calibration targets.
pub fn published_targets() -> Vec<CalibrationTarget> {
    crate::timing::LatencyTable::published()
        .rows()
        .iter()
        .map(|r| CalibrationTarget { v_array: r.v_array, timings: r.timings })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timing::{build_latency_table, default_voltages, Guardband, LatencySource};

    #[test]
    fn single_row_fits_exactly() {
        let t = TimingParams::nominal();
        let cal =
            calibrate(&CircuitParams::uncalibrated(), &[CalibrationTarget { v_array: 1.35, timings: t }], 1.375, 1.25)
                .unwrap();
        assert_eq!(cal.max_abs_residual_cycles(), 0);
    }

    #[test]
    fn round_trip_from_known_parameters() {
        let known = CircuitParams {
            sense: PhaseDrive::new(4.0, 0.45),
            restore: PhaseDrive::new(5.0, 0.2),
            precharge: PhaseDrive::new(3.0, 0.55),
            t_charge_share_ns: 4.0,
            ..CircuitParams::uncalibrated()
        };
        let table = build_latency_table(
            &LatencySource::Model { params: known, guardband: Guardband::default() },
            &default_voltages(),
        )
        .unwrap();
        let targets: Vec<_> =
            table.rows().iter().map(|r| CalibrationTarget { v_array: r.v_array, timings: r.timings }).collect();
        let cal = calibrate(&CircuitParams::uncalibrated(), &targets, 1.375, 1.25).unwrap();
        assert_eq!(cal.max_abs_residual_cycles(), 0, "{:?}", cal.residuals);
        let rebuilt = build_latency_table(
            &LatencySource::Model { params: cal.params, guardband: Guardband::default() },
            &default_voltages(),
        )
        .unwrap();
        assert_eq!(rebuilt, table);
    }

    #[test]
    fn published_table_within_one_cycle() {
        let cal = calibrate(&CircuitParams::uncalibrated(), &published_targets(), 1.375, 1.25).unwrap();
        assert!(cal.max_abs_residual_cycles() <= 1, "{:?}", cal.residuals);
        // rows are given from 1.35 V downwards; the top two are anchors
        assert_eq!(cal.residuals[0], ColumnResidual { rcd: 0, ras: 0, rp: 0 });
        assert_eq!(cal.residuals[1], ColumnResidual { rcd: 0, ras: 0, rp: 0 });
    }

    #[test]
    fn shipped_defaults_match_calibration() {
        let cal = calibrate(&CircuitParams::uncalibrated(), &published_targets(), 1.375, 1.25).unwrap();
        let d = CircuitParams::default();
        let close = |a: f64, b: f64| (a - b).abs() < 1e-9;
        assert!(close(cal.params.t_charge_share_ns, d.t_charge_share_ns), "{:?}", cal.params);
        for (a, b) in
            [(cal.params.sense, d.sense), (cal.params.restore, d.restore), (cal.params.precharge, d.precharge)]
        {
            assert!(close(a.tau0_ns, b.tau0_ns) && close(a.v_threshold, b.v_threshold), "{:?}", cal.params);
        }
    }

    #[test]
    fn deterministic() {
        let a = calibrate(&CircuitParams::uncalibrated(), &published_targets(), 1.375, 1.25).unwrap();
        let b = calibrate(&CircuitParams::uncalibrated(), &published_targets(), 1.375, 1.25).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_non_monotone_targets() {
        let mut targets = published_targets();
        targets[0].timings = TimingParams::from_ns(1.25, 30.0, 30.0, 60.0, 13.75, 13.75);
        assert!(matches!(
            calibrate(&CircuitParams::uncalibrated(), &targets, 1.375, 1.25),
            Err(Error::InvalidCalibrationInput(_))
        ));
        assert!(calibrate(&CircuitParams::uncalibrated(), &[], 1.375, 1.25).is_err());
    }
}
