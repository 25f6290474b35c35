//! Array-voltage selection policies.
//!
//! The performance-loss predictor is a two-branch linear model in memory
//! latency (tRAS + tRP, ns), MPKI and memory-stall fraction:
//!
//! ```text
//! loss = a + b_lat * latency + b_mpki * mpki + b_stall * stall
//! ```
//!
//! with separate coefficients below and above an MPKI threshold. Voltron
//! picks the lowest array voltage whose predicted loss stays within a target.
//! MemDVFS instead scales frequency and whole-chip voltage together from
//! bandwidth utilization.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::timing::{
    ChannelRate, LatencyTable, TimingParams, VoltageOperatingPoint, DEFAULT_T_CL_NS, DEFAULT_T_CWL_NS, NOMINAL_VOLTAGE,
};

/// Lowest candidate array voltage.
pub const MIN_ARRAY_VOLTAGE: f64 = 0.90;
pub const BANKS: u32 = 8;
const TRAIN_FRACTION: f64 = 0.7;

/// `[intercept, latency, mpki, stall]` for one branch.
pub type BranchCoefficients = [f64; 4];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorCoefficients {
    /// Used when `mpki < mpki_threshold`.
    pub low: BranchCoefficients,
    pub high: BranchCoefficients,
    pub mpki_threshold: f64,
}

impl Default for PredictorCoefficients {
    fn default() -> Self {
        Self { low: [-30.09, 0.59, 0.01, 19.24], high: [-50.04, 1.05, -0.01, 15.27], mpki_threshold: 15.0 }
    }
}

impl PredictorCoefficients {
    pub fn validate(&self) -> Result<()> {
        if !(self.mpki_threshold > 0.0 && self.mpki_threshold.is_finite()) {
            return Err(invalid("MPKI threshold must be positive"));
        }
        if self.low.iter().chain(&self.high).any(|c| !c.is_finite()) {
            return Err(invalid("predictor coefficients must be finite"));
        }
        Ok(())
    }

    pub fn branch(&self, mpki: f64) -> &BranchCoefficients {
        if mpki < self.mpki_threshold {
            &self.low
        } else {
            &self.high
        }
    }
}

fn linear(c: &BranchCoefficients, latency_ns: f64, mpki: f64, stall: f64) -> f64 {
    c[0] + c[1] * latency_ns + c[2] * mpki + c[3] * stall
}

/// Predicted performance loss in percent, clamped to `[0, 100]`.
pub fn predict_loss(c: &PredictorCoefficients, latency_ns: f64, mpki: f64, stall_fraction: f64) -> f64 {
    linear(c.branch(mpki), latency_ns, mpki, stall_fraction).clamp(0.0, 100.0)
}

/// Application behaviour over one control interval.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct WorkloadProfile {
    pub mpki: f64,
    pub stall_fraction: f64,
}

impl WorkloadProfile {
    pub fn validate(&self) -> Result<()> {
        if !(self.mpki >= 0.0 && self.mpki.is_finite()) {
            return Err(invalid("MPKI must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.stall_fraction) {
            return Err(invalid("stall fraction must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// One observation for fitting the predictor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSample {
    pub latency_ns: f64,
    pub mpki: f64,
    pub stall_fraction: f64,
    pub observed_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchFit {
    pub coefficients: BranchCoefficients,
    /// Test-split RMSE, in percentage points.
    pub rmse: f64,
    pub r_squared: f64,
    pub train: usize,
    pub test: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub coefficients: PredictorCoefficients,
    pub low: BranchFit,
    pub high: BranchFit,
}

impl FitReport {
    pub fn train_size(&self) -> usize {
        self.low.train + self.high.train
    }

    pub fn test_size(&self) -> usize {
        self.low.test + self.high.test
    }
}

/// Least-squares coefficients for samples `rows`. The design matrix has an
/// intercept column plus latency, MPKI and stall fraction.
pub fn ols(rows: &[LossSample]) -> Result<BranchCoefficients> {
    let n = rows.len();
    let x = DMatrix::from_fn(n, 4, |i, j| {
        let s = &rows[i];
        match j {
            0 => 1.0,
            1 => s.latency_ns,
            2 => s.mpki,
            _ => s.stall_fraction,
        }
    });
    let y = DVector::from_iterator(n, rows.iter().map(|s| s.observed_loss));
    // Column scaling keeps the rank test meaningful when predictors differ
    // in magnitude by orders.
    let norms: Vec<f64> = (0..4).map(|j| x.column(j).norm()).collect();
    if norms.iter().any(|&v| v == 0.0) {
        return Err(Error::SingularFit("a predictor column is identically zero".into()));
    }
    let mut xs = x.clone();
    for (j, &nrm) in norms.iter().enumerate() {
        xs.column_mut(j).scale_mut(1.0 / nrm);
    }
    let svd = xs.svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * 1e-10 * n.max(4) as f64;
    if svd.rank(tol) < 4 {
        return Err(Error::SingularFit(format!("design matrix of {n} samples is rank deficient")));
    }
    let beta = svd.solve(&y, tol).map_err(|e| Error::SingularFit(e.to_string()))?;
    Ok([beta[0] / norms[0], beta[1] / norms[1], beta[2] / norms[2], beta[3] / norms[3]])
}

fn test_metrics(c: &BranchCoefficients, test: &[LossSample]) -> (f64, f64) {
    if test.is_empty() {
        return (0.0, 1.0);
    }
    let n = test.len() as f64;
    let mean = test.iter().map(|s| s.observed_loss).sum::<f64>() / n;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for s in test {
        let e = s.observed_loss - linear(c, s.latency_ns, s.mpki, s.stall_fraction);
        ss_res += e * e;
        ss_tot += (s.observed_loss - mean).powi(2);
    }
    let rmse = (ss_res / n).sqrt();
    // A constant test set has no variance to explain; a perfect fit still
    // counts as R^2 = 1.
    let r2 = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res <= 1e-18 * n {
        1.0
    } else {
        0.0
    };
    (rmse, r2)
}

/// Train-set membership for `n` samples: a seeded shuffle, then the first
/// `floor(0.7 n)` indices train.
pub fn split_mask(n: usize, seed: u64) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (n as f64 * TRAIN_FRACTION).floor() as usize;
    let mut mask = vec![false; n];
    for &i in &idx[..n_train] {
        mask[i] = true;
    }
    mask
}

/// Fits both branches on a seeded 70/30 split of each branch's samples.
pub fn fit_predictor(samples: &[LossSample], split_seed: u64, mpki_threshold: f64) -> Result<FitReport> {
    let (low, high): (Vec<usize>, Vec<usize>) = (0..samples.len()).partition(|&i| samples[i].mpki < mpki_threshold);
    let mut mask = vec![false; samples.len()];
    for (branch, salt) in [(&low, 0u64), (&high, 1u64)] {
        let m = split_mask(branch.len(), split_seed.wrapping_mul(2).wrapping_add(salt));
        for (k, &i) in branch.iter().enumerate() {
            mask[i] = m[k];
        }
    }
    fit_predictor_with_split(samples, &mask, mpki_threshold)
}

/// Fits both branches with an explicit train mask (`true` = train).
pub fn fit_predictor_with_split(samples: &[LossSample], train: &[bool], mpki_threshold: f64) -> Result<FitReport> {
    if train.len() != samples.len() {
        return Err(invalid("train mask length differs from sample count"));
    }
    if !(mpki_threshold > 0.0) {
        return Err(invalid("MPKI threshold must be positive"));
    }
    let fit_branch = |is_low: bool| -> Result<BranchFit> {
        let mut tr = Vec::new();
        let mut te = Vec::new();
        for (s, &t) in samples.iter().zip(train) {
            if (s.mpki < mpki_threshold) == is_low {
                if t {
                    tr.push(*s)
                } else {
                    te.push(*s)
                }
            }
        }
        let name = if is_low { "low" } else { "high" };
        if tr.len() + te.len() < 8 {
            return Err(invalid(format!("{name}-MPKI branch needs at least 8 samples")));
        }
        let coefficients = ols(&tr).map_err(|e| match e {
            Error::SingularFit(m) => Error::SingularFit(format!("{name}-MPKI branch: {m}")),
            e => e,
        })?;
        let (rmse, r_squared) = test_metrics(&coefficients, &te);
        Ok(BranchFit { coefficients, rmse, r_squared, train: tr.len(), test: te.len() })
    };
    let low = fit_branch(true)?;
    let high = fit_branch(false)?;
    Ok(FitReport {
        coefficients: PredictorCoefficients { low: low.coefficients, high: high.coefficients, mpki_threshold },
        low,
        high,
    })
}

/// The outcome of one policy evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyDecision {
    pub op_point: VoltageOperatingPoint,
    /// Predicted loss of the chosen point; absent for policies without a
    /// predictor.
    pub predicted_loss: Option<f64>,
    /// Banks that use the reduced-voltage timings; the rest stay nominal.
    pub slow_banks: u32,
    pub cycle: u64,
}

/// Lowest candidate voltage whose predicted loss meets `target_loss`.
///
/// Candidates are the table rows below the highest voltage, scanned from the
/// lowest upwards. When none qualifies, the highest-voltage row is returned.
pub fn select_array_voltage(
    target_loss: f64,
    profile: &WorkloadProfile,
    table: &LatencyTable,
    coeffs: &PredictorCoefficients,
) -> PolicyDecision {
    let nominal = table.nominal();
    let loss = |p: &VoltageOperatingPoint| {
        predict_loss(coeffs, p.timings.predictor_latency_ns(), profile.mpki, profile.stall_fraction)
    };
    let chosen = table
        .rows()
        .iter()
        .rev()
        .filter(|r| r.v_array < nominal.v_array)
        .find(|r| loss(r) <= target_loss)
        .unwrap_or(nominal);
    PolicyDecision { op_point: *chosen, predicted_loss: Some(loss(chosen)), slow_banks: 0, cycle: 0 }
}

/// Banks needing the reduced-voltage timings: one more per 50 mV below
/// nominal, capped at the bank count.
pub fn slow_bank_count(v_array: f64) -> u32 {
    let steps = ((NOMINAL_VOLTAGE - v_array) / 0.05).round().max(0.0) as u32;
    steps.min(BANKS)
}

/// MemDVFS bandwidth thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DvfsThresholds {
    pub hi: f64,
    pub lo: f64,
}

impl Default for DvfsThresholds {
    fn default() -> Self {
        Self { hi: 0.40, lo: 0.15 }
    }
}

impl DvfsThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.lo && self.lo <= self.hi && self.hi <= 1.0) {
            return Err(invalid("MemDVFS thresholds must satisfy 0 <= lo <= hi <= 1"));
        }
        Ok(())
    }
}

/// The frequency/voltage step for a bandwidth utilization. Boundaries go to
/// the lower step.
pub fn memdvfs_select(bandwidth_util: f64, t: &DvfsThresholds) -> VoltageOperatingPoint {
    let (rate, v) = if bandwidth_util > t.hi {
        (ChannelRate::Mts1600, 1.35)
    } else if bandwidth_util > t.lo {
        (ChannelRate::Mts1333, 1.30)
    } else {
        (ChannelRate::Mts1066, 1.25)
    };
    dvfs_point(rate, v)
}

/// Whole-chip voltage with the nominal latencies re-rounded to the clock.
pub fn dvfs_point(rate: ChannelRate, v: f64) -> VoltageOperatingPoint {
    let n = TimingParams::nominal();
    let timings = TimingParams::from_ns(
        rate.t_ck_ns(),
        n.t_rcd_ns(),
        n.t_rp_ns(),
        n.t_ras_ns(),
        DEFAULT_T_CL_NS,
        DEFAULT_T_CWL_NS,
    );
    VoltageOperatingPoint { v_array: v, v_peripheral: v, channel_rate: rate, timings }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Policy {
    /// Never changes the operating point.
    Fixed,
    Voltron {
        target_loss: f64,
    },
    VoltronBl {
        target_loss: f64,
    },
    Memdvfs {
        hi: f64,
        lo: f64,
    },
}

impl Policy {
    pub fn name(&self) -> &'static str {
        match self {
            Policy::Fixed => "fixed",
            Policy::Voltron { .. } => "voltron",
            Policy::VoltronBl { .. } => "voltron_bl",
            Policy::Memdvfs { .. } => "memdvfs",
        }
    }

    /// Parses a policy name with the given target loss; MemDVFS takes the
    /// default thresholds.
    pub fn from_name(name: &str, target_loss: f64) -> Result<Policy> {
        let p = match name {
            "fixed" => Policy::Fixed,
            "voltron" => Policy::Voltron { target_loss },
            "voltron_bl" | "voltron-bl" => Policy::VoltronBl { target_loss },
            "memdvfs" => {
                let t = DvfsThresholds::default();
                Policy::Memdvfs { hi: t.hi, lo: t.lo }
            }
            _ => return Err(Error::InvalidConfig(format!("unknown policy '{name}'"))),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Policy::Voltron { target_loss } | Policy::VoltronBl { target_loss } => {
                if !(target_loss >= 0.0 && target_loss.is_finite()) {
                    return Err(Error::InvalidConfig("target loss must be non-negative".into()));
                }
            }
            Policy::Memdvfs { hi, lo } => {
                DvfsThresholds { hi, lo }.validate().map_err(|e| Error::InvalidConfig(e.to_string()))?
            }
            Policy::Fixed => {}
        }
        Ok(())
    }

    /// Evaluates the policy for one interval. `None` means keep the current
    /// operating point.
    pub fn decide(
        &self,
        profile: &WorkloadProfile,
        bandwidth_util: f64,
        table: &LatencyTable,
        coeffs: &PredictorCoefficients,
    ) -> Option<PolicyDecision> {
        match *self {
            Policy::Fixed => None,
            Policy::Voltron { target_loss } => Some(select_array_voltage(target_loss, profile, table, coeffs)),
            Policy::VoltronBl { target_loss } => {
                let mut d = select_array_voltage(target_loss, profile, table, coeffs);
                d.slow_banks = slow_bank_count(d.op_point.v_array);
                Some(d)
            }
            Policy::Memdvfs { hi, lo } => Some(PolicyDecision {
                op_point: memdvfs_select(bandwidth_util, &DvfsThresholds { hi, lo }),
                predicted_loss: None,
                slow_banks: 0,
                cycle: 0,
            }),
        }
    }
}

/// One row of the decision log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub cycle: u64,
    pub policy: String,
    pub v_array: f64,
    pub freq: u32,
    pub predicted_loss: Option<f64>,
    pub slow_banks: u32,
}

impl DecisionRecord {
    pub fn new(policy: &Policy, d: &PolicyDecision) -> Self {
        Self {
            cycle: d.cycle,
            policy: policy.name().to_string(),
            v_array: d.op_point.v_array,
            freq: d.op_point.channel_rate.mts(),
            predicted_loss: d.predicted_loss,
            slow_banks: d.slow_banks,
        }
    }
}

pub const DECISION_LOG_HEADER: &str = "cycle,policy,v_array,freq,predicted_loss,slow_banks";

/// `cycle,policy,v_array,freq,predicted_loss,slow_banks`; an absent
/// prediction is an empty field.
pub fn decision_log_csv(records: &[DecisionRecord]) -> String {
    let mut out = format!("{DECISION_LOG_HEADER}\n");
    for r in records {
        let loss = r.predicted_loss.map(|l| format!("{l}")).unwrap_or_default();
        out.push_str(&format!("{},{},{},{},{},{}\n", r.cycle, r.policy, r.v_array, r.freq, loss, r.slow_banks));
    }
    out
}

pub fn parse_decision_log(text: &str) -> Result<Vec<DecisionRecord>> {
    let mut lines = text.lines().enumerate();
    if lines.next().map(|(_, h)| h) != Some(DECISION_LOG_HEADER) {
        return Err(Error::CsvParse { line: 1, message: "bad header".into() });
    }
    lines
        .map(|(i, line)| {
            let err = |m: &str| Error::CsvParse { line: i + 1, message: m.into() };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(err("expected 6 fields"));
            }
            Ok(DecisionRecord {
                cycle: f[0].parse().map_err(|_| err("bad cycle"))?,
                policy: f[1].to_string(),
                v_array: f[2].parse().map_err(|_| err("bad voltage"))?,
                freq: f[3].parse().map_err(|_| err("bad frequency"))?,
                predicted_loss: if f[4].is_empty() { None } else { Some(f[4].parse().map_err(|_| err("bad loss"))?) },
                slow_banks: f[5].parse().map_err(|_| err("bad bank count"))?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn predictor_hand_values() {
        let c = PredictorCoefficients::default();
        assert_abs_diff_eq!(predict_loss(&c, 50.0, 10.0, 0.5), 9.13, epsilon = 1e-9);
        assert_abs_diff_eq!(predict_loss(&c, 50.0, 20.0, 0.5), 9.895, epsilon = 1e-9);
        assert_eq!(predict_loss(&c, 50.0, 0.0, 0.0), 0.0);
        assert_eq!(predict_loss(&c, 500.0, 0.0, 1.0), 100.0);
    }

    #[test]
    fn threshold_goes_high() {
        let c = PredictorCoefficients::default();
        assert_eq!(c.branch(15.0), &c.high);
        assert_eq!(c.branch(14.999), &c.low);
    }

    #[test]
    fn selection_edge_cases() {
        let t = LatencyTable::published();
        let c = PredictorCoefficients::default();
        let p = WorkloadProfile { mpki: 30.0, stall_fraction: 0.8 };
        assert_eq!(select_array_voltage(100.0, &p, &t, &c).op_point.v_array, 0.90);
        let d = select_array_voltage(0.0, &p, &t, &c);
        assert_eq!(d.op_point.v_array, 1.35);
        assert_eq!(d.op_point, *t.nominal());
    }

    #[test]
    fn bank_counts() {
        assert_eq!(slow_bank_count(1.35), 0);
        assert_eq!(slow_bank_count(1.25), 2);
        assert_eq!(slow_bank_count(1.10), 5);
        assert_eq!(slow_bank_count(0.90), 8);
    }

    #[test]
    fn dvfs_steps() {
        let t = DvfsThresholds::default();
        let hi = memdvfs_select(0.9, &t);
        assert_eq!((hi.channel_rate, hi.v_array), (ChannelRate::Mts1600, 1.35));
        assert_eq!(hi.timings, TimingParams::nominal());
        let lo = memdvfs_select(0.0, &t);
        assert_eq!((lo.channel_rate, lo.v_array, lo.v_peripheral), (ChannelRate::Mts1066, 1.25, 1.25));
        assert_eq!(memdvfs_select(0.40, &t).channel_rate, ChannelRate::Mts1333);
        assert_eq!(memdvfs_select(0.15, &t).channel_rate, ChannelRate::Mts1066);
        // 13.75 ns at 1.5 ns per cycle rounds up to 10 cycles.
        let mid = memdvfs_select(0.3, &t);
        assert_eq!((mid.timings.rcd, mid.timings.ras, mid.timings.cl), (10, 25, 10));
    }

    #[test]
    fn exact_recovery() {
        let truth = PredictorCoefficients {
            low: [-20.0, 0.4, 0.2, 10.0],
            high: [-40.0, 0.9, -0.05, 12.0],
            mpki_threshold: 15.0,
        };
        let mut samples = Vec::new();
        for i in 0..60 {
            let lat = 50.0 + (i % 10) as f64 * 3.125;
            let mpki = if i % 2 == 0 { 1.0 + (i % 7) as f64 } else { 16.0 + (i % 11) as f64 * 2.0 };
            let stall = ((i * 37) % 100) as f64 / 100.0;
            let c = truth.branch(mpki);
            samples.push(LossSample {
                latency_ns: lat,
                mpki,
                stall_fraction: stall,
                observed_loss: linear(c, lat, mpki, stall),
            });
        }
        let r = fit_predictor(&samples, 7, 15.0).unwrap();
        for (a, b) in r.coefficients.low.iter().zip(&truth.low).chain(r.coefficients.high.iter().zip(&truth.high)) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-8);
        }
        assert!(r.low.rmse < 1e-9 && r.high.rmse < 1e-9);
        assert_eq!(r.train_size() + r.test_size(), samples.len());
    }

    #[test]
    fn singular_design() {
        let samples: Vec<LossSample> = (0..20)
            .map(|i| LossSample {
                latency_ns: 50.0,
                mpki: 1.0 + i as f64 * 0.1,
                stall_fraction: 0.3,
                observed_loss: 1.0,
            })
            .collect();
        assert!(matches!(ols(&samples), Err(Error::SingularFit(_))));
    }

    #[test]
    fn decision_log_round_trip() {
        let recs = vec![
            DecisionRecord {
                cycle: 0,
                policy: "voltron".into(),
                v_array: 1.1,
                freq: 1600,
                predicted_loss: Some(2.125),
                slow_banks: 0,
            },
            DecisionRecord {
                cycle: 4_000_000,
                policy: "memdvfs".into(),
                v_array: 1.25,
                freq: 1066,
                predicted_loss: None,
                slow_banks: 0,
            },
        ];
        assert_eq!(parse_decision_log(&decision_log_csv(&recs)).unwrap(), recs);
    }
}
