use proptest::collection::vec;
use proptest::prelude::*;

use voltsim::circuit::{derive_min_latencies, CircuitParams, RawLatencies};
use voltsim::errmodel::{anova_oneway, line_error_probability, voltage_test, DataPatternPair, DimmProfile, Vendor};
use voltsim::power::{account, scale_array_energy, CommandCounts, PowerConfig, RunUsage, Segment};
use voltsim::timing::{apply_guardband, ChannelRate, Guardband, LatencyTable};
use voltsim::voltron::{
    memdvfs_select, ols, predict_loss, select_array_voltage, slow_bank_count, DvfsThresholds, LossSample,
    PredictorCoefficients, WorkloadProfile,
};

fn profile() -> impl Strategy<Value = WorkloadProfile> {
    (0.0..60.0f64, 0.0..=1.0f64).prop_map(|(mpki, stall_fraction)| WorkloadProfile { mpki, stall_fraction })
}

fn segment(start_ps: u64, end_ps: u64, v_array: f64, counts: CommandCounts) -> Segment {
    Segment { start_ps, end_ps, v_array, v_peripheral: 1.35, channel_rate: ChannelRate::Mts1600, counts }
}

fn counts() -> impl Strategy<Value = CommandCounts> {
    (0..1000u64, 0..1000u64, 0..1000u64, 0..50u64).prop_map(|(act, rd, wr, refresh)| CommandCounts {
        act,
        pre: act,
        rd,
        wr,
        refresh,
    })
}

fn usage(runtime_ps: u64) -> RunUsage {
    RunUsage { runtime_ps, core_active_ps: vec![runtime_ps], instructions: 1000 }
}

/// Pooled two-sample t statistic.
fn t_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    let ss = |x: &[f64], m: f64| x.iter().map(|v| (v - m).powi(2)).sum::<f64>();
    let (ma, mb) = (mean(a), mean(b));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let sp2 = (ss(a, ma) + ss(b, mb)) / (na + nb - 2.0);
    (ma - mb) / (sp2 * (1.0 / na + 1.0 / nb)).sqrt()
}

proptest! {
    #[test]
    fn raw_latencies_grow_as_voltage_drops(a in 0.90..1.35f64, b in 0.90..1.35f64) {
        let p = CircuitParams::default();
        let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
        let h = derive_min_latencies(&p, hi).unwrap();
        let l = derive_min_latencies(&p, lo).unwrap();
        prop_assert!(l.t_rcd_raw >= h.t_rcd_raw);
        prop_assert!(l.t_ras_raw >= h.t_ras_raw);
        prop_assert!(l.t_rp_raw >= h.t_rp_raw);
        prop_assert!(0.0 < h.t_rcd_raw && h.t_rcd_raw < h.t_ras_raw && h.t_rp_raw > 0.0);
    }

    #[test]
    fn guardband_bounds(rcd in 0.0..40.0f64, extra in 0.0..40.0f64, rp in 0.0..40.0f64, factor in 1.0..2.0f64) {
        let gb = Guardband::new(factor, 1.25);
        let raw = RawLatencies { t_rcd_raw: rcd, t_ras_raw: rcd + extra, t_rp_raw: rp };
        let t = apply_guardband(&raw, &gb).unwrap();
        for (ns, r) in [(t.t_rcd_ns(), rcd), (t.t_ras_ns(), rcd + extra), (t.t_rp_ns(), rp)] {
            prop_assert!(ns >= r * factor - 1e-9);
            prop_assert!(ns < r * factor + 1.25 + 1e-9);
        }
        // Re-applying a unit guardband to rounded values changes nothing.
        let again = RawLatencies { t_rcd_raw: t.t_rcd_ns(), t_ras_raw: t.t_ras_ns(), t_rp_raw: t.t_rp_ns() };
        prop_assert_eq!(apply_guardband(&again, &Guardband::new(1.0, 1.25)).unwrap(), t);
    }

    #[test]
    fn predicted_loss_is_bounded(l in 1.0..200.0f64, p in profile()) {
        let x = predict_loss(&PredictorCoefficients::default(), l, p.mpki, p.stall_fraction);
        prop_assert!((0.0..=100.0).contains(&x));
    }

    #[test]
    fn selection_is_minimal_and_monotone(p in profile(), t1 in 0.0..30.0f64, t2 in 0.0..30.0f64) {
        let table = LatencyTable::published();
        let c = PredictorCoefficients::default();
        let d = select_array_voltage(t1, &p, &table, &c);
        let ok = |v: f64, t: f64| {
            let r = table.lookup(v).unwrap();
            predict_loss(&c, r.timings.predictor_latency_ns(), p.mpki, p.stall_fraction) <= t
        };
        let best = table.rows().iter().map(|r| r.v_array).filter(|&v| v < 1.35 && ok(v, t1)).fold(1.35, f64::min);
        prop_assert_eq!(d.op_point.v_array, best);
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let a = select_array_voltage(lo, &p, &table, &c).op_point.v_array;
        let b = select_array_voltage(hi, &p, &table, &c).op_point.v_array;
        prop_assert!(b <= a);
    }

    #[test]
    fn dvfs_steps_are_monotone(u1 in 0.0..=1.0f64, u2 in 0.0..=1.0f64) {
        let t = DvfsThresholds::default();
        let (lo, hi) = if u1 <= u2 { (u1, u2) } else { (u2, u1) };
        let a = memdvfs_select(lo, &t);
        let b = memdvfs_select(hi, &t);
        prop_assert!(b.v_array >= a.v_array);
        prop_assert!(b.channel_rate.mts() >= a.channel_rate.mts());
    }

    #[test]
    fn slow_banks_non_increasing(a in 0.90..=1.35f64, b in 0.90..=1.35f64) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(slow_bank_count(hi) <= slow_bank_count(lo));
        prop_assert!(slow_bank_count(lo) <= 8);
    }

    #[test]
    fn array_energy_scales_quadratically(e in 1e-12..1e-6f64, v in 0.9..1.35f64) {
        let cfg = PowerConfig::default();
        let r = scale_array_energy(e, v, &cfg) / e;
        prop_assert!((r - (v / 1.35).powi(2)).abs() < 1e-12);
    }

    #[test]
    fn dram_energy_monotone_in_array_voltage(c in counts(), a in 0.9..1.35f64, b in 0.9..1.35f64) {
        let cfg = PowerConfig::default();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let run = |v: f64| account(&usage(1_000_000), &[vec![segment(0, 1_000_000, v, c)]], &cfg).unwrap();
        let (rl, rh) = (run(lo), run(hi));
        prop_assert!(rl.dram_j() <= rh.dram_j() + 1e-18);
        prop_assert_eq!(rl.dram_peripheral_dynamic_j, rh.dram_peripheral_dynamic_j);
    }

    #[test]
    fn energy_is_additive_over_segments(c1 in counts(), c2 in counts(), split in 1u64..999_999, v in 0.9..1.35f64) {
        let cfg = PowerConfig::default();
        let end = 1_000_000;
        let whole = account(&usage(end), &[vec![segment(0, split, v, c1), segment(split, end, v, c2)]], &cfg).unwrap();
        let first = account(&usage(split), &[vec![segment(0, split, v, c1)]], &cfg).unwrap();
        let mut second_usage = usage(end - split);
        second_usage.instructions = 0;
        let second = account(&second_usage, &[vec![segment(0, end - split, v, c2)]], &cfg).unwrap();
        let sum = first.combine(&second);
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(1e-12);
        prop_assert!(close(whole.dram_j(), sum.dram_j()));
        prop_assert!(close(whole.cpu_j, sum.cpu_j));
        prop_assert!(close(whole.total_j, sum.total_j));
    }

    #[test]
    fn anova_two_groups_is_t_squared(a in vec(-100.0..100.0f64, 2..12), b in vec(-100.0..100.0f64, 2..12)) {
        let r = anova_oneway(&[a.clone(), b.clone()]);
        prop_assume!(r.is_ok());
        let r = r.unwrap();
        let t = t_statistic(&a, &b);
        prop_assert!((r.f - t * t).abs() <= 1e-9 * r.f.max(1.0), "F {} t^2 {}", r.f, t * t);
        prop_assert!(r.p > 0.0 && r.p <= 1.0);
    }

    #[test]
    fn anova_ignores_group_order_and_scale(
        groups in vec(vec(0.0..1.0f64, 2..8), 2..6),
        scale in 0.1..1000.0f64,
        shift in -10.0..10.0f64,
    ) {
        let r = anova_oneway(&groups);
        prop_assume!(r.is_ok());
        let r = r.unwrap();
        let mut rev = groups.clone();
        rev.reverse();
        let q = anova_oneway(&rev).unwrap();
        prop_assert!((r.f - q.f).abs() <= 1e-9 * r.f.max(1.0));
        prop_assert!((r.p - q.p).abs() <= 1e-12);
        let scaled: Vec<Vec<f64>> = groups.iter().map(|g| g.iter().map(|x| x * scale + shift).collect()).collect();
        let s = anova_oneway(&scaled).unwrap();
        prop_assert!((r.f - s.f).abs() <= 1e-6 * r.f.max(1.0));
    }

    #[test]
    fn ols_recovers_and_ignores_duplication(
        c in [(-50.0..50.0f64), (-2.0..2.0f64), (-1.0..1.0f64), (-20.0..20.0f64)],
        xs in vec((20.0..80.0f64, 0.0..40.0f64, 0.0..=1.0f64), 8..40),
    ) {
        let rows: Vec<LossSample> = xs
            .iter()
            .map(|&(l, m, s)| LossSample {
                latency_ns: l,
                mpki: m,
                stall_fraction: s,
                observed_loss: c[0] + c[1] * l + c[2] * m + c[3] * s,
            })
            .collect();
        let fit = ols(&rows);
        prop_assume!(fit.is_ok());
        let fit = fit.unwrap();
        for j in 0..4 {
            prop_assert!((fit[j] - c[j]).abs() < 1e-6 * c[j].abs().max(1.0), "{fit:?} vs {c:?}");
        }
        let doubled: Vec<LossSample> = rows.iter().chain(&rows).copied().collect();
        let again = ols(&doubled).unwrap();
        for j in 0..4 {
            prop_assert!((fit[j] - again[j]).abs() < 1e-9 * fit[j].abs().max(1.0));
        }
    }

    #[test]
    fn error_probability_monotone(
        a in 0.90..1.35f64, b in 0.90..1.35f64,
        l1 in 10.0..20.0f64, l2 in 10.0..20.0f64,
        bank in 0..8u32, row in 0..32768u32, vendor in 0..3usize,
    ) {
        let p = DimmProfile::bundled([Vendor::A, Vendor::B, Vendor::C][vendor]);
        let (vlo, vhi) = if a <= b { (a, b) } else { (b, a) };
        let (llo, lhi) = if l1 <= l2 { (l1, l2) } else { (l2, l1) };
        let f = |v: f64, rcd: f64, rp: f64| line_error_probability(&p, v, rcd, rp, bank, row);
        prop_assert!(f(vhi, llo, llo) <= f(vlo, llo, llo));
        prop_assert!(f(vlo, lhi, llo) <= f(vlo, llo, llo));
        prop_assert!(f(vlo, llo, lhi) <= f(vlo, llo, llo));
        prop_assert!((0.0..=1.0).contains(&f(vlo, llo, llo)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn no_errors_at_or_above_vmin(seed in any::<u64>(), vendor in 0..3usize, pat in 0..3usize, dv in 0.0..0.2f64) {
        let mut p = DimmProfile::bundled([Vendor::A, Vendor::B, Vendor::C][vendor]);
        p.seed = seed;
        let v = (p.v_min + dv).min(1.35);
        let r = voltage_test(&p, v, 10.0, 10.0, DataPatternPair::ALL[pat], 3).unwrap();
        prop_assert_eq!(r.erroneous_lines, 0);
        prop_assert_eq!(r.beats.total(), r.beats.0[0]);
    }
}
