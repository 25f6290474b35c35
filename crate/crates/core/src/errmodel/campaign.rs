//! Test 1 campaigns: seeded error injection over a whole module.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{line_error_probability, DataPatternPair, DimmProfile, Geometry};
use crate::error::{invalid, Error, Result};

const BEATS_PER_LINE: u64 = 8;
const BITS_PER_BEAT: u64 = 64;
/// Above this many heavy beats in one row, their total flip count is drawn
/// from its normal approximation rather than beat by beat.
const EXACT_HEAVY_BEATS: u64 = 16;

/// Beats with 0, 1, 2, and more than 2 flipped bits.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeatHistogram(pub [u64; 4]);

impl BeatHistogram {
    pub fn total(&self) -> u64 {
        self.0.iter().sum()
    }

    pub fn heavy_fraction(&self) -> f64 {
        let t = self.total();
        if t == 0 {
            0.0
        } else {
            self.0[3] as f64 / t as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    pub geometry: Geometry,
    pub v: f64,
    pub trcd_ns: f64,
    pub trp_ns: f64,
    pub pattern: DataPatternPair,
    pub rounds: u32,
    /// Erroneous lines per `(bank, row)`, summed over rounds, bank-major.
    pub cell_errors: Vec<u64>,
    /// Rounds in which each `(bank, row)` had at least one erroneous line.
    pub cell_error_rounds: Vec<u32>,
    pub erroneous_lines: u64,
    pub lines_tested: u64,
    pub beats: BeatHistogram,
    pub round_bit_errors: Vec<u64>,
}

impl ErrorReport {
    pub fn bits_per_round(&self) -> u64 {
        self.geometry.lines() * BEATS_PER_LINE * BITS_PER_BEAT
    }

    pub fn round_ber(&self) -> Vec<f64> {
        let bits = self.bits_per_round() as f64;
        self.round_bit_errors.iter().map(|&e| e as f64 / bits).collect()
    }

    pub fn erroneous_line_fraction(&self) -> f64 {
        self.erroneous_lines as f64 / self.lines_tested as f64
    }
}

/// Binomial(64, q) split into the classes 1, 2 and >2 given at least one
/// flip, plus the moments of the >2 class.
struct BeatModel {
    q: f64,
    p0: f64,
    p1: f64,
    p2: f64,
    heavy_mean: f64,
    heavy_var: f64,
    /// Cumulative distribution of flips given more than two.
    heavy_cdf: Vec<f64>,
}

impl BeatModel {
    fn new(q: f64) -> Self {
        let n = BITS_PER_BEAT as usize;
        let mut pmf = vec![0.0; n + 1];
        let mut c = 1.0f64;
        for (k, slot) in pmf.iter_mut().enumerate() {
            *slot = c * q.powi(k as i32) * (1.0 - q).powi((n - k) as i32);
            c = c * (n - k) as f64 / (k + 1) as f64;
        }
        let heavy: f64 = pmf[3..].iter().sum();
        let heavy_mean = (3..=n).map(|k| k as f64 * pmf[k]).sum::<f64>() / heavy;
        let heavy_var = (3..=n).map(|k| (k as f64 - heavy_mean).powi(2) * pmf[k]).sum::<f64>() / heavy;
        let mut acc = 0.0;
        let heavy_cdf = (3..=n)
            .map(|k| {
                acc += pmf[k] / heavy;
                acc
            })
            .collect();
        Self { q, p0: pmf[0], p1: pmf[1], p2: pmf[2], heavy_mean, heavy_var, heavy_cdf }
    }

    fn heavy_flips(&self, beats: u64, rng: &mut ChaCha8Rng) -> u64 {
        if beats == 0 {
            return 0;
        }
        if beats <= EXACT_HEAVY_BEATS {
            (0..beats)
                .map(|_| {
                    let u: f64 = rng.random();
                    3 + self.heavy_cdf.partition_point(|&c| c < u).min(self.heavy_cdf.len() - 1) as u64
                })
                .sum()
        } else {
            let b = beats as f64;
            let n = Normal::new(b * self.heavy_mean, (b * self.heavy_var).sqrt()).expect("finite moments");
            n.sample(rng).round().clamp(3.0 * b, BITS_PER_BEAT as f64 * b) as u64
        }
    }
}

fn binomial(n: u64, p: f64, rng: &mut ChaCha8Rng) -> u64 {
    if n == 0 || p <= 0.0 {
        0
    } else if p >= 1.0 {
        n
    } else {
        Binomial::new(n, p).expect("valid binomial").sample(rng)
    }
}

/// Seed stream for one `(voltage, latency, pattern)` cell.
fn cell_stream(v: f64, trcd_ns: f64, trp_ns: f64, pattern: DataPatternPair) -> u64 {
    let mv = (v * 1000.0).round() as u64;
    let rcd = (trcd_ns * 100.0).round() as u64;
    let rp = (trp_ns * 100.0).round() as u64;
    (mv << 40) ^ (rcd << 24) ^ (rp << 8) ^ pattern.index() as u64
}

/// Runs `rounds` rounds of the write/read test over every line of the module.
///
/// Even rows hold the pattern and odd rows its companion. Each row draws its
/// erroneous-line count from a binomial; an erroneous line above the channel
/// floor has its flips confined to one beat, while below the floor every beat
/// of the line flips bits independently.
pub fn voltage_test(
    p: &DimmProfile,
    v: f64,
    trcd_ns: f64,
    trp_ns: f64,
    pattern: DataPatternPair,
    rounds: u32,
) -> Result<ErrorReport> {
    if rounds == 0 {
        return Err(invalid("at least one round is required"));
    }
    p.validate()?;
    let g = p.geometry;
    let mult = p.pattern_multipliers.map_or(1.0, |m| m[pattern.index()]);
    let cells = (g.banks * g.rows) as usize;
    let probs: Vec<f64> = (0..cells)
        .map(|i| {
            let (bank, row) = (i as u32 / g.rows, i as u32 % g.rows);
            (line_error_probability(p, v, trcd_ns, trp_ns, bank, row) * mult).min(1.0)
        })
        .collect();
    let active: Vec<usize> = (0..cells).filter(|&i| probs[i] > 0.0).collect();

    let beat = BeatModel::new(p.bit_flip_probability(v));
    let spread = p.below_floor(v);
    let lines = g.lines_per_row as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    rng.set_stream(cell_stream(v, trcd_ns, trp_ns, pattern));

    let mut r = ErrorReport {
        geometry: g,
        v,
        trcd_ns,
        trp_ns,
        pattern,
        rounds,
        cell_errors: vec![0; cells],
        cell_error_rounds: vec![0; cells],
        erroneous_lines: 0,
        lines_tested: g.lines() * rounds as u64,
        beats: BeatHistogram::default(),
        round_bit_errors: Vec::with_capacity(rounds as usize),
    };
    let total_beats = g.lines() * BEATS_PER_LINE;
    for _ in 0..rounds {
        let mut bits = 0u64;
        let mut bad_beats = [0u64; 3];
        for &i in &active {
            let k = binomial(lines, probs[i], &mut rng);
            if k == 0 {
                continue;
            }
            r.cell_errors[i] += k;
            r.cell_error_rounds[i] += 1;
            r.erroneous_lines += k;
            let (b1, b2, b3) = if spread {
                // Unconditional per-beat flips; a line with no flip at all
                // has probability (1 - q)^512 and is ignored.
                let n = k * BEATS_PER_LINE;
                let nz = binomial(n, 1.0 - beat.p0, &mut rng);
                let nz_mass = 1.0 - beat.p0;
                let b1 = binomial(nz, beat.p1 / nz_mass, &mut rng);
                let b2 = binomial(nz - b1, beat.p2 / (nz_mass - beat.p1), &mut rng);
                (b1, b2, nz - b1 - b2)
            } else {
                let nz_mass = 1.0 - beat.p0;
                let b1 = binomial(k, beat.p1 / nz_mass, &mut rng);
                let b2 = binomial(k - b1, beat.p2 / (nz_mass - beat.p1), &mut rng);
                (b1, b2, k - b1 - b2)
            };
            bad_beats[0] += b1;
            bad_beats[1] += b2;
            bad_beats[2] += b3;
            bits += b1 + 2 * b2 + beat.heavy_flips(b3, &mut rng);
        }
        let bad: u64 = bad_beats.iter().sum();
        r.beats.0[0] += total_beats - bad;
        r.beats.0[1] += bad_beats[0];
        r.beats.0[2] += bad_beats[1];
        r.beats.0[3] += bad_beats[2];
        r.round_bit_errors.push(bits);
    }
    debug_assert!(beat.q > 0.0);
    Ok(r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SecdedOutcome {
    Clean,
    Corrected,
    Detected,
    Uncorrectable,
}

/// What a per-beat SECDED code does with `bit_errors` flips in one beat.
pub fn secded_classify(bit_errors: u32) -> Result<SecdedOutcome> {
    Ok(match bit_errors {
        0 => SecdedOutcome::Clean,
        1 => SecdedOutcome::Corrected,
        2 => SecdedOutcome::Detected,
        3..=64 => SecdedOutcome::Uncorrectable,
        _ => return Err(invalid(format!("{bit_errors} bit errors exceed a 64-bit beat"))),
    })
}

/// Fraction of rounds in which each `(bank, row)` saw an error.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialHeatmap {
    pub banks: u32,
    pub rows: u32,
    /// Bank-major.
    pub probs: Vec<f64>,
}

impl SpatialHeatmap {
    pub fn get(&self, bank: u32, row: u32) -> f64 {
        self.probs[(bank * self.rows + row) as usize]
    }

    /// `bank,row,prob`, one line per cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.probs.len() * 12 + 16);
        out.push_str("bank,row,prob\n");
        for (i, p) in self.probs.iter().enumerate() {
            let (b, r) = (i as u32 / self.rows, i as u32 % self.rows);
            out.push_str(&format!("{b},{r},{p}\n"));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        if lines.next().map(|(_, h)| h) != Some("bank,row,prob") {
            return Err(Error::CsvParse { line: 1, message: "bad header".into() });
        }
        let mut cells = Vec::new();
        for (i, line) in lines {
            let err = |m: &str| Error::CsvParse { line: i + 1, message: m.into() };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 {
                return Err(err("expected 3 fields"));
            }
            let b: u32 = f[0].parse().map_err(|_| err("bad bank"))?;
            let r: u32 = f[1].parse().map_err(|_| err("bad row"))?;
            let p: f64 = f[2].parse().map_err(|_| err("bad probability"))?;
            cells.push((b, r, p));
        }
        let banks = cells.iter().map(|c| c.0 + 1).max().unwrap_or(0);
        let rows = cells.iter().map(|c| c.1 + 1).max().unwrap_or(0);
        if cells.len() != (banks * rows) as usize {
            return Err(Error::CsvParse { line: 0, message: "grid is not complete".into() });
        }
        let mut probs = vec![0.0; cells.len()];
        for (b, r, p) in cells {
            probs[(b * rows + r) as usize] = p;
        }
        Ok(Self { banks, rows, probs })
    }
}

pub fn spatial_heatmap(r: &ErrorReport) -> SpatialHeatmap {
    let n = r.rounds.max(1) as f64;
    SpatialHeatmap {
        banks: r.geometry.banks,
        rows: r.geometry.rows,
        probs: r.cell_error_rounds.iter().map(|&c| c as f64 / n).collect(),
    }
}

/// One round's bit error rate, as fed to the pattern ANOVA.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BerRow {
    pub voltage: f64,
    pub pattern: DataPatternPair,
    pub round: u32,
    pub ber: f64,
}

impl BerRow {
    pub fn from_report(r: &ErrorReport) -> Vec<BerRow> {
        r.round_ber()
            .into_iter()
            .enumerate()
            .map(|(i, ber)| BerRow { voltage: r.v, pattern: r.pattern, round: i as u32, ber })
            .collect()
    }
}

/// `voltage,pattern,round,ber`.
pub fn ber_csv(rows: &[BerRow]) -> String {
    let mut out = String::from("voltage,pattern,round,ber\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{:e}\n", r.voltage, r.pattern, r.round, r.ber));
    }
    out
}

pub fn parse_ber_csv(text: &str) -> Result<Vec<BerRow>> {
    let mut lines = text.lines().enumerate();
    if lines.next().map(|(_, h)| h) != Some("voltage,pattern,round,ber") {
        return Err(Error::CsvParse { line: 1, message: "bad header".into() });
    }
    lines
        .map(|(i, line)| {
            let err = |m: &str| Error::CsvParse { line: i + 1, message: m.into() };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(err("expected 4 fields"));
            }
            Ok(BerRow {
                voltage: f[0].parse().map_err(|_| err("bad voltage"))?,
                pattern: DataPatternPair::from_label(f[1]).ok_or_else(|| err("unknown pattern"))?,
                round: f[2].parse().map_err(|_| err("bad round"))?,
                ber: f[3].parse().map_err(|_| err("bad ber"))?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(mut p: DimmProfile) -> DimmProfile {
        p.geometry = Geometry { banks: 8, rows: 256, lines_per_row: 32 };
        p.row_clusters.retain(|c| c.center < 256);
        p
    }

    #[test]
    fn secded_classes() {
        assert_eq!(secded_classify(0).unwrap(), SecdedOutcome::Clean);
        assert_eq!(secded_classify(1).unwrap(), SecdedOutcome::Corrected);
        assert_eq!(secded_classify(2).unwrap(), SecdedOutcome::Detected);
        assert_eq!(secded_classify(5).unwrap(), SecdedOutcome::Uncorrectable);
        assert!(secded_classify(65).is_err());
    }

    #[test]
    fn zero_f0_is_clean() {
        let p = small(DimmProfile { f0: 0.0, ..DimmProfile::vendor_a() });
        let r = voltage_test(&p, 0.9, 10.0, 10.0, DataPatternPair::P00Ff, 3).unwrap();
        assert_eq!(r.erroneous_lines, 0);
        assert!(r.round_bit_errors.iter().all(|&b| b == 0));
    }

    #[test]
    fn histogram_counts_every_beat() {
        let p = small(DimmProfile::vendor_a());
        for v in [1.075, 1.0] {
            let r = voltage_test(&p, v, 10.0, 10.0, DataPatternPair::PAa33, 4).unwrap();
            assert_eq!(r.beats.total(), r.lines_tested * 8);
            assert!(r.erroneous_lines <= r.lines_tested);
        }
    }

    #[test]
    fn heatmap_confined_to_weighted_banks() {
        let p = small(DimmProfile::vendor_c());
        let r = voltage_test(&p, 1.1, 10.0, 10.0, DataPatternPair::PCc55, 5).unwrap();
        let h = spatial_heatmap(&r);
        assert!(h.probs.iter().all(|&x| (0.0..=1.0).contains(&x)));
        for b in 0..8 {
            let any = (0..h.rows).any(|row| h.get(b, row) > 0.0);
            assert_eq!(any, b < 2, "bank {b}");
        }
        assert_eq!(SpatialHeatmap::from_csv(&h.to_csv()).unwrap(), h);
    }

    #[test]
    fn ber_round_trip() {
        let p = small(DimmProfile::vendor_b());
        let r = voltage_test(&p, 1.0, 10.0, 10.0, DataPatternPair::P00Ff, 3).unwrap();
        let rows = BerRow::from_report(&r);
        assert_eq!(parse_ber_csv(&ber_csv(&rows)).unwrap(), rows);
    }

    #[test]
    fn rejects_zero_rounds() {
        let p = small(DimmProfile::vendor_a());
        assert!(voltage_test(&p, 1.0, 10.0, 10.0, DataPatternPair::P00Ff, 0).is_err());
    }

    #[test]
    fn heavy_flip_sampler_is_bounded() {
        let m = BeatModel::new(DimmProfile::vendor_a().bit_flip_probability(1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in [1, 5, 16, 17, 1000] {
            let f = m.heavy_flips(n, &mut rng);
            assert!(f >= 3 * n && f <= 64 * n);
        }
    }
}
