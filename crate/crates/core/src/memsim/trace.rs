//! Post-LLC miss traces.
//!
//! Text format, one record per line: `<non_mem_insts> <hex_address> <R|W>`.
//! Blank lines and lines starting with `#` are ignored.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};

use super::addr::LINE_BYTES;
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    /// Non-memory instructions executed before this access.
    pub bubble: u64,
    pub addr: u64,
    pub write: bool,
}

impl TraceRecord {
    /// Instructions this record accounts for, including the access itself.
    pub fn instructions(&self) -> u64 {
        self.bubble + 1
    }
}

pub type Trace = Vec<TraceRecord>;

pub fn parse_trace(text: &str) -> Result<Trace> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |m: &str| Error::TraceParse { line: i + 1, message: format!("{m}: '{line}'") };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 3 {
            return Err(err("expected three fields"));
        }
        let bubble = f[0].parse().map_err(|_| err("bad instruction count"))?;
        let hex = f[1].trim_start_matches("0x").trim_start_matches("0X");
        let addr = u64::from_str_radix(hex, 16).map_err(|_| err("bad hex address"))?;
        let write = match f[2] {
            "R" | "r" => false,
            "W" | "w" => true,
            _ => return Err(err("access type must be R or W")),
        };
        out.push(TraceRecord { bubble, addr, write });
    }
    Ok(out)
}

pub fn format_trace(trace: &[TraceRecord]) -> String {
    let mut s = String::with_capacity(trace.len() * 20);
    for r in trace {
        s.push_str(&format!("{} 0x{:x} {}\n", r.bubble, r.addr, if r.write { 'W' } else { 'R' }));
    }
    s
}

/// Built-in synthetic workloads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Synthetic {
    /// Sequential lines through a private region; mostly row hits.
    Stream,
    /// Uniformly random lines; mostly row misses, memory-intensive.
    Random,
    /// Random lines at moderate MPKI.
    Mixed,
    /// Rare misses into a small footprint.
    Compute,
}

impl Synthetic {
    pub const ALL: [Synthetic; 4] = [Self::Stream, Self::Random, Self::Mixed, Self::Compute];

    pub fn name(self) -> &'static str {
        match self {
            Self::Stream => "stream",
            Self::Random => "random",
            Self::Mixed => "mixed",
            Self::Compute => "compute",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Mean non-memory instructions between accesses.
    fn mean_bubble(self) -> f64 {
        match self {
            Self::Stream => 15.0,
            Self::Random => 40.0,
            Self::Mixed => 120.0,
            Self::Compute => 2000.0,
        }
    }

    fn write_fraction(self) -> f64 {
        match self {
            Self::Stream => 0.2,
            Self::Random => 0.25,
            Self::Mixed => 0.2,
            Self::Compute => 0.1,
        }
    }

    /// `records` accesses for core `core` within `capacity` bytes.
    pub fn generate(self, records: usize, core: u32, seed: u64, capacity: u64) -> Trace {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(core as u64 + 1);
        let lines = capacity / LINE_BYTES;
        // Each core gets its own quarter of the address space.
        let region = (lines / 4).max(1);
        let base = (core as u64 % 4) * region;
        let footprint = match self {
            Self::Compute => region.min(1 << 14),
            _ => region,
        };
        let p = 1.0 / (self.mean_bubble() + 1.0);
        let geo = Geometric::new(p).expect("valid probability");
        let mut cursor = rng.random_range(0..footprint);
        (0..records)
            .map(|_| {
                let line = match self {
                    Self::Stream => {
                        cursor = (cursor + 1) % footprint;
                        cursor
                    }
                    _ => rng.random_range(0..footprint),
                };
                TraceRecord {
                    bubble: geo.sample(&mut rng),
                    addr: (base + line) * LINE_BYTES,
                    write: rng.random_bool(self.write_fraction()),
                }
            })
            .collect()
    }
}

/// Resolves `builtin:<name>[:<records>]` specs.
pub fn builtin_trace(spec: &str, core: u32, seed: u64, capacity: u64) -> Result<Option<Trace>> {
    let Some(rest) = spec.strip_prefix("builtin:") else {
        return Ok(None);
    };
    let mut parts = rest.splitn(2, ':');
    let name = parts.next().unwrap_or_default();
    let kind = Synthetic::from_name(name).ok_or_else(|| invalid(format!("unknown built-in trace '{name}'")))?;
    let records = match parts.next() {
        Some(n) => n.parse().map_err(|_| invalid(format!("bad record count in '{spec}'")))?,
        None => 100_000,
    };
    Ok(Some(kind.generate(records, core, seed, capacity)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_formats() {
        let t = parse_trace("# header\n3 0x40 R\n\n0 ff W\n").unwrap();
        assert_eq!(
            t,
            vec![
                TraceRecord { bubble: 3, addr: 0x40, write: false },
                TraceRecord { bubble: 0, addr: 0xff, write: true }
            ]
        );
        assert_eq!(parse_trace(&format_trace(&t)).unwrap(), t);
    }

    #[test]
    fn reports_line_numbers() {
        match parse_trace("1 0x0 R\n2 0xzz R\n") {
            Err(Error::TraceParse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_trace("1 0x0 X"), Err(Error::TraceParse { line: 1, .. })));
    }

    #[test]
    fn synthetic_is_deterministic_and_in_range() {
        let cap = 1u64 << 33;
        for k in Synthetic::ALL {
            let a = k.generate(500, 2, 9, cap);
            assert_eq!(a, k.generate(500, 2, 9, cap));
            assert!(a.iter().all(|r| r.addr < cap && r.addr % LINE_BYTES == 0));
        }
        assert_ne!(Synthetic::Random.generate(50, 0, 1, cap), Synthetic::Random.generate(50, 1, 1, cap));
    }

    #[test]
    fn builtin_specs() {
        let cap = 1u64 << 33;
        assert_eq!(builtin_trace("x.trace", 0, 0, cap).unwrap(), None);
        assert_eq!(builtin_trace("builtin:stream:10", 0, 0, cap).unwrap().unwrap().len(), 10);
        assert!(builtin_trace("builtin:nope", 0, 0, cap).is_err());
    }
}
