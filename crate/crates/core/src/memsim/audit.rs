//! Independent check of a command log against the timing rules in force
//! when each command was issued.
//!
//! A gap between two commands must satisfy the rule under the operating
//! point of both commands.

use serde::{Deserialize, Serialize};

use super::config::DeviceTimings;
use super::controller::{Command, OpSegment, OpState};
use super::CommandRecord;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub channel: u32,
    pub time_ps: u64,
    pub cmd: Command,
    pub bank: u32,
    pub rule: String,
}

#[derive(Default, Clone, Copy)]
struct Last {
    t: u64,
    seg: usize,
}

#[derive(Default, Clone)]
struct BankLog {
    open: Option<u32>,
    act: Option<Last>,
    pre: Option<Last>,
    rd: Option<Last>,
    wr: Option<Last>,
}

/// Checks the commands of every channel. `history` holds each channel's
/// operating-point segments and `runtime_ps` the end of the run.
pub fn audit(
    commands: &[CommandRecord],
    history: &[Vec<OpSegment>],
    banks: u32,
    dev: &DeviceTimings,
    runtime_ps: u64,
) -> Vec<Violation> {
    let mut out = Vec::new();
    for (ch, segs) in history.iter().enumerate() {
        let cmds: Vec<&CommandRecord> = commands.iter().filter(|c| c.channel == ch as u32).collect();
        audit_channel(ch as u32, &cmds, segs, banks, dev, runtime_ps, &mut out);
    }
    out
}

fn audit_channel(
    ch: u32,
    cmds: &[&CommandRecord],
    segs: &[OpSegment],
    banks: u32,
    dev: &DeviceTimings,
    runtime_ps: u64,
    out: &mut Vec<Violation>,
) {
    let states: Vec<OpState> = segs.iter().map(|s| OpState::new(s.op, s.slow_banks, banks, dev)).collect();
    let seg_at = |t: u64| segs.iter().rposition(|s| s.start_ps <= t).unwrap_or(0);
    let t_refi = (dev.t_refi_ns * 1000.0).round() as u64;

    let mut bank = vec![BankLog::default(); banks as usize];
    let mut last_act: Option<Last> = None;
    let mut last_rd: Option<Last> = None;
    let mut last_wr: Option<Last> = None;
    let mut last_ref: Option<Last> = None;
    let mut bus_free = 0u64;
    let mut refs = 0u64;
    let mut prev_t = 0u64;

    for c in cmds {
        let t = c.time_ps;
        let s = seg_at(t);
        let mut fail = |rule: &str| {
            out.push(Violation { channel: ch, time_ps: t, cmd: c.cmd, bank: c.bank, rule: rule.to_string() })
        };
        if t < prev_t {
            fail("command log out of order");
        }
        prev_t = t;
        // Earliest time allowed after `from` under the rule `gap`, in cycles.
        let after = |from: Option<Last>, gap: &dyn Fn(&OpState) -> u64| -> u64 {
            from.map_or(0, |l| {
                let a = &states[l.seg];
                let b = &states[s];
                (l.t + gap(a) * a.tck).max(l.t + gap(b) * b.tck)
            })
        };
        let b = c.bank as usize;
        if c.cmd != Command::Ref && b >= bank.len() {
            fail("bank out of range");
            continue;
        }
        match c.cmd {
            Command::Act => {
                if bank[b].open.is_some() {
                    fail("ACT to an open bank");
                }
                if t < after(bank[b].pre, &|st| st.bank[b].rp) {
                    fail("tRP");
                }
                if t < after(last_ref, &|st| st.rank.rfc) {
                    fail("tRFC");
                }
                if t < after(last_act, &|st| st.rank.rrd) {
                    fail("tRRD");
                }
                bank[b].open = Some(c.row);
                bank[b].act = Some(Last { t, seg: s });
                last_act = Some(Last { t, seg: s });
            }
            Command::Pre => {
                if bank[b].open.is_none() {
                    fail("PRE to a closed bank");
                }
                if t < after(bank[b].act, &|st| st.bank[b].ras) {
                    fail("tRAS");
                }
                if t < after(bank[b].rd, &|st| st.bank[b].rtp) {
                    fail("tRTP");
                }
                if t < after(bank[b].wr, &|st| st.bank[b].wrp) {
                    fail("tWR");
                }
                bank[b].open = None;
                bank[b].pre = Some(Last { t, seg: s });
            }
            Command::Rd | Command::Wr => {
                let write = c.cmd == Command::Wr;
                if bank[b].open != Some(c.row) {
                    fail("column command to a row that is not open");
                }
                if t < after(bank[b].act, &|st| st.bank[b].rcd) {
                    fail("tRCD");
                }
                let same = if write { last_wr } else { last_rd };
                if t < after(same, &|st| st.rank.ccd) {
                    fail("tCCD");
                }
                if write && t < after(last_rd, &|st| st.rank.rtw_gap) {
                    fail("read-to-write turnaround");
                }
                if !write && t < after(last_wr, &|st| st.rank.wtr_gap) {
                    fail("tWTR");
                }
                let st = &states[s];
                let lat = if write { st.rank.cwl } else { st.rank.cl };
                let start = t + lat * st.tck;
                if start < bus_free {
                    fail("data bus overlap");
                }
                bus_free = start + st.rank.burst * st.tck;
                let l = Some(Last { t, seg: s });
                if write {
                    bank[b].wr = l;
                    last_wr = l;
                } else {
                    bank[b].rd = l;
                    last_rd = l;
                }
            }
            Command::Ref => {
                if bank.iter().any(|x| x.open.is_some()) {
                    fail("REF with an open bank");
                }
                for (i, x) in bank.iter().enumerate() {
                    if t < after(x.pre, &|st| st.bank[i].rp) {
                        fail("tRP before REF");
                        break;
                    }
                }
                if t < after(last_ref, &|st| st.rank.rfc) {
                    fail("tRFC");
                }
                refs += 1;
                if t != refs * t_refi {
                    fail("REF not at its due time");
                }
                last_ref = Some(Last { t, seg: s });
            }
        }
    }
    let due = if t_refi == 0 { 0 } else { runtime_ps.saturating_sub(1) / t_refi };
    if refs != due {
        out.push(Violation {
            channel: ch,
            time_ps: runtime_ps,
            cmd: Command::Ref,
            bank: 0,
            rule: format!("{refs} refreshes issued, {due} due"),
        });
    }
}
