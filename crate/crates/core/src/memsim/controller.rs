//! One channel's memory controller: an FR-FCFS scheduler over one rank.
//!
//! All constraint bookkeeping is in picoseconds so that it survives clock
//! changes. When the operating point changes, every constraint that follows
//! from an already issued command is re-derived with the new timings and
//! the later of the old and new deadlines is kept.

use serde::{Deserialize, Serialize};

use super::config::DeviceTimings;
use crate::power::CommandCounts;
use crate::timing::{ns_to_cycles, TimingParams, VoltageOperatingPoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Command {
    #[serde(rename = "ACT")]
    Act,
    #[serde(rename = "PRE")]
    Pre,
    #[serde(rename = "RD")]
    Rd,
    #[serde(rename = "WR")]
    Wr,
    #[serde(rename = "REF")]
    Ref,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::Act => "ACT",
            Command::Pre => "PRE",
            Command::Rd => "RD",
            Command::Wr => "WR",
            Command::Ref => "REF",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Command::Act, Command::Pre, Command::Rd, Command::Wr, Command::Ref].into_iter().find(|c| c.as_str() == s)
    }
}

/// A cache-line request waiting in a controller queue.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemRequest {
    pub core: u32,
    /// Per-core read sequence number; unused for writes.
    pub seq: u64,
    pub write: bool,
    pub addr: u64,
    pub bank: u32,
    pub row: u32,
    pub column: u32,
    /// First controller tick at which the request could be scheduled (ps).
    pub arrival_ps: u64,
}

/// One issued command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Issued {
    pub time_ps: u64,
    pub tick: u64,
    pub channel: u32,
    pub cmd: Command,
    /// Unused (0) for REF.
    pub bank: u32,
    pub row: u32,
    /// For reads: the request and the time its data burst ends.
    pub served: Option<(MemRequest, u64)>,
}

/// Per-bank latencies in clock cycles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BankTiming {
    pub rcd: u64,
    pub rp: u64,
    pub ras: u64,
    pub rtp: u64,
    /// WR to PRE: tCWL + burst + tWR.
    pub wrp: u64,
}

/// Rank-wide latencies in clock cycles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankTiming {
    pub cl: u64,
    pub cwl: u64,
    pub burst: u64,
    pub ccd: u64,
    pub rrd: u64,
    /// WR to RD: tCWL + burst + tWTR.
    pub wtr_gap: u64,
    /// RD to WR: tCL + burst + 2 - tCWL.
    pub rtw_gap: u64,
    pub rfc: u64,
}

/// An operating point resolved to per-bank cycle counts.
#[derive(Debug, Clone, PartialEq)]
pub struct OpState {
    pub op: VoltageOperatingPoint,
    /// Banks `0..slow_banks` use the operating point's timings; the rest use
    /// nominal timings at the same clock.
    pub slow_banks: u32,
    pub tck: u64,
    pub bank: Vec<BankTiming>,
    pub rank: RankTiming,
}

impl OpState {
    pub fn new(op: VoltageOperatingPoint, slow_banks: u32, banks: u32, dev: &DeviceTimings) -> Self {
        let tck = op.channel_rate.t_ck_ps();
        let t_ck_ns = tck as f64 / 1000.0;
        let cyc = |ns: f64| ns_to_cycles(ns, t_ck_ns) as u64;
        let fast = TimingParams::nominal().retimed(t_ck_ns);
        let rank = RankTiming {
            cl: op.timings.cl as u64,
            cwl: op.timings.cwl as u64,
            burst: dev.burst_cycles as u64,
            ccd: dev.t_ccd_cycles as u64,
            rrd: cyc(dev.t_rrd_ns),
            wtr_gap: op.timings.cwl as u64 + dev.burst_cycles as u64 + cyc(dev.t_wtr_ns),
            rtw_gap: (op.timings.cl as u64 + dev.burst_cycles as u64 + 2).saturating_sub(op.timings.cwl as u64).max(1),
            rfc: cyc(dev.t_rfc_ns),
        };
        let bank = (0..banks)
            .map(|b| {
                let t = if b < slow_banks { &op.timings } else { &fast };
                BankTiming {
                    rcd: t.rcd as u64,
                    rp: t.rp as u64,
                    ras: t.ras as u64,
                    rtp: cyc(dev.t_rtp_ns),
                    wrp: rank.cwl + rank.burst + cyc(dev.t_wr_ns),
                }
            })
            .collect();
        Self { op, slow_banks, tck, bank, rank }
    }

    fn max_of(&self, f: impl Fn(&BankTiming) -> u64) -> u64 {
        self.bank.iter().map(f).max().unwrap_or(0)
    }

    /// How long before a refresh deadline ACT, RD and WR must stop so that
    /// every bank can be closed in time.
    fn refresh_margins(&self) -> (u64, u64, u64) {
        let n = self.bank.len() as u64;
        let rp = self.max_of(|b| b.rp);
        let m = |x: u64| (x + rp + n + 1) * self.tck;
        (m(self.max_of(|b| b.ras)), m(self.max_of(|b| b.rtp)), m(self.max_of(|b| b.wrp)))
    }

    fn guard(&self) -> u64 {
        let (a, r, w) = self.refresh_margins();
        a.max(r).max(w)
    }
}

#[derive(Debug, Clone, Default)]
struct Bank {
    open_row: Option<u32>,
    next_act: u64,
    next_pre: u64,
    next_rd: u64,
    next_wr: u64,
    last_act: Option<u64>,
    last_pre: Option<u64>,
    last_rd: Option<u64>,
    last_wr: Option<u64>,
}

#[derive(Debug, Clone, Default)]
struct Rank {
    next_act: u64,
    next_rd: u64,
    next_wr: u64,
    last_act: Option<u64>,
    last_rd: Option<u64>,
    last_wr: Option<u64>,
    last_ref: Option<u64>,
    ref_busy_until: u64,
    bus_free: u64,
}

/// An operating-point stretch of one channel, with its command counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpSegment {
    pub start_ps: u64,
    pub end_ps: u64,
    pub op: VoltageOperatingPoint,
    pub slow_banks: u32,
    pub counts: CommandCounts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueueConfig {
    pub read_capacity: usize,
    pub write_capacity: usize,
    pub write_high: usize,
    pub write_low: usize,
}

#[derive(Debug, Clone)]
pub struct Controller {
    pub channel: u32,
    dev: DeviceTimings,
    queues: QueueConfig,
    state: OpState,
    pending: Option<(VoltageOperatingPoint, u32)>,
    banks: Vec<Bank>,
    rank: Rank,
    read_q: Vec<MemRequest>,
    write_q: Vec<MemRequest>,
    draining: bool,
    next_tick: u64,
    tick_index: u64,
    next_ref_due: u64,
    t_refi: u64,
    late_refreshes: u64,
    bus_busy_ps: u64,
    history: Vec<OpSegment>,
}

fn align_up(t: u64, tck: u64) -> u64 {
    t.div_ceil(tck) * tck
}

impl Controller {
    pub fn new(
        channel: u32,
        banks: u32,
        dev: DeviceTimings,
        queues: QueueConfig,
        op: VoltageOperatingPoint,
        slow_banks: u32,
    ) -> Self {
        let state = OpState::new(op, slow_banks, banks, &dev);
        let t_refi = (dev.t_refi_ns * 1000.0).round() as u64;
        Self {
            channel,
            dev,
            queues,
            history: vec![OpSegment { start_ps: 0, end_ps: 0, op, slow_banks, counts: CommandCounts::default() }],
            state,
            pending: None,
            banks: vec![Bank::default(); banks as usize],
            rank: Rank::default(),
            read_q: Vec::new(),
            write_q: Vec::new(),
            draining: false,
            next_tick: 0,
            tick_index: 0,
            next_ref_due: t_refi,
            t_refi,
            late_refreshes: 0,
            bus_busy_ps: 0,
        }
    }

    pub fn op_state(&self) -> &OpState {
        &self.state
    }

    pub fn next_tick(&self) -> u64 {
        self.next_tick
    }

    pub fn late_refreshes(&self) -> u64 {
        self.late_refreshes
    }

    /// Data-bus busy time so far.
    pub fn bus_busy_ps(&self) -> u64 {
        self.bus_busy_ps
    }

    pub fn can_accept(&self, write: bool) -> bool {
        if write {
            self.write_q.len() < self.queues.write_capacity
        } else {
            self.read_q.len() < self.queues.read_capacity
        }
    }

    pub fn queued(&self) -> (usize, usize) {
        (self.read_q.len(), self.write_q.len())
    }

    pub fn idle(&self) -> bool {
        self.read_q.is_empty() && self.write_q.is_empty()
    }

    /// Adds a request; its arrival is the next controller tick.
    pub fn enqueue(&mut self, mut req: MemRequest) -> MemRequest {
        req.arrival_ps = self.next_tick;
        if req.write {
            self.write_q.push(req);
        } else {
            self.read_q.push(req);
        }
        req
    }

    /// Requests an operating-point change, applied at the first tick that is
    /// clear of a refresh.
    pub fn request_op(&mut self, op: VoltageOperatingPoint, slow_banks: u32) {
        if op == self.state.op && slow_banks == self.state.slow_banks {
            self.pending = None;
        } else {
            self.pending = Some((op, slow_banks));
        }
    }

    /// Closes the history at `end_ps` and returns it.
    pub fn finish(&mut self, end_ps: u64) -> Vec<OpSegment> {
        let mut h = self.history.clone();
        if let Some(last) = h.last_mut() {
            last.end_ps = end_ps;
        }
        h
    }

    fn counts(&mut self) -> &mut CommandCounts {
        &mut self.history.last_mut().expect("history is never empty").counts
    }

    fn try_apply_pending(&mut self, t: u64) -> bool {
        let Some((op, slow)) = self.pending else {
            return false;
        };
        let new = OpState::new(op, slow, self.banks.len() as u32, &self.dev);
        let guard = new.guard().max(self.state.guard());
        if t < self.rank.ref_busy_until || t + guard > self.next_ref_due {
            return false;
        }
        self.pending = None;
        self.fold(&new);
        self.state = new;
        let seg = self.history.last_mut().expect("history is never empty");
        if seg.start_ps == t {
            seg.op = op;
            seg.slow_banks = slow;
        } else {
            seg.end_ps = t;
            self.history.push(OpSegment {
                start_ps: t,
                end_ps: t,
                op,
                slow_banks: slow,
                counts: CommandCounts::default(),
            });
        }
        true
    }

    /// Re-derives every outstanding constraint under `s`.
    fn fold(&mut self, s: &OpState) {
        let tck = s.tck;
        for (b, bank) in self.banks.iter_mut().enumerate() {
            let bt = &s.bank[b];
            if let Some(a) = bank.last_act {
                bank.next_rd = bank.next_rd.max(a + bt.rcd * tck);
                bank.next_wr = bank.next_wr.max(a + bt.rcd * tck);
                bank.next_pre = bank.next_pre.max(a + bt.ras * tck);
            }
            if let Some(p) = bank.last_pre {
                bank.next_act = bank.next_act.max(p + bt.rp * tck);
            }
            if let Some(r) = bank.last_rd {
                bank.next_pre = bank.next_pre.max(r + bt.rtp * tck);
            }
            if let Some(w) = bank.last_wr {
                bank.next_pre = bank.next_pre.max(w + bt.wrp * tck);
            }
            if let Some(f) = self.rank.last_ref {
                bank.next_act = bank.next_act.max(f + s.rank.rfc * tck);
            }
        }
        let rt = &s.rank;
        let r = &mut self.rank;
        if let Some(a) = r.last_act {
            r.next_act = r.next_act.max(a + rt.rrd * tck);
        }
        if let Some(x) = r.last_rd {
            r.next_rd = r.next_rd.max(x + rt.ccd * tck);
            r.next_wr = r.next_wr.max(x + rt.rtw_gap * tck);
        }
        if let Some(x) = r.last_wr {
            r.next_wr = r.next_wr.max(x + rt.ccd * tck);
            r.next_rd = r.next_rd.max(x + rt.wtr_gap * tck);
        }
        if let Some(f) = r.last_ref {
            r.ref_busy_until = r.ref_busy_until.max(f + rt.rfc * tck);
        }
    }

    fn act_ok(&self, b: usize, t: u64) -> bool {
        let (act_m, _, _) = self.state.refresh_margins();
        let bank = &self.banks[b];
        bank.open_row.is_none()
            && t >= bank.next_act
            && t >= self.rank.next_act
            && t >= self.rank.ref_busy_until
            && t + act_m <= self.next_ref_due
    }

    fn pre_ok(&self, b: usize, t: u64) -> bool {
        let bank = &self.banks[b];
        bank.open_row.is_some() && t >= bank.next_pre
    }

    fn col_ok(&self, req: &MemRequest, t: u64) -> bool {
        let bank = &self.banks[req.bank as usize];
        if bank.open_row != Some(req.row) {
            return false;
        }
        let (_, rd_m, wr_m) = self.state.refresh_margins();
        let rt = &self.state.rank;
        if req.write {
            t >= bank.next_wr
                && t >= self.rank.next_wr
                && t + rt.cwl * self.state.tck >= self.rank.bus_free
                && t + wr_m <= self.next_ref_due
        } else {
            t >= bank.next_rd
                && t >= self.rank.next_rd
                && t + rt.cl * self.state.tck >= self.rank.bus_free
                && t + rd_m <= self.next_ref_due
        }
    }

    /// Runs the controller tick at `next_tick` and advances to the next one.
    pub fn tick(&mut self) -> Option<Issued> {
        let t = self.next_tick;
        let out = self.schedule_step(t);
        let tck = self.state.tck;
        let next = align_up(t + 1, tck);
        self.tick_index += (next - t).div_ceil(tck);
        self.next_tick = next;
        out
    }

    /// Skips ticks up to (not including) `until` when nothing can happen
    /// before then. Returns whether anything was skipped.
    pub fn skip_idle(&mut self, until: u64) -> bool {
        if !self.idle() || self.pending.is_some() {
            return false;
        }
        // Ticks must resume before the refresh lookahead starts closing banks.
        let window = self.next_ref_due.saturating_sub(self.state.guard() + self.state.tck);
        let target = align_up(until.min(window), self.state.tck);
        if target <= self.next_tick {
            return false;
        }
        self.tick_index += (target - self.next_tick) / self.state.tck;
        self.next_tick = target;
        true
    }

    /// One FR-FCFS scheduling decision at time `t`.
    pub fn schedule_step(&mut self, t: u64) -> Option<Issued> {
        if self.try_apply_pending(t) && t % self.state.tck != 0 {
            return None;
        }

        if t >= self.next_ref_due {
            let ready = self.banks.iter().enumerate().all(|(b, bank)| {
                bank.open_row.is_none() && bank.last_pre.is_none_or(|p| t >= p + self.state.bank[b].rp * self.state.tck)
            }) && t >= self.rank.ref_busy_until;
            if ready {
                return Some(self.issue_ref(t));
            }
        }

        if self.write_q.len() >= self.queues.write_high {
            self.draining = true;
        } else if self.write_q.len() <= self.queues.write_low {
            self.draining = false;
        }
        let use_writes = !self.write_q.is_empty() && (self.draining || self.read_q.is_empty());
        let q = if use_writes { &self.write_q } else { &self.read_q };

        // First ready: the oldest row hit whose column command can go now.
        if let Some(i) = q.iter().position(|r| self.col_ok(r, t)) {
            return Some(self.issue_column(use_writes, i, t));
        }

        // Otherwise the oldest request whose next command can go now.
        let mut choice = None;
        for r in q.iter() {
            let b = r.bank as usize;
            match self.banks[b].open_row {
                None if self.act_ok(b, t) => {
                    choice = Some((Command::Act, r.bank, r.row));
                    break;
                }
                Some(open) if open != r.row && self.pre_ok(b, t) => {
                    let hits_pending = q.iter().any(|o| o.bank == r.bank && o.row == open);
                    if !hits_pending {
                        choice = Some((Command::Pre, r.bank, open));
                        break;
                    }
                }
                _ => {}
            }
        }
        if let Some((cmd, bank, row)) = choice {
            return Some(self.issue_row(cmd, bank, row, t));
        }

        // Close banks ahead of a refresh once new activations are blocked.
        let (act_m, _, _) = self.state.refresh_margins();
        if t + act_m > self.next_ref_due {
            if let Some(b) = (0..self.banks.len()).find(|&b| self.pre_ok(b, t)) {
                let row = self.banks[b].open_row.expect("open bank");
                return Some(self.issue_row(Command::Pre, b as u32, row, t));
            }
        }
        None
    }

    fn record(&self, t: u64, cmd: Command, bank: u32, row: u32, served: Option<(MemRequest, u64)>) -> Issued {
        Issued { time_ps: t, tick: self.tick_index, channel: self.channel, cmd, bank, row, served }
    }

    fn issue_ref(&mut self, t: u64) -> Issued {
        if t > self.next_ref_due {
            self.late_refreshes += 1;
        }
        let rfc = self.state.rank.rfc * self.state.tck;
        for bank in &mut self.banks {
            bank.next_act = bank.next_act.max(t + rfc);
        }
        self.rank.last_ref = Some(t);
        self.rank.ref_busy_until = t + rfc;
        self.next_ref_due += self.t_refi;
        self.counts().refresh += 1;
        self.record(t, Command::Ref, 0, 0, None)
    }

    fn issue_row(&mut self, cmd: Command, b: u32, row: u32, t: u64) -> Issued {
        let tck = self.state.tck;
        let bt = self.state.bank[b as usize];
        let bank = &mut self.banks[b as usize];
        match cmd {
            Command::Act => {
                bank.open_row = Some(row);
                bank.next_rd = bank.next_rd.max(t + bt.rcd * tck);
                bank.next_wr = bank.next_wr.max(t + bt.rcd * tck);
                bank.next_pre = bank.next_pre.max(t + bt.ras * tck);
                bank.last_act = Some(t);
                self.rank.next_act = self.rank.next_act.max(t + self.state.rank.rrd * tck);
                self.rank.last_act = Some(t);
                self.counts().act += 1;
            }
            Command::Pre => {
                bank.open_row = None;
                bank.next_act = bank.next_act.max(t + bt.rp * tck);
                bank.last_pre = Some(t);
                self.counts().pre += 1;
            }
            _ => unreachable!("row command"),
        }
        self.record(t, cmd, b, row, None)
    }

    fn issue_column(&mut self, write: bool, i: usize, t: u64) -> Issued {
        let req = if write { self.write_q.remove(i) } else { self.read_q.remove(i) };
        let tck = self.state.tck;
        let rt = self.state.rank;
        let bt = self.state.bank[req.bank as usize];
        let bank = &mut self.banks[req.bank as usize];
        let r = &mut self.rank;
        let burst = rt.burst * tck;
        let (cmd, served) = if write {
            bank.next_pre = bank.next_pre.max(t + bt.wrp * tck);
            bank.last_wr = Some(t);
            r.next_wr = r.next_wr.max(t + rt.ccd * tck);
            r.next_rd = r.next_rd.max(t + rt.wtr_gap * tck);
            r.last_wr = Some(t);
            r.bus_free = t + rt.cwl * tck + burst;
            (Command::Wr, None)
        } else {
            bank.next_pre = bank.next_pre.max(t + bt.rtp * tck);
            bank.last_rd = Some(t);
            r.next_rd = r.next_rd.max(t + rt.ccd * tck);
            r.next_wr = r.next_wr.max(t + rt.rtw_gap * tck);
            r.last_rd = Some(t);
            r.bus_free = t + rt.cl * tck + burst;
            (Command::Rd, Some((req, r.bus_free)))
        };
        self.bus_busy_ps += burst;
        if write {
            self.counts().wr += 1;
        } else {
            self.counts().rd += 1;
        }
        self.record(t, cmd, req.bank, req.row, served)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn controller() -> Controller {
        let q = QueueConfig { read_capacity: 64, write_capacity: 64, write_high: 32, write_low: 16 };
        Controller::new(0, 8, DeviceTimings::default(), q, VoltageOperatingPoint::nominal(), 8)
    }

    fn req(seq: u64, write: bool, bank: u32, row: u32) -> MemRequest {
        MemRequest { core: 0, seq, write, addr: 0, bank, row, column: 0, arrival_ps: 0 }
    }

    /// Ticks until a command issues.
    fn next_cmd(c: &mut Controller) -> Issued {
        for _ in 0..10_000 {
            if let Some(i) = c.tick() {
                return i;
            }
        }
        panic!("nothing issued");
    }

    #[test]
    fn row_hit_beats_older_miss() {
        let mut c = controller();
        c.enqueue(req(0, false, 0, 5));
        assert_eq!(next_cmd(&mut c).cmd, Command::Act);
        let first = next_cmd(&mut c);
        assert_eq!((first.cmd, first.row), (Command::Rd, 5));
        // Bank 0 has row 5 open. An older miss to row 9 and a younger hit.
        c.enqueue(req(1, false, 0, 9));
        c.enqueue(req(2, false, 0, 5));
        let i = next_cmd(&mut c);
        assert_eq!((i.cmd, i.served.unwrap().0.seq), (Command::Rd, 2));
        assert_eq!(next_cmd(&mut c).cmd, Command::Pre);
    }

    #[test]
    fn oldest_hit_first() {
        let mut c = controller();
        c.enqueue(req(0, false, 3, 1));
        next_cmd(&mut c);
        next_cmd(&mut c);
        c.enqueue(req(7, false, 3, 1));
        c.enqueue(req(8, false, 3, 1));
        assert_eq!(next_cmd(&mut c).served.unwrap().0.seq, 7);
        assert_eq!(next_cmd(&mut c).served.unwrap().0.seq, 8);
    }

    #[test]
    fn drain_mode_serves_writes() {
        let mut c = controller();
        for i in 0..32 {
            c.enqueue(req(i, true, 1, 2));
        }
        c.enqueue(req(100, false, 0, 0));
        let first = next_cmd(&mut c);
        assert_eq!((first.cmd, first.bank), (Command::Act, 1));
        assert_eq!(next_cmd(&mut c).cmd, Command::Wr);
    }

    #[test]
    fn reads_first_below_watermark() {
        let mut c = controller();
        for i in 0..31 {
            c.enqueue(req(i, true, 1, 2));
        }
        c.enqueue(req(100, false, 0, 0));
        assert_eq!(next_cmd(&mut c).bank, 0);
    }

    #[test]
    fn refresh_lands_on_schedule() {
        let mut c = controller();
        let mut refs = Vec::new();
        let mut seq = 0;
        while c.next_tick() < 40_000_000 {
            if c.can_accept(false) && seq % 3 == 0 {
                c.enqueue(req(seq, false, (seq % 8) as u32, (seq % 97) as u32));
            }
            seq += 1;
            if let Some(i) = c.tick() {
                if i.cmd == Command::Ref {
                    refs.push(i.time_ps);
                }
            }
        }
        assert_eq!(refs, vec![7_800_000, 15_600_000, 23_400_000, 31_200_000, 39_000_000]);
        assert_eq!(c.late_refreshes(), 0);
    }
}
