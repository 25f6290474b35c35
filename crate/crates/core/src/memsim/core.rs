//! Out-of-order core approximation: a bounded instruction window that
//! retires in order, with reads blocking retirement until their data return.

use std::collections::VecDeque;

use super::addr::{AddressMapper, Decoded};
use super::controller::{Controller, MemRequest};
use super::trace::TraceRecord;
use super::{CoreStats, IntervalCounters};
use crate::error::Result;

const PENDING: u64 = u64::MAX;

#[derive(Debug, Clone, Copy)]
enum Entry {
    Ready(u64),
    Read(usize),
}

#[derive(Debug)]
pub(super) struct Core {
    id: u32,
    records: Vec<(TraceRecord, Decoded)>,
    next: usize,
    bubble_left: u64,
    window: VecDeque<Entry>,
    in_window: u64,
    window_size: u64,
    width: u64,
    done: Vec<u64>,
    retired: u64,
    reads: u64,
    writes: u64,
    stall_cycles: u64,
    finish_cycle: Option<u64>,
    interval: IntervalCounters,
}

impl Core {
    pub fn new(id: u32, trace: &[TraceRecord], mapper: &AddressMapper, window: u32, width: u32) -> Result<Self> {
        let records = trace.iter().map(|r| Ok((*r, mapper.decode(r.addr)?))).collect::<Result<Vec<_>>>()?;
        let empty = records.is_empty();
        Ok(Self {
            id,
            bubble_left: records.first().map_or(0, |r| r.0.bubble),
            done: vec![PENDING; records.len()],
            records,
            next: 0,
            window: VecDeque::new(),
            in_window: 0,
            window_size: window as u64,
            width: width as u64,
            retired: 0,
            reads: 0,
            writes: 0,
            stall_cycles: 0,
            finish_cycle: empty.then_some(0),
            interval: IntervalCounters::default(),
        })
    }

    pub fn finished(&self) -> bool {
        self.finish_cycle.is_some()
    }

    fn drained(&self) -> bool {
        self.next == self.records.len() && self.bubble_left == 0 && self.window.is_empty()
    }

    /// Retires what cycle `cycle` (starting at `t` ps) can retire.
    pub fn retire(&mut self, t: u64, cycle: u64) {
        if self.finished() {
            return;
        }
        self.interval.active = true;
        let mut budget = self.width;
        while budget > 0 {
            match self.window.front_mut() {
                Some(Entry::Ready(n)) => {
                    let k = (*n).min(budget);
                    *n -= k;
                    budget -= k;
                    if *n == 0 {
                        self.window.pop_front();
                    }
                }
                Some(&mut Entry::Read(seq)) if self.done[seq] <= t => {
                    budget -= 1;
                    self.window.pop_front();
                }
                _ => break,
            }
        }
        let n = self.width - budget;
        self.retired += n;
        self.in_window -= n;
        self.interval.instructions += n;
        if n == 0 && matches!(self.window.front(), Some(Entry::Read(_))) {
            self.stall_cycles += 1;
            self.interval.stall_cycles += 1;
        }
        if self.drained() {
            self.finish_cycle = Some(cycle + 1);
        }
    }

    /// Fills the window, sending memory accesses to their channel.
    pub fn fetch(&mut self, ctrls: &mut [Controller]) {
        let mut budget = self.width.min(self.window_size - self.in_window);
        while budget > 0 {
            if self.bubble_left > 0 {
                let k = self.bubble_left.min(budget);
                match self.window.back_mut() {
                    Some(Entry::Ready(n)) => *n += k,
                    _ => self.window.push_back(Entry::Ready(k)),
                }
                self.bubble_left -= k;
                self.in_window += k;
                budget -= k;
                continue;
            }
            let Some(&(rec, d)) = self.records.get(self.next) else {
                break;
            };
            let ctrl = &mut ctrls[d.channel as usize];
            if !ctrl.can_accept(rec.write) {
                break;
            }
            ctrl.enqueue(MemRequest {
                core: self.id,
                seq: self.next as u64,
                write: rec.write,
                addr: rec.addr,
                bank: d.bank,
                row: d.row,
                column: d.column,
                arrival_ps: 0,
            });
            if rec.write {
                self.writes += 1;
                match self.window.back_mut() {
                    Some(Entry::Ready(n)) => *n += 1,
                    _ => self.window.push_back(Entry::Ready(1)),
                }
            } else {
                self.reads += 1;
                self.interval.read_misses += 1;
                self.window.push_back(Entry::Read(self.next));
            }
            self.in_window += 1;
            budget -= 1;
            self.next += 1;
            self.bubble_left = self.records.get(self.next).map_or(0, |r| r.0.bubble);
        }
    }

    pub fn complete(&mut self, seq: u64, done_ps: u64) {
        self.done[seq as usize] = done_ps;
    }

    /// Returns and resets the interval counters.
    pub fn take_interval(&mut self) -> IntervalCounters {
        let c = self.interval;
        self.interval = IntervalCounters { active: !self.finished(), ..Default::default() };
        c
    }

    pub fn stats(&self) -> CoreStats {
        let cycles = self.finish_cycle.unwrap_or(0);
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        CoreStats {
            instructions: self.retired,
            cycles,
            ipc: ratio(self.retired, cycles),
            reads: self.reads,
            writes: self.writes,
            mpki: 1000.0 * ratio(self.reads, self.retired),
            stall_cycles: self.stall_cycles,
            stall_fraction: ratio(self.stall_cycles, cycles),
        }
    }
}
