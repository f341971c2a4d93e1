//! The accelerator core: an address engine that computes pointer addresses
//! and context-switches between traversals, and an access engine that
//! translates and issues memory requests. The two engines alternate inside
//! one deterministic event loop; overlap between computation and in-flight
//! memory accesses is where the speedup comes from.

use serde::Serialize;
use std::collections::VecDeque;

use crate::error::{SimError, SimResult};
use crate::impica::cache::ImpicaCache;
use crate::impica::program::{MemoryImage, NextAction, StepCtx, TraversalProgram};
use crate::mem::{AccessKind, AccessRequest, Cycle, MemSystem, Requester};
use crate::rpt::{PimTlb, RegionPageTable};

/// Bytes of the CPU->accelerator launch packet payload (function id plus
/// parameters) and of the returned result packet payload.
pub const LAUNCH_PACKET_BYTES: u32 = 24;
pub const RESULT_PACKET_BYTES: u32 = 8;

#[derive(Debug, Clone, Serialize)]
pub struct ImpicaConfig {
    pub queue_capacity: usize,
    pub cache_bytes: u32,
    pub cache_ways: usize,
    pub data_ram_bytes: u32,
    pub context_bytes: u32,
    /// Loads per traversal that set the root bit.
    pub root_window: u32,
    pub cache_hit_latency: Cycle,
    pub tlb_entries: usize,
    /// Caps concurrent traversals below the data-RAM bound; `Some(1)` models
    /// a non-parallel accelerator.
    pub max_contexts_override: Option<usize>,
    pub stack: u8,
    pub trace: bool,
}

impl Default for ImpicaConfig {
    fn default() -> Self {
        ImpicaConfig {
            queue_capacity: 16,
            cache_bytes: 32 * 1024,
            cache_ways: 2,
            data_ram_bytes: 16 * 1024,
            context_bytes: 64,
            root_window: 2,
            cache_hit_latency: 1,
            tlb_entries: 32,
            max_contexts_override: None,
            stack: 0,
            trace: false,
        }
    }
}

impl ImpicaConfig {
    pub fn max_contexts(&self) -> usize {
        let by_ram = (self.data_ram_bytes / self.context_bytes) as usize;
        let cap = 16.min(by_ram);
        match self.max_contexts_override {
            Some(n) => n.min(cap),
            None => cap,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AddrAction {
    ExecutedCompute,
    IssuedLoad,
    ContextSwitched,
    EmittedResult,
    Idle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessAction {
    TranslatedAndIssued,
    HitInCache,
    StalledCacheFull,
    Idle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CtxState {
    WaitingMem,
    Done,
    Aborted,
}

#[derive(Debug)]
struct Context {
    request_id: u32,
    program_idx: usize,
    depth: u32,
    state: CtxState,
    start_time: Cycle,
    finish_time: Cycle,
    result: Option<u64>,
}

#[derive(Debug, Clone, Copy)]
struct AccessEntry {
    ctx: usize,
    va: u64,
    size: u32,
    ready: Cycle,
}

#[derive(Debug, Clone, Copy)]
struct ResponseEntry {
    ctx: usize,
    va: u64,
    size: u32,
}

#[derive(Debug, Clone, Copy)]
struct InFlight {
    time: Cycle,
    seq: u64,
    ctx: usize,
    va: u64,
    size: u32,
    root: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct TraversalResult {
    pub request_id: u32,
    pub result: u64,
    pub start_time: Cycle,
    pub finish_time: Cycle,
}

#[derive(Debug, Default, Clone, Serialize)]
pub struct EngineStats {
    pub makespan: Cycle,
    pub addr_busy_cycles: Cycle,
    pub loads_issued: u64,
    pub cache_hits: u64,
    pub lock_stalls: u64,
    pub tlb_hits: u64,
    pub tlb_misses: u64,
    pub walk_accesses: u64,
    pub context_switches: u64,
    pub leaked_locks: usize,
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TraceEvent {
    Access {
        t: Cycle,
        request_id: u32,
        va: u64,
        pa: u64,
        complete: Cycle,
        tlb_hit: bool,
        walk_len: usize,
    },
    CacheHit {
        t: Cycle,
        request_id: u32,
        va: u64,
    },
    LockStall {
        t: Cycle,
        request_id: u32,
        va: u64,
    },
    InsertAfterStall {
        t: Cycle,
        request_id: u32,
        va: u64,
    },
    Consume {
        t: Cycle,
        request_id: u32,
        va: u64,
    },
    Finish {
        t: Cycle,
        request_id: u32,
        evicted_lines: usize,
    },
}

pub struct ImpicaSim {
    pub cfg: ImpicaConfig,
    pub mem: MemSystem,
    pub rpt: RegionPageTable,
    pub tlb: PimTlb,
    pub image: MemoryImage,
    pub cache: ImpicaCache,
    now: Cycle,
    addr_free_at: Cycle,
    request_queue: VecDeque<(u32, usize)>, // (request_id, program_idx)
    access_queue: VecDeque<AccessEntry>,
    response_queue: VecDeque<ResponseEntry>,
    in_flight: Vec<InFlight>,
    blocked_inserts: VecDeque<InFlight>,
    contexts: Vec<Context>,
    active_contexts: usize,
    next_request_id: u32,
    seq: u64,
    programs: Vec<TraversalProgram>,
    stats: EngineStats,
    pub trace: Vec<TraceEvent>,
    faults: Vec<(u32, SimError)>,
}

impl ImpicaSim {
    pub fn new(
        cfg: ImpicaConfig,
        mem: MemSystem,
        rpt: RegionPageTable,
        image: MemoryImage,
    ) -> Self {
        let cache = ImpicaCache::new(cfg.cache_bytes, cfg.cache_ways, mem.config().line_size);
        let tlb = PimTlb::new(cfg.tlb_entries);
        ImpicaSim {
            cfg,
            mem,
            rpt,
            tlb,
            image,
            cache,
            now: 0,
            addr_free_at: 0,
            request_queue: VecDeque::new(),
            access_queue: VecDeque::new(),
            response_queue: VecDeque::new(),
            in_flight: Vec::new(),
            blocked_inserts: VecDeque::new(),
            contexts: Vec::new(),
            active_contexts: 0,
            next_request_id: 0,
            seq: 0,
            programs: Vec::new(),
            stats: EngineStats::default(),
            trace: Vec::new(),
            faults: Vec::new(),
        }
    }

    pub fn now(&self) -> Cycle {
        self.now
    }

    /// CPU-side launch: one packet over the off-chip interface, one request
    /// queue slot. Fails with backpressure when the queue is full.
    pub fn enqueue_traversal(&mut self, program: TraversalProgram) -> SimResult<u32> {
        if self.request_queue.len() >= self.cfg.queue_capacity {
            return Err(SimError::Backpressure);
        }
        let request_id = self.next_request_id;
        self.next_request_id += 1;
        self.mem.off_chip_message(LAUNCH_PACKET_BYTES, self.now);
        let program_idx = self.programs.len();
        self.programs.push(program);
        self.request_queue.push_back((request_id, program_idx));
        Ok(request_id)
    }

    fn emit_trace(&mut self, ev: TraceEvent) {
        if self.cfg.trace {
            self.trace.push(ev);
        }
    }

    /// Deliver due memory completions into the cache and response queue.
    fn deliver_responses(&mut self) -> bool {
        let mut progress = false;
        // retry inserts blocked on fully-locked sets first, in arrival order
        while let Some(&blocked) = self.blocked_inserts.front() {
            let rid = self.contexts[blocked.ctx].request_id;
            if self.response_queue.len() >= self.cfg.queue_capacity
                || self.cache.insert(blocked.va, rid, blocked.root).is_err()
            {
                break;
            }
            self.blocked_inserts.pop_front();
            self.emit_trace(TraceEvent::InsertAfterStall {
                t: self.now,
                request_id: rid,
                va: blocked.va,
            });
            self.response_queue.push_back(ResponseEntry {
                ctx: blocked.ctx,
                va: blocked.va,
                size: blocked.size,
            });
            progress = true;
        }
        loop {
            // earliest due completion, deterministic tie-break by seq
            let due = self
                .in_flight
                .iter()
                .enumerate()
                .filter(|(_, f)| f.time <= self.now)
                .min_by_key(|(_, f)| (f.time, f.seq))
                .map(|(i, _)| i);
            let Some(i) = due else { break };
            if self.response_queue.len() >= self.cfg.queue_capacity {
                break;
            }
            let f = self.in_flight.swap_remove(i);
            let rid = self.contexts[f.ctx].request_id;
            match self.cache.insert(f.va, rid, f.root) {
                Ok(()) => {
                    self.response_queue.push_back(ResponseEntry {
                        ctx: f.ctx,
                        va: f.va,
                        size: f.size,
                    });
                    progress = true;
                }
                Err(_) => {
                    self.stats.lock_stalls += 1;
                    self.emit_trace(TraceEvent::LockStall {
                        t: self.now,
                        request_id: rid,
                        va: f.va,
                    });
                    self.blocked_inserts.push_back(f);
                }
            }
        }
        progress
    }

    /// Pop one access-queue entry, translate it, and issue the data access.
    /// Stalls while a previous response is blocked on a fully-locked set.
    pub fn step_access_engine(&mut self) -> AccessAction {
        if !self.blocked_inserts.is_empty() {
            return AccessAction::StalledCacheFull;
        }
        let Some(&entry) = self.access_queue.front() else {
            return AccessAction::Idle;
        };
        if entry.ready > self.now {
            return AccessAction::Idle;
        }
        self.access_queue.pop_front();
        let rid = self.contexts[entry.ctx].request_id;
        let root = self.contexts[entry.ctx].depth < self.cfg.root_window;
        if self.cache.lookup(entry.va) {
            self.stats.cache_hits += 1;
            self.seq += 1;
            self.in_flight.push(InFlight {
                time: self.now + self.cfg.cache_hit_latency,
                seq: self.seq,
                ctx: entry.ctx,
                va: entry.va,
                size: entry.size,
                root,
            });
            self.emit_trace(TraceEvent::CacheHit {
                t: self.now,
                request_id: rid,
                va: entry.va,
            });
            return AccessAction::HitInCache;
        }
        let translation = self.rpt.translate_rpt(entry.va, Some(&mut self.tlb));
        let t = match translation {
            Ok(t) => t,
            Err(e) => {
                self.abort_traversal(entry.ctx, e);
                return AccessAction::TranslatedAndIssued;
            }
        };
        if t.tlb_hit {
            self.stats.tlb_hits += 1;
        } else {
            self.stats.tlb_misses += 1;
        }
        // walk accesses are serialized memory reads by the page walker
        let mut issue_at = self.now;
        for w in &t.walk {
            let c = self
                .mem
                .submit(AccessRequest {
                    requester: Requester::PageWalker {
                        stack: self.cfg.stack,
                    },
                    pa: w.table_pa,
                    kind: AccessKind::Read,
                    size_bytes: 8,
                    issue_time: issue_at,
                })
                .expect("walk access to mapped table");
            issue_at = c.complete_time;
            self.stats.walk_accesses += 1;
        }
        let completion = self
            .mem
            .submit(AccessRequest {
                requester: Requester::PimCore {
                    id: 0,
                    stack: self.cfg.stack,
                },
                pa: t.pa,
                kind: AccessKind::Read,
                size_bytes: entry.size,
                issue_time: issue_at,
            })
            .expect("data access to translated pa");
        self.stats.loads_issued += 1;
        self.seq += 1;
        self.in_flight.push(InFlight {
            time: completion.complete_time,
            seq: self.seq,
            ctx: entry.ctx,
            va: entry.va,
            size: entry.size,
            root,
        });
        self.emit_trace(TraceEvent::Access {
            t: self.now,
            request_id: rid,
            va: entry.va,
            pa: t.pa.0,
            complete: completion.complete_time,
            tlb_hit: t.tlb_hit,
            walk_len: t.walk.len(),
        });
        AccessAction::TranslatedAndIssued
    }

    fn abort_traversal(&mut self, ctx: usize, fault: SimError) {
        let rid = self.contexts[ctx].request_id;
        self.contexts[ctx].state = CtxState::Aborted;
        self.contexts[ctx].finish_time = self.now;
        self.active_contexts -= 1;
        self.cache.evict_request(rid);
        self.faults.push((rid, fault));
    }

    fn apply_action(&mut self, ctx: usize, action: NextAction, at: Cycle) {
        match action {
            NextAction::Load { va, size, cost } => {
                assert!(
                    self.access_queue.len() < self.cfg.queue_capacity,
                    "access queue overflow"
                );
                self.addr_free_at = at + cost;
                self.stats.addr_busy_cycles += cost;
                self.access_queue.push_back(AccessEntry {
                    ctx,
                    va,
                    size,
                    ready: at + cost,
                });
            }
            NextAction::Finish { result, cost } => {
                self.addr_free_at = at + cost;
                self.stats.addr_busy_cycles += cost;
                let c = &mut self.contexts[ctx];
                c.state = CtxState::Done;
                c.result = Some(result);
                c.finish_time = at + cost;
                let rid = c.request_id;
                self.active_contexts -= 1;
                let evicted = self.cache.evict_request(rid);
                self.mem.off_chip_message(RESULT_PACKET_BYTES, at + cost);
                self.emit_trace(TraceEvent::Finish {
                    t: at + cost,
                    request_id: rid,
                    evicted_lines: evicted,
                });
            }
        }
    }

    /// One address-engine action: consume a ready response, else start a
    /// waiting request, else idle. Never blocks on memory.
    pub fn step_address_engine(&mut self) -> AddrAction {
        if self.now < self.addr_free_at {
            return AddrAction::Idle;
        }
        if let Some(resp) = self.response_queue.pop_front() {
            self.cache.consume(resp.va);
            let rid = self.contexts[resp.ctx].request_id;
            self.emit_trace(TraceEvent::Consume {
                t: self.now,
                request_id: rid,
                va: resp.va,
            });
            self.contexts[resp.ctx].depth += 1;
            let depth = self.contexts[resp.ctx].depth;
            let data = self.image.read(resp.va, resp.size).to_vec();
            let program = &self.programs[self.contexts[resp.ctx].program_idx];
            let action = program.step(&StepCtx {
                last_va: resp.va,
                data: &data,
                depth,
            });
            self.stats.context_switches += 1;
            let finished = matches!(action, NextAction::Finish { .. });
            self.apply_action(resp.ctx, action, self.now);
            return if finished {
                AddrAction::EmittedResult
            } else {
                AddrAction::IssuedLoad
            };
        }
        if self.active_contexts < self.cfg.max_contexts() {
            if let Some((request_id, program_idx)) = self.request_queue.pop_front() {
                let ctx = self.contexts.len();
                self.contexts.push(Context {
                    request_id,
                    program_idx,
                    depth: 0,
                    state: CtxState::WaitingMem,
                    start_time: self.now,
                    finish_time: 0,
                    result: None,
                });
                self.active_contexts += 1;
                let start = self.programs[program_idx].start;
                match start {
                    NextAction::Load { .. } => self.apply_action(ctx, start, self.now),
                    NextAction::Finish { .. } => self.apply_action(ctx, start, self.now),
                }
                return AddrAction::ContextSwitched;
            }
        }
        AddrAction::Idle
    }

    fn next_event_time(&self) -> Option<Cycle> {
        let mut t: Option<Cycle> = None;
        let mut consider = |c: Cycle| {
            t = Some(t.map_or(c, |x: Cycle| x.min(c)));
        };
        if let Some(f) = self.in_flight.iter().map(|f| f.time).min() {
            consider(f.max(self.now + 1));
        }
        let addr_has_work = !self.response_queue.is_empty()
            || (!self.request_queue.is_empty() && self.active_contexts < self.cfg.max_contexts());
        if addr_has_work {
            consider(self.addr_free_at.max(self.now + 1));
        }
        if let Some(e) = self.access_queue.front() {
            consider(e.ready.max(self.now + 1));
        }
        t
    }

    fn drain(&mut self) {
        loop {
            let mut progress = false;
            progress |= self.deliver_responses();
            loop {
                match self.step_access_engine() {
                    AccessAction::Idle | AccessAction::StalledCacheFull => break,
                    _ => progress = true,
                }
            }
            loop {
                match self.step_address_engine() {
                    AddrAction::Idle => break,
                    _ => progress = true,
                }
            }
            if !progress {
                break;
            }
        }
    }

    fn all_done(&self) -> bool {
        self.request_queue.is_empty()
            && self.active_contexts == 0
            && self.in_flight.is_empty()
            && self.blocked_inserts.is_empty()
    }

    /// Run a batch of traversals to completion. The producer enqueues more
    /// work whenever the request queue has room (backpressure otherwise).
    pub fn run_traversals(
        &mut self,
        batch: Vec<TraversalProgram>,
    ) -> (Vec<TraversalResult>, EngineStats) {
        let mut pending: VecDeque<TraversalProgram> = batch.into();
        loop {
            while !pending.is_empty() && self.request_queue.len() < self.cfg.queue_capacity {
                let p = pending.pop_front().unwrap();
                self.enqueue_traversal(p).expect("queue slot checked");
            }
            self.drain();
            if pending.is_empty() && self.all_done() {
                break;
            }
            match self.next_event_time() {
                Some(t) => self.now = t,
                None => {
                    assert!(
                        !pending.is_empty(),
                        "engine deadlock: no pending events but work remains"
                    );
                    // queue was full and nothing is in flight: time advances
                    // with the address engine
                    self.now = self.addr_free_at.max(self.now + 1);
                }
            }
        }
        let mut results: Vec<TraversalResult> = self
            .contexts
            .iter()
            .filter(|c| c.state == CtxState::Done)
            .map(|c| TraversalResult {
                request_id: c.request_id,
                result: c.result.unwrap(),
                start_time: c.start_time,
                finish_time: c.finish_time,
            })
            .collect();
        results.sort_by_key(|r| r.request_id);
        let mut stats = self.stats.clone();
        stats.makespan = self
            .contexts
            .iter()
            .map(|c| c.finish_time)
            .max()
            .unwrap_or(0);
        stats.lock_stalls = self.cache.lock_stalls;
        stats.tlb_hits = self.tlb.hits;
        stats.tlb_misses = self.tlb.misses;
        stats.leaked_locks = self.cache.locked_lines();
        assert_eq!(stats.leaked_locks, 0, "leaked cache line locks");
        (results, stats)
    }

    pub fn faults(&self) -> &[(u32, SimError)] {
        &self.faults
    }
}
