//! Memory hierarchy timing and traffic accounting.
//!
//! Models the off-chip channel between the CPU and the stacked memory, the
//! internal TSV path used by in-memory compute, and multi-stack placement.
//! Timing is a fixed per-class latency plus a per-channel bandwidth token
//! bucket; DRAM banks and rows are not timed.

use serde::Serialize;
use std::collections::BTreeMap;

use crate::error::{SimError, SimResult};

pub type Cycle = u64;

pub const LINE_SIZE: u32 = 64;
/// Fixed cost of one off-chip request or coherence message header.
pub const HEADER_BYTES: u32 = 8;

/// Physical address layout: {stack:4 @ bits 44..48, bank:4 @ bits 10..14,
/// vault:4 @ bits 6..10, line offset @ bits 0..6}. Vault bits sit directly
/// above the line offset so consecutive lines interleave across vaults.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct PhysAddr(pub u64);

pub const STACK_SHIFT: u32 = 44;

impl PhysAddr {
    pub fn with_stack(local: u64, stack: u8) -> Self {
        debug_assert!(local < 1 << STACK_SHIFT);
        PhysAddr(((stack as u64) << STACK_SHIFT) | local)
    }

    pub fn stack(self) -> u8 {
        ((self.0 >> STACK_SHIFT) & 0xf) as u8
    }

    pub fn vault(self) -> u8 {
        ((self.0 >> 6) & 0xf) as u8
    }

    pub fn bank(self) -> u8 {
        ((self.0 >> 10) & 0xf) as u8
    }

    pub fn line(self) -> u64 {
        self.0 >> 6
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VirtAddr(pub u64);

impl VirtAddr {
    pub fn checked(va: u64) -> SimResult<Self> {
        if va >= 1 << 48 {
            return Err(SimError::NonCanonicalVa(va));
        }
        Ok(VirtAddr(va))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Requester {
    CpuCore(u32),
    PimCore { id: u32, stack: u8 },
    PageWalker { stack: u8 },
}

impl Requester {
    /// Stack the requester sits on; CPU-side requesters have none.
    pub fn stack(self) -> Option<u8> {
        match self {
            Requester::CpuCore(_) => None,
            Requester::PimCore { stack, .. } | Requester::PageWalker { stack } => Some(stack),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessKind {
    Read,
    Write,
}

#[derive(Debug, Clone, Copy)]
pub struct AccessRequest {
    pub requester: Requester,
    pub pa: PhysAddr,
    pub kind: AccessKind,
    pub size_bytes: u32,
    pub issue_time: Cycle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Completion {
    pub complete_time: Cycle,
    pub bytes_moved: u64,
    pub off_chip: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct TimingConfig {
    pub cpu_dram_latency: Cycle,
    pub pim_dram_latency: Cycle,
    /// Off-chip channel bandwidth, bytes per cycle.
    pub cpu_channel_bw: u64,
    /// Internal TSV bandwidth per stack, bytes per cycle.
    pub pim_internal_bw: u64,
    pub line_size: u32,
}

impl Default for TimingConfig {
    fn default() -> Self {
        // 130 / 200 = 0.65, the midpoint of the 60-70% internal-access band.
        // Internal bandwidth is 4x the external channel.
        TimingConfig {
            cpu_dram_latency: 200,
            pim_dram_latency: 130,
            cpu_channel_bw: 8,
            pim_internal_bw: 32,
            line_size: LINE_SIZE,
        }
    }
}

impl TimingConfig {
    pub fn validate(&self) -> SimResult<()> {
        if self.cpu_channel_bw == 0 || self.pim_internal_bw == 0 {
            return Err(SimError::Config(
                "channel bandwidth must be non-zero".into(),
            ));
        }
        if self.line_size == 0 {
            return Err(SimError::Config("line size must be non-zero".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Default, Clone)]
struct Channel {
    free_at: Cycle,
}

impl Channel {
    /// Reserve a transfer of `bytes` starting no earlier than `now`.
    /// Returns the service start time.
    fn reserve(&mut self, now: Cycle, bytes: u64, bw: u64) -> Cycle {
        let start = now.max(self.free_at);
        let slot = bytes.div_ceil(bw);
        self.free_at = start + slot;
        start
    }
}

#[derive(Debug, Default, Clone, Serialize)]
pub struct TrafficCounters {
    pub off_chip_bytes: u64,
    pub internal_bytes: u64,
    pub cpu_requests: u64,
    pub pim_requests: u64,
    pub walker_requests: u64,
    pub protocol_messages: u64,
    pub protocol_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Placement {
    pub region_id: u8,
    pub stack_id: u8,
}

/// The simulated memory system shared by the CPU model and the in-memory
/// engines. One instance per simulation; deterministic given the submission
/// order.
#[derive(Debug)]
pub struct MemSystem {
    cfg: TimingConfig,
    stacks: u8,
    off_chip: Channel,
    internal: Vec<Channel>,
    counters: TrafficCounters,
    placements: BTreeMap<u8, u8>,
}

impl MemSystem {
    pub fn new(cfg: TimingConfig, stacks: u8) -> Self {
        assert!((1..=16).contains(&stacks));
        MemSystem {
            cfg,
            stacks,
            off_chip: Channel::default(),
            internal: vec![Channel::default(); stacks as usize],
            counters: TrafficCounters::default(),
            placements: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &TimingConfig {
        &self.cfg
    }

    pub fn stacks(&self) -> u8 {
        self.stacks
    }

    pub fn submit(&mut self, req: AccessRequest) -> SimResult<Completion> {
        assert!(req.size_bytes > 0, "zero-size access");
        let stack = req.pa.stack();
        if stack >= self.stacks {
            return Err(SimError::UnmappedAddress(req.pa.0));
        }
        match req.requester {
            Requester::CpuCore(_) => self.counters.cpu_requests += 1,
            Requester::PimCore { .. } => self.counters.pim_requests += 1,
            Requester::PageWalker { .. } => self.counters.walker_requests += 1,
        }
        let internal = req.requester.stack() == Some(stack);
        if internal {
            let bytes = req.size_bytes as u64;
            let start = self.internal[stack as usize].reserve(
                req.issue_time,
                bytes,
                self.cfg.pim_internal_bw,
            );
            self.counters.internal_bytes += bytes;
            Ok(Completion {
                complete_time: start + self.cfg.pim_dram_latency,
                bytes_moved: bytes,
                off_chip: false,
            })
        } else {
            // CPU-side requesters, and PIM requesters reaching a remote
            // stack, cross the off-chip channel and pay the header.
            let bytes = (req.size_bytes + HEADER_BYTES) as u64;
            let start = self
                .off_chip
                .reserve(req.issue_time, bytes, self.cfg.cpu_channel_bw);
            self.counters.off_chip_bytes += bytes;
            Ok(Completion {
                complete_time: start + self.cfg.cpu_dram_latency,
                bytes_moved: bytes,
                off_chip: true,
            })
        }
    }

    /// Send a protocol message (coherence control, signature transfer) over
    /// the off-chip channel. `payload_bytes` excludes the fixed header.
    /// Signature transfers contend with demand traffic on the same channel.
    pub fn off_chip_message(&mut self, payload_bytes: u32, now: Cycle) -> Cycle {
        let bytes = (payload_bytes + HEADER_BYTES) as u64;
        let start = self.off_chip.reserve(now, bytes, self.cfg.cpu_channel_bw);
        self.counters.off_chip_bytes += bytes;
        self.counters.protocol_messages += 1;
        self.counters.protocol_bytes += bytes;
        start + self.cfg.cpu_dram_latency
    }

    pub fn off_chip_traffic(&self) -> u64 {
        self.counters.off_chip_bytes
    }

    pub fn counters(&self) -> &TrafficCounters {
        &self.counters
    }

    pub fn map_region_to_stack(&mut self, region_id: u8, stack_id: u8) -> SimResult<Placement> {
        if stack_id >= self.stacks {
            return Err(SimError::UnmappedAddress((stack_id as u64) << STACK_SHIFT));
        }
        match self.placements.get(&region_id) {
            Some(&s) if s != stack_id => Err(SimError::RemapRefused(region_id, s)),
            _ => {
                self.placements.insert(region_id, stack_id);
                Ok(Placement {
                    region_id,
                    stack_id,
                })
            }
        }
    }

    pub fn stack_of_region(&self, region_id: u8) -> u8 {
        self.placements.get(&region_id).copied().unwrap_or(0)
    }
}
