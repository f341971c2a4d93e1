//! Set-associative data cache used on both the CPU and PIM sides of the
//! coherence experiments. Lines carry their data (eight 8-byte words), a
//! MESI state, and the speculative flag / per-word dirty mask that the
//! speculative commit path needs.

use crate::coherence::mesi::MesiState;
use crate::mem::LINE_SIZE;

pub const WORDS_PER_LINE: usize = (LINE_SIZE / 8) as usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DataLine {
    /// Line address (byte address / 64).
    pub addr: u64,
    pub state: MesiState,
    pub speculative: bool,
    /// One bit per 8B word, set on local writes since the last clean point.
    pub dirty_mask: u8,
    pub words: [u64; WORDS_PER_LINE],
    last_use: u64,
}

impl DataLine {
    pub fn new(addr: u64, state: MesiState, words: [u64; WORDS_PER_LINE]) -> Self {
        DataLine {
            addr,
            state,
            speculative: false,
            dirty_mask: 0,
            words,
            last_use: 0,
        }
    }

    pub fn dirty(&self) -> bool {
        self.dirty_mask != 0 || self.state == MesiState::Modified
    }
}

#[derive(Debug, Clone)]
pub struct DataCache {
    sets: usize,
    ways: usize,
    lines: Vec<Vec<DataLine>>,
    tick: u64,
    pub hits: u64,
    pub misses: u64,
}

impl DataCache {
    pub fn new(capacity_bytes: u32, ways: usize) -> Self {
        let total = (capacity_bytes / LINE_SIZE) as usize;
        let sets = total / ways;
        assert!(sets.is_power_of_two());
        DataCache {
            sets,
            ways,
            lines: vec![Vec::new(); sets],
            tick: 0,
            hits: 0,
            misses: 0,
        }
    }

    fn set_of(&self, addr: u64) -> usize {
        (addr % self.sets as u64) as usize
    }

    pub fn get(&self, addr: u64) -> Option<&DataLine> {
        self.lines[self.set_of(addr)]
            .iter()
            .find(|l| l.addr == addr)
    }

    pub fn get_mut(&mut self, addr: u64) -> Option<&mut DataLine> {
        self.tick += 1;
        let tick = self.tick;
        let set = self.set_of(addr);
        let line = self.lines[set].iter_mut().find(|l| l.addr == addr);
        if let Some(l) = line {
            l.last_use = tick;
            Some(l)
        } else {
            None
        }
    }

    /// Install a line, evicting the least-recently-used victim if the set is
    /// full. Speculative lines are protected from eviction; the returned
    /// victim (if dirty or speculative) must be handled by the caller.
    pub fn insert(&mut self, mut line: DataLine) -> Option<DataLine> {
        self.tick += 1;
        line.last_use = self.tick;
        let set = self.set_of(line.addr);
        debug_assert!(self.lines[set].iter().all(|l| l.addr != line.addr));
        let mut victim = None;
        if self.lines[set].len() >= self.ways {
            let idx = self.lines[set]
                .iter()
                .enumerate()
                .filter(|(_, l)| !l.speculative)
                .min_by_key(|(_, l)| l.last_use)
                .map(|(i, _)| i)
                .expect("every line of the set is speculative");
            victim = Some(self.lines[set].swap_remove(idx));
        }
        self.lines[set].push(line);
        victim
    }

    pub fn invalidate(&mut self, addr: u64) -> Option<DataLine> {
        let set = self.set_of(addr);
        let idx = self.lines[set].iter().position(|l| l.addr == addr)?;
        Some(self.lines[set].swap_remove(idx))
    }

    pub fn iter(&self) -> impl Iterator<Item = &DataLine> {
        self.lines.iter().flatten()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut DataLine> {
        self.lines.iter_mut().flatten()
    }

    /// Addresses of dirty lines satisfying a predicate, in address order
    /// (deterministic scan used by flush and write-set seeding).
    pub fn dirty_lines_where(&self, pred: impl Fn(u64) -> bool) -> Vec<u64> {
        let mut out: Vec<u64> = self
            .iter()
            .filter(|l| l.dirty() && pred(l.addr))
            .map(|l| l.addr)
            .collect();
        out.sort_unstable();
        out
    }

    pub fn clear(&mut self) {
        for set in &mut self.lines {
            set.clear();
        }
    }

    pub fn len(&self) -> usize {
        self.lines.iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
