//! Directory-based MESI over a set of peer caches.
//!
//! `directory_transition` is the pure protocol table; `MesiCluster` applies
//! it to data-carrying caches and a backing line store, keeping data values
//! coherent (writebacks on downgrade/invalidation) so the data-value
//! invariant can be checked against a reference automaton.

use serde::Serialize;
use std::collections::{BTreeMap, BTreeSet};

use crate::coherence::cache::{DataCache, DataLine, WORDS_PER_LINE};
use crate::error::{SimError, SimResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum MesiState {
    Modified,
    Exclusive,
    Shared,
    Invalid,
}

pub type PeerId = usize;

/// Directory summary per line. `Owned` covers both E and M in the owner's
/// cache (the E->M upgrade is silent, as in canonical MESI).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DirState {
    Uncached,
    Shared(BTreeSet<PeerId>),
    Owned(PeerId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DirEvent {
    Read(PeerId),
    Write(PeerId),
    Evict(PeerId),
}

/// Protocol messages; each one is a unit of traffic accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Msg {
    /// Memory (or the post-writeback store) supplies the line.
    Fill { to: PeerId, grant: MesiState },
    /// Owner writes back and downgrades to S; requester fills from memory.
    DowngradeOwner { owner: PeerId },
    /// Peer drops its copy, writing back first if modified.
    Invalidate { peer: PeerId },
}

/// The canonical MESI directory table. Hits that need no directory action
/// (read hit; write hit in M/E) must not be presented here.
pub fn directory_transition(state: &DirState, ev: DirEvent) -> SimResult<(DirState, Vec<Msg>)> {
    use DirEvent::*;
    use DirState::*;
    match (state, ev) {
        (Uncached, Read(p)) => Ok((
            Owned(p),
            vec![Msg::Fill {
                to: p,
                grant: MesiState::Exclusive,
            }],
        )),
        (Uncached, Write(p)) => Ok((
            Owned(p),
            vec![Msg::Fill {
                to: p,
                grant: MesiState::Modified,
            }],
        )),
        (Shared(s), Read(p)) => {
            if s.contains(&p) {
                return Err(SimError::ProtocolViolation(format!(
                    "read by sharer {p} reached the directory"
                )));
            }
            let mut next = s.clone();
            next.insert(p);
            Ok((
                Shared(next),
                vec![Msg::Fill {
                    to: p,
                    grant: MesiState::Shared,
                }],
            ))
        }
        (Shared(s), Write(p)) => {
            let mut msgs: Vec<Msg> = s
                .iter()
                .filter(|&&q| q != p)
                .map(|&q| Msg::Invalidate { peer: q })
                .collect();
            if !s.contains(&p) {
                msgs.push(Msg::Fill {
                    to: p,
                    grant: MesiState::Modified,
                });
            }
            Ok((Owned(p), msgs))
        }
        (Owned(q), Read(p)) => {
            if *q == p {
                return Err(SimError::ProtocolViolation(format!(
                    "read by owner {p} reached the directory"
                )));
            }
            Ok((
                Shared(BTreeSet::from([*q, p])),
                vec![
                    Msg::DowngradeOwner { owner: *q },
                    Msg::Fill {
                        to: p,
                        grant: MesiState::Shared,
                    },
                ],
            ))
        }
        (Owned(q), Write(p)) => {
            if *q == p {
                return Err(SimError::ProtocolViolation(format!(
                    "write by owner {p} reached the directory"
                )));
            }
            Ok((
                Owned(p),
                vec![
                    Msg::Invalidate { peer: *q },
                    Msg::Fill {
                        to: p,
                        grant: MesiState::Modified,
                    },
                ],
            ))
        }
        (Shared(s), Evict(p)) => {
            if !s.contains(&p) {
                return Err(SimError::ProtocolViolation(format!(
                    "evict by non-sharer {p}"
                )));
            }
            let mut next = s.clone();
            next.remove(&p);
            if next.is_empty() {
                Ok((Uncached, vec![]))
            } else {
                Ok((Shared(next), vec![]))
            }
        }
        (Owned(q), Evict(p)) if *q == p => Ok((Uncached, vec![])),
        (st, ev) => Err(SimError::ProtocolViolation(format!(
            "illegal pair {st:?} / {ev:?}"
        ))),
    }
}

/// Outcome of one cluster access, for traffic and hit-rate accounting.
#[derive(Debug, Clone, Default)]
pub struct AccessOutcome {
    pub hit: bool,
    pub msgs: Vec<Msg>,
    /// Peers whose dirty line this access forced back to memory
    /// (downgrades, invalidations, capacity evictions).
    pub writeback_peers: Vec<PeerId>,
}

#[derive(Debug)]
pub struct MesiCluster {
    pub caches: Vec<DataCache>,
    pub dir: BTreeMap<u64, DirState>,
    memory: BTreeMap<u64, [u64; WORDS_PER_LINE]>,
}

fn line_of(byte_addr: u64) -> u64 {
    byte_addr >> 6
}

fn word_of(byte_addr: u64) -> usize {
    ((byte_addr >> 3) & 7) as usize
}

impl MesiCluster {
    pub fn new(peers: usize, capacity_bytes: u32, ways: usize) -> Self {
        MesiCluster {
            caches: (0..peers)
                .map(|_| DataCache::new(capacity_bytes, ways))
                .collect(),
            dir: BTreeMap::new(),
            memory: BTreeMap::new(),
        }
    }

    pub fn mem_line(&self, line: u64) -> [u64; WORDS_PER_LINE] {
        self.memory
            .get(&line)
            .copied()
            .unwrap_or([0; WORDS_PER_LINE])
    }

    pub fn mem_word(&self, byte_addr: u64) -> u64 {
        self.mem_line(line_of(byte_addr))[word_of(byte_addr)]
    }

    pub fn write_mem_word(&mut self, byte_addr: u64, value: u64) {
        let entry = self
            .memory
            .entry(line_of(byte_addr))
            .or_insert([0; WORDS_PER_LINE]);
        entry[word_of(byte_addr)] = value;
    }

    /// Commit-time merge: words with a mask bit set come from `words`, the
    /// rest keep their current memory value.
    pub fn merge_line_to_memory(&mut self, line: u64, words: &[u64; WORDS_PER_LINE], mask: u8) {
        let entry = self.memory.entry(line).or_insert([0; WORDS_PER_LINE]);
        for (w, &v) in words.iter().enumerate() {
            if mask & (1 << w) != 0 {
                entry[w] = v;
            }
        }
    }

    pub fn memory_snapshot(&self) -> BTreeMap<u64, [u64; WORDS_PER_LINE]> {
        self.memory.clone()
    }

    fn dir_state(&self, line: u64) -> DirState {
        self.dir.get(&line).cloned().unwrap_or(DirState::Uncached)
    }

    /// Downgrade a peer's copy to S, writing the data back first if it was
    /// modified. Returns whether a writeback happened.
    fn writeback(&mut self, peer: PeerId, line: u64) -> bool {
        if let Some(l) = self.caches[peer].get_mut(line) {
            let was_modified = l.state == MesiState::Modified;
            let words = l.words;
            l.state = MesiState::Shared;
            l.dirty_mask = 0;
            if was_modified {
                self.memory.insert(line, words);
                return true;
            }
        }
        false
    }

    fn apply_msgs(&mut self, line: u64, msgs: &[Msg], outcome: &mut AccessOutcome) {
        for m in msgs {
            match *m {
                Msg::DowngradeOwner { owner } => {
                    if self.writeback(owner, line) {
                        outcome.writeback_peers.push(owner);
                    }
                }
                Msg::Invalidate { peer } => {
                    if let Some(victim) = self.caches[peer].invalidate(line) {
                        if victim.state == MesiState::Modified {
                            self.memory.insert(line, victim.words);
                            outcome.writeback_peers.push(peer);
                        }
                    }
                }
                Msg::Fill { .. } => {} // handled by the requester's install
            }
        }
    }

    /// Handle the capacity victim of an install: notify the directory and
    /// write back if modified.
    fn retire_victim(&mut self, peer: PeerId, victim: DataLine, outcome: &mut AccessOutcome) {
        assert!(
            !victim.speculative,
            "speculative victim must not reach MESI"
        );
        let (next, msgs) =
            directory_transition(&self.dir_state(victim.addr), DirEvent::Evict(peer))
                .expect("victim state consistent with directory");
        assert!(msgs.is_empty());
        if victim.state == MesiState::Modified {
            self.memory.insert(victim.addr, victim.words);
            outcome.writeback_peers.push(peer);
        }
        self.set_dir(victim.addr, next);
    }

    fn set_dir(&mut self, line: u64, st: DirState) {
        if st == DirState::Uncached {
            self.dir.remove(&line);
        } else {
            self.dir.insert(line, st);
        }
    }

    pub fn read(&mut self, peer: PeerId, byte_addr: u64) -> SimResult<(u64, AccessOutcome)> {
        let line = line_of(byte_addr);
        let word = word_of(byte_addr);
        let mut outcome = AccessOutcome::default();
        if let Some(l) = self.caches[peer].get_mut(line) {
            let v = l.words[word];
            self.caches[peer].hits += 1;
            outcome.hit = true;
            return Ok((v, outcome));
        }
        self.caches[peer].misses += 1;
        let (next, msgs) = directory_transition(&self.dir_state(line), DirEvent::Read(peer))?;
        self.apply_msgs(line, &msgs, &mut outcome);
        let grant = msgs
            .iter()
            .find_map(|m| match m {
                Msg::Fill { to, grant } if *to == peer => Some(*grant),
                _ => None,
            })
            .expect("read miss always fills");
        let words = self.mem_line(line);
        let victim = self.caches[peer].insert(DataLine::new(line, grant, words));
        if let Some(v) = victim {
            self.retire_victim(peer, v, &mut outcome);
        }
        self.set_dir(line, next);
        outcome.msgs = msgs;
        Ok((words[word], outcome))
    }

    pub fn write(&mut self, peer: PeerId, byte_addr: u64, value: u64) -> SimResult<AccessOutcome> {
        let line = line_of(byte_addr);
        let word = word_of(byte_addr);
        let mut outcome = AccessOutcome::default();
        if let Some(l) = self.caches[peer].get_mut(line) {
            match l.state {
                MesiState::Modified | MesiState::Exclusive => {
                    // silent E->M upgrade
                    l.state = MesiState::Modified;
                    l.words[word] = value;
                    l.dirty_mask |= 1 << word;
                    self.caches[peer].hits += 1;
                    outcome.hit = true;
                    return Ok(outcome);
                }
                MesiState::Shared => {
                    // upgrade through the directory: invalidate other sharers
                    let (next, msgs) =
                        directory_transition(&self.dir_state(line), DirEvent::Write(peer))?;
                    self.apply_msgs(line, &msgs, &mut outcome);
                    let l = self.caches[peer].get_mut(line).unwrap();
                    l.state = MesiState::Modified;
                    l.words[word] = value;
                    l.dirty_mask |= 1 << word;
                    self.set_dir(line, next);
                    outcome.msgs = msgs;
                    return Ok(outcome);
                }
                MesiState::Invalid => unreachable!("invalid lines are removed"),
            }
        }
        self.caches[peer].misses += 1;
        let (next, msgs) = directory_transition(&self.dir_state(line), DirEvent::Write(peer))?;
        self.apply_msgs(line, &msgs, &mut outcome);
        let mut words = self.mem_line(line);
        words[word] = value;
        let mut filled = DataLine::new(line, MesiState::Modified, words);
        filled.dirty_mask = 1 << word;
        let victim = self.caches[peer].insert(filled);
        if let Some(v) = victim {
            self.retire_victim(peer, v, &mut outcome);
        }
        self.set_dir(line, next);
        outcome.msgs = msgs;
        Ok(outcome)
    }

    /// Write one peer's modified line back to memory, keeping a Shared
    /// copy. Returns whether a writeback happened (false if clean/absent).
    pub fn flush_line(&mut self, peer: PeerId, line: u64) -> bool {
        let modified = self.caches[peer]
            .get(line)
            .map(|l| l.state == MesiState::Modified)
            .unwrap_or(false);
        if !modified {
            return false;
        }
        self.writeback(peer, line);
        self.set_dir(line, DirState::Shared(BTreeSet::from([peer])));
        true
    }

    /// Drop one peer's copy through the directory (voluntary eviction).
    pub fn evict(&mut self, peer: PeerId, line: u64) -> SimResult<AccessOutcome> {
        let mut outcome = AccessOutcome::default();
        let Some(victim) = self.caches[peer].invalidate(line) else {
            return Ok(outcome);
        };
        let (next, _) = directory_transition(&self.dir_state(line), DirEvent::Evict(peer))?;
        if victim.state == MesiState::Modified {
            self.memory.insert(line, victim.words);
            outcome.writeback_peers.push(peer);
        }
        self.set_dir(line, next);
        Ok(outcome)
    }

    /// Read a coherent value without caching it (NC / Ideal-PIM paths):
    /// the owner, if modified, writes back first.
    pub fn uncached_read(&mut self, byte_addr: u64) -> (u64, AccessOutcome) {
        let line = line_of(byte_addr);
        let mut outcome = AccessOutcome::default();
        if let DirState::Owned(q) = self.dir_state(line) {
            if self.writeback(q, line) {
                outcome.writeback_peers.push(q);
            }
            // owner downgrades to S whether or not it was dirty
            self.set_dir(line, DirState::Shared(BTreeSet::from([q])));
        }
        (self.mem_word(byte_addr), outcome)
    }

    /// Write a coherent value without caching it: every cached copy is
    /// invalidated (modified owners write back first, then the word lands).
    pub fn uncached_write(&mut self, byte_addr: u64, value: u64) -> AccessOutcome {
        let line = line_of(byte_addr);
        let mut outcome = AccessOutcome::default();
        match self.dir_state(line) {
            DirState::Uncached => {}
            DirState::Owned(q) => {
                let msgs = [Msg::Invalidate { peer: q }];
                self.apply_msgs(line, &msgs, &mut outcome);
                outcome.msgs.extend(msgs);
                self.set_dir(line, DirState::Uncached);
            }
            DirState::Shared(s) => {
                let msgs: Vec<Msg> = s.iter().map(|&q| Msg::Invalidate { peer: q }).collect();
                self.apply_msgs(line, &msgs, &mut outcome);
                outcome.msgs.extend(msgs);
                self.set_dir(line, DirState::Uncached);
            }
        }
        self.write_mem_word(byte_addr, value);
        outcome
    }

    /// Write every dirty line back to memory and drop all cached copies.
    /// Returns the flushed line addresses per peer (dirty only).
    pub fn flush_all(&mut self) -> Vec<(PeerId, u64)> {
        let mut flushed = Vec::new();
        for peer in 0..self.caches.len() {
            let addrs: Vec<u64> = self.caches[peer].iter().map(|l| l.addr).collect();
            for addr in addrs {
                let victim = self.caches[peer].invalidate(addr).unwrap();
                if victim.state == MesiState::Modified {
                    self.memory.insert(addr, victim.words);
                    flushed.push((peer, addr));
                }
            }
        }
        self.dir.clear();
        flushed
    }

    /// Single-writer/multiple-reader check over every line, plus
    /// directory/cache consistency.
    pub fn check_swmr(&self) -> SimResult<()> {
        let mut lines: BTreeSet<u64> = self.dir.keys().copied().collect();
        for c in &self.caches {
            lines.extend(c.iter().map(|l| l.addr));
        }
        for line in lines {
            self.check_swmr_line(line)?;
        }
        Ok(())
    }

    /// SWMR and directory consistency for one line — cheap enough to run
    /// after every access in debug builds.
    pub fn check_swmr_line(&self, line: u64) -> SimResult<()> {
        {
            let mut owners = Vec::new();
            let mut sharers = Vec::new();
            for (peer, c) in self.caches.iter().enumerate() {
                if let Some(l) = c.get(line) {
                    match l.state {
                        MesiState::Modified | MesiState::Exclusive => owners.push(peer),
                        MesiState::Shared => sharers.push(peer),
                        MesiState::Invalid => unreachable!(),
                    }
                }
            }
            if owners.len() > 1 || (!owners.is_empty() && !sharers.is_empty()) {
                return Err(SimError::ProtocolViolation(format!(
                    "SWMR violated on line {line:#x}: owners {owners:?}, sharers {sharers:?}"
                )));
            }
            let consistent = match self.dir_state(line) {
                DirState::Uncached => owners.is_empty() && sharers.is_empty(),
                DirState::Owned(q) => owners == [q] && sharers.is_empty(),
                DirState::Shared(s) => {
                    owners.is_empty() && sharers.iter().copied().collect::<BTreeSet<_>>() == s
                }
            };
            if !consistent {
                return Err(SimError::ProtocolViolation(format!(
                    "directory inconsistent on line {line:#x}"
                )));
            }
        }
        Ok(())
    }
}
