//! The accelerator-side cache that hands loaded data to the address engine.
//!
//! Lines are locked from insertion until the address engine consumes the
//! matching response-queue entry; locked lines are never evicted. A request
//! ID ties each line to its traversal so completed traversals evict their
//! lines immediately. A root bit marks lines fetched by the first few
//! accesses of a traversal; replacement prefers evicting (unlocked,
//! non-root) over (unlocked, root), LRU within each tier.

#[derive(Debug, Clone, Copy)]
pub struct CacheLine {
    pub tag: u64,
    pub lock: bool,
    pub root: bool,
    pub request_id: u32,
    last_use: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SetLocked;

#[derive(Debug)]
pub struct ImpicaCache {
    sets: usize,
    ways: usize,
    line_size: u32,
    lines: Vec<Vec<CacheLine>>,
    tick: u64,
    pub inserts: u64,
    pub hits: u64,
    pub lock_stalls: u64,
}

impl ImpicaCache {
    pub fn new(capacity_bytes: u32, ways: usize, line_size: u32) -> Self {
        let total_lines = (capacity_bytes / line_size) as usize;
        let sets = total_lines / ways;
        assert!(sets.is_power_of_two());
        ImpicaCache {
            sets,
            ways,
            line_size,
            lines: vec![Vec::new(); sets],
            tick: 0,
            inserts: 0,
            hits: 0,
            lock_stalls: 0,
        }
    }

    fn set_of(&self, va: u64) -> usize {
        ((va / self.line_size as u64) % self.sets as u64) as usize
    }

    fn tag_of(&self, va: u64) -> u64 {
        va / self.line_size as u64
    }

    pub fn lookup(&mut self, va: u64) -> bool {
        self.tick += 1;
        let tick = self.tick;
        let set = self.set_of(va);
        let tag = self.tag_of(va);
        if let Some(line) = self.lines[set].iter_mut().find(|l| l.tag == tag) {
            line.last_use = tick;
            self.hits += 1;
            true
        } else {
            false
        }
    }

    /// Insert with the lock bit set. Fails when every line of the set is
    /// locked; the caller stalls and retries after a consume event.
    pub fn insert(&mut self, va: u64, request_id: u32, root: bool) -> Result<(), SetLocked> {
        self.tick += 1;
        let tick = self.tick;
        let set = self.set_of(va);
        let tag = self.tag_of(va);
        if let Some(line) = self.lines[set].iter_mut().find(|l| l.tag == tag) {
            // refresh in place
            line.lock = true;
            line.request_id = request_id;
            line.root = line.root || root;
            line.last_use = tick;
            return Ok(());
        }
        if self.lines[set].len() >= self.ways {
            let victim = self.lines[set]
                .iter()
                .enumerate()
                .filter(|(_, l)| !l.lock)
                .min_by_key(|(_, l)| (l.root, l.last_use))
                .map(|(i, _)| i);
            match victim {
                Some(i) => {
                    self.lines[set].swap_remove(i);
                }
                None => {
                    self.lock_stalls += 1;
                    return Err(SetLocked);
                }
            }
        }
        self.lines[set].push(CacheLine {
            tag,
            lock: true,
            root,
            request_id,
            last_use: tick,
        });
        self.inserts += 1;
        Ok(())
    }

    /// Address engine consumed the response for this line: clear the lock.
    pub fn consume(&mut self, va: u64) {
        let set = self.set_of(va);
        let tag = self.tag_of(va);
        if let Some(line) = self.lines[set].iter_mut().find(|l| l.tag == tag) {
            line.lock = false;
        }
    }

    /// Traversal finished: immediately evict every line it fetched.
    pub fn evict_request(&mut self, request_id: u32) -> usize {
        let mut evicted = 0;
        for set in &mut self.lines {
            let before = set.len();
            set.retain(|l| l.request_id != request_id);
            evicted += before - set.len();
        }
        evicted
    }

    pub fn locked_lines(&self) -> usize {
        self.lines.iter().flatten().filter(|l| l.lock).count()
    }

    pub fn lines_of_request(&self, request_id: u32) -> usize {
        self.lines
            .iter()
            .flatten()
            .filter(|l| l.request_id == request_id)
            .count()
    }

    pub fn set_fully_locked(&self, va: u64) -> bool {
        let set = self.set_of(va);
        self.lines[set].len() >= self.ways && self.lines[set].iter().all(|l| l.lock)
    }
}
