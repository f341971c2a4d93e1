//! Virtual address translation for the in-memory accelerator.
//!
//! Three-level region-based page table (region table -> flat 2MB-page table
//! -> small 4KB-page table), a conventional four-level table used as the
//! comparison baseline, a fully-associative TLB, the region allocator, and
//! TLB shootdown.
//!
//! Bit split of a 48-bit virtual address: region index = va[47:41],
//! flat index = va[40:21], small index = va[20:12], page offset = va[11:0].
//! The region table is pinned resident, so its lookup costs zero memory
//! accesses and a walk touches at most two table nodes.

use serde::Serialize;
use std::collections::BTreeMap;

use crate::error::{SimError, SimResult};
use crate::mem::{PhysAddr, VirtAddr};

pub const REGION_SHIFT: u32 = 41;
pub const REGION_COUNT: usize = 128;
pub const FLAT_SHIFT: u32 = 21;
pub const SMALL_SHIFT: u32 = 12;
pub const REGION_SPAN: u64 = 1 << REGION_SHIFT; // 2TB
/// Cache footprint of one region-table entry; a 4-entry table fits in 68B.
pub const REGION_ENTRY_BYTES: u32 = 17;

pub fn region_table_footprint_bytes(entries: u32) -> u32 {
    entries * REGION_ENTRY_BYTES
}

fn region_index(va: u64) -> usize {
    ((va >> REGION_SHIFT) & 0x7f) as usize
}

fn flat_index(va: u64) -> u32 {
    ((va >> FLAT_SHIFT) & 0xf_ffff) as u32
}

fn small_index(va: u64) -> u32 {
    ((va >> SMALL_SHIFT) & 0x1ff) as u32
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LeafSize {
    Small4K,
    Large2M,
}

impl LeafSize {
    pub fn page_bits(self) -> u32 {
        match self {
            LeafSize::Small4K => 12,
            LeafSize::Large2M => 21,
        }
    }

    pub fn page_bytes(self) -> u64 {
        1 << self.page_bits()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RegionDescriptor {
    pub region_id: u8,
    pub va_base: u64,
    pub size_bytes: u64,
    pub leaf: LeafSize,
}

#[derive(Debug)]
enum FlatEntry {
    LargeFrame(PhysAddr),
    SmallTable {
        table_pa: PhysAddr,
        frames: Box<[Option<PhysAddr>; 512]>,
    },
}

#[derive(Debug)]
struct Region {
    desc: RegionDescriptor,
    stack: u8,
    flat_table_pa: PhysAddr,
    flat: BTreeMap<u32, FlatEntry>,
}

/// Deterministic bump allocator for physical frames and table nodes,
/// one cursor per stack.
#[derive(Debug, Default)]
struct FrameAllocator {
    next_local: BTreeMap<u8, u64>,
}

impl FrameAllocator {
    fn alloc(&mut self, stack: u8, bytes: u64) -> PhysAddr {
        let cursor = self.next_local.entry(stack).or_insert(0);
        // align up
        let base = cursor.div_ceil(bytes) * bytes;
        *cursor = base + bytes;
        PhysAddr::with_stack(base, stack)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WalkAccess {
    /// 1 = flat table, 2 = small table (RPT); 1..=4 for the four-level walk.
    pub level: u8,
    pub table_pa: PhysAddr,
}

#[derive(Debug, Clone)]
pub struct Translation {
    pub pa: PhysAddr,
    pub walk: Vec<WalkAccess>,
    pub tlb_hit: bool,
    pub page: VirtAddr,
    pub leaf: LeafSize,
}

#[derive(Debug, Clone)]
struct TlbEntry {
    region: u8,
    va_page: u64,
    page_bits: u32,
    frame: PhysAddr,
    last_use: u64,
}

/// Fully-associative, LRU-replaced translation cache on the accelerator side.
#[derive(Debug)]
pub struct PimTlb {
    capacity: usize,
    entries: Vec<TlbEntry>,
    tick: u64,
    pub hits: u64,
    pub misses: u64,
}

impl PimTlb {
    pub fn new(capacity: usize) -> Self {
        PimTlb {
            capacity,
            entries: Vec::new(),
            tick: 0,
            hits: 0,
            misses: 0,
        }
    }

    fn lookup(&mut self, va: u64) -> Option<PhysAddr> {
        self.tick += 1;
        let tick = self.tick;
        for e in &mut self.entries {
            if va >> e.page_bits == e.va_page {
                e.last_use = tick;
                self.hits += 1;
                let offset = va & (e.frame_mask());
                return Some(PhysAddr(e.frame.0 | offset));
            }
        }
        self.misses += 1;
        None
    }

    fn insert(&mut self, region: u8, va: u64, page_bits: u32, frame: PhysAddr) {
        self.tick += 1;
        let entry = TlbEntry {
            region,
            va_page: va >> page_bits,
            page_bits,
            frame,
            last_use: self.tick,
        };
        if self.entries.len() < self.capacity {
            self.entries.push(entry);
        } else if let Some(victim) = self.entries.iter_mut().min_by_key(|e| e.last_use) {
            *victim = entry;
        }
    }

    pub fn shootdown(&mut self, region_id: u8) -> usize {
        let before = self.entries.len();
        self.entries.retain(|e| e.region != region_id);
        before - self.entries.len()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl TlbEntry {
    fn frame_mask(&self) -> u64 {
        (1 << self.page_bits) - 1
    }
}

/// The region-based page table plus its region allocator.
#[derive(Debug)]
pub struct RegionPageTable {
    regions: Vec<Option<Region>>,
    next_region: usize,
    alloc: FrameAllocator,
}

impl Default for RegionPageTable {
    fn default() -> Self {
        Self::new()
    }
}

impl RegionPageTable {
    pub fn new() -> Self {
        RegionPageTable {
            regions: (0..REGION_COUNT).map(|_| None).collect(),
            next_region: 0,
            alloc: FrameAllocator::default(),
        }
    }

    pub fn allocate_pim_region(
        &mut self,
        size_bytes: u64,
        leaf: LeafSize,
        stack: u8,
    ) -> SimResult<RegionDescriptor> {
        if size_bytes > REGION_SPAN {
            return Err(SimError::RegionTooLarge(size_bytes));
        }
        if self.next_region >= REGION_COUNT {
            return Err(SimError::RegionTableFull);
        }
        let region_id = self.next_region as u8;
        self.next_region += 1;
        let va_base = (region_id as u64) << REGION_SHIFT;
        let desc = RegionDescriptor {
            region_id,
            va_base,
            size_bytes,
            leaf,
        };
        // the flat table is a single 2^20-entry array (8MB) in stack memory
        let flat_table_pa = self.alloc.alloc(stack, 8 << 20);
        self.regions[region_id as usize] = Some(Region {
            desc,
            stack,
            flat_table_pa,
            flat: BTreeMap::new(),
        });
        Ok(desc)
    }

    pub fn region(&self, region_id: u8) -> Option<&RegionDescriptor> {
        self.regions
            .get(region_id as usize)
            .and_then(|r| r.as_ref())
            .map(|r| &r.desc)
    }

    pub fn allocated_regions(&self) -> usize {
        self.next_region
    }

    fn region_of(&self, va: u64) -> SimResult<u8> {
        let idx = region_index(va);
        match &self.regions[idx] {
            Some(r) if va >= r.desc.va_base && va < r.desc.va_base + r.desc.size_bytes => {
                Ok(r.desc.region_id)
            }
            _ => Err(SimError::NotAPimRegion(va)),
        }
    }

    /// Map the page containing `va`, allocating the backing frame and any
    /// intermediate table lazily. Returns the pa of `va` itself.
    pub fn map_page(&mut self, va: u64) -> SimResult<PhysAddr> {
        VirtAddr::checked(va)?;
        let region_id = self.region_of(va)?;
        let fidx = flat_index(va);
        let region = self.regions[region_id as usize].as_ref().unwrap();
        let leaf = region.desc.leaf;
        let stack = region.stack;
        match leaf {
            LeafSize::Large2M => {
                if !self.regions[region_id as usize]
                    .as_ref()
                    .unwrap()
                    .flat
                    .contains_key(&fidx)
                {
                    let frame = self.alloc.alloc(stack, LeafSize::Large2M.page_bytes());
                    self.regions[region_id as usize]
                        .as_mut()
                        .unwrap()
                        .flat
                        .insert(fidx, FlatEntry::LargeFrame(frame));
                }
            }
            LeafSize::Small4K => {
                let needs_table = !self.regions[region_id as usize]
                    .as_ref()
                    .unwrap()
                    .flat
                    .contains_key(&fidx);
                if needs_table {
                    let table_pa = self.alloc.alloc(stack, 4096);
                    self.regions[region_id as usize]
                        .as_mut()
                        .unwrap()
                        .flat
                        .insert(
                            fidx,
                            FlatEntry::SmallTable {
                                table_pa,
                                frames: Box::new([None; 512]),
                            },
                        );
                }
                let sidx = small_index(va) as usize;
                let unmapped = matches!(
                    self.regions[region_id as usize].as_ref().unwrap().flat.get(&fidx),
                    Some(FlatEntry::SmallTable { frames, .. }) if frames[sidx].is_none()
                );
                if unmapped {
                    let frame = self.alloc.alloc(stack, LeafSize::Small4K.page_bytes());
                    if let Some(FlatEntry::SmallTable { frames, .. }) = self.regions
                        [region_id as usize]
                        .as_mut()
                        .unwrap()
                        .flat
                        .get_mut(&fidx)
                    {
                        frames[sidx] = Some(frame);
                    }
                }
            }
        }
        self.resolve(va).map(|(pa, _)| pa)
    }

    /// Map every page of `[va, va + len)`.
    pub fn map_range(&mut self, va: u64, len: u64) -> SimResult<()> {
        let region_id = self.region_of(va)?;
        let page = self.regions[region_id as usize]
            .as_ref()
            .unwrap()
            .desc
            .leaf
            .page_bytes();
        let mut p = va & !(page - 1);
        while p < va + len {
            self.map_page(p)?;
            p += page;
        }
        Ok(())
    }

    fn resolve(&self, va: u64) -> SimResult<(PhysAddr, LeafSize)> {
        let region_id = self.region_of(va)?;
        let region = self.regions[region_id as usize].as_ref().unwrap();
        match region.flat.get(&flat_index(va)) {
            Some(FlatEntry::LargeFrame(frame)) => {
                let off = va & (LeafSize::Large2M.page_bytes() - 1);
                Ok((PhysAddr(frame.0 | off), LeafSize::Large2M))
            }
            Some(FlatEntry::SmallTable { frames, .. }) => match frames[small_index(va) as usize] {
                Some(frame) => {
                    let off = va & (LeafSize::Small4K.page_bytes() - 1);
                    Ok((PhysAddr(frame.0 | off), LeafSize::Small4K))
                }
                None => Err(SimError::PageFault {
                    va,
                    region: region_id,
                }),
            },
            None => Err(SimError::PageFault {
                va,
                region: region_id,
            }),
        }
    }

    /// Walk the RPT. The region table is pinned resident so it contributes
    /// no memory accesses; a miss walk touches the flat entry and, for 4KB
    /// leaves, the small-table entry.
    pub fn translate_rpt(&self, va: u64, tlb: Option<&mut PimTlb>) -> SimResult<Translation> {
        VirtAddr::checked(va)?;
        let region_id = self.region_of(va)?;
        if let Some(tlb) = tlb {
            if let Some(pa) = tlb.lookup(va) {
                let (_, leaf) = self.resolve(va)?;
                return Ok(Translation {
                    pa,
                    walk: Vec::new(),
                    tlb_hit: true,
                    page: VirtAddr(va >> leaf.page_bits() << leaf.page_bits()),
                    leaf,
                });
            }
            let t = self.walk_rpt(va, region_id)?;
            let frame = PhysAddr(t.pa.0 & !(t.leaf.page_bytes() - 1));
            tlb.insert(region_id, va, t.leaf.page_bits(), frame);
            return Ok(t);
        }
        self.walk_rpt(va, region_id)
    }

    fn walk_rpt(&self, va: u64, region_id: u8) -> SimResult<Translation> {
        let region = self.regions[region_id as usize].as_ref().unwrap();
        let mut walk = Vec::with_capacity(2);
        walk.push(WalkAccess {
            level: 1,
            table_pa: PhysAddr(region.flat_table_pa.0 + flat_index(va) as u64 * 8),
        });
        let (pa, leaf) = match region.flat.get(&flat_index(va)) {
            Some(FlatEntry::LargeFrame(frame)) => {
                let off = va & (LeafSize::Large2M.page_bytes() - 1);
                (PhysAddr(frame.0 | off), LeafSize::Large2M)
            }
            Some(FlatEntry::SmallTable { table_pa, frames }) => {
                walk.push(WalkAccess {
                    level: 2,
                    table_pa: PhysAddr(table_pa.0 + small_index(va) as u64 * 8),
                });
                match frames[small_index(va) as usize] {
                    Some(frame) => {
                        let off = va & (LeafSize::Small4K.page_bytes() - 1);
                        (PhysAddr(frame.0 | off), LeafSize::Small4K)
                    }
                    None => {
                        return Err(SimError::PageFault {
                            va,
                            region: region_id,
                        })
                    }
                }
            }
            None => {
                return Err(SimError::PageFault {
                    va,
                    region: region_id,
                })
            }
        };
        debug_assert!(walk.len() <= 2, "RPT walk depth bound violated");
        Ok(Translation {
            pa,
            walk,
            tlb_hit: false,
            page: VirtAddr(va >> leaf.page_bits() << leaf.page_bits()),
            leaf,
        })
    }

    pub fn dump_mappings(&self) -> serde_json::Value {
        let regions: Vec<_> = self
            .regions
            .iter()
            .flatten()
            .map(|r| {
                serde_json::json!({
                    "region-id": r.desc.region_id,
                    "va-base": r.desc.va_base,
                    "size": r.desc.size_bytes,
                    "leaf-size": match r.desc.leaf {
                        LeafSize::Small4K => "4K",
                        LeafSize::Large2M => "2M",
                    },
                })
            })
            .collect();
        serde_json::Value::Array(regions)
    }
}

#[derive(Debug)]
enum FourLevelNode {
    Inner {
        pa: PhysAddr,
        children: BTreeMap<u16, FourLevelNode>,
    },
    Leaf {
        pa: PhysAddr,
        frames: BTreeMap<u16, PhysAddr>,
    },
}

/// Conventional four-level page table: four chained 512-entry levels,
/// 9 index bits each over va[47:12], 4KB leaf frames.
#[derive(Debug)]
pub struct FourLevelPageTable {
    root: FourLevelNode,
    alloc_cursor: u64,
}

impl Default for FourLevelPageTable {
    fn default() -> Self {
        Self::new()
    }
}

impl FourLevelPageTable {
    pub fn new() -> Self {
        FourLevelPageTable {
            root: FourLevelNode::Inner {
                pa: PhysAddr(0),
                children: BTreeMap::new(),
            },
            alloc_cursor: 1 << 40, // table nodes live in their own pa range
        }
    }

    fn level_index(va: u64, level: u8) -> u16 {
        let shift = 12 + 9 * (3 - level as u32);
        ((va >> shift) & 0x1ff) as u16
    }

    fn next_node_pa(&mut self) -> PhysAddr {
        let pa = PhysAddr(self.alloc_cursor);
        self.alloc_cursor += 4096;
        pa
    }

    /// Map the 4KB page containing `va` to the given frame (typically the
    /// frame the RPT picked, so both tables resolve identically).
    pub fn map_page(&mut self, va: u64, frame: PhysAddr) -> SimResult<()> {
        VirtAddr::checked(va)?;
        let idx: Vec<u16> = (0..4).map(|l| Self::level_index(va, l)).collect();
        let mut fresh: Vec<PhysAddr> = (0..3).map(|_| self.next_node_pa()).collect();
        let mut node = &mut self.root;
        for (level, &i) in idx.iter().take(3).enumerate() {
            let FourLevelNode::Inner { children, .. } = node else {
                unreachable!()
            };
            let pa = fresh.remove(0);
            node = children.entry(i).or_insert_with(|| {
                if level == 2 {
                    FourLevelNode::Leaf {
                        pa,
                        frames: BTreeMap::new(),
                    }
                } else {
                    FourLevelNode::Inner {
                        pa,
                        children: BTreeMap::new(),
                    }
                }
            });
        }
        let FourLevelNode::Leaf { frames, .. } = node else {
            unreachable!()
        };
        frames.insert(idx[3], PhysAddr(frame.0 & !0xfff));
        Ok(())
    }

    /// Full cold walk: exactly 4 table accesses for any mapped address.
    pub fn translate_4level(&self, va: u64) -> SimResult<Translation> {
        VirtAddr::checked(va)?;
        let mut walk = Vec::with_capacity(4);
        let mut node = &self.root;
        for level in 0..3u8 {
            let i = Self::level_index(va, level);
            let (pa, next) = match node {
                FourLevelNode::Inner { pa, children } => (*pa, children.get(&i)),
                FourLevelNode::Leaf { .. } => unreachable!(),
            };
            walk.push(WalkAccess {
                level: level + 1,
                table_pa: PhysAddr(pa.0 + i as u64 * 8),
            });
            node = next.ok_or(SimError::PageFault { va, region: 0 })?;
        }
        let i = Self::level_index(va, 3);
        let FourLevelNode::Leaf { pa, frames } = node else {
            unreachable!()
        };
        walk.push(WalkAccess {
            level: 4,
            table_pa: PhysAddr(pa.0 + i as u64 * 8),
        });
        let frame = frames
            .get(&i)
            .ok_or(SimError::PageFault { va, region: 0 })?;
        Ok(Translation {
            pa: PhysAddr(frame.0 | (va & 0xfff)),
            walk,
            tlb_hit: false,
            page: VirtAddr(va & !0xfff),
            leaf: LeafSize::Small4K,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn first_allocation_is_region_zero_aligned() {
        let mut rpt = RegionPageTable::new();
        let d = rpt
            .allocate_pim_region(1 << 20, LeafSize::Small4K, 0)
            .unwrap();
        assert_eq!(d.region_id, 0);
        assert_eq!(d.va_base, 0);
        assert_eq!(d.va_base & ((1 << 41) - 1), 0);
        let d2 = rpt
            .allocate_pim_region(1 << 20, LeafSize::Small4K, 0)
            .unwrap();
        assert_eq!(d2.va_base, 1 << 41);
    }

    #[test]
    fn four_entry_region_table_fits_68_bytes() {
        let mut rpt = RegionPageTable::new();
        for _ in 0..4 {
            rpt.allocate_pim_region(4096, LeafSize::Small4K, 0).unwrap();
        }
        assert_eq!(
            region_table_footprint_bytes(rpt.allocated_regions() as u32),
            68
        );
    }

    #[test]
    fn region_129_refused() {
        let mut rpt = RegionPageTable::new();
        for _ in 0..128 {
            rpt.allocate_pim_region(4096, LeafSize::Small4K, 0).unwrap();
        }
        assert_eq!(
            rpt.allocate_pim_region(4096, LeafSize::Small4K, 0),
            Err(SimError::RegionTableFull)
        );
    }

    #[test]
    fn oversized_region_refused() {
        let mut rpt = RegionPageTable::new();
        assert_eq!(
            rpt.allocate_pim_region((1 << 41) + 1, LeafSize::Small4K, 0),
            Err(SimError::RegionTooLarge((1 << 41) + 1))
        );
    }

    #[test]
    fn large_page_walk_is_one_access() {
        let mut rpt = RegionPageTable::new();
        let d = rpt
            .allocate_pim_region(4 << 20, LeafSize::Large2M, 0)
            .unwrap();
        let frame_pa = rpt.map_page(d.va_base).unwrap();
        let t = rpt.translate_rpt(d.va_base, None).unwrap();
        assert_eq!(t.pa, frame_pa);
        assert_eq!(t.walk.len(), 1);
        // zero offset: pa is the frame base
        assert_eq!(t.pa.0 & ((1 << 21) - 1), 0);
    }

    #[test]
    fn small_page_walk_is_two_accesses() {
        let mut rpt = RegionPageTable::new();
        let d = rpt
            .allocate_pim_region(1 << 20, LeafSize::Small4K, 0)
            .unwrap();
        rpt.map_page(d.va_base + 0x3123).unwrap();
        let t = rpt.translate_rpt(d.va_base + 0x3123, None).unwrap();
        assert_eq!(t.walk.len(), 2);
        assert_eq!(t.pa.0 & 0xfff, 0x123);
    }

    #[test]
    fn unmapped_va_page_faults() {
        let mut rpt = RegionPageTable::new();
        let d = rpt
            .allocate_pim_region(1 << 20, LeafSize::Small4K, 0)
            .unwrap();
        assert!(matches!(
            rpt.translate_rpt(d.va_base + 0x1000, None),
            Err(SimError::PageFault { .. })
        ));
        assert!(matches!(
            rpt.translate_rpt(0x7000 << 32, None),
            Err(SimError::NotAPimRegion(_))
        ));
        assert!(matches!(
            rpt.translate_rpt(1 << 48, None),
            Err(SimError::NonCanonicalVa(_))
        ));
    }

    #[test]
    fn four_level_walk_is_four_accesses() {
        let mut rpt = RegionPageTable::new();
        let mut four = FourLevelPageTable::new();
        let d = rpt
            .allocate_pim_region(1 << 20, LeafSize::Small4K, 0)
            .unwrap();
        let va = d.va_base + 0x4abc;
        let pa = rpt.map_page(va).unwrap();
        four.map_page(va, pa).unwrap();
        let t = four.translate_4level(va).unwrap();
        assert_eq!(t.walk.len(), 4);
        assert_eq!(t.pa, pa);
    }

    /// Reference-map oracle: pa recorded at map time must equal what the
    /// walkers reconstruct, for both tables, over random mappings.
    #[test]
    fn random_mappings_match_reference_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut rpt = RegionPageTable::new();
        let mut four = FourLevelPageTable::new();
        let d = rpt
            .allocate_pim_region(1 << 30, LeafSize::Small4K, 0)
            .unwrap();
        let mut reference: BTreeMap<u64, PhysAddr> = BTreeMap::new();
        for _ in 0..2_000 {
            let va = d.va_base + (rng.gen::<u64>() % (1 << 30));
            let pa = rpt.map_page(va).unwrap();
            four.map_page(va, PhysAddr(pa.0 & !0xfff)).unwrap();
            reference.insert(va, pa);
        }
        for (&va, &pa) in &reference {
            let t1 = rpt.translate_rpt(va, None).unwrap();
            let t2 = four.translate_4level(va).unwrap();
            assert_eq!(t1.pa, pa);
            assert_eq!(t2.pa, pa, "cross-table oracle mismatch at {va:#x}");
            assert_eq!(t1.walk.len(), 2);
            assert_eq!(t2.walk.len(), 4);
        }
    }

    #[test]
    fn tlb_hit_matches_cold_walk_and_skips_tables() {
        let mut rpt = RegionPageTable::new();
        let mut tlb = PimTlb::new(32);
        let d = rpt
            .allocate_pim_region(1 << 20, LeafSize::Small4K, 0)
            .unwrap();
        let va = d.va_base + 0x2345;
        rpt.map_page(va).unwrap();
        let cold = rpt.translate_rpt(va, Some(&mut tlb)).unwrap();
        assert!(!cold.tlb_hit);
        let hot = rpt.translate_rpt(va, Some(&mut tlb)).unwrap();
        assert!(hot.tlb_hit);
        assert!(hot.walk.is_empty());
        assert_eq!(hot.pa, cold.pa);
    }

    #[test]
    fn shootdown_is_region_selective() {
        let mut rpt = RegionPageTable::new();
        let mut tlb = PimTlb::new(32);
        assert_eq!(tlb.shootdown(0), 0); // empty TLB
        let r = rpt
            .allocate_pim_region(1 << 20, LeafSize::Small4K, 0)
            .unwrap();
        let s = rpt
            .allocate_pim_region(1 << 20, LeafSize::Small4K, 0)
            .unwrap();
        for i in 0..3u64 {
            let va = r.va_base + i * 4096;
            rpt.map_page(va).unwrap();
            rpt.translate_rpt(va, Some(&mut tlb)).unwrap();
        }
        for i in 0..2u64 {
            let va = s.va_base + i * 4096;
            rpt.map_page(va).unwrap();
            rpt.translate_rpt(va, Some(&mut tlb)).unwrap();
        }
        assert_eq!(tlb.shootdown(r.region_id), 3);
        assert_eq!(tlb.len(), 2);
        // translation after shootdown walks the tables again
        let t = rpt.translate_rpt(r.va_base, Some(&mut tlb)).unwrap();
        assert!(!t.walk.is_empty());
    }

    #[test]
    fn tlb_lru_replacement() {
        let mut rpt = RegionPageTable::new();
        let mut tlb = PimTlb::new(2);
        let d = rpt
            .allocate_pim_region(1 << 20, LeafSize::Small4K, 0)
            .unwrap();
        for i in 0..3u64 {
            let va = d.va_base + i * 4096;
            rpt.map_page(va).unwrap();
            rpt.translate_rpt(va, Some(&mut tlb)).unwrap();
        }
        // page 0 was least recently used and must be gone
        assert!(
            !rpt.translate_rpt(d.va_base, Some(&mut tlb))
                .unwrap()
                .tlb_hit
        );
        assert!(
            rpt.translate_rpt(d.va_base + 2 * 4096, Some(&mut tlb))
                .unwrap()
                .tlb_hit
        );
    }
}
