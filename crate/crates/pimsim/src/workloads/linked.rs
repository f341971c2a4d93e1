//! Deterministic generators for the pointer-chasing microbenchmarks:
//! linked list, chained hash table, and a 16-way B-tree, each laid out in a
//! flat region image together with the traversal programs that walk it.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::impica::program::{MemoryImage, NextAction, TraversalProgram};

pub const NODE_BYTES: u64 = 64;
/// Default address-computation cost per traversal step; with the default
/// 130-cycle internal DRAM latency this sits inside the 10-15x
/// memory-to-compute band.
pub const DEFAULT_STEP_COST: u64 = 10;

fn word(data: &[u8], idx: usize) -> u64 {
    u64::from_le_bytes(data[idx * 8..idx * 8 + 8].try_into().unwrap())
}

fn put_word(data: &mut [u8], idx: usize, v: u64) {
    data[idx * 8..idx * 8 + 8].copy_from_slice(&v.to_le_bytes());
}

/// Linked list: 64B nodes, word 0 = next va (0 terminates), word 1 = payload.
/// Node placement is a seeded shuffle of the slot order, so consecutive list
/// elements land in unrelated parts of the region.
pub struct LinkedList {
    pub image: MemoryImage,
    pub head: u64,
    pub n_nodes: u64,
    pub tail_payload: u64,
}

pub fn gen_linked_list(n_nodes: u64, seed: u64, va_base: u64) -> LinkedList {
    assert!(n_nodes >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut slots: Vec<u64> = (0..n_nodes).collect();
    slots.shuffle(&mut rng);
    // slot 0 of the segment stays empty so that no node address equals the
    // `next == 0` terminator when the region starts at va 0
    let mut bytes = vec![0u8; ((n_nodes + 1) * NODE_BYTES) as usize];
    let addr_of = |slot: u64| va_base + (slot + 1) * NODE_BYTES;
    for i in 0..n_nodes {
        let here = slots[i as usize];
        let next = if i + 1 < n_nodes {
            addr_of(slots[(i + 1) as usize])
        } else {
            0
        };
        let payload = rng.gen::<u64>();
        let off = ((here + 1) * NODE_BYTES) as usize;
        put_word(&mut bytes[off..off + 64], 0, next);
        put_word(&mut bytes[off..off + 64], 1, payload);
    }
    let tail_off = ((slots[(n_nodes - 1) as usize] + 1) * NODE_BYTES) as usize;
    let tail_payload = word(&bytes[tail_off..tail_off + 64], 1);
    let mut image = MemoryImage::new();
    let head = addr_of(slots[0]);
    image.add_segment(va_base, bytes);
    LinkedList {
        image,
        head,
        n_nodes,
        tail_payload,
    }
}

/// Walks the whole chain and emits the tail payload.
pub fn list_traversal(head: u64, step_cost: u64) -> TraversalProgram {
    TraversalProgram::new(
        NextAction::Load {
            va: head,
            size: 64,
            cost: step_cost,
        },
        move |ctx| {
            let next = word(ctx.data, 0);
            if next == 0 {
                NextAction::Finish {
                    result: word(ctx.data, 1),
                    cost: step_cost,
                }
            } else {
                NextAction::Load {
                    va: next,
                    size: 64,
                    cost: step_cost,
                }
            }
        },
    )
}

/// Host-side reference walk of the same image.
pub fn list_walk_host(list: &LinkedList) -> u64 {
    let mut va = list.head;
    loop {
        let next = list.image.read_u64(va);
        if next == 0 {
            return list.image.read_u64(va + 8);
        }
        va = next;
    }
}

fn mix_hash(key: u64, mul: u64) -> u64 {
    key.wrapping_mul(mul | 1) >> 16
}

/// Chained hash table: an 8B-per-bucket head array at the region base,
/// 64B chain nodes behind it (word 0 = next, word 1 = key, word 2 = value).
pub struct HashTable {
    pub image: MemoryImage,
    pub va_base: u64,
    pub buckets: u64,
    pub hash_mul: u64,
    pub keys: Vec<u64>,
}

pub fn gen_hash_table(buckets: u64, fill: u64, seed: u64, va_base: u64) -> HashTable {
    assert!(buckets.is_power_of_two());
    assert!(fill <= buckets * 4, "chain sanity: load factor above 4");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hash_mul = rng.gen::<u64>() | 1;
    let array_bytes = buckets * 8;
    let mut bytes = vec![0u8; (array_bytes + fill * NODE_BYTES) as usize];
    let mut keys = Vec::with_capacity(fill as usize);
    for i in 0..fill {
        let key = rng.gen::<u64>() | 1; // never 0
        keys.push(key);
        let b = mix_hash(key, hash_mul) % buckets;
        let node_va = va_base + array_bytes + i * NODE_BYTES;
        let head_off = (b * 8) as usize;
        let old_head = u64::from_le_bytes(bytes[head_off..head_off + 8].try_into().unwrap());
        // push-front chaining
        let node_off = (array_bytes + i * NODE_BYTES) as usize;
        put_word(&mut bytes[node_off..node_off + 64], 0, old_head);
        put_word(&mut bytes[node_off..node_off + 64], 1, key);
        put_word(&mut bytes[node_off..node_off + 64], 2, rng.gen());
        bytes[head_off..head_off + 8].copy_from_slice(&node_va.to_le_bytes());
    }
    let mut image = MemoryImage::new();
    image.add_segment(va_base, bytes);
    HashTable {
        image,
        va_base,
        buckets,
        hash_mul,
        keys,
    }
}

/// Hashes the key, walks the bucket chain, and emits 1 on hit, 0 on miss.
pub fn hash_lookup(table: &HashTable, key: u64, step_cost: u64) -> TraversalProgram {
    let b = mix_hash(key, table.hash_mul) % table.buckets;
    let head_va = table.va_base + b * 8;
    TraversalProgram::new(
        NextAction::Load {
            va: head_va,
            size: 8,
            cost: step_cost,
        },
        move |ctx| {
            if ctx.depth == 1 {
                // bucket head pointer
                let node = word(ctx.data, 0);
                if node == 0 {
                    return NextAction::Finish {
                        result: 0,
                        cost: step_cost,
                    };
                }
                return NextAction::Load {
                    va: node,
                    size: 64,
                    cost: step_cost,
                };
            }
            if word(ctx.data, 1) == key {
                return NextAction::Finish {
                    result: 1,
                    cost: step_cost,
                };
            }
            let next = word(ctx.data, 0);
            if next == 0 {
                NextAction::Finish {
                    result: 0,
                    cost: step_cost,
                }
            } else {
                NextAction::Load {
                    va: next,
                    size: 64,
                    cost: step_cost,
                }
            }
        },
    )
}

pub fn hash_contains_host(table: &HashTable, key: u64) -> bool {
    let b = mix_hash(key, table.hash_mul) % table.buckets;
    let mut node = table.image.read_u64(table.va_base + b * 8);
    while node != 0 {
        if table.image.read_u64(node + 8) == key {
            return true;
        }
        node = table.image.read_u64(node);
    }
    false
}

// B-tree node layout (34 words, 272B):
//   word 0: (is_leaf << 32) | key_count
//   words 1..=16: keys
//   words 17..=33: child node vas
pub const BTREE_NODE_BYTES: u64 = 272;
const BTREE_SLOT_BYTES: u64 = 320;
pub const BTREE_MAX_KEYS: usize = 16;

pub struct BTree {
    pub image: MemoryImage,
    pub root: u64,
    pub sorted_keys: Vec<u64>,
    pub height: u32,
}

/// Split `m` items into chunks of min..=max (target in between), splitting
/// the tail evenly when it would otherwise come up short.
fn chunk_sizes(m: usize, min: usize, target: usize, max: usize) -> Vec<usize> {
    let mut sizes = Vec::new();
    let mut left = m;
    while left > 0 {
        if left <= max {
            sizes.push(left);
            left = 0;
        } else if left - target >= min {
            sizes.push(target);
            left -= target;
        } else {
            let a = left / 2;
            sizes.push(a);
            sizes.push(left - a);
            left = 0;
        }
    }
    sizes
}

/// Bulk-loads a 16-way B-tree from randomly generated keys.
pub fn gen_btree(n_keys: u64, seed: u64, va_base: u64) -> BTree {
    assert!(n_keys >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keys: Vec<u64> = Vec::with_capacity(n_keys as usize);
    let mut seen = std::collections::BTreeSet::new();
    while keys.len() < n_keys as usize {
        let k = rng.gen::<u64>();
        if seen.insert(k) {
            keys.push(k);
        }
    }
    keys.sort_unstable();

    struct Builder {
        bytes: Vec<u8>,
        va_base: u64,
    }
    impl Builder {
        fn alloc(&mut self) -> (u64, usize) {
            let off = self.bytes.len();
            self.bytes.resize(off + BTREE_SLOT_BYTES as usize, 0);
            (self.va_base + off as u64, off)
        }
        fn write_node(&mut self, off: usize, is_leaf: bool, keys: &[u64], children: &[u64]) {
            let node = &mut self.bytes[off..off + BTREE_NODE_BYTES as usize];
            put_word(node, 0, ((is_leaf as u64) << 32) | keys.len() as u64);
            for (i, &k) in keys.iter().enumerate() {
                put_word(node, 1 + i, k);
            }
            for (i, &c) in children.iter().enumerate() {
                put_word(node, 17 + i, c);
            }
        }
    }
    let mut b = Builder {
        bytes: Vec::new(),
        va_base,
    };

    // leaves
    let mut level: Vec<(u64, u64)> = Vec::new(); // (min key, node va)
    let mut idx = 0usize;
    for sz in chunk_sizes(keys.len(), 7, 12, 15) {
        let chunk = &keys[idx..idx + sz];
        idx += sz;
        let (va, off) = b.alloc();
        b.write_node(off, true, chunk, &[]);
        level.push((chunk[0], va));
    }
    let mut height = 1;
    // internal levels
    while level.len() > 1 {
        let mut next_level = Vec::new();
        let mut i = 0usize;
        for sz in chunk_sizes(level.len(), 8, 12, 16) {
            let group = &level[i..i + sz];
            i += sz;
            let seps: Vec<u64> = group[1..].iter().map(|&(min, _)| min).collect();
            let children: Vec<u64> = group.iter().map(|&(_, va)| va).collect();
            let (va, off) = b.alloc();
            b.write_node(off, false, &seps, &children);
            next_level.push((group[0].0, va));
        }
        level = next_level;
        height += 1;
    }
    let root = level[0].1;
    let mut image = MemoryImage::new();
    image.add_segment(va_base, b.bytes);
    BTree {
        image,
        root,
        sorted_keys: keys,
        height,
    }
}

fn btree_descend(data: &[u8], key: u64) -> Option<u64> {
    let header = word(data, 0);
    let is_leaf = (header >> 32) != 0;
    let count = (header & 0xffff_ffff) as usize;
    if is_leaf {
        None
    } else {
        let mut child = count; // rightmost by default
        for i in 0..count {
            if key < word(data, 1 + i) {
                child = i;
                break;
            }
        }
        Some(word(data, 17 + child))
    }
}

fn btree_leaf_contains(data: &[u8], key: u64) -> bool {
    let count = (word(data, 0) & 0xffff_ffff) as usize;
    (0..count).any(|i| word(data, 1 + i) == key)
}

/// Descends root to leaf comparing keys; emits 1 if the key is present.
pub fn btree_lookup(tree: &BTree, key: u64, step_cost: u64) -> TraversalProgram {
    TraversalProgram::new(
        NextAction::Load {
            va: tree.root,
            size: BTREE_NODE_BYTES as u32,
            cost: step_cost,
        },
        move |ctx| match btree_descend(ctx.data, key) {
            Some(child) => NextAction::Load {
                va: child,
                size: BTREE_NODE_BYTES as u32,
                cost: step_cost,
            },
            None => NextAction::Finish {
                result: btree_leaf_contains(ctx.data, key) as u64,
                cost: step_cost,
            },
        },
    )
}

/// Independent oracle: binary search over the sorted key array.
pub fn btree_contains_host(tree: &BTree, key: u64) -> bool {
    tree.sorted_keys.binary_search(&key).is_ok()
}

/// Node occupancy of every non-root node, for structural checks.
pub fn btree_occupancies(tree: &BTree) -> Vec<usize> {
    let mut out = Vec::new();
    let (_, bytes) = tree.image.segments().next().unwrap();
    let mut stack = vec![tree.root];
    let base = tree.image.segments().next().unwrap().0;
    while let Some(va) = stack.pop() {
        let off = (va - base) as usize;
        let data = &bytes[off..off + BTREE_NODE_BYTES as usize];
        let header = word(data, 0);
        let is_leaf = (header >> 32) != 0;
        let count = (header & 0xffff_ffff) as usize;
        if va != tree.root {
            out.push(count);
        }
        if !is_leaf {
            for i in 0..=count {
                stack.push(word(data, 17 + i));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::impica::program::run_on_host;

    #[test]
    fn single_node_list_is_one_load() {
        let list = gen_linked_list(1, 0, 0);
        let program = list_traversal(list.head, 10);
        // one load: the host walk consumes exactly one node
        assert_eq!(run_on_host(&program, &list.image, 1), list.tail_payload);
    }

    #[test]
    fn list_traversal_matches_host_walk() {
        // va_base 0 is the regression case: no node address may collide
        // with the null terminator
        for (seed, base) in [(0, 0), (1, 0), (2, 1 << 20), (3, 1 << 20), (4, 0)] {
            let list = gen_linked_list(500, seed, base);
            assert_eq!(list_walk_host(&list), list.tail_payload);
            let program = list_traversal(list.head, 10);
            assert_eq!(run_on_host(&program, &list.image, 501), list.tail_payload);
        }
    }

    #[test]
    fn list_generation_is_replayable() {
        let a = gen_linked_list(100, 7, 0);
        let b = gen_linked_list(100, 7, 0);
        let (_, sa) = a.image.segments().next().unwrap();
        let (_, sb) = b.image.segments().next().unwrap();
        assert_eq!(sa, sb);
        let c = gen_linked_list(100, 8, 0);
        let (_, sc) = c.image.segments().next().unwrap();
        assert_ne!(sa, sc);
    }

    #[test]
    fn hash_lookup_matches_host_oracle() {
        let table = gen_hash_table(1 << 10, 3 << 9, 11, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut hits = 0;
        for i in 0..10_000 {
            let key = if i % 2 == 0 {
                table.keys[rng.gen::<usize>() % table.keys.len()]
            } else {
                rng.gen::<u64>() | 1
            };
            let expect = hash_contains_host(&table, key) as u64;
            hits += expect;
            let program = hash_lookup(&table, key, 10);
            assert_eq!(run_on_host(&program, &table.image, 10_000), expect);
        }
        assert!(hits >= 5_000);
    }

    #[test]
    fn missing_key_in_empty_bucket_is_one_load() {
        // a table with a single filled bucket: any key hashing elsewhere
        // terminates after reading the bucket head
        let table = gen_hash_table(1 << 10, 1, 3, 0);
        let mut key = 2;
        while mix_hash(key, table.hash_mul) % table.buckets
            == mix_hash(table.keys[0], table.hash_mul) % table.buckets
        {
            key += 2;
        }
        let program = hash_lookup(&table, key, 10);
        assert_eq!(run_on_host(&program, &table.image, 1), 0);
    }

    #[test]
    fn hash_chain_lengths_sum_to_fill() {
        let table = gen_hash_table(1 << 8, 384, 9, 0);
        let mut total = 0;
        for b in 0..table.buckets {
            let mut node = table.image.read_u64(b * 8);
            while node != 0 {
                total += 1;
                node = table.image.read_u64(node);
            }
        }
        assert_eq!(total, 384);
    }

    #[test]
    fn single_key_btree_is_depth_one() {
        let tree = gen_btree(1, 0, 0);
        assert_eq!(tree.height, 1);
        let key = tree.sorted_keys[0];
        let program = btree_lookup(&tree, key, 10);
        assert_eq!(run_on_host(&program, &tree.image, 1), 1);
    }

    #[test]
    fn btree_lookup_matches_binary_search_oracle() {
        let tree = gen_btree(5_000, 21, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for i in 0..5_000 {
            let key = if i % 2 == 0 {
                tree.sorted_keys[rng.gen::<usize>() % tree.sorted_keys.len()]
            } else {
                rng.gen::<u64>()
            };
            let expect = btree_contains_host(&tree, key) as u64;
            let program = btree_lookup(&tree, key, 10);
            assert_eq!(run_on_host(&program, &tree.image, 10), expect);
        }
    }

    #[test]
    fn btree_occupancy_in_bounds() {
        for n in [50u64, 500, 5_000] {
            let tree = gen_btree(n, 33, 0);
            for occ in btree_occupancies(&tree) {
                assert!((7..=15).contains(&occ), "occupancy {occ} out of bounds");
            }
        }
    }

    #[test]
    fn chunk_sizes_respect_bounds() {
        for m in 1..400 {
            let sizes = chunk_sizes(m, 7, 12, 15);
            assert_eq!(sizes.iter().sum::<usize>(), m);
            if sizes.len() > 1 {
                for &s in &sizes {
                    assert!((7..=15).contains(&s), "m={m} size={s}");
                }
            }
        }
    }
}
