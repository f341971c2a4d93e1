//! Generators for the shared-data coherence workloads: a PageRank-style
//! graph kernel, an HTAP-style transactions-plus-analytics mix, and small
//! randomized workloads for the atomicity oracle. All generators are pure
//! functions of their parameters and seed.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;
use std::io::BufRead;

use crate::coherence::system::{CoherenceWorkload, KernelSpec, Op};
use crate::error::{SimError, SimResult};

/// Shared vertex/tuple data starts at this byte address; 8 values per line.
const DATA_BASE: u64 = 0;

fn word_addr(index: u64) -> u64 {
    DATA_BASE + index * 8
}

fn lines_of(n_words: u64) -> BTreeSet<u64> {
    (0..n_words.div_ceil(8))
        .map(|l| (DATA_BASE >> 6) + l)
        .collect()
}

/// Seeded Erdős–Rényi-style edge sample: `n_edges` directed edges drawn
/// uniformly (self-loops rejected).
pub fn gen_edges(n_vertices: u64, n_edges: u64, seed: u64) -> Vec<(u64, u64)> {
    assert!(n_vertices >= 2, "need at least 2 vertices for edges");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xed6e);
    let mut edges = Vec::with_capacity(n_edges as usize);
    while edges.len() < n_edges as usize {
        let u = rng.gen_range(0..n_vertices);
        let v = rng.gen_range(0..n_vertices);
        if u != v {
            edges.push((u, v));
        }
    }
    edges
}

/// Parse an edge list: one `u v` pair per line, 0-based vertex ids, `#`
/// comment lines skipped (SNAP-compatible).
pub fn parse_edge_list<R: BufRead>(reader: R) -> SimResult<Vec<(u64, u64)>> {
    let mut edges = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| SimError::Config(format!("edge list read: {e}")))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let (Some(u), Some(v)) = (it.next(), it.next()) else {
            return Err(SimError::Config(format!(
                "edge list line {}: expected 'u v'",
                lineno + 1
            )));
        };
        let u: u64 = u
            .parse()
            .map_err(|_| SimError::Config(format!("edge list line {}: bad id", lineno + 1)))?;
        let v: u64 = v
            .parse()
            .map_err(|_| SimError::Config(format!("edge list line {}: bad id", lineno + 1)))?;
        edges.push((u, v));
    }
    Ok(edges)
}

/// Per-thread slice of the CPU-owned vertex range: 24 vertices (3 cache
/// lines) that the thread's frontier writes stay inside.
const FRONTIER_WORDS: u64 = 24;

/// First vertex of the CPU-owned range: the top `threads * 24` vertices,
/// rounded to a line boundary. Everything below is PIM-owned.
fn cpu_owned_start(n_vertices: u64, cpu_threads: usize) -> u64 {
    let owned = (cpu_threads as u64 * FRONTIER_WORDS).min(n_vertices / 2);
    ((n_vertices - owned) / 8) * 8
}

/// Kernels launch this many at a time; each launch wave is spaced so CPU
/// phases interleave with offloaded phases the way an iterative
/// application alternates them.
const KERNELS_PER_WAVE: usize = 2;

/// Line-aligned destination partitions: whole cache lines dealt evenly
/// across kernels, so no two kernels ever share a cache line.
/// Returns `n_kernels + 1` vertex bounds.
fn partition_bounds(pim_end: u64, n_kernels: usize) -> Vec<u64> {
    let lines_total = pim_end / 8;
    let (base, extra) = (
        lines_total / n_kernels as u64,
        lines_total % n_kernels as u64,
    );
    let mut bounds = vec![0u64];
    for k in 0..n_kernels as u64 {
        let lines = base + u64::from(k < extra);
        bounds.push(bounds[k as usize] + lines * 8);
    }
    bounds
}

/// Graph workload from an explicit edge set, partitioned the way a hybrid
/// CPU+PIM graph framework splits work: vertices are divided into a
/// PIM-owned range (destination partitions, one per kernel, pull-style
/// rank accumulation) and a CPU-owned range at the top of the vertex space
/// where CPU threads update disjoint per-thread frontiers. Reads on both
/// sides roam the whole graph; writes stay inside the owner's range, so
/// read-write conflicts happen only when a kernel's cross-partition read
/// lands on a frontier vertex mid-update. `cpu_share` scales the CPU op
/// count relative to the kernels' (0.425 lands CPU accesses in the 40-45%
/// band of PIM-data accesses).
pub fn graph_workload_from_edges(
    edges: &[(u64, u64)],
    min_vertices: u64,
    cpu_threads: usize,
    pim_cores: usize,
    n_kernels: usize,
    cpu_share: f64,
    seed: u64,
) -> CoherenceWorkload {
    let n_vertices = edges
        .iter()
        .map(|&(u, v)| u.max(v) + 1)
        .max()
        .unwrap_or(1)
        .max(min_vertices);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6afa);
    let pim_end = cpu_owned_start(n_vertices, cpu_threads).max(1);

    // Each kernel owns a disjoint, line-aligned destination-vertex range of
    // the PIM-owned vertices: reads span the whole graph, accumulate-writes
    // stay in the kernel's own partition.
    let mut kernels = Vec::with_capacity(n_kernels);
    let mut pim_ops = 0usize;
    if n_kernels > 0 {
        let bounds = partition_bounds(pim_end, n_kernels);
        for k in 0..n_kernels {
            let (lo, hi) = (bounds[k], bounds[k + 1]);
            let mut ops = Vec::new();
            for &(u, v) in edges.iter().filter(|&&(_, v)| (lo..hi).contains(&v)) {
                ops.push(Op::Read(word_addr(u)));
                ops.push(Op::Rmw(word_addr(v), 1));
            }
            pim_ops += ops.len();
            kernels.push(KernelSpec { ops, arrival: 0 });
        }
    }

    // CPU side: reads roam the whole graph; writes go to a small
    // per-thread frontier, disjoint across threads so a kernel-free run
    // has one deterministic final state under every schedule
    let cpu_total = if n_kernels == 0 {
        edges.len() * 2 // pure CPU workload of comparable size
    } else {
        ((pim_ops as f64) * cpu_share).round() as usize
    };

    // Launch-wave spacing: one serialized wave (worst case, one core at a
    // time, ~20 cycles per kernel op) plus this wave's slice of the CPU
    // phase (~160 cycles per cold-miss-heavy CPU op), so even a
    // serializing mechanism interleaves CPU work between waves.
    let kpw = KERNELS_PER_WAVE.min(pim_cores.max(1));
    if n_kernels > kpw {
        let waves = n_kernels.div_ceil(kpw);
        let serial_wave = (pim_ops / waves) as u64 * 20;
        let cpu_phase = (cpu_total / cpu_threads.max(1)) as u64 * 160 / waves as u64;
        let gap = serial_wave + cpu_phase;
        for (k, spec) in kernels.iter_mut().enumerate() {
            spec.arrival = (k / kpw) as u64 * gap;
        }
    }
    let mut cpu_programs = vec![Vec::new(); cpu_threads];
    let owned = n_vertices - pim_end;
    let ws = (owned / cpu_threads.max(1) as u64).max(1);
    for i in 0..cpu_total {
        let t = i % cpu_threads;
        let lo = pim_end + (t as u64 * ws).min(owned.saturating_sub(1));
        let hi = (lo + ws).min(n_vertices);
        let op = if rng.gen_bool(0.01) {
            let v = rng.gen_range(lo..hi);
            Op::Write(word_addr(v), rng.gen_range(1..1 << 20))
        } else {
            Op::Read(word_addr(rng.gen_range(0..n_vertices)))
        };
        cpu_programs[t].push(op);
    }

    CoherenceWorkload {
        cpu_think: 0,
        n_cpu: cpu_threads,
        n_pim: pim_cores.max(1),
        cpu_programs,
        kernels,
        pim_map: lines_of(n_vertices),
    }
}

/// Fraction of edge sources drawn from the CPU-owned frontier range
/// ("halo" reads: a kernel occasionally consumes a frontier value that a
/// CPU thread may be updating — the read-write conflicts the speculative
/// mechanism must catch).
const HALO_EDGE_FRAC: f64 = 0.005;

/// Fraction of edge sources drawn from another kernel's partition, at
/// least two launch waves away so the two kernels are never concurrently
/// speculative.
const CROSS_EDGE_FRAC: f64 = 0.2;

/// Synthetic graph workload. Edges carry community structure (each
/// kernel's destination partition doubles as a community; most edges stay
/// inside one), the locality a graph partitioner would recover — without
/// it, every kernel reads every other kernel's output lines and the
/// speculative mechanism degenerates to permanent rollback. A small halo
/// fraction of sources comes from the CPU frontier range and a larger
/// cross fraction from distant-wave partitions.
pub fn gen_graph_kernel(
    n_vertices: u64,
    n_edges: u64,
    cpu_threads: usize,
    pim_kernels: usize,
    seed: u64,
) -> CoherenceWorkload {
    let n_kernels = pim_kernels;
    let pim_end = cpu_owned_start(n_vertices, cpu_threads).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xed6e);
    let mut edges = Vec::with_capacity(n_edges as usize);
    if n_kernels == 0 {
        // pure CPU workload: uniform edges
        while edges.len() < n_edges as usize {
            let u = rng.gen_range(0..n_vertices);
            let v = rng.gen_range(0..n_vertices);
            if u != v {
                edges.push((u, v));
            }
        }
        return graph_workload_from_edges(&edges, n_vertices, cpu_threads, 0, 0, 0.425, seed);
    }
    let bounds = partition_bounds(pim_end, n_kernels);
    let part = |k: usize| (bounds[k], bounds[k + 1]);
    let kpw = KERNELS_PER_WAVE.min(n_kernels);
    // per community: the kernels at least two launch waves away
    let distant: Vec<Vec<usize>> = (0..n_kernels)
        .map(|c| {
            (0..n_kernels)
                .filter(|&j| (j / kpw).abs_diff(c / kpw) > 1 && part(j).0 < part(j).1)
                .collect()
        })
        .collect();
    while edges.len() < n_edges as usize {
        let c = rng.gen_range(0..n_kernels);
        let (lo, hi) = part(c);
        if lo >= hi {
            continue;
        }
        let v = rng.gen_range(lo..hi);
        let r = rng.gen::<f64>();
        let u = if r < HALO_EDGE_FRAC && pim_end < n_vertices {
            rng.gen_range(pim_end..n_vertices)
        } else if r < HALO_EDGE_FRAC + CROSS_EDGE_FRAC && !distant[c].is_empty() {
            let j = distant[c][rng.gen_range(0..distant[c].len())];
            let (jlo, jhi) = part(j);
            rng.gen_range(jlo..jhi)
        } else {
            rng.gen_range(lo..hi)
        };
        if u != v {
            edges.push((u, v));
        }
    }
    graph_workload_from_edges(
        &edges,
        n_vertices,
        cpu_threads,
        pim_kernels,
        n_kernels,
        0.425,
        seed,
    )
}

/// HTAP-style mix: CPU agents run short random-tuple transactions (3 ops,
/// read-mostly) while analytic PIM kernels run long scans over the same
/// tuple lines, accumulating into per-kernel result words.
pub fn gen_htap(
    n_tuples: u64,
    n_transactions: u64,
    n_analytic_kernels: usize,
    cpu_threads: usize,
    seed: u64,
) -> CoherenceWorkload {
    assert!(n_tuples >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x47a9);
    // one 8B value per tuple; kernel result accumulators follow the tuple
    // array, one line apart so kernels never conflict through their results
    let result_base = n_tuples.div_ceil(8) * 8;
    let n_words = result_base + n_analytic_kernels as u64 * 8;

    let mut cpu_programs = vec![Vec::new(); cpu_threads];
    for t in 0..n_transactions {
        let prog = &mut cpu_programs[(t % cpu_threads as u64) as usize];
        for _ in 0..3 {
            let tuple = rng.gen_range(0..n_tuples);
            if rng.gen_bool(0.35) {
                prog.push(Op::Write(word_addr(tuple), rng.gen_range(1..1 << 20)));
            } else {
                prog.push(Op::Read(word_addr(tuple)));
            }
        }
    }

    let mut kernels = Vec::with_capacity(n_analytic_kernels);
    for k in 0..n_analytic_kernels {
        // scan a contiguous slice of the tuples, fold into the result word
        let span = (n_tuples / n_analytic_kernels.max(1) as u64).max(1);
        let start = (k as u64 * span) % n_tuples;
        let mut ops = Vec::new();
        for i in 0..span {
            ops.push(Op::Read(word_addr((start + i) % n_tuples)));
            ops.push(Op::Rmw(word_addr(result_base + k as u64 * 8), 1));
        }
        kernels.push(KernelSpec { ops, arrival: 0 });
    }

    CoherenceWorkload {
        cpu_think: 0,
        n_cpu: cpu_threads,
        n_pim: n_analytic_kernels.clamp(1, 16),
        cpu_programs,
        kernels,
        pim_map: lines_of(n_words),
    }
}

/// Small randomized workload for the atomicity oracle: ≤4 CPU agents,
/// ≤2 kernels, ≤64 lines, ≤200 operations total.
pub fn gen_random_coherence(seed: u64) -> CoherenceWorkload {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0c0e);
    let n_cpu = rng.gen_range(1..=4);
    let n_pim = rng.gen_range(1..=2);
    let n_kernels = rng.gen_range(0..=n_pim);
    let n_lines = rng.gen_range(1..=64u64);
    let budget = rng.gen_range(10..=200usize);

    // a random subset of the lines is PIM data
    let mut line_ids: Vec<u64> = (0..n_lines).collect();
    line_ids.shuffle(&mut rng);
    let pim_count = rng.gen_range(1..=n_lines as usize);
    let pim_map: BTreeSet<u64> = line_ids[..pim_count].iter().copied().collect();

    let rand_op = |rng: &mut ChaCha8Rng, lines: &[u64]| {
        let line = lines[rng.gen_range(0..lines.len())];
        let addr = line * 64 + rng.gen_range(0..8) * 8;
        match rng.gen_range(0..3) {
            0 => Op::Read(addr),
            1 => Op::Write(addr, rng.gen_range(1..1 << 16)),
            _ => Op::Rmw(addr, rng.gen_range(1..1 << 8)),
        }
    };

    let kernel_budget = if n_kernels > 0 {
        rng.gen_range(0..=budget / 2)
    } else {
        0
    };
    let cpu_budget = budget - kernel_budget;

    let pim_lines: Vec<u64> = pim_map.iter().copied().collect();
    let mut kernels = Vec::new();
    for k in 0..n_kernels {
        let n_ops = if k + 1 == n_kernels {
            kernel_budget
                - kernels
                    .iter()
                    .map(|k: &KernelSpec| k.ops.len())
                    .sum::<usize>()
        } else {
            rng.gen_range(0..=kernel_budget / n_kernels)
        };
        let ops = (0..n_ops).map(|_| rand_op(&mut rng, &pim_lines)).collect();
        kernels.push(KernelSpec { ops, arrival: 0 });
    }

    let all_lines: Vec<u64> = (0..n_lines).collect();
    let mut cpu_programs = vec![Vec::new(); n_cpu];
    for i in 0..cpu_budget {
        let op = rand_op(&mut rng, &all_lines);
        cpu_programs[i % n_cpu].push(op);
    }

    CoherenceWorkload {
        cpu_think: 0,
        n_cpu,
        n_pim,
        cpu_programs,
        kernels,
        pim_map,
    }
}
