//! Experiment execution: builds the configured workload, drives the right
//! simulator, and flattens the results into [`MetricsReport`]s. Sweeps over
//! seeds may run on multiple threads; each run owns its simulator, and the
//! results are reduced in seed order so parallelism never changes output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::BufReader;

use crate::coherence::system::{CoherenceSystem, CoherenceWorkload, MechanismKind};
use crate::error::{SimError, SimResult};
use crate::harness::config::{ExperimentConfig, ExperimentKind, WorkloadKind};
use crate::harness::metrics::{normalize_to_cpu_only, MetricsReport};
use crate::impica::engine::{EngineStats, ImpicaConfig, ImpicaSim};
use crate::impica::program::{MemoryImage, TraversalProgram};
use crate::mem::{MemSystem, PhysAddr};
use crate::rpt::{FourLevelPageTable, LeafSize, RegionPageTable};
use crate::workloads::linked::{
    btree_lookup, gen_btree, gen_hash_table, gen_linked_list, hash_lookup, list_traversal,
    DEFAULT_STEP_COST,
};
use crate::workloads::shared::{
    gen_graph_kernel, gen_htap, graph_workload_from_edges, parse_edge_list,
};

/// Build an accelerator instance whose page table and stack mapping cover
/// every segment of `image` (each segment must start at a region base).
pub fn impica_sim_for_image(
    image: MemoryImage,
    leaf: LeafSize,
    cfg: ImpicaConfig,
) -> SimResult<ImpicaSim> {
    let mut rpt = RegionPageTable::new();
    let mut mem = MemSystem::new(crate::mem::TimingConfig::default(), 1);
    let segments: Vec<(u64, usize)> = image.segments().map(|(b, s)| (b, s.len())).collect();
    for &(base, len) in &segments {
        let d = rpt.allocate_pim_region(1 << 32, leaf, 0)?;
        if d.va_base != base {
            return Err(SimError::Config(format!(
                "image segment at {base:#x} is not region-aligned"
            )));
        }
        mem.map_region_to_stack(d.region_id, 0)?;
        rpt.map_range(base, len as u64)?;
    }
    Ok(ImpicaSim::new(cfg, mem, rpt, image))
}

fn impica_programs(cfg: &ExperimentConfig) -> (MemoryImage, Vec<TraversalProgram>) {
    let cost = DEFAULT_STEP_COST;
    match cfg.workload {
        WorkloadKind::List => {
            let list = gen_linked_list(cfg.nodes, cfg.seed, 0);
            let program = list_traversal(list.head, cost);
            (list.image, vec![program])
        }
        WorkloadKind::Hash => {
            let table = gen_hash_table(cfg.buckets, cfg.fill, cfg.seed, 0);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x100c);
            let programs = (0..cfg.lookups)
                .map(|_| hash_lookup(&table, rng.gen(), cost))
                .collect();
            (table.image, programs)
        }
        WorkloadKind::Btree => {
            let tree = gen_btree(cfg.keys, cfg.seed, 0);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xb1ee);
            let programs = (0..cfg.lookups)
                .map(|_| btree_lookup(&tree, rng.gen(), cost))
                .collect();
            (tree.image, programs)
        }
        _ => unreachable!("validated: impica workloads are list|hash|btree"),
    }
}

fn fill_engine_metrics(r: &mut MetricsReport, stats: &EngineStats, off_chip: u64) {
    r.set("makespan", stats.makespan as f64)
        .set("loads-issued", stats.loads_issued as f64)
        .set("cache-hits", stats.cache_hits as f64)
        .set("lock-stalls", stats.lock_stalls as f64)
        .set("tlb-hits", stats.tlb_hits as f64)
        .set("tlb-misses", stats.tlb_misses as f64)
        .set("walk-accesses", stats.walk_accesses as f64)
        .set("context-switches", stats.context_switches as f64)
        .set("off-chip-bytes", off_chip as f64);
    if stats.loads_issued > 0 {
        // the TLB-MPKI analog: misses per thousand traversal steps
        r.set(
            "tlb-misses-per-kilo-step",
            stats.tlb_misses as f64 * 1000.0 / stats.loads_issued as f64,
        );
    }
}

fn run_impica_micro(cfg: &ExperimentConfig) -> SimResult<MetricsReport> {
    let (image, programs) = impica_programs(cfg);
    let engine_cfg = ImpicaConfig {
        tlb_entries: cfg.tlb_entries,
        ..ImpicaConfig::default()
    };
    let mut sim = impica_sim_for_image(image, LeafSize::Small4K, engine_cfg)?;
    let n_programs = programs.len();
    let (results, stats) = sim.run_traversals(programs);
    if let Some((id, err)) = sim.faults().first() {
        return Err(SimError::Config(format!("traversal {id} faulted: {err}")));
    }
    let mut r = MetricsReport::new(cfg.kind.name(), "-", cfg.seed);
    r.set("traversals", results.len() as f64)
        .set("programs", n_programs as f64);
    fill_engine_metrics(&mut r, &stats, sim.mem.off_chip_traffic());
    Ok(r)
}

/// Translation sweep: the region table against the four-level baseline on
/// identically mapped 4KB pages, TLB disabled so every walk is cold.
fn run_impica_sensitivity(cfg: &ExperimentConfig) -> SimResult<MetricsReport> {
    let mut rpt = RegionPageTable::new();
    let d = rpt.allocate_pim_region(1 << 30, LeafSize::Small4K, 0)?;
    let n_pages = 512u64;
    rpt.map_range(d.va_base, n_pages * 4096)?;
    let mut four = FourLevelPageTable::new();
    for p in 0..n_pages {
        let va = d.va_base + p * 4096;
        let pa = rpt.translate_rpt(va, None)?.pa;
        four.map_page(va, PhysAddr(pa.0 & !0xfff))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5e15);
    let (mut rpt_acc, mut four_acc, mut mismatches) = (0u64, 0u64, 0u64);
    for _ in 0..cfg.translations {
        let va = d.va_base + rng.gen_range(0..n_pages * 4096);
        let t_r = rpt.translate_rpt(va, None)?;
        let t_f = four.translate_4level(va)?;
        rpt_acc += t_r.walk.len() as u64;
        four_acc += t_f.walk.len() as u64;
        if t_r.pa != t_f.pa {
            mismatches += 1;
        }
    }
    let mut r = MetricsReport::new(cfg.kind.name(), "-", cfg.seed);
    r.set("translations", cfg.translations as f64)
        .set("rpt-walk-accesses", rpt_acc as f64)
        .set("four-level-walk-accesses", four_acc as f64)
        .set("walk-access-ratio", four_acc as f64 / rpt_acc as f64)
        .set("pa-mismatches", mismatches as f64);
    Ok(r)
}

/// Build the coherence workload configured in `cfg` (graph, optionally
/// from an edge-list file, or HTAP).
pub fn build_coherence_workload(cfg: &ExperimentConfig) -> SimResult<CoherenceWorkload> {
    match cfg.workload {
        WorkloadKind::Graph => {
            if let Some(path) = &cfg.edge_file {
                let file = std::fs::File::open(path)
                    .map_err(|e| SimError::Io(format!("opening {path}: {e}")))?;
                let edges = parse_edge_list(BufReader::new(file))?;
                if edges.is_empty() {
                    return Err(SimError::Config(format!("{path}: no edges")));
                }
                Ok(graph_workload_from_edges(
                    &edges,
                    0,
                    cfg.cpu_cores,
                    cfg.pim_cores,
                    cfg.pim_cores * 2,
                    0.425,
                    cfg.seed,
                ))
            } else {
                Ok(gen_graph_kernel(
                    cfg.vertices,
                    cfg.edges,
                    cfg.cpu_cores,
                    cfg.pim_cores,
                    cfg.seed,
                ))
            }
        }
        WorkloadKind::Htap => Ok(gen_htap(
            cfg.tuples,
            cfg.transactions,
            cfg.analytic_kernels,
            cfg.cpu_cores,
            cfg.seed,
        )),
        _ => unreachable!("validated: coherence workloads are graph|htap"),
    }
}

fn run_coherence_arm(
    cfg: &ExperimentConfig,
    workload: &CoherenceWorkload,
    mech: MechanismKind,
) -> MetricsReport {
    let mut sys = CoherenceSystem::new(mech, workload, cfg.seed);
    sys.run();
    let mut r = MetricsReport::new(cfg.kind.name(), mech.name(), cfg.seed);
    r.set("off-chip-bytes", sys.off_chip_bytes() as f64)
        .set("makespan", sys.makespan() as f64)
        .set("commits", sys.metrics.commits as f64)
        .set("rollbacks", sys.metrics.rollbacks as f64)
        .set("locked-commits", sys.metrics.locked_commits as f64)
        .set("blocked-cycles", sys.metrics.blocked_cycles as f64)
        .set("cg-flushed-lines", sys.metrics.cg_flushed_lines as f64)
        .set("cpu-ops", sys.metrics.cpu_ops as f64)
        .set("kernel-ops", sys.metrics.kernel_ops as f64)
        .set(
            "signature-bytes",
            sys.metrics.lazypim_coherence_bytes as f64,
        );
    r
}

pub fn run_experiment(cfg: &ExperimentConfig) -> SimResult<MetricsReport> {
    cfg.validate()?;
    match cfg.kind {
        ExperimentKind::ImpicaMicro => run_impica_micro(cfg),
        ExperimentKind::ImpicaSensitivity => run_impica_sensitivity(cfg),
        ExperimentKind::Coherence => {
            let workload = build_coherence_workload(cfg)?;
            Ok(run_coherence_arm(cfg, &workload, cfg.mechanism))
        }
    }
}

/// One run per mechanism on the same seed and workload, with traffic and
/// makespan normalized against the CpuOnly arm (run implicitly if absent).
pub fn compare_mechanisms(
    cfg: &ExperimentConfig,
    mechanisms: &[MechanismKind],
) -> SimResult<Vec<MetricsReport>> {
    cfg.validate()?;
    if mechanisms.is_empty() {
        return Err(SimError::Config("mechanism list is empty".into()));
    }
    if cfg.kind != ExperimentKind::Coherence {
        // mechanism comparison outside the coherence experiment degenerates
        // to the page-table sweep (rpt vs four-level walk ratio)
        return run_experiment(cfg).map(|r| vec![r]);
    }
    let workload = build_coherence_workload(cfg)?;
    let mut arms: Vec<MechanismKind> = Vec::new();
    if !mechanisms.contains(&MechanismKind::CpuOnly) {
        arms.push(MechanismKind::CpuOnly);
    }
    arms.extend_from_slice(mechanisms);
    let mut reports: Vec<MetricsReport> = arms
        .iter()
        .map(|&m| run_coherence_arm(cfg, &workload, m))
        .collect();
    normalize_to_cpu_only(&mut reports, &["off-chip-bytes", "makespan"]);
    Ok(reports)
}

/// Run the configured experiment once per seed. Runs execute on up to
/// `threads` worker threads (cap it with `PIMBENCH_THREADS`); the output
/// order always follows `seeds`.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    seeds: &[u64],
    threads: usize,
) -> SimResult<Vec<MetricsReport>> {
    cfg.validate()?;
    let threads = threads.clamp(1, seeds.len().max(1));
    let mut slots: Vec<Option<SimResult<MetricsReport>>> = Vec::new();
    slots.resize_with(seeds.len(), || None);
    std::thread::scope(|scope| {
        for (worker, chunk) in slots.chunks_mut(seeds.len().div_ceil(threads)).enumerate() {
            let chunk_seeds = &seeds[worker * seeds.len().div_ceil(threads)..][..chunk.len()];
            scope.spawn(move || {
                for (slot, &seed) in chunk.iter_mut().zip(chunk_seeds) {
                    let mut c = cfg.clone();
                    c.seed = seed;
                    *slot = Some(run_experiment(&c));
                }
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("every seed slot filled"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mem::TimingConfig;

    fn micro_cfg(workload: WorkloadKind) -> ExperimentConfig {
        ExperimentConfig {
            kind: ExperimentKind::ImpicaMicro,
            workload,
            nodes: 1,
            buckets: 64,
            fill: 96,
            keys: 200,
            lookups: 50,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn single_node_list_matches_closed_form() {
        let cfg = micro_cfg(WorkloadKind::List);
        let r = run_experiment(&cfg).unwrap();
        let t = TimingConfig::default();
        // first access walks the (resident) page table once for a 4KB leaf:
        // 2 accesses, then the data load; compute before and after
        let expected = 2.0 * DEFAULT_STEP_COST as f64 + 3.0 * t.pim_dram_latency as f64;
        assert_eq!(r.get("makespan"), Some(expected));
    }

    #[test]
    fn sensitivity_walk_ratio_is_two() {
        let cfg = ExperimentConfig {
            kind: ExperimentKind::ImpicaSensitivity,
            translations: 500,
            ..ExperimentConfig::default()
        };
        let r = run_experiment(&cfg).unwrap();
        assert_eq!(r.get("walk-access-ratio"), Some(2.0));
        assert_eq!(r.get("pa-mismatches"), Some(0.0));
    }

    #[test]
    fn compare_always_includes_cpu_only_arm() {
        let cfg = ExperimentConfig {
            kind: ExperimentKind::Coherence,
            workload: WorkloadKind::Graph,
            vertices: 64,
            edges: 256,
            cpu_cores: 4,
            pim_cores: 4,
            ..ExperimentConfig::default()
        };
        let reports =
            compare_mechanisms(&cfg, &[MechanismKind::LazyPim, MechanismKind::Fg]).unwrap();
        assert_eq!(reports[0].mechanism, "cpu-only");
        assert_eq!(reports[0].get("off-chip-bytes-vs-cpu-only"), Some(1.0));
        assert!(reports
            .iter()
            .all(|r| r.get("off-chip-bytes-vs-cpu-only").is_some()));
    }

    #[test]
    fn ideal_traffic_never_above_fg() {
        // the ideal mechanism pays no coherence traffic at all, so summed
        // over seeds it stays at or below fine-grained coherence
        let mut cfg = ExperimentConfig {
            kind: ExperimentKind::Coherence,
            workload: WorkloadKind::Graph,
            vertices: 64,
            edges: 256,
            cpu_cores: 4,
            pim_cores: 4,
            ..ExperimentConfig::default()
        };
        let (mut ideal, mut fg) = (0.0, 0.0);
        for seed in 0..5 {
            cfg.seed = seed;
            let reports =
                compare_mechanisms(&cfg, &[MechanismKind::IdealPim, MechanismKind::Fg]).unwrap();
            let get = |m: &str| {
                reports
                    .iter()
                    .find(|r| r.mechanism == m)
                    .and_then(|r| r.get("off-chip-bytes"))
                    .unwrap()
            };
            ideal += get("ideal");
            fg += get("fg");
        }
        assert!(ideal <= fg, "ideal {ideal} fg {fg}");
    }

    #[test]
    fn sweep_is_order_stable_and_parallel_safe() {
        let cfg = ExperimentConfig {
            kind: ExperimentKind::ImpicaSensitivity,
            translations: 100,
            ..ExperimentConfig::default()
        };
        let seeds: Vec<u64> = (0..6).collect();
        let serial = run_sweep(&cfg, &seeds, 1).unwrap();
        let parallel = run_sweep(&cfg, &seeds, 4).unwrap();
        assert_eq!(serial, parallel);
        assert_eq!(serial.len(), 6);
        assert_eq!(serial[3].seed, 3);
    }

    #[test]
    fn hash_and_btree_micro_run_clean() {
        for wk in [WorkloadKind::Hash, WorkloadKind::Btree] {
            let cfg = micro_cfg(wk);
            let r = run_experiment(&cfg).unwrap();
            assert_eq!(r.get("traversals"), Some(50.0));
            assert!(r.get("makespan").unwrap() > 0.0);
        }
    }
}
