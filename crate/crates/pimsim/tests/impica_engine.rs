//! End-to-end tests of the accelerator engine against host-side oracles
//! and the closed-form timing bounds.

use pimsim::error::SimError;
use pimsim::impica::engine::{ImpicaConfig, ImpicaSim};
use pimsim::impica::program::{run_on_host, MemoryImage, NextAction, TraversalProgram};
use pimsim::mem::{MemSystem, TimingConfig};
use pimsim::rpt::{LeafSize, RegionPageTable};
use pimsim::workloads::linked::{
    btree_contains_host, btree_lookup, gen_btree, gen_hash_table, gen_linked_list,
    hash_contains_host, hash_lookup, list_traversal, list_walk_host,
};

fn sim_with_image(image: MemoryImage, leaf: LeafSize, cfg: ImpicaConfig) -> ImpicaSim {
    let mut rpt = RegionPageTable::new();
    let mut mem = MemSystem::new(TimingConfig::default(), 1);
    let segments: Vec<(u64, usize)> = image.segments().map(|(b, s)| (b, s.len())).collect();
    for &(base, len) in &segments {
        let d = rpt.allocate_pim_region(1 << 32, leaf, 0).unwrap();
        assert_eq!(d.va_base, base, "image segment must start at a region base");
        mem.map_region_to_stack(d.region_id, 0).unwrap();
        rpt.map_range(base, len as u64).unwrap();
    }
    ImpicaSim::new(cfg, mem, rpt, image)
}

#[test]
fn single_node_list_closed_form_makespan() {
    let list = gen_linked_list(1, 0, 0);
    let cost = 10u64;
    let program = list_traversal(list.head, cost);
    let mut sim = sim_with_image(
        list.image.clone(),
        LeafSize::Large2M,
        ImpicaConfig::default(),
    );
    let (results, stats) = sim.run_traversals(vec![program]);
    assert_eq!(results[0].result, list.tail_payload);
    // start compute + one walk access (2MB leaf) + data access + final compute
    let lat = 130;
    assert_eq!(stats.makespan, 2 * cost + 2 * lat);
}

#[test]
fn deep_list_time_tracks_memory_latency() {
    let n = 200u64;
    let cost = 10u64;
    let list = gen_linked_list(n, 1, 0);
    let program = list_traversal(list.head, cost);
    let mut sim = sim_with_image(
        list.image.clone(),
        LeafSize::Large2M,
        ImpicaConfig::default(),
    );
    let (results, stats) = sim.run_traversals(vec![program]);
    assert_eq!(results[0].result, list_walk_host(&list));
    let lower = n * 130 + (n + 1) * cost;
    let upper = lower + 4 * 130; // walk overhead on the few TLB misses
    assert!(
        stats.makespan >= lower && stats.makespan <= upper,
        "makespan {} outside [{lower}, {upper}]",
        stats.makespan
    );
}

#[test]
fn address_engine_mostly_idle_with_one_stream() {
    // memory:compute = 13:1 with the default constants, so a single stream
    // keeps the address engine busy well under 10% of the time
    let list = gen_linked_list(500, 2, 0);
    let program = list_traversal(list.head, 10);
    let mut sim = sim_with_image(
        list.image.clone(),
        LeafSize::Large2M,
        ImpicaConfig::default(),
    );
    let (_, stats) = sim.run_traversals(vec![program]);
    let busy = stats.addr_busy_cycles as f64 / stats.makespan as f64;
    assert!(busy < 0.10, "busy fraction {busy}");
}

#[test]
fn two_streams_overlap_on_one_engine() {
    let list = gen_linked_list(300, 3, 0);
    let single = {
        let mut sim = sim_with_image(
            list.image.clone(),
            LeafSize::Large2M,
            ImpicaConfig::default(),
        );
        let (_, stats) = sim.run_traversals(vec![list_traversal(list.head, 10)]);
        stats.makespan
    };
    let list_b = gen_linked_list(300, 4, 1 << 41);
    let mut both_image = list.image.clone();
    let (b_base, b_bytes) = list_b.image.segments().next().unwrap();
    both_image.add_segment(b_base, b_bytes.clone());
    let mut sim = sim_with_image(both_image, LeafSize::Large2M, ImpicaConfig::default());
    let (results, stats) = sim.run_traversals(vec![
        list_traversal(list.head, 10),
        list_traversal(list_b.head, 10),
    ]);
    assert_eq!(results.len(), 2);
    assert!(
        (stats.makespan as f64) < 1.6 * single as f64,
        "makespan {} vs single {}",
        stats.makespan,
        single
    );
}

#[test]
fn seventeenth_request_backpressures() {
    let list = gen_linked_list(1, 5, 0);
    let mut sim = sim_with_image(
        list.image.clone(),
        LeafSize::Large2M,
        ImpicaConfig::default(),
    );
    for _ in 0..16 {
        sim.enqueue_traversal(list_traversal(list.head, 10))
            .unwrap();
    }
    let err = sim
        .enqueue_traversal(list_traversal(list.head, 10))
        .unwrap_err();
    assert_eq!(err, SimError::Backpressure);
}

#[test]
fn launch_packet_charged_off_chip() {
    let list = gen_linked_list(1, 6, 0);
    let mut sim = sim_with_image(
        list.image.clone(),
        LeafSize::Large2M,
        ImpicaConfig::default(),
    );
    assert_eq!(sim.mem.off_chip_traffic(), 0);
    sim.enqueue_traversal(list_traversal(list.head, 10))
        .unwrap();
    assert_eq!(sim.mem.off_chip_traffic(), 24 + 8);
}

#[test]
fn kernel_body_stays_on_stack() {
    // one region pinned to the engine's stack: besides the launch/result
    // packets, nothing crosses the off-chip channel
    let list = gen_linked_list(50, 7, 0);
    let program = list_traversal(list.head, 10);
    let mut sim = sim_with_image(
        list.image.clone(),
        LeafSize::Small4K,
        ImpicaConfig::default(),
    );
    let (_, _) = sim.run_traversals(vec![program]);
    assert_eq!(sim.mem.off_chip_traffic(), (24 + 8) + (8 + 8));
}

#[test]
fn tlb_miss_issues_two_walks_plus_data() {
    let list = gen_linked_list(1, 8, 0);
    let program = list_traversal(list.head, 10);
    let mut sim = sim_with_image(
        list.image.clone(),
        LeafSize::Small4K,
        ImpicaConfig::default(),
    );
    let (_, stats) = sim.run_traversals(vec![program]);
    assert_eq!(stats.tlb_misses, 1);
    assert_eq!(stats.walk_accesses, 2);
    assert_eq!(stats.loads_issued, 1);
}

#[test]
fn tlb_hit_issues_only_the_data_access() {
    // two nodes on one 4KB page: second access hits the TLB
    let mut image = MemoryImage::new();
    let mut bytes = vec![0u8; 4096];
    bytes[0..8].copy_from_slice(&128u64.to_le_bytes()); // node 0 -> va 128
    bytes[8..16].copy_from_slice(&7u64.to_le_bytes());
    bytes[128..136].copy_from_slice(&0u64.to_le_bytes());
    bytes[136..144].copy_from_slice(&42u64.to_le_bytes());
    image.add_segment(0, bytes);
    let program = list_traversal(0, 10);
    let mut sim = sim_with_image(image, LeafSize::Small4K, ImpicaConfig::default());
    let (results, stats) = sim.run_traversals(vec![program]);
    assert_eq!(results[0].result, 42);
    assert_eq!(stats.tlb_misses, 1);
    assert_eq!(stats.tlb_hits, 1);
    assert_eq!(stats.walk_accesses, 2);
}

#[test]
fn hash_lookups_match_host_oracle_through_engine() {
    let table = gen_hash_table(1 << 8, 384, 9, 0);
    let mut programs = Vec::new();
    let mut expected = Vec::new();
    for i in 0..60u64 {
        let key = if i % 2 == 0 {
            table.keys[(i as usize * 7) % table.keys.len()]
        } else {
            i.wrapping_mul(0x9e37_79b9) | 1
        };
        expected.push(hash_contains_host(&table, key) as u64);
        programs.push(hash_lookup(&table, key, 10));
    }
    let mut sim = sim_with_image(
        table.image.clone(),
        LeafSize::Small4K,
        ImpicaConfig::default(),
    );
    let (results, _) = sim.run_traversals(programs);
    for (r, e) in results.iter().zip(expected) {
        assert_eq!(r.result, e);
    }
}

#[test]
fn btree_lookups_match_oracle_through_engine() {
    let tree = gen_btree(2_000, 13, 0);
    let mut programs = Vec::new();
    let mut expected = Vec::new();
    for i in 0..50usize {
        let key = if i % 2 == 0 {
            tree.sorted_keys[i * 31 % tree.sorted_keys.len()]
        } else {
            (i as u64).wrapping_mul(0x1234_5678_9abc_def1)
        };
        expected.push(btree_contains_host(&tree, key) as u64);
        programs.push(btree_lookup(&tree, key, 10));
    }
    let mut sim = sim_with_image(
        tree.image.clone(),
        LeafSize::Small4K,
        ImpicaConfig::default(),
    );
    let (results, _) = sim.run_traversals(programs);
    for (r, e) in results.iter().zip(expected) {
        assert_eq!(r.result, e);
    }
}

#[test]
fn empty_batch_is_empty_schedule() {
    let list = gen_linked_list(1, 0, 0);
    let mut sim = sim_with_image(
        list.image.clone(),
        LeafSize::Large2M,
        ImpicaConfig::default(),
    );
    let (results, stats) = sim.run_traversals(vec![]);
    assert!(results.is_empty());
    assert_eq!(stats.makespan, 0);
}

#[test]
fn engine_results_deterministic_across_runs() {
    let run = || {
        let tree = gen_btree(500, 99, 0);
        let programs: Vec<TraversalProgram> = tree
            .sorted_keys
            .iter()
            .step_by(17)
            .map(|&k| btree_lookup(&tree, k, 10))
            .collect();
        let mut sim = sim_with_image(
            tree.image.clone(),
            LeafSize::Small4K,
            ImpicaConfig::default(),
        );
        let (results, stats) = sim.run_traversals(programs);
        (
            results
                .iter()
                .map(|r| (r.request_id, r.result, r.finish_time))
                .collect::<Vec<_>>(),
            stats.makespan,
            sim.mem.off_chip_traffic(),
        )
    };
    assert_eq!(run(), run());
}

#[test]
fn traversal_fault_on_unmapped_address_is_recorded() {
    let mut image = MemoryImage::new();
    let mut bytes = vec![0u8; 4096];
    // node points outside any region
    bytes[0..8].copy_from_slice(&(100u64 << 41).to_le_bytes());
    image.add_segment(0, bytes);
    // keep the image readable for the bogus address too
    image.add_segment(100 << 41, vec![0u8; 64]);
    let mut rpt = RegionPageTable::new();
    let mem = MemSystem::new(TimingConfig::default(), 1);
    let d = rpt
        .allocate_pim_region(1 << 20, LeafSize::Small4K, 0)
        .unwrap();
    rpt.map_range(d.va_base, 4096).unwrap();
    let mut sim = ImpicaSim::new(ImpicaConfig::default(), mem, rpt, image);
    let (results, _) = sim.run_traversals(vec![list_traversal(0, 10)]);
    assert!(results.is_empty());
    assert_eq!(sim.faults().len(), 1);
    assert!(matches!(sim.faults()[0].1, SimError::NotAPimRegion(_)));
}

#[test]
fn host_interpreter_agrees_with_engine_on_custom_program() {
    // a two-hop program with an arithmetic finish, exercising StepCtx depth
    let mut image = MemoryImage::new();
    let mut bytes = vec![0u8; 4096];
    bytes[0..8].copy_from_slice(&512u64.to_le_bytes());
    bytes[512..520].copy_from_slice(&1234u64.to_le_bytes());
    image.add_segment(0, bytes);
    let make = || {
        TraversalProgram::new(
            NextAction::Load {
                va: 0,
                size: 8,
                cost: 5,
            },
            |ctx| {
                let v = u64::from_le_bytes(ctx.data[..8].try_into().unwrap());
                if ctx.depth == 1 {
                    NextAction::Load {
                        va: v,
                        size: 8,
                        cost: 5,
                    }
                } else {
                    NextAction::Finish {
                        result: v * 2,
                        cost: 5,
                    }
                }
            },
        )
    };
    let host = run_on_host(&make(), &image, 10);
    let mut sim = sim_with_image(image, LeafSize::Small4K, ImpicaConfig::default());
    let (results, _) = sim.run_traversals(vec![make()]);
    assert_eq!(results[0].result, host);
    assert_eq!(host, 2468);
}
