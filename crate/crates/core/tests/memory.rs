use std::collections::BTreeSet;

use modelpar::memory::{
    checkpoint_grouping, memory_report, CheckpointPlan, CheckpointSpec, CheckpointStrategy,
    MemoryConfig,
};
use modelpar::model_graph::ModelSpec;
use modelpar::synth::{transformer, TransformerShape};
use modelpar::topology::{build_topology, Topology};
use proptest::prelude::*;

fn seq<'a>(items: &[(&'a str, usize)]) -> Vec<(&'a str, usize)> {
    items.to_vec()
}

#[test]
fn contiguous_example() {
    let s = seq(&[("a", 0), ("b", 0), ("c", 1), ("d", 1)]);
    assert_eq!(
        checkpoint_grouping(&s, CheckpointStrategy::Contiguous).unwrap(),
        vec![vec!["a", "b"], vec!["c", "d"]]
    );
}

#[test]
fn group_3_example() {
    let s = seq(&[("a", 0), ("b", 0), ("c", 1), ("d", 1), ("e", 1)]);
    assert_eq!(
        checkpoint_grouping(&s, "group_3".parse().unwrap()).unwrap(),
        vec![vec!["a", "b"], vec!["c", "d", "e"]]
    );
}

#[test]
fn each_and_group_2() {
    let s = seq(&[("a", 0), ("b", 0), ("c", 0)]);
    assert_eq!(
        checkpoint_grouping(&s, CheckpointStrategy::Each).unwrap(),
        vec![vec!["a"], vec!["b"], vec!["c"]]
    );
    assert_eq!(
        checkpoint_grouping(&s, CheckpointStrategy::Group(2)).unwrap(),
        vec![vec!["a", "b"], vec!["c"]]
    );
}

#[test]
fn strategy_parsing() {
    for bad in ["group_1", "group_", "group_x", "all", ""] {
        assert!(bad.parse::<CheckpointStrategy>().is_err(), "{bad}");
    }
    assert_eq!("group_4".parse::<CheckpointStrategy>().unwrap(), CheckpointStrategy::Group(4));
    assert_eq!(CheckpointStrategy::Group(4).to_string(), "group_4");
    assert!(checkpoint_grouping::<&str>(&[], CheckpointStrategy::Each).is_err());
}

proptest! {
    #[test]
    fn groups_partition_the_sequence(parts in prop::collection::vec(0usize..3, 1..30), k in 2usize..5, which in 0usize..3) {
        let mut p = parts.clone();
        p.sort_unstable();
        let s: Vec<(usize, usize)> = p.iter().copied().enumerate().collect();
        let strategy = [CheckpointStrategy::Each, CheckpointStrategy::Contiguous, CheckpointStrategy::Group(k)][which];
        let groups = checkpoint_grouping(&s, strategy).unwrap();
        let flat: Vec<usize> = groups.iter().flatten().copied().collect();
        prop_assert_eq!(flat, (0..s.len()).collect::<Vec<_>>());
        for g in &groups {
            prop_assert!(!g.is_empty());
            prop_assert!(g.iter().all(|&i| p[i] == p[g[0]]));
            if let CheckpointStrategy::Group(k) = strategy {
                prop_assert!(g.len() <= k);
            }
        }
    }
}

/// 8 layers over 2 partitions; everything except the layers on partition 0.
fn setup(pp: usize, tp: usize, world: usize) -> (ModelSpec, Vec<usize>, Topology) {
    let spec = transformer(&TransformerShape {
        layers: 8,
        ..Default::default()
    });
    let owner: Vec<usize> = (0..spec.len())
        .map(|m| {
            let id = &spec.module(m).id;
            match id.strip_prefix("layer_").and_then(|r| r.split('.').next()?.parse::<usize>().ok()) {
                Some(l) => l * pp / 8,
                None => 0,
            }
        })
        .collect();
    let topo = build_topology(world, pp, tp, "cluster", false).unwrap();
    (spec, owner, topo)
}

fn no_tp() -> BTreeSet<String> {
    BTreeSet::new()
}

#[test]
fn optimizer_sharding_divides_by_rdp_size() {
    let (spec, owner, topo) = setup(2, 1, 8);
    assert_eq!(topo.rdp_degree, 4);
    let off = memory_report(&spec, &owner, &topo, &no_tp(), &MemoryConfig::default()).unwrap();
    let on_cfg = MemoryConfig {
        shard_optimizer_state: true,
        ..MemoryConfig::default()
    };
    let on = memory_report(&spec, &owner, &topo, &no_tp(), &on_cfg).unwrap();
    for (r, a) in &off.ranks {
        let b = &on.ranks[r];
        assert!(a.optimizer_bytes > 0.0);
        assert_eq!(a.optimizer_bytes / b.optimizer_bytes, 4.0);
        assert_eq!(a.param_bytes, b.param_bytes);
    }
}

#[test]
fn fp16_params_halve_param_bytes() {
    let (spec, owner, topo) = setup(2, 2, 8);
    let fp32 = memory_report(&spec, &owner, &topo, &no_tp(), &MemoryConfig::default()).unwrap();
    let cfg = MemoryConfig {
        fp16_params: true,
        ..MemoryConfig::default()
    };
    let fp16 = memory_report(&spec, &owner, &topo, &no_tp(), &cfg).unwrap();
    for (r, a) in &fp32.ranks {
        assert_eq!(a.param_bytes, 2.0 * fp16.ranks[r].param_bytes);
    }
}

fn checkpointed(m: usize, offload: bool) -> MemoryConfig {
    MemoryConfig {
        microbatches: m,
        offload_activations: offload,
        activation_loading_horizon: 4,
        checkpoints: vec![CheckpointSpec {
            module: "model".into(),
            strategy: CheckpointStrategy::Contiguous,
        }],
        ..MemoryConfig::default()
    }
}

#[test]
fn offload_keeps_horizon_microbatches_resident() {
    let (spec, owner, topo) = setup(2, 1, 2);
    let on = memory_report(&spec, &owner, &topo, &no_tp(), &checkpointed(16, true)).unwrap();
    let off = memory_report(&spec, &owner, &topo, &no_tp(), &checkpointed(16, false)).unwrap();
    for (r, a) in &off.ranks {
        let b = &on.ranks[r];
        if a.checkpoint_activation_bytes > 0.0 {
            assert_eq!(b.checkpoint_activation_bytes / a.checkpoint_activation_bytes, 4.0 / 16.0);
        }
        assert_eq!(
            a.activation_bytes - a.checkpoint_activation_bytes,
            b.activation_bytes - b.checkpoint_activation_bytes
        );
    }
    // Horizon larger than M leaves everything resident.
    let small = memory_report(&spec, &owner, &topo, &no_tp(), &checkpointed(2, true)).unwrap();
    let small_off = memory_report(&spec, &owner, &topo, &no_tp(), &checkpointed(2, false)).unwrap();
    assert_eq!(small, small_off);
}

#[test]
fn checkpointing_stores_only_boundaries() {
    let (spec, owner, _) = setup(2, 1, 2);
    let model = spec.index_of("model").unwrap();
    assert!(spec.module(model).is_sequential);
    let plan = CheckpointPlan::build(&spec, &owner, &checkpointed(1, false).checkpoints).unwrap();
    // Contiguous groups never span partitions; here the model's children
    // split into runs by owner.
    for g in &plan.groups {
        assert!(g.iter().all(|&m| owner[m] == owner[g[0]]));
    }
    let layer = spec.index_of("layer_3.mlp").unwrap();
    assert!(plan.recomputed.contains(&layer));
    let times = plan.recompute_times(&spec, 1.0);
    assert_eq!(times[layer], spec.module(layer).fwd_time);
    assert_eq!(times[spec.root()], 0.0);
}

#[test]
fn tp_params_conserve_across_groups() {
    let (spec, owner, topo) = setup(2, 4, 16);
    let layers: BTreeSet<String> = (0..8).map(|l| format!("layer_{l}")).collect();
    let report = memory_report(&spec, &owner, &topo, &layers, &MemoryConfig::default()).unwrap();
    // One replica: all ranks with rdp_rank 0. Distributed parameters sum
    // over the TP group; replicated ones count once per pipeline stage.
    let mut total = 0.0;
    for m in report.ranks.values().filter(|m| m.rdp_rank == 0) {
        total += m.distributed_param_bytes;
        if m.tp_rank == 0 {
            total += m.param_bytes - m.distributed_param_bytes;
        }
    }
    assert_eq!(total, spec.total_param_bytes() as f64);
    let r0 = &report.ranks[&0];
    assert!(r0.distributed_param_bytes > 0.0 || r0.pp_rank == 0);
}

#[test]
fn features_never_increase_any_component() {
    let (spec, owner, topo) = setup(2, 2, 8);
    let layers: BTreeSet<String> = ["layer_0".to_string()].into();
    for bits in 0u8..8 {
        let base = MemoryConfig {
            shard_optimizer_state: bits & 1 != 0,
            offload_activations: bits & 2 != 0,
            fp16_params: bits & 4 != 0,
            ..checkpointed(8, false)
        };
        let before = memory_report(&spec, &owner, &topo, &layers, &base).unwrap();
        for flip in 0..3 {
            let mut cfg = base.clone();
            match flip {
                0 => cfg.shard_optimizer_state = true,
                1 => cfg.offload_activations = true,
                _ => cfg.fp16_params = true,
            }
            let after = memory_report(&spec, &owner, &topo, &layers, &cfg).unwrap();
            for (r, a) in &before.ranks {
                let b = &after.ranks[r];
                assert!(b.param_bytes <= a.param_bytes);
                assert!(b.grad_bytes <= a.grad_bytes);
                assert!(b.optimizer_bytes <= a.optimizer_bytes);
                assert!(b.activation_bytes <= a.activation_bytes);
            }
        }
    }
}

#[test]
fn config_errors() {
    let (spec, owner, topo) = setup(2, 1, 2);
    let bad_horizon = MemoryConfig {
        activation_loading_horizon: 0,
        ..MemoryConfig::default()
    };
    assert!(memory_report(&spec, &owner, &topo, &no_tp(), &bad_horizon).is_err());
    let unknown = MemoryConfig {
        checkpoints: vec![CheckpointSpec {
            module: "nope".into(),
            strategy: CheckpointStrategy::Each,
        }],
        ..MemoryConfig::default()
    };
    assert!(memory_report(&spec, &owner, &topo, &no_tp(), &unknown).is_err());
    let json = r#"{"checkpoints": [{"module": "model", "strategy": "group_1"}]}"#;
    assert!(serde_json::from_str::<MemoryConfig>(json).is_err());
}
