use std::collections::BTreeSet;

use modelpar::exec::ExecPolicy;
use modelpar::model_graph::{ModelFile, ModelSpec};
use modelpar::synth::{transformer, TransformerShape};
use modelpar::tensor_parallel::oracle::{run_suite, Fault, OracleConfig};
use modelpar::tensor_parallel::reference;
use modelpar::tensor_parallel::*;
use modelpar::Error;
use ndarray::{arr1, arr2, s, Array2, ArrayD, IxDyn};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn group(t: usize) -> TpGroup {
    TpGroup::new(t).unwrap()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn dyn1(v: &[f64]) -> ArrayD<f64> {
    arr1(v).into_dyn()
}

#[test]
fn reduce_scatter_hand_example() {
    let out = reduce_scatter(&[dyn1(&[1.0, 2.0]), dyn1(&[3.0, 4.0])], 0).unwrap();
    assert_eq!(out, vec![dyn1(&[4.0]), dyn1(&[6.0])]);
}

#[test]
fn single_rank_collectives_are_identity() {
    let x = random_array(&mut rng(1), &[3, 4]);
    let kinds = [
        Collective::Allgather { dim: 1 },
        Collective::FwdAllreduce,
        Collective::BwdAllreduce,
        Collective::ScatterAndMerge {
            split_dim: 0,
            merge_dim: 1,
        },
        Collective::ReduceScatter { dim: 0 },
    ];
    for k in kinds {
        assert_eq!(k.forward(std::slice::from_ref(&x)).unwrap(), vec![x.clone()], "{k:?}");
        assert_eq!(k.backward(std::slice::from_ref(&x)).unwrap(), vec![x.clone()], "{k:?}");
    }
}

#[test]
fn collective_errors() {
    let a = random_array(&mut rng(2), &[3, 2]);
    let b = random_array(&mut rng(3), &[2, 2]);
    assert!(matches!(
        reduce_scatter(&[a.clone(), a.clone()], 0),
        Err(Error::Divisibility { size: 3, parts: 2, .. })
    ));
    assert!(matches!(allreduce(&[a.clone(), b]), Err(Error::Shape(_))));
    assert!(matches!(allgather(&[a], 5), Err(Error::Shape(_))));
}

#[test]
fn allreduce_duals() {
    let xs = vec![dyn1(&[1.0]), dyn1(&[2.0])];
    assert_eq!(Collective::FwdAllreduce.backward(&xs).unwrap(), xs);
    assert_eq!(
        Collective::BwdAllreduce.backward(&xs).unwrap(),
        vec![dyn1(&[3.0]), dyn1(&[3.0])]
    );
    assert_eq!(Collective::BwdAllreduce.forward(&xs).unwrap(), xs);
}

proptest! {
    #[test]
    fn rs_then_ag_is_allreduce(t in 1usize..5, rows in 1usize..4, cols in 1usize..4, seed in any::<u64>()) {
        let mut r = rng(seed);
        let xs: Vec<_> = (0..t).map(|_| random_array(&mut r, &[t * rows, cols])).collect();
        let lhs = allgather(&reduce_scatter(&xs, 0).unwrap(), 0).unwrap();
        prop_assert_eq!(lhs, allreduce(&xs).unwrap());
    }

    #[test]
    fn scatter_and_merge_inverts(t in 1usize..5, a in 1usize..3, b in 1usize..3, seed in any::<u64>()) {
        let mut r = rng(seed);
        let xs: Vec<_> = (0..t).map(|_| random_array(&mut r, &[t * a, 2, t * b])).collect();
        let there = scatter_and_merge(&xs, 2, 0).unwrap();
        prop_assert_eq!(scatter_and_merge(&there, 0, 2).unwrap(), xs);
    }

    /// `<A(x), g> = <x, A*(g)>` for every collective and its dual.
    #[test]
    fn backward_is_adjoint(t in 1usize..4, seed in any::<u64>()) {
        let mut r = rng(seed);
        let kinds = [
            Collective::Allgather { dim: 0 },
            Collective::ReduceScatter { dim: 0 },
            Collective::ScatterAndMerge { split_dim: 1, merge_dim: 0 },
        ];
        for k in kinds {
            let xs: Vec<_> = (0..t).map(|_| random_array(&mut r, &[t * 2, t * 3])).collect();
            let ys = k.forward(&xs).unwrap();
            let gs: Vec<_> = ys.iter().map(|y| random_array(&mut r, y.shape())).collect();
            let back = k.backward(&gs).unwrap();
            let lhs: f64 = ys.iter().zip(&gs).map(|(y, g)| (y * g).sum()).sum();
            let rhs: f64 = xs.iter().zip(&back).map(|(x, b)| (x * b).sum()).sum();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0), "{:?}: {} vs {}", k, lhs, rhs);
        }
    }
}

#[test]
fn dist_linear_identity_example() {
    let w = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
    let b = arr1(&[0.0, 0.0]);
    let params = DistLinearParams::from_full(&w, Some(&b), 2).unwrap();
    assert_eq!(params.assemble(), w);
    let mut layer = DistLinear::new(group(2), params).unwrap();
    let xs = vec![arr2(&[[3.0, 5.0]]).into_dyn(), arr2(&[[7.0, 9.0]]).into_dyn()];
    let ys = layer.forward(&xs).unwrap();
    assert_eq!(ys, xs);
}

#[test]
fn dist_linear_single_rank_is_exact() {
    let mut r = rng(4);
    let w = random_matrix(&mut r, 3, 5);
    let b = random_vector(&mut r, 3);
    let x = random_array(&mut r, &[4, 5]);
    let mut layer = DistLinear::new(group(1), DistLinearParams::from_full(&w, Some(&b), 1).unwrap()).unwrap();
    assert_eq!(layer.forward(std::slice::from_ref(&x)).unwrap()[0], affine(&x, &w, Some(&b)).unwrap());
}

#[test]
fn dist_linear_random_matches_reference() {
    let mut r = rng(5);
    let w = random_matrix(&mut r, 4, 4);
    let b = random_vector(&mut r, 4);
    let xs: Vec<_> = (0..2).map(|_| random_array(&mut r, &[3, 4])).collect();
    let mut layer = DistLinear::new(group(2), DistLinearParams::from_full(&w, Some(&b), 2).unwrap()).unwrap();
    let ys = layer.forward(&xs).unwrap();
    let refs: Vec<_> = xs.iter().map(|x| affine(x, &w, Some(&b)).unwrap()).collect();
    assert!(max_rel_err(&ys, &refs) <= 1e-12);
}

#[test]
fn dist_linear_bias_lives_on_rank_zero_only() {
    let mut r = rng(6);
    let w = random_matrix(&mut r, 2, 4);
    let b = random_vector(&mut r, 2);
    let p = DistLinearParams::from_full(&w, Some(&b), 2).unwrap();
    assert_eq!(p.shards.len(), 2);
    assert_eq!(p.bias.as_ref(), Some(&b));
    assert!(matches!(
        DistLinearParams::from_full(&random_matrix(&mut r, 2, 3), None, 2),
        Err(Error::Divisibility { size: 3, parts: 2, .. })
    ));
}

#[test]
fn dist_linear_backward_edge_cases() {
    let mut r = rng(7);
    let w = random_matrix(&mut r, 3, 4);
    let b = random_vector(&mut r, 3);
    let layer = DistLinear::new(group(2), DistLinearParams::from_full(&w, Some(&b), 2).unwrap()).unwrap();
    let zeros = vec![ArrayD::zeros(IxDyn(&[2, 3])); 2];
    assert!(matches!(layer.backward(&zeros), Err(Error::NoForward)));

    let mut layer = layer;
    let xs: Vec<_> = (0..2).map(|_| random_array(&mut r, &[2, 4])).collect();
    layer.forward(&xs).unwrap();
    let g = layer.backward(&zeros).unwrap();
    assert!(g.inputs.iter().all(|x| x.iter().all(|&v| v == 0.0)));
    assert!(g.weight_shards.iter().all(|x| x.iter().all(|&v| v == 0.0)));
    assert!(g.bias.unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn dist_linear_single_rank_backward_is_standard() {
    let mut r = rng(8);
    let w = random_matrix(&mut r, 3, 4);
    let x = random_array(&mut r, &[5, 4]);
    let g = random_array(&mut r, &[5, 3]);
    let mut layer = DistLinear::new(group(1), DistLinearParams::from_full(&w, None, 1).unwrap()).unwrap();
    layer.forward(std::slice::from_ref(&x)).unwrap();
    let grads = layer.backward(std::slice::from_ref(&g)).unwrap();
    let (dx, dw, _) = reference_linear_backward(&x, &w, &g).unwrap();
    assert_eq!(grads.inputs[0], dx);
    assert_eq!(grads.weight_shards[0], dw);
    assert!(grads.bias.is_none());
}

#[test]
fn embedding_examples() {
    let table = Array2::from_shape_fn((4, 4), |(i, j)| (10 * i + j) as f64);
    let emb = DistEmbedding::from_full(&table, 2).unwrap();
    let idx = vec![ArrayD::from_elem(IxDyn(&[1]), 0usize), ArrayD::from_elem(IxDyn(&[1]), 3usize)];
    let out = emb.forward(&group(2), &idx, false).unwrap();
    assert_eq!(out[0], table.slice(s![0..1, ..]).to_owned().into_dyn());
    assert_eq!(out[1], table.slice(s![3..4, ..]).to_owned().into_dyn());

    let bad = [ArrayD::from_elem(IxDyn(&[1]), 0usize), ArrayD::from_shape_vec(IxDyn(&[2]), vec![1, 4]).unwrap()];
    let bad = vec![bad[1].clone(), bad[1].clone()];
    match emb.forward(&group(2), &bad, false) {
        Err(Error::IndexOutOfRange { index: 4, position: 1, rank: 0, vocab: 4 }) => {}
        other => panic!("{other:?}"),
    }

    let one = DistEmbedding::from_full(&table, 1).unwrap();
    let i = ArrayD::from_shape_vec(IxDyn(&[3]), vec![2, 1, 2]).unwrap();
    assert_eq!(
        one.forward(&group(1), std::slice::from_ref(&i), false).unwrap()[0],
        reference::embedding_lookup(&table, &i, 0).unwrap()
    );
}

#[test]
fn prescaled_embedding_skips_gather_and_needs_identical_inputs() {
    let table = Array2::from_shape_fn((5, 4), |(i, j)| (i * 4 + j) as f64);
    let emb = DistEmbedding::from_full(&table, 2).unwrap();
    let i = ArrayD::from_shape_vec(IxDyn(&[2]), vec![4, 1]).unwrap();
    let out = emb.forward(&group(2), &[i.clone(), i.clone()], true).unwrap();
    let expect = reference::embedding_lookup(&table, &i, 0).unwrap();
    assert_eq!(out, vec![expect.clone(), expect]);
    let j = ArrayD::from_shape_vec(IxDyn(&[2]), vec![0, 1]).unwrap();
    assert!(emb.forward(&group(2), &[i, j], true).is_err());
}

#[test]
fn layernorm_examples() {
    let ln = LayerNormParams::identity(8, 1e-5);
    let x = ArrayD::from_elem(IxDyn(&[2, 8]), 0.75);
    let shards = split(&x, 1, 2).unwrap();
    let out = dist_layernorm_forward(&group(2), &shards, &ln).unwrap();
    assert!(out.iter().all(|o| o.iter().all(|&v| v == 0.0)));

    let mut r = rng(9);
    let x = random_array(&mut r, &[3, 8]);
    let ln = LayerNormParams::random(&mut r, 8, 1e-5);
    let reference = reference::layernorm(&x, &ln).unwrap();
    let one = dist_layernorm_forward(&group(1), std::slice::from_ref(&x), &ln).unwrap();
    assert_eq!(one[0], reference);
    let two = dist_layernorm_forward(&group(2), &split(&x, 1, 2).unwrap(), &ln).unwrap();
    assert!(rel_err(&concat(&two, 1).unwrap(), &reference) <= 1e-12);

    // Uneven shard widths still partition the channels.
    let parts = vec![x.slice(s![.., 0..3]).to_owned().into_dyn(), x.slice(s![.., 3..8]).to_owned().into_dyn()];
    let uneven = dist_layernorm_forward(&group(2), &parts, &ln).unwrap();
    assert!(rel_err(&concat(&uneven, 1).unwrap(), &reference) <= 1e-12);

    let empty = vec![ArrayD::zeros(IxDyn(&[2, 0]))];
    assert!(dist_layernorm_forward(&group(1), &empty, &LayerNormParams::identity(0, 1e-5)).is_err());
}

fn layer_cfg(optimize: Optimize) -> TransformerLayerConfig {
    TransformerLayerConfig {
        num_attention_heads: 4,
        attention_head_size: 3,
        hidden_size: 12,
        intermediate_size: 24,
        optimize,
        ..TransformerLayerConfig::default()
    }
}

fn per_rank(seed: u64, t: usize, shape: &[usize]) -> Vec<ArrayD<f64>> {
    let mut r = rng(seed);
    (0..t).map(|_| random_array(&mut r, shape)).collect()
}

#[test]
fn attention_modes_agree_and_match_reference() {
    let cfg = layer_cfg(Optimize::Speed);
    let p = AttentionParams::random(&mut rng(10), 12);
    for t in [1, 2, 4] {
        let xs = per_rank(11, t, &[2, 5, 12]);
        let refs: Vec<_> = xs.iter().map(|x| reference::attention(x, &p, &cfg, None).unwrap()).collect();
        let speed = DistAttention::new(group(t), &cfg, &p).unwrap().forward(&xs, None).unwrap();
        let mem_cfg = layer_cfg(Optimize::Memory);
        let memory = DistAttention::new(group(t), &mem_cfg, &p).unwrap().forward(&xs, None).unwrap();
        assert!(max_rel_err(&speed, &refs) <= 1e-10, "T={t}");
        assert!(max_rel_err(&memory, &refs) <= 1e-10, "T={t}");
        assert!(max_rel_err(&speed, &memory) <= 1e-10, "T={t}");
        if t == 1 {
            assert_eq!(speed, refs);
        }
    }
}

#[test]
fn causal_attention_ignores_the_future() {
    let cfg = TransformerLayerConfig {
        causal_mask_size: Some(6),
        ..layer_cfg(Optimize::Memory)
    };
    let p = AttentionParams::random(&mut rng(12), 12);
    let xs = per_rank(13, 2, &[1, 6, 12]);
    let attn = DistAttention::new(group(2), &cfg, &p).unwrap();
    let base = attn.forward(&xs, None).unwrap();
    let mut perturbed = xs.clone();
    perturbed[0].slice_mut(s![.., 4.., ..]).mapv_inplace(|v| v + 1.0);
    let out = attn.forward(&perturbed, None).unwrap();
    assert_eq!(out[0].slice(s![.., ..4, ..]), base[0].slice(s![.., ..4, ..]));
    assert_ne!(out[0].slice(s![.., 4.., ..]), base[0].slice(s![.., 4.., ..]));
    // Other ranks never see rank 0's samples in their outputs.
    assert_eq!(out[1], base[1]);

    let long = per_rank(14, 2, &[1, 7, 12]);
    assert!(attn.forward(&long, None).is_err());
}

#[test]
fn attention_mask_shape_is_checked() {
    let cfg = layer_cfg(Optimize::Speed);
    let p = AttentionParams::random(&mut rng(15), 12);
    let xs = per_rank(16, 2, &[2, 3, 12]);
    let masks = vec![ArrayD::ones(IxDyn(&[2, 4])); 2];
    assert!(matches!(
        DistAttention::new(group(2), &cfg, &p).unwrap().forward(&xs, Some(&masks)),
        Err(Error::Shape(_))
    ));
}

#[test]
fn divisibility_rules_per_mode() {
    let p = AttentionParams::random(&mut rng(17), 12);
    // 4 heads cannot be split across 3 ranks, but hidden 12 can.
    let speed = layer_cfg(Optimize::Speed);
    let memory = TransformerLayerConfig {
        intermediate_size: 27,
        ..layer_cfg(Optimize::Memory)
    };
    assert!(DistAttention::new(group(3), &speed, &p).is_err());
    assert!(DistAttention::new(group(3), &memory, &p).is_ok());
    let bad_hidden = TransformerLayerConfig {
        hidden_size: 13,
        ..layer_cfg(Optimize::Memory)
    };
    assert!(bad_hidden.validate(1).is_err());
}

#[test]
fn memory_attention_with_heads_not_divisible_by_degree() {
    let cfg = TransformerLayerConfig {
        intermediate_size: 27,
        ..layer_cfg(Optimize::Memory)
    };
    let p = AttentionParams::random(&mut rng(18), 12);
    let xs = per_rank(19, 3, &[1, 4, 12]);
    let refs: Vec<_> = xs.iter().map(|x| reference::attention(x, &p, &cfg, None).unwrap()).collect();
    let out = DistAttention::new(group(3), &cfg, &p).unwrap().forward(&xs, None).unwrap();
    assert!(max_rel_err(&out, &refs) <= 1e-10);
}

#[test]
fn mlp_matches_reference_and_keeps_relu_zeros() {
    for optimize in [Optimize::Speed, Optimize::Memory] {
        let cfg = layer_cfg(optimize);
        let p = MlpParams::random(&mut rng(20), 12, 24);
        let xs = per_rank(21, 2, &[2, 3, 12]);
        let out = DistMlp::new(group(2), &cfg, &p).unwrap().forward(&xs).unwrap();
        let refs: Vec<_> = xs.iter().map(|x| reference::mlp(x, &p, &cfg).unwrap()).collect();
        assert!(max_rel_err(&out, &refs) <= 1e-10);

        // Every pre-activation negative: ReLU zeros make the output exactly b2.
        let relu = TransformerLayerConfig {
            activation: Activation::Relu,
            ..cfg.clone()
        };
        let mut dead = p.clone();
        dead.w1.mapv_inplace(|w| w * 1e-3);
        dead.b1.fill(-100.0);
        let out = DistMlp::new(group(2), &relu, &dead).unwrap().forward(&xs).unwrap();
        for o in out {
            for row in o.to_shape((6, 12)).unwrap().rows() {
                assert_eq!(row, dead.b2.view());
            }
        }
    }
}

#[test]
fn transformer_layer_and_stack_match_reference() {
    for (pre, post) in [(false, true), (true, false), (true, true), (false, false)] {
        for optimize in [Optimize::Speed, Optimize::Memory] {
            let cfg = TransformerLayerConfig {
                pre_layernorm: pre,
                post_layernorm: post,
                ..layer_cfg(optimize)
            };
            let mut r = rng(22);
            let layers: Vec<_> = (0..2).map(|_| TransformerLayerParams::random(&mut r, &cfg)).collect();
            for t in [1, 2] {
                let xs = per_rank(23, t, &[2, 3, 12]);
                let stack = DistTransformer::new(group(t), &cfg, &layers).unwrap();
                let out = stack.forward(&xs, None).unwrap();
                let refs: Vec<_> = xs
                    .iter()
                    .map(|x| reference::transformer(x, &layers, &cfg, None).unwrap())
                    .collect();
                assert!(max_rel_err(&out, &refs) <= 1e-9, "pre={pre} post={post} {optimize:?} T={t}");
            }
        }
    }
}

#[test]
fn post_layernorm_flag_is_wired() {
    let xs = per_rank(24, 2, &[1, 3, 12]);
    let on = layer_cfg(Optimize::Memory);
    let off = TransformerLayerConfig {
        post_layernorm: false,
        ..on.clone()
    };
    let p = TransformerLayerParams::random(&mut rng(25), &on);
    let a = DistTransformerLayer::new(group(2), &on, &p).unwrap().forward(&xs, None).unwrap();
    let b = DistTransformerLayer::new(group(2), &off, &p).unwrap().forward(&xs, None).unwrap();
    assert_ne!(a, b);
}

#[test]
fn cross_attention_flag_is_rejected_at_run_time() {
    let cfg = TransformerLayerConfig {
        add_cross_attention: true,
        ..layer_cfg(Optimize::Speed)
    };
    let p = TransformerLayerParams::random(&mut rng(26), &cfg);
    let layer = DistTransformerLayer::new(group(1), &cfg, &p).unwrap();
    assert!(matches!(
        layer.forward(&per_rank(27, 1, &[1, 2, 12]), None),
        Err(Error::TransformerConfig(_))
    ));
}

#[test]
fn outputs_depend_only_on_own_samples() {
    for optimize in [Optimize::Speed, Optimize::Memory] {
        let cfg = layer_cfg(optimize);
        let p = TransformerLayerParams::random(&mut rng(28), &cfg);
        let layer = DistTransformerLayer::new(group(2), &cfg, &p).unwrap();
        let xs = per_rank(29, 2, &[1, 3, 12]);
        let base = layer.forward(&xs, None).unwrap();
        let mut other = xs.clone();
        other[1].mapv_inplace(|v| -v);
        let out = layer.forward(&other, None).unwrap();
        assert_eq!(out[0], base[0], "{optimize:?}");
        assert_ne!(out[1], base[1]);
    }
}

#[test]
fn parallel_and_sequential_rank_loops_agree_bitwise() {
    let cfg = layer_cfg(Optimize::Memory);
    let p = TransformerLayerParams::random(&mut rng(30), &cfg);
    let xs = per_rank(31, 4, &[1, 3, 12]);
    let seq = DistTransformerLayer::new(group(4), &cfg, &p).unwrap().forward(&xs, None).unwrap();
    let par_group = group(4).with_policy(ExecPolicy::Parallel);
    let par = DistTransformerLayer::new(par_group, &cfg, &p).unwrap().forward(&xs, None).unwrap();
    assert_eq!(seq, par);
}

fn small_suite() -> OracleConfig {
    OracleConfig {
        cases: 6,
        grad_cases: 3,
        seed: 3,
        ..OracleConfig::default()
    }
}

#[test]
fn oracle_suite_passes_and_is_deterministic() {
    let cfg = small_suite();
    let a = run_suite(&cfg, ExecPolicy::Parallel).unwrap();
    let b = run_suite(&cfg, ExecPolicy::Sequential).unwrap();
    assert!(a.pass, "{}", a.to_json());
    assert_eq!(a.to_json(), b.to_json());
    for c in a.checks.iter().filter(|c| c.t == 1) {
        if c.op.starts_with("dist_linear_grad_fd") {
            continue;
        }
        assert_eq!(c.max_rel_err, 0.0, "{} is not exact at T=1", c.op);
    }
}

#[test]
fn injected_wrong_shard_fails_the_suite() {
    let cfg = OracleConfig {
        fault: Some(Fault::WrongShard),
        ..small_suite()
    };
    let report = run_suite(&cfg, ExecPolicy::Parallel).unwrap();
    assert!(!report.pass);
    let failed: BTreeSet<&str> = report.failures().map(|c| c.op.as_str()).collect();
    assert!(failed.contains("dist_linear"));
    assert!(failed.contains("dist_linear_grad_fd") || failed.contains("dist_linear_grad_reference"));
}

fn tp_spec() -> ModelSpec {
    let text = r#"{
      "modules": [
        {"id": "root", "kind": "Transformer"},
        {"id": "emb", "parent": "root", "kind": "Embedding", "param_ids": ["wte"]},
        {"id": "layer", "parent": "root", "kind": "TransformerLayer", "param_ids": ["l"]},
        {"id": "layer.attn", "parent": "layer", "kind": "Attention", "param_ids": ["a"]},
        {"id": "head", "parent": "root", "kind": "Linear", "param_ids": ["wte"]},
        {"id": "proj", "parent": "root", "kind": "Linear", "param_ids": ["p"]},
        {"id": "other", "parent": "root", "kind": "Conv", "param_ids": ["c"]}
      ],
      "params": [
        {"id": "wte", "bytes": 8}, {"id": "l", "bytes": 8}, {"id": "a", "bytes": 8},
        {"id": "p", "bytes": 8}, {"id": "c", "bytes": 8}
      ]
    }"#;
    let file: ModelFile = serde_json::from_str(text).unwrap();
    ModelSpec::new(file).unwrap()
}

fn marks(ids: &[&str]) -> BTreeSet<String> {
    ids.iter().map(|s| s.to_string()).collect()
}

fn replaced(spec: &ModelSpec, m: &BTreeSet<String>) -> Vec<String> {
    plan_replacement(spec, &Registry::builtin(), m)
        .into_iter()
        .map(|r| r.module)
        .collect()
}

#[test]
fn replacement_prefers_the_outermost_module() {
    let spec = tp_spec();
    assert_eq!(replaced(&spec, &marks(&["layer"])), vec!["layer"]);
    assert_eq!(replaced(&spec, &marks(&["layer.attn"])), vec!["layer.attn"]);
}

#[test]
fn replacement_skips_shared_parameters_and_unmarked_modules() {
    let spec = tp_spec();
    assert_eq!(replaced(&spec, &marks(&["emb", "head", "proj"])), vec!["proj"]);
    assert!(replaced(&spec, &marks(&[])).is_empty());
    assert!(replaced(&spec, &marks(&["other"])).is_empty());
}

#[test]
fn enabling_the_root_scope() {
    // Root "Transformer" shares wte between emb and head, both inside it,
    // so the root itself is replaceable.
    let spec = tp_spec();
    assert_eq!(replaced(&spec, &marks(&["root"])), vec!["root"]);
    let no_root = Registry::new([("TransformerLayer", "D"), ("Linear", "L"), ("Embedding", "E")]).unwrap();
    let r: Vec<_> = plan_replacement(&spec, &no_root, &marks(&["root"]))
        .into_iter()
        .map(|r| r.module)
        .collect();
    assert_eq!(r, vec!["layer", "proj"]);
}

#[test]
fn cyclic_registry_is_rejected() {
    assert!(Registry::new([("A", "B"), ("B", "A")]).is_err());
    assert!(Registry::new([("A", "B"), ("B", "C")]).is_ok());
}

#[test]
fn synthetic_transformer_replacement() {
    let spec = transformer(&TransformerShape {
        layers: 4,
        ..Default::default()
    });
    let all: BTreeSet<String> = [spec.module(spec.root()).id.clone()].into();
    let plan = plan_replacement(&spec, &Registry::builtin(), &all);
    let kinds: BTreeSet<&str> = plan.iter().map(|r| r.kind.as_str()).collect();
    // Tied embedding and head are skipped; layers and the final norm are replaced.
    assert!(!kinds.contains("Embedding") && !kinds.contains("Linear"));
    assert_eq!(plan.iter().filter(|r| r.kind == "TransformerLayer").count(), 4);
    assert!(kinds.contains("LayerNorm"));
}
