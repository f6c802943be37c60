//! Synthetic model descriptions for tests, benchmarks and examples.

use rand::Rng;

use crate::model_graph::{ModelFile, ModelSpec, ModuleDesc, ParamDesc};

fn module(id: impl Into<String>, parent: Option<&str>) -> ModuleDesc {
    ModuleDesc {
        id: id.into(),
        parent: parent.map(Into::into),
        param_ids: Vec::new(),
        fwd_time: 0.0,
        activation_bytes: 0,
        is_sequential: false,
        kind: None,
    }
}

/// Shape of a synthetic decoder-style transformer.
#[derive(Clone, Debug)]
pub struct TransformerShape {
    pub layers: usize,
    pub hidden: u64,
    pub vocab: u64,
    pub seq_len: u64,
    pub microbatch: u64,
    /// Forward seconds per layer for one microbatch.
    pub layer_time: f64,
    /// Whether the output head reuses the token embedding weights.
    pub tied_head: bool,
    /// Put the layers under a sequential `layers` container instead of
    /// directly under `model`.
    pub nested: bool,
}

impl Default for TransformerShape {
    fn default() -> Self {
        Self {
            layers: 48,
            hidden: 1024,
            vocab: 8192,
            seq_len: 512,
            microbatch: 2,
            layer_time: 4e-3,
            tied_head: true,
            nested: false,
        }
    }
}

/// A transformer with `step -> model -> {embedding, layer_0.., final_norm,
/// lm_head}`, every layer holding an attention and an MLP block. With
/// `nested`, the layers sit under a sequential `layers` module.
pub fn transformer(shape: &TransformerShape) -> ModelSpec {
    let h = shape.hidden;
    let act = shape.microbatch * shape.seq_len * h * 4;
    let mut modules = Vec::new();
    let mut params = Vec::new();
    let mut trace = Vec::new();

    modules.push(module("step", None));
    let mut model = module("model", Some("step"));
    model.fwd_time = 1e-5;
    modules.push(model);
    trace.push("model".to_string());

    let mut emb = module("embedding", Some("model"));
    emb.param_ids.push("wte".into());
    emb.fwd_time = shape.layer_time * 0.05;
    emb.activation_bytes = act;
    emb.kind = Some("Embedding".into());
    params.push(ParamDesc {
        id: "wte".into(),
        bytes: shape.vocab * h * 4,
    });
    modules.push(emb);
    trace.push("embedding".into());

    let layer_parent = if shape.nested {
        let mut layers = module("layers", Some("model"));
        layers.is_sequential = true;
        modules.push(layers);
        trace.push("layers".into());
        "layers"
    } else {
        modules[1].is_sequential = true;
        "model"
    };

    for i in 0..shape.layers {
        let layer_id = format!("layer_{i}");
        let mut layer = module(&layer_id, Some(layer_parent));
        layer.activation_bytes = act;
        layer.kind = Some("TransformerLayer".into());
        modules.push(layer);
        trace.push(layer_id.clone());

        let attn_id = format!("{layer_id}.attention");
        let mut attn = module(&attn_id, Some(&layer_id));
        attn.param_ids.push(format!("{attn_id}.weight"));
        attn.fwd_time = shape.layer_time / 3.0;
        attn.activation_bytes = act;
        attn.kind = Some("Attention".into());
        params.push(ParamDesc {
            id: format!("{attn_id}.weight"),
            bytes: 4 * h * h * 4,
        });
        modules.push(attn);
        trace.push(attn_id);

        let mlp_id = format!("{layer_id}.mlp");
        let mut mlp = module(&mlp_id, Some(&layer_id));
        mlp.param_ids.push(format!("{mlp_id}.weight"));
        mlp.fwd_time = shape.layer_time * 2.0 / 3.0;
        mlp.activation_bytes = act;
        mlp.kind = Some("Mlp".into());
        params.push(ParamDesc {
            id: format!("{mlp_id}.weight"),
            bytes: 8 * h * h * 4,
        });
        modules.push(mlp);
        trace.push(mlp_id);
    }

    let mut norm = module("final_norm", Some("model"));
    norm.param_ids.push("final_norm.weight".into());
    norm.fwd_time = shape.layer_time * 0.01;
    norm.activation_bytes = act;
    norm.kind = Some("LayerNorm".into());
    params.push(ParamDesc {
        id: "final_norm.weight".into(),
        bytes: 2 * h * 4,
    });
    modules.push(norm);
    trace.push("final_norm".into());

    let mut head = module("lm_head", Some("model"));
    if shape.tied_head {
        head.param_ids.push("wte".into());
    } else {
        head.param_ids.push("lm_head.weight".into());
        params.push(ParamDesc {
            id: "lm_head.weight".into(),
            bytes: shape.vocab * h * 4,
        });
    }
    head.fwd_time = shape.layer_time * 0.1;
    head.activation_bytes = shape.microbatch * shape.seq_len * shape.vocab * 4;
    head.kind = Some("Linear".into());
    modules.push(head);
    trace.push("lm_head".into());

    ModelSpec::new(ModelFile {
        modules,
        params,
        trace_order: trace,
    })
    .expect("synthetic transformer is valid")
}

/// `step -> stage_0 .. stage_{n-1}`, each stage a leaf with the given forward
/// time and activation size.
pub fn chain(stages: usize, fwd_time: f64, activation_bytes: u64) -> ModelSpec {
    let mut modules = vec![module("step", None)];
    let mut params = Vec::new();
    let mut trace = Vec::new();
    for i in 0..stages {
        let id = format!("stage_{i}");
        let mut m = module(&id, Some("step"));
        m.fwd_time = fwd_time;
        m.activation_bytes = activation_bytes;
        m.param_ids.push(format!("{id}.weight"));
        params.push(ParamDesc {
            id: format!("{id}.weight"),
            bytes: 1024,
        });
        modules.push(m);
        trace.push(id);
    }
    ModelSpec::new(ModelFile {
        modules,
        params,
        trace_order: trace,
    })
    .expect("chain model is valid")
}

/// A random module tree with up to `max_modules` modules. Roughly one module
/// in ten reuses a parameter of an earlier module.
pub fn random_model<R: Rng>(rng: &mut R, max_modules: usize) -> ModelSpec {
    let n = rng.random_range(2..=max_modules.max(2));
    let mut modules = vec![module("m0", None)];
    let mut params = Vec::new();
    // Parents are always earlier modules, so declaration order is a valid
    // pre-order once children are sorted after parents.
    for i in 1..n {
        let parent = rng.random_range(0..i);
        let mut m = module(format!("m{i}"), Some(&format!("m{parent}")));
        m.fwd_time = if rng.random_bool(0.1) {
            0.0
        } else {
            rng.random_range(1e-4..1e-2)
        };
        m.activation_bytes = rng.random_range(0..1 << 20);
        m.is_sequential = rng.random_bool(0.2);
        if rng.random_bool(0.8) {
            let pid = format!("p{i}");
            params.push(ParamDesc {
                id: pid.clone(),
                bytes: rng.random_range(1..1 << 24),
            });
            m.param_ids.push(pid);
        }
        if !params.is_empty() && rng.random_bool(0.1) {
            let shared = params[rng.random_range(0..params.len())].id.clone();
            if !m.param_ids.contains(&shared) {
                m.param_ids.push(shared);
            }
        }
        modules.push(m);
    }
    if params.is_empty() {
        params.push(ParamDesc {
            id: "p_root".into(),
            bytes: 64,
        });
        modules[0].param_ids.push("p_root".into());
    }
    // Pre-order traversal as the execution trace.
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 1..n {
        let p: usize = modules[i].parent.as_ref().unwrap()[1..].parse().unwrap();
        children[p].push(i);
    }
    let mut trace = Vec::with_capacity(n - 1);
    let mut stack: Vec<usize> = children[0].iter().rev().copied().collect();
    while let Some(m) = stack.pop() {
        trace.push(modules[m].id.clone());
        stack.extend(children[m].iter().rev());
    }
    ModelSpec::new(ModelFile {
        modules,
        params,
        trace_order: trace,
    })
    .expect("random model is valid")
}
