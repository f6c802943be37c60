use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model_graph::ModelSpec;

/// Module kinds that have a distributed implementation, keyed by kind.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Registry {
    map: BTreeMap<String, String>,
}

impl Registry {
    /// Rejects registries where following kind -> distributed kind links
    /// loops back.
    pub fn new<I, K, V>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        let map: BTreeMap<String, String> =
            pairs.into_iter().map(|(k, v)| (k.into(), v.into())).collect();
        for start in map.keys() {
            let mut seen = BTreeSet::from([start.as_str()]);
            let mut cur = start.as_str();
            while let Some(next) = map.get(cur) {
                if !seen.insert(next.as_str()) {
                    return Err(Error::Config(format!(
                        "tensor-parallel registry has a cycle through `{next}`"
                    )));
                }
                cur = next;
            }
        }
        Ok(Self { map })
    }

    /// The distributed modules this library provides.
    pub fn builtin() -> Self {
        Self::new([
            ("Linear", "DistributedLinear"),
            ("Embedding", "DistributedEmbedding"),
            ("LayerNorm", "DistributedLayerNorm"),
            ("Attention", "DistributedAttentionLayer"),
            ("Mlp", "DistributedTransformerOutputLayer"),
            ("TransformerLayer", "DistributedTransformerLayer"),
            ("Transformer", "DistributedTransformer"),
        ])
        .expect("builtin registry is acyclic")
    }

    pub fn get(&self, kind: &str) -> Option<&str> {
        self.map.get(kind).map(String::as_str)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Replacement {
    pub module: String,
    pub kind: String,
    pub distributed: String,
}

/// Modules to swap for their distributed versions, in top-down order.
///
/// A module is replaced when its kind is registered, tensor parallelism is
/// enabled for it (it or an ancestor is in `tp_marks`), no ancestor was
/// replaced, and no parameter used in its subtree is also used outside it.
pub fn plan_replacement(
    spec: &ModelSpec,
    registry: &Registry,
    tp_marks: &BTreeSet<String>,
) -> Vec<Replacement> {
    let mut users: Vec<Vec<usize>> = vec![Vec::new(); spec.params().len()];
    for m in 0..spec.len() {
        for &p in spec.params_of(m) {
            if users[p].last() != Some(&m) {
                users[p].push(m);
            }
        }
    }
    let shares_outside = |m: usize| {
        let inside: BTreeSet<usize> = spec.subtree(m).into_iter().collect();
        inside
            .iter()
            .flat_map(|&n| spec.params_of(n))
            .any(|&p| users[p].iter().any(|u| !inside.contains(u)))
    };

    let mut out = Vec::new();
    // (module, enabled by an ancestor mark)
    let mut stack = vec![(spec.root(), false)];
    while let Some((m, inherited)) = stack.pop() {
        let desc = spec.module(m);
        let enabled = inherited || tp_marks.contains(&desc.id);
        let distributed = desc.kind.as_deref().and_then(|k| registry.get(k));
        if let (true, Some(dist)) = (enabled, distributed) {
            if !shares_outside(m) {
                out.push(Replacement {
                    module: desc.id.clone(),
                    kind: desc.kind.clone().unwrap_or_default(),
                    distributed: dist.to_string(),
                });
                continue;
            }
        }
        for &c in spec.children(m).iter().rev() {
            stack.push((c, enabled));
        }
    }
    out
}
