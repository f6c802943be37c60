//! Model description, shared-parameter module grouping, and the cost model
//! that drives automatic partitioning.
//!
//! A [`ModelSpec`] is a module hierarchy with parameter references and
//! per-module profile data. [`build_node_tree`] collapses modules that share
//! parameters into [`ModuleNode`]s, and [`compute_costs`] attaches the
//! normalized subtree costs consumed by the partitioner.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to every node's local cost so that all subtree costs are
/// strictly positive.
pub const COST_EPSILON: f64 = 1e-9;

/// One module entry of the model description file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleDesc {
    pub id: String,
    #[serde(default)]
    pub parent: Option<String>,
    #[serde(default)]
    pub param_ids: Vec<String>,
    /// Forward execution time of the module itself, in seconds, per microbatch.
    #[serde(default)]
    pub fwd_time: f64,
    /// Output activation size in bytes, per microbatch.
    #[serde(default)]
    pub activation_bytes: u64,
    #[serde(default)]
    pub is_sequential: bool,
    /// Module class name, used to look up distributed replacements.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamDesc {
    pub id: String,
    pub bytes: u64,
}

/// Serialized form of a model description.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub modules: Vec<ModuleDesc>,
    #[serde(default)]
    pub params: Vec<ParamDesc>,
    #[serde(default)]
    pub trace_order: Vec<String>,
}

/// A validated model description with lookup tables.
///
/// Modules are addressed by their index in declaration order.
#[derive(Clone, Debug)]
pub struct ModelSpec {
    file: ModelFile,
    module_index: HashMap<String, usize>,
    param_index: HashMap<String, usize>,
    parents: Vec<Option<usize>>,
    /// Children of every module, in execution order.
    children: Vec<Vec<usize>>,
    /// Param indices referenced by each module.
    params_of: Vec<Vec<usize>>,
    trace_pos: Vec<Option<usize>>,
    root: usize,
}

/// Parses and validates a model description.
pub fn load_model_spec(text: &str) -> Result<ModelSpec> {
    let file: ModelFile = serde_json::from_str(text)?;
    ModelSpec::new(file)
}

impl ModelSpec {
    pub fn new(file: ModelFile) -> Result<Self> {
        let mut module_index = HashMap::with_capacity(file.modules.len());
        for (i, m) in file.modules.iter().enumerate() {
            if module_index.insert(m.id.clone(), i).is_some() {
                return Err(Error::DuplicateModule(m.id.clone()));
            }
            if !m.fwd_time.is_finite() || m.fwd_time < 0.0 {
                return Err(Error::InvalidModuleField {
                    module: m.id.clone(),
                    field: "fwd_time",
                    value: m.fwd_time,
                });
            }
        }
        let mut param_index = HashMap::with_capacity(file.params.len());
        for (i, p) in file.params.iter().enumerate() {
            if param_index.insert(p.id.clone(), i).is_some() {
                return Err(Error::DuplicateParam(p.id.clone()));
            }
            if p.bytes == 0 {
                return Err(Error::NonPositiveParam(p.id.clone()));
            }
        }

        let n = file.modules.len();
        let mut parents = vec![None; n];
        let mut roots = Vec::new();
        for (i, m) in file.modules.iter().enumerate() {
            match &m.parent {
                None => roots.push(i),
                Some(p) => {
                    let pi = *module_index.get(p).ok_or_else(|| Error::DanglingParent {
                        module: m.id.clone(),
                        parent: p.clone(),
                    })?;
                    parents[i] = Some(pi);
                }
            }
        }
        if roots.len() != 1 {
            return Err(Error::RootCount(roots.len()));
        }
        let root = roots[0];

        // Every module must reach the root through its parent chain.
        for start in 0..n {
            let mut cur = start;
            let mut steps = 0;
            while let Some(p) = parents[cur] {
                cur = p;
                steps += 1;
                if steps > n {
                    return Err(Error::Cycle(file.modules[start].id.clone()));
                }
            }
        }

        let mut params_of = Vec::with_capacity(n);
        for m in &file.modules {
            let mut ids = Vec::with_capacity(m.param_ids.len());
            for p in &m.param_ids {
                let pi = *param_index.get(p).ok_or_else(|| Error::UnknownParam {
                    module: m.id.clone(),
                    param: p.clone(),
                })?;
                if !ids.contains(&pi) {
                    ids.push(pi);
                }
            }
            params_of.push(ids);
        }

        let mut trace_pos = vec![None; n];
        for (pos, id) in file.trace_order.iter().enumerate() {
            let mi = *module_index
                .get(id)
                .ok_or_else(|| Error::UnknownTraceModule(id.clone()))?;
            if trace_pos[mi].is_none() {
                trace_pos[mi] = Some(pos);
            }
        }
        for (pos, id) in file.trace_order.iter().enumerate() {
            let mi = module_index[id];
            if trace_pos[mi] != Some(pos) {
                continue;
            }
            if let Some(p) = parents[mi] {
                if p == root {
                    continue;
                }
                match trace_pos[p] {
                    Some(pp) if pp < pos => {}
                    _ => {
                        return Err(Error::TraceOrder {
                            child: id.clone(),
                            parent: file.modules[p].id.clone(),
                        })
                    }
                }
            }
        }

        let mut children = vec![Vec::new(); n];
        for i in 0..n {
            if let Some(p) = parents[i] {
                children[p].push(i);
            }
        }
        for list in &mut children {
            list.sort_by_key(|&c| (trace_pos[c].unwrap_or(usize::MAX), c));
        }

        Ok(Self {
            file,
            module_index,
            param_index,
            parents,
            children,
            params_of,
            trace_pos,
            root,
        })
    }

    pub fn file(&self) -> &ModelFile {
        &self.file
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.file).expect("model file serializes")
    }

    pub fn len(&self) -> usize {
        self.file.modules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.file.modules.is_empty()
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn module(&self, idx: usize) -> &ModuleDesc {
        &self.file.modules[idx]
    }

    pub fn modules(&self) -> &[ModuleDesc] {
        &self.file.modules
    }

    pub fn params(&self) -> &[ParamDesc] {
        &self.file.params
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.module_index.get(id).copied()
    }

    pub fn param_index_of(&self, id: &str) -> Option<usize> {
        self.param_index.get(id).copied()
    }

    pub fn parent(&self, idx: usize) -> Option<usize> {
        self.parents[idx]
    }

    /// Children of a module in execution order; untraced children follow
    /// traced ones in declaration order.
    pub fn children(&self, idx: usize) -> &[usize] {
        &self.children[idx]
    }

    /// Indices of the parameters a module references directly.
    pub fn params_of(&self, idx: usize) -> &[usize] {
        &self.params_of[idx]
    }

    pub fn trace_position(&self, idx: usize) -> Option<usize> {
        self.trace_pos[idx]
    }

    /// Ordering key used wherever modules must follow execution order.
    pub fn order_key(&self, idx: usize) -> (usize, usize) {
        (self.trace_pos[idx].unwrap_or(usize::MAX), idx)
    }

    /// Modules of the subtree rooted at `idx`, pre-order.
    pub fn subtree(&self, idx: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![idx];
        while let Some(m) = stack.pop() {
            out.push(m);
            stack.extend(self.children[m].iter().rev());
        }
        out
    }

    pub fn is_ancestor(&self, ancestor: usize, mut idx: usize) -> bool {
        while let Some(p) = self.parents[idx] {
            if p == ancestor {
                return true;
            }
            idx = p;
        }
        false
    }

    pub fn any_fwd_time(&self) -> bool {
        self.file.modules.iter().any(|m| m.fwd_time > 0.0)
    }

    pub fn total_param_bytes(&self) -> u64 {
        self.file.params.iter().map(|p| p.bytes).sum()
    }
}

/// A connected component of the module/parameter graph.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModuleNode {
    pub id: String,
    /// Member module ids in declaration order.
    pub module_ids: Vec<String>,
    /// Child node indices in execution order.
    pub children: Vec<usize>,
    #[serde(skip)]
    pub parent: Option<usize>,
    #[serde(skip)]
    pub modules: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NodeTree {
    pub nodes: Vec<ModuleNode>,
    pub root: usize,
    #[serde(skip)]
    node_of: Vec<usize>,
}

impl NodeTree {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Node index that holds module `module_idx`.
    pub fn node_of(&self, module_idx: usize) -> usize {
        self.node_of[module_idx]
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    /// Node indices in breadth-first order from the root.
    pub fn bfs(&self) -> Vec<usize> {
        let mut order = Vec::with_capacity(self.nodes.len());
        order.push(self.root);
        let mut head = 0;
        while head < order.len() {
            let n = order[head];
            head += 1;
            order.extend_from_slice(&self.nodes[n].children);
        }
        order
    }
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        let mut cur = x;
        while self.parent[cur] != root {
            let next = self.parent[cur];
            self.parent[cur] = root;
            cur = next;
        }
        root
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // Keep the smaller index as representative for determinism.
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Groups modules into [`ModuleNode`]s by shared parameters and derives the
/// node tree from the module hierarchy.
///
/// When a node has several candidate parents, the edge coming from the
/// lexicographically smallest parent module id is kept. If that choice would
/// detach a node from the root (possible when sharing creates a cycle between
/// nodes), the node is re-attached to the smallest candidate already reachable
/// from the root.
pub fn build_node_tree(spec: &ModelSpec) -> NodeTree {
    let n = spec.len();
    let mut dsu = DisjointSet::new(n);
    let mut users: Vec<Option<usize>> = vec![None; spec.params().len()];
    for m in 0..n {
        for &p in spec.params_of(m) {
            match users[p] {
                Some(first) => dsu.union(first, m),
                None => users[p] = Some(m),
            }
        }
    }

    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for m in 0..n {
        groups.entry(dsu.find(m)).or_default().push(m);
    }
    let root_group = dsu.find(spec.root());
    let mut members: Vec<Vec<usize>> = groups.into_values().collect();
    let group_key = |ms: &Vec<usize>| -> (bool, (usize, usize)) {
        let is_root = ms.contains(&spec.root());
        let key = ms.iter().map(|&m| spec.order_key(m)).min().unwrap();
        (!is_root, key)
    };
    members.sort_by_key(group_key);
    debug_assert!(members[0].iter().any(|&m| dsu.find(m) == root_group));

    let mut node_of = vec![0; n];
    for (ni, ms) in members.iter().enumerate() {
        for &m in ms {
            node_of[m] = ni;
        }
    }

    // Candidate parent nodes, keyed by the smallest parent module id.
    let node_count = members.len();
    let mut candidates: Vec<BTreeMap<usize, String>> = vec![BTreeMap::new(); node_count];
    for m in 0..n {
        if let Some(p) = spec.parent(m) {
            let (child_node, parent_node) = (node_of[m], node_of[p]);
            if child_node == parent_node || child_node == 0 {
                continue;
            }
            let pid = &spec.module(p).id;
            let entry = candidates[child_node]
                .entry(parent_node)
                .or_insert_with(|| pid.clone());
            if pid < entry {
                *entry = pid.clone();
            }
        }
    }
    let ranked = |ni: usize| -> Vec<usize> {
        let mut c: Vec<(&String, usize)> = candidates[ni].iter().map(|(&p, k)| (k, p)).collect();
        c.sort();
        c.into_iter().map(|(_, p)| p).collect()
    };

    let mut parent: Vec<Option<usize>> = (0..node_count)
        .map(|ni| if ni == 0 { None } else { ranked(ni).first().copied() })
        .collect();

    loop {
        let reachable = reachable_from_root(&parent);
        if reachable.iter().all(|&r| r) {
            break;
        }
        let fix = (0..node_count).find_map(|ni| {
            if reachable[ni] {
                return None;
            }
            ranked(ni)
                .into_iter()
                .find(|&p| reachable[p])
                .map(|p| (ni, p))
        });
        let (ni, p) = fix.expect("every node has a hierarchy path from the root");
        parent[ni] = Some(p);
    }

    let mut nodes: Vec<ModuleNode> = members
        .iter()
        .enumerate()
        .map(|(ni, ms)| ModuleNode {
            id: spec.module(ms[0]).id.clone(),
            module_ids: ms.iter().map(|&m| spec.module(m).id.clone()).collect(),
            children: Vec::new(),
            parent: parent[ni],
            modules: ms.clone(),
        })
        .collect();
    for ni in 1..node_count {
        let p = parent[ni].expect("non-root node has a parent");
        nodes[p].children.push(ni);
    }

    NodeTree {
        nodes,
        root: 0,
        node_of,
    }
}

fn reachable_from_root(parent: &[Option<usize>]) -> Vec<bool> {
    let n = parent.len();
    let mut state = vec![None; n];
    state[0] = Some(true);
    for start in 0..n {
        let mut path = Vec::new();
        let mut cur = start;
        let verdict = loop {
            if let Some(v) = state[cur] {
                break v;
            }
            if path.contains(&cur) {
                break false;
            }
            path.push(cur);
            match parent[cur] {
                Some(p) => cur = p,
                None => break false,
            }
        };
        for p in path {
            state[p] = Some(verdict);
        }
    }
    state.into_iter().map(|s| s.unwrap_or(false)).collect()
}

/// Normalized per-module cost components.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModuleCost {
    pub id: String,
    pub memory_raw: f64,
    pub compute_raw: f64,
    pub memory: f64,
    pub compute: f64,
    pub blended: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NodeCost {
    pub id: String,
    /// Sum of normalized memory costs of member modules.
    pub memory: f64,
    /// Sum of normalized compute costs of member modules.
    pub compute: f64,
    /// Recursive subtree cost before normalization.
    pub unnormalized: f64,
    /// Subtree cost divided by the root's; the root has exactly 1.
    pub normalized: f64,
}

/// A node tree with per-node costs.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostedTree {
    pub alpha: f64,
    pub tree: NodeTree,
    pub nodes: Vec<NodeCost>,
    pub modules: Vec<ModuleCost>,
}

impl CostedTree {
    /// Normalized subtree cost of node `n`.
    pub fn cost(&self, n: usize) -> f64 {
        self.nodes[n].normalized
    }

    /// Cost attributable to node `n` alone: its subtree cost minus its
    /// children's.
    pub fn local_cost(&self, n: usize) -> f64 {
        let children: f64 = self.tree.nodes[n]
            .children
            .iter()
            .map(|&c| self.nodes[c].normalized)
            .sum();
        self.nodes[n].normalized - children
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("costed tree serializes")
    }
}

/// Blends a normalized memory cost and compute cost with weight `alpha` on
/// memory.
pub fn blend(memory: f64, compute: f64, alpha: f64) -> f64 {
    alpha * memory + (1.0 - alpha) * compute
}

fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    values
        .iter()
        .map(|&v| {
            if range > 0.0 {
                (v - lo) / range
            } else if v > 0.0 {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// Attaches memory/compute blended costs to every node.
///
/// Memory cost of a module is the byte count of all distinct parameters in
/// its subtree plus its activation bytes. Compute cost is its forward time
/// when any module in the model was timed, otherwise its descendant count.
/// Both are min-max normalized across modules before blending.
pub fn compute_costs(tree: &NodeTree, spec: &ModelSpec, alpha: f64) -> Result<CostedTree> {
    if !(0.0..=1.0).contains(&alpha) || alpha.is_nan() {
        return Err(Error::Alpha(alpha));
    }
    let n = spec.len();
    let timed = spec.any_fwd_time();

    let mut memory_raw = vec![0.0; n];
    let mut compute_raw = vec![0.0; n];
    for m in 0..n {
        let subtree = spec.subtree(m);
        let params: BTreeSet<usize> = subtree
            .iter()
            .flat_map(|&s| spec.params_of(s).iter().copied())
            .collect();
        let bytes: u64 = params.iter().map(|&p| spec.params()[p].bytes).sum();
        memory_raw[m] = (bytes + spec.module(m).activation_bytes) as f64;
        compute_raw[m] = if timed {
            spec.module(m).fwd_time
        } else {
            (subtree.len() - 1) as f64
        };
    }
    let memory = min_max_normalize(&memory_raw);
    let compute = min_max_normalize(&compute_raw);

    let modules: Vec<ModuleCost> = (0..n)
        .map(|m| ModuleCost {
            id: spec.module(m).id.clone(),
            memory_raw: memory_raw[m],
            compute_raw: compute_raw[m],
            memory: memory[m],
            compute: compute[m],
            blended: blend(memory[m], compute[m], alpha),
        })
        .collect();

    let order = tree.bfs();
    let count = tree.len();
    let mut local = vec![0.0; count];
    let mut node_memory = vec![0.0; count];
    let mut node_compute = vec![0.0; count];
    for (ni, node) in tree.nodes.iter().enumerate() {
        for &m in &node.modules {
            local[ni] += modules[m].blended;
            node_memory[ni] += modules[m].memory;
            node_compute[ni] += modules[m].compute;
        }
    }

    let mut unnormalized = local.clone();
    for &ni in order.iter().rev() {
        let sum: f64 = tree.nodes[ni]
            .children
            .iter()
            .map(|&c| unnormalized[c])
            .sum();
        unnormalized[ni] += sum;
    }
    let root_cost = unnormalized[tree.root];
    if root_cost <= 0.0 || !root_cost.is_finite() {
        return Err(Error::EmptyModel);
    }

    // Floor local costs, then rebuild subtree sums so super-additivity and
    // c(root) = 1 hold exactly.
    let mut subtotal: Vec<f64> = local
        .iter()
        .map(|&l| (l / root_cost).max(COST_EPSILON))
        .collect();
    for &ni in order.iter().rev() {
        let sum: f64 = tree.nodes[ni].children.iter().map(|&c| subtotal[c]).sum();
        subtotal[ni] += sum;
    }
    let total = subtotal[tree.root];

    let nodes = (0..count)
        .map(|ni| NodeCost {
            id: tree.nodes[ni].id.clone(),
            memory: node_memory[ni],
            compute: node_compute[ni],
            unnormalized: unnormalized[ni],
            normalized: subtotal[ni] / total,
        })
        .collect();

    Ok(CostedTree {
        alpha,
        tree: tree.clone(),
        nodes,
        modules,
    })
}

/// Convenience: parse, group, and cost a model description.
pub fn costed_from_json(text: &str, alpha: f64) -> Result<(ModelSpec, CostedTree)> {
    let spec = load_model_spec(text)?;
    let tree = build_node_tree(&spec);
    let costed = compute_costs(&tree, &spec, alpha)?;
    Ok((spec, costed))
}

/// Param ids shared by more than one module, with their users.
pub fn shared_params(spec: &ModelSpec) -> BTreeMap<String, Vec<String>> {
    let mut users: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for m in spec.modules() {
        let mut seen = HashSet::new();
        for p in &m.param_ids {
            if seen.insert(p) {
                users.entry(p.clone()).or_default().push(m.id.clone());
            }
        }
    }
    users.retain(|_, v| v.len() > 1);
    users
}
