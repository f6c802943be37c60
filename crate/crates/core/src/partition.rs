//! Automatic pipeline partitioning over a costed node tree.
//!
//! Nodes are visited breadth-first. Each node with more than one virtual
//! device splits its device set among its children: the children (in
//! execution order) are cut into contiguous segments of balanced cost, the
//! devices are apportioned to segments with the D'Hondt rule, and segments
//! that receive several devices and hold several nodes are split again.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_graph::{CostedTree, NodeTree};

/// Sorted set of virtual partition indices.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DeviceSet(Vec<usize>);

impl DeviceSet {
    pub fn new(devices: impl IntoIterator<Item = usize>) -> Self {
        let mut v: Vec<usize> = devices.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        Self(v)
    }

    /// `{0, .., degree - 1}`.
    pub fn all(degree: usize) -> Self {
        Self((0..degree).collect())
    }

    pub fn single(device: usize) -> Self {
        Self(vec![device])
    }

    /// Smallest index in the set.
    pub fn first(&self) -> Option<usize> {
        self.0.first().copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, device: usize) -> bool {
        self.0.binary_search(&device).is_ok()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    fn push_sorted(&mut self, device: usize) {
        debug_assert!(self.0.last().is_none_or(|&l| l < device));
        self.0.push(device);
    }
}

/// A split of a cost sequence into consecutive, non-empty segments.
#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    pub segments: Vec<Range<usize>>,
    /// Largest segment cost.
    pub omega: f64,
}

impl Segmentation {
    pub fn segment_costs(&self, costs: &[f64]) -> Vec<f64> {
        self.segments
            .iter()
            .map(|r| costs[r.clone()].iter().sum())
            .collect()
    }
}

/// Splits `costs` into `min(segments, costs.len())` consecutive segments so
/// that the largest segment sum is minimal.
///
/// Among optimal splits, earlier split points win.
pub fn segment_children(costs: &[f64], segments: usize) -> Result<Segmentation> {
    let n = costs.len();
    if n == 0 {
        return Err(Error::EmptyCosts);
    }
    let parts = segments.clamp(1, n);

    // seg[j][i] = costs[j] + .. + costs[i - 1], summed left to right.
    let mut seg = vec![vec![0.0; n + 1]; n + 1];
    for j in 0..n {
        let mut acc = 0.0;
        for i in j + 1..=n {
            acc += costs[i - 1];
            seg[j][i] = acc;
        }
    }

    // best[k][i]: optimal max-segment cost of the first i items in k parts.
    let mut best = vec![vec![f64::INFINITY; n + 1]; parts + 1];
    let mut cut = vec![vec![0usize; n + 1]; parts + 1];
    for i in 1..=n {
        best[1][i] = seg[0][i];
    }
    for k in 2..=parts {
        for i in k..=n {
            let mut value = f64::INFINITY;
            let mut arg = k - 1;
            for j in k - 1..i {
                let candidate = best[k - 1][j].max(seg[j][i]);
                if candidate < value {
                    value = candidate;
                    arg = j;
                }
            }
            best[k][i] = value;
            cut[k][i] = arg;
        }
    }

    let mut bounds = Vec::with_capacity(parts);
    let mut end = n;
    for k in (1..=parts).rev() {
        let start = if k == 1 { 0 } else { cut[k][end] };
        bounds.push(start..end);
        end = start;
    }
    bounds.reverse();
    Ok(Segmentation {
        segments: bounds,
        omega: best[parts][n],
    })
}

/// Apportions `devices` (in ascending order) over segments with the given
/// costs.
///
/// Each device goes to the segment with the largest current quotient (lowest
/// index on ties). The winner's quotient is then divided by `s + 1`, where
/// `s` is a single counter shared by all segments that starts at 1 and grows
/// by one per device handed out.
pub fn dhondt_allocate(devices: &DeviceSet, seg_costs: &[f64]) -> Vec<DeviceSet> {
    let mut quotients = seg_costs.to_vec();
    let mut out = vec![DeviceSet::default(); seg_costs.len()];
    if seg_costs.is_empty() {
        return out;
    }
    let mut s = 1.0;
    for &device in devices.as_slice() {
        let mut k = 0;
        for (i, &q) in quotients.iter().enumerate().skip(1) {
            if q > quotients[k] {
                k = i;
            }
        }
        out[k].push_sorted(device);
        quotients[k] /= s + 1.0;
        s += 1.0;
    }
    out
}

/// Splits a device set among children given in execution order.
///
/// Returns one device set per child, aligned with `costs`.
pub fn partition_children(devices: &DeviceSet, costs: &[f64]) -> Vec<DeviceSet> {
    let mut out = vec![DeviceSet::default(); costs.len()];
    if costs.is_empty() || devices.is_empty() {
        return out;
    }
    let members: Vec<usize> = (0..costs.len()).collect();
    split_segment(devices, &members, costs, &mut out);
    out
}

fn split_segment(devices: &DeviceSet, members: &[usize], costs: &[f64], out: &mut [DeviceSet]) {
    let local: Vec<f64> = members.iter().map(|&m| costs[m]).collect();
    let segmentation =
        segment_children(&local, devices.len()).expect("segment has at least one member");
    let seg_costs = segmentation.segment_costs(&local);
    let allocation = dhondt_allocate(devices, &seg_costs);
    let parent_device = devices.first().expect("non-empty device set");

    for (range, assigned) in segmentation.segments.iter().zip(allocation) {
        let nodes = &members[range.clone()];
        if assigned.is_empty() {
            for &n in nodes {
                out[n] = DeviceSet::single(parent_device);
            }
        } else if nodes.len() == 1 || assigned.len() == 1 {
            for &n in nodes {
                out[n] = assigned.clone();
            }
        } else {
            split_segment(&assigned, nodes, costs, out);
        }
    }
}

/// Partition index and virtual device set of every node.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub degree: usize,
    /// `partition[n]` is the partition of node `n`.
    pub partition: Vec<usize>,
    pub devices: Vec<DeviceSet>,
}

impl Assignment {
    /// Everything on partition 0.
    pub fn single(tree: &NodeTree) -> Self {
        Self {
            degree: 1,
            partition: vec![0; tree.len()],
            devices: vec![DeviceSet::single(0); tree.len()],
        }
    }

    /// Partition of each module, indexed like the model spec.
    pub fn module_partitions(&self, tree: &NodeTree, module_count: usize) -> Vec<usize> {
        (0..module_count)
            .map(|m| self.partition[tree.node_of(m)])
            .collect()
    }

    /// Builds an assignment from explicit per-node partitions.
    pub fn from_partitions(degree: usize, partition: Vec<usize>) -> Self {
        let devices = partition.iter().map(|&p| DeviceSet::single(p)).collect();
        Self {
            degree,
            partition,
            devices,
        }
    }
}

/// Assigns every node a partition in `0..degree`.
pub fn partition_tree(tree: &CostedTree, degree: usize) -> Result<Assignment> {
    if degree < 1 {
        return Err(Error::PipelineDegree(degree));
    }
    let nodes = &tree.tree.nodes;
    let mut devices = vec![DeviceSet::default(); nodes.len()];
    let mut partition = vec![0; nodes.len()];
    devices[tree.tree.root] = DeviceSet::all(degree);

    for n in tree.tree.bfs() {
        let own = devices[n].first().expect("device set assigned before visit");
        partition[n] = own;
        let children = &nodes[n].children;
        if children.is_empty() {
            continue;
        }
        if devices[n].len() > 1 {
            let costs: Vec<f64> = children.iter().map(|&c| tree.cost(c)).collect();
            let split = partition_children(&devices[n], &costs);
            for (&c, set) in children.iter().zip(split) {
                devices[c] = set;
            }
        } else {
            for &c in children {
                devices[c] = DeviceSet::single(own);
            }
        }
    }

    Ok(Assignment {
        degree,
        partition,
        devices,
    })
}

/// Per-partition load summary; serializes to the assignment file format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionReport {
    pub partitions: BTreeMap<String, usize>,
    pub loads: Vec<f64>,
}

impl PartitionReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn max_min_ratio(&self) -> f64 {
        let hi = self.loads.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = self.loads.iter().copied().fold(f64::INFINITY, f64::min);
        hi / lo
    }

    pub fn load_table(&self) -> String {
        let mut out = String::from("partition  load\n");
        for (i, l) in self.loads.iter().enumerate() {
            let _ = writeln!(out, "{i:>9}  {l:.6}");
        }
        out
    }
}

/// Sums local node costs per partition.
pub fn partition_report(assignment: &Assignment, tree: &CostedTree) -> PartitionReport {
    let mut loads = vec![0.0; assignment.degree];
    let mut partitions = BTreeMap::new();
    for (n, node) in tree.tree.nodes.iter().enumerate() {
        let p = assignment.partition[n];
        loads[p] += tree.local_cost(n);
        partitions.insert(node.id.clone(), p);
    }
    PartitionReport { partitions, loads }
}
