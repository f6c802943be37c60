//! Communication backend model: tensor stubs, MPI/D2D routing, persistent
//! D2D buffers and link timing.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Device {
    Cpu,
    Gpu,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorDesc {
    pub shape: Vec<usize>,
    pub bytes: u64,
    pub device: Device,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorStub {
    pub id: usize,
    pub shape: Vec<usize>,
    pub bytes: u64,
    pub device: Device,
}

/// An arbitrary message payload: nested containers with tensors at the
/// leaves, mixed with plain values.
#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Tensor(TensorDesc),
    Stub(usize),
    List(Vec<Payload>),
    Map(BTreeMap<String, Payload>),
    Int(i64),
    Float(f64),
    Str(String),
    Bool(bool),
    Null,
}

impl Payload {
    pub fn tensor_count(&self) -> usize {
        match self {
            Payload::Tensor(_) => 1,
            Payload::List(items) => items.iter().map(Payload::tensor_count).sum(),
            Payload::Map(items) => items.values().map(Payload::tensor_count).sum(),
            _ => 0,
        }
    }

    pub fn tensor_bytes(&self) -> u64 {
        match self {
            Payload::Tensor(t) => t.bytes,
            Payload::List(items) => items.iter().map(Payload::tensor_bytes).sum(),
            Payload::Map(items) => items.values().map(Payload::tensor_bytes).sum(),
            _ => 0,
        }
    }
}

/// Replaces every tensor in `payload` with a stub id. Ids are assigned in
/// traversal order (lists front to back, maps by key).
pub fn extract_stubs(payload: &Payload) -> (Payload, Vec<TensorStub>) {
    fn walk(p: &Payload, stubs: &mut Vec<TensorStub>) -> Payload {
        match p {
            Payload::Tensor(t) => {
                let id = stubs.len();
                stubs.push(TensorStub {
                    id,
                    shape: t.shape.clone(),
                    bytes: t.bytes,
                    device: t.device,
                });
                Payload::Stub(id)
            }
            Payload::List(items) => Payload::List(items.iter().map(|i| walk(i, stubs)).collect()),
            Payload::Map(items) => Payload::Map(
                items
                    .iter()
                    .map(|(k, v)| (k.clone(), walk(v, stubs)))
                    .collect(),
            ),
            other => other.clone(),
        }
    }
    let mut stubs = Vec::new();
    let skeleton = walk(payload, &mut stubs);
    (skeleton, stubs)
}

/// Puts the tensors described by `stubs` back into `skeleton`.
pub fn restore_stubs(skeleton: &Payload, stubs: &[TensorStub]) -> Result<Payload> {
    Ok(match skeleton {
        Payload::Stub(id) => {
            let s = stubs
                .iter()
                .find(|s| s.id == *id)
                .ok_or_else(|| Error::Simulation(format!("no stub with id {id}")))?;
            Payload::Tensor(TensorDesc {
                shape: s.shape.clone(),
                bytes: s.bytes,
                device: s.device,
            })
        }
        Payload::List(items) => Payload::List(
            items
                .iter()
                .map(|i| restore_stubs(i, stubs))
                .collect::<Result<_>>()?,
        ),
        Payload::Map(items) => Payload::Map(
            items
                .iter()
                .map(|(k, v)| Ok((k.clone(), restore_stubs(v, stubs)?)))
                .collect::<Result<_>>()?,
        ),
        other => other.clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkClass {
    Nvlink,
    Rdma,
    #[serde(alias = "mpi_intra")]
    PcieMpiIntra,
    MpiInter,
}

impl LinkClass {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "nvlink" => Ok(LinkClass::Nvlink),
            "rdma" => Ok(LinkClass::Rdma),
            "pcie_mpi_intra" | "mpi_intra" => Ok(LinkClass::PcieMpiIntra),
            "mpi_inter" => Ok(LinkClass::MpiInter),
            other => Err(Error::UnknownLink(other.to_string())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LinkClass::Nvlink => "nvlink",
            LinkClass::Rdma => "rdma",
            LinkClass::PcieMpiIntra => "pcie_mpi_intra",
            LinkClass::MpiInter => "mpi_inter",
        }
    }

    fn default_params(self) -> LinkParams {
        let (latency_s, bandwidth_bps) = match self {
            LinkClass::Nvlink => (5e-6, 200e9),
            LinkClass::Rdma => (1e-5, 40e9),
            LinkClass::PcieMpiIntra => (2e-5, 10e9),
            LinkClass::MpiInter => (5e-5, 10e9),
        };
        LinkParams {
            latency_s,
            bandwidth_bps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkParams {
    pub latency_s: f64,
    #[serde(rename = "bandwidth_Bps")]
    pub bandwidth_bps: f64,
}

fn default_ranks_per_node() -> usize {
    8
}
fn default_true() -> bool {
    true
}
fn default_buffer_bytes() -> u64 {
    1 << 30
}
fn default_metadata_latency() -> f64 {
    2e-5
}

/// Physical cluster description as read from the cluster file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterShape {
    #[serde(default = "default_ranks_per_node")]
    pub ranks_per_node: usize,
    /// NVLink between every pair of ranks on a node.
    #[serde(default = "default_true")]
    pub nvlink: bool,
    /// Explicit NVLink pairs; when present this replaces the `nvlink` flag.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nvlink_pairs: Option<Vec<[usize; 2]>>,
    #[serde(default = "default_true")]
    pub rdma: bool,
    #[serde(default)]
    pub links: BTreeMap<String, LinkParams>,
    /// Capacity of each persistent D2D buffer (send and receive) per rank.
    #[serde(default = "default_buffer_bytes")]
    pub d2d_buffer_bytes: u64,
    /// Cost of the shape/dtype exchange that precedes each data transfer
    /// outside static mode.
    #[serde(default = "default_metadata_latency")]
    pub metadata_latency_s: f64,
    /// Extra control cost of the D2D buffer handshake.
    #[serde(default)]
    pub d2d_handshake_s: f64,
}

impl Default for ClusterShape {
    fn default() -> Self {
        Self {
            ranks_per_node: default_ranks_per_node(),
            nvlink: true,
            nvlink_pairs: None,
            rdma: true,
            links: BTreeMap::new(),
            d2d_buffer_bytes: default_buffer_bytes(),
            metadata_latency_s: default_metadata_latency(),
            d2d_handshake_s: 0.0,
        }
    }
}

impl ClusterShape {
    pub fn from_json(text: &str) -> Result<Self> {
        let shape: ClusterShape = serde_json::from_str(text)?;
        shape.validate()?;
        Ok(shape)
    }

    /// A cluster where every transfer is free.
    pub fn zero_cost() -> Self {
        let zero = LinkParams {
            latency_s: 0.0,
            bandwidth_bps: f64::INFINITY,
        };
        let links = ["nvlink", "rdma", "pcie_mpi_intra", "mpi_inter"]
            .iter()
            .map(|n| (n.to_string(), zero))
            .collect();
        Self {
            links,
            metadata_latency_s: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ranks_per_node == 0 {
            return Err(Error::Cluster("ranks_per_node must be at least 1".into()));
        }
        for (name, p) in &self.links {
            LinkClass::parse(name)?;
            if !(p.latency_s >= 0.0) || !(p.bandwidth_bps > 0.0) {
                return Err(Error::Cluster(format!(
                    "link `{name}` needs latency >= 0 and bandwidth > 0"
                )));
            }
        }
        if !(self.metadata_latency_s >= 0.0) || !(self.d2d_handshake_s >= 0.0) {
            return Err(Error::Cluster("latencies must be non-negative".into()));
        }
        Ok(())
    }

    pub fn link(&self, class: LinkClass) -> LinkParams {
        self.links
            .iter()
            .find(|(name, _)| LinkClass::parse(name).ok() == Some(class))
            .map(|(_, p)| *p)
            .unwrap_or_else(|| class.default_params())
    }

    pub fn node_of(&self, rank: usize) -> usize {
        rank / self.ranks_per_node
    }

    pub fn same_node(&self, a: usize, b: usize) -> bool {
        self.node_of(a) == self.node_of(b)
    }

    pub fn has_nvlink(&self, a: usize, b: usize) -> bool {
        if !self.same_node(a, b) {
            return false;
        }
        match &self.nvlink_pairs {
            Some(pairs) => pairs
                .iter()
                .any(|&[x, y]| (x, y) == (a, b) || (x, y) == (b, a)),
            None => self.nvlink,
        }
    }

    /// Seconds to move `bytes` over `class`. Outside static mode a metadata
    /// round precedes the data.
    pub fn transfer_time(&self, bytes: u64, class: LinkClass, static_mode: bool) -> f64 {
        transfer_time(bytes, self.link(class), self.metadata_latency_s, static_mode)
    }
}

/// Seconds to move `bytes` over a link, with an optional metadata round.
pub fn transfer_time(bytes: u64, link: LinkParams, metadata_latency_s: f64, static_mode: bool) -> f64 {
    let meta = if static_mode { 0.0 } else { metadata_latency_s };
    meta + link.latency_s + bytes as f64 / link.bandwidth_bps
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferSide {
    Send,
    Recv,
}

/// Persistent per-rank D2D transmission buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct D2DBuffers {
    capacity: u64,
    send: Vec<u64>,
    recv: Vec<u64>,
}

impl D2DBuffers {
    pub fn new(ranks: usize, capacity: u64) -> Self {
        Self {
            capacity,
            send: vec![0; ranks],
            recv: vec![0; ranks],
        }
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn reserved(&self, rank: usize, side: BufferSide) -> u64 {
        match side {
            BufferSide::Send => self.send[rank],
            BufferSide::Recv => self.recv[rank],
        }
    }

    pub fn free(&self, rank: usize, side: BufferSide) -> u64 {
        self.capacity - self.reserved(rank, side)
    }

    fn slot(&mut self, rank: usize, side: BufferSide) -> &mut u64 {
        match side {
            BufferSide::Send => &mut self.send[rank],
            BufferSide::Recv => &mut self.recv[rank],
        }
    }

    /// Reserves `bytes` if they fit; returns whether the reservation was made.
    pub fn reserve(&mut self, rank: usize, side: BufferSide, bytes: u64) -> bool {
        if self.free(rank, side) < bytes {
            return false;
        }
        *self.slot(rank, side) += bytes;
        true
    }

    pub fn release(&mut self, rank: usize, side: BufferSide, bytes: u64) -> Result<()> {
        let slot = self.slot(rank, side);
        if *slot < bytes {
            return Err(Error::BufferUnderflow {
                rank,
                requested: bytes,
                reserved: *slot,
            });
        }
        *slot -= bytes;
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.send.iter().chain(&self.recv).all(|&b| b == 0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    Mpi,
    D2d,
}

/// Buffer space held by a D2D transfer until it lands.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Reservation {
    pub src: usize,
    pub dst: usize,
    pub bytes: u64,
    /// Cross-node transfers also stage through the sender's buffer.
    pub uses_send: bool,
}

impl Reservation {
    pub fn release(self, buffers: &mut D2DBuffers) -> Result<()> {
        buffers.release(self.dst, BufferSide::Recv, self.bytes)?;
        if self.uses_send {
            buffers.release(self.src, BufferSide::Send, self.bytes)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RouteDecision {
    pub route: Route,
    pub link: LinkClass,
    pub reservation: Option<Reservation>,
}

/// The routing rule as a pure predicate: D2D only for GPU tensors over a
/// direct link with buffer space on both ends.
pub fn route_rule(gpu: bool, same_node: bool, nvlink: bool, rdma: bool, buffers_ok: bool) -> Route {
    let direct = if same_node { nvlink } else { rdma };
    if gpu && direct && buffers_ok {
        Route::D2d
    } else {
        Route::Mpi
    }
}

/// Picks MPI or D2D for one tensor between two global ranks, reserving D2D
/// buffers on both endpoints when D2D is chosen.
pub fn route(
    stub: &TensorStub,
    src: usize,
    dst: usize,
    cluster: &ClusterShape,
    buffers: &mut D2DBuffers,
) -> RouteDecision {
    let same = cluster.same_node(src, dst);
    let mpi_link = if same {
        LinkClass::PcieMpiIntra
    } else {
        LinkClass::MpiInter
    };
    let mpi = RouteDecision {
        route: Route::Mpi,
        link: mpi_link,
        reservation: None,
    };
    if route_rule(
        stub.device == Device::Gpu,
        same,
        cluster.has_nvlink(src, dst),
        cluster.rdma,
        true,
    ) == Route::Mpi
    {
        return mpi;
    }
    let uses_send = !same;
    let fits = buffers.free(dst, BufferSide::Recv) >= stub.bytes
        && (!uses_send || buffers.free(src, BufferSide::Send) >= stub.bytes);
    if !fits {
        return mpi;
    }
    buffers.reserve(dst, BufferSide::Recv, stub.bytes);
    if uses_send {
        buffers.reserve(src, BufferSide::Send, stub.bytes);
    }
    RouteDecision {
        route: Route::D2d,
        link: if same { LinkClass::Nvlink } else { LinkClass::Rdma },
        reservation: Some(Reservation {
            src,
            dst,
            bytes: stub.bytes,
            uses_send,
        }),
    }
}
