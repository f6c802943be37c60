use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed JSON: {0}")]
    Parse(#[from] serde_json::Error),

    #[error("duplicate module id `{0}`")]
    DuplicateModule(String),

    #[error("duplicate parameter id `{0}`")]
    DuplicateParam(String),

    #[error("module `{module}` references undefined parent `{parent}`")]
    DanglingParent { module: String, parent: String },

    #[error("module `{module}` references undefined parameter `{param}`")]
    UnknownParam { module: String, param: String },

    #[error("trace_order mentions unknown module `{0}`")]
    UnknownTraceModule(String),

    #[error("trace_order lists `{child}` before its parent `{parent}`")]
    TraceOrder { child: String, parent: String },

    #[error("expected exactly one root module, found {0}")]
    RootCount(usize),

    #[error("module `{0}` is part of a parent cycle")]
    Cycle(String),

    #[error("parameter `{0}` must have a positive byte count")]
    NonPositiveParam(String),

    #[error("module `{module}` has invalid {field}: {value}")]
    InvalidModuleField {
        module: String,
        field: &'static str,
        value: f64,
    },

    #[error("alpha must lie in [0, 1], got {0}")]
    Alpha(f64),

    #[error("model has zero total cost")]
    EmptyModel,

    #[error("cost list is empty")]
    EmptyCosts,

    #[error("pipeline degree must be at least 1, got {0}")]
    PipelineDegree(usize),

    #[error("world size {world} is not divisible by pp_degree x tp_degree = {group}")]
    WorldSize { world: usize, group: usize },

    #[error("invalid placement strategy `{0}`")]
    Placement(String),

    #[error("invalid degree: {0}")]
    Degree(String),

    #[error("unknown link class `{0}`")]
    UnknownLink(String),

    #[error("cluster description is invalid: {0}")]
    Cluster(String),

    #[error("rank {rank} released {requested} bytes but only {reserved} are reserved")]
    BufferUnderflow {
        rank: usize,
        requested: u64,
        reserved: u64,
    },

    #[error("module `{0}` has no partition assignment")]
    Unassigned(String),

    #[error("simulation deadlocked at t={time}: {snapshot}")]
    Deadlock { time: f64, snapshot: String },

    #[error("static mode violation: {0}")]
    StaticMode(String),

    #[error("invalid simulation setup: {0}")]
    Simulation(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("dimension {dim} of size {size} is not divisible by {parts}")]
    Divisibility { dim: usize, size: usize, parts: usize },

    #[error("index {index} at position {position} on tp_rank {rank} is out of range for vocabulary of {vocab}")]
    IndexOutOfRange {
        index: usize,
        rank: usize,
        position: usize,
        vocab: usize,
    },

    #[error("backward called before forward")]
    NoForward,

    #[error("invalid transformer configuration: {0}")]
    TransformerConfig(String),

    #[error("unknown checkpoint strategy `{0}`")]
    CheckpointStrategy(String),

    #[error("invalid memory configuration: {0}")]
    MemoryConfig(String),

    #[error("invalid run configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
