//! File-in, file-out commands behind the `modelpar` binary.
//!
//! Every command reads its inputs, computes, and writes pretty-printed JSON
//! or CSV into an output directory. Nothing time- or host-dependent is
//! written, so identical inputs give byte-identical artifacts.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use crate::comm::ClusterShape;
use crate::config::RunConfig;
use crate::error::Error;
use crate::exec::ExecPolicy;
use crate::memory::{memory_report, CheckpointPlan, MemoryReport};
use crate::model_graph::{build_node_tree, compute_costs, load_model_spec, ModelSpec};
use crate::partition::{partition_report, partition_tree, PartitionReport};
use crate::pipeline::{gantt_bars, simulate, MessageCounts, Pipeline, RunResult, SchedulePolicy};
use crate::tensor_parallel::oracle::{run_suite, Fault, OracleConfig, OracleReport};
use crate::tensor_parallel::{plan_replacement, Registry};
use crate::topology::Topology;

/// Failure of a command, carrying its process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CommandError {
    /// Unreadable or malformed input.
    #[error("{}{source}", file.as_ref().map(|f| format!("{}: ", f.display())).unwrap_or_default())]
    Input { file: Option<PathBuf>, source: Error },
    /// Inputs are well-formed but describe an impossible setup.
    #[error("{0}")]
    Infeasible(Error),
    #[error("{source}\nqueue dump written to {}", dump.display())]
    Deadlock { source: Error, dump: PathBuf },
    #[error("{failures} tensor-parallel check(s) failed; report written to {}", report.display())]
    TpCheck { failures: usize, report: PathBuf },
    /// Writing an artifact failed.
    #[error("cannot write {}: {source}", path.display())]
    Output { path: PathBuf, source: std::io::Error },
}

impl CommandError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CommandError::Input { .. } => 2,
            CommandError::Infeasible(_) => 3,
            CommandError::Deadlock { .. } => 4,
            CommandError::TpCheck { .. } => 5,
            CommandError::Output { .. } => 1,
        }
    }
}

/// Sorts a library error into the input / infeasible classes. Deadlocks are
/// handled by the simulate command, which also writes the queue dump.
pub fn classify(err: Error) -> CommandError {
    match err {
        Error::Parse(_)
        | Error::DuplicateModule(_)
        | Error::DuplicateParam(_)
        | Error::DanglingParent { .. }
        | Error::UnknownParam { .. }
        | Error::UnknownTraceModule(_)
        | Error::TraceOrder { .. }
        | Error::RootCount(_)
        | Error::Cycle(_)
        | Error::NonPositiveParam(_)
        | Error::InvalidModuleField { .. }
        | Error::UnknownLink(_)
        | Error::Cluster(_)
        | Error::CheckpointStrategy(_)
        | Error::Io(_) => CommandError::Input {
            file: None,
            source: err,
        },
        other => CommandError::Infeasible(other),
    }
}

type CmdResult<T> = std::result::Result<T, CommandError>;

/// Input files shared by the commands. Missing optional files mean defaults.
#[derive(Clone, Debug, Default)]
pub struct Inputs {
    pub model: Option<PathBuf>,
    pub config: Option<PathBuf>,
    pub cluster: Option<PathBuf>,
    /// Overrides the seed in the configuration file.
    pub seed: Option<u64>,
}

fn read(path: &Path) -> CmdResult<String> {
    fs::read_to_string(path).map_err(|e| CommandError::Input {
        file: Some(path.to_path_buf()),
        source: e.into(),
    })
}

/// Parses `path` with `parse`, attaching the path to input errors.
fn load<T>(path: &Path, parse: impl FnOnce(&str) -> crate::Result<T>) -> CmdResult<T> {
    parse(&read(path)?).map_err(|e| match classify(e) {
        CommandError::Input { source, .. } => CommandError::Input {
            file: Some(path.to_path_buf()),
            source,
        },
        other => other,
    })
}

fn parse_json<T: serde::de::DeserializeOwned>(text: &str) -> crate::Result<T> {
    Ok(serde_json::from_str(text)?)
}

impl Inputs {
    fn model(&self) -> CmdResult<ModelSpec> {
        let path = self.model.as_deref().ok_or_else(|| CommandError::Input {
            file: None,
            source: Error::Config("a model file is required (--model)".into()),
        })?;
        load(path, load_model_spec)
    }

    fn run_config(&self) -> CmdResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => load(p, parse_json::<RunConfig>)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate().map_err(classify)?;
        Ok(cfg)
    }

    fn cluster(&self) -> CmdResult<ClusterShape> {
        match &self.cluster {
            Some(p) => load(p, ClusterShape::from_json),
            None => Ok(ClusterShape::default()),
        }
    }
}

fn write(dir: &Path, name: &str, contents: &str) -> CmdResult<PathBuf> {
    let path = dir.join(name);
    let io = |source| CommandError::Output {
        path: path.clone(),
        source,
    };
    fs::create_dir_all(dir).map_err(io)?;
    let mut text = contents.to_string();
    if !text.ends_with('\n') {
        text.push('\n');
    }
    fs::write(&path, text).map_err(io)?;
    Ok(path)
}

fn pretty<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("artifact serializes")
}

/// Output of `partition`: the report written to `assignment.json` and the
/// load table printed by the binary.
#[derive(Clone, Debug)]
pub struct PartitionOutput {
    pub report: PartitionReport,
    pub table: String,
}

/// Partitions the model over `pipeline_parallel_degree` devices and writes
/// `assignment.json`.
pub fn cmd_partition(inputs: &Inputs, out_dir: &Path) -> CmdResult<PartitionOutput> {
    let spec = inputs.model()?;
    let cfg = inputs.run_config()?;
    let tree = build_node_tree(&spec);
    let costed = compute_costs(&tree, &spec, cfg.alpha).map_err(classify)?;
    let assignment = partition_tree(&costed, cfg.pipeline_parallel_degree).map_err(classify)?;
    let report = partition_report(&assignment, &costed);
    write(out_dir, "assignment.json", &report.to_json())?;
    Ok(PartitionOutput {
        table: report.load_table(),
        report,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepSummary {
    pub step: usize,
    pub makespan: f64,
    pub forward_makespan: f64,
    pub replayed: bool,
    pub fast: bool,
    pub messages: MessageCounts,
}

/// Contents of `summary.json`. Top-level figures describe the final step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub pipeline: SchedulePolicy,
    pub pipeline_parallel_degree: usize,
    pub tensor_parallel_degree: usize,
    pub world_size: usize,
    pub microbatches: usize,
    pub makespan: f64,
    pub forward_makespan: f64,
    /// Compute time over makespan, per pipeline rank.
    pub busy_fraction: Vec<f64>,
    pub messages: MessageCounts,
    pub metadata_rounds: usize,
    pub replayed_from: Option<usize>,
    pub steps: Vec<StepSummary>,
    pub partition_loads: Vec<f64>,
    pub tensor_parallel_modules: Vec<String>,
    /// Final-step makespan under each policy, with `--compare`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub compare: Option<serde_json::Value>,
}

#[derive(Clone, Debug)]
pub struct SimulateOutput {
    pub summary: Summary,
    pub memory: MemoryReport,
}

struct Planned<'a> {
    pipe: Pipeline<'a>,
    topo: Topology,
    loads: Vec<f64>,
    tp_modules: BTreeSet<String>,
}

fn plan<'a>(spec: &'a ModelSpec, cfg: &RunConfig, cluster: ClusterShape) -> CmdResult<Planned<'a>> {
    let topo = cfg.topology().map_err(classify)?;
    let tree = build_node_tree(spec);
    let costed = compute_costs(&tree, spec, cfg.alpha).map_err(classify)?;
    let assignment = partition_tree(&costed, cfg.pipeline_parallel_degree).map_err(classify)?;
    let loads = partition_report(&assignment, &costed).loads;
    let mut pipe = Pipeline::new(spec, &tree, &assignment, &topo, cluster).map_err(classify)?;
    let checkpoints = CheckpointPlan::build(spec, &pipe.owner, &cfg.checkpoints).map_err(classify)?;
    pipe.recompute = checkpoints.recompute_times(spec, cfg.recompute_factor);
    let tp_modules = if cfg.tensor_parallel_degree > 1 {
        plan_replacement(spec, &Registry::builtin(), &cfg.tensor_parallel_marks())
            .into_iter()
            .map(|r| r.module)
            .collect()
    } else {
        BTreeSet::new()
    };
    Ok(Planned {
        pipe,
        topo,
        loads,
        tp_modules,
    })
}

fn run(pipe: &Pipeline, cfg: &RunConfig, policy: SchedulePolicy, out_dir: &Path) -> CmdResult<RunResult> {
    let mut sim = cfg.sim_config();
    sim.policy = policy;
    match simulate(pipe, &sim) {
        Ok(r) => Ok(r),
        Err(Error::Deadlock { time, snapshot }) => {
            let parsed: serde_json::Value =
                serde_json::from_str(&snapshot).unwrap_or(serde_json::Value::String(snapshot.clone()));
            let dump = write(
                out_dir,
                "deadlock.json",
                &pretty(&json!({ "time": time, "policy": policy, "ranks": parsed })),
            )?;
            Err(CommandError::Deadlock {
                source: Error::Deadlock { time, snapshot },
                dump,
            })
        }
        Err(e) => Err(classify(e)),
    }
}

/// Simulates the configured run and writes `timeline.csv`, `gantt.json`,
/// `summary.json` and `memory.json`. The timeline and Gantt bars cover the
/// final step.
pub fn cmd_simulate(inputs: &Inputs, out_dir: &Path, compare: bool) -> CmdResult<SimulateOutput> {
    let spec = inputs.model()?;
    let cfg = inputs.run_config()?;
    let cluster = inputs.cluster()?;
    let planned = plan(&spec, &cfg, cluster)?;
    let memory = memory_report(
        &spec,
        &planned.pipe.owner,
        &planned.topo,
        &planned.tp_modules,
        &cfg.memory_config(),
    )
    .map_err(classify)?;

    let result = run(&planned.pipe, &cfg, cfg.pipeline, out_dir)?;
    let compare = if compare {
        let mut makespans = serde_json::Map::new();
        for policy in [SchedulePolicy::Simple, SchedulePolicy::Interleaved] {
            let makespan = if policy == cfg.pipeline {
                result.steps.last().expect("at least one step").makespan
            } else {
                run(&planned.pipe, &cfg, policy, out_dir)?
                    .steps
                    .last()
                    .expect("at least one step")
                    .makespan
            };
            let name = match policy {
                SchedulePolicy::Simple => "simple",
                SchedulePolicy::Interleaved => "interleaved",
            };
            makespans.insert(name.to_string(), json!(makespan));
        }
        Some(serde_json::Value::Object(makespans))
    } else {
        None
    };

    let last = result.steps.last().expect("at least one step");
    let summary = Summary {
        pipeline: cfg.pipeline,
        pipeline_parallel_degree: cfg.pipeline_parallel_degree,
        tensor_parallel_degree: cfg.tensor_parallel_degree,
        world_size: cfg.world_size(),
        microbatches: cfg.microbatches,
        makespan: last.makespan,
        forward_makespan: last.forward_makespan,
        busy_fraction: last.timeline.busy_fraction(cfg.pipeline_parallel_degree),
        messages: last.counts,
        metadata_rounds: last.counts.metadata_rounds,
        replayed_from: result.replayed_from,
        steps: result
            .steps
            .iter()
            .map(|s| StepSummary {
                step: s.step,
                makespan: s.makespan,
                forward_makespan: s.forward_makespan,
                replayed: s.replayed,
                fast: s.fast,
                messages: s.counts,
            })
            .collect(),
        partition_loads: planned.loads,
        tensor_parallel_modules: planned.tp_modules.into_iter().collect(),
        compare,
    };

    write(out_dir, "timeline.csv", &last.timeline.to_csv().map_err(classify)?)?;
    write(out_dir, "gantt.json", &pretty(&gantt_bars(&last.timeline)))?;
    write(out_dir, "summary.json", &pretty(&summary))?;
    write(out_dir, "memory.json", &memory.to_json())?;
    Ok(SimulateOutput { summary, memory })
}

/// Runs the tensor-parallel oracle suite and writes `tpcheck.json`. A
/// failing check is reported as [`CommandError::TpCheck`] after the report
/// is written.
pub fn cmd_tpcheck(
    inputs: &Inputs,
    out_dir: &Path,
    fault: Option<Fault>,
    policy: ExecPolicy,
) -> CmdResult<OracleReport> {
    let mut cfg = match &inputs.config {
        Some(p) => load(p, parse_json::<OracleConfig>)?,
        None => OracleConfig::default(),
    };
    if let Some(seed) = inputs.seed {
        cfg.seed = seed;
    }
    if fault.is_some() {
        cfg.fault = fault;
    }
    let report = run_suite(&cfg, policy).map_err(classify)?;
    let path = write(out_dir, "tpcheck.json", &report.to_json())?;
    let failures = report.failures().count();
    if failures > 0 {
        return Err(CommandError::TpCheck {
            failures,
            report: path,
        });
    }
    Ok(report)
}

/// Builds the process-group layout of the run configuration and writes
/// `topology.json`.
pub fn cmd_topology(inputs: &Inputs, out_dir: &Path) -> CmdResult<Topology> {
    let cfg = inputs.run_config()?;
    let topo = cfg.topology().map_err(classify)?;
    write(out_dir, "topology.json", &topo.to_json())?;
    Ok(topo)
}
