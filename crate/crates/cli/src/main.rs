use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use modelpar::commands::{cmd_partition, cmd_simulate, cmd_topology, cmd_tpcheck, CommandError, Inputs};
use modelpar::exec::ExecPolicy;
use modelpar::tensor_parallel::oracle::Fault;

/// Plan and simulate pipeline- and tensor-parallel training runs.
#[derive(Parser)]
#[command(name = "modelpar", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory receiving the artifacts.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Overrides the seed of the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Partition a model across pipeline stages; writes assignment.json.
    Partition {
        /// Model description (JSON).
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Simulate training steps; writes timeline.csv, summary.json,
    /// memory.json and gantt.json.
    Simulate {
        #[arg(long)]
        model: PathBuf,
        /// Cluster description (JSON).
        #[arg(long)]
        cluster: Option<PathBuf>,
        /// Also simulate the other pipeline policy and record both makespans.
        #[arg(long)]
        compare: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Run the tensor-parallel equivalence suite; writes tpcheck.json.
    /// `--config` takes suite sizes.
    Tpcheck {
        #[command(flatten)]
        common: Common,
        /// Run the cases on one thread.
        #[arg(long)]
        sequential: bool,
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<InjectedFault>,
    },
    /// Show the rank layout of a configuration; writes topology.json.
    Topology {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum InjectedFault {
    WrongShard,
}

fn inputs(model: Option<PathBuf>, cluster: Option<PathBuf>, common: &Common) -> Inputs {
    Inputs {
        model,
        config: common.config.clone(),
        cluster,
        seed: common.seed,
    }
}

fn run(cli: Cli) -> Result<(), CommandError> {
    match cli.command {
        Command::Partition { model, common } => {
            let out = cmd_partition(&inputs(Some(model), None, &common), &common.out_dir)?;
            print!("{}", out.table);
            println!("max/min load ratio: {:.6}", out.report.max_min_ratio());
        }
        Command::Simulate {
            model,
            cluster,
            compare,
            common,
        } => {
            let out = cmd_simulate(&inputs(Some(model), cluster, &common), &common.out_dir, compare)?;
            let s = &out.summary;
            println!("makespan: {:.6} s over {} microbatches", s.makespan, s.microbatches);
            if let Some(c) = &s.compare {
                println!("compare: {c}");
            }
            println!("artifacts written to {}", common.out_dir.display());
        }
        Command::Tpcheck {
            common,
            sequential,
            inject_fault,
        } => {
            let policy = if sequential {
                ExecPolicy::Sequential
            } else {
                ExecPolicy::Parallel
            };
            let fault = inject_fault.map(|f| match f {
                InjectedFault::WrongShard => Fault::WrongShard,
            });
            let report = cmd_tpcheck(&inputs(None, None, &common), &common.out_dir, fault, policy)?;
            println!("{}", report.to_json());
        }
        Command::Topology { common } => {
            let topo = cmd_topology(&inputs(None, None, &common), &common.out_dir)?;
            println!("{}", topo.to_json());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
