//! The `flowpipe` command line: `run`, `serve` and `validate`.
//!
//! Exit codes: 0 success; 1 the pipeline could not be loaded, validated or
//! run (or the port was taken); 2 the run finished but faults reached output
//! pipers.

use std::ffi::OsString;
use std::io::Write;
use std::net::IpAddr;
use std::path::{Path, PathBuf};

use clap::{ArgAction, Parser, Subcommand};

use crate::builtins::{DUMP_ITEM, LOAD_ITEM};
use crate::log::{self, Level, LogSink, Logger};
use crate::pipeline::manifest::{load_manifest_file, Manifest};
use crate::pipeline::{Pipeline, PipelineError, RunStats};
use crate::registry::FunctionRef;
use crate::remote::{RemoteError, Server};
use crate::stdlib::standard_registry;
use crate::workers_arg::parse_workers_arg;

const SOURCE: &str = "cli";

#[derive(Debug, Parser)]
#[command(name = "flowpipe", version, about = "Run dataflow pipelines described by manifests")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate, run to completion and print statistics.
    Run {
        manifest: PathBuf,
        /// Remote worker servers added to every executor, as HOST:PORT#SLOTS,...
        #[arg(long)]
        workers: Option<String>,
        /// Move items between executors through sockets instead of the manager.
        #[arg(long = "use_tcp", alias = "use-tcp", default_value_t = false, action = ArgAction::Set)]
        use_tcp: bool,
        #[arg(long, default_value = "INFO")]
        log_level: Level,
        /// Write the run statistics as JSON to this file.
        #[arg(long)]
        stats_out: Option<PathBuf>,
    },
    /// Serve the built-in worker functions to remote managers.
    Serve {
        #[arg(long)]
        port: u16,
        #[arg(long, default_value_t = 1)]
        slots: u32,
        #[arg(long, default_value = "0.0.0.0")]
        bind: IpAddr,
        #[arg(long, default_value = "INFO")]
        log_level: Level,
    },
    /// Check a manifest and print the report.
    Validate { manifest: PathBuf },
}

/// Parses `args` (program name first) and runs the command.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match cli.command {
        Command::Run { manifest, workers, use_tcp, log_level, stats_out } => {
            let logger = install_logger(log_level);
            cmd_run(&manifest, workers.as_deref(), use_tcp, stats_out.as_deref(), &logger)
        }
        Command::Serve { port, slots, bind, log_level } => {
            let logger = install_logger(log_level);
            cmd_serve(bind, port, slots, &logger)
        }
        Command::Validate { manifest } => {
            let logger = install_logger(Level::Info);
            cmd_validate(&manifest, &logger)
        }
    }
}

fn install_logger(level: Level) -> Logger {
    log::setup(LogSink::Stderr, level).unwrap_or_else(|_| Logger::stderr(level))
}

fn load(path: &Path, logger: &Logger) -> Option<Manifest> {
    match load_manifest_file(path, standard_registry().into_shared(), logger.clone()) {
        Ok(m) => Some(m),
        Err(e) => {
            logger.error(SOURCE, format_args!("{}: {e}", path.display()));
            None
        }
    }
}

pub fn cmd_run(path: &Path, workers: Option<&str>, use_tcp: bool, stats_out: Option<&Path>, logger: &Logger) -> i32 {
    let Some(manifest) = load(path, logger) else { return 1 };
    let inputs = match manifest.ordered_inputs() {
        Ok(inputs) => inputs,
        Err(e) => {
            logger.error(SOURCE, e);
            return 1;
        }
    };
    let mut pipeline = manifest.pipeline;
    if let Some(text) = workers {
        let extra = match parse_workers_arg(text) {
            Ok(w) => w,
            Err(e) => {
                logger.error(SOURCE, format_args!("--workers: {e}"));
                return 1;
            }
        };
        let configs: Vec<_> = pipeline.executors().values().cloned().collect();
        for mut cfg in configs {
            cfg.remote.extend(extra.iter().cloned());
            pipeline.set_executor(cfg).expect("pipeline not started");
        }
    }
    if use_tcp {
        route_through_sockets(&mut pipeline, logger);
    }
    if let Err(e) = run_pipeline(&mut pipeline, inputs) {
        match e {
            PipelineError::Invalid(report) => {
                for v in &report.violations {
                    logger.error(SOURCE, v);
                }
            }
            e => logger.error(SOURCE, e),
        }
        return 1;
    }
    let stats = pipeline.stats();
    print_stats(&stats);
    if let Some(out) = stats_out {
        let json = stats.to_value().to_json().map(|j| serde_json::to_string_pretty(&j).unwrap_or_default());
        if let Err(e) = json.map_err(|e| e.to_string()).and_then(|s| std::fs::write(out, s).map_err(|e| e.to_string()))
        {
            logger.error(SOURCE, format_args!("cannot write stats to {}: {e}", out.display()));
            return 1;
        }
    }
    let faults = pipeline.leaf_fault_count();
    if faults > 0 {
        logger.error(SOURCE, format_args!("{faults} fault(s) reached output pipers"));
        2
    } else {
        0
    }
}

fn run_pipeline(p: &mut Pipeline, inputs: Vec<Vec<crate::Value>>) -> Result<(), PipelineError> {
    p.validate()?;
    p.start(inputs)?;
    p.run()?;
    p.wait()
}

/// Rewrites every one-to-one pipe between different executors so the
/// producer stages its result (`io.dump_item` over a socket) and the
/// consumer fetches it (`io.load_item`); only the locator passes through
/// the manager.
pub fn route_through_sockets(p: &mut Pipeline, logger: &Logger) {
    let dag = p.dag().clone();
    for (from, to) in dag.edges() {
        let (a, b) = (&p.pipers()[from.name()], &p.pipers()[to.name()]);
        let one_to_one = dag.successors(from.name()).map_or(0, |s| s.len()) == 1
            && dag.predecessors(to.name()).map_or(0, |s| s.len()) == 1;
        if a.executor == b.executor || !one_to_one || a.produce.is_some() || b.consume.is_some() {
            continue;
        }
        let (mut a, mut b) = (a.clone(), b.clone());
        a.chain.push(FunctionRef::new(DUMP_ITEM).kwarg("type", "socket"));
        b.chain.prepend(FunctionRef::new(LOAD_ITEM));
        logger.debug(SOURCE, format_args!("pipe {from} -> {to} goes through a socket"));
        p.replace_piper(a).expect("pipeline not started");
        p.replace_piper(b).expect("pipeline not started");
    }
}

fn print_stats(stats: &RunStats) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(
        err,
        "{:<16} {:>8} {:>8} {:>7} {:>8} {:>10} {:>10} {:>12}",
        "piper", "in", "out", "faults", "timeouts", "p50_ms", "p95_ms", "in_band_B"
    );
    for (name, s) in &stats.pipers {
        let _ = writeln!(
            err,
            "{:<16} {:>8} {:>8} {:>7} {:>8} {:>10.3} {:>10.3} {:>12}",
            name,
            s.items_in,
            s.items_out,
            s.faults_out,
            s.timeouts,
            s.latency_p50_ms,
            s.latency_p95_ms,
            s.in_band_bytes
        );
    }
}

pub fn cmd_serve(bind: IpAddr, port: u16, slots: u32, logger: &Logger) -> i32 {
    let server = match Server::bind(standard_registry().into_shared(), bind, port, slots, logger.clone()) {
        Ok(s) => s,
        Err(e @ RemoteError::PortInUse(_)) => {
            logger.error(SOURCE, e);
            return 1;
        }
        Err(e) => {
            logger.error(SOURCE, format_args!("cannot serve: {e}"));
            return 1;
        }
    };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "LISTENING {}", server.local_addr());
    let _ = out.flush();
    drop(out);
    server.run();
    0
}

pub fn cmd_validate(path: &Path, logger: &Logger) -> i32 {
    let Some(manifest) = load(path, logger) else { return 1 };
    let report = manifest.pipeline.check();
    println!("{report}");
    if report.is_valid() {
        0
    } else {
        1
    }
}
