//! Parallel and distributed data-processing pipelines.
//!
//! Named worker functions are composed into chains, chains become nodes of a
//! directed acyclic graph, and items stream through the graph on shared pools
//! of local and remote execution lanes.

pub mod builtins;
pub mod cli;
pub mod codec;
pub mod dag;
pub mod envelope;
pub mod executor;
pub mod ipc;
pub mod log;
pub mod pipeline;
pub mod registry;
pub mod remote;
pub mod stdlib;
pub mod value;
pub mod workers_arg;

pub use codec::Codec;
pub use dag::{Dag, DagError, NodeId};
pub use envelope::{Body, Envelope, ErrorClass, FaultInfo};
pub use pipeline::{Pipeline, PipelineError, PiperSpec, RunState};
pub use registry::{apply_chain, compose_chain, FunctionRef, Kwargs, WorkerChain, WorkerError, WorkerRegistry};
pub use value::Value;
