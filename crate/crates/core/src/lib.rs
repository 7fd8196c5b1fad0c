//! Typed element streams between producer and consumer process groups.
//!
//! The building blocks, bottom up:
//!
//! - [`schema`]: fixed-layout element schemas, encoding, digests.
//! - [`frame`]: the wire frame every link carries.
//! - [`transport`]: persistent links between endpoints, with in-process
//!   and TCP fabrics behind one interface.
//! - [`runtime`]: channels between producer and consumer groups, stream
//!   attach with processing callbacks, blocking/non-blocking send, the
//!   all-producers termination protocol, and the consumer operate loop.
//! - [`harness`]: per-rank counters and the processing-rate report.
//! - [`launcher`]: run configuration, rank assignment, and MPMD-style
//!   launching (rank threads in-process, or spawned OS processes over
//!   sockets).
//! - [`apps`]: the reference applications (streaming word count, particle
//!   trajectory pipeline, online event filter).

pub mod apps;
pub mod error;
pub mod frame;
pub mod harness;
pub mod launcher;
pub mod runtime;
pub mod schema;
pub mod transport;

pub use error::{Error, Result};
pub use frame::{Frame, FrameKind};
pub use harness::{RankMetrics, Recorder, RunReport};
pub use launcher::{LaunchMode, RunConfig};
pub use runtime::{Channel, OperationSet, RoutingPolicy, StreamHandle};
pub use schema::{
    decode_element, encode_element, schema_digest, FieldSpec, FieldValues, ScalarKind,
    StreamSchema, Values,
};
pub use transport::{EndpointId, Fabric, LoopbackFabric, Role, TcpFabric};
