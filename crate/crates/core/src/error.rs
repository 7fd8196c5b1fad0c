//! Crate-wide error type.

use thiserror::Error;

/// Convenience alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Schema construction or element encoding violated the declared layout.
    #[error("schema violation: {0}")]
    Schema(String),

    /// Bytes on the wire did not form a valid frame.
    #[error("framing error: {0}")]
    Framing(String),

    /// A peer could not be reached or a connection failed.
    #[error("connection error: {0}")]
    Connection(String),

    /// A peer sent something that violates the wire protocol.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// The link was closed by the peer or by an earlier failure.
    #[error("link closed")]
    LinkClosed,

    /// Channel creation failed for every member.
    #[error("channel creation failed: {0}")]
    ChannelCreation(String),

    /// Producer and consumer attached incompatible schemas.
    #[error("schema mismatch: local digest {local:#018x}, remote digest {remote:#018x}")]
    SchemaMismatch { local: u64, remote: u64 },

    /// Operation on a freed or otherwise unusable channel.
    #[error("invalid channel: {0}")]
    InvalidChannel(String),

    /// Send attempted after the stream was terminated locally.
    #[error("stream already terminated for this producer")]
    StreamTerminated,

    /// Terminate called twice by the same producer.
    #[error("terminate already signaled on this stream")]
    AlreadyTerminated,

    /// free_channel called while a stream is still live.
    #[error("channel in use: {0}")]
    ChannelInUse(String),

    /// free_channel called twice.
    #[error("channel already freed")]
    AlreadyFreed,

    /// A routing policy produced an unusable destination.
    #[error("routing error: {0}")]
    Routing(String),

    /// Run configuration rejected; `path` names the offending field.
    #[error("config error at {path}: {message}")]
    Config { path: String, message: String },

    /// Metrics recorder misuse.
    #[error("metrics error: {0}")]
    Metrics(String),

    /// A stream operation callback reported a failure.
    #[error("callback error: {0}")]
    Callback(String),

    /// A launched rank failed; the message carries per-rank diagnostics.
    #[error("rank {rank} failed: {message}")]
    Rank { rank: u32, message: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Shorthand for a config error with a field path.
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}
