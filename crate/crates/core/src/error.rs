use std::io;

use thiserror::Error;

use crate::registry::OpId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid buffer: {0}")]
    InvalidBuffer(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("region registry is full ({what})")]
    CapacityExhausted { what: &'static str },

    #[error("operation {0} is already registered")]
    DuplicateId(OpId),

    #[error("operation {0} is not registered")]
    UnknownOp(OpId),

    #[error("operation {0} is still in flight")]
    StillInFlight(OpId),

    #[error("failed to change page protection: {0}")]
    Protect(#[source] io::Error),

    #[error("failed to install fault handler: {0}")]
    Install(#[source] io::Error),

    #[error("failed to map memory: {0}")]
    Map(#[source] io::Error),

    #[error("unknown destination rank {rank} (world size {world_size})")]
    UnknownDestination { rank: u32, world_size: usize },

    #[error("transport has shut down")]
    Shutdown,

    #[error("completion handle does not belong to this transport")]
    StaleHandle,

    #[error("operation has not completed yet")]
    Incomplete,

    #[error("receive buffer too small: message needs {required} bytes, buffer holds {available}")]
    Truncated { required: usize, available: usize },

    #[error("malformed frame: {0}")]
    Frame(&'static str),

    #[error(transparent)]
    Io(#[from] io::Error),
}
