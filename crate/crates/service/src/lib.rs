//! Command/snapshot boundary around the training engine: the WebSocket
//! protocol, per-connection session control, and the `rnnscope` CLI.

pub mod cli;
pub mod controller;
pub mod protocol;
pub mod server;
pub mod snapshot;

pub use controller::{CommandError, SessionController};
pub use protocol::{Command, Envelope, MessageType, View, PROTOCOL_VERSION};
pub use snapshot::Snapshot;
