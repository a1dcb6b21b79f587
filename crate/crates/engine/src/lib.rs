//! Engine service: runs parsed commands against persisted sessions, from
//! the command line or over HTTP.

pub mod backend;
pub mod error;
pub mod pipeline;
pub mod script;
pub mod server;
pub mod session;

pub use error::{EngineError, ErrorBody};
pub use pipeline::{CameraSpec, EngineConfig};
pub use session::{CommandResult, Session};
