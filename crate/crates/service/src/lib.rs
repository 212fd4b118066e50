//! HTTP service and operator CLI around the memory engine.
//!
//! [`registry::SessionRegistry`] owns per-user state and persistence,
//! [`api::router`] exposes it over HTTP.

pub mod api;
pub mod cli;
pub mod registry;
pub mod settings;

pub use api::{router, AppState};
pub use registry::{Clock, SessionRegistry};
