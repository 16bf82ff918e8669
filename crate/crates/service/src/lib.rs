//! Live teleoperation sessions over WebSocket.
//!
//! `GET /session?preset=reach|suture[&mode=ciac|traditional]` upgrades to a
//! socket speaking the [`protocol`]; `GET /health` reports the protocol
//! version and the number of open sessions.

pub mod protocol;
mod server;

pub use server::{bind, router, serve, AppState, Health, ServiceConfig, ServiceError};
