//! Experiment tracking and model registry.

pub mod client;
pub mod server;
pub mod store;
pub mod types;

pub use client::{ClientError, RegistryClient};
pub use store::{sha256_hex, Registry, RegistryError};
pub use types::*;
