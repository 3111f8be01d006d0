//! Error correction, confirmation and privacy amplification.

pub mod cascade;
pub mod confirm;
pub mod toeplitz;

pub use cascade::{cascade_reconcile, CascadeConfig, CascadeError, CascadeResponder, CascadeSession, Layout, ParityQuery};
pub use confirm::{confirm_hash, ConfirmKey};
pub use toeplitz::{extract_naive, toeplitz_extract, toeplitz_extract_tiled, ToeplitzError};
