//! Software twin of a three-state, one-decoy BB84 link over fiber.

pub mod linksim;
pub mod math;
pub mod model;
pub mod rng;
pub mod finitekey;
pub mod classical;
pub mod distill;
pub mod sifting;
pub mod synchro;
pub mod node;
