//! Independent numerical oracles for the mortvi test suites.
//!
//! Nothing here calls into `mortvi`; every routine is a direct, slow,
//! textbook computation used to freeze or cross-check expected values.

pub mod fd;
pub mod linalg;
pub mod optimize;
pub mod quadrature;
pub mod stats;
