//! Annotation campaign backend and the `cewb` command-line front end.

pub mod campaign;
pub mod cli;
pub mod http;
