//! IO, daemons, CLI plumbing, and scenario tooling for the sdps overlay.
//! The state machines live in `sdps-core`; this crate only moves bytes.

pub mod client;
pub mod daemon;
pub mod gen;
pub mod logger;
pub mod net;
