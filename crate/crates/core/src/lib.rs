//! Bidirectional network access control: synthesize firewall-ready policies
//! from security invariants, and analyze iptables rulesets back into
//! service-level access matrices so both directions can be checked against
//! each other.
//!
//! The crate is organized along that round trip:
//!
//! - [`policy`], [`invariant`], [`synthesis`]: entities, invariant
//!   templates, maximal-policy construction, verification, and stateful
//!   upgrade.
//! - [`ipset`]: exact interval-set algebra over the IPv4 space and ports.
//! - [`iptables`]: a typed AST for the iptables-save filter table with
//!   parser and renderer.
//! - [`analysis`]: chain unfolding, service specialization, unknown-match
//!   closure, and service-matrix construction.
//! - [`serialize`]: iptables, DFWFW, and DOT emitters.

pub mod analysis;
pub mod error;
pub mod invariant;
pub mod ipset;
pub mod iptables;
pub mod policy;
pub mod serialize;
pub mod synthesis;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
