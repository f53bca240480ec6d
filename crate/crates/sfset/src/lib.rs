//! Successor feature sets: convex sets of d x k successor feature matrices
//! for MDPs, POMDPs, and PSRs, computed by point-based dynamic programming,
//! with optimal planning and feature-matching readouts.

pub mod dp;
pub mod envs;
pub mod error;
pub mod imitation;
pub mod model;
pub mod oracle;
pub mod planner;
pub mod policy;

pub use error::{Result, SfError};
pub use model::{mdp_to_psr, pomdp_to_psr, MdpSpec, PomdpSpec, PsrModel, SimpleTest};
pub mod cli;
