//! Privacy budget allocation for hierarchical count releases under the
//! clamped Laplace mechanism.

pub mod allocator;
pub mod analytics;
pub mod cli;
pub mod downstream;
pub mod harness;
pub mod hierarchy;
pub mod release;
pub mod rng;
pub mod skew;
