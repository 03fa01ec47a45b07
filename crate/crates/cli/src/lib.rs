//! Library side of the command-line crate: experiment plans and run reports.
//! The `zegseg` binary wires these to the training and evaluation entry
//! points.

pub mod plan;
pub mod report;
