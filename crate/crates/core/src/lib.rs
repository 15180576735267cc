//! Conservative sequential post-election audits.
//!
//! A contest's reported precinct counts fix an apparent margin. Hand counts of a
//! random sample of precincts measure how much error could have inflated that
//! margin, and the largest weighted error in the sample yields an exact
//! worst-case P-value. The audit escalates until it confirms the outcome or
//! every precinct has been counted.

pub mod bounds;
pub mod contest;
pub mod datasets;
pub mod discrepancy;
pub mod error;
pub mod oracle;
pub mod pooling;
pub mod rational;
pub mod report;
pub mod sampling;
pub mod session;
pub mod tail;
pub mod weight;

pub use error::{AuditError, Result};
