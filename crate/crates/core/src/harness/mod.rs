//! Experiment drivers shared by the command-line tool and the test suites.

pub mod bound_report;
pub mod config;
pub mod gradcheck;
pub mod membership;
pub mod source;
pub mod sweep;
