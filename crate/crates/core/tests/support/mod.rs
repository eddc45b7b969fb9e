//! Oracles shared by the core test suites and the acceptance harness.

#![allow(dead_code)]

pub mod aggregation;
pub mod fixture_oracle;
pub mod labeling;
pub mod propagation;
pub mod topology;
pub mod ttest;
