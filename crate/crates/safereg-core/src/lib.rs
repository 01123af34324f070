//! Safe-region identification for controlled dynamical systems.

pub mod config;
pub mod dataset;
pub mod env;
pub mod gp;
pub mod graph;
pub mod grid;
pub mod hsic;
pub mod learner;
pub mod prior;
pub mod report;
pub mod spec;
