//! Relational in-context learning over temporal heterogeneous graphs.

pub mod autodiff;
pub mod baseline;
pub mod cli;
pub mod colstore;
pub mod icl_model;
pub mod metrics;
pub mod pql;
pub mod relgraph;
pub mod sampler;
pub mod scm;
pub mod taskgen;
pub mod time;
pub mod util;
