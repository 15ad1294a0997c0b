pub mod compressors;
pub mod config;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod linalg;
pub mod metrics;
pub mod potentials;
pub mod samplers;
pub mod streams;
pub mod theory;
pub mod validation;
