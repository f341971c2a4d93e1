pub mod config;
pub mod experiment;
pub mod export;
pub mod metrics;
