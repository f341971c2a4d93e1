//! Deterministic desk-scale simulator of a CPU + 3D-stacked-memory system:
//! an in-memory pointer-chasing accelerator with decoupled address/access
//! engines and a region-based page table, and a speculative PIM cache
//! coherence protocol compared against fine-grained MESI, coarse-grained
//! locks, non-cacheable PIM data, and an ideal zero-cost mechanism.

pub mod coherence;
pub mod error;
pub mod harness;
pub mod impica;
pub mod lazypim;
pub mod mem;
pub mod rpt;
pub mod workloads;

pub use error::{SimError, SimResult};
