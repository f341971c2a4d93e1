//! Speculative PIM-kernel coherence: signatures, kernel records, conflict
//! detection, commit, rollback, and the forward-progress lock fallback.
//! The protocol state machine itself runs inside `coherence::system`.

pub mod signature;

pub use signature::{Signature, CHAIN_THRESHOLD, SIGNATURE_BYTES};
