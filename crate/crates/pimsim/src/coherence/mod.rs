pub mod cache;
pub mod mesi;
pub mod system;
