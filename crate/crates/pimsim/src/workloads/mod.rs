pub mod linked;
pub mod shared;
