use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("physical address {0:#x} does not map to a configured stack")]
    UnmappedAddress(u64),
    #[error("region table is full (128 regions)")]
    RegionTableFull,
    #[error("region {0} already pinned to stack {1}")]
    RemapRefused(u8, u8),
    #[error("region size {0} exceeds the 2TB flat-table coverage")]
    RegionTooLarge(u64),
    #[error("page fault at va {va:#x} in region {region}")]
    PageFault { va: u64, region: u8 },
    #[error("va {0:#x} is not inside any allocated region")]
    NotAPimRegion(u64),
    #[error("virtual address {0:#x} is outside the 48-bit space")]
    NonCanonicalVa(u64),
    #[error("request queue is full")]
    Backpressure,
    #[error("data RAM stack overflow for traversal {0}")]
    StackOverflow(u32),
    #[error("illegal MESI directory transition: {0}")]
    ProtocolViolation(String),
    #[error("nested coarse-grained acquire")]
    NestedAcquire,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
}

pub type SimResult<T> = Result<T, SimError>;
