//! Traversal programs executed by the accelerator.
//!
//! A program is an initial action plus a step function. The step function
//! stands in for the instruction RAM: given the last loaded node it performs
//! the address computation (charged as compute cycles) and either issues the
//! next load or finishes with a result. Every load address must fall inside
//! a declared region of the backing image.

use crate::mem::Cycle;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NextAction {
    Load {
        va: u64,
        size: u32,
        /// Address-engine cycles spent computing this address.
        cost: Cycle,
    },
    Finish {
        result: u64,
        cost: Cycle,
    },
}

pub struct StepCtx<'a> {
    pub last_va: u64,
    pub data: &'a [u8],
    /// Loads completed so far in this traversal.
    pub depth: u32,
}

type StepFn = Box<dyn Fn(&StepCtx) -> NextAction>;

pub struct TraversalProgram {
    pub start: NextAction,
    step: StepFn,
}

impl TraversalProgram {
    pub fn new(start: NextAction, step: impl Fn(&StepCtx) -> NextAction + 'static) -> Self {
        TraversalProgram {
            start,
            step: Box::new(step),
        }
    }

    pub fn step(&self, ctx: &StepCtx) -> NextAction {
        (self.step)(ctx)
    }
}

impl std::fmt::Debug for TraversalProgram {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TraversalProgram")
            .field("start", &self.start)
            .finish_non_exhaustive()
    }
}

/// Flat byte image of one or more regions, addressed by virtual address.
#[derive(Debug, Default, Clone)]
pub struct MemoryImage {
    segments: BTreeMap<u64, Vec<u8>>, // va_base -> bytes
}

impl MemoryImage {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_segment(&mut self, va_base: u64, bytes: Vec<u8>) {
        self.segments.insert(va_base, bytes);
    }

    pub fn read(&self, va: u64, size: u32) -> &[u8] {
        let (&base, seg) = self
            .segments
            .range(..=va)
            .next_back()
            .expect("load outside image");
        let off = (va - base) as usize;
        assert!(
            off + size as usize <= seg.len(),
            "load at {va:#x}+{size} overruns segment"
        );
        &seg[off..off + size as usize]
    }

    pub fn read_u64(&self, va: u64) -> u64 {
        u64::from_le_bytes(self.read(va, 8).try_into().unwrap())
    }

    pub fn write_u64(&mut self, va: u64, value: u64) {
        let (&base, seg) = self
            .segments
            .range_mut(..=va)
            .next_back()
            .expect("store outside image");
        let off = (va - base) as usize;
        seg[off..off + 8].copy_from_slice(&value.to_le_bytes());
    }

    pub fn segments(&self) -> impl Iterator<Item = (u64, &Vec<u8>)> {
        self.segments.iter().map(|(&b, s)| (b, s))
    }
}

/// Functional host-side execution of a program over an image; the oracle the
/// engine's emitted results are checked against.
pub fn run_on_host(program: &TraversalProgram, image: &MemoryImage, max_steps: u32) -> u64 {
    let mut action = program.start;
    let mut depth = 0u32;
    loop {
        match action {
            NextAction::Finish { result, .. } => return result,
            NextAction::Load { va, size, .. } => {
                depth += 1;
                assert!(depth <= max_steps, "traversal did not terminate");
                let data = image.read(va, size);
                action = program.step(&StepCtx {
                    last_va: va,
                    data,
                    depth,
                });
            }
        }
    }
}
