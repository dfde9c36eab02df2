//! Trace-driven simulation of x86-64 address translation in front of a
//! four-level cache hierarchy with a die-stacked DRAM L4.
//!
//! The pieces, bottom up:
//!
//! - [`vmem`]: 48-bit addresses, radix page tables and address spaces.
//! - [`tlb`]: L1 I/D, unified L2 and superpage TLBs.
//! - [`cachehier`]: L1–L4 caches and main memory.
//! - [`walker`]: the hardware page walker and page-walk caches.
//! - [`workload`]: trace parsing and synthetic event generation.
//! - [`engine`]: the per-event simulation loop and its [`engine::Report`].
//! - [`config`] and [`sweep`]: experiment files, L4 sweeps and CSV output.

pub mod cachehier;
pub mod config;
pub mod engine;
pub mod lru;
pub mod sweep;
pub mod tlb;
pub mod vmem;
pub mod walker;
pub mod workload;

pub use engine::{normalized_ipc, Engine, Report};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error(transparent)]
    Trace(#[from] workload::TraceError),
    #[error(transparent)]
    Geometry(#[from] cachehier::InvalidGeometry),
    #[error(transparent)]
    Vmem(#[from] vmem::VmemError),
    #[error("runs are not comparable: {0}")]
    MismatchedRuns(String),
    #[error("internal invariant violated: {0}")]
    Invariant(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
