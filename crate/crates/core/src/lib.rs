//! Packing scheduler and trace-driven simulator for batched attention execution.
//!
//! Heterogeneous request batches waste tiled attention compute: short requests
//! occupy full tiles, long requests straggle. This crate packs requests into
//! length-balanced groups bounded by a token capacity, deduplicates shared
//! prompt prefixes inside each group, plans contiguous KV buffers with
//! per-request offset tables, and simulates decode-time drift and regrouping.
//! A branch-and-bound oracle and a streaming-softmax merge checker provide the
//! ground truth the heuristics are measured against.
//!
//! Module map:
//! - [`trace`]: JSONL workload ingestion and synthetic trace generators.
//! - [`grouping`]: descending-length greedy partitioning, long-request
//!   splitting, and the quadratic tile-utilization model.
//! - [`prefix`]: trie-based shared-prefix detection and the deduplicated
//!   I/O-volume model.
//! - [`layout`]: group-contiguous buffer planning, offset tables, headroom,
//!   and copy plans out of a paged source layout.
//! - [`merge`]: numeric verification that splitting attention across groups
//!   and merging partial outputs is lossless.
//! - [`simulate`]: decode-loop simulation with drift-triggered regrouping.
//! - [`oracle`]: exact partitioner for small instances plus solver benchmarks.

pub mod config;
pub mod grouping;
pub mod layout;
pub mod merge;
pub mod oracle;
pub mod prefix;
pub mod request;
pub mod simulate;
pub mod trace;

pub use config::{Config, ConfigError, DEFAULT_MIN_SHARE, DEFAULT_PAGE_SIZE};
pub use grouping::{Group, GroupMember, PackingPlan, SplitSegment, Utilization};
pub use layout::{CopyPlan, GroupBuffer, OffsetTable, PagedStore};
pub use merge::{AttentionProblem, PartialAttention};
pub use oracle::OracleResult;
pub use prefix::{PrefixPartition, PrefixTrie};
pub use request::{Prompt, Request, Token};
pub use simulate::{CostModel, CostModelMode, SimReport};
pub use trace::{TraceMetadata, WorkloadTrace};
