//! Group-contiguous KV buffer planning out of a paged source layout.
//!
//! Consolidation walks a prefix partition in order, lays each shared prefix
//! down once, then each member suffix behind it, and reserves `headroom`
//! empty tokens after every suffix so decode appends mutate in place instead
//! of forcing an immediate rebuild. The copy plan lists page-granular moves
//! of valid tokens only; executing it is left to the caller, which keeps the
//! planner testable without any memory emulation.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::prefix::{PrefixPartition, TokenSource};
use crate::request::Token;

/// Paged source layout: per-request token sequences chopped into fixed-size
/// pages in allocation order. The tail page of each request is partially
/// filled, which is exactly the internal fragmentation consolidation removes.
#[derive(Debug, Clone)]
pub struct PagedStore {
    page_size: usize,
    sequences: BTreeMap<String, Vec<Token>>,
    pages: Vec<Page>,
    per_request: BTreeMap<String, Vec<usize>>,
}

/// One physical page: `len` valid tokens of `owner` starting at logical
/// offset `start`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Page {
    pub owner: String,
    pub start: usize,
    pub len: usize,
}

impl PagedStore {
    pub fn new(page_size: usize) -> Self {
        assert!(page_size >= 1, "page size must be at least one token");
        Self {
            page_size,
            sequences: BTreeMap::new(),
            pages: Vec::new(),
            per_request: BTreeMap::new(),
        }
    }

    /// Build a store holding every `(id, tokens)` sequence.
    pub fn build(
        requests: impl IntoIterator<Item = (String, Vec<Token>)>,
        page_size: usize,
    ) -> Result<Self, LayoutError> {
        let mut store = Self::new(page_size);
        for (id, tokens) in requests {
            store.insert(id, tokens)?;
        }
        Ok(store)
    }

    pub fn page_size(&self) -> usize {
        self.page_size
    }

    pub fn insert(&mut self, id: String, tokens: Vec<Token>) -> Result<(), LayoutError> {
        if self.sequences.contains_key(&id) {
            return Err(LayoutError::DuplicateRequest { id });
        }
        let mut page_ids = Vec::new();
        let mut start = 0;
        while start < tokens.len() {
            let len = (tokens.len() - start).min(self.page_size);
            page_ids.push(self.pages.len());
            self.pages.push(Page {
                owner: id.clone(),
                start,
                len,
            });
            start += len;
        }
        self.per_request.insert(id.clone(), page_ids);
        self.sequences.insert(id, tokens);
        Ok(())
    }

    /// Append one decode token to a request, filling its tail page or
    /// allocating a new one.
    pub fn append_token(&mut self, id: &str, token: Token) -> Result<(), LayoutError> {
        let tokens = self
            .sequences
            .get_mut(id)
            .ok_or_else(|| LayoutError::UnknownRequest { id: id.to_string() })?;
        let logical = tokens.len();
        tokens.push(token);
        let page_ids = self.per_request.get_mut(id).expect("page list exists");
        match page_ids.last().map(|&p| &mut self.pages[p]) {
            Some(tail) if tail.len < self.page_size => tail.len += 1,
            _ => {
                page_ids.push(self.pages.len());
                self.pages.push(Page {
                    owner: id.to_string(),
                    start: logical,
                    len: 1,
                });
            }
        }
        Ok(())
    }

    pub fn tokens(&self, id: &str) -> Option<&[Token]> {
        self.sequences.get(id).map(Vec::as_slice)
    }

    pub fn pages_of(&self, id: &str) -> &[usize] {
        self.per_request.get(id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn page(&self, page_id: usize) -> &Page {
        &self.pages[page_id]
    }

    pub fn page_count(&self) -> usize {
        self.pages.len()
    }

    /// Unused token slots across all allocated pages.
    pub fn internal_fragmentation(&self) -> usize {
        self.pages.iter().map(|p| self.page_size - p.len).sum()
    }

    /// Page-granular spans covering the logical range `[start, end)` of a
    /// request, in order.
    fn page_spans(
        &self,
        id: &str,
        start: usize,
        end: usize,
    ) -> Result<Vec<(usize, usize, usize, usize)>, LayoutError> {
        let available = self.tokens(id).map_or(0, <[Token]>::len);
        if end > available {
            return Err(LayoutError::MissingTokens {
                id: id.to_string(),
                needed: end,
                available,
            });
        }
        let mut spans = Vec::new();
        let mut cursor = start;
        while cursor < end {
            let page_index = cursor / self.page_size;
            let page_id = self.per_request[id][page_index];
            let offset_in_page = cursor - page_index * self.page_size;
            let span = (end - cursor).min(self.page_size - offset_in_page);
            spans.push((page_id, offset_in_page, cursor, span));
            cursor += span;
        }
        Ok(spans)
    }
}

/// What a buffer segment holds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum SegmentOwner {
    /// Shared prefix of partition entry `entry`.
    Prefix { entry: usize },
    /// Suffix (and growth headroom) of one member.
    Suffix { id: String },
}

/// One contiguous slice of a group buffer: `len` valid tokens at `start`,
/// followed by `headroom` reserved empty slots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Segment {
    pub owner: SegmentOwner,
    pub start: usize,
    pub len: usize,
    pub headroom: usize,
}

impl Segment {
    /// End of the reserved extent, headroom included.
    pub fn reserved_end(&self) -> usize {
        self.start + self.len + self.headroom
    }
}

/// Contiguous buffer for one group: allocation bookkeeping only; token
/// values live wherever the copy plan is executed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GroupBuffer {
    pub capacity: usize,
    /// Non-overlapping segments sorted by offset.
    pub segments: Vec<Segment>,
    /// End of the last reserved extent.
    pub cursor: usize,
}

impl GroupBuffer {
    /// Valid tokens currently held, headroom excluded.
    pub fn used_tokens(&self) -> usize {
        self.segments.iter().map(|s| s.len).sum()
    }

    /// Reserved but unconsumed headroom.
    pub fn waste(&self) -> usize {
        self.segments.iter().map(|s| s.headroom).sum()
    }

    /// Verify segment ordering, disjointness, capacity, and cursor accounting.
    pub fn check(&self) -> Result<(), LayoutError> {
        let mut cursor = 0;
        for segment in &self.segments {
            if segment.start < cursor {
                return Err(LayoutError::SegmentOverlap {
                    offset: segment.start,
                });
            }
            cursor = segment.reserved_end();
        }
        if cursor > self.capacity {
            return Err(LayoutError::CapacityExceeded {
                needed: cursor,
                capacity: self.capacity,
            });
        }
        if cursor != self.cursor {
            return Err(LayoutError::CursorMismatch {
                cursor: self.cursor,
                segments_end: cursor,
            });
        }
        Ok(())
    }
}

/// Per-request placement: prefix range and suffix range into the group
/// buffer. The two ranges concatenated cover the request's full sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct OffsetEntry {
    pub prefix_offset: usize,
    pub prefix_len: usize,
    pub suffix_offset: usize,
    pub suffix_len: usize,
}

/// Offset table for one group buffer.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct OffsetTable {
    pub entries: BTreeMap<String, OffsetEntry>,
}

impl OffsetTable {
    pub fn get(&self, id: &str) -> Option<&OffsetEntry> {
        self.entries.get(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// One page-granular move: `len` tokens of `src_request` (logical offset
/// `src_start`, inside page `src_page` at `page_offset`) to `dst_offset` in
/// the group buffer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CopyOp {
    pub src_request: String,
    pub src_page: usize,
    pub page_offset: usize,
    pub src_start: usize,
    pub len: usize,
    pub dst_offset: usize,
}

/// Ordered copy operations materializing one group buffer.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CopyPlan {
    pub ops: Vec<CopyOp>,
}

impl CopyPlan {
    /// Total tokens moved; equals the partition's deduplicated volume.
    pub fn total_tokens(&self) -> usize {
        self.ops.iter().map(|op| op.len).sum()
    }
}

/// Result of consolidating one group.
#[derive(Debug, Clone)]
pub struct Consolidation {
    pub buffer: GroupBuffer,
    pub table: OffsetTable,
    pub copy_plan: CopyPlan,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LayoutError {
    #[error("unknown request {id:?}")]
    UnknownRequest { id: String },
    #[error("duplicate request {id:?} in paged store")]
    DuplicateRequest { id: String },
    #[error("no token source for member {id:?}")]
    MissingSource { id: String },
    #[error("paged store is missing tokens for {id:?}: need {needed}, have {available}")]
    MissingTokens {
        id: String,
        needed: usize,
        available: usize,
    },
    #[error("buffer capacity exceeded: need {needed} tokens, capacity {capacity}")]
    CapacityExceeded { needed: usize, capacity: usize },
    #[error("buffer segments overlap at offset {offset}")]
    SegmentOverlap { offset: usize },
    #[error("buffer cursor {cursor} does not match segment end {segments_end}")]
    CursorMismatch { cursor: usize, segments_end: usize },
    #[error("offset table for {id:?} points outside the buffer")]
    OffsetOutOfBounds { id: String },
    #[error("token dump of {0} bytes is not a whole number of tokens")]
    MalformedDump(usize),
}

/// Sources map for partitions whose members are whole requests stored under
/// their own ids.
pub fn identity_sources(partition: &PrefixPartition) -> BTreeMap<String, TokenSource> {
    partition
        .entries
        .iter()
        .flat_map(|e| e.suffixes.iter())
        .map(|s| (s.id.clone(), TokenSource::whole(s.id.clone())))
        .collect()
}

/// Plan one group's contiguous buffer from its prefix partition.
///
/// Walks entries in partition order: prefix first (copied once), then each
/// suffix with `headroom` reserved slots behind it. Prefix segments get no
/// headroom; prefixes are immutable history. Buffer capacity is the
/// deduplicated volume plus one headroom per member, checked against
/// `capacity_cap` when given.
pub fn consolidate(
    partition: &PrefixPartition,
    sources: &BTreeMap<String, TokenSource>,
    paged: &PagedStore,
    headroom: usize,
    capacity_cap: Option<usize>,
) -> Result<Consolidation, LayoutError> {
    build_layout(partition, Some((sources, paged)), headroom, capacity_cap)
}

/// Offset planning without a token store: same placement as
/// [`consolidate`], empty copy plan. This is the path for length-only
/// traces, where there are no token values to move but headroom and offset
/// accounting still apply.
pub fn plan_offsets(
    partition: &PrefixPartition,
    headroom: usize,
    capacity_cap: Option<usize>,
) -> Result<(GroupBuffer, OffsetTable), LayoutError> {
    build_layout(partition, None, headroom, capacity_cap)
        .map(|c| (c.buffer, c.table))
}

fn build_layout(
    partition: &PrefixPartition,
    copy_ctx: Option<(&BTreeMap<String, TokenSource>, &PagedStore)>,
    headroom: usize,
    capacity_cap: Option<usize>,
) -> Result<Consolidation, LayoutError> {
    let volume = crate::prefix::io_volume(partition);
    let capacity = volume + partition.member_count() * headroom;
    if let Some(cap) = capacity_cap {
        if capacity > cap {
            return Err(LayoutError::CapacityExceeded {
                needed: capacity,
                capacity: cap,
            });
        }
    }

    let mut segments = Vec::new();
    let mut table = OffsetTable::default();
    let mut ops = Vec::new();
    let mut cursor = 0;

    let emit_copy = |id: &str,
                     from: usize,
                     len: usize,
                     dst: usize,
                     ops: &mut Vec<CopyOp>|
     -> Result<(), LayoutError> {
        let Some((sources, paged)) = copy_ctx else {
            return Ok(());
        };
        let src = sources
            .get(id)
            .ok_or_else(|| LayoutError::MissingSource { id: id.to_string() })?;
        let spans = paged.page_spans(&src.request, src.start + from, src.start + from + len)?;
        let mut dst_offset = dst;
        for (src_page, page_offset, src_start, span) in spans {
            ops.push(CopyOp {
                src_request: src.request.clone(),
                src_page,
                page_offset,
                src_start,
                len: span,
                dst_offset,
            });
            dst_offset += span;
        }
        Ok(())
    };

    for (entry_index, entry) in partition.entries.iter().enumerate() {
        let prefix_offset = cursor;
        if entry.prefix_len > 0 {
            emit_copy(&entry.prefix_owner, 0, entry.prefix_len, cursor, &mut ops)?;
            segments.push(Segment {
                owner: SegmentOwner::Prefix { entry: entry_index },
                start: cursor,
                len: entry.prefix_len,
                headroom: 0,
            });
            cursor += entry.prefix_len;
        }
        for suffix in &entry.suffixes {
            if suffix.suffix_len > 0 {
                emit_copy(
                    &suffix.id,
                    entry.prefix_len,
                    suffix.suffix_len,
                    cursor,
                    &mut ops,
                )?;
            }
            segments.push(Segment {
                owner: SegmentOwner::Suffix {
                    id: suffix.id.clone(),
                },
                start: cursor,
                len: suffix.suffix_len,
                headroom,
            });
            table.entries.insert(
                suffix.id.clone(),
                OffsetEntry {
                    prefix_offset,
                    prefix_len: entry.prefix_len,
                    suffix_offset: cursor,
                    suffix_len: suffix.suffix_len,
                },
            );
            cursor += suffix.suffix_len + headroom;
        }
    }

    let buffer = GroupBuffer {
        capacity,
        segments,
        cursor,
    };
    debug_assert_eq!(cursor, capacity);
    debug_assert!(
        copy_ctx.is_none() || ops.iter().map(|op| op.len).sum::<usize>() == volume,
        "copy plan must move exactly the deduplicated volume"
    );
    buffer.check()?;
    Ok(Consolidation {
        buffer,
        table,
        copy_plan: CopyPlan { ops },
    })
}

/// Outcome of an in-place decode append.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AppendOutcome {
    /// Token slot granted at this buffer offset.
    Appended { offset: usize },
    /// Headroom exhausted; the group must be reconsolidated. Nothing was
    /// mutated.
    NeedsReconsolidation,
}

/// Grow a request's suffix by one token if its headroom allows, consuming
/// one reserved slot. Signals reconsolidation (without mutating) otherwise.
pub fn append_decode_token(
    buffer: &mut GroupBuffer,
    table: &mut OffsetTable,
    id: &str,
) -> Result<AppendOutcome, LayoutError> {
    let entry = table
        .entries
        .get_mut(id)
        .ok_or_else(|| LayoutError::UnknownRequest { id: id.to_string() })?;
    let segment = buffer
        .segments
        .iter_mut()
        .find(|s| matches!(&s.owner, SegmentOwner::Suffix { id: owner } if owner == id))
        .ok_or_else(|| LayoutError::UnknownRequest { id: id.to_string() })?;
    if segment.headroom == 0 {
        return Ok(AppendOutcome::NeedsReconsolidation);
    }
    let offset = segment.start + segment.len;
    segment.len += 1;
    segment.headroom -= 1;
    entry.suffix_len += 1;
    Ok(AppendOutcome::Appended { offset })
}

/// Materialize a group buffer by executing its copy plan against the paged
/// store. Headroom slots are zero-filled.
pub fn apply_copy_plan(
    plan: &CopyPlan,
    paged: &PagedStore,
    capacity: usize,
) -> Result<Vec<Token>, LayoutError> {
    let mut buffer = vec![0 as Token; capacity];
    for op in &plan.ops {
        let tokens = paged
            .tokens(&op.src_request)
            .ok_or_else(|| LayoutError::UnknownRequest {
                id: op.src_request.clone(),
            })?;
        if op.src_start + op.len > tokens.len() {
            return Err(LayoutError::MissingTokens {
                id: op.src_request.clone(),
                needed: op.src_start + op.len,
                available: tokens.len(),
            });
        }
        if op.dst_offset + op.len > capacity {
            return Err(LayoutError::CapacityExceeded {
                needed: op.dst_offset + op.len,
                capacity,
            });
        }
        buffer[op.dst_offset..op.dst_offset + op.len]
            .copy_from_slice(&tokens[op.src_start..op.src_start + op.len]);
    }
    Ok(buffer)
}

/// Read a request's logical sequence back out of a materialized buffer:
/// prefix range followed by suffix range.
pub fn read_back(
    buffer: &[Token],
    table: &OffsetTable,
    id: &str,
) -> Result<Vec<Token>, LayoutError> {
    let entry = table
        .get(id)
        .ok_or_else(|| LayoutError::UnknownRequest { id: id.to_string() })?;
    let prefix_end = entry.prefix_offset + entry.prefix_len;
    let suffix_end = entry.suffix_offset + entry.suffix_len;
    if prefix_end > buffer.len() || suffix_end > buffer.len() {
        return Err(LayoutError::OffsetOutOfBounds { id: id.to_string() });
    }
    let mut tokens = Vec::with_capacity(entry.prefix_len + entry.suffix_len);
    tokens.extend_from_slice(&buffer[entry.prefix_offset..prefix_end]);
    tokens.extend_from_slice(&buffer[entry.suffix_offset..suffix_end]);
    Ok(tokens)
}

/// Fragmentation accounting: unused slots inside paged tail pages versus
/// unconsumed headroom in consolidated buffers, both in tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FragmentationReport {
    pub paged_internal: usize,
    pub consolidated_waste: usize,
}

pub fn fragmentation_report<'a>(
    paged: &PagedStore,
    buffers: impl IntoIterator<Item = &'a GroupBuffer>,
) -> FragmentationReport {
    FragmentationReport {
        paged_internal: paged.internal_fragmentation(),
        consolidated_waste: buffers.into_iter().map(GroupBuffer::waste).sum(),
    }
}

/// Serialize a materialized buffer as a little-endian token dump, offset
/// order preserved. The companion of [`buffer_from_bytes`] for bit-exact
/// fixture round trips.
pub fn buffer_to_bytes(buffer: &[Token]) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(buffer.len() * 4);
    for token in buffer {
        bytes.extend_from_slice(&token.to_le_bytes());
    }
    bytes
}

/// Parse a little-endian token dump.
pub fn buffer_from_bytes(bytes: &[u8]) -> Result<Vec<Token>, LayoutError> {
    if !bytes.len().is_multiple_of(4) {
        return Err(LayoutError::MalformedDump(bytes.len()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| Token::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}
