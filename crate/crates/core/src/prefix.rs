//! Shared-prefix detection and deduplicated I/O accounting.
//!
//! Requests inside one group are inserted into a token trie. A request's
//! qualifying prefix is the longest prefix of its sequence that at least one
//! other group member also starts with and that meets the `min_share`
//! threshold; requests with equal qualifying prefixes form one partition
//! entry whose prefix is stored once. Entries that end up with a single
//! member collapse to a zero-length prefix, so the deduplicated volume
//! degenerates to the plain sum when nothing is shared.
//!
//! Nesting is deliberately one level deep (prefix + suffix). When a request
//! shares a shorter prefix with members that share a longer one among
//! themselves, it gets its own entry rather than pointing into theirs; the
//! offset table downstream has exactly one prefix range per request.

use std::collections::{BTreeMap, HashMap};

use serde::Serialize;
use thiserror::Error;

use crate::config::Config;
use crate::grouping::{
    self, greedy_assign, ContributionPolicy, Group, PackingPlan, SplitSegment,
};
use crate::request::{Request, Token};

/// Token trie over the sequences of one group's members.
#[derive(Debug, Clone, Default)]
pub struct PrefixTrie {
    root: TrieNode,
    sequences: usize,
}

#[derive(Debug, Clone, Default)]
struct TrieNode {
    /// Number of inserted sequences passing through this node.
    members: usize,
    children: HashMap<Token, TrieNode>,
}

impl PrefixTrie {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of inserted sequences.
    pub fn sequences(&self) -> usize {
        self.sequences
    }

    pub fn insert(&mut self, tokens: &[Token]) {
        let mut node = &mut self.root;
        for &token in tokens {
            node = node.children.entry(token).or_default();
            node.members += 1;
        }
        self.sequences += 1;
    }

    /// Length of the longest prefix of `tokens` already present in the trie,
    /// i.e. shared with at least one inserted sequence.
    pub fn longest_known_prefix(&self, tokens: &[Token]) -> usize {
        let mut node = &self.root;
        let mut depth = 0;
        for &token in tokens {
            match node.children.get(&token) {
                Some(child) => {
                    node = child;
                    depth += 1;
                }
                None => break,
            }
        }
        depth
    }

    /// Length of the longest prefix of `tokens` traversed by at least two
    /// inserted sequences. The queried sequence is expected to be one of
    /// them, so a count of two means "shared with one other member".
    pub fn longest_shared_prefix(&self, tokens: &[Token]) -> usize {
        let mut node = &self.root;
        let mut depth = 0;
        let mut shared = 0;
        for &token in tokens {
            match node.children.get(&token) {
                Some(child) => {
                    depth += 1;
                    if child.members >= 2 {
                        shared = depth;
                    }
                    node = child;
                }
                None => break,
            }
        }
        shared
    }
}

/// One member's suffix under a partition entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SuffixEntry {
    pub id: String,
    pub suffix_len: usize,
}

/// One shared prefix and the suffixes hanging off it. The prefix tokens are
/// the first `prefix_len` tokens of `prefix_owner` (identical across all
/// members of the entry by construction).
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PartitionEntry {
    pub prefix_owner: String,
    pub prefix_len: usize,
    /// Members ordered by ascending id.
    pub suffixes: Vec<SuffixEntry>,
}

impl PartitionEntry {
    pub fn member_count(&self) -> usize {
        self.suffixes.len()
    }
}

/// Partition of a group into shared prefixes and per-request suffixes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PrefixPartition {
    /// Entries ordered by ascending first-member id.
    pub entries: Vec<PartitionEntry>,
}

impl PrefixPartition {
    /// Trivial partition with no sharing: every member is a singleton entry
    /// with a zero-length prefix. This is the layout used for length-only
    /// traces and for packing without deduplication.
    pub fn without_sharing(members: &[(String, usize)]) -> Self {
        let mut entries: Vec<PartitionEntry> = members
            .iter()
            .map(|(id, len)| PartitionEntry {
                prefix_owner: id.clone(),
                prefix_len: 0,
                suffixes: vec![SuffixEntry {
                    id: id.clone(),
                    suffix_len: *len,
                }],
            })
            .collect();
        entries.sort_by(|a, b| a.suffixes[0].id.cmp(&b.suffixes[0].id));
        Self { entries }
    }

    pub fn member_count(&self) -> usize {
        self.entries.iter().map(PartitionEntry::member_count).sum()
    }

    /// Per-member deduplicated lengths: the first member of each entry
    /// carries the prefix, the rest only their suffixes. Sums to the
    /// deduplicated volume.
    pub fn member_effective_lens(&self) -> Vec<(String, usize)> {
        let mut lens = Vec::with_capacity(self.member_count());
        for entry in &self.entries {
            for (pos, suffix) in entry.suffixes.iter().enumerate() {
                let eff = if pos == 0 {
                    entry.prefix_len + suffix.suffix_len
                } else {
                    suffix.suffix_len
                };
                lens.push((suffix.id.clone(), eff));
            }
        }
        lens
    }

    /// Sum of member lengths as if nothing were shared.
    pub fn naive_volume(&self) -> usize {
        self.entries
            .iter()
            .map(|e| {
                e.suffixes
                    .iter()
                    .map(|s| e.prefix_len + s.suffix_len)
                    .sum::<usize>()
            })
            .sum()
    }
}

#[derive(Debug, Error)]
pub enum PrefixError {
    #[error("request {id:?} is length-only; prefix features require token sequences")]
    LengthOnly { id: String },
    #[error("min_share must be at least 1 token")]
    ZeroMinShare,
    #[error(transparent)]
    Pack(#[from] grouping::PackError),
}

fn require_tokens(request: &Request) -> Result<&[Token], PrefixError> {
    request.tokens().ok_or_else(|| PrefixError::LengthOnly {
        id: request.id.clone(),
    })
}

/// Partition a group's requests into shared prefixes and suffixes.
///
/// Each request is keyed by its longest prefix shared with at least one
/// other member and no shorter than `min_share`; requests with the same key
/// form one entry. Requests sharing nothing, and collapsed singleton
/// classes, become zero-prefix entries.
pub fn trie_partition(
    group_requests: &[Request],
    min_share: usize,
) -> Result<PrefixPartition, PrefixError> {
    if min_share == 0 {
        return Err(PrefixError::ZeroMinShare);
    }
    let mut trie = PrefixTrie::new();
    for request in group_requests {
        trie.insert(require_tokens(request)?);
    }

    // Group requests by the token value of their qualifying prefix.
    let mut classes: BTreeMap<Vec<Token>, Vec<(&str, usize)>> = BTreeMap::new();
    let mut singles: Vec<(&str, usize)> = Vec::new();
    for request in group_requests {
        let tokens = require_tokens(request)?;
        let shared = trie.longest_shared_prefix(tokens);
        if shared >= min_share {
            classes
                .entry(tokens[..shared].to_vec())
                .or_default()
                .push((&request.id, tokens.len()));
        } else {
            singles.push((&request.id, tokens.len()));
        }
    }

    let mut entries = Vec::new();
    for (prefix, mut members) in classes {
        if members.len() == 1 {
            // No one else maps to this exact prefix: collapse to plain form.
            singles.push(members[0]);
            continue;
        }
        members.sort_by(|a, b| a.0.cmp(b.0));
        entries.push(PartitionEntry {
            prefix_owner: members[0].0.to_string(),
            prefix_len: prefix.len(),
            suffixes: members
                .iter()
                .map(|(id, len)| SuffixEntry {
                    id: (*id).to_string(),
                    suffix_len: len - prefix.len(),
                })
                .collect(),
        });
    }
    for (id, len) in singles {
        entries.push(PartitionEntry {
            prefix_owner: id.to_string(),
            prefix_len: 0,
            suffixes: vec![SuffixEntry {
                id: id.to_string(),
                suffix_len: len,
            }],
        });
    }
    entries.sort_by(|a, b| a.suffixes[0].id.cmp(&b.suffixes[0].id));
    Ok(PrefixPartition { entries })
}

/// Deduplicated I/O volume of a partition in tokens: each prefix is fetched
/// once, every suffix once.
pub fn io_volume(partition: &PrefixPartition) -> usize {
    partition
        .entries
        .iter()
        .map(|e| e.prefix_len + e.suffixes.iter().map(|s| s.suffix_len).sum::<usize>())
        .sum()
}

/// Effective contribution of a request joining a group with trie `trie`:
/// its length minus the longest prefix (of at least `min_share` tokens)
/// already present among the group's members. Equals the full length for an
/// empty group; zero for a request fully covered by an existing member.
pub fn effective_contribution(
    request: &Request,
    trie: &PrefixTrie,
    min_share: usize,
) -> Result<usize, PrefixError> {
    if min_share == 0 {
        return Err(PrefixError::ZeroMinShare);
    }
    let tokens = require_tokens(request)?;
    let known = trie.longest_known_prefix(tokens);
    let shared = if known >= min_share { known } else { 0 };
    Ok(tokens.len() + request.generated - shared)
}

/// A member sequence fed to prefix-aware packing: a whole request or one
/// segment of a split request.
#[derive(Debug, Clone)]
struct MemberSeq {
    id: String,
    tokens: Vec<Token>,
}

/// Plan plus the per-group prefix partitions it was costed with.
#[derive(Debug, Clone)]
pub struct SharedPack {
    pub plan: PackingPlan,
    /// `partitions[g]` describes `plan.groups[g]`.
    pub partitions: Vec<PrefixPartition>,
}

struct SharedContribution<'a> {
    members: &'a [MemberSeq],
    tries: Vec<PrefixTrie>,
    min_share: usize,
}

impl ContributionPolicy for SharedContribution<'_> {
    fn contribution(&mut self, group: usize, item: usize) -> usize {
        let tokens = &self.members[item].tokens;
        let known = self.tries[group].longest_known_prefix(tokens);
        let shared = if known >= self.min_share { known } else { 0 };
        tokens.len() - shared
    }

    fn placed(&mut self, group: usize, item: usize) {
        self.tries[group].insert(&self.members[item].tokens);
    }

    fn group_opened(&mut self) {
        self.tries.push(PrefixTrie::new());
    }
}

/// Pack token-form requests with prefix-aware effective contributions: a
/// request joining a group is charged only for the tokens not already
/// covered by a shared prefix in that group. Requests longer than the
/// capacity are split into capacity-sized segments first. The returned plan
/// carries both the full-length utilization and the deduplicated one.
///
/// Group loads are the assignment-time contributions. The final partition
/// flattens nested sharing to one level, so a group's stored unique tokens
/// can exceed its load when a member shares a shorter prefix than the one
/// it was discounted against; the partitions returned here are the
/// authority for buffer sizing.
pub fn pack_with_sharing(
    requests: &[Request],
    config: &Config,
    min_share: usize,
) -> Result<SharedPack, PrefixError> {
    if min_share == 0 {
        return Err(PrefixError::ZeroMinShare);
    }
    let lengths: Vec<(String, usize)> = requests
        .iter()
        .map(|r| {
            require_tokens(r)?;
            Ok((r.id.clone(), r.tokens().unwrap().len()))
        })
        .collect::<Result<_, PrefixError>>()?;
    grouping::validate_pack_inputs(&lengths, config, false)?;

    let mut members: Vec<MemberSeq> = Vec::with_capacity(requests.len());
    let mut split_pieces: Vec<(String, Vec<grouping::SplitPiece>)> = Vec::new();
    for request in requests {
        let tokens = require_tokens(request)?;
        if tokens.len() > config.capacity {
            let pieces = grouping::split_long(&request.id, tokens.len(), config)?;
            for piece in &pieces {
                members.push(MemberSeq {
                    id: piece.id.clone(),
                    tokens: tokens[piece.start..piece.end].to_vec(),
                });
            }
            split_pieces.push((request.id.clone(), pieces));
        } else {
            members.push(MemberSeq {
                id: request.id.clone(),
                tokens: tokens.to_vec(),
            });
        }
    }

    let items: Vec<(String, usize)> = members
        .iter()
        .map(|m| (m.id.clone(), m.tokens.len()))
        .collect();
    let mut policy = SharedContribution {
        members: &members,
        tries: Vec::new(),
        min_share,
    };
    let groups = greedy_assign(&items, config, &mut policy)?;

    let partitions = group_partitions(&groups, &members, min_share)?;

    let mut member_group = BTreeMap::new();
    for group in &groups {
        for member in &group.members {
            member_group.insert(member.id.clone(), group.index);
        }
    }
    let mut splits = BTreeMap::new();
    for (parent, pieces) in split_pieces {
        let segments = pieces
            .iter()
            .map(|p| SplitSegment {
                group: member_group[&p.id],
                start: p.start,
                end: p.end,
            })
            .collect();
        splits.insert(parent, segments);
    }

    let original: Vec<usize> = lengths.iter().map(|(_, len)| *len).collect();
    let plan = grouping::plan_with_etas(groups, splits, &original, config);
    Ok(SharedPack { plan, partitions })
}

fn group_partitions(
    groups: &[Group],
    members: &[MemberSeq],
    min_share: usize,
) -> Result<Vec<PrefixPartition>, PrefixError> {
    let by_id: HashMap<&str, &MemberSeq> =
        members.iter().map(|m| (m.id.as_str(), m)).collect();
    groups
        .iter()
        .map(|group| {
            let group_requests: Vec<Request> = group
                .members
                .iter()
                .map(|m| {
                    let seq = by_id[m.id.as_str()];
                    Request::with_tokens(seq.id.clone(), seq.tokens.clone())
                })
                .collect();
            trie_partition(&group_requests, min_share)
        })
        .collect()
}

/// Where a member's tokens live: `start` is the offset of the member's slice
/// within the `request` sequence held by the paged store. Whole requests use
/// `start == 0`; split segments point into their parent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TokenSource {
    pub request: String,
    pub start: usize,
}

impl TokenSource {
    pub fn whole(request: impl Into<String>) -> Self {
        Self {
            request: request.into(),
            start: 0,
        }
    }
}

impl SharedPack {
    /// Member-id to token-source map for layout consolidation.
    pub fn token_sources(&self) -> BTreeMap<String, TokenSource> {
        let mut sources = BTreeMap::new();
        for group in &self.plan.groups {
            for member in &group.members {
                sources.insert(member.id.clone(), TokenSource::whole(member.id.clone()));
            }
        }
        for (parent, segments) in &self.plan.splits {
            for (k, segment) in segments.iter().enumerate() {
                sources.insert(
                    grouping::segment_id(parent, k),
                    TokenSource {
                        request: parent.clone(),
                        start: segment.start,
                    },
                );
            }
        }
        sources
    }
}
