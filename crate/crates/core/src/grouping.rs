//! Greedy balanced partitioning of requests into capacity-bounded groups.
//!
//! Requests are sorted by descending effective length and assigned one by one
//! to the least-loaded group that can still take them; when none can, a new
//! group opens. The initial group count is `ceil(total / capacity)`, so the
//! greedy pass starts from the densest packing the capacity admits and only
//! grows under feasibility pressure. Requests longer than the capacity must
//! be split into capacity-sized segments first.

use std::collections::{BTreeMap, HashSet};

use serde::Serialize;
use thiserror::Error;

use crate::config::Config;

/// Exact rational utilization value. Kept reduced so equal utilizations
/// compare equal regardless of how they were computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Utilization {
    num: u64,
    den: u64,
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl Utilization {
    /// Reduced fraction `num / den`. `den` must be nonzero.
    pub fn new(num: u64, den: u64) -> Self {
        assert!(den != 0, "utilization denominator must be nonzero");
        let g = gcd(num, den).max(1);
        Self {
            num: num / g,
            den: den / g,
        }
    }

    pub fn zero() -> Self {
        Self { num: 0, den: 1 }
    }

    /// Tile utilization of `lengths` packed into `groups` groups of tile
    /// size `tile`: `sum(L_i^2) / (groups * tile^2)`, exact.
    pub fn of_lengths(
        lengths: impl IntoIterator<Item = usize>,
        groups: usize,
        tile: usize,
    ) -> Self {
        if groups == 0 {
            return Self::zero();
        }
        let num: u128 = lengths
            .into_iter()
            .map(|l| (l as u128) * (l as u128))
            .sum();
        let den = (groups as u128) * (tile as u128) * (tile as u128);
        Self::new(
            u64::try_from(num).expect("utilization numerator fits u64"),
            u64::try_from(den).expect("utilization denominator fits u64"),
        )
    }

    pub fn num(&self) -> u64 {
        self.num
    }

    pub fn den(&self) -> u64 {
        self.den
    }

    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl PartialOrd for Utilization {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Utilization {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Cross-multiplication keeps the comparison exact.
        let left = self.num as u128 * other.den as u128;
        let right = other.num as u128 * self.den as u128;
        left.cmp(&right)
    }
}

impl Serialize for Utilization {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut s = serializer.serialize_struct("Utilization", 3)?;
        s.serialize_field("num", &self.num)?;
        s.serialize_field("den", &self.den)?;
        s.serialize_field("value", &self.value())?;
        s.end()
    }
}

/// One request's (or split segment's) contribution to a group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GroupMember {
    pub id: String,
    /// Effective token contribution: full length, or suffix length after
    /// prefix deduplication.
    pub contribution: usize,
}

/// A packed group: members, cached load, and its memory estimate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Group {
    pub index: usize,
    /// Members in assignment order.
    pub members: Vec<GroupMember>,
    /// Sum of member contributions in tokens.
    pub load: usize,
    /// Memory estimate in tokens: load plus per-member suffix headroom.
    pub mem: usize,
}

impl Group {
    fn empty(index: usize) -> Self {
        Self {
            index,
            members: Vec::new(),
            load: 0,
            mem: 0,
        }
    }
}

/// Placement of one segment of a split request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SplitSegment {
    /// Group the segment was packed into.
    pub group: usize,
    /// Token range `[start, end)` within the parent request.
    pub start: usize,
    pub end: usize,
}

/// One contiguous piece of a request split by [`split_long`], before packing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPiece {
    /// Derived segment id, `{parent}#{index}`.
    pub id: String,
    pub parent: String,
    pub start: usize,
    pub end: usize,
}

impl SplitPiece {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

/// The full partition for one scheduling epoch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PackingPlan {
    pub groups: Vec<Group>,
    /// Number of groups; always `groups.len()`.
    pub group_count: usize,
    /// Tile utilization over original request lengths.
    pub eta_batch: Option<Utilization>,
    /// Tile utilization over deduplicated contributions, when prefix-aware
    /// packing produced the plan.
    pub eta_batch_effective: Option<Utilization>,
    /// Max group load minus min group load, in tokens.
    pub discrepancy: usize,
    /// For each split request: where its segments landed.
    pub splits: BTreeMap<String, Vec<SplitSegment>>,
}

impl PackingPlan {
    pub fn max_load(&self) -> usize {
        self.groups.iter().map(|g| g.load).max().unwrap_or(0)
    }

    pub fn min_load(&self) -> usize {
        self.groups.iter().map(|g| g.load).min().unwrap_or(0)
    }

    /// Re-check every structural invariant of the plan. Used by the
    /// simulator after each regroup and by tests.
    pub fn check_invariants(&self, config: &Config) -> Result<(), PlanViolation> {
        if self.group_count != self.groups.len() {
            return Err(PlanViolation(format!(
                "group_count {} != groups.len() {}",
                self.group_count,
                self.groups.len()
            )));
        }
        let mut seen = HashSet::new();
        for (idx, group) in self.groups.iter().enumerate() {
            if group.index != idx {
                return Err(PlanViolation(format!(
                    "group at position {idx} has index {}",
                    group.index
                )));
            }
            if group.members.is_empty() {
                return Err(PlanViolation(format!("group {idx} is empty")));
            }
            let load: usize = group.members.iter().map(|m| m.contribution).sum();
            if load != group.load {
                return Err(PlanViolation(format!(
                    "group {idx} load {} != member sum {load}",
                    group.load
                )));
            }
            if group.load > config.capacity {
                return Err(PlanViolation(format!(
                    "group {idx} load {} exceeds capacity {}",
                    group.load, config.capacity
                )));
            }
            if group.mem > config.mem_cap {
                return Err(PlanViolation(format!(
                    "group {idx} mem {} exceeds cap {}",
                    group.mem, config.mem_cap
                )));
            }
            for member in &group.members {
                if !seen.insert(member.id.clone()) {
                    return Err(PlanViolation(format!(
                        "member {:?} appears in more than one group",
                        member.id
                    )));
                }
            }
        }
        if self.discrepancy != self.max_load() - self.min_load() {
            return Err(PlanViolation(format!(
                "discrepancy {} != max-min {}",
                self.discrepancy,
                self.max_load() - self.min_load()
            )));
        }
        for (parent, segments) in &self.splits {
            let mut cursor = 0;
            for (k, seg) in segments.iter().enumerate() {
                if seg.start != cursor {
                    return Err(PlanViolation(format!(
                        "split {parent:?} segment {k} starts at {} expected {cursor}",
                        seg.start
                    )));
                }
                if seg.end <= seg.start {
                    return Err(PlanViolation(format!("split {parent:?} segment {k} empty")));
                }
                if seg.group >= self.groups.len() {
                    return Err(PlanViolation(format!(
                        "split {parent:?} segment {k} points at missing group {}",
                        seg.group
                    )));
                }
                let member_id = segment_id(parent, k);
                if !self.groups[seg.group]
                    .members
                    .iter()
                    .any(|m| m.id == member_id)
                {
                    return Err(PlanViolation(format!(
                        "split segment {member_id:?} missing from group {}",
                        seg.group
                    )));
                }
                cursor = seg.end;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("plan invariant violated: {0}")]
pub struct PlanViolation(pub String);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PackError {
    #[error("request {id:?} has zero contribution; filter or deduplicate before packing")]
    ZeroContribution { id: String },
    #[error(
        "request {id:?} contributes {contribution} tokens, above capacity {capacity}; split it first"
    )]
    ContributionExceedsCapacity {
        id: String,
        contribution: usize,
        capacity: usize,
    },
    #[error("request {id:?} of length {len} fits capacity {capacity}; no split needed")]
    NoSplitNeeded {
        id: String,
        len: usize,
        capacity: usize,
    },
    #[error("duplicate request id {id:?}")]
    DuplicateId { id: String },
    #[error("request {id:?} cannot fit any group under the memory cap")]
    MemCapInfeasible { id: String },
}

/// Memory estimate for a group holding `load` unique tokens across `members`
/// members: the deduplicated token count plus per-member suffix headroom.
pub fn mem_estimate(load: usize, members: usize, config: &Config) -> usize {
    load.saturating_add(members.saturating_mul(config.headroom))
}

/// Feasibility of adding `contribution` tokens to `group`: the group stays
/// within capacity and within the memory cap. Pure; does not mutate.
pub fn feasible(group: &Group, contribution: usize, config: &Config) -> bool {
    let load = group.load.saturating_add(contribution);
    load <= config.capacity
        && mem_estimate(load, group.members.len() + 1, config) <= config.mem_cap
}

/// Derived id of segment `k` of a split request.
pub fn segment_id(parent: &str, k: usize) -> String {
    format!("{parent}#{k}")
}

/// Split a request longer than the capacity into contiguous segments of at
/// most `capacity` tokens: all but the last are exactly capacity-sized.
/// Rejects requests that already fit, keeping call sites explicit.
pub fn split_long(id: &str, len: usize, config: &Config) -> Result<Vec<SplitPiece>, PackError> {
    if len <= config.capacity {
        return Err(PackError::NoSplitNeeded {
            id: id.to_string(),
            len,
            capacity: config.capacity,
        });
    }
    let mut pieces = Vec::with_capacity(len.div_ceil(config.capacity));
    let mut start = 0;
    let mut k = 0;
    while start < len {
        let end = (start + config.capacity).min(len);
        pieces.push(SplitPiece {
            id: segment_id(id, k),
            parent: id.to_string(),
            start,
            end,
        });
        start = end;
        k += 1;
    }
    Ok(pieces)
}

/// How the greedy loop prices an item for a candidate group and reacts to
/// placements. The plain policy uses fixed contributions; the prefix-aware
/// policy in [`crate::prefix`] discounts shared prefixes per group.
pub(crate) trait ContributionPolicy {
    fn contribution(&mut self, group: usize, item: usize) -> usize;
    fn placed(&mut self, group: usize, item: usize) {
        let _ = (group, item);
    }
    fn group_opened(&mut self) {}
}

struct FixedContribution<'a>(&'a [(String, usize)]);

impl ContributionPolicy for FixedContribution<'_> {
    fn contribution(&mut self, _group: usize, item: usize) -> usize {
        self.0[item].1
    }
}

/// Shared greedy loop. `items` are `(id, sort length)` pairs; the policy maps
/// an item to its contribution for a specific group. Items are processed in
/// descending sort-length order (ties by ascending id) and land in the
/// least-loaded feasible group, lowest index on ties.
pub(crate) fn greedy_assign<P: ContributionPolicy>(
    items: &[(String, usize)],
    config: &Config,
    policy: &mut P,
) -> Result<Vec<Group>, PackError> {
    let total: usize = items.iter().map(|(_, len)| len).sum();
    let initial_groups = total.div_ceil(config.capacity);

    let mut groups: Vec<Group> = (0..initial_groups).map(Group::empty).collect();
    for _ in 0..initial_groups {
        policy.group_opened();
    }

    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| {
        items[b]
            .1
            .cmp(&items[a].1)
            .then_with(|| items[a].0.cmp(&items[b].0))
    });

    let mut contributions = vec![0usize; groups.len()];
    for item in order {
        let mut best: Option<(usize, usize)> = None; // (load, group index)
        contributions.resize(groups.len(), 0);
        for group in &groups {
            let contribution = policy.contribution(group.index, item);
            contributions[group.index] = contribution;
            if feasible(group, contribution, config) {
                let key = (group.load, group.index);
                if best.is_none_or(|b| key < b) {
                    best = Some(key);
                }
            }
        }
        let target = match best {
            Some((_, index)) => index,
            None => {
                // Nothing can take it: open a fresh group.
                let index = groups.len();
                groups.push(Group::empty(index));
                policy.group_opened();
                let contribution = policy.contribution(index, item);
                if !feasible(&groups[index], contribution, config) {
                    return Err(PackError::MemCapInfeasible {
                        id: items[item].0.clone(),
                    });
                }
                contributions.push(contribution);
                index
            }
        };
        let contribution = contributions[target];
        let group = &mut groups[target];
        group.members.push(GroupMember {
            id: items[item].0.clone(),
            contribution,
        });
        group.load += contribution;
        group.mem = mem_estimate(group.load, group.members.len(), config);
        policy.placed(target, item);
    }

    debug_assert!(groups.iter().all(|g| !g.members.is_empty()));
    Ok(groups)
}

pub(crate) fn plan_from_groups(
    groups: Vec<Group>,
    eta_batch: Option<Utilization>,
    eta_batch_effective: Option<Utilization>,
    splits: BTreeMap<String, Vec<SplitSegment>>,
) -> PackingPlan {
    let discrepancy = match (
        groups.iter().map(|g| g.load).max(),
        groups.iter().map(|g| g.load).min(),
    ) {
        (Some(max), Some(min)) => max - min,
        _ => 0,
    };
    PackingPlan {
        group_count: groups.len(),
        eta_batch,
        eta_batch_effective,
        discrepancy,
        splits,
        groups,
    }
}

pub(crate) fn validate_pack_inputs(
    requests: &[(String, usize)],
    config: &Config,
    reject_oversize: bool,
) -> Result<(), PackError> {
    let mut seen = HashSet::new();
    for (id, contribution) in requests {
        if !seen.insert(id.as_str()) {
            return Err(PackError::DuplicateId { id: id.clone() });
        }
        if *contribution == 0 {
            return Err(PackError::ZeroContribution { id: id.clone() });
        }
        if reject_oversize && *contribution > config.capacity {
            return Err(PackError::ContributionExceedsCapacity {
                id: id.clone(),
                contribution: *contribution,
                capacity: config.capacity,
            });
        }
    }
    Ok(())
}

/// Pack `(id, contribution)` pairs into balanced groups. Every contribution
/// must be in `1..=capacity`; requests above capacity must go through
/// [`split_long`] first (see [`pack_with_splits`]). Deterministic.
pub fn greedy_pack(
    requests: &[(String, usize)],
    config: &Config,
) -> Result<PackingPlan, PackError> {
    validate_pack_inputs(requests, config, true)?;
    let groups = greedy_assign(requests, config, &mut FixedContribution(requests))?;
    let eta = (!requests.is_empty()).then(|| {
        Utilization::of_lengths(
            requests.iter().map(|(_, len)| *len),
            groups.len(),
            config.tile,
        )
    });
    Ok(plan_from_groups(groups, eta, None, BTreeMap::new()))
}

/// Pack requests by full length, transparently splitting any request longer
/// than the capacity and recording where its segments landed. Batch
/// utilization is computed over the original (unsplit) lengths.
pub fn pack_with_splits(
    requests: &[(String, usize)],
    config: &Config,
) -> Result<PackingPlan, PackError> {
    validate_pack_inputs(requests, config, false)?;
    let mut items: Vec<(String, usize)> = Vec::with_capacity(requests.len());
    let mut split_parents: Vec<(String, Vec<SplitPiece>)> = Vec::new();
    for (id, len) in requests {
        if *len > config.capacity {
            let pieces = split_long(id, *len, config)?;
            items.extend(pieces.iter().map(|p| (p.id.clone(), p.len())));
            split_parents.push((id.clone(), pieces));
        } else {
            items.push((id.clone(), *len));
        }
    }

    let groups = greedy_assign(&items, config, &mut FixedContribution(&items))?;

    let mut member_group = BTreeMap::new();
    for group in &groups {
        for member in &group.members {
            member_group.insert(member.id.clone(), group.index);
        }
    }
    let mut splits = BTreeMap::new();
    for (parent, pieces) in split_parents {
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

    let eta = (!requests.is_empty()).then(|| {
        Utilization::of_lengths(
            requests.iter().map(|(_, len)| *len),
            groups.len(),
            config.tile,
        )
    });
    Ok(plan_from_groups(groups, eta, None, splits))
}

pub(crate) fn plan_with_etas(
    groups: Vec<Group>,
    splits: BTreeMap<String, Vec<SplitSegment>>,
    original_lengths: &[usize],
    config: &Config,
) -> PackingPlan {
    let group_count = groups.len();
    let eta = (!original_lengths.is_empty())
        .then(|| Utilization::of_lengths(original_lengths.iter().copied(), group_count, config.tile));
    let eta_effective = (group_count > 0).then(|| {
        Utilization::of_lengths(
            groups
                .iter()
                .flat_map(|g| g.members.iter().map(|m| m.contribution)),
            group_count,
            config.tile,
        )
    });
    plan_from_groups(groups, eta, eta_effective, splits)
}

/// Batch tile utilization `sum(L_i^2) / (G * T^2)` over the original request
/// lengths, independent of how requests are distributed among the `G` groups.
pub fn batch_utilization(
    plan: &PackingPlan,
    lengths: &BTreeMap<String, usize>,
    config: &Config,
) -> Utilization {
    Utilization::of_lengths(lengths.values().copied(), plan.group_count, config.tile)
}

/// Load imbalance of a plan: heaviest group load minus lightest group load.
pub fn plan_discrepancy(plan: &PackingPlan) -> usize {
    plan.max_load() - plan.min_load()
}
