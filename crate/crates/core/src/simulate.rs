//! Decode-loop simulation: token growth, drift tracking, regrouping, and
//! cost-model metrics against baselines.
//!
//! Each step every active request gains one token. Appends land in suffix
//! headroom when available; a group whose headroom runs out is rebuilt in
//! place (whole-group reconsolidation). The gap between the heaviest and
//! lightest group loads is the per-step drift; once `t * drift` reaches half
//! the group capacity the whole batch is repacked from scratch. Costs come
//! from a pluggable analytic model standing in for hardware profiling:
//! quadratic in tiles for prefill-shaped work, linear in unique tokens for
//! decode-shaped work.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::config::{Config, ConfigError, DEFAULT_MIN_SHARE, DEFAULT_PAGE_SIZE};
use crate::grouping::{self, PackingPlan, PlanViolation, Utilization};
use crate::layout::{
    self, append_decode_token, AppendOutcome, GroupBuffer, LayoutError, OffsetTable, PagedStore,
};
use crate::prefix::{self, PrefixError, PrefixPartition, TokenSource};
use crate::request::{Request, Token};
use crate::trace::{WorkloadTrace, GENERATOR_VOCAB};

/// Analytic stand-ins for the two execution regimes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CostModelMode {
    /// Prefill-shaped: tiles are quadratic in sequence length. A group costs
    /// `sum(ceil(len / tile)^2)` over member effective lengths.
    TileQuadratic,
    /// Decode-shaped: cost is the unique token volume fetched per step.
    KvLinear,
}

/// Cost model: mode plus the tile size it normalizes by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CostModel {
    pub mode: CostModelMode,
    pub tile: usize,
}

impl CostModel {
    pub fn tile_quadratic(tile: usize) -> Self {
        Self {
            mode: CostModelMode::TileQuadratic,
            tile,
        }
    }

    pub fn kv_linear(tile: usize) -> Self {
        Self {
            mode: CostModelMode::KvLinear,
            tile,
        }
    }

    /// Cost of one group given member effective lengths and the group's
    /// unique token volume.
    pub fn group_cost(
        &self,
        member_lens: impl IntoIterator<Item = usize>,
        unique_tokens: usize,
    ) -> u64 {
        match self.mode {
            CostModelMode::TileQuadratic => member_lens
                .into_iter()
                .map(|len| {
                    let tiles = len.div_ceil(self.tile) as u64;
                    tiles * tiles
                })
                .sum(),
            CostModelMode::KvLinear => unique_tokens as u64,
        }
    }
}

/// Token growth pattern during decode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum GrowthModel {
    /// Every active request emits one token per step.
    OneTokenPerRequest,
}

/// Simulation knobs beyond the shared [`Config`].
#[derive(Debug, Clone, Serialize)]
pub struct SimOptions {
    pub steps: usize,
    pub cost_model: CostModel,
    pub growth: GrowthModel,
    /// Physical page size of the source KV layout.
    pub page_size: usize,
    /// Minimum shareable prefix length.
    pub min_share: usize,
    /// Deduplicate shared prefixes (token-form traces only; length-only
    /// traces silently degrade to no sharing).
    pub dedup: bool,
}

impl SimOptions {
    pub fn new(steps: usize, cost_model: CostModel) -> Self {
        Self {
            steps,
            cost_model,
            growth: GrowthModel::OneTokenPerRequest,
            page_size: DEFAULT_PAGE_SIZE,
            min_share: DEFAULT_MIN_SHARE,
            dedup: true,
        }
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Pack(#[from] grouping::PackError),
    #[error(transparent)]
    Prefix(#[from] PrefixError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Plan(#[from] PlanViolation),
    #[error("no capacity candidates provided")]
    NoCandidates,
    #[error("simulation invariant violated at step {step}: {message}")]
    Invariant { step: usize, message: String },
}

/// Regroup once the cumulative imbalance over `steps_since` decode steps
/// reaches half the group capacity: `steps_since * drift >= capacity / 2`,
/// evaluated exactly (inclusive threshold).
pub fn should_regroup(drift: usize, steps_since: usize, capacity: usize) -> bool {
    2u128 * steps_since as u128 * drift as u128 >= capacity as u128
}

/// Metrics captured after each step (step 0 is the freshly packed batch).
#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub drift: usize,
    pub regrouped: bool,
    /// Groups rebuilt in place this step.
    pub reconsolidations: usize,
    /// Tokens moved by consolidations this step.
    pub copy_tokens: usize,
    pub eta_batch: Option<Utilization>,
    pub eta_batch_effective: Option<Utilization>,
    /// Sum of request lengths with every request fetched whole.
    pub io_naive: usize,
    /// Unique tokens across group buffers.
    pub io_dedup: usize,
    pub makespan: u64,
    pub idle: u64,
    pub group_count: usize,
    pub max_load: usize,
    pub min_load: usize,
}

/// Aggregates over a full run.
#[derive(Debug, Clone, Serialize)]
pub struct SimSummary {
    pub steps: usize,
    pub requests: usize,
    pub admitted: usize,
    pub group_count_final: usize,
    pub regroup_count: usize,
    pub regroup_steps: Vec<usize>,
    pub reconsolidation_count: usize,
    pub copy_tokens_total: usize,
    pub io_naive_final: usize,
    pub io_dedup_final: usize,
    pub makespan_final: u64,
    pub idle_final: u64,
    pub dedup_active: bool,
    /// Tail-page waste of the paged source layout at the end of the run
    /// (token-form traces only).
    pub paged_fragmentation_final: Option<usize>,
    /// Unconsumed suffix headroom at the end of the run.
    pub consolidated_waste_final: usize,
}

/// Full simulation report: per-step rows plus the summary block.
#[derive(Debug, Clone, Serialize)]
pub struct SimReport {
    pub schema: u32,
    pub config: Config,
    pub options: SimOptions,
    pub summary: SimSummary,
    pub steps: Vec<StepRecord>,
}

impl SimReport {
    /// Per-step rows as CSV, one line per step.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "step,drift,regrouped,reconsolidations,copy_tokens,eta_batch,eta_batch_effective,\
             io_naive,io_dedup,makespan,idle,group_count,max_load,min_load\n",
        );
        for row in &self.steps {
            let eta = row.eta_batch.map_or(0.0, |u| u.value());
            let eta_eff = row.eta_batch_effective.map_or(0.0, |u| u.value());
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                row.step,
                row.drift,
                row.regrouped,
                row.reconsolidations,
                row.copy_tokens,
                eta,
                eta_eff,
                row.io_naive,
                row.io_dedup,
                row.makespan,
                row.idle,
                row.group_count,
                row.max_load,
                row.min_load,
            ));
        }
        out
    }
}

struct ReqState {
    id: String,
    /// Materialized sequence, prompt plus generated (token-form runs).
    tokens: Option<Vec<Token>>,
    len: usize,
    generated: usize,
    output_len: Option<usize>,
    arrival: usize,
    admitted: bool,
}

impl ReqState {
    fn active(&self) -> bool {
        self.admitted && self.output_len.is_none_or(|cap| self.generated < cap)
    }
}

struct Member {
    id: String,
    req: usize,
    start: usize,
    end: usize,
    /// Receives decode appends (last segment of its request).
    tail: bool,
    group: usize,
    /// Effective contribution for the cost model; grows with appends.
    eff_len: usize,
}

struct GroupState {
    buffer: GroupBuffer,
    table: OffsetTable,
    partition: PrefixPartition,
    /// Unique tokens held; equals `buffer.used_tokens()`.
    load: usize,
    members: Vec<usize>,
}

/// Live simulation state: current plan, per-group buffers and offset
/// tables, drift history since the last regroup, and cumulative counters.
pub struct SimState {
    config: Config,
    options: SimOptions,
    reqs: Vec<ReqState>,
    members: Vec<Member>,
    groups: Vec<GroupState>,
    paged: Option<PagedStore>,
    plan: PackingPlan,
    rng: ChaCha8Rng,
    step: usize,
    last_regroup_step: usize,
    drift_history: Vec<usize>,
    token_form: bool,
    regroup_steps: Vec<usize>,
    reconsolidation_count: usize,
    copy_tokens_total: usize,
    // Per-step slots for the record being built.
    step_reconsolidations: usize,
    step_copy_tokens: usize,
}

impl SimState {
    /// Pack the trace and consolidate every group. Requests with
    /// `arrival_step > 0` stay out until a regroup at or after their arrival.
    pub fn new(trace: &WorkloadTrace, config: &Config, options: &SimOptions) -> Result<Self, SimError> {
        config.validate()?;
        let token_form = trace.has_tokens() && !trace.is_empty();
        let reqs: Vec<ReqState> = trace
            .requests
            .iter()
            .map(|r| ReqState {
                id: r.id.clone(),
                tokens: r.tokens().map(<[Token]>::to_vec),
                len: r.effective_len(),
                generated: r.generated,
                output_len: r.output_len,
                arrival: r.arrival_step,
                admitted: false,
            })
            .collect();
        let mut state = Self {
            config: config.clone(),
            options: options.clone(),
            reqs,
            members: Vec::new(),
            groups: Vec::new(),
            paged: None,
            plan: grouping::greedy_pack(&[], config)?,
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x6465_636f),
            step: 0,
            last_regroup_step: 0,
            drift_history: Vec::new(),
            token_form,
            regroup_steps: Vec::new(),
            reconsolidation_count: 0,
            copy_tokens_total: 0,
            step_reconsolidations: 0,
            step_copy_tokens: 0,
        };
        state.repack(0)?;
        state.verify()?;
        Ok(state)
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn plan(&self) -> &PackingPlan {
        &self.plan
    }

    pub fn group_loads(&self) -> Vec<usize> {
        self.groups.iter().map(|g| g.load).collect()
    }

    /// Gap between the heaviest and lightest group loads.
    pub fn drift(&self) -> usize {
        let loads = self.group_loads();
        match (loads.iter().max(), loads.iter().min()) {
            (Some(max), Some(min)) => max - min,
            _ => 0,
        }
    }

    pub fn drift_history(&self) -> &[usize] {
        &self.drift_history
    }

    pub fn buffer(&self, group: usize) -> &GroupBuffer {
        &self.groups[group].buffer
    }

    pub fn offsets(&self, group: usize) -> &OffsetTable {
        &self.groups[group].table
    }

    pub fn partition(&self, group: usize) -> &PrefixPartition {
        &self.groups[group].partition
    }

    fn admit_arrivals(&mut self, step: usize) {
        for req in &mut self.reqs {
            if !req.admitted && req.arrival <= step {
                req.admitted = true;
            }
        }
    }

    fn has_pending_arrival(&self, step: usize) -> bool {
        self.reqs
            .iter()
            .any(|r| !r.admitted && r.arrival <= step)
    }

    /// Repack every admitted request from scratch: fresh greedy plan (prefix
    /// aware when deduplicating), fresh split boundaries, fresh buffers.
    fn repack(&mut self, step: usize) -> Result<(), SimError> {
        self.admit_arrivals(step);
        let admitted: Vec<usize> = (0..self.reqs.len())
            .filter(|&i| self.reqs[i].admitted)
            .collect();

        let dedup = self.options.dedup && self.token_form;
        let (plan, partitions) = if dedup {
            let requests: Vec<Request> = admitted
                .iter()
                .map(|&i| {
                    Request::with_tokens(
                        self.reqs[i].id.clone(),
                        self.reqs[i].tokens.clone().expect("token-form run"),
                    )
                })
                .collect();
            let shared = prefix::pack_with_sharing(&requests, &self.config, self.options.min_share)?;
            (shared.plan, Some(shared.partitions))
        } else {
            let lengths: Vec<(String, usize)> = admitted
                .iter()
                .map(|&i| (self.reqs[i].id.clone(), self.reqs[i].len))
                .collect();
            (grouping::pack_with_splits(&lengths, &self.config)?, None)
        };
        plan.check_invariants(&self.config)?;

        // Rebuild the member table from the plan.
        let req_index: BTreeMap<&str, usize> = self
            .reqs
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.as_str(), i))
            .collect();
        let mut members: Vec<Member> = Vec::new();
        let mut member_index: BTreeMap<String, usize> = BTreeMap::new();
        for group in &plan.groups {
            for gm in &group.members {
                // Exact request ids win; anything else is a split segment.
                let (req, start, end, tail) = match req_index.get(gm.id.as_str()) {
                    Some(&req) => (req, 0, self.reqs[req].len, true),
                    None => {
                        let (parent, k) =
                            gm.id.split_once('#').expect("member is a split segment");
                        let k: usize = k.parse().expect("segment index");
                        let seg = plan.splits[parent][k];
                        let req = req_index[parent];
                        (req, seg.start, seg.end, seg.end == self.reqs[req].len)
                    }
                };
                member_index.insert(gm.id.clone(), members.len());
                members.push(Member {
                    id: gm.id.clone(),
                    req,
                    start,
                    end,
                    tail,
                    group: group.index,
                    eff_len: 0,
                });
            }
        }

        // Fresh paged store over current sequences.
        let paged = if self.token_form {
            Some(PagedStore::build(
                admitted.iter().map(|&i| {
                    (
                        self.reqs[i].id.clone(),
                        self.reqs[i].tokens.clone().expect("token-form run"),
                    )
                }),
                self.options.page_size,
            )?)
        } else {
            None
        };

        // Token sources: members point at their parent's sequence.
        let sources: BTreeMap<String, TokenSource> = members
            .iter()
            .map(|m| {
                (
                    m.id.clone(),
                    TokenSource {
                        request: self.reqs[m.req].id.clone(),
                        start: m.start,
                    },
                )
            })
            .collect();

        let mut groups: Vec<GroupState> = Vec::with_capacity(plan.group_count);
        for group in &plan.groups {
            let partition = match &partitions {
                Some(parts) => parts[group.index].clone(),
                None => PrefixPartition::without_sharing(
                    &group
                        .members
                        .iter()
                        .map(|m| (m.id.clone(), m.contribution))
                        .collect::<Vec<_>>(),
                ),
            };
            let consolidation = self.consolidate_group(&partition, &sources, paged.as_ref())?;
            let load = prefix::io_volume(&partition);
            for (id, eff) in partition.member_effective_lens() {
                members[member_index[&id]].eff_len = eff;
            }
            groups.push(GroupState {
                buffer: consolidation.0,
                table: consolidation.1,
                partition,
                load,
                members: Vec::new(),
            });
            self.step_copy_tokens += load;
            self.copy_tokens_total += load;
        }
        for (idx, member) in members.iter().enumerate() {
            groups[member.group].members.push(idx);
        }

        self.members = members;
        self.groups = groups;
        self.paged = paged;
        self.plan = plan;
        self.last_regroup_step = step;
        self.drift_history.clear();
        Ok(())
    }

    fn consolidate_group(
        &self,
        partition: &PrefixPartition,
        sources: &BTreeMap<String, TokenSource>,
        paged: Option<&PagedStore>,
    ) -> Result<(GroupBuffer, OffsetTable), SimError> {
        let cap = Some(self.config.mem_cap);
        match paged {
            Some(paged) => {
                let c = layout::consolidate(partition, sources, paged, self.config.headroom, cap)?;
                Ok((c.buffer, c.table))
            }
            None => Ok(layout::plan_offsets(partition, self.config.headroom, cap)?),
        }
    }

    /// Rebuild one group in place after headroom exhaustion: re-partition
    /// its members' current slices and consolidate a fresh buffer.
    fn reconsolidate_group(&mut self, group: usize) -> Result<(), SimError> {
        let dedup = self.options.dedup && self.token_form;
        let member_ids = self.groups[group].members.clone();
        let partition = if dedup {
            let requests: Vec<Request> = member_ids
                .iter()
                .map(|&m| {
                    let member = &self.members[m];
                    let seq = self.reqs[member.req].tokens.as_ref().expect("token-form");
                    Request::with_tokens(member.id.clone(), seq[member.start..member.end].to_vec())
                })
                .collect();
            prefix::trie_partition(&requests, self.options.min_share)?
        } else {
            PrefixPartition::without_sharing(
                &member_ids
                    .iter()
                    .map(|&m| {
                        let member = &self.members[m];
                        (member.id.clone(), member.end - member.start)
                    })
                    .collect::<Vec<_>>(),
            )
        };
        let sources: BTreeMap<String, TokenSource> = member_ids
            .iter()
            .map(|&m| {
                let member = &self.members[m];
                (
                    member.id.clone(),
                    TokenSource {
                        request: self.reqs[member.req].id.clone(),
                        start: member.start,
                    },
                )
            })
            .collect();
        let (buffer, table) = self.consolidate_group(&partition, &sources, self.paged.as_ref())?;
        let load = prefix::io_volume(&partition);
        for (id, eff) in partition.member_effective_lens() {
            let idx = member_ids
                .iter()
                .copied()
                .find(|&m| self.members[m].id == id)
                .expect("member belongs to group");
            self.members[idx].eff_len = eff;
        }
        let state = &mut self.groups[group];
        state.buffer = buffer;
        state.table = table;
        state.partition = partition;
        state.load = load;
        self.reconsolidation_count += 1;
        self.step_reconsolidations += 1;
        self.step_copy_tokens += load;
        self.copy_tokens_total += load;
        Ok(())
    }

    /// Advance one decode step; returns the step's metrics.
    pub fn step_once(&mut self) -> Result<StepRecord, SimError> {
        self.step += 1;
        self.step_reconsolidations = 0;
        self.step_copy_tokens = 0;
        let GrowthModel::OneTokenPerRequest = self.options.growth;

        // Grow every active request by one token through its tail member.
        let mut needs_rebuild: BTreeSet<usize> = BTreeSet::new();
        for m in 0..self.members.len() {
            let (req, tail, group) = {
                let member = &self.members[m];
                (member.req, member.tail, member.group)
            };
            if !tail || !self.reqs[req].active() {
                continue;
            }
            let token = self.rng.random_range(0..GENERATOR_VOCAB);
            {
                let req_state = &mut self.reqs[req];
                if let Some(tokens) = req_state.tokens.as_mut() {
                    tokens.push(token);
                }
                req_state.len += 1;
                req_state.generated += 1;
            }
            if let Some(paged) = self.paged.as_mut() {
                paged.append_token(&self.reqs[req].id, token)?;
            }
            let member = &mut self.members[m];
            member.end += 1;
            member.eff_len += 1;
            let member_id = member.id.clone();
            let state = &mut self.groups[group];
            match append_decode_token(&mut state.buffer, &mut state.table, &member_id)? {
                AppendOutcome::Appended { .. } => state.load += 1,
                AppendOutcome::NeedsReconsolidation => {
                    needs_rebuild.insert(group);
                }
            }
        }
        for group in needs_rebuild {
            self.reconsolidate_group(group)?;
        }

        let drift = self.drift();
        self.drift_history.push(drift);
        let since = self.step - self.last_regroup_step;
        let mut regrouped = false;
        if should_regroup(drift, since, self.config.capacity) {
            regrouped = true;
        } else if self.groups.is_empty() && self.has_pending_arrival(self.step) {
            // Nothing is scheduled; admit waiting arrivals immediately.
            regrouped = true;
        }
        if regrouped {
            self.repack(self.step)?;
            self.regroup_steps.push(self.step);
        }

        self.verify()?;
        Ok(self.record(drift, regrouped))
    }

    fn record(&self, drift: usize, regrouped: bool) -> StepRecord {
        let group_count = self.groups.len();
        let admitted_lens: Vec<usize> = self
            .reqs
            .iter()
            .filter(|r| r.admitted)
            .map(|r| r.len)
            .collect();
        let eta_batch = (group_count > 0).then(|| {
            Utilization::of_lengths(admitted_lens.iter().copied(), group_count, self.config.tile)
        });
        let eta_batch_effective = (group_count > 0).then(|| {
            Utilization::of_lengths(
                self.members.iter().map(|m| m.eff_len),
                group_count,
                self.config.tile,
            )
        });
        let io_naive: usize = admitted_lens.iter().sum();
        let io_dedup: usize = self.groups.iter().map(|g| g.load).sum();
        let costs: Vec<u64> = self
            .groups
            .iter()
            .map(|g| {
                self.options.cost_model.group_cost(
                    g.members.iter().map(|&m| self.members[m].eff_len),
                    g.load,
                )
            })
            .collect();
        let makespan = costs.iter().max().copied().unwrap_or(0);
        let idle = costs.iter().map(|c| makespan - c).sum();
        StepRecord {
            step: self.step,
            drift,
            regrouped,
            reconsolidations: self.step_reconsolidations,
            copy_tokens: self.step_copy_tokens,
            eta_batch,
            eta_batch_effective,
            io_naive,
            io_dedup,
            makespan,
            idle,
            group_count,
            max_load: self.groups.iter().map(|g| g.load).max().unwrap_or(0),
            min_load: self.groups.iter().map(|g| g.load).min().unwrap_or(0),
        }
    }

    /// Structural self-check run after every step: buffer accounting,
    /// coverage of each member's logical slice, and token conservation
    /// (buffers hold exactly the deduplicated volume).
    fn verify(&self) -> Result<(), SimError> {
        let fail = |message: String| -> SimError {
            SimError::Invariant {
                step: self.step,
                message,
            }
        };
        let mut member_slices = 0usize;
        for member in &self.members {
            member_slices += member.end - member.start;
        }
        let admitted: usize = self
            .reqs
            .iter()
            .filter(|r| r.admitted)
            .map(|r| r.len)
            .sum();
        if member_slices != admitted {
            return Err(fail(format!(
                "member slices cover {member_slices} tokens, admitted requests hold {admitted}"
            )));
        }
        for (g, state) in self.groups.iter().enumerate() {
            state.buffer.check()?;
            if state.buffer.used_tokens() != state.load {
                return Err(fail(format!(
                    "group {g} load {} != buffer tokens {}",
                    state.load,
                    state.buffer.used_tokens()
                )));
            }
            for &m in &state.members {
                let member = &self.members[m];
                let entry = state
                    .table
                    .get(&member.id)
                    .ok_or_else(|| fail(format!("member {} missing offsets", member.id)))?;
                if entry.prefix_len + entry.suffix_len != member.end - member.start {
                    return Err(fail(format!(
                        "member {} offsets cover {} tokens, slice is {}",
                        member.id,
                        entry.prefix_len + entry.suffix_len,
                        member.end - member.start
                    )));
                }
            }
        }
        Ok(())
    }

    fn summary(&self) -> SimSummary {
        let record = self.record(self.drift(), false);
        SimSummary {
            steps: self.step,
            requests: self.reqs.len(),
            admitted: self.reqs.iter().filter(|r| r.admitted).count(),
            group_count_final: self.groups.len(),
            regroup_count: self.regroup_steps.len(),
            regroup_steps: self.regroup_steps.clone(),
            reconsolidation_count: self.reconsolidation_count,
            copy_tokens_total: self.copy_tokens_total,
            io_naive_final: record.io_naive,
            io_dedup_final: record.io_dedup,
            makespan_final: record.makespan,
            idle_final: record.idle,
            dedup_active: self.options.dedup && self.token_form,
            paged_fragmentation_final: self
                .paged
                .as_ref()
                .map(PagedStore::internal_fragmentation),
            consolidated_waste_final: self.groups.iter().map(|g| g.buffer.waste()).sum(),
        }
    }
}

/// Run the decode loop for `options.steps` steps and collect the report.
/// Step 0 records the freshly packed batch before any token is generated.
pub fn run_decode(
    trace: &WorkloadTrace,
    config: &Config,
    options: &SimOptions,
) -> Result<SimReport, SimError> {
    let mut state = SimState::new(trace, config, options)?;
    let mut steps = Vec::with_capacity(options.steps + 1);
    steps.push(state.record(state.drift(), false));
    for _ in 0..options.steps {
        steps.push(state.step_once()?);
    }
    Ok(SimReport {
        schema: 1,
        config: config.clone(),
        options: options.clone(),
        summary: state.summary(),
        steps,
    })
}

/// Offline capacity sweep: pack the trace at every candidate capacity and
/// return the one minimizing the makespan proxy, smaller capacity on ties.
pub fn select_capacity(
    trace: &WorkloadTrace,
    cost_model: &CostModel,
    candidates: &[usize],
    config: &Config,
) -> Result<usize, SimError> {
    if candidates.is_empty() {
        return Err(SimError::NoCandidates);
    }
    let inputs = trace.packing_inputs();
    let mut best: Option<(u64, usize)> = None;
    for &capacity in candidates {
        let candidate_config = Config {
            capacity,
            mem_cap: config.mem_cap.max(capacity),
            ..config.clone()
        };
        candidate_config.validate()?;
        let plan = grouping::pack_with_splits(&inputs, &candidate_config)?;
        let makespan = plan
            .groups
            .iter()
            .map(|g| {
                cost_model.group_cost(g.members.iter().map(|m| m.contribution), g.load)
            })
            .max()
            .unwrap_or(0);
        let key = (makespan, capacity);
        if best.is_none_or(|b| key < b) {
            best = Some(key);
        }
    }
    Ok(best.expect("candidates nonempty").1)
}

/// Metrics for one scheduling policy over the same batch.
#[derive(Debug, Clone, Serialize)]
pub struct PolicyMetrics {
    pub policy: String,
    pub group_count: usize,
    pub eta_batch: Option<Utilization>,
    pub eta_batch_effective: Option<Utilization>,
    /// Tokens fetched per decode pass under this policy.
    pub io_volume: usize,
    pub makespan_tile: u64,
    pub idle_tile: u64,
    pub makespan_kv: u64,
    pub idle_kv: u64,
    pub discrepancy: usize,
}

fn policy_metrics(
    policy: &str,
    tile: usize,
    group_stats: &[(Vec<usize>, usize)],
    original_lens: &[usize],
    effective_lens: Option<Vec<usize>>,
    discrepancy: usize,
) -> PolicyMetrics {
    let group_count = group_stats.len();
    let span = |model: CostModel| -> (u64, u64) {
        let costs: Vec<u64> = group_stats
            .iter()
            .map(|(lens, unique)| model.group_cost(lens.iter().copied(), *unique))
            .collect();
        let makespan = costs.iter().max().copied().unwrap_or(0);
        (makespan, costs.iter().map(|c| makespan - c).sum())
    };
    let (makespan_tile, idle_tile) = span(CostModel::tile_quadratic(tile));
    let (makespan_kv, idle_kv) = span(CostModel::kv_linear(tile));
    PolicyMetrics {
        policy: policy.to_string(),
        group_count,
        eta_batch: (group_count > 0)
            .then(|| Utilization::of_lengths(original_lens.iter().copied(), group_count, tile)),
        eta_batch_effective: effective_lens.map(|lens| {
            Utilization::of_lengths(lens, group_count, tile)
        }),
        io_volume: group_stats.iter().map(|(_, unique)| unique).sum(),
        makespan_tile,
        idle_tile,
        makespan_kv,
        idle_kv,
        discrepancy,
    }
}

/// Three policies over identical inputs: one kernel per request, packed
/// without prefix sharing, packed with prefix sharing. Length-only traces
/// have nothing to share, so the third policy degrades to the second.
#[derive(Debug, Clone, Serialize)]
pub struct BaselineComparison {
    pub schema: u32,
    pub dedup_active: bool,
    pub per_request: PolicyMetrics,
    pub packed: PolicyMetrics,
    pub packed_dedup: PolicyMetrics,
}

pub fn compare_baselines(
    trace: &WorkloadTrace,
    config: &Config,
    min_share: usize,
) -> Result<BaselineComparison, SimError> {
    config.validate()?;
    let inputs = trace.packing_inputs();
    let lens: Vec<usize> = inputs.iter().map(|(_, len)| *len).collect();
    let tile = config.tile;

    // One kernel invocation per request: no capacity, no sharing.
    let per_request_stats: Vec<(Vec<usize>, usize)> =
        lens.iter().map(|&len| (vec![len], len)).collect();
    let per_request = policy_metrics(
        "per_request",
        tile,
        &per_request_stats,
        &lens,
        None,
        lens.iter().max().copied().unwrap_or(0) - lens.iter().min().copied().unwrap_or(0),
    );

    // Packed, every request fetched whole.
    let plan = grouping::pack_with_splits(&inputs, config)?;
    let packed_stats: Vec<(Vec<usize>, usize)> = plan
        .groups
        .iter()
        .map(|g| {
            (
                g.members.iter().map(|m| m.contribution).collect(),
                g.load,
            )
        })
        .collect();
    let packed = policy_metrics(
        "packed",
        tile,
        &packed_stats,
        &lens,
        Some(
            plan.groups
                .iter()
                .flat_map(|g| g.members.iter().map(|m| m.contribution))
                .collect(),
        ),
        plan.discrepancy,
    );

    // Packed with prefix sharing, when the trace carries tokens.
    let dedup_active = trace.has_tokens() && !trace.is_empty();
    let packed_dedup = if dedup_active {
        let shared = prefix::pack_with_sharing(&trace.requests, config, min_share)?;
        let stats: Vec<(Vec<usize>, usize)> = shared
            .partitions
            .iter()
            .map(|p| {
                (
                    p.member_effective_lens()
                        .into_iter()
                        .map(|(_, len)| len)
                        .collect(),
                    prefix::io_volume(p),
                )
            })
            .collect();
        let effective: Vec<usize> = shared
            .partitions
            .iter()
            .flat_map(|p| p.member_effective_lens().into_iter().map(|(_, len)| len))
            .collect();
        policy_metrics(
            "packed_dedup",
            tile,
            &stats,
            &lens,
            Some(effective),
            shared.plan.discrepancy,
        )
    } else {
        PolicyMetrics {
            policy: "packed_dedup".to_string(),
            ..packed.clone()
        }
    };

    Ok(BaselineComparison {
        schema: 1,
        dedup_active,
        per_request,
        packed,
        packed_dedup,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{generate_prefix_trace, generate_skewed_trace, read_trace};

    fn base_config() -> Config {
        Config {
            tile: 128,
            capacity: 8192,
            headroom: 8,
            ..Config::default()
        }
    }

    fn sim_options(steps: usize) -> SimOptions {
        SimOptions::new(steps, CostModel::kv_linear(128))
    }

    fn length_trace(lens: &[usize]) -> WorkloadTrace {
        let lines: String = lens
            .iter()
            .enumerate()
            .map(|(i, len)| format!("{{\"id\":\"r{i}\",\"prompt_len\":{len}}}\n"))
            .collect();
        read_trace(lines.as_bytes(), "inline").unwrap()
    }

    #[test]
    fn regroup_rule_closed_form() {
        // 2 * t * drift >= capacity, capacity 8192.
        for (drift, expected) in [(103usize, 40usize), (128, 32), (204, 21)] {
            let t = (0..100)
                .find(|&t| should_regroup(drift, t, 8192))
                .unwrap();
            assert_eq!(t, expected, "drift {drift}");
        }
        assert!(!should_regroup(0, 1_000_000, 8192));
        // Exact boundary is inclusive.
        assert!(should_regroup(128, 32, 8192));
        assert!(!should_regroup(128, 31, 8192));
        // Odd capacity: 2 * t * drift >= capacity without truncation.
        assert!(!should_regroup(1, 4096, 8193));
        assert!(should_regroup(1, 4097, 8193));
    }

    #[test]
    fn zero_steps_reports_prefill_only() {
        let trace = length_trace(&[4096, 4096]);
        let report = run_decode(&trace, &base_config(), &sim_options(0)).unwrap();
        assert_eq!(report.steps.len(), 1);
        assert_eq!(report.summary.regroup_count, 0);
        assert_eq!(report.steps[0].io_naive, 8192);
        assert_eq!(report.steps[0].group_count, 1);
    }

    #[test]
    fn symmetric_groups_never_drift() {
        // Two groups with identical loads and member counts grow in
        // lockstep; the drift stays zero and nothing regroups.
        let trace = length_trace(&[5000, 5000]);
        let report = run_decode(&trace, &base_config(), &sim_options(64)).unwrap();
        assert_eq!(report.summary.group_count_final, 2);
        assert!(report.steps.iter().all(|s| s.drift == 0));
        assert_eq!(report.summary.regroup_count, 0);
    }

    #[test]
    fn uneven_member_counts_accumulate_drift() {
        // One 4000-token request lands alone; ten 400-token requests fill
        // the second group. Loads start equal, but growth differs by the
        // member-count gap: drift at step s is 9 * s until the regroup.
        let mut lens = vec![4000usize];
        lens.extend(vec![400; 10]);
        let config = Config {
            capacity: 4096,
            ..base_config()
        };
        let report = run_decode(&length_trace(&lens), &config, &sim_options(20)).unwrap();
        assert_eq!(report.steps[0].group_count, 2);
        assert_eq!(report.steps[0].drift, 0);
        for s in 1..=15 {
            assert_eq!(report.steps[s].drift, 9 * s, "step {s}");
        }
        // 2 * t * (9t) >= 4096 first holds at t = 16.
        assert_eq!(report.summary.regroup_steps.first(), Some(&16));
    }

    #[test]
    fn constant_drift_fires_at_closed_form_interval() {
        for (delta, expected) in [(103usize, 40usize), (128, 32), (204, 21)] {
            let trace = length_trace(&[4500 + delta, 4500]);
            let config = Config {
                headroom: 256,
                ..base_config()
            };
            let report = run_decode(&trace, &config, &sim_options(100)).unwrap();
            let steps = &report.summary.regroup_steps;
            assert!(!steps.is_empty(), "drift {delta} never regrouped");
            assert_eq!(steps[0], expected, "first interval for drift {delta}");
            // Regrouping restores the same two singleton groups, so the
            // pattern repeats with the same period.
            for pair in steps.windows(2) {
                assert_eq!(pair[1] - pair[0], expected, "drift {delta}");
            }
        }
    }

    #[test]
    fn headroom_delays_reconsolidation_exactly() {
        let config = Config {
            headroom: 8,
            ..base_config()
        };
        let trace = length_trace(&[100, 200]);
        let mut state = SimState::new(&trace, &config, &sim_options(0)).unwrap();
        for step in 1..=8 {
            let record = state.step_once().unwrap();
            assert_eq!(record.reconsolidations, 0, "step {step}");
        }
        let record = state.step_once().unwrap();
        assert_eq!(record.reconsolidations, 1, "ninth append rebuilds");
    }

    #[test]
    fn token_run_keeps_buffers_consistent_under_dedup() {
        let trace = generate_prefix_trace(12, 5, 2, 256, 64).unwrap();
        let config = Config {
            capacity: 2048,
            headroom: 4,
            ..base_config()
        };
        let mut options = sim_options(24);
        options.min_share = 64;
        let report = run_decode(&trace, &config, &options).unwrap();
        assert!(report.summary.dedup_active);
        // Sharing must save tokens against the naive fetch.
        for step in &report.steps {
            assert!(step.io_dedup < step.io_naive);
        }
        assert!(report.summary.reconsolidation_count > 0);
        assert!(report.summary.paged_fragmentation_final.is_some());
    }

    #[test]
    fn split_requests_grow_through_their_tail_segment() {
        let config = Config {
            capacity: 1000,
            headroom: 4,
            ..base_config()
        };
        let trace = length_trace(&[2500, 300]);
        let report = run_decode(&trace, &config, &sim_options(10)).unwrap();
        // 2500 splits into 1000/1000/500; growth lands on the 500 tail.
        assert_eq!(report.steps[0].io_naive, 2800);
        assert_eq!(report.steps[10].io_naive, 2800 + 2 * 10);
        report
            .steps
            .iter()
            .for_each(|s| assert_eq!(s.io_dedup, s.io_naive));
    }

    #[test]
    fn late_arrivals_wait_for_admission() {
        // Loads 6548 vs 4500 keep a constant 2048 drift, which regroups at
        // step 2; the arrival from step 1 is admitted there, not before.
        let input = "{\"id\":\"a\",\"prompt_len\":6548}\n\
                     {\"id\":\"b\",\"prompt_len\":4500}\n\
                     {\"id\":\"later\",\"prompt_len\":100,\"arrival_step\":1}";
        let trace = read_trace(input.as_bytes(), "inline").unwrap();
        let report = run_decode(&trace, &base_config(), &sim_options(4)).unwrap();
        assert_eq!(report.steps[1].io_naive, 6548 + 4500 + 2);
        assert_eq!(report.summary.regroup_steps.first(), Some(&2));
        assert_eq!(report.summary.admitted, 3);
        assert!(report.steps[2].io_naive >= 6548 + 4500 + 100);
    }

    #[test]
    fn output_len_caps_growth() {
        let input = "{\"id\":\"a\",\"prompt_len\":50,\"output_len\":4}";
        let trace = read_trace(input.as_bytes(), "inline").unwrap();
        let report = run_decode(&trace, &base_config(), &sim_options(10)).unwrap();
        assert_eq!(report.steps.last().unwrap().io_naive, 54);
    }

    #[test]
    fn cost_models_split_phases() {
        let tile_model = CostModel::tile_quadratic(128);
        // Two members of 129 tokens: ceil(129/128)^2 = 4 tiles each.
        assert_eq!(tile_model.group_cost([129, 129], 258), 8);
        assert_eq!(tile_model.group_cost([1], 1), 1);
        let kv_model = CostModel::kv_linear(128);
        assert_eq!(kv_model.group_cost([129, 129], 200), 200);
    }

    #[test]
    fn select_capacity_prefers_min_makespan_then_smaller() {
        let trace = generate_skewed_trace(200, 3, 0.6, 128, 2048).unwrap();
        let config = base_config();
        let model = CostModel::kv_linear(128);

        let single = select_capacity(&trace, &model, &[1024], &config).unwrap();
        assert_eq!(single, 1024);

        let candidates = [1024, 2048, 4096];
        let chosen = select_capacity(&trace, &model, &candidates, &config).unwrap();
        // Exhaustive check over the same candidates is the oracle.
        let inputs = trace.packing_inputs();
        let best = candidates
            .iter()
            .map(|&c| {
                let cfg = Config {
                    capacity: c,
                    ..config.clone()
                };
                let plan = grouping::pack_with_splits(&inputs, &cfg).unwrap();
                let makespan = plan
                    .groups
                    .iter()
                    .map(|g| model.group_cost(g.members.iter().map(|m| m.contribution), g.load))
                    .max()
                    .unwrap();
                (makespan, c)
            })
            .min()
            .unwrap()
            .1;
        assert_eq!(chosen, best);

        assert!(matches!(
            select_capacity(&trace, &model, &[], &config),
            Err(SimError::NoCandidates)
        ));
    }

    #[test]
    fn select_capacity_tie_goes_to_smaller() {
        // One 100-token request packs into one group at every candidate, so
        // every makespan is equal and the sweep must keep the smallest.
        let trace = length_trace(&[100]);
        let model = CostModel::kv_linear(128);
        let chosen =
            select_capacity(&trace, &model, &[4096, 1024, 2048], &base_config()).unwrap();
        assert_eq!(chosen, 1024);
    }

    #[test]
    fn compare_baselines_ordering_holds() {
        // Equal-length requests that exactly fill groups.
        let trace = length_trace(&[64; 8]);
        let config = Config {
            capacity: 256,
            ..base_config()
        };
        let cmp = compare_baselines(&trace, &config, 128).unwrap();
        assert_eq!(cmp.per_request.group_count, 8);
        assert_eq!(cmp.packed.group_count, 2);
        let eta_packed = cmp.packed.eta_batch.unwrap();
        let eta_naive = cmp.per_request.eta_batch.unwrap();
        assert!(eta_packed.value() > eta_naive.value());
        // No sharing in a length-only trace.
        assert!(!cmp.dedup_active);
        assert_eq!(cmp.packed_dedup.io_volume, cmp.packed.io_volume);
    }

    #[test]
    fn compare_baselines_dedup_strictly_wins_on_shared_prefixes() {
        let trace = generate_prefix_trace(16, 11, 1, 200, 40).unwrap();
        let config = Config {
            capacity: 2048,
            ..base_config()
        };
        let cmp = compare_baselines(&trace, &config, 128).unwrap();
        assert!(cmp.dedup_active);
        assert!(cmp.packed_dedup.io_volume < cmp.packed.io_volume);
        assert_eq!(cmp.packed.io_volume, cmp.per_request.io_volume);
    }

    #[test]
    fn csv_has_one_row_per_step() {
        let trace = length_trace(&[100, 200]);
        let report = run_decode(&trace, &base_config(), &sim_options(5)).unwrap();
        let csv = report.to_csv();
        // Header plus step 0 plus five decode steps.
        assert_eq!(csv.lines().count(), 1 + 6);
        assert!(csv.starts_with("step,drift,"));
    }

    #[test]
    fn simulation_is_deterministic() {
        let trace = generate_prefix_trace(10, 2, 2, 128, 64).unwrap();
        let config = base_config();
        let options = sim_options(16);
        let a = run_decode(&trace, &config, &options).unwrap();
        let b = run_decode(&trace, &config, &options).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn empty_trace_simulates_to_empty_report() {
        let trace = length_trace(&[]);
        let report = run_decode(&trace, &base_config(), &sim_options(4)).unwrap();
        assert_eq!(report.summary.group_count_final, 0);
        assert_eq!(report.summary.io_naive_final, 0);
    }
}
