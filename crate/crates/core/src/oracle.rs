//! Exact partitioner for small instances.
//!
//! Enumerates set partitions in restricted-growth order (item 0 pinned to
//! group 0, a new group index only after all lower ones are in use), prunes
//! on capacity, memory, and a discrepancy lower bound, and keeps the best
//! feasible partition into exactly `G` groups. Exponential by nature, so the
//! instance size is capped; within the cap it is the ground truth the greedy
//! heuristic is benchmarked against.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::config::Config;
use crate::grouping::{
    self, greedy_pack, mem_estimate, plan_from_groups, Group, GroupMember, PackingPlan,
    Utilization,
};

/// Hard cap on instance size; the search is exponential.
pub const MAX_ORACLE_REQUESTS: usize = 14;

/// Outcome of an exact search.
#[derive(Debug, Clone)]
pub struct OracleResult {
    pub plan: PackingPlan,
    pub discrepancy: usize,
    pub max_load: usize,
    pub nodes_explored: u64,
    pub elapsed: Duration,
}

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("instance of {n} requests exceeds the exact-search cap of {max}")]
    InstanceTooLarge { n: usize, max: usize },
    #[error("request {id:?} of length {len} exceeds capacity {capacity}; split it before solving")]
    Oversize {
        id: String,
        len: usize,
        capacity: usize,
    },
    #[error("no feasible partition into {groups} groups")]
    Infeasible { groups: usize },
    #[error(transparent)]
    Pack(#[from] grouping::PackError),
}

struct Search<'a> {
    lens: &'a [usize],
    config: &'a Config,
    groups: usize,
    total: usize,
    loads: Vec<usize>,
    counts: Vec<usize>,
    used: usize,
    assign: Vec<usize>,
    best_disc: Option<usize>,
    best_assign: Vec<usize>,
    nodes: u64,
}

impl Search<'_> {
    fn dfs(&mut self, item: usize) {
        self.nodes += 1;
        if let Some(best) = self.best_disc {
            if best == 0 {
                return;
            }
            // Some group ends at or above the current maximum; some group
            // ends at or below the mean. Prune when that gap cannot beat
            // the incumbent.
            let cur_max = self.loads[..self.used].iter().max().copied().unwrap_or(0);
            let floor_avg = self.total / self.groups;
            if cur_max > floor_avg && cur_max - floor_avg >= best {
                return;
            }
        }
        if item == self.lens.len() {
            if self.used == self.groups {
                let max = self.loads.iter().max().copied().unwrap_or(0);
                let min = self.loads.iter().min().copied().unwrap_or(0);
                let disc = max - min;
                if self.best_disc.is_none_or(|b| disc < b) {
                    self.best_disc = Some(disc);
                    self.best_assign = self.assign.clone();
                }
            }
            return;
        }
        // Every group must end up non-empty.
        if self.lens.len() - item < self.groups - self.used {
            return;
        }
        let limit = (self.used + 1).min(self.groups);
        for group in 0..limit {
            let new_load = self.loads[group] + self.lens[item];
            if new_load > self.config.capacity {
                continue;
            }
            if mem_estimate(new_load, self.counts[group] + 1, self.config) > self.config.mem_cap {
                continue;
            }
            let was_used = self.used;
            if group == self.used {
                self.used += 1;
            }
            self.loads[group] = new_load;
            self.counts[group] += 1;
            self.assign[item] = group;
            self.dfs(item + 1);
            self.loads[group] -= self.lens[item];
            self.counts[group] -= 1;
            self.used = was_used;
        }
    }
}

/// Find a partition minimizing load discrepancy subject to the capacity and
/// memory constraints, over exactly `g_fixed` groups when given, otherwise
/// starting from `ceil(total / capacity)` and growing only if that count
/// admits no feasible partition. Deterministic; complete via canonical
/// symmetry-broken enumeration.
pub fn optimal_pack(
    requests: &[(String, usize)],
    config: &Config,
    g_fixed: Option<usize>,
) -> Result<OracleResult, OracleError> {
    let start = Instant::now();
    if requests.len() > MAX_ORACLE_REQUESTS {
        return Err(OracleError::InstanceTooLarge {
            n: requests.len(),
            max: MAX_ORACLE_REQUESTS,
        });
    }
    grouping::validate_pack_inputs(requests, config, false)?;
    for (id, len) in requests {
        if *len > config.capacity {
            return Err(OracleError::Oversize {
                id: id.clone(),
                len: *len,
                capacity: config.capacity,
            });
        }
    }
    if requests.is_empty() {
        return Ok(OracleResult {
            plan: plan_from_groups(Vec::new(), None, None, BTreeMap::new()),
            discrepancy: 0,
            max_load: 0,
            nodes_explored: 0,
            elapsed: start.elapsed(),
        });
    }

    // Descending lengths tighten the bound early; ids break ties for
    // deterministic output.
    let mut order: Vec<usize> = (0..requests.len()).collect();
    order.sort_by(|&a, &b| {
        requests[b]
            .1
            .cmp(&requests[a].1)
            .then_with(|| requests[a].0.cmp(&requests[b].0))
    });
    let lens: Vec<usize> = order.iter().map(|&i| requests[i].1).collect();
    let total: usize = lens.iter().sum();

    let estimated = total.div_ceil(config.capacity).max(1);
    let candidates: Vec<usize> = match g_fixed {
        Some(g) => vec![g],
        None => (estimated..=requests.len()).collect(),
    };

    let mut nodes_total = 0;
    for groups in candidates {
        if groups == 0 || groups > requests.len() {
            continue;
        }
        let mut search = Search {
            lens: &lens,
            config,
            groups,
            total,
            loads: vec![0; groups],
            counts: vec![0; groups],
            used: 0,
            assign: vec![0; lens.len()],
            best_disc: None,
            best_assign: Vec::new(),
            nodes: 0,
        };
        search.dfs(0);
        nodes_total += search.nodes;
        if let Some(discrepancy) = search.best_disc {
            let mut groups_out: Vec<Group> = (0..groups)
                .map(|index| Group {
                    index,
                    members: Vec::new(),
                    load: 0,
                    mem: 0,
                })
                .collect();
            for (pos, &group) in search.best_assign.iter().enumerate() {
                let (id, len) = &requests[order[pos]];
                let g = &mut groups_out[group];
                g.members.push(GroupMember {
                    id: id.clone(),
                    contribution: *len,
                });
                g.load += len;
            }
            for group in &mut groups_out {
                group.mem = mem_estimate(group.load, group.members.len(), config);
            }
            let max_load = groups_out.iter().map(|g| g.load).max().unwrap_or(0);
            let eta = Some(Utilization::of_lengths(
                requests.iter().map(|(_, len)| *len),
                groups,
                config.tile,
            ));
            let plan = plan_from_groups(groups_out, eta, None, BTreeMap::new());
            debug_assert_eq!(plan.discrepancy, discrepancy);
            return Ok(OracleResult {
                plan,
                discrepancy,
                max_load,
                nodes_explored: nodes_total,
                elapsed: start.elapsed(),
            });
        }
    }
    Err(OracleError::Infeasible {
        groups: g_fixed.unwrap_or(estimated),
    })
}

/// Timing and quality for one instance, heuristic versus exact.
#[derive(Debug, Clone, Serialize)]
pub struct SolverComparison {
    pub instance: usize,
    pub n: usize,
    pub total_len: usize,
    pub greedy_seconds: f64,
    pub oracle_seconds: f64,
    pub greedy_discrepancy: usize,
    pub oracle_discrepancy: usize,
    pub greedy_max_load: usize,
    pub oracle_max_load: usize,
    pub greedy_groups: usize,
    pub oracle_groups: usize,
    pub nodes_explored: u64,
}

/// Aggregate summary over a benchmark run.
#[derive(Debug, Clone, Serialize)]
pub struct SolverBenchmark {
    pub rows: Vec<SolverComparison>,
    pub greedy_median_seconds: f64,
    pub oracle_median_seconds: f64,
    /// Median oracle time over median greedy time.
    pub speedup: f64,
    /// Instances where the heuristic found an optimal discrepancy.
    pub greedy_optimal_count: usize,
}

fn median(mut values: Vec<f64>) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        (values[mid - 1] + values[mid]) / 2.0
    }
}

/// Run both solvers over every instance and aggregate timing medians.
pub fn benchmark_solvers(
    instances: &[Vec<(String, usize)>],
    config: &Config,
) -> Result<SolverBenchmark, OracleError> {
    let mut rows = Vec::with_capacity(instances.len());
    for (index, instance) in instances.iter().enumerate() {
        let greedy_start = Instant::now();
        let greedy = greedy_pack(instance, config)?;
        let greedy_seconds = greedy_start.elapsed().as_secs_f64();

        let oracle = optimal_pack(instance, config, None)?;

        rows.push(SolverComparison {
            instance: index,
            n: instance.len(),
            total_len: instance.iter().map(|(_, len)| len).sum(),
            greedy_seconds,
            oracle_seconds: oracle.elapsed.as_secs_f64(),
            greedy_discrepancy: greedy.discrepancy,
            oracle_discrepancy: oracle.discrepancy,
            greedy_max_load: greedy.max_load(),
            oracle_max_load: oracle.max_load,
            greedy_groups: greedy.group_count,
            oracle_groups: oracle.plan.group_count,
            nodes_explored: oracle.nodes_explored,
        });
    }
    let greedy_median_seconds = median(rows.iter().map(|r| r.greedy_seconds).collect());
    let oracle_median_seconds = median(rows.iter().map(|r| r.oracle_seconds).collect());
    let speedup = if greedy_median_seconds > 0.0 {
        oracle_median_seconds / greedy_median_seconds
    } else {
        f64::INFINITY
    };
    let greedy_optimal_count = rows
        .iter()
        .filter(|r| r.greedy_discrepancy == r.oracle_discrepancy)
        .count();
    Ok(SolverBenchmark {
        rows,
        greedy_median_seconds,
        oracle_median_seconds,
        speedup,
        greedy_optimal_count,
    })
}

/// Seeded random instances with lengths uniform in `[1, capacity]`.
pub fn random_instances(
    count: usize,
    n: usize,
    seed: u64,
    config: &Config,
) -> Vec<Vec<(String, usize)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            (0..n)
                .map(|i| {
                    (
                        format!("q{i:02}"),
                        rng.random_range(1..=config.capacity),
                    )
                })
                .collect()
        })
        .collect()
}

/// Seeded serving-shaped instances: a third of the requests are long
/// (0.4..0.5 capacity), the rest short (0.125..0.2 capacity). This mixed
/// shape leaves the capacity constraint slack and the optimum imbalanced,
/// which is the regime where exact search actually has to work; uniform
/// `[1, capacity]` lengths pin total load to the capacity and let the
/// feasibility check prune the tree to almost nothing.
pub fn heterogeneous_instances(
    count: usize,
    n: usize,
    seed: u64,
    config: &Config,
) -> Vec<Vec<(String, usize)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = config.capacity;
    (0..count)
        .map(|_| {
            (0..n)
                .map(|i| {
                    let len = if i < n.div_ceil(3) {
                        rng.random_range(2 * c / 5..=c / 2)
                    } else {
                        rng.random_range(c / 8..=c / 5)
                    };
                    (format!("q{i:02}"), len)
                })
                .collect()
        })
        .collect()
}
