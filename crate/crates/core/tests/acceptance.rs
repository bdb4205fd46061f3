//! Acceptance suite: one test per criterion, each printing a PASS line.
//!
//! Every expected value here is either a hand-traced constant, an exact
//! identity, or checked against an independent oracle implemented in this
//! file (plain enumeration, pairwise scans, naive arithmetic) — never
//! against the code under test.

use std::collections::BTreeMap;
use std::time::Instant;

use packsim_core::config::Config;
use packsim_core::grouping::{
    batch_utilization, greedy_pack, plan_discrepancy, Group, GroupMember, PackingPlan,
    Utilization,
};
use packsim_core::layout::{
    self, append_decode_token, apply_copy_plan, consolidate, identity_sources, AppendOutcome,
    PagedStore,
};
use packsim_core::merge::{
    finalize, max_abs_diff, merge_partials, partial_attention, reference_attention,
    split_merge_attention, AttentionProblem,
};
use packsim_core::oracle::{benchmark_solvers, heterogeneous_instances, optimal_pack};
use packsim_core::prefix::{io_volume, trie_partition};
use packsim_core::request::{Request, Token};
use packsim_core::simulate::{
    compare_baselines, run_decode, should_regroup, CostModel, SimOptions,
};
use packsim_core::trace::{generate_prefix_trace, generate_skewed_trace};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg(capacity: usize) -> Config {
    Config {
        capacity,
        tile: 128,
        headroom: 0,
        ..Config::default()
    }
}

fn ids(lens: &[usize]) -> Vec<(String, usize)> {
    lens.iter()
        .enumerate()
        .map(|(i, &len)| (format!("r{i:02}"), len))
        .collect()
}

#[test]
fn criterion_01_greedy_hand_trace() {
    let config = Config {
        capacity: 150,
        tile: 128,
        headroom: 0,
        ..Config::default()
    };
    let requests = ids(&[100, 80, 60, 40]);
    let start = Instant::now();
    let plan = greedy_pack(&requests, &config).unwrap();
    let elapsed = start.elapsed();

    assert_eq!(plan.group_count, 2);
    let member_lens = |g: usize| -> Vec<usize> {
        plan.groups[g].members.iter().map(|m| m.contribution).collect()
    };
    assert_eq!(member_lens(0), vec![100, 40]);
    assert_eq!(member_lens(1), vec![80, 60]);
    assert_eq!(plan_discrepancy(&plan), 0);
    assert!(
        elapsed.as_micros() < 1000,
        "greedy took {elapsed:?}, budget 1 ms"
    );
    println!("acceptance 1 PASS: greedy hand trace ({elapsed:?})");
}

#[test]
fn criterion_02_eta_model_exact() {
    let config = cfg(8192);
    let lengths: BTreeMap<String, usize> = ids(&[64, 64]).into_iter().collect();

    let packed = greedy_pack(&ids(&[64, 64]), &config).unwrap();
    assert_eq!(packed.group_count, 1);
    let eta_packed = batch_utilization(&packed, &lengths, &config);
    assert_eq!(eta_packed, Utilization::new(1, 2));
    assert_eq!(eta_packed.value(), 0.5);

    // One kernel per request: same lengths, two groups.
    let naive = PackingPlan {
        groups: vec![
            Group {
                index: 0,
                members: vec![GroupMember {
                    id: "r00".into(),
                    contribution: 64,
                }],
                load: 64,
                mem: 64,
            },
            Group {
                index: 1,
                members: vec![GroupMember {
                    id: "r01".into(),
                    contribution: 64,
                }],
                load: 64,
                mem: 64,
            },
        ],
        group_count: 2,
        eta_batch: None,
        eta_batch_effective: None,
        discrepancy: 0,
        splits: BTreeMap::new(),
    };
    let eta_naive = batch_utilization(&naive, &lengths, &config);
    assert_eq!(eta_naive, Utilization::new(1, 4));
    assert_eq!(eta_naive.value(), 0.25);
    println!("acceptance 2 PASS: eta model exact (packed 1/2, per-request 1/4)");
}

#[test]
fn criterion_03_eta_invariance_across_repartitions() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    for instance in 0..100 {
        let n = rng.random_range(2..24);
        let lens: Vec<usize> = (0..n).map(|_| rng.random_range(1..=512)).collect();
        let requests = ids(&lens);
        let config = cfg(100_000);
        let plan = greedy_pack(&requests, &config).unwrap();
        let g = plan.group_count;
        let lengths: BTreeMap<String, usize> = requests.iter().cloned().collect();
        let reference = batch_utilization(&plan, &lengths, &config);

        for _ in 0..10 {
            // Random repartition into the same number of groups.
            let mut groups: Vec<Group> = (0..g)
                .map(|index| Group {
                    index,
                    members: Vec::new(),
                    load: 0,
                    mem: 0,
                })
                .collect();
            for (i, (id, len)) in requests.iter().enumerate() {
                let target = if i < g { i } else { rng.random_range(0..g) };
                groups[target].members.push(GroupMember {
                    id: id.clone(),
                    contribution: *len,
                });
                groups[target].load += len;
            }
            let discrepancy = groups.iter().map(|x| x.load).max().unwrap()
                - groups.iter().map(|x| x.load).min().unwrap();
            let repartition = PackingPlan {
                group_count: g,
                groups,
                eta_batch: None,
                eta_batch_effective: None,
                discrepancy,
                splits: BTreeMap::new(),
            };
            let eta = batch_utilization(&repartition, &lengths, &config);
            assert_eq!(eta, reference, "instance {instance}");
        }
    }
    println!("acceptance 3 PASS: eta invariant over 100 instances x 10 repartitions");
}

/// Independent dedup oracle: pairwise longest common prefixes, thresholded,
/// classed by prefix value; classes of k >= 2 save k-1 prefix copies.
fn unique_token_volume(sequences: &[Vec<Token>], min_share: usize) -> usize {
    let lcp = |a: &[Token], b: &[Token]| a.iter().zip(b).take_while(|(x, y)| x == y).count();
    let total: usize = sequences.iter().map(Vec::len).sum();
    let mut classes: BTreeMap<Vec<Token>, usize> = BTreeMap::new();
    for (i, tokens) in sequences.iter().enumerate() {
        let best = sequences
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, other)| lcp(tokens, other))
            .max()
            .unwrap_or(0);
        if best >= min_share {
            *classes.entry(tokens[..best].to_vec()).or_default() += 1;
        }
    }
    let saved: usize = classes
        .iter()
        .filter(|(_, &k)| k >= 2)
        .map(|(prefix, &k)| (k - 1) * prefix.len())
        .sum();
    total - saved
}

#[test]
fn criterion_04_dedup_volume_exact() {
    // Hand instance: 50-token prefix shared by three suffixes 10/20/30.
    let prefix: Vec<Token> = (0..50).collect();
    let requests: Vec<Request> = [10usize, 20, 30]
        .iter()
        .enumerate()
        .map(|(i, &extra)| {
            let mut tokens = prefix.clone();
            tokens.extend((0..extra as Token).map(|t| 1000 * (i as Token + 1) + t));
            Request::with_tokens(format!("r{i}"), tokens)
        })
        .collect();
    let partition = trie_partition(&requests, 1).unwrap();
    assert_eq!(io_volume(&partition), 110);
    assert_eq!(partition.naive_volume(), 210);

    // 100 random prefix traces against the independent oracle.
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    for case in 0..100 {
        let n = rng.random_range(1..=64);
        let pool = rng.random_range(1..=4);
        let prefix_len = rng.random_range(8..64);
        let suffix_max = rng.random_range(1..48);
        let trace = generate_prefix_trace(n, 9000 + case, pool, prefix_len, suffix_max).unwrap();
        let min_share = rng.random_range(1..=8);
        let partition = trie_partition(&trace.requests, min_share).unwrap();
        let sequences: Vec<Vec<Token>> = trace
            .requests
            .iter()
            .map(|r| r.tokens().unwrap().to_vec())
            .collect();
        assert_eq!(
            io_volume(&partition),
            unique_token_volume(&sequences, min_share),
            "case {case}"
        );
    }
    println!("acceptance 4 PASS: dedup volume 110 vs 210 and 100 oracle matches");
}

/// Unpruned enumeration: minimum discrepancy over all partitions of `lens`
/// into exactly `groups` non-empty groups satisfying capacity and memory.
fn unpruned_min_discrepancy(lens: &[usize], groups: usize, config: &Config) -> Option<usize> {
    #[allow(clippy::too_many_arguments)]
    fn walk(
        lens: &[usize],
        item: usize,
        loads: &mut [usize],
        counts: &mut [usize],
        used: usize,
        groups: usize,
        config: &Config,
        best: &mut Option<usize>,
    ) {
        if item == lens.len() {
            if used == groups {
                let max = loads.iter().max().unwrap();
                let min = loads.iter().min().unwrap();
                let disc = max - min;
                if best.is_none() || disc < best.unwrap() {
                    *best = Some(disc);
                }
            }
            return;
        }
        for group in 0..(used + 1).min(groups) {
            let load = loads[group] + lens[item];
            let mem = load + (counts[group] + 1) * config.headroom;
            if load > config.capacity || mem > config.mem_cap {
                continue;
            }
            loads[group] = load;
            counts[group] += 1;
            walk(
                lens,
                item + 1,
                loads,
                counts,
                used.max(group + 1),
                groups,
                config,
                best,
            );
            loads[group] -= lens[item];
            counts[group] -= 1;
        }
    }
    let mut best = None;
    walk(
        lens,
        0,
        &mut vec![0; groups],
        &mut vec![0; groups],
        0,
        groups,
        config,
        &mut best,
    );
    best
}

#[test]
fn criterion_05_oracle_suite() {
    let start = Instant::now();
    let config = cfg(8192);
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut checked_unpruned = 0;
    for case in 0..200 {
        let n = rng.random_range(2..=12);
        let instance: Vec<(String, usize)> = (0..n)
            .map(|i| (format!("q{i:02}"), rng.random_range(1..=config.capacity)))
            .collect();
        let greedy = greedy_pack(&instance, &config).unwrap();
        let oracle = optimal_pack(&instance, &config, None).unwrap();

        assert!(
            plan_discrepancy(&greedy) >= oracle.discrepancy,
            "case {case}: greedy beat the oracle"
        );
        if greedy.group_count == oracle.plan.group_count {
            assert!(
                3 * greedy.max_load() <= 4 * oracle.max_load,
                "case {case}: greedy max load {} vs oracle {}",
                greedy.max_load(),
                oracle.max_load
            );
        }
        if n <= 10 {
            let mut lens: Vec<usize> = instance.iter().map(|(_, l)| *l).collect();
            lens.sort_unstable_by(|a, b| b.cmp(a));
            let expected =
                unpruned_min_discrepancy(&lens, oracle.plan.group_count, &config).unwrap();
            assert_eq!(oracle.discrepancy, expected, "case {case}");
            checked_unpruned += 1;
        }
    }
    let elapsed = start.elapsed();
    assert!(checked_unpruned > 0);
    assert!(
        elapsed.as_secs() < 300,
        "oracle suite took {elapsed:?}, budget 5 min"
    );
    println!(
        "acceptance 5 PASS: 200 oracle instances, {checked_unpruned} unpruned checks ({elapsed:?})"
    );
}

#[test]
fn criterion_06_solver_speed_gap() {
    let config = cfg(8192);
    let instances = heterogeneous_instances(200, 12, 606, &config);
    let bench = benchmark_solvers(&instances, &config).unwrap();
    assert!(
        bench.greedy_median_seconds * 100.0 <= bench.oracle_median_seconds,
        "heuristic median {}s vs oracle median {}s (speedup {:.0}x)",
        bench.greedy_median_seconds,
        bench.oracle_median_seconds,
        bench.speedup
    );
    println!(
        "acceptance 6 PASS: heuristic {:.2e}s vs oracle {:.2e}s median, {:.0}x",
        bench.greedy_median_seconds, bench.oracle_median_seconds, bench.speedup
    );
}

#[test]
fn criterion_07_lossless_merge() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut max_error = 0.0f64;
    let mut max_assoc = 0.0f64;
    for seed in 0..100u64 {
        let head_dim = 1 + (seed as usize % 16);
        let len = rng.random_range(2..=256);
        let problem = AttentionProblem::random(seed, head_dim, len);
        let reference = reference_attention(&problem).unwrap();

        let mut segmentations: Vec<Vec<usize>> = vec![vec![], vec![len / 2], vec![1], vec![len - 1]];
        // Capacity-style chunking, as produced for requests longer than a group.
        for capacity in [97usize, 150] {
            if len > capacity {
                segmentations.push((capacity..len).step_by(capacity).collect());
            }
        }
        // Random 2..=8-way splits.
        for _ in 0..5 {
            let ways = rng.random_range(2..=8usize.min(len));
            let mut cuts: Vec<usize> = (0..ways - 1).map(|_| rng.random_range(1..len)).collect();
            cuts.sort_unstable();
            cuts.dedup();
            segmentations.push(cuts);
        }

        for cuts in &segmentations {
            let merged = split_merge_attention(&problem, cuts).unwrap();
            let error = max_abs_diff(&merged, &reference);
            max_error = max_error.max(error);
            assert!(
                error <= 1e-10,
                "seed {seed} cuts {cuts:?}: error {error:.3e}"
            );
        }

        if len >= 3 {
            let (a, b) = (len / 3, 2 * len / 3);
            let pa = partial_attention(&problem, 0..a).unwrap();
            let pb = partial_attention(&problem, a..b).unwrap();
            let pc = partial_attention(&problem, b..len).unwrap();
            let left = finalize(&merge_partials(&merge_partials(&pa, &pb), &pc)).unwrap();
            let right = finalize(&merge_partials(&pa, &merge_partials(&pb, &pc))).unwrap();
            let error = max_abs_diff(&left, &right);
            max_assoc = max_assoc.max(error);
            assert!(error <= 1e-12, "seed {seed}: associativity {error:.3e}");
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 30, "merge suite took {elapsed:?}");
    println!(
        "acceptance 7 PASS: merge max error {max_error:.2e}, assoc {max_assoc:.2e} ({elapsed:?})"
    );
}

#[test]
fn criterion_08_layout_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    for case in 0..1000 {
        let n = rng.random_range(1..=16);
        let headroom = rng.random_range(0..=6);
        let page_size = *[3, 16, 128, 256].get(rng.random_range(0..4)).unwrap();
        let pool: Vec<Vec<Token>> = (0..2)
            .map(|_| {
                (0..rng.random_range(1..12))
                    .map(|_| rng.random_range(0..6))
                    .collect()
            })
            .collect();
        let mut seqs: Vec<(String, Vec<Token>)> = Vec::new();
        for i in 0..n {
            let mut tokens: Vec<Token> = if rng.random::<f64>() < 0.6 {
                pool[rng.random_range(0..pool.len())].clone()
            } else {
                Vec::new()
            };
            tokens.extend((0..rng.random_range(1..20)).map(|_| rng.random_range(0..6)));
            seqs.push((format!("r{i:02}"), tokens));
        }
        let requests: Vec<Request> = seqs
            .iter()
            .map(|(id, t)| Request::with_tokens(id.clone(), t.clone()))
            .collect();
        let paged = PagedStore::build(seqs.clone(), page_size).unwrap();
        let partition = trie_partition(&requests, 1).unwrap();
        let sources = identity_sources(&partition);
        let mut c = consolidate(&partition, &sources, &paged, headroom, None).unwrap();

        // Zero overlaps, exact read-back, copy volume identity.
        c.buffer.check().unwrap();
        assert_eq!(
            c.copy_plan.total_tokens(),
            io_volume(&partition),
            "case {case}"
        );
        let buffer = apply_copy_plan(&c.copy_plan, &paged, c.buffer.capacity).unwrap();
        for (id, tokens) in &seqs {
            assert_eq!(
                layout::read_back(&buffer, &c.table, id).unwrap(),
                *tokens,
                "case {case} request {id}"
            );
        }

        // Headroom amortization: exactly headroom appends per member, then
        // the next one signals.
        for (id, _) in &seqs {
            for _ in 0..headroom {
                assert!(matches!(
                    append_decode_token(&mut c.buffer, &mut c.table, id).unwrap(),
                    AppendOutcome::Appended { .. }
                ));
            }
            assert_eq!(
                append_decode_token(&mut c.buffer, &mut c.table, id).unwrap(),
                AppendOutcome::NeedsReconsolidation,
                "case {case} request {id}"
            );
        }
        c.buffer.check().unwrap();
    }
    println!("acceptance 8 PASS: 1000 randomized consolidations round-trip");
}

#[test]
fn criterion_09_regroup_frequency() {
    // Closed form: first t with 2 * t * drift >= 8192.
    for (drift, expected) in [(103usize, 40usize), (128, 32), (204, 21)] {
        let fired = (1..=100).find(|&t| should_regroup(drift, t, 8192)).unwrap();
        assert_eq!(fired, expected, "closed form for drift {drift}");
    }

    // Simulator: two singleton groups with a constant load gap regroup at
    // exactly the closed-form interval, repeatedly.
    for (drift, expected) in [(103usize, 40usize), (128, 32), (204, 21)] {
        let jsonl = format!(
            "{{\"id\":\"a\",\"prompt_len\":{}}}\n{{\"id\":\"b\",\"prompt_len\":4500}}",
            4500 + drift
        );
        let trace = packsim_core::trace::read_trace(jsonl.as_bytes(), "inline").unwrap();
        let config = Config {
            capacity: 8192,
            tile: 128,
            headroom: 512,
            ..Config::default()
        };
        let options = SimOptions::new(90, CostModel::kv_linear(128));
        let report = run_decode(&trace, &config, &options).unwrap();
        let steps = &report.summary.regroup_steps;
        assert!(!steps.is_empty(), "drift {drift} never fired");
        assert_eq!(steps[0], expected, "first interval, drift {drift}");
        for pair in steps.windows(2) {
            assert_eq!(pair[1] - pair[0], expected, "later interval, drift {drift}");
        }
        // Between regroups the measured drift is the constant gap.
        assert!(report.steps[1..expected]
            .iter()
            .all(|s| s.drift == drift));
    }
    println!("acceptance 9 PASS: regroup intervals 40/32/21 for drift 103/128/204");
}

#[test]
fn criterion_10_baseline_dominance() {
    let config = cfg(8192);

    // Skewed, length-only traces: packed utilization dominates per-request.
    for seed in 0..20 {
        let trace = generate_skewed_trace(300, seed, 0.6, 128, 4096).unwrap();
        let short = trace
            .requests
            .iter()
            .filter(|r| r.effective_len() < 128)
            .count();
        assert!((150..=250).contains(&short), "trace shape off: {short}");

        let cmp = compare_baselines(&trace, &config, 128).unwrap();
        let eta_packed = cmp.packed.eta_batch.unwrap();
        let eta_naive = cmp.per_request.eta_batch.unwrap();
        assert!(eta_packed >= eta_naive, "seed {seed}");
        let any_group_multi = cmp.packed.group_count < cmp.per_request.group_count;
        if any_group_multi {
            assert!(eta_packed > eta_naive, "seed {seed}: expected strict gain");
        }
        assert!(cmp.packed_dedup.io_volume <= cmp.packed.io_volume, "seed {seed}");
    }

    // Prefix traces: deduplication strictly reduces fetched tokens.
    for seed in 0..10 {
        let trace = generate_prefix_trace(64, seed, 2, 256, 128).unwrap();
        let cmp = compare_baselines(&trace, &config, 128).unwrap();
        assert!(cmp.dedup_active);
        assert!(
            cmp.packed_dedup.io_volume < cmp.packed.io_volume,
            "seed {seed}: dedup must strictly win on shared prefixes"
        );
        assert!(cmp.packed.eta_batch.unwrap() >= cmp.per_request.eta_batch.unwrap());
    }
    println!("acceptance 10 PASS: packed dominates per-request; dedup io <= naive io");
}
