//! `packsim`: pack heterogeneous request batches into balanced groups, plan
//! deduplicated KV layouts, simulate decode drift, and benchmark the greedy
//! solver against the exact one.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/processing error,
//! 3 verification failure.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use packsim_core::config::Config;
use packsim_core::grouping::{pack_with_splits, PackingPlan};
use packsim_core::merge::verify_random_problems;
use packsim_core::oracle::{benchmark_solvers, heterogeneous_instances, MAX_ORACLE_REQUESTS};
use packsim_core::prefix::{io_volume, pack_with_sharing};
use packsim_core::simulate::{
    compare_baselines, run_decode, select_capacity, BaselineComparison, CostModel, CostModelMode,
    PolicyMetrics, SimOptions,
};
use packsim_core::trace::{self, WorkloadTrace};
use packsim_core::{DEFAULT_MIN_SHARE, DEFAULT_PAGE_SIZE};

mod genspec;

#[derive(Parser)]
#[command(
    name = "packsim",
    version,
    about = "Packing scheduler and decode simulator for batched attention workloads"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pack a trace into balanced groups and write the plan as JSON.
    Pack(PackArgs),
    /// Run the decode-loop simulator and write step metrics as JSON and CSV.
    Simulate(SimulateArgs),
    /// Time the greedy solver against the exact branch-and-bound oracle.
    BenchSolver(BenchArgs),
    /// Check that split-merge attention is lossless on seeded problems.
    VerifyMerge(VerifyArgs),
}

#[derive(Args)]
#[group(id = "source", required = true, multiple = false)]
struct TraceSource {
    /// JSONL trace file, one request per line.
    #[arg(long, group = "source")]
    trace: Option<PathBuf>,
    /// Synthetic trace spec: `skewed:n=1000,seed=7[,short_frac=,short_max=,long_max=]`
    /// or `prefix:n=64,seed=1[,pool=,prefix_len=,suffix_max=]`.
    #[arg(long, group = "source")]
    gen: Option<String>,
}

#[derive(Args)]
struct ConfigArgs {
    /// Optional JSON config file; explicit flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Attention tile size in tokens [default: 128].
    #[arg(long)]
    tile: Option<usize>,
    /// Group capacity in tokens [default: 8192].
    #[arg(long)]
    capacity: Option<usize>,
    /// Per-group memory cap in tokens [default: effectively unbounded].
    #[arg(long)]
    mem_cap: Option<usize>,
    /// Suffix headroom in tokens reserved for decode growth [default: 32].
    #[arg(long)]
    headroom: Option<usize>,
    /// Seed for generators and simulated decode tokens [default: 0].
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Default, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    tile: Option<usize>,
    capacity: Option<usize>,
    mem_cap: Option<usize>,
    headroom: Option<usize>,
    seed: Option<u64>,
}

impl ConfigArgs {
    fn build(&self) -> Result<Config, CliError> {
        let file: ConfigFile = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    data_err(format!("cannot read config {}: {e}", path.display()))
                })?;
                serde_json::from_str(&text).map_err(|e| {
                    data_err(format!("malformed config {}: {e}", path.display()))
                })?
            }
            None => ConfigFile::default(),
        };
        let defaults = Config::default();
        Ok(Config {
            tile: self.tile.or(file.tile).unwrap_or(defaults.tile),
            capacity: self.capacity.or(file.capacity).unwrap_or(defaults.capacity),
            mem_cap: self.mem_cap.or(file.mem_cap).unwrap_or(defaults.mem_cap),
            headroom: self.headroom.or(file.headroom).unwrap_or(defaults.headroom),
            seed: self.seed.or(file.seed).unwrap_or(defaults.seed),
        })
    }
}

#[derive(Args)]
struct PackArgs {
    #[command(flatten)]
    source: TraceSource,
    #[command(flatten)]
    config: ConfigArgs,
    /// Deduplicate shared prefixes during packing (token-form traces only).
    #[arg(long)]
    dedup: bool,
    /// Minimum shareable prefix length in tokens.
    #[arg(long, default_value_t = DEFAULT_MIN_SHARE)]
    min_share: usize,
    /// Output path for the plan JSON.
    #[arg(long, default_value = "plan.json")]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    source: TraceSource,
    #[command(flatten)]
    config: ConfigArgs,
    /// Decode steps to simulate.
    #[arg(long, default_value_t = 32)]
    steps: usize,
    /// Physical page size of the source KV layout.
    #[arg(long, default_value_t = DEFAULT_PAGE_SIZE)]
    page_size: usize,
    /// Minimum shareable prefix length in tokens.
    #[arg(long, default_value_t = DEFAULT_MIN_SHARE)]
    min_share: usize,
    /// Disable prefix deduplication.
    #[arg(long)]
    no_dedup: bool,
    /// Analytic cost model for the makespan proxy.
    #[arg(long, value_parser = parse_cost_mode, default_value = "kv-linear")]
    cost_model: CostModelMode,
    /// Also evaluate per-request / packed / packed+dedup policies.
    #[arg(long)]
    compare: bool,
    /// Sweep these capacities and report the one minimizing the makespan
    /// proxy (comma separated), instead of simulating.
    #[arg(long, value_delimiter = ',')]
    select_capacity: Vec<usize>,
    #[arg(long, default_value = "report.json")]
    out_json: PathBuf,
    #[arg(long, default_value = "report.csv")]
    out_csv: PathBuf,
    /// Output path for the policy comparison (with --compare).
    #[arg(long, default_value = "compare.json")]
    out_compare: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Requests per instance (exact search caps at 14).
    #[arg(long, default_value_t = 12)]
    n: usize,
    /// Number of instances.
    #[arg(long, default_value_t = 200)]
    instances: usize,
    #[command(flatten)]
    config: ConfigArgs,
    /// Output path for the per-instance CSV.
    #[arg(long, default_value = "solver_bench.csv")]
    out: PathBuf,
    /// Optional output path for the JSON summary.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Zero timing fields in the JSON summary so reruns are byte-identical.
    #[arg(long)]
    reproducible: bool,
}

#[derive(Args)]
struct VerifyArgs {
    /// Number of seeded random problems.
    #[arg(long, default_value_t = 100)]
    seeds: u64,
    /// Max-abs tolerance for merged output versus the reference.
    #[arg(long, default_value_t = 1e-10)]
    tolerance: f64,
    /// Tolerance for merge-order independence.
    #[arg(long, default_value_t = 1e-12)]
    assoc_tolerance: f64,
}

fn parse_cost_mode(value: &str) -> Result<CostModelMode, String> {
    match value {
        "tile-quadratic" => Ok(CostModelMode::TileQuadratic),
        "kv-linear" => Ok(CostModelMode::KvLinear),
        _ => Err(format!(
            "unknown cost model {value:?}; expected tile-quadratic or kv-linear"
        )),
    }
}

enum CliError {
    Usage(String),
    Data(String),
    Verification(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Verification(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Verification(m) => m,
        }
    }
}

fn data_err(err: impl std::fmt::Display) -> CliError {
    CliError::Data(err.to_string())
}

fn load_source(source: &TraceSource, seed: u64) -> Result<WorkloadTrace, CliError> {
    match (&source.trace, &source.gen) {
        (Some(path), None) => trace::load_trace(path).map_err(data_err),
        (None, Some(spec)) => genspec::parse(spec, seed).map_err(CliError::Usage),
        _ => unreachable!("clap enforces exactly one source"),
    }
}

fn write_json(path: &PathBuf, value: &impl serde::Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(data_err)?;
    text.push('\n');
    std::fs::write(path, text)
        .map_err(|e| data_err(format!("cannot write {}: {e}", path.display())))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Pack(args) => cmd_pack(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::BenchSolver(args) => cmd_bench_solver(args),
        Command::VerifyMerge(args) => cmd_verify_merge(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("packsim: {}", err.message());
            ExitCode::from(err.code())
        }
    }
}

#[derive(serde::Serialize)]
struct PackReport {
    schema: u32,
    source: String,
    config: Config,
    dedup: bool,
    requests: usize,
    io_naive: usize,
    io_deduplicated: usize,
    plan: PackingPlan,
}

fn cmd_pack(args: PackArgs) -> Result<(), CliError> {
    let config = args.config.build()?;
    config.validate().map_err(data_err)?;
    let trace = load_source(&args.source, config.seed)?;
    let io_naive: usize = trace.requests.iter().map(|r| r.effective_len()).sum();

    let (plan, io_deduplicated, dedup) = if args.dedup {
        if !trace.has_tokens() {
            return Err(CliError::Data(
                "--dedup requires a token-form trace; this one is length-only".into(),
            ));
        }
        let shared =
            pack_with_sharing(&trace.requests, &config, args.min_share).map_err(data_err)?;
        let io: usize = shared.partitions.iter().map(io_volume).sum();
        (shared.plan, io, true)
    } else {
        let plan = pack_with_splits(&trace.packing_inputs(), &config).map_err(data_err)?;
        (plan, io_naive, false)
    };

    let report = PackReport {
        schema: 1,
        source: trace.metadata.source.clone(),
        config,
        dedup,
        requests: trace.len(),
        io_naive,
        io_deduplicated,
        plan,
    };
    write_json(&args.out, &report)?;
    println!(
        "packed {} requests into {} groups (discrepancy {}, eta {}) -> {}",
        report.requests,
        report.plan.group_count,
        report.plan.discrepancy,
        report
            .plan
            .eta_batch
            .map_or_else(|| "n/a".into(), |u| format!("{:.4}", u.value())),
        args.out.display()
    );
    Ok(())
}

fn policy_row(m: &PolicyMetrics) -> String {
    format!(
        "{:<14} {:>6} {:>10} {:>10} {:>12} {:>12} {:>12}",
        m.policy,
        m.group_count,
        m.eta_batch.map_or_else(|| "n/a".into(), |u| format!("{:.4}", u.value())),
        m.discrepancy,
        m.io_volume,
        m.makespan_tile,
        m.makespan_kv,
    )
}

fn print_comparison(cmp: &BaselineComparison) {
    println!(
        "{:<14} {:>6} {:>10} {:>10} {:>12} {:>12} {:>12}",
        "policy", "groups", "eta", "disc", "io_tokens", "mk_tile", "mk_kv"
    );
    println!("{}", policy_row(&cmp.per_request));
    println!("{}", policy_row(&cmp.packed));
    println!("{}", policy_row(&cmp.packed_dedup));
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), CliError> {
    if args.page_size == 0 {
        return Err(CliError::Usage("--page-size must be at least 1".into()));
    }
    let config = args.config.build()?;
    config.validate().map_err(data_err)?;
    let trace = load_source(&args.source, config.seed)?;
    let cost_model = CostModel {
        mode: args.cost_model,
        tile: config.tile,
    };

    if !args.select_capacity.is_empty() {
        let chosen =
            select_capacity(&trace, &cost_model, &args.select_capacity, &config).map_err(data_err)?;
        println!("selected capacity {chosen} from {:?}", args.select_capacity);
        return Ok(());
    }

    let mut options = SimOptions::new(args.steps, cost_model);
    options.page_size = args.page_size;
    options.min_share = args.min_share;
    options.dedup = !args.no_dedup;

    let report = run_decode(&trace, &config, &options).map_err(data_err)?;
    write_json(&args.out_json, &report)?;
    std::fs::write(&args.out_csv, report.to_csv())
        .map_err(|e| data_err(format!("cannot write {}: {e}", args.out_csv.display())))?;
    println!(
        "simulated {} steps over {} requests: {} regroups, {} reconsolidations, {} copied tokens -> {}, {}",
        report.summary.steps,
        report.summary.requests,
        report.summary.regroup_count,
        report.summary.reconsolidation_count,
        report.summary.copy_tokens_total,
        args.out_json.display(),
        args.out_csv.display(),
    );

    if args.compare {
        let cmp = compare_baselines(&trace, &config, args.min_share).map_err(data_err)?;
        print_comparison(&cmp);
        write_json(&args.out_compare, &cmp)?;
        println!("comparison -> {}", args.out_compare.display());
    }
    Ok(())
}

fn cmd_bench_solver(args: BenchArgs) -> Result<(), CliError> {
    if args.n > MAX_ORACLE_REQUESTS {
        return Err(CliError::Data(format!(
            "--n {} exceeds the exact-search cap of {MAX_ORACLE_REQUESTS}",
            args.n
        )));
    }
    let config = args.config.build()?;
    config.validate().map_err(data_err)?;
    let instances = heterogeneous_instances(args.instances, args.n, config.seed, &config);
    let mut bench = benchmark_solvers(&instances, &config).map_err(data_err)?;

    let mut csv = String::from(
        "instance,n,total_len,greedy_seconds,oracle_seconds,greedy_discrepancy,\
         oracle_discrepancy,greedy_max_load,oracle_max_load,greedy_groups,oracle_groups,\
         nodes_explored\n",
    );
    for row in &bench.rows {
        let _ = writeln!(
            csv,
            "{},{},{},{:.9},{:.9},{},{},{},{},{},{},{}",
            row.instance,
            row.n,
            row.total_len,
            row.greedy_seconds,
            row.oracle_seconds,
            row.greedy_discrepancy,
            row.oracle_discrepancy,
            row.greedy_max_load,
            row.oracle_max_load,
            row.greedy_groups,
            row.oracle_groups,
            row.nodes_explored,
        );
    }
    std::fs::write(&args.out, csv)
        .map_err(|e| data_err(format!("cannot write {}: {e}", args.out.display())))?;

    println!(
        "{} instances at n={}: greedy median {:.3e}s, oracle median {:.3e}s, speedup {:.0}x, greedy optimal on {}",
        bench.rows.len(),
        args.n,
        bench.greedy_median_seconds,
        bench.oracle_median_seconds,
        bench.speedup,
        bench.greedy_optimal_count,
    );

    if let Some(json_path) = &args.json {
        #[derive(serde::Serialize)]
        struct BenchSummary {
            schema: u32,
            n: usize,
            instances: usize,
            greedy_median_seconds: f64,
            oracle_median_seconds: f64,
            speedup: f64,
            greedy_optimal_count: usize,
        }
        if args.reproducible {
            bench.greedy_median_seconds = 0.0;
            bench.oracle_median_seconds = 0.0;
            bench.speedup = 0.0;
        }
        write_json(
            json_path,
            &BenchSummary {
                schema: 1,
                n: args.n,
                instances: bench.rows.len(),
                greedy_median_seconds: bench.greedy_median_seconds,
                oracle_median_seconds: bench.oracle_median_seconds,
                speedup: bench.speedup,
                greedy_optimal_count: bench.greedy_optimal_count,
            },
        )?;
    }
    Ok(())
}

fn cmd_verify_merge(args: VerifyArgs) -> Result<(), CliError> {
    let report = verify_random_problems(args.seeds, args.tolerance, args.assoc_tolerance)
        .map_err(data_err)?;
    println!(
        "checked {} split-merge cases over {} seeds: max error {:.3e}, max assoc error {:.3e}",
        report.cases, args.seeds, report.max_error, report.max_assoc_error
    );
    if report.passed() {
        Ok(())
    } else {
        for failure in report.failures.iter().take(10) {
            eprintln!(
                "  seed {} segmentation {:?}: error {:.3e}",
                failure.seed, failure.segmentation, failure.error
            );
        }
        Err(CliError::Verification(format!(
            "{} of {} cases exceeded tolerance {:.1e}",
            report.failures.len(),
            report.cases,
            args.tolerance
        )))
    }
}
