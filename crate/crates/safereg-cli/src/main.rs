//! `safereg`: run safe-region learning experiments, validate causal graphs
//! against recorded logs, and estimate intervention-effect priors from
//! passive data.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration or input error,
//! 3 graph inconsistent with the data, 4 effect not identifiable.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Parser, Subcommand};

use safereg_core::config::{content_hash, ConfigError, RunConfig};
use safereg_core::dataset::ObservationDataset;
use safereg_core::graph::CausalGraph;
use safereg_core::grid::ControlGrid;
use safereg_core::hsic;
use safereg_core::learner::{initial_region, run_col};
use safereg_core::prior::{estimate_prior, PriorError, PriorParams};
use safereg_core::report::{self, SeedSummary};
use safereg_core::spec::{parse_spec, SpecFormula};

const EXIT_INCONSISTENT: u8 = 3;

#[derive(Parser)]
#[command(
    name = "safereg",
    version,
    about = "Safe-region identification for controlled systems",
    after_help = "Set SAFEREG_LOG (error|warn|info|debug|trace) to control logging."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the seeded experiments described by a config file and write
    /// per-seed traces, region grids, and summary statistics.
    Run {
        /// Experiment config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Output directory override (default: the config's output_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seeds override, comma separated (default: the config's seeds).
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        seeds: Option<Vec<u64>>,
        /// Worker threads (default: available CPU parallelism).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Test every conditional independence a causal graph implies against a
    /// recorded log; prints a verdict table plus machine-readable JSON.
    ValidateGraph {
        /// Causal graph (JSON).
        #[arg(long)]
        graph: PathBuf,
        /// Observation log (CSV with a header row).
        #[arg(long)]
        data: PathBuf,
        /// Largest conditioning set to test.
        #[arg(long, default_value_t = 1)]
        max_conditioning: usize,
        /// Permutations per independence test.
        #[arg(long, default_value_t = 500)]
        permutations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the JSON report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate the intervention-effect model from a passive log and write
    /// it with the initial safe region it certifies.
    EstimatePrior {
        /// Causal graph (JSON).
        #[arg(long)]
        graph: PathBuf,
        /// Observation log (CSV with a header row).
        #[arg(long)]
        data: PathBuf,
        /// Specification text, e.g. "always[H=1](Y < 50)".
        #[arg(long)]
        spec: String,
        /// Grid resolution per control dimension.
        #[arg(long, default_value_t = 50)]
        resolution: usize,
        /// Safety threshold for the initial region.
        #[arg(long, default_value_t = 0.8)]
        delta: f64,
        /// Kernel bandwidth in normalized control units.
        #[arg(long, default_value_t = 0.1)]
        bandwidth: f64,
        /// Minimum effective sample count for a point to count as supported.
        #[arg(long, default_value_t = 5.0)]
        support_threshold: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for effect_model.json and initial_region.csv.
        #[arg(long)]
        out: PathBuf,
    },
}

enum CliError {
    Config(String),
    Runtime(String),
    NotIdentifiable,
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Config(_) => 2,
            CliError::NotIdentifiable => 4,
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => m.clone(),
            CliError::NotIdentifiable => {
                "the intervention effect is not identifiable from this graph \
                 (no admissible adjustment set over observed variables)"
                    .to_string()
            }
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(err: ConfigError) -> Self {
        CliError::Config(err.to_string())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("SAFEREG_LOG", "warn"))
        .init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {}", err.message());
            ExitCode::from(err.code())
        }
    }
}

fn dispatch(command: Command) -> Result<u8, CliError> {
    match command {
        Command::Run {
            config,
            out,
            seeds,
            jobs,
        } => cmd_run(&config, out, seeds, jobs),
        Command::ValidateGraph {
            graph,
            data,
            max_conditioning,
            permutations,
            seed,
            out,
        } => cmd_validate_graph(&graph, &data, max_conditioning, permutations, seed, out),
        Command::EstimatePrior {
            graph,
            data,
            spec,
            resolution,
            delta,
            bandwidth,
            support_threshold,
            seed,
            out,
        } => cmd_estimate_prior(
            &graph,
            &data,
            &spec,
            resolution,
            delta,
            bandwidth,
            support_threshold,
            seed,
            &out,
        ),
    }
}

fn load_graph(path: &Path) -> Result<CausalGraph, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read `{}`: {e}", path.display())))?;
    CausalGraph::from_json_str(&text)
        .map_err(|e| CliError::Config(format!("malformed graph JSON in `{}`: {e}", path.display())))
}

fn load_dataset(path: &Path, schema: &[String]) -> Result<ObservationDataset, CliError> {
    safereg_core::dataset::load_csv(path, schema)
        .map_err(|e| CliError::Config(format!("cannot load `{}`: {e}", path.display())))
}

fn runtime(err: impl std::fmt::Display) -> CliError {
    CliError::Runtime(err.to_string())
}

fn cmd_run(
    config_path: &Path,
    out: Option<PathBuf>,
    seeds: Option<Vec<u64>>,
    jobs: Option<usize>,
) -> Result<u8, CliError> {
    let mut config = RunConfig::load(config_path)?;
    if let Some(seeds) = seeds {
        config.seeds = seeds;
    }
    config.validate()?;
    let hash = config.hash();
    config.anchor(config_path.parent().unwrap_or(Path::new(".")));
    if let Some(out) = out {
        config.output_dir = out.display().to_string();
    }

    let graph = load_graph(Path::new(&config.graph))?;
    let spec = parse_spec(&config.spec).expect("spec was validated");
    let out_dir = PathBuf::from(&config.output_dir);
    std::fs::create_dir_all(&out_dir).map_err(runtime)?;

    let jobs = jobs
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
        .clamp(1, config.seeds.len());
    log::info!(
        "running {} seeds on {jobs} workers (config {})",
        config.seeds.len(),
        &hash[..12]
    );

    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<SeedSummary, CliError>>>> =
        Mutex::new((0..config.seeds.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= config.seeds.len() {
                    break;
                }
                let outcome = run_one_seed(&config, &graph, &spec, &hash, &out_dir, config.seeds[i]);
                slots.lock().expect("result lock")[i] = Some(outcome);
            });
        }
    });

    let mut summaries = Vec::with_capacity(config.seeds.len());
    for slot in slots.into_inner().expect("result lock") {
        summaries.push(slot.expect("worker filled its slot")?);
    }
    for summary in &summaries {
        println!(
            "seed {}: lambda_final={:.4} unsafe_to_converge={} interventions={} spent={:.2}",
            summary.seed,
            summary.lambda_final,
            summary
                .unsafe_to_converge
                .map_or_else(|| "n/a".to_string(), |n| n.to_string()),
            summary.interventions,
            summary.spent,
        );
    }
    let aggregate = report::aggregate(&summaries, &hash).map_err(runtime)?;
    report::write_aggregate(&out_dir, &aggregate).map_err(runtime)?;
    println!(
        "aggregate over {} runs: lambda_mean={:.4} lambda_std={:.4}{}",
        aggregate.runs,
        aggregate.lambda_mean,
        aggregate.lambda_std,
        match (
            aggregate.unsafe_to_converge_mean,
            aggregate.unsafe_to_converge_std
        ) {
            (Some(mean), Some(std)) =>
                format!(" unsafe_to_converge_mean={mean:.2} unsafe_to_converge_std={std:.2}"),
            _ => String::new(),
        }
    );
    println!("wrote {}", out_dir.join("summary.json").display());
    Ok(0)
}

fn run_one_seed(
    config: &RunConfig,
    graph: &CausalGraph,
    spec: &SpecFormula,
    hash: &str,
    out_dir: &Path,
    seed: u64,
) -> Result<SeedSummary, CliError> {
    let mut env = config.environment.build(seed)?;
    let mut col = config.col.clone();
    col.seed = seed;
    log::info!("seed {seed}: starting");
    let trace = run_col(&col, env.as_mut(), graph, spec)
        .map_err(|e| CliError::Runtime(format!("seed {seed}: {e}")))?;
    log::info!(
        "seed {seed}: {} interventions, final lambda {:.4}",
        trace.records.len(),
        trace.final_lambda()
    );
    let names = trace.final_region.grid.names().to_vec();
    report::write_run_outputs(
        out_dir,
        &trace,
        &names,
        hash,
        seed,
        col.convergence_epsilon,
        col.convergence_patience,
    )
    .map_err(runtime)
}

fn cmd_validate_graph(
    graph_path: &Path,
    data_path: &Path,
    max_conditioning: usize,
    permutations: usize,
    seed: u64,
    out: Option<PathBuf>,
) -> Result<u8, CliError> {
    let graph = load_graph(graph_path)?;
    let schema = graph.visible_names();
    let dataset = load_dataset(data_path, &schema)?;
    let checks = hsic::validate_graph(&dataset, &graph, max_conditioning, permutations, seed)
        .map_err(runtime)?;

    println!(
        "{:<32} {:>12} {:>9}  verdict",
        "independence", "statistic", "p-value"
    );
    for check in &checks {
        let given = check
            .independence
            .given
            .iter()
            .cloned()
            .collect::<Vec<_>>()
            .join(", ");
        let relation = format!(
            "{} _||_ {} | {{{given}}}",
            check.independence.a, check.independence.b
        );
        println!(
            "{relation:<32} {:>12.6} {:>9.4}  {}",
            check.statistic,
            check.p_value,
            if check.consistent {
                "consistent"
            } else {
                "REJECTED"
            }
        );
    }
    let all_consistent = checks.iter().all(|c| c.consistent);
    let document = serde_json::json!({
        "graph": graph_path.display().to_string(),
        "data": data_path.display().to_string(),
        "max_conditioning": max_conditioning,
        "permutations": permutations,
        "seed": seed,
        "checks": checks,
        "all_consistent": all_consistent,
    });
    let rendered = report::render_json(&document);
    print!("{rendered}");
    if let Some(out) = out {
        std::fs::write(&out, &rendered).map_err(runtime)?;
        println!("wrote {}", out.display());
    }
    Ok(if all_consistent { 0 } else { EXIT_INCONSISTENT })
}

#[allow(clippy::too_many_arguments)]
fn cmd_estimate_prior(
    graph_path: &Path,
    data_path: &Path,
    spec_text: &str,
    resolution: usize,
    delta: f64,
    bandwidth: f64,
    support_threshold: f64,
    seed: u64,
    out: &Path,
) -> Result<u8, CliError> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(CliError::Config(format!(
            "config field `delta`: must be in (0, 1), got {delta}"
        )));
    }
    let graph = load_graph(graph_path)?;
    let spec = parse_spec(spec_text)
        .map_err(|e| CliError::Config(format!("config field `spec`: {e}")))?;
    let schema = graph.visible_names();
    let dataset = load_dataset(data_path, &schema)?;

    let controls = graph.control_names();
    if controls.is_empty() {
        return Err(CliError::Config(
            "the graph declares no control variables".to_string(),
        ));
    }
    let domains: Vec<[f64; 2]> = controls
        .iter()
        .map(|name| {
            graph.domain(name).ok_or_else(|| {
                CliError::Config(format!("control `{name}` has no declared domain"))
            })
        })
        .collect::<Result<_, _>>()?;
    let grid = ControlGrid::new(&controls, &domains, resolution)
        .map_err(|e| CliError::Config(format!("config field `resolution`: {e}")))?;

    let params = PriorParams {
        bandwidth,
        support_threshold,
        seed,
        ..PriorParams::default()
    };
    let model = estimate_prior(&dataset, &graph, &controls, &spec, &grid, &params).map_err(
        |e| match e {
            PriorError::NotIdentifiable => CliError::NotIdentifiable,
            other => CliError::Runtime(other.to_string()),
        },
    )?;

    let settings = serde_json::json!({
        "graph": graph.to_spec(),
        "spec": spec_text,
        "resolution": resolution,
        "delta": delta,
        "params": params,
    });
    let hash = content_hash(&settings);
    std::fs::create_dir_all(out).map_err(runtime)?;

    let model_path = out.join("effect_model.json");
    let document = serde_json::json!({
        "config": hash,
        "seed": seed,
        "model": model.to_json(),
    });
    std::fs::write(&model_path, report::render_json(&document)).map_err(runtime)?;

    let region = initial_region(&model, delta, 0.0);
    let region_path = out.join("initial_region.csv");
    std::fs::write(&region_path, report::render_region_csv(&region, &hash, seed))
        .map_err(runtime)?;

    let supported = model.support.iter().filter(|s| **s).count();
    println!(
        "estimated effect over {} grid points ({} supported); initial region holds \
         {} points (lambda {:.4})",
        grid.len(),
        supported,
        region.member_count(),
        region.lambda
    );
    println!("wrote {} and {}", model_path.display(), region_path.display());
    Ok(0)
}
