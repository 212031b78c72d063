//! `diffsolve`: sweeps, latency arithmetic, traces, and graph surgery from
//! the command line.
//!
//! Exit codes: 0 success, 1 I/O error, 2 validation failure.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use diffsolve_core::bench::{
    latency_mod, latency_mono, run_sweep, truncation_study, HashProjectionEncoder, LatencyModel,
    SweepFixture,
};
use diffsolve_core::denoise::{
    GaussianDenoiser, GaussianFixture, LinearHead, SceneContext, TrajectoryShape,
};
use diffsolve_core::graph::{
    detect_repeats, extract_modules, generate_unrolled_fixture, load_graph, save_graph,
    validate_equivalence, FixtureSpec, ValidateConfig,
};
use diffsolve_core::pipeline::{export_trace, AnchorSpec, Planner, PlannerConfig, PlannerModels};
use diffsolve_core::schedule::VpSchedule;
use diffsolve_core::solver::SolverKind;

#[derive(Parser)]
#[command(
    name = "diffsolve",
    version,
    about = "Modular diffusion-sampling runtime"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solver x step-count sweep over seeded Gaussian scenes; writes CSV.
    Sweep(SweepArgs),
    /// Evaluate the planning-cycle latency models.
    Latency(LatencyArgs),
    /// Run one planning cycle and export the per-step trace as JSONL.
    Trace(TraceArgs),
    /// Dedicated vs truncated schedule comparison.
    Truncation(TruncationArgs),
    /// Computational-graph tooling.
    #[command(subcommand)]
    Graph(GraphCommand),
}

#[derive(Args)]
struct SweepArgs {
    /// Comma-separated step counts.
    #[arg(long, default_value = "3,5,7,10,15,20")]
    steps: String,
    /// Comma-separated solvers from {ddim, dpm1, dpm2}.
    #[arg(long, default_value = "ddim,dpm1,dpm2")]
    solvers: String,
    #[arg(long, default_value_t = 50)]
    scenes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Trajectory agents.
    #[arg(long, default_value_t = 33)]
    agents: usize,
    /// Trajectory timesteps.
    #[arg(long, default_value_t = 81)]
    horizon: usize,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Include the measured-latency column (non-deterministic bytes).
    #[arg(long, default_value_t = true)]
    measured: bool,
}

#[derive(Args)]
struct LatencyArgs {
    #[arg(long = "t-enc", default_value_t = 27.5)]
    t_enc: f64,
    #[arg(long = "t-dit", default_value_t = 2.3)]
    t_dit: f64,
    #[arg(long = "t-sol", default_value_t = 0.01)]
    t_sol: f64,
    #[arg(long, default_value_t = 10)]
    n: usize,
    /// mono or mod.
    #[arg(long)]
    mode: String,
}

#[derive(Args)]
struct TraceArgs {
    #[arg(long, default_value_t = 10)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 33)]
    agents: usize,
    #[arg(long, default_value_t = 81)]
    horizon: usize,
    /// JSON planner config; overrides --n and the solver defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TruncationArgs {
    #[arg(long, default_value_t = 10)]
    full: usize,
    #[arg(long, default_value_t = 3)]
    small: usize,
    #[arg(long, default_value_t = 8)]
    scenes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum GraphCommand {
    /// Generate a synthetic unrolled monolithic graph.
    Gen(GraphGenArgs),
    /// Detect the repeated weight-sharing regions.
    Detect(GraphPathArg),
    /// Extract encoder / core / head modules and the report.
    Split(GraphSplitArgs),
    /// Extract and validate numerical equivalence against the monolith.
    Check(GraphCheckArgs),
}

#[derive(Args)]
struct GraphGenArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 11)]
    copies: usize,
    #[arg(long = "encoder-size", default_value_t = 40)]
    encoder_size: usize,
    #[arg(long = "core-size", default_value_t = 12)]
    core_size: usize,
    /// Wire the context embedding into the head as well.
    #[arg(long, default_value_t = false)]
    head_reads_embedding: bool,
    /// Give this copy an unshared clone of one core weight.
    #[arg(long)]
    fork_copy: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GraphPathArg {
    #[arg(long)]
    graph: PathBuf,
}

#[derive(Args)]
struct GraphSplitArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long = "out-dir")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct GraphCheckArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long, default_value_t = 10)]
    trials: usize,
}

enum CliError {
    Io(String),
    Validation(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Io(_) => 1,
            CliError::Validation(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Io(m) | CliError::Validation(m) => m,
        }
    }
}

fn io_err(e: impl std::fmt::Display) -> CliError {
    CliError::Io(e.to_string())
}

fn validation(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

/// Graph toolkit errors are I/O only when the underlying cause is.
fn graph_err(e: diffsolve_core::graph::GraphError) -> CliError {
    match e {
        diffsolve_core::graph::GraphError::Io(e) => io_err(e),
        other => validation(other),
    }
}

fn parse_steps(text: &str) -> Result<Vec<usize>, CliError> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| validation(format!("bad step count '{s}'")))
        })
        .collect()
}

fn parse_solvers(text: &str) -> Result<Vec<SolverKind>, CliError> {
    text.split(',')
        .map(|s| {
            SolverKind::parse(s.trim()).ok_or_else(|| {
                validation(format!("unknown solver '{s}' (expect ddim, dpm1, dpm2)"))
            })
        })
        .collect()
}

fn cmd_sweep(args: SweepArgs) -> Result<(), CliError> {
    let steps = parse_steps(&args.steps)?;
    let kinds = parse_solvers(&args.solvers)?;
    if args.scenes == 0 {
        return Err(validation("need at least one scene"));
    }
    let shape = TrajectoryShape::new(args.agents, args.horizon, 4);
    let fixture = SweepFixture::gaussian(args.seed, args.scenes, shape).map_err(validation)?;
    let result = run_sweep(
        &fixture,
        &kinds,
        &steps,
        &PlannerConfig::default(),
        &LatencyModel::cpu_reference(),
        args.seed,
    )
    .map_err(validation)?;
    let file = std::fs::File::create(&args.out).map_err(io_err)?;
    result
        .write_csv(std::io::BufWriter::new(file), args.measured)
        .map_err(io_err)?;
    eprintln!(
        "wrote {} rows over {} scenes to {}",
        result.rows.len(),
        result.scenes,
        args.out.display()
    );
    Ok(())
}

fn cmd_latency(args: LatencyArgs) -> Result<(), CliError> {
    let model = LatencyModel::new(args.t_enc, args.t_dit, args.t_sol).map_err(validation)?;
    if args.n == 0 {
        return Err(validation("n must be >= 1"));
    }
    let latency_ms = match args.mode.as_str() {
        "mono" => latency_mono(&model, args.n),
        "mod" => latency_mod(&model, args.n),
        other => return Err(validation(format!("mode '{other}' is not mono or mod"))),
    };
    println!(
        "{}",
        serde_json::json!({
            "mode": args.mode,
            "n": args.n,
            "t_enc_ms": args.t_enc,
            "t_dit_ms": args.t_dit,
            "t_sol_ms": args.t_sol,
            "latency_ms": latency_ms,
        })
    );
    Ok(())
}

fn gaussian_planner(
    seed: u64,
    base_cfg: PlannerConfig,
    shape: TrajectoryShape,
) -> Result<(Planner, SceneContext), CliError> {
    let fixture = GaussianFixture {
        seed,
        shape: shape.dims(),
        variance: 0.25,
    };
    let den =
        GaussianDenoiser::from_fixture(&fixture, VpSchedule::default()).map_err(validation)?;
    let fp = den.fingerprint();
    let anchor: Vec<f64> = (0..shape.channels)
        .map(|ch| den.mean().at(&[0, 0, ch]))
        .collect();
    let embed_dim = 8;
    let models = PlannerModels::new(
        Arc::new(HashProjectionEncoder::new(4, embed_dim)),
        Arc::new(den),
        LinearHead::zeros(shape.timesteps * shape.channels + embed_dim),
        &[fp],
    );
    let cfg = PlannerConfig {
        anchor: AnchorSpec::ego_current(anchor),
        ..base_cfg
    };
    let planner = Planner::new(cfg, models, shape).map_err(validation)?;
    let ctx = SceneContext::seeded(seed, [8, 6, 6, 4, 2, 2]);
    Ok((planner, ctx))
}

fn cmd_trace(args: TraceArgs) -> Result<(), CliError> {
    let shape = TrajectoryShape::new(args.agents, args.horizon, 4);
    let base_cfg = match &args.config {
        Some(path) => PlannerConfig::from_json_file(path).map_err(validation)?,
        None => PlannerConfig {
            n_steps: args.n,
            ..PlannerConfig::default()
        },
    };
    let (planner, ctx) = gaussian_planner(args.seed, base_cfg, shape)?;
    let out = planner.plan(&ctx).map_err(validation)?;
    export_trace(&out.trace, &args.out, &planner.default_probes()).map_err(|e| match e {
        diffsolve_core::pipeline::PipelineError::Stage { message, .. }
            if message.contains("os error") =>
        {
            io_err(message)
        }
        other => io_err(other),
    })?;
    println!("{}", serde_json::to_string(&out.stats).map_err(io_err)?);
    Ok(())
}

fn cmd_truncation(args: TruncationArgs) -> Result<(), CliError> {
    let shape = TrajectoryShape::new(4, 21, 4);
    let fixture = SweepFixture::gaussian(args.seed, args.scenes, shape).map_err(validation)?;
    let cmp = truncation_study(&fixture, args.full, args.small).map_err(validation)?;
    println!("{}", serde_json::to_string_pretty(&cmp).map_err(io_err)?);
    Ok(())
}

fn cmd_graph(cmd: GraphCommand) -> Result<(), CliError> {
    match cmd {
        GraphCommand::Gen(args) => {
            let spec = FixtureSpec {
                seed: args.seed,
                n_copies: args.copies,
                encoder_size: args.encoder_size,
                core_size: args.core_size,
                head_reads_embedding: args.head_reads_embedding,
                fork_weight_in_copy: args.fork_copy,
                ..FixtureSpec::default()
            };
            let g = generate_unrolled_fixture(&spec).map_err(graph_err)?;
            save_graph(&g, &args.out).map_err(graph_err)?;
            eprintln!("wrote {} nodes to {}", g.nodes.len(), args.out.display());
            Ok(())
        }
        GraphCommand::Detect(args) => {
            let g = load_graph(&args.graph).map_err(graph_err)?;
            let det = detect_repeats(&g).map_err(graph_err)?;
            println!(
                "{}",
                serde_json::json!({
                    "regions": det.regions.len(),
                    "region_size": det.regions.first().map(|r| r.nodes.len()).unwrap_or(0),
                    "shared_weights": det.shared_weights,
                    "diagnostics": det.diagnostics,
                })
            );
            Ok(())
        }
        GraphCommand::Split(args) => {
            let g = load_graph(&args.graph).map_err(graph_err)?;
            let m = extract_modules(&g).map_err(graph_err)?;
            std::fs::create_dir_all(&args.out_dir).map_err(io_err)?;
            save_graph(&m.encoder, args.out_dir.join("encoder.json")).map_err(graph_err)?;
            save_graph(&m.core, args.out_dir.join("core.json")).map_err(graph_err)?;
            save_graph(&m.head, args.out_dir.join("head.json")).map_err(graph_err)?;
            let report = serde_json::to_string_pretty(&m.report).map_err(io_err)?;
            std::fs::write(args.out_dir.join("report.json"), &report).map_err(io_err)?;
            println!("{report}");
            Ok(())
        }
        GraphCommand::Check(args) => {
            let g = load_graph(&args.graph).map_err(graph_err)?;
            let m = extract_modules(&g).map_err(graph_err)?;
            let n_steps = m.copy_time_values.len() - 1;
            let report =
                validate_equivalence(&g, &m, n_steps, args.trials, &ValidateConfig::default())
                    .map_err(graph_err)?;
            println!("{}", serde_json::to_string_pretty(&report).map_err(io_err)?);
            if report.pass {
                Ok(())
            } else {
                Err(validation("equivalence thresholds exceeded"))
            }
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Sweep(args) => cmd_sweep(args),
        Command::Latency(args) => cmd_latency(args),
        Command::Trace(args) => cmd_trace(args),
        Command::Truncation(args) => cmd_truncation(args),
        Command::Graph(cmd) => cmd_graph(cmd),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
