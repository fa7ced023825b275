//! `bandpo`: bound queries, curve export, table management, oracle
//! verification and bandit simulation.
//!
//! Exit codes: 0 success, 1 computation or I/O failure, 2 invalid arguments.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bandpo::oracle::run_verification;
use bandpo::sim::{run_training, BanditTask, TrainConfig, TrainConfigFile};
use bandpo::solver::solve_bounds;
use bandpo::table::{build_table, BoundTable};
use bandpo::{ClipMode, DivergenceKind, GridSpec, RatioBounds, SolverConfig, Spacing, TrustRegion};

#[derive(Parser)]
#[command(name = "bandpo", version, about = "Probability-aware ratio clipping bounds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the ratio bounds for one old probability.
    Bounds(BoundsArgs),
    /// Write bound curves over a probability grid as CSV.
    Curve(CurveArgs),
    /// Precompute a bound table and save it.
    TableBuild(TableBuildArgs),
    /// Print a table's header, or query it with --p.
    TableInspect(TableInspectArgs),
    /// Compare scalar bounds against the full-simplex oracle.
    Verify(VerifyArgs),
    /// Train a softmax bandit policy and write per-step metrics.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct SolverArgs {
    /// Bisection bracket-width tolerance.
    #[arg(long, default_value_t = 1e-10)]
    tolerance: f64,
}

impl SolverArgs {
    fn config(&self) -> Result<SolverConfig, CliError> {
        SolverConfig::new(self.tolerance, SolverConfig::default().max_iterations).map_err(usage)
    }
}

#[derive(Args)]
struct BoundsArgs {
    /// Divergence: kl, tv or chi2.
    #[arg(value_name = "DIVERGENCE")]
    divergence_pos: Option<String>,
    /// Trust-region radius.
    #[arg(value_name = "DELTA")]
    delta_pos: Option<f64>,
    /// Old probability of the action.
    #[arg(value_name = "P")]
    p_pos: Option<f64>,
    #[arg(long)]
    divergence: Option<String>,
    #[arg(long, allow_negative_numbers = true)]
    delta: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    p: Option<f64>,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long, default_value_t = 1000)]
    points: usize,
    /// Grid spacing: linear, log or logit.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    min_p: Option<f64>,
    #[arg(long)]
    max_p: Option<f64>,
}

#[derive(Args)]
struct CurveArgs {
    /// Comma-separated divergences, e.g. kl,tv,chi2.
    #[arg(value_name = "DIVERGENCES")]
    divergence_pos: Option<String>,
    #[arg(value_name = "DELTA")]
    delta_pos: Option<f64>,
    #[arg(long)]
    divergence: Option<String>,
    #[arg(long, allow_negative_numbers = true)]
    delta: Option<f64>,
    #[command(flatten)]
    grid: GridArgs,
    /// Lower fixed-clip reference: column 1 - eps_low.
    #[arg(long, default_value_t = 0.2)]
    eps_low: f64,
    /// Upper fixed-clip reference: column 1 + eps_high.
    #[arg(long, default_value_t = 0.28)]
    eps_high: f64,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Args)]
struct TableBuildArgs {
    #[arg(value_name = "DIVERGENCE")]
    divergence_pos: Option<String>,
    #[arg(value_name = "DELTA")]
    delta_pos: Option<f64>,
    #[arg(long)]
    divergence: Option<String>,
    #[arg(long, allow_negative_numbers = true)]
    delta: Option<f64>,
    #[arg(long, default_value_t = 4096)]
    points: usize,
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    min_p: Option<f64>,
    #[arg(long)]
    max_p: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Args)]
struct TableInspectArgs {
    /// Table file written by table-build.
    path: PathBuf,
    /// Query the table at this probability.
    #[arg(long)]
    p: Option<f64>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    cases: usize,
    /// Also write the full JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Offset added to every scalar bound, to exercise the failure path.
    #[arg(long, hide = true, default_value_t = 0.0, allow_negative_numbers = true)]
    inject_fault: f64,
}

#[derive(Args)]
struct SimulateArgs {
    /// Clip mode, e.g. clip:0.2, clip:0.2:0.28, band:kl:0.05, relaxed-band:kl:0.05:0.28.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// TOML file with training settings; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// Per-step metrics as JSON lines; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    tolerance: Option<f64>,
}

enum CliError {
    Usage(String),
    Run(bandpo::Error),
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

impl From<bandpo::Error> for CliError {
    fn from(e: bandpo::Error) -> CliError {
        CliError::Run(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> CliError {
        CliError::Run(e.into())
    }
}

/// Shortest representation that parses back to the same float.
fn num(x: f64) -> String {
    format!("{x:?}")
}

fn pick<T>(name: &str, positional: Option<T>, flag: Option<T>) -> Result<T, CliError> {
    match (positional, flag) {
        (Some(v), None) | (None, Some(v)) => Ok(v),
        (Some(_), Some(_)) => Err(usage(format!("{name} given both positionally and as --{name}"))),
        (None, None) => Err(usage(format!("missing {name}"))),
    }
}

fn trust_region(kind: &str, delta: f64) -> Result<TrustRegion, CliError> {
    let kind: DivergenceKind = kind.parse().map_err(usage)?;
    TrustRegion::new(kind, delta).map_err(usage)
}

fn check_p(p: f64) -> Result<f64, CliError> {
    if p > 0.0 && p < 1.0 {
        Ok(p)
    } else {
        Err(usage(format!("p must lie in (0, 1), got {p}")))
    }
}

fn grid_spec(
    points: usize,
    grid: Option<&str>,
    min_p: Option<f64>,
    max_p: Option<f64>,
    base: GridSpec,
) -> Result<GridSpec, CliError> {
    let spacing = match grid {
        Some(s) => s.parse::<Spacing>().map_err(usage)?,
        None => base.spacing,
    };
    let spec = GridSpec {
        min_p: min_p.unwrap_or(base.min_p),
        max_p: max_p.unwrap_or(base.max_p),
        points,
        spacing,
    };
    spec.validate().map_err(usage)?;
    Ok(spec)
}

fn write_output(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => std::io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn print_bounds(p: f64, b: &RatioBounds) {
    println!(
        "p={} lower={} upper={} lower_saturated={} upper_saturated={}",
        num(p),
        num(b.lower),
        num(b.upper),
        b.lower_saturated,
        b.upper_saturated
    );
}

fn cmd_bounds(args: BoundsArgs) -> Result<(), CliError> {
    let kind = pick("divergence", args.divergence_pos, args.divergence)?;
    let delta = pick("delta", args.delta_pos, args.delta)?;
    let p = check_p(pick("p", args.p_pos, args.p)?)?;
    let tr = trust_region(&kind, delta)?;
    let cfg = args.solver.config()?;
    print_bounds(p, &solve_bounds(&tr, p, &cfg)?);
    Ok(())
}

fn cmd_curve(args: CurveArgs) -> Result<(), CliError> {
    let kinds = pick("divergence", args.divergence_pos, args.divergence)?;
    let delta = pick("delta", args.delta_pos, args.delta)?;
    let regions = kinds
        .split(',')
        .map(|k| trust_region(k.trim(), delta))
        .collect::<Result<Vec<_>, _>>()?;
    if !(args.eps_low > 0.0 && args.eps_low < 1.0) || !(args.eps_high > 0.0) {
        return Err(usage("eps-low must lie in (0, 1) and eps-high must be > 0"));
    }
    let base = GridSpec {
        min_p: 1e-3,
        max_p: 0.999,
        points: args.grid.points,
        spacing: Spacing::Linear,
    };
    let spec = grid_spec(
        args.grid.points,
        args.grid.grid.as_deref(),
        args.grid.min_p,
        args.grid.max_p,
        base,
    )?;
    let cfg = args.solver.config()?;
    let grid = spec.generate()?;
    let columns = regions
        .iter()
        .map(|tr| bandpo::solver::batch_solve(tr, &grid, &cfg))
        .collect::<Result<Vec<_>, _>>()?;

    let mut header = vec!["p".to_string()];
    for tr in &regions {
        header.push(format!("{}_lower", tr.kind()));
        header.push(format!("{}_upper", tr.kind()));
    }
    header.extend(["simplex_lower", "simplex_upper", "clip_lower", "clip_upper"].map(String::from));
    for tr in &regions {
        header.push(format!("{}_variation_lower", tr.kind()));
        header.push(format!("{}_variation_upper", tr.kind()));
    }
    header.extend(["simplex_variation_lower", "simplex_variation_upper"].map(String::from));

    let mut text = header.join(",");
    text.push('\n');
    for (i, &p) in grid.iter().enumerate() {
        let mut row = vec![num(p)];
        for col in &columns {
            row.push(num(col[i].lower));
            row.push(num(col[i].upper));
        }
        row.extend([0.0, 1.0 / p, 1.0 - args.eps_low, 1.0 + args.eps_high].map(num));
        for col in &columns {
            row.push(num((col[i].lower - 1.0) * p));
            row.push(num((col[i].upper - 1.0) * p));
        }
        row.extend([-p, 1.0 - p].map(num));
        text.push_str(&row.join(","));
        text.push('\n');
    }
    write_output(args.out.as_deref(), &text)
}

fn cmd_table_build(args: TableBuildArgs) -> Result<(), CliError> {
    let kind = pick("divergence", args.divergence_pos, args.divergence)?;
    let delta = pick("delta", args.delta_pos, args.delta)?;
    let tr = trust_region(&kind, delta)?;
    let spec = grid_spec(
        args.points,
        args.grid.as_deref(),
        args.min_p,
        args.max_p,
        GridSpec::default(),
    )?;
    let cfg = args.solver.config()?;
    let table = build_table(&tr, &spec, &cfg)?;
    table.save(&args.out)?;
    println!(
        "wrote {} ({} points, {} grid over [{}, {}])",
        args.out.display(),
        table.len(),
        spec.spacing,
        num(spec.min_p),
        num(spec.max_p)
    );
    Ok(())
}

fn describe(table: &BoundTable) -> String {
    let spec = table.spec();
    let mut s = String::new();
    let _ = writeln!(s, "divergence: {}", table.kind());
    let _ = writeln!(s, "delta: {}", num(table.delta()));
    let _ = writeln!(s, "points: {}", table.len());
    let _ = writeln!(s, "spacing: {}", spec.spacing);
    let _ = writeln!(s, "min_p: {}", num(spec.min_p));
    let _ = writeln!(s, "max_p: {}", num(spec.max_p));
    let n = table.len();
    for i in [0, n / 2, n - 1] {
        let _ = writeln!(
            s,
            "row {i}: p={} lower={} upper={}",
            num(table.grid()[i]),
            num(table.lowers()[i]),
            num(table.uppers()[i])
        );
    }
    s
}

fn cmd_table_inspect(args: TableInspectArgs) -> Result<(), CliError> {
    let table = BoundTable::load(&args.path)?;
    match args.p {
        Some(p) => print_bounds(p, &table.query(check_p(p)?)?),
        None => print!("{}", describe(&table)),
    }
    Ok(())
}

fn cmd_verify(args: VerifyArgs) -> Result<bool, CliError> {
    if args.cases == 0 {
        return Err(usage("cases must be positive"));
    }
    let report = run_verification(args.seed, args.cases, args.inject_fault)?;
    for case in &report.cases {
        println!(
            "case {:>2} {:<4} V={:<2} p={:.6} delta={} residual={:.3e} spread={:.3e} {}",
            case.case,
            case.kind,
            case.size,
            case.p,
            case.delta,
            case.residual,
            case.spread,
            if case.pass { "ok" } else { "FAIL" }
        );
    }
    let verdict = if report.all_passed() { "PASS" } else { "FAIL" };
    println!(
        "{verdict} {}/{} max_residual={:.3e} max_spread={:.3e}",
        report.passed(),
        report.cases.len(),
        report.max_residual,
        report.max_spread
    );
    if let Some(path) = &args.out {
        let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Usage(e.to_string()))?;
        std::fs::write(path, json + "\n")?;
    }
    Ok(report.all_passed())
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), CliError> {
    let mut cfg = TrainConfig::new(ClipMode::Band(TrustRegion::new(DivergenceKind::Kl, 0.05)?));
    if let Some(path) = &args.config {
        let file = TrainConfigFile::load(path).map_err(usage)?;
        file.apply(&mut cfg).map_err(usage)?;
    }
    if let Some(mode) = &args.mode {
        cfg.clip_mode = mode.parse().map_err(usage)?;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.steps {
        cfg.outer_steps = v;
    }
    if let Some(v) = args.group_size {
        cfg.group_size = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.beta {
        cfg.beta = v;
    }
    if let Some(v) = args.tolerance {
        cfg.solver = SolverConfig::new(v, cfg.solver.max_iterations).map_err(usage)?;
    }
    cfg.validate().map_err(usage)?;

    let metrics = run_training(&BanditTask::default_tail(), &cfg)?;
    let s = metrics.summary();
    let summary = format!(
        "mode={} seed={} final_entropy={} final_mean_reward={} final_expected_reward={} clip_rate={} tail_cliphigh_fraction={}",
        cfg.clip_mode,
        cfg.seed,
        num(s.final_entropy),
        num(s.final_mean_reward),
        num(s.final_expected_reward),
        num(s.overall_clip_rate),
        num(s.tail_cliphigh_fraction)
    );
    match &args.out {
        Some(path) => {
            std::fs::write(path, metrics.to_jsonl())?;
            println!("{summary}");
        }
        None => {
            write_output(None, &metrics.to_jsonl())?;
            eprintln!("{summary}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Bounds(a) => cmd_bounds(a),
        Command::Curve(a) => cmd_curve(a),
        Command::TableBuild(a) => cmd_table_build(a),
        Command::TableInspect(a) => cmd_table_inspect(a),
        Command::Verify(a) => match cmd_verify(a) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(1),
            Err(e) => Err(e),
        },
        Command::Simulate(a) => cmd_simulate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
