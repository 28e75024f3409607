//! Command-line front end: convergence tables, long-horizon error-growth
//! series, and single-step diagnostics for the PHBVM/EPHBVM integrators on
//! the built-in benchmark problems.
//!
//! Exit codes: 0 on success, 2 on configuration errors, 3 on solver
//! failures. `PHBVM_THREADS` caps the number of worker threads used for
//! independent table cells (default: all logical processors).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use phbvm::casimir::step_with_casimir;
use phbvm::driver::{
    convergence_table, growth_study, ExperimentRecord, GrowthSeries, Method, MethodSpec,
};
use phbvm::poisson::{preset, ProblemPreset};
use phbvm::solve::{step, SolverConfig, SolverKind};
use phbvm::Error;

#[derive(Parser)]
#[command(
    name = "phbvm",
    version,
    about = "Energy- and Casimir-conserving integrators for Poisson systems",
    after_help = "Environment: PHBVM_THREADS caps parallelism across table cells."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convergence table: one row per steps-per-period count.
    Table(TableArgs),
    /// Per-period error growth over a long horizon.
    Growth(GrowthArgs),
    /// Run a single step and print its diagnostics.
    StepDebug(StepDebugArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodChoice {
    Gauss,
    Phbvm,
    Ephbvm,
}

#[derive(Clone, Copy, ValueEnum)]
enum SolverChoice {
    FixedPoint,
    Newton,
    Blended,
}

#[derive(Clone, Copy, ValueEnum, PartialEq)]
enum Format {
    Csv,
    Json,
}

#[derive(Args)]
struct SolverArgs {
    /// Nonlinear solver for the stage equations.
    #[arg(long, value_enum, default_value_t = SolverChoice::Blended)]
    solver: SolverChoice,
    /// Residual tolerance (max-norm of the stage residual).
    #[arg(long, default_value_t = 1e-14)]
    tol: f64,
    /// Iteration cap per step.
    #[arg(long, default_value_t = 100)]
    max_iter: usize,
    /// Warm-start each step from the previous step's coefficients.
    #[arg(long)]
    warm_start: bool,
}

impl SolverArgs {
    fn config(&self) -> SolverConfig {
        SolverConfig {
            solver: match self.solver {
                SolverChoice::FixedPoint => SolverKind::FixedPoint,
                SolverChoice::Newton => SolverKind::Newton,
                SolverChoice::Blended => SolverKind::Blended,
            },
            tol: self.tol,
            max_iter: self.max_iter,
            warm_start: self.warm_start,
            ..SolverConfig::default()
        }
    }
}

#[derive(Args)]
struct MethodArgs {
    /// Benchmark problem: lv2, lv3 or harmonic.
    #[arg(long)]
    problem: Option<String>,
    /// Integration method family.
    #[arg(long, value_enum)]
    method: Option<MethodChoice>,
    /// Quadrature node count k (defaults to s for the Gauss method).
    #[arg(long)]
    k: Option<usize>,
    /// Polynomial degree parameter s.
    #[arg(long)]
    s: Option<usize>,
}

#[derive(Args)]
struct TableArgs {
    #[command(flatten)]
    method: MethodArgs,
    /// Comma-separated, strictly ascending steps-per-period counts.
    #[arg(long, value_delimiter = ',')]
    n: Vec<usize>,
    /// Number of reference periods to integrate per row.
    #[arg(long, default_value_t = 1)]
    periods: usize,
    /// Canned experiment (table1 | table2 | table3), desk-scaled: the
    /// largest step counts are capped at n = 6400. Runs several methods;
    /// with --output, one file per method is written (stem_label.ext).
    #[arg(long, conflicts_with_all = ["problem", "method", "k", "s", "n"])]
    preset: Option<String>,
    #[command(flatten)]
    solver: SolverArgs,
    /// Output file; results are written atomically.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Args)]
struct GrowthArgs {
    #[command(flatten)]
    method: MethodArgs,
    /// Steps per reference period (h = T / this).
    #[arg(long, default_value_t = 100)]
    h_per_period: usize,
    /// Horizon length in reference periods (at least 5).
    #[arg(long, default_value_t = 20)]
    periods: usize,
    /// Canned experiment (fig2 | fig4 | fig5), desk-scaled: 20 periods
    /// instead of 100. Runs the figure's methods; with --output, one file
    /// per method is written (stem_label.ext).
    #[arg(long, conflicts_with_all = ["problem", "method", "k", "s"])]
    preset: Option<String>,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Args)]
struct StepDebugArgs {
    #[command(flatten)]
    method: MethodArgs,
    /// Steps per period defining the step size h = T / n.
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[command(flatten)]
    solver: SolverArgs,
    /// Output file (JSON only for this command).
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

/// Errors carrying the process exit code.
enum CliError {
    Config(String),
    Run(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Run(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Run(m) => m,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::UnknownPreset(_)
            | Error::InvalidArgument(_)
            | Error::TableauParams { .. }
            | Error::NodeCount { .. }
            | Error::MissingCasimirs => CliError::Config(e.to_string()),
            other => CliError::Run(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(format!("io error: {e}"))
    }
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("PHBVM_THREADS") {
        match threads.parse::<usize>() {
            Ok(t) if t >= 1 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
            }
            _ => {
                eprintln!("error: PHBVM_THREADS must be a positive integer");
                return ExitCode::from(2);
            }
        }
    }
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Table(args) => run_table(args),
        Command::Growth(args) => run_growth(args),
        Command::StepDebug(args) => run_step_debug(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

/// Resolve the (problem, method) pair from explicit flags.
fn resolve_method(args: &MethodArgs) -> Result<(ProblemPreset, MethodSpec), CliError> {
    let problem_name = args
        .problem
        .as_deref()
        .ok_or_else(|| CliError::Config("--problem is required".into()))?;
    let problem = preset(problem_name)?;
    let method = args
        .method
        .ok_or_else(|| CliError::Config("--method is required".into()))?;
    let s = args
        .s
        .ok_or_else(|| CliError::Config("--s is required".into()))?;
    let spec = match method {
        MethodChoice::Gauss => {
            if let Some(k) = args.k {
                if k != s {
                    return Err(CliError::Config(format!(
                        "the Gauss method requires k = s (got k = {k}, s = {s})"
                    )));
                }
            }
            MethodSpec::gauss(s)?
        }
        MethodChoice::Phbvm => {
            let k = args
                .k
                .ok_or_else(|| CliError::Config("--k is required for phbvm".into()))?;
            MethodSpec::new(Method::Phbvm, k, s)?
        }
        MethodChoice::Ephbvm => {
            let k = args
                .k
                .ok_or_else(|| CliError::Config("--k is required for ephbvm".into()))?;
            if problem.system.num_casimirs() == 0 {
                return Err(CliError::Config(format!(
                    "ephbvm requires a problem with at least one Casimir; `{problem_name}` has none"
                )));
            }
            MethodSpec::new(Method::Ephbvm, k, s)?
        }
    };
    Ok((problem, spec))
}

/// Step-count ladder 50, 100, ..., capped at the desk-scale bound.
fn ladder(max: usize) -> Vec<usize> {
    let mut n = 50;
    let mut out = Vec::new();
    while n <= max.min(6400) {
        out.push(n);
        n *= 2;
    }
    out
}

/// One canned table job: a method and its step-count ladder.
type TableJob = (MethodSpec, Vec<usize>);

/// Canned table experiments from the reference data, desk-scaled.
fn table_preset(name: &str) -> Result<(&'static str, Vec<TableJob>), CliError> {
    let gauss = |s: usize| MethodSpec::gauss(s).expect("valid");
    let phbvm = |k, s| MethodSpec::new(Method::Phbvm, k, s).expect("valid");
    let ephbvm = |k, s| MethodSpec::new(Method::Ephbvm, k, s).expect("valid");
    match name {
        "table1" => Ok((
            "lv2",
            vec![
                (gauss(1), ladder(6400)),
                (phbvm(4, 1), ladder(6400)),
                (gauss(2), ladder(6400)),
                (phbvm(4, 2), ladder(6400)),
                (gauss(3), ladder(800)),
                (phbvm(6, 3), ladder(800)),
            ],
        )),
        "table2" => Ok((
            "lv3",
            vec![
                (gauss(1), ladder(6400)),
                (phbvm(4, 1), ladder(6400)),
                (gauss(2), ladder(6400)),
                (phbvm(4, 2), ladder(6400)),
                (gauss(3), ladder(800)),
                (phbvm(6, 3), ladder(800)),
            ],
        )),
        "table3" => Ok((
            "lv3",
            vec![
                (ephbvm(4, 1), ladder(6400)),
                (ephbvm(4, 2), ladder(6400)),
                (ephbvm(6, 3), ladder(800)),
            ],
        )),
        other => Err(CliError::Config(format!(
            "unknown table preset `{other}` (expected table1, table2 or table3)"
        ))),
    }
}

/// Canned growth experiments behind the figures, desk-scaled.
fn growth_preset(name: &str) -> Result<(&'static str, Vec<MethodSpec>), CliError> {
    match name {
        "fig2" => Ok((
            "lv2",
            vec![
                MethodSpec::gauss(3).expect("valid"),
                MethodSpec::new(Method::Phbvm, 6, 3).expect("valid"),
            ],
        )),
        "fig4" => Ok((
            "lv3",
            vec![
                MethodSpec::gauss(3).expect("valid"),
                MethodSpec::new(Method::Phbvm, 6, 3).expect("valid"),
            ],
        )),
        "fig5" => Ok((
            "lv3",
            vec![MethodSpec::new(Method::Ephbvm, 6, 3).expect("valid")],
        )),
        other => Err(CliError::Config(format!(
            "unknown growth preset `{other}` (expected fig2, fig4 or fig5)"
        ))),
    }
}

fn run_table(args: TableArgs) -> Result<(), CliError> {
    let cfg = args.solver.config();
    let jobs: Vec<(ProblemPreset, MethodSpec, Vec<usize>)> = match &args.preset {
        Some(name) => {
            let (problem_name, methods) = table_preset(name)?;
            let problem = preset(problem_name)?;
            methods
                .into_iter()
                .map(|(spec, ns)| (problem.clone(), spec, ns))
                .collect()
        }
        None => {
            let (problem, spec) = resolve_method(&args.method)?;
            if args.n.is_empty() {
                return Err(CliError::Config("--n is required".into()));
            }
            vec![(problem, spec, args.n.clone())]
        }
    };
    let multi = jobs.len() > 1;
    for (problem, spec, n_list) in jobs {
        let records = convergence_table(
            problem.system.as_ref(),
            &spec,
            &problem.y0,
            problem.period,
            &n_list,
            args.periods,
            &cfg,
        )?;
        println!("# {} on {} ({} period(s))", spec.label(), problem.name, args.periods);
        for r in &records {
            println!(
                "n={:<6} e_y={:.2e} rate_y={} e_H={:.2e} rate_H={} e_C={} rate_C={} it={:.1} time={:.3}s",
                r.n,
                r.e_y,
                fmt_opt_short(r.rate_y),
                r.e_h,
                fmt_opt_short(r.rate_h),
                r.e_c.map_or("-".to_string(), |v| format!("{v:.2e}")),
                fmt_opt_short(r.rate_c),
                r.mean_iterations,
                r.time_sec
            );
        }
        if let Some(path) = &args.output {
            let target = if multi {
                suffixed(path, &spec.label())
            } else {
                path.clone()
            };
            let content = match args.format {
                Format::Csv => table_csv(&records),
                Format::Json => table_json(&records),
            };
            write_atomic(&target, &content)?;
            println!("# wrote {}", target.display());
        }
    }
    Ok(())
}

fn run_growth(args: GrowthArgs) -> Result<(), CliError> {
    let cfg = args.solver.config();
    let (problem, specs) = match &args.preset {
        Some(name) => {
            let (problem_name, specs) = growth_preset(name)?;
            (preset(problem_name)?, specs)
        }
        None => {
            let (problem, spec) = resolve_method(&args.method)?;
            (problem, vec![spec])
        }
    };
    let periods = if args.preset.is_some() {
        args.periods.min(20)
    } else {
        args.periods
    };
    let series = growth_study(
        problem.system.as_ref(),
        &specs,
        &problem.y0,
        problem.period,
        args.h_per_period,
        periods,
        &cfg,
    )?;
    let multi = series.len() > 1;
    for s in &series {
        println!(
            "# {} on {}: {} periods at h=T/{}, e_y growth slope {:.2}",
            s.spec.label(),
            problem.name,
            periods,
            args.h_per_period,
            s.slope_e_y
        );
        for (i, ((ey, eh), ec)) in s.e_y.iter().zip(&s.e_h).zip(&s.e_c).enumerate() {
            println!("period={:<3} e_y={ey:.2e} e_H={eh:.2e} e_C={ec:.2e}", i + 1);
        }
        if let Some(path) = &args.output {
            let target = if multi {
                suffixed(path, &s.spec.label())
            } else {
                path.clone()
            };
            let content = match args.format {
                Format::Csv => growth_csv(s),
                Format::Json => growth_json(s),
            };
            write_atomic(&target, &content)?;
            println!("# wrote {}", target.display());
        }
    }
    Ok(())
}

fn run_step_debug(args: StepDebugArgs) -> Result<(), CliError> {
    if args.format == Format::Csv {
        return Err(CliError::Config(
            "step-debug emits JSON only; drop --format csv".into(),
        ));
    }
    let (problem, spec) = resolve_method(&args.method)?;
    if args.n == 0 {
        return Err(CliError::Config("--n must be positive".into()));
    }
    let cfg = args.solver.config();
    let sys = problem.system.as_ref();
    let h = problem.period / args.n as f64;
    let tab = spec.build()?;
    let result = match spec.method {
        Method::Ephbvm => step_with_casimir(sys, &tab, &problem.y0, h, &cfg)?,
        _ => step(sys, &tab, &problem.y0, h, &cfg)?,
    };
    if !result.converged {
        return Err(CliError::Run(format!(
            "step did not converge: residual {:.3e} after {} iterations",
            result.residual_norm, result.iterations
        )));
    }
    let h_defect = (sys.hamiltonian(&result.y1)? - sys.hamiltonian(&problem.y0)?).abs();
    let mut c_defect: Option<f64> = None;
    for i in 0..sys.num_casimirs() {
        let d = (sys.casimir(i, &result.y1)? - sys.casimir(i, &problem.y0)?).abs();
        c_defect = Some(c_defect.map_or(d, |w: f64| w.max(d)));
    }
    let value = serde_json::json!({
        "problem": problem.name,
        "method": spec.label(),
        "h": h,
        "y1": result.y1.as_slice(),
        "iterations": result.iterations,
        "residual_norm": result.residual_norm,
        "alpha": result.alpha,
        "h_defect": h_defect,
        "c_defect": c_defect,
        "converged": result.converged,
    });
    println!(
        "{} on {}: h={h:.3e} iterations={} residual={:.2e} |dH|={h_defect:.2e}{}",
        spec.label(),
        problem.name,
        result.iterations,
        result.residual_norm,
        c_defect.map_or(String::new(), |d| format!(" |dC|={d:.2e}"))
    );
    if let Some(path) = &args.output {
        write_atomic(path, &format!("{:#}\n", value))?;
        println!("# wrote {}", path.display());
    }
    Ok(())
}

fn fmt_opt_short(v: Option<f64>) -> String {
    v.map_or("-".to_string(), |r| format!("{r:.1}"))
}

fn fmt_opt_full(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:e}"))
}

fn table_csv(records: &[ExperimentRecord]) -> String {
    let mut out = String::from("n,e_y,rate_y,e_H,rate_H,e_C,rate_C,mean_iters,time_sec\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{:e},{},{:e},{},{},{},{:e},{:e}",
            r.n,
            r.e_y,
            fmt_opt_full(r.rate_y),
            r.e_h,
            fmt_opt_full(r.rate_h),
            fmt_opt_full(r.e_c),
            fmt_opt_full(r.rate_c),
            r.mean_iterations,
            r.time_sec
        );
    }
    out
}

fn table_json(records: &[ExperimentRecord]) -> String {
    let rows: Vec<serde_json::Value> = records
        .iter()
        .map(|r| {
            serde_json::json!({
                "n": r.n,
                "e_y": r.e_y,
                "rate_y": r.rate_y,
                "e_H": r.e_h,
                "rate_H": r.rate_h,
                "e_C": r.e_c,
                "rate_C": r.rate_c,
                "mean_iters": r.mean_iterations,
                "time_sec": r.time_sec,
            })
        })
        .collect();
    format!("{:#}\n", serde_json::Value::Array(rows))
}

fn growth_csv(series: &GrowthSeries) -> String {
    let mut out = String::from("period,e_y,e_H,e_C\n");
    for (i, ((ey, eh), ec)) in series
        .e_y
        .iter()
        .zip(&series.e_h)
        .zip(&series.e_c)
        .enumerate()
    {
        let _ = writeln!(out, "{},{ey:e},{eh:e},{ec:e}", i + 1);
    }
    out
}

fn growth_json(series: &GrowthSeries) -> String {
    let rows: Vec<serde_json::Value> = (0..series.e_y.len())
        .map(|i| {
            serde_json::json!({
                "period": i + 1,
                "e_y": series.e_y[i],
                "e_H": series.e_h[i],
                "e_C": series.e_c[i],
            })
        })
        .collect();
    let value = serde_json::json!({
        "method": series.spec.label(),
        "slope_e_y": series.slope_e_y,
        "series": rows,
    });
    format!("{:#}\n", value)
}

fn suffixed(path: &Path, label: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    let ext = path.extension().and_then(|s| s.to_str()).unwrap_or("csv");
    path.with_file_name(format!("{stem}_{label}.{ext}"))
}

/// Write through a temporary file in the destination directory and rename.
fn write_atomic(path: &Path, content: &str) -> Result<(), CliError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let mut tmp = match dir {
        Some(d) => tempfile::NamedTempFile::new_in(d)?,
        None => tempfile::NamedTempFile::new_in(".")?,
    };
    std::io::Write::write_all(&mut tmp, content.as_bytes())?;
    tmp.persist(path)
        .map_err(|e| CliError::Run(format!("cannot persist output file: {e}")))?;
    Ok(())
}
