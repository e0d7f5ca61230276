use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use scaleinv::experiments::{self, ExperimentConfig, ExperimentKind, ExperimentReport};
use scaleinv::linear_model::{least_squares_solution, scale_invariant_solution, OverdeterminedSystem};
use scaleinv::total_projections::{solve_seeded, Mode, StepRule};
use scaleinv::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "scaleinv", version, about = "Scale-invariant solvers and value-estimation experiments")]
struct Cli {
    /// Output directory for CSV and JSON files.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// JSON file with experiment or solver settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Csv,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve a system stored as CSV (columns phi_0.., v and optionally d).
    Solve {
        system: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<CliMode>,
        /// Fixed step instead of the curvature step.
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        p: Option<f64>,
        #[arg(long)]
        tau: Option<usize>,
        #[arg(long)]
        max_iters: Option<usize>,
    },
    #[command(subcommand)]
    Experiment(ExperimentCmd),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CliMode {
    Batch,
    Stochastic,
}

#[derive(Subcommand, Debug)]
enum ExperimentCmd {
    /// Outlier chain: per-state errors of the scale-invariant and least-squares fits.
    Outlier(OutlierArgs),
    /// Plain, curvature-step and curvature-step-with-momentum batch traces.
    Steps(SizeArgs),
    /// Heavy-ball momentum sweep.
    Momentum(SizeArgs),
    /// Normalized Monte Carlo and TD(0) against their fixed points.
    Rl(SizeArgs),
}

#[derive(Args, Debug)]
struct OutlierArgs {
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    /// Outlier feature multiplier.
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    r: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    reps: Option<usize>,
}

#[derive(Args, Debug)]
struct SizeArgs {
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    reps: Option<usize>,
    /// Iterations per solve (steps, momentum).
    #[arg(long)]
    iters: Option<usize>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn load_config(path: Option<&Path>, kind: ExperimentKind) -> Result<ExperimentConfig> {
    let Some(path) = path else { return Ok(ExperimentConfig::new(kind)) };
    let mut value: serde_json::Value = serde_json::from_reader(File::open(path)?)?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| Error::InvalidInput("config file must hold a JSON object".into()))?;
    let named = serde_json::to_value(kind)?;
    match obj.get("experiment") {
        Some(k) if *k != named => {
            return Err(Error::InvalidInput(format!("config is for experiment {k}, not {}", kind.name())))
        }
        _ => {
            obj.insert("experiment".into(), named);
        }
    }
    ExperimentConfig::from_json(&value.to_string())
}

fn experiment_config(cli: &Cli, cmd: &ExperimentCmd) -> Result<ExperimentConfig> {
    let kind = match cmd {
        ExperimentCmd::Outlier(_) => ExperimentKind::Outlier,
        ExperimentCmd::Steps(_) => ExperimentKind::Steps,
        ExperimentCmd::Momentum(_) => ExperimentKind::Momentum,
        ExperimentCmd::Rl(_) => ExperimentKind::Rl,
    };
    let mut cfg = load_config(cli.config.as_deref(), kind)?;
    set(&mut cfg.seed, cli.seed);
    match cmd {
        ExperimentCmd::Outlier(a) => {
            set(&mut cfg.m, a.m);
            set(&mut cfg.mu, a.mu);
            set(&mut cfg.sigma, a.sigma);
            set(&mut cfg.p_outlier, a.p);
            set(&mut cfg.r, a.r);
            set(&mut cfg.gamma, a.gamma);
            set(&mut cfg.repetitions, a.reps);
        }
        ExperimentCmd::Steps(a) | ExperimentCmd::Momentum(a) | ExperimentCmd::Rl(a) => {
            set(&mut cfg.m, a.m);
            set(&mut cfg.n, a.n);
            set(&mut cfg.gamma, a.gamma);
            set(&mut cfg.repetitions, a.reps);
            set(&mut cfg.solver.max_iters, a.iters);
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_report(report: &ExperimentReport, written: &[PathBuf]) {
    for (k, v) in &report.summary {
        println!("{k} = {v:.6}");
    }
    for c in report.checks.iter().filter(|c| !c.passed) {
        println!("FAILED {}: {}", c.name, c.detail);
    }
    println!(
        "{} checks, {} failed, {:.2}s",
        report.checks.len(),
        report.checks.iter().filter(|c| !c.passed).count(),
        report.wall_time_s
    );
    for p in written {
        println!("wrote {}", p.display());
    }
}

#[allow(clippy::too_many_arguments)]
fn run_solve(
    cli: &Cli,
    system: &Path,
    mode: Option<CliMode>,
    alpha: Option<f64>,
    beta: Option<f64>,
    p: Option<f64>,
    tau: Option<usize>,
    max_iters: Option<usize>,
) -> Result<()> {
    let sys = OverdeterminedSystem::read_csv(system)?;
    let mut solver = load_config(cli.config.as_deref(), ExperimentKind::Steps)?.solver;
    set(&mut solver.seed, cli.seed);
    set(&mut solver.beta, beta);
    set(&mut solver.p, p);
    set(&mut solver.tau, tau);
    set(&mut solver.max_iters, max_iters);
    if let Some(m) = mode {
        solver.mode = match m {
            CliMode::Batch => Mode::Batch,
            CliMode::Stochastic => Mode::Stochastic,
        };
    }
    if let Some(a) = alpha {
        solver.step_rule = StepRule::FixedAlpha(a);
    }
    solver.validate()?;

    let w_m = scale_invariant_solution(&sys)?;
    let w_l = least_squares_solution(&sys)?;
    let (w_tp, trace) = solve_seeded(&sys, &solver, None, Some(&w_m))?;

    std::fs::create_dir_all(&cli.out)?;
    let header: Vec<String> =
        std::iter::once("method".to_string()).chain((0..sys.ncols()).map(|j| format!("w_{j}"))).collect();
    let mut table = experiments::Table::new("solution", &header.iter().map(String::as_str).collect::<Vec<_>>());
    for (name, w) in [("scale_invariant", &w_m), ("least_squares", &w_l), ("total_projections", &w_tp)] {
        table.push(std::iter::once(name.to_string()).chain(w.iter().map(|x| format!("{x:e}"))).collect());
        println!("{name}: {:?}", w.as_slice());
    }
    let sol_path = cli.out.join("solution.csv");
    table.write_csv(File::create(&sol_path)?)?;
    let trace_path = cli.out.join("trace.csv");
    trace.write_csv(File::create(&trace_path)?)?;
    println!("wrote {}", sol_path.display());
    println!("wrote {}", trace_path.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<bool> {
    let Format::Csv = cli.format;
    match &cli.command {
        Command::Solve { system, mode, alpha, beta, p, tau, max_iters } => {
            run_solve(cli, system, *mode, *alpha, *beta, *p, *tau, *max_iters)?;
            Ok(true)
        }
        Command::Experiment(cmd) => {
            let cfg = experiment_config(cli, cmd)?;
            let report = experiments::run(&cfg)?;
            let written = report.write(&cli.out)?;
            print_report(&report, &written);
            Ok(report.passed())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
