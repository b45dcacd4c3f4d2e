//! `fbsde`: runs one named study on a built-in or JSON problem and writes
//! CSV/JSON artifacts plus `summary.json` into the output directory.
//!
//! Exit status: 0 when every check passes, 1 when a check fails, 2 on a usage
//! error and 3 when a study aborts (an `error.json` record is written).

mod report;
mod studies;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context as _, Result};
use clap::{Parser, ValueEnum};

use fbsde_core::export::write_json;
use fbsde_core::{load_problem, McConfig};

use report::{Collector, ErrorRecord, RunInfo};
use studies::Context;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Study {
    /// Compare every derivative oracle with central differences.
    Validate,
    /// Simulate the reference control and solve the backward equation.
    Simulate,
    /// Singular and classical adjoints with the ratio identity.
    Adjoint,
    /// Every necessary condition at the reference control.
    Check,
    /// HJB variational inequality with the Monte Carlo cross-check.
    Hjb,
    /// Convergence orders of the regular expansion.
    Study,
    /// The whole pipeline: validate, adjoints, conditions, HJB and the
    /// value-function/adjoint comparison.
    Example,
}

impl Study {
    fn name(self) -> &'static str {
        match self {
            Study::Validate => "validate",
            Study::Simulate => "simulate",
            Study::Adjoint => "adjoint",
            Study::Check => "check",
            Study::Hjb => "hjb",
            Study::Study => "study",
            Study::Example => "example",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "fbsde", version, about = "Experiment runner for controlled forward-backward SDEs")]
struct Args {
    /// Built-in problem name or path to a problem JSON file.
    #[arg(long, default_value = "worked_example")]
    problem: String,
    #[arg(long, value_enum)]
    study: Study,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    paths: usize,
    /// Overrides the number of time steps of the problem.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Also write the reference paths to this CSV file.
    #[arg(long)]
    export_paths: Option<PathBuf>,
    /// Constant reference control value (every component).
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    control: f64,
    /// Total degree of the regression basis.
    #[arg(long, default_value_t = 3)]
    degree: usize,
    /// Spatial grid points of the HJB solver.
    #[arg(long, default_value_t = 201)]
    nx: usize,
    /// Half-width of the HJB grid around the initial state.
    #[arg(long, default_value_t = 2.0)]
    x_range: f64,
    /// Perturbation sizes of the convergence study.
    #[arg(long, value_delimiter = ',', default_value = "0.2,0.1,0.05,0.025")]
    levels: Vec<f64>,
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("FBSDE_THREADS") {
        let n: usize = v.parse().with_context(|| format!("FBSDE_THREADS must be a positive integer, got '{v}'"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    Ok(())
}

fn run(args: &Args) -> Result<bool> {
    let mut problem = load_problem(&args.problem)?;
    if let Some(steps) = args.steps {
        problem = problem.with_steps(steps);
    }
    let mc = McConfig { n_paths: args.paths, seed: args.seed, degree: args.degree };
    let run = RunInfo {
        problem: problem.name.clone(),
        study: args.study.name().into(),
        seed: args.seed,
        paths: args.paths,
        steps: problem.grid.n_steps,
        degree: args.degree,
        control: args.control,
        n_x: args.nx,
        x_range: args.x_range,
        levels: args.levels.clone(),
    };
    let ctx = Context {
        problem,
        mc,
        control: args.control,
        n_x: args.nx,
        x_range: args.x_range,
        levels: args.levels.clone(),
        out: args.out.clone(),
        export_paths: args.export_paths.clone(),
    };
    let mut c = Collector::default();
    match args.study {
        Study::Validate => studies::validate(&ctx, &mut c)?,
        Study::Simulate => studies::simulate(&ctx, &mut c)?,
        Study::Adjoint => studies::adjoint(&ctx, &mut c)?,
        Study::Check => studies::check(&ctx, &mut c)?,
        Study::Hjb => studies::hjb(&ctx, &mut c)?,
        Study::Study => studies::study(&ctx, &mut c)?,
        Study::Example => studies::example(&ctx, &mut c)?,
    }
    c.artifact("summary.json");
    let summary = c.finish(run);
    for check in &summary.checks {
        let verdict = if check.pass { "PASS" } else { "FAIL" };
        println!("{verdict} {} = {} (tolerance {})", check.name, check.value, check.tolerance);
        if !check.detail.is_empty() {
            println!("     {}", check.detail);
        }
    }
    write_json(&args.out.join("summary.json"), &summary)?;
    println!("{} -> {}", if summary.pass { "all checks passed" } else { "some checks failed" }, args.out.join("summary.json").display());
    Ok(summary.pass)
}

fn main() -> ExitCode {
    let args = Args::parse();
    let outcome = configure_threads()
        .and_then(|_| std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display())))
        .and_then(|_| run(&args));
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            let record = ErrorRecord::new(args.study.name(), &args.problem, &err);
            eprintln!("error: {err:#}");
            if args.out.is_dir() {
                let _ = write_json(&args.out.join("error.json"), &record);
            }
            ExitCode::from(3)
        }
    }
}
