//! `gcrf`: command-line driver for the low-rank Gaussian CRF engine.
//!
//! Exit codes: 0 success, 1 usage or I/O error, 2 solver non-convergence,
//! 3 failed check, 4 training divergence.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use gcrf::config::RunConfig;
use gcrf::gradcheck::{run_suite, CHECK_CSV_HEADER};
use gcrf::oracle::{assemble_dense, direct_solve, ExplicitSystem};
use gcrf::perf::{bench_grid, BENCH_CSV_HEADER};
use gcrf::synth::generate;
use gcrf::tensor::format_matrix;
use gcrf::train::{evaluate, train_two_phase, ToyModel, HISTORY_HEADER};
use gcrf::{read_matrix, read_vector, CgConfig, Dims, GcrfLayer};

const EXIT_USAGE: u8 = 1;
const EXIT_NOT_CONVERGED: u8 = 2;
const EXIT_CHECK_FAILED: u8 = 3;
const EXIT_DIVERGED: u8 = 4;

#[derive(Parser)]
#[command(
    name = "gcrf",
    version,
    about = "Fully-connected low-rank Gaussian CRF: inference, gradient checks, training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve (E^T E + lambda I) x = B for embeddings E and unaries B.
    Solve(SolveArgs),
    /// Check the layer gradients against the brute-force oracles.
    GradCheck(GradCheckArgs),
    /// Two-phase training on the configured synthetic task.
    Train(TrainArgs),
    /// Compare unary-only and dense G-CRF accuracy of a trained model.
    Eval(EvalArgs),
    /// Time operator application and solves over a grid of sizes.
    Bench(BenchArgs),
    /// Print the effective configuration.
    Config(ConfigArgs),
}

#[derive(Args)]
struct SolveArgs {
    /// D x N embedding matrix file
    #[arg(long)]
    embeddings: PathBuf,
    /// Unary vector file (1 x N or N x 1)
    #[arg(long)]
    unary: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// Also solve the assembled dense system directly and report the discrepancy
    #[arg(long)]
    oracle: bool,
    #[arg(long)]
    rel_tol: Option<f64>,
    #[arg(long)]
    abs_tol: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    /// Write x here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replace the embedding gradient with a broken formula (negative control)
    #[arg(long)]
    sabotage: bool,
    /// Also write the result table to this CSV file
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print a gnuplot script for the metrics CSV after training
    #[arg(long)]
    gnuplot: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint directory written by `train`
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated variable counts
    #[arg(long, value_delimiter = ',', default_value = "1024,4096")]
    n: Vec<usize>,
    /// Comma-separated embedding dimensions
    #[arg(long, value_delimiter = ',', default_value = "4,8,16,32")]
    d: Vec<usize>,
    #[arg(long, default_value_t = 11)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Print a gnuplot script with the results inlined instead of CSV
    #[arg(long)]
    gnuplot: bool,
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            let diverged = e
                .chain()
                .any(|c| matches!(c.downcast_ref::<gcrf::Error>(), Some(gcrf::Error::Divergence { .. })));
            ExitCode::from(if diverged { EXIT_DIVERGED } else { EXIT_USAGE })
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    match cli.command {
        Command::Solve(args) => solve(args),
        Command::GradCheck(args) => grad_check(args),
        Command::Train(args) => train(args),
        Command::Eval(args) => eval(args),
        Command::Bench(args) => bench(args),
        Command::Config(args) => {
            println!("{}", load_config(args.config.as_deref())?.to_json_pretty());
            Ok(0)
        }
    }
}

fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    Ok(cfg)
}

fn echo_config(cfg: &RunConfig) {
    eprintln!("# effective config\n{}", cfg.to_json_pretty());
}

fn solve(args: SolveArgs) -> anyhow::Result<u8> {
    let embeddings = read_matrix(&args.embeddings)?;
    let unary = read_vector(&args.unary)?;
    let (d, n) = embeddings.shape();
    if unary.len() != n {
        bail!("unary has {} entries but embeddings have {n} columns", unary.len());
    }
    let defaults = CgConfig::default();
    let cg = CgConfig {
        rel_tol: args.rel_tol.unwrap_or(defaults.rel_tol),
        abs_tol: args.abs_tol.unwrap_or(defaults.abs_tol),
        max_iters: args.max_iters.or(defaults.max_iters),
        record_energy: false,
    };
    let dims = Dims::new(n, 1, d)?;
    let layer = GcrfLayer::new(embeddings.into(), args.lambda, dims, cg)?;
    let (x, report) = layer.forward(&unary)?;

    let text = format_matrix(&x.to_row_matrix());
    match &args.out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{text}"),
    }
    eprintln!(
        "cg iterations={} residual={:e} converged={}",
        report.iterations, report.final_residual_norm, report.converged
    );
    if args.oracle {
        let dense = assemble_dense(layer.embeddings(), args.lambda)?;
        let direct = direct_solve(&ExplicitSystem::new(dense, unary)?)?;
        let diff = x.add_scaled(-1.0, &direct)?.norm();
        let scale = direct.norm();
        let rel = if scale > 0.0 { diff / scale } else { diff };
        eprintln!("oracle rel_discrepancy={rel:e}");
    }
    Ok(if report.converged { 0 } else { EXIT_NOT_CONVERGED })
}

fn grad_check(args: GradCheckArgs) -> anyhow::Result<u8> {
    let cfg = load_config(args.config.as_deref())?;
    echo_config(&cfg);
    let results = run_suite(&cfg.gradcheck, cfg.lambda, &cfg.cg, args.sabotage)?;
    let mut table = format!("{CHECK_CSV_HEADER}\n");
    for r in &results {
        table.push_str(&r.csv_row());
        table.push('\n');
    }
    print!("{table}");
    if let Some(path) = &args.csv {
        fs::write(path, &table).with_context(|| format!("writing {}", path.display()))?;
    }
    let failed = results.iter().filter(|r| !r.pass()).count();
    if failed > 0 {
        eprintln!("{failed} of {} checks failed", results.len());
        return Ok(EXIT_CHECK_FAILED);
    }
    Ok(0)
}

fn train(args: TrainArgs) -> anyhow::Result<u8> {
    let cfg = load_config(args.config.as_deref())?;
    echo_config(&cfg);
    let dims = cfg.task_dims()?;
    let data = generate(&cfg.task)?;
    let train_cfg = cfg.train_config();

    let metrics_path = &cfg.paths.metrics_csv;
    if let Some(parent) = metrics_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut metrics = OpenOptions::new()
        .create(true)
        .append(true)
        .open(metrics_path)
        .with_context(|| format!("opening {}", metrics_path.display()))?;
    if metrics.metadata()?.len() == 0 {
        writeln!(metrics, "{HISTORY_HEADER}")?;
    }
    let mut write_err = None;
    let outcome = train_two_phase(&data.train, dims, cfg.task.feature_dim(), &train_cfg, &cfg.cg, |row| {
        if write_err.is_none() {
            if let Err(e) = writeln!(metrics, "{}", row.to_csv()) {
                write_err = Some(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(e).context("writing metrics");
    }

    let dir = &cfg.paths.model_dir;
    outcome.phase1.save(dir.join("phase1"), cfg.lambda, &cfg.cg)?;
    outcome.model.save(dir.join("phase2"), cfg.lambda, &cfg.cg)?;
    outcome.model.save(dir, cfg.lambda, &cfg.cg)?;

    let report = evaluate(&outcome.model, &data.test, cfg.lambda, &cfg.cg)?;
    println!("unary_acc,dense_acc,delta");
    println!("{:.6},{:.6},{:.6}", report.unary_acc, report.dense_acc, report.delta());
    if args.gnuplot {
        println!("{}", training_gnuplot(metrics_path));
    }
    Ok(0)
}

fn training_gnuplot(csv: &Path) -> String {
    format!(
        "set datafile separator ','\n\
         set key autotitle columnhead\n\
         set xlabel 'iteration'\n\
         set ylabel 'loss'\n\
         set y2label 'accuracy'\n\
         set y2tics\n\
         plot '{0}' using 1:4 with lines title 'loss', \\\n     '{0}' using 1:5 axes x1y2 with lines title 'accuracy'",
        csv.display()
    )
}

fn eval(args: EvalArgs) -> anyhow::Result<u8> {
    let cfg = load_config(args.config.as_deref())?;
    echo_config(&cfg);
    let (model, lambda, cg) =
        ToyModel::load(&args.model).with_context(|| format!("loading model from {}", args.model.display()))?;
    if model.dims.pixels != cfg.task.pixels() || model.dims.labels != cfg.task.labels {
        bail!("model dimensions do not match the configured task");
    }
    let data = generate(&cfg.task)?;
    let report = evaluate(&model, &data.test, lambda, &cg)?;
    println!("unary_acc,dense_acc,delta");
    println!("{:.6},{:.6},{:.6}", report.unary_acc, report.dense_acc, report.delta());
    Ok(0)
}

fn bench(args: BenchArgs) -> anyhow::Result<u8> {
    if args.n.is_empty() || args.d.is_empty() {
        bail!("--n and --d need at least one value");
    }
    for &n in &args.n {
        for &d in &args.d {
            if n == 0 || d == 0 {
                bail!("sizes must be positive");
            }
            if n.checked_mul(d).is_none_or(|s| s > 1 << 28) {
                bail!("N*D = {n}*{d} is too large to allocate");
            }
        }
    }
    eprintln!("# threads=1 repeats={} seed={}", args.repeats, args.seed);
    let rows = bench_grid(&args.n, &args.d, args.repeats, args.seed)?;
    if args.gnuplot {
        println!("$data << EOD");
        for r in &rows {
            println!("{} {} {} {} {}", r.n, r.d, r.apply_ns, r.solve_ms, r.cg_iters);
        }
        println!("EOD");
        println!("set xlabel 'D'\nset ylabel 'apply ns'\nset logscale xy");
        let plots: Vec<String> = args
            .n
            .iter()
            .map(|n| format!("$data using ($1=={n}?$2:1/0):3 with linespoints title 'N={n}'"))
            .collect();
        println!("plot {}", plots.join(", \\\n     "));
    } else {
        println!("{BENCH_CSV_HEADER}");
        for r in &rows {
            println!("{}", r.to_csv());
        }
    }
    Ok(0)
}
