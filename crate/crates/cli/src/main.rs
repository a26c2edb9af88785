//! `gap`: train, evaluate and verify geometry-adaptive meta-learners on
//! sinusoid regression.
//!
//! Exit codes: 0 success, 1 verification failure or I/O error, 2 invalid
//! arguments or configuration, 3 training aborted, 4 missing or corrupt
//! run state.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use gap_core::metaloop::meta_train;
use gap_core::par::Executor;
use gap_core::persist::{self, EVAL_FILE};
use gap_core::preconditioners::PrecondKind;
use gap_core::tasks::{evaluate_protocol, mean_ci95, EvalSettings};
use gap_core::theory::cosine_decay_sweep;
use gap_core::verify::{run_suite, Suite, VerifyOptions};
use gap_core::GapError;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_TRAINING: u8 = 3;
const EXIT_STATE: u8 = 4;

const DEFAULT_EVAL_SEED: u64 = 2024;
const SHOT_COLUMNS: [usize; 3] = [5, 10, 20];

#[derive(Parser)]
#[command(name = "gap", version, about = "Geometry-adaptive preconditioned meta-learning on sinusoid regression")]
struct Cli {
    /// Worker threads; 0 uses every core, 1 runs sequentially.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train from a JSON config and write a run directory.
    ///
    /// Config keys and defaults: shots=5, batch_size=4, iterations=70000,
    /// alpha=0.01, beta1=0.001, beta2=0.001, k_train=5, k_test=10,
    /// kind=gap (identity|gap|approx_gap|meta_sgd|meta_sgd_pd),
    /// mode=factor_frozen (first_order|factor_frozen|full_svd), seed=0,
    /// layer_sizes=[1,40,40,1], layers=hidden (hidden|all),
    /// train_query=null (same as shots), eval_query=100, log_every=100.
    /// GAP_SEED in the environment overrides the config seed.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the configured iteration count.
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a run on fresh tasks; prints one row and writes eval.csv.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 600)]
        n_tasks: usize,
        #[arg(long, default_value_t = DEFAULT_EVAL_SEED)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = RowFormat::Text)]
        format: RowFormat,
        /// Evaluate with the preconditioner replaced by the identity.
        #[arg(long)]
        ablate: bool,
    },
    /// Assemble evaluated runs into a method x shots table.
    Table {
        runs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = TableFormat::Markdown)]
        format: TableFormat,
    },
    /// Run a verification suite; exits 0 iff every check passes.
    Verify {
        #[arg(long, value_enum, default_value_t = SuiteArg::All)]
        suite: SuiteArg,
        #[arg(long, value_delimiter = ',')]
        n_grid: Option<Vec<usize>>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Mean |cos| between rows of Gaussian matrices as a CSV curve.
    Fig3 {
        #[arg(long, default_value_t = 8)]
        m: usize,
        #[arg(long, value_delimiter = ',', default_value = "16,32,64,128,256,512,1024,2048,4096")]
        n_grid: Vec<usize>,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum RowFormat {
    Text,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum TableFormat {
    Markdown,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Pd,
    Similarity,
    Variance,
    Chebyshev,
    Cosine,
    Approx,
    Gradcheck,
    All,
}

impl From<SuiteArg> for Suite {
    fn from(s: SuiteArg) -> Self {
        match s {
            SuiteArg::Pd => Suite::Pd,
            SuiteArg::Similarity => Suite::Similarity,
            SuiteArg::Variance => Suite::Variance,
            SuiteArg::Chebyshev => Suite::Chebyshev,
            SuiteArg::Cosine => Suite::Cosine,
            SuiteArg::Approx => Suite::Approx,
            SuiteArg::Gradcheck => Suite::Gradcheck,
            SuiteArg::All => Suite::All,
        }
    }
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl std::fmt::Display) -> Self {
        Self { code, message: message.to_string() }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let exec = Executor::new(cli.workers);
    let result = match cli.command {
        Command::Train { config, out, iterations, quiet } => cmd_train(&config, &out, iterations, quiet, exec),
        Command::Eval { run, n_tasks, seed, format, ablate } => cmd_eval(&run, n_tasks, seed, format, ablate, &exec),
        Command::Table { runs, format } => cmd_table(&runs, format),
        Command::Verify { suite, n_grid, trials, seed } => cmd_verify(suite.into(), n_grid, trials, seed, &exec),
        Command::Fig3 { m, n_grid, trials, seed, out } => cmd_fig3(m, &n_grid, trials, seed, &out, &exec),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            if !f.message.is_empty() {
                eprintln!("error: {}", f.message);
            }
            ExitCode::from(f.code)
        }
    }
}

fn cmd_train(config: &Path, out: &Path, iterations: Option<usize>, quiet: bool, exec: Executor) -> Result<(), Failure> {
    let mut cfg = persist::read_config(config).map_err(|e| Failure::new(EXIT_CONFIG, e))?;
    if let Ok(seed) = std::env::var("GAP_SEED") {
        cfg.seed = seed
            .trim()
            .parse()
            .map_err(|_| Failure::new(EXIT_CONFIG, format!("GAP_SEED must be an unsigned integer, got {seed:?}")))?;
    }
    if let Some(n) = iterations {
        cfg.iterations = n;
    }
    let record = meta_train(&cfg, exec, |p| {
        if !quiet {
            eprintln!("iteration {:>6}  mean outer loss {:.6}", p.iteration, p.mean_outer_loss);
        }
    })
    .map_err(|e| match e {
        GapError::Config(_) => Failure::new(EXIT_CONFIG, e),
        other => Failure::new(EXIT_TRAINING, other),
    })?;
    persist::save_run(out, &record).map_err(|e| Failure::new(EXIT_FAILURE, e))?;
    if record.fallback_steps > 0 {
        eprintln!("note: {} inner steps used a fallback preconditioner", record.fallback_steps);
    }
    Ok(())
}

fn cmd_eval(run: &Path, n_tasks: usize, seed: u64, format: RowFormat, ablate: bool, exec: &Executor) -> Result<(), Failure> {
    let (cfg, state) = persist::load_run(run).map_err(|e| Failure::new(EXIT_STATE, e))?;
    let settings = EvalSettings {
        n_tasks,
        shots: cfg.shots,
        query_size: cfg.eval_query,
        alpha: cfg.alpha,
        k_steps: cfg.k_test,
        seed,
    };
    let kind_override = ablate.then_some(PrecondKind::Identity);
    let summary = evaluate_protocol(&state, &settings, kind_override, exec).map_err(|e| Failure::new(EXIT_FAILURE, e))?;
    if !ablate {
        persist::write_eval(&run.join(EVAL_FILE), &summary).map_err(|e| Failure::new(EXIT_FAILURE, e))?;
    }
    let method = if ablate { format!("{} (identity)", cfg.kind.label()) } else { cfg.kind.label().to_string() };
    match format {
        RowFormat::Csv => {
            println!("method,shots,mean_mse,ci95");
            println!("{method},{},{},{}", cfg.shots, summary.mean, summary.ci95);
        }
        RowFormat::Text => {
            println!("{:<18} {:>5} {:>12} {:>10}", "method", "shots", "mean_mse", "ci95");
            println!("{method:<18} {:>5} {:>12.4} {:>10.4}", cfg.shots, summary.mean, summary.ci95);
        }
    }
    Ok(())
}

fn row_order(kind: PrecondKind) -> usize {
    match kind {
        PrecondKind::Identity => 0,
        PrecondKind::MetaSgd => 1,
        PrecondKind::MetaSgdPd => 2,
        PrecondKind::Gap => 3,
        PrecondKind::ApproxGap => 4,
    }
}

fn cmd_table(runs: &[PathBuf], format: TableFormat) -> Result<(), Failure> {
    let mut cells: BTreeMap<(usize, usize), (f64, f64)> = BTreeMap::new();
    let mut rows: BTreeMap<usize, PrecondKind> = BTreeMap::new();
    for run in runs {
        let cfg = persist::read_config(&run.join(persist::CONFIG_FILE)).map_err(|e| Failure::new(EXIT_STATE, e))?;
        rows.insert(row_order(cfg.kind), cfg.kind);
        let Ok(results) = persist::read_eval(&run.join(EVAL_FILE)) else { continue };
        let mses: Vec<f64> = results.iter().map(|r| r.mse).collect();
        if let Ok(stats) = mean_ci95(&mses) {
            cells.insert((row_order(cfg.kind), cfg.shots), stats);
        }
    }
    let cell = |row: usize, shots: usize| match cells.get(&(row, shots)) {
        Some((m, c)) => format!("{m:.2}±{c:.2}"),
        None => "N/A".to_string(),
    };
    match format {
        TableFormat::Markdown => {
            println!("| Method | 5-shot | 10-shot | 20-shot |");
            println!("|---|---|---|---|");
            for (&row, kind) in &rows {
                let body: Vec<String> = SHOT_COLUMNS.iter().map(|&s| cell(row, s)).collect();
                println!("| {} | {} |", kind.label(), body.join(" | "));
            }
        }
        TableFormat::Csv => {
            println!("method,5-shot,10-shot,20-shot");
            for (&row, kind) in &rows {
                let body: Vec<String> = SHOT_COLUMNS.iter().map(|&s| cell(row, s)).collect();
                println!("{},{}", kind.label(), body.join(","));
            }
        }
    }
    Ok(())
}

fn cmd_verify(suite: Suite, n_grid: Option<Vec<usize>>, trials: Option<usize>, seed: u64, exec: &Executor) -> Result<(), Failure> {
    let opts = VerifyOptions { trials, n_grid, seed };
    let checks = run_suite(suite, &opts, exec).map_err(|e| match e {
        GapError::Domain(_) | GapError::Dimension(_) => Failure::new(EXIT_CONFIG, e),
        other => Failure::new(EXIT_FAILURE, other),
    })?;
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(Failure::new(EXIT_FAILURE, format!("{failed} of {} checks failed", checks.len())));
    }
    Ok(())
}

fn cmd_fig3(m: usize, n_grid: &[usize], trials: usize, seed: u64, out: &Path, exec: &Executor) -> Result<(), Failure> {
    let points = cosine_decay_sweep(m, n_grid, trials, seed, exec).map_err(|e| Failure::new(EXIT_CONFIG, e))?;
    let mut csv = String::from("n,mean_abs_cos,analytic_ref\n");
    for p in &points {
        csv.push_str(&format!("{},{},{}\n", p.n, p.mean_abs_cos, p.analytic_ref));
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Failure::new(EXIT_FAILURE, e))?;
    }
    fs::write(out, csv).map_err(|e| Failure::new(EXIT_FAILURE, e))?;
    Ok(())
}
