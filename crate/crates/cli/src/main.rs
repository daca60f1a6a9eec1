//! Command-line front end. Each subcommand runs the pipeline up to its
//! stage, writes the artifacts and report tables produced so far, and
//! prints a short summary. Exit codes: 0 success, 2 configuration error,
//! 3 data error, 4 degraded run (some stage failed and was skipped).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use hetfx::calibration::Direction;
use hetfx::config::RunConfig;
use hetfx::report::emit_reports;
use hetfx::runner::{Runner, Stage};
use hetfx::Error;

#[derive(Parser)]
#[command(
    name = "hetfx",
    version,
    about = "Calibration-checked treatment-effect heterogeneity for randomized experiments"
)]
struct Cli {
    /// Configuration file; TOML, or JSON with a .json extension.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides the config key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Outcome column; overrides the config key.
    #[arg(long, global = true)]
    outcome: Option<String>,
    /// Effect side of interest; overrides the config key.
    #[arg(long, global = true, value_enum)]
    direction: Option<DirectionArg>,
    /// Output directory; overrides the config key.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for the fit grid; default uses every core.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Include the multiple-testing table in the cell report.
    #[arg(long, global = true)]
    report_pvalues: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum DirectionArg {
    Neg,
    Pos,
}

#[derive(Clone, Copy, Subcommand)]
enum Cmd {
    /// Hold out the test split and assign cross-validation folds.
    Split,
    /// Pick base-learner hyperparameters on the training split.
    Tune,
    /// Fit every estimator under every perturbation.
    Fit,
    /// Calibration report for the original cross-validation fits.
    Calibrate,
    /// Rank estimators across perturbations and screen the stable ones.
    Rank,
    /// Mine and stabilize interpretable cells from the screened ensemble.
    Cellsearch,
    /// Run everything through the single test-set evaluation.
    Evaluate,
    /// Generate the configured synthetic dataset and stop.
    Simulate,
    /// Full pipeline plus all report tables.
    Run,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(cli: Cli) -> hetfx::Result<ExitCode> {
    if let Some(n) = cli.threads {
        hetfx::pipeline::configure_threads(n)?;
    }
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("--config is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(outcome) = cli.outcome {
        cfg.outcome = outcome;
    }
    if let Some(direction) = cli.direction {
        cfg.direction = match direction {
            DirectionArg::Neg => Direction::Neg,
            DirectionArg::Pos => Direction::Pos,
        };
    }
    if let Some(out) = cli.out {
        cfg.out_dir = Some(out);
    }
    if cli.report_pvalues {
        cfg.report_pvalues = true;
    }
    let out = cfg.out_dir.clone().ok_or_else(|| {
        Error::InvalidConfig("no output directory: set out_dir in the config or pass --out".into())
    })?;

    let mut runner = Runner::new(cfg, out)?;

    if let Cmd::Simulate = cli.cmd {
        if runner.cfg.synthetic.is_none() {
            return Err(Error::InvalidConfig(
                "simulate needs a [synthetic] block in the config".into(),
            ));
        }
        std::fs::create_dir_all(&runner.out)?;
        runner.write_synthetic_data()?;
        runner.write_manifest()?;
        println!(
            "simulated {} rows x {} features into {}",
            runner.d.n(),
            runner.d.p(),
            runner.out.display()
        );
        return Ok(ExitCode::SUCCESS);
    }

    let target = match cli.cmd {
        Cmd::Split => Stage::Split,
        Cmd::Tune => Stage::Tune,
        Cmd::Fit => Stage::Fit,
        Cmd::Calibrate => Stage::Calibrate,
        Cmd::Rank => Stage::Rank,
        Cmd::Cellsearch => Stage::CellSearch,
        Cmd::Evaluate | Cmd::Run => Stage::Evaluate,
        Cmd::Simulate => unreachable!("handled above"),
    };
    let degraded = runner.run_to(target)?;
    emit_reports(&runner)?;
    print_summary(&runner);
    if degraded {
        for note in &runner.manifest.notes {
            eprintln!("degraded: {note}");
        }
        return Ok(ExitCode::from(4));
    }
    Ok(ExitCode::SUCCESS)
}

fn fmt_t(t: Option<f64>) -> String {
    t.map(|t| format!("{t:.2}")).unwrap_or_else(|| "-".into())
}

fn print_summary(r: &Runner) {
    println!(
        "completed stages: {}",
        r.manifest.completed_stages.join(", ")
    );
    if let Some(rank) = &r.rank {
        if rank.screened.is_empty() {
            println!("screened estimators: none");
        } else {
            println!("screened estimators: {}", rank.screened.join(", "));
        }
    }
    if let Some(eval) = &r.evaluation {
        println!("cell evaluation (effect est, t vs population average):");
        for row in &eval.rows {
            let (effect, test_t) = row
                .test
                .as_ref()
                .map(|s| (format!("{:.3}", s.effect), fmt_t(s.t)))
                .unwrap_or_else(|| ("-".into(), "-".into()));
            println!(
                "  {:<40} test effect {} t {} | val mean t {}",
                row.label,
                effect,
                test_t,
                fmt_t(row.val_mean_t)
            );
        }
        if let Some(holm) = &eval.holm {
            println!("multiple-testing decisions (alpha = {}):", holm.alpha);
            for h in &holm.rows {
                println!(
                    "  {:<40} t {:.2} p {:.4} cutoff {:.4} reject {}",
                    h.label, h.t, h.p, h.cutoff, h.reject
                );
            }
        }
    }
    println!("artifacts in {}", r.out.display());
}
