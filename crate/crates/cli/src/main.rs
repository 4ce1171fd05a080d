use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pmlab::stages::{self, ModelTag, PlanTag};
use pmlab::{CliError, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "pmlab",
    version,
    about = "Knowledge-conflict lab for a toy transformer"
)]
struct Cli {
    /// JSON experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a config value, e.g. `--set adapt.steps=100`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory; replaces `paths.out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base model on the fact corpus.
    Pretrain,
    /// Elicit parametric answers and build the conflict benchmark.
    BuildBenchmark,
    /// Per-layer activation statistics and layer selection.
    Analyze,
    /// NLL of parametric answers under a λ grid.
    Intervene,
    /// Train the low-rank adapter on the suppressed model.
    Adapt,
    /// Score a model/plan pair on held-out unfaithful instances.
    Evaluate {
        #[arg(long, value_enum, default_value = "adapted")]
        model_tag: ModelTag,
        /// Defaults to the configured suppression kind.
        #[arg(long, value_enum)]
        plan_tag: Option<PlanTag>,
    },
    /// λ, layer-count and α:β grids.
    Sweep,
    /// All stages followed by the standard evaluations.
    RunAll,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let path = cli
        .config
        .ok_or_else(|| CliError::Config("--config is required".into()))?;
    let cfg = ExperimentConfig::load(&path, &cli.set, cli.seed, cli.out.as_deref())?;
    match cli.command {
        Command::Pretrain => {
            let acc = stages::cmd_pretrain(&cfg)?;
            println!("closed-book accuracy {}/{}", acc.hits, acc.n_facts);
        }
        Command::BuildBenchmark => {
            let b = stages::cmd_build_benchmark(&cfg)?;
            println!(
                "retained {} of {} facts: {} faithful, {} unfaithful",
                b.stats.retained, b.stats.facts, b.stats.faithful, b.stats.unfaithful
            );
        }
        Command::Analyze => {
            let a = stages::cmd_analyze(&cfg)?;
            println!("selected layers {:?}", a.selection.layers);
        }
        Command::Intervene => {
            for r in stages::cmd_intervene(&cfg)? {
                println!(
                    "lambda {:.2}  nll unfaithful {:.4}  faithful {:.4}",
                    r.lambda, r.nll_unfaithful, r.nll_faithful
                );
            }
        }
        Command::Adapt => {
            let out = stages::cmd_adapt(&cfg)?;
            if let (Some(first), Some(last)) = (out.log.first(), out.log.last()) {
                println!("combined loss {:.4} -> {:.4}", first.combined, last.combined);
            }
        }
        Command::Evaluate { model_tag, plan_tag } => {
            let plan_tag = plan_tag.unwrap_or(PlanTag::from_kind(cfg.suppression.kind));
            print_report(&stages::cmd_evaluate(&cfg, model_tag, plan_tag)?);
        }
        Command::Sweep => {
            let rows = stages::cmd_sweep(&cfg)?;
            println!("{}", stages::SWEEP_HEADER.join(","));
            for r in rows {
                println!("{}", r.join(","));
            }
        }
        Command::RunAll => {
            let s = stages::cmd_run_all(&cfg)?;
            println!("closed-book accuracy {:.3}", s.closed_book_accuracy);
            println!("selected layers {:?}", s.selected_layers);
            for r in &s.reports {
                print_report(r);
            }
        }
    }
    Ok(())
}

fn print_report(r: &stages::TaggedReport) {
    let e = &r.report;
    println!(
        "{:>7} / {:<9} ConR {:5.1}  MemR {:5.1}  MR {}  (n={})",
        r.model_tag.as_str(),
        r.plan_tag.as_str(),
        e.conr,
        e.memr,
        e.mr.map(|m| format!("{m:.3}")).unwrap_or_else(|| "n/a".into()),
        e.n_instances
    );
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
