use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use caneft::pipeline::{PipelineConfig, RunSpec, Workspace};
use caneft::selection::Strategy;
use caneft::Result;

#[derive(Parser)]
#[command(name = "caneft", version, about = "Consensus-aligned neuron fine-tuning laboratory")]
struct Cli {
    /// Workspace directory holding every stage's artifacts.
    #[arg(long, short = 'w', global = true, default_value = "workspace")]
    workspace: PathBuf,
    /// Pipeline config JSON; defaults to the workspace snapshot, then built-ins.
    #[arg(long, short = 'c', global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set finetune.steps=500`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Overwrite existing artifacts of the requested stage.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Copy)]
struct RunArgs {
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    budget_ratio: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark.
    GenData,
    /// Pretrain the base model on the generic instruction.
    Pretrain,
    /// Write per-sample importance shards for every seen domain.
    Score,
    /// Choose neurons with one strategy.
    Select(RunArgs),
    /// Masked fine-tuning of a selection.
    Finetune(RunArgs),
    /// Evaluate a fine-tuned run, or the base model with --base.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        base: bool,
    },
    /// Selected-neuron counts per layer and index bin.
    ReportDistribution(RunArgs),
    /// Mean absolute weight change per layer group and module.
    ReportGradients(RunArgs),
    /// Select, fine-tune and evaluate across budget ratios.
    SweepRatio {
        /// Comma-separated ratios; defaults to the config grid.
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Every stage for one run, reusing upstream artifacts.
    RunAll(RunArgs),
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let snapshot = cli.workspace.join("config.json");
    let base = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None if snapshot.exists() => PipelineConfig::load(&snapshot)?,
        None => PipelineConfig::default(),
    };
    base.with_overrides(&cli.overrides)
}

fn run_spec(ws: &Workspace, a: RunArgs) -> RunSpec {
    let d = ws.default_run();
    RunSpec {
        strategy: a.strategy.unwrap_or(d.strategy),
        budget_ratio: a.budget_ratio.unwrap_or(d.budget_ratio),
        seed: a.seed.unwrap_or(d.seed),
    }
}

fn print_report(path: &Path) {
    println!("report written to {}", path.display());
}

fn execute(cli: &Cli) -> Result<()> {
    let config = load_config(cli)?;
    let ws = Workspace::open(&cli.workspace, config)?;
    let force = cli.force;
    match &cli.command {
        Command::GenData => {
            let b = ws.gen_data(force)?;
            println!("{} domains, vocabulary of {}", b.domains.len(), b.vocab.len());
        }
        Command::Pretrain => {
            let log = ws.pretrain(force)?;
            let l = log.losses();
            println!("pretrained {} steps, final loss {:.4}", l.len(), l.last().copied().unwrap_or(f64::NAN));
        }
        Command::Score => {
            let imp = ws.score(force)?;
            println!("scored {} domains", imp.shards.len());
        }
        Command::Select(a) => {
            let run = run_spec(&ws, *a);
            let s = ws.select(&run, force)?;
            println!("{}: {} neurons selected", run.name(), s.neurons.len());
            if let Some(g) = s.effective_gamma {
                println!("effective gamma {g:.6}");
            }
        }
        Command::Finetune(a) => {
            let run = run_spec(&ws, *a);
            let log = ws.finetune(&run, force)?;
            println!("{}: {} steps, {} skipped", run.name(), log.rows.len(), log.skipped_steps);
        }
        Command::Eval { run, base } => {
            let (report, path) = if *base {
                (ws.eval_base(force)?, ws.root().join("eval").join("base.csv"))
            } else {
                let r = run_spec(&ws, *run);
                (ws.eval_run(&r, force)?, ws.run_dir(&r).join("eval.csv"))
            };
            for d in &report.domains {
                println!(
                    "{:<8} {:<6} acc {:.4} bleu {:6.2} exact {:.4}",
                    d.domain,
                    if d.seen { "seen" } else { "unseen" },
                    d.token_accuracy,
                    d.bleu,
                    d.exact_match
                );
            }
            print_report(&path);
        }
        Command::ReportDistribution(a) => {
            let run = run_spec(&ws, *a);
            ws.report_distribution(&run, force)?;
            print_report(&ws.run_dir(&run).join("distribution.csv"));
        }
        Command::ReportGradients(a) => {
            let run = run_spec(&ws, *a);
            ws.report_gradients(&run, force)?;
            print_report(&ws.run_dir(&run).join("gradients.csv"));
        }
        Command::SweepRatio { ratios, seed } => {
            let grid = ratios.clone().unwrap_or_else(|| ws.config().sweep_ratios.clone());
            let rows = ws.sweep_ratio(&grid, *seed, force)?;
            for r in rows.iter().filter(|r| r.scope == "seen_mean" || r.status != "ok") {
                match r.token_accuracy {
                    Some(a) => println!("ratio {:.4}: seen accuracy {a:.4}", r.budget_ratio),
                    None => println!("ratio {:.4}: {}", r.budget_ratio, r.status),
                }
            }
        }
        Command::RunAll(a) => {
            let run = run_spec(&ws, *a);
            let report = ws.run_all(&run, force)?;
            if let (Some(s), Some(u)) = (report.seen, report.unseen) {
                println!(
                    "{}: seen accuracy {:.4} bleu {:.2}; unseen accuracy {:.4} bleu {:.2}",
                    run.name(),
                    s.token_accuracy,
                    s.bleu,
                    u.token_accuracy,
                    u.bleu
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
