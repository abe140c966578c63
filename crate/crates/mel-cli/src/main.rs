//! `mel` — generate tasks, train, evaluate, compare runs, and export run
//! artifacts.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or parse
//! error, 3 remote-backend failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mel_core::config::{parse_gen_spec, ConfigMap, EvalSettings, TrainSettings};
use mel_core::error::{MelError, Result};
use mel_core::metaexp::{MeStatus, MetaExperiencePool};
use mel_core::taskenv::{self, Vocabulary};
use mel_core::{eval, export, trainer};

#[derive(Parser)]
#[command(name = "mel", version, about = "Group-relative policy training with a meta-experience pipeline on verifiable modular-arithmetic tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config file plus ad-hoc overrides, shared by every training/eval
/// command.
#[derive(Args)]
struct ConfigArgs {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set train.seed=3 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ConfigMap> {
        let mut map = match &self.config {
            Some(path) => ConfigMap::from_file(path)?,
            None => ConfigMap::new(),
        };
        map.apply_overrides(&self.overrides)?;
        Ok(map)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a verifiable task file.
    GenTasks {
        /// Generation spec, e.g. "family=modchain,count=100,seed=7,difficulty=2..3,moduli=5|7".
        #[arg(long)]
        gen: String,
        /// Output task file (JSON lines).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a policy, writing artifacts into the run directory.
    Train {
        #[arg(long)]
        task_file: PathBuf,
        #[arg(long)]
        run_dir: PathBuf,
        /// Continue from the run's latest checkpoint.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Score a trained run on a task file.
    Eval {
        #[arg(long)]
        task_file: PathBuf,
        /// Run directory; its latest checkpoint is evaluated.
        #[arg(long, conflicts_with = "checkpoint")]
        run_dir: Option<PathBuf>,
        /// Evaluate a specific checkpoint directory instead.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also write the full report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Evaluate two arms of runs on identical tasks and seeds.
    Compare {
        #[arg(long)]
        task_file: PathBuf,
        /// Run directories in arm A (comma separated or repeated).
        #[arg(long, value_delimiter = ',', required = true)]
        arm_a: Vec<PathBuf>,
        /// Run directories in arm B.
        #[arg(long, value_delimiter = ',', required = true)]
        arm_b: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Inspect the meta-experience pool of a run.
    Pool {
        #[command(subcommand)]
        command: PoolCommand,
    },
    /// Derive files from a finished run.
    Export {
        what: ExportKind,
        #[arg(long)]
        run_dir: PathBuf,
    },
}

#[derive(Subcommand)]
enum PoolCommand {
    /// Print a kind-by-status table, and matching records with --status.
    Inspect {
        /// Run directory containing pool.jsonl.
        #[arg(long, conflicts_with = "pool")]
        run_dir: Option<PathBuf>,
        /// A pool file directly.
        #[arg(long)]
        pool: Option<PathBuf>,
        /// Print records with this status as JSON lines.
        #[arg(long)]
        status: Option<StatusFilter>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StatusFilter {
    Candidate,
    Validated,
    Rejected,
}

impl From<StatusFilter> for MeStatus {
    fn from(s: StatusFilter) -> MeStatus {
        match s {
            StatusFilter::Candidate => MeStatus::Candidate,
            StatusFilter::Validated => MeStatus::Validated,
            StatusFilter::Rejected => MeStatus::Rejected,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ExportKind {
    MetricsCsv,
    CurvesSvg,
    PoolSummary,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version land here too; only true usage errors are
            // failures.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let vocab = Vocabulary::modchain();
    match cli.command {
        Command::GenTasks { gen, out } => {
            let spec = parse_gen_spec(&gen)?;
            let tasks = taskenv::generate_tasks(&vocab, &spec)?;
            taskenv::save_tasks(&out, &tasks)?;
            println!("wrote {} tasks to {}", tasks.len(), out.display());
            Ok(())
        }
        Command::Train { task_file, run_dir, resume, config } => {
            let settings = TrainSettings::from_map(&config.load()?)?;
            let tasks = taskenv::load_tasks(&vocab, &task_file)?;
            let trainer = trainer::Trainer::new(vocab, settings, &run_dir)?;
            let mut state = if resume {
                let ck = trainer::latest_checkpoint(&run_dir)?;
                println!("resuming from {}", ck.display());
                trainer::load_checkpoint(&ck)?
            } else {
                trainer.init_state()
            };
            trainer.run(&mut state, &tasks)?;
            let events = export::read_events(&run_dir)?;
            if let Some(last) = events.last() {
                println!(
                    "completed step {}: mean reward {:.4}, retention {:.4}, pool {} validated / {} total",
                    last.step, last.mean_reward, last.retention_ratio, last.validated, last.candidates
                );
            }
            println!("run artifacts in {}", run_dir.display());
            Ok(())
        }
        Command::Eval { task_file, run_dir, checkpoint, out, config } => {
            let settings = EvalSettings::from_map(&config.load()?)?;
            let tasks = taskenv::load_tasks(&vocab, &task_file)?;
            let ck = match (checkpoint, run_dir) {
                (Some(ck), _) => ck,
                (None, Some(dir)) => trainer::latest_checkpoint(&dir)?,
                (None, None) => {
                    return Err(MelError::Config(
                        "pass --run-dir or --checkpoint to select a policy".into(),
                    ))
                }
            };
            let state = trainer::load_checkpoint(&ck)?;
            let report = eval::evaluate(&vocab, &state.params, &tasks, &settings)?;
            println!(
                "Pass@1 / Avg@{k} / Pass@{k}: {}",
                eval::format_metrics_row(report.pass_at_1, report.avg_at_k, report.pass_at_k),
                k = report.k
            );
            for (family, m) in &report.per_family {
                println!(
                    "  {family} ({} tasks): {}",
                    m.tasks,
                    eval::format_metrics_row(m.pass_at_1, m.avg_at_k, m.pass_at_k)
                );
            }
            if report.extraction_failures > 0 {
                println!("greedy extraction failures: {}", report.extraction_failures);
            }
            if let Some(path) = out {
                write_json(&path, &report)?;
                println!("report written to {}", path.display());
            }
            Ok(())
        }
        Command::Compare { task_file, arm_a, arm_b, out, config } => {
            let settings = EvalSettings::from_map(&config.load()?)?;
            let tasks = taskenv::load_tasks(&vocab, &task_file)?;
            let report = eval::compare_runs(&vocab, &arm_a, &arm_b, &tasks, &settings)?;
            let k = settings.k;
            println!(
                "arm A median Pass@1 / Avg@{k} / Pass@{k}: {}",
                arm_row(&report.arm_a)
            );
            println!(
                "arm B median Pass@1 / Avg@{k} / Pass@{k}: {}",
                arm_row(&report.arm_b)
            );
            println!(
                "median deltas (A - B): Pass@1 {:+.4}, Avg@{k} {:+.4}, Pass@{k} {:+.4}",
                report.delta_pass_at_1, report.delta_avg_at_k, report.delta_pass_at_k
            );
            if !report.per_seed.is_empty() {
                println!(
                    "per-seed Pass@1 wins: A {} / B {} / ties {}",
                    report.wins_a, report.wins_b, report.ties
                );
                for s in &report.per_seed {
                    println!(
                        "  seed {}: A {:.4} vs B {:.4} ({:+.4})",
                        s.index, s.pass_at_1_a, s.pass_at_1_b, s.delta
                    );
                }
            }
            if let Some(path) = out {
                write_json(&path, &report)?;
                println!("report written to {}", path.display());
            }
            Ok(())
        }
        Command::Pool { command: PoolCommand::Inspect { run_dir, pool, status } } => {
            let path = match (pool, run_dir) {
                (Some(p), _) => p,
                (None, Some(dir)) => dir.join("pool.jsonl"),
                (None, None) => {
                    return Err(MelError::Config(
                        "pass --run-dir or --pool to locate the pool".into(),
                    ))
                }
            };
            let pool = MetaExperiencePool::load(&path)?;
            print!("{}", export::pool_summary(&pool).render());
            if let Some(filter) = status {
                let want: MeStatus = filter.into();
                for me in pool.entries.iter().filter(|e| e.status == want) {
                    let line = serde_json::to_string(me)
                        .map_err(|e| MelError::Data(e.to_string()))?;
                    println!("{line}");
                }
            }
            Ok(())
        }
        Command::Export { what, run_dir } => {
            let path = match what {
                ExportKind::MetricsCsv => export::write_metrics_csv(&run_dir)?,
                ExportKind::CurvesSvg => export::write_curves_svg(&run_dir)?,
                ExportKind::PoolSummary => {
                    let pool = MetaExperiencePool::load(&run_dir.join("pool.jsonl"))?;
                    let path = run_dir.join("pool_summary.txt");
                    std::fs::write(&path, export::pool_summary(&pool).render())?;
                    path
                }
            };
            println!("wrote {}", path.display());
            Ok(())
        }
    }
}

fn arm_row(arm: &eval::ArmSummary) -> String {
    let avg = median_field(arm, |r| r.avg_at_k);
    let pk = median_field(arm, |r| r.pass_at_k);
    eval::format_metrics_row(arm.median_pass_at_1, avg, pk)
}

fn median_field(arm: &eval::ArmSummary, f: impl Fn(&eval::RunEval) -> f64) -> f64 {
    eval::median(&arm.runs.iter().map(f).collect::<Vec<_>>())
}

fn write_json<T: serde::Serialize>(path: &std::path::Path, value: &T) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| MelError::Data(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}
