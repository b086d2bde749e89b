use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use recist_core::config::{validate_file, BackendKind, DatasetFormat, SimConfig};
use recist_core::knowledge::load_snapshot;
use recist_core::logs::to_jsonl;
use recist_core::reasoner::HashEmbedder;
use recist_core::sim::{run, SimError};

/// Exit status for bad configuration, unreadable inputs or write failures.
const EXIT_ERROR: u8 = 2;

#[derive(Parser)]
#[command(name = "recist", version, about = "Self-healing pipeline simulator")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides run.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides reasoner.backend: scripted, replay or remote.
    #[arg(long, global = true)]
    backend: Option<BackendKind>,
    /// Output directory; overrides run.out.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print nothing on success.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Runs the configured scenario and writes every output file.
    Run,
    /// Checks a configuration without running it.
    Validate,
    /// Parses a dataset into canonical JSONL records.
    Parse {
        /// cloud, zookeeper, hadoop, openssh or bgl.
        #[arg(long)]
        format: DatasetFormat,
        /// Year for syslog timestamps that omit it.
        #[arg(long, default_value_t = recist_core::logs::DEFAULT_BASE_YEAR)]
        base_year: i32,
        file: PathBuf,
    },
    /// Knowledge snapshot tools.
    Kb {
        #[command(subcommand)]
        action: KbAction,
    },
    /// Re-runs the configured scenario against a recorded transcript.
    Replay {
        transcript: PathBuf,
    },
}

#[derive(Subcommand)]
enum KbAction {
    /// Prints a summary of a snapshot.
    Inspect { snapshot: PathBuf },
    /// Syncs the records of `from` into `into` and emits the result.
    Merge { into: PathBuf, from: PathBuf },
}

#[derive(Debug)]
struct Failure {
    report: serde_json::Value,
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        Self { report: e.to_json() }
    }
}

fn failure(kind: &str, message: impl Into<String>) -> Failure {
    Failure {
        report: serde_json::json!({"error": kind, "message": message.into()}),
    }
}

fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| failure("input", format!("{}: {e}", path.display())))
}

fn load_config(cli: &Cli) -> Result<SimConfig, Failure> {
    let path = cli.config.as_ref().ok_or_else(|| failure("usage", "--config is required"))?;
    let mut c = SimConfig::load(path).map_err(|e| failure("config", e.to_string()))?;
    if let Some(s) = cli.seed {
        c.run.seed = s;
    }
    if let Some(b) = cli.backend {
        c.reasoner.backend = b;
    }
    if let Some(o) = &cli.out {
        c.run.out = o.clone();
    }
    Ok(c)
}

/// Writes `body` to `<out>/<name>` when an output directory is given,
/// otherwise to stdout.
fn emit(cli: &Cli, name: &str, body: &str) -> Result<(), Failure> {
    match &cli.out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| failure("io", format!("{}: {e}", dir.display())))?;
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| failure("io", format!("{}: {e}", p.display())))
        }
        None => {
            print!("{body}");
            Ok(())
        }
    }
}

fn run_config(cli: &Cli, config: SimConfig) -> Result<u8, Failure> {
    let out_dir = config.resolve(&config.run.out);
    let output = run(&config)
        .and_then(|o| o.write(&out_dir).map(|()| o))
        .map_err(|e| {
            let report = e.to_json();
            if std::fs::create_dir_all(&out_dir).is_ok() {
                let text = serde_json::to_string_pretty(&report).expect("reports serialize");
                let _ = std::fs::write(out_dir.join("error.json"), text + "\n");
            }
            Failure { report }
        })?;
    let s = &output.summary;
    if !cli.quiet {
        println!(
            "scenario {}: {} failures, {} best, {} escalated, {} unanswered, {} errors, resilience {}",
            s.scenario,
            s.failures,
            s.best,
            s.escalated,
            s.unanswered.len(),
            s.errors.len(),
            s.resilience
        );
        println!("outputs in {}", out_dir.display());
    }
    Ok(s.exit_code() as u8)
}

fn execute(cli: &Cli) -> Result<u8, Failure> {
    match &cli.command {
        Command::Run => run_config(cli, load_config(cli)?),
        Command::Replay { transcript } => {
            let mut c = load_config(cli)?;
            c.reasoner.backend = BackendKind::Replay;
            c.reasoner.transcript = Some(std::path::absolute(transcript).unwrap_or(transcript.clone()));
            run_config(cli, c)
        }
        Command::Validate => {
            let path = cli.config.as_ref().ok_or_else(|| failure("usage", "--config is required"))?;
            let report = validate_file(path);
            if !cli.quiet {
                for f in &report.findings {
                    println!("{f}");
                }
                if let Some(e) = &report.effective {
                    println!("# effective configuration\n{e}");
                }
            }
            Ok(u8::from(!report.is_ok()))
        }
        Command::Parse { format, base_year, file } => {
            let bytes = std::fs::read(file).map_err(|e| failure("input", format!("{}: {e}", file.display())))?;
            let parsed = format
                .parse(&bytes, *base_year)
                .map_err(|e| failure("input", e.to_string()))?;
            emit(cli, "records.jsonl", &to_jsonl(&parsed.records))?;
            if !cli.quiet {
                eprintln!(
                    "{} records, {} degraded, {} malformed",
                    parsed.records.len(),
                    parsed.degraded,
                    parsed.malformed.len()
                );
            }
            Ok(0)
        }
        Command::Kb { action } => match action {
            KbAction::Inspect { snapshot } => {
                let store = load_snapshot(&read_text(snapshot)?).map_err(|e| failure("input", e.to_string()))?;
                let mut s = format!(
                    "topics {}\npartitions {}\nrecords {}\n",
                    store.topic_count(),
                    store.partition_count(),
                    store.record_count()
                );
                for t in store.topics() {
                    s.push_str(&format!(
                        "topic {} {:?}: {} partitions, {} records\n",
                        t.id,
                        t.label,
                        t.partitions.len(),
                        t.members().count()
                    ));
                }
                print!("{s}");
                Ok(0)
            }
            KbAction::Merge { into, from } => {
                let mut target = load_snapshot(&read_text(into)?).map_err(|e| failure("input", e.to_string()))?;
                let source = load_snapshot(&read_text(from)?).map_err(|e| failure("input", e.to_string()))?;
                let report = target
                    .sync_from(&source, &HashEmbedder::default())
                    .map_err(|e| failure("knowledge", e.to_string()))?;
                emit(cli, "knowledge.txt", &target.snapshot())?;
                if !cli.quiet {
                    eprintln!(
                        "{} inserted, {} replaced, {} conflicts",
                        report.inserted.len(),
                        report.replaced.len(),
                        report.conflicts.len()
                    );
                }
                Ok(0)
            }
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            let text = serde_json::to_string_pretty(&f.report).expect("reports serialize");
            eprintln!("{text}");
            if let Some(dir) = &cli.out {
                if std::fs::create_dir_all(dir).is_ok() {
                    let _ = std::fs::write(dir.join("error.json"), text + "\n");
                }
            }
            ExitCode::from(EXIT_ERROR)
        }
    }
}
