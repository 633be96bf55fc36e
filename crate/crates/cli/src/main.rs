//! `memloop` command-line interface.

mod overrides;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use memloop::config::StreamSpec;
use memloop::environments::load_tasks;
use memloop::harness::{build_stream, read_config, read_results, RunControl, StreamRunner, RESULTS_FILE};
use memloop::metrics::{compute_report_with, write_report, RunReport, DEFAULT_ROLLING_WINDOW};
use memloop::retrieval::{top_k, Embedder, HashEmbedder, RetrievalConfig};
use memloop::snapshot;
use serde_json::Value;
use tracing::error;

const EXIT_VALIDATION: u8 = 2;
const EXIT_ABORTED: u8 = 3;

#[derive(Parser)]
#[command(
    name = "memloop",
    version,
    about = "Run and evaluate self-evolving memory agents on task streams"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one stream per config file and print a summary line for each.
    Run(RunArgs),
    /// Tabulate metrics for two or more run directories.
    Compare {
        #[arg(required = true, num_args = 1..)]
        dirs: Vec<PathBuf>,
        /// Where to write the comparison CSV.
        #[arg(long, default_value = "compare.csv")]
        out: PathBuf,
    },
    /// Recompute report.json and report.csv from a run directory.
    Report {
        dir: PathBuf,
        #[arg(long, default_value_t = DEFAULT_ROLLING_WINDOW)]
        window: usize,
    },
    /// List a memory snapshot, or print the top-k entries for a query.
    SnapshotInspect {
        snapshot: PathBuf,
        #[arg(long)]
        query: Option<String>,
        #[arg(short, long, default_value_t = 4)]
        k: usize,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(required = true, num_args = 1..)]
    configs: Vec<PathBuf>,
    /// Dotted-path override, e.g. `--set retrieval.k=8`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    ordering: Option<String>,
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    run_id: Option<String>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Continue each run from its last checkpoint.
    #[arg(long)]
    resume: bool,
    /// Number of streams to run at once.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
}

/// Failure with its exit code.
struct Failure(u8, String);

impl Failure {
    fn invalid(msg: impl Into<String>) -> Self {
        Failure(EXIT_VALIDATION, msg.into())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Compare { dirs, out } => cmd_compare(&dirs, &out),
        Command::Report { dir, window } => cmd_report(&dir, window),
        Command::SnapshotInspect { snapshot, query, k } => cmd_snapshot_inspect(&snapshot, query.as_deref(), k),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

fn init_logging(level: &str) {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(level));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

fn absolute(p: &Path) -> PathBuf {
    std::env::current_dir()
        .map(|d| d.join(p))
        .unwrap_or_else(|_| p.to_path_buf())
}

/// Loads a config file, applies overrides and resolves relative paths
/// against the file's directory.
fn load_spec(path: &Path, args: &RunArgs) -> Result<StreamSpec, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))?;
    let mut value: Value =
        serde_json::from_str(&text).map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))?;
    let mut sets = Vec::new();
    for s in &args.sets {
        sets.push(overrides::parse(s).map_err(Failure::invalid)?);
    }
    let flags = [
        ("ordering", args.ordering.clone().map(Value::String)),
        ("policy", args.policy.clone().map(Value::String)),
        ("run_id", args.run_id.clone().map(Value::String)),
        (
            "output_dir",
            args.output_dir
                .as_deref()
                .map(|p| Value::String(absolute(p).to_string_lossy().into_owned())),
        ),
    ];
    for (key, v) in flags {
        if let Some(v) = v {
            sets.push((vec![key.to_string()], v));
        }
    }
    for (keys, v) in sets {
        overrides::apply(&mut value, &keys, v).map_err(Failure::invalid)?;
    }
    let mut spec: StreamSpec =
        serde_json::from_value(value).map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))?;
    spec.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    spec.validate().map_err(|e| Failure::invalid(e.to_string()))?;
    Ok(spec)
}

fn summary_line(report: &RunReport) -> String {
    let steps = report.avg_steps.map_or_else(|| "-".to_string(), |s| format!("{s:.2}"));
    format!(
        "{} S={:.4} P={:.4} steps={steps}",
        report.run_id, report.success_rate, report.progress_rate
    )
}

fn execute(spec: &StreamSpec, resume: bool) -> Result<String, Failure> {
    let tasks = load_tasks(&spec.tasks_path).map_err(|e| Failure::invalid(e.to_string()))?;
    let stream = build_stream(tasks.clone(), spec.ordering).map_err(|e| Failure::invalid(e.to_string()))?;
    let backend = spec.backend.build().map_err(|e| Failure::invalid(e.to_string()))?;
    let embedder = spec.embedder.build().map_err(|e| Failure::invalid(e.to_string()))?;
    let dir = spec.run_dir();
    if resume && !dir.is_dir() {
        return Err(Failure::invalid(format!("nothing to resume in {}", dir.display())));
    }

    let aborted = |e: memloop::Error| {
        error!(run_id = %spec.run_id, "stream aborted: {e}");
        Failure(EXIT_ABORTED, format!("{}: stream aborted: {e}", spec.run_id))
    };
    let run = StreamRunner::new(spec, backend.as_ref(), embedder.as_ref())
        .with_run_dir(&dir)
        .run_with(
            &tasks,
            RunControl {
                resume,
                ..RunControl::default()
            },
        )
        .map_err(aborted)?;
    let embeddings = stream
        .iter()
        .map(|t| embedder.embed(&t.input))
        .collect::<memloop::Result<Vec<_>>>()
        .map_err(aborted)?;
    let report =
        compute_report_with(&spec.run_id, &run.results, &embeddings, DEFAULT_ROLLING_WINDOW).map_err(aborted)?;
    write_report(&dir, &report, &run.results).map_err(aborted)?;
    Ok(summary_line(&report))
}

fn cmd_run(args: RunArgs) -> Result<(), Failure> {
    if args.parallel == 0 {
        return Err(Failure::invalid("--parallel must be at least 1"));
    }
    let specs = args
        .configs
        .iter()
        .map(|p| load_spec(p, &args))
        .collect::<Result<Vec<_>, _>>()?;
    init_logging(&specs[0].log_level);

    let mut outcomes: Vec<Option<Result<String, Failure>>> = specs.iter().map(|_| None).collect();
    for (chunk_specs, chunk_out) in specs.chunks(args.parallel).zip(outcomes.chunks_mut(args.parallel)) {
        std::thread::scope(|scope| {
            let handles: Vec<_> = chunk_specs
                .iter()
                .map(|spec| scope.spawn(move || execute(spec, args.resume)))
                .collect();
            for (slot, h) in chunk_out.iter_mut().zip(handles) {
                *slot = Some(
                    h.join()
                        .unwrap_or_else(|_| Err(Failure(EXIT_ABORTED, "worker panicked".into()))),
                );
            }
        });
    }

    let mut worst: Option<Failure> = None;
    for outcome in outcomes.into_iter().flatten() {
        match outcome {
            Ok(line) => println!("{line}"),
            Err(f) => {
                if worst.as_ref().is_none_or(|w| f.0 > w.0) {
                    worst = Some(f);
                } else {
                    eprintln!("error: {}", f.1);
                }
            }
        }
    }
    worst.map_or(Ok(()), Err)
}

fn load_run(dir: &Path, window: usize) -> Result<(StreamSpec, RunReport, Vec<memloop::harness::TaskResult>), Failure> {
    let unreadable = |e: memloop::Error| Failure::invalid(format!("{}: {e}", dir.display()));
    let spec = read_config(dir).map_err(unreadable)?;
    let results = read_results(&dir.join(RESULTS_FILE)).map_err(unreadable)?;
    let report = compute_report_with(&spec.run_id, &results, &[], window).map_err(unreadable)?;
    Ok((spec, report, results))
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.digits$}"))
}

fn cmd_compare(dirs: &[PathBuf], out: &Path) -> Result<(), Failure> {
    if dirs.len() < 2 {
        return Err(Failure::invalid("compare needs at least two run directories"));
    }
    let mut rows = Vec::new();
    for d in dirs {
        let (spec, report, _) = load_run(d, DEFAULT_ROLLING_WINDOW)?;
        rows.push((spec, report));
    }
    rows.sort_by(|a, b| a.1.run_id.cmp(&b.1.run_id));

    let header = [
        "run_id",
        "policy",
        "ordering",
        "tasks",
        "S",
        "P",
        "accuracy",
        "avg_steps",
        "pruning",
    ];
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|(spec, r)| {
            vec![
                r.run_id.clone(),
                spec.policy.to_string(),
                spec.ordering.to_string(),
                r.n_tasks.to_string(),
                format!("{:.4}", r.success_rate),
                format!("{:.4}", r.progress_rate),
                fmt_opt(r.accuracy, 4),
                fmt_opt(r.avg_steps, 2),
                format!("{:.4}", r.pruning.rate),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            table
                .iter()
                .map(|row| row[c].len())
                .chain([header[c].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut text = String::new();
    for row in std::iter::once(header.map(String::from).to_vec()).chain(table.iter().cloned()) {
        let cells: Vec<String> = row.iter().zip(&widths).map(|(cell, w)| format!("{cell:<w$}")).collect();
        let _ = writeln!(text, "{}", cells.join("  ").trim_end());
    }
    print!("{text}");

    let mut w = csv::Writer::from_path(out).map_err(|e| Failure::invalid(format!("{}: {e}", out.display())))?;
    let csv_err = |e: csv::Error| Failure::invalid(format!("{}: {e}", out.display()));
    w.write_record(header).map_err(csv_err)?;
    for row in &table {
        w.write_record(row).map_err(csv_err)?;
    }
    w.flush()
        .map_err(|e| Failure::invalid(format!("{}: {e}", out.display())))
}

fn cmd_report(dir: &Path, window: usize) -> Result<(), Failure> {
    if window == 0 {
        return Err(Failure::invalid("--window must be positive"));
    }
    let (spec, _, results) = load_run(dir, window)?;
    let embedder = spec.embedder.build().map_err(|e| Failure::invalid(e.to_string()))?;
    let tasks = load_tasks(&spec.tasks_path).ok();
    // the similarity profile needs the task file; skip it when it moved
    let embeddings = match tasks {
        Some(t) if t.len() == results.len() => t
            .iter()
            .map(|t| embedder.embed(&t.input))
            .collect::<memloop::Result<Vec<_>>>()
            .map_err(|e| Failure::invalid(e.to_string()))?,
        _ => Vec::new(),
    };
    let report = compute_report_with(&spec.run_id, &results, &embeddings, window)
        .map_err(|e| Failure::invalid(format!("{}: {e}", dir.display())))?;
    write_report(dir, &report, &results).map_err(|e| Failure::invalid(e.to_string()))?;
    println!("{}", summary_line(&report));
    Ok(())
}

fn one_line(s: &str) -> String {
    s.replace('\n', " | ")
}

fn cmd_snapshot_inspect(path: &Path, query: Option<&str>, k: usize) -> Result<(), Failure> {
    let memory = snapshot::load(path).map_err(|e| Failure::invalid(e.to_string()))?;
    println!(
        "policy={} entries={} active={} next_id={}",
        memory.policy,
        memory.len(),
        memory.active_count(),
        memory.next_id()
    );
    let Some(query) = query else {
        for e in memory.entries() {
            println!(
                "{:>5}  {:<9} utility={:<3} active={:<5} {}",
                e.id,
                e.feedback.outcome,
                e.utility,
                e.active,
                one_line(&e.task_input)
            );
        }
        return Ok(());
    };
    let Some(first) = memory.entries().first() else {
        return Ok(());
    };
    let embedder = HashEmbedder::new(first.embedding.len()).map_err(|e| Failure::invalid(e.to_string()))?;
    let q = embedder.embed(query).map_err(|e| Failure::invalid(e.to_string()))?;
    let cfg = RetrievalConfig {
        k,
        ..RetrievalConfig::default()
    };
    cfg.validate().map_err(|e| Failure::invalid(e.to_string()))?;
    let hits = top_k(&memory, &q, &cfg).map_err(|e| Failure::invalid(e.to_string()))?;
    for (rank, hit) in hits.iter().enumerate() {
        let e = memory.get(hit.entry_id).expect("retrieved ids exist");
        println!(
            "{:>2}  id={:<5} score={:.4}  {}  {}",
            rank + 1,
            hit.entry_id,
            hit.score,
            e.feedback.outcome,
            one_line(&e.task_input)
        );
    }
    Ok(())
}
