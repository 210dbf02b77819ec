//! The `runner` command line.
//!
//! ```text
//! runner [--mpi-config-file cfg.yml] [--software-catalog site.yml] [--outdir out]
//!        [--parallel-steps] [--input k=v]... <document> [job]
//! runner perfstats <glob> [--format text|json]
//! ```
//!
//! stdout carries only the final outputs JSON; logs, diagnostics and the
//! tools' own stdout go to stderr. Exit codes: 0 success, 1 execution failure,
//! 2 usage or validation error.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use tracing::level_filters::LevelFilter;
use tracing_subscriber::EnvFilter;

use crate::expr::{JobOrder, Value};
use crate::model::{load_document, Document, InputParameter};
use crate::mpi_config::load_config;
use crate::perfstats::{self, PerfError, ReportFormat};
use crate::software::load_catalog;
use crate::workflow::{run_single_tool, run_workflow, RunOptions, ToolRun, WorkflowError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "runner", version, about = "Run CWL tools and workflows, with MPI launcher support")]
#[command(args_conflicts_with_subcommands = true, subcommand_negates_reqs = true)]
pub struct CliInvocation {
    #[command(subcommand)]
    pub command: Option<Command>,

    /// CommandLineTool or Workflow document.
    #[arg(required = true)]
    pub document: Option<PathBuf>,

    /// Job order file (YAML or JSON).
    pub job: Option<PathBuf>,

    /// Platform MPI launcher configuration (YAML).
    #[arg(long, value_name = "PATH")]
    pub mpi_config_file: Option<PathBuf>,

    /// Site software catalog used for SoftwareRequirement (YAML).
    #[arg(long, value_name = "PATH")]
    pub software_catalog: Option<PathBuf>,

    #[arg(long, value_name = "DIR", default_value = "./out")]
    pub outdir: PathBuf,

    /// Run independent workflow steps concurrently.
    #[arg(long)]
    pub parallel_steps: bool,

    /// Inline input `key=value`; the job file wins on conflict.
    #[arg(long = "input", value_name = "KEY=VALUE")]
    pub inputs: Vec<String>,

    /// Only print errors; do not relay tool output.
    #[arg(long, short, conflicts_with = "verbose")]
    pub quiet: bool,

    #[arg(long, short)]
    pub verbose: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Aggregate per-rank performance files matching a glob.
    Perfstats {
        pattern: String,
        #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
        format: ReportFormat,
    },
}

/// A terminated invocation: exit code plus the message for stderr.
struct Exit {
    code: i32,
    message: String,
}

impl Exit {
    fn usage(message: impl Into<String>) -> Self {
        Exit {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn failure(message: impl Into<String>) -> Self {
        Exit {
            code: EXIT_FAILURE,
            message: message.into(),
        }
    }
}

fn init_logging(quiet: bool, verbose: bool) {
    let level = if quiet {
        LevelFilter::ERROR
    } else if verbose {
        LevelFilter::INFO
    } else {
        LevelFilter::WARN
    };
    let filter = EnvFilter::builder()
        .with_default_directive(level.into())
        .from_env_lossy();
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .without_time()
        .with_target(false)
        .try_init();
}

/// Runs the command line and returns the process exit code.
pub fn main<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match CliInvocation::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    init_logging(cli.quiet, cli.verbose);
    let result = match &cli.command {
        Some(Command::Perfstats { pattern, format }) => perfstats_command(pattern, *format),
        None => run_document(&cli),
    };
    match result {
        Ok(stdout) => {
            let mut out = std::io::stdout().lock();
            if out.write_all(stdout.as_bytes()).and_then(|_| out.flush()).is_err() {
                return EXIT_FAILURE;
            }
            EXIT_OK
        }
        Err(exit) => {
            if !exit.message.is_empty() {
                eprintln!("{}", exit.message);
            }
            exit.code
        }
    }
}

fn perfstats_command(pattern: &str, format: ReportFormat) -> Result<String, Exit> {
    let records = perfstats::load_rank_files::<f64>(pattern).map_err(perf_exit)?;
    let stats = perfstats::aggregate(&records).map_err(perf_exit)?;
    Ok(perfstats::render_report(&stats, format))
}

fn perf_exit(e: PerfError) -> Exit {
    let message = format!("error: perfstats: {e}");
    match e {
        PerfError::Glob { .. } => Exit::usage(message),
        _ => Exit::failure(message),
    }
}

fn load_job(cli: &CliInvocation, inputs: &[InputParameter]) -> Result<JobOrder, Exit> {
    let cwd = std::env::current_dir().unwrap_or_default();
    let mut job = JobOrder::from_pairs(cli.inputs.iter().map(String::as_str), inputs, &cwd)
        .map_err(|e| Exit::usage(format!("error: --input: {e}")))?;
    if let Some(path) = &cli.job {
        let label = path.display();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Exit::usage(format!("error: {label}: cannot read job order: {e}")))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let from_file =
            JobOrder::from_yaml_str(&text, base).map_err(|e| Exit::usage(format!("error: {label}: {e}")))?;
        job.values.extend(from_file.values);
    }
    let job_label = cli
        .job
        .as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_else(|| "job order".to_string());
    job.complete(inputs)
        .map_err(|e| Exit::usage(format!("error: {job_label}: {e}")))
}

fn outputs_json(outputs: &BTreeMap<String, Value>) -> String {
    let map: serde_json::Map<String, serde_json::Value> =
        outputs.iter().map(|(k, v)| (k.clone(), v.to_json())).collect();
    let mut text = serde_json::to_string_pretty(&serde_json::Value::Object(map)).expect("outputs serialize");
    text.push('\n');
    text
}

fn relay_tool_output(quiet: bool, label: &str, run: &ToolRun) {
    if quiet {
        return;
    }
    if let Ok(text) = std::fs::read_to_string(&run.result.stdout_path) {
        if !text.is_empty() {
            eprintln!("[{label}] stdout:");
            eprint!("{text}");
            if !text.ends_with('\n') {
                eprintln!();
            }
        }
    }
}

fn run_document(cli: &CliInvocation) -> Result<String, Exit> {
    let document_path = cli.document.as_deref().expect("clap requires a document");
    let label = document_path.display().to_string();

    let cfg = load_config(cli.mpi_config_file.as_deref()).map_err(|e| Exit::usage(format!("error: {e}")))?;
    let catalog = match &cli.software_catalog {
        Some(path) => Some(load_catalog(path).map_err(|e| Exit::usage(format!("error: {e}")))?),
        None => None,
    };

    let parsed = load_document(document_path).map_err(|e| Exit::usage(e.to_string()))?;
    if !cli.quiet {
        for warning in &parsed.warnings {
            eprintln!("{warning}");
        }
    }

    let mut opts = RunOptions::new(&cli.outdir);
    opts.parallel = cli.parallel_steps;
    opts.catalog = catalog;

    match &parsed.document {
        Document::Tool(tool) => {
            let job = load_job(cli, &tool.inputs)?;
            let name = document_path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "tool".to_string());
            let (run, outputs) = run_single_tool(tool, &name, &job, &cfg, &opts)
                .map_err(|e| Exit::failure(format!("error: {label}: {e}")))?;
            relay_tool_output(cli.quiet, &name, &run);
            Ok(outputs_json(&outputs))
        }
        Document::Workflow(wf) => {
            let job = load_job(cli, &wf.inputs)?;
            match run_workflow(wf, &job, &cfg, &opts) {
                Ok(run) => {
                    for (id, step) in &run.steps {
                        relay_tool_output(cli.quiet, id, step);
                    }
                    Ok(outputs_json(&run.outputs))
                }
                Err(e @ (WorkflowError::Input(_) | WorkflowError::Graph(_))) => {
                    Err(Exit::usage(format!("error: {label}: {e}")))
                }
                Err(e) => Err(Exit::failure(format!("error: {label}: {e}"))),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flags_and_positionals() {
        let cli = CliInvocation::try_parse_from([
            "runner",
            "--mpi-config-file",
            "cfg.yml",
            "--input",
            "nproc=2",
            "--parallel-steps",
            "tool.cwl",
            "job.yml",
        ])
        .unwrap();
        assert_eq!(cli.document.as_deref(), Some(Path::new("tool.cwl")));
        assert_eq!(cli.job.as_deref(), Some(Path::new("job.yml")));
        assert_eq!(cli.mpi_config_file.as_deref(), Some(Path::new("cfg.yml")));
        assert_eq!(cli.outdir, PathBuf::from("./out"));
        assert_eq!(cli.inputs, ["nproc=2"]);
        assert!(cli.parallel_steps);
    }

    #[test]
    fn perfstats_subcommand() {
        let cli = CliInvocation::try_parse_from(["runner", "perfstats", "r/*.json", "--format", "json"]).unwrap();
        match cli.command {
            Some(Command::Perfstats { pattern, format }) => {
                assert_eq!(pattern, "r/*.json");
                assert_eq!(format, ReportFormat::Json);
            }
            None => panic!("expected subcommand"),
        }
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(main(["runner"]), EXIT_USAGE);
        assert_eq!(main(["runner", "--no-such-flag", "x.cwl"]), EXIT_USAGE);
        assert_eq!(main(["runner", "/nonexistent/missing.cwl"]), EXIT_USAGE);
    }

    #[test]
    fn outputs_json_sorted() {
        let mut outputs = BTreeMap::new();
        outputs.insert("b".to_string(), Value::Int(1));
        outputs.insert("a".to_string(), Value::String("x".into()));
        assert_eq!(outputs_json(&outputs), "{\n  \"a\": \"x\",\n  \"b\": 1\n}\n");
        assert_eq!(outputs_json(&BTreeMap::new()), "{}\n");
    }
}
