//! A stand-in MPI job launcher for machines without an MPI library.
//!
//! `mock-mpiexec -n K [flags...] cmd args...` starts K concurrent copies of
//! `cmd`, each with `MOCK_MPI_RANK` (0..K-1) and `MOCK_MPI_SIZE` (K) added to
//! the inherited environment, and exits with the largest child exit code.
//! Once every copy has exited it writes `mock-mpi.trace.json` to the current
//! directory:
//!
//! ```json
//! {"argv":["mock-mpiexec","-n","2","echo","hi"],"env_names":["HOME","MOCK_MPI_RANK","MOCK_MPI_SIZE","PATH"],"nproc":2}
//! ```
//!
//! Keys are sorted and the file ends with a newline. Leading flags other than
//! `-n`/`-np` are recorded but ignored; they cannot take a separate value
//! argument (use `--flag=value`).

use std::collections::BTreeSet;
use std::io;
use std::path::Path;
use std::process::{Child, Command};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const TRACE_FILE: &str = "mock-mpi.trace.json";
pub const RANK_VAR: &str = "MOCK_MPI_RANK";
pub const SIZE_VAR: &str = "MOCK_MPI_SIZE";

/// Exit code for usage errors.
pub const EXIT_USAGE: i32 = 2;
/// Exit code when the command cannot be found, matching shells.
pub const EXIT_NOT_FOUND: i32 = 127;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MockLaunchSpec {
    pub nproc: u32,
    /// Leading flags other than the process count, in order.
    pub flags: Vec<String>,
    pub command: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockTrace {
    pub argv: Vec<String>,
    pub env_names: Vec<String>,
    pub nproc: u32,
}

impl MockTrace {
    pub fn read(path: &Path) -> io::Result<MockTrace> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }

    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string(self).expect("trace always serializes");
        out.push('\n');
        out
    }
}

#[derive(Debug, Error)]
pub enum MockError {
    #[error("usage: mock-mpiexec -n <count> [flags...] <command> [args...]: {0}")]
    Usage(String),
    #[error("{0}: command not found")]
    NotFound(String),
    #[error("failed to start {program}: {source}")]
    Spawn {
        program: String,
        #[source]
        source: io::Error,
    },
    #[error("cannot write {TRACE_FILE}: {0}")]
    Trace(#[source] io::Error),
}

impl MockError {
    pub fn exit_code(&self) -> i32 {
        match self {
            MockError::Usage(_) => EXIT_USAGE,
            MockError::NotFound(_) => EXIT_NOT_FOUND,
            MockError::Spawn { .. } | MockError::Trace(_) => 1,
        }
    }
}

/// Parses the launcher arguments (without the program name).
pub fn parse_launch(args: &[String]) -> Result<MockLaunchSpec, MockError> {
    let mut nproc = None;
    let mut flags = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let arg = &args[i];
        match arg.as_str() {
            "-n" | "-np" => {
                let value = args
                    .get(i + 1)
                    .ok_or_else(|| MockError::Usage(format!("{arg} needs a value")))?;
                let count: u32 = value
                    .parse()
                    .map_err(|_| MockError::Usage(format!("invalid process count {value:?}")))?;
                if count < 1 {
                    return Err(MockError::Usage("process count must be at least 1".into()));
                }
                nproc = Some(count);
                i += 2;
            }
            "--" => {
                i += 1;
                break;
            }
            flag if flag.starts_with('-') => {
                flags.push(flag.to_string());
                i += 1;
            }
            _ => break,
        }
    }
    let nproc = nproc.ok_or_else(|| MockError::Usage("missing -n".into()))?;
    let command = args[i..].to_vec();
    if command.is_empty() {
        return Err(MockError::Usage("missing command".into()));
    }
    Ok(MockLaunchSpec { nproc, flags, command })
}

fn exit_code_of(status: std::process::ExitStatus) -> i32 {
    if let Some(code) = status.code() {
        return code;
    }
    #[cfg(unix)]
    {
        use std::os::unix::process::ExitStatusExt;
        128 + status.signal().unwrap_or(0)
    }
    #[cfg(not(unix))]
    1
}

/// Runs the copies and writes the trace into `trace_dir`.
pub fn launch(spec: &MockLaunchSpec, argv: &[String], trace_dir: &Path) -> Result<i32, MockError> {
    let mut children: Vec<Child> = Vec::with_capacity(spec.nproc as usize);
    for rank in 0..spec.nproc {
        let spawned = Command::new(&spec.command[0])
            .args(&spec.command[1..])
            .env(RANK_VAR, rank.to_string())
            .env(SIZE_VAR, spec.nproc.to_string())
            .spawn();
        match spawned {
            Ok(child) => children.push(child),
            Err(source) => {
                for mut child in children {
                    let _ = child.kill();
                    let _ = child.wait();
                }
                return Err(if source.kind() == io::ErrorKind::NotFound {
                    MockError::NotFound(spec.command[0].clone())
                } else {
                    MockError::Spawn {
                        program: spec.command[0].clone(),
                        source,
                    }
                });
            }
        }
    }

    let mut worst = 0;
    for mut child in children {
        let status = child.wait().map_err(|source| MockError::Spawn {
            program: spec.command[0].clone(),
            source,
        })?;
        worst = worst.max(exit_code_of(status));
    }

    let mut env_names: BTreeSet<String> = std::env::vars_os()
        .map(|(k, _)| k.to_string_lossy().into_owned())
        .collect();
    env_names.insert(RANK_VAR.to_string());
    env_names.insert(SIZE_VAR.to_string());
    let trace = MockTrace {
        argv: argv.to_vec(),
        env_names: env_names.into_iter().collect(),
        nproc: spec.nproc,
    };
    std::fs::write(trace_dir.join(TRACE_FILE), trace.to_json()).map_err(MockError::Trace)?;
    Ok(worst)
}

/// Entry point for the `mock-mpiexec` binary; `argv` includes the program name.
pub fn mock_launch(argv: &[String]) -> i32 {
    let result = parse_launch(argv.get(1..).unwrap_or_default()).and_then(|spec| launch(&spec, argv, Path::new(".")));
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("mock-mpiexec: {e}");
            e.exit_code()
        }
    }
}
