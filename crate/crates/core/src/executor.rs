//! Staging, process execution, and output collection for a single step.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, Read};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use sha1::{Digest, Sha1};
use thiserror::Error;
use tracing::debug;

use crate::cmdline::CommandPlan;
use crate::expr::{FileValue, JobOrder, Value};
use crate::model::{OutputType, ToolDescription};

pub const STDOUT_LOG: &str = "step.stdout";
pub const STDERR_LOG: &str = "step.stderr";
const STDERR_TAIL_LINES: usize = 20;

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("input file {0} does not exist")]
    MissingSource(PathBuf),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
    #[error("command {0:?} not found")]
    NotFound(String),
    #[error("failed to spawn {program:?}: {source}")]
    Spawn {
        program: String,
        #[source]
        source: io::Error,
    },
    #[error("command exited with code {code}{}", tail_suffix(stderr_tail))]
    NonZeroExit {
        code: i32,
        stderr_tail: String,
        result: Box<ExecutionResult>,
    },
    #[error("output {output:?}: glob {pattern:?} matched no files")]
    NoMatch { output: String, pattern: String },
    #[error("output {output:?}: glob {pattern:?} matched {count} files, expected exactly one")]
    MultipleMatches {
        output: String,
        pattern: String,
        count: usize,
    },
    #[error("output {output:?}: invalid glob {pattern:?}: {reason}")]
    InvalidGlob {
        output: String,
        pattern: String,
        reason: String,
    },
}

fn tail_suffix(tail: &str) -> String {
    if tail.is_empty() {
        String::new()
    } else {
        format!("; stderr tail:\n{tail}")
    }
}

fn io_err(context: impl Into<String>) -> impl FnOnce(io::Error) -> ExecError {
    let context = context.into();
    move |source| ExecError::Io { context, source }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionResult {
    pub exit_code: i32,
    pub stdout_path: PathBuf,
    pub stderr_path: PathBuf,
    pub duration: Duration,
    /// Filled by the caller from [`collect_outputs`] on success.
    pub outputs: BTreeMap<String, Value>,
}

impl ExecutionResult {
    pub fn success(&self) -> bool {
        self.exit_code == 0
    }
}

/// Creates `<root>/<name>`, or `<root>/<name>_2`, `_3`, ... if taken.
pub fn fresh_workdir(root: &Path, name: &str) -> Result<PathBuf, ExecError> {
    fs::create_dir_all(root).map_err(io_err(format!("cannot create {}", root.display())))?;
    for n in 1.. {
        let candidate = if n == 1 {
            root.join(name)
        } else {
            root.join(format!("{name}_{n}"))
        };
        match fs::create_dir(&candidate) {
            Ok(()) => return Ok(candidate),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(io_err(format!("cannot create {}", candidate.display()))(e)),
        }
    }
    unreachable!()
}

/// Copies every File value in `job` into `workdir` and points the job at the copies.
pub fn stage(job: &JobOrder, workdir: &Path) -> Result<JobOrder, ExecError> {
    fs::create_dir_all(workdir).map_err(io_err(format!("cannot create {}", workdir.display())))?;
    let mut staged = JobOrder::new();
    let mut counter = 0usize;
    for (id, value) in &job.values {
        staged
            .values
            .insert(id.clone(), stage_value(value, workdir, &mut counter)?);
    }
    Ok(staged)
}

fn stage_value(value: &Value, workdir: &Path, counter: &mut usize) -> Result<Value, ExecError> {
    match value {
        Value::File(file) => {
            if !file.path.is_file() {
                return Err(ExecError::MissingSource(file.path.clone()));
            }
            let mut dest = workdir.join(&file.basename);
            while dest.exists() {
                *counter += 1;
                let dir = workdir.join(format!("_staged_{counter}"));
                fs::create_dir_all(&dir).map_err(io_err(format!("cannot create {}", dir.display())))?;
                dest = dir.join(&file.basename);
            }
            fs::copy(&file.path, &dest).map_err(io_err(format!("cannot stage {}", file.path.display())))?;
            debug!("staged {} -> {}", file.path.display(), dest.display());
            Ok(Value::File(FileValue::from_path(dest)))
        }
        Value::Array(items) => items
            .iter()
            .map(|v| stage_value(v, workdir, counter))
            .collect::<Result<Vec<_>, _>>()
            .map(Value::Array),
        other => Ok(other.clone()),
    }
}

fn resolve_program(plan: &CommandPlan) -> Result<PathBuf, ExecError> {
    let program = &plan.argv[0];
    if program.contains('/') {
        let path = PathBuf::from(program);
        return if path.exists() {
            Ok(path)
        } else {
            Err(ExecError::NotFound(program.clone()))
        };
    }
    let search = plan.env.get("PATH").ok_or_else(|| ExecError::NotFound(program.clone()))?;
    which::which_in(program, Some(search), &plan.workdir).map_err(|_| ExecError::NotFound(program.clone()))
}

fn stderr_tail(path: &Path) -> String {
    let text = fs::read_to_string(path).unwrap_or_default();
    let lines: Vec<&str> = text.lines().collect();
    lines[lines.len().saturating_sub(STDERR_TAIL_LINES)..].join("\n")
}

/// Spawns the plan with exactly `plan.env`, no shell, streams persisted to files.
pub fn run(plan: &CommandPlan) -> Result<ExecutionResult, ExecError> {
    assert!(!plan.argv.is_empty(), "command plans always carry a program");
    let program = resolve_program(plan)?;
    let stdout_path = plan.workdir.join(plan.stdout_capture.as_deref().unwrap_or(STDOUT_LOG));
    let stderr_path = plan.workdir.join(STDERR_LOG);
    let stdout = File::create(&stdout_path).map_err(io_err(format!("cannot create {}", stdout_path.display())))?;
    let stderr = File::create(&stderr_path).map_err(io_err(format!("cannot create {}", stderr_path.display())))?;

    debug!("running {:?} in {}", plan.argv, plan.workdir.display());
    let started = Instant::now();
    let status = Command::new(&program)
        .arg0_compat(&plan.argv[0])
        .args(&plan.argv[1..])
        .env_clear()
        .envs(&plan.env)
        .current_dir(&plan.workdir)
        .stdin(Stdio::null())
        .stdout(stdout)
        .stderr(stderr)
        .status()
        .map_err(|source| ExecError::Spawn {
            program: plan.argv[0].clone(),
            source,
        })?;
    let duration = started.elapsed();

    let exit_code = match status.code() {
        Some(code) => code,
        None => signal_code(&status),
    };
    let result = ExecutionResult {
        exit_code,
        stdout_path,
        stderr_path,
        duration,
        outputs: BTreeMap::new(),
    };
    if exit_code != 0 {
        return Err(ExecError::NonZeroExit {
            code: exit_code,
            stderr_tail: stderr_tail(&result.stderr_path),
            result: Box::new(result),
        });
    }
    Ok(result)
}

#[cfg(unix)]
fn signal_code(status: &std::process::ExitStatus) -> i32 {
    use std::os::unix::process::ExitStatusExt;
    128 + status.signal().unwrap_or(0)
}

#[cfg(not(unix))]
fn signal_code(_status: &std::process::ExitStatus) -> i32 {
    1
}

trait Arg0Compat {
    fn arg0_compat(&mut self, arg0: &str) -> &mut Self;
}

impl Arg0Compat for Command {
    /// Keeps the composed argv[0] visible to the child.
    #[cfg(unix)]
    fn arg0_compat(&mut self, arg0: &str) -> &mut Self {
        use std::os::unix::process::CommandExt;
        self.arg0(arg0)
    }

    #[cfg(not(unix))]
    fn arg0_compat(&mut self, _arg0: &str) -> &mut Self {
        self
    }
}

/// `sha1$<hex>` digest, as used in output objects.
pub fn checksum(path: &Path) -> io::Result<String> {
    let mut file = File::open(path)?;
    let mut hasher = Sha1::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(format!("sha1${:x}", hasher.finalize()))
}

/// File record with size and checksum filled in.
pub fn describe_file(path: &Path) -> Result<FileValue, ExecError> {
    let mut file = FileValue::from_path(path);
    file.checksum = Some(checksum(path).map_err(io_err(format!("cannot read {}", path.display())))?);
    Ok(file)
}

fn glob_in(workdir: &Path, output: &str, pattern: &str) -> Result<Vec<PathBuf>, ExecError> {
    let invalid = |reason: &str| ExecError::InvalidGlob {
        output: output.to_string(),
        pattern: pattern.to_string(),
        reason: reason.to_string(),
    };
    if Path::new(pattern).is_absolute() || pattern.split('/').any(|c| c == "..") {
        return Err(invalid("must stay inside the working directory"));
    }
    let full = format!("{}/{}", glob::Pattern::escape(&workdir.to_string_lossy()), pattern);
    let mut matches: Vec<PathBuf> = glob::glob(&full)
        .map_err(|e| invalid(e.msg))?
        .filter_map(Result::ok)
        .filter(|p| p.is_file())
        .collect();
    matches.sort();
    Ok(matches)
}

/// Resolves each declared output inside `workdir`.
pub fn collect_outputs(
    tool: &ToolDescription,
    workdir: &Path,
    result: &ExecutionResult,
) -> Result<BTreeMap<String, Value>, ExecError> {
    let mut outputs = BTreeMap::new();
    for output in &tool.outputs {
        let value = match output.ty {
            OutputType::Stdout => Value::File(describe_file(&result.stdout_path)?),
            OutputType::File | OutputType::FileArray => {
                let pattern = output.glob.as_deref().unwrap_or_default();
                let matches = glob_in(workdir, &output.id, pattern)?;
                if output.ty == OutputType::FileArray {
                    matches
                        .iter()
                        .map(|p| describe_file(p).map(Value::File))
                        .collect::<Result<Vec<_>, _>>()
                        .map(Value::Array)?
                } else {
                    match matches.as_slice() {
                        [one] => Value::File(describe_file(one)?),
                        [] => {
                            return Err(ExecError::NoMatch {
                                output: output.id.clone(),
                                pattern: pattern.to_string(),
                            })
                        }
                        many => {
                            return Err(ExecError::MultipleMatches {
                                output: output.id.clone(),
                                pattern: pattern.to_string(),
                                count: many.len(),
                            })
                        }
                    }
                }
            }
        };
        outputs.insert(output.id.clone(), value);
    }
    Ok(outputs)
}
