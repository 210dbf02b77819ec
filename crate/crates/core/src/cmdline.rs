//! Command-line and environment assembly for one step.
//!
//! When an MPI requirement is in force with a non-zero process count, the plan
//! is the serial plan with `[runner, nproc_flag, N, extra_flags...]` in front.
//! A process count of zero disables the requirement entirely.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;
use tracing::warn;

use crate::expr::{evaluate, resolve_processes, ExprError, JobOrder};
use crate::model::{ArgumentValue, ToolDescription};
use crate::mpi_config::MpiPlatformConfig;

/// Host variables every child receives when present.
pub const BASE_ENV: &[&str] = &["HOME", "PATH", "TMPDIR"];

pub type Environment = BTreeMap<String, String>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CommandError {
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error("tool produced an empty command line")]
    EmptyCommand,
}

/// Fully resolved invocation of one step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandPlan {
    pub argv: Vec<String>,
    pub env: Environment,
    pub workdir: PathBuf,
    pub stdout_capture: Option<String>,
    pub mpi_active: bool,
    pub nproc: u64,
}

/// Snapshot of the current process environment.
pub fn host_env() -> Environment {
    std::env::vars().collect()
}

/// `baseCommand` followed by arguments and bound inputs in position order.
///
/// At equal positions `arguments` entries come first (in declaration order),
/// then inputs by id.
pub fn bind_arguments(tool: &ToolDescription, job: &JobOrder) -> Result<Vec<String>, CommandError> {
    let job = job.complete(&tool.inputs)?;

    // (position, inputs-after-arguments, input id, rendered tokens)
    let mut bound: Vec<(i64, u8, &str, Vec<String>)> = Vec::new();
    for arg in &tool.arguments {
        let mut tokens = Vec::new();
        match &arg.value {
            ArgumentValue::Literal(s) => tokens.push(s.clone()),
            ArgumentValue::Ref(r) => evaluate(r, &job)?.render_args(&mut tokens),
        }
        bound.push((arg.position, 0, "", tokens));
    }
    for input in &tool.inputs {
        let Some(binding) = input.binding else {
            continue;
        };
        let mut tokens = Vec::new();
        if let Some(value) = job.get(&input.id) {
            value.render_args(&mut tokens);
        }
        bound.push((binding.position, 1, &input.id, tokens));
    }
    bound.sort_by(|a, b| (a.0, a.1, a.2).cmp(&(b.0, b.1, b.2)));

    let mut argv = tool.base_command.clone();
    argv.extend(bound.into_iter().flat_map(|(.., tokens)| tokens));
    if argv.is_empty() {
        return Err(CommandError::EmptyCommand);
    }
    Ok(argv)
}

/// Child environment: the base allow-list, plus the configured pass-through
/// and forced variables when the step runs under MPI.
pub fn build_environment(cfg: &MpiPlatformConfig, host_env: &Environment, mpi_active: bool) -> Environment {
    let mut env: Environment = BASE_ENV
        .iter()
        .filter_map(|name| host_env.get(*name).map(|v| (name.to_string(), v.clone())))
        .collect();
    if !mpi_active {
        return env;
    }
    for name in &cfg.env_pass {
        if let Some(value) = host_env.get(name) {
            env.insert(name.clone(), value.clone());
        }
    }
    let patterns = cfg.pass_patterns();
    for (name, value) in host_env {
        if patterns.iter().any(|re| re.is_match(name)) {
            env.insert(name.clone(), value.clone());
        }
    }
    for (name, value) in &cfg.env_set {
        env.insert(name.clone(), value.clone());
    }
    env
}

/// `[runner, nproc_flag, N, extra_flags...]`.
pub fn launcher_prefix(cfg: &MpiPlatformConfig, nproc: u64) -> Vec<String> {
    let mut prefix = vec![cfg.runner.clone(), cfg.nproc_flag.clone(), nproc.to_string()];
    prefix.extend(cfg.extra_flags.iter().cloned());
    prefix
}

/// Process count the tool asks for: 0 when there is no MPI requirement.
pub fn requested_processes(
    tool: &ToolDescription,
    job: &JobOrder,
    cfg: &MpiPlatformConfig,
) -> Result<u64, CommandError> {
    let Some((decl, optional)) = tool.mpi_requirement() else {
        return Ok(0);
    };
    if optional {
        warn!("MPIRequirement given as a hint; honouring it as a requirement");
    }
    match &decl.processes {
        Some(processes) => Ok(resolve_processes(processes, &job.complete(&tool.inputs)?)?),
        None => Ok(cfg.default_nproc),
    }
}

pub fn build_command(
    tool: &ToolDescription,
    job: &JobOrder,
    cfg: &MpiPlatformConfig,
    host_env: &Environment,
    workdir: &Path,
) -> Result<CommandPlan, CommandError> {
    let nproc = requested_processes(tool, job, cfg)?;
    let mpi_active = nproc > 0;
    let command = bind_arguments(tool, job)?;
    let argv = if mpi_active {
        let mut argv = launcher_prefix(cfg, nproc);
        argv.extend(command);
        argv
    } else {
        command
    };
    Ok(CommandPlan {
        argv,
        env: build_environment(cfg, host_env, mpi_active),
        workdir: workdir.to_path_buf(),
        stdout_capture: tool.stdout.clone(),
        mpi_active,
        nproc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Value;
    use crate::model::{parse_document, Document};

    const HELLO_MPI: &str = "\
cwlVersion: v1.0
class: CommandLineTool
$namespaces:
  cwltool: http://commonwl.org/cwltool#
requirements:
  cwltool:MPIRequirement:
    processes: $(inputs.nproc)
inputs:
  message:
    type: string
    inputBinding:
      position: 1
  nproc:
    type: int
baseCommand: echo
outputs: []
";

    fn tool(text: &str) -> ToolDescription {
        match parse_document(text, Path::new("/")).unwrap().document {
            Document::Tool(t) => t,
            _ => unreachable!(),
        }
    }

    fn hello_job(nproc: i64) -> JobOrder {
        JobOrder::new()
            .with("message", Value::String("Hi".into()))
            .with("nproc", Value::Int(nproc))
    }

    fn likwid() -> MpiPlatformConfig {
        MpiPlatformConfig {
            runner: "srun".into(),
            extra_flags: ["likwid-perfctr", "-C", "L:N:0", "-g", "FLOPS_DP", "-o", "/out/likwid_%r.json"]
                .map(String::from)
                .to_vec(),
            env_pass_regex: vec!["SLURM_.*".into()],
            ..Default::default()
        }
    }

    #[test]
    fn binds_hello_world() {
        let t = tool(HELLO_MPI);
        let job = JobOrder::new()
            .with("message", Value::String("Hello world".into()))
            .with("nproc", Value::Int(1));
        assert_eq!(bind_arguments(&t, &job).unwrap(), ["echo", "Hello world"]);
    }

    #[test]
    fn sorts_by_position() {
        let t = tool(
            "cwlVersion: v1.0\nclass: CommandLineTool\nbaseCommand: [tool, sub]\noutputs: []\n\
             inputs:\n  a: {type: string, inputBinding: {position: 2}}\n  b: {type: string, inputBinding: {position: 1}}\n",
        );
        let job = JobOrder::new()
            .with("a", Value::String("x".into()))
            .with("b", Value::String("y".into()));
        assert_eq!(bind_arguments(&t, &job).unwrap(), ["tool", "sub", "y", "x"]);
    }

    #[test]
    fn ties_put_arguments_first_then_ids() {
        let t = tool(
            "cwlVersion: v1.0\nclass: CommandLineTool\nbaseCommand: t\noutputs: []\n\
             arguments: [{position: 1, valueFrom: lit}, {position: 1, valueFrom: $(inputs.z)}]\n\
             inputs:\n  z: {type: string, inputBinding: {position: 1}}\n  m: {type: int, inputBinding: {position: 1}}\n\
             \x20 f: {type: 'string[]', inputBinding: {position: 0}}\n  flag: {type: boolean, inputBinding: {position: 3}}\n",
        );
        let job = JobOrder::new()
            .with("z", Value::String("zz".into()))
            .with("m", Value::Int(7))
            .with("f", Value::Array(vec![Value::String("a".into()), Value::String("b".into())]))
            .with("flag", Value::Bool(false));
        assert_eq!(
            bind_arguments(&t, &job).unwrap(),
            ["t", "a", "b", "lit", "zz", "7", "zz", "false"]
        );
    }

    #[test]
    fn missing_input_is_reported() {
        let t = tool(HELLO_MPI);
        assert_eq!(
            bind_arguments(&t, &JobOrder::new()),
            Err(CommandError::Expr(ExprError::MissingInput("message".into())))
        );
    }

    #[test]
    fn mpi_prefix_with_defaults() {
        let plan = build_command(&tool(HELLO_MPI), &hello_job(2), &MpiPlatformConfig::default(), &Environment::new(), Path::new("/w")).unwrap();
        assert_eq!(plan.argv, ["mpirun", "-n", "2", "echo", "Hi"]);
        assert!(plan.mpi_active);
        assert_eq!(plan.nproc, 2);
    }

    #[test]
    fn mpi_zero_processes_disables_requirement() {
        let t = tool(HELLO_MPI);
        let plan = build_command(&t, &hello_job(0), &likwid(), &Environment::new(), Path::new("/w")).unwrap();
        assert_eq!(plan.argv, ["echo", "Hi"]);
        assert!(!plan.mpi_active);
        assert_eq!(plan.nproc, 0);
    }

    #[test]
    fn mpi_likwid_extra_flags_precede_base_command() {
        let plan = build_command(&tool(HELLO_MPI), &hello_job(4), &likwid(), &Environment::new(), Path::new("/w")).unwrap();
        assert_eq!(
            plan.argv,
            ["srun", "-n", "4", "likwid-perfctr", "-C", "L:N:0", "-g", "FLOPS_DP", "-o", "/out/likwid_%r.json", "echo", "Hi"]
        );
    }

    #[test]
    fn mpi_negative_processes_error() {
        let err = build_command(&tool(HELLO_MPI), &hello_job(-3), &MpiPlatformConfig::default(), &Environment::new(), Path::new("/w")).unwrap_err();
        assert_eq!(err, CommandError::Expr(ExprError::NegativeProcesses(-3)));
    }

    #[test]
    fn mpi_omitted_processes_uses_default_nproc() {
        let text = HELLO_MPI.replace("    processes: $(inputs.nproc)\n", "");
        let cfg = MpiPlatformConfig {
            default_nproc: 6,
            ..Default::default()
        };
        let plan = build_command(&tool(&text), &hello_job(1), &cfg, &Environment::new(), Path::new("/w")).unwrap();
        assert_eq!(&plan.argv[..3], ["mpirun", "-n", "6"]);
    }

    #[test]
    fn mpi_absent_requirement_never_launches() {
        let text = HELLO_MPI.replace("requirements:\n  cwltool:MPIRequirement:\n    processes: $(inputs.nproc)\n", "");
        let cfg = MpiPlatformConfig {
            default_nproc: 8,
            ..likwid()
        };
        let plan = build_command(&tool(&text), &hello_job(5), &cfg, &Environment::new(), Path::new("/w")).unwrap();
        assert_eq!(plan.argv, ["echo", "Hi"]);
        assert!(!plan.mpi_active);
    }

    #[test]
    fn mpi_hint_is_honoured() {
        let text = HELLO_MPI.replace("requirements:", "hints:");
        let plan = build_command(&tool(&text), &hello_job(3), &MpiPlatformConfig::default(), &Environment::new(), Path::new("/w")).unwrap();
        assert_eq!(plan.argv, ["mpirun", "-n", "3", "echo", "Hi"]);
    }

    fn env(pairs: &[(&str, &str)]) -> Environment {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn mpi_env_regex_passes_slurm_only() {
        let host = env(&[("SLURM_JOB_ID", "42"), ("SECRET", "x"), ("PATH", "/bin")]);
        let cfg = MpiPlatformConfig {
            env_pass_regex: vec!["SLURM_.*".into()],
            ..Default::default()
        };
        assert_eq!(
            build_environment(&cfg, &host, true),
            env(&[("PATH", "/bin"), ("SLURM_JOB_ID", "42")])
        );
    }

    #[test]
    fn mpi_env_set_wins_over_env_pass() {
        let host = env(&[("OMP_NUM_THREADS", "8")]);
        let cfg = MpiPlatformConfig {
            env_pass: vec!["OMP_NUM_THREADS".into()],
            env_set: env(&[("OMP_NUM_THREADS", "4")]),
            ..Default::default()
        };
        assert_eq!(build_environment(&cfg, &host, true)["OMP_NUM_THREADS"], "4");
    }

    #[test]
    fn inactive_environment_is_base_only() {
        let host = env(&[("HOME", "/h"), ("PATH", "/bin"), ("TMPDIR", "/t"), ("SLURM_JOB_ID", "1"), ("USER", "u")]);
        let cfg = MpiPlatformConfig {
            env_pass: vec!["USER".into()],
            env_pass_regex: vec!["SLURM_.*".into()],
            env_set: env(&[("A", "b")]),
            ..Default::default()
        };
        assert_eq!(
            build_environment(&cfg, &host, false),
            env(&[("HOME", "/h"), ("PATH", "/bin"), ("TMPDIR", "/t")])
        );
    }
}
