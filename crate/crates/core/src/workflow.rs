//! Step scheduling and execution for workflows, and the single-tool runner
//! used for both workflow steps and standalone `CommandLineTool` documents.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use thiserror::Error;
use tracing::{info, warn};

use crate::cmdline::{build_command, CommandError, CommandPlan, Environment};
use crate::executor::{self, collect_outputs, describe_file, fresh_workdir, stage, ExecError, ExecutionResult};
use crate::expr::{ExprError, JobOrder, Value};
use crate::model::{Source, ToolDescription, WorkflowDescription};
use crate::mpi_config::MpiPlatformConfig;
use crate::software::{self, SiteCatalog, SoftwareError};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("cycle among steps {0:?}")]
    Cycle(Vec<String>),
    #[error("edge endpoint {0:?} is not a declared step")]
    UnknownNode(String),
}

/// Producer/consumer dependencies between steps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepGraph {
    nodes: Vec<String>,
    edges: BTreeSet<(String, String)>,
}

impl StepGraph {
    pub fn new(
        nodes: Vec<String>,
        edges: impl IntoIterator<Item = (String, String)>,
    ) -> Result<StepGraph, GraphError> {
        let edges: BTreeSet<(String, String)> = edges.into_iter().collect();
        for (a, b) in &edges {
            for end in [a, b] {
                if !nodes.contains(end) {
                    return Err(GraphError::UnknownNode(end.clone()));
                }
            }
        }
        Ok(StepGraph { nodes, edges })
    }

    /// Edges come from `step/output` sources; unknown producers are skipped.
    pub fn from_workflow(wf: &WorkflowDescription) -> StepGraph {
        let nodes: Vec<String> = wf.steps.iter().map(|s| s.id.clone()).collect();
        let edges = wf
            .steps
            .iter()
            .flat_map(|s| {
                s.inputs.values().filter_map(|src| match src {
                    Source::StepOutput { step, .. } if nodes.contains(step) => Some((step.clone(), s.id.clone())),
                    _ => None,
                })
            })
            .collect();
        StepGraph { nodes, edges }
    }

    pub fn nodes(&self) -> &[String] {
        &self.nodes
    }

    pub fn edges(&self) -> &BTreeSet<(String, String)> {
        &self.edges
    }

    pub fn producers<'a>(&'a self, node: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.edges
            .iter()
            .filter(move |(_, b)| b == node)
            .map(|(a, _)| a.as_str())
    }

    /// Layers of mutually independent steps; every producer sits in an
    /// earlier layer than its consumers. Within a layer, declaration order.
    pub fn ready_sets(&self) -> Result<Vec<Vec<String>>, GraphError> {
        let mut indegree: BTreeMap<&str, usize> = self.nodes.iter().map(|n| (n.as_str(), 0)).collect();
        for (_, b) in &self.edges {
            *indegree.get_mut(b.as_str()).expect("validated endpoint") += 1;
        }
        let mut done: BTreeSet<&str> = BTreeSet::new();
        let mut layers = Vec::new();
        while done.len() < self.nodes.len() {
            let layer: Vec<&String> = self
                .nodes
                .iter()
                .filter(|n| !done.contains(n.as_str()) && indegree[n.as_str()] == 0)
                .collect();
            if layer.is_empty() {
                let stuck = self
                    .nodes
                    .iter()
                    .filter(|n| !done.contains(n.as_str()))
                    .cloned()
                    .collect();
                return Err(GraphError::Cycle(stuck));
            }
            for n in &layer {
                done.insert(n.as_str());
                for (_, b) in self.edges.iter().filter(|(a, _)| a == *n) {
                    *indegree.get_mut(b.as_str()).expect("validated endpoint") -= 1;
                }
            }
            layers.push(layer.into_iter().cloned().collect());
        }
        Ok(layers)
    }
}

/// Execution schedule as a list of ready-sets.
pub fn plan(wf: &WorkflowDescription) -> Result<Vec<Vec<String>>, GraphError> {
    StepGraph::from_workflow(wf).ready_sets()
}

/// Everything a run needs besides the document and its inputs.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub outdir: PathBuf,
    pub parallel: bool,
    pub host_env: Environment,
    pub catalog: Option<SiteCatalog>,
}

impl RunOptions {
    pub fn new(outdir: impl Into<PathBuf>) -> Self {
        Self {
            outdir: outdir.into(),
            parallel: false,
            host_env: crate::cmdline::host_env(),
            catalog: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum StepError {
    #[error(transparent)]
    Input(#[from] ExprError),
    #[error(transparent)]
    Command(#[from] CommandError),
    #[error(transparent)]
    Software(#[from] SoftwareError),
    #[error(transparent)]
    Exec(#[from] ExecError),
}

/// One executed tool: the plan that ran and its result with outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ToolRun {
    pub plan: CommandPlan,
    pub result: ExecutionResult,
}

/// Stages inputs, plans, resolves software, runs, and collects outputs in `workdir`.
pub fn run_tool(
    tool: &ToolDescription,
    job: &JobOrder,
    workdir: &Path,
    cfg: &MpiPlatformConfig,
    opts: &RunOptions,
) -> Result<ToolRun, StepError> {
    let job = job.complete(&tool.inputs)?;
    let staged = stage(&job, workdir)?;
    let mut plan = build_command(tool, &staged, cfg, &opts.host_env, workdir)?;
    if let Some((req, optional)) = tool.software_requirement() {
        match &opts.catalog {
            Some(catalog) => {
                let resolution = software::resolve(req, optional, catalog, &plan, cfg)?;
                resolution.warnings.iter().for_each(|w| warn!("{w}"));
                plan = resolution.plan;
            }
            None => warn!("no software catalog given; SoftwareRequirement left unresolved"),
        }
    }
    info!("running {:?}", plan.argv);
    let mut result = executor::run(&plan)?;
    result.outputs = collect_outputs(tool, workdir, &result)?;
    Ok(ToolRun { plan, result })
}

/// Copies output files into `outdir`, returning values that point at the copies.
pub fn publish_outputs(
    outputs: &BTreeMap<String, Value>,
    outdir: &Path,
) -> Result<BTreeMap<String, Value>, ExecError> {
    fs::create_dir_all(outdir).map_err(|source| ExecError::Io {
        context: format!("cannot create {}", outdir.display()),
        source,
    })?;
    let mut taken = BTreeSet::new();
    outputs
        .iter()
        .map(|(id, v)| publish_value(v, outdir, &mut taken).map(|v| (id.clone(), v)))
        .collect()
}

fn publish_value(value: &Value, outdir: &Path, taken: &mut BTreeSet<PathBuf>) -> Result<Value, ExecError> {
    match value {
        Value::File(file) => {
            let (stem, ext) = match file.basename.rsplit_once('.') {
                Some((s, e)) if !s.is_empty() => (s.to_string(), format!(".{e}")),
                _ => (file.basename.clone(), String::new()),
            };
            let mut dest = outdir.join(&file.basename);
            let mut n = 1;
            while taken.contains(&dest) || (dest.exists() && dest != file.path) {
                n += 1;
                dest = outdir.join(format!("{stem}_{n}{ext}"));
            }
            taken.insert(dest.clone());
            if dest != file.path {
                fs::copy(&file.path, &dest).map_err(|source| ExecError::Io {
                    context: format!("cannot copy {} to {}", file.path.display(), dest.display()),
                    source,
                })?;
            }
            describe_file(&dest).map(Value::File)
        }
        Value::Array(items) => items
            .iter()
            .map(|v| publish_value(v, outdir, taken))
            .collect::<Result<Vec<_>, _>>()
            .map(Value::Array),
        other => Ok(other.clone()),
    }
}

/// Runs a standalone tool in `<outdir>/<name>/` and publishes its outputs to `outdir`.
pub fn run_single_tool(
    tool: &ToolDescription,
    name: &str,
    job: &JobOrder,
    cfg: &MpiPlatformConfig,
    opts: &RunOptions,
) -> Result<(ToolRun, BTreeMap<String, Value>), StepError> {
    let workdir = fresh_workdir(&opts.outdir, name)?;
    let run = run_tool(tool, job, &workdir, cfg, opts)?;
    let outputs = publish_outputs(&run.result.outputs, &opts.outdir)?;
    Ok((run, outputs))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepEventKind {
    Started,
    Finished,
    Failed,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepEvent {
    pub step: String,
    pub kind: StepEventKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepFailure {
    pub step: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkflowRun {
    pub outputs: BTreeMap<String, Value>,
    pub steps: BTreeMap<String, ToolRun>,
    /// Start/finish order as observed by the engine.
    pub events: Vec<StepEvent>,
}

#[derive(Debug, Error)]
pub enum WorkflowError {
    #[error("workflow inputs: {0}")]
    Input(#[from] ExprError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("{}", describe_failures(failures, skipped))]
    Steps {
        failures: Vec<StepFailure>,
        skipped: Vec<String>,
        events: Vec<StepEvent>,
    },
    #[error("publishing outputs: {0}")]
    Publish(#[from] ExecError),
}

fn describe_failures(failures: &[StepFailure], skipped: &[String]) -> String {
    let mut lines: Vec<String> = failures
        .iter()
        .map(|f| format!("step {:?} failed: {}", f.step, f.message))
        .collect();
    if !skipped.is_empty() {
        lines.push(format!("skipped dependent steps: {}", skipped.join(", ")));
    }
    lines.join("\n")
}

fn step_job(
    wf: &WorkflowDescription,
    step_id: &str,
    inputs: &JobOrder,
    finished: &BTreeMap<String, ToolRun>,
) -> JobOrder {
    let step = wf.step(step_id).expect("scheduled steps exist");
    let mut job = JobOrder::new();
    for (input, source) in &step.inputs {
        let value = match source {
            Source::WorkflowInput(id) => inputs.get(id).cloned(),
            Source::StepOutput { step, output } => finished
                .get(step)
                .and_then(|run| run.result.outputs.get(output))
                .cloned(),
        };
        if let Some(value) = value {
            job.values.insert(input.clone(), value);
        }
    }
    job
}

/// Executes `wf` ready-set by ready-set.
///
/// A failing step causes its dependents to be skipped; unrelated steps still
/// run. All failures are reported together.
pub fn run_workflow(
    wf: &WorkflowDescription,
    job: &JobOrder,
    cfg: &MpiPlatformConfig,
    opts: &RunOptions,
) -> Result<WorkflowRun, WorkflowError> {
    let inputs = job.complete(&wf.inputs)?;
    let graph = StepGraph::from_workflow(wf);
    let schedule = graph.ready_sets()?;

    let events = Mutex::new(Vec::new());
    let record = |step: &str, kind| {
        events.lock().expect("event log poisoned").push(StepEvent {
            step: step.to_string(),
            kind,
        })
    };
    let mut finished: BTreeMap<String, ToolRun> = BTreeMap::new();
    let mut failures: Vec<StepFailure> = Vec::new();
    let mut blocked: BTreeSet<String> = BTreeSet::new();
    let mut skipped: Vec<String> = Vec::new();

    for layer in schedule {
        let mut runnable = Vec::new();
        for id in layer {
            if graph.producers(&id).any(|p| blocked.contains(p)) {
                record(&id, StepEventKind::Skipped);
                blocked.insert(id.clone());
                skipped.push(id);
            } else {
                runnable.push(id);
            }
        }

        let execute = |id: &String| -> Result<ToolRun, StepError> {
            let step = wf.step(id).expect("scheduled steps exist");
            let job = step_job(wf, id, &inputs, &finished);
            record(id, StepEventKind::Started);
            let workdir = fresh_workdir(&opts.outdir, id)?;
            let outcome = run_tool(&step.run, &job, &workdir, cfg, opts);
            record(
                id,
                if outcome.is_ok() {
                    StepEventKind::Finished
                } else {
                    StepEventKind::Failed
                },
            );
            outcome
        };

        let outcomes: Vec<(String, Result<ToolRun, StepError>)> = if opts.parallel && runnable.len() > 1 {
            std::thread::scope(|scope| {
                let handles: Vec<_> = runnable
                    .iter()
                    .map(|id| (id.clone(), scope.spawn(|| execute(id))))
                    .collect();
                handles
                    .into_iter()
                    .map(|(id, h)| (id, h.join().expect("step thread panicked")))
                    .collect()
            })
        } else {
            runnable.iter().map(|id| (id.clone(), execute(id))).collect()
        };

        for (id, outcome) in outcomes {
            match outcome {
                Ok(run) => {
                    finished.insert(id, run);
                }
                Err(e) => {
                    warn!("step {id:?} failed: {e}");
                    failures.push(StepFailure {
                        step: id.clone(),
                        message: e.to_string(),
                    });
                    blocked.insert(id);
                }
            }
        }
    }

    let events = events.into_inner().expect("event log poisoned");
    if !failures.is_empty() {
        return Err(WorkflowError::Steps {
            failures,
            skipped,
            events,
        });
    }

    let mut collected = BTreeMap::new();
    for output in &wf.outputs {
        if let Source::StepOutput { step, output: out } = &output.source {
            if let Some(value) = finished.get(step).and_then(|r| r.result.outputs.get(out)) {
                collected.insert(output.id.clone(), value.clone());
            }
        }
    }
    let outputs = publish_outputs(&collected, &opts.outdir)?;
    Ok(WorkflowRun {
        outputs,
        steps: finished,
        events,
    })
}
