//! Tool and workflow descriptions for the supported CWL subset.
//!
//! Descriptions are produced by [`parse_document`] / [`load_document`] and are
//! immutable afterwards; workflow steps hold their tools behind an [`Arc`] so
//! step executions can share them across threads.

mod parse;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use serde_yaml::{Mapping, Value as Yaml};

use crate::expr::{ParamRef, Value};

pub use parse::{load_document, parse_document, parse_document_named, ParseError, Parsed};

/// Namespace URI under which the MPI requirement extension lives.
pub const CWLTOOL_NAMESPACE: &str = "http://commonwl.org/cwltool#";

pub const MPI_REQUIREMENT: &str = "MPIRequirement";
pub const SOFTWARE_REQUIREMENT: &str = "SoftwareRequirement";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CwlType {
    String,
    Int,
    Float,
    Boolean,
    File,
    Array(Box<CwlType>),
}

impl CwlType {
    fn scalar_from_name(name: &str) -> Option<CwlType> {
        Some(match name {
            "string" => CwlType::String,
            "int" | "long" => CwlType::Int,
            "float" | "double" => CwlType::Float,
            "boolean" => CwlType::Boolean,
            "File" => CwlType::File,
            _ => return None,
        })
    }

    /// Parses `string`, `File[]`, `{type: array, items: int}` and friends.
    pub fn from_yaml(node: &Yaml) -> Result<CwlType, String> {
        match node {
            Yaml::String(name) => {
                if name.ends_with('?') {
                    return Err(format!("unsupported feature: optional type {name:?}"));
                }
                if let Some(item) = name.strip_suffix("[]") {
                    return CwlType::scalar_from_name(item)
                        .map(|t| CwlType::Array(Box::new(t)))
                        .ok_or_else(|| format!("unsupported type {name:?}"));
                }
                CwlType::scalar_from_name(name).ok_or_else(|| format!("unsupported type {name:?}"))
            }
            Yaml::Mapping(map) => {
                if map.get("type").and_then(Yaml::as_str) != Some("array") {
                    return Err("unsupported feature: record/enum types".into());
                }
                let items = map.get("items").ok_or("array type needs \"items\"")?;
                match CwlType::from_yaml(items)? {
                    CwlType::Array(_) => Err("unsupported feature: nested arrays".into()),
                    item => Ok(CwlType::Array(Box::new(item))),
                }
            }
            Yaml::Sequence(_) => Err("unsupported feature: union types".into()),
            _ => Err("type must be a string or an array schema".into()),
        }
    }

    pub fn name(&self) -> String {
        match self {
            CwlType::String => "string".into(),
            CwlType::Int => "int".into(),
            CwlType::Float => "float".into(),
            CwlType::Boolean => "boolean".into(),
            CwlType::File => "File".into(),
            CwlType::Array(item) => format!("{}[]", item.name()),
        }
    }

    /// Type-checks `value`, widening int to float.
    pub fn coerce(&self, value: Value) -> Result<Value, String> {
        match (self, value) {
            (CwlType::String, v @ Value::String(_))
            | (CwlType::Int, v @ Value::Int(_))
            | (CwlType::Float, v @ Value::Float(_))
            | (CwlType::Boolean, v @ Value::Bool(_))
            | (CwlType::File, v @ Value::File(_)) => Ok(v),
            (CwlType::Float, Value::Int(i)) => Ok(Value::Float(i as f64)),
            (CwlType::Array(item), Value::Array(items)) => items
                .into_iter()
                .map(|v| item.coerce(v))
                .collect::<Result<Vec<_>, _>>()
                .map(Value::Array),
            (ty, v) => Err(format!("expected {}, got {}", ty.name(), v.kind())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputBinding {
    pub position: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InputParameter {
    pub id: String,
    pub ty: CwlType,
    pub default: Option<Value>,
    pub binding: Option<InputBinding>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputType {
    File,
    FileArray,
    /// The tool's captured standard output.
    Stdout,
}

impl OutputType {
    pub fn name(self) -> &'static str {
        match self {
            OutputType::File => "File",
            OutputType::FileArray => "File[]",
            OutputType::Stdout => "stdout",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputParameter {
    pub id: String,
    pub ty: OutputType,
    pub glob: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ArgumentValue {
    Literal(String),
    Ref(ParamRef),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Argument {
    pub position: i64,
    pub value: ArgumentValue,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Processes {
    Count(u64),
    Ref(ParamRef),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MpiRequirementDecl {
    /// `None` when the requirement omits `processes`; the platform default applies.
    pub processes: Option<Processes>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SoftwarePackage {
    pub name: String,
    /// Acceptable versions; empty means any.
    pub versions: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SoftwareRequirementDecl {
    pub packages: Vec<SoftwarePackage>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Requirement {
    Mpi(MpiRequirementDecl),
    Software(SoftwareRequirementDecl),
}

impl Requirement {
    pub fn class_name(&self) -> &'static str {
        match self {
            Requirement::Mpi(_) => MPI_REQUIREMENT,
            Requirement::Software(_) => SOFTWARE_REQUIREMENT,
        }
    }
}

/// A requirement in force for a tool; `optional` is set when it came from `hints`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EffectiveRequirement<'a> {
    pub requirement: &'a Requirement,
    pub optional: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToolDescription {
    pub cwl_version: String,
    pub base_command: Vec<String>,
    pub arguments: Vec<Argument>,
    pub inputs: Vec<InputParameter>,
    pub outputs: Vec<OutputParameter>,
    pub requirements: Vec<Requirement>,
    pub hints: Vec<Requirement>,
    pub stdout: Option<String>,
}

/// Strips a namespace prefix (`cwltool:` or a full URI) from a class name.
fn bare_class(name: &str) -> &str {
    let name = name.rsplit('#').next().unwrap_or(name);
    name.rsplit(':').next().unwrap_or(name)
}

impl ToolDescription {
    pub fn input(&self, id: &str) -> Option<&InputParameter> {
        self.inputs.iter().find(|i| i.id == id)
    }

    pub fn output(&self, id: &str) -> Option<&OutputParameter> {
        self.outputs.iter().find(|o| o.id == id)
    }

    /// `requirements` takes precedence over `hints`.
    pub fn effective_requirement(&self, class_name: &str) -> Option<EffectiveRequirement<'_>> {
        let wanted = bare_class(class_name);
        let find = |list: &'_ [Requirement]| list.iter().position(|r| r.class_name() == wanted);
        if let Some(i) = find(&self.requirements) {
            return Some(EffectiveRequirement {
                requirement: &self.requirements[i],
                optional: false,
            });
        }
        find(&self.hints).map(|i| EffectiveRequirement {
            requirement: &self.hints[i],
            optional: true,
        })
    }

    /// The MPI requirement in force and whether it is only a hint.
    pub fn mpi_requirement(&self) -> Option<(&MpiRequirementDecl, bool)> {
        match self.effective_requirement(MPI_REQUIREMENT)? {
            EffectiveRequirement {
                requirement: Requirement::Mpi(decl),
                optional,
            } => Some((decl, optional)),
            _ => None,
        }
    }

    pub fn software_requirement(&self) -> Option<(&SoftwareRequirementDecl, bool)> {
        match self.effective_requirement(SOFTWARE_REQUIREMENT)? {
            EffectiveRequirement {
                requirement: Requirement::Software(decl),
                optional,
            } => Some((decl, optional)),
            _ => None,
        }
    }

    /// Canonical document form; parsing it back yields an equal description.
    pub fn to_yaml(&self) -> Yaml {
        let mut doc = Mapping::new();
        doc.insert("cwlVersion".into(), self.cwl_version.clone().into());
        doc.insert("class".into(), "CommandLineTool".into());
        let uses_mpi = self
            .requirements
            .iter()
            .chain(&self.hints)
            .any(|r| matches!(r, Requirement::Mpi(_)));
        if uses_mpi {
            let mut ns = Mapping::new();
            ns.insert("cwltool".into(), CWLTOOL_NAMESPACE.into());
            doc.insert("$namespaces".into(), Yaml::Mapping(ns));
        }
        if !self.requirements.is_empty() {
            doc.insert("requirements".into(), requirements_to_yaml(&self.requirements));
        }
        if !self.hints.is_empty() {
            doc.insert("hints".into(), requirements_to_yaml(&self.hints));
        }
        doc.insert("baseCommand".into(), strings(&self.base_command));
        if !self.arguments.is_empty() {
            let args = self
                .arguments
                .iter()
                .map(|a| {
                    let mut m = Mapping::new();
                    m.insert("position".into(), a.position.into());
                    let text = match &a.value {
                        ArgumentValue::Literal(s) => s.clone(),
                        ArgumentValue::Ref(r) => r.to_string(),
                    };
                    m.insert("valueFrom".into(), text.into());
                    Yaml::Mapping(m)
                })
                .collect();
            doc.insert("arguments".into(), Yaml::Sequence(args));
        }
        doc.insert("inputs".into(), inputs_to_yaml(&self.inputs));
        let outputs = self
            .outputs
            .iter()
            .map(|o| {
                let mut m = Mapping::new();
                m.insert("id".into(), o.id.clone().into());
                m.insert("type".into(), o.ty.name().into());
                if let Some(glob) = &o.glob {
                    let mut binding = Mapping::new();
                    binding.insert("glob".into(), glob.clone().into());
                    m.insert("outputBinding".into(), Yaml::Mapping(binding));
                }
                Yaml::Mapping(m)
            })
            .collect();
        doc.insert("outputs".into(), Yaml::Sequence(outputs));
        if let Some(stdout) = &self.stdout {
            doc.insert("stdout".into(), stdout.clone().into());
        }
        Yaml::Mapping(doc)
    }

    pub fn to_yaml_string(&self) -> String {
        serde_yaml::to_string(&self.to_yaml()).expect("YAML values always serialize")
    }
}

fn strings(items: &[String]) -> Yaml {
    Yaml::Sequence(items.iter().cloned().map(Yaml::String).collect())
}

fn inputs_to_yaml(inputs: &[InputParameter]) -> Yaml {
    Yaml::Sequence(
        inputs
            .iter()
            .map(|i| {
                let mut m = Mapping::new();
                m.insert("id".into(), i.id.clone().into());
                m.insert("type".into(), i.ty.name().into());
                if let Some(default) = &i.default {
                    m.insert("default".into(), default.to_yaml());
                }
                if let Some(binding) = i.binding {
                    let mut b = Mapping::new();
                    b.insert("position".into(), binding.position.into());
                    m.insert("inputBinding".into(), Yaml::Mapping(b));
                }
                Yaml::Mapping(m)
            })
            .collect(),
    )
}

fn requirements_to_yaml(list: &[Requirement]) -> Yaml {
    Yaml::Sequence(
        list.iter()
            .map(|r| {
                let mut m = Mapping::new();
                match r {
                    Requirement::Mpi(decl) => {
                        m.insert("class".into(), format!("cwltool:{MPI_REQUIREMENT}").into());
                        match &decl.processes {
                            Some(Processes::Count(n)) => {
                                m.insert("processes".into(), (*n).into());
                            }
                            Some(Processes::Ref(r)) => {
                                m.insert("processes".into(), r.to_string().into());
                            }
                            None => {}
                        }
                    }
                    Requirement::Software(decl) => {
                        m.insert("class".into(), SOFTWARE_REQUIREMENT.into());
                        let packages = decl
                            .packages
                            .iter()
                            .map(|p| {
                                let mut pm = Mapping::new();
                                pm.insert("package".into(), p.name.clone().into());
                                if !p.versions.is_empty() {
                                    pm.insert("version".into(), strings(&p.versions));
                                }
                                Yaml::Mapping(pm)
                            })
                            .collect();
                        m.insert("packages".into(), Yaml::Sequence(packages));
                    }
                }
                Yaml::Mapping(m)
            })
            .collect(),
    )
}

/// Where a step input reads its value from.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Source {
    WorkflowInput(String),
    StepOutput { step: String, output: String },
}

impl Source {
    pub fn parse(text: &str) -> Source {
        let text = text.strip_prefix('#').unwrap_or(text);
        match text.split_once('/') {
            Some((step, output)) => Source::StepOutput {
                step: step.to_string(),
                output: output.to_string(),
            },
            None => Source::WorkflowInput(text.to_string()),
        }
    }
}

impl std::fmt::Display for Source {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Source::WorkflowInput(id) => f.write_str(id),
            Source::StepOutput { step, output } => write!(f, "{step}/{output}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkflowStep {
    pub id: String,
    /// File the tool was loaded from; `None` for inline tools.
    pub run_path: Option<PathBuf>,
    pub run: Arc<ToolDescription>,
    /// Tool input id to source.
    pub inputs: BTreeMap<String, Source>,
    pub out: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkflowOutput {
    pub id: String,
    pub ty: OutputType,
    pub source: Source,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkflowDescription {
    pub cwl_version: String,
    pub inputs: Vec<InputParameter>,
    pub outputs: Vec<WorkflowOutput>,
    pub steps: Vec<WorkflowStep>,
}

impl WorkflowDescription {
    pub fn step(&self, id: &str) -> Option<&WorkflowStep> {
        self.steps.iter().find(|s| s.id == id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Document {
    Tool(ToolDescription),
    Workflow(WorkflowDescription),
}
