//! Concrete input values, job orders, and the parameter-reference language.
//!
//! The only expression form understood here is a whole-string parameter
//! reference such as `$(inputs.nproc)` or `$(inputs.grid.path)`. There is no
//! JavaScript engine and no string interpolation.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde_yaml::Value as Yaml;
use thiserror::Error;

use crate::model::{CwlType, InputParameter, Processes};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExprError {
    #[error("malformed parameter reference {text:?}: {reason}")]
    Malformed { text: String, reason: &'static str },
    #[error("unsupported reference root {root:?} in {text:?} (only \"inputs\" is available)")]
    UnsupportedRoot { text: String, root: String },
    #[error("undefined input {0:?}")]
    UndefinedInput(String),
    #[error("cannot take field {field:?} of a {kind} value")]
    NotARecord { field: String, kind: &'static str },
    #[error("File has no field {0:?}")]
    UnknownField(String),
    #[error("processes must evaluate to an integer, got {0}")]
    NotAnInteger(&'static str),
    #[error("processes must be non-negative, got {0}")]
    NegativeProcesses(i64),
    #[error("missing required input {0:?}")]
    MissingInput(String),
    #[error("input {id:?}: {reason}")]
    InvalidInput { id: String, reason: String },
}

/// A `File` record as seen by tools and job orders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileValue {
    pub path: PathBuf,
    pub basename: String,
    pub size: Option<u64>,
    pub checksum: Option<String>,
}

impl FileValue {
    /// Describes `path`, picking up the size when the file exists.
    pub fn from_path(path: impl Into<PathBuf>) -> Self {
        let path = path.into();
        let basename = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let size = std::fs::metadata(&path).ok().filter(|m| m.is_file()).map(|m| m.len());
        Self {
            path,
            basename,
            size,
            checksum: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Null,
    Bool(bool),
    Int(i64),
    Float(f64),
    String(String),
    File(FileValue),
    Array(Vec<Value>),
}

impl Value {
    pub fn kind(&self) -> &'static str {
        match self {
            Value::Null => "null",
            Value::Bool(_) => "boolean",
            Value::Int(_) => "int",
            Value::Float(_) => "float",
            Value::String(_) => "string",
            Value::File(_) => "File",
            Value::Array(_) => "array",
        }
    }

    /// Converts a YAML/JSON node. Relative `File` paths resolve against `base_dir`.
    pub fn from_yaml(node: &Yaml, base_dir: &Path) -> Result<Value, String> {
        match node {
            Yaml::Null => Ok(Value::Null),
            Yaml::Bool(b) => Ok(Value::Bool(*b)),
            Yaml::Number(n) => {
                if let Some(i) = n.as_i64() {
                    Ok(Value::Int(i))
                } else if let Some(f) = n.as_f64() {
                    if n.is_u64() {
                        return Err(format!("integer {n} is out of range"));
                    }
                    Ok(Value::Float(f))
                } else {
                    Err(format!("unrepresentable number {n}"))
                }
            }
            Yaml::String(s) => Ok(Value::String(s.clone())),
            Yaml::Sequence(items) => items
                .iter()
                .map(|item| Value::from_yaml(item, base_dir))
                .collect::<Result<Vec<_>, _>>()
                .map(Value::Array),
            Yaml::Mapping(map) => {
                let class = map.get("class").and_then(Yaml::as_str);
                if class != Some("File") {
                    return Err("record values other than File are not supported".into());
                }
                let location = map
                    .get("path")
                    .or_else(|| map.get("location"))
                    .and_then(Yaml::as_str)
                    .ok_or("File record needs a \"path\" or \"location\"")?;
                let location = location.strip_prefix("file://").unwrap_or(location);
                let path = Path::new(location);
                let path = if path.is_absolute() {
                    path.to_path_buf()
                } else {
                    base_dir.join(path)
                };
                Ok(Value::File(FileValue::from_path(path)))
            }
            Yaml::Tagged(tagged) => Value::from_yaml(&tagged.value, base_dir),
        }
    }

    pub fn to_yaml(&self) -> Yaml {
        match self {
            Value::Null => Yaml::Null,
            Value::Bool(b) => Yaml::Bool(*b),
            Value::Int(i) => Yaml::Number((*i).into()),
            Value::Float(f) => Yaml::Number((*f).into()),
            Value::String(s) => Yaml::String(s.clone()),
            Value::File(f) => {
                let mut map = serde_yaml::Mapping::new();
                map.insert("class".into(), "File".into());
                map.insert("path".into(), f.path.to_string_lossy().into_owned().into());
                Yaml::Mapping(map)
            }
            Value::Array(items) => Yaml::Sequence(items.iter().map(Value::to_yaml).collect()),
        }
    }

    /// Output-object form: File records carry class, path, basename, size and checksum.
    pub fn to_json(&self) -> serde_json::Value {
        use serde_json::Value as Json;
        match self {
            Value::Null => Json::Null,
            Value::Bool(b) => Json::Bool(*b),
            Value::Int(i) => Json::from(*i),
            Value::Float(f) => Json::from(*f),
            Value::String(s) => Json::String(s.clone()),
            Value::File(f) => {
                let mut map = serde_json::Map::new();
                map.insert("class".into(), "File".into());
                map.insert("path".into(), f.path.to_string_lossy().into_owned().into());
                map.insert("basename".into(), f.basename.clone().into());
                if let Some(size) = f.size {
                    map.insert("size".into(), size.into());
                }
                if let Some(checksum) = &f.checksum {
                    map.insert("checksum".into(), checksum.clone().into());
                }
                Json::Object(map)
            }
            Value::Array(items) => Json::Array(items.iter().map(Value::to_json).collect()),
        }
    }

    /// Command-line rendering. Arrays expand to one token per element.
    pub fn render_args(&self, out: &mut Vec<String>) {
        match self {
            Value::Null => {}
            Value::Bool(b) => out.push(b.to_string()),
            Value::Int(i) => out.push(i.to_string()),
            Value::Float(f) => out.push(f.to_string()),
            Value::String(s) => out.push(s.clone()),
            Value::File(f) => out.push(f.path.to_string_lossy().into_owned()),
            Value::Array(items) => items.iter().for_each(|v| v.render_args(out)),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        self.render_args(&mut parts);
        f.write_str(&parts.join(" "))
    }
}

/// Concrete input values for one tool or workflow run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct JobOrder {
    pub values: BTreeMap<String, Value>,
}

impl JobOrder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, id: &str, value: Value) -> Self {
        self.values.insert(id.to_string(), value);
        self
    }

    pub fn get(&self, id: &str) -> Option<&Value> {
        self.values.get(id).filter(|v| !matches!(v, Value::Null))
    }

    /// Parses a YAML or JSON job file body. `null` entries count as absent.
    pub fn from_yaml_str(text: &str, base_dir: &Path) -> Result<JobOrder, String> {
        if text.trim().is_empty() {
            return Ok(JobOrder::new());
        }
        let node: Yaml = serde_yaml::from_str(text).map_err(|e| e.to_string())?;
        let map = match node {
            Yaml::Null => return Ok(JobOrder::new()),
            Yaml::Mapping(map) => map,
            _ => return Err("job order must be a mapping of input id to value".into()),
        };
        let mut job = JobOrder::new();
        for (key, value) in &map {
            let key = key.as_str().ok_or("job order keys must be strings")?;
            let value = Value::from_yaml(value, base_dir).map_err(|e| format!("input {key:?}: {e}"))?;
            job.values.insert(key.to_string(), value);
        }
        Ok(job)
    }

    /// Fills defaults and type-checks against the declared inputs.
    pub fn complete(&self, inputs: &[InputParameter]) -> Result<JobOrder, ExprError> {
        let mut done = self.clone();
        for input in inputs {
            let value = match self.get(&input.id) {
                Some(v) => v.clone(),
                None => match &input.default {
                    Some(d) => d.clone(),
                    None => return Err(ExprError::MissingInput(input.id.clone())),
                },
            };
            let value = input.ty.coerce(value).map_err(|reason| ExprError::InvalidInput {
                id: input.id.clone(),
                reason,
            })?;
            done.values.insert(input.id.clone(), value);
        }
        Ok(done)
    }

    /// Parses `key=value` pairs, typing each value by the declared input type.
    pub fn from_pairs<'a>(
        pairs: impl IntoIterator<Item = &'a str>,
        inputs: &[InputParameter],
        base_dir: &Path,
    ) -> Result<JobOrder, String> {
        let mut job = JobOrder::new();
        for pair in pairs {
            let (key, raw) = pair
                .split_once('=')
                .ok_or_else(|| format!("expected key=value, got {pair:?}"))?;
            let ty = inputs
                .iter()
                .find(|i| i.id == key)
                .map(|i| &i.ty)
                .ok_or_else(|| format!("no input named {key:?}"))?;
            let value = parse_scalar_for(ty, raw, base_dir)
                .map_err(|e| format!("input {key:?}: {e}"))?;
            job.values.insert(key.to_string(), value);
        }
        Ok(job)
    }
}

fn parse_scalar_for(ty: &CwlType, raw: &str, base_dir: &Path) -> Result<Value, String> {
    match ty {
        CwlType::String => Ok(Value::String(raw.to_string())),
        CwlType::Int => raw.parse().map(Value::Int).map_err(|e| e.to_string()),
        CwlType::Float => raw.parse().map(Value::Float).map_err(|e| e.to_string()),
        CwlType::Boolean => raw.parse().map(Value::Bool).map_err(|e| e.to_string()),
        CwlType::File => {
            let path = Path::new(raw);
            let path = if path.is_absolute() {
                path.to_path_buf()
            } else {
                base_dir.join(path)
            };
            Ok(Value::File(FileValue::from_path(path)))
        }
        CwlType::Array(item) => raw
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| parse_scalar_for(item, s, base_dir))
            .collect::<Result<Vec<_>, _>>()
            .map(Value::Array),
    }
}

/// A parameter reference `$(inputs.a.b...)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ParamRef {
    path: Vec<String>,
}

impl ParamRef {
    /// Full path, starting with `"inputs"`.
    pub fn path(&self) -> &[String] {
        &self.path
    }

    /// The input id the reference reads.
    pub fn input_id(&self) -> &str {
        &self.path[1]
    }
}

impl fmt::Display for ParamRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "$({})", self.path.join("."))
    }
}

fn is_identifier(segment: &str) -> bool {
    let mut chars = segment.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

/// Parses a whole-string reference. `Ok(None)` means the text is a plain literal.
pub fn parse_ref(text: &str) -> Result<Option<ParamRef>, ExprError> {
    let Some(rest) = text.strip_prefix("$(") else {
        return Ok(None);
    };
    let malformed = |reason| ExprError::Malformed {
        text: text.to_string(),
        reason,
    };
    let Some(close) = rest.find(')') else {
        return Err(malformed("unbalanced parentheses"));
    };
    if close + 1 != rest.len() {
        return Err(malformed("trailing text after the closing parenthesis"));
    }
    let body = &rest[..close];
    if body.contains('(') {
        return Err(malformed("unbalanced parentheses"));
    }
    if body.is_empty() {
        return Err(malformed("empty reference"));
    }
    let path: Vec<String> = body.split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(malformed("empty path segment"));
    }
    if path[0] != "inputs" {
        return Err(ExprError::UnsupportedRoot {
            text: text.to_string(),
            root: path[0].clone(),
        });
    }
    if path.len() < 2 {
        return Err(malformed("reference must name an input"));
    }
    if !path.iter().all(|s| is_identifier(s)) {
        return Err(malformed("path segments must be identifiers"));
    }
    Ok(Some(ParamRef { path }))
}

pub fn evaluate(reference: &ParamRef, job: &JobOrder) -> Result<Value, ExprError> {
    let id = reference.input_id();
    let mut current = job
        .get(id)
        .cloned()
        .ok_or_else(|| ExprError::UndefinedInput(id.to_string()))?;
    for field in &reference.path[2..] {
        current = match &current {
            Value::File(file) => match field.as_str() {
                "path" => Value::String(file.path.to_string_lossy().into_owned()),
                "basename" => Value::String(file.basename.clone()),
                "size" => file.size.map(|s| Value::Int(s as i64)).unwrap_or(Value::Null),
                "checksum" => file.checksum.clone().map(Value::String).unwrap_or(Value::Null),
                _ => return Err(ExprError::UnknownField(field.clone())),
            },
            other => {
                return Err(ExprError::NotARecord {
                    field: field.clone(),
                    kind: other.kind(),
                })
            }
        };
    }
    Ok(current)
}

/// Evaluates a `processes` declaration to a process count.
pub fn resolve_processes(processes: &Processes, job: &JobOrder) -> Result<u64, ExprError> {
    match processes {
        Processes::Count(n) => Ok(*n),
        Processes::Ref(reference) => match evaluate(reference, job)? {
            Value::Int(n) if n < 0 => Err(ExprError::NegativeProcesses(n)),
            Value::Int(n) => Ok(n as u64),
            other => Err(ExprError::NotAnInteger(other.kind())),
        },
    }
}
