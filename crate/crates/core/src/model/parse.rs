use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_yaml::{Mapping, Value as Yaml};

use super::*;
use crate::diag::Diagnostic;
use crate::expr::{parse_ref, Value};
use crate::workflow::StepGraph;

/// A validated document plus any warnings raised while reading it.
#[derive(Debug, Clone, PartialEq)]
pub struct Parsed {
    pub document: Document,
    pub warnings: Vec<Diagnostic>,
}

/// Every diagnostic (errors and warnings) from a rejected document.
#[derive(Debug, Clone, PartialEq)]
pub struct ParseError {
    pub diagnostics: Vec<Diagnostic>,
}

impl ParseError {
    pub fn errors(&self) -> impl Iterator<Item = &Diagnostic> {
        self.diagnostics.iter().filter(|d| d.is_error())
    }
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let lines: Vec<String> = self.diagnostics.iter().map(|d| d.to_string()).collect();
        f.write_str(&lines.join("\n"))
    }
}

impl std::error::Error for ParseError {}

const TOOL_KEYS: &[&str] = &[
    "cwlVersion", "class", "id", "label", "doc", "$namespaces", "$schemas", "baseCommand",
    "arguments", "inputs", "outputs", "requirements", "hints", "stdout",
];
const TOOL_UNSUPPORTED: &[&str] = &[
    "stdin", "stderr", "successCodes", "temporaryFailCodes", "permanentFailCodes",
];
const WORKFLOW_KEYS: &[&str] = &[
    "cwlVersion", "class", "id", "label", "doc", "$namespaces", "$schemas", "inputs", "outputs",
    "steps", "requirements", "hints",
];
const KNOWN_UNSUPPORTED_REQUIREMENTS: &[&str] = &[
    "InlineJavascriptRequirement", "SchemaDefRequirement", "DockerRequirement",
    "InitialWorkDirRequirement", "EnvVarRequirement", "ShellCommandRequirement",
    "ResourceRequirement", "ScatterFeatureRequirement", "SubworkflowFeatureRequirement",
    "MultipleInputFeatureRequirement", "StepInputExpressionRequirement", "LoadListingRequirement",
    "WorkReuse", "NetworkAccess", "InplaceUpdateRequirement", "ToolTimeLimit",
];
const CWL_VERSIONS: &[&str] = &["v1.0", "v1.1", "v1.2"];

/// Parses and validates a document read from `path`.
pub fn load_document(path: &Path) -> Result<Parsed, ParseError> {
    let label = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| ParseError {
        diagnostics: vec![Diagnostic::error(&label, None, format!("cannot read document: {e}"))],
    })?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_document_named(&text, &base, &label)
}

/// Parses document text; relative `run` paths resolve against `base_path`.
pub fn parse_document(text: &str, base_path: &Path) -> Result<Parsed, ParseError> {
    parse_document_named(text, base_path, "<document>")
}

pub fn parse_document_named(text: &str, base_path: &Path, label: &str) -> Result<Parsed, ParseError> {
    let mut ctx = Ctx::new(label, text, base_path);
    let document = ctx.document();
    let diagnostics = std::mem::take(&mut ctx.diags);
    match document {
        Some(document) if !diagnostics.iter().any(Diagnostic::is_error) => Ok(Parsed {
            document,
            warnings: diagnostics,
        }),
        _ => Err(ParseError { diagnostics }),
    }
}

struct Ctx<'a> {
    file: String,
    text: &'a str,
    base: PathBuf,
    diags: Vec<Diagnostic>,
    namespaces: BTreeMap<String, String>,
}

enum ClassKind {
    Mpi,
    Software,
    Unsupported(String),
    Unknown(String),
}

fn key_str(key: &Yaml) -> String {
    match key {
        Yaml::String(s) => s.clone(),
        other => serde_yaml::to_string(other).unwrap_or_default().trim().to_string(),
    }
}

impl<'a> Ctx<'a> {
    fn new(file: &str, text: &'a str, base: &Path) -> Self {
        Self {
            file: file.to_string(),
            text,
            base: base.to_path_buf(),
            diags: Vec::new(),
            namespaces: BTreeMap::new(),
        }
    }

    /// First line mentioning `needle`, as a best-effort location.
    fn line_of(&self, needle: &str) -> Option<usize> {
        if needle.is_empty() {
            return None;
        }
        self.text
            .lines()
            .position(|line| line.contains(needle))
            .map(|i| i + 1)
    }

    fn error(&mut self, near: &str, message: impl Into<String>) {
        let line = self.line_of(near);
        self.diags.push(Diagnostic::error(&self.file, line, message));
    }

    fn warn(&mut self, near: &str, message: impl Into<String>) {
        let line = self.line_of(near);
        self.diags.push(Diagnostic::warning(&self.file, line, message));
    }

    fn document(&mut self) -> Option<Document> {
        let root: Yaml = match serde_yaml::from_str(self.text) {
            Ok(root) => root,
            Err(e) => {
                let line = e.location().map(|l| l.line());
                let message = match e.location() {
                    Some(l) => format!("syntax error at column {}: {e}", l.column()),
                    None => format!("syntax error: {e}"),
                };
                self.diags.push(Diagnostic::error(&self.file, line, message));
                return None;
            }
        };
        let Yaml::Mapping(root) = root else {
            self.error("", "document must be a mapping");
            return None;
        };
        self.reject_imports(&Yaml::Mapping(root.clone()));
        self.namespaces(&root);
        match root.get("class").and_then(Yaml::as_str) {
            Some("CommandLineTool") => self.tool(&root).map(Document::Tool),
            Some("Workflow") => self.workflow(&root).map(Document::Workflow),
            Some(other) => {
                let other = other.to_string();
                self.error("class", format!("unknown class {other:?}"));
                None
            }
            None => {
                self.error("", "missing \"class\" field");
                None
            }
        }
    }

    fn reject_imports(&mut self, node: &Yaml) {
        match node {
            Yaml::Mapping(map) => {
                for (k, v) in map {
                    let k = key_str(k);
                    if matches!(k.as_str(), "$import" | "$include" | "$mixin" | "$graph") {
                        self.error(&k, format!("unsupported feature: {k}"));
                    }
                    self.reject_imports(v);
                }
            }
            Yaml::Sequence(items) => items.iter().for_each(|i| self.reject_imports(i)),
            _ => {}
        }
    }

    fn namespaces(&mut self, root: &Mapping) {
        let Some(ns) = root.get("$namespaces") else {
            return;
        };
        let Yaml::Mapping(ns) = ns else {
            self.error("$namespaces", "$namespaces must be a mapping");
            return;
        };
        for (prefix, uri) in ns {
            match (prefix.as_str(), uri.as_str()) {
                (Some(p), Some(u)) => {
                    self.namespaces.insert(p.to_string(), u.to_string());
                }
                _ => self.error("$namespaces", "$namespaces entries must map strings to strings"),
            }
        }
    }

    fn cwl_version(&mut self, root: &Mapping) -> String {
        match root.get("cwlVersion") {
            Some(Yaml::String(v)) => {
                if !CWL_VERSIONS.contains(&v.as_str()) {
                    self.warn("cwlVersion", format!("untested cwlVersion {v:?}"));
                }
                v.clone()
            }
            Some(_) => {
                self.error("cwlVersion", "cwlVersion must be a string");
                String::new()
            }
            None => {
                self.error("", "missing \"cwlVersion\"");
                String::new()
            }
        }
    }

    fn check_top_keys(&mut self, root: &Mapping, known: &[&str], unsupported: &[&str]) {
        for key in root.keys() {
            let key = key_str(key);
            if unsupported.contains(&key.as_str()) {
                self.error(&key, format!("unsupported feature: {key:?}"));
            } else if !known.contains(&key.as_str()) && !key.contains(':') {
                self.warn(&key, format!("unknown top-level key {key:?} ignored"));
            }
        }
    }

    fn class_kind(&self, name: &str) -> ClassKind {
        let local = if let Some(rest) = name.strip_prefix(CWLTOOL_NAMESPACE) {
            Some(rest)
        } else if let Some((prefix, rest)) = name.split_once(':') {
            match self.namespaces.get(prefix) {
                Some(uri) if uri == CWLTOOL_NAMESPACE => Some(rest),
                _ => return ClassKind::Unknown(name.to_string()),
            }
        } else {
            None
        };
        match (local, name) {
            (Some(MPI_REQUIREMENT), _) | (None, MPI_REQUIREMENT) => ClassKind::Mpi,
            (None, SOFTWARE_REQUIREMENT) => ClassKind::Software,
            (None, n) if KNOWN_UNSUPPORTED_REQUIREMENTS.contains(&n) => {
                ClassKind::Unsupported(n.to_string())
            }
            _ => ClassKind::Unknown(name.to_string()),
        }
    }

    fn requirement_list(&mut self, node: Option<&Yaml>, section: &str) -> Vec<Requirement> {
        let hint = section == "hints";
        let entries: Vec<(String, Yaml)> = match node {
            None | Some(Yaml::Null) => return Vec::new(),
            Some(Yaml::Mapping(map)) => map.iter().map(|(k, v)| (key_str(k), v.clone())).collect(),
            Some(Yaml::Sequence(items)) => {
                let mut entries = Vec::new();
                for item in items {
                    match item.get("class").and_then(Yaml::as_str) {
                        Some(class) => entries.push((class.to_string(), item.clone())),
                        None => self.error(section, format!("{section} entries need a \"class\"")),
                    }
                }
                entries
            }
            Some(_) => {
                self.error(section, format!("{section} must be a list or mapping"));
                return Vec::new();
            }
        };
        let mut out = Vec::new();
        for (class, body) in entries {
            let parsed = match self.class_kind(&class) {
                ClassKind::Mpi => self.mpi_requirement(&class, &body).map(Requirement::Mpi),
                ClassKind::Software => self.software_requirement(&class, &body).map(Requirement::Software),
                ClassKind::Unsupported(name) if hint => {
                    self.warn(&class, format!("unsupported feature {name:?} in hints ignored"));
                    None
                }
                ClassKind::Unsupported(name) => {
                    self.error(&class, format!("unsupported feature: {name}"));
                    None
                }
                ClassKind::Unknown(name) if hint => {
                    self.warn(&class, format!("unknown requirement class {name:?} in hints ignored"));
                    None
                }
                ClassKind::Unknown(name) => {
                    self.error(&class, format!("unknown requirement class {name:?}"));
                    None
                }
            };
            if let Some(req) = parsed {
                if out.iter().any(|r: &Requirement| r.class_name() == req.class_name()) {
                    self.error(&class, format!("duplicate {} in {section}", req.class_name()));
                } else {
                    out.push(req);
                }
            }
        }
        out
    }

    fn body_mapping(&mut self, class: &str, body: &Yaml) -> Option<Mapping> {
        match body {
            Yaml::Null => Some(Mapping::new()),
            Yaml::Mapping(m) => Some(m.clone()),
            _ => {
                self.error(class, format!("{class} must be a mapping"));
                None
            }
        }
    }

    fn mpi_requirement(&mut self, class: &str, body: &Yaml) -> Option<MpiRequirementDecl> {
        let body = self.body_mapping(class, body)?;
        let mut ok = true;
        for key in body.keys() {
            let key = key_str(key);
            if key == "class" {
                if !matches!(self.class_kind(body["class"].as_str().unwrap_or("")), ClassKind::Mpi) {
                    self.error(class, "MPIRequirement class field must be \"MPIRequirement\"");
                    ok = false;
                }
            } else if key != "processes" {
                self.error(&key, format!("unknown key {key:?} in {MPI_REQUIREMENT}"));
                ok = false;
            }
        }
        let processes = match body.get("processes") {
            None | Some(Yaml::Null) => None,
            Some(Yaml::Number(n)) => match n.as_u64() {
                Some(n) => Some(Processes::Count(n)),
                None => {
                    self.error("processes", format!("processes must be a non-negative integer, got {n}"));
                    ok = false;
                    None
                }
            },
            Some(Yaml::String(s)) => match parse_ref(s) {
                Ok(Some(r)) => Some(Processes::Ref(r)),
                Ok(None) => {
                    self.error("processes", format!("processes string {s:?} is not a parameter reference"));
                    ok = false;
                    None
                }
                Err(e) => {
                    self.error("processes", e.to_string());
                    ok = false;
                    None
                }
            },
            Some(_) => {
                self.error("processes", "processes must be an integer or a parameter reference");
                ok = false;
                None
            }
        };
        ok.then_some(MpiRequirementDecl { processes })
    }

    fn software_requirement(&mut self, class: &str, body: &Yaml) -> Option<SoftwareRequirementDecl> {
        let body = self.body_mapping(class, body)?;
        for key in body.keys() {
            let key = key_str(key);
            if key != "class" && key != "packages" {
                self.error(&key, format!("unknown key {key:?} in {SOFTWARE_REQUIREMENT}"));
                return None;
            }
        }
        let raw: Vec<(Option<String>, Yaml)> = match body.get("packages") {
            None | Some(Yaml::Null) => Vec::new(),
            Some(Yaml::Sequence(items)) => items.iter().map(|i| (None, i.clone())).collect(),
            Some(Yaml::Mapping(map)) => map.iter().map(|(k, v)| (Some(key_str(k)), v.clone())).collect(),
            Some(_) => {
                self.error("packages", "packages must be a list or mapping");
                return None;
            }
        };
        let mut packages: Vec<SoftwarePackage> = Vec::new();
        for (name, spec) in raw {
            let spec = match spec {
                Yaml::Null => Mapping::new(),
                Yaml::Mapping(m) => m,
                _ => {
                    self.error("packages", "each package must be a mapping");
                    return None;
                }
            };
            for key in spec.keys() {
                let key = key_str(key);
                if !matches!(key.as_str(), "package" | "version" | "specs") {
                    self.error(&key, format!("unknown key {key:?} in software package"));
                    return None;
                }
            }
            let name = name.or_else(|| spec.get("package").and_then(Yaml::as_str).map(str::to_string));
            let Some(name) = name.filter(|n| !n.is_empty()) else {
                self.error("packages", "software package name must be non-empty");
                return None;
            };
            let versions = match spec.get("version") {
                None | Some(Yaml::Null) => Vec::new(),
                Some(Yaml::Sequence(vs)) => vs.iter().map(scalar_text).collect(),
                Some(v) => vec![scalar_text(v)],
            };
            if packages.iter().any(|p| p.name == name) {
                self.error(&name, format!("duplicate software package {name:?}"));
                return None;
            }
            packages.push(SoftwarePackage { name, versions });
        }
        Some(SoftwareRequirementDecl { packages })
    }

    /// Accepts the mapping form (`id: spec`) and the list form (`- id: ...`).
    fn parameter_entries(&mut self, node: Option<&Yaml>, section: &str) -> Vec<(String, Yaml)> {
        let mut entries = Vec::new();
        match node {
            None | Some(Yaml::Null) => {}
            Some(Yaml::Mapping(map)) => {
                for (k, v) in map {
                    entries.push((key_str(k), v.clone()));
                }
            }
            Some(Yaml::Sequence(items)) => {
                for item in items {
                    match item.get("id").and_then(Yaml::as_str) {
                        Some(id) => entries.push((id.strip_prefix('#').unwrap_or(id).to_string(), item.clone())),
                        None => self.error(section, format!("{section} entries need an \"id\"")),
                    }
                }
            }
            Some(_) => self.error(section, format!("{section} must be a list or mapping")),
        }
        let mut seen = BTreeSet::new();
        for (id, _) in &entries {
            if id.is_empty() {
                self.error(section, format!("empty id in {section}"));
            } else if !seen.insert(id.clone()) {
                self.error(id, format!("duplicate id {id:?} in {section}"));
            }
        }
        entries
    }

    fn inputs(&mut self, node: Option<&Yaml>) -> Vec<InputParameter> {
        let mut inputs = Vec::new();
        for (id, spec) in self.parameter_entries(node, "inputs") {
            let spec = match spec {
                Yaml::Mapping(m) => m,
                other => {
                    let mut m = Mapping::new();
                    m.insert("type".into(), other);
                    m
                }
            };
            let mut ok = true;
            for key in spec.keys() {
                let key = key_str(key);
                match key.as_str() {
                    "id" | "type" | "default" | "inputBinding" | "label" | "doc" | "format" => {}
                    "secondaryFiles" | "streamable" | "loadContents" | "loadListing" => {
                        self.error(&key, format!("input {id:?}: unsupported feature: {key}"));
                        ok = false;
                    }
                    _ => self.warn(&key, format!("input {id:?}: unknown key {key:?} ignored")),
                }
            }
            let ty = match spec.get("type").map(CwlType::from_yaml) {
                Some(Ok(ty)) => ty,
                Some(Err(e)) => {
                    self.error(&id, format!("input {id:?}: {e}"));
                    continue;
                }
                None => {
                    self.error(&id, format!("input {id:?}: missing type"));
                    continue;
                }
            };
            let default = match spec.get("default") {
                None | Some(Yaml::Null) => None,
                Some(node) => match Value::from_yaml(node, &self.base).and_then(|v| ty.coerce(v)) {
                    Ok(v) => Some(v),
                    Err(e) => {
                        self.error(&id, format!("input {id:?}: default does not match type: {e}"));
                        ok = false;
                        None
                    }
                },
            };
            let binding = match spec.get("inputBinding") {
                None => None,
                Some(b) => self.binding(&id, b),
            };
            if ok {
                inputs.push(InputParameter { id, ty, default, binding });
            }
        }
        inputs
    }

    fn binding(&mut self, id: &str, node: &Yaml) -> Option<InputBinding> {
        let map = match node {
            Yaml::Null => return Some(InputBinding { position: 0 }),
            Yaml::Mapping(m) => m,
            _ => {
                self.error(id, format!("input {id:?}: inputBinding must be a mapping"));
                return None;
            }
        };
        for key in map.keys() {
            let key = key_str(key);
            if key != "position" {
                self.error(&key, format!("input {id:?}: unsupported feature: inputBinding.{key}"));
                return None;
            }
        }
        match map.get("position") {
            None => Some(InputBinding { position: 0 }),
            Some(p) => match p.as_i64() {
                Some(position) => Some(InputBinding { position }),
                None => {
                    self.error("position", format!("input {id:?}: position must be an integer"));
                    None
                }
            },
        }
    }

    fn output_type(&mut self, id: &str, node: Option<&Yaml>) -> Option<OutputType> {
        let ty = match node {
            Some(Yaml::String(s)) if s == "stdout" => OutputType::Stdout,
            Some(node) => match CwlType::from_yaml(node) {
                Ok(CwlType::File) => OutputType::File,
                Ok(CwlType::Array(item)) if *item == CwlType::File => OutputType::FileArray,
                Ok(other) => {
                    self.error(id, format!("output {id:?}: unsupported output type {}", other.name()));
                    return None;
                }
                Err(e) => {
                    self.error(id, format!("output {id:?}: {e}"));
                    return None;
                }
            },
            None => {
                self.error(id, format!("output {id:?}: missing type"));
                return None;
            }
        };
        Some(ty)
    }

    fn tool_outputs(&mut self, node: Option<&Yaml>) -> Vec<OutputParameter> {
        let mut outputs = Vec::new();
        for (id, spec) in self.parameter_entries(node, "outputs") {
            let spec = match spec {
                Yaml::Mapping(m) => m,
                other => {
                    let mut m = Mapping::new();
                    m.insert("type".into(), other);
                    m
                }
            };
            for key in spec.keys() {
                let key = key_str(key);
                match key.as_str() {
                    "id" | "type" | "outputBinding" | "label" | "doc" | "format" => {}
                    "secondaryFiles" | "streamable" => {
                        self.error(&key, format!("output {id:?}: unsupported feature: {key}"))
                    }
                    _ => self.warn(&key, format!("output {id:?}: unknown key {key:?} ignored")),
                }
            }
            let Some(ty) = self.output_type(&id, spec.get("type")) else {
                continue;
            };
            let glob = match spec.get("outputBinding") {
                None | Some(Yaml::Null) => None,
                Some(Yaml::Mapping(b)) => {
                    let mut glob = None;
                    for (k, v) in b {
                        let k = key_str(k);
                        match (k.as_str(), v) {
                            ("glob", Yaml::String(g)) if g.contains("$(") || g.contains("${") => {
                                self.error(g, format!("output {id:?}: unsupported feature: expression in glob"))
                            }
                            ("glob", Yaml::String(g)) => glob = Some(g.clone()),
                            ("glob", _) => self.error(&id, format!("output {id:?}: glob must be a string")),
                            _ => self.error(&k, format!("output {id:?}: unsupported feature: outputBinding.{k}")),
                        }
                    }
                    glob
                }
                Some(_) => {
                    self.error(&id, format!("output {id:?}: outputBinding must be a mapping"));
                    None
                }
            };
            match ty {
                OutputType::Stdout if glob.is_some() => {
                    self.warn(&id, format!("output {id:?}: glob ignored on stdout output"));
                    outputs.push(OutputParameter { id, ty, glob: None });
                }
                OutputType::File | OutputType::FileArray if glob.is_none() => {
                    self.error(&id, format!("output {id:?}: File outputs need outputBinding.glob"));
                }
                _ => outputs.push(OutputParameter { id, ty, glob }),
            }
        }
        outputs
    }

    fn base_command(&mut self, node: Option<&Yaml>) -> Vec<String> {
        match node {
            None | Some(Yaml::Null) => Vec::new(),
            Some(Yaml::String(s)) => vec![s.clone()],
            Some(Yaml::Sequence(items)) => {
                let tokens: Option<Vec<String>> = items.iter().map(|i| i.as_str().map(str::to_string)).collect();
                tokens.unwrap_or_else(|| {
                    self.error("baseCommand", "baseCommand entries must be strings");
                    Vec::new()
                })
            }
            Some(_) => {
                self.error("baseCommand", "baseCommand must be a string or list of strings");
                Vec::new()
            }
        }
    }

    fn argument_value(&mut self, text: &str) -> Option<ArgumentValue> {
        if text.starts_with("${") {
            self.error(text, "unsupported feature: JavaScript expression");
            return None;
        }
        match parse_ref(text) {
            Ok(Some(r)) => Some(ArgumentValue::Ref(r)),
            Ok(None) => Some(ArgumentValue::Literal(text.to_string())),
            Err(e) => {
                self.error(text, e.to_string());
                None
            }
        }
    }

    fn arguments(&mut self, node: Option<&Yaml>) -> Vec<Argument> {
        let items = match node {
            None | Some(Yaml::Null) => return Vec::new(),
            Some(Yaml::Sequence(items)) => items,
            Some(_) => {
                self.error("arguments", "arguments must be a list");
                return Vec::new();
            }
        };
        let mut args = Vec::new();
        for item in items {
            match item {
                Yaml::String(s) => {
                    if let Some(value) = self.argument_value(s) {
                        args.push(Argument { position: 0, value });
                    }
                }
                Yaml::Mapping(m) => {
                    let mut ok = true;
                    for key in m.keys() {
                        let key = key_str(key);
                        if key != "position" && key != "valueFrom" {
                            self.error(&key, format!("unsupported feature: arguments.{key}"));
                            ok = false;
                        }
                    }
                    let position = match m.get("position") {
                        None => 0,
                        Some(p) => match p.as_i64() {
                            Some(p) => p,
                            None => {
                                self.error("position", "argument position must be an integer");
                                ok = false;
                                0
                            }
                        },
                    };
                    let value = match m.get("valueFrom") {
                        Some(Yaml::String(s)) => self.argument_value(s),
                        Some(v @ (Yaml::Number(_) | Yaml::Bool(_))) => Some(ArgumentValue::Literal(scalar_text(v))),
                        _ => {
                            self.error("arguments", "argument needs a string valueFrom");
                            None
                        }
                    };
                    if let (true, Some(value)) = (ok, value) {
                        args.push(Argument { position, value });
                    }
                }
                Yaml::Number(_) | Yaml::Bool(_) => args.push(Argument {
                    position: 0,
                    value: ArgumentValue::Literal(scalar_text(item)),
                }),
                _ => self.error("arguments", "arguments entries must be strings or mappings"),
            }
        }
        args
    }

    fn tool(&mut self, root: &Mapping) -> Option<ToolDescription> {
        self.check_top_keys(root, TOOL_KEYS, TOOL_UNSUPPORTED);
        let cwl_version = self.cwl_version(root);
        let inputs = self.inputs(root.get("inputs"));
        let outputs = self.tool_outputs(root.get("outputs"));
        let base_command = self.base_command(root.get("baseCommand"));
        let arguments = self.arguments(root.get("arguments"));
        let requirements = self.requirement_list(root.get("requirements"), "requirements");
        let hints = self.requirement_list(root.get("hints"), "hints");
        let stdout = match root.get("stdout") {
            None | Some(Yaml::Null) => None,
            Some(Yaml::String(s)) if s.contains("$(") || s.contains("${") => {
                self.error("stdout", "unsupported feature: expression in stdout");
                None
            }
            Some(Yaml::String(s)) if s.is_empty() || s.contains('/') => {
                self.error("stdout", "stdout must be a plain file name");
                None
            }
            Some(Yaml::String(s)) => Some(s.clone()),
            Some(_) => {
                self.error("stdout", "stdout must be a string");
                None
            }
        };
        if base_command.is_empty() && arguments.is_empty() {
            self.error("", "tool needs a baseCommand or arguments");
        }
        let mpi_count = requirements
            .iter()
            .chain(&hints)
            .filter(|r| matches!(r, Requirement::Mpi(_)))
            .count();
        if mpi_count > 1 {
            self.error(MPI_REQUIREMENT, "at most one MPIRequirement is allowed across requirements and hints");
        }

        let declared: BTreeSet<&str> = inputs.iter().map(|i| i.id.as_str()).collect();
        let mut references = Vec::new();
        for req in requirements.iter().chain(&hints) {
            if let Requirement::Mpi(MpiRequirementDecl {
                processes: Some(Processes::Ref(r)),
            }) = req
            {
                references.push(r.clone());
            }
        }
        for arg in &arguments {
            if let ArgumentValue::Ref(r) = &arg.value {
                references.push(r.clone());
            }
        }
        for r in references {
            if !declared.contains(r.input_id()) {
                self.error(&r.to_string(), format!("dangling reference {r}: no input named {:?}", r.input_id()));
            }
        }

        Some(ToolDescription {
            cwl_version,
            base_command,
            arguments,
            inputs,
            outputs,
            requirements,
            hints,
            stdout,
        })
    }

    fn workflow(&mut self, root: &Mapping) -> Option<WorkflowDescription> {
        self.check_top_keys(root, WORKFLOW_KEYS, &[]);
        let cwl_version = self.cwl_version(root);
        for section in ["requirements", "hints"] {
            match root.get(section) {
                None | Some(Yaml::Null) => {}
                Some(Yaml::Sequence(s)) if s.is_empty() => {}
                Some(Yaml::Mapping(m)) if m.is_empty() => {}
                Some(_) => self.error(section, format!("unsupported feature: workflow-level {section}")),
            }
        }
        let inputs = self.inputs(root.get("inputs"));

        let mut steps = Vec::new();
        for (id, spec) in self.parameter_entries(root.get("steps"), "steps") {
            if let Some(step) = self.step(&id, &spec) {
                steps.push(step);
            }
        }

        let mut outputs = Vec::new();
        for (id, spec) in self.parameter_entries(root.get("outputs"), "outputs") {
            let Yaml::Mapping(spec) = spec else {
                self.error(&id, format!("workflow output {id:?} must be a mapping"));
                continue;
            };
            let ty = self.output_type(&id, spec.get("type"));
            if ty == Some(OutputType::Stdout) {
                self.error(&id, format!("workflow output {id:?}: stdout type is only valid on tools"));
                continue;
            }
            let source = match spec.get("outputSource") {
                Some(Yaml::String(s)) => Source::parse(s),
                Some(Yaml::Sequence(_)) => {
                    self.error(&id, "unsupported feature: multiple outputSource");
                    continue;
                }
                _ => {
                    self.error(&id, format!("workflow output {id:?} needs an outputSource"));
                    continue;
                }
            };
            if let Some(ty) = ty {
                outputs.push(WorkflowOutput { id, ty, source });
            }
        }

        let wf = WorkflowDescription {
            cwl_version,
            inputs,
            outputs,
            steps,
        };
        self.validate_wiring(&wf);
        Some(wf)
    }

    fn step(&mut self, id: &str, spec: &Yaml) -> Option<WorkflowStep> {
        let Yaml::Mapping(spec) = spec else {
            self.error(id, format!("step {id:?} must be a mapping"));
            return None;
        };
        for key in spec.keys() {
            let key = key_str(key);
            match key.as_str() {
                "id" | "run" | "in" | "out" | "label" | "doc" => {}
                "scatter" | "scatterMethod" | "when" | "requirements" | "hints" => {
                    self.error(&key, format!("step {id:?}: unsupported feature: {key}"))
                }
                _ => self.warn(&key, format!("step {id:?}: unknown key {key:?} ignored")),
            }
        }
        let (run_path, tool) = match spec.get("run") {
            Some(Yaml::String(path)) => {
                let full = self.base.join(path);
                let parsed = load_document(&full);
                match parsed {
                    Ok(Parsed {
                        document: Document::Tool(tool),
                        warnings,
                    }) => {
                        self.diags.extend(warnings);
                        (Some(full), tool)
                    }
                    Ok(Parsed {
                        document: Document::Workflow(_),
                        ..
                    }) => {
                        self.error(path, format!("step {id:?}: unsupported feature: nested workflow"));
                        return None;
                    }
                    Err(e) => {
                        self.diags.extend(e.diagnostics);
                        self.error(path, format!("step {id:?}: cannot load {path:?}"));
                        return None;
                    }
                }
            }
            Some(Yaml::Mapping(inline)) => {
                let class = inline.get("class").and_then(Yaml::as_str);
                if class != Some("CommandLineTool") {
                    self.error(id, format!("step {id:?}: run must be a CommandLineTool"));
                    return None;
                }
                self.namespaces(inline);
                let mut inline = inline.clone();
                if !inline.contains_key("cwlVersion") {
                    inline.insert("cwlVersion".into(), "v1.2".into());
                }
                (None, self.tool(&inline)?)
            }
            _ => {
                self.error(id, format!("step {id:?} needs a run path or inline tool"));
                return None;
            }
        };

        let mut inputs = BTreeMap::new();
        for (input_id, source) in self.parameter_entries(spec.get("in"), "in") {
            let source = match &source {
                Yaml::String(s) => s.clone(),
                Yaml::Mapping(m) => {
                    let extra: Vec<String> = m.keys().map(key_str).filter(|k| k != "id" && k != "source").collect();
                    if let Some(k) = extra.first() {
                        self.error(k, format!("step {id:?}: unsupported feature: in.{k}"));
                        continue;
                    }
                    match m.get("source").and_then(Yaml::as_str) {
                        Some(s) => s.to_string(),
                        None => {
                            self.error(&input_id, format!("step {id:?}: input {input_id:?} needs a source"));
                            continue;
                        }
                    }
                }
                _ => {
                    self.error(&input_id, format!("step {id:?}: input {input_id:?} needs a source"));
                    continue;
                }
            };
            if tool.input(&input_id).is_none() {
                self.error(&input_id, format!("step {id:?}: tool has no input {input_id:?}"));
                continue;
            }
            inputs.insert(input_id, Source::parse(&source));
        }

        let mut out = Vec::new();
        match spec.get("out") {
            None | Some(Yaml::Null) => {}
            Some(Yaml::Sequence(items)) => {
                for item in items {
                    let name = item
                        .as_str()
                        .or_else(|| item.get("id").and_then(Yaml::as_str))
                        .map(str::to_string);
                    match name {
                        Some(name) if tool.output(&name).is_some() => out.push(name),
                        Some(name) => self.error(&name, format!("step {id:?}: tool has no output {name:?}")),
                        None => self.error(id, format!("step {id:?}: out entries must be ids")),
                    }
                }
            }
            Some(_) => self.error(id, format!("step {id:?}: out must be a list")),
        }

        Some(WorkflowStep {
            id: id.to_string(),
            run_path,
            run: Arc::new(tool),
            inputs,
            out,
        })
    }

    fn check_source(&mut self, wf: &WorkflowDescription, source: &Source, context: &str) -> bool {
        match source {
            Source::WorkflowInput(id) => {
                if wf.inputs.iter().any(|i| &i.id == id) {
                    return true;
                }
                self.error(id, format!("{context}: dangling reference {id:?}: no such workflow input"));
            }
            Source::StepOutput { step, output } => match wf.step(step) {
                Some(s) if s.out.contains(output) => return true,
                Some(_) => self.error(
                    &format!("{step}/{output}"),
                    format!("{context}: dangling reference {source}: step {step:?} does not declare {output:?}"),
                ),
                None => self.error(
                    &format!("{step}/{output}"),
                    format!("{context}: dangling reference {source}: no step {step:?}"),
                ),
            },
        }
        false
    }

    fn validate_wiring(&mut self, wf: &WorkflowDescription) {
        let mut sound = true;
        for step in &wf.steps {
            for (input, source) in &step.inputs {
                sound &= self.check_source(wf, source, &format!("step {:?} input {input:?}", step.id));
            }
        }
        for output in &wf.outputs {
            sound &= self.check_source(wf, &output.source, &format!("workflow output {:?}", output.id));
            if matches!(output.source, Source::WorkflowInput(_)) {
                self.error(&output.id, format!("workflow output {:?} must come from a step", output.id));
            }
        }
        if !sound {
            return;
        }
        if let Err(e) = StepGraph::from_workflow(wf).ready_sets() {
            self.error("steps", e.to_string());
        }
    }
}

fn scalar_text(node: &Yaml) -> String {
    match node {
        Yaml::String(s) => s.clone(),
        other => serde_yaml::to_string(other).unwrap_or_default().trim().to_string(),
    }
}
