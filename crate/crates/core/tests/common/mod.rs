#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use cwl_mpi::model::{load_document, Document, ToolDescription, WorkflowDescription};
use cwl_mpi::Environment;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn runner_bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_runner"))
}

pub fn mock_bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_mock-mpiexec"))
}

/// `PATH` with the directory holding `mock-mpiexec` in front.
pub fn path_with_mock() -> String {
    let dir = mock_bin().parent().unwrap().to_path_buf();
    let rest = std::env::var("PATH").unwrap_or_else(|_| "/usr/bin:/bin".into());
    format!("{}:{rest}", dir.display())
}

/// Minimal host environment for library-level runs.
pub fn test_host_env() -> Environment {
    let mut env = BTreeMap::new();
    env.insert("PATH".to_string(), path_with_mock());
    env.insert("HOME".to_string(), std::env::var("HOME").unwrap_or_else(|_| "/".into()));
    env
}

pub fn load_tool(name: &str) -> ToolDescription {
    match load_document(&fixture(name)).unwrap().document {
        Document::Tool(tool) => tool,
        Document::Workflow(_) => panic!("{name} is a workflow"),
    }
}

pub fn load_workflow(name: &str) -> WorkflowDescription {
    match load_document(&fixture(name)).unwrap().document {
        Document::Workflow(wf) => wf,
        Document::Tool(_) => panic!("{name} is a tool"),
    }
}
pub mod props;
