//! Run Common Workflow Language tools and workflows on HPC systems, including
//! tools that must be started through an MPI job launcher.
//!
//! A tool opts in to MPI with the `cwltool:MPIRequirement` extension:
//!
//! ```yaml
//! requirements:
//!   cwltool:MPIRequirement:
//!     processes: $(inputs.nproc)
//! ```
//!
//! How the launcher is invoked on a given machine comes from an
//! [`MpiPlatformConfig`]. Per-rank performance files can be summarized with
//! [`perfstats`].

pub mod cli;
pub mod cmdline;
pub mod diag;
pub mod executor;
pub mod expr;
pub mod mock_mpi;
pub mod model;
pub mod mpi_config;
pub mod perfstats;
pub mod software;
pub mod workflow;

pub use cmdline::{build_command, CommandPlan, Environment};
pub use diag::{Diagnostic, Severity};
pub use expr::{JobOrder, Value};
pub use model::{load_document, Document, ToolDescription, WorkflowDescription};
pub use mpi_config::{load_config, MpiPlatformConfig};
pub use software::SiteCatalog;
pub use workflow::{run_single_tool, run_workflow, RunOptions};

pub type RankPerfRecord = perfstats::RankPerfRecord<f64>;
pub type RankPerfRecord32 = perfstats::RankPerfRecord<f32>;
pub type AggregateStats = perfstats::AggregateStats<f64>;
pub type AggregateStats32 = perfstats::AggregateStats<f32>;
