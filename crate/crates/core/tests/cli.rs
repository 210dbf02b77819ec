mod common;

use std::fs;
use std::process::{Command, Output};

use common::{fixture, path_with_mock, runner_bin};
use cwl_mpi::mock_mpi::{MockTrace, TRACE_FILE};

fn runner(args: &[&str]) -> Output {
    Command::new(runner_bin())
        .args(args)
        .env("PATH", path_with_mock())
        .env_remove("RUST_LOG")
        .output()
        .unwrap()
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

#[test]
fn hello_prints_empty_outputs_and_logs_message() {
    let out = tempfile::tempdir().unwrap();
    let o = out.path().to_str().unwrap();
    let res = runner(&["--outdir", o, fixture("hello.cwl").to_str().unwrap(), fixture("job.yml").to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(0), "{}", text(&res.stderr));
    assert_eq!(text(&res.stdout), "{}\n");
    assert!(text(&res.stderr).contains("Hello world"));
    assert_eq!(fs::read_to_string(out.path().join("hello/step.stdout")).unwrap(), "Hello world\n");
}

#[test]
fn quiet_keeps_tool_output_off_stderr() {
    let out = tempfile::tempdir().unwrap();
    let o = out.path().to_str().unwrap();
    let res = runner(&["-q", "--outdir", o, fixture("hello.cwl").to_str().unwrap(), "--input", "message=shh"]);
    assert_eq!(res.status.code(), Some(0));
    assert_eq!(text(&res.stdout), "{}\n");
    assert!(!text(&res.stderr).contains("shh"));
}

#[test]
fn mpi_cli_hello_with_mock_launcher() {
    let out = tempfile::tempdir().unwrap();
    let o = out.path().to_str().unwrap();
    let res = runner(&[
        "--mpi-config-file",
        fixture("mock.yml").to_str().unwrap(),
        "--outdir",
        o,
        fixture("hello-mpi.cwl").to_str().unwrap(),
        fixture("job.yml").to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(0), "{}", text(&res.stderr));
    let trace = MockTrace::read(&out.path().join("hello-mpi").join(TRACE_FILE)).unwrap();
    assert_eq!(trace.nproc, 2);
    assert_eq!(trace.argv, ["mock-mpiexec", "-n", "2", "echo", "Hello world"]);
}

#[test]
fn job_file_wins_over_inline_input() {
    let out = tempfile::tempdir().unwrap();
    let o = out.path().to_str().unwrap();
    let res = runner(&[
        "--outdir",
        o,
        "--input",
        "message=inline",
        fixture("hello.cwl").to_str().unwrap(),
        fixture("job.yml").to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(0));
    assert_eq!(fs::read_to_string(out.path().join("hello/step.stdout")).unwrap(), "Hello world\n");
}

#[test]
fn validation_and_usage_errors_exit_2() {
    let out = tempfile::tempdir().unwrap();
    let o = out.path().to_str().unwrap();
    let res = runner(&["--outdir", o, "missing.cwl"]);
    assert_eq!(res.status.code(), Some(2));
    assert!(res.stdout.is_empty());
    assert!(text(&res.stderr).contains("missing.cwl"));

    let res = runner(&["--outdir", o, fixture("hello.cwl").to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2), "missing required input");
    assert!(text(&res.stderr).contains("message"));

    let bad_cfg = out.path().join("bad.yml");
    fs::write(&bad_cfg, "runner: mpirun\nnot_a_key: 1\n").unwrap();
    let res = runner(&[
        "--mpi-config-file",
        bad_cfg.to_str().unwrap(),
        fixture("hello.cwl").to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(2));

    assert_eq!(runner(&[]).status.code(), Some(2));
    assert_eq!(runner(&["--version"]).status.code(), Some(0));
}

#[test]
fn execution_failure_exits_1() {
    let out = tempfile::tempdir().unwrap();
    let tool = out.path().join("fail.cwl");
    fs::write(&tool, "cwlVersion: v1.2\nclass: CommandLineTool\ninputs: []\nbaseCommand: 'false'\noutputs: []\n").unwrap();
    let res = runner(&["--outdir", out.path().join("o").to_str().unwrap(), tool.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(1));
    assert!(res.stdout.is_empty());
    assert!(text(&res.stderr).contains("fail.cwl"));
}

#[test]
fn mpi_cli_workflow_runs_and_publishes_outputs() {
    let out = tempfile::tempdir().unwrap();
    let o = out.path().to_str().unwrap();
    let res = runner(&[
        "--mpi-config-file",
        fixture("mock.yml").to_str().unwrap(),
        "--outdir",
        o,
        "--parallel-steps",
        fixture("pipeline.cwl").to_str().unwrap(),
        "--input",
        "message=mesh",
    ]);
    assert_eq!(res.status.code(), Some(0), "{}", text(&res.stderr));
    let outputs: serde_json::Value = serde_json::from_slice(&res.stdout).unwrap();
    let summary = outputs["summary"]["path"].as_str().unwrap();
    assert!(fs::read_to_string(summary).unwrap().trim_start().starts_with("8 "));
    assert_eq!(outputs["fields"]["class"], "File");
}

#[test]
fn software_catalog_flag() {
    let out = tempfile::tempdir().unwrap();
    let o = out.path().to_str().unwrap();
    let res = runner(&[
        "--software-catalog",
        fixture("catalog.yml").to_str().unwrap(),
        "--outdir",
        o,
        fixture("mesonh-env.cwl").to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(0), "{}", text(&res.stderr));
    let env = fs::read_to_string(out.path().join("env.txt")).unwrap();
    assert!(env.contains("MESONH_ROOT=/opt/mnh\n"));
    assert!(env.contains("PATH=/opt/mnh/bin:"));

    let res = runner(&["--outdir", o, fixture("mesonh-env.cwl").to_str().unwrap(), "--software-catalog", "/nonexistent.yml"]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn perfstats_subcommand_reports() {
    let pattern = fixture("perf").join("likwid_*.json");
    let res = runner(&["perfstats", pattern.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(0));
    let report = text(&res.stdout);
    let row: Vec<&str> = report.lines().last().unwrap().split_whitespace().collect();
    assert_eq!(row, ["4", "3.2", "0.80", "0.224", "1.6", "0.04"]);

    let res = runner(&["perfstats", pattern.to_str().unwrap(), "--format", "json"]);
    let json: serde_json::Value = serde_json::from_slice(&res.stdout).unwrap();
    assert_eq!(json["nranks"], 4);

    let res = runner(&["perfstats", "/nonexistent/*.json"]);
    assert_eq!(res.status.code(), Some(1));
}
