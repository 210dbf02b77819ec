//! Aggregation of per-rank performance-counter files into run-level statistics.
//!
//! Each MPI rank writes one JSON file (`likwid_<rank>.json` or any name ending
//! in `<rank>.<ext>`). Two layouts are accepted:
//!
//! * the minimal layout, with rates in GFLOP/s and 10⁹ µops/s:
//!   `{"flops": 0.71, "scalar_uops_rate": 0.69, "vector_uops_rate": 0.005, "runtime": 12.0}`
//! * a LIKWID `FLOPS_DP` report, searched for the metrics `DP [MFLOP/s]`,
//!   `Scalar [MUOPS/s]`, `Packed [MUOPS/s]` and `Runtime (RDTSC) [s]`, which are
//!   converted from mega to giga units.
//!
//! The standard deviation is the population standard deviation over ranks:
//! the ranks of a run are the whole population, not a sample of it.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use num_traits::Float;
use serde::{Deserialize, Serialize};
use serde_json::Value as Json;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankPerfRecord<T> {
    pub rank: u32,
    /// Double-precision rate, GFLOP/s.
    pub flops: T,
    /// 10⁹ scalar µops per second.
    pub scalar_uops_rate: T,
    /// 10⁹ packed (vector) µops per second.
    pub vector_uops_rate: T,
    /// Seconds.
    pub runtime: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateStats<T> {
    pub nranks: usize,
    pub total_flops: T,
    pub mean_flops: T,
    pub sd_flops: T,
    pub total_scalar: T,
    pub total_vector: T,
}

#[derive(Debug, Error)]
pub enum PerfError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed performance file: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error("{path}: missing metric {metric:?}")]
    MissingMetric { path: PathBuf, metric: &'static str },
    #[error("{path}: metric {metric:?} must be a finite non-negative number")]
    InvalidMetric { path: PathBuf, metric: &'static str },
    #[error("{0}: cannot parse a rank number from the file name")]
    UnparsableRank(PathBuf),
    #[error("no performance records to aggregate")]
    Empty,
    #[error("rank {0} appears more than once")]
    DuplicateRank(u32),
    #[error("invalid glob {pattern:?}: {message}")]
    Glob { pattern: String, message: String },
    #[error("invalid report: {0}")]
    Report(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum ReportFormat {
    #[default]
    Text,
    Json,
}

/// Trailing integer of the file stem: `likwid_12.json` is rank 12.
pub fn rank_from_filename(path: &Path) -> Result<u32, PerfError> {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let digits: String = stem
        .chars()
        .rev()
        .take_while(char::is_ascii_digit)
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect();
    digits
        .parse()
        .map_err(|_| PerfError::UnparsableRank(path.to_path_buf()))
}

const MINIMAL_KEYS: [&str; 4] = ["flops", "scalar_uops_rate", "vector_uops_rate", "runtime"];
const LIKWID_KEYS: [&str; 4] = ["DP [MFLOP/s]", "Scalar [MUOPS/s]", "Packed [MUOPS/s]", "Runtime (RDTSC) [s]"];
/// Unit conversion from the LIKWID metric to the record field.
const LIKWID_SCALE: [f64; 4] = [1e-3, 1e-3, 1e-3, 1.0];

fn number(node: &Json) -> Option<f64> {
    match node {
        Json::Number(n) => n.as_f64(),
        Json::String(s) => s.trim().parse().ok(),
        Json::Array(items) => items.iter().find_map(number),
        Json::Object(map) => map
            .get("Values")
            .or_else(|| map.get("Value"))
            .or_else(|| map.get("value"))
            .and_then(number),
        _ => None,
    }
}

fn find_metric<'a>(node: &'a Json, key: &str) -> Option<&'a Json> {
    match node {
        Json::Object(map) => map
            .get(key)
            .or_else(|| map.values().find_map(|v| find_metric(v, key))),
        Json::Array(items) => items.iter().find_map(|v| find_metric(v, key)),
        _ => None,
    }
}

/// Reads one rank's file into a record.
pub fn parse_rank_file<T: Float>(path: &Path) -> Result<RankPerfRecord<T>, PerfError> {
    let rank = rank_from_filename(path)?;
    let text = std::fs::read_to_string(path).map_err(|source| PerfError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_rank_json(&text, rank, path)
}

pub fn parse_rank_json<T: Float>(text: &str, rank: u32, path: &Path) -> Result<RankPerfRecord<T>, PerfError> {
    let doc: Json = serde_json::from_str(text).map_err(|e| PerfError::Malformed {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if !doc.is_object() {
        return Err(PerfError::Malformed {
            path: path.to_path_buf(),
            message: "expected a JSON object".into(),
        });
    }
    let minimal = doc.get("flops").is_some();
    let mut values = [0.0f64; 4];
    for i in 0..4 {
        let raw = if minimal {
            doc.get(MINIMAL_KEYS[i]).map(|v| (number(v), 1.0))
        } else {
            find_metric(&doc, LIKWID_KEYS[i]).map(|v| (number(v), LIKWID_SCALE[i]))
        };
        let metric = MINIMAL_KEYS[i];
        values[i] = match raw {
            Some((Some(v), scale)) if v.is_finite() && v >= 0.0 => v * scale,
            Some(_) => {
                return Err(PerfError::InvalidMetric {
                    path: path.to_path_buf(),
                    metric,
                })
            }
            // runtime is informational; rates are required
            None if metric == "runtime" => 0.0,
            None => {
                return Err(PerfError::MissingMetric {
                    path: path.to_path_buf(),
                    metric,
                })
            }
        };
    }
    let cast = |v: f64| T::from(v).expect("finite f64 converts to any Float");
    Ok(RankPerfRecord {
        rank,
        flops: cast(values[0]),
        scalar_uops_rate: cast(values[1]),
        vector_uops_rate: cast(values[2]),
        runtime: cast(values[3]),
    })
}

/// Reads every file matching `pattern`, ordered by rank.
pub fn load_rank_files<T: Float>(pattern: &str) -> Result<Vec<RankPerfRecord<T>>, PerfError> {
    let paths = glob::glob(pattern).map_err(|e| PerfError::Glob {
        pattern: pattern.to_string(),
        message: e.msg.to_string(),
    })?;
    let mut records = paths
        .filter_map(Result::ok)
        .filter(|p| p.is_file())
        .map(|p| parse_rank_file(&p))
        .collect::<Result<Vec<_>, _>>()?;
    records.sort_by_key(|r| r.rank);
    Ok(records)
}

/// Totals are sums over ranks; mean is total / n; sd is the population sd of per-rank flops.
pub fn aggregate<T: Float>(records: &[RankPerfRecord<T>]) -> Result<AggregateStats<T>, PerfError> {
    if records.is_empty() {
        return Err(PerfError::Empty);
    }
    let mut ranks: Vec<u32> = records.iter().map(|r| r.rank).collect();
    ranks.sort_unstable();
    if let Some(w) = ranks.windows(2).find(|w| w[0] == w[1]) {
        return Err(PerfError::DuplicateRank(w[0]));
    }

    let n = T::from(records.len()).expect("rank count fits any Float");
    let sum = |f: fn(&RankPerfRecord<T>) -> T| records.iter().map(f).fold(T::zero(), |a, b| a + b);
    let total_flops = sum(|r| r.flops);
    let mean_flops = total_flops / n;
    let variance = records
        .iter()
        .map(|r| (r.flops - mean_flops).powi(2))
        .fold(T::zero(), |a, b| a + b)
        / n;
    Ok(AggregateStats {
        nranks: records.len(),
        total_flops,
        mean_flops,
        sd_flops: variance.sqrt(),
        total_scalar: sum(|r| r.scalar_uops_rate),
        total_vector: sum(|r| r.vector_uops_rate),
    })
}

/// Text follows the column layout of a LIKWID summary table; JSON carries every field.
pub fn render_report<T: Float + Serialize>(stats: &AggregateStats<T>, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            let mut out = serde_json::to_string_pretty(stats).expect("stats always serialize");
            out.push('\n');
            out
        }
        ReportFormat::Text => {
            let f = |v: T| v.to_f64().unwrap_or(f64::NAN);
            let mut out = String::new();
            let _ = writeln!(out, "{:>6} {:>12} {:>10} {:>10} {:>13} {:>13}", "", "Performance", "", "", "Micro-op rate", "");
            let _ = writeln!(out, "{:>6} {:>12} {:>10} {:>10} {:>13} {:>13}", "", "/ GFLOP/s", "", "", "/ 10^9 s^-1", "");
            let _ = writeln!(
                out,
                "{:>6} {:>12} {:>10} {:>10} {:>13} {:>13}",
                "Cores", "Total", "Rank mean", "Rank s.d.", "Total scalar", "Total vector"
            );
            let _ = writeln!(
                out,
                "{:>6} {:>12.1} {:>10.2} {:>10.3} {:>13.1} {:>13.2}",
                stats.nranks,
                f(stats.total_flops),
                f(stats.mean_flops),
                f(stats.sd_flops),
                f(stats.total_scalar),
                f(stats.total_vector)
            );
            out
        }
    }
}

pub fn parse_report_json<T: Float + for<'de> Deserialize<'de>>(text: &str) -> Result<AggregateStats<T>, PerfError> {
    serde_json::from_str(text).map_err(|e| PerfError::Report(e.to_string()))
}
