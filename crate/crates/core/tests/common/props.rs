//! Property suites shared by the `properties` and `acceptance` targets.
//! Every suite runs 1000 cases from a fixed seed.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use proptest::prelude::*;
use proptest::sample::subsequence;
use proptest::test_runner::TestRunner;
use proptest::test_runner::{Config, RngSeed};

use cwl_mpi::cmdline::{bind_arguments, build_command, build_environment, launcher_prefix, BASE_ENV};
use cwl_mpi::expr::{JobOrder, Value};
use cwl_mpi::model::{
    Argument, ArgumentValue, CwlType, InputBinding, InputParameter, MpiRequirementDecl, Processes, Requirement,
    ToolDescription,
};
use cwl_mpi::perfstats::{aggregate, parse_report_json, render_report, AggregateStats, RankPerfRecord, ReportFormat};
use cwl_mpi::workflow::StepGraph;
use cwl_mpi::MpiPlatformConfig;

pub const SEED: u64 = 0x5eed_0fc0_ffee;

pub fn config() -> Config {
    Config {
        cases: 1000,
        rng_seed: RngSeed::Fixed(SEED),
        failure_persistence: None,
        ..Config::default()
    }
}

fn token() -> impl Strategy<Value = String> {
    "[a-z][a-z0-9_.-]{0,6}"
}

fn env_name() -> impl Strategy<Value = String> {
    prop_oneof![
        Just("HOME".to_string()),
        Just("PATH".to_string()),
        Just("TMPDIR".to_string()),
        "SLURM_[A-Z]{1,4}",
        "OMP_[A-Z]{1,3}",
        "[A-Z]{1,5}",
    ]
}

fn platform_config() -> impl Strategy<Value = MpiPlatformConfig> {
    (
        prop_oneof![Just("mpirun".to_string()), Just("srun".to_string()), token()],
        prop_oneof![Just("-n".to_string()), Just("-np".to_string())],
        1u64..64,
        prop::collection::vec(token(), 0..8),
        prop::collection::vec(env_name(), 0..4),
        prop::collection::vec(
            prop_oneof![Just("SLURM_.*".to_string()), Just("OMP_[A-Z]+".to_string())],
            0..3,
        ),
        prop::collection::btree_map(env_name(), token(), 0..4),
    )
        .prop_map(
            |(runner, nproc_flag, default_nproc, extra_flags, env_pass, env_pass_regex, env_set)| MpiPlatformConfig {
                runner,
                nproc_flag,
                default_nproc,
                extra_flags,
                env_pass,
                env_pass_regex,
                env_set,
            },
        )
}

/// A tool with literal arguments `argN` and string inputs `iN` bound to `val_iN`.
#[derive(Debug, Clone)]
struct ToolCase {
    base: Vec<String>,
    arg_positions: Vec<i64>,
    input_positions: Vec<Option<i64>>,
}

impl ToolCase {
    fn tool(&self) -> ToolDescription {
        ToolDescription {
            cwl_version: "v1.2".into(),
            base_command: self.base.clone(),
            arguments: self
                .arg_positions
                .iter()
                .enumerate()
                .map(|(k, &position)| Argument {
                    position,
                    value: ArgumentValue::Literal(format!("arg{k}")),
                })
                .collect(),
            inputs: self
                .input_positions
                .iter()
                .enumerate()
                .map(|(k, position)| InputParameter {
                    id: format!("i{k}"),
                    ty: CwlType::String,
                    default: None,
                    binding: position.map(|position| InputBinding { position }),
                })
                .collect(),
            outputs: Vec::new(),
            requirements: Vec::new(),
            hints: Vec::new(),
            stdout: None,
        }
    }

    fn job(&self) -> JobOrder {
        (0..self.input_positions.len()).fold(JobOrder::new(), |job, k| {
            job.with(&format!("i{k}"), Value::String(format!("val_i{k}")))
        })
    }

    /// Independent statement of the ordering rule.
    fn expected(&self) -> Vec<String> {
        let mut positions: BTreeSet<i64> = self.arg_positions.iter().copied().collect();
        positions.extend(self.input_positions.iter().flatten());
        let mut argv = self.base.clone();
        for p in positions {
            for (k, _) in self.arg_positions.iter().enumerate().filter(|(_, &q)| q == p) {
                argv.push(format!("arg{k}"));
            }
            let mut ids: Vec<String> = self
                .input_positions
                .iter()
                .enumerate()
                .filter(|(_, q)| **q == Some(p))
                .map(|(k, _)| format!("i{k}"))
                .collect();
            ids.sort();
            argv.extend(ids.into_iter().map(|id| format!("val_{id}")));
        }
        argv
    }
}

fn tool_case() -> impl Strategy<Value = ToolCase> {
    (
        prop::collection::vec(token(), 1..3),
        prop::collection::vec(-2i64..4, 0..5),
        prop::collection::vec(prop::option::weighted(0.8, -2i64..4), 0..12),
    )
        .prop_map(|(base, arg_positions, input_positions)| ToolCase {
            base,
            arg_positions,
            input_positions,
        })
}

fn with_mpi(mut tool: ToolDescription, processes: Option<u64>) -> ToolDescription {
    tool.requirements.push(Requirement::Mpi(MpiRequirementDecl {
        processes: processes.map(Processes::Count),
    }));
    tool
}

pub fn command_plan_suffix() -> Result<(), String> {
    let strategy = (tool_case(), platform_config(), prop::option::of(0u64..130));
    TestRunner::new(config())
        .run(&strategy, |(case, cfg, n)| {
            let host = BTreeMap::new();
            let wd = Path::new("/w");
            let serial = build_command(&case.tool(), &case.job(), &cfg, &host, wd).unwrap();
            let mpi = build_command(&with_mpi(case.tool(), n), &case.job(), &cfg, &host, wd).unwrap();
            let effective = n.unwrap_or(cfg.default_nproc);
            if effective == 0 {
                prop_assert_eq!(&mpi.argv, &serial.argv);
                prop_assert!(!mpi.mpi_active);
            } else {
                let prefix = launcher_prefix(&cfg, effective);
                prop_assert_eq!(mpi.argv.len(), prefix.len() + serial.argv.len());
                prop_assert_eq!(&mpi.argv[..prefix.len()], &prefix[..]);
                prop_assert_eq!(&mpi.argv[prefix.len()..], &serial.argv[..]);
                prop_assert_eq!(
                    &mpi.argv[..3],
                    &[cfg.runner.clone(), cfg.nproc_flag.clone(), effective.to_string()][..]
                );
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub fn position_sort_is_deterministic_with_tie_breaks() -> Result<(), String> {
    let strategy = (tool_case(), any::<u64>());
    TestRunner::new(config())
        .run(&strategy, |(case, seed)| {
            let argv = bind_arguments(&case.tool(), &case.job()).unwrap();
            prop_assert_eq!(&argv, &case.expected());

            // Declaration order of inputs does not matter; ids break ties.
            let mut shuffled = case.tool();
            let len = shuffled.inputs.len();
            if len > 1 {
                shuffled.inputs.rotate_left((seed as usize) % len);
                shuffled.inputs.swap(0, (seed as usize / 7) % len);
            }
            prop_assert_eq!(bind_arguments(&shuffled, &case.job()).unwrap(), argv.clone());
            prop_assert_eq!(bind_arguments(&case.tool(), &case.job()).unwrap(), argv);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub fn env_set_takes_precedence() -> Result<(), String> {
    let strategy = (
        platform_config(),
        prop::collection::btree_map(env_name(), token(), 0..10),
        any::<bool>(),
    );
    TestRunner::new(config())
        .run(&strategy, |(cfg, host, mpi_active)| {
            let env = build_environment(&cfg, &host, mpi_active);
            let patterns = cfg.pass_patterns();
            for (name, value) in &env {
                let base = BASE_ENV.contains(&name.as_str());
                let passed = cfg.env_pass.contains(name) || patterns.iter().any(|re| re.is_match(name));
                let set = cfg.env_set.contains_key(name);
                if mpi_active && set {
                    prop_assert_eq!(value, &cfg.env_set[name]);
                } else {
                    prop_assert!(base || (mpi_active && passed), "{} leaked", name);
                    prop_assert_eq!(Some(value), host.get(name));
                }
            }
            if mpi_active {
                for (name, value) in &cfg.env_set {
                    prop_assert_eq!(env.get(name), Some(value));
                }
            }
            for name in BASE_ENV {
                if !(mpi_active && cfg.env_set.contains_key(*name)) {
                    prop_assert_eq!(env.get(*name), host.get(*name));
                }
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub fn aggregate_permutation_and_scaling() -> Result<(), String> {
    let strategy = (
        prop::collection::vec(0.0f64..100.0, 1..64),
        any::<u64>(),
        0.001f64..1000.0,
    );
    TestRunner::new(config())
        .run(&strategy, |(flops, order, c)| {
            let records: Vec<RankPerfRecord<f64>> = flops
                .iter()
                .enumerate()
                .map(|(r, &f)| RankPerfRecord {
                    rank: r as u32,
                    flops: f,
                    scalar_uops_rate: f * 0.9,
                    vector_uops_rate: f * 0.01,
                    runtime: 1.0,
                })
                .collect();
            let base = aggregate(&records).unwrap();

            let mut permuted = records.clone();
            let n = permuted.len();
            for i in (1..n).rev() {
                permuted.swap(i, (order.wrapping_mul(i as u64 + 31) % (i as u64 + 1)) as usize);
            }
            let p = aggregate(&permuted).unwrap();
            prop_assert_eq!(p.nranks, base.nranks);
            for (a, b) in [
                (p.total_flops, base.total_flops),
                (p.mean_flops, base.mean_flops),
                (p.sd_flops, base.sd_flops),
            ] {
                prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{} vs {}", a, b);
            }

            let scaled: Vec<_> = records
                .iter()
                .map(|r| RankPerfRecord {
                    flops: r.flops * c,
                    ..*r
                })
                .collect();
            let s = aggregate(&scaled).unwrap();
            for (a, b) in [
                (s.total_flops, base.total_flops * c),
                (s.mean_flops, base.mean_flops * c),
                (s.sd_flops, base.sd_flops * c),
            ] {
                let rel = if b == 0.0 { a.abs() } else { ((a - b) / b).abs() };
                prop_assert!(rel < 1e-12 || (a - b).abs() < 1e-12, "{} vs {} (rel {})", a, b, rel);
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub fn ready_sets_respect_reachability() -> Result<(), String> {
    let all_pairs: Vec<(usize, usize)> = (0..8usize).flat_map(|a| (a + 1..8).map(move |b| (a, b))).collect();
    let strategy = (
        1usize..=8,
        subsequence(all_pairs, 0..=28),
        Just((0..8usize).collect::<Vec<_>>()).prop_shuffle(),
    );
    TestRunner::new(config())
        .run(&strategy, |(n, pairs, labels)| {
            let name = |i: usize| format!("s{}", labels[i]);
            let nodes: Vec<String> = (0..n).map(name).collect();
            let edges: Vec<(usize, usize)> = pairs.into_iter().filter(|&(a, b)| b < n && a < n).collect();
            let graph = StepGraph::new(nodes.clone(), edges.iter().map(|&(a, b)| (name(a), name(b)))).unwrap();
            let layers = graph.ready_sets().unwrap();

            // Brute-force transitive closure.
            let mut reach = vec![vec![false; n]; n];
            for &(a, b) in &edges {
                reach[a][b] = true;
            }
            for k in 0..n {
                for i in 0..n {
                    for j in 0..n {
                        if reach[i][k] && reach[k][j] {
                            reach[i][j] = true;
                        }
                    }
                }
            }

            let mut layer_of = BTreeMap::new();
            for (l, layer) in layers.iter().enumerate() {
                for id in layer {
                    prop_assert!(layer_of.insert(id.clone(), l).is_none(), "{} scheduled twice", id);
                }
                // Within a layer, declaration order.
                let idx: Vec<usize> = layer
                    .iter()
                    .map(|id| nodes.iter().position(|x| x == id).unwrap())
                    .collect();
                prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
            }
            prop_assert_eq!(layer_of.len(), n);
            for i in 0..n {
                for j in 0..n {
                    let (li, lj) = (layer_of[&name(i)], layer_of[&name(j)]);
                    if reach[i][j] {
                        prop_assert!(li < lj);
                    }
                    if li == lj && i != j {
                        prop_assert!(!reach[i][j] && !reach[j][i]);
                    }
                }
                // Earliest possible layer: longest chain of predecessors.
                let depth = (0..n)
                    .filter(|&k| reach[k][i])
                    .map(|k| layer_of[&name(k)] + 1)
                    .max()
                    .unwrap_or(0);
                prop_assert_eq!(layer_of[&name(i)], depth);
            }

            // Closing any chain into a loop is detected.
            if let Some(&(a, b)) = edges.first() {
                let mut cyclic: Vec<_> = edges.iter().map(|&(x, y)| (name(x), name(y))).collect();
                cyclic.push((name(b), name(a)));
                prop_assert!(StepGraph::new(nodes.clone(), cyclic).unwrap().ready_sets().is_err());
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub fn config_round_trip() -> Result<(), String> {
    let strategy = (platform_config(),);
    TestRunner::new(config())
        .run(&strategy, |(cfg,)| {
            let text = cfg.to_yaml_string();
            prop_assert_eq!(MpiPlatformConfig::from_yaml_str(&text, "cfg.yml").unwrap(), cfg);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub fn stats_round_trip() -> Result<(), String> {
    let strategy = (
        1usize..10_000,
        prop::array::uniform5(prop_oneof![
            0.0f64..1e6,
            any::<f64>().prop_filter("finite", |v| v.is_finite())
        ]),
    );
    TestRunner::new(config())
        .run(&strategy, |(nranks, values)| {
            let stats = AggregateStats {
                nranks,
                total_flops: values[0],
                mean_flops: values[1],
                sd_flops: values[2],
                total_scalar: values[3],
                total_vector: values[4],
            };
            let text = render_report(&stats, ReportFormat::Json);
            prop_assert_eq!(parse_report_json::<f64>(&text).unwrap(), stats);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub type Suite = fn() -> Result<(), String>;

pub const SUITES: &[(&str, Suite)] = &[
    ("command_plan_suffix", command_plan_suffix),
    (
        "position_sort_is_deterministic_with_tie_breaks",
        position_sort_is_deterministic_with_tie_breaks,
    ),
    ("env_set_takes_precedence", env_set_takes_precedence),
    ("aggregate_permutation_and_scaling", aggregate_permutation_and_scaling),
    ("ready_sets_respect_reachability", ready_sets_respect_reachability),
    ("config_round_trip", config_round_trip),
    ("stats_round_trip", stats_round_trip),
];
