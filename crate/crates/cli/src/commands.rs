//! The three subcommands: validate, run, and sweep. Each returns a typed
//! error so `main` can translate outcomes into process exit codes.

use std::path::{Path, PathBuf};

use fedarm_core::aggregation::{AggregationStrategy, QuartileRule};
use fedarm_core::federation::{run_experiment, ExperimentConfig, ExperimentResult};

use crate::config::{load_config, LoadedConfig};
use crate::output::{sig6, write_comparison_csv, write_results_json, RoundsCsv, RunLog};

/// Why a command failed, mapped to exit codes by `main`.
#[derive(Debug)]
pub enum CommandError {
    /// Configuration could not be loaded or failed validation (exit 2).
    Validation(Vec<String>),
    /// The experiment itself failed mid-flight (exit 3).
    Runtime(String),
    /// Some sweep points failed while others succeeded (exit 4).
    PartialSweep(String),
}

/// What a successful run left on disk.
pub struct RunManifest {
    pub out_dir: PathBuf,
    pub master_seed: u64,
    pub artifacts: Vec<PathBuf>,
}

pub fn cmd_validate(config_path: &Path) -> Result<(), CommandError> {
    let loaded = load_config(config_path, &[], None).map_err(CommandError::Validation)?;
    println!("configuration is valid");
    for note in &loaded.notes {
        println!("note: {note}");
    }
    println!(
        "{} participants, {} rounds, strategy {:?}",
        loaded.experiment.participants, loaded.experiment.rounds, loaded.experiment.strategy
    );
    Ok(())
}

fn fence_layer_count(cfg: &ExperimentConfig) -> Option<usize> {
    match cfg.strategy {
        AggregationStrategy::Arfed { .. } if cfg.participants >= 4 => {
            Some(cfg.architecture.len())
        }
        _ => None,
    }
}

/// Runs one experiment into `out_dir`, streaming rounds.csv and run.log,
/// then writing results.json only after full success.
fn execute_run(
    experiment: &ExperimentConfig,
    notes: &[String],
    out_dir: &Path,
) -> Result<(RunManifest, ExperimentResult), CommandError> {
    let io_err = |path: &Path, e: std::io::Error| {
        CommandError::Runtime(format!("cannot write {}: {e}", path.display()))
    };
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;

    let csv_path = out_dir.join("rounds.csv");
    let log_path = out_dir.join("run.log");
    let json_path = out_dir.join("results.json");

    let mut csv = RoundsCsv::create(&csv_path, fence_layer_count(experiment))
        .map_err(|e| io_err(&csv_path, e))?;
    let mut log = RunLog::create(&log_path).map_err(|e| io_err(&log_path, e))?;

    log.line(&format!(
        "starting: {} participants, {} rounds, seed {}",
        experiment.participants, experiment.rounds, experiment.master_seed
    ))
    .map_err(|e| io_err(&log_path, e))?;
    for note in notes {
        log.line(&format!("note: {note}"))
            .map_err(|e| io_err(&log_path, e))?;
    }

    let mut sink_error: Option<std::io::Error> = None;
    let outcome = run_experiment(experiment, &mut |record| {
        if let Err(e) = csv.append(record) {
            sink_error = Some(e);
            return Err(fedarm_core::Error::Data("round sink failed".into()));
        }
        let mut line = format!(
            "round {:4}: reliable {:2}, outliers {:2}",
            record.round, record.reliable_count, record.outlier_count
        );
        if let Some(acc) = record.test_accuracy {
            line.push_str(&format!(", accuracy {}", sig6(acc)));
        }
        if record.flagged {
            line.push_str(", flagged: every update rejected, previous model kept");
        }
        if let Err(e) = log.line(&line) {
            sink_error = Some(e);
            return Err(fedarm_core::Error::Data("round sink failed".into()));
        }
        Ok(())
    });

    let result = match outcome {
        Ok(result) => result,
        Err(e) => {
            let message = match sink_error {
                Some(io) => format!("artifact write failed: {io}"),
                None => e.to_string(),
            };
            let _ = log.line(&format!("failed: {message}"));
            return Err(CommandError::Runtime(message));
        }
    };

    write_results_json(&json_path, &result).map_err(|e| io_err(&json_path, e))?;
    log.line(&format!(
        "finished in {:.3}s; final-10 accuracy min {} max {}",
        result.wall_time.as_secs_f64(),
        sig6(result.summary.min_accuracy),
        sig6(result.summary.max_accuracy)
    ))
    .map_err(|e| io_err(&log_path, e))?;

    Ok((
        RunManifest {
            out_dir: out_dir.to_path_buf(),
            master_seed: experiment.master_seed,
            artifacts: vec![csv_path, log_path, json_path],
        },
        result,
    ))
}

pub fn cmd_run(
    config_path: &Path,
    out_dir: &Path,
    sets: &[String],
    seed: Option<u64>,
) -> Result<RunManifest, CommandError> {
    let LoadedConfig { experiment, notes } =
        load_config(config_path, sets, seed).map_err(CommandError::Validation)?;
    for note in &notes {
        println!("note: {note}");
    }
    let (manifest, result) = execute_run(&experiment, &notes, out_dir)?;
    println!(
        "final-10 accuracy: min {} max {}",
        sig6(result.summary.min_accuracy),
        sig6(result.summary.max_accuracy)
    );
    for artifact in &manifest.artifacts {
        println!("wrote {}", artifact.display());
    }
    Ok(manifest)
}

/// The sweep axes: which family, how wide the fences, or how many
/// attackers.
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Strategy,
    Factor,
    Ratio,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "strategy" => Some(Self::Strategy),
            "factor" => Some(Self::Factor),
            "ratio" => Some(Self::Ratio),
            _ => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Self::Strategy => "strategy",
            Self::Factor => "factor",
            Self::Ratio => "ratio",
        }
    }
}

/// Derives the sub-run configuration for one sweep point. Strategy points
/// reuse the base strategy's own parameters when the kinds match, so a
/// sweep over strategies does not clobber a configured fence factor.
fn apply_sweep_point(
    base: &ExperimentConfig,
    axis: SweepAxis,
    token: &str,
) -> Result<ExperimentConfig, String> {
    let mut cfg = base.clone();
    match axis {
        SweepAxis::Strategy => {
            cfg.strategy = match token {
                "no_defense" => AggregationStrategy::NoDefense,
                "cw_median" => AggregationStrategy::CwMedian,
                "trimmed_mean" => match base.strategy {
                    AggregationStrategy::TrimmedMean { trim_ratio } => {
                        AggregationStrategy::TrimmedMean { trim_ratio }
                    }
                    _ => AggregationStrategy::TrimmedMean {
                        trim_ratio: base.attack.malicious_ratio,
                    },
                },
                "arfed" => match base.strategy {
                    AggregationStrategy::Arfed {
                        factor,
                        quartile_rule,
                    } => AggregationStrategy::Arfed {
                        factor,
                        quartile_rule,
                    },
                    _ => AggregationStrategy::Arfed {
                        factor: 1.5,
                        quartile_rule: QuartileRule::LinearInterpolation,
                    },
                },
                other => {
                    return Err(format!(
                        "sweep value \"{other}\" is not one of: no_defense, cw_median, trimmed_mean, arfed"
                    ))
                }
            };
        }
        SweepAxis::Factor => {
            let factor: f64 = token
                .parse()
                .map_err(|_| format!("sweep value \"{token}\" is not a number"))?;
            let quartile_rule = match base.strategy {
                AggregationStrategy::Arfed { quartile_rule, .. } => quartile_rule,
                _ => QuartileRule::LinearInterpolation,
            };
            cfg.strategy = AggregationStrategy::Arfed {
                factor,
                quartile_rule,
            };
        }
        SweepAxis::Ratio => {
            let ratio: f64 = token
                .parse()
                .map_err(|_| format!("sweep value \"{token}\" is not a number"))?;
            cfg.attack.malicious_ratio = ratio;
            if let AggregationStrategy::TrimmedMean { .. } = base.strategy {
                // Keep the trim budget matched to the attack being swept.
                cfg.strategy = AggregationStrategy::TrimmedMean { trim_ratio: ratio };
            }
        }
    }
    let problems = cfg.validation_errors();
    if problems.is_empty() {
        Ok(cfg)
    } else {
        Err(problems.join("; "))
    }
}

pub fn cmd_sweep(
    config_path: &Path,
    axis_token: &str,
    values: &str,
    out_dir: &Path,
) -> Result<Vec<RunManifest>, CommandError> {
    let axis = SweepAxis::parse(axis_token).ok_or_else(|| {
        CommandError::Validation(vec![format!(
            "axis \"{axis_token}\" is not one of: strategy, factor, ratio"
        )])
    })?;
    let tokens: Vec<&str> = values
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .collect();
    if tokens.is_empty() {
        return Err(CommandError::Validation(vec![
            "sweep values list is empty".into(),
        ]));
    }
    let LoadedConfig { experiment, notes } =
        load_config(config_path, &[], None).map_err(CommandError::Validation)?;
    for note in &notes {
        println!("note: {note}");
    }

    std::fs::create_dir_all(out_dir).map_err(|e| {
        CommandError::Runtime(format!("cannot create {}: {e}", out_dir.display()))
    })?;

    let mut manifests = Vec::new();
    let mut successes: Vec<(String, ExperimentResult)> = Vec::new();
    let mut failures: Vec<(String, String)> = Vec::new();
    for token in &tokens {
        let label = token.to_string();
        let sub_dir = out_dir.join(format!("{}-{}", axis.name(), token));
        let point = match apply_sweep_point(&experiment, axis, token) {
            Ok(cfg) => cfg,
            Err(message) => {
                eprintln!("sweep point {label} failed: {message}");
                failures.push((label, message));
                continue;
            }
        };
        match execute_run(&point, &[], &sub_dir) {
            Ok((manifest, result)) => {
                println!(
                    "sweep point {label}: final-10 accuracy min {} max {}",
                    sig6(result.summary.min_accuracy),
                    sig6(result.summary.max_accuracy)
                );
                manifests.push(manifest);
                successes.push((label, result));
            }
            Err(e) => {
                let message = match e {
                    CommandError::Validation(v) => v.join("; "),
                    CommandError::Runtime(m) | CommandError::PartialSweep(m) => m,
                };
                eprintln!("sweep point {label} failed: {message}");
                failures.push((label, message));
            }
        }
    }

    if !successes.is_empty() {
        let comparison = out_dir.join("comparison.csv");
        write_comparison_csv(&comparison, &successes).map_err(|e| {
            CommandError::Runtime(format!("cannot write {}: {e}", comparison.display()))
        })?;
        println!("wrote {}", comparison.display());
    }

    if failures.is_empty() {
        Ok(manifests)
    } else {
        let detail = failures
            .iter()
            .map(|(label, message)| format!("{label}: {message}"))
            .collect::<Vec<_>>()
            .join("; ");
        Err(CommandError::PartialSweep(format!(
            "{} of {} sweep points failed ({detail})",
            failures.len(),
            tokens.len()
        )))
    }
}
