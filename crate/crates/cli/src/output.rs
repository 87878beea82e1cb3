//! Artifact writers: per-round CSV, run log, final JSON, and the sweep
//! comparison table. CSV and log lines are flushed as they are produced so
//! a crashed run still leaves everything up to the failure point on disk.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use fedarm_core::federation::{ExperimentResult, RoundRecord};

/// Renders a float with six significant digits, then lets the shortest
/// round-trip representation drop trailing zeros: 0.9123456 -> "0.912346",
/// 0.5 -> "0.5".
pub fn sig6(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    let rendered = format!("{x:.5e}");
    let reparsed: f64 = rendered.parse().expect("scientific float re-parses");
    reparsed.to_string()
}

fn opt_sig6(x: Option<f64>) -> String {
    x.map(sig6).unwrap_or_default()
}

/// Incremental writer for `rounds.csv`. When the strategy publishes
/// per-layer fence statistics the header grows four columns per layer.
pub struct RoundsCsv {
    writer: BufWriter<File>,
    path: PathBuf,
    fence_layers: Option<usize>,
}

impl RoundsCsv {
    pub fn create(path: &Path, fence_layers: Option<usize>) -> std::io::Result<Self> {
        let mut writer = BufWriter::new(File::create(path)?);
        let mut header = String::from("round,accuracy,reliable_count,outlier_count,flagged");
        if let Some(layers) = fence_layers {
            for l in 0..layers {
                header.push_str(&format!(",l{l}_q1,l{l}_q3,l{l}_min_d,l{l}_max_d"));
            }
        }
        writeln!(writer, "{header}")?;
        writer.flush()?;
        Ok(Self {
            writer,
            path: path.to_path_buf(),
            fence_layers,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, record: &RoundRecord) -> std::io::Result<()> {
        let mut line = format!(
            "{},{},{},{},{}",
            record.round,
            opt_sig6(record.test_accuracy),
            record.reliable_count,
            record.outlier_count,
            record.flagged,
        );
        if let Some(layers) = self.fence_layers {
            match &record.layer_stats {
                Some(stats) => {
                    for stat in stats {
                        line.push_str(&format!(
                            ",{},{},{},{}",
                            sig6(stat.q1),
                            sig6(stat.q3),
                            sig6(stat.min_d),
                            sig6(stat.max_d)
                        ));
                    }
                }
                None => {
                    for _ in 0..layers {
                        line.push_str(",,,,");
                    }
                }
            }
        }
        writeln!(self.writer, "{line}")?;
        self.writer.flush()
    }
}

/// Timestamped run log, flushed per line.
pub struct RunLog {
    writer: BufWriter<File>,
    path: PathBuf,
    started: std::time::Instant,
}

impl RunLog {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        Ok(Self {
            writer: BufWriter::new(File::create(path)?),
            path: path.to_path_buf(),
            started: std::time::Instant::now(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn line(&mut self, message: &str) -> std::io::Result<()> {
        let elapsed = self.started.elapsed().as_secs_f64();
        writeln!(self.writer, "[{elapsed:10.3}s] {message}")?;
        self.writer.flush()
    }
}

/// Writes the final result JSON. Only called after a fully successful run.
pub fn write_results_json(path: &Path, result: &ExperimentResult) -> std::io::Result<()> {
    let mut text = serde_json::to_string_pretty(result).expect("result serializes");
    text.push('\n');
    std::fs::write(path, text)
}

/// Builds `comparison.csv` for a sweep: one `round` column plus one
/// accuracy column per successful sub-run, aligned by round number.
pub fn write_comparison_csv(
    path: &Path,
    runs: &[(String, ExperimentResult)],
) -> std::io::Result<()> {
    let mut writer = BufWriter::new(File::create(path)?);
    let mut header = String::from("round");
    for (label, _) in runs {
        header.push(',');
        header.push_str(label);
    }
    writeln!(writer, "{header}")?;
    let max_round = runs
        .iter()
        .flat_map(|(_, r)| r.records.iter().map(|rec| rec.round))
        .max()
        .unwrap_or(0);
    for round in 1..=max_round {
        let mut line = round.to_string();
        for (_, result) in runs {
            line.push(',');
            let accuracy = result
                .records
                .iter()
                .find(|rec| rec.round == round)
                .and_then(|rec| rec.test_accuracy);
            line.push_str(&opt_sig6(accuracy));
        }
        writeln!(writer, "{line}")?;
    }
    writer.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use fedarm_core::federation::LayerStat;

    #[test]
    fn sig6_rounds_to_six_significant_digits() {
        assert_eq!(sig6(0.91234567), "0.912346");
        assert_eq!(sig6(0.5), "0.5");
        assert_eq!(sig6(123456.789), "123457");
        assert_eq!(sig6(0.000123456789), "0.000123457");
        assert_eq!(sig6(0.0), "0");
        assert_eq!(sig6(-1.23456789), "-1.23457");
    }

    fn record(round: usize, accuracy: Option<f64>) -> RoundRecord {
        RoundRecord {
            round,
            test_accuracy: accuracy,
            reliable_count: 4,
            outlier_count: 1,
            layer_stats: None,
            flagged: false,
            global_digest: 7,
        }
    }

    #[test]
    fn rounds_csv_plain_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rounds.csv");
        let mut csv = RoundsCsv::create(&path, None).unwrap();
        csv.append(&record(1, Some(0.25))).unwrap();
        csv.append(&record(2, None)).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "round,accuracy,reliable_count,outlier_count,flagged");
        assert_eq!(lines[1], "1,0.25,4,1,false");
        assert_eq!(lines[2], "2,,4,1,false");
    }

    #[test]
    fn rounds_csv_adds_four_columns_per_fence_layer() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rounds.csv");
        let mut csv = RoundsCsv::create(&path, Some(2)).unwrap();
        let mut rec = record(1, Some(0.5));
        rec.layer_stats = Some(vec![
            LayerStat {
                q1: 1.0,
                q3: 2.0,
                min_d: -0.5,
                max_d: 3.5,
            },
            LayerStat {
                q1: 0.125,
                q3: 0.25,
                min_d: -0.0625,
                max_d: 0.4375,
            },
        ]);
        csv.append(&rec).unwrap();
        // A degenerate round without fences keeps the column count.
        csv.append(&record(2, None)).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0].matches(',').count(), 4 + 8);
        assert_eq!(
            lines[1],
            "1,0.5,4,1,false,1,2,-0.5,3.5,0.125,0.25,-0.0625,0.4375"
        );
        assert_eq!(lines[2].matches(',').count(), 4 + 8);
    }

    fn dummy_result(accs: Vec<Option<f64>>) -> ExperimentResult {
        use fedarm_core::aggregation::AggregationStrategy;
        use fedarm_core::attacks::AttackSpec;
        use fedarm_core::federation::{summarize, DatasetSpec, ExperimentConfig, Partition};
        use fedarm_core::nn::LayerShape;
        let records: Vec<RoundRecord> = accs
            .into_iter()
            .enumerate()
            .map(|(i, a)| record(i + 1, a))
            .collect();
        let summary = summarize(&records).unwrap();
        ExperimentResult {
            config: ExperimentConfig {
                dataset: DatasetSpec::Synthetic {
                    classes: 2,
                    per_class_train: 4,
                    per_class_test: 2,
                    dim: 2,
                    separation: 4.0,
                    train_count: None,
                },
                architecture: vec![LayerShape::new(2, 2)],
                participants: 2,
                rounds: records.len().max(1),
                local_epochs: 1,
                batch_size: 4,
                learning_rate: 0.01,
                momentum: 0.0,
                partition: Partition::Iid,
                attack: AttackSpec::none(1),
                strategy: AggregationStrategy::NoDefense,
                master_seed: 1,
                eval_every: 1,
            },
            initial_digest: 0,
            records,
            summary,
            wall_time: std::time::Duration::default(),
        }
    }

    #[test]
    fn comparison_csv_aligns_runs_by_round() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("comparison.csv");
        let runs = vec![
            ("0".to_string(), dummy_result(vec![Some(0.5), Some(0.625)])),
            ("1.5".to_string(), dummy_result(vec![Some(0.25), None])),
        ];
        write_comparison_csv(&path, &runs).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "round,0,1.5");
        assert_eq!(lines[1], "1,0.5,0.25");
        assert_eq!(lines[2], "2,0.625,");
    }
}
