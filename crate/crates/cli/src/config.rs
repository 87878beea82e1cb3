//! JSON experiment configuration: strict schema, documented defaults, and
//! dotted-path command-line overrides.
//!
//! Parsing is deliberately two-stage: raw structs reject unknown keys (a
//! misspelled field is an error, never a silent no-op), then per-kind
//! builders check that every present field belongs to the chosen kind and
//! fill documented defaults, reporting what they defaulted as notes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;
use serde_json::Value;

use fedarm_core::aggregation::{AggregationStrategy, QuartileRule};
use fedarm_core::attacks::{AttackKind, AttackSpec, Coordination};
use fedarm_core::federation::{DatasetSpec, ExperimentConfig, Partition};
use fedarm_core::nn::LayerShape;
use fedarm_core::seeding::{seed_schedule, SeedPurpose};

/// A fully built experiment plus the informational notes produced while
/// filling defaults.
#[derive(Debug)]
pub struct LoadedConfig {
    pub experiment: ExperimentConfig,
    pub notes: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    dataset: RawDataset,
    architecture: Vec<RawLayer>,
    participants: usize,
    rounds: usize,
    local_epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    momentum: f64,
    partition: RawPartition,
    attack: RawAttack,
    strategy: RawStrategy,
    master_seed: u64,
    eval_every: Option<usize>,
    // Reserved knobs: recognized here only so the rejection can say they
    // are unsupported rather than unknown.
    client_fraction: Option<Value>,
    lr_schedule: Option<Value>,
    gradient_clip: Option<Value>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDataset {
    kind: String,
    train_images: Option<String>,
    train_labels: Option<String>,
    test_images: Option<String>,
    test_labels: Option<String>,
    classes: Option<usize>,
    per_class_train: Option<usize>,
    per_class_test: Option<usize>,
    dim: Option<usize>,
    separation: Option<f64>,
    train_count: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLayer {
    fan_in: usize,
    fan_out: usize,
    has_bias: Option<bool>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPartition {
    kind: String,
    classes_per_participant: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAttack {
    kind: Option<String>,
    coordination: Option<String>,
    malicious_ratio: Option<f64>,
    flip_map: Option<BTreeMap<String, usize>>,
    seed: Option<u64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStrategy {
    kind: String,
    factor: Option<f64>,
    quartile_rule: Option<String>,
    trim_ratio: Option<f64>,
}

struct Build {
    notes: Vec<String>,
    errors: Vec<String>,
}

impl Build {
    fn reject_foreign<T>(&mut self, field: &Option<T>, name: &str, owner: &str, kind: &str) {
        if field.is_some() {
            self.errors
                .push(format!("{owner}.{name} does not apply to kind \"{kind}\""));
        }
    }

    fn require<T: Clone>(&mut self, field: &Option<T>, name: &str, kind: &str) -> Option<T> {
        if field.is_none() {
            self.errors
                .push(format!("{name} is required for kind \"{kind}\""));
        }
        field.clone()
    }
}

fn build_dataset(raw: &RawDataset, b: &mut Build) -> Option<DatasetSpec> {
    match raw.kind.as_str() {
        "idx" => {
            for (field, name) in [
                (&raw.classes, "classes"),
                (&raw.per_class_train, "per_class_train"),
                (&raw.per_class_test, "per_class_test"),
                (&raw.dim, "dim"),
            ] {
                b.reject_foreign(field, name, "dataset", "idx");
            }
            b.reject_foreign(&raw.separation, "separation", "dataset", "idx");
            Some(DatasetSpec::Idx {
                train_images: b.require(&raw.train_images, "dataset.train_images", "idx")?,
                train_labels: b.require(&raw.train_labels, "dataset.train_labels", "idx")?,
                test_images: b.require(&raw.test_images, "dataset.test_images", "idx")?,
                test_labels: b.require(&raw.test_labels, "dataset.test_labels", "idx")?,
                train_count: raw.train_count,
            })
        }
        "synthetic" => {
            for (field, name) in [
                (&raw.train_images, "train_images"),
                (&raw.train_labels, "train_labels"),
                (&raw.test_images, "test_images"),
                (&raw.test_labels, "test_labels"),
            ] {
                b.reject_foreign(field, name, "dataset", "synthetic");
            }
            Some(DatasetSpec::Synthetic {
                classes: b.require(&raw.classes, "dataset.classes", "synthetic")?,
                per_class_train: b.require(
                    &raw.per_class_train,
                    "dataset.per_class_train",
                    "synthetic",
                )?,
                per_class_test: b.require(
                    &raw.per_class_test,
                    "dataset.per_class_test",
                    "synthetic",
                )?,
                dim: b.require(&raw.dim, "dataset.dim", "synthetic")?,
                separation: b.require(&raw.separation, "dataset.separation", "synthetic")?,
                train_count: raw.train_count,
            })
        }
        other => {
            b.errors.push(format!(
                "dataset.kind \"{other}\" is not one of: idx, synthetic"
            ));
            None
        }
    }
}

fn build_partition(raw: &RawPartition, b: &mut Build) -> Option<Partition> {
    match raw.kind.as_str() {
        "iid" => {
            b.reject_foreign(
                &raw.classes_per_participant,
                "classes_per_participant",
                "partition",
                "iid",
            );
            Some(Partition::Iid)
        }
        "non_iid" => Some(Partition::NonIid {
            classes_per_participant: b.require(
                &raw.classes_per_participant,
                "partition.classes_per_participant",
                "non_iid",
            )?,
        }),
        other => {
            b.errors.push(format!(
                "partition.kind \"{other}\" is not one of: iid, non_iid"
            ));
            None
        }
    }
}

fn build_attack(raw: &RawAttack, master_seed: u64, b: &mut Build) -> Option<AttackSpec> {
    let kind = match raw.kind.as_deref().unwrap_or("none") {
        "none" => AttackKind::None,
        "label_flip" => AttackKind::LabelFlip,
        "byzantine" => AttackKind::Byzantine,
        "partial_knowledge" => AttackKind::PartialKnowledge,
        other => {
            b.errors.push(format!(
                "attack.kind \"{other}\" is not one of: none, label_flip, byzantine, partial_knowledge"
            ));
            return None;
        }
    };
    let coordination = match (&raw.coordination, kind) {
        (Some(c), _) => match c.as_str() {
            "independent" => Coordination::Independent,
            "organized" => Coordination::Organized,
            other => {
                b.errors.push(format!(
                    "attack.coordination \"{other}\" is not one of: independent, organized"
                ));
                return None;
            }
        },
        (None, AttackKind::None) => Coordination::Independent,
        (None, _) => {
            b.errors
                .push("attack.coordination is required when an attack is configured".into());
            return None;
        }
    };
    let flip_map = match &raw.flip_map {
        None => None,
        Some(map) => {
            let mut parsed = BTreeMap::new();
            for (k, &v) in map {
                match k.parse::<usize>() {
                    Ok(from) => {
                        parsed.insert(from, v);
                    }
                    Err(_) => {
                        b.errors
                            .push(format!("attack.flip_map key \"{k}\" is not a class index"));
                        return None;
                    }
                }
            }
            Some(parsed)
        }
    };
    let seed = raw.seed.unwrap_or_else(|| {
        let derived = seed_schedule(master_seed, 0, 0, SeedPurpose::AttackRoot);
        b.notes
            .push(format!("attack.seed defaulted to {derived} (derived from master_seed)"));
        derived
    });
    Some(AttackSpec {
        kind,
        coordination,
        malicious_ratio: raw.malicious_ratio.unwrap_or(0.0),
        flip_map,
        seed,
    })
}

fn build_strategy(
    raw: &RawStrategy,
    malicious_ratio: f64,
    b: &mut Build,
) -> Option<AggregationStrategy> {
    let reject_arfed_fields = |b: &mut Build, kind: &str| {
        b.reject_foreign(&raw.factor, "factor", "strategy", kind);
        b.reject_foreign(&raw.quartile_rule, "quartile_rule", "strategy", kind);
    };
    match raw.kind.as_str() {
        "no_defense" => {
            reject_arfed_fields(b, "no_defense");
            b.reject_foreign(&raw.trim_ratio, "trim_ratio", "strategy", "no_defense");
            Some(AggregationStrategy::NoDefense)
        }
        "cw_median" => {
            reject_arfed_fields(b, "cw_median");
            b.reject_foreign(&raw.trim_ratio, "trim_ratio", "strategy", "cw_median");
            Some(AggregationStrategy::CwMedian)
        }
        "trimmed_mean" => {
            reject_arfed_fields(b, "trimmed_mean");
            let trim_ratio = raw.trim_ratio.unwrap_or_else(|| {
                b.notes.push(format!(
                    "strategy.trim_ratio defaulted to attack.malicious_ratio = {malicious_ratio}"
                ));
                malicious_ratio
            });
            Some(AggregationStrategy::TrimmedMean { trim_ratio })
        }
        "arfed" => {
            b.reject_foreign(&raw.trim_ratio, "trim_ratio", "strategy", "arfed");
            let factor = raw.factor.unwrap_or_else(|| {
                b.notes.push("strategy.factor defaulted to 1.5".into());
                1.5
            });
            let quartile_rule = match raw.quartile_rule.as_deref() {
                None => QuartileRule::LinearInterpolation,
                Some("linear_interpolation") => QuartileRule::LinearInterpolation,
                Some("nearest_rank") => QuartileRule::NearestRank,
                Some("tukey_hinges") => QuartileRule::TukeyHinges,
                Some(other) => {
                    b.errors.push(format!(
                        "strategy.quartile_rule \"{other}\" is not one of: linear_interpolation, nearest_rank, tukey_hinges"
                    ));
                    return None;
                }
            };
            Some(AggregationStrategy::Arfed {
                factor,
                quartile_rule,
            })
        }
        other => {
            b.errors.push(format!(
                "strategy.kind \"{other}\" is not one of: no_defense, cw_median, trimmed_mean, arfed"
            ));
            None
        }
    }
}

/// Applies `key.path=value` overrides onto the parsed JSON document.
/// Values parse as JSON when possible (numbers, booleans, arrays) and fall
/// back to strings, so `--set attack.malicious_ratio=0.2` and
/// `--set strategy.kind=arfed` both do what they look like.
pub fn apply_overrides(doc: &mut Value, sets: &[String]) -> Result<(), String> {
    for set in sets {
        let (path, rendered) = set
            .split_once('=')
            .ok_or_else(|| format!("override \"{set}\" is not of the form key=value"))?;
        if path.is_empty() {
            return Err(format!("override \"{set}\" has an empty key"));
        }
        let value: Value = serde_json::from_str(rendered)
            .unwrap_or_else(|_| Value::String(rendered.to_string()));
        let mut cursor = &mut *doc;
        let segments: Vec<&str> = path.split('.').collect();
        for segment in &segments[..segments.len() - 1] {
            if !cursor.is_object() {
                return Err(format!(
                    "override \"{set}\": \"{segment}\" is not an object"
                ));
            }
            cursor = cursor
                .as_object_mut()
                .unwrap()
                .entry(segment.to_string())
                .or_insert_with(|| Value::Object(Default::default()));
        }
        let leaf = segments.last().unwrap();
        match cursor.as_object_mut() {
            Some(map) => {
                map.insert(leaf.to_string(), value);
            }
            None => {
                return Err(format!("override \"{set}\": \"{leaf}\" is not an object key"));
            }
        }
    }
    Ok(())
}

/// Reads, overrides, and fully builds a configuration. All problems are
/// collected and returned together.
pub fn load_config(
    path: &Path,
    sets: &[String],
    seed_override: Option<u64>,
) -> Result<LoadedConfig, Vec<String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| vec![format!("cannot read {}: {e}", path.display())])?;
    let mut doc: Value =
        serde_json::from_str(&text).map_err(|e| vec![format!("invalid JSON: {e}")])?;
    apply_overrides(&mut doc, sets).map_err(|e| vec![e])?;
    if let Some(seed) = seed_override {
        doc.as_object_mut()
            .ok_or_else(|| vec!["config root is not a JSON object".to_string()])?
            .insert("master_seed".into(), Value::from(seed));
    }
    let raw: RawConfig =
        serde_json::from_value(doc).map_err(|e| vec![format!("schema error: {e}")])?;

    let mut b = Build {
        notes: Vec::new(),
        errors: Vec::new(),
    };
    for (field, name) in [
        (&raw.client_fraction, "client_fraction"),
        (&raw.lr_schedule, "lr_schedule"),
        (&raw.gradient_clip, "gradient_clip"),
    ] {
        if field.is_some() {
            b.errors
                .push(format!("{name} is reserved and unsupported by engine"));
        }
    }

    let dataset = build_dataset(&raw.dataset, &mut b);
    let partition = build_partition(&raw.partition, &mut b);
    let attack = build_attack(&raw.attack, raw.master_seed, &mut b);
    let strategy = attack
        .as_ref()
        .and_then(|a| build_strategy(&raw.strategy, a.malicious_ratio, &mut b));
    let architecture: Vec<LayerShape> = raw
        .architecture
        .iter()
        .map(|l| LayerShape {
            fan_in: l.fan_in,
            fan_out: l.fan_out,
            has_bias: l.has_bias.unwrap_or(true),
        })
        .collect();

    let (Some(dataset), Some(partition), Some(attack), Some(strategy)) =
        (dataset, partition, attack, strategy)
    else {
        return Err(b.errors);
    };

    let experiment = ExperimentConfig {
        dataset,
        architecture,
        participants: raw.participants,
        rounds: raw.rounds,
        local_epochs: raw.local_epochs,
        batch_size: raw.batch_size,
        learning_rate: raw.learning_rate,
        momentum: raw.momentum,
        partition,
        attack,
        strategy,
        master_seed: raw.master_seed,
        eval_every: raw.eval_every.unwrap_or(1),
    };

    b.errors.extend(experiment.validation_errors());
    if matches!(experiment.strategy, AggregationStrategy::Arfed { .. })
        && experiment.participants < 4
    {
        b.notes.push(format!(
            "warning: {} participants are too few for quartile fences; the defense degenerates to plain averaging",
            experiment.participants
        ));
    }

    if b.errors.is_empty() {
        Ok(LoadedConfig {
            experiment,
            notes: b.notes,
        })
    } else {
        Err(b.errors)
    }
}
