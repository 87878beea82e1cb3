//! Round orchestration: load and partition data, pick malicious
//! participants, then repeat broadcast -> parallel local training -> attack
//! injection -> aggregation -> evaluation for the configured number of
//! rounds, recording per-round metrics.
//!
//! Every source of randomness flows through the seed schedule, keyed by
//! ids rather than roles, so results are bit-identical across worker
//! counts and honest participants' trajectories never depend on the
//! attack settings.

use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{aggregate, AggregationStrategy, Update};
use crate::attacks::{
    byzantine_update, flip_labels, partial_knowledge_updates, select_malicious, AttackKind,
    AttackSpec,
};
use crate::data::{
    load_idx, partition_iid, partition_noniid, synth_blobs, Dataset, Role,
};
use crate::error::{Error, Result};
use crate::nn::{
    evaluate, init_weights, local_train, validate_chain, Hyperparams, LayerShape, ModelWeights,
};
use crate::seeding::{seed_schedule, SeedPurpose};

/// Where training and test data come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    /// Big-endian IDX image/label file pairs (the classic digit-image
    /// format), pixel values scaled to [0, 1].
    Idx {
        train_images: String,
        train_labels: String,
        test_images: String,
        test_labels: String,
        /// Optional cap: keep only the first `train_count` training rows.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_count: Option<usize>,
    },
    /// Seeded isotropic Gaussian class blobs with controllable overlap.
    Synthetic {
        classes: usize,
        per_class_train: usize,
        per_class_test: usize,
        dim: usize,
        separation: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_count: Option<usize>,
    },
}

impl DatasetSpec {
    fn train_count(&self) -> Option<usize> {
        match self {
            DatasetSpec::Idx { train_count, .. } => *train_count,
            DatasetSpec::Synthetic { train_count, .. } => *train_count,
        }
    }

    /// Loads (train, test). Synthetic draws use dedicated seed purposes so
    /// the data is independent of all other random choices.
    pub fn load(&self, master_seed: u64) -> Result<(Dataset, Dataset)> {
        let (mut train, test) = match self {
            DatasetSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                ..
            } => {
                let train = load_idx(train_images.as_ref(), train_labels.as_ref())?;
                let test = load_idx(test_images.as_ref(), test_labels.as_ref())?;
                (train, test)
            }
            DatasetSpec::Synthetic {
                classes,
                per_class_train,
                per_class_test,
                dim,
                separation,
                ..
            } => {
                let train = synth_blobs(
                    *classes,
                    *per_class_train,
                    *dim,
                    *separation,
                    seed_schedule(master_seed, 0, 0, SeedPurpose::TrainData),
                )?;
                let test = synth_blobs(
                    *classes,
                    *per_class_test,
                    *dim,
                    *separation,
                    seed_schedule(master_seed, 0, 0, SeedPurpose::TestData),
                )?;
                (train, test)
            }
        };
        if let Some(count) = self.train_count() {
            train.truncate(count)?;
        }
        Ok((train, test))
    }
}

/// How training examples are spread across participants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Partition {
    Iid,
    NonIid { classes_per_participant: usize },
}

/// Complete description of one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub architecture: Vec<LayerShape>,
    pub participants: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub partition: Partition,
    pub attack: AttackSpec,
    pub strategy: AggregationStrategy,
    pub master_seed: u64,
    pub eval_every: usize,
}

impl ExperimentConfig {
    fn hyperparams(&self) -> Hyperparams {
        Hyperparams {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            epochs: self.local_epochs,
            batch_size: self.batch_size,
        }
    }

    /// Collects every static validation problem instead of stopping at the
    /// first, so callers can report them all at once.
    pub fn validation_errors(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.participants == 0 {
            problems.push("participants must be at least 1".into());
        }
        if self.rounds == 0 {
            problems.push("rounds must be at least 1".into());
        }
        if self.eval_every == 0 {
            problems.push("eval_every must be at least 1".into());
        } else if self.eval_every > self.rounds && self.rounds > 0 {
            problems.push(format!(
                "eval_every {} exceeds rounds {}; no accuracy would ever be measured",
                self.eval_every, self.rounds
            ));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            problems.push(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            ));
        }
        if !self.momentum.is_finite() || !(0.0..1.0).contains(&self.momentum) {
            problems.push(format!("momentum must be in [0,1), got {}", self.momentum));
        }
        if self.local_epochs == 0 {
            problems.push("local_epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be at least 1".into());
        }
        if let Err(e) = validate_chain(&self.architecture) {
            problems.push(e.to_string());
        }
        if let Err(e) = self.attack.validate() {
            problems.push(e.to_string());
        }
        if let Err(e) = self.strategy.validate() {
            problems.push(e.to_string());
        }
        if let Partition::NonIid {
            classes_per_participant,
        } = self.partition
        {
            if classes_per_participant == 0 {
                problems.push("classes_per_participant must be at least 1".into());
            }
        }
        match &self.dataset {
            DatasetSpec::Synthetic {
                classes,
                per_class_train,
                per_class_test,
                dim,
                separation,
                train_count,
            } => {
                if *classes < 2 {
                    problems.push("synthetic data needs at least 2 classes".into());
                }
                if *per_class_train == 0 || *per_class_test == 0 {
                    problems.push("per-class example counts must be positive".into());
                }
                if *dim == 0 {
                    problems.push("synthetic dim must be positive".into());
                }
                if !separation.is_finite() || *separation < 0.0 {
                    problems.push(format!(
                        "separation must be finite and >= 0, got {separation}"
                    ));
                }
                if let Some(tc) = train_count {
                    if *tc == 0 {
                        problems.push("train_count must be positive".into());
                    }
                }
                if let Partition::NonIid {
                    classes_per_participant,
                } = self.partition
                {
                    if classes_per_participant > *classes {
                        problems.push(format!(
                            "classes_per_participant {classes_per_participant} exceeds class count {classes}"
                        ));
                    }
                }
                if let Some(first) = self.architecture.first() {
                    if first.fan_in != *dim {
                        problems.push(format!(
                            "first layer fan_in {} does not match data dim {dim}",
                            first.fan_in
                        ));
                    }
                }
                if let Some(last) = self.architecture.last() {
                    if last.fan_out < *classes {
                        problems.push(format!(
                            "output layer width {} is smaller than the class count {classes}",
                            last.fan_out
                        ));
                    }
                }
            }
            DatasetSpec::Idx { train_count, .. } => {
                if let Some(tc) = train_count {
                    if *tc == 0 {
                        problems.push("train_count must be positive".into());
                    }
                }
            }
        }
        problems
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.validation_errors();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Per-layer fence snapshot for one round of the IQR defense.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStat {
    pub q1: f64,
    pub q3: f64,
    pub min_d: f64,
    pub max_d: f64,
}

/// Metrics captured after each round's aggregation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Test accuracy, present only on evaluation rounds.
    pub test_accuracy: Option<f64>,
    pub reliable_count: usize,
    pub outlier_count: usize,
    /// Quartile fences per layer; present only under the IQR defense.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_stats: Option<Vec<LayerStat>>,
    /// True when the defense excluded everyone and the previous global
    /// model was carried over unchanged.
    pub flagged: bool,
    pub global_digest: u64,
}

/// Extremes of test accuracy over the last (up to) ten evaluated rounds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub min_accuracy: f64,
    pub max_accuracy: f64,
}

/// Everything a finished experiment produced.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    /// Digest of the freshly initialized global model, before any round.
    pub initial_digest: u64,
    pub records: Vec<RoundRecord>,
    pub summary: Summary,
    #[serde(skip)]
    pub wall_time: Duration,
}

/// Min/max accuracy over the last `min(10, evaluated)` evaluated records.
pub fn summarize(records: &[RoundRecord]) -> Result<Summary> {
    let evaluated: Vec<f64> = records.iter().filter_map(|r| r.test_accuracy).collect();
    if evaluated.is_empty() {
        return Err(Error::Config(
            "no evaluated rounds; nothing to summarize".into(),
        ));
    }
    let tail = &evaluated[evaluated.len().saturating_sub(10)..];
    Ok(Summary {
        min_accuracy: tail.iter().copied().fold(f64::INFINITY, f64::min),
        max_accuracy: tail.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// Runs the full federated experiment. The sink receives each round's
/// record as soon as it is complete (the CLI streams these to disk); a
/// sink error aborts the run.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    sink: &mut dyn FnMut(&RoundRecord) -> Result<()>,
) -> Result<ExperimentResult> {
    cfg.validate()?;
    let started = Instant::now();

    let (train, test) = cfg.dataset.load(cfg.master_seed)?;
    let class_count = train.class_count.max(test.class_count);
    if let Some(first) = cfg.architecture.first() {
        if first.fan_in != train.dim() {
            return Err(Error::Config(format!(
                "first layer fan_in {} does not match data dim {}",
                first.fan_in,
                train.dim()
            )));
        }
    }
    if let Some(last) = cfg.architecture.last() {
        if last.fan_out < class_count {
            return Err(Error::Config(format!(
                "output layer width {} is smaller than the class count {class_count}",
                last.fan_out
            )));
        }
    }

    let partition_seed = seed_schedule(cfg.master_seed, 0, 0, SeedPurpose::Partition);
    let mut shards = match cfg.partition {
        Partition::Iid => partition_iid(&train, cfg.participants, partition_seed)?,
        Partition::NonIid {
            classes_per_participant,
        } => partition_noniid(
            &train,
            cfg.participants,
            classes_per_participant,
            partition_seed,
        )?,
    };

    let malicious = select_malicious(cfg.participants, cfg.attack.malicious_ratio, cfg.attack.seed);
    for &id in &malicious {
        shards[id].role = Role::Malicious;
    }
    if cfg.attack.kind == AttackKind::LabelFlip {
        for &id in &malicious {
            shards[id] = flip_labels(&shards[id], &cfg.attack)?;
        }
    }

    let hp = cfg.hyperparams();
    let mut global = init_weights(
        &cfg.architecture,
        seed_schedule(cfg.master_seed, 0, 0, SeedPurpose::WeightInit),
    )?;
    let initial_digest = global.digest();

    let mut records: Vec<RoundRecord> = Vec::with_capacity(cfg.rounds);
    for round in 1..=cfg.rounds {
        let round_result: Result<RoundRecord> = (|| {
            let mut updates: Vec<Update> = shards
                .par_iter()
                .map(|shard| -> Result<Update> {
                    let id = shard.participant_id;
                    let model = if shard.role == Role::Malicious
                        && cfg.attack.kind == AttackKind::Byzantine
                    {
                        // Random-weight attackers do not train at all.
                        byzantine_update(&global, &cfg.attack, id, round as u64)?
                    } else {
                        local_train(
                            &global,
                            shard,
                            &hp,
                            seed_schedule(
                                cfg.master_seed,
                                round as u64,
                                id as u64,
                                SeedPurpose::LocalShuffle,
                            ),
                        )?
                    };
                    Ok(Update {
                        participant_id: id,
                        model,
                        size: shard.len(),
                    })
                })
                .collect::<Result<_>>()?;

            if cfg.attack.kind == AttackKind::PartialKnowledge && !malicious.is_empty() {
                // The colluders trained honestly above; now their outbound
                // models are replaced with forged ones.
                let trained: Vec<ModelWeights> = malicious
                    .iter()
                    .map(|&id| updates[id].model.clone())
                    .collect();
                let forged = partial_knowledge_updates(
                    &malicious,
                    &trained,
                    &global,
                    &cfg.attack,
                    round as u64,
                )?;
                for (&id, model) in malicious.iter().zip(forged) {
                    updates[id].model = model;
                }
            }

            let outcome = aggregate(&cfg.strategy, &global, &updates)?;
            let flagged = outcome.reliable_set.is_empty();
            global = outcome.new_global;

            let test_accuracy = if round % cfg.eval_every == 0 {
                Some(evaluate(&global, &test.features, &test.labels)?)
            } else {
                None
            };
            Ok(RoundRecord {
                round,
                test_accuracy,
                reliable_count: outcome.reliable_set.len(),
                outlier_count: outcome.outlier_set.len(),
                layer_stats: outcome.bounds.map(|b| {
                    (0..b.q1.len())
                        .map(|l| LayerStat {
                            q1: b.q1[l],
                            q3: b.q3[l],
                            min_d: b.min_d[l],
                            max_d: b.max_d[l],
                        })
                        .collect()
                }),
                flagged,
                global_digest: global.digest(),
            })
        })();
        let record = round_result.map_err(|e| e.in_round(round))?;
        sink(&record).map_err(|e| e.in_round(round))?;
        records.push(record);
    }

    let summary = summarize(&records)?;
    Ok(ExperimentResult {
        config: cfg.clone(),
        initial_digest,
        records,
        summary,
        wall_time: started.elapsed(),
    })
}
