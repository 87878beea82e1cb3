//! Poisoning behaviors for malicious participants: label flipping on local
//! shards, random-weight submissions, and the colluding partial-knowledge
//! model forgery. Trusted participants are never touched; everything is
//! keyed by participant id and round so honest trajectories are identical
//! with or without an attack configured.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{ParticipantShard, Role};
use crate::error::{Error, Result};
use crate::nn::{LayerTensor, ModelWeights};
use crate::seeding::{seed_schedule, SeedPurpose};

/// What malicious participants do.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    None,
    LabelFlip,
    Byzantine,
    PartialKnowledge,
}

/// Whether attackers act alone or share one coordinated behavior.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coordination {
    Independent,
    Organized,
}

/// Ten-class default target map for organized label flipping:
/// class `c` is relabeled `DEFAULT_TEN_CLASS_FLIP[c]`.
pub const DEFAULT_TEN_CLASS_FLIP: [usize; 10] = [9, 7, 5, 8, 6, 2, 4, 1, 3, 0];

/// Full description of an attack scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub coordination: Coordination,
    pub malicious_ratio: f64,
    /// Explicit class target map; only valid for organized label flipping.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flip_map: Option<BTreeMap<usize, usize>>,
    pub seed: u64,
}

impl AttackSpec {
    /// A no-attack placeholder; the ratio is zero so nobody is malicious.
    pub fn none(seed: u64) -> Self {
        AttackSpec {
            kind: AttackKind::None,
            coordination: Coordination::Independent,
            malicious_ratio: 0.0,
            flip_map: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.malicious_ratio.is_finite()
            || !(0.0..1.0).contains(&self.malicious_ratio)
        {
            return Err(Error::Config(format!(
                "malicious_ratio must be in [0,1), got {}",
                self.malicious_ratio
            )));
        }
        if let Some(map) = &self.flip_map {
            if self.kind != AttackKind::LabelFlip {
                return Err(Error::Config(
                    "flip_map is only meaningful for label_flip attacks".into(),
                ));
            }
            if self.coordination != Coordination::Organized {
                return Err(Error::Config(
                    "flip_map requires organized coordination; independent attackers draw their own maps".into(),
                ));
            }
            validate_flip_map(map)?;
        }
        Ok(())
    }
}

/// Checks that an explicit map is a derangement of its own key set:
/// injective, image inside the key set, and no class mapped to itself.
fn validate_flip_map(map: &BTreeMap<usize, usize>) -> Result<()> {
    if map.is_empty() {
        return Err(Error::Config("flip_map is empty".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for (&from, &to) in map {
        if from == to {
            return Err(Error::Config(format!(
                "flip_map maps class {from} to itself"
            )));
        }
        if !map.contains_key(&to) {
            return Err(Error::Config(format!(
                "flip_map target {to} is not itself a mapped class"
            )));
        }
        if !seen.insert(to) {
            return Err(Error::Config(format!(
                "flip_map maps two classes to the same target {to}"
            )));
        }
    }
    Ok(())
}

/// Picks `round(m * participants)` distinct malicious ids, uniformly and
/// deterministically. The set is fixed for the whole experiment.
pub fn select_malicious(
    participants: usize,
    malicious_ratio: f64,
    seed: u64,
) -> Vec<usize> {
    let count = (malicious_ratio * participants as f64).round() as usize;
    let count = count.min(participants);
    if count == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed_schedule(
        seed,
        0,
        0,
        SeedPurpose::MaliciousSelect,
    ));
    let mut picked = rand::seq::index::sample(&mut rng, participants, count).into_vec();
    picked.sort_unstable();
    picked
}

/// Draws a uniform random derangement of `0..classes` by shuffle-and-retry.
fn seeded_derangement(classes: usize, seed: u64) -> Result<Vec<usize>> {
    if classes < 2 {
        return Err(Error::Config(format!(
            "cannot derange {classes} class(es); label flipping needs at least 2"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut map: Vec<usize> = (0..classes).collect();
    for _ in 0..10_000 {
        map.shuffle(&mut rng);
        if map.iter().enumerate().all(|(i, &t)| i != t) {
            return Ok(map);
        }
    }
    // A shuffle avoids all fixed points with probability ~1/e per try, so
    // this is unreachable in practice.
    Err(Error::Config("derangement sampling failed".into()))
}

/// Relabels a malicious shard. Organized attackers share one target map
/// (the explicit `flip_map`, the ten-class default, or a seeded global
/// derangement); independent attackers each draw their own derangement.
/// Features are untouched, and the flip happens once at setup.
pub fn flip_labels(shard: &ParticipantShard, spec: &AttackSpec) -> Result<ParticipantShard> {
    if shard.role != Role::Malicious {
        return Err(Error::Config(format!(
            "participant {} is not malicious",
            shard.participant_id
        )));
    }
    if spec.kind != AttackKind::LabelFlip {
        return Err(Error::Config("attack kind is not label_flip".into()));
    }
    spec.validate()?;

    let classes = shard.class_count;
    let target_of: BTreeMap<usize, usize> = match (spec.coordination, &spec.flip_map) {
        (Coordination::Organized, Some(map)) => {
            if let Some((&from, &to)) = map.iter().find(|(&f, &t)| f >= classes || t >= classes) {
                return Err(Error::Config(format!(
                    "flip_map entry {from}->{to} exceeds class count {classes}"
                )));
            }
            map.clone()
        }
        (Coordination::Organized, None) => {
            let map = if classes == 10 {
                DEFAULT_TEN_CLASS_FLIP.to_vec()
            } else {
                seeded_derangement(
                    classes,
                    seed_schedule(spec.seed, 0, 0, SeedPurpose::LabelFlip),
                )?
            };
            map.into_iter().enumerate().collect()
        }
        (Coordination::Independent, _) => {
            let map = seeded_derangement(
                classes,
                seed_schedule(
                    spec.seed,
                    0,
                    shard.participant_id as u64,
                    SeedPurpose::LabelFlip,
                ),
            )?;
            map.into_iter().enumerate().collect()
        }
    };

    let labels: Vec<usize> = shard
        .labels
        .iter()
        .map(|&y| {
            target_of.get(&y).copied().ok_or_else(|| {
                Error::Config(format!(
                    "flip_map does not cover class {y} present on participant {}",
                    shard.participant_id
                ))
            })
        })
        .collect::<Result<_>>()?;

    ParticipantShard::new(
        shard.participant_id,
        shard.features.clone(),
        labels,
        shard.class_count,
        shard.role,
    )
}

/// Fills a weight-shaped container with i.i.d. draws from the given RNG in
/// canonical order (per layer: row-major weights, then bias).
fn fill_standard_normal(template: &ModelWeights, rng: &mut ChaCha8Rng) -> ModelWeights {
    let layers = template
        .layers
        .iter()
        .map(|l| {
            let w: Vec<f64> = (0..l.weights.len())
                .map(|_| rng.sample(StandardNormal))
                .collect();
            let b: Vec<f64> = (0..l.bias.len()).map(|_| rng.sample(StandardNormal)).collect();
            LayerTensor {
                weights: Array2::from_shape_vec(l.weights.raw_dim(), w).expect("sized above"),
                bias: Array1::from_vec(b),
            }
        })
        .collect();
    ModelWeights { layers }
}

/// Produces the random-weight submission for one malicious participant:
/// every parameter i.i.d. standard normal. Organized attackers share one
/// draw per round; independent attackers each get their own.
pub fn byzantine_update(
    template: &ModelWeights,
    spec: &AttackSpec,
    participant_id: usize,
    round: u64,
) -> Result<ModelWeights> {
    if spec.kind != AttackKind::Byzantine {
        return Err(Error::Config("attack kind is not byzantine".into()));
    }
    let key_id = match spec.coordination {
        Coordination::Organized => 0,
        Coordination::Independent => participant_id as u64,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed_schedule(
        spec.seed,
        round,
        key_id,
        SeedPurpose::ByzantineDraw,
    ));
    Ok(fill_standard_normal(template, &mut rng))
}

/// Replaces genuinely trained malicious models with forged ones. Per
/// parameter, the attackers estimate the mean and population standard
/// deviation of their own trained values, pick a push direction by
/// comparing against the global value (toward lower values when the
/// honest update would rise, and vice versa), and sample uniformly from
/// the 3-to-4 sigma band on that side. Organized attackers compare the
/// mean against the global once and all emit one shared sample;
/// independent attackers compare their own value and sample separately.
///
/// `ids` and `local_models` are parallel; the output aligns with them.
pub fn partial_knowledge_updates(
    ids: &[usize],
    local_models: &[ModelWeights],
    global: &ModelWeights,
    spec: &AttackSpec,
    round: u64,
) -> Result<Vec<ModelWeights>> {
    if spec.kind != AttackKind::PartialKnowledge {
        return Err(Error::Config("attack kind is not partial_knowledge".into()));
    }
    if ids.is_empty() || local_models.is_empty() {
        return Err(Error::Config(
            "partial_knowledge needs at least one malicious participant".into(),
        ));
    }
    if ids.len() != local_models.len() {
        return Err(Error::Shape(format!(
            "{} ids for {} local models",
            ids.len(),
            local_models.len()
        )));
    }
    for m in local_models {
        if !m.conforms_to(global) {
            return Err(Error::Shape(
                "malicious local model does not match the global shape".into(),
            ));
        }
    }

    let sample_from_band = |mu: f64, sigma: f64, s_positive: bool, u: f64| -> f64 {
        let (lo, hi) = if s_positive {
            (mu - 4.0 * sigma, mu - 3.0 * sigma)
        } else {
            (mu + 3.0 * sigma, mu + 4.0 * sigma)
        };
        lo + u * (hi - lo)
    };

    let count = local_models.len() as f64;
    let layer_count = global.layer_count();

    match spec.coordination {
        Coordination::Organized => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed_schedule(
                spec.seed,
                round,
                0,
                SeedPurpose::PartialKnowledgeDraw,
            ));
            let mut forged = global.zeros_like();
            for l in 0..layer_count {
                let flat: Vec<f64> = {
                    let columns: Vec<Vec<f64>> = local_models
                        .iter()
                        .map(|m| m.layer_values(l).collect())
                        .collect();
                    global
                        .layer_values(l)
                        .enumerate()
                        .map(|(i, g)| {
                            let mu = columns.iter().map(|c| c[i]).sum::<f64>() / count;
                            let var = columns
                                .iter()
                                .map(|c| (c[i] - mu).powi(2))
                                .sum::<f64>()
                                / count;
                            let sigma = var.sqrt();
                            let u: f64 = rng.gen();
                            sample_from_band(mu, sigma, mu >= g, u)
                        })
                        .collect()
                };
                write_layer_from_flat(&mut forged, l, &flat);
            }
            Ok(vec![forged; ids.len()])
        }
        Coordination::Independent => {
            let mut rngs: Vec<ChaCha8Rng> = ids
                .iter()
                .map(|&id| {
                    ChaCha8Rng::seed_from_u64(seed_schedule(
                        spec.seed,
                        round,
                        id as u64,
                        SeedPurpose::PartialKnowledgeDraw,
                    ))
                })
                .collect();
            let mut forged: Vec<ModelWeights> =
                ids.iter().map(|_| global.zeros_like()).collect();
            for l in 0..layer_count {
                let columns: Vec<Vec<f64>> = local_models
                    .iter()
                    .map(|m| m.layer_values(l).collect())
                    .collect();
                let globals: Vec<f64> = global.layer_values(l).collect();
                let mut flats: Vec<Vec<f64>> =
                    vec![Vec::with_capacity(globals.len()); ids.len()];
                for (i, &g) in globals.iter().enumerate() {
                    let mu = columns.iter().map(|c| c[i]).sum::<f64>() / count;
                    let var =
                        columns.iter().map(|c| (c[i] - mu).powi(2)).sum::<f64>() / count;
                    let sigma = var.sqrt();
                    for (k, rng) in rngs.iter_mut().enumerate() {
                        let u: f64 = rng.gen();
                        flats[k].push(sample_from_band(mu, sigma, columns[k][i] >= g, u));
                    }
                }
                for (k, flat) in flats.iter().enumerate() {
                    write_layer_from_flat(&mut forged[k], l, flat);
                }
            }
            Ok(forged)
        }
    }
}

/// Writes flattened values (row-major weights then bias) back into layer `l`.
fn write_layer_from_flat(model: &mut ModelWeights, l: usize, flat: &[f64]) {
    let layer = &mut model.layers[l];
    let wlen = layer.weights.len();
    debug_assert_eq!(flat.len(), wlen + layer.bias.len());
    layer
        .weights
        .as_slice_mut()
        .expect("owned standard layout")
        .copy_from_slice(&flat[..wlen]);
    layer
        .bias
        .as_slice_mut()
        .expect("owned standard layout")
        .copy_from_slice(&flat[wlen..]);
}
