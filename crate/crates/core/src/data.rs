//! Datasets, IDX ingestion, synthetic blobs, and participant partitioning.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A labeled example set. `features` is one row per example; labels are
/// class indices in `0..class_count`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::Data("dataset is empty".into()));
        }
        if features.nrows() != labels.len() {
            return Err(Error::Data(format!(
                "feature rows {} != label count {}",
                features.nrows(),
                labels.len()
            )));
        }
        if class_count == 0 {
            return Err(Error::Data("class_count must be positive".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Data(format!(
                "label {bad} out of range for class_count {class_count}"
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite feature value".into()));
        }
        Ok(Dataset {
            features,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Keeps only the first `count` examples (file order). The class count
    /// is preserved so a subset stays compatible with the full test set.
    pub fn truncate(&mut self, count: usize) -> Result<()> {
        if count == 0 || count > self.len() {
            return Err(Error::Data(format!(
                "train_count {count} outside 1..={}",
                self.len()
            )));
        }
        self.features = self.features.slice(ndarray::s![..count, ..]).to_owned();
        self.labels.truncate(count);
        Ok(())
    }
}

/// Whether a participant behaves honestly or follows the attack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Trusted,
    Malicious,
}

/// One participant's local training examples.
#[derive(Clone, Debug)]
pub struct ParticipantShard {
    pub participant_id: usize,
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    /// Distinct labels present in this shard.
    pub class_set: BTreeSet<usize>,
    /// Label universe of the parent dataset, needed by label-flip maps.
    pub class_count: usize,
    pub role: Role,
}

impl ParticipantShard {
    pub fn new(
        participant_id: usize,
        features: Array2<f64>,
        labels: Vec<usize>,
        class_count: usize,
        role: Role,
    ) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::Data(format!(
                "participant {participant_id} received an empty shard"
            )));
        }
        if features.nrows() != labels.len() {
            return Err(Error::Data(format!(
                "participant {participant_id}: {} rows vs {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        let class_set: BTreeSet<usize> = labels.iter().copied().collect();
        if let Some(&bad) = class_set.iter().find(|&&l| l >= class_count) {
            return Err(Error::Data(format!(
                "participant {participant_id}: label {bad} out of range for class_count {class_count}"
            )));
        }
        Ok(ParticipantShard {
            participant_id,
            features,
            labels,
            class_set,
            class_count,
            role,
        })
    }

    /// Example count n_p.
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Format {
            path: path.display().to_string(),
            offset: bytes.len() as u64,
            message: format!("truncated: need {end} header bytes, file has {}", bytes.len()),
        });
    }
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().unwrap()))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Loads an IDX image/label file pair (the canonical MNIST binary format:
/// big-endian headers of magic plus one u32 per dimension, then raw bytes).
/// Pixels are scaled to `[0,1]` by dividing by 255.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = read_file(images_path)?;
    let magic = be_u32(&img, 0, images_path)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Format {
            path: images_path.display().to_string(),
            offset: 0,
            message: format!("bad image magic 0x{magic:08x}, expected 0x{IMAGE_MAGIC:08x}"),
        });
    }
    let img_count = be_u32(&img, 4, images_path)? as usize;
    let rows = be_u32(&img, 8, images_path)? as usize;
    let cols = be_u32(&img, 12, images_path)? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::Format {
            path: images_path.display().to_string(),
            offset: 8,
            message: format!("zero image dimensions {rows}x{cols}"),
        });
    }
    let expected = 16 + img_count * rows * cols;
    if img.len() != expected {
        return Err(Error::Format {
            path: images_path.display().to_string(),
            offset: img.len().min(expected) as u64,
            message: format!("file is {} bytes, header implies {expected}", img.len()),
        });
    }

    let lab = read_file(labels_path)?;
    let magic = be_u32(&lab, 0, labels_path)?;
    if magic != LABEL_MAGIC {
        return Err(Error::Format {
            path: labels_path.display().to_string(),
            offset: 0,
            message: format!("bad label magic 0x{magic:08x}, expected 0x{LABEL_MAGIC:08x}"),
        });
    }
    let lab_count = be_u32(&lab, 4, labels_path)? as usize;
    let expected = 8 + lab_count;
    if lab.len() != expected {
        return Err(Error::Format {
            path: labels_path.display().to_string(),
            offset: lab.len().min(expected) as u64,
            message: format!("file is {} bytes, header implies {expected}", lab.len()),
        });
    }

    if img_count != lab_count {
        return Err(Error::Data(format!(
            "image count {img_count} != label count {lab_count}"
        )));
    }
    if img_count == 0 {
        return Err(Error::Data("dataset is empty".into()));
    }

    let dim = rows * cols;
    let pixels: Vec<f64> = img[16..].iter().map(|&b| f64::from(b) / 255.0).collect();
    let features = Array2::from_shape_vec((img_count, dim), pixels)
        .expect("pixel buffer length checked against header");
    let labels: Vec<usize> = lab[8..].iter().map(|&b| b as usize).collect();
    let class_count = labels.iter().max().copied().unwrap_or(0) + 1;
    Dataset::new(features, labels, class_count)
}

/// Generates Gaussian clusters with unit covariance, one per class,
/// deterministic given `seed`.
///
/// Class means sit on orthogonal axes scaled so that every pair of means is
/// exactly `separation` apart (for `class_count <= dim`; beyond that, seeded
/// random unit directions approximate the spacing). With unit covariance the
/// two-class Bayes error is therefore `Phi(-separation/2)`.
pub fn synth_blobs(
    class_count: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if class_count == 0 || per_class == 0 || dim == 0 {
        return Err(Error::Config(
            "synth_blobs: class_count, per_class, and dim must be positive".into(),
        ));
    }
    if !separation.is_finite() || separation < 0.0 {
        return Err(Error::Config(format!(
            "synth_blobs: separation must be finite and >= 0, got {separation}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = separation / f64::sqrt(2.0);
    let n = class_count * per_class;
    let mut values = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for class in 0..class_count {
        let mean = class_mean(class, dim, scale, &mut rng);
        for _ in 0..per_class {
            for coord in &mean {
                let z: f64 = StandardNormal.sample(&mut rng);
                values.push(coord + z);
            }
            labels.push(class);
        }
    }
    let features = Array2::from_shape_vec((n, dim), values).expect("sized above");
    Dataset::new(features, labels, class_count)
}

fn class_mean(class: usize, dim: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut mean = vec![0.0; dim];
    if class < dim {
        mean[class] = scale;
    } else {
        // More classes than axes: fall back to a random unit direction.
        let mut norm = 0.0;
        for m in mean.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *m = z;
            norm += z * z;
        }
        let norm = norm.sqrt().max(f64::MIN_POSITIVE);
        for m in mean.iter_mut() {
            *m *= scale / norm;
        }
    }
    mean
}

fn select_rows(features: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((idx.len(), features.ncols()));
    for (row, &i) in idx.iter().enumerate() {
        out.row_mut(row).assign(&features.row(i));
    }
    out
}

fn shard_from_indices(ds: &Dataset, participant_id: usize, idx: &[usize]) -> Result<ParticipantShard> {
    let labels: Vec<usize> = idx.iter().map(|&i| ds.labels[i]).collect();
    ParticipantShard::new(
        participant_id,
        select_rows(&ds.features, idx),
        labels,
        ds.class_count,
        Role::Trusted,
    )
}

/// Splits the dataset into `participants` disjoint shards covering a
/// shuffled permutation of the examples; shard sizes differ by at most one.
pub fn partition_iid(ds: &Dataset, participants: usize, seed: u64) -> Result<Vec<ParticipantShard>> {
    if participants == 0 {
        return Err(Error::Config("participants must be positive".into()));
    }
    if participants > ds.len() {
        return Err(Error::Config(format!(
            "{participants} participants exceed {} examples",
            ds.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng);

    let base = ds.len() / participants;
    let extra = ds.len() % participants;
    let mut shards = Vec::with_capacity(participants);
    let mut cursor = 0;
    for p in 0..participants {
        let take = base + usize::from(p < extra);
        let idx = &order[cursor..cursor + take];
        cursor += take;
        shards.push(shard_from_indices(ds, p, idx)?);
    }
    Ok(shards)
}

const NONIID_RETRY_CAP: usize = 100;

/// Non-IID partitioning: each participant draws `classes_per_participant`
/// distinct classes uniformly, then each class's example pool is split
/// evenly among the participants holding it (remainders to the lowest ids).
///
/// Assignments where some class ends up with no holder, or where a holder
/// would receive zero examples of one of its classes, are re-sampled up to
/// a retry cap before reporting a configuration error.
pub fn partition_noniid(
    ds: &Dataset,
    participants: usize,
    classes_per_participant: usize,
    seed: u64,
) -> Result<Vec<ParticipantShard>> {
    let k = classes_per_participant;
    if participants == 0 {
        return Err(Error::Config("participants must be positive".into()));
    }
    if k == 0 || k > ds.class_count {
        return Err(Error::Config(format!(
            "classes_per_participant {k} outside 1..={}",
            ds.class_count
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); ds.class_count];
    for (i, &label) in ds.labels.iter().enumerate() {
        pools[label].push(i);
    }
    for pool in pools.iter_mut() {
        pool.shuffle(&mut rng);
    }

    for _attempt in 0..NONIID_RETRY_CAP {
        let assignments: Vec<BTreeSet<usize>> = (0..participants)
            .map(|_| {
                rand::seq::index::sample(&mut rng, ds.class_count, k)
                    .into_iter()
                    .collect()
            })
            .collect();

        let mut holders: Vec<Vec<usize>> = vec![Vec::new(); ds.class_count];
        for (p, classes) in assignments.iter().enumerate() {
            for &c in classes {
                holders[c].push(p);
            }
        }
        // Every class must be held by someone with enough examples to give
        // each holder at least one; otherwise the assignment starves.
        let feasible = holders
            .iter()
            .enumerate()
            .all(|(c, h)| !h.is_empty() && pools[c].len() >= h.len());
        if !feasible {
            continue;
        }

        let mut per_participant: Vec<Vec<usize>> = vec![Vec::new(); participants];
        for (c, h) in holders.iter().enumerate() {
            let base = pools[c].len() / h.len();
            let extra = pools[c].len() % h.len();
            let mut cursor = 0;
            for (slot, &p) in h.iter().enumerate() {
                let take = base + usize::from(slot < extra);
                per_participant[p].extend_from_slice(&pools[c][cursor..cursor + take]);
                cursor += take;
            }
        }
        let mut shards = Vec::with_capacity(participants);
        for (p, idx) in per_participant.iter().enumerate() {
            shards.push(shard_from_indices(ds, p, idx)?);
        }
        return Ok(shards);
    }
    Err(Error::Config(format!(
        "could not realize a non-iid({k}) assignment over {} classes for {participants} \
         participants after {NONIID_RETRY_CAP} attempts",
        ds.class_count
    )))
}
