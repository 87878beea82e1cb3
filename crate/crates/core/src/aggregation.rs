//! Server-side aggregation strategies: size-weighted federated averaging,
//! coordinate-wise median, coordinate-wise trimmed mean, and the layer-wise
//! IQR outlier defense (distance table, quartile fences, all-or-nothing
//! reliable set, then weighted averaging over the survivors).

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ModelWeights;

/// How Q1/Q3 are read off a sorted sample. The defense's fences move with
/// this choice, so it is part of the experiment configuration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuartileRule {
    /// Linear interpolation at positions (n-1)/4 and 3(n-1)/4.
    #[default]
    LinearInterpolation,
    /// Smallest sample value whose cumulative share reaches the quantile.
    NearestRank,
    /// Medians of the lower and upper halves (median included in both
    /// halves when the count is odd).
    TukeyHinges,
}

/// The four server aggregation strategies.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AggregationStrategy {
    NoDefense,
    CwMedian,
    TrimmedMean { trim_ratio: f64 },
    Arfed { factor: f64, quartile_rule: QuartileRule },
}

impl AggregationStrategy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            AggregationStrategy::TrimmedMean { trim_ratio } => {
                if !trim_ratio.is_finite() || !(0.0..0.5).contains(&trim_ratio) {
                    return Err(Error::Config(format!(
                        "trim_ratio must be in [0, 0.5), got {trim_ratio}"
                    )));
                }
            }
            AggregationStrategy::Arfed { factor, .. }
                if !factor.is_finite() || factor < 0.0 =>
            {
                return Err(Error::Config(format!(
                    "factor must be finite and >= 0, got {factor}"
                )));
            }
            _ => {}
        }
        Ok(())
    }
}

/// `d[p][l]`: Euclidean distance between participant p's layer l and the
/// reference (previous global) layer l, flattened as row-major weights
/// followed by bias.
pub type DistanceTable = Vec<Vec<f64>>;

/// Per-layer quartile fences for outlier exclusion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerBounds {
    pub q1: Vec<f64>,
    pub q3: Vec<f64>,
    pub iqr: Vec<f64>,
    pub min_d: Vec<f64>,
    pub max_d: Vec<f64>,
    pub factor: f64,
}

/// One participant's submission for a round.
#[derive(Clone, Debug)]
pub struct Update {
    pub participant_id: usize,
    pub model: ModelWeights,
    pub size: usize,
}

/// Result of one aggregation step. `reliable_set` and `outlier_set`
/// partition the participating ids; only the IQR defense ever puts anyone
/// in `outlier_set`, and only it reports distances and bounds.
#[derive(Clone, Debug)]
pub struct AggregationOutcome {
    pub new_global: ModelWeights,
    pub reliable_set: BTreeSet<usize>,
    pub outlier_set: BTreeSet<usize>,
    pub bounds: Option<LayerBounds>,
    pub distances: Option<DistanceTable>,
}

fn check_uniform_shapes(models: &[&ModelWeights]) -> Result<()> {
    let first = models[0];
    for (k, m) in models.iter().enumerate().skip(1) {
        if !m.conforms_to(first) {
            return Err(Error::Shape(format!(
                "model at position {k} does not match the first model's shape"
            )));
        }
    }
    Ok(())
}

fn fedavg_of(models: &[&ModelWeights], sizes: &[usize]) -> Result<ModelWeights> {
    if models.is_empty() {
        return Err(Error::Aggregation("no models to average".into()));
    }
    if models.len() != sizes.len() {
        return Err(Error::Shape(format!(
            "{} models but {} sizes",
            models.len(),
            sizes.len()
        )));
    }
    check_uniform_shapes(models)?;
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::Aggregation("total example count is zero".into()));
    }
    let mut acc = models[0].zeros_like();
    for (m, &n) in models.iter().zip(sizes) {
        acc.scaled_add_assign(n as f64 / total as f64, m);
    }
    Ok(acc)
}

/// Element-wise mean weighted by each participant's example count.
pub fn weighted_fedavg(models: &[ModelWeights], sizes: &[usize]) -> Result<ModelWeights> {
    let refs: Vec<&ModelWeights> = models.iter().collect();
    fedavg_of(&refs, sizes)
}

/// Applies `f` to every coordinate's cross-participant value list. The
/// scratch buffer is sorted ascending before each call.
fn per_coordinate(
    models: &[&ModelWeights],
    mut f: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<ModelWeights> {
    check_uniform_shapes(models)?;
    let mut out = models[0].zeros_like();
    let mut buf = vec![0.0; models.len()];
    for l in 0..out.layer_count() {
        let columns: Vec<Vec<f64>> = models.iter().map(|m| m.layer_values(l).collect()).collect();
        let coords = columns[0].len();
        let mut flat = Vec::with_capacity(coords);
        for i in 0..coords {
            for (k, c) in columns.iter().enumerate() {
                if !c[i].is_finite() {
                    return Err(Error::Aggregation(format!(
                        "non-finite parameter from model at position {k}"
                    )));
                }
                buf[k] = c[i];
            }
            buf.sort_unstable_by(f64::total_cmp);
            flat.push(f(&buf)?);
        }
        write_layer(&mut out, l, &flat);
    }
    Ok(out)
}

fn write_layer(model: &mut ModelWeights, l: usize, flat: &[f64]) {
    let layer = &mut model.layers[l];
    let wlen = layer.weights.len();
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

fn median_of_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Per-parameter median across models; an even count takes the mean of
/// the two middle values.
pub fn coordinate_median(models: &[ModelWeights]) -> Result<ModelWeights> {
    if models.is_empty() {
        return Err(Error::Aggregation("no models for the median".into()));
    }
    let refs: Vec<&ModelWeights> = models.iter().collect();
    per_coordinate(&refs, |sorted| Ok(median_of_sorted(sorted)))
}

/// Trimmed mean over parallel value lists, accumulated in participant
/// order with the same multiply-add sequence as [`weighted_fedavg`], so a
/// zero trim over equal shard sizes reproduces plain averaging bit for
/// bit.
fn trimmed_of(models: &[&ModelWeights], trim_ratio: f64) -> Result<ModelWeights> {
    if models.is_empty() {
        return Err(Error::Aggregation("no models to trim".into()));
    }
    if !trim_ratio.is_finite() || !(0.0..0.5).contains(&trim_ratio) {
        return Err(Error::Config(format!(
            "trim_ratio must be in [0, 0.5), got {trim_ratio}"
        )));
    }
    check_uniform_shapes(models)?;
    let count = models.len();
    let drop = (trim_ratio * count as f64).floor() as usize;
    if 2 * drop >= count {
        return Err(Error::Aggregation(
            "trim ratio leaves no values to average".into(),
        ));
    }
    let inv = 1.0 / (count - 2 * drop) as f64;

    let mut out = models[0].zeros_like();
    let mut order: Vec<usize> = Vec::with_capacity(count);
    let mut kept = vec![true; count];
    let mut vals = vec![0.0; count];
    for l in 0..out.layer_count() {
        let columns: Vec<Vec<f64>> = models.iter().map(|m| m.layer_values(l).collect()).collect();
        let coords = columns[0].len();
        let mut flat = Vec::with_capacity(coords);
        for i in 0..coords {
            for (k, c) in columns.iter().enumerate() {
                if !c[i].is_finite() {
                    return Err(Error::Aggregation(format!(
                        "non-finite parameter from model at position {k}"
                    )));
                }
                vals[k] = c[i];
            }
            if drop > 0 {
                order.clear();
                order.extend(0..count);
                order.sort_unstable_by(|&a, &b| vals[a].total_cmp(&vals[b]).then(a.cmp(&b)));
                kept.fill(false);
                for &k in &order[drop..count - drop] {
                    kept[k] = true;
                }
            }
            let mut acc = 0.0;
            for k in 0..count {
                if drop == 0 || kept[k] {
                    acc += vals[k] * inv;
                }
            }
            flat.push(acc);
        }
        write_layer(&mut out, l, &flat);
    }
    Ok(out)
}

/// Per-parameter mean after dropping `floor(trim_ratio * count)` values
/// from each end of the sorted list. Deliberately un-weighted: the trim is
/// coordinate-wise and ignores shard sizes (`sizes` only has to line up).
pub fn trimmed_mean(
    models: &[ModelWeights],
    sizes: &[usize],
    trim_ratio: f64,
) -> Result<ModelWeights> {
    if models.is_empty() {
        return Err(Error::Aggregation("no models to trim".into()));
    }
    if models.len() != sizes.len() {
        return Err(Error::Shape(format!(
            "{} models but {} sizes",
            models.len(),
            sizes.len()
        )));
    }
    let refs: Vec<&ModelWeights> = models.iter().collect();
    trimmed_of(&refs, trim_ratio)
}

/// Euclidean distance between every model's every layer and the reference
/// model's matching layer, flattening each layer as row-major weights then
/// bias.
pub fn arfed_distances(
    global: &ModelWeights,
    models: &[&ModelWeights],
) -> Result<DistanceTable> {
    let mut table = Vec::with_capacity(models.len());
    for (k, m) in models.iter().enumerate() {
        if !m.conforms_to(global) {
            return Err(Error::Shape(format!(
                "model at position {k} does not match the global shape"
            )));
        }
        let mut row = Vec::with_capacity(global.layer_count());
        for l in 0..global.layer_count() {
            let sq: f64 = global
                .layer_values(l)
                .zip(m.layer_values(l))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let d = sq.sqrt();
            if !d.is_finite() {
                return Err(Error::Aggregation(format!(
                    "non-finite distance for model at position {k}, layer {l}"
                )));
            }
            row.push(d);
        }
        table.push(row);
    }
    Ok(table)
}

fn quartiles(sorted: &[f64], rule: QuartileRule) -> (f64, f64) {
    let n = sorted.len();
    match rule {
        QuartileRule::LinearInterpolation => {
            let at = |q: f64| -> f64 {
                let h = (n - 1) as f64 * q;
                let lo = h.floor() as usize;
                let hi = (lo + 1).min(n - 1);
                sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
            };
            (at(0.25), at(0.75))
        }
        QuartileRule::NearestRank => {
            let at = |q: f64| -> f64 {
                let rank = (q * n as f64).ceil() as usize;
                sorted[rank.saturating_sub(1).min(n - 1)]
            };
            (at(0.25), at(0.75))
        }
        QuartileRule::TukeyHinges => {
            let half = n / 2;
            let (lower, upper) = if n % 2 == 1 {
                (&sorted[..=half], &sorted[half..])
            } else {
                (&sorted[..half], &sorted[half..])
            };
            (median_of_sorted(lower), median_of_sorted(upper))
        }
    }
}

/// Per-layer quartile fences `[Q1 - f*IQR, Q3 + f*IQR]` over the distance
/// table's columns.
pub fn arfed_bounds(
    distances: &DistanceTable,
    factor: f64,
    rule: QuartileRule,
) -> Result<LayerBounds> {
    if distances.len() < 2 {
        return Err(Error::Aggregation(format!(
            "quartile fences need at least 2 participants, got {}",
            distances.len()
        )));
    }
    let layer_count = distances[0].len();
    let mut bounds = LayerBounds {
        q1: Vec::with_capacity(layer_count),
        q3: Vec::with_capacity(layer_count),
        iqr: Vec::with_capacity(layer_count),
        min_d: Vec::with_capacity(layer_count),
        max_d: Vec::with_capacity(layer_count),
        factor,
    };
    let mut column = vec![0.0; distances.len()];
    for l in 0..layer_count {
        for (k, row) in distances.iter().enumerate() {
            column[k] = row[l];
        }
        column.sort_unstable_by(f64::total_cmp);
        let (q1, q3) = quartiles(&column, rule);
        let iqr = q3 - q1;
        bounds.q1.push(q1);
        bounds.q3.push(q3);
        bounds.iqr.push(iqr);
        bounds.min_d.push(q1 - factor * iqr);
        bounds.max_d.push(q3 + factor * iqr);
    }
    Ok(bounds)
}

/// Splits table rows into reliable and outlier index sets. A row is an
/// outlier as soon as any one layer's distance falls strictly outside that
/// layer's fences; zero spread therefore excludes nobody.
pub fn arfed_reliable_set(
    distances: &DistanceTable,
    bounds: &LayerBounds,
) -> (BTreeSet<usize>, BTreeSet<usize>) {
    let mut reliable = BTreeSet::new();
    let mut outliers = BTreeSet::new();
    for (p, row) in distances.iter().enumerate() {
        let out = row
            .iter()
            .enumerate()
            .any(|(l, &d)| d < bounds.min_d[l] || d > bounds.max_d[l]);
        if out {
            outliers.insert(p);
        } else {
            reliable.insert(p);
        }
    }
    (reliable, outliers)
}

/// Runs one server aggregation step. Updates are re-ordered by participant
/// id first, so the result is independent of list order. The IQR defense
/// needs at least 4 submissions for meaningful quartiles and degenerates
/// to plain weighted averaging below that; when it excludes everyone, the
/// previous global is returned unchanged with an empty reliable set.
pub fn aggregate(
    strategy: &AggregationStrategy,
    global: &ModelWeights,
    updates: &[Update],
) -> Result<AggregationOutcome> {
    strategy.validate()?;
    if updates.is_empty() {
        return Err(Error::Aggregation("no participant updates".into()));
    }
    let mut order: Vec<usize> = (0..updates.len()).collect();
    order.sort_by_key(|&i| updates[i].participant_id);
    for pair in order.windows(2) {
        if updates[pair[0]].participant_id == updates[pair[1]].participant_id {
            return Err(Error::Config(format!(
                "duplicate participant id {}",
                updates[pair[0]].participant_id
            )));
        }
    }
    let models: Vec<&ModelWeights> = order.iter().map(|&i| &updates[i].model).collect();
    let sizes: Vec<usize> = order.iter().map(|&i| updates[i].size).collect();
    let ids: Vec<usize> = order.iter().map(|&i| updates[i].participant_id).collect();
    let all_ids: BTreeSet<usize> = ids.iter().copied().collect();

    let plain = |new_global: ModelWeights| AggregationOutcome {
        new_global,
        reliable_set: all_ids.clone(),
        outlier_set: BTreeSet::new(),
        bounds: None,
        distances: None,
    };

    match *strategy {
        AggregationStrategy::NoDefense => Ok(plain(fedavg_of(&models, &sizes)?)),
        AggregationStrategy::CwMedian => {
            Ok(plain(per_coordinate(&models, |s| Ok(median_of_sorted(s)))?))
        }
        AggregationStrategy::TrimmedMean { trim_ratio } => {
            Ok(plain(trimmed_of(&models, trim_ratio)?))
        }
        AggregationStrategy::Arfed {
            factor,
            quartile_rule,
        } => {
            if models.len() < 4 {
                // Quartiles of fewer than 4 points are meaningless; fall
                // back to plain weighted averaging.
                return Ok(plain(fedavg_of(&models, &sizes)?));
            }
            let distances = arfed_distances(global, &models)?;
            let bounds = arfed_bounds(&distances, factor, quartile_rule)?;
            let (rel_rows, out_rows) = arfed_reliable_set(&distances, &bounds);
            let reliable_set: BTreeSet<usize> = rel_rows.iter().map(|&r| ids[r]).collect();
            let outlier_set: BTreeSet<usize> = out_rows.iter().map(|&r| ids[r]).collect();
            let new_global = if rel_rows.is_empty() {
                global.clone()
            } else {
                let kept_models: Vec<&ModelWeights> =
                    rel_rows.iter().map(|&r| models[r]).collect();
                let kept_sizes: Vec<usize> = rel_rows.iter().map(|&r| sizes[r]).collect();
                fedavg_of(&kept_models, &kept_sizes)?
            };
            Ok(AggregationOutcome {
                new_global,
                reliable_set,
                outlier_set,
                bounds: Some(bounds),
                distances: Some(distances),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_weights, LayerShape, LayerTensor};
    use ndarray::{Array1, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_model(v: f64) -> ModelWeights {
        ModelWeights {
            layers: vec![LayerTensor {
                weights: Array2::from_shape_vec((1, 1), vec![v]).unwrap(),
                bias: Array1::zeros(0),
            }],
        }
    }

    fn random_models(
        shapes: &[LayerShape],
        count: usize,
        seed: u64,
    ) -> Vec<ModelWeights> {
        (0..count)
            .map(|k| init_weights(shapes, seed.wrapping_mul(1000).wrapping_add(k as u64)).unwrap())
            .collect()
    }

    #[test]
    fn fedavg_equal_sizes_is_plain_mean() {
        let models = vec![scalar_model(1.0), scalar_model(2.0), scalar_model(6.0)];
        let avg = weighted_fedavg(&models, &[5, 5, 5]).unwrap();
        assert!((avg.layers[0].weights[[0, 0]] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn fedavg_weights_by_example_count() {
        let models = vec![scalar_model(0.0), scalar_model(4.0)];
        let avg = weighted_fedavg(&models, &[1, 3]).unwrap();
        assert_eq!(avg.layers[0].weights[[0, 0]], 3.0);
    }

    #[test]
    fn fedavg_single_model_is_identity() {
        let m = init_weights(&[LayerShape::new(3, 2)], 4).unwrap();
        let avg = weighted_fedavg(std::slice::from_ref(&m), &[7]).unwrap();
        assert_eq!(avg.digest(), m.digest());
    }

    #[test]
    fn fedavg_rejects_empty_and_mismatched_input() {
        assert!(matches!(
            weighted_fedavg(&[], &[]),
            Err(Error::Aggregation(_))
        ));
        let models = vec![scalar_model(1.0)];
        assert!(matches!(
            weighted_fedavg(&models, &[1, 2]),
            Err(Error::Shape(_))
        ));
        let mixed = vec![
            scalar_model(1.0),
            ModelWeights::zeros(&[LayerShape::new(2, 2)]).unwrap(),
        ];
        assert!(matches!(
            weighted_fedavg(&mixed, &[1, 1]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn fedavg_stays_in_the_convex_hull() {
        let shapes = [LayerShape::new(4, 3), LayerShape::new(3, 2)];
        let models = random_models(&shapes, 6, 3);
        let sizes = [3, 1, 4, 2, 8, 5];
        let avg = weighted_fedavg(&models, &sizes).unwrap();
        for l in 0..avg.layer_count() {
            let flats: Vec<Vec<f64>> =
                models.iter().map(|m| m.layer_values(l).collect()).collect();
            for (i, v) in avg.layer_values(l).enumerate() {
                let lo = flats.iter().map(|f| f[i]).fold(f64::INFINITY, f64::min);
                let hi = flats.iter().map(|f| f[i]).fold(f64::NEG_INFINITY, f64::max);
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12, "layer {l} coord {i}");
            }
        }
    }

    #[test]
    fn median_odd_and_even_counts() {
        let odd = vec![scalar_model(1.0), scalar_model(2.0), scalar_model(100.0)];
        assert_eq!(
            coordinate_median(&odd).unwrap().layers[0].weights[[0, 0]],
            2.0
        );
        let even = vec![scalar_model(1.0), scalar_model(3.0)];
        assert_eq!(
            coordinate_median(&even).unwrap().layers[0].weights[[0, 0]],
            2.0
        );
    }

    /// Independent sort-based oracle: median and trimmed mean recomputed
    /// per coordinate from scratch.
    fn oracle_per_coordinate(
        models: &[ModelWeights],
        reduce: impl Fn(&[f64]) -> f64,
    ) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for l in 0..models[0].layer_count() {
            let flats: Vec<Vec<f64>> =
                models.iter().map(|m| m.layer_values(l).collect()).collect();
            let mut layer = Vec::new();
            for i in 0..flats[0].len() {
                let mut vals: Vec<f64> = flats.iter().map(|f| f[i]).collect();
                vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
                layer.push(reduce(&vals));
            }
            out.push(layer);
        }
        out
    }

    #[test]
    fn median_matches_sort_oracle_on_random_sets() {
        let shapes = [
            LayerShape::new(3, 4),
            LayerShape::new(4, 4),
            LayerShape::new(4, 2),
        ];
        for trial in 0..200 {
            let count = 3 + (trial % 6);
            let models = random_models(&shapes, count, 7000 + trial as u64);
            let got = coordinate_median(&models).unwrap();
            let want = oracle_per_coordinate(&models, |v| {
                let n = v.len();
                if n % 2 == 1 {
                    v[n / 2]
                } else {
                    0.5 * (v[n / 2 - 1] + v[n / 2])
                }
            });
            for (l, w) in want.iter().enumerate() {
                for (a, b) in got.layer_values(l).zip(w.iter()) {
                    assert!((a - b).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn trimmed_mean_drops_tails() {
        let models: Vec<ModelWeights> =
            [0.0, 1.0, 2.0, 3.0, 100.0].iter().map(|&v| scalar_model(v)).collect();
        let out = trimmed_mean(&models, &[1; 5], 0.2).unwrap();
        assert!((out.layers[0].weights[[0, 0]] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn trimmed_mean_beta_zero_is_plain_mean() {
        let models = vec![scalar_model(1.0), scalar_model(5.0), scalar_model(6.0)];
        let out = trimmed_mean(&models, &[9, 1, 2], 0.0).unwrap();
        assert!((out.layers[0].weights[[0, 0]] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn trimmed_mean_matches_sort_oracle_on_random_sets() {
        let shapes = [LayerShape::new(2, 3), LayerShape::new(3, 2)];
        for trial in 0..200 {
            let count = 4 + (trial % 5);
            let models = random_models(&shapes, count, 9000 + trial as u64);
            let beta = [0.0, 0.1, 0.2, 0.3][trial % 4];
            let sizes = vec![1; count];
            let got = trimmed_mean(&models, &sizes, beta).unwrap();
            let drop = (beta * count as f64).floor() as usize;
            let want = oracle_per_coordinate(&models, |v| {
                let kept = &v[drop..v.len() - drop];
                kept.iter().sum::<f64>() / kept.len() as f64
            });
            for (l, w) in want.iter().enumerate() {
                for (a, b) in got.layer_values(l).zip(w.iter()) {
                    assert!((a - b).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn trimmed_mean_contains_result_in_trusted_range_under_planted_noise() {
        // 8 trusted values clustered near zero plus 2 wild submissions;
        // beta matching the planted ratio must keep every coordinate
        // within the trusted values' range.
        let shapes = [LayerShape::new(3, 3)];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let trusted = random_models(&shapes, 8, rng.gen());
            let mut all = trusted.clone();
            for _ in 0..2 {
                let mut wild = trusted[0].zeros_like();
                for l in &mut wild.layers {
                    l.weights.mapv_inplace(|_| rng.gen_range(-100.0..100.0));
                    l.bias.mapv_inplace(|_| rng.gen_range(-100.0..100.0));
                }
                all.push(wild);
            }
            let sizes = vec![1; all.len()];
            let out = trimmed_mean(&all, &sizes, 0.2).unwrap();
            let flats: Vec<Vec<f64>> =
                trusted.iter().map(|m| m.layer_values(0).collect()).collect();
            for (i, v) in out.layer_values(0).enumerate() {
                let lo = flats.iter().map(|f| f[i]).fold(f64::INFINITY, f64::min);
                let hi = flats.iter().map(|f| f[i]).fold(f64::NEG_INFINITY, f64::max);
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12, "coord {i}: {v}");
            }
        }
    }

    #[test]
    fn trimmed_mean_rejects_bad_beta() {
        let models = vec![scalar_model(1.0), scalar_model(2.0)];
        for beta in [0.5, 0.9, -0.1, f64::NAN] {
            assert!(matches!(
                trimmed_mean(&models, &[1, 1], beta),
                Err(Error::Config(_))
            ));
        }
    }

    #[test]
    fn distances_zero_for_identical_models() {
        let m = init_weights(&[LayerShape::new(3, 2), LayerShape::new(2, 2)], 8).unwrap();
        let d = arfed_distances(&m, &[&m, &m]).unwrap();
        assert_eq!(d, vec![vec![0.0, 0.0], vec![0.0, 0.0]]);
    }

    #[test]
    fn distances_scalar_and_pythagorean_cases() {
        let global = scalar_model(0.0);
        let d = arfed_distances(&global, &[&scalar_model(3.0)]).unwrap();
        assert_eq!(d[0][0], 3.0);

        // Weight differences 3 and 4 with zero bias difference: distance 5.
        let zero = ModelWeights {
            layers: vec![LayerTensor {
                weights: Array2::zeros((1, 2)),
                bias: Array1::zeros(1),
            }],
        };
        let offset = ModelWeights {
            layers: vec![LayerTensor {
                weights: Array2::from_shape_vec((1, 2), vec![3.0, 4.0]).unwrap(),
                bias: Array1::zeros(1),
            }],
        };
        let d = arfed_distances(&zero, &[&offset]).unwrap();
        assert_eq!(d[0][0], 5.0);
    }

    #[test]
    fn distances_reject_shape_mismatch_and_nan() {
        let global = scalar_model(0.0);
        let wide = ModelWeights::zeros(&[LayerShape::new(2, 1)]).unwrap();
        assert!(matches!(
            arfed_distances(&global, &[&wide]),
            Err(Error::Shape(_))
        ));
        let bad = scalar_model(f64::NAN);
        assert!(matches!(
            arfed_distances(&global, &[&bad]),
            Err(Error::Aggregation(_))
        ));
    }

    #[test]
    fn bounds_hand_example_with_far_outlier() {
        let table: DistanceTable = [1.0, 2.0, 3.0, 4.0, 100.0]
            .iter()
            .map(|&d| vec![d])
            .collect();
        let b = arfed_bounds(&table, 1.5, QuartileRule::LinearInterpolation).unwrap();
        assert_eq!(b.q1, vec![2.0]);
        assert_eq!(b.q3, vec![4.0]);
        assert_eq!(b.iqr, vec![2.0]);
        assert_eq!(b.min_d, vec![-1.0]);
        assert_eq!(b.max_d, vec![7.0]);
        let (rel, out) = arfed_reliable_set(&table, &b);
        assert_eq!(rel, BTreeSet::from([0, 1, 2, 3]));
        assert_eq!(out, BTreeSet::from([4]));
    }

    #[test]
    fn bounds_zero_spread_excludes_nobody() {
        let table: DistanceTable = vec![vec![2.5]; 6];
        let b = arfed_bounds(&table, 1.5, QuartileRule::LinearInterpolation).unwrap();
        assert_eq!(b.min_d, vec![2.5]);
        assert_eq!(b.max_d, vec![2.5]);
        let (rel, out) = arfed_reliable_set(&table, &b);
        assert_eq!(rel.len(), 6);
        assert!(out.is_empty());
    }

    #[test]
    fn bounds_factor_zero_collapse_to_quartiles() {
        let table: DistanceTable = [1.0, 2.0, 3.0, 4.0, 100.0]
            .iter()
            .map(|&d| vec![d])
            .collect();
        let b = arfed_bounds(&table, 0.0, QuartileRule::LinearInterpolation).unwrap();
        assert_eq!(b.min_d, b.q1);
        assert_eq!(b.max_d, b.q3);
    }

    #[test]
    fn bounds_require_two_rows() {
        let table: DistanceTable = vec![vec![1.0]];
        assert!(matches!(
            arfed_bounds(&table, 1.5, QuartileRule::LinearInterpolation),
            Err(Error::Aggregation(_))
        ));
    }

    #[test]
    fn quartile_rules_differ_where_expected() {
        let sorted = [1.0, 2.0, 3.0, 4.0, 5.0, 100.0];
        let (q1, q3) = quartiles(&sorted, QuartileRule::LinearInterpolation);
        assert!((q1 - 2.25).abs() < 1e-12 && (q3 - 4.75).abs() < 1e-12);
        let (q1, q3) = quartiles(&sorted, QuartileRule::NearestRank);
        assert_eq!((q1, q3), (2.0, 5.0));
        let (q1, q3) = quartiles(&sorted, QuartileRule::TukeyHinges);
        assert_eq!((q1, q3), (2.0, 5.0));

        let eight: Vec<f64> = (1..=8).map(|v| v as f64).collect();
        let (q1_nr, _) = quartiles(&eight, QuartileRule::NearestRank);
        let (q1_th, _) = quartiles(&eight, QuartileRule::TukeyHinges);
        assert_eq!(q1_nr, 2.0);
        assert_eq!(q1_th, 2.5);
    }

    #[test]
    fn one_bad_layer_out_of_three_excludes_the_participant() {
        // Participant 5's middle layer is far off; the other layers are
        // inconspicuous, but exclusion is all-or-nothing.
        let mut table: DistanceTable =
            (0..6).map(|p| vec![1.0 + 0.1 * p as f64; 3]).collect();
        table[5][1] = 50.0;
        let b = arfed_bounds(&table, 1.5, QuartileRule::LinearInterpolation).unwrap();
        let (rel, out) = arfed_reliable_set(&table, &b);
        assert!(out.contains(&5));
        assert_eq!(rel.len(), 5);
    }

    /// Brute-force oracle: recompute quartiles, fences, and membership from
    /// scratch with naive loops.
    fn oracle_reliable(
        table: &DistanceTable,
        factor: f64,
    ) -> (BTreeSet<usize>, BTreeSet<usize>) {
        let layers = table[0].len();
        let mut fences = Vec::new();
        for l in 0..layers {
            let mut col: Vec<f64> = table.iter().map(|r| r[l]).collect();
            col.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = col.len();
            let pos = |q: f64| -> f64 {
                let h = (n - 1) as f64 * q;
                let lo = h.floor() as usize;
                let hi = (lo + 1).min(n - 1);
                col[lo] + (h - lo as f64) * (col[hi] - col[lo])
            };
            let (q1, q3) = (pos(0.25), pos(0.75));
            fences.push((q1 - factor * (q3 - q1), q3 + factor * (q3 - q1)));
        }
        let mut rel = BTreeSet::new();
        let mut out = BTreeSet::new();
        for (p, row) in table.iter().enumerate() {
            let mut ok = true;
            for (l, &d) in row.iter().enumerate() {
                if d < fences[l].0 || d > fences[l].1 {
                    ok = false;
                }
            }
            if ok {
                rel.insert(p);
            } else {
                out.insert(p);
            }
        }
        (rel, out)
    }

    #[test]
    fn reliable_set_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for trial in 0..1000 {
            let participants = 4 + rng.gen_range(0..30);
            let layers = 1 + rng.gen_range(0..4);
            let table: DistanceTable = (0..participants)
                .map(|_| {
                    (0..layers)
                        .map(|_| {
                            // Mix a tight cluster with occasional wild values.
                            if rng.gen_bool(0.15) {
                                rng.gen_range(0.0..50.0)
                            } else {
                                rng.gen_range(1.0..2.0)
                            }
                        })
                        .collect()
                })
                .collect();
            let factor = [0.0, 1.0, 1.5, 2.0][trial % 4];
            let b =
                arfed_bounds(&table, factor, QuartileRule::LinearInterpolation).unwrap();
            let got = arfed_reliable_set(&table, &b);
            let want = oracle_reliable(&table, factor);
            assert_eq!(got, want, "trial {trial}");
        }
    }

    fn updates_from(models: Vec<ModelWeights>, sizes: &[usize]) -> Vec<Update> {
        models
            .into_iter()
            .zip(sizes)
            .enumerate()
            .map(|(id, (model, &size))| Update {
                participant_id: id,
                model,
                size,
            })
            .collect()
    }

    #[test]
    fn aggregate_no_defense_equals_fedavg() {
        let shapes = [LayerShape::new(3, 2)];
        let models = random_models(&shapes, 5, 11);
        let sizes = [2, 4, 1, 3, 2];
        let direct = weighted_fedavg(&models, &sizes).unwrap();
        let out = aggregate(
            &AggregationStrategy::NoDefense,
            &ModelWeights::zeros(&shapes).unwrap(),
            &updates_from(models, &sizes),
        )
        .unwrap();
        assert_eq!(out.new_global.digest(), direct.digest());
        assert_eq!(out.reliable_set.len(), 5);
        assert!(out.outlier_set.is_empty());
        assert!(out.bounds.is_none() && out.distances.is_none());
    }

    #[test]
    fn aggregate_trimmed_zero_beta_is_bit_identical_to_no_defense_on_equal_shards() {
        let shapes = [LayerShape::new(2, 2), LayerShape::new(2, 3)];
        let models = random_models(&shapes, 6, 13);
        let sizes = [10; 6];
        let global = ModelWeights::zeros(&shapes).unwrap();
        let plain = aggregate(
            &AggregationStrategy::NoDefense,
            &global,
            &updates_from(models.clone(), &sizes),
        )
        .unwrap();
        let trimmed = aggregate(
            &AggregationStrategy::TrimmedMean { trim_ratio: 0.0 },
            &global,
            &updates_from(models, &sizes),
        )
        .unwrap();
        // Equal shard sizes make the fedavg weights equal the trim's
        // uniform 1/count, and both paths accumulate value-times-scalar in
        // participant order, so this holds exactly.
        assert_eq!(plain.new_global.digest(), trimmed.new_global.digest());
    }

    #[test]
    fn aggregate_iqr_defense_excludes_planted_outlier() {
        let shapes = [LayerShape::new(3, 2)];
        let global = init_weights(&shapes, 50).unwrap();
        let mut models: Vec<ModelWeights> = (0..5)
            .map(|k| {
                let mut m = global.clone();
                m.layers[0].weights[[0, 0]] += 0.01 * (k as f64 + 1.0);
                m
            })
            .collect();
        let mut far = global.clone();
        far.layers[0].weights.mapv_inplace(|v| v + 100.0);
        models.push(far);
        let sizes = [3, 3, 3, 3, 3, 3];
        let expected =
            weighted_fedavg(&models[..5], &sizes[..5]).unwrap();
        let out = aggregate(
            &AggregationStrategy::Arfed {
                factor: 1.5,
                quartile_rule: QuartileRule::LinearInterpolation,
            },
            &global,
            &updates_from(models, &sizes),
        )
        .unwrap();
        assert_eq!(out.outlier_set, BTreeSet::from([5]));
        assert_eq!(out.reliable_set, BTreeSet::from([0, 1, 2, 3, 4]));
        assert_eq!(out.new_global.digest(), expected.digest());
        assert!(out.bounds.is_some() && out.distances.is_some());
    }

    #[test]
    fn aggregate_is_permutation_equivariant() {
        let shapes = [LayerShape::new(4, 3)];
        let models = random_models(&shapes, 7, 21);
        let sizes = [1, 2, 3, 4, 5, 6, 7];
        let global = init_weights(&shapes, 1).unwrap();
        let strategy = AggregationStrategy::Arfed {
            factor: 1.5,
            quartile_rule: QuartileRule::LinearInterpolation,
        };
        let mut updates = updates_from(models, &sizes);
        let straight = aggregate(&strategy, &global, &updates).unwrap();
        updates.reverse();
        updates.swap(0, 3);
        let shuffled = aggregate(&strategy, &global, &updates).unwrap();
        assert_eq!(
            straight.new_global.digest(),
            shuffled.new_global.digest()
        );
        assert_eq!(straight.reliable_set, shuffled.reliable_set);
        assert_eq!(straight.outlier_set, shuffled.outlier_set);
    }

    #[test]
    fn aggregate_rejects_duplicate_ids() {
        let models = vec![scalar_model(1.0), scalar_model(2.0)];
        let mut updates = updates_from(models, &[1, 1]);
        updates[1].participant_id = 0;
        let err = aggregate(
            &AggregationStrategy::NoDefense,
            &scalar_model(0.0),
            &updates,
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn aggregate_iqr_defense_below_four_degenerates_to_fedavg() {
        let models = vec![scalar_model(1.0), scalar_model(2.0), scalar_model(9.0)];
        let sizes = [1, 1, 1];
        let expected = weighted_fedavg(&models, &sizes).unwrap();
        let out = aggregate(
            &AggregationStrategy::Arfed {
                factor: 1.5,
                quartile_rule: QuartileRule::LinearInterpolation,
            },
            &scalar_model(0.0),
            &updates_from(models, &sizes),
        )
        .unwrap();
        assert_eq!(out.new_global.digest(), expected.digest());
        assert!(out.outlier_set.is_empty());
        assert!(out.bounds.is_none());
    }

    #[test]
    fn aggregate_empty_reliable_set_reuses_previous_global() {
        // Four participants, four layers; each is extreme in its own layer,
        // so all-or-nothing exclusion removes everyone.
        let layer = |hot: usize| ModelWeights {
            layers: (0..4)
                .map(|l| LayerTensor {
                    weights: Array2::from_shape_vec(
                        (1, 1),
                        vec![if l == hot { 100.0 } else { 0.0 }],
                    )
                    .unwrap(),
                    bias: Array1::zeros(0),
                })
                .collect(),
        };
        let global = ModelWeights {
            layers: (0..4)
                .map(|_| LayerTensor {
                    weights: Array2::zeros((1, 1)),
                    bias: Array1::zeros(0),
                })
                .collect(),
        };
        let models: Vec<ModelWeights> = (0..4).map(layer).collect();
        let out = aggregate(
            &AggregationStrategy::Arfed {
                factor: 1.5,
                quartile_rule: QuartileRule::LinearInterpolation,
            },
            &global,
            &updates_from(models, &[1, 1, 1, 1]),
        )
        .unwrap();
        assert!(out.reliable_set.is_empty());
        assert_eq!(out.outlier_set.len(), 4);
        assert_eq!(out.new_global.digest(), global.digest());
    }

    #[test]
    fn identification_cost_scales_linearly_in_participants() {
        // Distance + fences + membership should grow about linearly with
        // the participant count at fixed layer and parameter counts.
        let shapes = [
            LayerShape::new(500, 1),
            LayerShape::new(1, 500),
            LayerShape::new(500, 1),
            LayerShape::new(1, 500),
        ];
        let run = |participants: usize| -> std::time::Duration {
            let global = init_weights(&shapes, 1).unwrap();
            let models: Vec<ModelWeights> = (0..participants)
                .map(|k| init_weights(&shapes, 2 + k as u64).unwrap())
                .collect();
            let refs: Vec<&ModelWeights> = models.iter().collect();
            let mut samples = Vec::new();
            for _ in 0..20 {
                let t0 = std::time::Instant::now();
                let d = arfed_distances(&global, &refs).unwrap();
                let b =
                    arfed_bounds(&d, 1.5, QuartileRule::LinearInterpolation).unwrap();
                let sets = arfed_reliable_set(&d, &b);
                std::hint::black_box(sets);
                samples.push(t0.elapsed());
            }
            samples.sort();
            samples[samples.len() / 2]
        };
        let small = run(256);
        let large = run(512);
        let ratio = large.as_secs_f64() / small.as_secs_f64();
        assert!(
            ratio <= 2.5,
            "doubling participants multiplied cost by {ratio:.2}"
        );
    }
}
