//! Pseudo-positive mining and the label-disturbance baselines.
//!
//! Every labeled training sample queries the unlabeled pool for its nearest
//! neighbor in feature space. A random subset of those hits, with each pool
//! item claimed at most once, is appended to the training set under the
//! query's identity.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{euclidean, EmbeddingRecord, FeatureVector, LabeledDataset, UnlabeledPool};
use crate::error::{Error, Result};
use crate::seed;

/// Nearest pool item of one training sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinedPair {
    #[serde(rename = "query")]
    pub query_index: usize,
    #[serde(rename = "pool")]
    pub pool_index: usize,
    #[serde(rename = "dist")]
    pub distance: f64,
    #[serde(rename = "label")]
    pub transferred_label: usize,
}

/// Selected pseudo-positives; `k` is the requested count.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PseudoPositiveSet {
    pub pairs: Vec<MinedPair>,
    pub k: usize,
}

impl PseudoPositiveSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn nearest(query: &[f64], pool: &[&[f64]]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, p) in pool.iter().enumerate() {
        let d = euclidean(query, p);
        // Strict comparison keeps the lowest index on ties.
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Exact nearest pool neighbor of every query, ties to the lowest pool index.
///
/// With `l2_normalize` both sides are scaled to unit norm before the search;
/// the reported distance is then measured between the normalized vectors.
pub fn mine_nearest(queries: &LabeledDataset, pool: &UnlabeledPool, l2_normalize: bool) -> Result<Vec<MinedPair>> {
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    if let (Some(qd), Some(pd)) = (queries.dim(), pool.dim()) {
        if qd != pd {
            return Err(Error::DimensionMismatch {
                expected: qd,
                found: pd,
            });
        }
    }
    let normalized: Vec<FeatureVector>;
    let pool_vecs: Vec<&[f64]> = if l2_normalize {
        normalized = pool.vectors().map(|v| v.l2_normalized()).collect();
        normalized.iter().map(|v| v.as_slice()).collect()
    } else {
        pool.vectors().map(|v| v.as_slice()).collect()
    };
    Ok(queries
        .records()
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let (pool_index, distance) = if l2_normalize {
                nearest(r.vector.l2_normalized().as_slice(), &pool_vecs)
            } else {
                nearest(r.vector.as_slice(), &pool_vecs)
            };
            MinedPair {
                query_index: i,
                pool_index,
                distance,
                transferred_label: r.identity,
            }
        })
        .collect())
}

/// Keeps, for each pool item, only the closest claimant (lowest query index
/// on equal distance). The result is ordered by pool index.
pub fn deduplicate(pairs: &[MinedPair]) -> Vec<MinedPair> {
    let mut best: BTreeMap<usize, MinedPair> = BTreeMap::new();
    for p in pairs {
        best.entry(p.pool_index)
            .and_modify(|cur| {
                if p.distance < cur.distance || (p.distance == cur.distance && p.query_index < cur.query_index) {
                    *cur = *p;
                }
            })
            .or_insert(*p);
    }
    best.into_values().collect()
}

/// Uniformly samples `min(k, available)` deduplicated pairs.
///
/// The output keeps the pool-index order of [`deduplicate`], so saturation
/// returns every eligible pair in a fixed order.
pub fn select_pseudo_positives(pairs: &[MinedPair], k: usize, seed: u64) -> PseudoPositiveSet {
    let eligible = deduplicate(pairs);
    if k >= eligible.len() {
        return PseudoPositiveSet { pairs: eligible, k };
    }
    let mut rng = seed::rng(seed);
    let mut chosen = index::sample(&mut rng, eligible.len(), k).into_vec();
    chosen.sort_unstable();
    PseudoPositiveSet {
        pairs: chosen.into_iter().map(|i| eligible[i]).collect(),
        k,
    }
}

/// Camera id reserved for records that did not come from a real camera.
pub fn sentinel_camera(train: &LabeledDataset) -> usize {
    train.max_camera().map_or(0, |c| c + 1)
}

/// Appends the selected pool vectors to the training set under their
/// transferred identities. The identity count is unchanged.
pub fn merge(train: &LabeledDataset, pseudo: &PseudoPositiveSet, pool: &UnlabeledPool) -> Result<LabeledDataset> {
    if pseudo.is_empty() {
        return Ok(train.clone());
    }
    let classes = train.num_identities();
    let cam = sentinel_camera(train);
    let mut records = train.records().to_vec();
    records.reserve(pseudo.len());
    for p in &pseudo.pairs {
        if p.transferred_label >= classes {
            return Err(Error::LabelOutOfRange {
                label: p.transferred_label,
                num_identities: classes,
            });
        }
        let src = pool.records().get(p.pool_index).ok_or(Error::IndexOutOfRange {
            index: p.pool_index,
            len: pool.len(),
        })?;
        records.push(EmbeddingRecord::new(src.vector.clone(), p.transferred_label, cam));
    }
    LabeledDataset::with_label_space(records, classes)
}

fn wrong_label(rng: &mut impl Rng, truth: usize, classes: usize) -> usize {
    let r = rng.random_range(0..classes - 1);
    if r >= truth {
        r + 1
    } else {
        r
    }
}

/// DisturbLabel: `count` distinct records receive a uniformly random
/// incorrect identity.
pub fn disturb_labels(train: &LabeledDataset, count: usize, seed: u64) -> Result<LabeledDataset> {
    let classes = train.num_identities();
    if classes < 2 {
        return Err(Error::NotEnoughIdentities);
    }
    if count > train.len() {
        return Err(Error::config(format!(
            "cannot disturb {count} of {} records",
            train.len()
        )));
    }
    if count == 0 {
        return Ok(train.clone());
    }
    let mut rng = seed::rng(seed);
    let mut chosen = index::sample(&mut rng, train.len(), count).into_vec();
    chosen.sort_unstable();
    let mut records = train.records().to_vec();
    for i in chosen {
        records[i].identity = wrong_label(&mut rng, records[i].identity, classes);
    }
    LabeledDataset::with_label_space(records, classes)
}

/// DisturbLabel*: appends `count` pool vectors drawn without replacement,
/// each with a uniformly random identity and the sentinel camera.
pub fn disturb_star(train: &LabeledDataset, pool: &UnlabeledPool, count: usize, seed: u64) -> Result<LabeledDataset> {
    if count > pool.len() {
        return Err(Error::config(format!(
            "cannot draw {count} of {} pool items",
            pool.len()
        )));
    }
    if count == 0 {
        return Ok(train.clone());
    }
    let classes = train.num_identities();
    if classes == 0 {
        return Err(Error::EmptyDataset);
    }
    let cam = sentinel_camera(train);
    let mut rng = seed::rng(seed);
    let mut chosen = index::sample(&mut rng, pool.len(), count).into_vec();
    chosen.sort_unstable();
    let mut records = train.records().to_vec();
    for j in chosen {
        let label = rng.random_range(0..classes);
        records.push(EmbeddingRecord::new(pool.records()[j].vector.clone(), label, cam));
    }
    LabeledDataset::with_label_space(records, classes)
}

/// Writes one `{"query":..,"pool":..,"dist":..,"label":..}` row per pair.
pub fn write_pairs_to(mut w: impl Write, pairs: &[MinedPair]) -> Result<()> {
    for p in pairs {
        serde_json::to_writer(&mut w, p)?;
        writeln!(w).map_err(|e| Error::io("<writer>", e))?;
    }
    Ok(())
}

pub fn parse_pairs(reader: impl BufRead) -> Result<Vec<MinedPair>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: n + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: MinedPair = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: n + 1,
            message: e.to_string(),
        })?;
        if !(pair.distance.is_finite() && pair.distance >= 0.0) {
            return Err(Error::Parse {
                line: n + 1,
                message: format!("invalid distance {}", pair.distance),
            });
        }
        out.push(pair);
    }
    Ok(out)
}

pub fn write_pseudo_set(path: impl AsRef<Path>, set: &PseudoPositiveSet) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_pairs_to(&mut w, &set.pairs)?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a pseudo-positive file; `k` is set to the number of rows.
pub fn read_pseudo_set(path: impl AsRef<Path>) -> Result<PseudoPositiveSet> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let pairs = parse_pairs(BufReader::new(file))?;
    Ok(PseudoPositiveSet { k: pairs.len(), pairs })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fv(v: &[f64]) -> FeatureVector {
        FeatureVector::new(v.to_vec()).unwrap()
    }

    fn labeled(rows: &[(&[f64], usize)]) -> LabeledDataset {
        LabeledDataset::new(rows.iter().map(|(v, id)| EmbeddingRecord::new(fv(v), *id, 0)).collect()).unwrap()
    }

    fn pool(rows: &[&[f64]]) -> UnlabeledPool {
        UnlabeledPool::from_vectors(rows.iter().map(|v| fv(v)).collect()).unwrap()
    }

    fn pair(q: usize, p: usize, d: f64, label: usize) -> MinedPair {
        MinedPair {
            query_index: q,
            pool_index: p,
            distance: d,
            transferred_label: label,
        }
    }

    #[test]
    fn nearest_prefers_smaller_distance() {
        let pairs = mine_nearest(&labeled(&[(&[0.0, 0.0], 4)]), &pool(&[&[1.0, 0.0], &[0.0, 2.0]]), false).unwrap();
        assert_eq!(pairs, vec![pair(0, 0, 1.0, 4)]);
    }

    #[test]
    fn exact_match_has_zero_distance() {
        let pairs = mine_nearest(
            &labeled(&[(&[3.0, -1.0], 1)]),
            &pool(&[&[0.0, 0.0], &[3.0, -1.0], &[3.0, -1.0]]),
            false,
        )
        .unwrap();
        assert_eq!(pairs[0].pool_index, 1);
        assert_eq!(pairs[0].distance, 0.0);
    }

    #[test]
    fn normalized_search() {
        let pairs = mine_nearest(&labeled(&[(&[10.0, 0.0], 0)]), &pool(&[&[0.9, 0.9], &[2.0, 0.1]]), true).unwrap();
        assert_eq!(pairs[0].pool_index, 1);
    }

    #[test]
    fn mining_errors() {
        let q = labeled(&[(&[0.0, 0.0], 0)]);
        assert!(matches!(
            mine_nearest(&q, &UnlabeledPool::default(), false),
            Err(Error::EmptyPool)
        ));
        assert!(matches!(
            mine_nearest(&q, &pool(&[&[1.0]]), false),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn select_zero_is_empty() {
        let pairs = vec![pair(0, 0, 1.0, 0), pair(1, 1, 1.0, 1)];
        assert!(select_pseudo_positives(&pairs, 0, 1).is_empty());
    }

    #[test]
    fn select_saturates() {
        let pairs = vec![pair(0, 5, 1.0, 0), pair(1, 2, 1.0, 1), pair(2, 9, 0.1, 1)];
        let set = select_pseudo_positives(&pairs, 10, 1);
        assert_eq!(set.k, 10);
        let pools: Vec<usize> = set.pairs.iter().map(|p| p.pool_index).collect();
        assert_eq!(pools, vec![2, 5, 9]);
        assert_eq!(set, select_pseudo_positives(&pairs, 10, 2));
    }

    #[test]
    fn shared_pool_item_keeps_closest_claimant() {
        let pairs = vec![pair(0, 7, 0.9, 0), pair(1, 7, 0.5, 1)];
        let set = select_pseudo_positives(&pairs, 5, 3);
        assert_eq!(set.pairs, vec![pair(1, 7, 0.5, 1)]);
        let tie = vec![pair(4, 7, 0.5, 0), pair(1, 7, 0.5, 1)];
        assert_eq!(deduplicate(&tie), vec![pair(1, 7, 0.5, 1)]);
    }

    #[test]
    fn selection_is_seeded_subset() {
        let pairs: Vec<MinedPair> = (0..50).map(|i| pair(i, i, i as f64, i % 3)).collect();
        let a = select_pseudo_positives(&pairs, 10, 77);
        let b = select_pseudo_positives(&pairs, 10, 77);
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);
        assert!(a.pairs.iter().all(|p| pairs.contains(p)));
    }

    #[test]
    fn merge_appends_with_sentinel_camera() {
        let train = LabeledDataset::new(vec![
            EmbeddingRecord::new(fv(&[0.0]), 0, 2),
            EmbeddingRecord::new(fv(&[1.0]), 1, 0),
        ])
        .unwrap();
        let p = pool(&[&[5.0], &[6.0]]);
        let set = PseudoPositiveSet {
            pairs: vec![pair(1, 1, 5.0, 1)],
            k: 1,
        };
        let merged = merge(&train, &set, &p).unwrap();
        assert_eq!(merged.len(), 3);
        assert_eq!(merged.num_identities(), 2);
        let last = &merged.records()[2];
        assert_eq!((last.identity, last.camera), (1, 3));
        assert_eq!(last.vector.as_slice(), &[6.0]);
        assert_eq!(&merged.records()[..2], train.records());
    }

    #[test]
    fn merge_empty_is_identity() {
        let train = labeled(&[(&[0.0], 0), (&[1.0], 1)]);
        assert_eq!(
            merge(&train, &PseudoPositiveSet::default(), &pool(&[&[2.0]])).unwrap(),
            train
        );
    }

    #[test]
    fn merge_rejects_corrupt_label() {
        let train = labeled(&[(&[0.0], 0), (&[1.0], 1)]);
        let set = PseudoPositiveSet {
            pairs: vec![pair(0, 0, 1.0, 2)],
            k: 1,
        };
        assert!(matches!(
            merge(&train, &set, &pool(&[&[2.0]])),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn disturb_zero_is_identity() {
        let train = labeled(&[(&[0.0], 0), (&[1.0], 1)]);
        assert_eq!(disturb_labels(&train, 0, 1).unwrap(), train);
        assert_eq!(disturb_star(&train, &pool(&[&[2.0]]), 0, 1).unwrap(), train);
    }

    #[test]
    fn disturb_all_with_two_classes_flips_everything() {
        let train = labeled(&[(&[0.0], 0), (&[1.0], 1), (&[2.0], 1), (&[3.0], 0)]);
        let out = disturb_labels(&train, 4, 9).unwrap();
        for (a, b) in train.records().iter().zip(out.records()) {
            assert_eq!(b.identity, 1 - a.identity);
        }
    }

    #[test]
    fn disturb_changes_exactly_count() {
        let rows: Vec<(Vec<f64>, usize)> = (0..100).map(|i| (vec![i as f64], i % 7)).collect();
        let train =
            LabeledDataset::new(rows.iter().map(|(v, id)| EmbeddingRecord::new(fv(v), *id, 0)).collect()).unwrap();
        let out = disturb_labels(&train, 5, 3).unwrap();
        let changed = train
            .records()
            .iter()
            .zip(out.records())
            .filter(|(a, b)| a.identity != b.identity)
            .count();
        assert_eq!(changed, 5);
        assert_eq!(out.num_identities(), 7);
    }

    #[test]
    fn disturb_needs_two_classes() {
        let train = labeled(&[(&[0.0], 0)]);
        assert!(matches!(disturb_labels(&train, 1, 1), Err(Error::NotEnoughIdentities)));
        let train = labeled(&[(&[0.0], 0), (&[1.0], 1)]);
        assert!(disturb_labels(&train, 3, 1).is_err());
    }

    #[test]
    fn disturb_star_appends_count() {
        let train = labeled(&[(&[0.0], 0), (&[1.0], 1)]);
        let p = pool(&[&[5.0], &[6.0], &[7.0], &[8.0]]);
        let out = disturb_star(&train, &p, 3, 4).unwrap();
        assert_eq!(out.len(), 5);
        assert_eq!(out, disturb_star(&train, &p, 3, 4).unwrap());
        assert!(out.records()[2..].iter().all(|r| r.identity < 2 && r.camera == 1));
        assert!(disturb_star(&train, &p, 5, 4).is_err());
    }

    #[test]
    fn pair_row_layout() {
        let mut buf = Vec::new();
        write_pairs_to(&mut buf, &[pair(3, 17, 0.25, 2)]).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "{\"query\":3,\"pool\":17,\"dist\":0.25,\"label\":2}\n"
        );
        assert_eq!(parse_pairs(buf.as_slice()).unwrap(), vec![pair(3, 17, 0.25, 2)]);
        assert!(parse_pairs("{\"query\":3}".as_bytes()).is_err());
    }
}
