//! Sample and dataset model, deterministic splits, and the JSON-lines
//! embedding file format.
//!
//! A labeled row is `{"id":<int>,"cam":<int>,"vec":[<float>...]}`; a pool row
//! carries only `vec` (plus an optional opaque `src` tag). The first row of a
//! file fixes the dimension.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// A finite, non-empty embedding vector.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::DimensionMismatch { expected: 1, found: 0 });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self(values))
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Returns a copy scaled to unit L2 norm; the zero vector is returned as is.
    pub fn l2_normalized(&self) -> Self {
        let norm = self.0.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return self.clone();
        }
        Self(self.0.iter().map(|v| v / norm).collect())
    }
}

impl<'de> Deserialize<'de> for FeatureVector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let values = Vec::<f64>::deserialize(d)?;
        FeatureVector::new(values).map_err(serde::de::Error::custom)
    }
}

impl AsRef<[f64]> for FeatureVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Plain Euclidean distance. Components are accumulated left to right.
#[inline]
pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// One labeled sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub vector: FeatureVector,
    pub identity: usize,
    pub camera: usize,
}

impl EmbeddingRecord {
    pub fn new(vector: FeatureVector, identity: usize, camera: usize) -> Self {
        Self {
            vector,
            identity,
            camera,
        }
    }
}

fn check_dims<'a>(mut vectors: impl Iterator<Item = &'a FeatureVector>) -> Result<()> {
    let Some(first) = vectors.next() else {
        return Ok(());
    };
    let d = first.dim();
    for v in vectors {
        if v.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: v.dim(),
            });
        }
    }
    Ok(())
}

/// A set of labeled samples sharing one dimension.
///
/// `num_identities` is the count of distinct identity labels (or the fixed
/// label space, see [`LabeledDataset::with_label_space`]). After
/// [`canonicalize_labels`] the labels are exactly `0..num_identities`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    records: Vec<EmbeddingRecord>,
    num_identities: usize,
}

impl LabeledDataset {
    pub fn new(records: Vec<EmbeddingRecord>) -> Result<Self> {
        check_dims(records.iter().map(|r| &r.vector))?;
        let num_identities = records.iter().map(|r| r.identity).collect::<BTreeSet<_>>().len();
        Ok(Self {
            records,
            num_identities,
        })
    }

    /// Builds a dataset over a fixed label space `0..num_identities`, used for
    /// derived training sets (merged or disturbed) whose classifier head must
    /// keep the parent's width even if some identity loses all its records.
    pub fn with_label_space(records: Vec<EmbeddingRecord>, num_identities: usize) -> Result<Self> {
        check_dims(records.iter().map(|r| &r.vector))?;
        if let Some(r) = records.iter().find(|r| r.identity >= num_identities) {
            return Err(Error::LabelOutOfRange {
                label: r.identity,
                num_identities,
            });
        }
        Ok(Self {
            records,
            num_identities,
        })
    }

    pub fn empty() -> Self {
        Self {
            records: Vec::new(),
            num_identities: 0,
        }
    }

    #[inline]
    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<EmbeddingRecord> {
        self.records
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.records.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    #[inline]
    pub fn num_identities(&self) -> usize {
        self.num_identities
    }

    /// Feature dimension, `None` for an empty dataset.
    pub fn dim(&self) -> Option<usize> {
        self.records.first().map(|r| r.vector.dim())
    }

    /// True when labels are exactly `0..num_identities`.
    pub fn is_canonical(&self) -> bool {
        self.records.iter().all(|r| r.identity < self.num_identities)
    }

    pub fn max_camera(&self) -> Option<usize> {
        self.records.iter().map(|r| r.camera).max()
    }

    /// Number of records per identity label.
    pub fn identity_counts(&self) -> BTreeMap<usize, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            *counts.entry(r.identity).or_insert(0) += 1;
        }
        counts
    }

    /// Same labels and cameras with the vectors replaced, e.g. by extracted
    /// features.
    pub fn with_vectors(&self, vectors: Vec<FeatureVector>) -> Result<Self> {
        if vectors.len() != self.records.len() {
            return Err(Error::DimensionMismatch {
                expected: self.records.len(),
                found: vectors.len(),
            });
        }
        let records = self
            .records
            .iter()
            .zip(vectors)
            .map(|(r, v)| EmbeddingRecord::new(v, r.identity, r.camera))
            .collect();
        Self::new(records)
    }

    fn subset(&self, indices: &[usize]) -> Self {
        let records: Vec<_> = indices.iter().map(|&i| self.records[i].clone()).collect();
        Self::new(records).expect("subset of a valid dataset")
    }
}

/// One unlabeled sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolRecord {
    pub vector: FeatureVector,
    pub source: Option<String>,
}

/// The unlabeled independent database mined for pseudo-positives.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct UnlabeledPool {
    records: Vec<PoolRecord>,
}

impl UnlabeledPool {
    pub fn new(records: Vec<PoolRecord>) -> Result<Self> {
        check_dims(records.iter().map(|r| &r.vector))?;
        Ok(Self { records })
    }

    pub fn from_vectors(vectors: Vec<FeatureVector>) -> Result<Self> {
        Self::new(
            vectors
                .into_iter()
                .map(|vector| PoolRecord { vector, source: None })
                .collect(),
        )
    }

    #[inline]
    pub fn records(&self) -> &[PoolRecord] {
        &self.records
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.records.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.records.first().map(|r| r.vector.dim())
    }

    pub fn vectors(&self) -> impl Iterator<Item = &FeatureVector> {
        self.records.iter().map(|r| &r.vector)
    }

    /// Same source tags with the vectors replaced.
    pub fn with_vectors(&self, vectors: Vec<FeatureVector>) -> Result<Self> {
        if vectors.len() != self.records.len() {
            return Err(Error::DimensionMismatch {
                expected: self.records.len(),
                found: vectors.len(),
            });
        }
        Self::new(
            self.records
                .iter()
                .zip(vectors)
                .map(|(r, vector)| PoolRecord {
                    vector,
                    source: r.source.clone(),
                })
                .collect(),
        )
    }
}

/// Original label to canonical label.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LabelMap(BTreeMap<usize, usize>);

impl LabelMap {
    pub fn canonical(&self, original: usize) -> Option<usize> {
        self.0.get(&original).copied()
    }

    pub fn original(&self, canonical: usize) -> Option<usize> {
        self.0.iter().find_map(|(&o, &c)| (c == canonical).then_some(o))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Remaps identities to `0..C` in ascending order of the original label.
pub fn canonicalize_labels(dataset: &LabeledDataset) -> Result<(LabeledDataset, LabelMap)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let map: BTreeMap<usize, usize> = dataset
        .records
        .iter()
        .map(|r| r.identity)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(canon, orig)| (orig, canon))
        .collect();
    let records = dataset
        .records
        .iter()
        .map(|r| EmbeddingRecord::new(r.vector.clone(), map[&r.identity], r.camera))
        .collect();
    Ok((LabeledDataset::new(records)?, LabelMap(map)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    ByRecord,
    ByIdentity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
    pub mode: SplitMode,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::config(format!(
                "train_fraction {} outside (0, 1]",
                self.train_fraction
            )));
        }
        Ok(())
    }
}

/// Splits a dataset into two disjoint partitions.
///
/// By record: `round(train_fraction * n)` records go to the first partition,
/// but every identity always keeps at least one record there, so the first
/// partition may be larger than requested when identities are scarce.
/// By identity: `round(train_fraction * C)` identities (at least one) go to
/// the first partition with all their records.
///
/// Both partitions preserve the input order of records.
pub fn split(dataset: &LabeledDataset, spec: &SplitSpec) -> Result<(LabeledDataset, LabeledDataset)> {
    spec.validate()?;
    if spec.train_fraction == 1.0 {
        return Ok((dataset.clone(), LabeledDataset::empty()));
    }
    let mut rng = seed::rng(spec.seed);
    let n = dataset.len();
    let mut in_first = vec![false; n];
    match spec.mode {
        SplitMode::ByRecord => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let mut seen = BTreeSet::new();
            let mut taken = 0;
            for &i in &order {
                if seen.insert(dataset.records[i].identity) {
                    in_first[i] = true;
                    taken += 1;
                }
            }
            let target = ((spec.train_fraction * n as f64).round() as usize).min(n);
            for &i in &order {
                if taken >= target {
                    break;
                }
                if !in_first[i] {
                    in_first[i] = true;
                    taken += 1;
                }
            }
        }
        SplitMode::ByIdentity => {
            let mut ids: Vec<usize> = dataset.identity_counts().into_keys().collect();
            if ids.len() < 2 {
                return Err(Error::NotEnoughIdentities);
            }
            ids.shuffle(&mut rng);
            let keep = ((spec.train_fraction * ids.len() as f64).round() as usize).max(1);
            let first: BTreeSet<usize> = ids[..keep.min(ids.len())].iter().copied().collect();
            for (i, r) in dataset.records.iter().enumerate() {
                in_first[i] = first.contains(&r.identity);
            }
        }
    }
    let (a, b): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| in_first[i]);
    Ok((dataset.subset(&a), dataset.subset(&b)))
}

/// Contents of an embedding file.
#[derive(Debug, Clone, PartialEq)]
pub enum EmbeddingData {
    Labeled(LabeledDataset),
    Pool(UnlabeledPool),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Row {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cam: Option<usize>,
    vec: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    src: Option<String>,
}

/// Parses JSON-lines embedding rows. Blank lines are ignored.
pub fn parse_embeddings(reader: impl BufRead) -> Result<EmbeddingData> {
    let mut labeled: Option<Vec<EmbeddingRecord>> = None;
    let mut pool: Option<Vec<PoolRecord>> = None;
    let mut dim: Option<usize> = None;
    for (n, line) in reader.lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse { line: line_no, message };
        let row: Row = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let d = *dim.get_or_insert(row.vec.len());
        if row.vec.len() != d {
            return Err(Error::LineDimensionMismatch {
                line: line_no,
                expected: d,
                found: row.vec.len(),
            });
        }
        let vector = FeatureVector::new(row.vec).map_err(|e| parse_err(e.to_string()))?;
        match (row.id, row.cam) {
            (Some(id), Some(cam)) => {
                if pool.is_some() {
                    return Err(parse_err("labeled row in a pool file".into()));
                }
                labeled
                    .get_or_insert_with(Vec::new)
                    .push(EmbeddingRecord::new(vector, id, cam));
            }
            (None, None) => {
                if labeled.is_some() {
                    return Err(parse_err("unlabeled row in a labeled file".into()));
                }
                pool.get_or_insert_with(Vec::new).push(PoolRecord {
                    vector,
                    source: row.src,
                });
            }
            _ => return Err(parse_err("labeled rows need both \"id\" and \"cam\"".into())),
        }
    }
    match (labeled, pool) {
        (Some(records), None) => Ok(EmbeddingData::Labeled(LabeledDataset::new(records)?)),
        (None, Some(records)) => Ok(EmbeddingData::Pool(UnlabeledPool::new(records)?)),
        _ => Err(Error::EmptyDataset),
    }
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingData> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings(BufReader::new(file))
}

pub fn read_labeled(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    match read_embeddings(path.as_ref())? {
        EmbeddingData::Labeled(d) => Ok(d),
        EmbeddingData::Pool(_) => Err(Error::config(format!(
            "{}: expected labeled rows, found pool rows",
            path.as_ref().display()
        ))),
    }
}

pub fn read_pool(path: impl AsRef<Path>) -> Result<UnlabeledPool> {
    match read_embeddings(path.as_ref())? {
        EmbeddingData::Pool(p) => Ok(p),
        EmbeddingData::Labeled(_) => Err(Error::config(format!(
            "{}: expected pool rows, found labeled rows",
            path.as_ref().display()
        ))),
    }
}

pub fn write_labeled_to(mut w: impl Write, dataset: &LabeledDataset) -> Result<()> {
    for r in dataset.records() {
        let row = Row {
            id: Some(r.identity),
            cam: Some(r.camera),
            vec: r.vector.as_slice().to_vec(),
            src: None,
        };
        serde_json::to_writer(&mut w, &row)?;
        writeln!(w).map_err(|e| Error::io("<writer>", e))?;
    }
    Ok(())
}

pub fn write_pool_to(mut w: impl Write, pool: &UnlabeledPool) -> Result<()> {
    for r in pool.records() {
        let row = Row {
            id: None,
            cam: None,
            vec: r.vector.as_slice().to_vec(),
            src: r.source.clone(),
        };
        serde_json::to_writer(&mut w, &row)?;
        writeln!(w).map_err(|e| Error::io("<writer>", e))?;
    }
    Ok(())
}

pub fn write_embeddings(path: impl AsRef<Path>, data: &EmbeddingData) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    match data {
        EmbeddingData::Labeled(d) => write_labeled_to(&mut w, d)?,
        EmbeddingData::Pool(p) => write_pool_to(&mut w, p)?,
    }
    w.flush().map_err(|e| Error::io(path, e))
}
