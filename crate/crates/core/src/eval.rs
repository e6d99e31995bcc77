//! Retrieval evaluation: Euclidean gallery ranking, average precision, and
//! CMC/mAP under the cross-camera and single-shot protocols.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{euclidean, EmbeddingRecord, LabeledDataset};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProtocolMode {
    /// One gallery record per identity per trial, averaged over trials.
    SingleShotCmc,
    /// Same-identity same-camera gallery entries are junk; relevance is
    /// same identity on a different camera.
    CrossCamera,
}

fn default_trials() -> usize {
    20
}

fn default_max_rank() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub mode: ProtocolMode,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_max_rank")]
    pub max_rank: usize,
}

impl ProtocolConfig {
    pub fn cross_camera(max_rank: usize) -> Self {
        Self {
            mode: ProtocolMode::CrossCamera,
            trials: 1,
            seed: 0,
            max_rank,
        }
    }

    pub fn single_shot(trials: usize, seed: u64, max_rank: usize) -> Self {
        Self {
            mode: ProtocolMode::SingleShotCmc,
            trials,
            seed,
            max_rank,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::config("trials must be at least 1"));
        }
        if self.max_rank == 0 {
            return Err(Error::config("max_rank must be at least 1"));
        }
        Ok(())
    }
}

/// CMC curve and mAP for one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `cmc[r]`: fraction of evaluated queries whose first true match is at
    /// rank `r + 1` or better.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub per_query_ap: Vec<f64>,
    pub num_queries_evaluated: usize,
    /// Queries without any valid ground truth.
    pub skipped: usize,
    pub protocol: ProtocolConfig,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl EvalReport {
    pub fn rank1(&self) -> f64 {
        self.cmc[0]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Sorts candidate `(index, vector)` pairs by distance to `query`, ties to
/// the lower index, and returns the indices.
fn rank_candidates(query: &[f64], candidates: &[(usize, &[f64])]) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = candidates.iter().map(|&(i, v)| (euclidean(query, v), i)).collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.into_iter().map(|(_, i)| i).collect()
}

/// Gallery indices in ascending Euclidean distance from `query`, ties to the
/// lower index, with `exclusions` removed.
pub fn rank_gallery(query: &[f64], gallery: &[EmbeddingRecord], exclusions: &BTreeSet<usize>) -> Result<Vec<usize>> {
    let mut candidates = Vec::with_capacity(gallery.len());
    for (i, r) in gallery.iter().enumerate() {
        if exclusions.contains(&i) {
            continue;
        }
        if r.vector.dim() != query.len() {
            return Err(Error::DimensionMismatch {
                expected: query.len(),
                found: r.vector.dim(),
            });
        }
        candidates.push((i, r.vector.as_slice()));
    }
    if candidates.is_empty() {
        return Err(Error::EmptyGallery);
    }
    Ok(rank_candidates(query, &candidates))
}

/// `(1/R) * sum over relevant positions k of precision@k`, where `R` is the
/// number of relevant flags.
pub fn average_precision(relevant: &[bool]) -> Result<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &rel) in relevant.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(Error::NoRelevantItems);
    }
    Ok(sum / hits as f64)
}

struct QueryOutcome {
    /// Zero-based rank of the first relevant item.
    first_hit: usize,
    ap: f64,
}

fn check_dims(queries: &LabeledDataset, gallery: &LabeledDataset) -> Result<()> {
    if let (Some(q), Some(g)) = (queries.dim(), gallery.dim()) {
        if q != g {
            return Err(Error::DimensionMismatch { expected: q, found: g });
        }
    }
    Ok(())
}

fn cmc_from_first_hits(first_hits: impl Iterator<Item = usize>, max_rank: usize) -> Vec<usize> {
    let mut counts = vec![0usize; max_rank];
    for f in first_hits {
        if f < max_rank {
            counts[f] += 1;
        }
    }
    let mut acc = 0;
    for c in &mut counts {
        acc += *c;
        *c = acc;
    }
    counts
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Market-1501 style evaluation.
///
/// For each query, gallery entries with the same identity and camera are
/// removed from the ranking; entries with the same identity on another
/// camera are relevant. Queries with no relevant entry are skipped.
pub fn evaluate_cross_camera(
    queries: &LabeledDataset,
    gallery: &LabeledDataset,
    config: &ProtocolConfig,
) -> Result<EvalReport> {
    config.validate()?;
    check_dims(queries, gallery)?;
    if config.max_rank > gallery.len() {
        return Err(Error::config(format!(
            "max_rank {} exceeds gallery size {}",
            config.max_rank,
            gallery.len()
        )));
    }
    let outcomes: Vec<Option<QueryOutcome>> = queries
        .records()
        .par_iter()
        .map(|q| {
            let mut candidates = Vec::with_capacity(gallery.len());
            let mut relevant = 0usize;
            for (i, g) in gallery.records().iter().enumerate() {
                if g.identity == q.identity {
                    if g.camera == q.camera {
                        continue;
                    }
                    relevant += 1;
                }
                candidates.push((i, g.vector.as_slice()));
            }
            if relevant == 0 {
                return None;
            }
            let ranked = rank_candidates(q.vector.as_slice(), &candidates);
            let flags: Vec<bool> = ranked
                .iter()
                .map(|&i| gallery.records()[i].identity == q.identity)
                .collect();
            let first_hit = flags.iter().position(|&f| f).expect("relevant > 0");
            let ap = average_precision(&flags).expect("relevant > 0");
            Some(QueryOutcome { first_hit, ap })
        })
        .collect();
    let evaluated: Vec<&QueryOutcome> = outcomes.iter().flatten().collect();
    let skipped = outcomes.len() - evaluated.len();
    if evaluated.is_empty() {
        return Err(Error::NoEvaluableQueries { skipped });
    }
    let n = evaluated.len();
    let counts = cmc_from_first_hits(evaluated.iter().map(|o| o.first_hit), config.max_rank);
    let cmc = counts.iter().map(|&c| c as f64 / n as f64).collect();
    let per_query_ap: Vec<f64> = evaluated.iter().map(|o| o.ap).collect();
    Ok(EvalReport {
        cmc,
        map: mean(&per_query_ap),
        per_query_ap,
        num_queries_evaluated: n,
        skipped,
        protocol: config.clone(),
        seed: config.seed,
        note: None,
    })
}

/// Gallery indices of one single-shot trial: one uniformly chosen record per
/// identity, returned in ascending index order.
pub fn single_shot_subgallery(gallery: &LabeledDataset, seed: u64, trial: usize) -> Vec<usize> {
    let mut by_identity: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in gallery.records().iter().enumerate() {
        by_identity.entry(r.identity).or_default().push(i);
    }
    let mut rng = seed::rng(seed::derive_indexed(seed, "single-shot-trial", trial as u64));
    let mut picked: Vec<usize> = by_identity
        .values()
        .map(|members| members[rng.random_range(0..members.len())])
        .collect();
    picked.sort_unstable();
    picked
}

/// CUHK03 style single-shot evaluation averaged over seeded trials.
///
/// Each trial samples one gallery record per identity; relevance is identity
/// equality, so every evaluated query has exactly one ground truth and its AP
/// is the reciprocal rank of that match. Cameras are not consulted. CMC
/// values are averaged through integer hit counts; per-query APs are
/// averaged over trials and `map` is their mean.
pub fn evaluate_single_shot(
    queries: &LabeledDataset,
    gallery: &LabeledDataset,
    config: &ProtocolConfig,
) -> Result<EvalReport> {
    config.validate()?;
    check_dims(queries, gallery)?;
    let gallery_ids: BTreeSet<usize> = gallery.records().iter().map(|r| r.identity).collect();
    if gallery_ids.is_empty() {
        return Err(Error::EmptyGallery);
    }
    if config.max_rank > gallery_ids.len() {
        return Err(Error::config(format!(
            "max_rank {} exceeds single-shot gallery size {}",
            config.max_rank,
            gallery_ids.len()
        )));
    }
    let evaluable: Vec<&EmbeddingRecord> = queries
        .records()
        .iter()
        .filter(|q| gallery_ids.contains(&q.identity))
        .collect();
    let skipped = queries.len() - evaluable.len();
    if evaluable.is_empty() {
        return Err(Error::NoEvaluableQueries { skipped });
    }
    let n = evaluable.len();
    let trials: Vec<(Vec<usize>, Vec<f64>)> = (0..config.trials)
        .into_par_iter()
        .map(|t| {
            let sub = single_shot_subgallery(gallery, config.seed, t);
            let candidates: Vec<(usize, &[f64])> = sub
                .iter()
                .map(|&i| (i, gallery.records()[i].vector.as_slice()))
                .collect();
            let (first_hits, aps): (Vec<usize>, Vec<f64>) = evaluable
                .iter()
                .map(|q| {
                    let ranked = rank_candidates(q.vector.as_slice(), &candidates);
                    let first = ranked
                        .iter()
                        .position(|&i| gallery.records()[i].identity == q.identity)
                        .expect("identity present in every trial");
                    (first, 1.0 / (first + 1) as f64)
                })
                .unzip();
            (cmc_from_first_hits(first_hits.into_iter(), config.max_rank), aps)
        })
        .collect();
    let mut total_hits = vec![0usize; config.max_rank];
    let mut ap_sums = vec![0.0; n];
    for (counts, aps) in &trials {
        total_hits.iter_mut().zip(counts).for_each(|(t, c)| *t += c);
        ap_sums.iter_mut().zip(aps).for_each(|(s, a)| *s += a);
    }
    let denom = (config.trials * n) as f64;
    let cmc = total_hits.iter().map(|&h| h as f64 / denom).collect();
    let per_query_ap: Vec<f64> = ap_sums.iter().map(|s| s / config.trials as f64).collect();
    Ok(EvalReport {
        cmc,
        map: mean(&per_query_ap),
        per_query_ap,
        num_queries_evaluated: n,
        skipped,
        protocol: config.clone(),
        seed: config.seed,
        note: Some("single ground truth per trial: AP is the reciprocal rank".to_string()),
    })
}

/// Dispatches on the protocol mode.
pub fn evaluate(queries: &LabeledDataset, gallery: &LabeledDataset, config: &ProtocolConfig) -> Result<EvalReport> {
    match config.mode {
        ProtocolMode::CrossCamera => evaluate_cross_camera(queries, gallery, config),
        ProtocolMode::SingleShotCmc => evaluate_single_shot(queries, gallery, config),
    }
}
