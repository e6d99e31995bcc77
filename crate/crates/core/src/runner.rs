//! End-to-end experiments: baseline, pseudo-positive retraining, and the
//! DisturbLabel baselines, plus comparison tables.
//!
//! All randomness of one run flows from a single run seed through labeled
//! derivation (`data`, `split`, `train`, `select`, `disturb`, `protocol`).
//! Compared methods share the same split, training recipe, and training seed;
//! only the training-set contents differ.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::{self, canonicalize_labels, split, LabeledDataset, SplitMode, SplitSpec, UnlabeledPool};
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport, ProtocolConfig};
use crate::model::{self, Checkpoint, ModelParams, TrainConfig, TrainLog};
use crate::pseudo;
use crate::seed;
use crate::synth::{self, SynthConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSource {
    /// Regenerated for every repeat with a seed derived from `seed` and the
    /// run seed.
    Synthetic(SynthConfig),
    Files {
        train: PathBuf,
        query: PathBuf,
        gallery: PathBuf,
        pool: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Baseline,
    Ppr,
    Disturb,
    DisturbStar,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Ppr => "ppr",
            Method::Disturb => "disturb",
            Method::DisturbStar => "disturb_star",
        }
    }
}

fn default_train_fraction() -> f64 {
    0.9
}

fn default_repeats() -> usize {
    1
}

fn default_methods() -> Vec<Method> {
    vec![Method::Baseline, Method::Ppr]
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub train: TrainConfig,
    /// Fraction of the labeled set used for training; the rest validates.
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    /// Pseudo-positive counts to sweep; disturbance counts match them.
    #[serde(default)]
    pub k_values: Vec<usize>,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    pub protocol: ProtocolConfig,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub seed: u64,
    /// L2-normalize features before nearest-neighbor mining.
    #[serde(default)]
    pub l2_normalize_mining: bool,
    /// Mine with this model's features instead of the baseline's.
    #[serde(default)]
    pub miner_checkpoint: Option<PathBuf>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    /// The standard synthetic benchmark with every method swept at
    /// `K = 0.1 * |look-alike portion|` and at `K = |pool|`.
    pub fn benchmark(seed: u64, repeats: usize) -> Self {
        let data = SynthConfig::standard(1);
        let small_k = (0.1 * data.overlap_count() as f64).round() as usize;
        let mut train = TrainConfig::new(16, vec![64]);
        train.learning_rate = 0.05;
        train.epochs = 60;
        train.lr_step_epochs = 20;
        Self {
            k_values: vec![small_k, data.pool_size],
            data: DataSource::Synthetic(data),
            train,
            train_fraction: default_train_fraction(),
            methods: vec![Method::Baseline, Method::Ppr, Method::Disturb, Method::DisturbStar],
            protocol: ProtocolConfig::cross_camera(20),
            repeats,
            seed,
            l2_normalize_mining: false,
            miner_checkpoint: None,
            out_dir: default_out_dir(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.protocol.validate()?;
        if let DataSource::Synthetic(s) = &self.data {
            s.validate()?;
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::config("train_fraction must lie in (0, 1]"));
        }
        if self.repeats == 0 {
            return Err(Error::config("repeats must be at least 1"));
        }
        if self.methods.is_empty() {
            return Err(Error::config("no methods selected"));
        }
        let needs_k = self.methods.iter().any(|m| *m != Method::Baseline);
        if needs_k && self.k_values.is_empty() {
            return Err(Error::config("k_values must be non-empty for ppr/disturb methods"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Stable hash of everything but the output directory.
    pub fn hash(&self) -> Result<String> {
        let mut value = serde_json::to_value(self)?;
        if let Some(map) = value.as_object_mut() {
            map.remove("out_dir");
        }
        Ok(short_hash(&serde_json::to_string(&value)?))
    }
}

/// First 16 hex digits of SHA-256.
pub fn short_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    hex::encode(&digest[..8])
}

/// Outcome of one trained-and-evaluated model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: Method,
    pub k: Option<usize>,
    pub repeat: usize,
    pub seed: u64,
    pub config_hash: String,
    /// Training records after augmentation or disturbance.
    pub train_size: usize,
    /// Pseudo-positives actually added (PPR only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo_added: Option<usize>,
    pub final_train_loss: f64,
    pub report: EvalReport,
    pub wall_clock_seconds: f64,
}

impl RunRecord {
    /// Directory name under `runs/`.
    pub fn run_id(&self) -> String {
        let k = self.k.map_or_else(|| "-".to_string(), |k| k.to_string());
        short_hash(&format!(
            "{}/{}/{}/{}",
            self.config_hash,
            self.method.as_str(),
            k,
            self.seed
        ))
    }
}

/// Data of one repeat after canonicalization and the train/validation split.
#[derive(Debug, Clone)]
pub struct PreparedRun {
    pub repeat: usize,
    pub seed: u64,
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub query: LabeledDataset,
    pub gallery: LabeledDataset,
    pub pool: UnlabeledPool,
    pub train_config: TrainConfig,
    pub protocol: ProtocolConfig,
}

struct LoadedData {
    train: LabeledDataset,
    query: LabeledDataset,
    gallery: LabeledDataset,
    pool: UnlabeledPool,
}

/// A validated experiment with its inputs loaded.
pub struct Experiment {
    config: ExperimentConfig,
    hash: String,
    files: Option<LoadedData>,
    miner: Option<ModelParams>,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let hash = config.hash()?;
        let files = match &config.data {
            DataSource::Synthetic(_) => None,
            DataSource::Files {
                train,
                query,
                gallery,
                pool,
            } => Some(LoadedData {
                train: embedding::read_labeled(train)?,
                query: embedding::read_labeled(query)?,
                gallery: embedding::read_labeled(gallery)?,
                pool: embedding::read_pool(pool)?,
            }),
        };
        let miner = config
            .miner_checkpoint
            .as_ref()
            .map(|p| Checkpoint::load(p).map(|c| c.model))
            .transpose()?;
        Ok(Self {
            config,
            hash,
            files,
            miner,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn run_seed(&self, repeat: usize) -> u64 {
        seed::derive_indexed(self.config.seed, "repeat", repeat as u64)
    }

    pub fn prepare(&self, repeat: usize) -> Result<PreparedRun> {
        let run_seed = self.run_seed(repeat);
        let data = match (&self.config.data, &self.files) {
            (DataSource::Synthetic(s), _) => {
                let mut s = s.clone();
                s.seed = seed::derive_indexed(s.seed, "data", run_seed);
                let d = synth::generate(&s)?;
                LoadedData {
                    train: d.train,
                    query: d.query,
                    gallery: d.gallery,
                    pool: d.pool,
                }
            }
            (DataSource::Files { .. }, Some(f)) => LoadedData {
                train: f.train.clone(),
                query: f.query.clone(),
                gallery: f.gallery.clone(),
                pool: f.pool.clone(),
            },
            (DataSource::Files { .. }, None) => unreachable!("files are loaded in Experiment::new"),
        };
        let (labeled, _) = canonicalize_labels(&data.train)?;
        let (train, val) = split(
            &labeled,
            &SplitSpec {
                train_fraction: self.config.train_fraction,
                seed: seed::derive(run_seed, "split"),
                mode: SplitMode::ByRecord,
            },
        )?;
        let mut train_config = self.config.train.clone();
        train_config.seed = seed::derive_indexed(run_seed, "train", self.config.train.seed);
        let mut protocol = self.config.protocol.clone();
        protocol.seed = seed::derive_indexed(run_seed, "protocol", self.config.protocol.seed);
        Ok(PreparedRun {
            repeat,
            seed: run_seed,
            train,
            val,
            query: data.query,
            gallery: data.gallery,
            pool: data.pool,
            train_config,
            protocol,
        })
    }

    fn train_and_evaluate(
        &self,
        prep: &PreparedRun,
        train_set: &LabeledDataset,
    ) -> Result<(ModelParams, TrainLog, EvalReport)> {
        let (model, log) = model::train(train_set, &prep.val, &prep.train_config)?;
        let report = evaluate_with(&model, &prep.query, &prep.gallery, &prep.protocol)?;
        Ok((model, log, report))
    }

    #[allow(clippy::too_many_arguments)]
    fn record(
        &self,
        prep: &PreparedRun,
        method: Method,
        k: Option<usize>,
        train_size: usize,
        log: &TrainLog,
        report: EvalReport,
        started: Instant,
    ) -> RunRecord {
        RunRecord {
            method,
            k,
            repeat: prep.repeat,
            seed: prep.seed,
            config_hash: self.hash.clone(),
            train_size,
            pseudo_added: None,
            final_train_loss: log.epochs.last().map_or(f64::NAN, |e| e.mean_loss),
            report,
            wall_clock_seconds: started.elapsed().as_secs_f64(),
        }
    }

    /// Trains the baseline on the labeled training partition and evaluates
    /// it. The model is returned for pseudo-positive mining.
    pub fn run_baseline(&self, prep: &PreparedRun) -> Result<(RunRecord, ModelParams)> {
        let started = Instant::now();
        let (model, log, report) = self.train_and_evaluate(prep, &prep.train)?;
        let rec = self.record(prep, Method::Baseline, None, prep.train.len(), &log, report, started);
        Ok((rec, model))
    }

    /// Mines pseudo-positives with the miner (the baseline unless a
    /// checkpoint is configured), merges `k` of them, and retrains from a
    /// fresh initialization with the baseline recipe.
    pub fn run_ppr(&self, prep: &PreparedRun, baseline: &ModelParams, k: usize) -> Result<RunRecord> {
        let started = Instant::now();
        let k = if k > prep.pool.len() {
            log::warn!("k={k} exceeds pool size {}; clamping", prep.pool.len());
            prep.pool.len()
        } else {
            k
        };
        let miner = self.miner.as_ref().unwrap_or(baseline);
        let train_features = prep.train.with_vectors(model::extract_features(
            miner,
            prep.train.records().iter().map(|r| &r.vector),
        )?)?;
        let pool_features = prep
            .pool
            .with_vectors(model::extract_features(miner, prep.pool.vectors())?)?;
        let mined = pseudo::mine_nearest(&train_features, &pool_features, self.config.l2_normalize_mining)?;
        let selected = pseudo::select_pseudo_positives(&mined, k, seed::derive(prep.seed, "select"));
        let merged = pseudo::merge(&prep.train, &selected, &prep.pool)?;
        let (_, log, report) = self.train_and_evaluate(prep, &merged)?;
        let mut rec = self.record(prep, Method::Ppr, Some(k), merged.len(), &log, report, started);
        rec.pseudo_added = Some(selected.len());
        Ok(rec)
    }

    /// DisturbLabel (`star == false`) or DisturbLabel* with a matched count.
    pub fn run_disturb(&self, prep: &PreparedRun, count: usize, star: bool) -> Result<RunRecord> {
        let started = Instant::now();
        let disturb_seed = seed::derive(prep.seed, "disturb");
        let (method, data) = if star {
            let count = count.min(prep.pool.len());
            (
                Method::DisturbStar,
                pseudo::disturb_star(&prep.train, &prep.pool, count, disturb_seed)?,
            )
        } else {
            let count = count.min(prep.train.len());
            (
                Method::Disturb,
                pseudo::disturb_labels(&prep.train, count, disturb_seed)?,
            )
        };
        let (_, log, report) = self.train_and_evaluate(prep, &data)?;
        Ok(self.record(prep, method, Some(count), data.len(), &log, report, started))
    }

    /// Every configured method for one repeat.
    pub fn run_repeat(&self, repeat: usize) -> Result<Vec<RunRecord>> {
        let prep = self.prepare(repeat)?;
        let methods = &self.config.methods;
        let mut out = Vec::new();
        let (base_rec, base_model) = self.run_baseline(&prep)?;
        if methods.contains(&Method::Baseline) {
            out.push(base_rec);
        }
        for &k in &self.config.k_values {
            if methods.contains(&Method::Ppr) {
                out.push(self.run_ppr(&prep, &base_model, k)?);
            }
            if methods.contains(&Method::Disturb) {
                out.push(self.run_disturb(&prep, k, false)?);
            }
            if methods.contains(&Method::DisturbStar) {
                out.push(self.run_disturb(&prep, k, true)?);
            }
        }
        Ok(out)
    }

    /// All repeats, run in parallel; records come back in repeat order.
    pub fn run_all(&self) -> Result<Vec<RunRecord>> {
        let per_repeat: Vec<Vec<RunRecord>> = (0..self.config.repeats)
            .into_par_iter()
            .map(|r| self.run_repeat(r))
            .collect::<Result<_>>()?;
        Ok(per_repeat.into_iter().flatten().collect())
    }
}

/// Extracts query and gallery features with `model` and evaluates them.
pub fn evaluate_with(
    model: &ModelParams,
    query: &LabeledDataset,
    gallery: &LabeledDataset,
    protocol: &ProtocolConfig,
) -> Result<EvalReport> {
    let q = query.with_vectors(model::extract_features(
        model,
        query.records().iter().map(|r| &r.vector),
    )?)?;
    let g = gallery.with_vectors(model::extract_features(
        model,
        gallery.records().iter().map(|r| &r.vector),
    )?)?;
    eval::evaluate(&q, &g, protocol)
}

fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Writes `runs/<id>/record.json` for every record.
pub fn write_records(out_dir: &Path, records: &[RunRecord]) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::with_capacity(records.len());
    for rec in records {
        let dir = out_dir.join("runs").join(rec.run_id());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join("record.json");
        let mut text = serde_json::to_string_pretty(rec)?;
        text.push('\n');
        write_atomic(&path, text.as_bytes())?;
        paths.push(path);
    }
    Ok(paths)
}

/// Reads every `runs/*/record.json` below `out_dir`, sorted by path.
pub fn read_records(out_dir: &Path) -> Result<Vec<RunRecord>> {
    let runs = out_dir.join("runs");
    let mut paths = Vec::new();
    for entry in fs::read_dir(&runs).map_err(|e| Error::io(&runs, e))? {
        let entry = entry.map_err(|e| Error::io(&runs, e))?;
        let p = entry.path().join("record.json");
        if p.is_file() {
            paths.push(p);
        }
    }
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Ok(serde_json::from_str(&text)?)
        })
        .collect()
}

/// Mean and standard deviation of rank-1 and mAP for one method and K.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: Method,
    pub k: Option<usize>,
    pub runs: usize,
    pub rank1_mean: f64,
    pub rank1_std: f64,
    pub map_mean: f64,
    pub map_std: f64,
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Rows ordered by method, then K; within a row, values in record order.
pub fn compare(records: &[RunRecord]) -> Vec<ComparisonRow> {
    let mut groups: BTreeMap<(Method, Option<usize>), Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.method, r.k)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((method, k), recs)| {
            let r1: Vec<f64> = recs.iter().map(|r| r.report.rank1()).collect();
            let map: Vec<f64> = recs.iter().map(|r| r.report.map).collect();
            let (rank1_mean, rank1_std) = mean_std(&r1);
            let (map_mean, map_std) = mean_std(&map);
            ComparisonRow {
                method,
                k,
                runs: recs.len(),
                rank1_mean,
                rank1_std,
                map_mean,
                map_std,
            }
        })
        .collect()
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io("<csv>", e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn parse_comparison_csv(text: &str) -> Result<Vec<ComparisonRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize().map(|row| Ok(row?)).collect()
}

/// Writes `compare.csv` and `compare.json` into `out_dir`.
pub fn write_comparison(out_dir: &Path, rows: &[ComparisonRow]) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_atomic(&out_dir.join("compare.csv"), comparison_csv(rows)?.as_bytes())?;
    let mut json = serde_json::to_string_pretty(rows)?;
    json.push('\n');
    write_atomic(&out_dir.join("compare.json"), json.as_bytes())
}
