//! Seeded synthetic identity benchmark.
//!
//! Identity centers are Gaussian; every (identity, camera) pair gets one
//! additive offset, and samples add isotropic noise on top. The unlabeled
//! pool mixes look-alikes with samples of fresh, unrelated identities. A
//! look-alike is a distinct person whose center sits `lookalike_std` away
//! from a training identity's center; it is filmed through that identity's
//! camera offsets, so it resembles the identity without being it.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingRecord, FeatureVector, LabeledDataset, PoolRecord, UnlabeledPool};
use crate::error::{Error, Result};
use crate::seed;

fn one() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

fn two() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_identities: usize,
    /// Training samples per identity, spread round-robin over cameras.
    pub samples_per_identity: usize,
    /// Held-out query samples per identity, cameras assigned round-robin.
    #[serde(default = "two")]
    pub queries_per_identity: usize,
    /// Held-out gallery samples per identity and camera.
    #[serde(default = "two")]
    pub gallery_per_camera: usize,
    pub dim: usize,
    /// Spread of identity centers.
    #[serde(default = "one")]
    pub center_std: f64,
    pub cluster_std: f64,
    pub camera_count: usize,
    pub camera_shift_std: f64,
    pub pool_size: usize,
    /// Fraction of the pool generated as look-alikes of training identities.
    pub pool_overlap: f64,
    /// Displacement of a look-alike person from the identity it resembles.
    pub lookalike_std: f64,
    /// Distinct look-alike persons generated per training identity.
    #[serde(default = "one_usize")]
    pub lookalikes_per_identity: usize,
    pub seed: u64,
}

impl SynthConfig {
    /// The desk-scale benchmark used by the trend experiments: 50 identities,
    /// 6 training samples each, 2 cameras, and a 2000-item pool of which 70%
    /// are look-alikes.
    pub fn standard(seed: u64) -> Self {
        Self {
            num_identities: 50,
            samples_per_identity: 6,
            queries_per_identity: 2,
            gallery_per_camera: 2,
            dim: 32,
            center_std: 1.0,
            cluster_std: 0.8,
            camera_count: 2,
            camera_shift_std: 0.6,
            pool_size: 2000,
            pool_overlap: 0.7,
            lookalike_std: 0.6,
            lookalikes_per_identity: 4,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.camera_count < 2 {
            return Err(Error::config(
                "camera_count must be at least 2 for cross-camera evaluation",
            ));
        }
        let counts = [
            ("num_identities", self.num_identities),
            ("samples_per_identity", self.samples_per_identity),
            ("queries_per_identity", self.queries_per_identity),
            ("gallery_per_camera", self.gallery_per_camera),
            ("dim", self.dim),
            ("pool_size", self.pool_size),
            ("lookalikes_per_identity", self.lookalikes_per_identity),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be at least 1")));
        }
        let stds = [
            ("center_std", self.center_std),
            ("cluster_std", self.cluster_std),
            ("camera_shift_std", self.camera_shift_std),
            ("lookalike_std", self.lookalike_std),
        ];
        if let Some((name, _)) = stds.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::config(format!("{name} must be finite and >= 0")));
        }
        if !(0.0..=1.0).contains(&self.pool_overlap) {
            return Err(Error::config("pool_overlap must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Number of look-alike pool items.
    pub fn overlap_count(&self) -> usize {
        (self.pool_overlap * self.pool_size as f64).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub train: LabeledDataset,
    pub query: LabeledDataset,
    pub gallery: LabeledDataset,
    pub pool: UnlabeledPool,
}

struct Gaussian {
    unit: Normal<f64>,
}

impl Gaussian {
    fn new() -> Self {
        Self {
            unit: Normal::new(0.0, 1.0).expect("unit normal"),
        }
    }

    /// `base + std * z` component-wise; exact copy of `base` when `std == 0`.
    fn around(&self, rng: &mut impl Rng, base: &[f64], std: f64) -> Vec<f64> {
        base.iter()
            .map(|&b| {
                let z: f64 = self.unit.sample(rng);
                if std == 0.0 {
                    b
                } else {
                    b + std * z
                }
            })
            .collect()
    }
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Pool records carry no identity information; `source` is left empty.
pub fn generate(config: &SynthConfig) -> Result<SynthData> {
    config.validate()?;
    let g = Gaussian::new();
    let mut rng = seed::rng(config.seed);
    let zero = vec![0.0; config.dim];
    let ids = config.num_identities;
    let cams = config.camera_count;

    let centers: Vec<Vec<f64>> = (0..ids).map(|_| g.around(&mut rng, &zero, config.center_std)).collect();
    // appearance[i][c]: center of identity i seen from camera c.
    let appearance: Vec<Vec<Vec<f64>>> = centers
        .iter()
        .map(|c| {
            (0..cams)
                .map(|_| add(c, &g.around(&mut rng, &zero, config.camera_shift_std)))
                .collect()
        })
        .collect();

    let sample = |rng: &mut rand_chacha::ChaCha8Rng, id: usize, cam: usize| -> Result<EmbeddingRecord> {
        let v = g.around(rng, &appearance[id][cam], config.cluster_std);
        Ok(EmbeddingRecord::new(FeatureVector::new(v)?, id, cam))
    };

    let mut train = Vec::with_capacity(ids * config.samples_per_identity);
    for id in 0..ids {
        for k in 0..config.samples_per_identity {
            train.push(sample(&mut rng, id, k % cams)?);
        }
    }
    let mut query = Vec::with_capacity(ids * config.queries_per_identity);
    for id in 0..ids {
        for k in 0..config.queries_per_identity {
            query.push(sample(&mut rng, id, k % cams)?);
        }
    }
    let mut gallery = Vec::with_capacity(ids * cams * config.gallery_per_camera);
    for id in 0..ids {
        for cam in 0..cams {
            for _ in 0..config.gallery_per_camera {
                gallery.push(sample(&mut rng, id, cam)?);
            }
        }
    }

    let lookalikes: Vec<Vec<f64>> = centers
        .iter()
        .flat_map(|c| std::iter::repeat_n(c, config.lookalikes_per_identity))
        .map(|c| g.around(&mut rng, c, config.lookalike_std))
        .collect();
    let near = config.overlap_count();
    let mut pool = Vec::with_capacity(config.pool_size);
    for _ in 0..near {
        let person = rng.random_range(0..lookalikes.len());
        let id = person / config.lookalikes_per_identity;
        let cam = rng.random_range(0..cams);
        let offset: Vec<f64> = appearance[id][cam]
            .iter()
            .zip(&centers[id])
            .map(|(a, c)| a - c)
            .collect();
        let seen = add(&lookalikes[person], &offset);
        pool.push(g.around(&mut rng, &seen, config.cluster_std));
    }
    for _ in near..config.pool_size {
        let center = g.around(&mut rng, &zero, config.center_std);
        let seen = g.around(&mut rng, &center, config.camera_shift_std);
        pool.push(g.around(&mut rng, &seen, config.cluster_std));
    }
    pool.shuffle(&mut rng);
    let pool = pool
        .into_iter()
        .map(|v| {
            Ok(PoolRecord {
                vector: FeatureVector::new(v)?,
                source: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(SynthData {
        train: LabeledDataset::new(train)?,
        query: LabeledDataset::new(query)?,
        gallery: LabeledDataset::new(gallery)?,
        pool: UnlabeledPool::new(pool)?,
    })
}
