//! Benchmark harness comparing cluster-representative sampling against
//! uniform random sampling on synthetic populations with rare object kinds.
//!
//! A population is a mixture of axis-aligned Gaussian blobs with known
//! labels. Both strategies draw samples of the same size over many seeded
//! runs and are scored by *cluster coverage*: the fraction of true clusters
//! with at least one selected member. Random sampling misses small clusters
//! at the hypergeometric rate; the quota floor makes the representative
//! sampler cover every recovered cluster.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::sampler::{sample_pipeline, PipelineOptions, SampleError};
use crate::seeds::derive_seed;
use crate::table::{CharacterisedObjectSet, TableError};

/// RNG stream tags for per-run sub-seeds.
const METHOD_STREAM: u64 = 0x6d65;
const RANDOM_STREAM: u64 = 0x726e;

/// Errors raised by the benchmark harness.
#[derive(Debug)]
pub enum EvalError {
    /// The population spec could not be parsed or failed validation; the
    /// message names the offending field.
    Spec(String),
    /// A selected id does not belong to the population.
    UnknownId(String),
    /// Requested more objects than the population holds.
    SizeTooLarge { size: usize, objects: usize },
    /// Generated values violated table invariants (overflowing spec values).
    Population(TableError),
    /// The representative pipeline failed on a run.
    Sample(SampleError),
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::Spec(msg) => write!(f, "invalid population spec: {msg}"),
            EvalError::UnknownId(id) => write!(f, "unknown object id {id:?}"),
            EvalError::SizeTooLarge { size, objects } => {
                write!(f, "sample size {size} exceeds the population of {objects}")
            }
            EvalError::Population(e) => write!(f, "population generation failed: {e}"),
            EvalError::Sample(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for EvalError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            EvalError::Population(e) => Some(e),
            EvalError::Sample(e) => Some(e),
            _ => None,
        }
    }
}

impl From<SampleError> for EvalError {
    fn from(e: SampleError) -> Self {
        EvalError::Sample(e)
    }
}

/// One Gaussian blob of the synthetic population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    pub count: usize,
    pub mean: Vec<f64>,
    pub stddev: Vec<f64>,
}

/// A synthetic population: per-cluster counts, means and spreads, plus the
/// seed that fixes every generated value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticPopulationSpec {
    pub dimension: usize,
    pub seed: u64,
    pub clusters: Vec<ClusterSpec>,
}

impl SyntheticPopulationSpec {
    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        let spec: Self = serde_json::from_str(text).map_err(|e| EvalError::Spec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.dimension == 0 {
            return Err(EvalError::Spec("dimension must be at least 1".into()));
        }
        if self.clusters.is_empty() {
            return Err(EvalError::Spec("clusters must be non-empty".into()));
        }
        for (i, cluster) in self.clusters.iter().enumerate() {
            if cluster.count == 0 {
                return Err(EvalError::Spec(format!("clusters[{i}].count must be at least 1")));
            }
            if cluster.mean.len() != self.dimension {
                return Err(EvalError::Spec(format!(
                    "clusters[{i}].mean must have {} entries",
                    self.dimension
                )));
            }
            if cluster.stddev.len() != self.dimension {
                return Err(EvalError::Spec(format!(
                    "clusters[{i}].stddev must have {} entries",
                    self.dimension
                )));
            }
            if !cluster.mean.iter().all(|m| m.is_finite()) {
                return Err(EvalError::Spec(format!("clusters[{i}].mean must be finite")));
            }
            if !cluster.stddev.iter().all(|s| s.is_finite() && *s > 0.0) {
                return Err(EvalError::Spec(format!(
                    "clusters[{i}].stddev must be positive"
                )));
            }
        }
        Ok(())
    }

    pub fn total_objects(&self) -> usize {
        self.clusters.iter().map(|c| c.count).sum()
    }
}

/// Draws the population: `count_i` points from each blob, ids `c{i}_{j}`,
/// measures `m1..mD`. Deterministic given the spec.
pub fn generate_population(
    spec: &SyntheticPopulationSpec,
) -> Result<(CharacterisedObjectSet, Vec<usize>), EvalError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut ids = Vec::with_capacity(spec.total_objects());
    let mut labels = Vec::with_capacity(spec.total_objects());
    let mut rows = Vec::with_capacity(spec.total_objects());
    for (i, cluster) in spec.clusters.iter().enumerate() {
        for j in 0..cluster.count {
            ids.push(format!("c{i}_{j}"));
            labels.push(i);
            let row: Vec<f64> = cluster
                .mean
                .iter()
                .zip(&cluster.stddev)
                .map(|(&mean, &sd)| {
                    let z: f64 = rng.sample(StandardNormal);
                    mean + sd * z
                })
                .collect();
            rows.push(row);
        }
    }
    let names = (1..=spec.dimension).map(|d| format!("m{d}")).collect();
    let set = CharacterisedObjectSet::new(ids, names, rows).map_err(EvalError::Population)?;
    Ok((set, labels))
}

/// Fraction of true clusters with at least one selected member.
pub fn cluster_coverage(
    selected_ids: &BTreeSet<String>,
    object_ids: &[String],
    true_labels: &[usize],
) -> Result<f64, EvalError> {
    let label_of: HashMap<&str, usize> = object_ids
        .iter()
        .map(String::as_str)
        .zip(true_labels.iter().copied())
        .collect();
    let all_labels: HashSet<usize> = true_labels.iter().copied().collect();
    let mut hit = HashSet::new();
    for id in selected_ids {
        match label_of.get(id.as_str()) {
            Some(&label) => {
                hit.insert(label);
            }
            None => return Err(EvalError::UnknownId(id.clone())),
        }
    }
    Ok(hit.len() as f64 / all_labels.len() as f64)
}

/// Uniform sample without replacement: a seeded partial Fisher–Yates
/// shuffle keeps the draw deterministic given the seed.
pub fn uniform_random_sample(
    ids: &[String],
    size: usize,
    seed: u64,
) -> Result<BTreeSet<String>, EvalError> {
    let n = ids.len();
    if size > n {
        return Err(EvalError::SizeTooLarge { size, objects: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..n).collect();
    for i in 0..size {
        let j = rng.random_range(i..n);
        indices.swap(i, j);
    }
    Ok(indices[..size].iter().map(|&i| ids[i].clone()).collect())
}

/// Coverage statistics for one sampling strategy.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategySummary {
    pub strategy: String,
    pub runs: usize,
    pub mean_coverage: f64,
    pub full_coverage_fraction: f64,
}

/// Aggregated comparison of both strategies over seeded runs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub population: SyntheticPopulationSpec,
    pub sample_size: usize,
    pub runs: usize,
    pub strategies: Vec<StrategySummary>,
}

impl ComparisonReport {
    pub fn to_json(&self) -> String {
        crate::numfmt::to_json_string(self).expect("report serializes")
    }

    /// Aligned plain-text table of the per-strategy statistics.
    pub fn to_text_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<16} {:>6} {:>15} {:>15}\n",
            "strategy", "runs", "mean_coverage", "full_coverage"
        ));
        for s in &self.strategies {
            out.push_str(&format!(
                "{:<16} {:>6} {:>15.4} {:>15.4}\n",
                s.strategy, s.runs, s.mean_coverage, s.full_coverage_fraction
            ));
        }
        out
    }

    pub fn strategy(&self, name: &str) -> Option<&StrategySummary> {
        self.strategies.iter().find(|s| s.strategy == name)
    }
}

/// Runs both strategies `runs` times with per-run sub-seeds and scores them
/// against the true labels. Deterministic given the spec, sizes and the
/// master seed carried in `options.seed`.
pub fn run_comparison(
    spec: &SyntheticPopulationSpec,
    sample_size: usize,
    runs: usize,
    options: &PipelineOptions,
) -> Result<ComparisonReport, EvalError> {
    if runs == 0 {
        return Err(EvalError::Spec("runs must be at least 1".into()));
    }
    let (set, labels) = generate_population(spec)?;
    let master = options.seed;

    let mut method_cov_sum = 0.0;
    let mut method_full = 0usize;
    let mut random_cov_sum = 0.0;
    let mut random_full = 0usize;

    for run in 0..runs {
        let mut run_options = options.clone();
        run_options.seed = derive_seed(master, METHOD_STREAM, run as u64);
        let outcome = sample_pipeline(&set, sample_size, &run_options)?;
        let method_ids: BTreeSet<String> = outcome
            .sample
            .entries
            .iter()
            .map(|e| e.object_id.clone())
            .collect();
        let method_cov = cluster_coverage(&method_ids, set.object_ids(), &labels)?;
        method_cov_sum += method_cov;
        if method_cov == 1.0 {
            method_full += 1;
        }

        let random_ids = uniform_random_sample(
            set.object_ids(),
            sample_size,
            derive_seed(master, RANDOM_STREAM, run as u64),
        )?;
        let random_cov = cluster_coverage(&random_ids, set.object_ids(), &labels)?;
        random_cov_sum += random_cov;
        if random_cov == 1.0 {
            random_full += 1;
        }
    }

    Ok(ComparisonReport {
        population: spec.clone(),
        sample_size,
        runs,
        strategies: vec![
            StrategySummary {
                strategy: "representative".into(),
                runs,
                mean_coverage: method_cov_sum / runs as f64,
                full_coverage_fraction: method_full as f64 / runs as f64,
            },
            StrategySummary {
                strategy: "uniform_random".into(),
                runs,
                mean_coverage: random_cov_sum / runs as f64,
                full_coverage_fraction: random_full as f64 / runs as f64,
            },
        ],
    })
}
