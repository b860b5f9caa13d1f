//! Turns clustering output into the final object sample.
//!
//! Each cluster receives the quota `n_i = max(⌊s·size_i/N + 0.5⌋, 1)` —
//! proportional representation with a floor of one so even the smallest
//! cluster contributes — computed on exact integers. Because the floor and
//! the rounding can push the quota total off the requested size, a
//! deterministic rebalancing pass then nudges quotas toward their exact
//! proportional shares until the total matches. Within each cluster the
//! objects with the highest membership posterior are selected.

use std::fmt;

use serde::Serialize;

use crate::gmm::{em_fit, select_k, BicEntry, FitError, FitReport, ResponsibilityMatrix};
use crate::numfmt::format_real;
use crate::table::{
    filter_measures, normalize, CharacterisedObjectSet, FilterReport, NormalizationReport,
    TableError,
};

/// Errors raised by allocation, selection and the end-to-end pipeline.
#[derive(Debug)]
pub enum SampleError {
    /// The requested sample size cannot honor one representative per cluster
    /// or exceeds the population.
    InfeasibleSample {
        sample_size: usize,
        clusters: usize,
        objects: usize,
    },
    /// A quota exceeded its cluster's population (guarded upstream).
    QuotaExceedsCluster {
        cluster: usize,
        quota: usize,
        size: usize,
    },
    /// Inconsistent arguments (named in the message).
    InvalidArguments(String),
    Table(TableError),
    Fit(FitError),
}

impl fmt::Display for SampleError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SampleError::InfeasibleSample {
                sample_size,
                clusters,
                objects,
            } => write!(
                f,
                "sample size {sample_size} is infeasible: must lie in [{clusters}, {objects}] \
                 (one object per cluster, at most the population)"
            ),
            SampleError::QuotaExceedsCluster {
                cluster,
                quota,
                size,
            } => write!(
                f,
                "quota {quota} exceeds the {size} objects of cluster {cluster}"
            ),
            SampleError::InvalidArguments(msg) => write!(f, "{msg}"),
            SampleError::Table(e) => write!(f, "{e}"),
            SampleError::Fit(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for SampleError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            SampleError::Table(e) => Some(e),
            SampleError::Fit(e) => Some(e),
            _ => None,
        }
    }
}

impl From<TableError> for SampleError {
    fn from(e: TableError) -> Self {
        SampleError::Table(e)
    }
}

impl From<FitError> for SampleError {
    fn from(e: FitError) -> Self {
        SampleError::Fit(e)
    }
}

/// Per-cluster quotas: the raw formula output and the rebalanced totals.
///
/// Rows cover the non-empty clusters in ascending cluster index (`clusters`
/// names them); `Σ final_quotas == sample_expected_size`.
#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    pub clusters: Vec<usize>,
    pub cluster_sizes: Vec<usize>,
    pub raw_quotas: Vec<usize>,
    pub final_quotas: Vec<usize>,
    pub sample_expected_size: usize,
    pub total_objects: usize,
}

/// One selected object.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleEntry {
    pub object_id: String,
    pub cluster: usize,
    /// Posterior membership in the assigned cluster.
    pub responsibility: f64,
    /// 1-based rank by descending responsibility within the cluster.
    pub rank_within_cluster: usize,
}

/// The selected sample plus the allocation that produced it. Entries are
/// ordered by cluster, then rank.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleResult {
    pub entries: Vec<SampleEntry>,
    pub allocation: Allocation,
}

impl SampleResult {
    /// CSV serialization: `object_id,cluster,responsibility,rank`, reals with
    /// 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer
            .write_record(["object_id", "cluster", "responsibility", "rank"])
            .expect("in-memory write");
        for entry in &self.entries {
            writer
                .write_record([
                    entry.object_id.as_str(),
                    &entry.cluster.to_string(),
                    &format_real(entry.responsibility),
                    &entry.rank_within_cluster.to_string(),
                ])
                .expect("in-memory write");
        }
        String::from_utf8(writer.into_inner().expect("in-memory flush")).expect("UTF-8")
    }
}

/// Assigns every object to its maximum-posterior cluster; ties break toward
/// the smaller cluster index.
pub fn hard_assign(resp: &ResponsibilityMatrix) -> Vec<usize> {
    (0..resp.n_objects())
        .map(|i| {
            let row = resp.row(i);
            let mut best = 0;
            for (c, &r) in row.iter().enumerate().skip(1) {
                if r > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Raw per-cluster quotas `max(⌊s·size_i/total + 0.5⌋, 1)`.
///
/// The rounding term is evaluated on exact integers
/// (`⌊s·c/T + 1/2⌋ = ⌊(2sc + T) / 2T⌋`), so half-integer shares round the
/// same way on every platform. Feasibility is checked later, in
/// [`rebalance`].
pub fn allocate(sample_expected_size: usize, cluster_sizes: &[usize]) -> Vec<usize> {
    let total: u128 = cluster_sizes.iter().map(|&c| c as u128).sum();
    cluster_sizes
        .iter()
        .map(|&c| {
            let rounded = (2 * sample_expected_size as u128 * c as u128 + total) / (2 * total);
            (rounded as usize).max(1)
        })
        .collect()
}

/// Exact comparison key for over/under-representation: `quota·T − s·size`
/// is `T` times `quota − s·size/T`, the signed distance to the proportional
/// share.
fn representation_excess(quota: usize, size: usize, sample: usize, total: usize) -> i128 {
    quota as i128 * total as i128 - sample as i128 * size as i128
}

/// Adjusts raw quotas until they sum exactly to the requested size.
///
/// Quotas are first clamped to their cluster sizes. While the total is too
/// high, the quota farthest above its proportional share is decremented
/// (ties toward the larger cluster index), never below 1; while too low, the
/// quota farthest below its share with unselected objects remaining is
/// incremented (ties toward the smaller index).
pub fn rebalance(
    raw_quotas: &[usize],
    cluster_sizes: &[usize],
    sample_expected_size: usize,
) -> Result<Vec<usize>, SampleError> {
    if raw_quotas.len() != cluster_sizes.len() {
        return Err(SampleError::InvalidArguments(format!(
            "{} quotas for {} clusters",
            raw_quotas.len(),
            cluster_sizes.len()
        )));
    }
    if cluster_sizes.iter().any(|&c| c == 0) {
        return Err(SampleError::InvalidArguments(
            "cluster sizes must be at least 1".into(),
        ));
    }
    let k = cluster_sizes.len();
    let total: usize = cluster_sizes.iter().sum();
    if sample_expected_size < k || sample_expected_size > total {
        return Err(SampleError::InfeasibleSample {
            sample_size: sample_expected_size,
            clusters: k,
            objects: total,
        });
    }

    let mut quotas: Vec<usize> = raw_quotas
        .iter()
        .zip(cluster_sizes)
        .map(|(&q, &c)| q.min(c))
        .collect();

    loop {
        let sum: usize = quotas.iter().sum();
        if sum == sample_expected_size {
            break;
        }
        if sum > sample_expected_size {
            // max_by returns the last of equal elements: ties fall to the
            // larger cluster index, as required.
            let victim = (0..k)
                .filter(|&i| quotas[i] > 1)
                .max_by_key(|&i| {
                    representation_excess(quotas[i], cluster_sizes[i], sample_expected_size, total)
                })
                .expect("sum > K implies some quota exceeds 1");
            quotas[victim] -= 1;
        } else {
            // min_by_key returns the first of equal elements: ties fall to
            // the smaller cluster index.
            let beneficiary = (0..k)
                .filter(|&i| quotas[i] < cluster_sizes[i])
                .min_by_key(|&i| {
                    representation_excess(quotas[i], cluster_sizes[i], sample_expected_size, total)
                })
                .expect("sum < size <= N implies some cluster has spare objects");
            quotas[beneficiary] += 1;
        }
    }
    Ok(quotas)
}

/// Picks the top-`quota` objects of every cluster by posterior, ties broken
/// by ascending object id.
pub fn select_representatives(
    resp: &ResponsibilityMatrix,
    assignment: &[usize],
    allocation: &Allocation,
    object_ids: &[String],
) -> Result<SampleResult, SampleError> {
    if assignment.len() != resp.n_objects() || object_ids.len() != resp.n_objects() {
        return Err(SampleError::InvalidArguments(
            "assignment, responsibilities and ids must cover the same objects".into(),
        ));
    }

    let mut entries = Vec::with_capacity(allocation.sample_expected_size);
    for (slot, &cluster) in allocation.clusters.iter().enumerate() {
        let quota = allocation.final_quotas[slot];
        let mut members: Vec<usize> = (0..assignment.len())
            .filter(|&i| assignment[i] == cluster)
            .collect();
        if quota > members.len() {
            return Err(SampleError::QuotaExceedsCluster {
                cluster,
                quota,
                size: members.len(),
            });
        }
        members.sort_by(|&a, &b| {
            resp.value(b, cluster)
                .partial_cmp(&resp.value(a, cluster))
                .expect("responsibilities are finite")
                .then_with(|| object_ids[a].cmp(&object_ids[b]))
        });
        for (rank, &i) in members.iter().take(quota).enumerate() {
            entries.push(SampleEntry {
                object_id: object_ids[i].clone(),
                cluster,
                responsibility: resp.value(i, cluster),
                rank_within_cluster: rank + 1,
            });
        }
    }
    Ok(SampleResult {
        entries,
        allocation: allocation.clone(),
    })
}

/// log10 of the binomial coefficient C(n, s) via the log-gamma function.
pub fn count_sample_space(n: u64, s: u64) -> Result<f64, SampleError> {
    if s > n {
        return Err(SampleError::InvalidArguments(format!(
            "cannot draw {s} from {n} objects"
        )));
    }
    let ln_binomial = statrs::function::gamma::ln_gamma(n as f64 + 1.0)
        - statrs::function::gamma::ln_gamma(s as f64 + 1.0)
        - statrs::function::gamma::ln_gamma((n - s) as f64 + 1.0);
    Ok(ln_binomial / std::f64::consts::LN_10)
}

/// How many mixture components the pipeline should fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KChoice {
    Fixed(usize),
    /// BIC selection over `[k_min, min(k_max, N)]`.
    Auto { k_min: usize, k_max: usize },
}

/// Knobs of [`sample_pipeline`]. Defaults: normalize on, redundancy filter
/// off, automatic k in [1, 8], seed 0, 200 iterations at tolerance 1e-6,
/// 5 restarts.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOptions {
    pub normalize: bool,
    pub filter_threshold: Option<f64>,
    pub k: KChoice,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
    pub restarts: usize,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            normalize: true,
            filter_threshold: None,
            k: KChoice::Auto { k_min: 1, k_max: 8 },
            seed: 0,
            max_iter: 200,
            tol: 1e-6,
            restarts: 5,
        }
    }
}

/// Everything a pipeline run produces.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub sample: SampleResult,
    pub fit: FitReport,
    pub k: usize,
    pub model: crate::gmm::GaussianMixtureModel,
    pub normalization: Option<NormalizationReport>,
    pub filter: Option<FilterReport>,
    /// Present when k was selected automatically.
    pub bic_table: Option<Vec<BicEntry>>,
}

/// End-to-end sampling: normalize → filter → cluster → allocate →
/// rebalance → select. Deterministic given the inputs and the seed.
pub fn sample_pipeline(
    set: &CharacterisedObjectSet,
    sample_expected_size: usize,
    options: &PipelineOptions,
) -> Result<PipelineOutcome, SampleError> {
    let mut working = set.clone();
    let mut normalization = None;
    if options.normalize {
        let (normed, report) = normalize(&working);
        working = normed;
        normalization = Some(report);
    }
    let mut filter = None;
    if let Some(threshold) = options.filter_threshold {
        let (reduced, report) = filter_measures(&working, threshold)?;
        working = reduced;
        filter = Some(report);
    }

    let n = working.n_objects();
    let (model, resp, fit, k, bic_table) = match options.k {
        KChoice::Fixed(k) => {
            let (model, resp, fit) = em_fit(&working, k, options.seed, options.max_iter, options.tol)?;
            (model, resp, fit, k, None)
        }
        KChoice::Auto { k_min, k_max } => {
            let selection = select_k(
                &working,
                k_min,
                k_max.min(n),
                options.seed,
                options.restarts,
                options.max_iter,
                options.tol,
            )?;
            (
                selection.model,
                selection.responsibilities,
                selection.report,
                selection.best_k,
                Some(selection.bic_table),
            )
        }
    };

    let assignment = hard_assign(&resp);
    let mut counts = vec![0usize; k];
    for &c in &assignment {
        counts[c] += 1;
    }
    let clusters: Vec<usize> = (0..k).filter(|&c| counts[c] > 0).collect();
    let cluster_sizes: Vec<usize> = clusters.iter().map(|&c| counts[c]).collect();
    if sample_expected_size < clusters.len() || sample_expected_size > n {
        return Err(SampleError::InfeasibleSample {
            sample_size: sample_expected_size,
            clusters: clusters.len(),
            objects: n,
        });
    }

    let raw_quotas = allocate(sample_expected_size, &cluster_sizes);
    let final_quotas = rebalance(&raw_quotas, &cluster_sizes, sample_expected_size)?;
    let allocation = Allocation {
        clusters,
        cluster_sizes,
        raw_quotas,
        final_quotas,
        sample_expected_size,
        total_objects: n,
    };
    let sample = select_representatives(&resp, &assignment, &allocation, working.object_ids())?;

    Ok(PipelineOutcome {
        sample,
        fit,
        k,
        model,
        normalization,
        filter,
        bic_table,
    })
}

/// The run summary emitted next to every sample: seed, chosen k, quotas,
/// model-selection table, fit diagnostics and the measures dropped by the
/// redundancy filter.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub seed: u64,
    pub k: usize,
    pub quotas_raw: Vec<usize>,
    pub quotas_final: Vec<usize>,
    pub bic_table: Option<Vec<BicEntry>>,
    pub loglik: f64,
    pub iterations: usize,
    pub dropped_measures: Vec<String>,
}

impl RunReport {
    pub fn from_outcome(outcome: &PipelineOutcome) -> Self {
        Self {
            seed: outcome.fit.seed,
            k: outcome.k,
            quotas_raw: outcome.sample.allocation.raw_quotas.clone(),
            quotas_final: outcome.sample.allocation.final_quotas.clone(),
            bic_table: outcome.bic_table.clone(),
            loglik: outcome.fit.final_log_likelihood,
            iterations: outcome.fit.iterations,
            dropped_measures: outcome
                .filter
                .as_ref()
                .map(|f| f.dropped.iter().map(|d| d.name.clone()).collect())
                .unwrap_or_default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resp(rows: &[&[f64]]) -> ResponsibilityMatrix {
        ResponsibilityMatrix::from_rows(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    #[test]
    fn hard_assign_takes_argmax_with_low_index_ties() {
        let r = resp(&[&[0.2, 0.8], &[0.5, 0.5], &[1.0, 0.0]]);
        assert_eq!(hard_assign(&r), [1, 0, 0]);
        let single = resp(&[&[1.0], &[1.0]]);
        assert_eq!(hard_assign(&single), [0, 0]);
    }

    #[test]
    fn allocate_reproduces_the_proportional_formula() {
        // 280 objects in clusters of 140/84/56, sample of 50: exact shares
        // 25/15/10 (evaluated by hand from s*c/total + 0.5 before flooring).
        assert_eq!(allocate(50, &[140, 84, 56]), [25, 15, 10]);
        // Floor at work: 3*10/100 = 0.3 rounds to 0, floored to 1, while
        // 97*10/100 = 9.7 rounds to 10 — the total overshoots to 11.
        assert_eq!(allocate(10, &[3, 97]), [1, 10]);
        // One cluster takes the whole sample.
        assert_eq!(allocate(7, &[123]), [7]);
    }

    #[test]
    fn allocate_rounds_half_shares_exactly() {
        // Shares are exactly 24.5 each: ⌊24.5 + 0.5⌋ = 25 on both.
        assert_eq!(allocate(49, &[100, 100]), [25, 25]);
    }

    #[test]
    fn rebalance_trims_the_most_over_represented_cluster() {
        assert_eq!(rebalance(&[1, 10], &[3, 97], 10).unwrap(), [1, 9]);
    }

    #[test]
    fn rebalance_keeps_exact_totals_untouched() {
        assert_eq!(
            rebalance(&[25, 15, 10], &[140, 84, 56], 50).unwrap(),
            [25, 15, 10]
        );
    }

    #[test]
    fn rebalance_rejects_infeasible_sizes() {
        assert!(matches!(
            rebalance(&[1, 1, 1], &[5, 5, 5], 2),
            Err(SampleError::InfeasibleSample { .. })
        ));
        assert!(matches!(
            rebalance(&[1, 1], &[2, 2], 5),
            Err(SampleError::InfeasibleSample { .. })
        ));
    }

    #[test]
    fn rebalance_tops_up_under_represented_clusters() {
        // Raw quotas undershoot: shares 4.9/4.9/0.2 → raw [5,5,1] sums to 11
        // for target 12; the largest under-representation gains.
        let quotas = rebalance(&[5, 5, 1], &[49, 49, 2], 12).unwrap();
        assert_eq!(quotas.iter().sum::<usize>(), 12);
        assert!(quotas[2] >= 1);
    }

    #[test]
    fn rebalance_breaks_decrement_ties_toward_larger_index() {
        // Equal shares and equal quotas: the later cluster loses first.
        assert_eq!(rebalance(&[25, 25], &[100, 100], 49).unwrap(), [25, 24]);
    }

    fn allocation_for(
        clusters: Vec<usize>,
        sizes: Vec<usize>,
        finals: Vec<usize>,
        target: usize,
        total: usize,
    ) -> Allocation {
        Allocation {
            raw_quotas: finals.clone(),
            final_quotas: finals,
            cluster_sizes: sizes,
            clusters,
            sample_expected_size: target,
            total_objects: total,
        }
    }

    #[test]
    fn selection_takes_top_posteriors() {
        let r = resp(&[&[0.99, 0.01], &[0.95, 0.05], &[0.60, 0.40]]);
        let ids = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let alloc = allocation_for(vec![0], vec![3], vec![2], 2, 3);
        let result = select_representatives(&r, &[0, 0, 0], &alloc, &ids).unwrap();
        assert_eq!(result.entries.len(), 2);
        assert_eq!(result.entries[0].object_id, "a");
        assert_eq!(result.entries[0].rank_within_cluster, 1);
        assert_eq!(result.entries[1].object_id, "b");
        assert_eq!(result.entries[1].rank_within_cluster, 2);
    }

    #[test]
    fn selection_ties_break_by_ascending_id() {
        let r = resp(&[&[0.9, 0.1], &[0.9, 0.1]]);
        let ids = vec!["zeta".to_string(), "alpha".to_string()];
        let alloc = allocation_for(vec![0], vec![2], vec![1], 1, 2);
        let result = select_representatives(&r, &[0, 0], &alloc, &ids).unwrap();
        assert_eq!(result.entries[0].object_id, "alpha");
    }

    #[test]
    fn selection_matches_exhaustive_enumeration() {
        // Two clusters of three objects, quota 2 + 1; enumerate every
        // quota-respecting subset and maximize summed responsibility.
        let rows: Vec<Vec<f64>> = vec![
            vec![0.81, 0.19],
            vec![0.74, 0.26],
            vec![0.93, 0.07],
            vec![0.12, 0.88],
            vec![0.45, 0.55],
            vec![0.30, 0.70],
        ];
        let r = ResponsibilityMatrix::from_rows(rows.clone()).unwrap();
        let assignment = hard_assign(&r);
        assert_eq!(assignment, [0, 0, 0, 1, 1, 1]);
        let ids: Vec<String> = (0..6).map(|i| format!("o{i}")).collect();
        let alloc = allocation_for(vec![0, 1], vec![3, 3], vec![2, 1], 3, 6);
        let result = select_representatives(&r, &assignment, &alloc, &ids).unwrap();

        let mut best_total = f64::NEG_INFINITY;
        let mut best_ids = Vec::new();
        for i in 0..3 {
            for j in (i + 1)..3 {
                for l in 3..6 {
                    let total = rows[i][0] + rows[j][0] + rows[l][1];
                    if total > best_total {
                        best_total = total;
                        best_ids = vec![ids[i].clone(), ids[j].clone(), ids[l].clone()];
                    }
                }
            }
        }
        let selected: f64 = result.entries.iter().map(|e| e.responsibility).sum();
        assert!((selected - best_total).abs() < 1e-12);
        let mut got: Vec<String> = result.entries.iter().map(|e| e.object_id.clone()).collect();
        got.sort();
        best_ids.sort();
        assert_eq!(got, best_ids);
    }

    #[test]
    fn selection_guards_against_oversized_quotas() {
        let r = resp(&[&[1.0]]);
        let ids = vec!["a".to_string()];
        let alloc = allocation_for(vec![0], vec![1], vec![2], 2, 1);
        assert!(matches!(
            select_representatives(&r, &[0], &alloc, &ids),
            Err(SampleError::QuotaExceedsCluster { .. })
        ));
    }

    #[test]
    fn count_sample_space_handles_enumerable_cases() {
        assert_eq!(count_sample_space(17, 0).unwrap(), 0.0);
        assert!((count_sample_space(4, 2).unwrap() - 0.7781512503836436).abs() < 1e-12);
        assert!(matches!(
            count_sample_space(3, 4),
            Err(SampleError::InvalidArguments(_))
        ));
    }

    #[test]
    fn count_sample_space_matches_the_reported_magnitude() {
        let v = count_sample_space(280, 50).unwrap();
        let mantissa = 10f64.powf(v - 55.0);
        assert!((6.5..=7.5).contains(&mantissa), "mantissa {mantissa}");
    }
}
