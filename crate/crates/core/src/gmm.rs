//! Diagonal-covariance Gaussian mixtures fitted with expectation-maximization.
//!
//! The fit alternates a log-space E-step (per-object membership posteriors)
//! with a closed-form M-step (weights, means, floored per-dimension
//! variances) until the log-likelihood improvement drops below the tolerance.
//! Everything is deterministic given `(set, k, seed)`:
//!
//! * means are seeded k-means++ style from data points with a seeded ChaCha
//!   stream;
//! * every reduction over objects runs in a canonical value-sorted order, so
//!   permuting input rows permutes the responsibilities and leaves the fitted
//!   model bit-identical;
//! * components are sorted by mean coordinates after fitting.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numfmt::to_json_string;
use crate::seeds::derive_seed;
use crate::table::CharacterisedObjectSet;

/// Lower bound applied to every fitted per-dimension variance.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// A component whose responsibility mass falls below `EMPTY_FRACTION * N`
/// is re-seeded on the lowest-density point.
const EMPTY_FRACTION: f64 = 1e-10;

/// Errors raised by mixture fitting and model I/O.
#[derive(Debug)]
pub enum FitError {
    /// The object set had no rows.
    EmptySet,
    /// More components requested than objects available.
    KTooLarge { k: usize, n: usize },
    /// A query point's dimension does not match the model.
    DimensionMismatch { expected: usize, found: usize },
    /// A parameter violated its contract (named in the message).
    InvalidArgument(String),
    /// A model document could not be parsed or failed validation.
    Json(String),
}

impl fmt::Display for FitError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FitError::EmptySet => write!(f, "object set is empty"),
            FitError::KTooLarge { k, n } => {
                write!(f, "k = {k} exceeds the number of objects ({n})")
            }
            FitError::DimensionMismatch { expected, found } => {
                write!(f, "expected a {expected}-dimensional point, found {found}")
            }
            FitError::InvalidArgument(msg) => write!(f, "{msg}"),
            FitError::Json(msg) => write!(f, "invalid model document: {msg}"),
        }
    }
}

impl std::error::Error for FitError {}

/// A fitted mixture: `k` components with weights summing to 1, per-component
/// mean vectors and floored diagonal variances.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixtureModel {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<Vec<f64>>,
    variance_floor: f64,
}

impl GaussianMixtureModel {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn variances(&self) -> &[Vec<f64>] {
        &self.variances
    }

    pub fn variance_floor(&self) -> f64 {
        self.variance_floor
    }

    /// Log-density of `x` under the mixture, `ln Σ_k π_k Π_d N(x_d; μ, σ²)`,
    /// evaluated with log-sum-exp stabilization.
    pub fn log_density(&self, x: &[f64]) -> Result<f64, FitError> {
        if x.len() != self.dim() {
            return Err(FitError::DimensionMismatch {
                expected: self.dim(),
                found: x.len(),
            });
        }
        let mut terms = Vec::with_capacity(self.k());
        for k in 0..self.k() {
            terms.push(self.weights[k].ln() + log_diag_normal(&self.means[k], &self.variances[k], x));
        }
        Ok(log_sum_exp(&terms))
    }

    /// Serializes the model (plus the seed that produced it) as JSON with
    /// 17-significant-digit reals.
    pub fn to_json(&self, seed: u64) -> String {
        let doc = ModelDocument {
            k: self.k(),
            weights: self.weights.clone(),
            means: self.means.clone(),
            variances: self.variances.clone(),
            variance_floor: self.variance_floor,
            seed,
        };
        to_json_string(&doc).expect("model serializes")
    }

    /// Parses a model document produced by [`Self::to_json`], returning the
    /// model and the recorded seed. Shape and invariant violations are
    /// reported as [`FitError::Json`].
    pub fn from_json(text: &str) -> Result<(Self, u64), FitError> {
        let doc: ModelDocument =
            serde_json::from_str(text).map_err(|e| FitError::Json(e.to_string()))?;
        if doc.k == 0 || doc.weights.len() != doc.k {
            return Err(FitError::Json(format!(
                "expected {} weights, found {}",
                doc.k,
                doc.weights.len()
            )));
        }
        if doc.means.len() != doc.k || doc.variances.len() != doc.k {
            return Err(FitError::Json("means/variances must have K rows".into()));
        }
        let dim = doc.means[0].len();
        if dim == 0 {
            return Err(FitError::Json("means must be non-empty vectors".into()));
        }
        for (mean, var) in doc.means.iter().zip(&doc.variances) {
            if mean.len() != dim || var.len() != dim {
                return Err(FitError::Json("ragged means/variances".into()));
            }
            if !mean.iter().all(|m| m.is_finite()) {
                return Err(FitError::Json("non-finite mean".into()));
            }
            if !var.iter().all(|v| v.is_finite() && *v >= doc.variance_floor) {
                return Err(FitError::Json("variance below the floor".into()));
            }
        }
        if !(doc.variance_floor.is_finite() && doc.variance_floor > 0.0) {
            return Err(FitError::Json("variance_floor must be positive".into()));
        }
        let total: f64 = doc.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 || doc.weights.iter().any(|w| !(*w > 0.0 && *w <= 1.0)) {
            return Err(FitError::Json("weights must lie in (0,1] and sum to 1".into()));
        }
        Ok((
            Self {
                weights: doc.weights,
                means: doc.means,
                variances: doc.variances,
                variance_floor: doc.variance_floor,
            },
            doc.seed,
        ))
    }
}

#[derive(Serialize, Deserialize)]
struct ModelDocument {
    #[serde(rename = "K")]
    k: usize,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<Vec<f64>>,
    variance_floor: f64,
    seed: u64,
}

/// N×K posterior membership probabilities; every row sums to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponsibilityMatrix {
    data: Vec<f64>,
    n: usize,
    k: usize,
}

impl ResponsibilityMatrix {
    /// Builds a matrix from explicit rows, checking ranges and row sums.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, FitError> {
        if rows.is_empty() {
            return Err(FitError::EmptySet);
        }
        let k = rows[0].len();
        if k == 0 {
            return Err(FitError::InvalidArgument(
                "responsibility rows must have at least one column".into(),
            ));
        }
        let mut data = Vec::with_capacity(rows.len() * k);
        for row in &rows {
            if row.len() != k {
                return Err(FitError::InvalidArgument(
                    "responsibility rows must share one length".into(),
                ));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || row.iter().any(|r| !(0.0..=1.0).contains(r)) {
                return Err(FitError::InvalidArgument(
                    "responsibility rows must lie in [0,1] and sum to 1".into(),
                ));
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            data,
            n: rows.len(),
            k,
        })
    }

    pub fn n_objects(&self) -> usize {
        self.n
    }

    pub fn n_components(&self) -> usize {
        self.k
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.k..(i + 1) * self.k]
    }

    pub fn value(&self, i: usize, k: usize) -> f64 {
        self.data[i * self.k + k]
    }

    fn zeros(n: usize, k: usize) -> Self {
        Self {
            data: vec![0.0; n * k],
            n,
            k,
        }
    }

    fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.k..(i + 1) * self.k]
    }

    fn permute_columns(&mut self, perm: &[usize]) {
        let mut scratch = vec![0.0; self.k];
        for i in 0..self.n {
            let row = self.row_mut(i);
            for (dst, &src) in perm.iter().enumerate() {
                scratch[dst] = row[src];
            }
            row.copy_from_slice(&scratch);
        }
    }
}

/// Convergence bookkeeping for one EM fit.
#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub iterations: usize,
    pub final_log_likelihood: f64,
    /// Log-likelihood after each iteration; non-decreasing.
    pub trace: Vec<f64>,
    pub converged: bool,
    pub seed: u64,
}

/// One row of the model-selection table produced by [`select_k`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BicEntry {
    pub k: usize,
    pub log_likelihood: f64,
    pub bic: f64,
}

/// Result of [`select_k`]: the BIC-minimizing fit over a range of k.
#[derive(Debug, Clone)]
pub struct ModelSelection {
    pub best_k: usize,
    pub model: GaussianMixtureModel,
    pub responsibilities: ResponsibilityMatrix,
    pub report: FitReport,
    pub bic_table: Vec<BicEntry>,
}

fn log_diag_normal(mean: &[f64], var: &[f64], x: &[f64]) -> f64 {
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    let mut acc = 0.0;
    for d in 0..x.len() {
        let diff = x[d] - mean[d];
        acc -= 0.5 * (ln_2pi + var[d].ln() + diff * diff / var[d]);
    }
    acc
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + terms.iter().map(|&t| (t - max).exp()).sum::<f64>().ln()
}

/// Indices of the objects sorted by their value vectors.
///
/// All reductions over objects run in this order, which depends only on the
/// multiset of rows: reordering the input moves responsibilities with their
/// objects but cannot change the fitted model.
fn canonical_order(set: &CharacterisedObjectSet) -> Vec<usize> {
    let mut order: Vec<usize> = (0..set.n_objects()).collect();
    order.sort_by(|&a, &b| {
        set.row(a)
            .iter()
            .zip(set.row(b))
            .map(|(x, y)| x.partial_cmp(y).expect("cells are finite"))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    order
}

fn column_stats(set: &CharacterisedObjectSet, order: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let n = set.n_objects() as f64;
    let d = set.n_measures();
    let mut means = vec![0.0; d];
    for &i in order {
        for (m, &x) in means.iter_mut().zip(set.row(i)) {
            *m += x;
        }
    }
    for m in means.iter_mut() {
        *m /= n;
    }
    let mut vars = vec![0.0; d];
    for &i in order {
        for (j, &x) in set.row(i).iter().enumerate() {
            let diff = x - means[j];
            vars[j] += diff * diff;
        }
    }
    for v in vars.iter_mut() {
        *v /= n;
    }
    (means, vars)
}

/// k-means++ seeding over the canonical order: the first center is a
/// uniformly drawn object, each next one is drawn with probability
/// proportional to the squared distance to its nearest chosen center.
fn seed_means(
    set: &CharacterisedObjectSet,
    order: &[usize],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<f64>> {
    let n = order.len();
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(set.row(order[rng.random_range(0..n)]).to_vec());

    let mut dist2 = vec![f64::INFINITY; n];
    while centers.len() < k {
        let newest = centers.last().expect("non-empty");
        let mut total = 0.0;
        for (pos, &i) in order.iter().enumerate() {
            let d2: f64 = set
                .row(i)
                .iter()
                .zip(newest)
                .map(|(x, c)| (x - c) * (x - c))
                .sum();
            if d2 < dist2[pos] {
                dist2[pos] = d2;
            }
            total += dist2[pos];
        }
        let pick = if total > 0.0 && total.is_finite() {
            let mut u = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (pos, &d2) in dist2.iter().enumerate() {
                if u < d2 {
                    chosen = pos;
                    break;
                }
                u -= d2;
            }
            chosen
        } else {
            // All residual distances are zero (duplicated points); fall back
            // to a uniform draw.
            rng.random_range(0..n)
        };
        centers.push(set.row(order[pick]).to_vec());
    }
    centers
}

/// E-step: fills `resp` with row-normalized posteriors under `model` and
/// returns the total log-likelihood (summed in canonical order).
fn e_step(
    set: &CharacterisedObjectSet,
    order: &[usize],
    model: &GaussianMixtureModel,
    resp: &mut ResponsibilityMatrix,
    row_loglik: &mut [f64],
) -> f64 {
    let k = model.k();
    let log_weights: Vec<f64> = model.weights.iter().map(|w| w.ln()).collect();
    let mut terms = vec![0.0; k];
    for i in 0..set.n_objects() {
        let x = set.row(i);
        for c in 0..k {
            terms[c] = log_weights[c] + log_diag_normal(&model.means[c], &model.variances[c], x);
        }
        let lse = log_sum_exp(&terms);
        row_loglik[i] = lse;
        let row = resp.row_mut(i);
        let mut sum = 0.0;
        for c in 0..k {
            row[c] = (terms[c] - lse).exp();
            sum += row[c];
        }
        for r in row.iter_mut() {
            *r /= sum;
        }
    }
    order.iter().map(|&i| row_loglik[i]).sum()
}

/// M-step: closed-form update of weights, means and floored variances from
/// the current responsibilities. Near-empty components are re-seeded on the
/// lowest-density object and given weight 1/N before renormalization.
fn m_step(
    set: &CharacterisedObjectSet,
    order: &[usize],
    resp: &ResponsibilityMatrix,
    previous: &GaussianMixtureModel,
    init_vars: &[f64],
) -> GaussianMixtureModel {
    let n = set.n_objects();
    let d = set.n_measures();
    let k = resp.n_components();

    let mut mass = vec![0.0; k];
    for &i in order {
        for (c, &r) in mass.iter_mut().zip(resp.row(i)) {
            *c += r;
        }
    }

    let mut weights = vec![0.0; k];
    let mut means = vec![vec![0.0; d]; k];
    let mut variances = vec![vec![0.0; d]; k];
    let mut revived = false;

    for c in 0..k {
        if mass[c] < EMPTY_FRACTION * n as f64 {
            // Re-seed a starved component on the point the current model
            // explains worst.
            let worst = order
                .iter()
                .copied()
                .min_by(|&a, &b| {
                    let da = previous.log_density(set.row(a)).expect("dims match");
                    let db = previous.log_density(set.row(b)).expect("dims match");
                    da.partial_cmp(&db).expect("finite densities")
                })
                .expect("non-empty set");
            means[c] = set.row(worst).to_vec();
            variances[c] = init_vars.iter().map(|v| v.max(VARIANCE_FLOOR)).collect();
            weights[c] = 1.0 / n as f64;
            revived = true;
            continue;
        }
        weights[c] = mass[c] / n as f64;
        for &i in order {
            let r = resp.value(i, c);
            for (m, &x) in means[c].iter_mut().zip(set.row(i)) {
                *m += r * x;
            }
        }
        for m in means[c].iter_mut() {
            *m /= mass[c];
        }
        for &i in order {
            let r = resp.value(i, c);
            for (j, &x) in set.row(i).iter().enumerate() {
                let diff = x - means[c][j];
                variances[c][j] += r * diff * diff;
            }
        }
        for v in variances[c].iter_mut() {
            *v = (*v / mass[c]).max(VARIANCE_FLOOR);
        }
    }

    if revived {
        let total: f64 = weights.iter().sum();
        for w in weights.iter_mut() {
            *w /= total;
        }
    }

    GaussianMixtureModel {
        weights,
        means,
        variances,
        variance_floor: VARIANCE_FLOOR,
    }
}

/// Sorts components by their mean vectors and applies the same permutation
/// to the responsibility columns, making outputs order-stable.
fn canonicalize_components(model: &mut GaussianMixtureModel, resp: &mut ResponsibilityMatrix) {
    let k = model.k();
    let mut perm: Vec<usize> = (0..k).collect();
    perm.sort_by(|&a, &b| {
        model.means[a]
            .iter()
            .zip(&model.means[b])
            .map(|(x, y)| x.partial_cmp(y).expect("finite means"))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    model.weights = perm.iter().map(|&c| model.weights[c]).collect();
    model.means = perm.iter().map(|&c| model.means[c].clone()).collect();
    model.variances = perm.iter().map(|&c| model.variances[c].clone()).collect();
    resp.permute_columns(&perm);
}

/// Fits a `k`-component diagonal Gaussian mixture to `set` with EM.
///
/// Stops once the log-likelihood improves by less than `tol` between
/// iterations (or at `max_iter`). The returned responsibilities are the
/// posteriors under the returned model, and the report's trace records the
/// log-likelihood after every iteration.
pub fn em_fit(
    set: &CharacterisedObjectSet,
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<(GaussianMixtureModel, ResponsibilityMatrix, FitReport), FitError> {
    let n = set.n_objects();
    if n == 0 {
        return Err(FitError::EmptySet);
    }
    if k == 0 {
        return Err(FitError::InvalidArgument("k must be at least 1".into()));
    }
    if k > n {
        return Err(FitError::KTooLarge { k, n });
    }
    if max_iter == 0 {
        return Err(FitError::InvalidArgument("max_iter must be at least 1".into()));
    }
    if !(tol.is_finite() && tol > 0.0) {
        return Err(FitError::InvalidArgument("tol must be positive".into()));
    }

    let order = canonical_order(set);
    let (_, init_vars) = column_stats(set, &order);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = GaussianMixtureModel {
        weights: vec![1.0 / k as f64; k],
        means: seed_means(set, &order, k, &mut rng),
        variances: vec![
            init_vars.iter().map(|v| v.max(VARIANCE_FLOOR)).collect();
            k
        ],
        variance_floor: VARIANCE_FLOOR,
    };

    let mut resp = ResponsibilityMatrix::zeros(n, k);
    let mut row_loglik = vec![0.0; n];
    e_step(set, &order, &model, &mut resp, &mut row_loglik);

    let mut trace = Vec::new();
    let mut converged = false;
    for iter in 1..=max_iter {
        model = m_step(set, &order, &resp, &model, &init_vars);
        let loglik = e_step(set, &order, &model, &mut resp, &mut row_loglik);
        trace.push(loglik);
        if iter >= 2 && loglik - trace[iter - 2] < tol {
            converged = true;
            break;
        }
    }

    canonicalize_components(&mut model, &mut resp);
    let report = FitReport {
        iterations: trace.len(),
        final_log_likelihood: *trace.last().expect("at least one iteration"),
        trace,
        converged,
        seed,
    };
    Ok((model, resp, report))
}

/// Free parameter count of a k-component diagonal mixture in d dimensions.
fn parameter_count(k: usize, d: usize) -> usize {
    (k - 1) + k * d + k * d
}

/// Fits every k in `[k_min, k_max]` with `restarts` sub-seeded EM runs each,
/// keeps the highest-likelihood fit per k, and returns the fit minimizing
/// `BIC = -2 logL + p ln N` (ties broken toward smaller k).
pub fn select_k(
    set: &CharacterisedObjectSet,
    k_min: usize,
    k_max: usize,
    seed: u64,
    restarts: usize,
    max_iter: usize,
    tol: f64,
) -> Result<ModelSelection, FitError> {
    let n = set.n_objects();
    if n == 0 {
        return Err(FitError::EmptySet);
    }
    if k_min == 0 || k_min > k_max {
        return Err(FitError::InvalidArgument(format!(
            "invalid component range [{k_min}, {k_max}]"
        )));
    }
    if k_max > n {
        return Err(FitError::KTooLarge { k: k_max, n });
    }
    if restarts == 0 {
        return Err(FitError::InvalidArgument("restarts must be at least 1".into()));
    }

    let d = set.n_measures();
    let mut bic_table = Vec::with_capacity(k_max - k_min + 1);
    let mut best: Option<(f64, ModelSelection)> = None;

    for k in k_min..=k_max {
        let mut best_fit: Option<(GaussianMixtureModel, ResponsibilityMatrix, FitReport)> = None;
        for restart in 0..restarts {
            let sub_seed = derive_seed(seed, k as u64, restart as u64);
            let fit = em_fit(set, k, sub_seed, max_iter, tol)?;
            let better = match &best_fit {
                Some((_, _, report)) => fit.2.final_log_likelihood > report.final_log_likelihood,
                None => true,
            };
            if better {
                best_fit = Some(fit);
            }
        }
        let (model, resp, report) = best_fit.expect("restarts >= 1");
        let loglik = report.final_log_likelihood;
        let bic = -2.0 * loglik + parameter_count(k, d) as f64 * (n as f64).ln();
        bic_table.push(BicEntry {
            k,
            log_likelihood: loglik,
            bic,
        });
        let better = match &best {
            Some((best_bic, _)) => bic < *best_bic,
            None => true,
        };
        if better {
            best = Some((
                bic,
                ModelSelection {
                    best_k: k,
                    model,
                    responsibilities: resp,
                    report,
                    bic_table: Vec::new(),
                },
            ));
        }
    }

    let (_, mut selection) = best.expect("range is non-empty");
    selection.bic_table = bic_table;
    Ok(selection)
}
