//! Gaussian causation entropy, causation-entropy matrices (CEM), thresholding
//! and cross-batch aggregation with the stability criterion.
//!
//! Under a joint Gaussian approximation the causation entropy from `W` to `U`
//! given `V` is
//!
//! ```text
//! C(W -> U | V) = ½ [ln det R_UV − ln det R_V − ln det R_UVW + ln det R_VW]
//! ```
//!
//! with `R` the covariance of the listed variables. Entries are in nats.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;

use crate::basis::BasisLibrary;
use crate::error::{Error, Result};
use crate::linalg::{log_det_regularized, principal_submatrix, LOG_DET_JITTER};

/// Pre-clamp values below `-NEGATIVE_TOLERANCE` are reported, not clamped.
pub const NEGATIVE_TOLERANCE: f64 = 1e-6;

/// Evaluates the log-determinant expression on a given covariance matrix.
///
/// `u`, `v` and `w` index into `cov`. No clamping is applied; `jitter` is the
/// relative diagonal regularization (0 for exact population matrices).
pub fn causation_entropy_from_covariance(cov: &DMatrix<f64>, u: usize, v: &[usize], w: usize, jitter: f64) -> f64 {
    let mut uv = vec![u];
    uv.extend_from_slice(v);
    let mut vw = v.to_vec();
    vw.push(w);
    let mut uvw = uv.clone();
    uvw.push(w);
    let ld = |idx: &[usize]| log_det_regularized(&principal_submatrix(cov, idx), jitter);
    0.5 * (ld(&uv) - ld(v) - ld(&uvw) + ld(&vw))
}

/// Second-moment matrix of the columns of `x` rescaled to unit diagonal.
///
/// `centered` subtracts column means (sample covariance); otherwise raw
/// second moments are used, which is what a constant column requires.
/// Columns that carry no variation come back flagged in the mask and are
/// left out of every conditioning set.
struct JointMoments {
    corr: DMatrix<f64>,
    informative: Vec<bool>,
}

fn joint_moments(x: &DMatrix<f64>, centered: bool) -> JointMoments {
    let n = x.nrows() as f64;
    let k = x.ncols();
    let means: Vec<f64> = (0..k)
        .map(|j| if centered { x.column(j).sum() / n } else { 0.0 })
        .collect();
    // Centered cross-products, one pass per column pair without copying x.
    let mut s = DMatrix::zeros(k, k);
    for j in 0..k {
        let (cj, mj) = (x.column(j), means[j]);
        for i in 0..=j {
            let (ci, mi) = (x.column(i), means[i]);
            let v = ci.iter().zip(cj.iter()).map(|(a, b)| (a - mi) * (b - mj)).sum::<f64>() / n;
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
    let informative: Vec<bool> = (0..k)
        .map(|j| {
            let second = s[(j, j)];
            let raw = second + means[j] * means[j];
            raw != 0.0 && second > 1e-20 * raw
        })
        .collect();
    let sd: Vec<f64> = (0..k).map(|j| libm::sqrt(s[(j, j)])).collect();
    let corr = DMatrix::from_fn(k, k, |i, j| {
        if i == j {
            1.0
        } else if informative[i] && informative[j] {
            s[(i, j)] / (sd[i] * sd[j])
        } else {
            0.0
        }
    });
    JointMoments { corr, informative }
}

fn clamp_entropy(raw: f64) -> Result<f64> {
    if raw < -NEGATIVE_TOLERANCE {
        return Err(Error::NegativeEntropy { value: raw });
    }
    Ok(raw.max(0.0))
}

/// Sample causation entropy `C(w -> u | v)` from time series.
///
/// `v` holds one conditioning series per column and may have zero columns.
/// Covariances are mean-subtracted. A constant `u` or `w` is reported as
/// [`Error::SingularCovariance`]; callers treat that as zero entropy.
pub fn gaussian_causation_entropy(u: &[f64], v: &DMatrix<f64>, w: &[f64]) -> Result<f64> {
    let n = u.len();
    if w.len() != n || (v.ncols() > 0 && v.nrows() != n) {
        return Err(Error::DimensionMismatch {
            context: "causation entropy series length",
            expected: n,
            found: if w.len() != n { w.len() } else { v.nrows() },
        });
    }
    let dim_v = v.ncols();
    if n < dim_v + 3 {
        return Err(Error::InvalidParameter(alloc::format!(
            "causation entropy needs at least {} samples, got {n}",
            dim_v + 3
        )));
    }
    let mut x = DMatrix::zeros(n, dim_v + 2);
    x.column_mut(0).copy_from_slice(u);
    if dim_v > 0 {
        x.columns_mut(1, dim_v).copy_from(v);
    }
    x.column_mut(dim_v + 1).copy_from_slice(w);
    if let Some((row, col)) = x.iter().position(|v| !v.is_finite()).map(|p| (p % n, p / n)) {
        return Err(Error::NonFinite { row, col });
    }
    let jm = joint_moments(&x, true);
    if !jm.informative[0] {
        return Err(Error::SingularCovariance("target series is constant"));
    }
    if !jm.informative[dim_v + 1] {
        return Err(Error::SingularCovariance("source series is constant"));
    }
    let cond: Vec<usize> = (1..=dim_v).filter(|&j| jm.informative[j]).collect();
    clamp_entropy(causation_entropy_from_covariance(
        &jm.corr,
        0,
        &cond,
        dim_v + 1,
        LOG_DET_JITTER,
    ))
}

/// Real-valued `p×N` causation-entropy matrix for one batch (or an average).
#[derive(Debug, Clone, PartialEq)]
pub struct CEMatrix {
    pub values: DMatrix<f64>,
    /// Which `(row, function)` entries were examined.
    pub admissible: Vec<Vec<bool>>,
    pub batch_index: usize,
    /// Samples per batch the entries were estimated from.
    pub samples: usize,
    /// Number of batch matrices averaged into this one.
    pub batches: usize,
}

impl CEMatrix {
    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn get(&self, row: usize, n: usize) -> f64 {
        self.values[(row, n)]
    }

    fn row_admissible_values(&self, row: usize) -> Vec<f64> {
        self.admissible[row]
            .iter()
            .enumerate()
            .filter(|(_, &ok)| ok)
            .map(|(n, _)| self.values[(row, n)])
            .collect()
    }
}

/// Causation entropy from every admissible library function to every
/// target column.
///
/// For row `i` the conditioning set of function `n` is the row's admissible
/// candidates other than `n`. When a row's candidates include the constant
/// function, raw second moments are used so that the constant's own entry
/// measures the explained mean; for every other entry this coincides with
/// the mean-subtracted computation.
pub fn compute_cem(targets: &DMatrix<f64>, phi: &DMatrix<f64>, library: &BasisLibrary) -> Result<CEMatrix> {
    let p = library.dim();
    let nf = library.len();
    if targets.ncols() != p {
        return Err(Error::DimensionMismatch {
            context: "CEM target columns",
            expected: p,
            found: targets.ncols(),
        });
    }
    if phi.ncols() != nf {
        return Err(Error::DimensionMismatch {
            context: "CEM library columns",
            expected: nf,
            found: phi.ncols(),
        });
    }
    if phi.nrows() != targets.nrows() {
        return Err(Error::DimensionMismatch {
            context: "CEM sample count",
            expected: targets.nrows(),
            found: phi.nrows(),
        });
    }
    let samples = targets.nrows();
    let mut values = DMatrix::zeros(p, nf);
    for row in 0..p {
        let cand = library.candidates(row);
        if cand.is_empty() {
            continue;
        }
        if samples < cand.len() + 2 {
            return Err(Error::InvalidParameter(alloc::format!(
                "row {} has {} candidates but only {samples} samples",
                library.derivative_name(row),
                cand.len()
            )));
        }
        let centered = !cand.iter().any(|&n| library.functions()[n].monomial.is_constant());
        let x = DMatrix::from_fn(samples, cand.len() + 1, |m, j| {
            if j == 0 {
                targets[(m, row)]
            } else {
                phi[(m, cand[j - 1])]
            }
        });
        let jm = joint_moments(&x, centered);
        if !jm.informative[0] {
            continue;
        }
        let usable: Vec<usize> = (1..=cand.len()).filter(|&j| jm.informative[j]).collect();
        for &w in &usable {
            let cond: Vec<usize> = usable.iter().copied().filter(|&j| j != w).collect();
            let raw = causation_entropy_from_covariance(&jm.corr, 0, &cond, w, LOG_DET_JITTER);
            values[(row, cand[w - 1])] = clamp_entropy(raw)?;
        }
    }
    Ok(CEMatrix {
        values,
        admissible: library.row_masks().to_vec(),
        batch_index: 0,
        samples,
        batches: 1,
    })
}

/// Thresholded 0/1 pattern of a CEM.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryCEM {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl BinaryCEM {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![false; rows * cols],
        }
    }

    pub fn from_entries(rows: usize, cols: usize, active: &[(usize, usize)]) -> Self {
        let mut b = Self::zeros(rows, cols);
        for &(i, n) in active {
            b.set(i, n, true);
        }
        b
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, n: usize) -> bool {
        self.bits[row * self.cols + n]
    }

    pub fn set(&mut self, row: usize, n: usize, value: bool) {
        self.bits[row * self.cols + n] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_zero(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Active column indices of one row.
    pub fn row_support(&self, row: usize) -> Vec<usize> {
        (0..self.cols).filter(|&n| self.get(row, n)).collect()
    }

    /// All active `(row, column)` pairs in row-major order.
    pub fn active(&self) -> Vec<(usize, usize)> {
        (0..self.rows)
            .flat_map(|i| (0..self.cols).filter(move |&n| self.get(i, n)).map(move |n| (i, n)))
            .collect()
    }

    pub fn row_eq(&self, other: &BinaryCEM, row: usize) -> bool {
        let a = row * self.cols;
        self.bits[a..a + self.cols] == other.bits[a..a + other.cols]
    }

    fn copy_row_from(&mut self, other: &BinaryCEM, row: usize) {
        let a = row * self.cols;
        self.bits[a..a + self.cols].copy_from_slice(&other.bits[a..a + self.cols]);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdMode {
    /// Active iff the entry exceeds the absolute floor.
    Absolute,
    /// Active iff the entry exceeds `alpha` times its row maximum.
    RelativeRow,
    /// Both conditions.
    Hybrid,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AbsoluteFloor {
    Fixed(f64),
    /// A multiple of the median of the row's admissible entries.
    MedianScaled(f64),
}

/// The rule turning a real-valued CEM into a 0/1 pattern.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdPolicy {
    pub mode: ThresholdMode,
    pub alpha: f64,
    pub floor: AbsoluteFloor,
    /// Normal score of the significance floor applied in every mode: an
    /// entry averaged over `K` batches of `n` samples must have
    /// `2·n·K·entry` above the `χ²_K` quantile at this score. Zero
    /// disables it.
    pub significance_z: f64,
}

/// Normal score of the floor used when scanning single batches.
pub const DETECTION_Z: f64 = 5.0;
/// Normal score of the floor used on aggregated matrices.
pub const AGGREGATION_Z: f64 = 3.0;

/// Wilson–Hilferty approximation of the `χ²_k` quantile at normal score `z`.
pub fn chi_square_quantile(k: usize, z: f64) -> f64 {
    let k = k as f64;
    let c = 2.0 / (9.0 * k);
    let base = 1.0 - c + z * libm::sqrt(c);
    let b = base.max(0.0);
    k * b * b * b
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        Self {
            mode: ThresholdMode::Hybrid,
            alpha: 0.25,
            floor: AbsoluteFloor::MedianScaled(5.0),
            significance_z: AGGREGATION_Z,
        }
    }
}

impl ThresholdPolicy {
    /// The same rule with a different significance score.
    pub fn with_significance(self, z: f64) -> Self {
        Self {
            significance_z: z,
            ..self
        }
    }

    pub fn absolute(c_abs: f64) -> Self {
        Self {
            mode: ThresholdMode::Absolute,
            alpha: 0.0,
            floor: AbsoluteFloor::Fixed(c_abs),
            significance_z: 0.0,
        }
    }

    pub fn relative(alpha: f64) -> Self {
        Self {
            mode: ThresholdMode::RelativeRow,
            alpha,
            floor: AbsoluteFloor::Fixed(0.0),
            significance_z: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let uses_alpha = !matches!(self.mode, ThresholdMode::Absolute);
        if uses_alpha && !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidParameter(alloc::format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        let floor = match self.floor {
            AbsoluteFloor::Fixed(c) | AbsoluteFloor::MedianScaled(c) => c,
        };
        if !(floor >= 0.0) || !(self.significance_z >= 0.0) {
            return Err(Error::InvalidParameter("threshold floors must be nonnegative".into()));
        }
        Ok(())
    }

    /// The absolute floor for one row of a particular matrix.
    pub fn resolved_floor(&self, cem: &CEMatrix, row: usize) -> f64 {
        let floor = match self.floor {
            AbsoluteFloor::Fixed(c) => c,
            AbsoluteFloor::MedianScaled(scale) => scale * median(cem.row_admissible_values(row)),
        };
        floor.max(self.significance_floor(cem))
    }

    /// Smallest averaged entry that passes the significance test.
    pub fn significance_floor(&self, cem: &CEMatrix) -> f64 {
        if self.significance_z <= 0.0 || cem.samples == 0 {
            return 0.0;
        }
        let k = cem.batches.max(1);
        chi_square_quantile(k, self.significance_z) / (2.0 * cem.samples as f64 * k as f64)
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let k = v.len() / 2;
    if v.len() % 2 == 1 {
        v[k]
    } else {
        0.5 * (v[k - 1] + v[k])
    }
}

/// Applies a threshold policy. Inadmissible entries are always 0.
pub fn threshold(cem: &CEMatrix, policy: &ThresholdPolicy) -> BinaryCEM {
    let (p, nf) = (cem.rows(), cem.cols());
    let mut out = BinaryCEM::zeros(p, nf);
    let significance = policy.significance_floor(cem);
    for i in 0..p {
        let floor = policy.resolved_floor(cem, i);
        let row_max = (0..nf)
            .filter(|&n| cem.admissible[i][n])
            .map(|n| cem.values[(i, n)])
            .fold(0.0f64, f64::max);
        for n in 0..nf {
            if !cem.admissible[i][n] {
                continue;
            }
            let v = cem.values[(i, n)];
            let abs_ok = v > floor;
            let rel_ok = v > policy.alpha * row_max && row_max > 0.0;
            let on = match policy.mode {
                ThresholdMode::Absolute => abs_ok,
                ThresholdMode::RelativeRow => rel_ok && v > significance,
                ThresholdMode::Hybrid => abs_ok && rel_ok,
            };
            out.set(i, n, on);
        }
    }
    out
}

/// Whether stability is judged on the whole matrix or row by row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StabilityScope {
    #[default]
    Global,
    /// Each row freezes once its own pattern has held for `D` batches.
    PerRow,
}

/// A pattern that has held for the required number of aggregation steps.
#[derive(Debug, Clone, PartialEq)]
pub struct StablePattern {
    pub pattern: BinaryCEM,
    /// Aggregation count at which the criterion was met.
    pub k_star: usize,
}

/// Running state of the aggregated CEM `C⁺(K)`.
#[derive(Debug, Clone)]
pub struct AggregationState {
    running_sum: Option<DMatrix<f64>>,
    template: Option<CEMatrix>,
    k: usize,
    last_pattern: Option<BinaryCEM>,
    stable_count: Vec<usize>,
    required: usize,
    scope: StabilityScope,
    frozen: Option<BinaryCEM>,
    frozen_rows: Vec<bool>,
    history: Vec<BinaryCEM>,
    complete: bool,
}

impl AggregationState {
    /// Fresh state; the first step starts the count at `d = 1`.
    pub fn new(required: usize, scope: StabilityScope) -> Result<Self> {
        if required == 0 {
            return Err(Error::InvalidParameter("stability span D must be at least 1".into()));
        }
        Ok(Self {
            running_sum: None,
            template: None,
            k: 0,
            last_pattern: None,
            stable_count: Vec::new(),
            required,
            scope,
            frozen: None,
            frozen_rows: Vec::new(),
            history: Vec::new(),
            complete: false,
        })
    }

    /// State whose reference pattern is the detection batch's own pattern,
    /// while that batch's entropies are left out of the running sum.
    pub fn seeded(required: usize, scope: StabilityScope, detection_pattern: BinaryCEM) -> Result<Self> {
        let mut s = Self::new(required, scope)?;
        s.stable_count = vec![1; detection_pattern.rows()];
        s.last_pattern = Some(detection_pattern);
        Ok(s)
    }

    /// Number of CEMs aggregated so far (`K`).
    pub fn count(&self) -> usize {
        self.k
    }

    /// Current stability counter `d` (minimum over rows in per-row mode).
    pub fn stable_count(&self) -> usize {
        self.stable_count.iter().copied().min().unwrap_or(0)
    }

    pub fn is_complete(&self) -> bool {
        self.complete
    }

    /// Thresholded pattern after each step, `C⁺(1), C⁺(2), ...`.
    pub fn history(&self) -> &[BinaryCEM] {
        &self.history
    }

    /// The averaged CEM `(1/K) Σ C⁽ᵏ⁾`.
    pub fn mean(&self) -> Option<CEMatrix> {
        let sum = self.running_sum.as_ref()?;
        let mut out = self.template.clone()?;
        out.values = sum / self.k as f64;
        out.batches = self.k * self.template.as_ref()?.batches;
        Some(out)
    }

    /// Adds one batch CEM, re-thresholds the average and updates the
    /// stability counter. Returns the stable pattern once it has held for
    /// `D` consecutive steps.
    pub fn step(&mut self, cem: &CEMatrix, policy: &ThresholdPolicy) -> Result<Option<StablePattern>> {
        if self.complete {
            return Err(Error::AggregationComplete);
        }
        match &mut self.running_sum {
            Some(sum) => {
                if sum.shape() != cem.values.shape() {
                    return Err(Error::DimensionMismatch {
                        context: "aggregated CEM shape",
                        expected: sum.nrows() * sum.ncols(),
                        found: cem.values.len(),
                    });
                }
                *sum += &cem.values;
            }
            None => {
                if let Some(last) = &self.last_pattern {
                    if last.rows() != cem.rows() || last.cols() != cem.cols() {
                        return Err(Error::DimensionMismatch {
                            context: "aggregated CEM shape",
                            expected: last.rows() * last.cols(),
                            found: cem.values.len(),
                        });
                    }
                }
                self.running_sum = Some(cem.values.clone());
                self.template = Some(cem.clone());
            }
        }
        self.k += 1;
        let mean = self.mean().expect("running sum initialized above");
        let pattern = threshold(&mean, policy);
        let rows = pattern.rows();
        if self.stable_count.len() != rows {
            self.stable_count = vec![0; rows];
        }
        if self.frozen_rows.len() != rows {
            self.frozen_rows = vec![false; rows];
            self.frozen = Some(BinaryCEM::zeros(rows, pattern.cols()));
        }
        for i in 0..rows {
            let same = match (&self.last_pattern, self.scope) {
                (Some(last), StabilityScope::PerRow) => last.row_eq(&pattern, i),
                (Some(last), StabilityScope::Global) => *last == pattern,
                (None, _) => false,
            };
            self.stable_count[i] = if same { self.stable_count[i] + 1 } else { 1 };
        }
        self.history.push(pattern.clone());
        self.last_pattern = Some(pattern.clone());

        let stable = match self.scope {
            StabilityScope::Global => (self.stable_count[0] >= self.required).then(|| pattern.clone()),
            StabilityScope::PerRow => {
                let frozen = self.frozen.as_mut().expect("initialized above");
                for i in 0..rows {
                    if !self.frozen_rows[i] && self.stable_count[i] >= self.required {
                        self.frozen_rows[i] = true;
                        frozen.copy_row_from(&pattern, i);
                    }
                }
                self.frozen_rows.iter().all(|&f| f).then(|| frozen.clone())
            }
        };
        Ok(stable.map(|pattern| {
            self.complete = true;
            StablePattern {
                pattern,
                k_star: self.k,
            }
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{BasisLibrary, Monomial};
    use alloc::vec::Vec;
    use rand_chacha::ChaCha8Rng;
    use rand_core::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn z(rng: &mut ChaCha8Rng) -> f64 {
        StandardNormal.sample(rng)
    }

    fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    }

    fn cem_from(values: &[&[f64]]) -> CEMatrix {
        let p = values.len();
        let n = values[0].len();
        CEMatrix {
            values: DMatrix::from_fn(p, n, |i, j| values[i][j]),
            admissible: vec![vec![true; n]; p],
            batch_index: 1,
            samples: 1000,
            batches: 1,
        }
    }

    #[test]
    fn independent_series_have_near_zero_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let u = normals(&mut rng, n);
        let v = DMatrix::from_vec(n, 1, normals(&mut rng, n));
        let w = normals(&mut rng, n);
        let ce = gaussian_causation_entropy(&u, &v, &w).unwrap();
        assert!(ce < 0.01, "ce = {ce}");
    }

    #[test]
    fn additive_coupling_matches_population_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 200_000;
        let w = normals(&mut rng, n);
        let eps = normals(&mut rng, n);
        let u: Vec<f64> = w.iter().zip(&eps).map(|(a, b)| a + b).collect();
        let v = DMatrix::from_vec(n, 1, normals(&mut rng, n));
        let ce = gaussian_causation_entropy(&u, &v, &w).unwrap();
        // ½ ln(var(u) / var(u | w)) = ½ ln 2
        assert!((ce - 0.5 * libm::log(2.0)).abs() < 0.01, "ce = {ce}");
    }

    #[test]
    fn empty_conditioning_set_is_mutual_information() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 200_000;
        let w = normals(&mut rng, n);
        let eps = normals(&mut rng, n);
        let u: Vec<f64> = w.iter().zip(&eps).map(|(a, b)| 2.0 * a + b).collect();
        let ce = gaussian_causation_entropy(&u, &DMatrix::zeros(n, 0), &w).unwrap();
        // -½ ln(1 - ρ²) with ρ² = 4/5
        assert!((ce - 0.5 * libm::log(5.0)).abs() < 0.01, "ce = {ce}");
    }

    #[test]
    fn kernel_is_symmetric_in_source_and_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 5_000;
        let v = normals(&mut rng, n);
        let w: Vec<f64> = normals(&mut rng, n).iter().zip(&v).map(|(a, b)| a + 0.3 * b).collect();
        let u: Vec<f64> = (0..n).map(|m| 0.5 * w[m] - v[m] + z(&mut rng)).collect();
        let vm = DMatrix::from_vec(n, 1, v);
        let a = gaussian_causation_entropy(&u, &vm, &w).unwrap();
        let b = gaussian_causation_entropy(&w, &vm, &u).unwrap();
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }

    #[test]
    fn constant_series_is_reported() {
        let u = vec![1.0; 50];
        let w: Vec<f64> = (0..50).map(|i| i as f64).collect();
        assert!(matches!(
            gaussian_causation_entropy(&u, &DMatrix::zeros(50, 0), &w),
            Err(Error::SingularCovariance(_))
        ));
    }

    #[test]
    fn too_few_samples_is_rejected() {
        let u = [1.0, 2.0, 3.0];
        let v = DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 0.5]);
        assert!(gaussian_causation_entropy(&u, &v, &u).is_err());
    }

    #[test]
    fn injected_linear_term_is_row_maximum() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 2000;
        let states = DMatrix::from_fn(n, 3, |_, _| z(&mut rng));
        let lib = BasisLibrary::polynomial(3, 2, false).unwrap();
        let phi = lib.evaluate(&states).unwrap();
        let mut resid = DMatrix::from_fn(n, 3, |_, _| 0.1 * z(&mut rng));
        for m in 0..n {
            resid[(m, 1)] += 10.0 * states[(m, 0)];
        }
        let cem = compute_cem(&resid, &phi, &lib).unwrap();
        let x = lib.index_by_name("x").unwrap();
        let row_max = cem.values.row(1).iter().copied().fold(0.0, f64::max);
        assert_eq!(cem.get(1, x), row_max);
        let pattern = threshold(&cem, &ThresholdPolicy::default());
        assert_eq!(pattern.active(), [(1, x)]);
    }

    #[test]
    fn white_noise_residuals_stay_below_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 1000;
        let lib = BasisLibrary::polynomial(3, 2, false).unwrap();
        for _ in 0..20 {
            let states = DMatrix::from_fn(n, 3, |_, _| z(&mut rng));
            let phi = lib.evaluate(&states).unwrap();
            let resid = DMatrix::from_fn(n, 3, |_, _| z(&mut rng));
            let cem = compute_cem(&resid, &phi, &lib).unwrap();
            let policy = ThresholdPolicy::default().with_significance(DETECTION_Z);
            assert!(threshold(&cem, &policy).is_zero());
        }
    }

    #[test]
    fn masked_entries_are_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 500;
        let lib = BasisLibrary::localized(6, &crate::basis::Stencil::lorenz96(), true).unwrap();
        let states = DMatrix::from_fn(n, 6, |_, _| z(&mut rng));
        let phi = lib.evaluate(&states).unwrap();
        let resid = DMatrix::from_fn(n, 6, |m, j| states[(m, j)] * 3.0 + 1.0);
        let cem = compute_cem(&resid, &phi, &lib).unwrap();
        let pattern = threshold(&cem, &ThresholdPolicy::relative(0.01));
        for i in 0..6 {
            for k in 0..lib.len() {
                if !lib.is_admissible(i, k) {
                    assert_eq!(cem.get(i, k), 0.0);
                    assert!(!pattern.get(i, k));
                }
            }
        }
    }

    #[test]
    fn constant_candidate_detects_a_mean_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 2000;
        let lib = BasisLibrary::new(
            alloc::vec!["x".into()],
            alloc::vec![Monomial::constant(), Monomial::var(0), Monomial::from_indices(&[0, 0])],
            alloc::vec![alloc::vec![true; 3]],
        )
        .unwrap();
        let states = DMatrix::from_fn(n, 1, |_, _| z(&mut rng));
        let phi = lib.evaluate(&states).unwrap();
        let resid = DMatrix::from_fn(n, 1, |m, _| 8.0 - 0.5 * states[(m, 0)] + 0.01 * z(&mut rng));
        let cem = compute_cem(&resid, &phi, &lib).unwrap();
        let pattern = threshold(&cem, &ThresholdPolicy::relative(0.25));
        assert_eq!(pattern.row_support(0), [0, 1]);
    }

    #[test]
    fn threshold_all_zero_gives_zero_pattern() {
        let cem = cem_from(&[&[0.0; 4], &[0.0; 4]]);
        for policy in [
            ThresholdPolicy::default(),
            ThresholdPolicy::absolute(0.0),
            ThresholdPolicy::relative(0.25),
        ] {
            assert!(threshold(&cem, &policy).is_zero());
        }
    }

    #[test]
    fn threshold_modes() {
        let cem = cem_from(&[&[0.010, 0.004, 0.002], &[0.001, 0.0011, 0.0009]]);
        let abs = threshold(&cem, &ThresholdPolicy::absolute(0.003));
        assert_eq!(abs.active(), [(0, 0), (0, 1)]);
        let rel = threshold(&cem, &ThresholdPolicy::relative(0.5));
        assert_eq!(rel.active(), [(0, 0), (1, 0), (1, 1), (1, 2)]);
        let hybrid = ThresholdPolicy {
            mode: ThresholdMode::Hybrid,
            alpha: 0.5,
            floor: AbsoluteFloor::Fixed(0.003),
            significance_z: 0.0,
        };
        assert_eq!(threshold(&cem, &hybrid).active(), [(0, 0)]);
    }

    fn table_one() -> CEMatrix {
        // L63 CEM after six time units (units of 1e-4).
        let rows: [[f64; 9]; 3] = [
            [11.0437, 10.6292, 5.1156, 4.6996, 6.7041, 9.2123, 8.9308, 3.0866, 4.0888],
            [63.1474, 3.7597, 5.0283, 2.5584, 2.6370, 5.5017, 4.3689, 2.4472, 4.4099],
            [
                9.0692, 6.6605, 9.5399, 11.3740, 8.5529, 10.6165, 10.8299, 10.8725, 10.5916,
            ],
        ];
        let mut cem = cem_from(&[&rows[0], &rows[1], &rows[2]]);
        cem.values *= 1e-4;
        cem
    }

    #[test]
    fn published_lorenz63_matrix_thresholds_to_single_entry() {
        let policy = ThresholdPolicy {
            significance_z: 0.0,
            ..ThresholdPolicy::default()
        };
        assert_eq!(threshold(&table_one(), &policy).active(), [(1, 0)]);
    }

    #[test]
    fn published_topographic_matrix_thresholds_to_four_entries() {
        // Leading nine columns of the topographic CEM after 60 time units (1e-3).
        let rows: [[f64; 9]; 5] = [
            [0.0115, 0.0227, 0.0165, 0.0614, 120.9879, 0.0216, 0.0365, 0.0407, 0.0249],
            [0.0124, 0.0327, 0.0066, 0.0150, 0.0313, 0.0002, 0.0090, 0.0039, 0.0284],
            [0.0023, 0.0033, 0.0142, 0.0099, 51.3949, 0.0537, 0.0291, 0.0572, 0.0082],
            [0.0359, 0.0619, 0.0150, 0.0134, 0.0253, 0.0180, 0.0127, 0.0099, 0.0210],
            [0.1080, 0.0022, 0.0471, 0.0146, 0.0065, 0.0068, 0.0097, 0.0049, 0.0063],
        ];
        let mut cem = cem_from(&[&rows[0], &rows[1], &rows[2], &rows[3], &rows[4]]);
        cem.values *= 1e-3;
        let policy = ThresholdPolicy {
            significance_z: 0.0,
            ..ThresholdPolicy::default()
        };
        assert_eq!(threshold(&cem, &policy).active(), [(0, 4), (2, 4), (4, 0), (4, 2)]);
    }

    #[test]
    fn aggregation_with_d_one_is_single_batch_thresholding() {
        let mut agg = AggregationState::new(1, StabilityScope::Global).unwrap();
        let policy = ThresholdPolicy::relative(0.5);
        let cem = table_one();
        let stable = agg.step(&cem, &policy).unwrap().unwrap();
        assert_eq!(stable.k_star, 1);
        assert_eq!(stable.pattern, threshold(&cem, &policy));
        assert_eq!(agg.step(&cem, &policy), Err(Error::AggregationComplete));
    }

    #[test]
    fn identical_cems_stabilize_after_d_steps() {
        let mut agg = AggregationState::new(4, StabilityScope::Global).unwrap();
        let policy = ThresholdPolicy::relative(0.25);
        let cem = table_one();
        for k in 1..4 {
            assert!(agg.step(&cem, &policy).unwrap().is_none());
            assert_eq!(agg.stable_count(), k);
        }
        let stable = agg.step(&cem, &policy).unwrap().unwrap();
        assert_eq!(stable.k_star, 4);
        assert_eq!(stable.pattern, agg.history()[0]);
        assert!(agg.is_complete());
    }

    #[test]
    fn pattern_change_resets_counter() {
        let mut agg = AggregationState::new(2, StabilityScope::Global).unwrap();
        let policy = ThresholdPolicy::absolute(0.5);
        let a = cem_from(&[&[1.0, 0.0]]);
        let b = cem_from(&[&[1.0, 3.0]]);
        assert!(agg.step(&a, &policy).unwrap().is_none());
        // mean = [1, 1.5] -> second entry switches on
        assert!(agg.step(&b, &policy).unwrap().is_none());
        assert_eq!(agg.stable_count(), 1);
        let s = agg.step(&b, &policy).unwrap().unwrap();
        assert_eq!(s.k_star, 3);
        assert_eq!(s.pattern.active(), [(0, 0), (0, 1)]);
    }

    #[test]
    fn seeded_state_compares_against_detection_pattern() {
        let policy = ThresholdPolicy::relative(0.25);
        let cem = table_one();
        let mut agg = AggregationState::seeded(4, StabilityScope::Global, threshold(&cem, &policy)).unwrap();
        assert!(agg.step(&cem, &policy).unwrap().is_none());
        assert!(agg.step(&cem, &policy).unwrap().is_none());
        let s = agg.step(&cem, &policy).unwrap().unwrap();
        assert_eq!(s.k_star, 3);
    }

    #[test]
    fn per_row_scope_freezes_rows_independently() {
        let policy = ThresholdPolicy::absolute(0.5);
        let mut agg = AggregationState::new(2, StabilityScope::PerRow).unwrap();
        let first = cem_from(&[&[1.0, 0.0], &[0.0, 0.0]]);
        let second = cem_from(&[&[1.0, 0.0], &[0.0, 4.0]]);
        assert!(agg.step(&first, &policy).unwrap().is_none());
        // row 0 holds for two steps and freezes; row 1 changes
        assert!(agg.step(&second, &policy).unwrap().is_none());
        let s = agg.step(&second, &policy).unwrap().unwrap();
        assert_eq!(s.pattern.active(), [(0, 0), (1, 1)]);
        assert_eq!(s.k_star, 3);
    }

    #[test]
    fn chi_square_quantiles_are_close_to_tabulated_values() {
        // 0.999 quantiles: z = 3.0902
        for (k, q) in [(1, 10.828), (4, 18.467), (10, 29.588)] {
            let approx = chi_square_quantile(k, 3.0902);
            assert!((approx - q).abs() / q < 0.1, "k = {k}: {approx} vs {q}");
        }
    }

    #[test]
    fn significance_floor_relaxes_with_more_batches() {
        let mut cem = table_one();
        let policy = ThresholdPolicy::default().with_significance(DETECTION_Z);
        let one = policy.significance_floor(&cem);
        cem.batches = 4;
        assert!(policy.significance_floor(&cem) < one);
        assert_eq!(policy.with_significance(0.0).significance_floor(&cem), 0.0);
    }

    #[test]
    fn aggregation_of_identical_cems_thresholds_like_one() {
        let policy = ThresholdPolicy::default();
        let cem = table_one();
        let mut agg = AggregationState::new(10, StabilityScope::Global).unwrap();
        for _ in 0..5 {
            agg.step(&cem, &policy).unwrap();
        }
        assert!(agg.history().iter().all(|p| *p == threshold(&cem, &policy)));
    }
}
