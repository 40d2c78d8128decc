//! The online boosting loop: residual dynamics, switch detection, pattern
//! aggregation, per-row least squares and additive model updates.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::basis::BasisLibrary;
use crate::centropy::{
    compute_cem, threshold, AggregationState, BinaryCEM, CEMatrix, StabilityScope, ThresholdPolicy, DETECTION_Z,
};
use crate::error::{Error, Result};
use crate::models::SdeSystem;
use crate::timeseries::{forward_difference, Batch};

/// Coefficients `Ξ` (`p×N`) over a basis library.
///
/// Entries outside a row's mask are allowed and act as fixed terms: they
/// contribute to predictions but are never screened or refitted.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    library: BasisLibrary,
    xi: DMatrix<f64>,
}

impl Model {
    pub fn zeros(library: BasisLibrary) -> Self {
        let xi = DMatrix::zeros(library.dim(), library.len());
        Self { library, xi }
    }

    pub fn new(library: BasisLibrary, xi: DMatrix<f64>) -> Result<Self> {
        if xi.nrows() != library.dim() || xi.ncols() != library.len() {
            return Err(Error::DimensionMismatch {
                context: "model coefficient matrix",
                expected: library.dim() * library.len(),
                found: xi.len(),
            });
        }
        if let Some(pos) = xi.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos % xi.nrows(),
                col: pos / xi.nrows(),
            });
        }
        Ok(Self { library, xi })
    }

    /// Projects a polynomial system's drift onto the library's columns.
    pub fn from_system(library: BasisLibrary, system: &SdeSystem) -> Result<Self> {
        if system.dim() != library.dim() {
            return Err(Error::DimensionMismatch {
                context: "system dimension",
                expected: library.dim(),
                found: system.dim(),
            });
        }
        let mut xi = DMatrix::zeros(library.dim(), library.len());
        for t in &system.drift {
            let n = library.index_of(&t.monomial).ok_or_else(|| Error::TermNotInLibrary {
                row: t.row,
                term: t.monomial.name(library.var_names()),
            })?;
            xi[(t.row, n)] += t.coef;
        }
        Self::new(library, xi)
    }

    pub fn library(&self) -> &BasisLibrary {
        &self.library
    }

    pub fn xi(&self) -> &DMatrix<f64> {
        &self.xi
    }

    pub fn dim(&self) -> usize {
        self.library.dim()
    }

    pub fn coefficient(&self, row: usize, function: &str) -> Option<f64> {
        self.library.index_by_name(function).map(|n| self.xi[(row, n)])
    }

    /// `Φ Ξᵀ` for an evaluated library matrix `Φ` (`M×N`).
    pub fn predict(&self, phi: &DMatrix<f64>) -> DMatrix<f64> {
        phi * self.xi.transpose()
    }

    /// Nonzero coefficients inside the row masks.
    pub fn screened_support(&self) -> BinaryCEM {
        let (p, nf) = self.xi.shape();
        let mut b = BinaryCEM::zeros(p, nf);
        for i in 0..p {
            for n in 0..nf {
                if self.library.is_admissible(i, n) && self.xi[(i, n)] != 0.0 {
                    b.set(i, n, true);
                }
            }
        }
        b
    }

    /// Coefficients outside the row masks only.
    pub fn fixed_part(&self) -> DMatrix<f64> {
        let mut xi = self.xi.clone();
        for i in 0..xi.nrows() {
            for n in 0..xi.ncols() {
                if self.library.is_admissible(i, n) {
                    xi[(i, n)] = 0.0;
                }
            }
        }
        xi
    }

    /// `Ξ + Ξ_r`.
    pub fn boosted(&self, residual: &ResidualModel) -> Result<Self> {
        Self::new(self.library.clone(), &self.xi + &residual.xi_r)
    }

    /// Active terms as `(row, function name, coefficient)`.
    pub fn terms(&self) -> Vec<(usize, String, f64)> {
        let mut out = Vec::new();
        for i in 0..self.xi.nrows() {
            for (n, f) in self.library.functions().iter().enumerate() {
                let c = self.xi[(i, n)];
                if c != 0.0 {
                    out.push((i, f.name.clone(), c));
                }
            }
        }
        out
    }
}

/// The correction `Ξ_r` fitted after a detected switch.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualModel {
    pub xi_r: DMatrix<f64>,
    /// Entries that were refitted.
    pub support: BinaryCEM,
}

/// What the entropy matrix is computed against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TargetMode {
    /// `r = ẋ − ΞΦ`; a switch is any active entry.
    #[default]
    Residual,
    /// `ẋ` minus the fixed (unscreened) part of the model; a switch is a
    /// pattern that differs from the model's screened support.
    Structure,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    pub batch_length: f64,
    /// Rule applied to aggregated matrices.
    pub policy: ThresholdPolicy,
    /// Significance score used instead of the policy's when scanning single
    /// batches for a switch.
    pub detection_z: f64,
    /// Required stability span `D`.
    pub stability_span: usize,
    /// Maximum number of batches aggregated after a detection.
    pub max_batches: Option<usize>,
    /// Start the running sum with the detection batch's own CEM.
    pub include_detection_cem: bool,
    pub scope: StabilityScope,
    pub target: TargetMode,
}

impl DetectorConfig {
    pub fn new(batch_length: f64) -> Self {
        Self {
            batch_length,
            policy: ThresholdPolicy::default(),
            detection_z: DETECTION_Z,
            stability_span: 4,
            max_batches: None,
            include_detection_cem: true,
            scope: StabilityScope::Global,
            target: TargetMode::Residual,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.batch_length > 0.0 && self.batch_length.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "batch length must be positive, got {}",
                self.batch_length
            )));
        }
        if self.stability_span == 0 {
            return Err(Error::InvalidParameter("stability span D must be at least 1".into()));
        }
        if !(self.detection_z >= 0.0) {
            return Err(Error::InvalidParameter(
                "detection significance must be nonnegative".into(),
            ));
        }
        self.policy.validate()
    }

    /// Rule for the single-batch switch test.
    pub fn detection_policy(&self) -> ThresholdPolicy {
        self.policy.with_significance(self.detection_z)
    }
}

/// Relative size below which a target column counts as roundoff.
pub const RESIDUAL_RELATIVE_FLOOR: f64 = 1e-9;

/// One batch with its derivative estimates and evaluated library.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    pub index: usize,
    pub start_time: f64,
    pub end_time: f64,
    /// `ẋ` at the first `M − 1` samples.
    pub derivative: DMatrix<f64>,
    /// `Φ` at the first `M − 1` samples.
    pub phi: DMatrix<f64>,
}

impl PreparedBatch {
    pub fn new(batch: &Batch, library: &BasisLibrary) -> Result<Self> {
        if batch.data.dim() != library.dim() {
            return Err(Error::DimensionMismatch {
                context: "batch dimension",
                expected: library.dim(),
                found: batch.data.dim(),
            });
        }
        let m = batch.data.len();
        let mut derivative = forward_difference(&batch.data).values;
        let mut phi = library.evaluate(&batch.data.values().rows(0, m - 1).into_owned())?;
        if let Some(mask) = &batch.step_mask {
            if mask.len() != m - 1 {
                return Err(Error::DimensionMismatch {
                    context: "batch step mask",
                    expected: m - 1,
                    found: mask.len(),
                });
            }
            let keep: Vec<usize> = (0..m - 1).filter(|&k| mask[k]).collect();
            derivative = derivative.select_rows(&keep);
            phi = phi.select_rows(&keep);
        }
        Ok(Self {
            index: batch.index,
            start_time: batch.start_time(),
            end_time: batch.end_time(),
            derivative,
            phi,
        })
    }

    pub fn samples(&self) -> usize {
        self.derivative.nrows()
    }

    /// Regression target for the given mode.
    ///
    /// Columns whose RMS is below [`RESIDUAL_RELATIVE_FLOOR`] times the RMS
    /// of the derivative are pure roundoff and are returned as zeros.
    pub fn target(&self, model: &Model, mode: TargetMode) -> DMatrix<f64> {
        let mut t = match mode {
            TargetMode::Residual => &self.derivative - model.predict(&self.phi),
            TargetMode::Structure => &self.derivative - &self.phi * model.fixed_part().transpose(),
        };
        for j in 0..t.ncols() {
            let scale = self.derivative.column(j).norm();
            if t.column(j).norm() <= RESIDUAL_RELATIVE_FLOOR * scale {
                t.column_mut(j).fill(0.0);
            }
        }
        t
    }

    pub fn cem(&self, model: &Model, mode: TargetMode) -> Result<CEMatrix> {
        let mut cem = compute_cem(&self.target(model, mode), &self.phi, model.library())?;
        cem.batch_index = self.index;
        Ok(cem)
    }
}

/// `r = ẋ − ΞΦ` on one batch, `(M − 1)×p`.
pub fn residual_dynamics(batch: &Batch, model: &Model) -> Result<DMatrix<f64>> {
    Ok(PreparedBatch::new(batch, model.library())?.target(model, TargetMode::Residual))
}

fn is_switch(pattern: &BinaryCEM, model: &Model, mode: TargetMode) -> bool {
    match mode {
        TargetMode::Residual => !pattern.is_zero(),
        TargetMode::Structure => *pattern != model.screened_support(),
    }
}

/// Single-batch switch test; returns the decision and the batch CEM.
pub fn detect(batch: &Batch, model: &Model, config: &DetectorConfig) -> Result<(bool, CEMatrix)> {
    let prepared = PreparedBatch::new(batch, model.library())?;
    let cem = prepared.cem(model, config.target)?;
    let pattern = threshold(&cem, &config.detection_policy());
    Ok((is_switch(&pattern, model, config.target), cem))
}

/// Per-row ordinary least squares of `targets` on the pattern's columns.
///
/// Each entry of `data` is an `(Φ, target)` pair; rows are stacked across
/// entries. Unsupported entries of the result are exactly zero.
pub fn least_squares_rows(
    data: &[(&DMatrix<f64>, &DMatrix<f64>)],
    library: &BasisLibrary,
    pattern: &BinaryCEM,
) -> Result<DMatrix<f64>> {
    let p = library.dim();
    let nf = library.len();
    if pattern.rows() != p || pattern.cols() != nf {
        return Err(Error::DimensionMismatch {
            context: "pattern shape",
            expected: p * nf,
            found: pattern.rows() * pattern.cols(),
        });
    }
    let total: usize = data.iter().map(|(phi, _)| phi.nrows()).sum();
    for (phi, target) in data {
        if phi.ncols() != nf || target.ncols() != p || phi.nrows() != target.nrows() {
            return Err(Error::DimensionMismatch {
                context: "least-squares data block",
                expected: nf,
                found: phi.ncols(),
            });
        }
    }
    let mut xi = DMatrix::zeros(p, nf);
    for row in 0..p {
        let cols = pattern.row_support(row);
        if cols.is_empty() {
            continue;
        }
        let row_name = library.derivative_name(row);
        if total < cols.len() + 1 {
            return Err(Error::InsufficientSamples {
                row: row_name,
                samples: total,
                unknowns: cols.len(),
            });
        }
        let mut x = DMatrix::zeros(total, cols.len());
        let mut y = DVector::zeros(total);
        let mut offset = 0;
        for (phi, target) in data {
            for m in 0..phi.nrows() {
                for (j, &c) in cols.iter().enumerate() {
                    x[(offset + m, j)] = phi[(m, c)];
                }
                y[offset + m] = target[(m, row)];
            }
            offset += phi.nrows();
        }
        let coef = solve_least_squares(x, y).map_err(|bad| Error::RankDeficient {
            row: row_name,
            columns: bad.iter().map(|&j| library.functions()[cols[j]].name.clone()).collect(),
        })?;
        for (j, &c) in cols.iter().enumerate() {
            xi[(row, c)] = coef[j];
        }
    }
    Ok(xi)
}

/// Householder QR on column-normalized `x`; on failure returns the local
/// indices of columns whose pivots vanished.
fn solve_least_squares(mut x: DMatrix<f64>, mut y: DVector<f64>) -> core::result::Result<DVector<f64>, Vec<usize>> {
    let s = x.ncols();
    let mut scale = DVector::zeros(s);
    for j in 0..s {
        let norm = x.column(j).norm();
        if norm == 0.0 {
            return Err(alloc::vec![j]);
        }
        scale[j] = norm;
        x.column_mut(j).scale_mut(1.0 / norm);
    }
    let qr = x.qr();
    let r = qr.r();
    let bad: Vec<usize> = (0..s).filter(|&j| r[(j, j)].abs() <= 1e-10).collect();
    if !bad.is_empty() {
        return Err(bad);
    }
    qr.q_tr_mul(&mut y);
    let qty = y.rows(0, s).into_owned();
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| (0..s).collect::<Vec<_>>())?;
    Ok(beta.component_div(&scale))
}

/// Residual fit on the given batches: row `i` regresses `r_i = ẋ_i − (ΞΦ)_i`
/// on the pattern's columns.
pub fn fit_residual(batches: &[Batch], model: &Model, pattern: &BinaryCEM) -> Result<ResidualModel> {
    let prepared = batches
        .iter()
        .map(|b| PreparedBatch::new(b, model.library()))
        .collect::<Result<Vec<_>>>()?;
    fit_prepared(&prepared, model, pattern, TargetMode::Residual)
}

fn fit_prepared(
    batches: &[PreparedBatch],
    model: &Model,
    pattern: &BinaryCEM,
    mode: TargetMode,
) -> Result<ResidualModel> {
    if pattern.is_zero() && mode == TargetMode::Residual {
        return Err(Error::InvalidParameter("residual fit needs a nonempty pattern".into()));
    }
    let targets: Vec<DMatrix<f64>> = batches.iter().map(|b| b.target(model, mode)).collect();
    let data: Vec<(&DMatrix<f64>, &DMatrix<f64>)> = batches.iter().zip(&targets).map(|(b, t)| (&b.phi, t)).collect();
    let fitted = least_squares_rows(&data, model.library(), pattern)?;
    match mode {
        TargetMode::Residual => Ok(ResidualModel {
            xi_r: fitted,
            support: pattern.clone(),
        }),
        TargetMode::Structure => {
            // The screened part is replaced wholesale: Ξ_r = new − old.
            let screened = model.xi() - model.fixed_part();
            let mut support = model.screened_support();
            for (i, n) in pattern.active() {
                support.set(i, n, true);
            }
            Ok(ResidualModel {
                xi_r: fitted - screened,
                support,
            })
        }
    }
}

/// Outcome of one detection episode.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionReport {
    pub switch_detected: bool,
    pub detection_batch: usize,
    pub detection_time: f64,
    /// Last batch consumed by the aggregation (the stabilization batch when
    /// a stable pattern was found).
    pub last_batch: usize,
    pub last_time: f64,
    /// Aggregation count `K` at stabilization.
    pub k_star: Option<usize>,
    pub detection_cem: CEMatrix,
    pub aggregated_cem: Option<CEMatrix>,
    /// Thresholded aggregated pattern after every aggregation step.
    pub pattern_history: Vec<BinaryCEM>,
    pub stable_pattern: Option<BinaryCEM>,
    pub residual: Option<ResidualModel>,
    pub model_before: Model,
    pub updated_model: Option<Model>,
}

impl DetectionReport {
    pub fn is_complete(&self) -> bool {
        self.updated_model.is_some()
    }

    /// Time units of data consumed from the detection batch's start through
    /// the last aggregated batch.
    pub fn data_used(&self) -> f64 {
        self.last_time - self.detection_time
    }
}

struct Episode {
    detection_cem: CEMatrix,
    detection_start: f64,
    state: AggregationState,
    batches: Vec<PreparedBatch>,
}

/// Streaming driver: scan batches under the current model, aggregate after a
/// detection, fit and boost once the pattern is stable, then resume.
pub struct OnlineDetector {
    model: Model,
    config: DetectorConfig,
    episode: Option<Episode>,
    last_cem: Option<CEMatrix>,
    dismissed: usize,
}

impl OnlineDetector {
    pub fn new(model: Model, config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            model,
            config,
            episode: None,
            last_cem: None,
            dismissed: 0,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn is_aggregating(&self) -> bool {
        self.episode.is_some()
    }

    /// Alarms whose stable pattern turned out to require no change.
    pub fn dismissed_alarms(&self) -> usize {
        self.dismissed
    }

    /// CEM of the most recently pushed batch.
    pub fn last_cem(&self) -> Option<&CEMatrix> {
        self.last_cem.as_ref()
    }

    /// Feeds one batch; returns a report when an episode completes.
    pub fn push(&mut self, batch: &Batch) -> Result<Option<DetectionReport>> {
        let prepared = PreparedBatch::new(batch, self.model.library())?;
        let cem = prepared.cem(&self.model, self.config.target)?;
        self.last_cem = Some(cem.clone());
        let policy = self.config.policy;

        let stable = match &mut self.episode {
            None => {
                let pattern = threshold(&cem, &self.config.detection_policy());
                if !is_switch(&pattern, &self.model, self.config.target) {
                    return Ok(None);
                }
                let d = self.config.stability_span;
                let mut state = if self.config.include_detection_cem {
                    AggregationState::new(d, self.config.scope)?
                } else {
                    AggregationState::seeded(d, self.config.scope, pattern)?
                };
                let stable = if self.config.include_detection_cem {
                    state.step(&cem, &policy)?
                } else {
                    None
                };
                self.episode = Some(Episode {
                    detection_cem: cem,
                    detection_start: prepared.start_time,
                    state,
                    batches: alloc::vec![prepared],
                });
                stable
            }
            Some(ep) => {
                ep.batches.push(prepared);
                ep.state.step(&cem, &policy)?
            }
        };

        let Some(stable) = stable else {
            let ep = self.episode.as_ref().expect("episode active");
            if self.config.max_batches.is_some_and(|m| ep.state.count() >= m) {
                return Ok(Some(self.abandon()));
            }
            return Ok(None);
        };
        let ep = self.episode.take().expect("episode active");
        if !is_switch(&stable.pattern, &self.model, self.config.target) {
            self.dismissed += 1;
            return Ok(None);
        }
        let residual = fit_prepared(&ep.batches, &self.model, &stable.pattern, self.config.target)?;
        let updated = self.model.boosted(&residual)?;
        let last = ep.batches.last().expect("nonempty");
        let report = DetectionReport {
            switch_detected: true,
            detection_batch: ep.batches[0].index,
            detection_time: ep.detection_start,
            last_batch: last.index,
            last_time: last.end_time,
            k_star: Some(stable.k_star),
            detection_cem: ep.detection_cem,
            aggregated_cem: ep.state.mean(),
            pattern_history: ep.state.history().to_vec(),
            stable_pattern: Some(stable.pattern),
            residual: Some(residual),
            model_before: self.model.clone(),
            updated_model: Some(updated.clone()),
        };
        self.model = updated;
        Ok(Some(report))
    }

    fn abandon(&mut self) -> DetectionReport {
        let ep = self.episode.take().expect("episode active");
        let last = ep.batches.last().expect("nonempty");
        DetectionReport {
            switch_detected: true,
            detection_batch: ep.batches[0].index,
            detection_time: ep.detection_start,
            last_batch: last.index,
            last_time: last.end_time,
            k_star: None,
            detection_cem: ep.detection_cem,
            aggregated_cem: ep.state.mean(),
            pattern_history: ep.state.history().to_vec(),
            stable_pattern: None,
            residual: None,
            model_before: self.model.clone(),
            updated_model: None,
        }
    }

    /// Ends the stream; an unfinished episode becomes an incomplete report.
    pub fn finish(mut self) -> (Model, Option<DetectionReport>) {
        let pending = self.episode.is_some().then(|| self.abandon());
        (self.model, pending)
    }
}

/// Runs the whole stream and collects every report, including a trailing
/// incomplete one.
pub fn run_online<'a, I>(stream: I, model: Model, config: DetectorConfig) -> Result<Vec<DetectionReport>>
where
    I: IntoIterator<Item = &'a Batch>,
{
    let mut det = OnlineDetector::new(model, config)?;
    let mut reports = Vec::new();
    for batch in stream {
        if let Some(r) = det.push(batch)? {
            reports.push(r);
        }
    }
    let (_, pending) = det.finish();
    reports.extend(pending);
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{BasisLibrary, Monomial};
    use crate::models::{integrate, lorenz63, RegimeSchedule, SimulationConfig};
    use crate::timeseries::{make_batches, Trajectory};
    use alloc::vec;
    use rand_chacha::ChaCha8Rng;
    use rand_core::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn l63_library() -> BasisLibrary {
        BasisLibrary::polynomial(3, 2, false).unwrap()
    }

    #[test]
    fn model_from_system_places_coefficients() {
        let m = Model::from_system(l63_library(), &lorenz63(10.0, 28.0, 8.0 / 3.0)).unwrap();
        assert_eq!(m.coefficient(0, "x"), Some(-10.0));
        assert_eq!(m.coefficient(1, "x"), Some(28.0));
        assert_eq!(m.coefficient(1, "x*z"), Some(-1.0));
        assert_eq!(m.coefficient(2, "x*y"), Some(1.0));
        assert_eq!(m.terms().len(), 7);
        let with_const = lorenz63(10.0, 28.0, 8.0 / 3.0).term(0, 1.0, Monomial::constant());
        assert!(matches!(
            Model::from_system(l63_library(), &with_const),
            Err(Error::TermNotInLibrary { .. })
        ));
    }

    #[test]
    fn zero_model_residual_of_ramp_is_one() {
        let lib = BasisLibrary::polynomial(1, 1, false).unwrap();
        let t = Trajectory::new(DMatrix::from_fn(11, 1, |i, _| i as f64 * 0.1), 0.1, 0.0).unwrap();
        let r = residual_dynamics(&Batch::new(t, 1), &Model::zeros(lib)).unwrap();
        assert_eq!(r.nrows(), 10);
        assert!(r.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn residual_of_smooth_trajectory_is_order_dt() {
        // x' = -x has solution e^{-t}; forward differences carry an O(dt) error.
        let lib = BasisLibrary::polynomial(1, 1, false).unwrap();
        let dt = 0.001;
        let t = Trajectory::new(DMatrix::from_fn(1001, 1, |i, _| libm::exp(-(i as f64) * dt)), dt, 0.0).unwrap();
        let model = Model::new(lib, DMatrix::from_element(1, 1, -1.0)).unwrap();
        let r = residual_dynamics(&Batch::new(t, 1), &model).unwrap();
        let max = r.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(max <= dt / 2.0 + 1e-9, "max = {max}");
    }

    #[test]
    fn lorenz63_regime_change_shows_in_y_residual() {
        let sched = RegimeSchedule::single(lorenz63(10.0, 38.0, 8.0 / 3.0));
        let traj = integrate(&sched, &SimulationConfig::new(1.0, 0, vec![1.0, 1.0, 1.0])).unwrap();
        let model = Model::from_system(l63_library(), &lorenz63(10.0, 28.0, 8.0 / 3.0)).unwrap();
        let r = residual_dynamics(&Batch::new(traj.clone(), 1), &model).unwrap();
        for m in 0..r.nrows() {
            assert!((r[(m, 1)] - 10.0 * traj.values()[(m, 0)]).abs() < 1e-8);
            assert!(r[(m, 0)].abs() < 1e-8 && r[(m, 2)].abs() < 1e-8);
        }
    }

    #[test]
    fn exact_single_column_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lib = BasisLibrary::polynomial(2, 2, false).unwrap();
        let states = DMatrix::from_fn(200, 2, |_, _| StandardNormal.sample(&mut rng));
        let phi = lib.evaluate(&states).unwrap();
        let target = DMatrix::from_fn(200, 2, |m, j| if j == 0 { 2.5 * phi[(m, 3)] } else { 0.0 });
        let pattern = BinaryCEM::from_entries(2, lib.len(), &[(0, 3)]);
        let xi = least_squares_rows(&[(&phi, &target)], &lib, &pattern).unwrap();
        assert!((xi[(0, 3)] - 2.5).abs() < 1e-10);
        assert_eq!(xi.iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn collinear_columns_are_reported_by_name() {
        let lib = BasisLibrary::polynomial(2, 1, false).unwrap();
        let states = DMatrix::from_fn(50, 2, |m, j| (m as f64) * if j == 0 { 1.0 } else { 2.0 });
        let phi = lib.evaluate(&states).unwrap();
        let target = DMatrix::from_element(50, 2, 1.0);
        let pattern = BinaryCEM::from_entries(2, 2, &[(1, 0), (1, 1)]);
        match least_squares_rows(&[(&phi, &target)], &lib, &pattern) {
            Err(Error::RankDeficient { row, columns }) => {
                assert_eq!(row, "dy/dt");
                assert!(!columns.is_empty());
            }
            other => panic!("expected rank deficiency, got {other:?}"),
        }
    }

    #[test]
    fn too_few_samples_is_reported() {
        let lib = BasisLibrary::polynomial(1, 2, true).unwrap();
        let phi = lib.evaluate(&DMatrix::from_row_slice(2, 1, &[1.0, 2.0])).unwrap();
        let target = DMatrix::from_element(2, 1, 1.0);
        let pattern = BinaryCEM::from_entries(1, 3, &[(0, 0), (0, 1), (0, 2)]);
        assert!(matches!(
            least_squares_rows(&[(&phi, &target)], &lib, &pattern),
            Err(Error::InsufficientSamples { .. })
        ));
    }

    fn l63_stream(rho2: f64, duration: f64, seed: u64) -> Vec<Batch> {
        let sched = RegimeSchedule::single(lorenz63(10.0, 28.0, 8.0 / 3.0))
            .then(20.0, lorenz63(10.0, rho2, 8.0 / 3.0))
            .unwrap();
        let traj = integrate(&sched, &SimulationConfig::new(duration, seed, vec![1.0, 1.0, 1.0])).unwrap();
        make_batches(&traj, 1.0).unwrap()
    }

    #[test]
    fn no_switch_gives_no_reports() {
        let batches = l63_stream(28.0, 30.0, 1);
        let model = Model::from_system(l63_library(), &lorenz63(10.0, 28.0, 8.0 / 3.0)).unwrap();
        let reports = run_online(&batches, model, DetectorConfig::new(1.0)).unwrap();
        assert!(reports.is_empty());
    }

    #[test]
    fn lorenz63_switch_is_found_and_fitted() {
        let batches = l63_stream(38.0, 40.0, 1);
        let model = Model::from_system(l63_library(), &lorenz63(10.0, 28.0, 8.0 / 3.0)).unwrap();
        let reports = run_online(&batches, model, DetectorConfig::new(1.0)).unwrap();
        assert_eq!(reports.len(), 1);
        let r = &reports[0];
        assert_eq!(r.detection_batch, 21);
        let x = r.model_before.library().index_by_name("x").unwrap();
        assert_eq!(r.stable_pattern.as_ref().unwrap().active(), [(1, x)]);
        let rho = r.updated_model.as_ref().unwrap().coefficient(1, "x").unwrap();
        assert!((rho - 38.0).abs() < 1e-6, "rho = {rho}");
    }

    #[test]
    fn incomplete_episode_is_reported_without_fit() {
        let batches = l63_stream(38.0, 22.0, 1);
        let model = Model::from_system(l63_library(), &lorenz63(10.0, 28.0, 8.0 / 3.0)).unwrap();
        let reports = run_online(&batches, model, DetectorConfig::new(1.0)).unwrap();
        assert_eq!(reports.len(), 1);
        assert!(reports[0].switch_detected);
        assert!(reports[0].stable_pattern.is_none() && reports[0].updated_model.is_none());
    }

    #[test]
    fn detection_on_pure_noise_residuals_is_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let lib = l63_library();
        let mut x = DMatrix::zeros(1000, 3);
        for m in 1..1000 {
            for j in 0..3 {
                x[(m, j)] = x[(m - 1, j)] + 0.03 * Distribution::<f64>::sample(&StandardNormal, &mut rng);
            }
        }
        let batch = Batch::new(Trajectory::new(x, 0.001, 0.0).unwrap(), 1);
        let (switch, _) = detect(&batch, &Model::zeros(lib), &DetectorConfig::new(1.0)).unwrap();
        assert!(!switch);
    }
}
