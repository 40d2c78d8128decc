//! Filtering, smoothing and posterior path sampling of hidden states in a
//! conditionally Gaussian polynomial system.
//!
//! The system splits into observed states `u` and hidden states `v`:
//!
//! ```text
//! du = (A0(u) + A1(u) v) dt + σ_o dW_o
//! dv = (a0(u) + a1(u) v) dt + σ_h dW_h
//! ```
//!
//! On the Euler grid the observed increment `Δu_m − A0(u_m) dt` is a linear
//! observation of `v_m` with noise covariance `σ_o σ_oᵀ dt`, and the hidden
//! state moves by `v_{m+1} = (I + a1 dt) v_m + a0 dt + σ_h √dt ξ`. Filter,
//! smoother and sampler are the exact Gaussian recursions of that discrete
//! model.

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use rand_core::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

use crate::basis::Monomial;
use crate::boost::Model;
use crate::error::{Error, Result};
use crate::linalg::{inverse_psd, min_eigenvalue, psd_sqrt, solve_right_psd, symmetrize};
use crate::models::SdeSystem;
use crate::timeseries::{Batch, Trajectory};

/// Relative tolerance on negative covariance eigenvalues.
pub const PSD_TOLERANCE: f64 = 1e-9;

/// A term `coef · g(u) · v_h` (`hidden = Some(h)`) or `coef · g(u)`.
#[derive(Debug, Clone, PartialEq)]
struct SplitTerm {
    coef: f64,
    observed_factor: Monomial,
    hidden: Option<usize>,
}

/// Drift of a block of rows as `b(u) + B(u) v`.
#[derive(Debug, Clone, PartialEq)]
struct AffineBlock {
    rows: Vec<Vec<SplitTerm>>,
}

impl AffineBlock {
    fn eval(&self, u: &[f64], hidden_dim: usize) -> (DVector<f64>, DMatrix<f64>) {
        let mut b = DVector::zeros(self.rows.len());
        let mut m = DMatrix::zeros(self.rows.len(), hidden_dim);
        for (i, terms) in self.rows.iter().enumerate() {
            for t in terms {
                let g = t.coef * t.observed_factor.eval(u);
                match t.hidden {
                    None => b[i] += g,
                    Some(h) => m[(i, h)] += g,
                }
            }
        }
        (b, m)
    }

    fn depends_on_observed(&self) -> bool {
        self.rows.iter().flatten().any(|t| !t.observed_factor.is_constant())
    }
}

/// Conditional-Gaussian decomposition of a polynomial system.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalGaussianSpec {
    observed: Vec<usize>,
    hidden: Vec<usize>,
    observed_drift: AffineBlock,
    hidden_drift: AffineBlock,
    /// `σ_o σ_oᵀ`.
    observed_cov: DMatrix<f64>,
    /// `σ_h σ_hᵀ`.
    hidden_cov: DMatrix<f64>,
    var_names: Vec<alloc::string::String>,
}

impl ConditionalGaussianSpec {
    /// Splits drift terms given as `(row, coef, monomial)` over the full state.
    pub fn from_terms(
        terms: &[(usize, f64, Monomial)],
        noise: &DMatrix<f64>,
        observed: &[usize],
        var_names: Vec<alloc::string::String>,
    ) -> Result<Self> {
        let p = noise.nrows();
        if var_names.len() != p {
            return Err(Error::DimensionMismatch {
                context: "variable names",
                expected: p,
                found: var_names.len(),
            });
        }
        let mut is_obs = vec![false; p];
        for &i in observed {
            if i >= p || is_obs[i] {
                return Err(Error::InvalidParameter(format!("invalid observed index {i}")));
            }
            is_obs[i] = true;
        }
        let hidden: Vec<usize> = (0..p).filter(|&i| !is_obs[i]).collect();
        if observed.is_empty() || hidden.is_empty() {
            return Err(Error::InvalidParameter(
                "both observed and hidden components are required".into(),
            ));
        }
        let mut local = vec![0usize; p];
        for (k, &i) in observed.iter().enumerate() {
            local[i] = k;
        }
        for (k, &i) in hidden.iter().enumerate() {
            local[i] = k;
        }
        let mut obs_rows = vec![Vec::new(); observed.len()];
        let mut hid_rows = vec![Vec::new(); hidden.len()];
        for (row, coef, mono) in terms {
            if *coef == 0.0 {
                continue;
            }
            if *row >= p || mono.max_index().is_some_and(|i| i >= p) {
                return Err(Error::DimensionMismatch {
                    context: "drift term index",
                    expected: p,
                    found: (*row).max(mono.max_index().unwrap_or(0)) + 1,
                });
            }
            let mut obs_factors = Vec::new();
            let mut hid: Option<usize> = None;
            for &(i, e) in mono.factors() {
                if is_obs[i] {
                    obs_factors.push((local[i], e));
                } else if e == 1 && hid.is_none() {
                    hid = Some(local[i]);
                } else {
                    return Err(Error::NotConditionallyGaussian(format!(
                        "term {} in the equation for {} is nonlinear in hidden states",
                        mono.name(&var_names),
                        var_names[*row]
                    )));
                }
            }
            let term = SplitTerm {
                coef: *coef,
                observed_factor: Monomial::from_exponents(&obs_factors),
                hidden: hid,
            };
            if is_obs[*row] {
                obs_rows[local[*row]].push(term);
            } else {
                hid_rows[local[*row]].push(term);
            }
        }
        let sel = |rows: &[usize]| DMatrix::from_fn(rows.len(), noise.ncols(), |i, j| noise[(rows[i], j)]);
        let so = sel(observed);
        let sh = sel(&hidden);
        let cross = &so * sh.transpose();
        if cross.iter().any(|v| *v != 0.0) {
            return Err(Error::NotConditionallyGaussian(
                "observed and hidden noises are correlated".into(),
            ));
        }
        let observed_cov = &so * so.transpose();
        if observed_cov.clone().cholesky().is_none() {
            return Err(Error::InvalidParameter("observed noise covariance is singular".into()));
        }
        Ok(Self {
            observed: observed.to_vec(),
            hidden,
            observed_drift: AffineBlock { rows: obs_rows },
            hidden_drift: AffineBlock { rows: hid_rows },
            observed_cov,
            hidden_cov: &sh * sh.transpose(),
            var_names,
        })
    }

    pub fn from_system(system: &SdeSystem, observed: &[usize]) -> Result<Self> {
        let terms: Vec<_> = system
            .drift
            .iter()
            .map(|t| (t.row, t.coef, t.monomial.clone()))
            .collect();
        Self::from_terms(&terms, &system.noise, observed, system.var_names.clone())
    }

    /// Uses the model's coefficients as the drift and `noise` as `σ`.
    pub fn from_model(model: &Model, noise: &DMatrix<f64>, observed: &[usize]) -> Result<Self> {
        let lib = model.library();
        let mut terms = Vec::new();
        for i in 0..model.dim() {
            for (n, f) in lib.functions().iter().enumerate() {
                let c = model.xi()[(i, n)];
                if c != 0.0 {
                    terms.push((i, c, f.monomial.clone()));
                }
            }
        }
        Self::from_terms(&terms, noise, observed, lib.var_names().to_vec())
    }

    pub fn observed(&self) -> &[usize] {
        &self.observed
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden.len()
    }

    pub fn hidden_names(&self) -> Vec<alloc::string::String> {
        self.hidden.iter().map(|&i| self.var_names[i].clone()).collect()
    }

    /// `(A0(u), A1(u))`.
    pub fn observed_coefficients(&self, u: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        self.observed_drift.eval(u, self.hidden_dim())
    }

    /// `(a0(u), a1(u))`.
    pub fn hidden_coefficients(&self, u: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        self.hidden_drift.eval(u, self.hidden_dim())
    }

    /// Stationary law of the discretized hidden dynamics, available when
    /// they do not depend on the observed states.
    pub fn stationary_prior(&self, dt: f64) -> Result<GaussianState> {
        if self.hidden_drift.depends_on_observed() {
            return Err(Error::InvalidParameter(
                "hidden dynamics depend on observed states; give an explicit prior".into(),
            ));
        }
        let u0 = vec![0.0; self.observed.len()];
        let (a0, a1) = self.hidden_coefficients(&u0);
        let n = self.hidden_dim();
        let f = DMatrix::identity(n, n) + &a1 * dt;
        let q = &self.hidden_cov * dt;
        // vec(P) = (I − F⊗F)⁻¹ vec(Q)
        let ff = f.kronecker(&f);
        let lhs = DMatrix::identity(n * n, n * n) - ff;
        let vec_q = DVector::from_column_slice(q.as_slice());
        let vec_p = lhs
            .lu()
            .solve(&vec_q)
            .ok_or_else(|| Error::InvalidParameter("hidden dynamics are not stable".into()))?;
        let mut cov = DMatrix::from_column_slice(n, n, vec_p.as_slice());
        symmetrize(&mut cov);
        if min_eigenvalue(&cov) < -PSD_TOLERANCE * cov.trace().abs().max(1.0) {
            return Err(Error::InvalidParameter("hidden dynamics are not stable".into()));
        }
        let mean = a1
            .lu()
            .solve(&(-&a0))
            .ok_or_else(|| Error::InvalidParameter("hidden drift matrix is singular".into()))?;
        Ok(GaussianState { mean, cov })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Forward-pass statistics on every grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutput {
    /// `p(v_m | y_0..y_{m−1})`.
    pub predicted: Vec<GaussianState>,
    /// `p(v_m | y_0..y_m)`; the last point has no observation of its own.
    pub filtered: Vec<GaussianState>,
    /// `I + a1(u_m) dt` used to propagate from `m` to `m + 1`.
    pub transitions: Vec<DMatrix<f64>>,
    pub dt: f64,
}

impl FilterOutput {
    pub fn len(&self) -> usize {
        self.filtered.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filtered.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmootherOutput {
    pub means: DMatrix<f64>,
    pub covs: Vec<DMatrix<f64>>,
}

/// `v_m | v_{m+1} ~ N(gain · v_{m+1} + offset, cov)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelStep {
    pub gain: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Backward Markov representation of the posterior over the hidden path:
/// the last state's law plus one conditional step per earlier grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardKernel {
    pub last: GaussianState,
    /// `steps[m]` gives `v_m` from `v_{m+1}`.
    pub steps: Vec<KernelStep>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledTrajectory {
    pub path: DMatrix<f64>,
    pub seed: u64,
}

fn check_psd(cov: &DMatrix<f64>, step: usize) -> Result<()> {
    let scale = cov.trace().abs().max(f64::MIN_POSITIVE);
    let ev = min_eigenvalue(cov);
    if ev < -PSD_TOLERANCE * scale {
        return Err(Error::NotPositiveSemiDefinite {
            step,
            min_eigenvalue: ev,
        });
    }
    Ok(())
}

fn observed_rows(spec: &ConditionalGaussianSpec, observed: &Trajectory) -> Result<Vec<Vec<f64>>> {
    if observed.dim() != spec.observed.len() {
        return Err(Error::DimensionMismatch {
            context: "observed series columns",
            expected: spec.observed.len(),
            found: observed.dim(),
        });
    }
    Ok((0..observed.len()).map(|m| observed.sample(m)).collect())
}

/// Kalman filter over the observed series, starting from `prior` at the
/// first grid point.
pub fn forward_filter(
    spec: &ConditionalGaussianSpec,
    observed: &Trajectory,
    prior: &GaussianState,
) -> Result<FilterOutput> {
    forward_filter_masked(spec, observed, prior, None)
}

/// Like [`forward_filter`], but the increment from step `m` to `m + 1` is
/// assimilated only where `use_increment[m]` holds; elsewhere the step is a
/// pure prediction.
pub fn forward_filter_masked(
    spec: &ConditionalGaussianSpec,
    observed: &Trajectory,
    prior: &GaussianState,
    use_increment: Option<&[bool]>,
) -> Result<FilterOutput> {
    let u = observed_rows(spec, observed)?;
    if let Some(mask) = use_increment {
        if mask.len() + 1 < u.len() {
            return Err(Error::DimensionMismatch {
                context: "increment mask",
                expected: u.len() - 1,
                found: mask.len(),
            });
        }
    }
    let n = spec.hidden_dim();
    if prior.mean.len() != n || prior.cov.shape() != (n, n) {
        return Err(Error::DimensionMismatch {
            context: "prior dimension",
            expected: n,
            found: prior.mean.len(),
        });
    }
    let dt = observed.dt();
    let r = &spec.observed_cov * dt;
    let q = &spec.hidden_cov * dt;
    let eye = DMatrix::<f64>::identity(n, n);
    let mut predicted = Vec::with_capacity(u.len());
    let mut filtered = Vec::with_capacity(u.len());
    let mut transitions = Vec::with_capacity(u.len().saturating_sub(1));
    let mut mean = prior.mean.clone();
    let mut cov = prior.cov.clone();
    for m in 0..u.len() {
        predicted.push(GaussianState {
            mean: mean.clone(),
            cov: cov.clone(),
        });
        if m + 1 == u.len() {
            filtered.push(GaussianState {
                mean: mean.clone(),
                cov: cov.clone(),
            });
            break;
        }
        if use_increment.is_some_and(|mask| !mask[m]) {
            filtered.push(GaussianState {
                mean: mean.clone(),
                cov: cov.clone(),
            });
            let (a0, a1) = spec.hidden_coefficients(&u[m]);
            let f = &eye + &a1 * dt;
            mean = &f * &mean + a0 * dt;
            cov = &f * &cov * f.transpose() + &q;
            symmetrize(&mut cov);
            transitions.push(f);
            continue;
        }
        let (a0_obs, a1_obs) = spec.observed_coefficients(&u[m]);
        let h = &a1_obs * dt;
        let du = DVector::from_iterator(u[m].len(), u[m].iter().zip(&u[m + 1]).map(|(a, b)| b - a));
        let y = du - &a0_obs * dt;
        let s = &h * &cov * h.transpose() + &r;
        let gain = solve_right_psd(&(&cov * h.transpose()), &s);
        mean += &gain * (y - &h * &mean);
        let ikh = &eye - &gain * &h;
        cov = &ikh * &cov * ikh.transpose() + &gain * &r * gain.transpose();
        symmetrize(&mut cov);
        check_psd(&cov, m)?;
        filtered.push(GaussianState {
            mean: mean.clone(),
            cov: cov.clone(),
        });

        let (a0, a1) = spec.hidden_coefficients(&u[m]);
        let f = &eye + &a1 * dt;
        mean = &f * &mean + a0 * dt;
        cov = &f * &cov * f.transpose() + &q;
        symmetrize(&mut cov);
        transitions.push(f);
    }
    Ok(FilterOutput {
        predicted,
        filtered,
        transitions,
        dt,
    })
}

/// Backward conditionals `v_m | v_{m+1}, y_0..y_m`.
pub fn backward_kernel(filter: &FilterOutput) -> BackwardKernel {
    let m_len = filter.len();
    let mut steps = Vec::with_capacity(m_len.saturating_sub(1));
    for m in 0..m_len.saturating_sub(1) {
        let pf = &filter.filtered[m];
        let pp = &filter.predicted[m + 1];
        let f = &filter.transitions[m];
        let gain = solve_right_psd(&(&pf.cov * f.transpose()), &pp.cov);
        let offset = &pf.mean - &gain * &pp.mean;
        let mut cov = &pf.cov - &gain * &pp.cov * gain.transpose();
        symmetrize(&mut cov);
        steps.push(KernelStep { gain, offset, cov });
    }
    BackwardKernel {
        last: filter.filtered[m_len - 1].clone(),
        steps,
    }
}

/// Rauch–Tung–Striebel fixed-interval smoother.
pub fn backward_smoother(filter: &FilterOutput) -> Result<SmootherOutput> {
    let len = filter.len();
    let n = filter.filtered[0].mean.len();
    let mut means = DMatrix::zeros(len, n);
    let mut covs = vec![DMatrix::zeros(n, n); len];
    let mut mean = filter.filtered[len - 1].mean.clone();
    let mut cov = filter.filtered[len - 1].cov.clone();
    means.row_mut(len - 1).copy_from(&mean.transpose());
    covs[len - 1] = cov.clone();
    for m in (0..len - 1).rev() {
        let pf = &filter.filtered[m];
        let pp = &filter.predicted[m + 1];
        let gain = solve_right_psd(&(&pf.cov * filter.transitions[m].transpose()), &pp.cov);
        mean = &pf.mean + &gain * (&mean - &pp.mean);
        cov = &pf.cov + &gain * (&cov - &pp.cov) * gain.transpose();
        symmetrize(&mut cov);
        check_psd(&cov, m)?;
        means.row_mut(m).copy_from(&mean.transpose());
        covs[m] = cov.clone();
    }
    Ok(SmootherOutput { means, covs })
}

/// One draw of the hidden path from its posterior given the observed series.
pub fn posterior_sample(kernel: &BackwardKernel, seed: u64) -> SampledTrajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = kernel.last.mean.len();
    let len = kernel.steps.len() + 1;
    let draw = |mean: DVector<f64>, cov: &DMatrix<f64>, rng: &mut ChaCha8Rng| {
        let z = DVector::from_fn(n, |_, _| -> f64 { StandardNormal.sample(rng) });
        mean + psd_sqrt(cov) * z
    };
    let mut path = DMatrix::zeros(len, n);
    let mut v = draw(kernel.last.mean.clone(), &kernel.last.cov, &mut rng);
    path.row_mut(len - 1).copy_from(&v.transpose());
    for m in (0..len - 1).rev() {
        let step = &kernel.steps[m];
        v = draw(&step.gain * &v + &step.offset, &step.cov, &mut rng);
        path.row_mut(m).copy_from(&v.transpose());
    }
    SampledTrajectory { path, seed }
}

/// How a sampled hidden path is paired with the observed increments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AugmentScheme {
    /// The sample conditions on every increment and every step is used
    /// downstream.
    Full,
    /// The sample conditions on even steps only and only odd steps are
    /// used downstream, so the derivative noise at a used step is
    /// independent of the sampled hidden state there.
    #[default]
    CrossFit,
}

/// Fills in hidden components of an observed-only batch with one posterior
/// sample drawn under `spec`, starting from its stationary prior.
///
/// The returned batch carries the full state in the original column order.
/// A sample conditioned on the very increment that forms the derivative at
/// the same step partly fits that increment's noise, which inflates the
/// causation entropy of every term the model couples to the hidden states;
/// [`AugmentScheme::CrossFit`] avoids this at the cost of half the steps.
pub fn augment_batch(
    observed: &Batch,
    spec: &ConditionalGaussianSpec,
    seed: u64,
    scheme: AugmentScheme,
) -> Result<Batch> {
    let dt = observed.data.dt();
    let len = observed.data.len();
    let prior = spec.stationary_prior(dt)?;
    let (filter, step_mask) = match scheme {
        AugmentScheme::Full => (forward_filter(spec, &observed.data, &prior)?, None),
        AugmentScheme::CrossFit => {
            let even: Vec<bool> = (0..len.saturating_sub(1)).map(|m| m % 2 == 0).collect();
            let odd: Vec<bool> = even.iter().map(|e| !e).collect();
            (
                forward_filter_masked(spec, &observed.data, &prior, Some(&even))?,
                Some(odd),
            )
        }
    };
    let sample = posterior_sample(&backward_kernel(&filter), seed);
    let p = spec.observed.len() + spec.hidden.len();
    let mut full = DMatrix::zeros(len, p);
    for (k, &i) in spec.observed.iter().enumerate() {
        full.set_column(i, &observed.data.values().column(k));
    }
    for (k, &i) in spec.hidden.iter().enumerate() {
        full.set_column(i, &sample.path.column(k));
    }
    let step_mask = match (step_mask, &observed.step_mask) {
        (Some(a), Some(b)) => Some(a.iter().zip(b).map(|(x, y)| *x && *y).collect()),
        (a, b) => a.or_else(|| b.clone()),
    };
    Ok(Batch {
        data: Trajectory::new(full, dt, observed.data.t0())?,
        index: observed.index,
        step_mask,
    })
}

/// Seed of batch `index` derived from a run seed.
pub fn batch_seed(run_seed: u64, index: usize) -> u64 {
    // splitmix64 step
    let mut z = run_seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Posterior covariance of the whole path implied by a backward kernel,
/// as a dense `(len·n)×(len·n)` matrix together with the mean.
pub fn kernel_joint(kernel: &BackwardKernel) -> (DVector<f64>, DMatrix<f64>) {
    let n = kernel.last.mean.len();
    let len = kernel.steps.len() + 1;
    let mut mean = DVector::zeros(len * n);
    let mut cov = DMatrix::zeros(len * n, len * n);
    let last = (len - 1) * n;
    mean.rows_mut(last, n).copy_from(&kernel.last.mean);
    cov.view_mut((last, last), (n, n)).copy_from(&kernel.last.cov);
    for m in (0..len - 1).rev() {
        let s = &kernel.steps[m];
        let (a, b) = (m * n, (m + 1) * n);
        let next_mean = mean.rows(b, n).into_owned();
        mean.rows_mut(a, n).copy_from(&(&s.gain * next_mean + &s.offset));
        // Cov(v_m, v_k) = G Cov(v_{m+1}, v_k) for k > m
        let tail = cov.view((b, b), (n, (len - m - 1) * n)).into_owned();
        let cross = &s.gain * tail;
        cov.view_mut((a, b), (n, (len - m - 1) * n)).copy_from(&cross);
        cov.view_mut((b, a), ((len - m - 1) * n, n))
            .copy_from(&cross.transpose());
        let own = &s.gain * cov.view((b, b), (n, n)) * s.gain.transpose() + &s.cov;
        cov.view_mut((a, a), (n, n)).copy_from(&own);
    }
    (mean, cov)
}

/// Hidden-state covariance inverse, exposed for diagnostics.
pub fn precision(cov: &DMatrix<f64>) -> DMatrix<f64> {
    inverse_psd(cov)
}

impl core::fmt::Display for ConditionalGaussianSpec {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        let names = |idx: &[usize]| {
            idx.iter()
                .map(|&i| self.var_names[i].to_string())
                .collect::<Vec<_>>()
                .join(", ")
        };
        write!(
            f,
            "observed [{}], hidden [{}]",
            names(&self.observed),
            names(&self.hidden)
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::default_var_names;
    use crate::models::{integrate, spekf, RegimeSchedule, SimulationConfig, SpekfParams};
    use crate::models::{SPEKF_GAMMA, SPEKF_UI, SPEKF_UR};

    /// du = (c·v) dt + s_o dW, dv = −d·v dt + s_h dW.
    fn scalar_spec(c: f64, d: f64, s_o: f64, s_h: f64) -> ConditionalGaussianSpec {
        let terms = vec![(0, c, Monomial::var(1)), (1, -d, Monomial::var(1))];
        let noise = DMatrix::from_row_slice(2, 2, &[s_o, 0.0, 0.0, s_h]);
        ConditionalGaussianSpec::from_terms(&terms, &noise, &[0], default_var_names(2)).unwrap()
    }

    fn simulate(spec_sys: &SdeSystem, len: usize, seed: u64) -> Trajectory {
        let cfg = SimulationConfig {
            burn_in: 5.0,
            ..SimulationConfig::new(len as f64 * 0.001, seed, vec![0.0; spec_sys.dim()])
        };
        integrate(&RegimeSchedule::single(spec_sys.clone()), &cfg).unwrap()
    }

    fn scalar_system(c: f64, d: f64, s_o: f64, s_h: f64) -> SdeSystem {
        SdeSystem::new(
            "toy",
            default_var_names(2),
            DMatrix::from_row_slice(2, 2, &[s_o, 0.0, 0.0, s_h]),
        )
        .unwrap()
        .term(0, c, Monomial::var(1))
        .term(1, -d, Monomial::var(1))
    }

    #[test]
    fn stationary_prior_is_fixed_point_of_prediction() {
        let spec = scalar_spec(1.0, 0.7, 0.1, 0.4);
        let prior = spec.stationary_prior(0.001).unwrap();
        let f = 1.0 - 0.7 * 0.001;
        let next = f * f * prior.cov[(0, 0)] + 0.16 * 0.001;
        assert!((next - prior.cov[(0, 0)]).abs() < 1e-14);
        assert!((prior.cov[(0, 0)] - 0.16 / 1.4).abs() < 1e-4);
    }

    #[test]
    fn uninformative_observations_keep_stationary_law() {
        let spec = scalar_spec(1.0, 0.5, 1e6, 0.5);
        let sys = scalar_system(1.0, 0.5, 0.2, 0.5);
        let traj = simulate(&sys, 300, 3);
        let obs = traj.select_columns(&[0]).unwrap();
        let prior = spec.stationary_prior(obs.dt()).unwrap();
        let filt = forward_filter(&spec, &obs, &prior).unwrap();
        let smooth = backward_smoother(&filt).unwrap();
        for m in 0..filt.len() {
            assert!((filt.filtered[m].cov[(0, 0)] - prior.cov[(0, 0)]).abs() < 1e-9);
            assert!((smooth.covs[m][(0, 0)] - prior.cov[(0, 0)]).abs() < 1e-9);
            assert!(smooth.means[(m, 0)].abs() < 1e-6);
        }
    }

    #[test]
    fn strongly_observed_constant_is_recovered() {
        // v held at 2 with no hidden noise; du = v dt + 0.01 dW
        let spec = scalar_spec(1.0, 0.0, 0.01, 0.0);
        let dt = 0.001;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut u = vec![0.0];
        for _ in 0..1000 {
            let z: f64 = StandardNormal.sample(&mut rng);
            let last = *u.last().unwrap();
            u.push(last + 2.0 * dt + 0.01 * libm::sqrt(dt) * z);
        }
        let obs = Trajectory::new(DMatrix::from_vec(u.len(), 1, u), dt, 0.0).unwrap();
        let prior = GaussianState {
            mean: DVector::from_element(1, 0.0),
            cov: DMatrix::from_element(1, 1, 10.0),
        };
        let filt = forward_filter(&spec, &obs, &prior).unwrap();
        let last = filt.filtered.last().unwrap();
        assert!((last.mean[0] - 2.0).abs() < 0.05, "mean = {}", last.mean[0]);
    }

    #[test]
    fn smoother_matches_filter_at_final_point_and_is_tighter() {
        let spec = scalar_spec(1.0, 0.5, 0.05, 0.5);
        let traj = simulate(&scalar_system(1.0, 0.5, 0.05, 0.5), 400, 8);
        let obs = traj.select_columns(&[0]).unwrap();
        let filt = forward_filter(&spec, &obs, &spec.stationary_prior(obs.dt()).unwrap()).unwrap();
        let smooth = backward_smoother(&filt).unwrap();
        let last = filt.len() - 1;
        assert_eq!(smooth.means[(last, 0)], filt.filtered[last].mean[0]);
        assert_eq!(smooth.covs[last], filt.filtered[last].cov);
        for m in 0..filt.len() {
            assert!(smooth.covs[m][(0, 0)] <= filt.filtered[m].cov[(0, 0)] * (1.0 + 1e-8));
        }
    }

    #[test]
    fn zero_hidden_noise_sample_equals_smoother_mean() {
        let spec = scalar_spec(1.0, 0.3, 0.05, 0.0);
        let traj = simulate(&scalar_system(1.0, 0.3, 0.05, 0.2), 200, 4);
        let obs = traj.select_columns(&[0]).unwrap();
        let prior = GaussianState {
            mean: DVector::from_element(1, 0.0),
            cov: DMatrix::from_element(1, 1, 0.0),
        };
        let filt = forward_filter(&spec, &obs, &prior).unwrap();
        let smooth = backward_smoother(&filt).unwrap();
        let sample = posterior_sample(&backward_kernel(&filt), 11);
        for m in 0..filt.len() {
            assert!((sample.path[(m, 0)] - smooth.means[(m, 0)]).abs() < 1e-12);
        }
    }

    #[test]
    fn kernel_joint_marginals_equal_smoother() {
        let spec = scalar_spec(0.8, 0.5, 0.05, 0.5);
        let traj = simulate(&scalar_system(0.8, 0.5, 0.05, 0.5), 50, 2);
        let obs = traj.select_columns(&[0]).unwrap();
        let filt = forward_filter(&spec, &obs, &spec.stationary_prior(obs.dt()).unwrap()).unwrap();
        let smooth = backward_smoother(&filt).unwrap();
        let (mean, cov) = kernel_joint(&backward_kernel(&filt));
        for m in 0..filt.len() {
            assert!((mean[m] - smooth.means[(m, 0)]).abs() < 1e-10);
            assert!((cov[(m, m)] - smooth.covs[m][(0, 0)]).abs() < 1e-12);
        }
    }

    #[test]
    fn sampler_is_seed_deterministic() {
        let spec = scalar_spec(1.0, 0.5, 0.05, 0.5);
        let traj = simulate(&scalar_system(1.0, 0.5, 0.05, 0.5), 100, 1);
        let obs = traj.select_columns(&[0]).unwrap();
        let filt = forward_filter(&spec, &obs, &spec.stationary_prior(obs.dt()).unwrap()).unwrap();
        let k = backward_kernel(&filt);
        assert_eq!(posterior_sample(&k, 3), posterior_sample(&k, 3));
        assert_ne!(posterior_sample(&k, 3).path, posterior_sample(&k, 4).path);
    }

    #[test]
    fn nonlinear_hidden_terms_are_rejected() {
        let terms = vec![(0, 1.0, Monomial::from_indices(&[1, 1]))];
        let noise = DMatrix::identity(2, 2);
        assert!(matches!(
            ConditionalGaussianSpec::from_terms(&terms, &noise, &[0], default_var_names(2)),
            Err(Error::NotConditionallyGaussian(_))
        ));
    }

    #[test]
    fn spekf_decomposition_matches_drift() {
        let p = SpekfParams::default();
        let sys = spekf(&p);
        let spec = ConditionalGaussianSpec::from_system(&sys, &[SPEKF_UR, SPEKF_UI]).unwrap();
        assert_eq!(spec.hidden(), &[2, 3, 4, 5]);
        let x = [0.3, -1.2, 0.4, -0.7, 0.25, 1.5];
        let (a0, a1) = spec.observed_coefficients(&x[..2]);
        let v = DVector::from_column_slice(&x[2..]);
        let d = &a0 + &a1 * &v;
        let truth = sys.drift_at(&x);
        assert!((d[0] - truth[0]).abs() < 1e-12 && (d[1] - truth[1]).abs() < 1e-12);
        let (h0, h1) = spec.hidden_coefficients(&x[..2]);
        let dh = h0 + h1 * v;
        for k in 0..4 {
            assert!((dh[k] - truth[k + 2]).abs() < 1e-12);
        }
    }

    #[test]
    fn spekf_damping_is_tracked() {
        let p = SpekfParams::default();
        let sys = spekf(&p);
        let spec = ConditionalGaussianSpec::from_system(&sys, &[SPEKF_UR, SPEKF_UI]).unwrap();
        let traj = simulate(&sys, 40_000, 12);
        let obs = traj.select_columns(&[SPEKF_UR, SPEKF_UI]).unwrap();
        let filt = forward_filter(&spec, &obs, &spec.stationary_prior(obs.dt()).unwrap()).unwrap();
        let smooth = backward_smoother(&filt).unwrap();
        let truth: Vec<f64> = traj.values().column(SPEKF_GAMMA).iter().copied().collect();
        let est: Vec<f64> = smooth.means.column(0).iter().copied().collect();
        let corr = correlation(&truth, &est);
        assert!(corr > 0.5, "corr = {corr}");
    }

    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
        for (x, y) in a.iter().zip(b) {
            sab += (x - ma) * (y - mb);
            saa += (x - ma) * (x - ma);
            sbb += (y - mb) * (y - mb);
        }
        sab / libm::sqrt(saa * sbb)
    }

    #[test]
    fn augmented_batch_keeps_observed_columns() {
        let sys = spekf(&SpekfParams::default());
        let spec = ConditionalGaussianSpec::from_system(&sys, &[SPEKF_UR, SPEKF_UI]).unwrap();
        let traj = simulate(&sys, 500, 6);
        let obs = Batch::new(traj.select_columns(&[SPEKF_UR, SPEKF_UI]).unwrap(), 3);
        let full = augment_batch(&obs, &spec, batch_seed(1, 3), AugmentScheme::CrossFit).unwrap();
        assert_eq!(full.data.dim(), 6);
        assert_eq!(full.index, 3);
        assert_eq!(full.data.values().column(0), traj.values().column(0));
        assert_eq!(full.data.values().column(1), traj.values().column(1));
        let mask = full.step_mask.unwrap();
        assert_eq!(mask.len(), 499);
        assert!(!mask[0] && mask[1] && !mask[2]);
    }
}
