//! Polynomial SDE systems, regime schedules and a seeded Euler–Maruyama
//! integrator, with constructors for the four benchmark systems.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;
use rand_chacha::ChaCha8Rng;
use rand_core::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

use crate::basis::{default_var_names, BasisLibrary, Monomial};
use crate::error::{Error, Result};
use crate::timeseries::Trajectory;

/// One drift term `coef · monomial(x)` contributing to `dx_row/dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftTerm {
    pub row: usize,
    pub coef: f64,
    pub monomial: Monomial,
}

/// `dx/dt = f(x) + σ dW/dt` with a polynomial drift `f`.
#[derive(Debug, Clone, PartialEq)]
pub struct SdeSystem {
    pub name: String,
    pub var_names: Vec<String>,
    pub drift: Vec<DriftTerm>,
    /// `p×q` noise matrix; `q` may be zero.
    pub noise: DMatrix<f64>,
    pub params: Vec<(String, f64)>,
}

impl SdeSystem {
    pub fn new(name: &str, var_names: Vec<String>, noise: DMatrix<f64>) -> Result<Self> {
        if noise.nrows() != var_names.len() {
            return Err(Error::DimensionMismatch {
                context: "noise matrix rows",
                expected: var_names.len(),
                found: noise.nrows(),
            });
        }
        if noise.ncols() > noise.nrows() {
            return Err(Error::InvalidParameter(format!(
                "noise matrix has {} columns for {} states",
                noise.ncols(),
                noise.nrows()
            )));
        }
        if noise.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("noise matrix has non-finite entries".into()));
        }
        Ok(Self {
            name: name.to_string(),
            var_names,
            drift: Vec::new(),
            noise,
            params: Vec::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.var_names.len()
    }

    /// Adds `coef · monomial` to row `row`; zero coefficients are skipped.
    pub fn term(mut self, row: usize, coef: f64, monomial: Monomial) -> Self {
        if coef != 0.0 {
            self.drift.push(DriftTerm { row, coef, monomial });
        }
        self
    }

    pub fn param(mut self, name: &str, value: f64) -> Self {
        self.params.push((name.to_string(), value));
        self
    }

    pub fn param_value(&self, name: &str) -> Option<f64> {
        self.params.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }

    pub fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for t in &self.drift {
            out[t.row] += t.coef * t.monomial.eval(x);
        }
    }

    pub fn drift_at(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.drift_into(x, &mut out);
        out
    }

    fn validate(&self) -> Result<()> {
        let p = self.dim();
        for t in &self.drift {
            if t.row >= p || t.monomial.max_index().is_some_and(|i| i >= p) {
                return Err(Error::DimensionMismatch {
                    context: "drift term index",
                    expected: p,
                    found: t.row.max(t.monomial.max_index().unwrap_or(0)) + 1,
                });
            }
            if !t.coef.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "non-finite drift coefficient in row {}",
                    t.row
                )));
            }
        }
        Ok(())
    }
}

/// Piecewise-constant sequence of systems over time.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimeSchedule {
    segments: Vec<(f64, SdeSystem)>,
}

impl RegimeSchedule {
    pub fn single(system: SdeSystem) -> Self {
        Self {
            segments: vec![(f64::NEG_INFINITY, system)],
        }
    }

    /// Appends a regime that takes over at `t_switch`.
    pub fn then(mut self, t_switch: f64, system: SdeSystem) -> Result<Self> {
        let last = self.segments.last().map(|s| s.0).unwrap_or(f64::NEG_INFINITY);
        if !(t_switch > last) || !t_switch.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "switch times must be finite and strictly increasing, got {t_switch} after {last}"
            )));
        }
        if system.dim() != self.segments[0].1.dim() {
            return Err(Error::DimensionMismatch {
                context: "regime dimension",
                expected: self.segments[0].1.dim(),
                found: system.dim(),
            });
        }
        self.segments.push((t_switch, system));
        Ok(self)
    }

    pub fn segments(&self) -> &[(f64, SdeSystem)] {
        &self.segments
    }

    pub fn switch_times(&self) -> Vec<f64> {
        self.segments.iter().skip(1).map(|s| s.0).collect()
    }

    pub fn dim(&self) -> usize {
        self.segments[0].1.dim()
    }

    pub fn initial(&self) -> &SdeSystem {
        &self.segments[0].1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub dt: f64,
    pub duration: f64,
    pub seed: u64,
    pub initial_state: Vec<f64>,
    /// Simulated under the first regime and discarded before `t = 0`.
    pub burn_in: f64,
}

impl SimulationConfig {
    pub fn new(duration: f64, seed: u64, initial_state: Vec<f64>) -> Self {
        Self {
            dt: 0.001,
            duration,
            seed,
            initial_state,
            burn_in: 20.0,
        }
    }
}

/// Euler–Maruyama integration of a regime schedule.
///
/// Returns `round(duration/dt)` samples starting at `t = 0`. A regime with
/// switch time `t_s` drives every step taken from a grid point `t ≥ t_s`.
pub fn integrate(schedule: &RegimeSchedule, config: &SimulationConfig) -> Result<Trajectory> {
    let dt = config.dt;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidTimeStep(dt));
    }
    if !(config.duration >= dt) || !(config.burn_in >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "duration {} must be at least dt and burn-in {} nonnegative",
            config.duration, config.burn_in
        )));
    }
    let p = schedule.dim();
    if config.initial_state.len() != p {
        return Err(Error::DimensionMismatch {
            context: "initial state",
            expected: p,
            found: config.initial_state.len(),
        });
    }
    for (_, s) in schedule.segments() {
        s.validate()?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut x = config.initial_state.clone();
    let mut f = vec![0.0; p];
    let mut z = Vec::new();
    let sqrt_dt = libm::sqrt(dt);

    let mut step = |sys: &SdeSystem, x: &mut [f64], time: f64, rng: &mut ChaCha8Rng| -> Result<()> {
        sys.drift_into(x, &mut f);
        let q = sys.noise.ncols();
        z.clear();
        z.extend((0..q).map(|_| -> f64 { StandardNormal.sample(rng) }));
        for i in 0..p {
            let mut dw = 0.0;
            for (j, zj) in z.iter().enumerate() {
                dw += sys.noise[(i, j)] * zj;
            }
            x[i] += f[i] * dt + dw * sqrt_dt;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::BlowUp { time });
        }
        Ok(())
    };

    let burn_steps = libm::round(config.burn_in / dt) as usize;
    for m in 0..burn_steps {
        step(
            schedule.initial(),
            &mut x,
            (m as f64 - burn_steps as f64) * dt,
            &mut rng,
        )?;
    }

    let samples = libm::round(config.duration / dt) as usize;
    if samples < 2 {
        return Err(Error::TooFewSamples(samples));
    }
    // First grid index at which each regime is in force.
    let starts: Vec<usize> = schedule
        .segments()
        .iter()
        .map(|&(t, _)| {
            if t == f64::NEG_INFINITY {
                0
            } else {
                libm::ceil(t / dt - 1e-9).max(0.0) as usize
            }
        })
        .collect();
    let mut values = DMatrix::zeros(samples, p);
    let mut regime = 0;
    for m in 0..samples {
        for (j, v) in x.iter().enumerate() {
            values[(m, j)] = *v;
        }
        if m + 1 == samples {
            break;
        }
        while regime + 1 < starts.len() && m >= starts[regime + 1] {
            regime += 1;
        }
        step(&schedule.segments()[regime].1, &mut x, m as f64 * dt, &mut rng)?;
    }
    Trajectory::new(values, dt, 0.0)
}

pub fn lorenz63(sigma: f64, rho: f64, beta: f64) -> SdeSystem {
    let m = Monomial::from_indices;
    SdeSystem::new("l63", default_var_names(3), DMatrix::zeros(3, 0))
        .expect("static shape")
        .term(0, -sigma, m(&[0]))
        .term(0, sigma, m(&[1]))
        .term(1, rho, m(&[0]))
        .term(1, -1.0, m(&[1]))
        .term(1, -1.0, m(&[0, 2]))
        .term(2, 1.0, m(&[0, 1]))
        .term(2, -beta, m(&[2]))
        .param("sigma", sigma)
        .param("rho", rho)
        .param("beta", beta)
}

/// `dx_j/dt = (x_{j+1} − x_{j−2}) x_{j−1} + damping·x_j + F`, periodic in `j`.
pub fn lorenz96(j: usize, forcing: f64, damping: f64) -> Result<SdeSystem> {
    if j < 4 {
        return Err(Error::InvalidParameter(format!("Lorenz 96 needs J >= 4, got {j}")));
    }
    let mut sys = SdeSystem::new("l96", default_var_names(j), DMatrix::zeros(j, 0))?;
    for k in 0..j {
        let next = (k + 1) % j;
        let prev = (k + j - 1) % j;
        let prev2 = (k + j - 2) % j;
        sys = sys
            .term(k, 1.0, Monomial::from_indices(&[next, prev]))
            .term(k, -1.0, Monomial::from_indices(&[prev2, prev]))
            .term(k, damping, Monomial::var(k))
            .term(k, forcing, Monomial::constant());
    }
    Ok(sys.param("J", j as f64).param("F", forcing).param("damping", damping))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TopographicParams {
    pub d_v: f64,
    pub d_u: f64,
    pub beta: f64,
    pub omega1: f64,
    pub omega3: f64,
    pub sigma_v: f64,
    pub sigma_u: f64,
    /// `+1` gives `+β v₁` in `v̇₂` and `+β/2 v₃` in `v̇₄`; `-1` the opposite.
    pub rotation_sign: f64,
}

impl Default for TopographicParams {
    fn default() -> Self {
        let s2 = core::f64::consts::SQRT_2;
        Self {
            d_v: 0.05,
            d_u: 0.05,
            beta: 1.0,
            omega1: s2 / 2.0,
            omega3: s2 / 4.0,
            sigma_v: 1.0 / (20.0 * s2),
            sigma_u: 1.0 / s2,
            rotation_sign: 1.0,
        }
    }
}

impl TopographicParams {
    /// The strengthened topography after the switch.
    pub fn regime2() -> Self {
        let w = 3.0 * core::f64::consts::SQRT_2 / 2.0;
        Self {
            omega1: w,
            omega3: w,
            ..Self::default()
        }
    }
}

/// Two-layer topographic flow with states `(v1, v2, v3, v4, u)`.
pub fn topographic(params: &TopographicParams) -> SdeSystem {
    let TopographicParams {
        d_v,
        d_u,
        beta,
        omega1,
        omega3,
        sigma_v,
        sigma_u,
        rotation_sign: s,
    } = *params;
    let names = ["v1", "v2", "v3", "v4", "u"].iter().map(|n| n.to_string()).collect();
    let noise = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![
        sigma_v, sigma_v, sigma_v, sigma_v, sigma_u,
    ]));
    let m = Monomial::from_indices;
    let (v1, v2, v3, v4, u) = (0, 1, 2, 3, 4);
    SdeSystem::new("topo", names, noise)
        .expect("static shape")
        .term(v1, -d_v, m(&[v1]))
        .term(v1, -beta, m(&[v2]))
        .term(v1, 1.0, m(&[v2, u]))
        .term(v1, -2.0 * omega1, m(&[u]))
        .term(v2, -d_v, m(&[v2]))
        .term(v2, s * beta, m(&[v1]))
        .term(v2, -1.0, m(&[v1, u]))
        .term(v3, -d_v, m(&[v3]))
        .term(v3, -omega3, m(&[u]))
        .term(v3, -beta / 2.0, m(&[v4]))
        .term(v3, 2.0, m(&[v4, u]))
        .term(v4, -d_v, m(&[v4]))
        .term(v4, s * beta / 2.0, m(&[v3]))
        .term(v4, -2.0, m(&[v3, u]))
        .term(u, -d_u, m(&[u]))
        .term(u, omega1, m(&[v1]))
        .term(u, 2.0 * omega3, m(&[v3]))
        .param("d_v", d_v)
        .param("d_u", d_u)
        .param("beta", beta)
        .param("omega1", omega1)
        .param("omega3", omega3)
        .param("sigma_v", sigma_v)
        .param("sigma_u", sigma_u)
        .param("rotation_sign", s)
}

pub const SPEKF_VARS: [&str; 6] = ["ur", "ui", "gamma", "omega", "br", "bi"];
pub const SPEKF_UR: usize = 0;
pub const SPEKF_UI: usize = 1;
pub const SPEKF_GAMMA: usize = 2;
pub const SPEKF_OMEGA: usize = 3;
pub const SPEKF_BR: usize = 4;
pub const SPEKF_BI: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpekfParams {
    pub d_gamma: f64,
    pub d_omega: f64,
    pub d_b: f64,
    pub sigma_u: f64,
    pub sigma_gamma: f64,
    pub sigma_omega: f64,
    pub sigma_b: f64,
    pub gamma_hat: f64,
    pub omega_hat: f64,
    pub b_hat: f64,
    /// Whether `γ(t)` enters the `u` equation.
    pub gamma_active: bool,
    /// Whether `ω(t)` enters the `u` equation.
    pub omega_active: bool,
}

impl Default for SpekfParams {
    fn default() -> Self {
        Self {
            d_gamma: 0.2,
            d_omega: 0.2,
            d_b: 2.0,
            sigma_u: 0.05,
            sigma_gamma: 0.316,
            sigma_omega: 0.5,
            sigma_b: 3.5,
            gamma_hat: 0.6,
            omega_hat: 1.5,
            b_hat: 1.0,
            gamma_active: true,
            omega_active: true,
        }
    }
}

/// `du/dt = [−(γ + γ̂) + i(ω + ω̂)] u + b + b̂` with OU hidden processes,
/// split into the real states `(ur, ui, gamma, omega, br, bi)`. Complex
/// white noise carries `σ/√2` on each component.
pub fn spekf(params: &SpekfParams) -> SdeSystem {
    let SpekfParams {
        d_gamma,
        d_omega,
        d_b,
        sigma_u,
        sigma_gamma,
        sigma_omega,
        sigma_b,
        gamma_hat,
        omega_hat,
        b_hat,
        gamma_active,
        omega_active,
    } = *params;
    let h = core::f64::consts::FRAC_1_SQRT_2;
    let noise = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![
        sigma_u * h,
        sigma_u * h,
        sigma_gamma,
        sigma_omega,
        sigma_b * h,
        sigma_b * h,
    ]));
    let names = SPEKF_VARS.iter().map(|n| n.to_string()).collect();
    let m = Monomial::from_indices;
    let (ur, ui, g, w, br, bi) = (SPEKF_UR, SPEKF_UI, SPEKF_GAMMA, SPEKF_OMEGA, SPEKF_BR, SPEKF_BI);
    let ga = if gamma_active { 1.0 } else { 0.0 };
    let wa = if omega_active { 1.0 } else { 0.0 };
    SdeSystem::new("spekf", names, noise)
        .expect("static shape")
        .term(ur, -gamma_hat, m(&[ur]))
        .term(ur, -omega_hat, m(&[ui]))
        .term(ur, -ga, m(&[ur, g]))
        .term(ur, -wa, m(&[ui, w]))
        .term(ur, 1.0, m(&[br]))
        .term(ur, b_hat, Monomial::constant())
        .term(ui, -gamma_hat, m(&[ui]))
        .term(ui, omega_hat, m(&[ur]))
        .term(ui, -ga, m(&[ui, g]))
        .term(ui, wa, m(&[ur, w]))
        .term(ui, 1.0, m(&[bi]))
        .term(g, -d_gamma, m(&[g]))
        .term(w, -d_omega, m(&[w]))
        .term(br, -d_b, m(&[br]))
        .term(bi, -d_b, m(&[bi]))
        .param("d_gamma", d_gamma)
        .param("d_omega", d_omega)
        .param("d_b", d_b)
        .param("sigma_u", sigma_u)
        .param("sigma_gamma", sigma_gamma)
        .param("sigma_omega", sigma_omega)
        .param("sigma_b", sigma_b)
        .param("gamma_hat", gamma_hat)
        .param("omega_hat", omega_hat)
        .param("b_hat", b_hat)
        .param("gamma_active", ga)
        .param("omega_active", wa)
}

/// Library for the SPEKF `u` equations: every quadratic monomial of the
/// state plus the forcing `b`, with the mean-field terms `1`, `ur`, `ui`
/// and the bare `gamma`, `omega` kept outside the screened masks. Hidden
/// rows screen nothing, so their linear models stay fixed.
pub fn spekf_library() -> BasisLibrary {
    let names: Vec<String> = SPEKF_VARS.iter().map(|n| n.to_string()).collect();
    let lib = BasisLibrary::polynomial_named(names, 2, true).expect("static library");
    let fixed = [SPEKF_UR, SPEKF_UI, SPEKF_GAMMA, SPEKF_OMEGA];
    let masks = (0..SPEKF_VARS.len())
        .map(|row| {
            lib.functions()
                .iter()
                .map(|f| {
                    let m = &f.monomial;
                    let screened = !m.is_constant() && !(m.degree() == 1 && fixed.contains(&m.indices()[0]));
                    (row == SPEKF_UR || row == SPEKF_UI) && screened
                })
                .collect()
        })
        .collect();
    lib.with_row_masks(masks).expect("static masks")
}

/// Sample excess kurtosis of one column.
pub fn excess_kurtosis(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let (mut m2, mut m4) = (0.0, 0.0);
    for v in values {
        let d = v - mean;
        let d2 = d * d;
        m2 += d2;
        m4 += d2 * d2;
    }
    m2 /= n;
    m4 /= n;
    m4 / (m2 * m2) - 3.0
}
