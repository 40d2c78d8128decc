//! The four canonical regime-switching experiments and the streaming
//! driver shared by the `detect` and `experiment` commands.

use ceboost_core::assimilate::{augment_batch, batch_seed, AugmentScheme, ConditionalGaussianSpec};
use ceboost_core::centropy::AbsoluteFloor;
use ceboost_core::models::{
    lorenz63, lorenz96, spekf, spekf_library, topographic, SpekfParams, TopographicParams, SPEKF_UI, SPEKF_UR,
};
use ceboost_core::{
    detect, integrate, make_batches, BasisLibrary, Batch, CEMatrix, DetectionReport, DetectorConfig, Model,
    OnlineDetector, RegimeSchedule, SdeSystem, SimulationConfig, StabilityScope, Stencil, TargetMode, Trajectory,
};

use crate::config::{AugmentKind, Config, L96Stencil, SystemKind};
use crate::error::Result;

/// Hidden-state sampling applied to every batch before screening.
#[derive(Debug, Clone)]
pub struct Assimilation {
    pub spec: ConditionalGaussianSpec,
    pub scheme: AugmentScheme,
    pub seed: u64,
}

impl Assimilation {
    pub fn observed(&self) -> &[usize] {
        self.spec.observed()
    }

    pub fn augment(&self, batch: &Batch) -> Result<Batch> {
        Ok(augment_batch(
            batch,
            &self.spec,
            batch_seed(self.seed, batch.index),
            self.scheme,
        )?)
    }
}

/// A fully specified experiment: truth, library, reference model and
/// detector settings.
#[derive(Debug, Clone)]
pub struct Setup {
    pub kind: SystemKind,
    pub schedule: RegimeSchedule,
    pub sim: SimulationConfig,
    pub library: BasisLibrary,
    pub model: Model,
    pub detector: DetectorConfig,
    pub assimilation: Option<Assimilation>,
}

fn topo_params(cfg: &Config, after: bool) -> TopographicParams {
    let t = &cfg.topo;
    TopographicParams {
        d_v: t.d_v,
        d_u: t.d_u,
        beta: t.beta,
        omega1: if after { t.omega1_after } else { t.omega1 },
        omega3: if after { t.omega3_after } else { t.omega3 },
        sigma_v: t.sigma_v,
        sigma_u: t.sigma_u,
        rotation_sign: t.rotation_sign,
        ..TopographicParams::default()
    }
}

/// The regime sequence of a system under a configuration.
pub fn schedule(kind: SystemKind, cfg: &Config) -> Result<RegimeSchedule> {
    Ok(match kind {
        SystemKind::L63 => {
            let l = &cfg.l63;
            RegimeSchedule::single(lorenz63(l.sigma, l.rho, l.beta))
                .then(l.switch_time, lorenz63(l.sigma, l.rho_after, l.beta))?
        }
        SystemKind::L96 => {
            let l = &cfg.l96;
            RegimeSchedule::single(lorenz96(l.j, l.forcing, l.damping)?)
                .then(l.switch_time, lorenz96(l.j, l.forcing_after, l.damping_after)?)?
        }
        SystemKind::Topo => RegimeSchedule::single(topographic(&topo_params(cfg, false)))
            .then(cfg.topo.switch_time, topographic(&topo_params(cfg, true)))?,
        SystemKind::Spekf => {
            let p = cfg.spekf.params();
            RegimeSchedule::single(spekf(&p))
                .then(
                    cfg.spekf.switch_time,
                    spekf(&SpekfParams {
                        omega_active: false,
                        ..p
                    }),
                )?
                .then(
                    cfg.spekf.second_switch_time,
                    spekf(&SpekfParams {
                        gamma_active: false,
                        ..p
                    }),
                )?
        }
    })
}

pub fn library(kind: SystemKind, cfg: &Config) -> Result<BasisLibrary> {
    Ok(match kind {
        SystemKind::L63 => BasisLibrary::polynomial(3, 2, false)?,
        SystemKind::L96 => {
            let stencil = match cfg.l96.stencil {
                L96Stencil::Local => Stencil::lorenz96(),
                L96Stencil::Extended => Stencil::lorenz96_extended(),
            };
            BasisLibrary::localized(cfg.l96.j, &stencil, true)?
        }
        SystemKind::Topo => {
            let names = ["v1", "v2", "v3", "v4", "u"].iter().map(|s| s.to_string()).collect();
            BasisLibrary::polynomial_named(names, 2, false)?
        }
        SystemKind::Spekf => spekf_library(),
    })
}

fn initial_state(kind: SystemKind, cfg: &Config) -> Vec<f64> {
    match kind {
        SystemKind::L63 => cfg.l63.x0.to_vec(),
        SystemKind::L96 => {
            let mut x = vec![cfg.l96.forcing; cfg.l96.j];
            x[0] += 0.01;
            x
        }
        SystemKind::Topo => vec![0.0; 5],
        SystemKind::Spekf => vec![0.0; 6],
    }
}

/// Detector settings from the `[detector]` section.
pub fn detector_config(kind: SystemKind, cfg: &Config) -> DetectorConfig {
    let d = &cfg.detector;
    let mut out = DetectorConfig::new(cfg.batch_length(kind));
    out.stability_span = d.stability_span;
    out.policy.alpha = d.alpha;
    out.policy.floor = AbsoluteFloor::MedianScaled(d.c_abs_scale);
    out.policy.significance_z = d.aggregation_z;
    out.detection_z = d.detection_z;
    out.max_batches = d.max_batches;
    out.include_detection_cem = d.include_detection_cem;
    if d.per_row_stability {
        out.scope = StabilityScope::PerRow;
    }
    if kind == SystemKind::Spekf {
        out.target = TargetMode::Structure;
    }
    out
}

/// Conditional-Gaussian description used to sample hidden states: the
/// first-regime system with the `u` components observed.
pub fn assimilation(kind: SystemKind, cfg: &Config) -> Result<Option<Assimilation>> {
    if !cfg.assimilate(kind) {
        return Ok(None);
    }
    if kind != SystemKind::Spekf {
        return Err(crate::error::CliError::config(
            "detector.assimilate",
            format!("{kind} has no hidden states; assimilation applies to spekf only"),
        ));
    }
    let spec = ConditionalGaussianSpec::from_system(&spekf(&cfg.spekf.params()), &[SPEKF_UR, SPEKF_UI])?;
    Ok(Some(Assimilation {
        spec,
        scheme: match cfg.detector.augment {
            AugmentKind::Crossfit => AugmentScheme::CrossFit,
            AugmentKind::Full => AugmentScheme::Full,
        },
        seed: cfg.run.seed,
    }))
}

impl Setup {
    pub fn new(kind: SystemKind, cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        let schedule = schedule(kind, cfg)?;
        let library = library(kind, cfg)?;
        let model = Model::from_system(library.clone(), schedule.initial())?;
        let sim = SimulationConfig {
            dt: cfg.run.dt,
            duration: cfg.duration(kind),
            seed: cfg.run.seed,
            initial_state: initial_state(kind, cfg),
            burn_in: cfg.run.burn_in,
        };
        Ok(Self {
            kind,
            schedule,
            sim,
            library,
            model,
            detector: detector_config(kind, cfg),
            assimilation: assimilation(kind, cfg)?,
        })
    }

    pub fn var_names(&self) -> &[String] {
        self.library.var_names()
    }

    pub fn simulate(&self) -> Result<Trajectory> {
        Ok(integrate(&self.schedule, &self.sim)?)
    }

    /// The columns the detector sees.
    pub fn observe(&self, truth: &Trajectory) -> Result<Trajectory> {
        match &self.assimilation {
            Some(a) => Ok(truth.select_columns(a.observed())?),
            None => Ok(truth.clone()),
        }
    }

    pub fn observed_names(&self) -> Vec<String> {
        match &self.assimilation {
            Some(a) => a.observed().iter().map(|&i| self.var_names()[i].clone()).collect(),
            None => self.var_names().to_vec(),
        }
    }

    /// Regime in force at time `t`.
    pub fn regime_at(&self, t: f64) -> &SdeSystem {
        let mut current = self.schedule.initial();
        for (start, sys) in self.schedule.segments() {
            if *start <= t {
                current = sys;
            }
        }
        current
    }

    /// True post-switch coefficients projected on the library.
    pub fn true_model_at(&self, t: f64) -> Result<Model> {
        Ok(Model::from_system(self.library.clone(), self.regime_at(t))?)
    }

    pub fn switch_times(&self) -> Vec<f64> {
        self.schedule.switch_times()
    }

    pub fn run(&self, observed: &Trajectory) -> Result<Detection> {
        run_stream(
            observed,
            self.model.clone(),
            self.detector.clone(),
            self.assimilation.as_ref(),
        )
    }
}

/// Outcome of streaming a trajectory through the detector.
#[derive(Debug, Clone)]
pub struct Detection {
    pub reports: Vec<DetectionReport>,
    pub dismissed_alarms: usize,
    pub final_model: Model,
    /// CEM of every batch under the model current when it arrived.
    pub batch_cems: Vec<CEMatrix>,
}

impl Detection {
    /// Reports that ended in a boosted model.
    pub fn completed(&self) -> impl Iterator<Item = &DetectionReport> {
        self.reports.iter().filter(|r| r.is_complete())
    }
}

/// Cuts the trajectory into batches, optionally samples hidden states, and
/// runs the online detector.
pub fn run_stream(
    observed: &Trajectory,
    model: Model,
    config: DetectorConfig,
    assimilation: Option<&Assimilation>,
) -> Result<Detection> {
    let batches = make_batches(observed, config.batch_length)?;
    let mut det = OnlineDetector::new(model, config)?;
    let mut reports = Vec::new();
    let mut batch_cems = Vec::with_capacity(batches.len());
    for batch in &batches {
        let report = match assimilation {
            Some(a) => det.push(&a.augment(batch)?)?,
            None => det.push(batch)?,
        };
        batch_cems.extend(det.last_cem().cloned());
        reports.extend(report);
    }
    let dismissed_alarms = det.dismissed_alarms();
    let (final_model, pending) = det.finish();
    reports.extend(pending);
    Ok(Detection {
        reports,
        dismissed_alarms,
        final_model,
        batch_cems,
    })
}

/// Single-batch alarms on a stream generated by the reference regime alone.
#[derive(Debug, Clone, PartialEq)]
pub struct NullResult {
    pub batches: usize,
    pub detections: usize,
    pub alarm_batches: Vec<usize>,
    /// Reports the full online detector emits on the same stream; alarms
    /// whose aggregated pattern needs no change are dismissed, not reported.
    pub online_reports: usize,
}

/// Simulates `batches` batches of the first regime and counts how many the
/// single-batch test flags under the true model.
pub fn null_suite(kind: SystemKind, cfg: &Config, batches: usize) -> Result<NullResult> {
    let setup = Setup::new(kind, cfg)?;
    let null_schedule = RegimeSchedule::single(setup.schedule.initial().clone());
    let sim = SimulationConfig {
        duration: batches as f64 * setup.detector.batch_length,
        ..setup.sim.clone()
    };
    let truth = integrate(&null_schedule, &sim)?;
    let observed = setup.observe(&truth)?;
    let mut alarm_batches = Vec::new();
    let all = make_batches(&observed, setup.detector.batch_length)?;
    for batch in all.iter().take(batches) {
        let batch = match &setup.assimilation {
            Some(a) => a.augment(batch)?,
            None => batch.clone(),
        };
        let (alarm, _) = detect(&batch, &setup.model, &setup.detector)?;
        if alarm {
            alarm_batches.push(batch.index);
        }
    }
    let online = run_stream(
        &observed,
        setup.model.clone(),
        setup.detector.clone(),
        setup.assimilation.as_ref(),
    )?;
    Ok(NullResult {
        batches: all.len().min(batches),
        detections: alarm_batches.len(),
        alarm_batches,
        online_reports: online.reports.len(),
    })
}

/// Post-switch time needed for `rows` of the aggregated pattern to reach
/// their final state and stay there.
///
/// Aggregation step `k` covers batches through `detection_batch + k`, so
/// the time is measured to the end of that batch.
pub fn settle_time(report: &DetectionReport, rows: &[usize], batch_length: f64, switch_time: f64) -> Option<f64> {
    let stable = report.stable_pattern.as_ref()?;
    let h = &report.pattern_history;
    let mut k = h.len();
    while k > 0 && rows.iter().all(|&i| h[k - 1].row_eq(stable, i)) {
        k -= 1;
    }
    Some(report.detection_time + (k + 1) as f64 * batch_length - switch_time)
}

/// One line of a true-versus-recovered coefficient table.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientRow {
    pub row: String,
    pub function: String,
    pub truth: f64,
    pub recovered: f64,
}

impl CoefficientRow {
    pub fn relative_error(&self) -> f64 {
        if self.truth == 0.0 {
            self.recovered.abs()
        } else {
            (self.recovered - self.truth).abs() / self.truth.abs()
        }
    }
}

/// Entries where either the truth or the recovered model is nonzero.
pub fn coefficient_table(truth: &Model, recovered: &Model) -> Vec<CoefficientRow> {
    let lib = recovered.library();
    let mut out = Vec::new();
    for i in 0..recovered.dim() {
        for (n, f) in lib.functions().iter().enumerate() {
            let (t, r) = (truth.xi()[(i, n)], recovered.xi()[(i, n)]);
            if t != 0.0 || r != 0.0 {
                out.push(CoefficientRow {
                    row: lib.var_names()[i].clone(),
                    function: f.name.clone(),
                    truth: t,
                    recovered: r,
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_system_builds() {
        let cfg = Config::default();
        for kind in SystemKind::ALL {
            let s = Setup::new(kind, &cfg).unwrap();
            assert_eq!(s.detector.batch_length, kind.default_batch_length());
            assert_eq!(s.assimilation.is_some(), kind == SystemKind::Spekf);
            assert_eq!(s.model.dim(), s.schedule.dim());
        }
    }

    #[test]
    fn spekf_regimes_drop_the_right_coupling() {
        let s = Setup::new(SystemKind::Spekf, &Config::default()).unwrap();
        let r1 = s.true_model_at(0.0).unwrap();
        let r2 = s.true_model_at(250.0).unwrap();
        let r3 = s.true_model_at(450.0).unwrap();
        assert!(r1.coefficient(0, "ui*omega").unwrap() != 0.0);
        assert_eq!(r2.coefficient(0, "ui*omega").unwrap(), 0.0);
        assert!(r2.coefficient(0, "ur*gamma").unwrap() != 0.0);
        assert_eq!(r3.coefficient(0, "ur*gamma").unwrap(), 0.0);
        assert!(r3.coefficient(0, "ui*omega").unwrap() != 0.0);
    }

    #[test]
    fn assimilation_rejected_without_hidden_states() {
        let mut cfg = Config::default();
        cfg.detector.assimilate = Some(true);
        assert!(Setup::new(SystemKind::L63, &cfg).is_err());
    }

    #[test]
    fn short_l63_run_is_quiet() {
        let mut cfg = Config::default();
        cfg.run.duration = Some(20.0);
        let s = Setup::new(SystemKind::L63, &cfg).unwrap();
        let truth = s.simulate().unwrap();
        let d = s.run(&s.observe(&truth).unwrap()).unwrap();
        assert!(d.reports.is_empty());
        assert_eq!(d.batch_cems.len(), 20);
        assert_eq!(d.final_model, s.model);
    }
}
