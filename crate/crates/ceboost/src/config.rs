//! Run configuration: TOML file, then command-line overrides, then
//! validation. Every section has defaults that reproduce the canonical
//! experiment for its system.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ceboost_core::centropy::{AGGREGATION_Z, DETECTION_Z};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SystemKind {
    L63,
    L96,
    Topo,
    Spekf,
}

impl SystemKind {
    pub const ALL: [SystemKind; 4] = [SystemKind::L63, SystemKind::L96, SystemKind::Topo, SystemKind::Spekf];

    pub fn name(self) -> &'static str {
        match self {
            SystemKind::L63 => "l63",
            SystemKind::L96 => "l96",
            SystemKind::Topo => "topo",
            SystemKind::Spekf => "spekf",
        }
    }

    pub fn default_batch_length(self) -> f64 {
        match self {
            SystemKind::L63 | SystemKind::L96 => 1.0,
            SystemKind::Topo => 30.0,
            SystemKind::Spekf => 20.0,
        }
    }
}

impl fmt::Display for SystemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SystemKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        SystemKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown system `{s}` (expected l63, l96, topo or spekf)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum AugmentKind {
    /// Condition on even steps, regress on odd steps.
    #[default]
    Crossfit,
    /// Condition and regress on every step.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub system: Option<SystemKind>,
    pub seed: u64,
    /// Overrides the system's canonical duration.
    pub duration: Option<f64>,
    pub dt: f64,
    pub burn_in: f64,
    pub out_dir: Option<PathBuf>,
    pub verbosity: u8,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            system: None,
            seed: 1,
            duration: None,
            dt: 0.001,
            burn_in: 20.0,
            out_dir: None,
            verbosity: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSection {
    /// Overrides the system's canonical batch length.
    pub batch_length: Option<f64>,
    #[serde(rename = "D")]
    pub stability_span: usize,
    pub alpha: f64,
    /// Multiple of the per-row median used as the absolute floor.
    pub c_abs_scale: f64,
    pub detection_z: f64,
    pub aggregation_z: f64,
    pub max_batches: Option<usize>,
    pub include_detection_cem: bool,
    /// Freeze each row once its own pattern has held for `D` batches.
    pub per_row_stability: bool,
    /// Sample hidden states before screening. Defaults to on for SPEKF only.
    pub assimilate: Option<bool>,
    pub augment: AugmentKind,
}

impl Default for DetectorSection {
    fn default() -> Self {
        Self {
            batch_length: None,
            stability_span: 4,
            alpha: 0.25,
            c_abs_scale: 5.0,
            detection_z: DETECTION_Z,
            aggregation_z: AGGREGATION_Z,
            max_batches: None,
            include_detection_cem: true,
            per_row_stability: false,
            assimilate: None,
            augment: AugmentKind::Crossfit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct L63Section {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
    pub switch_time: f64,
    pub rho_after: f64,
    pub duration: f64,
    pub x0: [f64; 3],
}

impl Default for L63Section {
    fn default() -> Self {
        Self {
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
            switch_time: 100.0,
            rho_after: 38.0,
            duration: 200.0,
            x0: [1.0, 1.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct L96Section {
    #[serde(rename = "J")]
    pub j: usize,
    pub forcing: f64,
    pub damping: f64,
    pub switch_time: f64,
    pub forcing_after: f64,
    pub damping_after: f64,
    pub duration: f64,
    pub stencil: L96Stencil,
}

/// Candidate products offered to each Lorenz 96 row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum L96Stencil {
    /// `x_j`, `x_j²` and `x_j` times each of its four nearest neighbours.
    #[default]
    Local,
    /// Adds the neighbouring sites' advection-type products.
    Extended,
}

impl Default for L96Section {
    fn default() -> Self {
        Self {
            j: 40,
            forcing: 8.0,
            damping: -1.0,
            switch_time: 100.0,
            forcing_after: 16.0,
            damping_after: -1.5,
            duration: 200.0,
            stencil: L96Stencil::Local,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopoSection {
    pub d_v: f64,
    pub d_u: f64,
    pub beta: f64,
    pub omega1: f64,
    pub omega3: f64,
    pub sigma_v: f64,
    pub sigma_u: f64,
    pub switch_time: f64,
    pub omega1_after: f64,
    pub omega3_after: f64,
    pub duration: f64,
    /// Sign of the `β` rotation terms in the `v₂` and `v₄` equations.
    pub rotation_sign: f64,
}

impl Default for TopoSection {
    fn default() -> Self {
        let p = ceboost_core::models::TopographicParams::default();
        let q = ceboost_core::models::TopographicParams::regime2();
        Self {
            d_v: p.d_v,
            d_u: p.d_u,
            beta: p.beta,
            omega1: p.omega1,
            omega3: p.omega3,
            sigma_v: p.sigma_v,
            sigma_u: p.sigma_u,
            switch_time: 90.0,
            omega1_after: q.omega1,
            omega3_after: q.omega3,
            duration: 420.0,
            rotation_sign: p.rotation_sign,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpekfSection {
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
    /// Start of the regime without `ω` coupling.
    pub switch_time: f64,
    /// Start of the regime without `γ` coupling.
    pub second_switch_time: f64,
    pub duration: f64,
}

impl Default for SpekfSection {
    fn default() -> Self {
        let p = ceboost_core::models::SpekfParams::default();
        Self {
            d_gamma: p.d_gamma,
            d_omega: p.d_omega,
            d_b: p.d_b,
            sigma_u: p.sigma_u,
            sigma_gamma: p.sigma_gamma,
            sigma_omega: p.sigma_omega,
            sigma_b: p.sigma_b,
            gamma_hat: p.gamma_hat,
            omega_hat: p.omega_hat,
            b_hat: p.b_hat,
            switch_time: 200.0,
            second_switch_time: 400.0,
            duration: 600.0,
        }
    }
}

impl SpekfSection {
    pub fn params(&self) -> ceboost_core::models::SpekfParams {
        ceboost_core::models::SpekfParams {
            d_gamma: self.d_gamma,
            d_omega: self.d_omega,
            d_b: self.d_b,
            sigma_u: self.sigma_u,
            sigma_gamma: self.sigma_gamma,
            sigma_omega: self.sigma_omega,
            sigma_b: self.sigma_b,
            gamma_hat: self.gamma_hat,
            omega_hat: self.omega_hat,
            b_hat: self.b_hat,
            gamma_active: true,
            omega_active: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub run: RunSection,
    pub detector: DetectorSection,
    pub l63: L63Section,
    pub l96: L96Section,
    pub topo: TopoSection,
    pub spekf: SpekfSection,
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let field = e
                .span()
                .map_or_else(String::new, |s| format!("at bytes {}..{}", s.start, s.end));
            CliError::config(field, e.message().trim().to_string())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            CliError::Config { field, message } => CliError::config(format!("{} {field}", path.display()), message),
            other => other,
        })
    }

    pub fn system(&self) -> Result<SystemKind> {
        self.run
            .system
            .ok_or_else(|| CliError::config("run.system", "no system given (use --system or [run] system)"))
    }

    pub fn duration(&self, kind: SystemKind) -> f64 {
        self.run.duration.unwrap_or(match kind {
            SystemKind::L63 => self.l63.duration,
            SystemKind::L96 => self.l96.duration,
            SystemKind::Topo => self.topo.duration,
            SystemKind::Spekf => self.spekf.duration,
        })
    }

    pub fn batch_length(&self, kind: SystemKind) -> f64 {
        self.detector.batch_length.unwrap_or(kind.default_batch_length())
    }

    pub fn assimilate(&self, kind: SystemKind) -> bool {
        self.detector.assimilate.unwrap_or(kind == SystemKind::Spekf)
    }

    /// Checks every field and reports the first violation by its path.
    pub fn validate(&self) -> Result<()> {
        fn positive(field: &str, v: f64) -> Result<()> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(CliError::config(field, format!("must be positive and finite, got {v}")))
            }
        }
        fn nonnegative(field: &str, v: f64) -> Result<()> {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(CliError::config(
                    field,
                    format!("must be nonnegative and finite, got {v}"),
                ))
            }
        }
        fn finite(field: &str, v: f64) -> Result<()> {
            if v.is_finite() {
                Ok(())
            } else {
                Err(CliError::config(field, format!("must be finite, got {v}")))
            }
        }

        positive("run.dt", self.run.dt)?;
        nonnegative("run.burn_in", self.run.burn_in)?;
        if let Some(d) = self.run.duration {
            positive("run.duration", d)?;
        }
        let det = &self.detector;
        if let Some(b) = det.batch_length {
            positive("detector.batch_length", b)?;
            if b < 2.0 * self.run.dt {
                return Err(CliError::config(
                    "detector.batch_length",
                    "must span at least two time steps",
                ));
            }
        }
        if self.topo.rotation_sign.abs() != 1.0 {
            return Err(CliError::config("topo.rotation_sign", "must be 1 or -1"));
        }
        if det.stability_span == 0 {
            return Err(CliError::config("detector.D", "must be at least 1"));
        }
        if !(det.alpha > 0.0 && det.alpha < 1.0) {
            return Err(CliError::config(
                "detector.alpha",
                format!("must lie in (0, 1), got {}", det.alpha),
            ));
        }
        nonnegative("detector.c_abs_scale", det.c_abs_scale)?;
        nonnegative("detector.detection_z", det.detection_z)?;
        nonnegative("detector.aggregation_z", det.aggregation_z)?;
        if det.max_batches == Some(0) {
            return Err(CliError::config("detector.max_batches", "must be at least 1"));
        }

        let l = &self.l63;
        for (f, v) in [
            ("l63.sigma", l.sigma),
            ("l63.rho", l.rho),
            ("l63.beta", l.beta),
            ("l63.rho_after", l.rho_after),
        ] {
            finite(f, v)?;
        }
        positive("l63.duration", l.duration)?;
        nonnegative("l63.switch_time", l.switch_time)?;
        for (k, v) in l.x0.iter().enumerate() {
            finite(&format!("l63.x0[{k}]"), *v)?;
        }

        let l = &self.l96;
        if l.j < 4 {
            return Err(CliError::config("l96.J", format!("must be at least 4, got {}", l.j)));
        }
        for (f, v) in [
            ("l96.forcing", l.forcing),
            ("l96.damping", l.damping),
            ("l96.forcing_after", l.forcing_after),
            ("l96.damping_after", l.damping_after),
        ] {
            finite(f, v)?;
        }
        positive("l96.duration", l.duration)?;
        nonnegative("l96.switch_time", l.switch_time)?;

        let t = &self.topo;
        positive("topo.d_v", t.d_v)?;
        positive("topo.d_u", t.d_u)?;
        nonnegative("topo.sigma_v", t.sigma_v)?;
        nonnegative("topo.sigma_u", t.sigma_u)?;
        for (f, v) in [
            ("topo.beta", t.beta),
            ("topo.omega1", t.omega1),
            ("topo.omega3", t.omega3),
            ("topo.omega1_after", t.omega1_after),
            ("topo.omega3_after", t.omega3_after),
        ] {
            finite(f, v)?;
        }
        positive("topo.duration", t.duration)?;
        nonnegative("topo.switch_time", t.switch_time)?;

        let s = &self.spekf;
        for (f, v) in [
            ("spekf.d_gamma", s.d_gamma),
            ("spekf.d_omega", s.d_omega),
            ("spekf.d_b", s.d_b),
            ("spekf.sigma_u", s.sigma_u),
            ("spekf.sigma_gamma", s.sigma_gamma),
            ("spekf.sigma_omega", s.sigma_omega),
            ("spekf.sigma_b", s.sigma_b),
        ] {
            positive(f, v)?;
        }
        for (f, v) in [
            ("spekf.gamma_hat", s.gamma_hat),
            ("spekf.omega_hat", s.omega_hat),
            ("spekf.b_hat", s.b_hat),
        ] {
            finite(f, v)?;
        }
        positive("spekf.duration", s.duration)?;
        nonnegative("spekf.switch_time", s.switch_time)?;
        if !(s.second_switch_time > s.switch_time) {
            return Err(CliError::config(
                "spekf.second_switch_time",
                "must come after spekf.switch_time",
            ));
        }
        Ok(())
    }

    /// Renders the resolved configuration for manifests.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = Config::from_toml_str("").unwrap();
        assert_eq!(c, Config::default());
        c.validate().unwrap();
    }

    #[test]
    fn sections_override_defaults() {
        let c =
            Config::from_toml_str("[run]\nsystem = \"l96\"\nseed = 7\n[detector]\nD = 3\nalpha = 0.3\n[l96]\nJ = 20\n")
                .unwrap();
        assert_eq!(c.system().unwrap(), SystemKind::L96);
        assert_eq!(c.run.seed, 7);
        assert_eq!(c.detector.stability_span, 3);
        assert_eq!(c.l96.j, 20);
        assert_eq!(c.batch_length(SystemKind::L96), 1.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = Config::from_toml_str("[detector]\nbatch_lenght = 2.0\n").unwrap_err();
        assert!(err.to_string().contains("batch_lenght"), "{err}");
    }

    #[test]
    fn validation_names_the_field() {
        let mut c = Config::default();
        c.detector.alpha = 1.5;
        let err = c.validate().unwrap_err();
        assert!(err.to_string().starts_with("config detector.alpha"), "{err}");
        let mut c = Config::default();
        c.spekf.second_switch_time = 100.0;
        assert!(c
            .validate()
            .unwrap_err()
            .to_string()
            .contains("spekf.second_switch_time"));
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = Config::default();
        c.run.system = Some(SystemKind::Topo);
        c.detector.max_batches = Some(9);
        let text = toml::to_string(&c).unwrap();
        assert_eq!(Config::from_toml_str(&text).unwrap(), c);
    }

    #[test]
    fn assimilation_defaults_to_spekf_only() {
        let c = Config::default();
        assert!(c.assimilate(SystemKind::Spekf));
        assert!(!c.assimilate(SystemKind::L63));
    }

    #[test]
    fn model_variants_are_selectable() {
        let c = Config::from_toml_str(
            "[detector]\nper_row_stability = true\n[l96]\nstencil = \"extended\"\n[topo]\nrotation_sign = -1.0\n",
        )
        .unwrap();
        assert!(c.detector.per_row_stability);
        assert_eq!(c.l96.stencil, L96Stencil::Extended);
        assert_eq!(c.topo.rotation_sign, -1.0);
        c.validate().unwrap();
        let mut bad = c;
        bad.topo.rotation_sign = 0.5;
        assert!(bad.validate().unwrap_err().to_string().contains("topo.rotation_sign"));
    }
}
