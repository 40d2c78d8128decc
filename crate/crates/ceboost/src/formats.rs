//! JSON file formats. Every top-level document carries a `schema` tag
//! with a version suffix.

use std::collections::BTreeMap;
use std::path::Path;

use ceboost_core::{BasisLibrary, DetectionReport, Model, Monomial, RegimeSchedule, SimulationConfig};
use nalgebra::DMatrix;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const MODEL_SCHEMA: &str = "ceboost.model/1";
pub const REPORTS_SCHEMA: &str = "ceboost.reports/1";
pub const PARAMS_SCHEMA: &str = "ceboost.params/1";
pub const MANIFEST_SCHEMA: &str = "ceboost.manifest/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LibraryJson {
    pub var_names: Vec<String>,
    pub functions: Vec<String>,
    /// Screened candidates of each row, by function name.
    pub candidates: Vec<Vec<String>>,
}

impl LibraryJson {
    pub fn from_library(lib: &BasisLibrary) -> Self {
        Self {
            var_names: lib.var_names().to_vec(),
            functions: lib.functions().iter().map(|f| f.name.clone()).collect(),
            candidates: (0..lib.dim())
                .map(|i| {
                    lib.candidates(i)
                        .into_iter()
                        .map(|n| lib.functions()[n].name.clone())
                        .collect()
                })
                .collect(),
        }
    }

    pub fn to_library(&self) -> ceboost_core::Result<BasisLibrary> {
        let monomials = self
            .functions
            .iter()
            .map(|name| Monomial::parse(name, &self.var_names))
            .collect::<ceboost_core::Result<Vec<_>>>()?;
        if self.candidates.len() != self.var_names.len() {
            return Err(ceboost_core::Error::DimensionMismatch {
                context: "library candidate rows",
                expected: self.var_names.len(),
                found: self.candidates.len(),
            });
        }
        let mut masks = vec![vec![false; monomials.len()]; self.var_names.len()];
        for (row, names) in self.candidates.iter().enumerate() {
            for name in names {
                let n = self.functions.iter().position(|f| f == name).ok_or_else(|| {
                    ceboost_core::Error::InvalidParameter(format!(
                        "candidate `{name}` of row {row} is not a library function"
                    ))
                })?;
                masks[row][n] = true;
            }
        }
        BasisLibrary::new(self.var_names.clone(), monomials, masks)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermJson {
    pub function: String,
    pub coefficient: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRowJson {
    pub derivative: String,
    /// Nonzero coefficients only.
    pub terms: Vec<TermJson>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelJson {
    pub schema: String,
    pub library: LibraryJson,
    pub rows: Vec<ModelRowJson>,
}

impl ModelJson {
    pub fn from_model(model: &Model) -> Self {
        let lib = model.library();
        let rows = (0..model.dim())
            .map(|i| ModelRowJson {
                derivative: lib.var_names()[i].clone(),
                terms: lib
                    .functions()
                    .iter()
                    .enumerate()
                    .filter(|&(n, _)| model.xi()[(i, n)] != 0.0)
                    .map(|(n, f)| TermJson {
                        function: f.name.clone(),
                        coefficient: model.xi()[(i, n)],
                    })
                    .collect(),
            })
            .collect();
        Self {
            schema: MODEL_SCHEMA.into(),
            library: LibraryJson::from_library(lib),
            rows,
        }
    }

    pub fn to_model(&self) -> ceboost_core::Result<Model> {
        let lib = self.library.to_library()?;
        if self.rows.len() != lib.dim() {
            return Err(ceboost_core::Error::DimensionMismatch {
                context: "model rows",
                expected: lib.dim(),
                found: self.rows.len(),
            });
        }
        let mut xi = DMatrix::zeros(lib.dim(), lib.len());
        for (i, row) in self.rows.iter().enumerate() {
            if row.derivative != lib.var_names()[i] {
                return Err(ceboost_core::Error::InvalidParameter(format!(
                    "model row {i} is `{}` but the library variable is `{}`",
                    row.derivative,
                    lib.var_names()[i]
                )));
            }
            for t in &row.terms {
                let n = lib
                    .index_by_name(&t.function)
                    .ok_or_else(|| ceboost_core::Error::TermNotInLibrary {
                        row: i,
                        term: t.function.clone(),
                    })?;
                xi[(i, n)] = t.coefficient;
            }
        }
        Model::new(lib, xi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryJson {
    pub row: String,
    pub function: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualTermJson {
    pub row: String,
    pub function: String,
    pub coefficient: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportJson {
    pub detection_batch: usize,
    pub detection_time: f64,
    pub last_batch: usize,
    pub last_time: f64,
    /// `None` when the stream ended or aggregation was abandoned first.
    pub k_star: Option<usize>,
    pub data_used: f64,
    pub stable_pattern: Option<Vec<EntryJson>>,
    /// Active entries after each aggregation step.
    pub pattern_sizes: Vec<usize>,
    pub residual: Vec<ResidualTermJson>,
    pub updated_model: Option<ModelJson>,
}

impl ReportJson {
    pub fn from_report(r: &DetectionReport) -> Self {
        let lib = r.model_before.library();
        let entry = |(i, n): (usize, usize)| EntryJson {
            row: lib.var_names()[i].clone(),
            function: lib.functions()[n].name.clone(),
        };
        let residual = r
            .residual
            .as_ref()
            .map(|res| {
                res.support
                    .active()
                    .into_iter()
                    .map(|(i, n)| ResidualTermJson {
                        row: lib.var_names()[i].clone(),
                        function: lib.functions()[n].name.clone(),
                        coefficient: res.xi_r[(i, n)],
                    })
                    .collect()
            })
            .unwrap_or_default();
        Self {
            detection_batch: r.detection_batch,
            detection_time: r.detection_time,
            last_batch: r.last_batch,
            last_time: r.last_time,
            k_star: r.k_star,
            data_used: r.data_used(),
            stable_pattern: r
                .stable_pattern
                .as_ref()
                .map(|p| p.active().into_iter().map(entry).collect()),
            pattern_sizes: r.pattern_history.iter().map(|p| p.count()).collect(),
            residual,
            updated_model: r.updated_model.as_ref().map(ModelJson::from_model),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportsJson {
    pub schema: String,
    pub system: Option<String>,
    pub reports: Vec<ReportJson>,
    /// Alarms whose stable pattern required no change.
    pub dismissed_alarms: usize,
    pub final_model: ModelJson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeJson {
    pub start: f64,
    pub name: String,
    pub params: BTreeMap<String, f64>,
}

/// Everything needed to regenerate a simulated trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsJson {
    pub schema: String,
    pub system: String,
    pub var_names: Vec<String>,
    pub seed: u64,
    pub dt: f64,
    pub duration: f64,
    pub burn_in: f64,
    pub initial_state: Vec<f64>,
    pub regimes: Vec<RegimeJson>,
    /// Per-component noise variance rate, the diagonal of `ΣΣᵀ`, per regime.
    pub noise_variance: Vec<Vec<f64>>,
}

impl ParamsJson {
    pub fn new(system: &str, schedule: &RegimeSchedule, sim: &SimulationConfig) -> Self {
        let segments = schedule.segments();
        Self {
            schema: PARAMS_SCHEMA.into(),
            system: system.into(),
            var_names: schedule.initial().var_names.clone(),
            seed: sim.seed,
            dt: sim.dt,
            duration: sim.duration,
            burn_in: sim.burn_in,
            initial_state: sim.initial_state.clone(),
            regimes: segments
                .iter()
                .map(|(start, s)| RegimeJson {
                    start: *start,
                    name: s.name.clone(),
                    params: s.params.iter().cloned().collect(),
                })
                .collect(),
            noise_variance: segments
                .iter()
                .map(|(_, s)| s.noise.row_iter().map(|r| r.norm_squared()).collect())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestJson {
    pub schema: String,
    pub version: String,
    pub command: String,
    pub config: serde_json::Value,
    pub timings_seconds: BTreeMap<String, f64>,
    pub outputs: Vec<String>,
}

/// Serializes to a sibling temporary file and renames it into place, so a
/// reader never sees a partial document.
pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let text = serde_json::to_string_pretty(value).expect("document serializes");
    std::fs::write(&tmp, text + "\n").map_err(|e| CliError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

/// Reads a JSON document and checks its schema tag.
pub fn read_json<T: DeserializeOwned>(path: &Path, schema: &str) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let format_err = |message: String| CliError::Format {
        path: path.to_path_buf(),
        message,
    };
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| format_err(e.to_string()))?;
    match raw.get("schema").and_then(|s| s.as_str()) {
        Some(s) if s == schema => {}
        Some(s) => return Err(format_err(format!("schema `{s}`, expected `{schema}`"))),
        None => return Err(format_err(format!("missing schema tag `{schema}`"))),
    }
    serde_json::from_value(raw).map_err(|e| format_err(e.to_string()))
}

pub fn read_model(path: &Path) -> Result<Model> {
    let doc: ModelJson = read_json(path, MODEL_SCHEMA)?;
    doc.to_model().map_err(|e| CliError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}
