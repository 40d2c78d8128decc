//! Command-line front end: `simulate`, `detect` and `experiment`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::config::{AugmentKind, Config, SystemKind};
use crate::error::{CliError, Result};
use crate::experiments::{coefficient_table, run_stream, Detection, Setup};
use crate::formats::{self, ManifestJson, ModelJson, ParamsJson, ReportJson, ReportsJson};
use crate::io;

#[derive(Debug, Parser)]
#[command(
    name = "ceboost",
    version,
    about = "Online detection and identification of regime switches"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a regime-switching system and write its trajectory.
    Simulate {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Stream a trajectory file through the detector.
    Detect {
        /// CSV time series; a `t` column sets the time step.
        #[arg(long)]
        input: PathBuf,
        /// Reference model JSON; defaults to the system's first regime.
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        detector: DetectorArgs,
    },
    /// Simulate, detect and tabulate one canonical experiment.
    Experiment {
        #[arg(id = "experiment_system", value_name = "SYSTEM", value_enum)]
        system: SystemKind,
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        detector: DetectorArgs,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML configuration file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub system: Option<SystemKind>,
    #[arg(long)]
    pub duration: Option<f64>,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, env = "CEBOOST_OUT")]
    pub out_dir: Option<PathBuf>,
    /// 0 writes results only; 1 adds progress and per-batch CEMs.
    #[arg(long)]
    pub verbosity: Option<u8>,
}

#[derive(Debug, Args)]
pub struct DetectorArgs {
    #[arg(long)]
    pub batch_length: Option<f64>,
    /// Stability span: batches the aggregated pattern must stay unchanged.
    #[arg(long = "D", value_name = "D")]
    pub stability_span: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub c_abs_scale: Option<f64>,
    /// Sample hidden states before screening.
    #[arg(long, overrides_with = "no_assimilate")]
    pub assimilate: bool,
    #[arg(long, overrides_with = "assimilate")]
    pub no_assimilate: bool,
    #[arg(long, value_enum)]
    pub augment: Option<AugmentKind>,
}

const DEFAULT_OUT_DIR: &str = "ceboost-out";

impl RunArgs {
    fn apply(&self, cfg: &mut Config) {
        if self.system.is_some() {
            cfg.run.system = self.system;
        }
        if self.duration.is_some() {
            cfg.run.duration = self.duration;
        }
        if let Some(dt) = self.dt {
            cfg.run.dt = dt;
        }
        if let Some(seed) = self.seed {
            cfg.run.seed = seed;
        }
        if self.out_dir.is_some() {
            cfg.run.out_dir = self.out_dir.clone();
        }
        if let Some(v) = self.verbosity {
            cfg.run.verbosity = v;
        }
    }
}

impl DetectorArgs {
    fn apply(&self, cfg: &mut Config) {
        let d = &mut cfg.detector;
        if self.batch_length.is_some() {
            d.batch_length = self.batch_length;
        }
        if let Some(s) = self.stability_span {
            d.stability_span = s;
        }
        if let Some(a) = self.alpha {
            d.alpha = a;
        }
        if let Some(c) = self.c_abs_scale {
            d.c_abs_scale = c;
        }
        if self.assimilate {
            d.assimilate = Some(true);
        }
        if self.no_assimilate {
            d.assimilate = Some(false);
        }
        if let Some(a) = self.augment {
            d.augment = a;
        }
    }
}

fn load_config(run: &RunArgs, detector: Option<&DetectorArgs>) -> Result<Config> {
    let mut cfg = match &run.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    run.apply(&mut cfg);
    if let Some(d) = detector {
        d.apply(&mut cfg);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &Config) -> PathBuf {
    cfg.run
        .out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

/// Collects output paths and phase timings for the manifest.
struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
    timings: BTreeMap<String, f64>,
    verbosity: u8,
}

impl Outputs {
    fn new(cfg: &Config) -> Result<Self> {
        let dir = out_dir(cfg);
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        Ok(Self {
            dir,
            files: Vec::new(),
            timings: BTreeMap::new(),
            verbosity: cfg.run.verbosity,
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    fn timed<T>(&mut self, phase: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f()?;
        let secs = start.elapsed().as_secs_f64();
        self.timings.insert(phase.to_string(), secs);
        self.progress(&format!("{phase}: {secs:.2} s"));
        Ok(out)
    }

    fn progress(&self, msg: &str) {
        if self.verbosity > 0 {
            eprintln!("{msg}");
        }
    }

    fn finish(mut self, command: &str, cfg: &Config) -> Result<PathBuf> {
        let path = self.path("manifest.json");
        let manifest = ManifestJson {
            schema: formats::MANIFEST_SCHEMA.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config: cfg.to_json(),
            timings_seconds: self.timings,
            outputs: self.files,
        };
        formats::write_json_atomic(&path, &manifest)?;
        Ok(self.dir)
    }
}

/// Keeps plot files to roughly this many samples per series.
const PLOT_SAMPLES: usize = 20_000;

fn write_plot_data(out: &mut Outputs, truth: &ceboost_core::Trajectory, names: &[String]) -> Result<()> {
    let stride = truth.len().div_ceil(PLOT_SAMPLES);
    io::write_long(
        &out.path("plot_trajectory.csv"),
        "t",
        &io::trajectory_rows(truth, names, stride),
    )?;
    let (acf, hist) = io::statistics_rows(truth, names, 10.0, 50);
    io::write_long(&out.path("plot_acf.csv"), "lag", &acf)?;
    io::write_long(&out.path("plot_histogram.csv"), "bin", &hist)
}

fn simulate(run: &RunArgs) -> Result<()> {
    let cfg = load_config(run, None)?;
    let kind = cfg.system()?;
    let setup = Setup::new(kind, &cfg)?;
    let mut out = Outputs::new(&cfg)?;
    let truth = out.timed("simulate", || setup.simulate())?;
    let names = setup.var_names().to_vec();
    let (traj_path, params_path, model_path) = (
        out.path("trajectory.csv"),
        out.path("params.json"),
        out.path("initial_model.json"),
    );
    let params = ParamsJson::new(kind.name(), &setup.schedule, &setup.sim);
    out.timed("write", || {
        io::write_trajectory(&traj_path, &truth, &names)?;
        formats::write_json_atomic(&params_path, &params)?;
        formats::write_json_atomic(&model_path, &ModelJson::from_model(&setup.model))
    })?;
    write_plot_data(&mut out, &truth, &names)?;
    let dir = out.finish("simulate", &cfg)?;
    println!("wrote {} samples of {kind} to {}", truth.len(), dir.display());
    Ok(())
}

fn write_detection(
    out: &mut Outputs,
    system: Option<SystemKind>,
    detection: &Detection,
    cem_names: (&[String], &[String]),
) -> Result<()> {
    let doc = ReportsJson {
        schema: formats::REPORTS_SCHEMA.into(),
        system: system.map(|s| s.name().to_string()),
        reports: detection.reports.iter().map(ReportJson::from_report).collect(),
        dismissed_alarms: detection.dismissed_alarms,
        final_model: ModelJson::from_model(&detection.final_model),
    };
    formats::write_json_atomic(&out.path("reports.json"), &doc)?;
    formats::write_json_atomic(&out.path("final_model.json"), &doc.final_model)?;
    let (rows, cols) = cem_names;
    for (k, r) in detection.reports.iter().enumerate() {
        io::write_cem(
            &out.path(&format!("report{}_detection_cem.csv", k + 1)),
            &r.detection_cem,
            rows,
            cols,
        )?;
        if let Some(agg) = &r.aggregated_cem {
            io::write_cem(
                &out.path(&format!("report{}_aggregated_cem.csv", k + 1)),
                agg,
                rows,
                cols,
            )?;
        }
    }
    if out.verbosity > 0 {
        for cem in &detection.batch_cems {
            io::write_cem(
                &out.path(&format!("batch{:04}_cem.csv", cem.batch_index)),
                cem,
                rows,
                cols,
            )?;
        }
    }
    Ok(())
}

fn describe_reports(detection: &Detection, setup_lib: &ceboost_core::BasisLibrary) -> String {
    let mut s = String::new();
    if detection.reports.is_empty() {
        s.push_str("no switch detected\n");
    }
    for (k, r) in detection.reports.iter().enumerate() {
        let _ = write!(
            s,
            "report {}: alarm at batch {} (t = {}), ",
            k + 1,
            r.detection_batch,
            r.detection_time
        );
        match (&r.stable_pattern, r.k_star) {
            (Some(p), Some(kstar)) => {
                let entries: Vec<String> = p
                    .active()
                    .into_iter()
                    .map(|(i, n)| format!("({}, {})", setup_lib.derivative_name(i), setup_lib.functions()[n].name))
                    .collect();
                let _ = writeln!(
                    s,
                    "stable after K* = {kstar} at t = {}: {}",
                    r.last_time,
                    entries.join(" ")
                );
            }
            _ => {
                let _ = writeln!(s, "no stable pattern by t = {}", r.last_time);
            }
        }
    }
    if detection.dismissed_alarms > 0 {
        let _ = writeln!(s, "{} alarm(s) dismissed", detection.dismissed_alarms);
    }
    s
}

fn detect_cmd(input: &Path, model_path: Option<&Path>, run: &RunArgs, detector: &DetectorArgs) -> Result<()> {
    let cfg = load_config(run, Some(detector))?;
    let system = cfg.run.system;
    let data = io::read_trajectory(input, run.dt)?;
    let setup = system.map(|k| Setup::new(k, &cfg)).transpose()?;
    let model = match (model_path, &setup) {
        (Some(p), _) => formats::read_model(p)?,
        (None, Some(s)) => s.model.clone(),
        (None, None) => return Err(CliError::Usage("detect needs --model or --system".into())),
    };
    let (config, assimilation) = match &setup {
        Some(s) => (s.detector.clone(), s.assimilation.clone()),
        None => {
            let mut d = crate::experiments::detector_config(SystemKind::L63, &cfg);
            d.batch_length = cfg
                .detector
                .batch_length
                .ok_or_else(|| CliError::Usage("detect without --system needs --batch-length".into()))?;
            if cfg.detector.assimilate == Some(true) {
                return Err(CliError::Usage("--assimilate needs --system spekf".into()));
            }
            (d, None)
        }
    };
    let expected = assimilation.as_ref().map_or(model.dim(), |a| a.observed().len());
    if data.trajectory.dim() != expected {
        return Err(CliError::Usage(format!(
            "{} has {} state columns but the detector expects {expected}",
            input.display(),
            data.trajectory.dim()
        )));
    }
    if let Some(a) = &assimilation {
        if a.spec.observed().len() + a.spec.hidden_dim() != model.dim() {
            return Err(CliError::Usage(
                "model dimension does not match the assimilated system".into(),
            ));
        }
    }

    let mut out = Outputs::new(&cfg)?;
    let lib = model.library().clone();
    let detection = out.timed("detect", || {
        run_stream(&data.trajectory, model, config, assimilation.as_ref())
    })?;
    let row_names: Vec<String> = (0..lib.dim()).map(|i| lib.derivative_name(i)).collect();
    let col_names: Vec<String> = lib.functions().iter().map(|f| f.name.clone()).collect();
    write_detection(&mut out, system, &detection, (&row_names, &col_names))?;
    print!("{}", describe_reports(&detection, &lib));
    let dir = out.finish("detect", &cfg)?;
    println!("results in {}", dir.display());
    Ok(())
}

fn fmt_coef(v: f64) -> String {
    format!("{v:.6}")
}

/// Markdown summary with one coefficient table per completed report.
pub fn experiment_summary(setup: &Setup, detection: &Detection) -> Result<String> {
    let mut s = format!("# {} experiment\n\n", setup.kind);
    let _ = writeln!(
        s,
        "seed {}, dt {}, duration {}, batch length {}, D = {}, switches at {:?}\n",
        setup.sim.seed,
        setup.sim.dt,
        setup.sim.duration,
        setup.detector.batch_length,
        setup.detector.stability_span,
        setup.switch_times()
    );
    s.push_str("```\n");
    s.push_str(&describe_reports(detection, &setup.library));
    s.push_str("```\n");
    for (k, r) in detection.reports.iter().enumerate() {
        let Some(updated) = &r.updated_model else {
            continue;
        };
        let truth = setup.true_model_at(r.detection_time + 0.5 * setup.detector.batch_length)?;
        let _ = writeln!(
            s,
            "\n## Report {}\n\n| row | function | true | recovered | rel. error |",
            k + 1
        );
        s.push_str("|---|---|---|---|---|\n");
        for c in coefficient_table(&truth, updated) {
            let _ = writeln!(
                s,
                "| d{}/dt | {} | {} | {} | {:.2e} |",
                c.row,
                c.function,
                fmt_coef(c.truth),
                fmt_coef(c.recovered),
                c.relative_error()
            );
        }
    }
    Ok(s)
}

fn experiment_cmd(system: SystemKind, run: &RunArgs, detector: &DetectorArgs) -> Result<()> {
    let mut cfg = load_config(run, Some(detector))?;
    cfg.run.system = Some(system);
    let setup = Setup::new(system, &cfg)?;
    let mut out = Outputs::new(&cfg)?;
    let truth = out.timed("simulate", || setup.simulate())?;
    let observed = setup.observe(&truth)?;
    let detection = out.timed("detect", || setup.run(&observed))?;

    let names = setup.var_names().to_vec();
    write_plot_data(&mut out, &truth, &names)?;
    let params = ParamsJson::new(system.name(), &setup.schedule, &setup.sim);
    formats::write_json_atomic(&out.path("params.json"), &params)?;
    formats::write_json_atomic(&out.path("initial_model.json"), &ModelJson::from_model(&setup.model))?;
    let row_names: Vec<String> = (0..setup.library.dim())
        .map(|i| setup.library.derivative_name(i))
        .collect();
    let col_names: Vec<String> = setup.library.functions().iter().map(|f| f.name.clone()).collect();
    write_detection(&mut out, Some(system), &detection, (&row_names, &col_names))?;
    for (k, r) in detection.reports.iter().enumerate() {
        if let Some(updated) = &r.updated_model {
            io::write_matrix(
                &out.path(&format!("report{}_coefficients.csv", k + 1)),
                updated.xi(),
                &row_names,
                &col_names,
            )?;
        }
    }
    let summary = experiment_summary(&setup, &detection)?;
    let path = out.path("summary.md");
    std::fs::write(&path, &summary).map_err(|e| CliError::io(&path, e))?;
    print!("{}", describe_reports(&detection, &setup.library));
    let dir = out.finish("experiment", &cfg)?;
    println!("results in {}", dir.display());
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate { run } => simulate(run),
        Command::Detect {
            input,
            model,
            run,
            detector,
        } => detect_cmd(input, model.as_deref(), run, detector),
        Command::Experiment { system, run, detector } => experiment_cmd(*system, run, detector),
    }
}

/// Parses arguments and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn flags_override_config() {
        let cli = Cli::try_parse_from([
            "ceboost",
            "experiment",
            "l96",
            "--D",
            "3",
            "--alpha",
            "0.3",
            "--seed",
            "9",
        ])
        .unwrap();
        let Command::Experiment { run, detector, .. } = cli.command else {
            panic!()
        };
        let cfg = load_config(&run, Some(&detector)).unwrap();
        assert_eq!(cfg.detector.stability_span, 3);
        assert_eq!(cfg.detector.alpha, 0.3);
        assert_eq!(cfg.run.seed, 9);
    }

    #[test]
    fn bad_flag_value_fails_validation() {
        let cli = Cli::try_parse_from(["ceboost", "simulate", "--system", "l63", "--dt=-1"]).unwrap();
        let Command::Simulate { run } = cli.command else {
            panic!()
        };
        let err = load_config(&run, None).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("run.dt"));
    }
}
