//! CSV time series, matrix tables and long-format plot data.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ceboost_core::{CEMatrix, Trajectory};
use nalgebra::DMatrix;

use crate::error::{CliError, Result};

/// A trajectory read from disk with its column names.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTrajectory {
    pub names: Vec<String>,
    pub trajectory: Trajectory,
}

/// Relative tolerance on the spacing of a time column.
const TIME_GRID_TOLERANCE: f64 = 1e-6;

fn is_time_header(name: &str) -> bool {
    matches!(name.trim(), "t" | "time")
}

/// Reads a numeric CSV. A first line that does not parse as numbers is a
/// header; a leading `t` or `time` column supplies the sampling grid. When
/// there is no time column `dt` must be given.
pub fn read_trajectory(path: &Path, dt: Option<f64>) -> Result<NamedTrajectory> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(file);

    let csv_err = |line: usize, column: usize, message: String| CliError::Csv {
        path: path.to_path_buf(),
        line,
        column,
        message,
    };

    let mut header: Option<Vec<String>> = None;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width: Option<usize> = None;
    for (k, record) in reader.records().enumerate() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(k + 1, |p| p.line() as usize);
            csv_err(line, 0, e.to_string())
        })?;
        let line = record.position().map_or(k + 1, |p| p.line() as usize);
        if let Some(w) = width {
            if record.len() != w {
                return Err(csv_err(
                    line,
                    record.len().min(w) + 1,
                    format!("expected {w} fields, found {}", record.len()),
                ));
            }
        }
        let parsed: Vec<std::result::Result<f64, _>> = record.iter().map(str::parse::<f64>).collect();
        if header.is_none() && rows.is_empty() && parsed.iter().any(|p| p.is_err()) {
            header = Some(record.iter().map(str::to_string).collect());
            width = Some(record.len());
            continue;
        }
        let mut row = Vec::with_capacity(record.len());
        for (c, (p, raw)) in parsed.into_iter().zip(record.iter()).enumerate() {
            match p {
                Ok(v) if v.is_finite() => row.push(v),
                Ok(v) => return Err(csv_err(line, c + 1, format!("non-finite value {v}"))),
                Err(_) => return Err(csv_err(line, c + 1, format!("cannot parse `{raw}` as a number"))),
            }
        }
        width = Some(record.len());
        rows.push(row);
    }
    if rows.len() < 2 {
        return Err(CliError::Format {
            path: path.to_path_buf(),
            message: format!("need at least 2 data rows, found {}", rows.len()),
        });
    }

    let has_time = header.as_ref().is_some_and(|h| is_time_header(&h[0]));
    let first_state = usize::from(has_time);
    let width = rows[0].len();
    if width <= first_state {
        return Err(CliError::Format {
            path: path.to_path_buf(),
            message: "no state columns".into(),
        });
    }
    let names = match &header {
        Some(h) => h[first_state..].to_vec(),
        None => ceboost_core::basis::default_var_names(width),
    };

    let (dt, t0) = if has_time {
        let t0 = rows[0][0];
        let step = rows[1][0] - rows[0][0];
        if !(step > 0.0) {
            return Err(csv_err(2, 1, "time column must increase".into()));
        }
        for (m, r) in rows.iter().enumerate() {
            let expected = t0 + m as f64 * step;
            if (r[0] - expected).abs() > TIME_GRID_TOLERANCE * step.max(expected.abs()) {
                let line = m + 1 + usize::from(header.is_some());
                return Err(csv_err(
                    line,
                    1,
                    format!("time {} is off the uniform grid (expected {expected})", r[0]),
                ));
            }
        }
        if let Some(given) = dt {
            if (given - step).abs() > TIME_GRID_TOLERANCE * step {
                return Err(CliError::Usage(format!(
                    "--dt {given} disagrees with the time column spacing {step} in {}",
                    path.display()
                )));
            }
        }
        (step, t0)
    } else {
        let dt = dt.ok_or_else(|| CliError::Usage(format!("{} has no time column; pass --dt", path.display())))?;
        (dt, 0.0)
    };

    let values = DMatrix::from_fn(rows.len(), width - first_state, |m, j| rows[m][j + first_state]);
    let trajectory = Trajectory::new(values, dt, t0)?;
    Ok(NamedTrajectory { names, trajectory })
}

/// Formats a value with 17 significant digits so it reads back exactly.
pub fn fmt_exact(v: f64) -> String {
    format!("{v:.16e}")
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path, e))
}

fn write_lines<F>(path: &Path, body: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
{
    let mut w = create(path)?;
    body(&mut w).and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
}

/// Writes `t` followed by the state columns.
pub fn write_trajectory(path: &Path, traj: &Trajectory, names: &[String]) -> Result<()> {
    write_lines(path, |w| {
        writeln!(w, "t,{}", names.join(","))?;
        for m in 0..traj.len() {
            write!(w, "{}", fmt_exact(traj.time(m)))?;
            for v in traj.values().row(m).iter() {
                write!(w, ",{}", fmt_exact(*v))?;
            }
            writeln!(w)?;
        }
        Ok(())
    })
}

/// Writes a labelled matrix: one row per derivative, one column per
/// library function.
pub fn write_matrix(path: &Path, values: &DMatrix<f64>, row_names: &[String], col_names: &[String]) -> Result<()> {
    write_lines(path, |w| {
        writeln!(w, "row,{}", col_names.join(","))?;
        for i in 0..values.nrows() {
            write!(w, "{}", row_names[i])?;
            for v in values.row(i).iter() {
                write!(w, ",{}", fmt_exact(*v))?;
            }
            writeln!(w)?;
        }
        Ok(())
    })
}

/// Writes a CEM with inadmissible entries left empty.
pub fn write_cem(path: &Path, cem: &CEMatrix, row_names: &[String], col_names: &[String]) -> Result<()> {
    write_lines(path, |w| {
        writeln!(w, "row,{}", col_names.join(","))?;
        for i in 0..cem.rows() {
            write!(w, "{}", row_names[i])?;
            for n in 0..cem.cols() {
                if cem.admissible[i][n] {
                    write!(w, ",{}", fmt_exact(cem.get(i, n)))?;
                } else {
                    write!(w, ",")?;
                }
            }
            writeln!(w)?;
        }
        Ok(())
    })
}

/// One observation of long-format plot data.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotRow {
    pub x: f64,
    pub series: String,
    pub value: f64,
}

/// Writes `x,series,value` rows under the given name for the `x` column.
pub fn write_long(path: &Path, x_name: &str, rows: &[PlotRow]) -> Result<()> {
    write_lines(path, |w| {
        writeln!(w, "{x_name},series,value")?;
        for r in rows {
            writeln!(w, "{},{},{}", fmt_exact(r.x), r.series, fmt_exact(r.value))?;
        }
        Ok(())
    })
}

/// Trajectory in long format, keeping every `stride`-th sample.
pub fn trajectory_rows(traj: &Trajectory, names: &[String], stride: usize) -> Vec<PlotRow> {
    let stride = stride.max(1);
    let mut out = Vec::new();
    for m in (0..traj.len()).step_by(stride) {
        for (j, name) in names.iter().enumerate() {
            out.push(PlotRow {
                x: traj.time(m),
                series: name.clone(),
                value: traj.values()[(m, j)],
            });
        }
    }
    out
}

/// Sample autocorrelation at lags `0..=max_lag`.
pub fn autocorrelation(x: &[f64], max_lag: usize) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    (0..=max_lag.min(n - 1))
        .map(|lag| {
            if var == 0.0 {
                return if lag == 0 { 1.0 } else { 0.0 };
            }
            let s: f64 = (0..n - lag).map(|m| (x[m] - mean) * (x[m + lag] - mean)).sum();
            s / var
        })
        .collect()
}

/// Normalized histogram: bin centres and densities.
pub fn histogram(x: &[f64], bins: usize) -> Vec<(f64, f64)> {
    if x.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for v in x {
        let k = (((v - lo) / width) as usize).min(bins - 1);
        counts[k] += 1;
    }
    let norm = x.len() as f64 * width;
    counts
        .iter()
        .enumerate()
        .map(|(k, &c)| (lo + (k as f64 + 0.5) * width, c as f64 / norm))
        .collect()
}

/// ACF and histogram rows for every column of a trajectory segment.
pub fn statistics_rows(
    traj: &Trajectory,
    names: &[String],
    max_lag_time: f64,
    bins: usize,
) -> (Vec<PlotRow>, Vec<PlotRow>) {
    let max_lag = (max_lag_time / traj.dt()).round() as usize;
    let stride = (max_lag / 200).max(1);
    let mut acf_rows = Vec::new();
    let mut hist_rows = Vec::new();
    for (j, name) in names.iter().enumerate() {
        let col: Vec<f64> = traj.values().column(j).iter().copied().collect();
        for (lag, v) in autocorrelation(&col, max_lag).into_iter().enumerate().step_by(stride) {
            acf_rows.push(PlotRow {
                x: lag as f64 * traj.dt(),
                series: name.clone(),
                value: v,
            });
        }
        for (c, d) in histogram(&col, bins) {
            hist_rows.push(PlotRow {
                x: c,
                series: name.clone(),
                value: d,
            });
        }
    }
    (acf_rows, hist_rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn trajectory_round_trips_exactly() {
        let dir = tmp();
        let path = dir.path().join("x.csv");
        let values = DMatrix::from_fn(5, 2, |m, j| (m as f64 + 0.1) / 3.0 * if j == 0 { 1.0 } else { -1e-7 });
        let traj = Trajectory::new(values, 0.001, 0.0).unwrap();
        let names = vec!["a".to_string(), "b".to_string()];
        write_trajectory(&path, &traj, &names).unwrap();
        let back = read_trajectory(&path, None).unwrap();
        assert_eq!(back.names, names);
        assert_eq!(back.trajectory.values(), traj.values());
        assert!((back.trajectory.dt() - 0.001).abs() < 1e-15);
    }

    #[test]
    fn headerless_needs_dt() {
        let dir = tmp();
        let path = dir.path().join("x.csv");
        std::fs::write(&path, "1,2\n3,4\n5,6\n").unwrap();
        assert!(matches!(read_trajectory(&path, None), Err(CliError::Usage(_))));
        let t = read_trajectory(&path, Some(0.5)).unwrap();
        assert_eq!(t.names, vec!["x", "y"]);
        assert_eq!(t.trajectory.len(), 3);
    }

    #[test]
    fn reports_line_and_column() {
        let dir = tmp();
        let path = dir.path().join("x.csv");
        std::fs::write(&path, "t,x,y\n0,1,2\n0.1,3,oops\n").unwrap();
        match read_trajectory(&path, None) {
            Err(CliError::Csv { line, column, .. }) => assert_eq!((line, column), (3, 3)),
            other => panic!("{other:?}"),
        }
        std::fs::write(&path, "t,x\n0,1\n0.1,3\n0.3,4\n").unwrap();
        match read_trajectory(&path, None) {
            Err(CliError::Csv { line, column, .. }) => assert_eq!((line, column), (4, 1)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ragged_rows_rejected() {
        let dir = tmp();
        let path = dir.path().join("x.csv");
        std::fs::write(&path, "1,2\n3\n").unwrap();
        assert!(read_trajectory(&path, Some(1.0)).is_err());
    }

    #[test]
    fn autocorrelation_of_alternating_series() {
        let x: Vec<f64> = (0..100).map(|m| if m % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let r = autocorrelation(&x, 2);
        assert!((r[0] - 1.0).abs() < 1e-12);
        assert!((r[1] + 0.99).abs() < 1e-12);
        assert!((r[2] - 0.98).abs() < 1e-12);
    }

    #[test]
    fn histogram_integrates_to_one() {
        let x: Vec<f64> = (0..1000).map(|m| (m as f64 * 0.37).sin()).collect();
        let h = histogram(&x, 20);
        let width = h[1].0 - h[0].0;
        let total: f64 = h.iter().map(|(_, d)| d * width).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}
