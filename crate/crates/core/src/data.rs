//! Leader velocity traces.
//!
//! Input is a wide CSV with a `time` column in seconds and one `v<k>` column
//! per vehicle in m/s. Traces are resampled onto a uniform grid by linear
//! interpolation and cut into half-open windows `[t0, t1)`.

use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Upper edge of the velocity sanity band, m/s.
pub const MAX_TRACE_VELOCITY: f64 = 60.0;

#[derive(Debug, Clone, PartialEq)]
pub struct TraceTable {
    pub times: Vec<f64>,
    /// `(column name, samples)` in header order.
    pub columns: Vec<(String, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeaderProfile {
    pub velocities: Vec<f64>,
    pub t0: f64,
    pub t1: f64,
    pub dt: f64,
    pub label: String,
}

fn is_velocity_column(name: &str) -> bool {
    name.strip_prefix('v')
        .is_some_and(|rest| !rest.is_empty() && rest.chars().all(|c| c.is_ascii_digit()))
}

impl TraceTable {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.columns
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| Error::Format {
                source_name: "trace".into(),
                reason: format!("no column {name:?}"),
            })
    }

    pub fn span(&self) -> (f64, f64) {
        (
            self.times.first().copied().unwrap_or(f64::NAN),
            self.times.last().copied().unwrap_or(f64::NAN),
        )
    }
}

pub fn parse_trace_csv(path: &Path) -> Result<TraceTable> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_trace_reader(file, &path.display().to_string())
}

pub fn parse_trace_reader<R: std::io::Read>(reader: R, source_name: &str) -> Result<TraceTable> {
    let fmt_err = |reason: String| Error::Format {
        source_name: source_name.to_string(),
        reason,
    };
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let time_idx = headers
        .iter()
        .position(|h| h == "time")
        .ok_or_else(|| fmt_err("missing required column `time`".into()))?;
    let v_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| is_velocity_column(h))
        .map(|(i, h)| (i, h.to_string()))
        .collect();
    if v_cols.is_empty() {
        return Err(fmt_err("missing velocity column (`v1`, `v2`, ...)".into()));
    }

    let mut times = Vec::new();
    let mut columns: Vec<(String, Vec<f64>)> = v_cols.iter().map(|(_, n)| (n.clone(), Vec::new())).collect();
    for (row_idx, record) in rdr.records().enumerate() {
        // 1-based data row, header excluded.
        let row_idx = row_idx + 1;
        let record = record?;
        let parse = |idx: usize, name: &str| -> Result<f64> {
            let raw = record.get(idx).unwrap_or("");
            raw.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| fmt_err(format!("row {row_idx}: column {name}: bad number {raw:?}")))
        };
        let t = parse(time_idx, "time")?;
        if let Some(&prev) = times.last() {
            if t <= prev {
                return Err(fmt_err(format!(
                    "row {row_idx}: time {t} is not after previous {prev}"
                )));
            }
        }
        times.push(t);
        for ((idx, name), (_, col)) in v_cols.iter().zip(columns.iter_mut()) {
            let v = parse(*idx, name)?;
            if !(0.0..=MAX_TRACE_VELOCITY).contains(&v) {
                return Err(fmt_err(format!(
                    "row {row_idx}: column {name}: velocity {v} outside [0, {MAX_TRACE_VELOCITY}]"
                )));
            }
            col.push(v);
        }
    }
    Ok(TraceTable { times, columns })
}

fn interpolate(times: &[f64], values: &[f64], t: f64) -> f64 {
    let last = times.len() - 1;
    if t <= times[0] {
        return values[0];
    }
    if t >= times[last] {
        return values[last];
    }
    // First index with times[idx] > t; t lies in [times[idx-1], times[idx]).
    let idx = times.partition_point(|&x| x <= t);
    let (t_a, t_b) = (times[idx - 1], times[idx]);
    let w = (t - t_a) / (t_b - t_a);
    values[idx - 1] + w * (values[idx] - values[idx - 1])
}

/// Uniform grid from the first timestamp; grid points past the last sample
/// are dropped (the last sample itself is kept when it falls on the grid).
pub fn resample(table: &TraceTable, dt: f64) -> Result<TraceTable> {
    if table.len() < 2 {
        return Err(Error::Domain(format!(
            "resampling needs at least 2 rows, table has {}",
            table.len()
        )));
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::Domain(format!("dt must be positive, got {dt}")));
    }
    let (t0, t_end) = table.span();
    // Tolerance absorbs accumulated rounding in the source timestamps.
    let n = ((t_end - t0) / dt + 1e-9).floor() as usize + 1;
    let times: Vec<f64> = (0..n).map(|k| t0 + k as f64 * dt).collect();
    let columns = table
        .columns
        .iter()
        .map(|(name, vals)| {
            let resampled = times.iter().map(|&t| interpolate(&table.times, vals, t)).collect();
            (name.clone(), resampled)
        })
        .collect();
    Ok(TraceTable { times, columns })
}

/// Number of samples in `[t0, t1)` at spacing `dt`.
pub fn window_len(t0: f64, t1: f64, dt: f64) -> usize {
    ((t1 - t0) / dt).round() as usize
}

/// Samples column `vehicle` on `t0, t0+dt, …` over the half-open `[t0, t1)`.
pub fn extract_window(table: &TraceTable, vehicle: &str, t0: f64, t1: f64, dt: f64) -> Result<LeaderProfile> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::Domain(format!("dt must be positive, got {dt}")));
    }
    if !(t0 < t1) {
        return Err(Error::Range(format!("empty window [{t0}, {t1})")));
    }
    let (start, end) = table.span();
    if table.is_empty() || t0 < start - 1e-9 || t1 > end + 1e-9 {
        return Err(Error::Range(format!(
            "window [{t0}, {t1}) outside trace span [{start}, {end}]"
        )));
    }
    let values = table.column(vehicle)?;
    let n = window_len(t0, t1, dt);
    let velocities = (0..n)
        .map(|k| interpolate(&table.times, values, t0 + k as f64 * dt))
        .collect();
    Ok(LeaderProfile {
        velocities,
        t0,
        t1,
        dt,
        label: vehicle.to_string(),
    })
}

impl LeaderProfile {
    /// Single-column CSV preceded by `#` comment lines describing the window.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        let io = |e| Error::io(path, e);
        writeln!(out, "# label={}", self.label).map_err(io)?;
        writeln!(out, "# window_s={}:{}", self.t0, self.t1).map_err(io)?;
        writeln!(out, "# dt_s={}", self.dt).map_err(io)?;
        writeln!(out, "velocity_mps").map_err(io)?;
        for v in &self.velocities {
            writeln!(out, "{v:.6}").map_err(io)?;
        }
        std::fs::write(path, out).map_err(io)
    }
}
