use std::io::{self, Write};

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum Termination {
    Completed,
    /// `subsystem` is 0-based.
    Diverged { t: f64, subsystem: usize },
}

impl Termination {
    pub fn is_diverged(&self) -> bool {
        matches!(self, Self::Diverged { .. })
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::Completed => "completed",
            Self::Diverged { .. } => "diverged",
        }
    }
}

/// Row-major table of one run on the grid `t = k·dt`.
///
/// The first `csv_columns` columns form the exported CSV; the remaining ones
/// (per-subsystem `zsum_i`, `e_i`, `law_i`, optional `V_M`) stay in memory.
/// `law_i` is the control law evaluated on fresh signals.
#[derive(Debug, Clone)]
pub struct Trajectory {
    columns: Vec<String>,
    csv_columns: usize,
    data: Vec<f64>,
    pub dt: f64,
    pub control_every: usize,
    pub status: Termination,
    /// Delayed history lookups performed during the run.
    pub delayed_lookups: u64,
    /// `[first, last)` step indices of each anomaly event.
    pub event_steps: Vec<(usize, usize)>,
}

impl Trajectory {
    pub(crate) fn new(columns: Vec<String>, csv_columns: usize, dt: f64, control_every: usize) -> Self {
        Self {
            columns,
            csv_columns,
            data: Vec::new(),
            dt,
            control_every,
            status: Termination::Completed,
            delayed_lookups: 0,
            event_steps: Vec::new(),
        }
    }

    pub(crate) fn push_row(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.columns.len(), "row width");
        self.data.extend_from_slice(row);
    }

    pub(crate) fn finish(&mut self, status: Termination, lookups: u64, windows: Vec<(usize, usize)>) {
        self.status = status;
        self.delayed_lookups = lookups;
        self.event_steps = windows;
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.width()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn csv_columns(&self) -> &[String] {
        &self.columns[..self.csv_columns]
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Unknown {
                kind: "column",
                name: name.to_string(),
                available: self.columns.join(", "),
            })
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.width()..(k + 1) * self.width()]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.width())
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let c = self.column_index(name)?;
        Ok(self.rows().map(|r| r[c]).collect())
    }

    pub fn value(&self, k: usize, name: &str) -> Result<f64> {
        Ok(self.row(k)[self.column_index(name)?])
    }

    pub fn last(&self) -> Option<&[f64]> {
        (!self.is_empty()).then(|| self.row(self.len() - 1))
    }

    /// CSV with 17 significant digits; the last row carries the termination status.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let cols = self.csv_columns();
        writeln!(w, "{},status", cols.join(","))?;
        let n = self.len();
        let j = self.column_index("J").expect("J column");
        for (k, row) in self.rows().enumerate() {
            for (c, v) in row[..self.csv_columns].iter().enumerate() {
                if c == j {
                    write!(w, "{}", *v as u8)?;
                } else {
                    write!(w, "{v:.16e}")?;
                }
                w.write_all(b",")?;
            }
            let status = if k + 1 == n { self.status.label() } else { "ok" };
            writeln!(w, "{status}")?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Mse {
    pub value: f64,
    pub samples: usize,
    pub diverged: bool,
}

/// Mean of squared samples on the control grid; partial for diverged runs.
pub fn mse(traj: &Trajectory, column: &str) -> Result<Mse> {
    let c = traj.column_index(column)?;
    let every = traj.control_every.max(1);
    let (sum, samples) = traj
        .rows()
        .step_by(every)
        .fold((0.0, 0usize), |(s, n), r| (s + r[c] * r[c], n + 1));
    Ok(Mse {
        value: if samples == 0 { 0.0 } else { sum / samples as f64 },
        samples,
        diverged: traj.status.is_diverged(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EventSummary {
    /// 1-based.
    pub event: usize,
    pub start: f64,
    pub end: f64,
    pub max_e_h: f64,
    pub max_ratio: f64,
    /// `V_z` at the event onset.
    pub pre_event_vz: f64,
    /// Seconds after the event end until `V_z` is back at or below its onset level.
    pub recovery_time: Option<f64>,
    /// True when the run ended before the event window closed.
    pub truncated: bool,
}

/// Per-event maxima of `e_h` and `e_h / Σz_i`, and recovery times.
pub fn diagnostics(traj: &Trajectory) -> Vec<EventSummary> {
    let (Ok(eh), Ok(ratio), Ok(vz)) = (
        traj.column_index("e_h"),
        traj.column_index("ratio"),
        traj.column_index("V_z"),
    ) else {
        return Vec::new();
    };
    let n = traj.len();
    traj.event_steps
        .iter()
        .enumerate()
        .filter(|(_, (a, _))| *a < n)
        .map(|(h, &(a, b))| {
            let window = a..b.min(n);
            let max_e_h = window.clone().map(|k| traj.row(k)[eh]).fold(0.0, f64::max);
            let max_ratio = window.map(|k| traj.row(k)[ratio]).fold(0.0, f64::max);
            let pre = traj.row(a)[vz];
            let recovery_time = (b..n)
                .find(|&k| traj.row(k)[vz] <= pre)
                .map(|k| (k - b) as f64 * traj.dt);
            EventSummary {
                event: h + 1,
                start: a as f64 * traj.dt,
                end: b as f64 * traj.dt,
                max_e_h,
                max_ratio,
                pre_event_vz: pre,
                recovery_time,
                truncated: b > n,
            }
        })
        .collect()
}
