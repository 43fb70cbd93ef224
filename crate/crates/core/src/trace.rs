//! Uniformly sampled simulation output, its CSV form and run comparison.
//!
//! Columns: `t_s, freq_hz, ace_mw, gen<i>_mw…, vpp<j>_mw, vpp<j>_ref_mw,
//! vpp<j>_soc_pct…, line<k>_mw…, net_load_mw`. Powers are averages over
//! `[t, t + 1 s)`; frequency, ACE and SOC are values at `t`. VPP power is
//! consumption positive.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },
    #[error("traces are not comparable: {0}")]
    GridMismatch(String),
    #[error("sample grid is not uniform at row {0}")]
    NonUniform(usize),
    #[error("non-finite value in {column} at row {row}")]
    NonFinite { column: String, row: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub names: Vec<String>,
    /// Column-major values, one vector per name.
    pub columns: Vec<Vec<f64>>,
}

impl SimTrace {
    pub fn new(names: Vec<String>) -> Self {
        let columns = vec![Vec::new(); names.len()];
        Self { names, columns }
    }

    pub fn push_row(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.names.len(), "row width must match the header");
        for (c, v) in self.columns.iter_mut().zip(row) {
            c.push(*v);
        }
    }

    pub fn len(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.names.iter().position(|n| n == name).map(|i| self.columns[i].as_slice())
    }

    pub fn t_s(&self) -> &[f64] {
        self.column("t_s").unwrap_or(&[])
    }

    /// VPP ids in column order, from `vpp<j>_mw` headers.
    pub fn vpp_ids(&self) -> Vec<u32> {
        self.names
            .iter()
            .filter_map(|n| n.strip_prefix("vpp")?.strip_suffix("_mw")?.parse().ok())
            .collect()
    }

    /// Uniform sample spacing and finite values everywhere.
    pub fn validate(&self) -> Result<(), TraceError> {
        let t = self.t_s();
        if t.len() > 2 {
            let dt = t[1] - t[0];
            for (i, w) in t.windows(2).enumerate() {
                if ((w[1] - w[0]) - dt).abs() > 1e-9 * dt.abs().max(1.0) {
                    return Err(TraceError::NonUniform(i + 1));
                }
            }
        }
        for (name, col) in self.names.iter().zip(&self.columns) {
            if let Some(row) = col.iter().position(|v| !v.is_finite()) {
                return Err(TraceError::NonFinite {
                    column: name.clone(),
                    row,
                });
            }
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), TraceError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.names)?;
        let mut row = Vec::with_capacity(self.names.len());
        for r in 0..self.len() {
            row.clear();
            row.extend(self.columns.iter().map(|c| c[r].to_string()));
            w.write_record(&row)?;
        }
        w.flush().map_err(|source| TraceError::Io {
            path: "<csv>".into(),
            source,
        })?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("csv output is UTF-8")
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self, TraceError> {
        let mut r = csv::Reader::from_reader(input);
        let names: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        let mut trace = SimTrace::new(names);
        let mut row = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            row.clear();
            for (j, field) in rec.iter().enumerate() {
                let v: f64 = field.trim().parse().map_err(|_| TraceError::Parse {
                    row: i + 1,
                    column: trace.names.get(j).cloned().unwrap_or_default(),
                    message: format!("not a number: {field:?}"),
                })?;
                row.push(v);
            }
            trace.push_row(&row);
        }
        Ok(trace)
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), TraceError> {
        let io = |source| TraceError::Io {
            path: path.display().to_string(),
            source,
        };
        let f = std::fs::File::create(path).map_err(io)?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn load_csv(path: &Path) -> Result<Self, TraceError> {
        let f = std::fs::File::open(path).map_err(|source| TraceError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::read_csv(std::io::BufReader::new(f))
    }
}

/// Saturation: SOC at or above this percentage with near-zero power.
pub const SATURATION_SOC_PCT: f64 = 99.5;
pub const SATURATION_POWER_MW: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct VppMetrics {
    pub id: u32,
    /// First sample with SOC ≥ 99.5 % and |p| < 0.1 MW.
    pub saturation_time_s: Option<f64>,
    /// Up to and including the last sample with |p − p_ref| within tolerance.
    pub service_duration_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub vpps: Vec<VppMetrics>,
    pub peak_freq_dev_hz: f64,
    pub ace_rms_mw: f64,
}

pub fn run_metrics(trace: &SimTrace, nominal_hz: f64, tracking_tol_mw: f64) -> RunMetrics {
    let t = trace.t_s();
    let dt = if t.len() > 1 { t[1] - t[0] } else { 1.0 };
    let t0 = t.first().copied().unwrap_or(0.0);
    let vpps = trace
        .vpp_ids()
        .into_iter()
        .map(|id| {
            let p = trace.column(&format!("vpp{id}_mw")).unwrap_or(&[]);
            let r = trace.column(&format!("vpp{id}_ref_mw")).unwrap_or(&[]);
            let soc = trace.column(&format!("vpp{id}_soc_pct")).unwrap_or(&[]);
            let saturation_time_s = (0..p.len())
                .find(|&k| soc[k] >= SATURATION_SOC_PCT && p[k].abs() < SATURATION_POWER_MW)
                .map(|k| t[k] - t0);
            let last_ok = (0..p.len()).rev().find(|&k| (p[k] - r[k]).abs() <= tracking_tol_mw);
            VppMetrics {
                id,
                saturation_time_s,
                service_duration_s: last_ok.map_or(0.0, |k| t[k] - t0 + dt),
            }
        })
        .collect();
    let f = trace.column("freq_hz").unwrap_or(&[]);
    let ace = trace.column("ace_mw").unwrap_or(&[]);
    RunMetrics {
        vpps,
        peak_freq_dev_hz: f.iter().map(|v| (v - nominal_hz).abs()).fold(0.0, f64::max),
        ace_rms_mw: if ace.is_empty() {
            0.0
        } else {
            (ace.iter().map(|a| a * a).sum::<f64>() / ace.len() as f64).sqrt()
        },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareReport {
    pub a: RunMetrics,
    pub b: RunMetrics,
}

impl CompareReport {
    /// `b − a` for service duration per VPP, in column order.
    pub fn service_duration_delta_s(&self) -> Vec<f64> {
        self.a
            .vpps
            .iter()
            .zip(&self.b.vpps)
            .map(|(x, y)| y.service_duration_s - x.service_duration_s)
            .collect()
    }
}

impl fmt::Display for CompareReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or("none".to_string(), |s| format!("{:.0} s", s));
        writeln!(f, "metric                         a            b            b-a")?;
        for (x, y) in self.a.vpps.iter().zip(&self.b.vpps) {
            let d = match (x.saturation_time_s, y.saturation_time_s) {
                (Some(p), Some(q)) => format!("{:.0} s", q - p),
                _ => "-".into(),
            };
            writeln!(
                f,
                "vpp{} saturation time{:>14} {:>12} {:>12}",
                x.id,
                opt(x.saturation_time_s),
                opt(y.saturation_time_s),
                d
            )?;
            writeln!(
                f,
                "vpp{} service duration{:>11.0} s {:>10.0} s {:>10.0} s",
                x.id,
                x.service_duration_s,
                y.service_duration_s,
                y.service_duration_s - x.service_duration_s
            )?;
        }
        writeln!(
            f,
            "peak |df| (Hz)            {:>12.6} {:>12.6} {:>12.6}",
            self.a.peak_freq_dev_hz,
            self.b.peak_freq_dev_hz,
            self.b.peak_freq_dev_hz - self.a.peak_freq_dev_hz
        )?;
        write!(
            f,
            "ACE RMS (MW)              {:>12.4} {:>12.4} {:>12.4}",
            self.a.ace_rms_mw,
            self.b.ace_rms_mw,
            self.b.ace_rms_mw - self.a.ace_rms_mw
        )
    }
}

/// Metrics of both traces. They must share the sample grid and the VPP set.
pub fn compare_runs(
    a: &SimTrace,
    b: &SimTrace,
    nominal_hz: f64,
    tracking_tol_mw: f64,
) -> Result<CompareReport, TraceError> {
    let (ta, tb) = (a.t_s(), b.t_s());
    if ta.is_empty() || tb.is_empty() {
        return Err(TraceError::GridMismatch("a trace has no t_s samples".into()));
    }
    if ta.len() != tb.len() {
        return Err(TraceError::GridMismatch(format!(
            "{} samples against {}",
            ta.len(),
            tb.len()
        )));
    }
    if let Some(k) = ta.iter().zip(tb).position(|(x, y)| (x - y).abs() > 1e-9) {
        return Err(TraceError::GridMismatch(format!("sample times differ at row {k}")));
    }
    if a.vpp_ids() != b.vpp_ids() {
        return Err(TraceError::GridMismatch("different VPP columns".into()));
    }
    Ok(CompareReport {
        a: run_metrics(a, nominal_hz, tracking_tol_mw),
        b: run_metrics(b, nominal_hz, tracking_tol_mw),
    })
}
