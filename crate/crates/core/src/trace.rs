//! Simulation traces, their CSV form and run summaries.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::funnel::strictly_inside;
use crate::linalg::{dist, norm};

pub const FLAG_ESCAPED: u8 = 1;
pub const FLAG_VIOLATED: u8 = 2;
pub const FLAG_NAN: u8 = 4;

/// One recorded node.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    /// Full state of the controlled system (output stack and internal state).
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub y_model: Vec<f64>,
    /// ẏ … y^{(r−1)} of the system, stacked.
    pub dy: Vec<f64>,
    pub u_fmpc: Vec<f64>,
    pub u_fc: Vec<f64>,
    pub psi: f64,
    pub phi: f64,
    /// ψ − ‖y − y_ref‖.
    pub margin: f64,
    pub flags: u8,
}

impl TraceRow {
    pub fn u_total(&self) -> Vec<f64> {
        self.u_fmpc.iter().zip(&self.u_fc).map(|(a, b)| a + b).collect()
    }
}

/// Time-ordered record of a closed-loop run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SimulationTrace {
    pub m: usize,
    pub r: usize,
    pub rows: Vec<TraceRow>,
    /// (time, ‖x⁺ − x⁻‖) of every recorded re-initialisation.
    pub jumps: Vec<(f64, f64)>,
}

impl SimulationTrace {
    pub fn new(m: usize, r: usize) -> Self {
        SimulationTrace { m, r, rows: Vec::new(), jumps: Vec::new() }
    }

    /// Appends a row; flags are accumulated so that once set they stay set.
    pub fn push(&mut self, mut row: TraceRow) {
        let prev = self.rows.last().map(|r| r.flags).unwrap_or(0);
        let mut flags = prev | row.flags;
        if row.psi.is_finite() && !strictly_inside(row.psi - row.margin, row.psi) {
            flags |= FLAG_VIOLATED;
        }
        if row.x.iter().chain(&row.y).any(|v| !v.is_finite()) {
            flags |= FLAG_NAN;
        }
        row.flags = flags;
        self.rows.push(row);
    }

    pub fn flags(&self) -> u8 {
        self.rows.last().map(|r| r.flags).unwrap_or(0)
    }

    pub fn violated(&self) -> bool {
        self.flags() & FLAG_VIOLATED != 0
    }

    pub fn end_time(&self) -> Option<f64> {
        self.rows.last().map(|r| r.t)
    }

    pub fn times(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.t).collect()
    }

    pub fn header(&self) -> Vec<String> {
        let m = self.m;
        let mut h = vec!["t".to_string()];
        h.extend((1..=m).map(|i| format!("y_{i}")));
        h.extend((1..=m).map(|i| format!("yM_{i}")));
        for k in 1..self.r {
            h.extend((1..=m).map(|i| format!("dy{k}_{i}")));
        }
        h.extend((1..=m).map(|i| format!("u_fmpc_{i}")));
        h.extend((1..=m).map(|i| format!("u_fc_{i}")));
        h.extend(["psi", "phi", "margin", "flags"].map(String::from));
        h
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
        wr.write_record(self.header())?;
        for row in &self.rows {
            let mut rec: Vec<String> = vec![row.t.to_string()];
            for v in row.y.iter().chain(&row.y_model).chain(&row.dy).chain(&row.u_fmpc).chain(&row.u_fc) {
                rec.push(v.to_string());
            }
            rec.push(row.psi.to_string());
            rec.push(row.phi.to_string());
            rec.push(row.margin.to_string());
            rec.push(row.flags.to_string());
            wr.write_record(rec)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Reads a trace written by [`write_csv`](Self::write_csv); states are not part of the CSV.
    pub fn read_csv<R: Read>(rd: R, m: usize, r: usize) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(rd);
        let mut trace = SimulationTrace::new(m, r);
        let width = 1 + m * (r + 3) + 4;
        for rec in reader.records() {
            let rec = rec?;
            if rec.len() != width {
                return Err(Error::DimensionMismatch { expected: width, got: rec.len() });
            }
            let vals: Vec<f64> = rec
                .iter()
                .map(|s| s.parse::<f64>().map_err(|e| Error::Io(format!("bad number {s:?}: {e}"))))
                .collect::<Result<_>>()?;
            let mut at = 1;
            let mut take = |n: usize| {
                let v = vals[at..at + n].to_vec();
                at += n;
                v
            };
            let y = take(m);
            let y_model = take(m);
            let dy = take(m * (r - 1));
            let u_fmpc = take(m);
            let u_fc = take(m);
            let tail = take(4);
            trace.rows.push(TraceRow {
                t: vals[0],
                x: Vec::new(),
                y,
                y_model,
                dy,
                u_fmpc,
                u_fc,
                psi: tail[0],
                phi: tail[1],
                margin: tail[2],
                flags: tail[3] as u8,
            });
        }
        Ok(trace)
    }
}

/// Concatenates traces; trace k+1 must start where trace k ends, and the
/// state may only jump at one of `jump_times`.
pub fn concatenate(traces: Vec<SimulationTrace>, jump_times: &[f64]) -> Result<SimulationTrace> {
    let mut it = traces.into_iter();
    let mut out = match it.next() {
        Some(t) => t,
        None => return Ok(SimulationTrace::default()),
    };
    for (k, next) in it.enumerate() {
        let (Some(last), Some(first)) = (out.rows.last(), next.rows.first()) else {
            return Err(Error::TimeMismatch { index: k + 1 });
        };
        let tol = 1e-9 * (1.0 + last.t.abs());
        if (last.t - first.t).abs() > tol {
            return Err(Error::TimeMismatch { index: k + 1 });
        }
        let jump = dist(&last.x, &first.x);
        let allowed = jump_times.iter().any(|&s| (s - first.t).abs() <= tol);
        if jump > 1e-12 && !allowed {
            return Err(Error::TimeMismatch { index: k + 1 });
        }
        if allowed {
            out.jumps.push((first.t, jump));
        }
        out.rows.pop();
        let flags = out.flags();
        for mut row in next.rows {
            row.flags |= flags;
            out.rows.push(row);
        }
        out.jumps.extend(next.jumps);
    }
    Ok(out)
}

/// Aggregates of a trace; everything except `runtime_s` is recomputable from the CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub violated: bool,
    pub max_ratio: f64,
    pub max_u_fmpc: Vec<f64>,
    pub max_u_fc: Vec<f64>,
    pub max_u_fmpc_norm: f64,
    pub max_u_fc_norm: f64,
    pub max_u_norm: f64,
    pub int_u_fc: f64,
    pub flags: u8,
    pub runtime_s: f64,
}

impl ReportSummary {
    pub fn from_trace(trace: &SimulationTrace) -> Self {
        let m = trace.m;
        let mut s = ReportSummary {
            violated: trace.violated(),
            max_ratio: 0.0,
            max_u_fmpc: vec![0.0; m],
            max_u_fc: vec![0.0; m],
            max_u_fmpc_norm: 0.0,
            max_u_fc_norm: 0.0,
            max_u_norm: 0.0,
            int_u_fc: 0.0,
            flags: trace.flags(),
            runtime_s: 0.0,
        };
        for (i, row) in trace.rows.iter().enumerate() {
            if row.psi.is_finite() && row.psi > 0.0 {
                s.max_ratio = s.max_ratio.max((row.psi - row.margin) / row.psi);
            }
            for l in 0..m {
                s.max_u_fmpc[l] = s.max_u_fmpc[l].max(row.u_fmpc[l].abs());
                s.max_u_fc[l] = s.max_u_fc[l].max(row.u_fc[l].abs());
            }
            s.max_u_fmpc_norm = s.max_u_fmpc_norm.max(norm(&row.u_fmpc));
            let fc = norm(&row.u_fc);
            s.max_u_fc_norm = s.max_u_fc_norm.max(fc);
            s.max_u_norm = s.max_u_norm.max(norm(&row.u_total()));
            if let Some(next) = trace.rows.get(i + 1) {
                s.int_u_fc += fc * (next.t - row.t);
            }
        }
        s
    }
}

/// Mean of ‖u_fc‖ over the rows with t in [a, b] (time weighted, left rectangles).
pub fn mean_u_fc(trace: &SimulationTrace, a: f64, b: f64) -> f64 {
    let mut acc = 0.0;
    let mut len = 0.0;
    for w in trace.rows.windows(2) {
        if w[0].t >= a && w[1].t <= b {
            let dt = w[1].t - w[0].t;
            acc += norm(&w[0].u_fc) * dt;
            len += dt;
        }
    }
    if len > 0.0 {
        acc / len
    } else {
        0.0
    }
}
