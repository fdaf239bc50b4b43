//! Deterministic CSV reading and writing for traces, snapshots, and series.
//!
//! Floats are written with Rust's shortest-roundtrip formatting, so a file
//! read back through these readers reproduces the original values bit for bit
//! and two runs with identical inputs produce byte-identical artifacts.

use std::io::{self, BufRead, Write};

use thiserror::Error;

use crate::distribution::InhomogeneousDistribution;
use crate::ensemble::EnsembleState;
use crate::model::{TraceSample, TransmissionTrace};

#[derive(Debug, Error)]
pub enum CsvError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("line {line}: expected {expected} columns, found {found}")]
    ColumnCount {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: cannot parse `{value}` as a number")]
    BadNumber { line: usize, value: String },
    #[error("missing or wrong header: expected `{0}`")]
    BadHeader(String),
}

pub const TRACE_HEADER: &str = "time_s,intensity,alpha";
pub const SNAPSHOT_HEADER: &str = "delta_hz,mx,my,mz";

/// Writes `time_s,intensity,alpha` rows.
pub fn write_trace_csv<W: Write>(mut w: W, trace: &TransmissionTrace) -> io::Result<()> {
    writeln!(w, "{TRACE_HEADER}")?;
    for s in &trace.samples {
        writeln!(w, "{},{},{}", s.time, s.intensity, s.alpha)?;
    }
    Ok(())
}

/// Reads a trace CSV back into samples (markers travel in the summary JSON).
pub fn read_trace_csv<R: BufRead>(r: R) -> Result<Vec<TraceSample>, CsvError> {
    let mut lines = r.lines().enumerate();
    match lines.next() {
        Some((_, Ok(h))) if h.trim() == TRACE_HEADER => {}
        _ => return Err(CsvError::BadHeader(TRACE_HEADER.into())),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cols = parse_row(&line, i + 1, 3)?;
        out.push(TraceSample {
            time: cols[0],
            intensity: cols[1],
            alpha: cols[2],
        });
    }
    Ok(out)
}

/// Writes a sphere snapshot: one row per node, `delta_hz,mx,my,mz`.
/// Detunings are ordinary frequency in the file, angular inside.
pub fn write_snapshot_csv<W: Write>(
    mut w: W,
    dist: &InhomogeneousDistribution,
    state: &EnsembleState,
) -> io::Result<()> {
    writeln!(w, "{SNAPSHOT_HEADER}")?;
    for (node, m) in dist.nodes.iter().zip(&state.magnetizations) {
        let delta_hz = node.delta / std::f64::consts::TAU;
        writeln!(w, "{},{},{},{}", delta_hz, m.mx, m.my, m.mz)?;
    }
    Ok(())
}

/// Reads a snapshot CSV into (delta_hz, mx, my, mz) rows.
pub fn read_snapshot_csv<R: BufRead>(r: R) -> Result<Vec<[f64; 4]>, CsvError> {
    let mut lines = r.lines().enumerate();
    match lines.next() {
        Some((_, Ok(h))) if h.trim() == SNAPSHOT_HEADER => {}
        _ => return Err(CsvError::BadHeader(SNAPSHOT_HEADER.into())),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cols = parse_row(&line, i + 1, 4)?;
        out.push([cols[0], cols[1], cols[2], cols[3]]);
    }
    Ok(out)
}

/// Writes a two-column series with the given header.
pub fn write_series_csv<W: Write>(
    mut w: W,
    header: &str,
    rows: &[(f64, f64)],
) -> io::Result<()> {
    writeln!(w, "{header}")?;
    for (a, b) in rows {
        writeln!(w, "{a},{b}")?;
    }
    Ok(())
}

/// Reads a two-column numeric series, returning the header verbatim.
pub fn read_series_csv<R: BufRead>(r: R) -> Result<(String, Vec<(f64, f64)>), CsvError> {
    let mut lines = r.lines().enumerate();
    let header = match lines.next() {
        Some((_, Ok(h))) => h,
        _ => return Err(CsvError::BadHeader("two-column series".into())),
    };
    let mut out = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cols = parse_row(&line, i + 1, 2)?;
        out.push((cols[0], cols[1]));
    }
    Ok((header, out))
}

fn parse_row(line: &str, line_no: usize, expected: usize) -> Result<Vec<f64>, CsvError> {
    let parts: Vec<&str> = line.split(',').collect();
    if parts.len() != expected {
        return Err(CsvError::ColumnCount {
            line: line_no,
            expected,
            found: parts.len(),
        });
    }
    parts
        .iter()
        .map(|p| {
            p.trim().parse::<f64>().map_err(|_| CsvError::BadNumber {
                line: line_no,
                value: p.trim().to_string(),
            })
        })
        .collect()
}
