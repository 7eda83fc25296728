//! CSV output with the fixed sweep schema.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::memwatch::MemoryReport;
use crate::planner::ProbeRow;

pub const CSV_HEADER: [&str; 9] = [
    "net",
    "layer",
    "depth",
    "scenario",
    "policy",
    "tape_bytes",
    "peak_bytes",
    "forward_ms",
    "backward_ms",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub net: String,
    pub layer: String,
    pub depth: usize,
    pub scenario: String,
    pub policy: String,
    pub tape_bytes: usize,
    pub peak_bytes: usize,
    pub forward_ms: f64,
    pub backward_ms: f64,
}

/// Milliseconds rounded to whole microseconds.
fn ms(x: f64) -> f64 {
    (x * 1e3).round() / 1e3
}

impl From<&ProbeRow> for CsvRow {
    fn from(r: &ProbeRow) -> Self {
        Self {
            net: r.net.clone(),
            layer: r.layer.clone(),
            depth: r.depth,
            scenario: r.scenario.clone(),
            policy: r.policy.clone(),
            tape_bytes: r.tape_bytes,
            peak_bytes: r.peak_bytes,
            forward_ms: ms(r.forward_ms),
            backward_ms: ms(r.backward_ms),
        }
    }
}

impl From<&MemoryReport> for CsvRow {
    fn from(r: &MemoryReport) -> Self {
        Self {
            net: r.net.clone(),
            layer: r.layer.clone(),
            depth: r.depth,
            scenario: r.scenario.clone(),
            policy: r.policy.clone(),
            tape_bytes: r.tape_bytes,
            peak_bytes: r.peak_bytes,
            forward_ms: ms(r.forward_seconds * 1e3),
            backward_ms: ms(r.backward_seconds * 1e3),
        }
    }
}

/// Writes the header and `rows`, LF-terminated. The header is written even
/// when there are no rows.
pub fn write_csv<W: Write>(out: W, rows: &[CsvRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<CsvRow>> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(crate::Error::InvalidConfig(format!("unexpected CSV header {header:?}")));
    }
    r.deserialize().map(|row| Ok(row?)).collect()
}

/// Least-squares slope of `y` against `x`.
pub fn fit_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}
