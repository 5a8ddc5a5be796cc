//! Tab-separated convergence tables for external plotting.

use crate::error::{HarnessError, Result};
use crate::run::CurvePoint;
use std::io::Write;
use std::path::Path;

pub const HEADER: &str = "method\titeration\twall_clock_s\tmetric_name\tvalue";

pub fn write_curves<W: Write>(records: &[CurvePoint], mut out: W) -> Result<()> {
    if records.is_empty() {
        return Err(HarnessError::invalid("no curve records to write"));
    }
    writeln!(out, "{HEADER}")?;
    for r in records {
        writeln!(out, "{}\t{}\t{:.6}\t{}\t{:?}", r.method, r.iteration, r.wall_clock_s, r.metric_name, r.value)?;
    }
    Ok(())
}

pub fn emit_curves(records: &[CurvePoint], path: impl AsRef<Path>) -> Result<()> {
    if records.is_empty() {
        return Err(HarnessError::invalid("no curve records to write"));
    }
    let file = std::fs::File::create(path)?;
    let mut out = std::io::BufWriter::new(file);
    write_curves(records, &mut out)?;
    out.flush()?;
    Ok(())
}
