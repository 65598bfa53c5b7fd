use std::io::Write;

use super::BenchRow;
use crate::error::Result;

/// One CSV line per row after a header naming every [`BenchRow`] field.
pub fn write_csv<W: Write>(rows: &[BenchRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// A pretty-printed JSON array of row objects.
pub fn write_json<W: Write>(rows: &[BenchRow], mut out: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut out, rows)?;
    writeln!(out)?;
    Ok(())
}

/// Fixed-width table for terminals.
pub fn format_table(rows: &[BenchRow]) -> String {
    let mut s = format!(
        "{:<14} {:>5} {:>6} {:>7} {:>11} {:>11} {:>11} {:>14} {:>14} {:>12}\n",
        "target", "batch", "d", "n", "median_ms", "p5_ms", "p95_ms", "flops", "macs", "items/s"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<14} {:>5} {:>6} {:>7} {:>11.4} {:>11.4} {:>11.4} {:>14} {:>14} {:>12.1}\n",
            r.target.as_str(),
            r.batch,
            r.d,
            r.n,
            r.median_ms,
            r.p5_ms,
            r.p95_ms,
            r.flops,
            r.macs,
            r.throughput_items_per_s
        ));
    }
    s
}
