//! Per-step metrics CSV.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::LossBreakdown;

use super::step::StepRecord;

pub const HEADER: &str = "step,rec1,rec2,con,total,m,lr,wall_ms";

/// One CSV line without the trailing newline. Floats use the shortest
/// representation that parses back to the same value.
pub fn format_row(r: &StepRecord) -> String {
    format!(
        "{},{},{},{},{},{},{},{:.3}",
        r.step, r.loss.rec1, r.loss.rec2, r.loss.con, r.loss.total, r.m, r.lr, r.wall_ms
    )
}

pub fn parse_row(line: &str, lambda: f64) -> Result<StepRecord> {
    let fields: Vec<&str> = line.trim().split(',').collect();
    if fields.len() != 8 {
        return Err(Error::Data(format!("metrics row has {} fields: '{line}'", fields.len())));
    }
    let f = |i: usize| -> Result<f64> {
        fields[i]
            .parse()
            .map_err(|_| Error::Data(format!("bad metrics value '{}'", fields[i])))
    };
    let step = fields[0]
        .parse()
        .map_err(|_| Error::Data(format!("bad step '{}'", fields[0])))?;
    Ok(StepRecord {
        step,
        loss: LossBreakdown {
            rec1: f(1)?,
            rec2: f(2)?,
            con: f(3)?,
            lambda,
            total: f(4)?,
            empty_intersection: false,
        },
        m: f(5)?,
        lr: f(6)?,
        wall_ms: f(7)?,
    })
}

pub fn read_csv(path: &Path, lambda: f64) -> Result<Vec<StepRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == HEADER => {}
        _ => return Err(Error::Data(format!("{} lacks the metrics header", path.display()))),
    }
    lines.filter(|l| !l.trim().is_empty()).map(|l| parse_row(l, lambda)).collect()
}

/// Appending CSV writer. Opening keeps existing rows up to `keep_through`
/// (inclusive) so a resumed run continues without duplicate steps.
pub struct MetricsWriter {
    file: fs::File,
}

impl MetricsWriter {
    pub fn open(path: &Path, keep_through: u64) -> Result<Self> {
        let mut body = format!("{HEADER}\n");
        if path.exists() {
            for r in read_csv(path, 0.0)? {
                if r.step <= keep_through {
                    body.push_str(&format_row(&r));
                    body.push('\n');
                }
            }
        }
        fs::write(path, body).map_err(|e| Error::io(path, e))?;
        let file = fs::OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self { file })
    }

    pub fn append(&mut self, r: &StepRecord) -> std::io::Result<()> {
        writeln!(self.file, "{}", format_row(r))?;
        self.file.flush()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(step: u64) -> StepRecord {
        StepRecord {
            step,
            loss: LossBreakdown {
                rec1: 0.1 + step as f64,
                rec2: 1.0 / 3.0,
                con: 0.0,
                lambda: 1.0,
                total: std::f64::consts::PI,
                empty_intersection: false,
            },
            m: 0.996,
            lr: 1e-3,
            wall_ms: 12.5,
        }
    }

    #[test]
    fn rows_round_trip_exactly() {
        let r = record(7);
        assert_eq!(parse_row(&format_row(&r), 1.0).unwrap(), r);
    }

    #[test]
    fn reopening_truncates_later_steps() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let mut w = MetricsWriter::open(&path, 0).unwrap();
        for s in 1..=5 {
            w.append(&record(s)).unwrap();
        }
        drop(w);
        let mut w = MetricsWriter::open(&path, 3).unwrap();
        w.append(&record(4)).unwrap();
        drop(w);
        let steps: Vec<u64> = read_csv(&path, 1.0).unwrap().iter().map(|r| r.step).collect();
        assert_eq!(steps, [1, 2, 3, 4]);
    }
}
