//! Per-epoch metrics as CSV.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::trainer::{EpochMetrics, Phase};

pub const HEADER: [&str; 8] = [
    "epoch",
    "phase",
    "clean_acc",
    "adv_acc",
    "ce_loss",
    "crit_loss",
    "critical_set",
    "trainable_frac",
];

/// `[3, 5]` ↔ `"3;5"`.
pub fn format_set(set: &[usize]) -> String {
    set.iter().map(usize::to_string).collect::<Vec<_>>().join(";")
}

pub fn parse_set(s: &str) -> std::result::Result<Vec<usize>, String> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(';')
        .map(|x| x.trim().parse::<usize>().map_err(|e| format!("critical_set '{s}': {e}")))
        .collect()
}

fn csv_err(e: csv::Error) -> Error {
    let row = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse {
        row,
        message: e.to_string(),
    }
}

pub fn write_metrics<W: Write>(out: W, rows: &[EpochMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(HEADER).map_err(csv_err)?;
    for m in rows {
        w.write_record([
            m.epoch.to_string(),
            m.phase.to_string(),
            m.clean_acc.to_string(),
            m.adv_acc.to_string(),
            m.ce_loss.to_string(),
            m.crit_loss.to_string(),
            format_set(&m.critical_set),
            m.trainable_frac.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Parse metrics CSV. Errors name the 1-based line of the offending row.
pub fn read_metrics<R: Read>(input: R) -> Result<Vec<EpochMetrics>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers().map_err(csv_err)?.clone();
    if header.iter().ne(HEADER) {
        return Err(Error::Parse {
            row: 1,
            message: format!("expected header '{}', found '{}'", HEADER.join(","), header.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let row = rec.position().map_or(0, |p| p.line() as usize);
        let bad = |message: String| Error::Parse { row, message };
        let float = |i: usize| -> Result<f64> {
            rec[i]
                .parse::<f64>()
                .map_err(|e| bad(format!("{} '{}': {e}", HEADER[i], &rec[i])))
        };
        rows.push(EpochMetrics {
            epoch: rec[0].parse().map_err(|e| bad(format!("epoch '{}': {e}", &rec[0])))?,
            phase: rec[1].parse::<Phase>().map_err(|e| bad(e.to_string()))?,
            clean_acc: float(2)?,
            adv_acc: float(3)?,
            ce_loss: float(4)?,
            crit_loss: float(5)?,
            critical_set: parse_set(&rec[6]).map_err(bad)?,
            trainable_frac: float(7)?,
        });
    }
    Ok(rows)
}

pub fn save_metrics(path: impl AsRef<Path>, rows: &[EpochMetrics]) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io_at(path, e))?;
    write_metrics(std::io::BufWriter::new(f), rows)
}

pub fn load_metrics(path: impl AsRef<Path>) -> Result<Vec<EpochMetrics>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io_at(path, e))?;
    read_metrics(f)
}
