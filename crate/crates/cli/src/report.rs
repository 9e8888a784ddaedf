//! Comparison of metrics CSV files from several runs.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use clat_core::trainer::EpochMetrics;

/// Final and best numbers of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub name: String,
    pub epochs: usize,
    pub final_row: EpochMetrics,
    pub best_adv_acc: f64,
    pub best_adv_epoch: usize,
}

impl RunSummary {
    pub fn new(name: &str, rows: &[EpochMetrics]) -> Option<Self> {
        let final_row = rows.last()?.clone();
        let best = rows
            .iter()
            .filter(|r| !r.adv_acc.is_nan())
            .fold(None::<&EpochMetrics>, |b, r| match b {
                Some(b) if b.adv_acc >= r.adv_acc => Some(b),
                _ => Some(r),
            });
        Some(Self {
            name: name.to_string(),
            epochs: rows.len(),
            best_adv_acc: best.map_or(f64::NAN, |b| b.adv_acc),
            best_adv_epoch: best.map_or(0, |b| b.epoch),
            final_row,
        })
    }
}

/// Differences of a run against the first (reference) run.
#[derive(Debug, Clone, PartialEq)]
pub struct Delta {
    pub name: String,
    pub clean_acc: f64,
    pub adv_acc: f64,
    pub best_adv_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub runs: Vec<RunSummary>,
    pub deltas: Vec<Delta>,
    /// Union of epochs across runs with each run's row for that epoch.
    pub series: Vec<(usize, Vec<Option<EpochMetrics>>)>,
}

pub fn build(runs: &[(String, Vec<EpochMetrics>)]) -> Report {
    let summaries: Vec<RunSummary> = runs.iter().filter_map(|(n, rows)| RunSummary::new(n, rows)).collect();
    let deltas = match summaries.first() {
        Some(base) => summaries
            .iter()
            .skip(1)
            .map(|s| Delta {
                name: s.name.clone(),
                clean_acc: s.final_row.clean_acc - base.final_row.clean_acc,
                adv_acc: s.final_row.adv_acc - base.final_row.adv_acc,
                best_adv_acc: s.best_adv_acc - base.best_adv_acc,
            })
            .collect(),
        None => Vec::new(),
    };
    let epochs: BTreeSet<usize> = runs.iter().flat_map(|(_, rows)| rows.iter().map(|r| r.epoch)).collect();
    let series = epochs
        .into_iter()
        .map(|e| (e, runs.iter().map(|(_, rows)| rows.iter().find(|r| r.epoch == e).cloned()).collect()))
        .collect();
    Report {
        runs: summaries,
        deltas,
        series,
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.6}"))
}

impl Report {
    /// Plot-ready CSV: one row per epoch, clean and adversarial accuracy per run.
    pub fn series_csv(&self) -> String {
        let mut s = String::from("epoch");
        for r in &self.runs {
            let _ = write!(s, ",{0}_clean_acc,{0}_adv_acc", r.name);
        }
        s.push('\n');
        for (epoch, rows) in &self.series {
            let _ = write!(s, "{epoch}");
            for row in rows {
                let _ = write!(
                    s,
                    ",{},{}",
                    fmt_opt(row.as_ref().map(|r| r.clean_acc)),
                    fmt_opt(row.as_ref().map(|r| r.adv_acc))
                );
            }
            s.push('\n');
        }
        s
    }

    pub fn summary_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<20} {:>6} {:>10} {:>10} {:>10} {:>10} {:>10}",
            "run", "epochs", "clean", "adv", "ce_loss", "best_adv", "best_ep"
        );
        for r in &self.runs {
            let f = &r.final_row;
            let _ = writeln!(
                s,
                "{:<20} {:>6} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10}",
                r.name, r.epochs, f.clean_acc, f.adv_acc, f.ce_loss, r.best_adv_acc, r.best_adv_epoch
            );
        }
        if let Some(base) = self.runs.first() {
            if !self.deltas.is_empty() {
                let _ = writeln!(s, "\ndelta vs {}", base.name);
                let _ = writeln!(s, "{:<20} {:>10} {:>10} {:>10}", "run", "clean", "adv", "best_adv");
                for d in &self.deltas {
                    let _ = writeln!(
                        s,
                        "{:<20} {:>+10.4} {:>+10.4} {:>+10.4}",
                        d.name, d.clean_acc, d.adv_acc, d.best_adv_acc
                    );
                }
            }
        }
        s
    }
}
