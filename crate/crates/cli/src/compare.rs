//! Side-by-side summary of stored runs.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::runner::{LEADING_COLUMNS, METRICS_FILE, SUMMARY_SEED};
use crate::CliError;

/// One run directory's final-round summary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComparisonRow {
    pub run: String,
    pub strategy: String,
    pub alpha: String,
    pub seeds: usize,
    pub rounds: String,
    /// `mean±std` as stored in the summary row.
    pub pfl_acc: String,
    pub drift: String,
    pub global_pfl_acc: String,
}

pub const COMPARISON_HEADER: [&str; 8] = [
    "run",
    "strategy",
    "alpha",
    "seeds",
    "rounds",
    "pfl_acc",
    "drift",
    "global_pfl_acc",
];

impl ComparisonRow {
    pub fn cells(&self) -> [String; 8] {
        [
            self.run.clone(),
            self.strategy.clone(),
            self.alpha.clone(),
            self.seeds.to_string(),
            self.rounds.clone(),
            self.pfl_acc.clone(),
            self.drift.clone(),
            self.global_pfl_acc.clone(),
        ]
    }
}

fn malformed(path: &Path, line: u64, detail: impl Into<String>) -> CliError {
    CliError::Malformed {
        path: path.to_owned(),
        line,
        detail: detail.into(),
    }
}

/// Reads `<dir>/metrics.csv` and returns its summary as a row.
pub fn read_run(dir: &Path) -> Result<ComparisonRow, CliError> {
    let path = dir.join(METRICS_FILE);
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(&path)
        .map_err(|e| CliError::Io {
            path: path.clone(),
            detail: e.to_string(),
        })?;
    let mut records = reader.records();
    let header = match records.next() {
        Some(Ok(h)) => h,
        Some(Err(e)) => return Err(malformed(&path, 1, e.to_string())),
        None => return Err(malformed(&path, 1, "empty file")),
    };
    if header.len() < LEADING_COLUMNS.len() || header.iter().zip(LEADING_COLUMNS).any(|(a, b)| a != b) {
        return Err(malformed(&path, 1, "unexpected header"));
    }
    let width = header.len();
    let mut seeds = BTreeSet::new();
    let mut summary = None;
    let mut line = 1;
    for record in records {
        line += 1;
        let record = record.map_err(|e| malformed(&path, line, e.to_string()))?;
        if record.len() != width {
            return Err(malformed(&path, line, format!("{} fields, header has {width}", record.len())));
        }
        if summary.is_some() {
            return Err(malformed(&path, line, "rows after the summary row"));
        }
        if &record[0] == SUMMARY_SEED {
            summary = Some(record);
            continue;
        }
        let seed: u64 = record[0]
            .parse()
            .map_err(|_| malformed(&path, line, format!("bad seed {:?}", &record[0])))?;
        record[1]
            .parse::<usize>()
            .map_err(|_| malformed(&path, line, format!("bad round {:?}", &record[1])))?;
        for (k, cell) in record.iter().enumerate().skip(4) {
            cell.parse::<f64>()
                .map_err(|_| malformed(&path, line, format!("bad {} {cell:?}", &header[k])))?;
        }
        seeds.insert(seed);
    }
    let summary = summary.ok_or_else(|| malformed(&path, line, "missing summary row"))?;
    Ok(ComparisonRow {
        run: dir.display().to_string(),
        strategy: summary[2].to_string(),
        alpha: summary[3].to_string(),
        seeds: seeds.len(),
        rounds: summary[1].to_string(),
        pfl_acc: summary[4].to_string(),
        drift: summary[5].to_string(),
        global_pfl_acc: summary[6].to_string(),
    })
}

pub fn compare(dirs: &[PathBuf]) -> Result<Vec<ComparisonRow>, CliError> {
    dirs.iter().map(|d| read_run(d)).collect()
}

/// Fixed-width text table.
pub fn render_table(rows: &[ComparisonRow]) -> String {
    let cells: Vec<Vec<String>> = std::iter::once(COMPARISON_HEADER.map(String::from).to_vec())
        .chain(rows.iter().map(|r| r.cells().to_vec()))
        .collect();
    let widths: Vec<usize> = (0..COMPARISON_HEADER.len())
        .map(|c| cells.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &cells {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, &w)| format!("{cell:<w$}"))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

pub fn write_csv(rows: &[ComparisonRow], path: &Path) -> Result<(), CliError> {
    let err = |e: csv::Error| CliError::Io {
        path: path.to_owned(),
        detail: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(COMPARISON_HEADER).map_err(err)?;
    for r in rows {
        w.write_record(r.cells()).map_err(err)?;
    }
    w.flush().map_err(|e| CliError::Io {
        path: path.to_owned(),
        detail: e.to_string(),
    })
}
