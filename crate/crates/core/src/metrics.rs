//! Small statistics helpers and the CSV tables every run emits.

use std::fs;
use std::path::Path;

use crate::error::{precondition, Error, Result};

/// Ranks starting at 1, ties share their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("constant input".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Rank correlation with average ranks on ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return precondition(format!("spearman needs equal lengths, got {} and {}", x.len(), y.len()));
    }
    if x.len() < 2 {
        return precondition("spearman needs at least two points");
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Population standard deviation over the mean.
pub fn coeff_of_variation(counts: &[f64]) -> Result<f64> {
    if counts.is_empty() {
        return precondition("coefficient of variation of nothing");
    }
    let n = counts.len() as f64;
    let mean = counts.iter().sum::<f64>() / n;
    if mean <= 0.0 {
        return precondition("coefficient of variation needs a positive mean");
    }
    let var = counts.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / n;
    Ok(var.sqrt() / mean)
}

/// Scales to unit sum; an all-zero histogram stays zero.
pub fn normalize_histogram(counts: &[f64]) -> Vec<f64> {
    let s: f64 = counts.iter().sum();
    if s > 0.0 {
        counts.iter().map(|c| c / s).collect()
    } else {
        counts.to_vec()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Int(i64),
    Float(f64),
    Text(String),
}

impl Cell {
    fn kind(&self) -> u8 {
        match self {
            Cell::Int(_) => 0,
            Cell::Float(_) => 1,
            Cell::Text(_) => 2,
        }
    }

    /// Floats always carry a `.` or an exponent so they never read back as
    /// integers; `{:?}` is the shortest exact representation.
    fn render(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Float(v) => format!("{v:?}"),
            Cell::Text(s) => s.clone(),
        }
    }

    fn parse(s: &str) -> Cell {
        if let Ok(v) = s.parse::<i64>() {
            Cell::Int(v)
        } else if let Ok(v) = s.parse::<f64>() {
            Cell::Float(v)
        } else {
            Cell::Text(s.to_string())
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match *self {
            Cell::Int(v) => Some(v as f64),
            Cell::Float(v) => Some(v),
            Cell::Text(_) => None,
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<i64> for Cell {
    fn from(v: i64) -> Self {
        Cell::Int(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

/// Header plus rows; each column holds one kind of cell.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_lowercase() || c == '_')
        && chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
        && s.parse::<f64>().is_err()
}

impl CsvTable {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) -> Result<()> {
        self.check_row(self.rows.len(), &row)?;
        self.rows.push(row);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column(&self, name: &str) -> Option<Vec<&Cell>> {
        let i = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| &r[i]).collect())
    }

    fn check_row(&self, index: usize, row: &[Cell]) -> Result<()> {
        if row.len() != self.header.len() {
            return Err(Error::Parse {
                row: index,
                detail: format!("{} cells, header has {}", row.len(), self.header.len()),
            });
        }
        if let Some(first) = self.rows.first() {
            for (c, (a, b)) in first.iter().zip(row).enumerate() {
                if a.kind() != b.kind() {
                    return Err(Error::Parse {
                        row: index,
                        detail: format!("column {} changes type", self.header[c]),
                    });
                }
            }
        }
        for cell in row {
            match cell {
                Cell::Text(s) if !is_identifier(s) => {
                    return Err(Error::Parse {
                        row: index,
                        detail: format!("text cell {s:?} is not a snake_case identifier"),
                    })
                }
                Cell::Float(v) if !v.is_finite() => {
                    return Err(Error::Parse {
                        row: index,
                        detail: format!("non-finite value {v}"),
                    })
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(Cell::render).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    /// Row indices in errors count data rows from zero.
    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_reader(text.as_bytes());
        let header = reader
            .headers()
            .map_err(|e| Error::Parse {
                row: 0,
                detail: e.to_string(),
            })?
            .iter()
            .map(str::to_string)
            .collect();
        let mut table = CsvTable { header, rows: Vec::new() };
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::Parse {
                row: i,
                detail: e.to_string(),
            })?;
            table.push(rec.iter().map(Cell::parse).collect())?;
        }
        Ok(table)
    }
}

/// Writes to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_table(table: &CsvTable, path: &Path) -> Result<()> {
    write_atomic(path, table.to_csv_string().as_bytes())
}

pub fn read_table(path: &Path) -> Result<CsvTable> {
    CsvTable::from_csv_str(&fs::read_to_string(path)?)
}
