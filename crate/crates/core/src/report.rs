//! Plot-ready data files from result tables. Rendering is left to external
//! tools (`scripts/plot.py` draws PNGs from these files).

use std::path::{Path, PathBuf};

use crate::error::{FmError, Result};

/// A tab-separated table. Lines starting with `#` are comments; the first
/// other line is the header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn parse(name: &str, text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| FmError::InvalidArgument(format!("table {name} has no header")))?
            .split('\t')
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for (i, l) in lines.enumerate() {
            let row: Vec<String> = l.split('\t').map(str::to_string).collect();
            if row.len() != header.len() {
                return Err(FmError::InvalidArgument(format!(
                    "table {name} row {} has {} fields, header has {}",
                    i + 1,
                    row.len(),
                    header.len()
                )));
            }
            rows.push(row);
        }
        Ok(Self {
            name: name.to_string(),
            header,
            rows,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let name = path.display().to_string();
        if !path.is_file() {
            return Err(FmError::InvalidArgument(format!("table {name} not found")));
        }
        Self::parse(&name, &std::fs::read_to_string(path)?)
    }

    fn column(&self, col: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == col)
            .ok_or_else(|| FmError::InvalidArgument(format!("table {} has no column {col:?}", self.name)))
    }

    /// The named columns, in order, as a new table.
    pub fn select(&self, cols: &[&str]) -> Result<Table> {
        let idx = cols.iter().map(|c| self.column(c)).collect::<Result<Vec<_>>>()?;
        Ok(Table {
            name: self.name.clone(),
            header: cols.iter().map(|c| c.to_string()).collect(),
            rows: self
                .rows
                .iter()
                .map(|r| idx.iter().map(|&i| r[i].clone()).collect())
                .collect(),
        })
    }

    pub fn to_tsv(&self) -> String {
        let mut s = self.header.join("\t");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join("\t"));
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    LossSoFar,
    Sweep,
    Generation,
}

impl PlotKind {
    /// Columns of the emitted file: x, series label, y (and extra y columns).
    pub fn columns(self) -> &'static [&'static str] {
        match self {
            PlotKind::LossSoFar => &["cutoff", "model", "loss"],
            PlotKind::Sweep => &["m", "variant", "tau", "loss"],
            PlotKind::Generation => &["position", "variant", "latency_us", "state_bytes"],
        }
    }

    pub fn file_name(self) -> &'static str {
        match self {
            PlotKind::LossSoFar => "plot_loss_so_far.tsv",
            PlotKind::Sweep => "plot_sweep.tsv",
            PlotKind::Generation => "plot_generation.tsv",
        }
    }
}

/// Writes one plot file from `table`. A table without rows is an error.
pub fn emit_plot(kind: PlotKind, table: &Table, out_dir: &Path) -> Result<PathBuf> {
    if table.rows.is_empty() {
        return Err(FmError::InvalidArgument(format!(
            "table {} has an empty series",
            table.name
        )));
    }
    let data = table.select(kind.columns())?;
    std::fs::create_dir_all(out_dir)?;
    let path = out_dir.join(kind.file_name());
    std::fs::write(&path, data.to_tsv())?;
    Ok(path)
}

/// Reads each table and writes its plot file. Fails on the first missing or
/// empty table, naming it.
pub fn emit_plots(inputs: &[(PlotKind, PathBuf)], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if inputs.is_empty() {
        return Err(FmError::InvalidArgument("no tables given".into()));
    }
    let tables = inputs
        .iter()
        .map(|(k, p)| Table::read(p).map(|t| (*k, t)))
        .collect::<Result<Vec<_>>>()?;
    tables.iter().map(|(k, t)| emit_plot(*k, t, out_dir)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selects_plot_columns() {
        let t = Table::parse("sweep.tsv", "m\tvariant\tk\ttau\tloss\n4\tdense\t4\t1\t2.5\n").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = emit_plot(PlotKind::Sweep, &t, dir.path()).unwrap();
        assert_eq!(
            std::fs::read_to_string(path).unwrap(),
            "m\tvariant\ttau\tloss\n4\tdense\t1\t2.5\n"
        );
    }

    #[test]
    fn comments_are_skipped() {
        let t = Table::parse(
            "b",
            "# fm-bench v1\nposition\tvariant\tlatency_us\tstate_bytes\n0\tfm\t1.0\t8\n",
        )
        .unwrap();
        assert_eq!(t.rows.len(), 1);
    }

    #[test]
    fn empty_and_missing_tables_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let t = Table::parse("loss_so_far.tsv", "cutoff\tmodel\tloss\n").unwrap();
        let err = emit_plot(PlotKind::LossSoFar, &t, dir.path()).unwrap_err().to_string();
        assert!(err.contains("loss_so_far.tsv") && err.contains("empty"), "{err}");
        let missing = dir.path().join("nope.tsv");
        let err = emit_plots(&[(PlotKind::Sweep, missing)], dir.path())
            .unwrap_err()
            .to_string();
        assert!(err.contains("nope.tsv"), "{err}");
        let t = Table::parse("x", "cutoff\tloss\n1\t2\n").unwrap();
        assert!(emit_plot(PlotKind::LossSoFar, &t, dir.path()).is_err());
    }
}
