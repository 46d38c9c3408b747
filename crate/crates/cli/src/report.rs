//! Scenario results: CSV tables, pass/fail checks and the summary file.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};

use crate::config::ScenarioConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Severity {
    /// A failure makes the run exit with status 1.
    MustPass,
    /// Printed, never fatal.
    ReportOnly,
}

#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub severity: Severity,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn line(&self) -> String {
        let tag = match self.severity {
            Severity::MustPass => "must-pass",
            Severity::ReportOnly => "report-only",
        };
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        format!("{verdict} [{tag}] {}: {}", self.name, self.detail)
    }
}

/// One CSV file. Cells are formatted when pushed so output bytes depend only
/// on the computed values.
#[derive(Debug, Clone)]
pub struct Table {
    pub file: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(file: &str, header: &[&str]) -> Table {
        Table {
            file: file.to_string(),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row.into_iter().map(|c| c.0).collect());
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(&self.file);
        let mut w = csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))?;
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// A formatted CSV cell.
pub struct Cell(String);

impl From<f64> for Cell {
    fn from(x: f64) -> Cell {
        Cell(format!("{x:.10e}"))
    }
}

impl From<usize> for Cell {
    fn from(x: usize) -> Cell {
        Cell(x.to_string())
    }
}

impl From<i32> for Cell {
    fn from(x: i32) -> Cell {
        Cell(x.to_string())
    }
}

impl From<bool> for Cell {
    fn from(x: bool) -> Cell {
        Cell(x.to_string())
    }
}

impl From<&str> for Cell {
    fn from(x: &str) -> Cell {
        Cell(x.to_string())
    }
}

impl From<String> for Cell {
    fn from(x: String) -> Cell {
        Cell(x)
    }
}

/// Builds a row from heterogeneous values.
#[macro_export]
macro_rules! row {
    ($($x:expr),* $(,)?) => { vec![$($crate::report::Cell::from($x)),*] };
}

#[derive(Debug, Clone)]
pub struct Report {
    pub scenario: &'static str,
    pub tables: Vec<Table>,
    pub checks: Vec<Check>,
    /// Named scalar results, in insertion order.
    pub metrics: Vec<(String, f64)>,
    pub notes: Vec<String>,
    /// Extra files written verbatim.
    pub files: Vec<(String, Vec<u8>)>,
}

impl Report {
    pub fn new(scenario: &'static str) -> Report {
        Report {
            scenario,
            tables: Vec::new(),
            checks: Vec::new(),
            metrics: Vec::new(),
            notes: Vec::new(),
            files: Vec::new(),
        }
    }

    pub fn check(&mut self, name: &str, severity: Severity, passed: bool, detail: String) {
        self.checks.push(Check {
            name: name.to_string(),
            severity,
            passed,
            detail,
        });
    }

    pub fn metric(&mut self, name: &str, value: f64) {
        self.metrics.push((name.to_string(), value));
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn find_check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn table(&self, file: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.file == file)
    }

    /// True when every must-pass check passed.
    pub fn passed(&self) -> bool {
        self.checks
            .iter()
            .all(|c| c.passed || c.severity == Severity::ReportOnly)
    }

    /// Writes every table and `summary.txt` into `dir`.
    pub fn write(&self, dir: &Path, cfg: &ScenarioConfig, elapsed_seconds: f64) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for t in &self.tables {
            t.write(dir)?;
        }
        for (name, bytes) in &self.files {
            fs::write(dir.join(name), bytes)?;
        }
        let mut s = fs::File::create(dir.join("summary.txt"))?;
        writeln!(s, "scenario: {}", self.scenario)?;
        writeln!(s, "finished: {}", chrono::Local::now().to_rfc3339())?;
        writeln!(s, "elapsed: {elapsed_seconds:.2} s")?;
        writeln!(
            s,
            "grid: m = {}, n = {}, period = {}",
            cfg.grid.m, cfg.grid.n, cfg.grid.period
        )?;
        writeln!(
            s,
            "ladder: r_min = {}, decades = {}, points per decade = {}",
            cfg.ladder.r_min, cfg.ladder.decades, cfg.ladder.points_per_decade
        )?;
        writeln!(s, "beta: {}", cfg.beta)?;
        writeln!(s)?;
        writeln!(s, "checks:")?;
        for c in &self.checks {
            writeln!(s, "  {}", c.line())?;
        }
        writeln!(s)?;
        writeln!(s, "metrics:")?;
        for (name, v) in &self.metrics {
            writeln!(s, "  {name} = {v:.6e}")?;
        }
        if !self.notes.is_empty() {
            writeln!(s)?;
            writeln!(s, "notes:")?;
            for n in &self.notes {
                writeln!(s, "  {n}")?;
            }
        }
        writeln!(s)?;
        writeln!(s, "verdict: {}", if self.passed() { "PASS" } else { "FAIL" })?;
        Ok(())
    }
}
