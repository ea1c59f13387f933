//! Printed tables and their record-file twins.
//!
//! Cells are formatted once, so the terminal table and the record line carry
//! the same strings.

use std::fmt::Write as _;

pub struct Table {
    pub kind: &'static str,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(kind: &'static str, columns: &[&str]) -> Self {
        Self { kind, columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let widths: Vec<usize> = (0..self.columns.len())
            .map(|i| self.rows.iter().map(|r| r[i].len()).chain([self.columns[i].len()]).max().unwrap_or(0))
            .collect();
        let line = |cells: &mut dyn Iterator<Item = &str>| {
            let mut s = String::new();
            for (i, c) in cells.enumerate() {
                if i > 0 {
                    s.push_str("  ");
                }
                let _ = write!(s, "{c:>w$}", w = widths[i]);
            }
            s.push('\n');
            s
        };
        let mut out = format!("[{}]\n", self.kind);
        out.push_str(&line(&mut self.columns.iter().map(String::as_str)));
        for r in &self.rows {
            out.push_str(&line(&mut r.iter().map(String::as_str)));
        }
        out
    }

    /// One `kind col=value ...` line per row.
    pub fn records(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(self.kind);
            for (c, v) in self.columns.iter().zip(r) {
                let _ = write!(out, " {c}={v}");
            }
            out.push('\n');
        }
        out
    }
}

pub fn f(v: f64, digits: usize) -> String {
    format!("{v:.digits$}")
}
