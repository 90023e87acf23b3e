//! Aggregated results tables and their CSV / markdown renderings.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use super::config::Method;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ClientKey {
    Client(usize),
    Pooled,
}

impl fmt::Display for ClientKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClientKey::Client(i) => write!(f, "{i}"),
            ClientKey::Pooled => f.write_str("pooled"),
        }
    }
}

impl FromStr for ClientKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "pooled" {
            return Ok(ClientKey::Pooled);
        }
        s.parse()
            .map(ClientKey::Client)
            .map_err(|_| Error::Validation(format!("bad client key '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub scenario: String,
    pub client: ClientKey,
    pub method: Method,
    pub mean_mse: f64,
    pub std_mse: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResultsTable {
    /// Echoed hyperparameters, in order.
    pub header: Vec<(String, String)>,
    pub rows: Vec<ResultRow>,
}

/// Mean and `n − 1` standard deviation; a single value has std 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Table cell, four decimals: `1.6768(0.1569)`.
pub fn format_cell(mean: f64, std: f64) -> String {
    format!("{mean:.4}({std:.4})")
}

const CSV_HEADER: &str = "scenario,client,method,mean_mse,std_mse,n";

impl ResultsTable {
    pub fn row(&self, scenario: &str, client: ClientKey, method: Method) -> Option<&ResultRow> {
        self.rows
            .iter()
            .find(|r| r.scenario == scenario && r.client == client && r.method == method)
    }

    pub fn scenarios(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.scenario) {
                out.push(r.scenario.clone());
            }
        }
        out
    }

    pub fn methods(&self) -> Vec<Method> {
        let mut out: Vec<Method> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.method) {
                out.push(r.method);
            }
        }
        out
    }

    fn clients(&self, scenario: &str) -> Vec<ClientKey> {
        let mut out: Vec<ClientKey> = Vec::new();
        for r in self.rows.iter().filter(|r| r.scenario == scenario) {
            if !out.contains(&r.client) {
                out.push(r.client);
            }
        }
        out.sort();
        out
    }

    pub fn single_run(&self) -> bool {
        self.rows.iter().any(|r| r.n == 1)
    }

    /// Long format with `# key=value` header lines. Floats use the shortest
    /// representation that parses back to the same value.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.header {
            let _ = writeln!(out, "# {k}={v}");
        }
        if self.single_run() {
            out.push_str("# note=n=1 rows report std 0\n");
        }
        out.push_str(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.scenario, r.client, r.method, r.mean_mse, r.std_mse, r.n
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut header = Vec::new();
        let mut body = String::new();
        for line in text.lines() {
            if let Some(kv) = line.strip_prefix("# ") {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| Error::Validation(format!("bad header line '{line}'")))?;
                if k != "note" {
                    header.push((k.to_string(), v.to_string()));
                }
            } else {
                body.push_str(line);
                body.push('\n');
            }
        }
        let mut rdr = csv::Reader::from_reader(body.as_bytes());
        let cols = rdr
            .headers()
            .map_err(|e| Error::Validation(format!("results csv: {e}")))?
            .clone();
        if cols.iter().collect::<Vec<_>>().join(",") != CSV_HEADER {
            return Err(Error::Validation("results csv: unexpected columns".into()));
        }
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Validation(format!("results csv: {e}")))?;
            let num = |j: usize| -> Result<f64> {
                rec[j].parse().map_err(|_| Error::Parse {
                    row: i + 1,
                    column: cols[j].to_string(),
                    detail: format!("not a number: {:?}", &rec[j]),
                })
            };
            rows.push(ResultRow {
                scenario: rec[0].to_string(),
                client: rec[1].parse()?,
                method: rec[2].parse()?,
                mean_mse: num(3)?,
                std_mse: num(4)?,
                n: rec[5].parse().map_err(|_| Error::Parse {
                    row: i + 1,
                    column: "n".into(),
                    detail: format!("not a count: {:?}", &rec[5]),
                })?,
            });
        }
        Ok(ResultsTable { header, rows })
    }

    /// One table per scenario: a row per client (then pooled), a column per
    /// method, the lowest mean in each row in bold.
    pub fn to_markdown(&self, notes: &[String]) -> String {
        let methods = self.methods();
        let mut out = String::from("# MSE comparison\n\n");
        out.push_str("Cells are mean(std) of test MSE over repeated seeds, in standardized target units. Lowest mean per row in bold.\n\n");
        let mut ties = Vec::new();
        for sc in self.scenarios() {
            let _ = writeln!(out, "## {sc}\n");
            out.push_str("| client |");
            for m in &methods {
                let _ = write!(out, " {m} |");
            }
            out.push_str("\n|---|");
            for _ in &methods {
                out.push_str("---|");
            }
            out.push('\n');
            for client in self.clients(&sc) {
                let cells: Vec<Option<&ResultRow>> = methods.iter().map(|&m| self.row(&sc, client, m)).collect();
                let best = cells
                    .iter()
                    .flatten()
                    .map(|r| r.mean_mse)
                    .fold(f64::INFINITY, f64::min);
                let winners = cells.iter().flatten().filter(|r| r.mean_mse == best).count();
                if winners > 1 {
                    ties.push(format!("{sc}, client {client}"));
                }
                let _ = write!(out, "| {client} |");
                for c in &cells {
                    match c {
                        Some(r) if r.mean_mse == best => {
                            let _ = write!(out, " **{}** |", format_cell(r.mean_mse, r.std_mse));
                        }
                        Some(r) => {
                            let _ = write!(out, " {} |", format_cell(r.mean_mse, r.std_mse));
                        }
                        None => out.push_str(" - |"),
                    }
                }
                out.push('\n');
            }
            out.push('\n');
        }
        if methods.contains(&Method::Fdrmfl) {
            let pooled: Vec<String> = self
                .scenarios()
                .into_iter()
                .filter(|s| self.row(s, ClientKey::Pooled, Method::Fdrmfl).is_some())
                .collect();
            let mut lines = Vec::new();
            for m in methods.iter().filter(|m| **m != Method::Fdrmfl) {
                let mut wins = 0;
                let mut total = 0;
                for sc in &pooled {
                    let (Some(a), Some(b)) = (
                        self.row(sc, ClientKey::Pooled, Method::Fdrmfl),
                        self.row(sc, ClientKey::Pooled, *m),
                    ) else {
                        continue;
                    };
                    total += 1;
                    if a.mean_mse < b.mean_mse {
                        wins += 1;
                    }
                }
                lines.push(format!("- fdrmfl vs {m}: lower pooled mean in {wins}/{total} scenarios"));
            }
            if !lines.is_empty() {
                out.push_str("## Win rate\n\n");
                out.push_str(&lines.join("\n"));
                out.push_str("\n\n");
            }
        }
        let mut all_notes: Vec<String> = notes.to_vec();
        if !ties.is_empty() {
            all_notes.push(format!("Tied best means (all bolded): {}.", ties.join("; ")));
        }
        if self.single_run() {
            all_notes.push("Rows with a single run report std 0.".into());
        }
        if !all_notes.is_empty() {
            out.push_str("## Notes\n\n");
            for n in all_notes {
                let _ = writeln!(out, "- {n}");
            }
            out.push('\n');
        }
        out.push_str("## Hyperparameters\n\n");
        for (k, v) in &self.header {
            let _ = writeln!(out, "- {k} = {v}");
        }
        out
    }
}
