use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;

/// Lossless decimal rendering of a double: 17 significant digits.
pub fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "nan".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

pub fn list(values: &[f64]) -> String {
    values.iter().map(|v| num(*v)).collect::<Vec<_>>().join(";")
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Num(f64),
    Int(u64),
    Text(String),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Num(v) => num(*v),
            Cell::Int(v) => v.to_string(),
            Cell::Text(s) => s.clone(),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as u64)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

impl From<Option<f64>> for Cell {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Cell::Text(String::new()), Cell::Num)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    /// Two-column `quantity,value` table.
    pub fn summary(entries: Vec<(&str, Cell)>) -> Self {
        let mut t = Self::new(&["quantity", "value"]);
        for (k, v) in entries {
            t.push(vec![k.into(), v]);
        }
        t
    }

    fn render(&self, header: &str) -> String {
        let mut out = header.to_string();
        out.push_str(&self.columns.join(","));
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(Cell::render).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

/// Everything a subcommand produces, before it is written.
#[derive(Debug, Default)]
pub struct Report {
    pub tables: Vec<(String, Table)>,
    /// Plain-text outputs such as sample dumps, one value per line.
    pub texts: Vec<(String, String)>,
    pub parameters: BTreeMap<String, String>,
}

impl Report {
    pub fn table(&mut self, name: &str, table: Table) {
        self.tables.push((format!("{name}.csv"), table));
    }

    pub fn param(&mut self, key: &str, value: impl ToString) {
        self.parameters.insert(key.to_string(), value.to_string());
    }

    pub fn absorb(&mut self, prefix: &str, other: Report) {
        self.tables.extend(other.tables);
        self.texts.extend(other.texts);
        for (k, v) in other.parameters {
            self.parameters.insert(format!("{prefix}.{k}"), v);
        }
    }

    fn outputs(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .tables
            .iter()
            .map(|(n, _)| n.clone())
            .chain(self.texts.iter().map(|(n, _)| n.clone()))
            .collect();
        names.push("manifest.json".into());
        names
    }
}

/// Replay record of a run. Its hash covers every field.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub artifact: String,
    pub version: String,
    pub subcommand: String,
    pub model: String,
    pub model_sha256: String,
    pub seed: u64,
    pub parameters: BTreeMap<String, String>,
    pub tolerances: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_string(self).expect("manifest serializes");
        hex(&Sha256::digest(canonical.as_bytes()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub struct RunInfo<'a> {
    pub subcommand: &'a str,
    pub model: &'a str,
    pub model_text: &'a str,
    pub seed: u64,
    pub tolerances: BTreeMap<String, String>,
}

/// Writes all reports, `manifest.json`, and `timing.json` (the only file
/// that differs between identical runs). Returns the manifest hash.
pub fn write_report(out: &Path, info: &RunInfo, report: &Report, wall_clock: f64) -> Result<String> {
    std::fs::create_dir_all(out)?;
    let manifest = RunManifest {
        artifact: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        subcommand: info.subcommand.into(),
        model: info.model.into(),
        model_sha256: hex(&Sha256::digest(info.model_text.as_bytes())),
        seed: info.seed,
        parameters: report.parameters.clone(),
        tolerances: info.tolerances.clone(),
        outputs: report.outputs(),
    };
    let digest = manifest.digest();
    let mut header = format!(
        "# {} {}\n# subcommand: {}\n# model: {}\n# seed: {}\n# manifest_sha256: {digest}\n",
        manifest.artifact, manifest.version, manifest.subcommand, manifest.model, manifest.seed
    );
    for (k, v) in &manifest.tolerances {
        let _ = writeln!(header, "# tolerance.{k}: {v}");
    }
    for (name, table) in &report.tables {
        std::fs::write(out.join(name), table.render(&header))?;
    }
    for (name, text) in &report.texts {
        std::fs::write(out.join(name), text)?;
    }
    let mut value = serde_json::to_value(&manifest).expect("manifest serializes");
    value["sha256"] = digest.clone().into();
    let mut json = serde_json::to_string_pretty(&value).expect("manifest serializes");
    json.push('\n');
    std::fs::write(out.join("manifest.json"), json)?;
    let timing = serde_json::json!({ "manifest_sha256": digest, "wall_clock_seconds": wall_clock });
    std::fs::write(out.join("timing.json"), format!("{timing}\n"))?;
    Ok(digest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_round_trip() {
        for v in [1.0, 0.1, -3.0 - 2f64.sqrt(), 1e-300, 6.02214076e23, f64::MIN_POSITIVE] {
            assert_eq!(num(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
        assert_eq!(num(1.0), "1.0000000000000000e0");
        assert_eq!(num(f64::INFINITY), "inf");
    }

    #[test]
    fn table_rendering() {
        let mut t = Table::new(&["a", "b"]);
        t.push(vec![Cell::from(0.5), Cell::from("x")]);
        t.push(vec![Cell::from(None), Cell::from(3usize)]);
        assert_eq!(t.render("# h\n"), "# h\na,b\n5.0000000000000000e-1,x\n,3\n");
    }

    #[test]
    fn written_files_embed_the_hash_and_are_stable() {
        let dir = tempfile::tempdir().unwrap();
        let mut report = Report::default();
        report.param("t", num(2.0));
        report.table("x", Table::summary(vec![("lambda0", 1.0.into())]));
        report.texts.push(("samples.txt".into(), "1\n2\n".into()));
        let info = RunInfo {
            subcommand: "spectral",
            model: "m2sym",
            model_text: "generator = [[-2.0, 1.0], [1.0, -2.0]]\n",
            seed: 3,
            tolerances: BTreeMap::from([("gap".to_string(), "1e-8".to_string())]),
        };
        let h1 = write_report(dir.path(), &info, &report, 0.1).unwrap();
        let first = std::fs::read(dir.path().join("x.csv")).unwrap();
        let manifest = std::fs::read(dir.path().join("manifest.json")).unwrap();
        let h2 = write_report(dir.path(), &info, &report, 9.0).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(first, std::fs::read(dir.path().join("x.csv")).unwrap());
        assert_eq!(manifest, std::fs::read(dir.path().join("manifest.json")).unwrap());
        let text = String::from_utf8(first).unwrap();
        assert!(text.contains(&format!("# manifest_sha256: {h1}")));
        assert!(text.contains("lambda0,1.0000000000000000e0"));
    }
}
