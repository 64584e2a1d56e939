//! CSV and JSON writers. Every file starts with the config hash and seed so it
//! can be traced back to the run that produced it.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::Value;
use signtrack_core::{DMatrix, DVector};

/// 17 significant digits: enough to round-trip any `f64`.
pub fn num(x: f64) -> String {
    format!("{x:.16e}")
}

/// Column names for a vector quantity: `name` when scalar, else
/// `name_0, name_1, ...`.
pub fn vector_columns(name: &str, dim: usize) -> Vec<String> {
    if dim == 1 {
        vec![name.to_string()]
    } else {
        (0..dim).map(|k| format!("{name}_{k}")).collect()
    }
}

pub struct Provenance<'a> {
    pub command: &'a str,
    pub config_hash: &'a str,
    pub master_seed: u64,
}

pub struct Csv {
    text: String,
    columns: usize,
}

impl Csv {
    pub fn new(prov: &Provenance, extra: &[(&str, String)], header: &[String]) -> Self {
        let mut text = String::new();
        writeln!(text, "# signtrack {}", prov.command).unwrap();
        writeln!(text, "# config_hash: {}", prov.config_hash).unwrap();
        writeln!(text, "# master_seed: {}", prov.master_seed).unwrap();
        for (k, v) in extra {
            writeln!(text, "# {k}: {v}").unwrap();
        }
        text.push_str(&header.join(","));
        text.push('\n');
        Self {
            text,
            columns: header.len(),
        }
    }

    pub fn row(&mut self, cells: &[String]) {
        assert_eq!(cells.len(), self.columns, "row width matches header");
        self.text.push_str(&cells.join(","));
        self.text.push('\n');
    }

    pub fn finish(self) -> String {
        self.text
    }
}

pub fn vector_cells(v: &DVector<f64>) -> impl Iterator<Item = String> + '_ {
    v.iter().map(|&x| num(x))
}

pub fn matrix_json(m: &DMatrix<f64>) -> Value {
    Value::Array(
        m.row_iter()
            .map(|row| Value::Array(row.iter().map(|&x| Value::from(x)).collect()))
            .collect(),
    )
}

pub fn vector_json(v: &DVector<f64>) -> Value {
    Value::Array(v.iter().map(|&x| Value::from(x)).collect())
}

/// Prepends provenance to a JSON object.
pub fn json_document(prov: &Provenance, body: Value) -> String {
    let mut doc = serde_json::Map::new();
    doc.insert("command".into(), prov.command.into());
    doc.insert("config_hash".into(), prov.config_hash.into());
    doc.insert("master_seed".into(), prov.master_seed.into());
    if let Value::Object(fields) = body {
        doc.extend(fields);
    }
    let mut text = serde_json::to_string_pretty(&Value::Object(doc)).expect("JSON serializes");
    text.push('\n');
    text
}

pub fn write_file(dir: &Path, name: &str, contents: &str) -> std::io::Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, contents)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_round_trip() {
        for x in [0.1, -1.0 / 3.0, 1e-300, 123456.789, f64::MIN_POSITIVE, 0.0] {
            let s = num(x);
            assert_eq!(s.parse::<f64>().unwrap(), x, "{s}");
        }
        assert_eq!(num(1.0), "1.0000000000000000e0");
    }

    #[test]
    fn csv_layout() {
        let prov = Provenance {
            command: "track",
            config_hash: "abc",
            master_seed: 7,
        };
        let mut csv = Csv::new(&prov, &[("algorithm", "SE".into())], &["n".into(), "x".into()]);
        csv.row(&["0".into(), num(0.5)]);
        let text = csv.finish();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "# signtrack track");
        assert_eq!(lines[1], "# config_hash: abc");
        assert_eq!(lines[2], "# master_seed: 7");
        assert_eq!(lines[3], "# algorithm: SE");
        assert_eq!(lines[4], "n,x");
        assert_eq!(lines[5], "0,5.0000000000000000e-1");
    }

    #[test]
    fn column_naming() {
        assert_eq!(vector_columns("theta", 1), vec!["theta"]);
        assert_eq!(vector_columns("theta", 2), vec!["theta_0", "theta_1"]);
    }
}
