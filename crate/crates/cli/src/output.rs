use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::{CliError, Result};

/// A result file, addressed relative to the output directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifact {
    pub name: String,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunOutput {
    pub artifacts: Vec<Artifact>,
    /// Human-readable report printed after the files are written.
    pub stdout: String,
}

impl RunOutput {
    pub fn add(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.artifacts.push(Artifact { name: name.into(), bytes });
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.artifacts.iter().find(|a| a.name == name).map(|a| a.bytes.as_slice())
    }

    /// The summary, parsed back.
    pub fn summary(&self) -> Option<serde_json::Value> {
        serde_json::from_slice(self.get("summary.json")?).ok()
    }

    pub fn write_to(&self, dir: &Path) -> Result<()> {
        for a in &self.artifacts {
            write_atomic(&dir.join(&a.name), &a.bytes)?;
        }
        Ok(())
    }
}

/// Writes to a sibling temp file, then renames over the target.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp"));
    fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

/// Serializes rows with a header line.
pub fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| CliError::Missing(format!("csv buffer: {e}")))
}

pub fn json_bytes(v: &serde_json::Value) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("json values serialize");
    s.push('\n');
    s.into_bytes()
}

/// JSON number, or `null` when not finite.
pub fn num(v: f64) -> serde_json::Value {
    serde_json::Number::from_f64(v).map_or(serde_json::Value::Null, serde_json::Value::Number)
}

/// Rounds to 12 significant digits for display: 65.53600000000001 → 65.536.
pub fn pretty(v: f64) -> String {
    if !v.is_finite() || v == 0.0 {
        return v.to_string();
    }
    let rounded: f64 = format!("{v:.11e}").parse().unwrap_or(v);
    rounded.to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pretty_trims_noise() {
        assert_eq!(pretty(65.53600000000001), "65.536");
        assert_eq!(pretty(25600.000000000004), "25600");
        assert_eq!(pretty(1.5e-9), "0.0000000015");
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/a.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn csv_has_header_and_unix_newlines() {
        #[derive(Serialize)]
        struct Row {
            a: usize,
            b: Option<f64>,
        }
        let bytes = csv_bytes(&[Row { a: 1, b: Some(0.5) }, Row { a: 2, b: None }]).unwrap();
        assert_eq!(String::from_utf8(bytes).unwrap(), "a,b\n1,0.5\n2,\n");
    }
}
