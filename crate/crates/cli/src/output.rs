use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use crate::CliError;

/// Output directory bound to one config hash; records every file it writes.
pub struct Sink {
    pub dir: PathBuf,
    pub hash: String,
    pub written: Vec<String>,
}

impl Sink {
    pub fn new(dir: &Path, hash: String) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        Ok(Sink { dir: dir.to_path_buf(), hash, written: Vec::new() })
    }

    fn put(&mut self, name: &str, contents: &str) -> Result<(), CliError> {
        let path = self.dir.join(name);
        fs::write(&path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        if !self.written.iter().any(|w| w == name) {
            self.written.push(name.to_string());
        }
        Ok(())
    }

    /// CSV body prefixed with the `# config=<hash>` line.
    pub fn csv(&mut self, name: &str, body: &str) -> Result<(), CliError> {
        self.put(name, &format!("# config={}\n{body}", self.hash))
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
        text.push('\n');
        self.put(name, &text)
    }

    pub fn text(&mut self, name: &str, body: &str) -> Result<(), CliError> {
        self.put(name, body)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MemberStatus {
    pub member: usize,
    pub seed: u64,
    pub status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub version: &'static str,
    pub seeds: Vec<u64>,
    pub runs: Vec<MemberStatus>,
    pub outputs: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub summary: Option<Value>,
}

/// Rows of equal-length columns as CSV with `{:.12e}` numbers.
pub fn columns_csv(header: &[&str], cols: &[&[f64]]) -> String {
    let mut s = header.join(",");
    s.push('\n');
    let rows = cols.iter().map(|c| c.len()).min().unwrap_or(0);
    for i in 0..rows {
        let row: Vec<String> = cols.iter().map(|c| num(c[i])).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

pub fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.12e}")
    } else {
        String::new()
    }
}
