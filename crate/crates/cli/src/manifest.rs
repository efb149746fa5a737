//! Plain-text run manifests: one `key=value` per line, written in insertion
//! order. The `args` line holds the JSON-encoded argument vector that
//! `panolab replay` feeds back into the parser.

use std::fmt::Display;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};

pub const FILE_NAME: &str = "manifest.txt";

#[derive(Debug, Default)]
pub struct Manifest {
    lines: Vec<(String, String)>,
}

impl Manifest {
    pub fn new(command: &str, args: &[String]) -> Self {
        let mut m = Manifest::default();
        m.set("command", command);
        m.set("args", serde_json::to_string(args).expect("strings encode"));
        m
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        let value = value.to_string();
        assert!(!value.contains('\n'), "manifest value for {key} spans lines");
        self.lines.push((key.to_string(), value));
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text: String = self.lines.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        fs::write(path, text).with_context(|| format!("writing manifest {}", path.display()))
    }
}

/// Argument vector recorded in a manifest file.
pub fn read_args(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
    for line in text.lines() {
        if let Some(json) = line.strip_prefix("args=") {
            return serde_json::from_str(json).with_context(|| format!("{}: malformed args line", path.display()));
        }
    }
    bail!("{}: no args line", path.display())
}
