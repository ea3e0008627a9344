use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::CliError;

/// Provenance record written next to every primary output.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub flags: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub threads: usize,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub tool_version: String,
    pub started_unix_s: u64,
    pub duration_s: f64,
}

pub struct ManifestBuilder {
    manifest: RunManifest,
    start: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str, flags: &impl Serialize, threads: usize) -> Self {
        let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        ManifestBuilder {
            manifest: RunManifest {
                command: command.to_string(),
                argv: std::env::args().collect(),
                flags: serde_json::to_value(flags).unwrap_or(serde_json::Value::Null),
                seeds: BTreeMap::new(),
                threads,
                inputs: Vec::new(),
                outputs: Vec::new(),
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                started_unix_s: started,
                duration_s: 0.0,
            },
            start: Instant::now(),
        }
    }

    pub fn seed(&mut self, name: &str, value: u64) -> &mut Self {
        self.manifest.seeds.insert(name.to_string(), value);
        self
    }

    pub fn input(&mut self, path: &Path) -> &mut Self {
        self.manifest.inputs.push(path.to_path_buf());
        self
    }

    pub fn output(&mut self, path: &Path) -> &mut Self {
        self.manifest.outputs.push(path.to_path_buf());
        self
    }

    /// Writes `<primary>.manifest.json`.
    pub fn finish(mut self, primary: &Path) -> Result<PathBuf, CliError> {
        self.manifest.duration_s = self.start.elapsed().as_secs_f64();
        let path = manifest_path(primary);
        let json = serde_json::to_string_pretty(&self.manifest).map_err(|e| CliError::io(format!("manifest: {e}")))?;
        std::fs::write(&path, json + "\n").map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
        Ok(path)
    }
}

pub fn manifest_path(primary: &Path) -> PathBuf {
    let mut name = primary.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    primary.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_sits_beside_output() {
        assert_eq!(manifest_path(Path::new("out/d.abads")), PathBuf::from("out/d.abads.manifest.json"));
        assert_eq!(manifest_path(Path::new("m.ckpt")), PathBuf::from("m.ckpt.manifest.json"));
    }
}
