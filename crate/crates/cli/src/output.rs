//! Run artifacts: file emission and the run manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub scenario_id: String,
    pub seed: u64,
    pub command: String,
    pub module_versions: Vec<String>,
    pub outputs: Vec<String>,
    pub verdict: Option<String>,
    pub wall_time: f64,
}

/// Collects the files of one run and writes the manifest last.
pub struct Run {
    dir: PathBuf,
    scenario_id: String,
    seed: u64,
    command: String,
    outputs: Vec<String>,
    start: Instant,
}

impl Run {
    pub fn new(dir: &Path, scenario_id: &str, seed: u64, command: &str) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            scenario_id: scenario_id.to_string(),
            seed,
            command: command.to_string(),
            outputs: Vec::new(),
            start: Instant::now(),
        })
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.push(path.display().to_string());
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write(name, s)
    }

    pub fn finish(self, verdict: Option<&str>) -> Result<()> {
        let manifest = RunManifest {
            scenario_id: self.scenario_id,
            seed: self.seed,
            command: self.command,
            module_versions: vec![
                format!("crossmfg-core {}", crossmfg::VERSION),
                format!("crossmfg-cli {}", env!("CARGO_PKG_VERSION")),
            ],
            outputs: self.outputs,
            verdict: verdict.map(str::to_string),
            wall_time: self.start.elapsed().as_secs_f64(),
        };
        let path = self.dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}
