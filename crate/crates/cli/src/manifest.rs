use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use codeseek_core::RunConfig;
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct BuildInfo {
    pub version: &'static str,
    pub git_rev: &'static str,
}

pub const BUILD: BuildInfo = BuildInfo {
    version: env!("CARGO_PKG_VERSION"),
    git_rev: env!("CODESEEK_GIT_REV"),
};

/// Record of one CLI invocation, written before the work starts and updated
/// when it ends.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: Option<RunConfig>,
    pub seed: Option<u64>,
    pub build: BuildInfo,
    pub started_unix: f64,
    pub finished_unix: Option<f64>,
    pub status: String,
    pub outputs: Vec<PathBuf>,
    #[serde(skip)]
    path: PathBuf,
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// `<output>.manifest.json` next to the primary output.
pub fn default_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    output.with_file_name(name)
}

impl RunManifest {
    pub fn begin(
        path: PathBuf,
        command: &str,
        config: Option<RunConfig>,
        seed: Option<u64>,
        outputs: Vec<PathBuf>,
    ) -> anyhow::Result<Self> {
        let m = Self {
            command: command.to_owned(),
            argv: std::env::args().collect(),
            config,
            seed,
            build: BUILD,
            started_unix: now(),
            finished_unix: None,
            status: "running".into(),
            outputs,
            path,
        };
        m.write()?;
        Ok(m)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn write(&self) -> anyhow::Result<()> {
        if let Some(dir) = self.path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&self.path, text).with_context(|| format!("writing manifest {}", self.path.display()))
    }

    pub fn finish(mut self, ok: bool) -> anyhow::Result<()> {
        self.finished_unix = Some(now());
        self.status = if ok { "ok" } else { "failed" }.into();
        self.write()
    }
}
