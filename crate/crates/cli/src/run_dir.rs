//! One output directory per invocation, with a `manifest` listing artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

pub const MANIFEST: &str = "manifest";

pub struct RunDir {
    pub path: PathBuf,
    command: String,
    seed: u64,
    fingerprint: String,
    artifacts: Vec<String>,
}

/// `<command>-<UTC timestamp>-seed<seed>`, with `-N` appended on collision.
pub fn run_dir_name(command: &str, seed: u64, stamp: &str) -> String {
    format!("{command}-{stamp}-seed{seed}")
}

impl RunDir {
    pub fn create(root: &Path, explicit: Option<&Path>, command: &str, seed: u64) -> Result<Self> {
        let path = match explicit {
            Some(p) => p.to_path_buf(),
            None => {
                let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ").to_string();
                let base = root.join(run_dir_name(command, seed, &stamp));
                let mut path = base.clone();
                let mut n = 1;
                while path.exists() {
                    path = PathBuf::from(format!("{}-{n}", base.display()));
                    n += 1;
                }
                path
            }
        };
        fs::create_dir_all(&path)
            .with_context(|| format!("creating run directory {}", path.display()))?;
        Ok(RunDir {
            path,
            command: command.to_string(),
            seed,
            fingerprint: String::new(),
            artifacts: Vec::new(),
        })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn set_fingerprint(&mut self, fp: impl Into<String>) {
        self.fingerprint = fp.into();
    }

    /// Records an artifact written under this directory.
    pub fn add(&mut self, name: &str) {
        if !self.artifacts.iter().any(|a| a == name) {
            self.artifacts.push(name.to_string());
        }
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<PathBuf> {
        let p = self.file(name);
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
        self.add(name);
        Ok(p)
    }

    pub fn manifest_text(&self) -> String {
        let mut s = format!(
            "command={}\nseed={}\nfingerprint={}\n",
            self.command, self.seed, self.fingerprint
        );
        for a in &self.artifacts {
            s.push_str(&format!("artifact={a}\n"));
        }
        s
    }

    pub fn finish(&self) -> Result<PathBuf> {
        let p = self.file(MANIFEST);
        fs::write(&p, self.manifest_text()).with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }
}

/// `key=value` pairs of a manifest, in file order.
pub fn read_manifest(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect())
}
