//! Run directories: a single-writer lock and the manifest written before any
//! long computation.

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use proto_align::config::TrainConfig;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const LOCK_FILE: &str = ".lock";
pub const MANIFEST_FILE: &str = "manifest.txt";

/// Held for the lifetime of a command writing into `dir`.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| CliError::user(format!("{}: {e}", dir.display())))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(CliError::user(format!(
                    "{} is locked by another run (remove {} if that run is gone)",
                    dir.display(),
                    path.display()
                )))
            }
            Err(e) => Err(CliError::user(format!("{}: {e}", path.display()))),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::user(format!("{}: {e}", path.display())))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// Everything needed to repeat a run. The config lines come last as plain
/// `key = value` text and the rest are comments, so the manifest is itself a
/// valid `--config` file.
#[derive(Debug, Clone)]
pub struct RunManifest {
    pub command: String,
    pub config: TrainConfig,
    pub corpus: PathBuf,
    pub corpus_sha256: String,
    pub seed: u64,
    /// Relative to the run directory.
    pub artifacts: Vec<String>,
}

impl RunManifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: &str| writeln!(s, "# {k} = {v}").expect("string write");
        line("tool", concat!("proto-align ", env!("CARGO_PKG_VERSION")));
        line("command", &self.command);
        line("corpus", &self.corpus.display().to_string());
        line("corpus_sha256", &self.corpus_sha256);
        line("seed", &self.seed.to_string());
        line("artifacts", &self.artifacts.join(" "));
        s.push_str(&self.config.to_text());
        s
    }

    pub fn write(&self, dir: &Path) -> CliResult<()> {
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, self.to_text())
            .map_err(|e| CliError::user(format!("{}: {e}", path.display())))
    }
}

/// Value of a `# key = value` comment line, as written by [`RunManifest`].
pub fn manifest_field(text: &str, key: &str) -> Option<String> {
    text.lines().find_map(|l| {
        let (k, v) = l.strip_prefix('#')?.split_once('=')?;
        (k.trim() == key).then(|| v.trim().to_string())
    })
}
