//! `manifest.txt`: what produced an output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use flowpose::error::{Error, Result};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Clone, Debug, Default)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub checkpoint_hash: Option<String>,
}

/// Hash of a blob the way git hashes objects (`blob <len>\0<bytes>`), but
/// with SHA-256.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().fold(String::with_capacity(64), |mut s, b| {
        write!(s, "{b:02x}").unwrap();
        s
    })
}

fn join(paths: &[PathBuf]) -> String {
    paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(";")
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        RunManifest {
            command: command.into(),
            argv: std::env::args().collect(),
            ..Default::default()
        }
    }

    pub fn with_checkpoint(mut self, path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Io {
            path: path.into(),
            source: e,
        })?;
        self.checkpoint = Some(path.into());
        self.checkpoint_hash = Some(blob_hash(&bytes));
        Ok(self)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let opt = |p: &Option<PathBuf>| p.as_ref().map_or("-".to_string(), |p| p.display().to_string());
        writeln!(s, "command = {}", self.command).unwrap();
        writeln!(s, "argv = {}", self.argv.join(" ")).unwrap();
        writeln!(s, "config = {}", opt(&self.config)).unwrap();
        writeln!(s, "seed = {}", self.seed.map_or("-".to_string(), |v| v.to_string())).unwrap();
        writeln!(s, "inputs = {}", join(&self.inputs)).unwrap();
        writeln!(s, "outputs = {}", join(&self.outputs)).unwrap();
        writeln!(s, "checkpoint = {}", opt(&self.checkpoint)).unwrap();
        writeln!(s, "checkpoint_sha256 = {}", self.checkpoint_hash.as_deref().unwrap_or("-")).unwrap();
        writeln!(s, "version = {}", env!("CARGO_PKG_VERSION")).unwrap();
        let now = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        writeln!(s, "created_unix = {now}").unwrap();
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, self.to_text()).map_err(|e| Error::Io { path, source: e })
    }
}
