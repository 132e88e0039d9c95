use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

/// Output directory that remembers what was written into it.
pub struct OutDir {
    root: PathBuf,
    files: BTreeMap<String, PathBuf>,
}

#[derive(Clone, Debug, Serialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<OutDir, CliError> {
        std::fs::create_dir_all(root).map_err(|e| CliError::Io(format!("{}: {e}", root.display())))?;
        Ok(OutDir { root: root.to_path_buf(), files: BTreeMap::new() })
    }

    /// Path for a file to be written by someone else; call [`OutDir::record`] after.
    pub fn path(&self, name: &str) -> Result<PathBuf, CliError> {
        let p = self.root.join(name);
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        }
        Ok(p)
    }

    pub fn record(&mut self, name: &str) {
        self.files.insert(name.to_string(), self.root.join(name));
    }

    pub fn write(&mut self, name: &str, contents: &[u8]) -> Result<(), CliError> {
        let p = self.path(name)?;
        std::fs::write(&p, contents).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
        self.record(name);
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    pub fn entries(&self) -> Result<Vec<FileEntry>, CliError> {
        self.files
            .iter()
            .map(|(name, p)| {
                let data = std::fs::read(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
                let hash = Sha256::digest(&data);
                Ok(FileEntry { path: name.clone(), sha256: format!("{hash:x}"), bytes: data.len() as u64 })
            })
            .collect()
    }

    /// Writes manifest.json listing every recorded file with its digest.
    pub fn finish(mut self, command: &str, config: &impl Serialize, checks: Option<&[crate::commands::Check]>) -> Result<(), CliError> {
        let manifest = serde_json::json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "config": config,
            "files": self.entries()?,
            "checks": checks,
        });
        self.files.remove("manifest.json");
        let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Io(e.to_string()))?;
        text.push('\n');
        let p = self.root.join("manifest.json");
        std::fs::write(&p, text).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))
    }
}
