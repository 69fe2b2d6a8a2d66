use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::encoders::PromptSet;
use crate::error::{Error, Result};

/// Hex SHA-256 of the prompt values.
pub fn prompt_hash(prompts: &PromptSet) -> String {
    Sha256::digest(prompts.to_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Run output directory; every writer goes through here.
#[derive(Debug, Clone)]
pub struct OutputDir {
    root: PathBuf,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn subdir(&self, name: &str) -> Result<Self> {
        Self::create(&self.root.join(name))
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.path(name);
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Comma-separated table with a header line.
    pub fn write_csv(&self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<PathBuf> {
        let mut text = header.join(",");
        text.push('\n');
        for row in rows {
            text.push_str(&row.join(","));
            text.push('\n');
        }
        self.write(name, text)
    }
}
