//! Output directory handling, provenance headers and error classes.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use inferlab_core::Error;
use sha2::{Digest, Sha256};

#[derive(Debug)]
pub enum CliError {
    Core(Error),
    Io(PathBuf, std::io::Error),
    Usage(String),
}

impl CliError {
    /// 2 for invalid input, 3 for I/O failures, 4 for numeric failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(Error::Io { .. }) | CliError::Io(..) => 3,
            CliError::Core(Error::Numeric(_)) => 4,
            CliError::Core(_) | CliError::Usage(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io(p, e) => write!(f, "{}: {e}", p.display()),
            CliError::Usage(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

pub fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::Io(path.to_path_buf(), e))
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Io(path.to_path_buf(), e))
}

/// Hash of the concatenated contents of every input, in order.
#[derive(Default)]
pub struct InputHash(Sha256);

impl InputHash {
    pub fn add_file(&mut self, path: &Path) -> Result<(), CliError> {
        let bytes = read(path)?;
        self.add_bytes(&bytes);
        Ok(())
    }

    pub fn add_bytes(&mut self, bytes: &[u8]) {
        self.0.update((bytes.len() as u64).to_le_bytes());
        self.0.update(bytes);
    }

    pub fn hex(self) -> String {
        self.0.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// An output directory whose text files all start with the same
/// provenance line.
pub struct OutDir {
    dir: PathBuf,
    header: String,
    hash: String,
}

impl OutDir {
    pub fn create(dir: &Path, hash: InputHash) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(dir.to_path_buf(), e))?;
        let hash = hash.hex();
        Ok(OutDir {
            dir: dir.to_path_buf(),
            header: format!("# inferlab {} input-sha256={hash}\n", env!("CARGO_PKG_VERSION")),
            hash,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write_raw(&self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let p = self.path(name);
        fs::write(&p, bytes).map_err(|e| CliError::Io(p.clone(), e))?;
        Ok(p)
    }

    /// CSV or JSON-lines text, prefixed with the provenance line.
    pub fn write_text(&self, name: &str, body: &[u8]) -> Result<PathBuf, CliError> {
        let mut bytes = self.header.clone().into_bytes();
        bytes.extend_from_slice(body);
        self.write_raw(name, &bytes)
    }

    /// JSON object with a `generator` member carrying the provenance.
    pub fn write_json(&self, name: &str, mut value: serde_json::Value) -> Result<PathBuf, CliError> {
        if let Some(obj) = value.as_object_mut() {
            obj.insert(
                "generator".into(),
                serde_json::json!({
                    "tool": format!("inferlab {}", env!("CARGO_PKG_VERSION")),
                    "input_sha256": self.hash,
                }),
            );
        }
        let mut text = serde_json::to_string_pretty(&value).expect("JSON value serializes");
        text.push('\n');
        self.write_raw(name, text.as_bytes())
    }

    /// Binary weight-container output.
    pub fn write_binary(&self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        self.write_raw(name, bytes)
    }
}
