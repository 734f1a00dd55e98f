use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FORMAT: &str = "fsspip-manifest";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

/// Record of one command invocation, written before its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub version: u32,
    pub tool_version: String,
    pub command: String,
    /// Arguments after the program name, as given.
    pub argv: Vec<String>,
    pub cwd: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Effective configuration, one `key = value` per line.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<String>,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<PathBuf>,
    pub started_at: String,
}

pub fn sha256_file(path: &Path) -> Result<(String, u64)> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let digest = Sha256::digest(&bytes);
    Ok((digest.iter().map(|b| format!("{b:02x}")).collect(), bytes.len() as u64))
}

pub fn digest_input(path: &Path) -> Result<InputDigest> {
    let (sha256, bytes) = sha256_file(path)?;
    let path = std::fs::canonicalize(path).with_context(|| format!("resolving {}", path.display()))?;
    Ok(InputDigest { path, sha256, bytes })
}

/// Write `contents` to a sibling temporary file, then rename over `path`.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .with_context(|| format!("{} is not a file path", path.display()))?
        .to_string_lossy()
        .into_owned();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    std::fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming onto {}", path.display()))?;
    Ok(())
}

pub fn manifest_path(primary_output: &Path) -> PathBuf {
    let mut name = primary_output.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

impl RunManifest {
    pub fn new(command: &str, argv: Vec<String>) -> Result<Self> {
        Ok(RunManifest {
            format: MANIFEST_FORMAT.into(),
            version: 1,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            argv,
            cwd: std::env::current_dir()?,
            seed: None,
            config: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started_at: chrono::Utc::now().to_rfc3339(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let m: RunManifest = serde_json::from_str(&text).map_err(fsspip::Error::from)?;
        if m.format != MANIFEST_FORMAT {
            bail!(fsspip::Error::Validation(format!("{} is not a run manifest", path.display())));
        }
        Ok(m)
    }

    /// Fail if any recorded input changed since the manifest was written.
    pub fn verify_inputs(&self) -> Result<()> {
        for input in &self.inputs {
            let (sha, _) = sha256_file(&input.path)?;
            if sha != input.sha256 {
                bail!(fsspip::Error::Validation(format!(
                    "input {} changed: digest {sha}, manifest has {}",
                    input.path.display(),
                    input.sha256
                )));
            }
        }
        Ok(())
    }

    pub fn write(&self, primary_output: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        write_atomic(&manifest_path(primary_output), json.as_bytes())
    }
}
