//! Run manifests and the artifact envelope.
//!
//! Every stage writes `run_manifest.json` into its own directory. The
//! manifest holds the resolved parameters and the SHA-256 of every input
//! file, never paths or clocks, so identical runs hash identically wherever
//! they live. Each artifact carries that hash: JSON files in their envelope,
//! CSV files in a `# manifest_sha256=` comment line.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const TOOL: &str = "ecg-aging";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub seed: u64,
    pub params: serde_json::Value,
    /// Input role to SHA-256 of the file contents.
    pub inputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub kind: String,
    pub manifest_sha256: String,
    pub data: T,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// An open stage directory with the hash of its manifest.
#[derive(Debug, Clone)]
pub struct Run {
    pub dir: PathBuf,
    pub hash: String,
    pub manifest: RunManifest,
}

impl Run {
    pub fn start(
        out: &Path,
        subcommand: &str,
        seed: u64,
        params: &impl Serialize,
        inputs: &[(&str, &Path)],
    ) -> Result<Run> {
        let mut hashes = BTreeMap::new();
        for (role, path) in inputs {
            hashes.insert(role.to_string(), sha256_file(path)?);
        }
        let manifest = RunManifest {
            tool: TOOL.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            subcommand: subcommand.to_string(),
            seed,
            params: serde_json::to_value(params)?,
            inputs: hashes,
        };
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        let hash = hex::encode(Sha256::digest(&bytes));
        let dir = out.join(subcommand);
        create_dir(&dir)?;
        write_file(&dir.join("run_manifest.json"), &bytes)?;
        Ok(Run { dir, hash, manifest })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Comment lines that open every CSV artifact.
    pub fn preamble(&self) -> Vec<String> {
        vec![
            format!("manifest_sha256={}", self.hash),
            format!("produced_by={} {}", TOOL, self.manifest.subcommand),
        ]
    }

    pub fn write_json<T: Serialize>(&self, name: &str, kind: &str, data: &T) -> Result<PathBuf> {
        let env = Envelope {
            kind: kind.to_string(),
            manifest_sha256: self.hash.clone(),
            data,
        };
        let mut bytes = serde_json::to_vec_pretty(&env)?;
        bytes.push(b'\n');
        let path = self.path(name);
        write_file(&path, bytes)?;
        Ok(path)
    }

    /// Writes CSV `body` (header included) after the manifest comment lines.
    pub fn write_csv(&self, name: &str, body: &str) -> Result<PathBuf> {
        let mut out = String::new();
        for l in self.preamble() {
            out.push_str("# ");
            out.push_str(&l);
            out.push('\n');
        }
        out.push_str(body);
        let path = self.path(name);
        write_file(&path, out)?;
        Ok(path)
    }

    pub fn write_text(&self, name: &str, body: &str) -> Result<PathBuf> {
        let path = self.path(name);
        write_file(&path, format!("manifest_sha256={}\n{body}", self.hash))?;
        Ok(path)
    }
}

pub fn artifact_kind(path: &Path) -> Result<String> {
    let s = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let v: serde_json::Value = serde_json::from_str(&s)?;
    Ok(v.get("kind").and_then(|k| k.as_str()).unwrap_or("unknown").to_string())
}

pub fn read_json<T: DeserializeOwned>(path: &Path, kind: &'static str) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let env: Envelope<serde_json::Value> = serde_json::from_str(&s)?;
    if env.kind != kind {
        return Err(CliError::WrongArtifact {
            path: path.to_path_buf(),
            expected: kind,
            found: env.kind,
        });
    }
    Ok(serde_json::from_value(env.data)?)
}

/// Serializes rows with a header through the csv crate.
pub fn csv_string<R: Serialize>(rows: &[R]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(ecg_aging::Error::from)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::usage(e.to_string()))?;
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_hash_ignores_output_location() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let p = serde_json::json!({"k": 8});
        let ra = Run::start(a.path(), "x", 1, &p, &[]).unwrap();
        let rb = Run::start(b.path(), "x", 1, &p, &[]).unwrap();
        assert_eq!(ra.hash, rb.hash);
        let rc = Run::start(b.path(), "x", 2, &p, &[]).unwrap();
        assert_ne!(ra.hash, rc.hash);
    }

    #[test]
    fn envelope_round_trip_checks_kind() {
        let d = tempfile::tempdir().unwrap();
        let r = Run::start(d.path(), "x", 0, &(), &[]).unwrap();
        let path = r.write_json("v.json", "numbers", &vec![1.5, 2.0]).unwrap();
        let v: Vec<f64> = read_json(&path, "numbers").unwrap();
        assert_eq!(v, vec![1.5, 2.0]);
        assert!(matches!(
            read_json::<Vec<f64>>(&path, "other"),
            Err(CliError::WrongArtifact { .. })
        ));
        assert_eq!(artifact_kind(&path).unwrap(), "numbers");
    }

    #[test]
    fn csv_artifacts_open_with_the_hash() {
        let d = tempfile::tempdir().unwrap();
        let r = Run::start(d.path(), "x", 0, &(), &[]).unwrap();
        let p = r.write_csv("t.csv", "a,b\n1,2\n").unwrap();
        let s = fs::read_to_string(p).unwrap();
        assert!(s.starts_with(&format!("# manifest_sha256={}\n", r.hash)));
        assert!(s.ends_with("a,b\n1,2\n"));
    }
}
