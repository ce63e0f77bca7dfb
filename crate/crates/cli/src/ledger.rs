//! Append-only provenance log. Every artifact is identified by the SHA-256
//! of its bytes; a directory hashes the sorted list of
//! `relative/path \0 file-hash \n` lines of every file beneath it.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerRecord {
    pub stage: String,
    pub config_hash: String,
    /// Artifact path (relative to the run root where possible) to hash.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Hash of a value's canonical JSON encoding.
pub fn hash_json<T: Serialize>(value: &T) -> anyhow::Result<String> {
    Ok(hash_bytes(&serde_json::to_vec(value)?))
}

fn files_under(dir: &Path, base: &Path, out: &mut Vec<PathBuf>) -> anyhow::Result<()> {
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.is_dir() {
            files_under(&path, base, out)?;
        } else {
            out.push(path.strip_prefix(base)?.to_path_buf());
        }
    }
    Ok(())
}

pub fn hash_path(path: &Path) -> anyhow::Result<String> {
    if path.is_dir() {
        let mut files = Vec::new();
        files_under(path, path, &mut files)?;
        files.sort();
        let mut h = Sha256::new();
        for f in files {
            let digest = hash_path(&path.join(&f))?;
            h.update(f.to_string_lossy().replace('\\', "/").as_bytes());
            h.update(b"\0");
            h.update(digest.as_bytes());
            h.update(b"\n");
        }
        Ok(hex(&h.finalize()))
    } else {
        let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
        Ok(hash_bytes(&bytes))
    }
}

fn label(root: &Path, path: &Path) -> String {
    path.strip_prefix(root)
        .unwrap_or(path)
        .to_string_lossy()
        .replace('\\', "/")
}

impl LedgerRecord {
    pub fn new<C: Serialize>(
        root: &Path,
        stage: &str,
        config: &C,
        inputs: &[PathBuf],
        outputs: &[PathBuf],
    ) -> anyhow::Result<Self> {
        let digest = |paths: &[PathBuf]| -> anyhow::Result<BTreeMap<String, String>> {
            paths.iter().map(|p| Ok((label(root, p), hash_path(p)?))).collect()
        };
        Ok(Self {
            stage: stage.into(),
            config_hash: hash_json(config)?,
            inputs: digest(inputs)?,
            outputs: digest(outputs)?,
        })
    }

    /// True when every recorded output still exists with the same hash.
    pub fn outputs_intact(&self, root: &Path) -> bool {
        self.outputs.iter().all(|(p, h)| {
            let path = if Path::new(p).is_absolute() { PathBuf::from(p) } else { root.join(p) };
            hash_path(&path).is_ok_and(|got| &got == h)
        })
    }
}

pub fn append(path: &Path, record: &LedgerRecord) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening ledger {}", path.display()))?;
    let mut line = serde_json::to_vec(record)?;
    line.push(b'\n');
    f.write_all(&line)?;
    Ok(())
}

pub fn read(path: &Path) -> anyhow::Result<Vec<LedgerRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        // SHA-256 of "abc" from FIPS 180-2, appendix B.1.
        assert_eq!(
            hash_bytes(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn directory_hash_tracks_names_and_contents() {
        let d = tempfile::tempdir().unwrap();
        let a = d.path().join("a");
        std::fs::create_dir_all(a.join("sub")).unwrap();
        std::fs::write(a.join("x"), b"1").unwrap();
        std::fs::write(a.join("sub/y"), b"2").unwrap();
        let h1 = hash_path(&a).unwrap();
        let b = d.path().join("b");
        std::fs::create_dir_all(b.join("sub")).unwrap();
        std::fs::write(b.join("sub/y"), b"2").unwrap();
        std::fs::write(b.join("x"), b"1").unwrap();
        assert_eq!(h1, hash_path(&b).unwrap());
        std::fs::write(b.join("x"), b"3").unwrap();
        assert_ne!(h1, hash_path(&b).unwrap());
    }

    #[test]
    fn append_and_read_back() {
        let d = tempfile::tempdir().unwrap();
        let f = d.path().join("out.txt");
        std::fs::write(&f, b"hello").unwrap();
        let r = LedgerRecord::new(d.path(), "corpus", &1u32, &[], &[f.clone()]).unwrap();
        assert_eq!(r.outputs.keys().next().unwrap(), "out.txt");
        let ledger = d.path().join("ledger.jsonl");
        append(&ledger, &r).unwrap();
        append(&ledger, &r).unwrap();
        assert_eq!(read(&ledger).unwrap(), vec![r.clone(), r.clone()]);
        assert!(r.outputs_intact(d.path()));
        std::fs::write(&f, b"changed").unwrap();
        assert!(!r.outputs_intact(d.path()));
    }
}
