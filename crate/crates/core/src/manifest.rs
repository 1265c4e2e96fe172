//! Checksum manifests of run directories.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const RUN_MANIFEST: &str = "run_manifest.txt";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(dir, e))?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            walk(root, &p, out)?;
        } else if p
            .strip_prefix(root)
            .map(|r| r != Path::new(RUN_MANIFEST))
            .unwrap_or(true)
        {
            out.push(p);
        }
    }
    Ok(())
}

/// Files under `dir` with their SHA-256, as `relative/path = hex` lines.
/// The manifest itself is excluded.
pub fn checksums(dir: &Path) -> Result<Vec<(String, String)>> {
    let mut files = Vec::new();
    walk(dir, dir, &mut files)?;
    files
        .into_iter()
        .map(|p| {
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            let rel = p.strip_prefix(dir).expect("walked under dir");
            let name = rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/");
            Ok((name, sha256_hex(&bytes)))
        })
        .collect()
}

/// Writes `run_manifest.txt` listing every file under `dir`.
pub fn write_run_manifest(dir: &Path) -> Result<PathBuf> {
    let text: String = checksums(dir)?
        .into_iter()
        .map(|(n, h)| format!("{n} = {h}\n"))
        .collect();
    let path = dir.join(RUN_MANIFEST);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Files whose checksum differs from the manifest, or that are missing
/// from either side.
pub fn verify_run_manifest(dir: &Path) -> Result<Vec<String>> {
    let path = dir.join(RUN_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut listed = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (n, h) = line
            .split_once(" = ")
            .ok_or_else(|| Error::format(&path, format!("malformed line {line:?}")))?;
        listed.push((n.to_string(), h.to_string()));
    }
    let actual = checksums(dir)?;
    let mut bad: Vec<String> = listed
        .iter()
        .filter(|e| !actual.contains(e))
        .map(|e| e.0.clone())
        .collect();
    bad.extend(
        actual
            .iter()
            .filter(|a| !listed.iter().any(|l| l.0 == a.0))
            .map(|a| a.0.clone()),
    );
    bad.sort();
    bad.dedup();
    Ok(bad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_detects_changes() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("sub")).unwrap();
        fs::write(dir.path().join("a.txt"), "a").unwrap();
        fs::write(dir.path().join("sub/b.txt"), "b").unwrap();
        write_run_manifest(dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join(RUN_MANIFEST)).unwrap();
        assert!(text.contains("sub/b.txt = "));
        assert!(verify_run_manifest(dir.path()).unwrap().is_empty());
        fs::write(dir.path().join("a.txt"), "changed").unwrap();
        fs::write(dir.path().join("c.txt"), "new").unwrap();
        assert_eq!(verify_run_manifest(dir.path()).unwrap(), vec!["a.txt", "c.txt"]);
    }
}
