//! Run manifests: everything needed to replay a run and check its outputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use semadv_core::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.txt";
const HEADER: &str = "semadv-manifest 1";

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RunManifest {
    pub tool_version: String,
    /// Canonical `key=value` snapshot of the run configuration.
    pub config: String,
    pub seeds: BTreeMap<String, u64>,
    /// Digests of the model checkpoints the run used.
    pub checkpoints: BTreeMap<String, String>,
    /// Status of every sample, keyed by `cell/sample`.
    pub outcomes: BTreeMap<String, String>,
    /// Digest of every other file in the run directory, by relative path.
    pub files: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// Files below `dir`, as sorted `/`-separated relative paths.
pub fn list_files(dir: &Path) -> Result<Vec<String>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                let rel = path.strip_prefix(root).expect("below root");
                let parts: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
                out.push(parts.join("/"));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort();
    Ok(out)
}

impl RunManifest {
    /// Digests every file under `dir` except the manifest itself.
    pub fn record_files(&mut self, dir: &Path) -> Result<()> {
        self.files.clear();
        for rel in list_files(dir)? {
            if rel != MANIFEST_FILE {
                let digest = sha256_file(&dir.join(&rel))?;
                self.files.insert(rel, digest);
            }
        }
        Ok(())
    }

    /// Paths whose digest differs from the manifest, or that are missing.
    pub fn verify(&self, dir: &Path) -> Result<Vec<String>> {
        let mut bad = Vec::new();
        for (rel, digest) in &self.files {
            match std::fs::read(dir.join(rel)) {
                Ok(bytes) if sha256_hex(&bytes) == *digest => {}
                _ => bad.push(rel.clone()),
            }
        }
        Ok(bad)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{HEADER}\ntool_version {}\n", self.tool_version);
        out.push_str("[config]\n");
        out.push_str(&self.config);
        let mut section = |name: &str, map: &BTreeMap<String, String>| {
            let _ = writeln!(out, "[{name}]");
            for (k, v) in map {
                let _ = writeln!(out, "{k} {v}");
            }
        };
        let seeds = self.seeds.iter().map(|(k, v)| (k.clone(), v.to_string())).collect();
        section("seeds", &seeds);
        section("checkpoints", &self.checkpoints);
        section("outcomes", &self.outcomes);
        section("files", &self.files);
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(HEADER) {
            return Err(Error::Format("not a run manifest".into()));
        }
        let mut m = RunManifest::default();
        let mut section = String::new();
        for line in lines {
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.to_string();
                continue;
            }
            if section == "config" {
                m.config.push_str(line);
                m.config.push('\n');
                continue;
            }
            let (k, v) = line
                .split_once(' ')
                .ok_or_else(|| Error::Format(format!("malformed manifest line `{line}`")))?;
            let (k, v) = (k.to_string(), v.to_string());
            match section.as_str() {
                "" if k == "tool_version" => m.tool_version = v,
                "seeds" => {
                    let seed = v.parse().map_err(|_| Error::Format(format!("bad seed `{v}`")))?;
                    m.seeds.insert(k, seed);
                }
                "checkpoints" => {
                    m.checkpoints.insert(k, v);
                }
                "outcomes" => {
                    m.outcomes.insert(k, v);
                }
                "files" => {
                    m.files.insert(k, v);
                }
                _ => return Err(Error::Format(format!("unexpected manifest line `{line}`"))),
            }
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, self.to_text())?;
        Ok(path)
    }
}
