//! Run manifests: every artifact directory gets a `manifest.json` holding the
//! exact argument list, the resolved settings and the digests of all inputs,
//! written before any work starts and completed when the command ends.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use chrono::{SecondsFormat, Utc};
use serde::Serialize;

use intentr::store::file_digest;

pub const MANIFEST_FILE: &str = "manifest.json";

pub struct Context {
    /// Arguments after settings-file expansion.
    pub argv: Vec<String>,
}

impl Context {
    pub fn new(argv: Vec<String>) -> Self {
        Context { argv }
    }

    /// Creates `dir` and writes the opening manifest there.
    pub fn start<C: Serialize>(&self, command: &str, dir: &Path, config: &C, seed: Option<u64>, inputs: &[PathBuf]) -> anyhow::Result<Manifest> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut digests = BTreeMap::new();
        for p in inputs {
            digests.insert(p.display().to_string(), digest_path(p)?);
        }
        let m = Manifest {
            path: dir.join(MANIFEST_FILE),
            body: RunManifest {
                command: command.to_string(),
                argv: self.argv.iter().skip(1).cloned().collect(),
                config: serde_json::to_value(config)?,
                inputs: digests,
                version: env!("CARGO_PKG_VERSION").to_string(),
                seed,
                threads: rayon::current_num_threads(),
                started_at: now(),
                finished_at: None,
                status: "running".into(),
                outputs: BTreeMap::new(),
            },
        };
        m.write()?;
        Ok(m)
    }
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// Digest of a file, or of every file under a directory (sorted by path).
fn digest_path(p: &Path) -> anyhow::Result<String> {
    if p.is_dir() {
        let mut files = Vec::new();
        collect_files(p, &mut files)?;
        files.sort();
        let mut joined = String::new();
        for f in files {
            if f.file_name().is_some_and(|n| n == MANIFEST_FILE) {
                continue;
            }
            let rel = f.strip_prefix(p).unwrap_or(&f);
            joined += &format!("{} {}\n", rel.display(), file_digest(&f)?);
        }
        return Ok(format!("dir:{}", intentr::store::text_digest(&joined)));
    }
    Ok(file_digest(p)?)
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> anyhow::Result<()> {
    for e in fs::read_dir(dir).map_err(|e| intentr::Error::io(dir, e))? {
        let p = e?.path();
        if p.is_dir() {
            collect_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub version: String,
    pub seed: Option<u64>,
    pub threads: usize,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub status: String,
    pub outputs: BTreeMap<String, String>,
}

pub struct Manifest {
    path: PathBuf,
    body: RunManifest,
}

impl Manifest {
    fn write(&self) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(&self.body)? + "\n";
        fs::write(&self.path, text).with_context(|| format!("writing {}", self.path.display()))
    }

    /// Records an output file with its digest.
    pub fn output(&mut self, path: &Path) -> anyhow::Result<()> {
        let name = path
            .strip_prefix(self.path.parent().unwrap_or(Path::new("")))
            .unwrap_or(path)
            .display()
            .to_string();
        self.body.outputs.insert(name, file_digest(path)?);
        Ok(())
    }

    /// Closes the manifest with the outcome of `result` and passes it on.
    pub fn conclude<T>(self, result: anyhow::Result<T>) -> anyhow::Result<T> {
        let status = match &result {
            Ok(_) => "ok".to_string(),
            Err(e) => format!("failed: {e:#}"),
        };
        self.finish(&status)?;
        result
    }

    pub fn finish(mut self, status: &str) -> anyhow::Result<()> {
        self.body.finished_at = Some(now());
        self.body.status = status.to_string();
        self.write()
    }
}
