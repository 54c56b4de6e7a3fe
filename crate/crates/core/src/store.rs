//! On-disk layout of a prepared dataset: one JSON line per session for each
//! split part, one vocabulary file per field, the item catalog and a summary.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ingest::{Session, SplitPart, SplitSpec, Splits};
use crate::vocab::{Field, ItemCatalog, Vocabularies, Vocabulary};

pub const SUMMARY_FILE: &str = "dataset.json";
pub const CATALOG_FILE: &str = "catalog.tsv";
pub const VOCAB_DIR: &str = "vocab";
const PARTS: [SplitPart; 3] = [SplitPart::Train, SplitPart::Valid, SplitPart::Test];

pub fn sessions_file(part: SplitPart) -> String {
    format!("{}.jsonl", part.name())
}

pub fn vocab_file(field: Field) -> String {
    format!("{VOCAB_DIR}/{}.vocab", field.name())
}

/// SHA-256 of a file's bytes, hex encoded.
pub fn file_digest(path: &Path) -> Result<String> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn text_digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartSummary {
    pub sessions: usize,
    pub buyers: usize,
    pub events: usize,
}

impl PartSummary {
    fn of(sessions: &[Session]) -> Self {
        PartSummary {
            sessions: sessions.len(),
            buyers: sessions.iter().filter(|s| s.label.is_buyer()).count(),
            events: sessions.iter().map(|s| s.events.len()).sum(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreSummary {
    pub split: SplitSpec,
    pub parts: BTreeMap<String, PartSummary>,
    /// Values per field, not counting the unknown row.
    pub vocab_sizes: BTreeMap<String, usize>,
    /// File name relative to the store -> SHA-256.
    pub digests: BTreeMap<String, String>,
}

/// Split sessions with the vocabularies and catalog built from the training part.
#[derive(Clone, Debug, PartialEq)]
pub struct DataStore {
    pub vocabs: Vocabularies,
    pub catalog: ItemCatalog,
    pub train: Vec<Session>,
    pub valid: Vec<Session>,
    pub test: Vec<Session>,
}

impl DataStore {
    pub fn from_splits(splits: Splits) -> Self {
        let catalog = ItemCatalog::build(&splits.train);
        let vocabs = Vocabularies::build(&splits.train, &catalog);
        DataStore {
            vocabs,
            catalog,
            train: splits.train,
            valid: splits.valid,
            test: splits.test,
        }
    }

    pub fn part(&self, part: SplitPart) -> &[Session] {
        match part {
            SplitPart::Train => &self.train,
            SplitPart::Valid => &self.valid,
            SplitPart::Test => &self.test,
        }
    }

    pub fn write(&self, dir: &Path, split: SplitSpec) -> Result<StoreSummary> {
        fs::create_dir_all(dir.join(VOCAB_DIR)).map_err(|e| Error::io(dir.join(VOCAB_DIR), e))?;
        let mut digests = BTreeMap::new();
        let mut parts = BTreeMap::new();
        for part in PARTS {
            let name = sessions_file(part);
            write_sessions(&dir.join(&name), self.part(part))?;
            digests.insert(name.clone(), file_digest(&dir.join(&name))?);
            parts.insert(part.name().to_string(), PartSummary::of(self.part(part)));
        }
        for v in self.vocabs.iter() {
            let name = vocab_file(v.field());
            write_with(&dir.join(&name), |w| v.write_to(w))?;
            digests.insert(name.clone(), file_digest(&dir.join(&name))?);
        }
        write_with(&dir.join(CATALOG_FILE), |w| self.catalog.write_to(w))?;
        digests.insert(CATALOG_FILE.into(), file_digest(&dir.join(CATALOG_FILE))?);
        let summary = StoreSummary {
            split,
            parts,
            vocab_sizes: self.vocabs.iter().map(|v| (v.field().name().to_string(), v.len())).collect(),
            digests,
        };
        let json = serde_json::to_vec_pretty(&summary)?;
        fs::write(dir.join(SUMMARY_FILE), json).map_err(|e| Error::io(dir.join(SUMMARY_FILE), e))?;
        Ok(summary)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let vocabs = Field::ALL
            .into_iter()
            .map(|f| {
                let path = dir.join(vocab_file(f));
                Vocabulary::read_from(open(&path)?)
            })
            .collect::<Result<Vec<_>>>()?;
        let catalog = ItemCatalog::read_from(open(&dir.join(CATALOG_FILE))?)?;
        let mut parts = PARTS.into_iter().map(|p| read_sessions(&dir.join(sessions_file(p))));
        let mut next = || parts.next().expect("three parts");
        Ok(DataStore {
            vocabs: Vocabularies::from_vec(vocabs)?,
            catalog,
            train: next()?,
            valid: next()?,
            test: next()?,
        })
    }
}

pub fn read_summary(dir: &Path) -> Result<StoreSummary> {
    let path = dir.join(SUMMARY_FILE);
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_slice(&text)?)
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let mut w = File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))?;
    f(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn write_sessions(path: &Path, sessions: &[Session]) -> Result<()> {
    write_with(path, |w| {
        for s in sessions {
            serde_json::to_writer(&mut *w, s)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })
}

pub fn read_sessions(path: &Path) -> Result<Vec<Session>> {
    let mut out = Vec::new();
    for (n, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Session = serde_json::from_str(&line)
            .map_err(|e| Error::format(path.display().to_string(), format!("line {}: {e}", n + 1)))?;
        if s.events.is_empty() {
            return Err(Error::format(path.display().to_string(), format!("line {}: session without events", n + 1)));
        }
        out.push(s);
    }
    Ok(out)
}
