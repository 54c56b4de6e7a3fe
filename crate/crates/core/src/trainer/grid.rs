//! Cell type x layer count x width search with an append-only journal, so
//! an interrupted search resumes where it stopped.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::CellKind;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub cells: Vec<CellKind>,
    pub layers: Vec<usize>,
    pub hidden: Vec<usize>,
}

impl Default for GridSpec {
    /// 3 cell types x 3 depths x 4 widths.
    fn default() -> Self {
        GridSpec {
            cells: CellKind::ALL.to_vec(),
            layers: vec![1, 2, 3],
            hidden: vec![64, 128, 256, 512],
        }
    }
}

impl GridSpec {
    pub fn points(&self) -> Vec<GridPoint> {
        let mut out = Vec::new();
        for &cell in &self.cells {
            for &layers in &self.layers {
                for &hidden in &self.hidden {
                    out.push(GridPoint { cell, layers, hidden });
                }
            }
        }
        out
    }
}

impl FromStr for GridSpec {
    type Err = Error;

    /// `cells=rnn,gru,lstm layers=1,2,3 hidden=64,128`; omitted keys keep defaults.
    fn from_str(s: &str) -> Result<Self> {
        let mut spec = GridSpec::default();
        for part in s.split_whitespace() {
            let (key, values) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("grid term `{part}` is not key=values")))?;
            let list: Vec<&str> = values.split(',').filter(|v| !v.is_empty()).collect();
            let nums = || -> Result<Vec<usize>> {
                list.iter()
                    .map(|v| match v.parse::<usize>() {
                        Ok(n) if n > 0 => Ok(n),
                        _ => Err(Error::Config(format!("grid {key}: `{v}` is not a positive integer"))),
                    })
                    .collect()
            };
            match key {
                "cells" | "cell" => spec.cells = list.iter().map(|v| v.parse()).collect::<Result<_>>()?,
                "layers" => spec.layers = nums()?,
                "hidden" => spec.hidden = nums()?,
                other => return Err(Error::Config(format!("unknown grid key `{other}`"))),
            }
        }
        if spec.cells.is_empty() || spec.layers.is_empty() || spec.hidden.is_empty() {
            return Err(Error::Config("grid has an empty dimension".into()));
        }
        Ok(spec)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridPoint {
    pub cell: CellKind,
    pub layers: usize,
    pub hidden: usize,
}

impl fmt::Display for GridPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}x{}", self.cell, self.layers, self.hidden)
    }
}

/// What a finished training run reports back to the search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellOutcome {
    pub valid_auc: f64,
    pub test_auc: Option<f64>,
    pub best_epoch: usize,
    pub epochs: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    #[serde(flatten)]
    pub point: GridPoint,
    #[serde(flatten)]
    pub outcome: Option<CellOutcome>,
    pub error: Option<String>,
}

impl GridResult {
    pub fn ok(&self) -> bool {
        self.outcome.is_some()
    }
}

/// Reads completed entries. Lines that do not parse (e.g. one cut short by
/// a kill) are ignored. Later entries for a point replace earlier ones.
pub fn read_journal(path: &Path) -> Result<BTreeMap<GridPoint, GridResult>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(BTreeMap::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    Ok(text
        .lines()
        .filter_map(|l| serde_json::from_str::<GridResult>(l).ok())
        .map(|r| (r.point, r))
        .collect())
}

fn append_journal(path: &Path, r: &GridResult) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut line = serde_json::to_string(r)?;
    line.push('\n');
    // a previous run may have died mid-line; start on a fresh one
    let len = f.metadata().map_err(|e| Error::io(path, e))?.len();
    if len > 0 && !fs::read(path).map_err(|e| Error::io(path, e))?.ends_with(b"\n") {
        line.insert(0, '\n');
    }
    f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
    f.sync_data().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridRun {
    /// One entry per grid point reached so far, in grid order.
    pub results: Vec<GridResult>,
    /// Points trained by this call (not taken from the journal).
    pub trained: usize,
    pub complete: bool,
}

/// Runs `run` for every point not already completed in the journal. A
/// failing point is journaled with its error and retried on the next
/// resume. `stop` is consulted before each point; returning true ends the
/// search early with `complete == false`.
pub fn grid_search(
    spec: &GridSpec,
    journal: &Path,
    run: &mut dyn FnMut(&GridPoint) -> Result<CellOutcome>,
    stop: &mut dyn FnMut() -> bool,
) -> Result<GridRun> {
    let done = read_journal(journal)?;
    let mut results = Vec::new();
    let mut trained = 0;
    for p in spec.points() {
        if let Some(r) = done.get(&p).filter(|r| r.ok()) {
            results.push(r.clone());
            continue;
        }
        if stop() {
            return Ok(GridRun {
                results,
                trained,
                complete: false,
            });
        }
        let r = match run(&p) {
            Ok(o) => GridResult {
                point: p,
                outcome: Some(o),
                error: None,
            },
            Err(e) => GridResult {
                point: p,
                outcome: None,
                error: Some(e.to_string()),
            },
        };
        append_journal(journal, &r)?;
        trained += 1;
        results.push(r);
    }
    Ok(GridRun {
        results,
        trained,
        complete: true,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|a| format!("{a:.6}")).unwrap_or_default()
}

/// One row per grid point.
pub fn results_csv(results: &[GridResult]) -> String {
    let mut out = String::from("cell,layers,hidden,valid_auc,test_auc,best_epoch,epochs,seconds,error\n");
    for r in results {
        let p = r.point;
        match &r.outcome {
            Some(o) => {
                let _ = writeln!(
                    out,
                    "{},{},{},{:.6},{},{},{},{:.1},",
                    p.cell,
                    p.layers,
                    p.hidden,
                    o.valid_auc,
                    fmt_opt(o.test_auc),
                    o.best_epoch,
                    o.epochs,
                    o.seconds
                );
            }
            None => {
                let msg = r.error.as_deref().unwrap_or("").replace([',', '\n'], " ");
                let _ = writeln!(out, "{},{},{},,,,,,{}", p.cell, p.layers, p.hidden, msg);
            }
        }
    }
    out
}

/// Rows are cell type x layer count, columns are widths; each entry is the
/// test AUC (validation AUC when no test set was given).
pub fn pivot_csv(spec: &GridSpec, results: &[GridResult]) -> String {
    let by_point: BTreeMap<GridPoint, &GridResult> = results.iter().map(|r| (r.point, r)).collect();
    let mut out = String::from("cell,layers");
    for h in &spec.hidden {
        let _ = write!(out, ",{h}");
    }
    out.push('\n');
    for &cell in &spec.cells {
        for &layers in &spec.layers {
            let _ = write!(out, "{cell},{layers}");
            for &hidden in &spec.hidden {
                let v = by_point
                    .get(&GridPoint { cell, layers, hidden })
                    .and_then(|r| r.outcome.as_ref())
                    .map(|o| o.test_auc.unwrap_or(o.valid_auc));
                let _ = write!(out, ",{}", fmt_opt(v));
            }
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_has_36_points() {
        assert_eq!(GridSpec::default().points().len(), 36);
        let g: GridSpec = "cells=lstm layers=1 hidden=8".parse().unwrap();
        assert_eq!(g.points().len(), 1);
        assert!("cells=lstm layers=0".parse::<GridSpec>().is_err());
        assert!("cells=bogus".parse::<GridSpec>().is_err());
        assert!("depth=3".parse::<GridSpec>().is_err());
    }

    #[test]
    fn failures_are_recorded_and_retried() {
        let dir = tempfile::tempdir().unwrap();
        let journal = dir.path().join("journal.jsonl");
        let spec: GridSpec = "cells=rnn,gru layers=1 hidden=4".parse().unwrap();
        let mut calls = Vec::new();
        let mut run = |p: &GridPoint| {
            calls.push(*p);
            if p.cell == CellKind::Rnn && calls.len() == 1 {
                Err(Error::Config("boom".into()))
            } else {
                Ok(CellOutcome {
                    valid_auc: 0.5,
                    test_auc: None,
                    best_epoch: 1,
                    epochs: 1,
                    seconds: 0.0,
                })
            }
        };
        let first = grid_search(&spec, &journal, &mut run, &mut || false).unwrap();
        assert!(first.complete);
        assert!(!first.results[0].ok() && first.results[1].ok());
        assert!(results_csv(&first.results).contains("boom"));
        let second = grid_search(&spec, &journal, &mut run, &mut || false).unwrap();
        assert_eq!(second.trained, 1);
        assert!(second.results.iter().all(|r| r.ok()));
        assert_eq!(calls.len(), 3);
    }
}
