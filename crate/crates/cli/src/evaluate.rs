use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::Context as _;

use intentr::eval::{compare_predictions, read_predictions, write_predictions, EvalReport, ScoredSession};
use intentr::ingest::{assemble_sessions, parse_recsys_clicks, RejectLog, Session, SplitPart};
use intentr::model::Checkpoint;
use intentr::store::DataStore;
use intentr::trainer::score_sessions;
use intentr::transform::Encoder;

use crate::args::{EvaluateArgs, PredictArgs};
use crate::manifest::Context;

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";
pub const ROC_FILE: &str = "roc.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
const SCORE_BATCH: usize = 512;

fn default_part(store: &DataStore) -> SplitPart {
    if store.test.is_empty() {
        SplitPart::Valid
    } else {
        SplitPart::Test
    }
}

fn score(ck: &Checkpoint, store: DataStore, sessions: &[Session]) -> anyhow::Result<Vec<ScoredSession>> {
    let encoder = Encoder::new(store.vocabs, store.catalog, ck.model.layout.clone(), ck.transform.clone())?;
    let (encoded, _) = encoder.encode_all(sessions)?;
    Ok(score_sessions(&ck.model, &encoded, SCORE_BATCH)?)
}

fn write_file(path: &Path, body: &str) -> anyhow::Result<()> {
    fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn save_predictions(path: &Path, scored: &[ScoredSession]) -> anyhow::Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    write_predictions(&mut w, scored)
        .and_then(|_| w.flush())
        .with_context(|| format!("writing {}", path.display()))
}

pub fn evaluate(ctx: &Context, a: EvaluateArgs) -> anyhow::Result<()> {
    let mut inputs = vec![a.checkpoint.clone(), a.data.clone()];
    inputs.extend(a.compare.clone());
    let mut manifest = match &a.report {
        Some(dir) => Some(ctx.start("evaluate", dir, &a, None, &inputs)?),
        None => None,
    };
    let r = (|| -> anyhow::Result<()> {
        let store = DataStore::read(&a.data)?;
        let ck = Checkpoint::load(&a.checkpoint, &store.vocabs)?;
        let part = a.part.map(SplitPart::from).unwrap_or_else(|| default_part(&store));
        let sessions = store.part(part).to_vec();
        let scored = score(&ck, store, &sessions)?;
        let mut report = EvalReport::build(&scored, a.length_cap)?;
        if let Some(p) = &a.compare {
            let f = File::open(p).map_err(|e| intentr::Error::io(p, e))?;
            let theirs = read_predictions(BufReader::new(f))?;
            report.comparison = Some(compare_predictions(&scored, &theirs)?);
        }
        let text = report.render_text();
        println!("{} part", part.name());
        print!("{text}");
        if let (Some(dir), Some(m)) = (&a.report, manifest.as_mut()) {
            write_file(&dir.join(REPORT_JSON), &(serde_json::to_string_pretty(&report)? + "\n"))?;
            write_file(&dir.join(REPORT_TEXT), &text)?;
            write_file(&dir.join(ROC_FILE), &report.roc_csv())?;
            save_predictions(&dir.join(PREDICTIONS_FILE), &scored)?;
            for f in [REPORT_JSON, REPORT_TEXT, ROC_FILE, PREDICTIONS_FILE] {
                m.output(&dir.join(f))?;
            }
        }
        Ok(())
    })();
    match manifest {
        Some(m) => m.conclude(r),
        None => r,
    }
}

pub fn predict(ctx: &Context, a: PredictArgs) -> anyhow::Result<()> {
    let inputs: Vec<_> = [&a.checkpoint]
        .into_iter()
        .chain(a.data.as_ref())
        .chain(a.clicks.as_ref())
        .chain(a.vocab_from.as_ref())
        .cloned()
        .collect();
    let mut m = ctx.start("predict", &a.out, &a, None, &inputs)?;
    let r = (|| -> anyhow::Result<()> {
        let (store, sessions) = match (&a.data, &a.clicks, &a.vocab_from) {
            (Some(d), _, _) => {
                let store = DataStore::read(d)?;
                let part = a.part.map(SplitPart::from).unwrap_or_else(|| default_part(&store));
                let sessions = store.part(part).to_vec();
                (store, sessions)
            }
            (None, Some(c), Some(v)) => {
                let store = DataStore::read(v)?;
                let mut log = RejectLog::new(c.display().to_string());
                let f = File::open(c).map_err(|e| intentr::Error::io(c, e))?;
                let clicks = parse_recsys_clicks(BufReader::new(f), &mut log)?;
                eprint!("{}", log.render());
                let (sessions, _) = assemble_sessions(clicks, Vec::new());
                (store, sessions)
            }
            _ => unreachable!("clap requires --data or --clicks with --vocab-from"),
        };
        let ck = Checkpoint::load(&a.checkpoint, &store.vocabs)?;
        let scored = score(&ck, store, &sessions)?;
        let p = a.out.join(PREDICTIONS_FILE);
        save_predictions(&p, &scored)?;
        m.output(&p)?;
        println!("{} sessions scored -> {}", scored.len(), p.display());
        Ok(())
    })();
    m.conclude(r)
}
