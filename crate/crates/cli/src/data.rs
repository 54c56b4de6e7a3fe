use std::fs::{self, File};
use std::io::BufReader;
use std::path::Path;

use anyhow::Context as _;

use intentr::ingest::{
    assemble_sessions, parse_recsys_buys, parse_recsys_clicks, parse_retailrocket, split_sessions, RejectLog, SplitSpec,
};
use intentr::store::{DataStore, SUMMARY_FILE};
use intentr::synth::{generate, SynthConfig, CLICKS_FILE};

use crate::args::{PrepareArgs, SynthArgs};
use crate::manifest::Context;
use crate::Usage;

fn open(path: &Path) -> intentr::Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| intentr::Error::io(path, e))
}

pub fn prepare(ctx: &Context, a: PrepareArgs) -> anyhow::Result<()> {
    let split = SplitSpec::parse(&a.split, a.seed).map_err(|e| Usage(e.to_string()))?;
    let inputs: Vec<_> = [&a.clicks, &a.buys, &a.retailrocket].into_iter().flatten().cloned().collect();
    for p in &inputs {
        if !p.is_file() {
            return Err(intentr::Error::io(p, std::io::Error::from(std::io::ErrorKind::NotFound)).into());
        }
    }
    let mut m = ctx.start("prepare", &a.out, &a, Some(a.seed), &inputs)?;
    let r = (|| -> anyhow::Result<()> {
        let mut logs = Vec::new();
        let (clicks, buys) = match (&a.clicks, &a.buys, &a.retailrocket) {
            (Some(c), Some(b), None) => {
                let mut cl = RejectLog::new(c.display().to_string());
                let mut bl = RejectLog::new(b.display().to_string());
                let clicks = parse_recsys_clicks(open(c)?, &mut cl)?;
                let buys = parse_recsys_buys(open(b)?, &mut bl)?;
                logs.extend([cl, bl]);
                (clicks, buys)
            }
            (None, None, Some(r)) => {
                if a.session_gap_mins <= 0 {
                    return Err(Usage("--session-gap-mins must be positive".into()).into());
                }
                let mut rl = RejectLog::new(r.display().to_string());
                let out = parse_retailrocket(open(r)?, a.session_gap_mins * 60, &mut rl)?;
                logs.push(rl);
                out
            }
            _ => return Err(Usage("give --clicks with --buys, or --retailrocket".into()).into()),
        };
        let rejects: String = logs.iter().map(|l| l.render()).collect();
        if !rejects.is_empty() {
            let p = a.out.join("rejects.log");
            fs::write(&p, &rejects).with_context(|| format!("writing {}", p.display()))?;
            eprintln!("{} malformed lines skipped, see {}", rejects.lines().count(), p.display());
        }
        let (sessions, stats) = assemble_sessions(clicks, buys);
        if stats.orphan_buys > 0 {
            eprintln!("{} buys have no clicks in their session", stats.orphan_buys);
        }
        let store = DataStore::from_splits(split_sessions(sessions, &split));
        let summary = store.write(&a.out, split)?;
        m.output(&a.out.join(SUMMARY_FILE))?;
        println!(
            "{} sessions ({} buyers, {} clicks)",
            stats.sessions, stats.buyers, stats.clicks
        );
        for (part, s) in &summary.parts {
            println!("  {part:<5} {:>9} sessions {:>8} buyers", s.sessions, s.buyers);
        }
        for (field, n) in &summary.vocab_sizes {
            println!("  vocab {field:<15} {n}");
        }
        Ok(())
    })();
    m.conclude(r)
}

pub fn synth(ctx: &Context, a: SynthArgs) -> anyhow::Result<()> {
    let cfg = SynthConfig {
        n_sessions: a.sessions,
        buyer_fraction: a.buyer_fraction,
        n_items: a.items,
        n_categories: a.categories,
        mean_length: a.mean_length,
        min_length: a.min_length,
        dwell_median_secs: a.dwell_median_secs,
        signal_strength: a.signal,
        signal_first_only: a.signal_first_only,
        seed: a.seed,
        catalog_seed: a.catalog_seed,
        ..Default::default()
    };
    cfg.validate().map_err(|e| Usage(e.to_string()))?;
    let mut m = ctx.start("synth", &a.out, &cfg, Some(a.seed), &[])?;
    let r = (|| -> anyhow::Result<()> {
        let corpus = generate(&cfg)?;
        corpus.write_to_dir(&a.out)?;
        m.output(&a.out.join(CLICKS_FILE))?;
        let s = &corpus.metadata.stats;
        println!(
            "{} sessions, {} buyers, {} clicks, {} buys -> {}",
            s.sessions,
            s.buyers,
            corpus.clicks.len(),
            corpus.buys.len(),
            a.out.display()
        );
        Ok(())
    })();
    m.conclude(r)
}
