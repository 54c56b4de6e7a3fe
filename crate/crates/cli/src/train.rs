use std::fs::{self, File};
use std::io::Write;
use std::time::Instant;

use anyhow::Context as _;
use serde::Serialize;

use intentr::eval::auc;
use intentr::model::{Checkpoint, Model, ModelConfig};
use intentr::nn::CellKind;
use intentr::store::DataStore;
use intentr::trainer::grid::{grid_search, pivot_csv, results_csv, CellOutcome, GridPoint, GridSpec};
use intentr::trainer::{score_sessions, train as fit, AucValidator, EpochRecord, TrainConfig, TrainOutcome};
use intentr::transform::{unroll_growth, EncodedSession, Encoder, TransformConfig};
use intentr::vocab::FieldLayout;

use crate::args::{FitArgs, GridArgs, TrainArgs};
use crate::manifest::Context;
use crate::Usage;

pub const LOG_FILE: &str = "train.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const SUMMARY_FILE: &str = "summary.json";
pub const JOURNAL_FILE: &str = "journal.jsonl";
pub const RESULTS_FILE: &str = "results.csv";
pub const PIVOT_FILE: &str = "pivot.csv";
const SCORE_BATCH: usize = 512;

pub fn epoch_checkpoint(epoch: usize) -> String {
    format!("epoch-{epoch:03}.ckpt")
}

fn layout(f: &FitArgs) -> FieldLayout {
    let w = f.field_width;
    let l = FieldLayout::with_widths([f.item_width, w, w, w, w]);
    match f.price_variance {
        Some(pw) => l.with_price_variance(pw),
        None => l,
    }
}

fn transform(f: &FitArgs) -> TransformConfig {
    TransformConfig {
        unroll_threshold_secs: (!f.no_unroll).then_some(f.unroll_threshold),
        reverse: !f.no_reverse,
        max_len: f.max_len,
    }
}

fn train_config(f: &FitArgs) -> TrainConfig {
    TrainConfig {
        learning_rate: f.lr,
        batch_size: f.batch,
        max_epochs: f.epochs,
        early_stop_patience: f.patience,
        anneal_factor: f.anneal,
        seed: f.seed,
        freeze_embeddings: f.freeze_embeddings,
        clip_norm: f.clip_norm,
        length_bucket_window: f.length_buckets,
    }
}

fn model_config(cell: CellKind, layers: usize, hidden: usize, f: &FitArgs) -> ModelConfig {
    ModelConfig {
        cell,
        num_layers: layers,
        hidden_size: hidden,
        skip_connections: !f.no_skip,
        share_hidden_state: !f.no_share_state,
        tie_layer_weights: f.tie_layers,
        embeddings_trainable: !f.freeze_embeddings,
    }
}

/// Encoded splits of a prepared directory.
struct Data {
    encoder: Encoder,
    train: Vec<EncodedSession>,
    valid: Vec<EncodedSession>,
    test: Vec<EncodedSession>,
}

impl Data {
    fn load(f: &FitArgs) -> anyhow::Result<Self> {
        let cfg = train_config(f);
        cfg.validate().map_err(|e| Usage(e.to_string()))?;
        let store = DataStore::read(&f.data)?;
        let encoder = Encoder::new(store.vocabs, store.catalog, layout(f), transform(f)).map_err(|e| Usage(e.to_string()))?;
        let (train, st) = encoder.encode_all(&store.train)?;
        let (valid, sv) = encoder.encode_all(&store.valid)?;
        let (test, sx) = encoder.encode_all(&store.test)?;
        if train.is_empty() {
            return Err(intentr::Error::Config(format!("{} has no training sessions", f.data.display())).into());
        }
        let skew = st.negative_dwells + sv.negative_dwells + sx.negative_dwells;
        if skew > 0 {
            eprintln!("{skew} events precede their predecessor in time; treated as zero dwell");
        }
        Ok(Data {
            encoder,
            train,
            valid,
            test,
        })
    }

    fn test_auc(&self, model: &Model<f32>) -> anyhow::Result<Option<f64>> {
        if self.test.is_empty() {
            return Ok(None);
        }
        let scored = score_sessions(model, &self.test, SCORE_BATCH)?;
        let (s, l): (Vec<f64>, Vec<bool>) = scored.iter().map(|x| (x.score, x.label.is_buyer())).unzip();
        match auc(&s, &l) {
            Ok(a) => Ok(Some(a)),
            Err(intentr::Error::AucUndefined(_)) => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    fn fit(
        &self,
        mc: ModelConfig,
        f: &FitArgs,
        observer: &mut dyn FnMut(&EpochRecord, &Model<f32>) -> intentr::Result<()>,
    ) -> anyhow::Result<TrainOutcome<f32>> {
        mc.validate().map_err(|e| Usage(e.to_string()))?;
        let model = Model::<f32>::for_vocabs(mc, self.encoder.layout.clone(), &self.encoder.vocabs, f.seed)?;
        let mut validator = AucValidator::new(&self.valid, SCORE_BATCH)?;
        Ok(fit(model, &train_config(f), &self.train, &mut validator, observer)?)
    }
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    model: &'a ModelConfig,
    parameters: usize,
    train_sessions: usize,
    valid_sessions: usize,
    test_sessions: usize,
    unroll_growth: f64,
    best_epoch: usize,
    best_valid_auc: f64,
    test_auc: Option<f64>,
    stopped_early: bool,
    final_lr: f64,
    seconds: f64,
    history: &'a [EpochRecord],
}

pub fn train(ctx: &Context, a: TrainArgs) -> anyhow::Result<()> {
    let mut m = ctx.start("train", &a.out, &a, Some(a.fit.seed), std::slice::from_ref(&a.fit.data))?;
    let r = (|| -> anyhow::Result<()> {
        let start = Instant::now();
        let data = Data::load(&a.fit)?;
        let mc = model_config(a.model.cell, a.model.layers, a.model.hidden, &a.fit);
        let log_path = a.out.join(LOG_FILE);
        let mut log = File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
        let transform = data.encoder.transform.clone();
        let vocabs = &data.encoder.vocabs;
        let out = &a.out;
        let mut observer = |r: &EpochRecord, model: &Model<f32>| -> intentr::Result<()> {
            let io = |e| intentr::Error::io(&log_path, e);
            writeln!(log, "{}", serde_json::to_string(r)?).map_err(io)?;
            log.flush().map_err(io)?;
            let ck = Checkpoint::new(model, transform.clone(), vocabs);
            ck.save(&out.join(epoch_checkpoint(r.epoch)))?;
            if r.improved {
                ck.save(&out.join(BEST_CHECKPOINT))?;
            }
            println!(
                "epoch {:>3}  loss {:.5}  valid auc {:.5}  lr {:.2e}  {:.1}s{}",
                r.epoch,
                r.loss,
                r.valid_auc,
                r.lr,
                r.seconds,
                if r.improved { "  *" } else { "" }
            );
            Ok(())
        };
        let outcome = data.fit(mc.clone(), &a.fit, &mut observer)?;
        let test_auc = data.test_auc(&outcome.model)?;
        let summary = TrainSummary {
            model: &mc,
            parameters: outcome.model.param_count().total(),
            train_sessions: data.train.len(),
            valid_sessions: data.valid.len(),
            test_sessions: data.test.len(),
            unroll_growth: unroll_growth(&data.train),
            best_epoch: outcome.best_epoch,
            best_valid_auc: outcome.best_auc,
            test_auc,
            stopped_early: outcome.stopped_early,
            final_lr: outcome.final_lr,
            seconds: start.elapsed().as_secs_f64(),
            history: &outcome.history,
        };
        let sp = a.out.join(SUMMARY_FILE);
        fs::write(&sp, serde_json::to_string_pretty(&summary)? + "\n").with_context(|| format!("writing {}", sp.display()))?;
        for f in [LOG_FILE, BEST_CHECKPOINT, SUMMARY_FILE] {
            m.output(&a.out.join(f))?;
        }
        println!("best epoch {} valid auc {:.5}", outcome.best_epoch, outcome.best_auc);
        if let Some(t) = test_auc {
            println!("test auc {t:.5}");
        }
        Ok(())
    })();
    m.conclude(r)
}

pub fn gridsearch(ctx: &Context, a: GridArgs) -> anyhow::Result<()> {
    let spec: GridSpec = a.grid.parse().map_err(|e: intentr::Error| Usage(e.to_string()))?;
    let mut m = ctx.start("gridsearch", &a.out, &a, Some(a.fit.seed), std::slice::from_ref(&a.fit.data))?;
    let r = (|| -> anyhow::Result<()> {
        let data = Data::load(&a.fit)?;
        let mut run = |p: &GridPoint| -> intentr::Result<CellOutcome> {
            let start = Instant::now();
            let mc = model_config(p.cell, p.layers, p.hidden, &a.fit);
            let out = data.fit(mc, &a.fit, &mut |_, _| Ok(())).map_err(into_core)?;
            let test_auc = data.test_auc(&out.model).map_err(into_core)?;
            let o = CellOutcome {
                valid_auc: out.best_auc,
                test_auc,
                best_epoch: out.best_epoch,
                epochs: out.history.len(),
                seconds: start.elapsed().as_secs_f64(),
            };
            println!(
                "{p:<14} valid {:.5}  test {}  epochs {}  {:.1}s",
                o.valid_auc,
                o.test_auc.map_or("-".into(), |t| format!("{t:.5}")),
                o.epochs,
                o.seconds
            );
            Ok(o)
        };
        let mut budget = a.max_cells;
        let mut stop = || match budget.as_mut() {
            Some(0) => true,
            Some(n) => {
                *n -= 1;
                false
            }
            None => false,
        };
        let res = grid_search(&spec, &a.out.join(JOURNAL_FILE), &mut run, &mut stop)?;
        for (name, body) in [(RESULTS_FILE, results_csv(&res.results)), (PIVOT_FILE, pivot_csv(&spec, &res.results))] {
            let p = a.out.join(name);
            fs::write(&p, body).with_context(|| format!("writing {}", p.display()))?;
            m.output(&p)?;
        }
        let failed = res.results.iter().filter(|r| !r.ok()).count();
        println!(
            "{} of {} cells done ({} trained now, {} failed){}",
            res.results.len() - failed,
            spec.points().len(),
            res.trained,
            failed,
            if res.complete { "" } else { "; rerun to resume" }
        );
        Ok(())
    })();
    m.conclude(r)
}

fn into_core(e: anyhow::Error) -> intentr::Error {
    match e.downcast::<intentr::Error>() {
        Ok(e) => e,
        Err(other) => intentr::Error::Config(format!("{other:#}")),
    }
}
