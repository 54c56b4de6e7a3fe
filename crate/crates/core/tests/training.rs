mod common;

use common::*;
use intentr::eval::auc;
use intentr::model::{Model, ModelConfig};
use intentr::nn::CellKind;
use intentr::synth::SynthConfig;
use intentr::trainer::{score_sessions, train, AucValidator, EpochRecord, TrainConfig, Validator};
use intentr::transform::{EncodedSession, TransformConfig};
use intentr::vocab::FieldLayout;
use intentr::Error;

struct Scripted(Vec<f64>);

impl<T> Validator<T> for Scripted {
    fn validate(&mut self, _: &Model<T>, epoch: usize) -> intentr::Result<f64> {
        Ok(self.0[epoch - 1])
    }
}

fn small_layout() -> FieldLayout {
    FieldLayout::with_widths([8, 3, 3, 3, 3])
}

fn tiny_setup(n: usize, signal: f64) -> Prepared {
    let cfg = SynthConfig {
        n_sessions: n,
        buyer_fraction: 0.2,
        n_items: 200,
        signal_strength: signal,
        seed: 5,
        ..Default::default()
    };
    prepare(synth_sessions(&cfg), 0.2, small_layout(), TransformConfig::default())
}

fn tiny_model(p: &Prepared, kind: CellKind) -> Model<f64> {
    Model::for_vocabs(ModelConfig::new(kind, 1, 6), small_layout(), &p.encoder.vocabs, 3).unwrap()
}

fn run_scripted(aucs: &[f64], p: &Prepared) -> (intentr::trainer::TrainOutcome<f64>, Vec<Model<f64>>) {
    let cfg = TrainConfig {
        batch_size: 64,
        max_epochs: aucs.len(),
        ..Default::default()
    };
    let mut snapshots = Vec::new();
    let out = train(tiny_model(p, CellKind::Gru), &cfg, &p.train, &mut Scripted(aucs.to_vec()), &mut |_, m| {
        snapshots.push(m.clone());
        Ok(())
    })
    .unwrap();
    (out, snapshots)
}

#[test]
fn two_worsening_epochs_stop_and_return_the_best() {
    let p = tiny_setup(300, 1.0);
    let (out, snaps) = run_scripted(&[0.80, 0.79, 0.78, 0.9, 0.9], &p);
    assert_eq!(out.history.len(), 3);
    assert!(out.stopped_early);
    assert_eq!(out.best_epoch, 1);
    assert_eq!(out.model, snaps[0]);
    assert_ne!(out.model, snaps[2]);
    let lrs: Vec<f64> = out.history.iter().map(|r| r.lr).collect();
    assert_eq!(lrs, vec![1e-3, 1e-3, 5e-4]);
    assert_eq!(out.final_lr, 2.5e-4);
}

#[test]
fn ties_neither_count_nor_reset() {
    let p = tiny_setup(200, 1.0);
    let (out, _) = run_scripted(&[0.8, 0.8, 0.79, 0.8, 0.78, 0.99], &p);
    assert_eq!(out.history.len(), 5);
    assert_eq!(out.best_epoch, 1);
    let lrs: Vec<f64> = out.history.iter().map(|r| r.lr).collect();
    assert_eq!(lrs, vec![1e-3, 1e-3, 1e-3, 5e-4, 5e-4]);
}

#[test]
fn improvement_resets_patience() {
    let p = tiny_setup(200, 1.0);
    let (out, snaps) = run_scripted(&[0.8, 0.79, 0.81, 0.80, 0.79, 0.99], &p);
    assert_eq!(out.history.len(), 5);
    assert_eq!(out.best_epoch, 3);
    assert_eq!(out.model, snaps[2]);
    assert!(out.history.windows(2).all(|w| w[1].lr <= w[0].lr));
}

#[test]
fn frozen_embeddings_keep_their_bytes() {
    let p = tiny_setup(300, 1.0);
    let model = tiny_model(&p, CellKind::Lstm);
    let before: Vec<u64> = model.fields.tables.iter().flat_map(|t| t.weights.iter().map(|v| v.to_bits())).collect();
    let cfg = TrainConfig {
        batch_size: 32,
        max_epochs: 2,
        freeze_embeddings: true,
        ..Default::default()
    };
    let mut v = AucValidator::new(&p.valid, 64).unwrap();
    let out = train(model.clone(), &cfg, &p.train, &mut v, &mut |_, _| Ok(())).unwrap();
    let after: Vec<u64> = out.model.fields.tables.iter().flat_map(|t| t.weights.iter().map(|v| v.to_bits())).collect();
    assert_eq!(before, after);
    assert_ne!(out.model.cells, model.cells);
}

#[test]
fn identical_runs_give_identical_losses() {
    let p = tiny_setup(300, 0.7);
    let run = || {
        let cfg = TrainConfig {
            batch_size: 40,
            max_epochs: 3,
            seed: 9,
            ..Default::default()
        };
        let mut v = AucValidator::new(&p.valid, 64).unwrap();
        let out = train(tiny_model(&p, CellKind::Lstm), &cfg, &p.train, &mut v, &mut |_, _| Ok(())).unwrap();
        out.history.iter().map(|r| (r.loss.to_bits(), r.valid_auc.to_bits())).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn returned_model_reproduces_best_auc() {
    let p = tiny_setup(400, 0.8);
    let cfg = TrainConfig {
        batch_size: 32,
        max_epochs: 4,
        ..Default::default()
    };
    let mut v = AucValidator::new(&p.valid, 64).unwrap();
    let out = train(tiny_model(&p, CellKind::Rnn), &cfg, &p.train, &mut v, &mut |_, _| Ok(())).unwrap();
    let again = Validator::<f64>::validate(&mut AucValidator::new(&p.valid, 17).unwrap(), &out.model, 0).unwrap();
    assert_eq!(again, out.best_auc);
    let best: &EpochRecord = &out.history[out.best_epoch - 1];
    assert_eq!(best.valid_auc, out.best_auc);
}

#[test]
fn single_class_validation_is_rejected() {
    let p = tiny_setup(200, 1.0);
    let clickers: Vec<EncodedSession> = p.valid.iter().filter(|s| !s.label.is_buyer()).cloned().collect();
    assert!(matches!(AucValidator::new(&clickers, 64), Err(Error::AucUndefined(_))));
}

#[test]
fn non_finite_gradient_aborts_with_location() {
    let p = tiny_setup(200, 1.0);
    let mut model = tiny_model(&p, CellKind::Gru);
    model.head_weight[0] = f64::NAN;
    let mut v = AucValidator::new(&p.valid, 64).unwrap();
    let err = train(model, &TrainConfig::default(), &p.train, &mut v, &mut |_, _| Ok(())).unwrap_err();
    match err {
        Error::NonFiniteGradient { epoch, batch, .. } => assert_eq!((epoch, batch), (1, 0)),
        other => panic!("{other}"),
    }
}

#[test]
fn planted_signal_is_learned_quickly() {
    let p = tiny_setup(1500, 1.0);
    let model = Model::<f32>::for_vocabs(ModelConfig::new(CellKind::Lstm, 2, 16), small_layout(), &p.encoder.vocabs, 1).unwrap();
    let cfg = TrainConfig {
        batch_size: 32,
        max_epochs: 5,
        learning_rate: 5e-3,
        ..Default::default()
    };
    let mut v = AucValidator::new(&p.valid, 128).unwrap();
    let out = train(model, &cfg, &p.train, &mut v, &mut |_, _| Ok(())).unwrap();
    assert!(out.best_auc >= 0.95, "{:?}", out.history);
}

/// Signal only in the first of 25+ clicks, presented oldest first: the
/// classifier must carry it across the whole sequence.
#[test]
fn scores_follow_input_order() {
    let p = tiny_setup(150, 1.0);
    let m = tiny_model(&p, CellKind::Lstm);
    let a = score_sessions(&m, &p.valid, 7).unwrap();
    let b = score_sessions(&m, &p.valid, 100).unwrap();
    assert_eq!(a.len(), p.valid.len());
    for ((x, y), s) in a.iter().zip(&b).zip(&p.valid) {
        assert_eq!(x.session_id, s.session_id);
        assert!((x.score - y.score).abs() < 1e-12);
    }
    let (sc, l): (Vec<f64>, Vec<bool>) = a.iter().map(|s| (s.score, s.label.is_buyer())).unzip();
    assert!(auc(&sc, &l).is_ok());
}
