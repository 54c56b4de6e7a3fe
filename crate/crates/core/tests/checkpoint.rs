mod common;

use common::*;
use intentr::model::{Checkpoint, Model, ModelConfig};
use intentr::nn::CellKind;
use intentr::synth::SynthConfig;
use intentr::trainer::{score_sessions, train, AucValidator, TrainConfig};
use intentr::transform::TransformConfig;
use intentr::vocab::FieldLayout;
use intentr::Error;

fn corpus(seed: u64) -> Prepared {
    let cfg = SynthConfig {
        n_sessions: 400,
        buyer_fraction: 0.2,
        n_items: 150,
        seed,
        ..Default::default()
    };
    prepare(synth_sessions(&cfg), 0.25, FieldLayout::with_widths([6, 3, 3, 3, 3]), TransformConfig::default())
}

#[test]
fn saved_model_scores_identically() {
    let p = corpus(1);
    let m = Model::<f32>::for_vocabs(ModelConfig::new(CellKind::Gru, 2, 8), p.encoder.layout.clone(), &p.encoder.vocabs, 3).unwrap();
    let tc = TrainConfig {
        max_epochs: 2,
        batch_size: 64,
        ..Default::default()
    };
    let mut v = AucValidator::new(&p.valid, 64).unwrap();
    let out = train(m, &tc, &p.train, &mut v, &mut |_, _| Ok(())).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    Checkpoint::new(&out.model, p.encoder.transform.clone(), &p.encoder.vocabs).save(&path).unwrap();
    let back = Checkpoint::load(&path, &p.encoder.vocabs).unwrap();
    assert_eq!(back.model, out.model);
    assert_eq!(back.transform, p.encoder.transform);
    let a = score_sessions(&out.model, &p.valid, 32).unwrap();
    let b = score_sessions(&back.model, &p.valid, 32).unwrap();
    assert!(a.iter().zip(&b).all(|(x, y)| x.score.to_bits() == y.score.to_bits()));

    let other = corpus(2);
    match Checkpoint::load(&path, &other.encoder.vocabs) {
        Err(Error::VocabMismatch { field, .. }) => assert_eq!(field, "item"),
        r => panic!("expected a vocabulary mismatch, got {r:?}"),
    }

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(Checkpoint::load_unchecked(&path), Err(Error::Format { .. })));
}
