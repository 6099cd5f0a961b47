//! Frozen reference outputs: a fixed-seed model's logits on a fixed
//! input, and the default-weights batch loss on a fixed batch. Values
//! were produced by this implementation at v1 and pinned; regenerate
//! with `cargo test --test golden -- --ignored regenerate` after an
//! intentional numeric change.

use std::fs;
use std::path::PathBuf;

use sage::data::synth_blobs;
use sage::model::{Model, ModelConfig};
use sage::routing::Mode;
use sage::tensor::Tape;
use sage::train::{batch_assignment_fractions, total_loss, LossWeights};

fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data")
}

fn golden_model() -> Model {
    Model::build(ModelConfig::default()).unwrap()
}

fn golden_logits() -> Vec<f64> {
    let model = golden_model();
    let input = synth_blobs(1, 32, 32, 99).unwrap();
    let pred = model.predict(&input.samples[0].image).unwrap();
    pred.logits.values
}

fn golden_batch_loss() -> f64 {
    let model = golden_model();
    let batch = synth_blobs(4, 32, 32, 7).unwrap();
    let mut tapes_passes = Vec::new();
    for s in &batch.samples {
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &s.image, Mode::Eval, None, None).unwrap();
        tapes_passes.push((tape, pass));
    }
    let refs: Vec<_> = tapes_passes.iter().map(|(_, p)| p).collect();
    let f = batch_assignment_fractions(&refs, model.pool.size(), model.config.top_k);
    let mut total = 0.0;
    for (i, (tape, pass)) in tapes_passes.iter_mut().enumerate() {
        let loss = total_loss(tape, pass, &batch.samples[i].mask, &LossWeights::default(), &f)
            .unwrap();
        total += tape.scalar_value(loss.total);
    }
    total / batch.samples.len() as f64
}

#[test]
fn logits_match_frozen_reference() {
    let path = data_dir().join("golden_logits.csv");
    let text = fs::read_to_string(&path).expect("golden_logits.csv present");
    let expected: Vec<f64> = text.lines().map(|l| l.parse().unwrap()).collect();
    let got = golden_logits();
    assert_eq!(expected.len(), got.len());
    for (i, (e, g)) in expected.iter().zip(&got).enumerate() {
        assert_eq!(e.to_bits(), g.to_bits(), "logit {i}: {e} vs {g}");
    }
}

#[test]
fn batch_loss_matches_frozen_reference() {
    let path = data_dir().join("golden_loss.txt");
    let text = fs::read_to_string(&path).expect("golden_loss.txt present");
    let expected: f64 = text.trim().parse().unwrap();
    let got = golden_batch_loss();
    assert!(
        (expected - got).abs() < 1e-9,
        "batch loss {got} vs frozen {expected}"
    );
}

#[test]
#[ignore = "writes new golden files; run explicitly after intentional changes"]
fn regenerate() {
    fs::create_dir_all(data_dir()).unwrap();
    let logits = golden_logits();
    let mut text = String::new();
    for v in logits {
        text.push_str(&format!("{v}\n"));
    }
    fs::write(data_dir().join("golden_logits.csv"), text).unwrap();
    fs::write(data_dir().join("golden_loss.txt"), format!("{}\n", golden_batch_loss())).unwrap();
}
