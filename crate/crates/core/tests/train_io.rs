mod common;

use common::tiny_spec;
use zsad_core::encoder::{EncoderSpec, SyntheticEncoder};
use zsad_core::loss::LossConfig;
use zsad_core::prompting::PromptBank;
use zsad_core::scoring::ScoringConfig;
use zsad_core::synth::{synthetic_samples, write_dataset, SynthSpec};
use zsad_core::train::*;
use zsad_core::Error;

/// Parameter inventory counted from the layout rules alone.
fn expected_param_count(spec: &EncoderSpec) -> usize {
    let ct = spec.text_dim;
    let states = 2 * ct;
    let queries = 2 * ct;
    let deep = spec.num_text_layers * ct;
    let projectors: usize = spec.selected_dims().iter().map(|&c| 2 * (c * ct + ct)).sum();
    states + queries + deep + projectors
}

#[test]
fn parameter_inventory_matches_layout() {
    for spec in [tiny_spec(), EncoderSpec::default()] {
        let bank = PromptBank::init(&spec, 0).unwrap();
        assert_eq!(bank.param_count(), expected_param_count(&spec));
        let names: Vec<String> = bank.named_params().into_iter().map(|(n, _, _)| n).collect();
        assert_eq!(names.len(), 4 + 4 * spec.selected_layers.len());
        assert_eq!(&names[..4], ["normal_token", "abnormal_token", "query_tokens", "deep_text_tokens"]);
    }
}

fn items(enc: &SyntheticEncoder, n: usize) -> Vec<TrainingItem> {
    synthetic_samples(n, 8, 2, "widget", 1)
        .iter()
        .map(|s| TrainingItem::new(enc, s).unwrap())
        .collect()
}

#[test]
fn log_lines_and_header_echo_settings() {
    let enc = SyntheticEncoder::new(&tiny_spec()).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 2,
        ..Default::default()
    };
    let mut sink = Vec::new();
    let out = train_items(&items(&enc, 4), &enc, &cfg, &LossConfig::default(), &ScoringConfig::default(), "ds", Some(&mut sink)).unwrap();
    let text = String::from_utf8(sink).unwrap();
    assert!(text.lines().next().unwrap().contains("learning_rate=0.00004"));
    assert!(text.lines().next().unwrap().contains("epochs=3"));
    assert_eq!(out.log.len(), 6);
    assert!(out.log.iter().all(|r| r.loss.is_finite()));
    assert!(text.contains("step=6 epoch=3 loss="));
    assert_eq!(out.checkpoint.header.train, cfg);
    assert_eq!(out.checkpoint.header.dataset_id, "ds");
}

#[test]
fn same_seed_same_bytes() {
    let enc = SyntheticEncoder::new(&tiny_spec()).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 3,
        learning_rate: 1e-3,
        seed: 9,
        ..Default::default()
    };
    let run = || {
        let out = train_items(&items(&enc, 5), &enc, &cfg, &LossConfig::default(), &ScoringConfig::default(), "ds", None).unwrap();
        encode_checkpoint(&out.checkpoint).unwrap()
    };
    assert_eq!(run(), run());
    let other = TrainConfig { seed: 10, ..cfg };
    let out = train_items(&items(&enc, 5), &enc, &other, &LossConfig::default(), &ScoringConfig::default(), "ds", None).unwrap();
    assert_ne!(encode_checkpoint(&out.checkpoint).unwrap(), run());
}

#[test]
fn empty_training_set_rejected() {
    let enc = SyntheticEncoder::new(&tiny_spec()).unwrap();
    let err = train_items(&[], &enc, &TrainConfig::default(), &LossConfig::default(), &ScoringConfig::default(), "ds", None);
    assert!(matches!(err, Err(Error::Dataset(_))));
}

#[test]
fn non_finite_loss_aborts() {
    let enc = SyntheticEncoder::new(&tiny_spec()).unwrap();
    let mut bad = items(&enc, 1);
    bad[0].stack.layers[0].patch_grid.as_mut_slice()[0] = f64::NAN;
    let err = train_items(&bad, &enc, &TrainConfig::default(), &LossConfig::default(), &ScoringConfig::default(), "ds", None);
    match err {
        Err(Error::NonFinite(msg)) => assert!(msg.contains("step 1")),
        other => panic!("expected non-finite error, got {:?}", other.err()),
    }
}

#[test]
fn manifest_training_and_checkpoint_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let manifest = write_dataset(&data, &SynthSpec { image_size: 8, patch_size: 2, ..Default::default() }).unwrap();
    let enc = SyntheticEncoder::new(&tiny_spec()).unwrap();
    let cfg = TrainConfig { epochs: 1, ..Default::default() };
    let out = train(&manifest, &enc, &cfg, &LossConfig::default(), &ScoringConfig::default(), None).unwrap();
    assert_eq!(out.checkpoint.header.dataset_id, manifest.dataset_id().unwrap());
    let p1 = dir.path().join("a.ckpt");
    let p2 = dir.path().join("b.ckpt");
    save_checkpoint(&out.checkpoint, &p1).unwrap();
    let loaded = load_checkpoint(&p1).unwrap();
    save_checkpoint(&loaded, &p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

    let bytes = std::fs::read(&p1).unwrap();
    std::fs::write(&p2, &bytes[..bytes.len() / 2]).unwrap();
    let err = load_checkpoint(&p2).unwrap_err();
    assert!(matches!(err, Error::Checkpoint { .. }));
}
