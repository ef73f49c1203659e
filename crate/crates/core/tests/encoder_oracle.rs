mod common;

use std::collections::BTreeMap;

use common::{noise_image, small_spec, tiny_spec};
use zsad_core::encoder::{FrozenEncoder, SyntheticEncoder, TokenSequence};
use zsad_core::loss::LossConfig;
use zsad_core::scoring::ScoringConfig;
use zsad_core::synth::synthetic_samples;
use zsad_core::tensor::Mat;
use zsad_core::train::{train_items, TrainConfig, TrainingItem};

fn matvec_rows(x: &[Vec<f64>], a: &Mat) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            (0..a.cols())
                .map(|j| row.iter().enumerate().map(|(i, v)| v * a[(i, j)]).sum())
                .collect()
        })
        .collect()
}

/// Straight-line re-implementation of the synthetic text path.
fn oracle_text(
    enc: &SyntheticEncoder,
    ids: &[u32],
    eot: usize,
    soft: &BTreeMap<usize, Vec<f64>>,
    deep: Option<&Mat>,
) -> Vec<f64> {
    let w = enc.text_weights();
    let mut x: Vec<Vec<f64>> = (0..=eot)
        .map(|p| {
            let base = soft
                .get(&p)
                .cloned()
                .unwrap_or_else(|| w.token_table.row(ids[p] as usize).to_vec());
            base.iter().zip(w.positions.row(p)).map(|(a, b)| a + b).collect()
        })
        .collect();
    for (l, (a, b, c)) in w.layers.iter().enumerate() {
        if let Some(d) = deep {
            let token = d.row(l).to_vec();
            if l == 0 {
                x.insert(eot, token);
            } else {
                x[eot] = token;
            }
        }
        let n = x.len() as f64;
        let mean: Vec<f64> = (0..x[0].len())
            .map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n)
            .collect();
        let ctx = &matvec_rows(&[mean], b)[0];
        let xa = matvec_rows(&x, a);
        x = x
            .iter()
            .zip(xa)
            .map(|(row, pre)| {
                row.iter()
                    .zip(pre)
                    .enumerate()
                    .map(|(j, (r, p))| r + (p + ctx[j] + c[j]).tanh())
                    .collect()
            })
            .collect();
    }
    let out = &matvec_rows(&[x.last().unwrap().clone()], w.projection)[0];
    let n = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    out.iter().map(|v| v / n).collect()
}

#[test]
fn text_path_matches_matrix_chain_oracle() {
    let spec = small_spec();
    let enc = SyntheticEncoder::new(&spec).unwrap();
    let words = enc.tokenize("a photo of a damaged pcb object.");
    let mut seq = TokenSequence::from_words(&words, enc.special_tokens(), spec.text_seq_len).unwrap();
    seq.soft_slots.insert(1, (0..16).map(|i| 0.01 * i as f64).collect());
    seq.soft_slots.insert(5, (0..16).map(|i| -0.02 * i as f64).collect());
    let deep = Mat::from_vec(3, 16, (0..48).map(|i| ((i * 7) % 11) as f64 * 0.03).collect()).unwrap();

    for d in [None, Some(&deep)] {
        let got = enc.encode_text(&seq, d).unwrap();
        let want = oracle_text(&enc, &seq.token_ids, seq.eot_position, &seq.soft_slots, d);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
    }
}

#[test]
fn padding_never_reaches_the_output() {
    let spec = small_spec();
    let enc = SyntheticEncoder::new(&spec).unwrap();
    let words = enc.tokenize("a photo of a good bottle.");
    let seq = TokenSequence::from_words(&words, enc.special_tokens(), spec.text_seq_len).unwrap();
    let mut other = seq.clone();
    for id in other.token_ids.iter_mut().skip(seq.eot_position + 1) {
        *id = 100;
    }
    assert_eq!(enc.encode_text(&seq, None).unwrap(), enc.encode_text(&other, None).unwrap());
}

#[test]
fn selected_layers_and_grid() {
    let spec = tiny_spec();
    let enc = SyntheticEncoder::new(&spec).unwrap();
    let stack = enc.encode_image(&noise_image(8, 1)).unwrap();
    assert_eq!(stack.grid_side, 4);
    let layers: Vec<usize> = stack.layers.iter().map(|l| l.layer).collect();
    assert_eq!(layers, vec![1, 3]);
    assert_eq!(stack.layers[0].patch_grid.shape(), (16, 6));
    assert_eq!(stack.layers[1].patch_grid.shape(), (16, 6));
}

#[test]
fn training_leaves_encoder_weights_untouched() {
    let spec = tiny_spec();
    let enc = SyntheticEncoder::new(&spec).unwrap();
    let before = enc.weights_digest();
    let items: Vec<TrainingItem> = synthetic_samples(2, 8, 2, "widget", 0)
        .iter()
        .map(|s| TrainingItem::new(&enc, s).unwrap())
        .collect();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 2,
        learning_rate: 1e-2,
        ..Default::default()
    };
    train_items(&items, &enc, &cfg, &LossConfig::default(), &ScoringConfig::default(), "t", None).unwrap();
    assert_eq!(enc.weights_digest(), before);
    assert_eq!(SyntheticEncoder::new(&spec).unwrap().weights_digest(), before);
}
