mod common;

use common::{noise_image, small_spec, RiggedEncoder};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zsad_core::cnf::CnfConfig;
use zsad_core::data::resize_mask;
use zsad_core::encoder::{FrozenEncoder, SyntheticEncoder};
use zsad_core::prompting::{
    assemble_prompt, embed_prompt_pair, fuse_query, make_mvp, PromptBank, PromptTemplate, QuerySource,
    TextEmbeddingPair,
};
use zsad_core::scoring::*;
use zsad_core::tensor::Mat;

fn no_cnf() -> CnfConfig {
    CnfConfig {
        enabled: false,
        ..Default::default()
    }
}

#[test]
fn two_by_two_softmax_oracle() {
    let feats = Mat::from_vec(4, 3, vec![1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 1.0, 1.0, 0.0, -1.0, 0.5, 2.0]).unwrap();
    let s = 1.0 / 2f64.sqrt();
    let pair = TextEmbeddingPair {
        normal: vec![1.0, 0.0, 0.0],
        abnormal: vec![s, s, 0.0],
    };
    let t = 3.0;
    let map = score_map(&feats, (2, 2), &pair, (2, 2), t).unwrap();
    for r in 0..4 {
        let f = feats.row(r);
        let n = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        let cn = f.iter().zip(&pair.normal).map(|(a, b)| a * b).sum::<f64>() / n;
        let ca = f.iter().zip(&pair.abnormal).map(|(a, b)| a * b).sum::<f64>() / n;
        let want = (t * ca).exp() / ((t * ca).exp() + (t * cn).exp());
        assert!((map.values[r] - want).abs() < 1e-12);
    }
}

#[test]
fn checkerboard_mask_nearest_oracle() {
    // 4x4 checkerboard of 2x2 cells, upsampled x2: every source pixel
    // becomes a 2x2 block.
    let src: Vec<f64> = (0..16).map(|i| (((i / 4) / 2 + (i % 4) / 2) % 2) as f64).collect();
    let out = resize_mask(&src, 4, 4, 8);
    for y in 0..8 {
        for x in 0..8 {
            assert_eq!(out[y * 8 + x], src[(y / 2) * 4 + x / 2]);
        }
    }
}

fn reflect_oracle(i: isize, n: isize) -> usize {
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Dense 2-D convolution with an explicitly built 2-D kernel.
fn dense_smooth(map: &ScoreMap, sigma: f64) -> Vec<f64> {
    let r = (4.0 * sigma).ceil() as isize;
    let mut k2 = Vec::new();
    let mut total = 0.0;
    for dy in -r..=r {
        for dx in -r..=r {
            let v = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
            k2.push((dy, dx, v));
            total += v;
        }
    }
    let (h, w) = map.dims();
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            out[(y * w as isize + x) as usize] = k2
                .iter()
                .map(|&(dy, dx, v)| {
                    v / total
                        * map.values[reflect_oracle(y + dy, h as isize) * w + reflect_oracle(x + dx, w as isize)]
                })
                .sum();
        }
    }
    out
}

#[test]
fn gaussian_matches_dense_convolution() {
    let mut impulse = ScoreMap::constant(21, 17, 0.0);
    impulse.values[10 * 17 + 3] = 1.0;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let random = ScoreMap::new(9, 13, (0..117).map(|_| rng.random::<f64>()).collect()).unwrap();
    for (map, sigma) in [(&impulse, 1.5), (&impulse, 4.0), (&random, 0.8), (&random, 9.0)] {
        let got = gaussian_smooth(map, sigma);
        for (g, w) in got.values.iter().zip(dense_smooth(map, sigma)) {
            assert!((g - w).abs() < 1e-12, "sigma {sigma}: {g} vs {w}");
        }
    }
}

#[test]
fn smoothing_preserves_mass_of_constant_map() {
    let m = ScoreMap::constant(11, 11, 0.3);
    assert!(gaussian_smooth(&m, 9.0).values.iter().all(|v| (v - 0.3).abs() < 1e-12));
}

fn image_score_oracle(values: &[f64], n1: usize, n2: usize) -> (f64, f64) {
    let mut v = values.to_vec();
    v.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let n2 = n2.min(v.len());
    let n1 = n1.min(n2);
    let m = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let e1 = m(&v[..n1].iter().map(|x| x.exp()).collect::<Vec<_>>());
    let e2 = m(&v[..n2].iter().map(|x| x.exp()).collect::<Vec<_>>());
    let w = e1 / e2;
    (w * m(&v[..n1]), w)
}

#[test]
fn image_score_matches_full_sort_on_1000_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let h = rng.random_range(1..40);
        let w = rng.random_range(1..40);
        let values: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.0..8.0)).collect();
        let n1 = rng.random_range(1..200);
        let n2 = rng.random_range(n1 + 1..n1 + 400);
        let map = ScoreMap::new(h, w, values.clone()).unwrap();
        let (s, wt) = image_score(&map, n1, n2).unwrap();
        let (so, wo) = image_score_oracle(&values, n1, n2);
        assert!((s - so).abs() < 1e-9 * so.abs().max(1.0), "{s} vs {so}");
        assert!((wt - wo).abs() < 1e-9);
    }
}

#[test]
fn top_n_equals_sorted_prefix() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let v: Vec<f64> = (0..rng.random_range(1..300)).map(|_| rng.random::<f64>()).collect();
        let n = rng.random_range(1..400);
        let mut sorted = v.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        sorted.truncate(n);
        assert_eq!(top_n(&v, n), sorted);
    }
}

fn compose_by_hand(
    enc: &dyn FrozenEncoder,
    bank: &PromptBank,
    image: &zsad_core::data::Image,
    class: &str,
    cfg: &ScoringConfig,
) -> (ScoreMap, f64) {
    let stack = enc.encode_image(image).unwrap();
    let template = PromptTemplate::default();
    let q = assemble_prompt(enc, &template, "object", bank, QuerySource::QueryOnly).unwrap();
    let qpair = embed_prompt_pair(&q, bank, enc).unwrap();
    let grid = (stack.grid_side, stack.grid_side);
    let target = (image.height, image.width);
    let mut vmaps = Vec::new();
    let mut qmaps = Vec::new();
    for (i, l) in stack.layers.iter().enumerate() {
        let p = project_patches(&l.patch_grid, &bank.patch_projectors[i]).unwrap();
        let vp = make_mvp(&l.with_class_token(), &bank.vision_projectors[i]).unwrap();
        let vq = fuse_query(&bank.query_tokens, &vp).unwrap();
        let seqs = assemble_prompt(enc, &template, class, bank, QuerySource::VisionEnhanced(&vq)).unwrap();
        let pair = embed_prompt_pair(&seqs, bank, enc).unwrap();
        vmaps.push(score_map(&p, grid, &pair, target, cfg.temperature).unwrap());
        qmaps.push(score_map(&p, grid, &qpair, target, cfg.temperature).unwrap());
    }
    let seg = fuse_maps(&vmaps, &qmaps, cfg).unwrap();
    let (s, _) = image_score(&seg, cfg.n1, cfg.n2).unwrap();
    (seg, s)
}

#[test]
fn inference_equals_manual_composition() {
    let spec = small_spec();
    let enc = SyntheticEncoder::new(&spec).unwrap();
    let bank = PromptBank::init(&spec, 3).unwrap();
    let cfg = ScoringConfig {
        sigma: 1.0,
        n1: 50,
        n2: 200,
        ..Default::default()
    };
    let image = noise_image(32, 4);
    let got = infer(&image, "pcb2", &bank, &enc, &no_cnf(), &cfg).unwrap();
    let (seg, s) = compose_by_hand(&enc, &bank, &image, "pcb", &cfg);
    assert_eq!(got.class_word, "pcb");
    assert_eq!(got.s_seg, seg);
    assert_eq!(got.s_det, s);
}

#[test]
fn branch_isolation() {
    let spec = small_spec();
    let enc = SyntheticEncoder::new(&spec).unwrap();
    let bank = PromptBank::init(&spec, 1).unwrap();
    let image = noise_image(32, 9);
    for alpha in [0.0, 1.0] {
        let cfg = ScoringConfig {
            alpha,
            sigma: 0.0,
            ..Default::default()
        };
        let engine = InferenceEngine::new(&enc, &bank, no_cnf(), cfg).unwrap().keep_layer_maps(true);
        let r = engine.infer(&image, "widget").unwrap();
        let layers = r.per_layer_maps.unwrap();
        let mut want = vec![0.0; 32 * 32];
        for l in &layers {
            let m = if alpha == 1.0 { &l.vision } else { &l.query };
            want.iter_mut().zip(&m.values).for_each(|(a, b)| *a += b);
        }
        for (g, w) in r.s_seg.values.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }
}

#[test]
fn query_only_embedding_is_computed_once() {
    let spec = small_spec();
    let enc = RiggedEncoder::new(&spec);
    let bank = PromptBank::init(&spec, 0).unwrap();
    let engine = InferenceEngine::new(&enc, &bank, no_cnf(), ScoringConfig::default()).unwrap();
    assert_eq!(enc.calls(), 2);
    for k in 0..3 {
        engine.infer(&noise_image(32, k), "widget").unwrap();
    }
    // Two vision-enhanced prompts per selected layer per image.
    assert_eq!(enc.calls(), 2 + 3 * 2 * spec.selected_layers.len());
}

#[test]
fn cnf_changes_only_the_vision_branch_word() {
    let spec = small_spec();
    let mut enc = RiggedEncoder::new(&spec);
    let e = vec![1.0; 16];
    enc.sentences.push(("an object".into(), e.clone()));
    enc.global = Some(e);
    let bank = PromptBank::init(&spec, 0).unwrap();
    let r = infer(&noise_image(32, 1), "pipe_fryum", &bank, &enc, &CnfConfig::default(), &ScoringConfig::default())
        .unwrap();
    assert_eq!(r.class_word, "object");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn s_det_permutation_invariant(values in prop::collection::vec(0.0f64..4.0, 4..300), seed in 0u64..1000) {
        let n = values.len();
        let mut shuffled = values.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..n).rev() {
            shuffled.swap(i, rng.random_range(0..=i));
        }
        let a = image_score(&ScoreMap::new(1, n, values).unwrap(), 3, 50).unwrap();
        let b = image_score(&ScoreMap::new(n, 1, shuffled).unwrap(), 3, 50).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn constant_maps_score_their_value(c in 0.0f64..4.0, h in 1usize..60, w in 1usize..60) {
        let (s, wt) = image_score(&ScoreMap::constant(h, w, c), 500, 2500).unwrap();
        prop_assert_eq!(wt, 1.0);
        prop_assert_eq!(s, c);
    }

    #[test]
    fn sigma_zero_is_identity(values in prop::collection::vec(-3.0f64..3.0, 12)) {
        let m = ScoreMap::new(3, 4, values).unwrap();
        prop_assert_eq!(gaussian_smooth(&m, 0.0), m);
    }
}
