//! In-browser playground. A tiny prompt bank is trained on synthetic
//! images when the page loads; the page then re-scores a test image as the
//! fusion and aggregation settings change, and runs class-name filtering
//! on names typed by the user.
//!
//! Build with `wasm-pack build crates/demo --target web --out-dir www/pkg`
//! and serve `crates/demo/www`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;
use zsad_core::cnf::{cnf_scores, strip_numeric, CnfConfig};
use zsad_core::data::{Image, Sample};
use zsad_core::encoder::{EncoderSpec, FrozenEncoder, SyntheticEncoder};
use zsad_core::loss::LossConfig;
use zsad_core::prompting::PromptBank;
use zsad_core::scoring::{AnomalyResult, InferenceEngine, ScoreMap, ScoringConfig};
use zsad_core::synth::{synth_sample, synthetic_samples};
use zsad_core::train::{train_items, TrainConfig, TrainingItem};
use zsad_core::Result;

pub const IMAGE_SIZE: usize = 32;
const PATCH: usize = 4;
const CLASS: &str = "pcb2";

pub fn demo_spec() -> EncoderSpec {
    EncoderSpec {
        num_vision_layers: 4,
        selected_layers: vec![2, 4],
        vision_dims: vec![24; 4],
        text_dim: 12,
        patch_size: PATCH,
        image_size: IMAGE_SIZE,
        text_seq_len: 24,
        num_text_layers: 2,
        vocab_size: 256,
        seed: 11,
    }
}

pub struct Session {
    encoder: SyntheticEncoder,
    bank: PromptBank,
    sample: Sample,
    pub final_loss: f64,
}

/// Outcome of filtering one typed class name.
#[derive(Clone, Debug, PartialEq)]
pub struct NameDecision {
    pub stripped: String,
    pub final_class: String,
    pub class_similarity: f64,
    pub generic_similarity: f64,
}

impl Session {
    /// Trains the prompt bank on a few planted-blob images.
    pub fn new(seed: u64) -> Result<Self> {
        let spec = demo_spec();
        let encoder = SyntheticEncoder::new(&spec)?;
        let class_word = strip_numeric(CLASS);
        let items = synthetic_samples(8, IMAGE_SIZE, PATCH, &class_word, seed)
            .iter()
            .map(|s| TrainingItem::new(&encoder, s))
            .collect::<Result<Vec<_>>>()?;
        let train = TrainConfig {
            learning_rate: 1e-2,
            epochs: 25,
            batch_size: 4,
            seed,
            ..TrainConfig::default()
        };
        let outcome = train_items(
            &items,
            &encoder,
            &train,
            &LossConfig::default(),
            &ScoringConfig::default(),
            "demo",
            None,
        )?;
        let final_loss = outcome.log.last().map_or(f64::NAN, |r| r.loss);
        Ok(Self {
            encoder,
            bank: outcome.checkpoint.bank,
            sample: test_sample(seed.wrapping_add(1)),
            final_loss,
        })
    }

    pub fn resample(&mut self, seed: u64) {
        self.sample = test_sample(seed);
    }

    pub fn sample(&self) -> &Sample {
        &self.sample
    }

    /// Scores the current image; class-name filtering is off here so the
    /// sliders are the only thing that changes the map.
    pub fn score(&self, scoring: ScoringConfig) -> Result<AnomalyResult> {
        let cnf = CnfConfig {
            enabled: false,
            ..CnfConfig::default()
        };
        InferenceEngine::new(&self.encoder, &self.bank, cnf, scoring)?.infer(&self.sample.image, CLASS)
    }

    pub fn filter_name(&self, name: &str, generic_term: &str) -> Result<NameDecision> {
        let stripped = strip_numeric(name);
        let global = self.encoder.encode_image(&self.sample.image)?.global_embedding;
        let scores = cnf_scores(&global, &stripped, generic_term, &self.encoder)?;
        let final_class = if scores.prefers_generic() {
            generic_term.to_string()
        } else {
            stripped.clone()
        };
        Ok(NameDecision {
            stripped,
            final_class,
            class_similarity: scores.class_similarity,
            generic_similarity: scores.generic_similarity,
        })
    }
}

fn test_sample(seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    synth_sample(&mut rng, IMAGE_SIZE, PATCH, CLASS, 0, true)
}

/// Blue to red through green and yellow; `t` in [0, 1].
pub fn heat_color(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let r = (1.5 - (4.0 * t - 3.0).abs()).clamp(0.0, 1.0);
    let g = (1.5 - (4.0 * t - 2.0).abs()).clamp(0.0, 1.0);
    let b = (1.5 - (4.0 * t - 1.0).abs()).clamp(0.0, 1.0);
    [(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8]
}

/// Image, min/max-normalized heat map and ground truth side by side, as
/// RGBA rows `3 * width` pixels wide.
pub fn render_panels(image: &Image, map: &ScoreMap, gt: &[f64]) -> Vec<u8> {
    let (h, w) = (image.height, image.width);
    let (lo, hi) = map.min_max();
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = Vec::with_capacity(h * w * 3 * 4);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let px = &image.data[i * 3..i * 3 + 3];
            out.extend(px.iter().map(|v| (v * 255.0).round() as u8));
            out.push(255);
        }
        for x in 0..w {
            out.extend(heat_color((map.values[y * w + x] - lo) / span));
            out.push(255);
        }
        for x in 0..w {
            let v = if gt[y * w + x] > 0.5 { 255 } else { 0 };
            out.extend([v, v, v, 255]);
        }
    }
    out
}

fn js(e: zsad_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo {
    session: Session,
}

#[wasm_bindgen]
pub struct Scored {
    s_det: f64,
    w: f64,
    rgba: Vec<u8>,
}

#[wasm_bindgen]
impl Scored {
    pub fn s_det(&self) -> f64 {
        self.s_det
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<Demo, JsError> {
        Ok(Demo {
            session: Session::new(seed.into()).map_err(js)?,
        })
    }

    pub fn size(&self) -> u32 {
        IMAGE_SIZE as u32
    }

    pub fn final_loss(&self) -> f64 {
        self.session.final_loss
    }

    pub fn resample(&mut self, seed: u32) {
        self.session.resample(seed.into());
    }

    pub fn score(&self, alpha: f64, sigma: f64, n1: u32, n2: u32) -> Result<Scored, JsError> {
        let cfg = ScoringConfig {
            alpha,
            sigma,
            n1: n1 as usize,
            n2: n2 as usize,
            ..ScoringConfig::default()
        };
        let r = self.session.score(cfg).map_err(js)?;
        let s = self.session.sample();
        Ok(Scored {
            s_det: r.s_det,
            w: r.w,
            rgba: render_panels(&s.image, &r.s_seg, &s.gt_map),
        })
    }

    /// Returns `[stripped, final, class similarity, generic similarity]`
    /// joined by tabs.
    pub fn filter_name(&self, name: &str, generic_term: &str) -> Result<String, JsError> {
        let d = self.session.filter_name(name, generic_term).map_err(js)?;
        Ok(format!(
            "{}\t{}\t{:.4}\t{:.4}",
            d.stripped, d.final_class, d.class_similarity, d.generic_similarity
        ))
    }
}
