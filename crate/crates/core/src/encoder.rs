//! Frozen vision and text encoders.
//!
//! [`FrozenEncoder`] is the contract every backbone satisfies. The crate
//! ships [`SyntheticEncoder`], a seeded stand-in with the same interface
//! as a real vision-language model, and an [`AdapterRegistry`] through
//! which external backbones loaded from weight files can be plugged in.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::Image;
use crate::error::{Error, Result};
use crate::tensor::{normalize, Mat};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub num_vision_layers: usize,
    /// 1-based, strictly increasing.
    pub selected_layers: Vec<usize>,
    /// Output width of every vision layer, `num_vision_layers` entries.
    pub vision_dims: Vec<usize>,
    pub text_dim: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub text_seq_len: usize,
    pub num_text_layers: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            num_vision_layers: 24,
            selected_layers: vec![6, 12, 18, 24],
            vision_dims: vec![64; 24],
            text_dim: 64,
            patch_size: 14,
            image_size: 518,
            text_seq_len: 77,
            num_text_layers: 12,
            vocab_size: 4096,
            seed: 0,
        }
    }
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_vision_layers == 0 {
            return bad("num_vision_layers must be positive".into());
        }
        if self.selected_layers.is_empty() {
            return bad("selected_layers must not be empty".into());
        }
        if self.selected_layers.windows(2).any(|w| w[0] >= w[1]) {
            return bad("selected_layers must be strictly increasing".into());
        }
        if self.selected_layers[0] < 1 || *self.selected_layers.last().unwrap() > self.num_vision_layers
        {
            return bad(format!(
                "selected_layers must lie in [1, {}]",
                self.num_vision_layers
            ));
        }
        if self.vision_dims.len() != self.num_vision_layers {
            return bad(format!(
                "vision_dims has {} entries for {} layers",
                self.vision_dims.len(),
                self.num_vision_layers
            ));
        }
        if self.vision_dims.contains(&0)
            || self.text_dim == 0
            || self.patch_size == 0
            || self.image_size == 0
            || self.num_text_layers == 0
        {
            return bad("all dimensions must be positive".into());
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.text_seq_len < 3 {
            return bad("text_seq_len must leave room for start and end tokens".into());
        }
        if self.vocab_size <= SpecialTokens::COUNT as usize {
            return bad("vocab_size too small".into());
        }
        Ok(())
    }

    /// Patch grid side `H = W = image_size / patch_size`.
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Width of selected layer number `layer` (1-based).
    pub fn dim_of_layer(&self, layer: usize) -> usize {
        self.vision_dims[layer - 1]
    }

    pub fn selected_dims(&self) -> Vec<usize> {
        self.selected_layers
            .iter()
            .map(|&l| self.dim_of_layer(l))
            .collect()
    }
}

/// Frozen features of one selected vision layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerFeatures {
    pub layer: usize,
    pub class_token: Vec<f64>,
    /// `(H·W) × C_i`, row-major over the patch grid.
    pub patch_grid: Mat,
}

impl LayerFeatures {
    /// All `1 + H·W` token rows, class token first.
    pub fn with_class_token(&self) -> Mat {
        let c = self.patch_grid.cols();
        let mut data = Vec::with_capacity((self.patch_grid.rows() + 1) * c);
        data.extend_from_slice(&self.class_token);
        data.extend_from_slice(self.patch_grid.as_slice());
        Mat::from_vec(self.patch_grid.rows() + 1, c, data).expect("consistent widths")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchFeatureStack {
    pub grid_side: usize,
    pub layers: Vec<LayerFeatures>,
    /// Global image embedding in text space (unit norm), used by class-name
    /// filtering.
    pub global_embedding: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpecialTokens {
    pub start: u32,
    pub end: u32,
    pub pad: u32,
}

impl SpecialTokens {
    pub const COUNT: u32 = 3;
}

/// Token ids padded to the encoder's sequence length, plus learnable
/// embeddings overriding individual positions.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub token_ids: Vec<u32>,
    pub soft_slots: BTreeMap<usize, Vec<f64>>,
    pub eot_position: usize,
}

impl TokenSequence {
    /// `[start] words.. [end] [pad]..`
    pub fn from_words(
        words: &[u32],
        special: SpecialTokens,
        seq_len: usize,
    ) -> Result<TokenSequence> {
        let used = words.len() + 2;
        if used > seq_len {
            return Err(Error::Encoder(format!(
                "sequence of {used} tokens exceeds the text length limit of {seq_len}"
            )));
        }
        let mut token_ids = Vec::with_capacity(seq_len);
        token_ids.push(special.start);
        token_ids.extend_from_slice(words);
        token_ids.push(special.end);
        token_ids.resize(seq_len, special.pad);
        Ok(TokenSequence {
            token_ids,
            soft_slots: BTreeMap::new(),
            eot_position: used - 1,
        })
    }
}

/// A frozen vision-language backbone.
pub trait FrozenEncoder: Send + Sync {
    fn spec(&self) -> &EncoderSpec;

    fn special_tokens(&self) -> SpecialTokens;

    /// Word-piece ids for `text`, without start/end markers.
    fn tokenize(&self, text: &str) -> Vec<u32>;

    fn encode_image(&self, image: &Image) -> Result<PatchFeatureStack>;

    /// Differentiable text path. `soft` overrides the embedding at the given
    /// positions with `1 × C_T` rows; `deep`, when present, is a
    /// `num_text_layers × C_T` matrix whose row `l` is inserted before the
    /// end token at the input of layer `l`. Returns a unit-norm `1 × C_T`.
    fn encode_text_graph(
        &self,
        tape: &mut Tape,
        token_ids: &[u32],
        eot_position: usize,
        soft: &[(usize, Var)],
        deep: Option<Var>,
    ) -> Result<Var>;

    fn encode_text(&self, seq: &TokenSequence, deep: Option<&Mat>) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let soft: Vec<(usize, Var)> = seq
            .soft_slots
            .iter()
            .map(|(&pos, v)| (pos, tape.constant(Mat::row_vector(v.clone()))))
            .collect();
        let deep = deep.map(|d| tape.constant(d.clone()));
        let out =
            self.encode_text_graph(&mut tape, &seq.token_ids, seq.eot_position, &soft, deep)?;
        Ok(tape.value(out).as_slice().to_vec())
    }

    /// Frozen (untuned) embedding of a plain sentence.
    fn embed_sentence(&self, text: &str) -> Result<Vec<f64>> {
        let words = self.tokenize(text);
        let seq = TokenSequence::from_words(&words, self.special_tokens(), self.spec().text_seq_len)?;
        self.encode_text(&seq, None)
    }
}

/// Lowercased word tokenizer hashing words into a fixed vocabulary.
#[derive(Clone, Debug)]
pub struct WordTokenizer {
    vocab_size: u32,
}

impl WordTokenizer {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size: vocab_size as u32,
        }
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        let mut word = String::new();
        let flush = |word: &mut String, out: &mut Vec<u32>| {
            if !word.is_empty() {
                out.push(self.id_of(word));
                word.clear();
            }
        };
        for ch in text.chars() {
            if ch.is_alphanumeric() {
                word.extend(ch.to_lowercase());
            } else {
                flush(&mut word, &mut out);
                if !ch.is_whitespace() {
                    out.push(self.id_of(&ch.to_string()));
                }
            }
        }
        flush(&mut word, &mut out);
        out
    }

    fn id_of(&self, word: &str) -> u32 {
        let span = (self.vocab_size - SpecialTokens::COUNT) as u64;
        SpecialTokens::COUNT + (fnv1a(word.as_bytes()) % span) as u32
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Clone, Debug)]
struct MixLayer {
    /// `C_in × C_out`
    token: Mat,
    /// `C_in × C_out`, applied to the mean token.
    context: Mat,
    bias: Vec<f64>,
}

impl MixLayer {
    fn random(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize) -> Self {
        let s = 1.0 / (c_in as f64).sqrt();
        Self {
            token: gaussian(rng, c_in, c_out, s),
            context: gaussian(rng, c_in, c_out, 0.5 * s),
            bias: gaussian(rng, 1, c_out, 0.1).into_vec(),
        }
    }

    fn residual(&self) -> bool {
        self.token.rows() == self.token.cols()
    }

    /// `x + tanh(x A + 1·mean(x) B + 1·c)`; the residual is dropped when the
    /// width changes.
    fn forward(&self, x: &Mat) -> Mat {
        let mixed = x.mean_rows().matmul(&self.context).expect("shape");
        let pre = x
            .matmul(&self.token)
            .expect("shape")
            .add_row_broadcast(mixed.as_slice())
            .expect("shape")
            .add_row_broadcast(&self.bias)
            .expect("shape");
        let act = pre.map(f64::tanh);
        if self.residual() {
            x.add(&act).expect("shape")
        } else {
            act
        }
    }

    fn forward_graph(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let a = tape.constant(self.token.clone());
        let b = tape.constant(self.context.clone());
        let c = tape.constant(Mat::row_vector(self.bias.clone()));
        let m = tape.mean_rows(x);
        let mb = tape.matmul(m, b)?;
        let xa = tape.matmul(x, a)?;
        let pre = tape.add_row(xa, mb)?;
        let pre = tape.add_row(pre, c)?;
        let act = tape.tanh(pre);
        if self.residual() {
            tape.add(x, act)
        } else {
            Ok(act)
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Mat {
    let dist = Normal::new(0.0, std).expect("finite std");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Mat::from_vec(rows, cols, data).expect("shape")
}

/// Seeded stand-in backbone.
///
/// All weights are drawn from a ChaCha8 stream seeded with `spec.seed`, in
/// this order, each entry i.i.d. zero-mean Gaussian:
///
/// 1. patch embedding `3p² × C_1` (std `1/√(3p²)`), class embedding `C_1`
///    (std 1), position table `(1+H·W) × C_1` (std 0.1);
/// 2. per vision layer `l`: token map `C_{l-1} × C_l` (std `1/√C_{l-1}`),
///    context map (half that std), bias (std 0.1), with `C_0 = C_1`;
/// 3. image projection `C_L × C_T` (std `1/√C_L`);
/// 4. token table `vocab × C_T` and position table `N_L × C_T`
///    (std `1/√C_T` and `0.1/√C_T`);
/// 5. per text layer: token map, context map, bias as above on `C_T`;
/// 6. text projection `C_T × C_T` (std `1/√C_T`).
///
/// Both paths apply `x ← x + tanh(x A + mean(x) B + c)` per layer; the text
/// path has no causal mask and pools the end-token row.
#[derive(Clone, Debug)]
pub struct SyntheticEncoder {
    spec: EncoderSpec,
    tokenizer: WordTokenizer,
    patch_embed: Mat,
    class_embed: Vec<f64>,
    vision_pos: Mat,
    vision_layers: Vec<MixLayer>,
    image_projection: Mat,
    token_table: Mat,
    text_pos: Mat,
    text_layers: Vec<MixLayer>,
    text_projection: Mat,
}

impl SyntheticEncoder {
    pub fn new(spec: &EncoderSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let p = spec.patch_size;
        let patch_len = 3 * p * p;
        let c1 = spec.vision_dims[0];
        let ct = spec.text_dim;

        let patch_embed = gaussian(&mut rng, patch_len, c1, 1.0 / (patch_len as f64).sqrt());
        let class_embed = gaussian(&mut rng, 1, c1, 1.0).into_vec();
        let vision_pos = gaussian(&mut rng, spec.num_patches() + 1, c1, 0.1);
        let mut vision_layers = Vec::with_capacity(spec.num_vision_layers);
        let mut c_in = c1;
        for &c_out in &spec.vision_dims {
            vision_layers.push(MixLayer::random(&mut rng, c_in, c_out));
            c_in = c_out;
        }
        let image_projection = gaussian(&mut rng, c_in, ct, 1.0 / (c_in as f64).sqrt());

        let s = 1.0 / (ct as f64).sqrt();
        let token_table = gaussian(&mut rng, spec.vocab_size, ct, s);
        let text_pos = gaussian(&mut rng, spec.text_seq_len, ct, 0.1 * s);
        let text_layers = (0..spec.num_text_layers)
            .map(|_| MixLayer::random(&mut rng, ct, ct))
            .collect();
        let text_projection = gaussian(&mut rng, ct, ct, s);

        Ok(Self {
            spec: spec.clone(),
            tokenizer: WordTokenizer::new(spec.vocab_size),
            patch_embed,
            class_embed,
            vision_pos,
            vision_layers,
            image_projection,
            token_table,
            text_pos,
            text_layers,
            text_projection,
        })
    }

    /// Fingerprint of every weight, for checking the frozen contract.
    pub fn weights_digest(&self) -> u64 {
        let mut bytes = Vec::new();
        let mut put = |m: &[f64]| {
            for v in m {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        };
        put(self.patch_embed.as_slice());
        put(&self.class_embed);
        put(self.vision_pos.as_slice());
        for l in self.vision_layers.iter().chain(&self.text_layers) {
            put(l.token.as_slice());
            put(l.context.as_slice());
            put(&l.bias);
        }
        put(self.image_projection.as_slice());
        put(self.token_table.as_slice());
        put(self.text_pos.as_slice());
        put(self.text_projection.as_slice());
        fnv1a(&bytes)
    }

    /// Patch vectors `(H·W) × 3p²`, row-major over the grid, each patch
    /// flattened as `(y, x, channel)`.
    pub fn patchify(&self, image: &Image) -> Mat {
        let p = self.spec.patch_size;
        let side = self.spec.grid_side();
        let w = image.width;
        let mut out = Mat::zeros(side * side, 3 * p * p);
        for gy in 0..side {
            for gx in 0..side {
                let row = out.row_mut(gy * side + gx);
                let mut k = 0;
                for y in 0..p {
                    let base = ((gy * p + y) * w + gx * p) * 3;
                    row[k..k + 3 * p].copy_from_slice(&image.data[base..base + 3 * p]);
                    k += 3 * p;
                }
            }
        }
        out
    }

    /// Weights exposed for independent re-implementation in tests.
    pub fn text_weights(&self) -> SyntheticTextWeights<'_> {
        SyntheticTextWeights {
            token_table: &self.token_table,
            positions: &self.text_pos,
            layers: self
                .text_layers
                .iter()
                .map(|l| (&l.token, &l.context, l.bias.as_slice()))
                .collect(),
            projection: &self.text_projection,
        }
    }
}

pub struct SyntheticTextWeights<'a> {
    pub token_table: &'a Mat,
    pub positions: &'a Mat,
    /// `(token map, context map, bias)` per layer.
    pub layers: Vec<(&'a Mat, &'a Mat, &'a [f64])>,
    pub projection: &'a Mat,
}

impl FrozenEncoder for SyntheticEncoder {
    fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn special_tokens(&self) -> SpecialTokens {
        SpecialTokens {
            start: 0,
            end: 1,
            pad: 2,
        }
    }

    fn tokenize(&self, text: &str) -> Vec<u32> {
        self.tokenizer.tokenize(text)
    }

    fn encode_image(&self, image: &Image) -> Result<PatchFeatureStack> {
        let size = self.spec.image_size;
        if image.height != size || image.width != size || image.data.len() != size * size * 3 {
            return Err(Error::Shape(format!(
                "encoder expects a {size}x{size}x3 image, got {}x{}",
                image.height, image.width
            )));
        }
        let patches = self.patchify(image).matmul(&self.patch_embed)?;
        let c1 = patches.cols();
        let mut tokens = Vec::with_capacity((patches.rows() + 1) * c1);
        tokens.extend_from_slice(&self.class_embed);
        tokens.extend_from_slice(patches.as_slice());
        let mut x = Mat::from_vec(patches.rows() + 1, c1, tokens)?.add(&self.vision_pos)?;

        let mut layers = Vec::with_capacity(self.spec.selected_layers.len());
        for (idx, layer) in self.vision_layers.iter().enumerate() {
            x = layer.forward(&x);
            let number = idx + 1;
            if self.spec.selected_layers.contains(&number) {
                layers.push(LayerFeatures {
                    layer: number,
                    class_token: x.row(0).to_vec(),
                    patch_grid: x.slice_rows(1, x.rows()),
                });
            }
        }
        let global = Mat::row_vector(x.row(0).to_vec()).matmul(&self.image_projection)?;
        Ok(PatchFeatureStack {
            grid_side: self.spec.grid_side(),
            layers,
            global_embedding: normalize(global.as_slice()),
        })
    }

    fn encode_text_graph(
        &self,
        tape: &mut Tape,
        token_ids: &[u32],
        eot_position: usize,
        soft: &[(usize, Var)],
        deep: Option<Var>,
    ) -> Result<Var> {
        let n_l = self.spec.text_seq_len;
        if token_ids.len() > n_l {
            return Err(Error::Encoder(format!(
                "sequence of {} tokens exceeds the text length limit of {n_l}",
                token_ids.len()
            )));
        }
        if eot_position >= token_ids.len() {
            return Err(Error::Encoder(format!(
                "end position {eot_position} outside a sequence of {}",
                token_ids.len()
            )));
        }
        if let Some(&(pos, _)) = soft.iter().find(|(pos, _)| *pos > eot_position) {
            return Err(Error::Encoder(format!(
                "soft slot at {pos} lies after the end token at {eot_position}"
            )));
        }
        let ct = self.spec.text_dim;
        if let Some(d) = deep {
            let shape = tape.value(d).shape();
            if shape != (self.spec.num_text_layers, ct) {
                return Err(Error::Shape(format!(
                    "deep tokens {shape:?}, expected ({}, {ct})",
                    self.spec.num_text_layers
                )));
            }
        }

        // Token rows up to and including the end token; positions after it
        // never influence the pooled output.
        let mut parts = Vec::new();
        let mut run: Vec<f64> = Vec::new();
        let mut run_rows = 0;
        for (pos, &id) in token_ids.iter().enumerate().take(eot_position + 1) {
            if let Some(&(_, v)) = soft.iter().find(|(p, _)| *p == pos) {
                if tape.value(v).shape() != (1, ct) {
                    return Err(Error::Shape(format!(
                        "soft slot at {pos} must be 1x{ct}"
                    )));
                }
                if run_rows > 0 {
                    parts.push(tape.constant(Mat::from_vec(run_rows, ct, std::mem::take(&mut run))?));
                    run_rows = 0;
                }
                parts.push(v);
            } else {
                let id = id as usize;
                if id >= self.spec.vocab_size {
                    return Err(Error::Encoder(format!("token id {id} out of vocabulary")));
                }
                run.extend_from_slice(self.token_table.row(id));
                run_rows += 1;
            }
        }
        if run_rows > 0 {
            parts.push(tape.constant(Mat::from_vec(run_rows, ct, run)?));
        }
        let x = tape.concat_rows(&parts)?;
        let pos = tape.constant(self.text_pos.slice_rows(0, eot_position + 1));
        let x = tape.add(x, pos)?;

        let e = eot_position;
        let mut h = x;
        for (l, layer) in self.text_layers.iter().enumerate() {
            if let Some(d) = deep {
                let token = tape.slice_rows(d, l, l + 1)?;
                // Layer 0 inserts the token before the end row; later layers
                // overwrite the previous layer's inserted row.
                let (head, tail) = if l == 0 { (e, e) } else { (e, e + 1) };
                let before = tape.slice_rows(h, 0, head)?;
                let end_row = tape.slice_rows(h, tail, tail + 1)?;
                h = tape.concat_rows(&[before, token, end_row])?;
            }
            h = layer.forward_graph(tape, h)?;
        }
        let rows = tape.value(h).rows();
        let pooled = tape.slice_rows(h, rows - 1, rows)?;
        let proj = tape.constant(self.text_projection.clone());
        let out = tape.matmul(pooled, proj)?;
        Ok(tape.normalize_rows(out))
    }
}

/// Constructor for an external backbone: spec plus weight-file path.
pub type AdapterFn = fn(&EncoderSpec, Option<&Path>) -> Result<Box<dyn FrozenEncoder>>;

/// Named encoder constructors. `"synthetic"` is always registered.
#[derive(Clone)]
pub struct AdapterRegistry {
    entries: BTreeMap<String, AdapterFn>,
}

fn synthetic_adapter(spec: &EncoderSpec, _weights: Option<&Path>) -> Result<Box<dyn FrozenEncoder>> {
    Ok(Box::new(SyntheticEncoder::new(spec)?))
}

impl Default for AdapterRegistry {
    fn default() -> Self {
        let mut entries = BTreeMap::new();
        entries.insert("synthetic".to_string(), synthetic_adapter as AdapterFn);
        Self { entries }
    }
}

impl AdapterRegistry {
    pub fn register(&mut self, name: &str, adapter: AdapterFn) {
        self.entries.insert(name.to_string(), adapter);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn load(
        &self,
        name: &str,
        spec: &EncoderSpec,
        weights: Option<&Path>,
    ) -> Result<Box<dyn FrozenEncoder>> {
        let adapter = self.entries.get(name).ok_or_else(|| {
            Error::Encoder(format!(
                "no encoder adapter named {name:?} (available: {})",
                self.names().collect::<Vec<_>>().join(", ")
            ))
        })?;
        spec.validate()?;
        adapter(spec, weights)
    }
}

/// Convenience for the built-in synthetic backbone.
pub fn make_synthetic_encoder(spec: &EncoderSpec) -> Result<SyntheticEncoder> {
    SyntheticEncoder::new(spec)
}
