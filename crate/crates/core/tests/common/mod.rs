#![allow(dead_code)]

use std::sync::atomic::{AtomicUsize, Ordering};

use zsad_core::autodiff::{Tape, Var};
use zsad_core::data::Image;
use zsad_core::encoder::{
    EncoderSpec, FrozenEncoder, PatchFeatureStack, SpecialTokens, SyntheticEncoder,
};
use zsad_core::Result;

pub fn small_spec() -> EncoderSpec {
    EncoderSpec {
        num_vision_layers: 4,
        selected_layers: vec![1, 2, 3, 4],
        vision_dims: vec![32; 4],
        text_dim: 16,
        patch_size: 4,
        image_size: 32,
        text_seq_len: 24,
        num_text_layers: 3,
        vocab_size: 512,
        seed: 7,
    }
}

pub fn tiny_spec() -> EncoderSpec {
    EncoderSpec {
        num_vision_layers: 3,
        selected_layers: vec![1, 3],
        vision_dims: vec![6, 7, 6],
        text_dim: 5,
        patch_size: 2,
        image_size: 8,
        text_seq_len: 20,
        num_text_layers: 2,
        vocab_size: 128,
        seed: 4,
    }
}

pub fn noise_image(size: usize, seed: u64) -> Image {
    let data = (0..size * size * 3)
        .map(|i| ((i as u64).wrapping_mul(2654435761).wrapping_add(seed * 97) % 1000) as f64 / 1000.0)
        .collect();
    Image {
        height: size,
        width: size,
        data,
    }
}

/// Delegates to a synthetic encoder, counting text encodings and
/// optionally replacing sentence and global image embeddings.
pub struct RiggedEncoder {
    pub inner: SyntheticEncoder,
    pub text_calls: AtomicUsize,
    /// `(needle, embedding)`: sentences containing `needle` embed to it.
    pub sentences: Vec<(String, Vec<f64>)>,
    pub global: Option<Vec<f64>>,
}

impl RiggedEncoder {
    pub fn new(spec: &EncoderSpec) -> Self {
        Self {
            inner: SyntheticEncoder::new(spec).unwrap(),
            text_calls: AtomicUsize::new(0),
            sentences: Vec::new(),
            global: None,
        }
    }

    pub fn calls(&self) -> usize {
        self.text_calls.load(Ordering::SeqCst)
    }
}

impl FrozenEncoder for RiggedEncoder {
    fn spec(&self) -> &EncoderSpec {
        self.inner.spec()
    }

    fn special_tokens(&self) -> SpecialTokens {
        self.inner.special_tokens()
    }

    fn tokenize(&self, text: &str) -> Vec<u32> {
        self.inner.tokenize(text)
    }

    fn encode_image(&self, image: &Image) -> Result<PatchFeatureStack> {
        let mut stack = self.inner.encode_image(image)?;
        if let Some(g) = &self.global {
            stack.global_embedding = g.clone();
        }
        Ok(stack)
    }

    fn encode_text_graph(
        &self,
        tape: &mut Tape,
        token_ids: &[u32],
        eot_position: usize,
        soft: &[(usize, Var)],
        deep: Option<Var>,
    ) -> Result<Var> {
        self.text_calls.fetch_add(1, Ordering::SeqCst);
        self.inner
            .encode_text_graph(tape, token_ids, eot_position, soft, deep)
    }

    fn embed_sentence(&self, text: &str) -> Result<Vec<f64>> {
        for (needle, e) in &self.sentences {
            if text.contains(needle.as_str()) {
                return Ok(e.clone());
            }
        }
        self.inner.embed_sentence(text)
    }
}
