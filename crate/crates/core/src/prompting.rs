//! Learnable prompt parameters and normal/abnormal prompt assembly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Gradients, Tape, Var};
use crate::encoder::{EncoderSpec, FrozenEncoder, TokenSequence};
use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Row-vector affine map `y = x W + b`, `W: in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub weight: Mat,
    pub bias: Vec<f64>,
}

impl Affine {
    pub fn zeros(c_in: usize, c_out: usize) -> Self {
        Self {
            weight: Mat::zeros(c_in, c_out),
            bias: vec![0.0; c_out],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    /// Applies the map to every row of `x`.
    pub fn apply_rows(&self, x: &Mat) -> Result<Mat> {
        if x.cols() != self.in_dim() {
            return Err(Error::Shape(format!(
                "affine map expects {} input columns, got {}",
                self.in_dim(),
                x.cols()
            )));
        }
        x.matmul(&self.weight)?.add_row_broadcast(&self.bias)
    }
}

/// Every learnable parameter of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBank {
    /// Normal-state token `N_P`, length `C_T`.
    pub normal_token: Vec<f64>,
    /// Abnormal-state token `A_P`, length `C_T`.
    pub abnormal_token: Vec<f64>,
    /// Shared query tokens `Q_P`, `2 × C_T`.
    pub query_tokens: Mat,
    /// One token per text layer, `num_text_layers × C_T`.
    pub deep_text_tokens: Mat,
    /// Per selected layer, pooled features `C_i → C_T`.
    pub vision_projectors: Vec<Affine>,
    /// Per selected layer, patch features `C_i → C_T`.
    pub patch_projectors: Vec<Affine>,
}

pub const QUERY_TOKENS: usize = 2;
const TOKEN_INIT_STD: f64 = 0.02;

/// Rounds to the nearest `f32`, the checkpoint storage precision.
pub(crate) fn snap(v: f64) -> f64 {
    v as f32 as f64
}

impl PromptBank {
    /// Gaussian initialization: tokens with std 0.02, projector weights with
    /// std `1/√C_i`, zero biases. Values are rounded to `f32`.
    pub fn init(spec: &EncoderSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ct = spec.text_dim;
        let mut draw = |n: usize, std: f64| -> Vec<f64> {
            let d = Normal::new(0.0, std).expect("finite std");
            (0..n).map(|_| snap(d.sample(&mut rng))).collect()
        };
        let normal_token = draw(ct, TOKEN_INIT_STD);
        let abnormal_token = draw(ct, TOKEN_INIT_STD);
        let query_tokens = Mat::from_vec(QUERY_TOKENS, ct, draw(QUERY_TOKENS * ct, TOKEN_INIT_STD))?;
        let deep_text_tokens = Mat::from_vec(
            spec.num_text_layers,
            ct,
            draw(spec.num_text_layers * ct, TOKEN_INIT_STD),
        )?;
        let mut vision_projectors = Vec::new();
        let mut patch_projectors = Vec::new();
        for ci in spec.selected_dims() {
            let std = 1.0 / (ci as f64).sqrt();
            vision_projectors.push(Affine {
                weight: Mat::from_vec(ci, ct, draw(ci * ct, std))?,
                bias: vec![0.0; ct],
            });
        }
        for ci in spec.selected_dims() {
            let std = 1.0 / (ci as f64).sqrt();
            patch_projectors.push(Affine {
                weight: Mat::from_vec(ci, ct, draw(ci * ct, std))?,
                bias: vec![0.0; ct],
            });
        }
        Ok(Self {
            normal_token,
            abnormal_token,
            query_tokens,
            deep_text_tokens,
            vision_projectors,
            patch_projectors,
        })
    }

    /// A bank of zeros with the layout implied by `spec`.
    pub fn zeros_like_spec(spec: &EncoderSpec) -> Self {
        let ct = spec.text_dim;
        Self {
            normal_token: vec![0.0; ct],
            abnormal_token: vec![0.0; ct],
            query_tokens: Mat::zeros(QUERY_TOKENS, ct),
            deep_text_tokens: Mat::zeros(spec.num_text_layers, ct),
            vision_projectors: spec.selected_dims().iter().map(|&c| Affine::zeros(c, ct)).collect(),
            patch_projectors: spec.selected_dims().iter().map(|&c| Affine::zeros(c, ct)).collect(),
        }
    }

    pub fn text_dim(&self) -> usize {
        self.normal_token.len()
    }

    pub fn num_layers(&self) -> usize {
        self.vision_projectors.len()
    }

    /// Checks the layout against an encoder spec.
    pub fn check_spec(&self, spec: &EncoderSpec) -> Result<()> {
        let expected = Self::zeros_like_spec(spec);
        let a = self.named_shapes();
        let b = expected.named_shapes();
        if a != b {
            return Err(Error::Shape(format!(
                "prompt bank layout {a:?} does not match encoder layout {b:?}"
            )));
        }
        Ok(())
    }

    fn named_shapes(&self) -> Vec<(String, (usize, usize))> {
        self.named_params()
            .into_iter()
            .map(|(n, s, _)| (n, s))
            .collect()
    }

    /// `(name, (rows, cols), values)` in canonical order.
    pub fn named_params(&self) -> Vec<(String, (usize, usize), &[f64])> {
        let ct = self.text_dim();
        let mut out: Vec<(String, (usize, usize), &[f64])> = vec![
            ("normal_token".into(), (1, ct), &self.normal_token),
            ("abnormal_token".into(), (1, ct), &self.abnormal_token),
            (
                "query_tokens".into(),
                self.query_tokens.shape(),
                self.query_tokens.as_slice(),
            ),
            (
                "deep_text_tokens".into(),
                self.deep_text_tokens.shape(),
                self.deep_text_tokens.as_slice(),
            ),
        ];
        for (i, a) in self.vision_projectors.iter().enumerate() {
            out.push((format!("vision_projector.{i}.weight"), a.weight.shape(), a.weight.as_slice()));
            out.push((format!("vision_projector.{i}.bias"), (1, ct), &a.bias));
        }
        for (i, a) in self.patch_projectors.iter().enumerate() {
            out.push((format!("patch_projector.{i}.weight"), a.weight.shape(), a.weight.as_slice()));
            out.push((format!("patch_projector.{i}.bias"), (1, ct), &a.bias));
        }
        out
    }

    /// Mutable views of every parameter, same order as [`named_params`](Self::named_params).
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            &mut self.normal_token,
            &mut self.abnormal_token,
            self.query_tokens.as_mut_slice(),
            self.deep_text_tokens.as_mut_slice(),
        ];
        for a in &mut self.vision_projectors {
            out.push(a.weight.as_mut_slice());
            out.push(&mut a.bias);
        }
        for a in &mut self.patch_projectors {
            out.push(a.weight.as_mut_slice());
            out.push(&mut a.bias);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, _, v)| v.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named_params()
            .iter()
            .all(|(_, _, v)| v.iter().all(|x| x.is_finite()))
    }

    /// Flattened copy of all parameters.
    pub fn flatten(&self) -> Vec<f64> {
        self.named_params()
            .into_iter()
            .flat_map(|(_, _, v)| v.iter().copied())
            .collect()
    }
}

/// Pooled vision prompt: `projector(mean of all 1 + H·W token rows)`.
pub fn make_mvp(tokens: &Mat, projector: &Affine) -> Result<Vec<f64>> {
    if tokens.rows() == 0 {
        return Err(Error::Shape("empty feature grid".into()));
    }
    Ok(projector.apply_rows(&tokens.mean_rows())?.into_vec())
}

/// `Q_P + V_P` on both query rows.
pub fn fuse_query(query_tokens: &Mat, vision_prompt: &[f64]) -> Result<Mat> {
    query_tokens.add_row_broadcast(vision_prompt)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    pub normal_state: String,
    pub abnormal_state: String,
    /// Must contain `[state]` and `[cls]`.
    pub text: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            normal_state: "good".into(),
            abnormal_state: "damaged".into(),
            text: "A photo of a [state] [cls] object.".into(),
        }
    }
}

pub const QUERY_ONLY_CLASS: &str = "object";

/// Dataset class names use `_` as a word separator.
pub fn normalize_class_word(class_word: &str) -> String {
    class_word.replace('_', " ")
}

impl PromptTemplate {
    pub fn render(&self, state: &str, class_word: &str) -> String {
        self.text
            .replace("[state]", state)
            .replace("[cls]", &normalize_class_word(class_word))
    }
}

/// Token layout of one assembled prompt.
///
/// `[start] [state token] words.. [query 0] [query 1] [.] [end] [pad]..`;
/// the query slots go right before a trailing period, or at the end when
/// the template has none.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptLayout {
    pub token_ids: Vec<u32>,
    pub eot_position: usize,
    pub state_position: usize,
    pub query_positions: [usize; QUERY_TOKENS],
}

fn layout_for(
    encoder: &dyn FrozenEncoder,
    template: &PromptTemplate,
    state: &str,
    class_word: &str,
) -> Result<PromptLayout> {
    let special = encoder.special_tokens();
    let seq_len = encoder.spec().text_seq_len;
    let mut words = encoder.tokenize(&template.render(state, class_word));
    let period = encoder.tokenize(".");
    let tail = if !period.is_empty() && words.ends_with(&period) {
        words.split_off(words.len() - period.len())
    } else {
        Vec::new()
    };
    let mut ids = vec![special.start, special.pad];
    ids.extend_from_slice(&words);
    let q0 = ids.len();
    ids.extend([special.pad; QUERY_TOKENS]);
    ids.extend_from_slice(&tail);
    let eot_position = ids.len();
    ids.push(special.end);
    if ids.len() > seq_len {
        return Err(Error::Encoder(format!(
            "prompt {:?} needs {} tokens, limit is {seq_len}",
            template.render(state, class_word),
            ids.len()
        )));
    }
    ids.resize(seq_len, special.pad);
    Ok(PromptLayout {
        token_ids: ids,
        eot_position,
        state_position: 1,
        query_positions: [q0, q0 + 1],
    })
}

/// Which tokens fill the query slots.
#[derive(Clone, Copy, Debug)]
pub enum QuerySource<'a> {
    /// Vision-enhanced `V_Q = Q_P + V_P`, `2 × C_T`.
    VisionEnhanced(&'a Mat),
    /// Raw `Q_P`; the class word becomes the universal `"object"`.
    QueryOnly,
}

/// Normal and abnormal layouts for `class_word` (after query-only
/// substitution).
pub fn prompt_layouts(
    encoder: &dyn FrozenEncoder,
    template: &PromptTemplate,
    class_word: &str,
    query_only: bool,
) -> Result<[PromptLayout; 2]> {
    if class_word.trim().is_empty() {
        return Err(Error::Config("class word must not be empty".into()));
    }
    let cls = if query_only { QUERY_ONLY_CLASS } else { class_word };
    Ok([
        layout_for(encoder, template, &template.normal_state, cls)?,
        layout_for(encoder, template, &template.abnormal_state, cls)?,
    ])
}

pub fn assemble_prompt(
    encoder: &dyn FrozenEncoder,
    template: &PromptTemplate,
    class_word: &str,
    bank: &PromptBank,
    query: QuerySource<'_>,
) -> Result<[TokenSequence; 2]> {
    let query_rows = match query {
        QuerySource::VisionEnhanced(m) => m,
        QuerySource::QueryOnly => &bank.query_tokens,
    };
    if query_rows.shape() != (QUERY_TOKENS, bank.text_dim()) {
        return Err(Error::Shape(format!(
            "query tokens {:?}, expected ({QUERY_TOKENS}, {})",
            query_rows.shape(),
            bank.text_dim()
        )));
    }
    let layouts = prompt_layouts(
        encoder,
        template,
        class_word,
        matches!(query, QuerySource::QueryOnly),
    )?;
    let states = [&bank.normal_token, &bank.abnormal_token];
    let mut out = layouts.into_iter().zip(states).map(|(layout, state)| {
        let mut seq = TokenSequence {
            token_ids: layout.token_ids,
            soft_slots: Default::default(),
            eot_position: layout.eot_position,
        };
        seq.soft_slots.insert(layout.state_position, state.clone());
        for (k, &pos) in layout.query_positions.iter().enumerate() {
            seq.soft_slots.insert(pos, query_rows.row(k).to_vec());
        }
        seq
    });
    Ok([out.next().unwrap(), out.next().unwrap()])
}

/// Normal and abnormal text embeddings, each unit norm.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbeddingPair {
    pub normal: Vec<f64>,
    pub abnormal: Vec<f64>,
}

pub fn embed_prompt_pair(
    sequences: &[TokenSequence; 2],
    bank: &PromptBank,
    encoder: &dyn FrozenEncoder,
) -> Result<TextEmbeddingPair> {
    if encoder.spec().text_dim != bank.text_dim() {
        return Err(Error::Shape(format!(
            "encoder text width {} differs from prompt width {}",
            encoder.spec().text_dim,
            bank.text_dim()
        )));
    }
    let deep = Some(&bank.deep_text_tokens);
    Ok(TextEmbeddingPair {
        normal: encoder.encode_text(&sequences[0], deep)?,
        abnormal: encoder.encode_text(&sequences[1], deep)?,
    })
}

/// Tape leaves for every bank parameter.
pub struct BankVars {
    pub normal_token: Var,
    pub abnormal_token: Var,
    pub query_tokens: Var,
    pub deep_text_tokens: Var,
    pub vision_projectors: Vec<(Var, Var)>,
    pub patch_projectors: Vec<(Var, Var)>,
}

impl BankVars {
    pub fn register(tape: &mut Tape, bank: &PromptBank) -> Self {
        let affine = |tape: &mut Tape, a: &Affine| {
            (
                tape.param(a.weight.clone()),
                tape.param(Mat::row_vector(a.bias.clone())),
            )
        };
        Self {
            normal_token: tape.param(Mat::row_vector(bank.normal_token.clone())),
            abnormal_token: tape.param(Mat::row_vector(bank.abnormal_token.clone())),
            query_tokens: tape.param(bank.query_tokens.clone()),
            deep_text_tokens: tape.param(bank.deep_text_tokens.clone()),
            vision_projectors: bank
                .vision_projectors
                .iter()
                .map(|a| affine(tape, a))
                .collect(),
            patch_projectors: bank
                .patch_projectors
                .iter()
                .map(|a| affine(tape, a))
                .collect(),
        }
    }

    /// Gradients arranged as a bank; parameters without a path to the
    /// output get zeros.
    pub fn gradients(&self, grads: &Gradients, bank: &PromptBank) -> PromptBank {
        let vec_grad = |v: Var, like: &[f64]| {
            grads
                .get_or_zeros(v, &Mat::row_vector(like.to_vec()))
                .into_vec()
        };
        let affine = |(w, b): &(Var, Var), a: &Affine| Affine {
            weight: grads.get_or_zeros(*w, &a.weight),
            bias: vec_grad(*b, &a.bias),
        };
        PromptBank {
            normal_token: vec_grad(self.normal_token, &bank.normal_token),
            abnormal_token: vec_grad(self.abnormal_token, &bank.abnormal_token),
            query_tokens: grads.get_or_zeros(self.query_tokens, &bank.query_tokens),
            deep_text_tokens: grads.get_or_zeros(self.deep_text_tokens, &bank.deep_text_tokens),
            vision_projectors: self
                .vision_projectors
                .iter()
                .zip(&bank.vision_projectors)
                .map(|(v, a)| affine(v, a))
                .collect(),
            patch_projectors: self
                .patch_projectors
                .iter()
                .zip(&bank.patch_projectors)
                .map(|(v, a)| affine(v, a))
                .collect(),
        }
    }
}

/// Differentiable vision-enhanced text embeddings for one layer:
/// `(normal, abnormal)`, each `1 × C_T`.
pub fn vision_enhanced_pair_graph(
    tape: &mut Tape,
    encoder: &dyn FrozenEncoder,
    layouts: &[PromptLayout; 2],
    vars: &BankVars,
    layer_index: usize,
    pooled_tokens: &[f64],
) -> Result<(Var, Var)> {
    let (w, b) = vars.vision_projectors[layer_index];
    let pooled = tape.constant(Mat::row_vector(pooled_tokens.to_vec()));
    let vp = tape.matmul(pooled, w)?;
    let vp = tape.add(vp, b)?;
    let vq = tape.add_row(vars.query_tokens, vp)?;
    let q0 = tape.slice_rows(vq, 0, 1)?;
    let q1 = tape.slice_rows(vq, 1, 2)?;
    let mut embed = |layout: &PromptLayout, state: Var| {
        let soft = [
            (layout.state_position, state),
            (layout.query_positions[0], q0),
            (layout.query_positions[1], q1),
        ];
        encoder.encode_text_graph(
            tape,
            &layout.token_ids,
            layout.eot_position,
            &soft,
            Some(vars.deep_text_tokens),
        )
    };
    let normal = embed(&layouts[0], vars.normal_token)?;
    let abnormal = embed(&layouts[1], vars.abnormal_token)?;
    Ok((normal, abnormal))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::SyntheticEncoder;
    use crate::tensor::norm;

    fn spec() -> EncoderSpec {
        EncoderSpec {
            num_vision_layers: 2,
            selected_layers: vec![1, 2],
            vision_dims: vec![8, 12],
            text_dim: 8,
            patch_size: 2,
            image_size: 8,
            text_seq_len: 20,
            num_text_layers: 2,
            vocab_size: 128,
            seed: 1,
        }
    }

    #[test]
    fn init_layout_and_count() {
        let s = spec();
        let bank = PromptBank::init(&s, 3).unwrap();
        // 2·C_T + 2·C_T + T·C_T + Σ 2·(C_i·C_T + C_T)
        let expected = 2 * 8 + 2 * 8 + 2 * 8 + 2 * (8 * 8 + 8) + 2 * (12 * 8 + 8);
        assert_eq!(bank.param_count(), expected);
        assert!(bank.check_spec(&s).is_ok());
        assert!(bank.flatten().iter().all(|v| *v == snap(*v)));
        assert!(bank.vision_projectors.iter().all(|a| a.bias.iter().all(|b| *b == 0.0)));
        assert_eq!(PromptBank::init(&s, 3).unwrap(), bank);
        assert_ne!(PromptBank::init(&s, 4).unwrap(), bank);
    }

    #[test]
    fn mvp_cases() {
        let zero = Mat::zeros(5, 4);
        let proj = Affine {
            weight: Mat::filled(4, 3, 0.7),
            bias: vec![0.0; 3],
        };
        assert_eq!(make_mvp(&zero, &proj).unwrap(), vec![0.0; 3]);

        let v = vec![0.5, -1.0, 2.0];
        let grid = Mat::from_rows(&vec![v.clone(); 6]).unwrap();
        let id = Affine {
            weight: Mat::identity(3),
            bias: vec![0.0; 3],
        };
        assert_eq!(make_mvp(&grid, &id).unwrap(), v);
        assert!(make_mvp(&Mat::zeros(0, 3), &id).is_err());
        assert!(make_mvp(&Mat::zeros(2, 4), &id).is_err());
    }

    #[test]
    fn fuse_query_cases() {
        let q = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(fuse_query(&q, &[0.0, 0.0]).unwrap(), q);
        let z = Mat::zeros(2, 2);
        let f = fuse_query(&z, &[5.0, 6.0]).unwrap();
        assert_eq!(f.row(0), &[5.0, 6.0]);
        assert_eq!(f.row(1), &[5.0, 6.0]);
        let (a, b) = ([0.25, -1.0], [2.0, 0.5]);
        let ab = [a[0] + b[0], a[1] + b[1]];
        let once = fuse_query(&q, &ab).unwrap();
        let twice = fuse_query(&fuse_query(&q, &a).unwrap(), &b).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn template_assembly() {
        let s = spec();
        let enc = SyntheticEncoder::new(&s).unwrap();
        let bank = PromptBank::init(&s, 1).unwrap();
        let t = PromptTemplate::default();
        let vq = Mat::filled(2, 8, 0.1);
        let [n, a] =
            assemble_prompt(&enc, &t, "bottle", &bank, QuerySource::VisionEnhanced(&vq)).unwrap();
        let words = enc.tokenize("a photo of a good bottle object");
        assert_eq!(&n.token_ids[2..2 + words.len()], words.as_slice());
        assert_eq!(n.soft_slots.len(), 3);
        assert_eq!(n.soft_slots[&1], bank.normal_token);
        assert_eq!(a.soft_slots[&1], bank.abnormal_token);
        assert_eq!(n.soft_slots[&(2 + words.len())], vq.row(0).to_vec());
        // Only the state word differs between the two sequences.
        let diffs = n.token_ids.iter().zip(&a.token_ids).filter(|(x, y)| x != y).count();
        assert_eq!(diffs, 1);
        assert_eq!(n.token_ids[n.eot_position], enc.special_tokens().end);
    }

    #[test]
    fn query_only_uses_object() {
        let s = spec();
        let enc = SyntheticEncoder::new(&s).unwrap();
        let bank = PromptBank::init(&s, 1).unwrap();
        let t = PromptTemplate::default();
        let a = assemble_prompt(&enc, &t, "bottle", &bank, QuerySource::QueryOnly).unwrap();
        let b = assemble_prompt(&enc, &t, "capsules", &bank, QuerySource::QueryOnly).unwrap();
        assert_eq!(a, b);
        let words = enc.tokenize("a photo of a good object object");
        assert_eq!(&a[0].token_ids[2..2 + words.len()], words.as_slice());
        assert_eq!(a[0].soft_slots[&(2 + words.len() + 1)], bank.query_tokens.row(1).to_vec());
    }

    #[test]
    fn underscores_become_spaces() {
        let s = spec();
        let enc = SyntheticEncoder::new(&s).unwrap();
        let t = PromptTemplate::default();
        let [n, _] = prompt_layouts(&enc, &t, "pipe_fryum", false).unwrap();
        let words = enc.tokenize("a photo of a good pipe fryum object");
        assert_eq!(&n.token_ids[2..2 + words.len()], words.as_slice());
    }

    #[test]
    fn overlong_prompt_rejected() {
        let mut s = spec();
        s.text_seq_len = 10;
        let enc = SyntheticEncoder::new(&s).unwrap();
        let t = PromptTemplate::default();
        assert!(prompt_layouts(&enc, &t, "bottle", false).is_err());
        assert!(prompt_layouts(&enc, &t, "  ", false).is_err());
    }

    #[test]
    fn embeddings_are_unit_norm_and_degenerate_pairs_match() {
        let s = spec();
        let enc = SyntheticEncoder::new(&s).unwrap();
        let bank = PromptBank::init(&s, 1).unwrap();
        let seqs = assemble_prompt(
            &enc,
            &PromptTemplate::default(),
            "bottle",
            &bank,
            QuerySource::QueryOnly,
        )
        .unwrap();
        let pair = embed_prompt_pair(&seqs, &bank, &enc).unwrap();
        assert!((norm(&pair.normal) - 1.0).abs() < 1e-6);
        assert!((norm(&pair.abnormal) - 1.0).abs() < 1e-6);
        assert_ne!(pair.normal, pair.abnormal);

        let same = [seqs[0].clone(), seqs[0].clone()];
        let p = embed_prompt_pair(&same, &bank, &enc).unwrap();
        assert_eq!(p.normal, p.abnormal);
    }
}
