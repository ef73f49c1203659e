//! Per-layer score maps, two-branch fusion and the image-level score.

use serde::{Deserialize, Serialize};

use crate::cnf::{filter_with_embedding, strip_numeric, CnfConfig};
use crate::data::Image;
use crate::encoder::{FrozenEncoder, PatchFeatureStack};
use crate::error::{Error, Result};
use crate::prompting::{
    assemble_prompt, embed_prompt_pair, fuse_query, make_mvp, Affine, PromptBank, PromptTemplate,
    QuerySource, TextEmbeddingPair,
};
use crate::resample::resize_bilinear;
use crate::tensor::{dot, Mat};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreMap {
    pub height: usize,
    pub width: usize,
    /// Row-major.
    pub values: Vec<f64>,
}

impl ScoreMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width} map",
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoringConfig {
    /// Weight of the vision-enhanced branch.
    pub alpha: f64,
    /// Gaussian smoothing width in pixels; 0 disables smoothing.
    pub sigma: f64,
    pub n1: usize,
    pub n2: usize,
    /// Multiplier on cosine logits before the softmax.
    pub temperature: f64,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            alpha: 0.8,
            sigma: 9.0,
            n1: 500,
            n2: 2500,
            temperature: 100.0,
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config("alpha must lie in [0, 1]".into()));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config("sigma must be finite and >= 0".into()));
        }
        if self.n1 == 0 || self.n1 >= self.n2 {
            return Err(Error::Config(format!(
                "need 0 < n1 < n2, got n1={} n2={}",
                self.n1, self.n2
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Row-wise projection of patch features into text space. The input must
/// not include the class token.
pub fn project_patches(patch_grid: &Mat, projector: &Affine) -> Result<Mat> {
    projector.apply_rows(patch_grid)
}

/// Abnormal-channel probability map: cosine logits against the pair,
/// scaled by `temperature`, upsampled bilinearly from the `grid` to
/// `target`, then softmaxed over the two channels per pixel.
pub fn score_map(
    patch_features: &Mat,
    grid: (usize, usize),
    pair: &TextEmbeddingPair,
    target: (usize, usize),
    temperature: f64,
) -> Result<ScoreMap> {
    let (gh, gw) = grid;
    if patch_features.rows() != gh * gw {
        return Err(Error::Shape(format!(
            "{} patch rows for a {gh}x{gw} grid",
            patch_features.rows()
        )));
    }
    if target.0 < gh || target.1 < gw {
        return Err(Error::Shape(format!(
            "target {target:?} is smaller than the patch grid {grid:?}"
        )));
    }
    if pair.normal.len() != patch_features.cols() || pair.abnormal.len() != patch_features.cols() {
        return Err(Error::Shape("text embedding width mismatch".into()));
    }
    let unit = patch_features.normalize_rows();
    let mut normal = Vec::with_capacity(unit.rows());
    let mut abnormal = Vec::with_capacity(unit.rows());
    for r in 0..unit.rows() {
        normal.push(temperature * dot(unit.row(r), &pair.normal));
        abnormal.push(temperature * dot(unit.row(r), &pair.abnormal));
    }
    let normal = resize_bilinear(&normal, gh, gw, 1, target.0, target.1);
    let abnormal = resize_bilinear(&abnormal, gh, gw, 1, target.0, target.1);
    let values = normal
        .iter()
        .zip(&abnormal)
        .map(|(&n, &a)| {
            let m = n.max(a);
            let (en, ea) = ((n - m).exp(), (a - m).exp());
            ea / (en + ea)
        })
        .collect();
    ScoreMap::new(target.0, target.1, values)
}

/// Maps any integer index into `[0, n)` by mirror reflection about the
/// edges, repeating the edge sample (`d c b a | a b c d | d c b a`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur, kernel radius `ceil(4σ)`, reflect padding.
pub fn gaussian_smooth(map: &ScoreMap, sigma: f64) -> ScoreMap {
    if sigma <= 0.0 {
        return map.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = map.dims();
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        let row = &map.values[y * w..(y + 1) * w];
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * row[reflect(x as isize + j as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * tmp[reflect(y as isize + j as isize - r, h) * w + x])
                .sum();
        }
    }
    ScoreMap {
        height: h,
        width: w,
        values: out,
    }
}

/// `G(α Σ S_V + (1-α) Σ S_Q)`, raw layer sums.
pub fn fuse_maps(
    vision_maps: &[ScoreMap],
    query_maps: &[ScoreMap],
    config: &ScoringConfig,
) -> Result<ScoreMap> {
    if vision_maps.is_empty() || vision_maps.len() != query_maps.len() {
        return Err(Error::Shape(format!(
            "{} vision-enhanced maps against {} query-only maps",
            vision_maps.len(),
            query_maps.len()
        )));
    }
    let dims = vision_maps[0].dims();
    if let Some(m) = vision_maps.iter().chain(query_maps).find(|m| m.dims() != dims) {
        return Err(Error::Shape(format!(
            "score map {:?} differs from {:?}",
            m.dims(),
            dims
        )));
    }
    let mut sum = vec![0.0; dims.0 * dims.1];
    let a = config.alpha;
    for (maps, weight) in [(vision_maps, a), (query_maps, 1.0 - a)] {
        let mut branch = vec![0.0; sum.len()];
        for m in maps {
            branch.iter_mut().zip(&m.values).for_each(|(b, v)| *b += v);
        }
        sum.iter_mut().zip(branch).for_each(|(s, b)| *s += weight * b);
    }
    let fused = ScoreMap::new(dims.0, dims.1, sum)?;
    Ok(gaussian_smooth(&fused, config.sigma))
}

/// The `n` largest values, descending.
pub fn top_n(values: &[f64], n: usize) -> Vec<f64> {
    let mut v = values.to_vec();
    let n = n.min(v.len());
    if n < v.len() {
        v.select_nth_unstable_by(n, |a, b| b.total_cmp(a));
        v.truncate(n);
    }
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Returns `(s_det, w)` with `w = mean(exp(top n1)) / mean(exp(top n2))`
/// and `s_det = w · mean(top n1)`.
pub fn image_score(s_seg: &ScoreMap, n1: usize, n2: usize) -> Result<(f64, f64)> {
    let len = s_seg.values.len();
    if len == 0 {
        return Err(Error::Shape("empty score map".into()));
    }
    if n1 == 0 || n1 >= n2 {
        return Err(Error::Config(format!("need 0 < n1 < n2, got {n1}, {n2}")));
    }
    let (mut n1, mut n2) = (n1, n2);
    if len < n2 {
        log::warn!("score map has {len} pixels, fewer than n2={n2}; clamping top-N sizes");
        n2 = len;
        n1 = n1.min(len);
    }
    let top = top_n(&s_seg.values, n2);
    let peak = top[0];
    let top1 = &top[..n1];
    // Everything relative to the peak: exponentials cannot overflow and a
    // constant map scores exactly its value.
    let e1 = mean(&top1.iter().map(|v| (v - peak).exp()).collect::<Vec<_>>());
    let e2 = mean(&top.iter().map(|v| (v - peak).exp()).collect::<Vec<_>>());
    let w = if n1 == n2 { 1.0 } else { e1 / e2 };
    let m1 = peak + mean(&top1.iter().map(|v| v - peak).collect::<Vec<_>>());
    Ok((w * m1, w))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerMaps {
    pub layer: usize,
    pub vision: ScoreMap,
    pub query: ScoreMap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyResult {
    pub s_seg: ScoreMap,
    pub s_det: f64,
    pub w: f64,
    /// Class word used in the vision-enhanced prompts.
    pub class_word: String,
    pub per_layer_maps: Option<Vec<LayerMaps>>,
}

/// Holds a frozen bank snapshot and the query-only embedding, which is
/// computed once at construction and shared by every image.
pub struct InferenceEngine<'a> {
    encoder: &'a dyn FrozenEncoder,
    bank: &'a PromptBank,
    template: PromptTemplate,
    cnf: CnfConfig,
    scoring: ScoringConfig,
    query_pair: TextEmbeddingPair,
    keep_layer_maps: bool,
}

impl<'a> InferenceEngine<'a> {
    pub fn new(
        encoder: &'a dyn FrozenEncoder,
        bank: &'a PromptBank,
        cnf: CnfConfig,
        scoring: ScoringConfig,
    ) -> Result<Self> {
        scoring.validate()?;
        cnf.validate()?;
        bank.check_spec(encoder.spec())?;
        let template = PromptTemplate::default();
        let seqs = assemble_prompt(encoder, &template, "object", bank, QuerySource::QueryOnly)?;
        let query_pair = embed_prompt_pair(&seqs, bank, encoder)?;
        Ok(Self {
            encoder,
            bank,
            template,
            cnf,
            scoring,
            query_pair,
            keep_layer_maps: false,
        })
    }

    pub fn keep_layer_maps(mut self, keep: bool) -> Self {
        self.keep_layer_maps = keep;
        self
    }

    pub fn encoder(&self) -> &'a dyn FrozenEncoder {
        self.encoder
    }

    pub fn query_pair(&self) -> &TextEmbeddingPair {
        &self.query_pair
    }

    pub fn scoring(&self) -> &ScoringConfig {
        &self.scoring
    }

    pub fn cnf(&self) -> &CnfConfig {
        &self.cnf
    }

    /// Class word after numeric stripping and (if enabled) filtering.
    pub fn resolve_class(&self, stack: &PatchFeatureStack, class_name: &str) -> Result<String> {
        let stripped = strip_numeric(class_name);
        filter_with_embedding(&stack.global_embedding, &stripped, &self.cnf, self.encoder)
    }

    pub fn infer(&self, image: &Image, class_name: &str) -> Result<AnomalyResult> {
        let stack = self.encoder.encode_image(image)?;
        let class_word = self.resolve_class(&stack, class_name)?;
        self.infer_stack(&stack, (image.height, image.width), &class_word)
    }

    /// Inference with an already resolved class word (no filtering).
    pub fn infer_stack(
        &self,
        stack: &PatchFeatureStack,
        target: (usize, usize),
        class_word: &str,
    ) -> Result<AnomalyResult> {
        if stack.layers.len() != self.bank.num_layers() {
            return Err(Error::Shape(format!(
                "{} feature layers for {} projector pairs",
                stack.layers.len(),
                self.bank.num_layers()
            )));
        }
        let grid = (stack.grid_side, stack.grid_side);
        let t = self.scoring.temperature;
        let mut vision_maps = Vec::with_capacity(stack.layers.len());
        let mut query_maps = Vec::with_capacity(stack.layers.len());
        for (i, layer) in stack.layers.iter().enumerate() {
            let patches = project_patches(&layer.patch_grid, &self.bank.patch_projectors[i])?;
            let vp = make_mvp(&layer.with_class_token(), &self.bank.vision_projectors[i])?;
            let vq = fuse_query(&self.bank.query_tokens, &vp)?;
            let seqs = assemble_prompt(
                self.encoder,
                &self.template,
                class_word,
                self.bank,
                QuerySource::VisionEnhanced(&vq),
            )?;
            let pair = embed_prompt_pair(&seqs, self.bank, self.encoder)?;
            vision_maps.push(score_map(&patches, grid, &pair, target, t)?);
            query_maps.push(score_map(&patches, grid, &self.query_pair, target, t)?);
        }
        let s_seg = fuse_maps(&vision_maps, &query_maps, &self.scoring)?;
        let (s_det, w) = image_score(&s_seg, self.scoring.n1, self.scoring.n2)?;
        let per_layer_maps = self.keep_layer_maps.then(|| {
            stack
                .layers
                .iter()
                .zip(vision_maps)
                .zip(query_maps)
                .map(|((l, vision), query)| LayerMaps {
                    layer: l.layer,
                    vision,
                    query,
                })
                .collect()
        });
        Ok(AnomalyResult {
            s_seg,
            s_det,
            w,
            class_word: class_word.to_string(),
            per_layer_maps,
        })
    }
}

/// One-shot inference; builds the query-only embedding on the fly.
pub fn infer(
    image: &Image,
    class_name: &str,
    bank: &PromptBank,
    encoder: &dyn FrozenEncoder,
    cnf: &CnfConfig,
    scoring: &ScoringConfig,
) -> Result<AnomalyResult> {
    InferenceEngine::new(encoder, bank, cnf.clone(), *scoring)?.infer(image, class_name)
}
