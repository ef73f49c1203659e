//! Prompt-parameter optimization and checkpoints.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{SparseRows, Tape, Var};
use crate::data::{load_sample, DatasetManifest, Sample, Split};
use crate::encoder::{fnv1a, EncoderSpec, FrozenEncoder, PatchFeatureStack};
use crate::error::{Error, Result};
use crate::loss::{total_loss, LossConfig};
use crate::prompting::{
    assemble_prompt, embed_prompt_pair, fuse_query, make_mvp, prompt_layouts, snap, BankVars,
    PromptBank, PromptLayout, PromptTemplate, QuerySource,
};
use crate::resample::bilinear_operator;
use crate::scoring::{project_patches, score_map, ScoreMap, ScoringConfig};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 4e-5,
            epochs: 15,
            batch_size: 8,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// A training example with its frozen features precomputed.
#[derive(Clone, Debug)]
pub struct TrainingItem {
    pub stack: PatchFeatureStack,
    pub pooled: Vec<Vec<f64>>,
    pub gt: Arc<[f64]>,
    pub gt_dims: (usize, usize),
    pub class_name: String,
}

impl TrainingItem {
    pub fn new(encoder: &dyn FrozenEncoder, sample: &Sample) -> Result<Self> {
        let stack = encoder.encode_image(&sample.image)?;
        Ok(Self::from_stack(
            stack,
            sample.gt_map.clone(),
            (sample.image.height, sample.image.width),
            &sample.class_name,
        ))
    }

    pub fn from_stack(
        stack: PatchFeatureStack,
        gt: Vec<f64>,
        gt_dims: (usize, usize),
        class_name: &str,
    ) -> Self {
        let pooled = stack
            .layers
            .iter()
            .map(|l| l.with_class_token().mean_rows().into_vec())
            .collect();
        Self {
            stack,
            pooled,
            gt: gt.into(),
            gt_dims,
            class_name: class_name.to_string(),
        }
    }
}

/// Shared per-run graph inputs.
pub struct LossGraph<'a> {
    pub encoder: &'a dyn FrozenEncoder,
    pub template: PromptTemplate,
    pub loss: LossConfig,
    pub temperature: f64,
    upsample: std::collections::HashMap<(usize, usize, usize, usize), Arc<SparseRows>>,
}

impl<'a> LossGraph<'a> {
    pub fn new(encoder: &'a dyn FrozenEncoder, loss: LossConfig, temperature: f64) -> Self {
        Self {
            encoder,
            template: PromptTemplate::default(),
            loss,
            temperature,
            upsample: Default::default(),
        }
    }

    fn upsampler(&mut self, grid: (usize, usize), target: (usize, usize)) -> Arc<SparseRows> {
        self.upsample
            .entry((grid.0, grid.1, target.0, target.1))
            .or_insert_with(|| Arc::new(bilinear_operator(grid.0, grid.1, target.0, target.1)))
            .clone()
    }

    /// Differentiable summed focal + dice loss over all layers of one item,
    /// vision-enhanced branch only, class name used verbatim.
    pub fn item_loss(&mut self, tape: &mut Tape, vars: &BankVars, item: &TrainingItem) -> Result<Var> {
        let layouts: [PromptLayout; 2] =
            prompt_layouts(self.encoder, &self.template, &item.class_name, false)?;
        let side = item.stack.grid_side;
        if item.gt_dims.0 < side || item.gt_dims.1 < side {
            return Err(Error::Shape(format!(
                "ground truth {:?} smaller than the {side}x{side} patch grid",
                item.gt_dims
            )));
        }
        let up = self.upsampler((side, side), item.gt_dims);
        let t = self.temperature;
        let diff = tape.constant(Mat::from_vec(2, 1, vec![-t, t])?);
        let mut terms = Vec::with_capacity(2 * item.stack.layers.len());
        for (i, layer) in item.stack.layers.iter().enumerate() {
            let (normal, abnormal) = crate::prompting::vision_enhanced_pair_graph(
                tape,
                self.encoder,
                &layouts,
                vars,
                i,
                &item.pooled[i],
            )?;
            let (w, b) = vars.patch_projectors[i];
            let grid = tape.constant(layer.patch_grid.clone());
            let f = tape.matmul(grid, w)?;
            let f = tape.add_row(f, b)?;
            let f = tape.normalize_rows(f);
            let pair = tape.concat_rows(&[normal, abnormal])?;
            let pair_t = tape.transpose(pair);
            let logits = tape.matmul(f, pair_t)?;
            let margin = tape.matmul(logits, diff)?;
            let margin = tape.linear(margin, up.clone())?;
            let prob = tape.sigmoid(margin);
            terms.push(tape.focal(
                prob,
                item.gt.clone(),
                self.loss.focal_alpha,
                self.loss.focal_gamma,
            )?);
            terms.push(tape.dice(prob, item.gt.clone(), self.loss.dice_epsilon)?);
        }
        tape.sum(&terms)
    }

    /// Mean item loss over a batch and its gradient with respect to every
    /// bank parameter.
    pub fn batch_loss_and_grad(
        &mut self,
        bank: &PromptBank,
        items: &[&TrainingItem],
    ) -> Result<(f64, PromptBank)> {
        let mut tape = Tape::new();
        let vars = BankVars::register(&mut tape, bank);
        let mut losses = Vec::with_capacity(items.len());
        for item in items {
            losses.push(self.item_loss(&mut tape, &vars, item)?);
        }
        let total = tape.sum(&losses)?;
        let mean = tape.scale(total, 1.0 / items.len() as f64);
        let value = tape.value(mean).as_slice()[0];
        let grads = tape.backward(mean)?;
        Ok((value, vars.gradients(&grads, bank)))
    }
}

/// Per-layer vision-enhanced maps at ground-truth resolution, composed from
/// the plain (non-differentiable) operations.
pub fn vision_maps(
    bank: &PromptBank,
    encoder: &dyn FrozenEncoder,
    item: &TrainingItem,
    temperature: f64,
) -> Result<Vec<ScoreMap>> {
    let template = PromptTemplate::default();
    let side = item.stack.grid_side;
    item.stack
        .layers
        .iter()
        .enumerate()
        .map(|(i, layer)| {
            let patches = project_patches(&layer.patch_grid, &bank.patch_projectors[i])?;
            let vp = make_mvp(&layer.with_class_token(), &bank.vision_projectors[i])?;
            let vq = fuse_query(&bank.query_tokens, &vp)?;
            let seqs = assemble_prompt(
                encoder,
                &template,
                &item.class_name,
                bank,
                QuerySource::VisionEnhanced(&vq),
            )?;
            let pair = embed_prompt_pair(&seqs, bank, encoder)?;
            score_map(&patches, (side, side), &pair, item.gt_dims, temperature)
        })
        .collect()
}

/// Plain-path training objective for one item.
pub fn item_loss(
    bank: &PromptBank,
    encoder: &dyn FrozenEncoder,
    item: &TrainingItem,
    temperature: f64,
    loss: &LossConfig,
) -> Result<f64> {
    let maps = vision_maps(bank, encoder, item, temperature)?;
    total_loss(&maps, &item.gt, loss)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, bank: &mut PromptBank, grad: &PromptBank, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        let grads = grad.flatten();
        let mut k = 0;
        for slice in bank.params_mut() {
            for p in slice.iter_mut() {
                let g = grads[k];
                self.m[k] = cfg.beta1 * self.m[k] + (1.0 - cfg.beta1) * g;
                self.v[k] = cfg.beta2 * self.v[k] + (1.0 - cfg.beta2) * g * g;
                let mhat = self.m[k] / bc1;
                let vhat = self.v[k] / bc2;
                *p = snap(*p - cfg.learning_rate * mhat / (vhat.sqrt() + cfg.adam_epsilon));
                k += 1;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
}

impl LogRecord {
    pub fn line(&self) -> String {
        format!("step={} epoch={} loss={:.9}", self.step, self.epoch, self.loss)
    }
}

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"ZSADCKPT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub encoder: EncoderSpec,
    pub scoring: ScoringConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub dataset_id: String,
    /// Always `None`: no clipping is applied.
    pub gradient_clipping: Option<f64>,
    /// Always zero: no decay is applied.
    pub weight_decay: f64,
}

impl CheckpointHeader {
    pub fn new(
        encoder: EncoderSpec,
        scoring: ScoringConfig,
        loss: LossConfig,
        train: TrainConfig,
        dataset_id: impl Into<String>,
    ) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            encoder,
            scoring,
            loss,
            train,
            dataset_id: dataset_id.into(),
            gradient_clipping: None,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub bank: PromptBank,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRecord>,
}

/// Optimizes a freshly initialized bank on `items`.
///
/// The bank is initialized from `train.seed`; batches are drawn from a
/// separate ChaCha8 stream seeded with `train.seed ^ SHUFFLE_SALT`.
pub fn train_items(
    items: &[TrainingItem],
    encoder: &dyn FrozenEncoder,
    train: &TrainConfig,
    loss: &LossConfig,
    scoring: &ScoringConfig,
    dataset_id: &str,
    mut log_sink: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    train.validate()?;
    loss.validate()?;
    scoring.validate()?;
    if items.is_empty() {
        return Err(Error::Dataset("empty training set".into()));
    }
    let spec = encoder.spec().clone();
    let mut bank = PromptBank::init(&spec, train.seed)?;
    let mut adam = Adam::new(bank.param_count());
    let mut graph = LossGraph::new(encoder, *loss, scoring.temperature);
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ SHUFFLE_SALT);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut log = Vec::new();

    if let Some(sink) = log_sink.as_deref_mut() {
        writeln!(
            sink,
            "# learning_rate={} epochs={} batch_size={} seed={} items={}",
            train.learning_rate,
            train.epochs,
            train.batch_size,
            train.seed,
            items.len()
        )
        .map_err(|e| Error::io("<training log>", e))?;
    }

    let mut step = 0;
    for epoch in 1..=train.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(train.batch_size) {
            step += 1;
            let batch: Vec<&TrainingItem> = chunk.iter().map(|&i| &items[i]).collect();
            let (value, grad) = graph.batch_loss_and_grad(&bank, &batch)?;
            if !value.is_finite() || !grad.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss {value} at step {step} (epoch {epoch}); aborting"
                )));
            }
            adam.step(&mut bank, &grad, train);
            let rec = LogRecord {
                step,
                epoch,
                loss: value,
            };
            if let Some(sink) = log_sink.as_deref_mut() {
                writeln!(sink, "{}", rec.line()).map_err(|e| Error::io("<training log>", e))?;
            }
            log.push(rec);
        }
    }
    let header = CheckpointHeader::new(spec, *scoring, *loss, *train, dataset_id);
    Ok(TrainOutcome {
        checkpoint: Checkpoint { header, bank },
        log,
    })
}

const SHUFFLE_SALT: u64 = 0x5eed_0f5f_ff1e;

/// Trains on the annotated (test) split of an auxiliary dataset.
pub fn train(
    manifest: &DatasetManifest,
    encoder: &dyn FrozenEncoder,
    train: &TrainConfig,
    loss: &LossConfig,
    scoring: &ScoringConfig,
    log_sink: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    let size = encoder.spec().image_size;
    let items = manifest
        .entries
        .iter()
        .filter(|e| e.split == Split::Test)
        .map(|e| {
            let s = load_sample(&manifest.root, e, size)?;
            TrainingItem::new(encoder, &s)
        })
        .collect::<Result<Vec<_>>>()?;
    if items.is_empty() {
        return Err(Error::Dataset(format!(
            "no annotated test-split images under {}",
            manifest.root.display()
        )));
    }
    train_items(
        &items,
        encoder,
        train,
        loss,
        scoring,
        &manifest.dataset_id()?,
        log_sink,
    )
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&ckpt.header.format_version.to_le_bytes());
    let header = serde_json::to_vec(&ckpt.header)?;
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    let params = ckpt.bank.named_params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, (rows, cols), values) in params {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(rows as u32).to_le_bytes());
        out.extend_from_slice(&(cols as u32).to_le_bytes());
        for v in values {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let digest = fnv1a(&out);
    out.extend_from_slice(&digest.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint {
                offset: self.pos,
                reason: format!(
                    "truncated while reading {what}: need {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn corrupt(&self, reason: impl Into<String>) -> Error {
        Error::Checkpoint {
            offset: self.pos,
            reason: reason.into(),
        }
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Checkpoint {
            offset: 0,
            reason: "bad magic; not a checkpoint file".into(),
        });
    }
    let version = r.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header_len = r.u32("header length")? as usize;
    let header_at = r.pos;
    let header_bytes = r.take(header_len, "header")?;
    let header: CheckpointHeader = serde_json::from_slice(header_bytes).map_err(|e| Error::Checkpoint {
        offset: header_at,
        reason: format!("bad header: {e}"),
    })?;
    if header.format_version != version {
        return Err(Error::Checkpoint {
            offset: header_at,
            reason: "header version disagrees with file version".into(),
        });
    }
    header.encoder.validate()?;

    let mut bank = PromptBank::zeros_like_spec(&header.encoder);
    let expected: Vec<(String, (usize, usize))> = bank
        .named_params()
        .into_iter()
        .map(|(n, s, _)| (n, s))
        .collect();
    let count = r.u32("parameter count")? as usize;
    if count != expected.len() {
        return Err(r.corrupt(format!(
            "{count} parameters stored, encoder layout needs {}",
            expected.len()
        )));
    }
    let mut slices = bank.params_mut();
    for (k, (exp_name, exp_shape)) in expected.iter().enumerate() {
        let name_len = r.u16("parameter name length")? as usize;
        let name_at = r.pos;
        let name = std::str::from_utf8(r.take(name_len, "parameter name")?)
            .map_err(|_| Error::Checkpoint {
                offset: name_at,
                reason: "parameter name is not utf-8".into(),
            })?
            .to_string();
        if &name != exp_name {
            return Err(Error::Checkpoint {
                offset: name_at,
                reason: format!("expected parameter {exp_name:?}, found {name:?}"),
            });
        }
        let rows = r.u32("rows")? as usize;
        let cols = r.u32("cols")? as usize;
        if (rows, cols) != *exp_shape {
            return Err(r.corrupt(format!(
                "parameter {name} has shape {rows}x{cols}, expected {exp_shape:?}"
            )));
        }
        let data = r.take(rows * cols * 4, &format!("values of {name}"))?;
        for (dst, chunk) in slices[k].iter_mut().zip(data.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        }
    }
    drop(slices);
    let body_end = r.pos;
    let stored = r.u64("checksum")?;
    if stored != fnv1a(&bytes[..body_end]) {
        return Err(Error::Checkpoint {
            offset: body_end,
            reason: "checksum mismatch".into(),
        });
    }
    if r.pos != bytes.len() {
        return Err(r.corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { header, bank })
}

/// Writes to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ckpt)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
