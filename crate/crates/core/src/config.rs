//! Single flat JSON run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cnf::{CnfConfig, CnfMode};
use crate::encoder::EncoderSpec;
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::metrics::{AuproConfig, PixelPooling};
use crate::scoring::ScoringConfig;
use crate::train::TrainConfig;

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "ZSAD_CONFIG";

/// Every key is optional; missing keys take the documented defaults and
/// unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Registered encoder adapter name.
    pub encoder: String,
    pub encoder_weights: Option<PathBuf>,
    pub num_vision_layers: usize,
    pub selected_layers: Vec<usize>,
    pub vision_dims: Vec<usize>,
    pub text_dim: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub text_seq_len: usize,
    pub num_text_layers: usize,
    pub vocab_size: usize,
    pub encoder_seed: u64,

    pub alpha: f64,
    pub sigma: f64,
    pub n1: usize,
    pub n2: usize,
    pub temperature: f64,

    pub dice_epsilon: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,

    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    /// Seeds prompt initialization and batch shuffling.
    pub seed: u64,

    pub cnf_enabled: bool,
    pub generic_term: String,
    pub cnf_mode: CnfMode,

    pub fpr_limit: f64,
    pub num_thresholds: usize,
    pub pixel_pooling: PixelPooling,

    /// Dataset root or manifest JSON for training.
    pub train_root: Option<PathBuf>,
    /// Dataset root or manifest JSON for inference, evaluation and reports.
    pub test_root: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    /// Where `eval` reads score maps; falls back to `output_dir`.
    pub predictions_dir: Option<PathBuf>,
    /// Also write raw little-endian f32 score maps.
    pub export_raw: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let e = EncoderSpec::default();
        let s = ScoringConfig::default();
        let l = LossConfig::default();
        let t = TrainConfig::default();
        let c = CnfConfig::default();
        let a = AuproConfig::default();
        Self {
            encoder: "synthetic".into(),
            encoder_weights: None,
            num_vision_layers: e.num_vision_layers,
            selected_layers: e.selected_layers,
            vision_dims: e.vision_dims,
            text_dim: e.text_dim,
            patch_size: e.patch_size,
            image_size: e.image_size,
            text_seq_len: e.text_seq_len,
            num_text_layers: e.num_text_layers,
            vocab_size: e.vocab_size,
            encoder_seed: e.seed,
            alpha: s.alpha,
            sigma: s.sigma,
            n1: s.n1,
            n2: s.n2,
            temperature: s.temperature,
            dice_epsilon: l.dice_epsilon,
            focal_alpha: l.focal_alpha,
            focal_gamma: l.focal_gamma,
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            batch_size: t.batch_size,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_epsilon: t.adam_epsilon,
            seed: t.seed,
            cnf_enabled: c.enabled,
            generic_term: c.generic_term,
            cnf_mode: c.mode,
            fpr_limit: a.fpr_limit,
            num_thresholds: a.num_thresholds,
            pixel_pooling: PixelPooling::default(),
            train_root: None,
            test_root: None,
            output_dir: PathBuf::from("out"),
            checkpoint: None,
            predictions_dir: None,
            export_raw: false,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn encoder_spec(&self) -> EncoderSpec {
        EncoderSpec {
            num_vision_layers: self.num_vision_layers,
            selected_layers: self.selected_layers.clone(),
            vision_dims: self.vision_dims.clone(),
            text_dim: self.text_dim,
            patch_size: self.patch_size,
            image_size: self.image_size,
            text_seq_len: self.text_seq_len,
            num_text_layers: self.num_text_layers,
            vocab_size: self.vocab_size,
            seed: self.encoder_seed,
        }
    }

    pub fn scoring(&self) -> ScoringConfig {
        ScoringConfig {
            alpha: self.alpha,
            sigma: self.sigma,
            n1: self.n1,
            n2: self.n2,
            temperature: self.temperature,
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            dice_epsilon: self.dice_epsilon,
            focal_alpha: self.focal_alpha,
            focal_gamma: self.focal_gamma,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_epsilon: self.adam_epsilon,
        }
    }

    pub fn cnf(&self) -> CnfConfig {
        CnfConfig {
            enabled: self.cnf_enabled,
            generic_term: self.generic_term.clone(),
            mode: self.cnf_mode,
        }
    }

    pub fn aupro(&self) -> AuproConfig {
        AuproConfig {
            fpr_limit: self.fpr_limit,
            num_thresholds: self.num_thresholds,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_spec().validate()?;
        self.scoring().validate()?;
        self.loss().validate()?;
        self.train().validate()?;
        self.cnf().validate()?;
        if !(self.fpr_limit > 0.0 && self.fpr_limit <= 1.0) || self.num_thresholds < 2 {
            return Err(Error::Config(
                "fpr_limit must lie in (0, 1] and num_thresholds be >= 2".into(),
            ));
        }
        Ok(())
    }
}
