//! Class-name filtering.
//!
//! Dataset class names are often codes ("pcb2", "02") or jargon
//! ("pipe_fryum"). Before building the vision-enhanced prompts, trailing
//! numbering is stripped, and the name is swapped for a generic term when
//! the frozen model finds the generic sentence closer to the image.

use serde::{Deserialize, Serialize};

use crate::data::{load_sample, DatasetManifest, Image};
use crate::encoder::FrozenEncoder;
use crate::error::{Error, Result};
use crate::prompting::normalize_class_word;
use crate::tensor::cosine;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CnfMode {
    /// Decide independently for every image.
    #[default]
    PerImage,
    /// Majority vote over all images of a class; ties keep the class name.
    PerClassMajority,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnfConfig {
    pub enabled: bool,
    pub generic_term: String,
    pub mode: CnfMode,
}

impl Default for CnfConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            generic_term: "object".into(),
            mode: CnfMode::PerImage,
        }
    }
}

impl CnfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.generic_term.trim().is_empty() {
            return Err(Error::Config("generic_term must not be empty".into()));
        }
        Ok(())
    }
}

/// Drops trailing digits, then a trailing `_` or `-`. Names that would
/// become empty are returned unchanged.
pub fn strip_numeric(class_name: &str) -> String {
    let stripped = class_name
        .trim_end_matches(|c: char| c.is_ascii_digit())
        .trim_end_matches(['_', '-']);
    if stripped.is_empty() {
        class_name.to_string()
    } else {
        stripped.to_string()
    }
}

pub fn class_sentence(class_name: &str) -> String {
    format!("A photo of a {}", normalize_class_word(class_name))
}

pub fn generic_sentence(term: &str) -> String {
    if term == "object" {
        "A photo of an object".to_string()
    } else {
        format!("A photo of a {term}")
    }
}

/// Similarities of the image to the class sentence and to the generic
/// sentence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CnfScores {
    pub class_similarity: f64,
    pub generic_similarity: f64,
}

impl CnfScores {
    pub fn prefers_generic(&self) -> bool {
        self.generic_similarity > self.class_similarity
    }
}

pub fn cnf_scores(
    image_embedding: &[f64],
    class_name: &str,
    generic_term: &str,
    encoder: &dyn FrozenEncoder,
) -> Result<CnfScores> {
    let class_text = encoder.embed_sentence(&class_sentence(class_name))?;
    let generic_text = encoder.embed_sentence(&generic_sentence(generic_term))?;
    Ok(CnfScores {
        class_similarity: cosine(image_embedding, &class_text),
        generic_similarity: cosine(image_embedding, &generic_text),
    })
}

/// Decision given an already computed global image embedding.
pub fn filter_with_embedding(
    image_embedding: &[f64],
    class_name: &str,
    config: &CnfConfig,
    encoder: &dyn FrozenEncoder,
) -> Result<String> {
    if !config.enabled {
        return Ok(class_name.to_string());
    }
    let scores = cnf_scores(image_embedding, class_name, &config.generic_term, encoder)?;
    Ok(if scores.prefers_generic() {
        config.generic_term.clone()
    } else {
        class_name.to_string()
    })
}

/// `class_name` must already be numeric-stripped.
pub fn filter_class_name(
    image: &Image,
    class_name: &str,
    config: &CnfConfig,
    encoder: &dyn FrozenEncoder,
) -> Result<String> {
    if !config.enabled {
        return Ok(class_name.to_string());
    }
    let stack = encoder.encode_image(image)?;
    filter_with_embedding(&stack.global_embedding, class_name, config, encoder)
}

/// Resolves a per-class majority from per-image decisions.
pub fn majority_decision(class_name: &str, decisions: &[String], generic_term: &str) -> String {
    let generic = decisions.iter().filter(|d| *d == generic_term).count();
    if 2 * generic > decisions.len() {
        generic_term.to_string()
    } else {
        class_name.to_string()
    }
}

/// One row of the class-name decision report.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnfRow {
    pub image: String,
    pub original: String,
    pub stripped: String,
    pub final_class: String,
}

/// Decisions for every test image of a dataset, in manifest order.
pub fn cnf_report(
    manifest: &DatasetManifest,
    config: &CnfConfig,
    encoder: &dyn FrozenEncoder,
) -> Result<Vec<CnfRow>> {
    config.validate()?;
    let size = encoder.spec().image_size;
    let mut rows = manifest
        .test_entries()
        .map(|e| {
            let stripped = strip_numeric(&e.class_name);
            let sample = load_sample(&manifest.root, e, size)?;
            let final_class = filter_class_name(&sample.image, &stripped, config, encoder)?;
            Ok(CnfRow {
                image: e.image_path.to_string_lossy().into_owned(),
                original: e.class_name.clone(),
                stripped,
                final_class,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if config.enabled && config.mode == CnfMode::PerClassMajority {
        for class in &manifest.classes {
            let decisions: Vec<String> = rows
                .iter()
                .filter(|r| &r.original == class)
                .map(|r| r.final_class.clone())
                .collect();
            let stripped = strip_numeric(class);
            let verdict = majority_decision(&stripped, &decisions, &config.generic_term);
            rows.iter_mut()
                .filter(|r| &r.original == class)
                .for_each(|r| r.final_class = verdict.clone());
        }
    }
    Ok(rows)
}

pub fn cnf_csv(rows: &[CnfRow]) -> String {
    let mut out = String::from("image,original,stripped,final\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.image, r.original, r.stripped, r.final_class));
    }
    out
}
