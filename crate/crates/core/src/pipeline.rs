//! Dataset-level inference.

use std::collections::BTreeMap;
use std::path::Path;

use crate::cnf::{majority_decision, strip_numeric, CnfMode};
use crate::data::{load_sample, DatasetManifest, ManifestEntry};
use crate::error::Result;
use crate::export::{write_prediction, Sidecar};
use crate::scoring::{AnomalyResult, InferenceEngine};

/// Per-class class words when the engine's filter votes per class;
/// empty in per-image mode or when filtering is off.
pub fn class_words(engine: &InferenceEngine, manifest: &DatasetManifest) -> Result<BTreeMap<String, String>> {
    let cnf = engine.cnf();
    let mut out = BTreeMap::new();
    if !cnf.enabled || cnf.mode != CnfMode::PerClassMajority {
        return Ok(out);
    }
    let size = engine.encoder().spec().image_size;
    let mut votes: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for e in manifest.test_entries() {
        let sample = load_sample(&manifest.root, e, size)?;
        let stack = engine.encoder().encode_image(&sample.image)?;
        votes
            .entry(&e.class_name)
            .or_default()
            .push(engine.resolve_class(&stack, &e.class_name)?);
    }
    for (class, decisions) in votes {
        let word = majority_decision(&strip_numeric(class), &decisions, &cnf.generic_term);
        out.insert(class.to_string(), word);
    }
    Ok(out)
}

/// Runs one test image; `class_word` bypasses per-image filtering.
pub fn infer_entry(
    engine: &InferenceEngine,
    manifest: &DatasetManifest,
    entry: &ManifestEntry,
    class_word: Option<&str>,
) -> Result<AnomalyResult> {
    let size = engine.encoder().spec().image_size;
    let sample = load_sample(&manifest.root, entry, size)?;
    let stack = engine.encoder().encode_image(&sample.image)?;
    let word = match class_word {
        Some(w) => w.to_string(),
        None => engine.resolve_class(&stack, &entry.class_name)?,
    };
    engine.infer_stack(&stack, (size, size), &word)
}

/// Sequential inference over the test split, writing one prediction per
/// image in manifest order.
pub fn infer_dataset(
    engine: &InferenceEngine,
    manifest: &DatasetManifest,
    out_dir: &Path,
    raw: bool,
) -> Result<Vec<Sidecar>> {
    let words = class_words(engine, manifest)?;
    manifest
        .test_entries()
        .map(|e| {
            let r = infer_entry(engine, manifest, e, words.get(&e.class_name).map(String::as_str))?;
            write_prediction(out_dir, e, &r, raw)
        })
        .collect()
}
