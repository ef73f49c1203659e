//! Score-map files and their JSON sidecars.
//!
//! Layout under an output directory, per test image:
//! `<class>/<defect>/<stem>.png` (16-bit, min/max normalized),
//! `<class>/<defect>/<stem>.json` and optionally `<stem>.f32` with the raw
//! little-endian values.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use crate::data::{load_mask, DatasetManifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::metrics::EvalRecord;
use crate::scoring::{AnomalyResult, ScoreMap};
use crate::train::write_atomic;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub image: String,
    pub class_name: String,
    pub class_word: String,
    pub s_det: f64,
    pub w: f64,
    pub raw_min: f64,
    pub raw_max: f64,
    pub height: usize,
    pub width: usize,
}

pub fn prediction_base(out_dir: &Path, entry: &ManifestEntry) -> PathBuf {
    out_dir.join(entry.key())
}

fn with_ext(base: &Path, ext: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Maps to 16 bits after min/max normalization; a flat map encodes as 0.
pub fn encode_png16(map: &ScoreMap) -> Result<Vec<u8>> {
    let (lo, hi) = map.min_max();
    let range = hi - lo;
    let px: Vec<u16> = map
        .values
        .iter()
        .map(|&v| {
            if range > 0.0 {
                (((v - lo) / range) * 65535.0).round() as u16
            } else {
                0
            }
        })
        .collect();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(map.width as u32, map.height as u32, px)
            .ok_or_else(|| Error::Shape("score map buffer size".into()))?;
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: PathBuf::from("<score map>"),
            reason: e.to_string(),
        })?;
    Ok(out.into_inner())
}

pub fn write_prediction(
    out_dir: &Path,
    entry: &ManifestEntry,
    result: &AnomalyResult,
    raw: bool,
) -> Result<Sidecar> {
    let base = prediction_base(out_dir, entry);
    if let Some(parent) = base.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let (raw_min, raw_max) = result.s_seg.min_max();
    let sidecar = Sidecar {
        image: entry.key(),
        class_name: entry.class_name.clone(),
        class_word: result.class_word.clone(),
        s_det: result.s_det,
        w: result.w,
        raw_min,
        raw_max,
        height: result.s_seg.height,
        width: result.s_seg.width,
    };
    write_atomic(&with_ext(&base, "png"), &encode_png16(&result.s_seg)?)?;
    let mut json = serde_json::to_vec_pretty(&sidecar)?;
    json.push(b'\n');
    write_atomic(&with_ext(&base, "json"), &json)?;
    if raw {
        let bytes: Vec<u8> = result
            .s_seg
            .values
            .iter()
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect();
        write_atomic(&with_ext(&base, "f32"), &bytes)?;
    }
    Ok(sidecar)
}

pub fn prediction_exists(out_dir: &Path, entry: &ManifestEntry) -> bool {
    let base = prediction_base(out_dir, entry);
    with_ext(&base, "json").is_file() && with_ext(&base, "png").is_file()
}

/// Reads a prediction back. Raw values are used when present; otherwise
/// the PNG is mapped back through the sidecar's min/max.
pub fn read_prediction(out_dir: &Path, entry: &ManifestEntry) -> Result<(ScoreMap, Sidecar)> {
    let base = prediction_base(out_dir, entry);
    let json_path = with_ext(&base, "json");
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text)?;
    let (h, w) = (sidecar.height, sidecar.width);
    let raw_path = with_ext(&base, "f32");
    let values = if raw_path.is_file() {
        let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
        if bytes.len() != 4 * h * w {
            return Err(Error::Shape(format!(
                "{} holds {} bytes, expected {}",
                raw_path.display(),
                bytes.len(),
                4 * h * w
            )));
        }
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect()
    } else {
        let png_path = with_ext(&base, "png");
        let img = image::open(&png_path)
            .map_err(|e| Error::Image {
                path: png_path.clone(),
                reason: e.to_string(),
            })?
            .to_luma16();
        if img.dimensions() != (w as u32, h as u32) {
            return Err(Error::Shape(format!(
                "{} is {:?}, sidecar says {w}x{h}",
                png_path.display(),
                img.dimensions()
            )));
        }
        let range = sidecar.raw_max - sidecar.raw_min;
        img.as_raw()
            .iter()
            .map(|&p| sidecar.raw_min + p as f64 / 65535.0 * range)
            .collect()
    };
    Ok((ScoreMap::new(h, w, values)?, sidecar))
}

/// Pairs every test image with its prediction. Fails listing every image
/// that has none.
pub fn collect_eval_records(manifest: &DatasetManifest, pred_dir: &Path) -> Result<Vec<EvalRecord>> {
    let missing: Vec<PathBuf> = manifest
        .test_entries()
        .filter(|e| !prediction_exists(pred_dir, e))
        .map(|e| e.image_path.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingPredictions(missing));
    }
    manifest
        .test_entries()
        .map(|e| {
            let (map, sidecar) = read_prediction(pred_dir, e)?;
            if map.height != map.width {
                return Err(Error::Shape(format!(
                    "non-square prediction for {}",
                    e.image_path.display()
                )));
            }
            let mask = load_mask(&manifest.root, e, map.height)?;
            Ok(EvalRecord {
                class_name: e.class_name.clone(),
                image_label: !e.is_good(),
                s_det: sidecar.s_det,
                scores: map.values,
                mask: mask.iter().map(|&m| m > 0.5).collect(),
                height: map.height,
                width: map.width,
            })
        })
        .collect()
}
