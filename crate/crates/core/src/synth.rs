//! Synthetic datasets: textured backgrounds with planted rectangular
//! blobs aligned to the patch grid.

use std::fs;
use std::path::Path;

use image::{GrayImage, Luma, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{scan_dataset, DatasetManifest, Image, Layout, Sample, Split, GOOD};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub image_size: usize,
    pub patch_size: usize,
    pub classes: Vec<String>,
    pub train_good: usize,
    pub test_good: usize,
    pub test_defect: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            classes: vec!["widget".into(), "pcb2".into()],
            train_good: 2,
            test_good: 3,
            test_defect: 3,
            seed: 0,
        }
    }
}

fn class_color(class_index: usize) -> [f64; 3] {
    let t = class_index as f64 * 0.37;
    [
        0.35 + 0.15 * (t * 5.0).sin(),
        0.45 + 0.15 * (t * 3.0).cos(),
        0.55 + 0.1 * (t * 7.0).sin(),
    ]
}

/// One image with its mask. Anomalous images get a blob of 2 to 3 patches
/// per side placed on patch boundaries.
pub fn synth_sample<R: Rng>(
    rng: &mut R,
    size: usize,
    patch: usize,
    class_name: &str,
    class_index: usize,
    anomalous: bool,
) -> Sample {
    let base = class_color(class_index);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let freq: f64 = rng.random_range(0.2..0.5);
    let mut data = vec![0.0; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let tex = 0.08 * ((x as f64 * freq + phase).sin() + (y as f64 * freq * 0.7).cos());
            for c in 0..3 {
                let noise: f64 = rng.random_range(-0.03..0.03);
                data[(y * size + x) * 3 + c] = (base[c] + tex + noise).clamp(0.0, 1.0);
            }
        }
    }
    let mut gt = vec![0.0; size * size];
    if anomalous {
        let cells = size / patch;
        let bh = rng.random_range(2..=3.min(cells));
        let bw = rng.random_range(2..=3.min(cells));
        let y0 = rng.random_range(0..=cells - bh) * patch;
        let x0 = rng.random_range(0..=cells - bw) * patch;
        for y in y0..y0 + bh * patch {
            for x in x0..x0 + bw * patch {
                gt[y * size + x] = 1.0;
                for c in 0..3 {
                    let noise: f64 = rng.random_range(-0.05..0.05);
                    data[(y * size + x) * 3 + c] = (1.0 - base[c] + noise).clamp(0.0, 1.0);
                }
            }
        }
    }
    Sample {
        image: Image {
            height: size,
            width: size,
            data,
        },
        gt_map: gt,
        image_label: u8::from(anomalous),
        class_name: class_name.to_string(),
        defect_type: if anomalous { "blob".into() } else { GOOD.into() },
        split: Split::Test,
    }
}

/// `n` samples of one class, each with a planted blob.
pub fn synthetic_samples(n: usize, size: usize, patch: usize, class_name: &str, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| synth_sample(&mut rng, size, patch, class_name, 0, true))
        .collect()
}

/// `n` samples of one class, alternating anomalous and good (first is
/// anomalous).
pub fn mixed_samples(n: usize, size: usize, patch: usize, class_name: &str, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| synth_sample(&mut rng, size, patch, class_name, 0, i % 2 == 0))
        .collect()
}

fn save_rgb(path: &Path, image: &Image) -> Result<()> {
    let buf: Vec<u8> = image
        .data
        .iter()
        .map(|v| (v * 255.0).round() as u8)
        .collect();
    let img = RgbImage::from_raw(image.width as u32, image.height as u32, buf)
        .ok_or_else(|| Error::Shape("rgb buffer".into()))?;
    save(path, |p| img.save(p))
}

fn save_mask(path: &Path, mask: &[f64], size: usize) -> Result<()> {
    let mut img = GrayImage::new(size as u32, size as u32);
    for (i, &m) in mask.iter().enumerate() {
        img.put_pixel((i % size) as u32, (i / size) as u32, Luma([if m > 0.5 { 255 } else { 0 }]));
    }
    save(path, |p| img.save(p))
}

fn save(path: &Path, f: impl FnOnce(&Path) -> image::ImageResult<()>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    f(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Writes a dataset in the `<class>/{train,test,ground_truth}` layout and
/// returns its manifest.
pub fn write_dataset(root: &Path, spec: &SynthSpec) -> Result<DatasetManifest> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (size, patch) = (spec.image_size, spec.patch_size);
    for (ci, class) in spec.classes.iter().enumerate() {
        let dir = root.join(class);
        for i in 0..spec.train_good {
            let s = synth_sample(&mut rng, size, patch, class, ci, false);
            save_rgb(&dir.join(format!("train/good/{i:03}.png")), &s.image)?;
        }
        for i in 0..spec.test_good {
            let s = synth_sample(&mut rng, size, patch, class, ci, false);
            save_rgb(&dir.join(format!("test/good/{i:03}.png")), &s.image)?;
        }
        for i in 0..spec.test_defect {
            let s = synth_sample(&mut rng, size, patch, class, ci, true);
            save_rgb(&dir.join(format!("test/blob/{i:03}.png")), &s.image)?;
            save_mask(&dir.join(format!("ground_truth/blob/{i:03}_mask.png")), &s.gt_map, size)?;
        }
    }
    scan_dataset(root, Layout::Mvtec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_sample;

    #[test]
    fn blobs_are_patch_aligned() {
        for s in mixed_samples(6, 32, 4, "x", 3) {
            if s.image_label == 1 {
                let area = s.gt_map.iter().filter(|&&v| v > 0.0).count();
                assert_eq!(area % 16, 0);
                assert!(area >= 64);
            } else {
                assert!(s.gt_map.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(synthetic_samples(4, 16, 4, "x", 1), synthetic_samples(4, 16, 4, "x", 1));
    }

    #[test]
    fn written_dataset_scans_back() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_dataset(dir.path(), &SynthSpec::default()).unwrap();
        assert_eq!(m.classes, vec!["pcb2".to_string(), "widget".to_string()]);
        assert_eq!(m.test_entries().count(), 12);
        let e = m.test_entries().find(|e| !e.is_good()).unwrap();
        let s = load_sample(&m.root, e, 32).unwrap();
        assert!(s.gt_map.contains(&1.0));
    }
}
