//! MVTec-style dataset ingestion.
//!
//! Expected layout under the dataset root:
//!
//! ```text
//! <class>/train/good/*.png
//! <class>/test/<defect>/*.png
//! <class>/ground_truth/<defect>/<stem>_mask.png   (or <stem>.png)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resample::{resize_bilinear, resize_nearest};

pub const GOOD: &str = "good";

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp", "tif", "tiff"];

/// Interleaved `height × width × 3` RGB image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub class_name: String,
    pub split: Split,
    pub defect_type: String,
    /// Relative to the manifest root.
    pub image_path: PathBuf,
    pub mask_path: Option<PathBuf>,
}

impl ManifestEntry {
    pub fn is_good(&self) -> bool {
        self.defect_type == GOOD
    }

    /// `<class>/<defect>/<stem>`, unique within a split.
    pub fn key(&self) -> String {
        let stem = self
            .image_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        format!("{}/{}/{}", self.class_name, self.defect_type, stem)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    Mvtec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub classes: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn test_entries(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.split == Split::Test)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Stable identifier of the dataset contents: hash of the classes and
    /// relative entries, independent of where the root lives.
    pub fn dataset_id(&self) -> Result<String> {
        let doc = serde_json::to_vec(&(&self.classes, &self.entries))?;
        Ok(format!("{:016x}", crate::encoder::fnv1a(&doc)))
    }

    pub fn absolute(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }
}

fn sorted_dir(path: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(path, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

fn is_image(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn find_mask(gt_dir: &Path, image: &Path) -> Option<PathBuf> {
    let stem = image.file_stem()?.to_string_lossy().into_owned();
    for name in [format!("{stem}_mask"), stem] {
        for ext in IMAGE_EXTENSIONS {
            let candidate = gt_dir.join(format!("{name}.{ext}"));
            if candidate.is_file() {
                return Some(candidate);
            }
        }
    }
    None
}

fn relative(root: &Path, path: &Path) -> PathBuf {
    path.strip_prefix(root).unwrap_or(path).to_path_buf()
}

/// A manifest JSON file, or a dataset directory to scan.
pub fn open_dataset(path: &Path) -> Result<DatasetManifest> {
    if path.is_file() {
        DatasetManifest::load_json(path)
    } else {
        scan_dataset(path, Layout::Mvtec)
    }
}

pub fn scan_dataset(root: &Path, layout: Layout) -> Result<DatasetManifest> {
    let Layout::Mvtec = layout;
    if !root.is_dir() {
        return Err(Error::Dataset(format!(
            "dataset root {} does not exist",
            root.display()
        )));
    }
    let mut classes = Vec::new();
    let mut entries = Vec::new();
    let mut missing = Vec::new();

    for class_dir in sorted_dir(root)?.into_iter().filter(|p| p.is_dir()) {
        let has_split = [Split::Train, Split::Test]
            .iter()
            .any(|s| class_dir.join(s.dir_name()).is_dir());
        if !has_split {
            continue;
        }
        let class_name = class_dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        classes.push(class_name.clone());

        for split in [Split::Train, Split::Test] {
            let split_dir = class_dir.join(split.dir_name());
            if !split_dir.is_dir() {
                continue;
            }
            for defect_dir in sorted_dir(&split_dir)?.into_iter().filter(|p| p.is_dir()) {
                let defect_type = defect_dir
                    .file_name()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                let gt_dir = class_dir.join("ground_truth").join(&defect_type);
                for image in sorted_dir(&defect_dir)?.into_iter().filter(|p| is_image(p)) {
                    let mask_path = if defect_type == GOOD {
                        None
                    } else {
                        match find_mask(&gt_dir, &image) {
                            Some(m) => Some(relative(root, &m)),
                            None if split == Split::Test => {
                                missing.push(image.clone());
                                None
                            }
                            None => None,
                        }
                    };
                    entries.push(ManifestEntry {
                        class_name: class_name.clone(),
                        split,
                        defect_type: defect_type.clone(),
                        image_path: relative(root, &image),
                        mask_path,
                    });
                }
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingMask(missing));
    }
    if entries.is_empty() {
        return Err(Error::Dataset(format!(
            "no images found under {}",
            root.display()
        )));
    }
    entries.sort_by(|a, b| {
        (&a.class_name, a.split, &a.defect_type, &a.image_path).cmp(&(
            &b.class_name,
            b.split,
            &b.defect_type,
            &b.image_path,
        ))
    });
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        classes,
        entries,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    /// `h × w`, values in `{0, 1}`.
    pub gt_map: Vec<f64>,
    pub image_label: u8,
    pub class_name: String,
    pub defect_type: String,
    pub split: Split,
}

impl Sample {
    pub fn size(&self) -> usize {
        self.image.height
    }
}

pub fn read_rgb(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    Ok(Image {
        height: h as usize,
        width: w as usize,
        data: rgb.as_raw().iter().map(|&v| v as f64 / 255.0).collect(),
    })
}

/// Single-channel image scaled to `[0, 1]`, with its dimensions.
pub fn read_gray(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let gray = img.to_luma16();
    let (w, h) = gray.dimensions();
    Ok((
        gray.as_raw().iter().map(|&v| v as f64 / 65535.0).collect(),
        h as usize,
        w as usize,
    ))
}

pub fn resize_image(image: &Image, size: usize) -> Image {
    if image.height == size && image.width == size {
        return image.clone();
    }
    Image {
        height: size,
        width: size,
        data: resize_bilinear(&image.data, image.height, image.width, 3, size, size),
    }
}

/// Nearest-neighbor resize then binarize at 0.5.
pub fn resize_mask(mask: &[f64], h: usize, w: usize, size: usize) -> Vec<f64> {
    resize_nearest(mask, h, w, size, size)
        .into_iter()
        .map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
        .collect()
}

/// Ground truth for `entry` at `size × size`; all zeros for good images.
pub fn load_mask(root: &Path, entry: &ManifestEntry, size: usize) -> Result<Vec<f64>> {
    match (&entry.mask_path, entry.is_good()) {
        (Some(mask), false) => {
            let (m, h, w) = read_gray(&root.join(mask))?;
            Ok(resize_mask(&m, h, w, size))
        }
        _ => Ok(vec![0.0; size * size]),
    }
}

pub fn load_sample(root: &Path, entry: &ManifestEntry, image_size: usize) -> Result<Sample> {
    let raw = read_rgb(&root.join(&entry.image_path))?;
    let image = resize_image(&raw, image_size);
    let gt_map = load_mask(root, entry, image_size)?;
    Ok(Sample {
        image,
        gt_map,
        image_label: u8::from(!entry.is_good()),
        class_name: entry.class_name.clone(),
        defect_type: entry.defect_type.clone(),
        split: entry.split,
    })
}
