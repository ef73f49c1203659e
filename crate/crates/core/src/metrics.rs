//! Detection and segmentation metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Area under the ROC curve via the rank statistic; tied scores count ½.
/// `None` when only one class is present.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of average ranks of positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if labels[k] {
                rank_sum += avg;
            }
        }
        i = j + 1;
    }
    let p = pos as f64;
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

/// Step-wise average precision: mean over positives of the precision at
/// their rank. Descending scores, ties broken by index. `None` without
/// positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut tp = 0usize;
    let mut sum = 0.0;
    for (rank, &k) in idx.iter().enumerate() {
        if labels[k] {
            tp += 1;
            sum += tp as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / pos as f64)
}

/// 8-connected components of a binary mask; returns a label per pixel
/// (0 = background) and the component count.
pub fn connected_components(mask: &[bool], h: usize, w: usize) -> (Vec<usize>, usize) {
    assert_eq!(mask.len(), h * w);
    let mut labels = vec![0usize; h * w];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if mask[q] && labels[q] == 0 {
                        labels[q] = count;
                        stack.push(q);
                    }
                }
            }
        }
    }
    (labels, count)
}

/// One map with its binary ground truth.
#[derive(Clone, Debug)]
pub struct MaskedMap<'a> {
    pub scores: &'a [f64],
    pub mask: &'a [bool],
    pub height: usize,
    pub width: usize,
}

/// How the overall pixel metrics are formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelPooling {
    /// Unweighted mean of per-class values.
    #[default]
    PerClass,
    /// Recomputed over the pixels of every class at once.
    Global,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuproConfig {
    pub fpr_limit: f64,
    pub num_thresholds: usize,
}

impl Default for AuproConfig {
    fn default() -> Self {
        Self {
            fpr_limit: 0.3,
            num_thresholds: 200,
        }
    }
}

struct RegionTable {
    /// Scores of the pixels in each anomalous region.
    region_pixels: Vec<Vec<f64>>,
    normal_scores: Vec<f64>,
}

fn region_table(maps: &[MaskedMap]) -> Result<RegionTable> {
    let mut region_pixels = Vec::new();
    let mut normal_scores = Vec::new();
    for m in maps {
        if m.scores.len() != m.height * m.width || m.mask.len() != m.scores.len() {
            return Err(Error::Shape(format!(
                "map of {} values and mask of {} for {}x{}",
                m.scores.len(),
                m.mask.len(),
                m.height,
                m.width
            )));
        }
        let (labels, n) = connected_components(m.mask, m.height, m.width);
        let base = region_pixels.len();
        region_pixels.extend((0..n).map(|_| Vec::new()));
        for (k, &l) in labels.iter().enumerate() {
            if l == 0 {
                normal_scores.push(m.scores[k]);
            } else {
                region_pixels[base + l - 1].push(m.scores[k]);
            }
        }
    }
    Ok(RegionTable {
        region_pixels,
        normal_scores,
    })
}

/// (fpr, mean per-region overlap) at a threshold with prediction `score > t`.
fn pro_point(table: &RegionTable, t: f64) -> (f64, f64) {
    let fp = table.normal_scores.iter().filter(|&&s| s > t).count();
    let fpr = if table.normal_scores.is_empty() {
        0.0
    } else {
        fp as f64 / table.normal_scores.len() as f64
    };
    let pro = table
        .region_pixels
        .iter()
        .map(|r| r.iter().filter(|&&s| s > t).count() as f64 / r.len() as f64)
        .sum::<f64>()
        / table.region_pixels.len() as f64;
    (fpr, pro)
}

/// Normalized area under the per-region-overlap curve up to `fpr_limit`,
/// evaluated at explicit thresholds.
pub fn aupro_at_thresholds(maps: &[MaskedMap], thresholds: &[f64], fpr_limit: f64) -> Result<Option<f64>> {
    let table = region_table(maps)?;
    if table.region_pixels.is_empty() {
        return Ok(None);
    }
    let mut points: Vec<(f64, f64)> = thresholds.iter().map(|&t| pro_point(&table, t)).collect();
    points.push((0.0, 0.0));
    Ok(Some(integrate_curve(points, fpr_limit)))
}

fn integrate_curve(mut points: Vec<(f64, f64)>, limit: f64) -> f64 {
    points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    // Extend horizontally so every curve reaches the limit.
    let last = *points.last().unwrap();
    if last.0 < limit {
        points.push((limit, last.1));
    }
    let mut area = 0.0;
    for pair in points.windows(2) {
        let (x0, y0) = pair[0];
        let (x1, y1) = pair[1];
        if x0 >= limit {
            break;
        }
        if x1 <= limit {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * (y0 + y) / 2.0;
        }
    }
    area / limit
}

/// Thresholds at evenly spaced rank quantiles of the distinct pooled
/// scores, always including the minimum and maximum.
pub fn quantile_thresholds(maps: &[MaskedMap], count: usize) -> Vec<f64> {
    let mut all: Vec<f64> = maps.iter().flat_map(|m| m.scores.iter().copied()).collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    if all.is_empty() {
        return Vec::new();
    }
    let k = count.max(2).min(all.len());
    if k == all.len() {
        return all;
    }
    let mut out: Vec<f64> = (0..k)
        .map(|i| all[i * (all.len() - 1) / (k - 1)])
        .collect();
    out.dedup();
    out
}

/// Per-region-overlap AUC up to `fpr_limit`, normalized to [0, 1].
/// `None` when there are no anomalous regions.
pub fn aupro(maps: &[MaskedMap], config: &AuproConfig) -> Result<Option<f64>> {
    if !(config.fpr_limit > 0.0 && config.fpr_limit <= 1.0) {
        return Err(Error::Config("fpr_limit must lie in (0, 1]".into()));
    }
    let thresholds = quantile_thresholds(maps, config.num_thresholds);
    aupro_at_thresholds(maps, &thresholds, config.fpr_limit)
}

/// Everything the evaluator needs for one test image.
#[derive(Clone, Debug)]
pub struct EvalRecord {
    pub class_name: String,
    pub image_label: bool,
    pub s_det: f64,
    pub scores: Vec<f64>,
    pub mask: Vec<bool>,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_name: String,
    pub image_auroc: Option<f64>,
    pub image_ap: Option<f64>,
    pub pixel_auroc: Option<f64>,
    pub pixel_pro: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub classes: Vec<ClassMetrics>,
    /// Unweighted mean over classes where the metric is defined.
    pub mean: ClassMetrics,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn evaluate_class(class_name: &str, records: &[&EvalRecord], aupro_cfg: &AuproConfig) -> Result<ClassMetrics> {
    let s: Vec<f64> = records.iter().map(|r| r.s_det).collect();
    let l: Vec<bool> = records.iter().map(|r| r.image_label).collect();
    let mut px_s = Vec::new();
    let mut px_l = Vec::new();
    for r in records {
        px_s.extend_from_slice(&r.scores);
        px_l.extend_from_slice(&r.mask);
    }
    let maps: Vec<MaskedMap> = records
        .iter()
        .map(|r| MaskedMap {
            scores: &r.scores,
            mask: &r.mask,
            height: r.height,
            width: r.width,
        })
        .collect();
    Ok(ClassMetrics {
        class_name: class_name.to_string(),
        image_auroc: roc_auc(&s, &l),
        image_ap: average_precision(&s, &l),
        pixel_auroc: roc_auc(&px_s, &px_l),
        pixel_pro: aupro(&maps, aupro_cfg)?,
    })
}

/// Records grouped by class, classes in sorted order.
pub fn group_by_class(records: &[EvalRecord]) -> Vec<(&str, Vec<&EvalRecord>)> {
    let mut by_class: BTreeMap<&str, Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        by_class.entry(&r.class_name).or_default().push(r);
    }
    by_class.into_iter().collect()
}

/// Adds the mean row to per-class results.
pub fn finish_report(
    classes: Vec<ClassMetrics>,
    records: &[EvalRecord],
    aupro_cfg: &AuproConfig,
    pooling: PixelPooling,
) -> Result<MetricReport> {
    let mut mean = ClassMetrics {
        class_name: "mean".into(),
        image_auroc: mean_defined(classes.iter().map(|c| c.image_auroc)),
        image_ap: mean_defined(classes.iter().map(|c| c.image_ap)),
        pixel_auroc: mean_defined(classes.iter().map(|c| c.pixel_auroc)),
        pixel_pro: mean_defined(classes.iter().map(|c| c.pixel_pro)),
    };
    if pooling == PixelPooling::Global {
        let all: Vec<&EvalRecord> = records.iter().collect();
        let pooled = evaluate_class("mean", &all, aupro_cfg)?;
        mean.pixel_auroc = pooled.pixel_auroc;
        mean.pixel_pro = pooled.pixel_pro;
    }
    Ok(MetricReport { classes, mean })
}

pub fn evaluate(records: &[EvalRecord], aupro_cfg: &AuproConfig, pooling: PixelPooling) -> Result<MetricReport> {
    let classes = group_by_class(records)
        .into_iter()
        .map(|(c, rs)| evaluate_class(c, &rs, aupro_cfg))
        .collect::<Result<Vec<_>>>()?;
    finish_report(classes, records, aupro_cfg, pooling)
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| format!("{:.2}", 100.0 * x))
}

impl MetricReport {
    /// Percentages with two decimals; undefined values print as `nan`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,pixel_auroc,pixel_pro,image_auroc,image_ap\n");
        for c in self.classes.iter().chain(std::iter::once(&self.mean)) {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                c.class_name,
                pct(c.pixel_auroc),
                pct(c.pixel_pro),
                pct(c.image_auroc),
                pct(c.image_ap)
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_hand_values() {
        assert_eq!(roc_auc(&[0.1, 0.2, 0.3, 0.4], &[false, false, true, true]), Some(1.0));
        assert_eq!(roc_auc(&[0.5, 0.5], &[false, true]), Some(0.5));
        assert_eq!(roc_auc(&[0.1, 0.2], &[true, true]), None);
        assert_eq!(roc_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]), Some(0.75));
    }

    #[test]
    fn ap_hand_values() {
        let ap = average_precision(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(average_precision(&[0.2, 0.9], &[true, false]), Some(0.5));
        assert_eq!(average_precision(&[0.1], &[false]), None);
    }

    #[test]
    fn components_use_diagonals() {
        let m = [true, false, false, true];
        assert_eq!(connected_components(&m, 2, 2).1, 1);
        let m = [true, false, false, false, false, false, false, false, true];
        assert_eq!(connected_components(&m, 3, 3).1, 2);
    }

    fn one(scores: &[f64], mask: &[bool], h: usize, w: usize) -> Option<f64> {
        aupro(
            &[MaskedMap {
                scores,
                mask,
                height: h,
                width: w,
            }],
            &AuproConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn aupro_reference_cases() {
        let mask = [false, false, true, true, false, false, true, true, false, false, false, false, false, false, false, false];
        let perfect: Vec<f64> = mask.iter().map(|&m| m as u8 as f64).collect();
        assert!((one(&perfect, &mask, 4, 4).unwrap() - 1.0).abs() < 1e-12);
        let zeros = vec![0.0; 16];
        assert!(one(&zeros, &mask, 4, 4).unwrap().abs() < 1e-12);
        // Half of the region scored high, nothing else.
        let mut half = vec![0.0; 16];
        half[2] = 1.0;
        half[3] = 1.0;
        assert!((one(&half, &mask, 4, 4).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(one(&zeros, &[false; 16], 4, 4), None);
    }

    #[test]
    fn csv_format() {
        let r = MetricReport {
            classes: vec![ClassMetrics {
                class_name: "a".into(),
                image_auroc: Some(0.91234),
                ..Default::default()
            }],
            mean: ClassMetrics {
                class_name: "mean".into(),
                image_auroc: Some(0.91234),
                ..Default::default()
            },
        };
        let csv = r.to_csv();
        assert!(csv.contains("a,nan,nan,91.23,nan"));
        assert!(csv.lines().last().unwrap().starts_with("mean,nan,nan,91.23"));
        assert_eq!(csv.lines().next().unwrap(), "class,pixel_auroc,pixel_pro,image_auroc,image_ap");
    }
}
