//! Role mAP: a detection counts only if both its human and object boxes
//! overlap a same-category ground truth with IoU above 0.5.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DatasetManifest;
use crate::geometry::{iou, BBox};
use crate::matching::GroundTruthHoi;
use crate::model::HoiPrediction;

pub const IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("detection {index} (image {image}): unknown HOI category {category} ({num} categories)")]
    UnknownCategory {
        index: usize,
        image: String,
        category: usize,
        num: usize,
    },
    #[error("detection {index}: image {image} has no ground-truth record")]
    UnknownImage { index: usize, image: String },
    #[error("detection {index} (image {image}): {what}")]
    InvalidDetection { index: usize, image: String, what: String },
    #[error("ground truth for {image}: (object {object}, interaction {interaction}) is not a listed HOI category")]
    UnknownGroundTruth { image: String, object: usize, interaction: usize },
    #[error("{path}: line {line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

/// One scored HOI triplet-pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detection {
    pub image: String,
    pub hoi_category: usize,
    pub human_box: BBox,
    pub object_box: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Setting {
    /// Every image counts for every category.
    #[default]
    Default,
    /// A category is scored only on images containing its object class.
    KnownObject,
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Setting::Default => "default",
            Setting::KnownObject => "known-object",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryAp {
    pub category: usize,
    pub object: usize,
    pub interaction: usize,
    pub rare: bool,
    pub num_gt: usize,
    /// `None` when the category has no ground truth.
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub setting: Setting,
    pub full: Option<f64>,
    pub rare: Option<f64>,
    pub non_rare: Option<f64>,
    pub categories: Vec<CategoryAp>,
}

impl ApReport {
    /// Human-readable three-number summary.
    pub fn summary(&self) -> String {
        let show = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
        format!(
            "setting: {}\nFull    {}\nRare    {}\nNonRare {}\n",
            self.setting,
            show(self.full),
            show(self.rare),
            show(self.non_rare)
        )
    }
}

/// Both boxes above the IoU threshold. Category equality is the caller's job.
pub fn is_true_positive(human: &BBox, object: &BBox, gt: &GroundTruthHoi) -> bool {
    iou(human, &gt.human_box) > IOU_THRESHOLD && iou(object, &gt.object_box) > IOU_THRESHOLD
}

/// A ground-truth pair of one category, tagged with its image.
#[derive(Debug, Clone, Copy)]
pub struct GtRef<'a> {
    pub image: &'a str,
    pub hoi: &'a GroundTruthHoi,
}

/// Greedy matching outcome: per detection (in descending score order) whether
/// it was a true positive, and which GT it claimed.
pub fn match_detections(dets: &[&Detection], gts: &[GtRef<'_>]) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    // stable: equal scores keep input order
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut taken = vec![false; gts.len()];
    order
        .into_iter()
        .map(|d| {
            let det = dets[d];
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] || gt.image != det.image || !is_true_positive(&det.human_box, &det.object_box, gt.hoi) {
                    continue;
                }
                let overlap = iou(&det.human_box, &gt.hoi.human_box).min(iou(&det.object_box, &gt.hoi.object_box));
                if best.map_or(true, |(_, o)| overlap > o) {
                    best = Some((g, overlap));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
            }
            best.map(|(g, _)| g)
        })
        .collect()
}

/// All-points interpolated AP for one category. `None` without ground truth.
pub fn compute_ap(dets: &[&Detection], gts: &[GtRef<'_>]) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let hits = match_detections(dets, gts);
    let mut tp = 0usize;
    let precision: Vec<(bool, f64)> = hits
        .iter()
        .enumerate()
        .map(|(k, h)| {
            tp += usize::from(h.is_some());
            (h.is_some(), tp as f64 / (k + 1) as f64)
        })
        .collect();
    // each TP raises recall by 1/G; weight it by the envelope at that rank
    let mut envelope = 0.0f64;
    let mut area = 0.0;
    for &(hit, p) in precision.iter().rev() {
        envelope = envelope.max(p);
        if hit {
            area += envelope;
        }
    }
    Some(area / gts.len() as f64)
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Per-category AP plus Full / Rare / NonRare means.
pub fn compute_role_map(
    dets: &[Detection],
    gts: &BTreeMap<String, Vec<GroundTruthHoi>>,
    manifest: &DatasetManifest,
    setting: Setting,
) -> Result<ApReport, EvalError> {
    let num = manifest.hoi_categories.len();
    let mut det_by_cat: Vec<Vec<&Detection>> = vec![Vec::new(); num];
    for (index, d) in dets.iter().enumerate() {
        if d.hoi_category >= num {
            return Err(EvalError::UnknownCategory {
                index,
                image: d.image.clone(),
                category: d.hoi_category,
                num,
            });
        }
        if !gts.contains_key(&d.image) {
            return Err(EvalError::UnknownImage {
                index,
                image: d.image.clone(),
            });
        }
        if !d.score.is_finite() || !d.human_box.is_valid() || !d.object_box.is_valid() {
            return Err(EvalError::InvalidDetection {
                index,
                image: d.image.clone(),
                what: "non-finite score or degenerate box".into(),
            });
        }
        det_by_cat[d.hoi_category].push(d);
    }
    let mut gt_by_cat: Vec<Vec<GtRef<'_>>> = vec![Vec::new(); num];
    let mut images_with_object: Vec<BTreeSet<&str>> = vec![BTreeSet::new(); manifest.num_objects()];
    for (image, hois) in gts {
        for hoi in hois {
            let cat = manifest
                .category_id(hoi.object_class, hoi.interaction_class)
                .ok_or_else(|| EvalError::UnknownGroundTruth {
                    image: image.clone(),
                    object: hoi.object_class,
                    interaction: hoi.interaction_class,
                })?;
            gt_by_cat[cat].push(GtRef { image, hoi });
            images_with_object[hoi.object_class].insert(image);
        }
    }
    let categories: Vec<CategoryAp> = manifest
        .hoi_categories
        .iter()
        .enumerate()
        .map(|(c, cat)| {
            let scored: Vec<&Detection> = match setting {
                Setting::Default => det_by_cat[c].clone(),
                Setting::KnownObject => det_by_cat[c]
                    .iter()
                    .copied()
                    .filter(|d| images_with_object[cat.object].contains(d.image.as_str()))
                    .collect(),
            };
            CategoryAp {
                category: c,
                object: cat.object,
                interaction: cat.interaction,
                rare: manifest.is_rare(c),
                num_gt: gt_by_cat[c].len(),
                ap: compute_ap(&scored, &gt_by_cat[c]),
            }
        })
        .collect();
    Ok(ApReport {
        setting,
        full: mean(categories.iter().filter_map(|c| c.ap)),
        rare: mean(categories.iter().filter(|c| c.rare).filter_map(|c| c.ap)),
        non_rare: mean(categories.iter().filter(|c| !c.rare).filter_map(|c| c.ap)),
        categories,
    })
}

/// Inference-time decoding knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    /// Keep detections scoring at least this much.
    pub threshold: f64,
    /// Optional cap per image, highest scores first.
    pub max_detections: Option<usize>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            threshold: 0.1,
            max_detections: None,
        }
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Composite score `P(human) * P(object) * P(interaction)` for each query,
/// maximized over the listed HOI categories. No duplicate suppression.
pub fn decode_predictions(
    image: &str,
    preds: &[HoiPrediction],
    manifest: &DatasetManifest,
    cfg: &DecodeConfig,
) -> Vec<Detection> {
    let mut out: Vec<Detection> = preds
        .iter()
        .filter_map(|p| {
            let ph = softmax(&p.human_logits)[0];
            let po = softmax(&p.object_logits);
            let pr = softmax(&p.interaction_logits);
            let (cat, best) = manifest
                .hoi_categories
                .iter()
                .enumerate()
                .map(|(c, hc)| (c, po[hc.object] * pr[hc.interaction]))
                .fold(None, |acc: Option<(usize, f64)>, (c, s)| match acc {
                    Some((_, b)) if b >= s => acc,
                    _ => Some((c, s)),
                })?;
            let score = ph * best;
            (score >= cfg.threshold).then(|| Detection {
                image: image.to_string(),
                hoi_category: cat,
                human_box: p.human_box,
                object_box: p.object_box,
                score,
            })
        })
        .collect();
    if let Some(k) = cfg.max_detections {
        out.sort_by(|a, b| b.score.total_cmp(&a.score));
        out.truncate(k);
    }
    out
}

pub fn save_detections(path: &Path, dets: &[Detection]) -> Result<(), EvalError> {
    let mut text = String::new();
    for d in dets {
        text.push_str(&serde_json::to_string(d).expect("detection serializes"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| EvalError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn load_detections(path: &Path) -> Result<Vec<Detection>, EvalError> {
    let text = fs::read_to_string(path).map_err(|e| EvalError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| EvalError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
