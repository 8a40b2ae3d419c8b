//! Extended AP/AR metric suite over amodal, visible, and invisible masks.
//!
//! A detection is a true positive only when every mask required by the
//! metric mode clears the IoU threshold with a strict `>`. Occluded-only
//! evaluation marks non-occluded ground truth as ignored and discards
//! proposals whose amodal mask overlaps an ignored object at IoU >= 0.5,
//! so only proposals meant for occluded objects are scored.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, DatasetError, InstanceAnnotation};
use crate::mask::{BinaryMask, MaskError, Segmentation};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("config error: {0}")]
    Config(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

/// One model output. Visible and invisible masks are optional and, unlike
/// ground truth, are not required to be consistent with the amodal mask:
/// metrics must tolerate raw model output.
#[derive(Debug, Clone)]
pub struct Detection {
    pub image_id: u64,
    pub category_id: u32,
    pub score: f64,
    pub amodal: BinaryMask,
    pub visible: Option<BinaryMask>,
    pub invisible: Option<BinaryMask>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetricKind {
    /// IoU of amodal masks.
    Amodal,
    /// IoU of visible masks.
    Visible,
    /// Amodal and visible IoU must both clear the threshold.
    AmodalVisible,
    /// Amodal, invisible, and visible IoU must all clear the threshold.
    AmodalInvisibleVisible,
    /// IoU of invisible masks at a single low threshold.
    Invisible,
}

impl MetricKind {
    pub fn parse(s: &str) -> Option<MetricKind> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Some(MetricKind::Amodal),
            "v" => Some(MetricKind::Visible),
            "av" => Some(MetricKind::AmodalVisible),
            "aivv" => Some(MetricKind::AmodalInvisibleVisible),
            "iv" => Some(MetricKind::Invisible),
            _ => None,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            MetricKind::Amodal => "a",
            MetricKind::Visible => "v",
            MetricKind::AmodalVisible => "av",
            MetricKind::AmodalInvisibleVisible => "aivv",
            MetricKind::Invisible => "iv",
        }
    }

    fn needs_visible(&self) -> bool {
        matches!(
            self,
            MetricKind::Visible | MetricKind::AmodalVisible | MetricKind::AmodalInvisibleVisible
        )
    }

    fn needs_invisible(&self) -> bool {
        matches!(
            self,
            MetricKind::Invisible | MetricKind::AmodalInvisibleVisible
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub max_detections_per_image: usize,
    pub metric: MetricKind,
    pub occluded_only: bool,
    pub class_agnostic: bool,
    /// Single threshold used when `metric` is [`MetricKind::Invisible`].
    pub iv_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresholds: default_iou_thresholds(),
            max_detections_per_image: 100,
            metric: MetricKind::Amodal,
            occluded_only: false,
            class_agnostic: false,
            iv_threshold: 0.5,
        }
    }
}

/// Ten equally spaced thresholds 0.50, 0.55, ..., 0.95.
pub fn default_iou_thresholds() -> Vec<f64> {
    (50..=95).step_by(5).map(|p| p as f64 / 100.0).collect()
}

impl EvalConfig {
    pub fn with_metric(metric: MetricKind) -> Self {
        EvalConfig {
            metric,
            ..Default::default()
        }
    }

    /// Thresholds the metric actually runs at.
    pub fn effective_thresholds(&self) -> Vec<f64> {
        if self.metric == MetricKind::Invisible {
            vec![self.iv_threshold]
        } else {
            self.iou_thresholds.clone()
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let ts = self.effective_thresholds();
        if ts.is_empty() {
            return Err(EvalError::Config("no IoU thresholds".into()));
        }
        for w in ts.windows(2) {
            if w[1] <= w[0] {
                return Err(EvalError::Config(
                    "IoU thresholds must be strictly increasing".into(),
                ));
            }
        }
        if ts.iter().any(|&t| t <= 0.0 || t > 1.0) {
            return Err(EvalError::Config(
                "IoU thresholds must lie in (0, 1]".into(),
            ));
        }
        if self.max_detections_per_image == 0 {
            return Err(EvalError::Config("max detections must be positive".into()));
        }
        Ok(())
    }
}

/// Outcome for one detection at one threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MatchLabel {
    Tp { gt_id: u64 },
    Fp,
    /// Neither true nor false positive; removed from the ranking.
    Ignored,
}

#[derive(Debug, Clone, Serialize)]
pub struct PrCurve {
    pub threshold: f64,
    pub ap: Option<f64>,
    /// Recall at the detection cap.
    pub recall: Option<f64>,
    /// Interpolated precision sampled at recalls 0.00, 0.01, ..., 1.00.
    pub precision_at_recall: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CategoryResult {
    pub category_id: u32,
    /// `None` when the category has no (non-ignored) ground truth.
    pub ap: Option<f64>,
    pub ar: Option<f64>,
    pub num_positives: usize,
    pub pr_curves: Vec<PrCurve>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalResult {
    pub metric: MetricKind,
    pub occluded_only: bool,
    pub class_agnostic: bool,
    pub iou_thresholds: Vec<f64>,
    pub per_category: Vec<CategoryResult>,
    pub mean_ap: Option<f64>,
    pub mean_ar: Option<f64>,
    pub ignored_ground_truths: usize,
    /// Distinct detections discarded by the ignore heuristic at the lowest
    /// threshold.
    pub ignored_detections: usize,
    /// Detections that had no visible mask where the metric needed one.
    pub fallback_visible: usize,
    /// Detections that had no invisible mask where the metric needed one.
    pub fallback_invisible: usize,
}

/// IoUs of one detection against one ground-truth object, by mask kind.
struct IouTriple {
    amodal: f64,
    visible: f64,
    invisible: f64,
}

impl IouTriple {
    /// The binding constraint for the metric: the minimum of the IoUs the
    /// mode requires. A detection qualifies when this exceeds the threshold.
    fn score_for(&self, metric: MetricKind) -> f64 {
        match metric {
            MetricKind::Amodal => self.amodal,
            MetricKind::Visible => self.visible,
            MetricKind::AmodalVisible => self.amodal.min(self.visible),
            MetricKind::AmodalInvisibleVisible => {
                self.amodal.min(self.visible).min(self.invisible)
            }
            MetricKind::Invisible => self.invisible,
        }
    }
}

fn empty_like(m: &BinaryMask) -> BinaryMask {
    BinaryMask::empty(m.height(), m.width())
}

fn iou_triple(gt: &InstanceAnnotation, det: &Detection, metric: MetricKind) -> IouTriple {
    let amodal = gt.amodal.iou(&det.amodal).unwrap_or(0.0);
    let visible = if metric.needs_visible() {
        let dv = det.visible.as_ref().unwrap_or(&det.amodal);
        gt.visible.iou(dv).unwrap_or(0.0)
    } else {
        0.0
    };
    let invisible = if metric.needs_invisible() {
        let gi = gt.invisible.clone().unwrap_or_else(|| empty_like(&gt.amodal));
        let di = det.invisible.as_ref().unwrap_or(&det.amodal);
        gi.iou(di).unwrap_or(0.0)
    } else {
        0.0
    };
    IouTriple {
        amodal,
        visible,
        invisible,
    }
}

/// Greedily match the detections of one image and category against its
/// ground truth at threshold `t`. `dets` must be sorted by descending score
/// (stable, so input order breaks ties). Each ground-truth object is matched
/// at most once; among qualifying candidates a detection takes the one with
/// the highest metric score, first-listed winning ties.
pub fn match_image(
    gts: &[&InstanceAnnotation],
    dets: &[&Detection],
    t: f64,
    cfg: &EvalConfig,
) -> Vec<MatchLabel> {
    let ignored: Vec<bool> = gts
        .iter()
        .map(|g| cfg.occluded_only && !g.is_occluded())
        .collect();
    let ious: Vec<Vec<IouTriple>> = dets
        .iter()
        .map(|d| gts.iter().map(|g| iou_triple(g, d, cfg.metric)).collect())
        .collect();
    let amodal_ious: Vec<Vec<f64>> = ious
        .iter()
        .map(|row| row.iter().map(|t| t.amodal).collect())
        .collect();
    match_with_ious(&ious, &amodal_ious, &ignored, gts, t, cfg.metric)
}

fn match_with_ious(
    ious: &[Vec<IouTriple>],
    amodal_ious: &[Vec<f64>],
    ignored: &[bool],
    gts: &[&InstanceAnnotation],
    t: f64,
    metric: MetricKind,
) -> Vec<MatchLabel> {
    let mut taken = vec![false; gts.len()];
    let mut labels = Vec::with_capacity(ious.len());
    for row in ious {
        let mut best: Option<(f64, usize)> = None;
        for (gi, triple) in row.iter().enumerate() {
            if ignored[gi] || taken[gi] {
                continue;
            }
            let s = triple.score_for(metric);
            if s > t && best.map_or(true, |(bs, _)| s > bs) {
                best = Some((s, gi));
            }
        }
        match best {
            Some((_, gi)) => {
                taken[gi] = true;
                labels.push(MatchLabel::Tp { gt_id: gts[gi].id });
            }
            None => labels.push(MatchLabel::Fp),
        }
    }
    // discard unmatched proposals that were meant for ignored ground truth
    for (di, label) in labels.iter_mut().enumerate() {
        if *label != MatchLabel::Fp {
            continue;
        }
        let hits_ignored = amodal_ious[di]
            .iter()
            .zip(ignored.iter())
            .any(|(&iou, &ign)| ign && iou >= 0.5);
        if hits_ignored {
            *label = MatchLabel::Ignored;
        }
    }
    labels
}

/// 101-point interpolated average precision. `labels` must be in global rank
/// order (descending score); ignored entries are removed from the ranking.
/// Returns `None` when there is no ground truth to recall.
pub fn average_precision(labels: &[MatchLabel], total_positives: usize) -> Option<f64> {
    if total_positives == 0 {
        return None;
    }
    Some(precision_at_recall_samples(labels, total_positives).iter().sum::<f64>() / 101.0)
}

/// The interpolated precision envelope sampled at recalls 0.00..=1.00.
pub fn precision_at_recall_samples(labels: &[MatchLabel], total_positives: usize) -> Vec<f64> {
    let mut recalls: Vec<f64> = Vec::with_capacity(labels.len());
    let mut precisions: Vec<f64> = Vec::with_capacity(labels.len());
    let mut tp = 0u64;
    let mut fp = 0u64;
    for label in labels {
        match label {
            MatchLabel::Tp { .. } => tp += 1,
            MatchLabel::Fp => fp += 1,
            MatchLabel::Ignored => continue,
        }
        recalls.push(tp as f64 / total_positives as f64);
        precisions.push(tp as f64 / (tp + fp) as f64);
    }
    // precision envelope: best precision at this recall or beyond
    for i in (0..precisions.len().saturating_sub(1)).rev() {
        precisions[i] = precisions[i].max(precisions[i + 1]);
    }
    let mut samples = vec![0.0; 101];
    let mut idx = 0;
    for (i, sample) in samples.iter_mut().enumerate() {
        let r = i as f64 / 100.0;
        while idx < recalls.len() && recalls[idx] < r {
            idx += 1;
        }
        if idx < recalls.len() {
            *sample = precisions[idx];
        }
    }
    samples
}

/// Fraction of ground truth recalled, per rank-ordered label sequence.
pub fn recall_fraction(labels: &[MatchLabel], total_positives: usize) -> Option<f64> {
    if total_positives == 0 {
        return None;
    }
    let tp = labels
        .iter()
        .filter(|l| matches!(l, MatchLabel::Tp { .. }))
        .count();
    Some(tp as f64 / total_positives as f64)
}

/// Recall at the detection cap averaged over thresholds: one label sequence
/// per threshold, all over the same ground truth.
pub fn average_recall(labels_per_threshold: &[Vec<MatchLabel>], total_positives: usize) -> Option<f64> {
    if total_positives == 0 || labels_per_threshold.is_empty() {
        return None;
    }
    let sum: f64 = labels_per_threshold
        .iter()
        .map(|l| recall_fraction(l, total_positives).unwrap_or(0.0))
        .sum();
    Some(sum / labels_per_threshold.len() as f64)
}

/// Work unit: labels for one (image, category) pair at every threshold.
struct PairOutcome {
    category_id: u32,
    /// (score, global input sequence) per detection, aligned with labels.
    rank_keys: Vec<(f64, u64)>,
    /// labels[threshold][detection]
    labels: Vec<Vec<MatchLabel>>,
    num_positives: usize,
    num_ignored_gt: usize,
}

/// Run the configured metric over a whole dataset. Matching is per image and
/// category and embarrassingly parallel; aggregation is a deterministic
/// reduction, so results do not depend on the worker count.
pub fn evaluate(ds: &Dataset, dets: &[Detection], cfg: &EvalConfig) -> Result<EvalResult, EvalError> {
    cfg.validate()?;

    if !cfg.class_agnostic {
        for d in dets {
            if ds.category(d.category_id).is_none() {
                return Err(EvalError::Config(format!(
                    "detection references unknown category id {}",
                    d.category_id
                )));
            }
        }
    }

    let thresholds = cfg.effective_thresholds();
    let needs_visible = cfg.metric.needs_visible();
    let needs_invisible = cfg.metric.needs_invisible();
    let fallback_visible = if needs_visible {
        dets.iter().filter(|d| d.visible.is_none()).count()
    } else {
        0
    };
    let fallback_invisible = if needs_invisible {
        dets.iter().filter(|d| d.invisible.is_none()).count()
    } else {
        0
    };

    let cat_of = |id: u32| if cfg.class_agnostic { 0 } else { id };
    let category_ids: Vec<u32> = if cfg.class_agnostic {
        vec![0]
    } else {
        let mut ids: Vec<u32> = ds.categories.iter().map(|c| c.id).collect();
        ids.sort_unstable();
        ids
    };

    // group detections by (image, category), keeping the input sequence for
    // deterministic tie-breaking; detections for unknown images are dropped
    let image_ids: HashMap<u64, usize> =
        ds.images.iter().enumerate().map(|(i, im)| (im.id, i)).collect();
    let mut det_groups: HashMap<(usize, u32), Vec<(u64, &Detection)>> = HashMap::new();
    for (seq, d) in dets.iter().enumerate() {
        if let Some(&img_idx) = image_ids.get(&d.image_id) {
            det_groups
                .entry((img_idx, cat_of(d.category_id)))
                .or_default()
                .push((seq as u64, d));
        }
    }

    let mut work: Vec<((usize, u32), Vec<&InstanceAnnotation>, Vec<(u64, &Detection)>)> =
        Vec::new();
    for (img_idx, img) in ds.images.iter().enumerate() {
        for &cat in &category_ids {
            let gts: Vec<&InstanceAnnotation> = img
                .annotations
                .iter()
                .filter(|a| cat_of(a.category_id) == cat)
                .collect();
            let mut group = det_groups.remove(&(img_idx, cat)).unwrap_or_default();
            if gts.is_empty() && group.is_empty() {
                continue;
            }
            // descending score, input order breaking ties, capped per image+category
            group.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap().then(a.0.cmp(&b.0)));
            group.truncate(cfg.max_detections_per_image);
            work.push(((img_idx, cat), gts, group));
        }
    }

    let outcomes: Vec<PairOutcome> = work
        .par_iter()
        .map(|((_, cat), gts, group)| {
            let det_refs: Vec<&Detection> = group.iter().map(|(_, d)| *d).collect();
            let ignored: Vec<bool> = gts
                .iter()
                .map(|g| cfg.occluded_only && !g.is_occluded())
                .collect();
            let ious: Vec<Vec<IouTriple>> = det_refs
                .iter()
                .map(|d| gts.iter().map(|g| iou_triple(g, d, cfg.metric)).collect())
                .collect();
            let amodal_ious: Vec<Vec<f64>> = ious
                .iter()
                .map(|row| row.iter().map(|t| t.amodal).collect())
                .collect();
            let labels: Vec<Vec<MatchLabel>> = thresholds
                .iter()
                .map(|&t| match_with_ious(&ious, &amodal_ious, &ignored, gts, t, cfg.metric))
                .collect();
            PairOutcome {
                category_id: *cat,
                rank_keys: group.iter().map(|(seq, d)| (d.score, *seq)).collect(),
                labels,
                num_positives: ignored.iter().filter(|&&i| !i).count(),
                num_ignored_gt: ignored.iter().filter(|&&i| i).count(),
            }
        })
        .collect();

    let mut per_category = Vec::with_capacity(category_ids.len());
    let mut ignored_gts_total = 0usize;
    let mut ignored_dets_total = 0usize;
    for &cat in &category_ids {
        let cat_outcomes: Vec<&PairOutcome> =
            outcomes.iter().filter(|o| o.category_id == cat).collect();
        let num_positives: usize = cat_outcomes.iter().map(|o| o.num_positives).sum();
        ignored_gts_total += cat_outcomes.iter().map(|o| o.num_ignored_gt).sum::<usize>();

        // global rank: descending score, then input sequence
        let mut order: Vec<(usize, usize)> = Vec::new(); // (outcome idx, det idx)
        for (oi, o) in cat_outcomes.iter().enumerate() {
            for di in 0..o.rank_keys.len() {
                order.push((oi, di));
            }
        }
        order.sort_by(|&(ao, ad), &(bo, bd)| {
            let ka = cat_outcomes[ao].rank_keys[ad];
            let kb = cat_outcomes[bo].rank_keys[bd];
            kb.0.partial_cmp(&ka.0).unwrap().then(ka.1.cmp(&kb.1))
        });

        let mut pr_curves = Vec::with_capacity(thresholds.len());
        let mut labels_per_threshold: Vec<Vec<MatchLabel>> = Vec::with_capacity(thresholds.len());
        for (ti, &t) in thresholds.iter().enumerate() {
            let ranked: Vec<MatchLabel> = order
                .iter()
                .map(|&(oi, di)| cat_outcomes[oi].labels[ti][di])
                .collect();
            let ap = average_precision(&ranked, num_positives);
            let samples = if num_positives > 0 {
                precision_at_recall_samples(&ranked, num_positives)
            } else {
                Vec::new()
            };
            pr_curves.push(PrCurve {
                threshold: t,
                ap,
                recall: recall_fraction(&ranked, num_positives),
                precision_at_recall: samples,
            });
            labels_per_threshold.push(ranked);
        }
        if let Some(first) = labels_per_threshold.first() {
            ignored_dets_total += first
                .iter()
                .filter(|l| matches!(l, MatchLabel::Ignored))
                .count();
        }

        let ap = if num_positives == 0 {
            None
        } else {
            let sum: f64 = pr_curves.iter().map(|c| c.ap.unwrap_or(0.0)).sum();
            Some(sum / thresholds.len() as f64)
        };
        let ar = average_recall(&labels_per_threshold, num_positives);
        per_category.push(CategoryResult {
            category_id: cat,
            ap,
            ar,
            num_positives,
            pr_curves,
        });
    }

    let defined_aps: Vec<f64> = per_category.iter().filter_map(|c| c.ap).collect();
    let defined_ars: Vec<f64> = per_category.iter().filter_map(|c| c.ar).collect();
    let mean = |v: &[f64]| {
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    };

    Ok(EvalResult {
        metric: cfg.metric,
        occluded_only: cfg.occluded_only,
        class_agnostic: cfg.class_agnostic,
        iou_thresholds: thresholds,
        mean_ap: mean(&defined_aps),
        mean_ar: mean(&defined_ars),
        ignored_ground_truths: ignored_gts_total,
        ignored_detections: ignored_dets_total,
        fallback_visible,
        fallback_invisible,
        per_category,
    })
}

// ---------------------------------------------------------------------------
// detections JSON
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct DetectionJson {
    image_id: u64,
    category_id: u32,
    score: f64,
    amodal_seg: Segmentation,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    visible_seg: Option<Segmentation>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    invisible_seg: Option<Segmentation>,
}

/// Load a detections array, resolving mask dimensions from the ground-truth
/// dataset. Detections for images absent from the dataset are dropped.
pub fn load_detections(path: &Path, ds: &Dataset) -> Result<Vec<Detection>, EvalError> {
    let text = fs::read_to_string(path)?;
    parse_detections(&text, ds)
}

pub fn parse_detections(text: &str, ds: &Dataset) -> Result<Vec<Detection>, EvalError> {
    let raw: Vec<DetectionJson> =
        serde_json::from_str(text).map_err(|e| EvalError::Parse(e.to_string()))?;
    let mut out = Vec::with_capacity(raw.len());
    for (i, dj) in raw.into_iter().enumerate() {
        if !(0.0..=1.0).contains(&dj.score) || !dj.score.is_finite() {
            return Err(EvalError::Parse(format!(
                "detection {} has score {} outside [0, 1]",
                i, dj.score
            )));
        }
        let Some(img) = ds.image(dj.image_id) else {
            log::warn!("detection {i} references unknown image {}; dropped", dj.image_id);
            continue;
        };
        let (h, w) = (img.height, img.width);
        out.push(Detection {
            image_id: dj.image_id,
            category_id: dj.category_id,
            score: dj.score,
            amodal: dj.amodal_seg.to_mask(h, w)?,
            visible: dj.visible_seg.map(|s| s.to_mask(h, w)).transpose()?,
            invisible: dj.invisible_seg.map(|s| s.to_mask(h, w)).transpose()?,
        });
    }
    Ok(out)
}

pub fn detections_to_json(dets: &[Detection]) -> Vec<u8> {
    let raw: Vec<DetectionJson> = dets
        .iter()
        .map(|d| DetectionJson {
            image_id: d.image_id,
            category_id: d.category_id,
            score: d.score,
            amodal_seg: Segmentation::from_mask(&d.amodal),
            visible_seg: d.visible.as_ref().map(Segmentation::from_mask),
            invisible_seg: d.invisible.as_ref().map(Segmentation::from_mask),
        })
        .collect();
    let mut bytes = serde_json::to_vec_pretty(&raw).expect("detections serialize");
    bytes.push(b'\n');
    bytes
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Category, ImageRecord};

    fn rect(h: u32, w: u32, x0: u32, y0: u32, rw: u32, rh: u32) -> BinaryMask {
        let mut dense = vec![false; (h * w) as usize];
        for x in x0..(x0 + rw).min(w) {
            for y in y0..(y0 + rh).min(h) {
                dense[(x * h + y) as usize] = true;
            }
        }
        BinaryMask::from_dense(h, w, &dense)
    }

    fn strip(h: u32, w: u32, from: u32, to: u32) -> BinaryMask {
        // foreground over flat pixel range [from, to)
        let mut dense = vec![false; (h * w) as usize];
        for i in from..to {
            dense[i as usize] = true;
        }
        BinaryMask::from_dense(h, w, &dense)
    }

    fn ann(id: u64, image_id: u64, cat: u32, amodal: BinaryMask, visible: BinaryMask) -> InstanceAnnotation {
        let invisible = if visible == amodal {
            None
        } else {
            Some(amodal.difference(&visible).unwrap())
        };
        InstanceAnnotation {
            id,
            image_id,
            category_id: cat,
            amodal,
            visible,
            invisible,
            depth_order: 0,
            is_crowd: false,
            canvas_origin: (0, 0),
        }
    }

    fn one_image_dataset(annotations: Vec<InstanceAnnotation>) -> Dataset {
        Dataset {
            split_name: "test".into(),
            categories: vec![
                Category {
                    id: 1,
                    name: "thing".into(),
                    is_stuff: false,
                },
                Category {
                    id: 2,
                    name: "other".into(),
                    is_stuff: false,
                },
            ],
            images: vec![ImageRecord {
                id: 1,
                width: 10,
                height: 10,
                file_name: String::new(),
                padding: None,
                annotations,
            }],
        }
    }

    fn det(cat: u32, score: f64, amodal: BinaryMask) -> Detection {
        Detection {
            image_id: 1,
            category_id: cat,
            score,
            amodal,
            visible: None,
            invisible: None,
        }
    }

    #[test]
    fn identical_masks_are_tp() {
        let m = rect(10, 10, 1, 1, 4, 4);
        let gt = ann(1, 1, 1, m.clone(), m.clone());
        let d = det(1, 0.9, m);
        let cfg = EvalConfig::default();
        let labels = match_image(&[&gt], &[&d], 0.5, &cfg);
        assert_eq!(labels, vec![MatchLabel::Tp { gt_id: 1 }]);
    }

    #[test]
    fn strict_inequality_at_exact_iou() {
        // amodal IoU exactly 0.6: areas 40 and 40, intersection 30
        let gt_mask = strip(10, 10, 0, 40);
        let det_mask = strip(10, 10, 10, 50);
        assert_eq!(gt_mask.intersection_area(&det_mask).unwrap(), 30);
        assert!((gt_mask.iou(&det_mask).unwrap() - 0.6).abs() < 1e-15);

        let gt = ann(1, 1, 1, gt_mask.clone(), gt_mask);
        let d = det(1, 0.9, det_mask);
        let cfg = EvalConfig::default();
        for (t, expect_tp) in [(0.50, true), (0.55, true), (0.60, false), (0.65, false)] {
            let labels = match_image(&[&gt], &[&d], t, &cfg);
            let is_tp = matches!(labels[0], MatchLabel::Tp { .. });
            assert_eq!(is_tp, expect_tp, "threshold {t}");
        }
    }

    #[test]
    fn hand_ap_figure_at_exact_iou_0_6() {
        // single GT, single detection at amodal IoU exactly 0.6:
        // TP at 0.50 and 0.55 only, so AP_A = 2/10
        let gt_mask = strip(10, 10, 0, 40);
        let det_mask = strip(10, 10, 10, 50);
        let ds = one_image_dataset(vec![ann(1, 1, 1, gt_mask.clone(), gt_mask)]);
        let dets = vec![det(1, 0.9, det_mask)];
        let res = evaluate(&ds, &dets, &EvalConfig::default()).unwrap();
        assert!((res.mean_ap.unwrap() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn occluded_only_ignores_and_discards() {
        // one non-occluded GT; detection overlaps it at IoU 0.9+
        let m = rect(10, 10, 1, 1, 5, 5);
        let gt = ann(1, 1, 1, m.clone(), m.clone());
        let mut near = m.to_dense();
        // remove two pixels: IoU 23/25 = 0.92
        near[(1 * 10 + 1) as usize] = false;
        near[(1 * 10 + 2) as usize] = false;
        let d = det(1, 0.9, BinaryMask::from_dense(10, 10, &near));
        let cfg = EvalConfig {
            occluded_only: true,
            ..Default::default()
        };
        let labels = match_image(&[&gt], &[&d], 0.5, &cfg);
        assert_eq!(labels, vec![MatchLabel::Ignored]);

        let ds = one_image_dataset(vec![ann(1, 1, 1, m.clone(), m)]);
        let res = evaluate(&ds, &[d], &cfg).unwrap();
        assert_eq!(res.ignored_ground_truths, 1);
        assert_eq!(res.ignored_detections, 1);
        // no positives anywhere: undefined AP
        assert_eq!(res.mean_ap, None);
    }

    #[test]
    fn ap_basics() {
        let tp = MatchLabel::Tp { gt_id: 1 };
        // all GTs matched by top-ranked TPs, no FPs
        assert_eq!(average_precision(&[tp, tp], 2), Some(1.0));
        // single FP, no TP
        assert_eq!(average_precision(&[MatchLabel::Fp], 1), Some(0.0));
        // undefined without positives
        assert_eq!(average_precision(&[MatchLabel::Fp], 0), None);
    }

    #[test]
    fn ap_101_point_rule_tp_fp_tp() {
        // 2 GTs, ranked [TP, FP, TP]: PR points (0.5, 1), (0.5, 0.5), (1, 2/3);
        // envelope 1.0 up to recall 0.50 inclusive (51 samples), 2/3 after (50)
        let labels = [
            MatchLabel::Tp { gt_id: 1 },
            MatchLabel::Fp,
            MatchLabel::Tp { gt_id: 2 },
        ];
        let expect = (51.0 * 1.0 + 50.0 * (2.0 / 3.0)) / 101.0;
        assert!((average_precision(&labels, 2).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn ignored_removed_from_ranking() {
        let labels = [
            MatchLabel::Ignored,
            MatchLabel::Tp { gt_id: 1 },
            MatchLabel::Ignored,
        ];
        assert_eq!(average_precision(&labels, 1), Some(1.0));
    }

    #[test]
    fn recall_cases() {
        let tp = MatchLabel::Tp { gt_id: 1 };
        assert_eq!(recall_fraction(&[tp, tp], 2), Some(1.0));
        assert_eq!(recall_fraction(&[], 2), Some(0.0));
        assert_eq!(recall_fraction(&[tp], 0), None);
        // 1 of 2 GTs matched at every threshold -> AR 0.5
        let per_t: Vec<Vec<MatchLabel>> = vec![vec![tp, MatchLabel::Fp]; 10];
        assert_eq!(average_recall(&per_t, 2), Some(0.5));
    }

    #[test]
    fn verbatim_detections_score_perfectly() {
        let m1 = rect(10, 10, 0, 0, 4, 4);
        let m2full = rect(10, 10, 3, 3, 5, 5);
        let m2vis = rect(10, 10, 4, 4, 4, 4);
        let gt1 = ann(1, 1, 1, m1.clone(), m1.clone());
        let gt2 = ann(2, 1, 2, m2full.clone(), m2vis.clone());
        let ds = one_image_dataset(vec![gt1, gt2]);
        let dets = vec![
            Detection {
                image_id: 1,
                category_id: 1,
                score: 0.9,
                amodal: m1.clone(),
                visible: Some(m1.clone()),
                invisible: Some(BinaryMask::empty(10, 10)),
            },
            Detection {
                image_id: 1,
                category_id: 2,
                score: 0.8,
                amodal: m2full.clone(),
                visible: Some(m2vis.clone()),
                invisible: Some(m2full.difference(&m2vis).unwrap()),
            },
        ];
        for metric in [MetricKind::Amodal, MetricKind::Visible, MetricKind::AmodalVisible] {
            let res = evaluate(&ds, &dets, &EvalConfig::with_metric(metric)).unwrap();
            assert_eq!(res.mean_ap, Some(1.0), "metric {:?}", metric);
            assert_eq!(res.mean_ar, Some(1.0));
        }
    }

    #[test]
    fn amodal_fallback_for_av() {
        // occluded GT: amodal IoU 1.0 but amodal-vs-visible IoU 0.6
        // visible = 30 px, amodal = 50 px, intersection(visible, amodal) = 30
        // IoU(vis, amodal) = 30/50 = 0.6 -> AP_AV = 0.2 across 10 thresholds
        let amodal = strip(10, 10, 0, 50);
        let visible = strip(10, 10, 0, 30);
        let ds = one_image_dataset(vec![ann(1, 1, 1, amodal.clone(), visible)]);
        let dets = vec![det(1, 0.9, amodal)]; // amodal-only model
        let cfg = EvalConfig::with_metric(MetricKind::AmodalVisible);
        let res = evaluate(&ds, &dets, &cfg).unwrap();
        assert_eq!(res.fallback_visible, 1);
        assert!((res.mean_ap.unwrap() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn invisible_metric_single_threshold() {
        // predicted invisible IoU 0.6 with GT invisible -> AP at 0.5 is 1.0
        let amodal = strip(10, 10, 0, 70);
        let visible = strip(10, 10, 40, 70); // invisible = pixels 0..40
        let gt = ann(1, 1, 1, amodal.clone(), visible.clone());
        let ds = one_image_dataset(vec![gt]);
        let d = Detection {
            image_id: 1,
            category_id: 1,
            score: 0.9,
            amodal: amodal.clone(),
            visible: Some(visible),
            invisible: Some(strip(10, 10, 10, 50)), // IoU vs 0..40 = 30/50
        };
        let cfg = EvalConfig {
            metric: MetricKind::Invisible,
            occluded_only: true,
            ..Default::default()
        };
        let res = evaluate(&ds, &[d], &cfg).unwrap();
        assert_eq!(res.iou_thresholds, vec![0.5]);
        assert_eq!(res.mean_ap, Some(1.0));
    }

    #[test]
    fn empty_predicted_invisible_vs_nonempty_gt_is_fp() {
        let amodal = strip(10, 10, 0, 50);
        let visible = strip(10, 10, 25, 50);
        let gt = ann(1, 1, 1, amodal.clone(), visible.clone());
        let ds = one_image_dataset(vec![gt]);
        let d = Detection {
            image_id: 1,
            category_id: 1,
            score: 0.9,
            amodal,
            visible: Some(visible),
            invisible: Some(BinaryMask::empty(10, 10)),
        };
        let cfg = EvalConfig {
            metric: MetricKind::Invisible,
            ..Default::default()
        };
        let res = evaluate(&ds, &[d], &cfg).unwrap();
        assert_eq!(res.mean_ap, Some(0.0));
    }

    #[test]
    fn unknown_category_is_config_error() {
        let m = rect(10, 10, 0, 0, 3, 3);
        let ds = one_image_dataset(vec![ann(1, 1, 1, m.clone(), m.clone())]);
        let err = evaluate(&ds, &[det(77, 0.5, m.clone())], &EvalConfig::default()).unwrap_err();
        assert!(matches!(err, EvalError::Config(_)));
        // class-agnostic collapses categories, so the same input passes
        let cfg = EvalConfig {
            class_agnostic: true,
            ..Default::default()
        };
        let res = evaluate(&ds, &[det(77, 0.5, m)], &cfg).unwrap();
        assert_eq!(res.mean_ap, Some(1.0));
    }

    #[test]
    fn config_validation() {
        let mut cfg = EvalConfig::default();
        cfg.iou_thresholds = vec![0.5, 0.5];
        assert!(cfg.validate().is_err());
        cfg.iou_thresholds = vec![0.0, 0.5];
        assert!(cfg.validate().is_err());
        cfg.iou_thresholds = vec![0.5, 0.75, 1.0];
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn detections_json_roundtrip() {
        let m = rect(10, 10, 1, 1, 3, 3);
        let ds = one_image_dataset(vec![ann(1, 1, 1, m.clone(), m.clone())]);
        let dets = vec![Detection {
            image_id: 1,
            category_id: 1,
            score: 0.75,
            amodal: m.clone(),
            visible: Some(m.clone()),
            invisible: None,
        }];
        let json = detections_to_json(&dets);
        let back = parse_detections(std::str::from_utf8(&json).unwrap(), &ds).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].amodal, m);
        assert_eq!(back[0].invisible, None);
    }
}
