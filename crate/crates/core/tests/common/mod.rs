//! Shared test support: a dense-grid brute-force reference evaluator and
//! randomized fixture generators.
//!
//! The reference works entirely on decoded boolean grids with naive pixel
//! counting and a literal 101-point sweep; it shares no matching, IoU, or
//! PR machinery with the library implementation it checks.

#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use amodal_core::dataset::{Category, Dataset, ImageRecord, InstanceAnnotation};
use amodal_core::eval::{Detection, EvalConfig, MetricKind};
use amodal_core::mask::BinaryMask;

// ---------------------------------------------------------------------------
// dense reference evaluator
// ---------------------------------------------------------------------------

pub struct RefCategory {
    pub ap: Option<f64>,
    pub ar: Option<f64>,
    pub recall_per_threshold: Vec<f64>,
}

pub struct RefResult {
    pub mean_ap: Option<f64>,
    pub mean_ar: Option<f64>,
    pub per_category: BTreeMap<u32, RefCategory>,
}

fn dense_iou(a: &[bool], b: &[bool]) -> f64 {
    let mut inter = 0u64;
    let mut union = 0u64;
    for (&x, &y) in a.iter().zip(b.iter()) {
        if x && y {
            inter += 1;
        }
        if x || y {
            union += 1;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

struct RefGt {
    amodal: Vec<bool>,
    visible: Vec<bool>,
    invisible: Vec<bool>,
    occluded: bool,
}

struct RefDet {
    seq: u64,
    score: f64,
    amodal: Vec<bool>,
    visible: Vec<bool>,
    invisible: Vec<bool>,
}

fn empty_grid(m: &BinaryMask) -> Vec<bool> {
    vec![false; (m.height() * m.width()) as usize]
}

/// The quantity that must strictly exceed the threshold for a match.
fn match_score(metric: MetricKind, gt: &RefGt, det: &RefDet) -> f64 {
    let a = dense_iou(&gt.amodal, &det.amodal);
    let v = dense_iou(&gt.visible, &det.visible);
    let iv = dense_iou(&gt.invisible, &det.invisible);
    match metric {
        MetricKind::Amodal => a,
        MetricKind::Visible => v,
        MetricKind::AmodalVisible => a.min(v),
        MetricKind::AmodalInvisibleVisible => a.min(v).min(iv),
        MetricKind::Invisible => iv,
    }
}

/// Naive 101-point AP: for each sampled recall, scan every PR point.
fn naive_ap(labels: &[Option<bool>], positives: usize) -> Option<f64> {
    if positives == 0 {
        return None;
    }
    let mut points: Vec<(f64, f64)> = Vec::new();
    let mut tp = 0.0;
    let mut fp = 0.0;
    for l in labels {
        match l {
            None => continue, // ignored: removed from the ranking
            Some(true) => tp += 1.0,
            Some(false) => fp += 1.0,
        }
        points.push((tp / positives as f64, tp / (tp + fp)));
    }
    let mut total = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        let mut best = 0.0f64;
        for &(rec, prec) in &points {
            if rec >= r && prec > best {
                best = prec;
            }
        }
        total += best;
    }
    Some(total / 101.0)
}

pub fn evaluate_reference(ds: &Dataset, dets: &[Detection], cfg: &EvalConfig) -> RefResult {
    let thresholds: Vec<f64> = if cfg.metric == MetricKind::Invisible {
        vec![cfg.iv_threshold]
    } else {
        cfg.iou_thresholds.clone()
    };
    let cat_of = |id: u32| if cfg.class_agnostic { 0 } else { id };
    let mut category_ids: Vec<u32> = if cfg.class_agnostic {
        vec![0]
    } else {
        ds.categories.iter().map(|c| c.id).collect()
    };
    category_ids.sort_unstable();

    let mut per_category = BTreeMap::new();
    let mut aps = Vec::new();
    let mut ars = Vec::new();

    for &cat in &category_ids {
        let mut positives = 0usize;
        // (threshold index) -> list of (score, seq, label) across images
        let mut labels: Vec<Vec<(f64, u64, Option<bool>)>> = vec![Vec::new(); thresholds.len()];
        let mut recalled: Vec<usize> = vec![0; thresholds.len()];

        for img in &ds.images {
            let gts: Vec<RefGt> = img
                .annotations
                .iter()
                .filter(|a| cat_of(a.category_id) == cat)
                .map(|a| RefGt {
                    amodal: a.amodal.to_dense(),
                    visible: a.visible.to_dense(),
                    invisible: a
                        .invisible
                        .as_ref()
                        .map(|m| m.to_dense())
                        .unwrap_or_else(|| empty_grid(&a.amodal)),
                    occluded: a.is_occluded(),
                })
                .collect();
            let mut img_dets: Vec<RefDet> = dets
                .iter()
                .enumerate()
                .filter(|(_, d)| d.image_id == img.id && cat_of(d.category_id) == cat)
                .map(|(seq, d)| RefDet {
                    seq: seq as u64,
                    score: d.score,
                    amodal: d.amodal.to_dense(),
                    visible: d
                        .visible
                        .as_ref()
                        .unwrap_or(&d.amodal)
                        .to_dense(),
                    invisible: d
                        .invisible
                        .as_ref()
                        .unwrap_or(&d.amodal)
                        .to_dense(),
                })
                .collect();
            img_dets.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap().then(a.seq.cmp(&b.seq)));
            img_dets.truncate(cfg.max_detections_per_image);

            let ignored: Vec<bool> = gts
                .iter()
                .map(|g| cfg.occluded_only && !g.occluded)
                .collect();
            positives += ignored.iter().filter(|&&i| !i).count();

            for (ti, &t) in thresholds.iter().enumerate() {
                let mut taken = vec![false; gts.len()];
                for det in &img_dets {
                    let mut best: Option<(f64, usize)> = None;
                    for (gi, gt) in gts.iter().enumerate() {
                        if ignored[gi] || taken[gi] {
                            continue;
                        }
                        let s = match_score(cfg.metric, gt, det);
                        if s > t {
                            match best {
                                Some((bs, _)) if bs >= s => {}
                                _ => best = Some((s, gi)),
                            }
                        }
                    }
                    let label = match best {
                        Some((_, gi)) => {
                            taken[gi] = true;
                            recalled[ti] += 1;
                            Some(true)
                        }
                        None => {
                            let near_ignored = gts.iter().zip(ignored.iter()).any(|(g, &ign)| {
                                ign && dense_iou(&g.amodal, &det.amodal) >= 0.5
                            });
                            if near_ignored {
                                None
                            } else {
                                Some(false)
                            }
                        }
                    };
                    labels[ti].push((det.score, det.seq, label));
                }
            }
        }

        if positives == 0 {
            per_category.insert(
                cat,
                RefCategory {
                    ap: None,
                    ar: None,
                    recall_per_threshold: vec![0.0; thresholds.len()],
                },
            );
            continue;
        }
        let mut ap_sum = 0.0;
        let mut recall_per_threshold = Vec::with_capacity(thresholds.len());
        for (ti, per_t) in labels.iter_mut().enumerate() {
            per_t.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let ranked: Vec<Option<bool>> = per_t.iter().map(|&(_, _, l)| l).collect();
            ap_sum += naive_ap(&ranked, positives).unwrap();
            recall_per_threshold.push(recalled[ti] as f64 / positives as f64);
        }
        let ap = ap_sum / thresholds.len() as f64;
        let ar = recall_per_threshold.iter().sum::<f64>() / thresholds.len() as f64;
        aps.push(ap);
        ars.push(ar);
        per_category.insert(
            cat,
            RefCategory {
                ap: Some(ap),
                ar: Some(ar),
                recall_per_threshold,
            },
        );
    }

    let mean = |v: &[f64]| {
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    RefResult {
        mean_ap: mean(&aps),
        mean_ar: mean(&ars),
        per_category,
    }
}

// ---------------------------------------------------------------------------
// randomized fixtures
// ---------------------------------------------------------------------------

pub fn rect_mask(h: u32, w: u32, x0: u32, y0: u32, rw: u32, rh: u32) -> BinaryMask {
    let mut dense = vec![false; (h * w) as usize];
    for x in x0..(x0 + rw).min(w) {
        for y in y0..(y0 + rh).min(h) {
            dense[(x * h + y) as usize] = true;
        }
    }
    BinaryMask::from_dense(h, w, &dense)
}

pub fn random_blob(rng: &mut ChaCha8Rng, h: u32, w: u32) -> BinaryMask {
    let rw = rng.random_range(2..=w.saturating_sub(1).max(2));
    let rh = rng.random_range(2..=h.saturating_sub(1).max(2));
    let x0 = rng.random_range(0..w.saturating_sub(rw).max(1));
    let y0 = rng.random_range(0..h.saturating_sub(rh).max(1));
    let base = rect_mask(h, w, x0, y0, rw, rh);
    if rng.random_range(0..2) == 0 {
        let rw2 = rng.random_range(2..=rw.max(2));
        let rh2 = rng.random_range(2..=rh.max(2));
        let x2 = rng.random_range(0..w.saturating_sub(rw2).max(1));
        let y2 = rng.random_range(0..h.saturating_sub(rh2).max(1));
        base.union(&rect_mask(h, w, x2, y2, rw2, rh2)).unwrap()
    } else {
        base
    }
}

/// Translate a mask by a small random offset, for detections near their GT.
pub fn jitter(rng: &mut ChaCha8Rng, m: &BinaryMask, max_shift: i64) -> BinaryMask {
    let dx = rng.random_range(-max_shift..=max_shift);
    let dy = rng.random_range(-max_shift..=max_shift);
    let moved = m.translate_onto(m.height(), m.width(), dx, dy);
    if moved.is_empty() {
        m.clone()
    } else {
        moved
    }
}

pub struct MicroFixture {
    pub dataset: Dataset,
    pub detections: Vec<Detection>,
}

/// A random micro-dataset: up to 3 images, up to 4 detections per image,
/// masks at most 32x32. Scores come off a coarse grid so ties happen.
pub fn random_micro_fixture(seed: u64) -> MicroFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = rng.random_range(8..=32);
    let w = rng.random_range(8..=32);
    let n_images = rng.random_range(1..=3);
    let n_categories = rng.random_range(1..=2);

    let categories: Vec<Category> = (1..=n_categories)
        .map(|id| Category {
            id,
            name: format!("cat{id}"),
            is_stuff: false,
        })
        .collect();

    let mut images = Vec::new();
    let mut detections = Vec::new();
    let mut ann_id = 1u64;
    for img_id in 1..=n_images {
        let n_gt = rng.random_range(1..=3);
        let mut annotations = Vec::new();
        for k in 0..n_gt {
            let amodal = random_blob(&mut rng, h, w);
            // some objects occluded, some not
            let (visible, invisible) = if rng.random_range(0..3) > 0 {
                let occluder = random_blob(&mut rng, h, w);
                let vis = amodal.difference(&occluder).unwrap();
                if vis.is_empty() || vis == amodal {
                    (amodal.clone(), None)
                } else {
                    (vis.clone(), Some(amodal.difference(&vis).unwrap()))
                }
            } else {
                (amodal.clone(), None)
            };
            annotations.push(InstanceAnnotation {
                id: ann_id,
                image_id: img_id,
                category_id: rng.random_range(1..=n_categories),
                amodal,
                visible,
                invisible,
                depth_order: k,
                is_crowd: false,
                canvas_origin: (0, 0),
            });
            ann_id += 1;
        }

        let n_det = rng.random_range(0..=4);
        for _ in 0..n_det {
            // half the detections hover near a GT, half are random blobs
            let amodal = if rng.random_range(0..2) == 0 && !annotations.is_empty() {
                let gt = &annotations[rng.random_range(0..annotations.len())];
                jitter(&mut rng, &gt.amodal, 3)
            } else {
                random_blob(&mut rng, h, w)
            };
            let visible = match rng.random_range(0..3) {
                0 => None,
                _ => Some(jitter(&mut rng, &amodal, 2)),
            };
            let invisible = match rng.random_range(0..3) {
                0 => None,
                1 => Some(random_blob(&mut rng, h, w)),
                _ => visible
                    .as_ref()
                    .map(|v| amodal.difference(v).unwrap())
                    .filter(|m| !m.is_empty()),
            };
            detections.push(Detection {
                image_id: img_id,
                category_id: rng.random_range(1..=n_categories),
                score: rng.random_range(1..=10) as f64 / 10.0,
                amodal,
                visible,
                invisible,
            });
        }
        images.push(ImageRecord {
            id: img_id,
            width: w,
            height: h,
            file_name: String::new(),
            padding: None,
            annotations,
        });
    }

    MicroFixture {
        dataset: Dataset {
            split_name: format!("micro{seed}"),
            categories,
            images,
        },
        detections,
    }
}
