//! Dataset construction: paste-based amodal augmentation, zero-padding, and
//! category merging.
//!
//! Synthesis manipulates annotations only. Image pixels are never composited;
//! each augmentation run emits a manifest of paste events (donor, offset,
//! z-order) so an external tool can render matching pixels.

pub mod shapes;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, DatasetError, ImageRecord, InstanceAnnotation, Padding};
use crate::mask::{BinaryMask, MaskError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("no valid placement found after {attempts} attempts")]
    NoValidPlacement { attempts: usize },
    #[error("image id {0} is missing from the modal dataset")]
    ImageIdMismatch(u64),
    #[error("no eligible donor objects")]
    NoDonors,
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Donor bounding box sampled uniformly fully inside the image.
    UniformInside,
    /// Donor bounding box sampled anywhere that intersects the image;
    /// out-of-bounds pixels are clipped away.
    UniformAny,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub rng_seed: u64,
    pub donors_per_image: usize,
    pub placement: Placement,
    /// Skip donor objects whose mask touches their source image border.
    pub exclude_boundary_objects: bool,
    /// Drop pre-existing objects whose visible fraction of the amodal area
    /// falls below this after pasting. Zero keeps fully covered objects.
    pub min_remaining_visible_fraction: f64,
    pub max_placement_attempts: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rng_seed: 0,
            donors_per_image: 1,
            placement: Placement::UniformInside,
            exclude_boundary_objects: true,
            min_remaining_visible_fraction: 0.0,
            max_placement_attempts: 50,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.donors_per_image == 0 {
            return Err(SynthError::Config("donors_per_image must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.min_remaining_visible_fraction) {
            return Err(SynthError::Config(
                "min_remaining_visible_fraction must be in [0, 1]".into(),
            ));
        }
        if self.max_placement_attempts == 0 {
            return Err(SynthError::Config(
                "max_placement_attempts must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MergeConfig {
    /// A category is assigned only when the best visible-mask IoU strictly
    /// exceeds this.
    pub iou_threshold: f64,
    pub drop_stuff: bool,
    pub drop_crowd: bool,
}

impl Default for MergeConfig {
    fn default() -> Self {
        MergeConfig {
            iou_threshold: 0.75,
            drop_stuff: true,
            drop_crowd: true,
        }
    }
}

/// An object taken from another image, to be pasted front-most.
#[derive(Debug, Clone)]
pub struct Donor {
    pub annotation: InstanceAnnotation,
    pub source_image_id: u64,
    pub source_width: u32,
    pub source_height: u32,
}

/// One compositing-manifest entry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PasteEvent {
    pub output_image_id: u64,
    pub donor_annotation_id: u64,
    pub donor_source_image: u64,
    pub dx: i64,
    pub dy: i64,
    /// Final depth order of the donor in the output image (0 = front-most).
    pub z: u32,
}

pub fn manifest_to_json(events: &[PasteEvent]) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(events).expect("manifest serializes");
    bytes.push(b'\n');
    bytes
}

/// Paste each donor front-most into `base` at a sampled offset.
///
/// Every pre-existing annotation keeps its amodal mask untouched; its visible
/// mask loses the pasted region and its invisible mask is recomputed as
/// amodal minus visible. Donors pasted earlier in the same call are occluded
/// by later ones. Objects whose remaining visible fraction drops below the
/// configured minimum are removed from the output.
pub fn paste_augment(
    base: &ImageRecord,
    donors: &[Donor],
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<(ImageRecord, Vec<PasteEvent>), SynthError> {
    cfg.validate()?;
    let mut out = base.clone();
    let mut events: Vec<PasteEvent> = Vec::with_capacity(donors.len());
    let mut next_id = base
        .annotations
        .iter()
        .map(|a| a.id)
        .max()
        .unwrap_or(0)
        + 1;

    for donor in donors {
        let stamp = &donor.annotation.amodal;
        let (dx, dy) = sample_offset(stamp, out.height, out.width, cfg, rng)?;
        let pasted = stamp.translate_onto(out.height, out.width, dx, dy);
        debug_assert!(!pasted.is_empty());

        for ann in &mut out.annotations {
            ann.depth_order += 1;
            let new_visible = ann.visible.difference(&pasted)?;
            if new_visible != ann.visible {
                ann.visible = new_visible;
                ann.invisible = Some(ann.amodal.difference(&ann.visible)?);
            }
        }
        out.annotations.push(InstanceAnnotation {
            id: next_id,
            image_id: base.id,
            category_id: donor.annotation.category_id,
            amodal: pasted.clone(),
            visible: pasted,
            invisible: None,
            depth_order: 0,
            is_crowd: false,
            canvas_origin: (0, 0),
        });
        events.push(PasteEvent {
            output_image_id: base.id,
            donor_annotation_id: donor.annotation.id,
            donor_source_image: donor.source_image_id,
            dx,
            dy,
            z: 0, // rewritten below once all donors are in
        });
        next_id += 1;
    }

    // final z of the k-th pasted donor after later pastes shifted it back
    let n = events.len() as u32;
    for (k, ev) in events.iter_mut().enumerate() {
        ev.z = n - 1 - k as u32;
    }

    if cfg.min_remaining_visible_fraction > 0.0 {
        out.annotations.retain(|ann| {
            let amodal_area = ann.amodal.area();
            if amodal_area == 0 {
                return false;
            }
            let frac = ann.visible.area() as f64 / amodal_area as f64;
            frac >= cfg.min_remaining_visible_fraction
        });
    }
    Ok((out, events))
}

fn sample_offset(
    stamp: &BinaryMask,
    height: u32,
    width: u32,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<(i64, i64), SynthError> {
    let (bx, by, bw, bh) = stamp.bbox().ok_or(SynthError::NoDonors)?;
    for _ in 0..cfg.max_placement_attempts {
        let (tx, ty) = match cfg.placement {
            Placement::UniformInside => {
                if bw > width || bh > height {
                    // cannot fit; count the attempt and keep going so the
                    // error reports the configured bound
                    continue;
                }
                (
                    rng.random_range(0..=(width - bw)) as i64,
                    rng.random_range(0..=(height - bh)) as i64,
                )
            }
            Placement::UniformAny => (
                rng.random_range(-(bw as i64 - 1)..width as i64),
                rng.random_range(-(bh as i64 - 1)..height as i64),
            ),
        };
        let dx = tx - bx as i64;
        let dy = ty - by as i64;
        if cfg.placement == Placement::UniformInside {
            return Ok((dx, dy));
        }
        // clipped placement must leave something visible
        if !stamp.translate_onto(height, width, dx, dy).is_empty() {
            return Ok((dx, dy));
        }
    }
    Err(SynthError::NoValidPlacement {
        attempts: cfg.max_placement_attempts,
    })
}

/// Candidate donors from a dataset: non-stuff, non-crowd objects with a
/// nonempty mask, optionally restricted to objects clear of the image border.
pub fn donor_pool(ds: &Dataset, exclude_boundary: bool) -> Vec<Donor> {
    let stuff: Vec<u32> = ds
        .categories
        .iter()
        .filter(|c| c.is_stuff)
        .map(|c| c.id)
        .collect();
    let mut pool = Vec::new();
    for img in &ds.images {
        for ann in &img.annotations {
            if ann.is_crowd || stuff.contains(&ann.category_id) || ann.amodal.is_empty() {
                continue;
            }
            if exclude_boundary && ann.amodal.touches_border() {
                continue;
            }
            pool.push(Donor {
                annotation: ann.clone(),
                source_image_id: img.id,
                source_width: img.width,
                source_height: img.height,
            });
        }
    }
    pool
}

/// Synthesize `n_images` occlusion-annotated images from a modal dataset
/// (visible masks only, amodal == visible) by pasting donor objects into
/// sampled base images. Deterministic: image `i` draws from its own RNG
/// stream derived from `(seed, i)`, so parallel and serial runs agree.
pub fn build_modal_aug(
    modal_ds: &Dataset,
    cfg: &AugmentConfig,
    n_images: usize,
) -> Result<(Dataset, Vec<PasteEvent>), SynthError> {
    cfg.validate()?;
    let mut out = Dataset {
        split_name: format!("{}_modal_aug", modal_ds.split_name),
        categories: modal_ds.categories.clone(),
        images: Vec::with_capacity(n_images),
    };
    if n_images == 0 {
        return Ok((out, Vec::new()));
    }
    if modal_ds.images.is_empty() {
        return Err(SynthError::NoDonors);
    }
    let pool = donor_pool(modal_ds, cfg.exclude_boundary_objects);
    if pool.is_empty() {
        return Err(SynthError::NoDonors);
    }

    let results: Vec<Result<(ImageRecord, Vec<PasteEvent>), SynthError>> = (0..n_images)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
            rng.set_stream(i as u64 + 1);
            let base = &modal_ds.images[rng.random_range(0..modal_ds.images.len())];
            let mut donors: Vec<Donor> = Vec::with_capacity(cfg.donors_per_image);
            let eligible: Vec<&Donor> = pool
                .iter()
                .filter(|d| d.source_image_id != base.id)
                .collect();
            if eligible.is_empty() {
                return Err(SynthError::NoDonors);
            }
            for _ in 0..cfg.donors_per_image {
                donors.push(eligible[rng.random_range(0..eligible.len())].clone());
            }
            paste_augment(base, &donors, cfg, &mut rng)
        })
        .collect();

    let mut events = Vec::new();
    for (i, res) in results.into_iter().enumerate() {
        let (mut img, mut evs) = res?;
        img.id = (i + 1) as u64;
        img.file_name = format!("modal_aug_{:06}.png", i + 1);
        for ann in &mut img.annotations {
            ann.image_id = img.id;
        }
        for ev in &mut evs {
            ev.output_image_id = img.id;
        }
        out.images.push(img);
        events.extend(evs);
    }
    renumber_annotations(&mut out);
    out.validate(false)?;
    Ok((out, events))
}

fn renumber_annotations(ds: &mut Dataset) {
    let mut next = 1u64;
    for img in &mut ds.images {
        for ann in &mut img.annotations {
            ann.id = next;
            next += 1;
        }
    }
}

/// Apply the minimal per-image zero padding so every amodal mask is fully
/// contained, translating all masks consistently. Padding amounts accumulate
/// into the image metadata; images already in bounds record zero padding.
pub fn pad_dataset_for_amodal(ds: &Dataset) -> Dataset {
    let mut out = ds.clone();
    for img in &mut out.images {
        let mut left = 0i64;
        let mut top = 0i64;
        let mut right = 0i64;
        let mut bottom = 0i64;
        for ann in &img.annotations {
            let Some((bx, by, bw, bh)) = ann.amodal.bbox() else {
                continue;
            };
            let (ox, oy) = ann.canvas_origin;
            let x0 = ox as i64 + bx as i64;
            let y0 = oy as i64 + by as i64;
            let x1 = x0 + bw as i64;
            let y1 = y0 + bh as i64;
            left = left.max(-x0);
            top = top.max(-y0);
            right = right.max(x1 - img.width as i64);
            bottom = bottom.max(y1 - img.height as i64);
        }
        let (l, t, r, b) = (left as u32, top as u32, right as u32, bottom as u32);
        let new_w = img.width + l + r;
        let new_h = img.height + t + b;
        for ann in &mut img.annotations {
            let (ox, oy) = ann.canvas_origin;
            let dx = ox as i64 + l as i64;
            let dy = oy as i64 + t as i64;
            ann.amodal = ann.amodal.translate_onto(new_h, new_w, dx, dy);
            ann.visible = ann.visible.translate_onto(new_h, new_w, dx, dy);
            ann.invisible = ann
                .invisible
                .as_ref()
                .map(|m| m.translate_onto(new_h, new_w, dx, dy));
            ann.canvas_origin = (0, 0);
        }
        img.width = new_w;
        img.height = new_h;
        let prior = img.padding.unwrap_or_default();
        img.padding = Some(Padding {
            left: prior.left + l,
            top: prior.top + t,
            right: prior.right + r,
            bottom: prior.bottom + b,
        });
    }
    out
}

/// Assign categories from a modal dataset to a class-less amodal dataset.
///
/// Each amodal annotation takes the category of the modal annotation whose
/// mask best overlaps its visible mask, provided that IoU strictly exceeds
/// the threshold. Matching is greedy one-to-one by descending IoU; unmatched
/// annotations, stuff, and crowd candidates are dropped, as are images left
/// without annotations.
pub fn merge_categories(
    amodal_ds: &Dataset,
    modal_ds: &Dataset,
    cfg: &MergeConfig,
) -> Result<Dataset, SynthError> {
    if !(0.0..=1.0).contains(&cfg.iou_threshold) || cfg.iou_threshold == 0.0 {
        return Err(SynthError::Config("iou_threshold must be in (0, 1]".into()));
    }
    let amodal_stuff: Vec<u32> = amodal_ds
        .categories
        .iter()
        .filter(|c| c.is_stuff)
        .map(|c| c.id)
        .collect();
    let modal_stuff: Vec<u32> = modal_ds
        .categories
        .iter()
        .filter(|c| c.is_stuff)
        .map(|c| c.id)
        .collect();

    let mut out = Dataset {
        split_name: format!("{}_cls", amodal_ds.split_name),
        categories: modal_ds.categories.clone(),
        images: Vec::new(),
    };

    for a_img in &amodal_ds.images {
        let m_img = modal_ds
            .image(a_img.id)
            .ok_or(SynthError::ImageIdMismatch(a_img.id))?;

        // score all candidate pairs
        struct Pair {
            iou: f64,
            a_idx: usize,
            m_idx: usize,
        }
        let mut pairs: Vec<Pair> = Vec::new();
        for (ai, a) in a_img.annotations.iter().enumerate() {
            if cfg.drop_stuff && amodal_stuff.contains(&a.category_id) {
                continue;
            }
            if cfg.drop_crowd && a.is_crowd {
                continue;
            }
            for (mi, m) in m_img.annotations.iter().enumerate() {
                if cfg.drop_stuff && modal_stuff.contains(&m.category_id) {
                    continue;
                }
                if cfg.drop_crowd && m.is_crowd {
                    continue;
                }
                let iou = a.visible.iou(&m.visible)?;
                if iou > cfg.iou_threshold {
                    pairs.push(Pair {
                        iou,
                        a_idx: ai,
                        m_idx: mi,
                    });
                }
            }
        }
        // greedy one-to-one: best IoU first, stable on annotation order
        pairs.sort_by(|p, q| {
            q.iou
                .partial_cmp(&p.iou)
                .unwrap()
                .then(p.a_idx.cmp(&q.a_idx))
                .then(p.m_idx.cmp(&q.m_idx))
        });
        let mut a_taken = vec![false; a_img.annotations.len()];
        let mut m_taken = vec![false; m_img.annotations.len()];
        let mut kept: Vec<InstanceAnnotation> = Vec::new();
        for p in &pairs {
            if a_taken[p.a_idx] || m_taken[p.m_idx] {
                continue;
            }
            a_taken[p.a_idx] = true;
            m_taken[p.m_idx] = true;
            let mut ann = a_img.annotations[p.a_idx].clone();
            ann.category_id = m_img.annotations[p.m_idx].category_id;
            kept.push(ann);
        }
        kept.sort_by_key(|a| a.id);
        if !kept.is_empty() {
            let mut img = a_img.clone();
            img.annotations = kept;
            out.images.push(img);
        }
    }
    Ok(out)
}
