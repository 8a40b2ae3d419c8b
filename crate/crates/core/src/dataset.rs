//! In-memory and on-disk model for semantic amodal datasets.
//!
//! Three input formats are understood: the toolkit's own `native` JSON,
//! COCOA-style files (per-image `regions` lists), and D2S-amodal-style files
//! (COCO layout with `visible_mask`/`invisible_mask` extras). Saving always
//! uses the native format with uncompressed integer RLE so files diff cleanly
//! and round-trip bit-exactly.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::{BinaryMask, MaskError, Segmentation};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("{}", format_violations(.0))]
    Validation(Vec<Violation>),
    #[error("mask error: {0}")]
    Mask(#[from] MaskError),
}

/// One violated invariant, tied to the annotation that broke it.
#[derive(Debug, Clone, Serialize)]
pub struct Violation {
    pub annotation_id: Option<u64>,
    pub message: String,
}

fn format_violations(violations: &[Violation]) -> String {
    let mut s = format!("dataset validation failed ({} violations)", violations.len());
    for v in violations {
        match v.annotation_id {
            Some(id) => s.push_str(&format!("\n  annotation {}: {}", id, v.message)),
            None => s.push_str(&format!("\n  {}", v.message)),
        }
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    Native,
    Cocoa,
    D2sAmodal,
}

impl DatasetFormat {
    pub fn parse(name: &str) -> Option<DatasetFormat> {
        match name {
            "native" => Some(DatasetFormat::Native),
            "cocoa" => Some(DatasetFormat::Cocoa),
            "d2s_amodal" | "d2s-amodal" | "d2s" => Some(DatasetFormat::D2sAmodal),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: u32,
    pub name: String,
    #[serde(default)]
    pub is_stuff: bool,
}

/// Extra pixels added on each side of an image by the padding pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Padding {
    pub left: u32,
    pub top: u32,
    pub right: u32,
    pub bottom: u32,
}

impl Padding {
    pub fn is_zero(&self) -> bool {
        *self == Padding::default()
    }
}

/// One ground-truth object. `invisible` is `None` when occlusion was never
/// annotated; an absent mask is deliberately distinct from an empty one.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u32,
    pub amodal: BinaryMask,
    pub visible: BinaryMask,
    pub invisible: Option<BinaryMask>,
    /// Z-ordering within the image, 0 = front-most.
    pub depth_order: u32,
    pub is_crowd: bool,
    /// Image-coordinate position of the mask canvas origin. `(0, 0)` with a
    /// canvas matching the image means the annotation is in normal form;
    /// anything else marks masks awaiting the padding pass.
    pub canvas_origin: (i32, i32),
}

impl InstanceAnnotation {
    /// Fraction of the object that is occluded: `area(invisible) / area(amodal)`,
    /// zero when occlusion was never annotated.
    pub fn occlusion_rate(&self) -> f64 {
        match &self.invisible {
            None => 0.0,
            Some(inv) => {
                let am = self.amodal.area();
                if am == 0 {
                    0.0
                } else {
                    inv.area() as f64 / am as f64
                }
            }
        }
    }

    /// Occluded means an invisible mask is present and nonempty.
    pub fn is_occluded(&self) -> bool {
        self.invisible.as_ref().is_some_and(|m| !m.is_empty())
    }

    fn in_normal_form(&self, image: &ImageRecord) -> bool {
        self.canvas_origin == (0, 0)
            && self.amodal.height() == image.height
            && self.amodal.width() == image.width
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: u64,
    pub width: u32,
    pub height: u32,
    pub file_name: String,
    pub padding: Option<Padding>,
    pub annotations: Vec<InstanceAnnotation>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub split_name: String,
    pub categories: Vec<Category>,
    pub images: Vec<ImageRecord>,
}

/// Result of loading: the dataset plus what the loader had to do to it.
#[derive(Debug, Default)]
pub struct LoadReport {
    /// Annotations whose visible mask was clipped into the amodal mask.
    pub repaired_visible: usize,
    /// Annotations whose invisible mask was synthesized as amodal minus visible.
    pub synthesized_invisible: usize,
    /// Non-fatal oddities (depth-order inconsistencies, pending padding).
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    pub format: DatasetFormat,
    /// Maximum number of visible-mask pixels outside the amodal mask that the
    /// loader repairs by intersection instead of rejecting.
    pub repair_slack: u64,
    /// Treat depth-order inconsistencies as violations instead of warnings.
    pub strict_depth_order: bool,
}

impl LoadOptions {
    pub fn new(format: DatasetFormat) -> Self {
        LoadOptions {
            format,
            repair_slack: 0,
            strict_depth_order: false,
        }
    }
}

impl Dataset {
    pub fn category(&self, id: u32) -> Option<&Category> {
        self.categories.iter().find(|c| c.id == id)
    }

    pub fn image(&self, id: u64) -> Option<&ImageRecord> {
        self.images.iter().find(|i| i.id == id)
    }

    pub fn annotations(&self) -> impl Iterator<Item = &InstanceAnnotation> {
        self.images.iter().flat_map(|i| i.annotations.iter())
    }

    pub fn annotation_count(&self) -> usize {
        self.images.iter().map(|i| i.annotations.len()).sum()
    }

    pub fn max_annotation_id(&self) -> u64 {
        self.annotations().map(|a| a.id).max().unwrap_or(0)
    }

    /// Check every structural invariant. Returns warnings on success; all
    /// violations are collected before failing so the report is complete.
    pub fn validate(&self, strict_depth_order: bool) -> Result<Vec<String>, DatasetError> {
        let mut violations: Vec<Violation> = Vec::new();
        let mut warnings: Vec<String> = Vec::new();

        let mut cat_ids = HashSet::new();
        for c in &self.categories {
            if c.id == 0 {
                violations.push(Violation {
                    annotation_id: None,
                    message: format!("category id 0 is reserved (category '{}')", c.name),
                });
            }
            if !cat_ids.insert(c.id) {
                violations.push(Violation {
                    annotation_id: None,
                    message: format!("duplicate category id {}", c.id),
                });
            }
        }

        let mut img_ids = HashSet::new();
        let mut ann_ids = HashSet::new();
        for img in &self.images {
            if !img_ids.insert(img.id) {
                violations.push(Violation {
                    annotation_id: None,
                    message: format!("duplicate image id {}", img.id),
                });
            }
            if img.width == 0 || img.height == 0 {
                violations.push(Violation {
                    annotation_id: None,
                    message: format!("image {} has empty dimensions", img.id),
                });
                continue;
            }
            for ann in &img.annotations {
                if !ann_ids.insert(ann.id) {
                    violations.push(Violation {
                        annotation_id: Some(ann.id),
                        message: "duplicate annotation id".into(),
                    });
                }
                if ann.image_id != img.id {
                    violations.push(Violation {
                        annotation_id: Some(ann.id),
                        message: format!(
                            "annotation image_id {} does not match enclosing image {}",
                            ann.image_id, img.id
                        ),
                    });
                }
                if !cat_ids.contains(&ann.category_id) {
                    violations.push(Violation {
                        annotation_id: Some(ann.id),
                        message: format!("unknown category id {}", ann.category_id),
                    });
                }
                self.validate_masks(ann, img, &mut violations, &mut warnings);
            }
            self.validate_depth_order(img, strict_depth_order, &mut violations, &mut warnings);
        }

        if violations.is_empty() {
            Ok(warnings)
        } else {
            Err(DatasetError::Validation(violations))
        }
    }

    fn validate_masks(
        &self,
        ann: &InstanceAnnotation,
        img: &ImageRecord,
        violations: &mut Vec<Violation>,
        warnings: &mut Vec<String>,
    ) {
        let mut push = |msg: String| {
            violations.push(Violation {
                annotation_id: Some(ann.id),
                message: msg,
            })
        };

        let (h, w) = (ann.amodal.height(), ann.amodal.width());
        if ann.visible.height() != h || ann.visible.width() != w {
            push(format!(
                "visible mask {}x{} does not match amodal canvas {}x{}",
                ann.visible.height(),
                ann.visible.width(),
                h,
                w
            ));
            return;
        }
        if let Some(inv) = &ann.invisible {
            if inv.height() != h || inv.width() != w {
                push(format!(
                    "invisible mask {}x{} does not match amodal canvas {}x{}",
                    inv.height(),
                    inv.width(),
                    h,
                    w
                ));
                return;
            }
        }

        if !ann.in_normal_form(img) {
            warnings.push(format!(
                "annotation {}: masks on a {}x{} canvas at origin {:?} await padding (image {} is {}x{})",
                ann.id, h, w, ann.canvas_origin, img.id, img.height, img.width
            ));
        }

        if ann.amodal.is_empty() {
            push("amodal mask is empty".into());
        }
        let visible_subset = ann
            .visible
            .is_subset_of(&ann.amodal)
            .expect("dims checked above");
        if !visible_subset {
            push("visible mask is not a subset of the amodal mask".into());
        }
        match &ann.invisible {
            Some(inv) => {
                let expected = ann
                    .amodal
                    .difference(&ann.visible)
                    .expect("dims checked above");
                if *inv != expected {
                    push("invisible mask is not amodal minus visible".into());
                }
                if ann
                    .visible
                    .intersection_area(inv)
                    .expect("dims checked above")
                    != 0
                {
                    push("visible and invisible masks overlap".into());
                }
            }
            None => {
                // absent means "never annotated", which is only coherent for
                // fully visible objects
                if visible_subset && ann.visible != ann.amodal {
                    push("invisible mask absent but visible differs from amodal".into());
                }
            }
        }
    }

    /// Depth order must act as an occluder relation: if a sits in front of b
    /// and their amodal masks overlap, that overlap belongs to b's invisible
    /// mask. Real datasets only get a warning; synthesis output must pass.
    fn validate_depth_order(
        &self,
        img: &ImageRecord,
        strict: bool,
        violations: &mut Vec<Violation>,
        warnings: &mut Vec<String>,
    ) {
        for a in &img.annotations {
            for b in &img.annotations {
                if a.id == b.id || a.depth_order >= b.depth_order {
                    continue;
                }
                if a.amodal.height() != b.amodal.height() || a.amodal.width() != b.amodal.width() {
                    continue; // mixed canvases are reported elsewhere
                }
                let overlap = a
                    .amodal
                    .intersection(&b.amodal)
                    .expect("dims checked above");
                if overlap.is_empty() {
                    continue;
                }
                let covered = match &b.invisible {
                    Some(inv) => overlap.is_subset_of(inv).expect("same dims"),
                    None => false,
                };
                if !covered {
                    let msg = format!(
                        "annotation {} (depth {}) overlaps {} (depth {}) but the overlap is not in the back object's invisible mask",
                        a.id, a.depth_order, b.id, b.depth_order
                    );
                    if strict {
                        violations.push(Violation {
                            annotation_id: Some(b.id),
                            message: msg,
                        });
                    } else {
                        warnings.push(msg);
                    }
                }
            }
        }
    }
}

/// Load and validate a dataset with default options for the format.
pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<(Dataset, LoadReport), DatasetError> {
    load_dataset_with(path, LoadOptions::new(format))
}

pub fn load_dataset_with(
    path: &Path,
    opts: LoadOptions,
) -> Result<(Dataset, LoadReport), DatasetError> {
    let text = fs::read_to_string(path)?;
    let mut report = LoadReport::default();
    let mut ds = match opts.format {
        DatasetFormat::Native => parse_native(&text, &mut report)?,
        DatasetFormat::Cocoa => parse_cocoa(&text, &mut report)?,
        DatasetFormat::D2sAmodal => parse_d2s(&text, &mut report)?,
    };
    repair_visible_subset(&mut ds, opts.repair_slack, &mut report);
    synthesize_missing_invisible(&mut ds, &mut report);
    let warnings = ds.validate(opts.strict_depth_order)?;
    for wmsg in &warnings {
        log::warn!("{wmsg}");
    }
    report.warnings.extend(warnings);
    Ok((ds, report))
}

/// Save in native format. Loading the result yields an equal `Dataset`.
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<(), DatasetError> {
    let file = to_native(ds);
    let mut bytes = serde_json::to_vec_pretty(&file).map_err(|e| DatasetError::Parse(e.to_string()))?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

/// Serialize to the native JSON bytes without touching the filesystem.
pub fn dataset_to_json(ds: &Dataset) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(&to_native(ds)).expect("native model serializes");
    bytes.push(b'\n');
    bytes
}

fn repair_visible_subset(ds: &mut Dataset, slack: u64, report: &mut LoadReport) {
    for img in &mut ds.images {
        for ann in &mut img.annotations {
            if ann.visible.height() != ann.amodal.height()
                || ann.visible.width() != ann.amodal.width()
            {
                continue; // validation will reject
            }
            let outside = ann.visible.area()
                - ann
                    .visible
                    .intersection_area(&ann.amodal)
                    .expect("same dims");
            if outside > 0 && outside <= slack {
                ann.visible = ann.visible.intersection(&ann.amodal).expect("same dims");
                if let Some(inv) = &ann.invisible {
                    if inv.height() == ann.amodal.height() && inv.width() == ann.amodal.width() {
                        ann.invisible =
                            Some(ann.amodal.difference(&ann.visible).expect("same dims"));
                    }
                }
                report.repaired_visible += 1;
                log::warn!(
                    "annotation {}: clipped {} visible pixels outside the amodal mask",
                    ann.id,
                    outside
                );
            }
        }
    }
}

fn synthesize_missing_invisible(ds: &mut Dataset, report: &mut LoadReport) {
    for img in &mut ds.images {
        for ann in &mut img.annotations {
            if ann.invisible.is_some() {
                continue;
            }
            if ann.visible.height() != ann.amodal.height()
                || ann.visible.width() != ann.amodal.width()
            {
                continue;
            }
            // loaders set this marker via visible != amodal only when an
            // occlusion flag was present; see the per-format parsers
            if ann.visible != ann.amodal
                && ann.visible.is_subset_of(&ann.amodal).expect("same dims")
            {
                ann.invisible = Some(ann.amodal.difference(&ann.visible).expect("same dims"));
                report.synthesized_invisible += 1;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// native format
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct NativeFile {
    #[serde(default = "default_format_version")]
    format_version: u32,
    #[serde(default)]
    split_name: String,
    categories: Vec<Category>,
    images: Vec<NativeImage>,
    annotations: Vec<NativeAnnotation>,
}

fn default_format_version() -> u32 {
    1
}

#[derive(Serialize, Deserialize)]
struct NativeImage {
    id: u64,
    width: u32,
    height: u32,
    #[serde(default)]
    file_name: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    padding: Option<Padding>,
}

#[derive(Serialize, Deserialize)]
struct NativeAnnotation {
    id: u64,
    image_id: u64,
    category_id: u32,
    amodal_seg: Segmentation,
    visible_seg: Segmentation,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    invisible_seg: Option<Segmentation>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    occluded: Option<bool>,
    #[serde(default)]
    depth_order: u32,
    #[serde(default)]
    iscrowd: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    canvas_origin: Option<[i32; 2]>,
}

fn parse_native(text: &str, _report: &mut LoadReport) -> Result<Dataset, DatasetError> {
    let file: NativeFile =
        serde_json::from_str(text).map_err(|e| DatasetError::Parse(e.to_string()))?;
    let mut images: Vec<ImageRecord> = file
        .images
        .iter()
        .map(|i| ImageRecord {
            id: i.id,
            width: i.width,
            height: i.height,
            file_name: i.file_name.clone(),
            padding: i.padding,
            annotations: Vec::new(),
        })
        .collect();
    let by_id: HashMap<u64, usize> = images.iter().enumerate().map(|(i, r)| (r.id, i)).collect();

    for ann in file.annotations {
        let img_idx = *by_id.get(&ann.image_id).ok_or_else(|| {
            DatasetError::Parse(format!(
                "annotation {} references unknown image {}",
                ann.id, ann.image_id
            ))
        })?;
        let img_h = images[img_idx].height;
        let img_w = images[img_idx].width;
        // masks on their own canvas: decode at the RLE's stated size
        let amodal = ann.amodal_seg.to_mask_native(img_h, img_w)?;
        let (h, w) = (amodal.height(), amodal.width());
        let visible = ann.visible_seg.to_mask_native(h, w)?;
        let mut invisible = match &ann.invisible_seg {
            Some(seg) => Some(seg.to_mask_native(h, w)?),
            None => None,
        };
        if invisible.is_none()
            && ann.occluded == Some(true)
            && visible.height() == h
            && visible.width() == w
            && visible.is_subset_of(&amodal).unwrap_or(false)
        {
            invisible = Some(amodal.difference(&visible).expect("same dims"));
        }
        images[img_idx].annotations.push(InstanceAnnotation {
            id: ann.id,
            image_id: ann.image_id,
            category_id: ann.category_id,
            amodal,
            visible,
            invisible,
            depth_order: ann.depth_order,
            is_crowd: ann.iscrowd,
            canvas_origin: ann.canvas_origin.map_or((0, 0), |o| (o[0], o[1])),
        });
    }

    Ok(Dataset {
        split_name: file.split_name,
        categories: file.categories,
        images,
    })
}

fn to_native(ds: &Dataset) -> NativeFile {
    NativeFile {
        format_version: 1,
        split_name: ds.split_name.clone(),
        categories: ds.categories.clone(),
        images: ds
            .images
            .iter()
            .map(|i| NativeImage {
                id: i.id,
                width: i.width,
                height: i.height,
                file_name: i.file_name.clone(),
                padding: i.padding,
            })
            .collect(),
        annotations: ds
            .images
            .iter()
            .flat_map(|i| i.annotations.iter())
            .map(|a| NativeAnnotation {
                id: a.id,
                image_id: a.image_id,
                category_id: a.category_id,
                amodal_seg: Segmentation::from_mask(&a.amodal),
                visible_seg: Segmentation::from_mask(&a.visible),
                invisible_seg: a.invisible.as_ref().map(Segmentation::from_mask),
                occluded: None,
                depth_order: a.depth_order,
                iscrowd: a.is_crowd,
                canvas_origin: match a.canvas_origin {
                    (0, 0) => None,
                    (x, y) => Some([x, y]),
                },
            })
            .collect(),
    }
}

// ---------------------------------------------------------------------------
// COCOA format
// ---------------------------------------------------------------------------

pub const COCOA_OBJECT_CATEGORY: u32 = 1;
pub const COCOA_STUFF_CATEGORY: u32 = 2;

#[derive(Deserialize)]
struct CocoaFile {
    images: Vec<NativeImage>,
    annotations: Vec<CocoaAnnotation>,
}

#[derive(Deserialize)]
struct CocoaAnnotation {
    image_id: u64,
    regions: Vec<CocoaRegion>,
}

#[derive(Deserialize)]
struct CocoaRegion {
    segmentation: Segmentation,
    #[serde(default)]
    visible_mask: Option<Segmentation>,
    #[serde(default)]
    invisible_mask: Option<Segmentation>,
    #[serde(default, deserialize_with = "bool_from_int_or_bool")]
    isstuff: bool,
    #[serde(default)]
    order: u32,
}

fn bool_from_int_or_bool<'de, D>(de: D) -> Result<bool, D::Error>
where
    D: serde::Deserializer<'de>,
{
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum IntOrBool {
        Int(i64),
        Bool(bool),
    }
    Ok(match IntOrBool::deserialize(de)? {
        IntOrBool::Int(v) => v != 0,
        IntOrBool::Bool(b) => b,
    })
}

fn parse_cocoa(text: &str, _report: &mut LoadReport) -> Result<Dataset, DatasetError> {
    let file: CocoaFile =
        serde_json::from_str(text).map_err(|e| DatasetError::Parse(e.to_string()))?;
    let mut images: Vec<ImageRecord> = file
        .images
        .iter()
        .map(|i| ImageRecord {
            id: i.id,
            width: i.width,
            height: i.height,
            file_name: i.file_name.clone(),
            padding: None,
            annotations: Vec::new(),
        })
        .collect();
    let by_id: HashMap<u64, usize> = images.iter().enumerate().map(|(i, r)| (r.id, i)).collect();

    let mut next_id = 1u64;
    for ann in file.annotations {
        let img_idx = *by_id.get(&ann.image_id).ok_or_else(|| {
            DatasetError::Parse(format!("regions reference unknown image {}", ann.image_id))
        })?;
        let (h, w) = (images[img_idx].height, images[img_idx].width);
        for region in ann.regions {
            // polygons at image borders are clipped during rasterization
            let amodal = region.segmentation.to_mask(h, w)?;
            let visible = match &region.visible_mask {
                Some(seg) => seg.to_mask(h, w)?,
                None => amodal.clone(),
            };
            let invisible = match &region.invisible_mask {
                Some(seg) => Some(seg.to_mask(h, w)?),
                // presence of a visible mask is COCOA's occlusion marker
                None if region.visible_mask.is_some() => None, // synthesized later
                None => None,
            };
            images[img_idx].annotations.push(InstanceAnnotation {
                id: next_id,
                image_id: ann.image_id,
                category_id: if region.isstuff {
                    COCOA_STUFF_CATEGORY
                } else {
                    COCOA_OBJECT_CATEGORY
                },
                amodal,
                visible,
                invisible,
                depth_order: region.order,
                is_crowd: false,
                canvas_origin: (0, 0),
            });
            next_id += 1;
        }
    }

    Ok(Dataset {
        split_name: String::new(),
        categories: vec![
            Category {
                id: COCOA_OBJECT_CATEGORY,
                name: "object".into(),
                is_stuff: false,
            },
            Category {
                id: COCOA_STUFF_CATEGORY,
                name: "stuff".into(),
                is_stuff: true,
            },
        ],
        images,
    })
}

// ---------------------------------------------------------------------------
// D2S-amodal format (COCO layout plus visible/invisible extras)
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct D2sFile {
    images: Vec<NativeImage>,
    annotations: Vec<D2sAnnotation>,
    categories: Vec<D2sCategory>,
}

#[derive(Deserialize)]
struct D2sCategory {
    id: u32,
    name: String,
    #[serde(default, deserialize_with = "bool_from_int_or_bool")]
    is_stuff: bool,
}

#[derive(Deserialize)]
struct D2sAnnotation {
    id: u64,
    image_id: u64,
    category_id: u32,
    segmentation: Segmentation,
    #[serde(default)]
    visible_mask: Option<Segmentation>,
    #[serde(default)]
    invisible_mask: Option<Segmentation>,
    #[serde(default, deserialize_with = "bool_from_int_or_bool")]
    iscrowd: bool,
    #[serde(default, alias = "order")]
    depth_order: u32,
}

fn parse_d2s(text: &str, _report: &mut LoadReport) -> Result<Dataset, DatasetError> {
    let file: D2sFile =
        serde_json::from_str(text).map_err(|e| DatasetError::Parse(e.to_string()))?;
    let mut images: Vec<ImageRecord> = file
        .images
        .iter()
        .map(|i| ImageRecord {
            id: i.id,
            width: i.width,
            height: i.height,
            file_name: i.file_name.clone(),
            padding: None,
            annotations: Vec::new(),
        })
        .collect();
    let by_id: HashMap<u64, usize> = images.iter().enumerate().map(|(i, r)| (r.id, i)).collect();

    for ann in file.annotations {
        let img_idx = *by_id.get(&ann.image_id).ok_or_else(|| {
            DatasetError::Parse(format!(
                "annotation {} references unknown image {}",
                ann.id, ann.image_id
            ))
        })?;
        let (h, w) = (images[img_idx].height, images[img_idx].width);
        let amodal = ann.segmentation.to_mask(h, w)?;
        let visible = match &ann.visible_mask {
            Some(seg) => seg.to_mask(h, w)?,
            None => amodal.clone(),
        };
        let invisible = match &ann.invisible_mask {
            Some(seg) => Some(seg.to_mask(h, w)?),
            None => None,
        };
        images[img_idx].annotations.push(InstanceAnnotation {
            id: ann.id,
            image_id: ann.image_id,
            category_id: ann.category_id,
            amodal,
            visible,
            invisible,
            depth_order: ann.depth_order,
            is_crowd: ann.iscrowd,
            canvas_origin: (0, 0),
        });
    }

    Ok(Dataset {
        split_name: String::new(),
        categories: file
            .categories
            .into_iter()
            .map(|c| Category {
                id: c.id,
                name: c.name,
                is_stuff: c.is_stuff,
            })
            .collect(),
        images,
    })
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "dataset '{}': {} categories, {} images, {} annotations",
            self.split_name,
            self.categories.len(),
            self.images.len(),
            self.annotation_count()
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::BinaryMask;

    fn rect(h: u32, w: u32, x0: u32, y0: u32, rw: u32, rh: u32) -> BinaryMask {
        let mut dense = vec![false; (h * w) as usize];
        for x in x0..(x0 + rw).min(w) {
            for y in y0..(y0 + rh).min(h) {
                dense[(x * h + y) as usize] = true;
            }
        }
        BinaryMask::from_dense(h, w, &dense)
    }

    pub(crate) fn simple_annotation(
        id: u64,
        image_id: u64,
        category_id: u32,
        amodal: BinaryMask,
        visible: BinaryMask,
    ) -> InstanceAnnotation {
        let invisible = if visible == amodal {
            None
        } else {
            Some(amodal.difference(&visible).unwrap())
        };
        InstanceAnnotation {
            id,
            image_id,
            category_id,
            amodal,
            visible,
            invisible,
            depth_order: 0,
            is_crowd: false,
            canvas_origin: (0, 0),
        }
    }

    fn fixture() -> Dataset {
        // 2 images, 3 annotations; annotation 2 is half occluded
        let am1 = rect(16, 16, 2, 2, 6, 6);
        let am2 = rect(16, 16, 4, 4, 8, 8);
        let vis2 = rect(16, 16, 4, 8, 8, 4); // bottom half
        let am3 = rect(16, 16, 1, 1, 4, 4);
        Dataset {
            split_name: "fixture".into(),
            categories: vec![
                Category {
                    id: 1,
                    name: "box".into(),
                    is_stuff: false,
                },
                Category {
                    id: 2,
                    name: "disk".into(),
                    is_stuff: false,
                },
            ],
            images: vec![
                ImageRecord {
                    id: 10,
                    width: 16,
                    height: 16,
                    file_name: "a.png".into(),
                    padding: None,
                    annotations: vec![
                        {
                            let mut a =
                                simple_annotation(1, 10, 1, am1.clone(), am1.clone());
                            a.depth_order = 0;
                            a
                        },
                        {
                            let mut a = simple_annotation(2, 10, 2, am2, vis2);
                            a.depth_order = 1;
                            a
                        },
                    ],
                },
                ImageRecord {
                    id: 11,
                    width: 16,
                    height: 16,
                    file_name: "b.png".into(),
                    padding: Some(Padding {
                        left: 0,
                        top: 0,
                        right: 3,
                        bottom: 0,
                    }),
                    annotations: vec![simple_annotation(3, 11, 1, am3.clone(), am3)],
                },
            ],
        }
    }

    #[test]
    fn fixture_validates() {
        // annotation 1 overlaps 2 from the front; overlap is inside 2's invisible
        let ds = fixture();
        assert!(ds.validate(true).unwrap().is_empty());
    }

    #[test]
    fn roundtrip_native() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.json");
        let ds = fixture();
        save_dataset(&ds, &path).unwrap();
        let (back, report) = load_dataset(&path, DatasetFormat::Native).unwrap();
        assert_eq!(back, ds);
        assert_eq!(report.repaired_visible, 0);
        // padding metadata survives
        assert_eq!(
            back.image(11).unwrap().padding,
            Some(Padding {
                left: 0,
                top: 0,
                right: 3,
                bottom: 0
            })
        );
    }

    #[test]
    fn save_is_deterministic() {
        let ds = fixture();
        assert_eq!(dataset_to_json(&ds), dataset_to_json(&ds));
    }

    #[test]
    fn empty_dataset_is_valid() {
        let ds = Dataset {
            split_name: "empty".into(),
            categories: vec![],
            images: vec![],
        };
        assert!(ds.validate(false).unwrap().is_empty());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.json");
        save_dataset(&ds, &path).unwrap();
        let (back, _) = load_dataset(&path, DatasetFormat::Native).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn visible_outside_amodal_is_rejected_and_named() {
        let mut ds = fixture();
        let bad = rect(16, 16, 0, 0, 12, 12); // strictly larger than amodal
        ds.images[0].annotations[0].visible = bad;
        let err = ds.validate(false).unwrap_err();
        match err {
            DatasetError::Validation(violations) => {
                assert!(violations
                    .iter()
                    .any(|v| v.annotation_id == Some(1) && v.message.contains("subset")));
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn load_rejects_violation_with_annotation_id() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        let mut ds = fixture();
        ds.images[0].annotations[0].visible = rect(16, 16, 0, 0, 12, 12);
        // bypass validation by serializing directly
        std::fs::write(&path, dataset_to_json(&ds)).unwrap();
        let err = load_dataset(&path, DatasetFormat::Native).unwrap_err();
        assert!(err.to_string().contains("annotation 1"));
    }

    #[test]
    fn repair_slack_clips_visible() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("slack.json");
        let mut ds = fixture();
        // visible pokes 4 pixels outside amodal
        let amodal = rect(16, 16, 2, 2, 6, 6);
        let visible = rect(16, 16, 2, 2, 6, 6).paste(&rect(16, 16, 8, 2, 1, 4), 0, 0);
        ds.images[0].annotations[0].amodal = amodal.clone();
        ds.images[0].annotations[0].visible = visible;
        ds.images[0].annotations[0].invisible = None;
        std::fs::write(&path, dataset_to_json(&ds)).unwrap();

        assert!(load_dataset(&path, DatasetFormat::Native).is_err());
        let mut opts = LoadOptions::new(DatasetFormat::Native);
        opts.repair_slack = 4;
        let (repaired, report) = load_dataset_with(&path, opts).unwrap();
        assert_eq!(report.repaired_visible, 1);
        assert_eq!(repaired.images[0].annotations[0].visible, amodal);
    }

    #[test]
    fn occlusion_rate_cases() {
        let am = rect(16, 16, 0, 0, 10, 10); // area 100
        let vis = rect(16, 16, 0, 0, 10, 10);
        let full = simple_annotation(1, 1, 1, am.clone(), vis);
        assert_eq!(full.occlusion_rate(), 0.0);
        assert!(!full.is_occluded());

        // invisible area 33 of 100
        let mut dense = am.to_dense();
        let mut removed = 0;
        for v in dense.iter_mut() {
            if *v && removed < 33 {
                *v = false;
                removed += 1;
            }
        }
        let vis33 = BinaryMask::from_dense(16, 16, &dense);
        let part = simple_annotation(2, 1, 1, am, vis33);
        assert!((part.occlusion_rate() - 0.33).abs() < 1e-12);
        assert!(part.is_occluded());
    }

    #[test]
    fn cocoa_format_parses() {
        let json = r#"{
            "images": [{"id": 5, "width": 8, "height": 8, "file_name": "x.jpg"}],
            "annotations": [{
                "image_id": 5,
                "regions": [
                    {"segmentation": [0.0, 0.0, 4.0, 0.0, 4.0, 4.0, 0.0, 4.0],
                     "isstuff": 0, "order": 1},
                    {"segmentation": [2.0, 2.0, 6.0, 2.0, 6.0, 6.0, 2.0, 6.0],
                     "visible_mask": {"size": [8, 8], "counts": [20, 2, 6, 2, 4, 4, 4, 4, 18]},
                     "isstuff": 0, "order": 2}
                ]
            }]
        }"#;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cocoa.json");
        std::fs::write(&path, json).unwrap();
        let (ds, report) = load_dataset(&path, DatasetFormat::Cocoa).unwrap();
        assert_eq!(ds.annotation_count(), 2);
        let occluded = &ds.images[0].annotations[1];
        // invisible synthesized as amodal minus visible
        assert_eq!(report.synthesized_invisible, 1);
        assert!(occluded.is_occluded());
        let expect_inv = occluded
            .amodal
            .difference(&occluded.visible)
            .unwrap();
        assert_eq!(occluded.invisible.as_ref().unwrap(), &expect_inv);
    }

    #[test]
    fn d2s_format_parses() {
        let json = r#"{
            "categories": [{"id": 3, "name": "carton"}],
            "images": [{"id": 1, "width": 8, "height": 8, "file_name": "d.png"}],
            "annotations": [{
                "id": 7, "image_id": 1, "category_id": 3,
                "segmentation": {"size": [8, 8], "counts": [0, 8, 48, 8]},
                "visible_mask": {"size": [8, 8], "counts": [0, 8, 56]},
                "invisible_mask": {"size": [8, 8], "counts": [56, 8]},
                "iscrowd": 0
            }]
        }"#;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d2s.json");
        std::fs::write(&path, json).unwrap();
        let (ds, _) = load_dataset(&path, DatasetFormat::D2sAmodal).unwrap();
        let ann = &ds.images[0].annotations[0];
        assert_eq!(ann.category_id, 3);
        assert_eq!(ann.amodal.area(), 16);
        assert!((ann.occlusion_rate() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let ds = fixture();
        let err = save_dataset(&ds, Path::new("/nonexistent-dir/out.json")).unwrap_err();
        assert!(matches!(err, DatasetError::Io(_)));
    }
}
