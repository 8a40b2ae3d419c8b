//! Run-length-encoded binary masks and the set algebra on them.
//!
//! Masks are stored column-major (Fortran order, the COCO convention):
//! pixel `(x, y)` lives at flat index `x * height + y`. Runs alternate
//! background/foreground and always start with a background count, which
//! may be zero when pixel `(0, 0)` is foreground.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MaskError {
    #[error("run lengths sum to {got}, expected {expected} for a {height}x{width} mask")]
    RunSumMismatch {
        height: u32,
        width: u32,
        expected: u64,
        got: u64,
    },
    #[error("mask dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(u32, u32, u32, u32),
    #[error("polygon needs at least 3 vertices, got {0}")]
    DegeneratePolygon(usize),
    #[error("polygon has a non-finite coordinate")]
    NonFiniteVertex,
    #[error("mask dimensions must be positive")]
    EmptyDimensions,
    #[error("invalid compressed RLE string")]
    BadRleString,
}

/// A 2-D binary region, run-length encoded in column-major order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: u32,
    width: u32,
    runs: Vec<u32>,
}

impl BinaryMask {
    /// Encode a dense column-major boolean grid. `dense.len()` must equal
    /// `height * width` and both dimensions must be positive.
    pub fn from_dense(height: u32, width: u32, dense: &[bool]) -> Self {
        assert!(height > 0 && width > 0, "mask dimensions must be positive");
        let n = (height as usize) * (width as usize);
        assert_eq!(dense.len(), n, "dense grid length must equal height*width");

        let mut runs = Vec::new();
        let mut current = false;
        let mut count: u32 = 0;
        for &v in dense {
            if v != current {
                runs.push(count);
                count = 0;
                current = v;
            }
            count += 1;
        }
        runs.push(count);
        // Trailing background stays merged into the final run; a foreground
        // start is encoded with a leading zero.
        BinaryMask {
            height,
            width,
            runs,
        }
    }

    /// Build a mask from raw run lengths, canonicalizing interior zero runs.
    /// The first run counts background pixels and may be zero.
    pub fn from_runs(height: u32, width: u32, runs: Vec<u32>) -> Result<Self, MaskError> {
        if height == 0 || width == 0 {
            return Err(MaskError::EmptyDimensions);
        }
        let expected = height as u64 * width as u64;
        let got: u64 = runs.iter().map(|&r| r as u64).sum();
        if got != expected {
            return Err(MaskError::RunSumMismatch {
                height,
                width,
                expected,
                got,
            });
        }
        // Coalesce: an interior zero-length run flips parity without
        // advancing, so its neighbours merge. A leading background zero
        // survives (it encodes a foreground start).
        let mut canon: Vec<u32> = Vec::with_capacity(runs.len());
        for (i, &r) in runs.iter().enumerate() {
            if r == 0 && i > 0 {
                continue;
            }
            let fg = i % 2 == 1;
            let tail_is_fg = canon.len() % 2 == 1;
            if fg == tail_is_fg {
                canon.push(r);
            } else {
                // same value as the run already at the tail: merge
                *canon.last_mut().expect("first run is always pushed") += r;
            }
        }
        Ok(BinaryMask {
            height,
            width,
            runs: canon,
        })
    }

    pub fn empty(height: u32, width: u32) -> Self {
        assert!(height > 0 && width > 0, "mask dimensions must be positive");
        BinaryMask {
            height,
            width,
            runs: vec![height * width],
        }
    }

    pub fn full(height: u32, width: u32) -> Self {
        assert!(height > 0 && width > 0, "mask dimensions must be positive");
        BinaryMask {
            height,
            width,
            runs: vec![0, height * width],
        }
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn runs(&self) -> &[u32] {
        &self.runs
    }

    /// Decode to a dense column-major boolean grid.
    pub fn to_dense(&self) -> Vec<bool> {
        let n = (self.height as usize) * (self.width as usize);
        let mut dense = vec![false; n];
        let mut idx = 0usize;
        let mut value = false;
        for &r in &self.runs {
            let end = idx + r as usize;
            if value {
                dense[idx..end].fill(true);
            }
            idx = end;
            value = !value;
        }
        dense
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        debug_assert!(x < self.width && y < self.height);
        let target = (x as u64) * (self.height as u64) + y as u64;
        let mut cum = 0u64;
        for (i, &r) in self.runs.iter().enumerate() {
            cum += r as u64;
            if target < cum {
                return i % 2 == 1;
            }
        }
        false
    }

    /// Number of foreground pixels.
    pub fn area(&self) -> u64 {
        self.runs
            .iter()
            .skip(1)
            .step_by(2)
            .map(|&r| r as u64)
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    fn check_dims(&self, other: &BinaryMask) -> Result<(), MaskError> {
        if self.height != other.height || self.width != other.width {
            return Err(MaskError::DimensionMismatch(
                self.height,
                self.width,
                other.height,
                other.width,
            ));
        }
        Ok(())
    }

    /// Walk two run streams in lockstep, combining values with `op`.
    fn combine(&self, other: &BinaryMask, op: impl Fn(bool, bool) -> bool) -> BinaryMask {
        let total = self.height as u64 * self.width as u64;
        let mut runs: Vec<u32> = Vec::new();
        let mut wa = RunWalker::new(&self.runs);
        let mut wb = RunWalker::new(&other.runs);
        let mut consumed = 0u64;
        let mut prev: Option<bool> = None;
        while consumed < total {
            let step = wa.remaining.min(wb.remaining);
            let v = op(wa.value, wb.value);
            match prev {
                Some(p) if p == v => *runs.last_mut().unwrap() += step,
                _ => {
                    if runs.is_empty() && v {
                        runs.push(0);
                    }
                    runs.push(step);
                    prev = Some(v);
                }
            }
            consumed += step as u64;
            wa.advance(step);
            wb.advance(step);
        }
        if runs.is_empty() {
            runs.push(self.height * self.width);
        }
        BinaryMask {
            height: self.height,
            width: self.width,
            runs,
        }
    }

    pub fn intersection(&self, other: &BinaryMask) -> Result<BinaryMask, MaskError> {
        self.check_dims(other)?;
        Ok(self.combine(other, |a, b| a && b))
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask, MaskError> {
        self.check_dims(other)?;
        Ok(self.combine(other, |a, b| a || b))
    }

    /// Pixels of `self` not in `other`.
    pub fn difference(&self, other: &BinaryMask) -> Result<BinaryMask, MaskError> {
        self.check_dims(other)?;
        Ok(self.combine(other, |a, b| a && !b))
    }

    /// Intersection area without materializing the intersection mask.
    pub fn intersection_area(&self, other: &BinaryMask) -> Result<u64, MaskError> {
        self.check_dims(other)?;
        let total = self.height as u64 * self.width as u64;
        let mut wa = RunWalker::new(&self.runs);
        let mut wb = RunWalker::new(&other.runs);
        let mut consumed = 0u64;
        let mut inter = 0u64;
        while consumed < total {
            let step = wa.remaining.min(wb.remaining);
            if wa.value && wb.value {
                inter += step as u64;
            }
            consumed += step as u64;
            wa.advance(step);
            wb.advance(step);
        }
        Ok(inter)
    }

    /// Intersection over union. Zero when both masks are empty, which keeps
    /// empty invisible masks from matching each other during evaluation.
    pub fn iou(&self, other: &BinaryMask) -> Result<f64, MaskError> {
        let inter = self.intersection_area(other)?;
        let union = self.area() + other.area() - inter;
        if union == 0 {
            return Ok(0.0);
        }
        Ok(inter as f64 / union as f64)
    }

    /// Whether every foreground pixel of `self` is foreground in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> Result<bool, MaskError> {
        Ok(self.intersection_area(other)? == self.area())
    }

    /// Render this mask onto a `height x width` canvas with its origin at
    /// `(dx, dy)`; pixels falling outside the canvas are discarded.
    pub fn translate_onto(&self, height: u32, width: u32, dx: i64, dy: i64) -> BinaryMask {
        let mut dense = vec![false; height as usize * width as usize];
        let src = self.to_dense();
        for x in 0..self.width as i64 {
            let tx = x + dx;
            if tx < 0 || tx >= width as i64 {
                continue;
            }
            let src_col = (x as usize) * self.height as usize;
            let dst_col = (tx as usize) * height as usize;
            for y in 0..self.height as i64 {
                let ty = y + dy;
                if ty < 0 || ty >= height as i64 {
                    continue;
                }
                if src[src_col + y as usize] {
                    dense[dst_col + ty as usize] = true;
                }
            }
        }
        BinaryMask::from_dense(height, width, &dense)
    }

    /// Union of `self` with `stamp` translated by `(dx, dy)` and clipped to
    /// the dimensions of `self`.
    pub fn paste(&self, stamp: &BinaryMask, dx: i64, dy: i64) -> BinaryMask {
        let moved = stamp.translate_onto(self.height, self.width, dx, dy);
        self.union(&moved).expect("dimensions match by construction")
    }

    /// Grow the canvas by the given border widths; the original foreground is
    /// translated by `(left, top)` and the new border is background.
    pub fn pad(&self, left: u32, top: u32, right: u32, bottom: u32) -> BinaryMask {
        if left == 0 && top == 0 && right == 0 && bottom == 0 {
            return self.clone();
        }
        self.translate_onto(
            self.height + top + bottom,
            self.width + left + right,
            left as i64,
            top as i64,
        )
    }

    /// Foreground bounding box `(x, y, w, h)`, or `None` for an empty mask.
    pub fn bbox(&self) -> Option<(u32, u32, u32, u32)> {
        let h = self.height as u64;
        let mut min_x = u64::MAX;
        let mut max_x = 0u64;
        let mut min_y = u64::MAX;
        let mut max_y = 0u64;
        let mut cum = 0u64;
        let mut any = false;
        for (i, &r) in self.runs.iter().enumerate() {
            if i % 2 == 1 && r > 0 {
                any = true;
                let start = cum;
                let end = cum + r as u64 - 1;
                let (x1, y1) = (start / h, start % h);
                let (x2, y2) = (end / h, end % h);
                min_x = min_x.min(x1);
                max_x = max_x.max(x2);
                if x1 != x2 {
                    // run spans whole columns in between
                    min_y = 0;
                    max_y = h - 1;
                } else {
                    min_y = min_y.min(y1);
                    max_y = max_y.max(y2);
                }
            }
            cum += r as u64;
        }
        if !any {
            return None;
        }
        Some((
            min_x as u32,
            min_y as u32,
            (max_x - min_x + 1) as u32,
            (max_y - min_y + 1) as u32,
        ))
    }

    /// Whether any foreground pixel lies on the outermost row or column.
    pub fn touches_border(&self) -> bool {
        match self.bbox() {
            None => false,
            Some((x, y, w, h)) => {
                x == 0 || y == 0 || x + w == self.width || y + h == self.height
            }
        }
    }
}

struct RunWalker<'a> {
    runs: &'a [u32],
    idx: usize,
    remaining: u32,
    value: bool,
}

impl<'a> RunWalker<'a> {
    fn new(runs: &'a [u32]) -> Self {
        let mut w = RunWalker {
            runs,
            idx: 0,
            remaining: 0,
            value: true, // flipped to false by the first refill
        };
        w.refill();
        w
    }

    fn refill(&mut self) {
        while self.remaining == 0 && self.idx < self.runs.len() {
            self.remaining = self.runs[self.idx];
            self.value = self.idx % 2 == 1;
            self.idx += 1;
        }
        if self.remaining == 0 {
            // exhausted: pad with background so zipped walks terminate
            self.remaining = u32::MAX;
            self.value = false;
        }
    }

    fn advance(&mut self, step: u32) {
        self.remaining -= step;
        if self.remaining == 0 {
            self.refill();
        }
    }
}

/// A simple polygon with sub-pixel vertices, implicitly closed.
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    vertices: Vec<(f64, f64)>,
}

impl Polygon {
    pub fn new(vertices: Vec<(f64, f64)>) -> Result<Self, MaskError> {
        if vertices.len() < 3 {
            return Err(MaskError::DegeneratePolygon(vertices.len()));
        }
        if vertices.iter().any(|&(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(MaskError::NonFiniteVertex);
        }
        Ok(Polygon { vertices })
    }

    /// Build from a flat `[x0, y0, x1, y1, ...]` coordinate list.
    pub fn from_flat(coords: &[f64]) -> Result<Self, MaskError> {
        if coords.len() % 2 != 0 {
            return Err(MaskError::DegeneratePolygon(coords.len() / 2));
        }
        Polygon::new(coords.chunks(2).map(|c| (c[0], c[1])).collect())
    }

    pub fn vertices(&self) -> &[(f64, f64)] {
        &self.vertices
    }

    /// Rasterize with the even-odd rule: a pixel is foreground iff its center
    /// `(x + 0.5, y + 0.5)` lies inside the polygon. Output is clipped to the
    /// image bounds.
    pub fn rasterize(&self, height: u32, width: u32) -> BinaryMask {
        assert!(height > 0 && width > 0, "mask dimensions must be positive");
        let mut dense = vec![false; height as usize * width as usize];
        for x in 0..width {
            let px = x as f64 + 0.5;
            let col = x as usize * height as usize;
            for y in 0..height {
                let py = y as f64 + 0.5;
                if self.contains(px, py) {
                    dense[col + y as usize] = true;
                }
            }
        }
        BinaryMask::from_dense(height, width, &dense)
    }

    /// Even-odd (crossing number) point-in-polygon test.
    fn contains(&self, px: f64, py: f64) -> bool {
        let n = self.vertices.len();
        let mut inside = false;
        let mut j = n - 1;
        for i in 0..n {
            let (xi, yi) = self.vertices[i];
            let (xj, yj) = self.vertices[j];
            if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
                inside = !inside;
            }
            j = i;
        }
        inside
    }
}

/// COCO-style segmentation as found in annotation JSON: either an RLE object
/// (`{"size": [h, w], "counts": ...}`) or one or more polygons. Compressed
/// string counts are accepted on input; output always uses the integer list.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum Segmentation {
    Rle {
        size: [u32; 2],
        counts: RleCounts,
    },
    Polygons(Vec<Vec<f64>>),
    FlatPolygon(Vec<f64>),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum RleCounts {
    Ints(Vec<u32>),
    Compressed(String),
}

impl Segmentation {
    /// Decode into a mask of the given image dimensions. RLE sizes must match
    /// exactly unless `allow_other_canvas` callers decode at the RLE's own
    /// size via [`Segmentation::to_mask_native`].
    pub fn to_mask(&self, height: u32, width: u32) -> Result<BinaryMask, MaskError> {
        match self {
            Segmentation::Rle { size, counts } => {
                let m = decode_rle(size[0], size[1], counts)?;
                if size[0] != height || size[1] != width {
                    return Err(MaskError::DimensionMismatch(
                        size[0], size[1], height, width,
                    ));
                }
                Ok(m)
            }
            Segmentation::Polygons(polys) => {
                let mut acc = BinaryMask::empty(height, width);
                for p in polys {
                    let poly = Polygon::from_flat(p)?;
                    acc = acc.union(&poly.rasterize(height, width))?;
                }
                Ok(acc)
            }
            Segmentation::FlatPolygon(coords) => {
                Ok(Polygon::from_flat(coords)?.rasterize(height, width))
            }
        }
    }

    /// Decode at the segmentation's own canvas size (RLE `size` field);
    /// polygons fall back to the supplied dimensions.
    pub fn to_mask_native(&self, fallback_h: u32, fallback_w: u32) -> Result<BinaryMask, MaskError> {
        match self {
            Segmentation::Rle { size, counts } => decode_rle(size[0], size[1], counts),
            _ => self.to_mask(fallback_h, fallback_w),
        }
    }

    pub fn from_mask(mask: &BinaryMask) -> Segmentation {
        Segmentation::Rle {
            size: [mask.height(), mask.width()],
            counts: RleCounts::Ints(mask.runs().to_vec()),
        }
    }
}

fn decode_rle(height: u32, width: u32, counts: &RleCounts) -> Result<BinaryMask, MaskError> {
    match counts {
        RleCounts::Ints(runs) => BinaryMask::from_runs(height, width, runs.clone()),
        RleCounts::Compressed(s) => {
            let runs = decode_compressed_counts(s)?;
            BinaryMask::from_runs(height, width, runs)
        }
    }
}

/// Decode the COCO LEB128-like compressed counts string (stride-2 deltas,
/// 5 bits per character offset by 48).
pub fn decode_compressed_counts(s: &str) -> Result<Vec<u32>, MaskError> {
    let bytes = s.as_bytes();
    let mut counts: Vec<u32> = Vec::new();
    let mut i = 0usize;
    while i < bytes.len() {
        let mut x: i64 = 0;
        let mut shift = 0u32;
        loop {
            if i >= bytes.len() || shift > 60 {
                return Err(MaskError::BadRleString);
            }
            let c = bytes[i].wrapping_sub(48) as i64;
            if !(0..64).contains(&c) {
                return Err(MaskError::BadRleString);
            }
            i += 1;
            x |= (c & 0x1f) << shift;
            shift += 5;
            if c & 0x20 == 0 {
                // sign-extend the final 5-bit group
                if x & (1 << (shift - 1)) != 0 {
                    x |= !0i64 << shift;
                }
                break;
            }
        }
        if counts.len() > 2 {
            x += counts[counts.len() - 2] as i64;
        }
        if x < 0 || x > u32::MAX as i64 {
            return Err(MaskError::BadRleString);
        }
        counts.push(x as u32);
    }
    Ok(counts)
}
