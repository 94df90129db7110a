//! Pixel- and object-level segmentation evaluation.
//!
//! Pixel metrics report accuracy and the two error fractions over a shared
//! pixel grid. Object metrics match segmented objects to groundtruth
//! objects by maximal overlap: F1 uses a 50%-of-groundtruth-area overlap
//! rule, object Dice and object Hausdorff are size-weighted averages over
//! the maximally matched pairs, with Hausdorff taken between boundary
//! pixel sets under the Euclidean metric.

use thiserror::Error;

use crate::imagedata::{BinaryMask, InstanceMask};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: segmentation {seg_h}x{seg_w} vs groundtruth {gt_h}x{gt_w}")]
    ShapeMismatch {
        seg_h: usize,
        seg_w: usize,
        gt_h: usize,
        gt_w: usize,
    },
    #[error("dice is undefined when both pixel sets are empty")]
    BothEmpty,
    #[error("hausdorff distance requires non-empty pixel sets")]
    EmptySet,
    #[error("object hausdorff requires at least one object in each mask")]
    EmptyMask,
}

fn check_shapes(
    (seg_h, seg_w): (usize, usize),
    (gt_h, gt_w): (usize, usize),
) -> Result<(), MetricsError> {
    if (seg_h, seg_w) != (gt_h, gt_w) {
        return Err(MetricsError::ShapeMismatch {
            seg_h,
            seg_w,
            gt_h,
            gt_w,
        });
    }
    Ok(())
}

/// Pixel accuracy and error fractions; raw counts partition the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelMetrics {
    pub pa: f64,
    pub type1: f64,
    pub type2: f64,
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
    pub total: usize,
}

pub fn pixel_metrics(seg: &BinaryMask, gt: &BinaryMask) -> Result<PixelMetrics, MetricsError> {
    check_shapes(seg.shape(), gt.shape())?;
    let (mut tp, mut tn, mut fp, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &g) in seg.as_slice().iter().zip(gt.as_slice()) {
        match (s, g) {
            (1, 1) => tp += 1,
            (0, 0) => tn += 1,
            (1, 0) => fp += 1,
            _ => fn_ += 1,
        }
    }
    let total = seg.as_slice().len();
    Ok(PixelMetrics {
        pa: (tp + tn) as f64 / total as f64,
        type1: fp as f64 / total as f64,
        type2: fn_ as f64 / total as f64,
        tp,
        tn,
        fp,
        fn_,
        total,
    })
}

/// Per-object overlap bookkeeping between a segmentation and groundtruth.
///
/// Objects are indexed 0..n in ascending label order of their compacted
/// masks. `seg_best_gt[i]` is the groundtruth object maximizing overlap
/// with segmented object i (ties toward the lowest label), `None` when the
/// object overlaps nothing.
#[derive(Debug, Clone)]
pub struct ObjectMatching {
    pub overlap: Vec<Vec<usize>>,
    pub seg_areas: Vec<usize>,
    pub gt_areas: Vec<usize>,
    pub seg_best_gt: Vec<Option<usize>>,
    pub gt_best_seg: Vec<Option<usize>>,
    pub seg_is_tp: Vec<bool>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Classify each segmented object as true/false positive against the
/// groundtruth. A segmented object is a true positive when it covers at
/// least half of the area of its maximally overlapping groundtruth
/// object; a groundtruth object left without a true-positive partner
/// counts as a false negative.
pub fn match_objects(
    seg: &InstanceMask,
    gt: &InstanceMask,
) -> Result<ObjectMatching, MetricsError> {
    check_shapes(seg.shape(), gt.shape())?;
    let seg = seg.compact();
    let gt = gt.compact();
    let n_seg = seg.max_label() as usize;
    let n_gt = gt.max_label() as usize;

    let mut overlap = vec![vec![0usize; n_gt]; n_seg];
    let mut seg_areas = vec![0usize; n_seg];
    let mut gt_areas = vec![0usize; n_gt];
    for (&s, &g) in seg.as_slice().iter().zip(gt.as_slice()) {
        if s > 0 {
            seg_areas[(s - 1) as usize] += 1;
        }
        if g > 0 {
            gt_areas[(g - 1) as usize] += 1;
        }
        if s > 0 && g > 0 {
            overlap[(s - 1) as usize][(g - 1) as usize] += 1;
        }
    }

    let seg_best_gt: Vec<Option<usize>> = (0..n_seg)
        .map(|i| argmax_positive(&overlap[i]))
        .collect();
    let gt_best_seg: Vec<Option<usize>> = (0..n_gt)
        .map(|j| argmax_positive_column(&overlap, j))
        .collect();

    let mut seg_is_tp = vec![false; n_seg];
    let mut gt_has_tp = vec![false; n_gt];
    for i in 0..n_seg {
        if let Some(j) = seg_best_gt[i] {
            if 2 * overlap[i][j] >= gt_areas[j] {
                seg_is_tp[i] = true;
                gt_has_tp[j] = true;
            }
        }
    }
    let tp = seg_is_tp.iter().filter(|&&t| t).count();
    let fp = n_seg - tp;
    let fn_ = gt_has_tp.iter().filter(|&&t| !t).count();

    Ok(ObjectMatching {
        overlap,
        seg_areas,
        gt_areas,
        seg_best_gt,
        gt_best_seg,
        seg_is_tp,
        tp,
        fp,
        fn_,
    })
}

/// Index of the largest strictly positive entry; ties toward the lowest
/// index.
fn argmax_positive(row: &[usize]) -> Option<usize> {
    let mut best: Option<(usize, usize)> = None;
    for (j, &v) in row.iter().enumerate() {
        if v > 0 && best.is_none_or(|(_, bv)| v > bv) {
            best = Some((j, v));
        }
    }
    best.map(|(j, _)| j)
}

fn argmax_positive_column(overlap: &[Vec<usize>], j: usize) -> Option<usize> {
    let mut best: Option<(usize, usize)> = None;
    for (i, row) in overlap.iter().enumerate() {
        let v = row[j];
        if v > 0 && best.is_none_or(|(_, bv)| v > bv) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Precision, recall, and F1 from an object matching. Degenerate cases
/// resolve to zero: no predictions gives P = 0, no groundtruth gives
/// R = 0, and P = R = 0 gives F1 = 0.
pub fn f1_score(matching: &ObjectMatching) -> (f64, f64, f64) {
    let (tp, fp, fn_) = (matching.tp, matching.fp, matching.fn_);
    let p = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let r = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1)
}

/// Dice overlap between two pixel sets given as binary masks.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64, MetricsError> {
    check_shapes(a.shape(), b.shape())?;
    let mut inter = 0usize;
    let (mut na, mut nb) = (0usize, 0usize);
    for (&x, &y) in a.as_slice().iter().zip(b.as_slice()) {
        na += usize::from(x == 1);
        nb += usize::from(y == 1);
        inter += usize::from(x == 1 && y == 1);
    }
    if na + nb == 0 {
        return Err(MetricsError::BothEmpty);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

fn dice_from_counts(inter: usize, area_a: usize, area_b: usize) -> f64 {
    if area_a + area_b == 0 {
        return 0.0;
    }
    2.0 * inter as f64 / (area_a + area_b) as f64
}

/// Size-weighted object Dice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectDice {
    pub value: f64,
    /// Set when either mask has no objects; the value is then 0.
    pub degenerate: bool,
}

/// Size-weighted average of per-object Dice over maximally matched pairs,
/// symmetrized over both matching directions. An object overlapping
/// nothing contributes Dice 0.
pub fn object_dice(seg: &InstanceMask, gt: &InstanceMask) -> Result<ObjectDice, MetricsError> {
    let m = match_objects(seg, gt)?;
    if m.seg_areas.is_empty() || m.gt_areas.is_empty() {
        return Ok(ObjectDice {
            value: 0.0,
            degenerate: true,
        });
    }
    let seg_total: usize = m.seg_areas.iter().sum();
    let gt_total: usize = m.gt_areas.iter().sum();
    let mut seg_side = 0.0;
    for i in 0..m.seg_areas.len() {
        let d = match m.seg_best_gt[i] {
            Some(j) => dice_from_counts(m.overlap[i][j], m.gt_areas[j], m.seg_areas[i]),
            None => 0.0,
        };
        seg_side += m.seg_areas[i] as f64 / seg_total as f64 * d;
    }
    let mut gt_side = 0.0;
    for j in 0..m.gt_areas.len() {
        let d = match m.gt_best_seg[j] {
            Some(i) => dice_from_counts(m.overlap[i][j], m.gt_areas[j], m.seg_areas[i]),
            None => 0.0,
        };
        gt_side += m.gt_areas[j] as f64 / gt_total as f64 * d;
    }
    Ok(ObjectDice {
        value: 0.5 * (seg_side + gt_side),
        degenerate: false,
    })
}

/// Boundary pixels of a binary mask: foreground pixels with at least one
/// background 4-neighbor or lying on the image border.
pub fn boundary_pixels(mask: &BinaryMask) -> Vec<(usize, usize)> {
    let (h, w) = mask.shape();
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask.is_set(y, x) {
                continue;
            }
            let on_border = y == 0 || x == 0 || y == h - 1 || x == w - 1;
            let has_bg_neighbor = (y > 0 && !mask.is_set(y - 1, x))
                || (y + 1 < h && !mask.is_set(y + 1, x))
                || (x > 0 && !mask.is_set(y, x - 1))
                || (x + 1 < w && !mask.is_set(y, x + 1));
            if on_border || has_bg_neighbor {
                out.push((y, x));
            }
        }
    }
    out
}

/// Symmetric Hausdorff distance (Euclidean) between the boundary pixel
/// sets of two masks.
pub fn hausdorff(a: &BinaryMask, b: &BinaryMask) -> Result<f64, MetricsError> {
    check_shapes(a.shape(), b.shape())?;
    let ba = boundary_pixels(a);
    let bb = boundary_pixels(b);
    if ba.is_empty() || bb.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    Ok(hausdorff_points(&ba, &bb))
}

pub(crate) fn hausdorff_points(a: &[(usize, usize)], b: &[(usize, usize)]) -> f64 {
    let d2 = directed_max_min_sq(a, b).max(directed_max_min_sq(b, a));
    (d2 as f64).sqrt()
}

/// max over `from` of the squared distance to the nearest point of `to`,
/// with an exact early exit once a point cannot raise the maximum.
fn directed_max_min_sq(from: &[(usize, usize)], to: &[(usize, usize)]) -> u64 {
    let mut max_min = 0u64;
    for &(ay, ax) in from {
        let mut min_d = u64::MAX;
        for &(by, bx) in to {
            let dy = ay as i64 - by as i64;
            let dx = ax as i64 - bx as i64;
            let d = (dy * dy + dx * dx) as u64;
            if d < min_d {
                min_d = d;
                if min_d <= max_min {
                    break;
                }
            }
        }
        if min_d > max_min {
            max_min = min_d;
        }
    }
    max_min
}

/// Extract one binary mask per positive label, ascending label order.
fn object_masks(inst: &InstanceMask) -> Vec<BinaryMask> {
    let compact = inst.compact();
    let n = compact.max_label() as usize;
    let (h, w) = compact.shape();
    (1..=n as u32)
        .map(|label| {
            BinaryMask::new_unchecked(
                h,
                w,
                compact.as_slice().iter().map(|&l| u8::from(l == label)).collect(),
            )
        })
        .collect()
}

fn centroid(points: &[(usize, usize)]) -> (f64, f64) {
    let n = points.len() as f64;
    let (sy, sx) = points
        .iter()
        .fold((0.0, 0.0), |(sy, sx), &(y, x)| (sy + y as f64, sx + x as f64));
    (sy / n, sx / n)
}

/// Size-weighted object Hausdorff distance. Matching follows the same
/// maximal-overlap rule as object Dice; an object overlapping nothing is
/// paired with the counterpart whose boundary centroid is nearest.
pub fn object_hausdorff(seg: &InstanceMask, gt: &InstanceMask) -> Result<f64, MetricsError> {
    let m = match_objects(seg, gt)?;
    if m.seg_areas.is_empty() || m.gt_areas.is_empty() {
        return Err(MetricsError::EmptyMask);
    }
    let seg_objects = object_masks(seg);
    let gt_objects = object_masks(gt);
    let seg_boundaries: Vec<Vec<(usize, usize)>> =
        seg_objects.iter().map(boundary_pixels).collect();
    let gt_boundaries: Vec<Vec<(usize, usize)>> = gt_objects.iter().map(boundary_pixels).collect();
    let seg_centroids: Vec<(f64, f64)> = seg_boundaries.iter().map(|b| centroid(b)).collect();
    let gt_centroids: Vec<(f64, f64)> = gt_boundaries.iter().map(|b| centroid(b)).collect();

    let nearest = |c: (f64, f64), others: &[(f64, f64)]| -> usize {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (k, &(oy, ox)) in others.iter().enumerate() {
            let d = (c.0 - oy).powi(2) + (c.1 - ox).powi(2);
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    };

    let seg_total: usize = m.seg_areas.iter().sum();
    let gt_total: usize = m.gt_areas.iter().sum();
    let mut seg_side = 0.0;
    for i in 0..m.seg_areas.len() {
        let j = m.seg_best_gt[i]
            .unwrap_or_else(|| nearest(seg_centroids[i], &gt_centroids));
        let h = hausdorff_points(&gt_boundaries[j], &seg_boundaries[i]);
        seg_side += m.seg_areas[i] as f64 / seg_total as f64 * h;
    }
    let mut gt_side = 0.0;
    for j in 0..m.gt_areas.len() {
        let i = m.gt_best_seg[j]
            .unwrap_or_else(|| nearest(gt_centroids[j], &seg_centroids));
        let h = hausdorff_points(&gt_boundaries[j], &seg_boundaries[i]);
        gt_side += m.gt_areas[j] as f64 / gt_total as f64 * h;
    }
    Ok(0.5 * (seg_side + gt_side))
}

/// Full per-image evaluation: pixel metrics plus all object metrics.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub pixel: PixelMetrics,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub object_dice: f64,
    pub dice_degenerate: bool,
    pub object_hausdorff: f64,
}

pub fn evaluate(seg: &InstanceMask, gt: &InstanceMask) -> Result<EvalReport, MetricsError> {
    let pixel = pixel_metrics(&seg.binarize(), &gt.binarize())?;
    let matching = match_objects(seg, gt)?;
    let (precision, recall, f1) = f1_score(&matching);
    let od = object_dice(seg, gt)?;
    let oh = object_hausdorff(seg, gt)?;
    Ok(EvalReport {
        pixel,
        precision,
        recall,
        f1,
        object_dice: od.value,
        dice_degenerate: od.degenerate,
        object_hausdorff: oh,
    })
}

pub const CSV_HEADER: &str = "image,PA,TypeI,TypeII,Precision,Recall,F1,OD,OH";

impl EvalReport {
    pub fn csv_row(&self, image: &str) -> String {
        format!(
            "{image},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.pixel.pa,
            self.pixel.type1,
            self.pixel.type2,
            self.precision,
            self.recall,
            self.f1,
            self.object_dice,
            self.object_hausdorff,
        )
    }
}
