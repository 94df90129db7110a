//! Independent brute-force oracles for the acceptance suite.
//!
//! Everything here is written as straight-line reference code, separate
//! from the library implementations it checks: naive quadratic scans, a
//! plain union-find, and direct evaluation of the object-metric formulas
//! over explicit per-object pixel sets.

use tubuleseg_core::imagedata::{BinaryMask, InstanceMask};

/// Pixel coordinates of every object, keyed by compact label order.
pub fn object_pixels(inst: &InstanceMask) -> Vec<Vec<(usize, usize)>> {
    let labels = inst.label_set();
    let (h, w) = inst.shape();
    let mut out = vec![Vec::new(); labels.len()];
    for y in 0..h {
        for x in 0..w {
            let l = inst.get(y, x);
            if l > 0 {
                let k = labels.binary_search(&l).unwrap();
                out[k].push((y, x));
            }
        }
    }
    out
}

fn intersection(a: &[(usize, usize)], b: &[(usize, usize)]) -> usize {
    let set: std::collections::HashSet<_> = a.iter().collect();
    b.iter().filter(|p| set.contains(p)).count()
}

/// Reference object matching: for every segmented object find the
/// groundtruth object with maximal overlap (lowest label on ties); the
/// segmented object is a true positive when it covers at least half of
/// that object's area. Groundtruth objects without a true-positive
/// partner are false negatives.
pub struct OracleMatching {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub seg_best_gt: Vec<Option<usize>>,
    pub gt_best_seg: Vec<Option<usize>>,
    pub seg_pixels: Vec<Vec<(usize, usize)>>,
    pub gt_pixels: Vec<Vec<(usize, usize)>>,
}

pub fn oracle_match(seg: &InstanceMask, gt: &InstanceMask) -> OracleMatching {
    let seg_pixels = object_pixels(seg);
    let gt_pixels = object_pixels(gt);
    let mut seg_best_gt = vec![None; seg_pixels.len()];
    let mut gt_best_seg = vec![None; gt_pixels.len()];
    for (i, sp) in seg_pixels.iter().enumerate() {
        let mut best: Option<(usize, usize)> = None;
        for (j, gp) in gt_pixels.iter().enumerate() {
            let ov = intersection(sp, gp);
            if ov > 0 && best.map_or(true, |(_, bv)| ov > bv) {
                best = Some((j, ov));
            }
        }
        seg_best_gt[i] = best.map(|(j, _)| j);
    }
    for (j, gp) in gt_pixels.iter().enumerate() {
        let mut best: Option<(usize, usize)> = None;
        for (i, sp) in seg_pixels.iter().enumerate() {
            let ov = intersection(sp, gp);
            if ov > 0 && best.map_or(true, |(_, bv)| ov > bv) {
                best = Some((i, ov));
            }
        }
        gt_best_seg[j] = best.map(|(i, _)| i);
    }
    let mut tp = 0;
    let mut gt_matched = vec![false; gt_pixels.len()];
    for (i, sp) in seg_pixels.iter().enumerate() {
        if let Some(j) = seg_best_gt[i] {
            let ov = intersection(sp, &gt_pixels[j]);
            if 2 * ov >= gt_pixels[j].len() {
                tp += 1;
                gt_matched[j] = true;
            }
        }
    }
    let fp = seg_pixels.len() - tp;
    let fn_ = gt_matched.iter().filter(|&&m| !m).count();
    OracleMatching {
        tp,
        fp,
        fn_,
        seg_best_gt,
        gt_best_seg,
        seg_pixels,
        gt_pixels,
    }
}

pub fn oracle_f1(m: &OracleMatching) -> (f64, f64, f64) {
    let p = if m.tp + m.fp == 0 {
        0.0
    } else {
        m.tp as f64 / (m.tp + m.fp) as f64
    };
    let r = if m.tp + m.fn_ == 0 {
        0.0
    } else {
        m.tp as f64 / (m.tp + m.fn_) as f64
    };
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1)
}

fn dice_sets(a: &[(usize, usize)], b: &[(usize, usize)]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 0.0;
    }
    2.0 * intersection(a, b) as f64 / (a.len() + b.len()) as f64
}

/// Direct evaluation of the size-weighted object Dice.
pub fn oracle_object_dice(seg: &InstanceMask, gt: &InstanceMask) -> f64 {
    let m = oracle_match(seg, gt);
    if m.seg_pixels.is_empty() || m.gt_pixels.is_empty() {
        return 0.0;
    }
    let seg_total: usize = m.seg_pixels.iter().map(Vec::len).sum();
    let gt_total: usize = m.gt_pixels.iter().map(Vec::len).sum();
    let mut seg_side = 0.0;
    for (i, sp) in m.seg_pixels.iter().enumerate() {
        let d = match m.seg_best_gt[i] {
            Some(j) => dice_sets(&m.gt_pixels[j], sp),
            None => 0.0,
        };
        seg_side += sp.len() as f64 / seg_total as f64 * d;
    }
    let mut gt_side = 0.0;
    for (j, gp) in m.gt_pixels.iter().enumerate() {
        let d = match m.gt_best_seg[j] {
            Some(i) => dice_sets(gp, &m.seg_pixels[i]),
            None => 0.0,
        };
        gt_side += gp.len() as f64 / gt_total as f64 * d;
    }
    0.5 * (seg_side + gt_side)
}

/// Boundary pixels of one object's pixel set: any member with a
/// 4-neighbor outside the set or on the image border.
pub fn oracle_boundary(
    pixels: &[(usize, usize)],
    h: usize,
    w: usize,
) -> Vec<(usize, usize)> {
    let set: std::collections::HashSet<_> = pixels.iter().copied().collect();
    pixels
        .iter()
        .copied()
        .filter(|&(y, x)| {
            y == 0
                || x == 0
                || y == h - 1
                || x == w - 1
                || !set.contains(&(y - 1, x))
                || !set.contains(&(y + 1, x))
                || !set.contains(&(y, x - 1))
                || !set.contains(&(y, x + 1))
        })
        .collect()
}

/// Exhaustive pairwise symmetric Hausdorff distance.
pub fn oracle_hausdorff_points(a: &[(usize, usize)], b: &[(usize, usize)]) -> f64 {
    let directed = |from: &[(usize, usize)], to: &[(usize, usize)]| -> f64 {
        let mut worst = 0.0f64;
        for &(ay, ax) in from {
            let mut nearest = f64::INFINITY;
            for &(by, bx) in to {
                let d = ((ay as f64 - by as f64).powi(2) + (ax as f64 - bx as f64).powi(2)).sqrt();
                if d < nearest {
                    nearest = d;
                }
            }
            if nearest > worst {
                worst = nearest;
            }
        }
        worst
    };
    directed(a, b).max(directed(b, a))
}

/// Exhaustive Hausdorff between the boundary sets of two whole masks.
pub fn oracle_hausdorff_masks(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (h, w) = a.shape();
    let pa: Vec<(usize, usize)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .filter(|&(y, x)| a.is_set(y, x))
        .collect();
    let pb: Vec<(usize, usize)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .filter(|&(y, x)| b.is_set(y, x))
        .collect();
    oracle_hausdorff_points(&oracle_boundary(&pa, h, w), &oracle_boundary(&pb, h, w))
}

fn centroid(points: &[(usize, usize)]) -> (f64, f64) {
    let n = points.len() as f64;
    let (sy, sx) = points
        .iter()
        .fold((0.0, 0.0), |(sy, sx), &(y, x)| (sy + y as f64, sx + x as f64));
    (sy / n, sx / n)
}

/// Direct evaluation of the size-weighted object Hausdorff; objects with
/// no overlap pair with the counterpart whose boundary centroid is
/// nearest.
pub fn oracle_object_hausdorff(seg: &InstanceMask, gt: &InstanceMask) -> Option<f64> {
    let m = oracle_match(seg, gt);
    if m.seg_pixels.is_empty() || m.gt_pixels.is_empty() {
        return None;
    }
    let (h, w) = seg.shape();
    let seg_b: Vec<Vec<(usize, usize)>> = m
        .seg_pixels
        .iter()
        .map(|p| oracle_boundary(p, h, w))
        .collect();
    let gt_b: Vec<Vec<(usize, usize)>> = m
        .gt_pixels
        .iter()
        .map(|p| oracle_boundary(p, h, w))
        .collect();
    let seg_c: Vec<(f64, f64)> = seg_b.iter().map(|b| centroid(b)).collect();
    let gt_c: Vec<(f64, f64)> = gt_b.iter().map(|b| centroid(b)).collect();
    let nearest = |c: (f64, f64), others: &[(f64, f64)]| -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (k, o) in others.iter().enumerate() {
            let d = (c.0 - o.0).powi(2) + (c.1 - o.1).powi(2);
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    };
    let seg_total: usize = m.seg_pixels.iter().map(Vec::len).sum();
    let gt_total: usize = m.gt_pixels.iter().map(Vec::len).sum();
    let mut seg_side = 0.0;
    for (i, sp) in m.seg_pixels.iter().enumerate() {
        let j = m.seg_best_gt[i].unwrap_or_else(|| nearest(seg_c[i], &gt_c));
        seg_side +=
            sp.len() as f64 / seg_total as f64 * oracle_hausdorff_points(&gt_b[j], &seg_b[i]);
    }
    let mut gt_side = 0.0;
    for (j, gp) in m.gt_pixels.iter().enumerate() {
        let i = m.gt_best_seg[j].unwrap_or_else(|| nearest(gt_c[j], &seg_c));
        gt_side +=
            gp.len() as f64 / gt_total as f64 * oracle_hausdorff_points(&gt_b[j], &seg_b[i]);
    }
    Some(0.5 * (seg_side + gt_side))
}

/// Plain union-find connected-components oracle (4-connectivity),
/// returning one set id per pixel (0 = background, ids otherwise
/// arbitrary but consistent).
pub fn oracle_components(mask: &BinaryMask) -> Vec<usize> {
    let (h, w) = mask.shape();
    let mut parent: Vec<usize> = (0..h * w).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    fn union(parent: &mut [usize], a: usize, b: usize) {
        let (ra, rb) = (find(parent, a), find(parent, b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    for y in 0..h {
        for x in 0..w {
            if !mask.is_set(y, x) {
                continue;
            }
            if x + 1 < w && mask.is_set(y, x + 1) {
                union(&mut parent, y * w + x, y * w + x + 1);
            }
            if y + 1 < h && mask.is_set(y + 1, x) {
                union(&mut parent, y * w + x, (y + 1) * w + x);
            }
        }
    }
    (0..h * w)
        .map(|i| {
            if mask.as_slice()[i] == 1 {
                find(&mut parent, i) + 1
            } else {
                0
            }
        })
        .collect()
}

/// Check that two labelings induce the same partition of the foreground.
pub fn same_partition(a: &[u32], b: &[usize]) -> bool {
    use std::collections::HashMap;
    if a.len() != b.len() {
        return false;
    }
    let mut fwd: HashMap<u32, usize> = HashMap::new();
    let mut bwd: HashMap<usize, u32> = HashMap::new();
    for (&la, &lb) in a.iter().zip(b) {
        match (la > 0, lb > 0) {
            (false, false) => continue,
            (true, true) => {
                if *fwd.entry(la).or_insert(lb) != lb {
                    return false;
                }
                if *bwd.entry(lb).or_insert(la) != la {
                    return false;
                }
            }
            _ => return false,
        }
    }
    true
}
