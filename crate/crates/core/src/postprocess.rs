//! Mask cleanup between raw network output and final instance masks:
//! 4-connected component labeling, removal of small objects, and the
//! synchronous 4-neighbor hole-filling rule iterated to a fixpoint.

use crate::imagedata::{BinaryMask, GrayImage, InstanceMask};

/// Hole-filling strategy. The default rule flips a background pixel whose
/// four in-bounds neighbors are all foreground, applied synchronously until
/// nothing changes; it leaves holes of 2x2 and larger untouched. Flood fill
/// instead fills every enclosed background region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HoleFill {
    #[default]
    FourNeighbor,
    FloodFill,
}

#[derive(Debug, Clone)]
pub struct PostprocessConfig {
    /// Components smaller than this many pixels are removed (strict `<`).
    pub gamma: usize,
    pub hole_fill: HoleFill,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            gamma: 100,
            hole_fill: HoleFill::FourNeighbor,
        }
    }
}

impl PostprocessConfig {
    /// Scale the default object-size threshold from a 512x512 reference
    /// frame down to `size` x `size` images, rounding half up.
    pub fn gamma_for_size(size: usize) -> usize {
        let scaled = 100.0 * (size as f64 / 512.0).powi(2);
        (scaled + 0.5).floor() as usize
    }
}

/// Label maximal 4-connected foreground regions 1..n in first-encounter
/// (row-major) order.
pub fn connected_components(mask: &BinaryMask) -> InstanceMask {
    let (h, w) = mask.shape();
    let data = mask.as_slice();
    let mut parent: Vec<u32> = Vec::new();
    let mut labels = vec![0u32; h * w];

    fn find(parent: &mut [u32], mut i: u32) -> u32 {
        while parent[i as usize] != i {
            parent[i as usize] = parent[parent[i as usize] as usize];
            i = parent[i as usize];
        }
        i
    }

    // First pass: provisional labels with unions between left/up neighbors.
    for y in 0..h {
        for x in 0..w {
            let idx = y * w + x;
            if data[idx] == 0 {
                continue;
            }
            let left = if x > 0 && data[idx - 1] == 1 {
                Some(labels[idx - 1] - 1)
            } else {
                None
            };
            let up = if y > 0 && data[idx - w] == 1 {
                Some(labels[idx - w] - 1)
            } else {
                None
            };
            let provisional = match (left, up) {
                (None, None) => {
                    let next = parent.len() as u32;
                    parent.push(next);
                    next
                }
                (Some(l), None) => find(&mut parent, l),
                (None, Some(u)) => find(&mut parent, u),
                (Some(l), Some(u)) => {
                    let rl = find(&mut parent, l);
                    let ru = find(&mut parent, u);
                    let keep = rl.min(ru);
                    let drop = rl.max(ru);
                    parent[drop as usize] = keep;
                    keep
                }
            };
            labels[idx] = provisional + 1;
        }
    }

    // Second pass: resolve to roots and assign final labels in
    // first-encounter order.
    let mut final_of_root: Vec<u32> = vec![0; parent.len()];
    let mut next_label = 0u32;
    for l in labels.iter_mut() {
        if *l == 0 {
            continue;
        }
        let root = find(&mut parent, *l - 1) as usize;
        if final_of_root[root] == 0 {
            next_label += 1;
            final_of_root[root] = next_label;
        }
        *l = final_of_root[root];
    }

    InstanceMask::new(h, w, labels).expect("labels sized from mask")
}

/// Remove components with pixel count strictly below `gamma` and compact
/// the surviving labels.
pub fn remove_small(inst: &InstanceMask, gamma: usize) -> InstanceMask {
    let sizes = inst.label_sizes();
    let keep: Vec<u32> = sizes
        .iter()
        .filter(|(_, count)| *count >= gamma)
        .map(|(label, _)| *label)
        .collect();
    let (h, w) = inst.shape();
    let labels = inst
        .as_slice()
        .iter()
        .map(|&l| {
            if l == 0 {
                0
            } else {
                match keep.binary_search(&l) {
                    Ok(i) => (i + 1) as u32,
                    Err(_) => 0,
                }
            }
        })
        .collect();
    InstanceMask::new(h, w, labels).expect("labels sized from mask")
}

/// Flip background pixels whose four in-bounds neighbors are all
/// foreground; updates are synchronous and iterated until a fixpoint.
pub fn fill_holes(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = mask.shape();
    let mut current = mask.as_slice().to_vec();
    loop {
        let mut next = current.clone();
        let mut changed = false;
        for y in 1..h.saturating_sub(1) {
            for x in 1..w.saturating_sub(1) {
                let idx = y * w + x;
                if current[idx] == 0
                    && current[idx - 1] == 1
                    && current[idx + 1] == 1
                    && current[idx - w] == 1
                    && current[idx + w] == 1
                {
                    next[idx] = 1;
                    changed = true;
                }
            }
        }
        current = next;
        if !changed {
            break;
        }
    }
    BinaryMask::new(h, w, current).expect("binary by construction")
}

/// Fill every background region that does not touch the image border.
pub fn flood_fill_holes(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = mask.shape();
    let data = mask.as_slice();
    let mut outside = vec![false; h * w];
    let mut queue: Vec<usize> = Vec::new();
    let push = |idx: usize, outside: &mut Vec<bool>, queue: &mut Vec<usize>| {
        if data[idx] == 0 && !outside[idx] {
            outside[idx] = true;
            queue.push(idx);
        }
    };
    for x in 0..w {
        push(x, &mut outside, &mut queue);
        push((h - 1) * w + x, &mut outside, &mut queue);
    }
    for y in 0..h {
        push(y * w, &mut outside, &mut queue);
        push(y * w + w - 1, &mut outside, &mut queue);
    }
    while let Some(idx) = queue.pop() {
        let (y, x) = (idx / w, idx % w);
        if x > 0 {
            push(idx - 1, &mut outside, &mut queue);
        }
        if x + 1 < w {
            push(idx + 1, &mut outside, &mut queue);
        }
        if y > 0 {
            push(idx - w, &mut outside, &mut queue);
        }
        if y + 1 < h {
            push(idx + w, &mut outside, &mut queue);
        }
    }
    let filled = (0..h * w)
        .map(|i| u8::from(data[i] == 1 || !outside[i]))
        .collect();
    BinaryMask::new(h, w, filled).expect("binary by construction")
}

/// Input to the full postprocessing pipeline.
pub enum PostprocessInput<'a> {
    /// Tubule-class probability map, thresholded at 0.5 (strict `>`).
    Probabilities(&'a GrayImage),
    Mask(&'a BinaryMask),
}

/// Threshold (if needed), remove small components, fill holes, and relabel.
pub fn postprocess(input: PostprocessInput<'_>, cfg: &PostprocessConfig) -> InstanceMask {
    let owned;
    let mask = match input {
        PostprocessInput::Probabilities(prob) => {
            owned = prob.threshold(0.5);
            &owned
        }
        PostprocessInput::Mask(m) => m,
    };
    let components = connected_components(mask);
    let survivors = remove_small(&components, cfg.gamma);
    let filled = match cfg.hole_fill {
        HoleFill::FourNeighbor => fill_holes(&survivors.binarize()),
        HoleFill::FloodFill => flood_fill_holes(&survivors.binarize()),
    };
    connected_components(&filled)
}
