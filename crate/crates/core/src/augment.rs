//! Training-set expansion: elastic deformation driven by a coarse control
//! grid, plus right-angle rotations and horizontal flips.
//!
//! Control points sit every `spacing` pixels with one extra ring outside
//! the image; each point is displaced uniformly within `[-max_disp,
//! +max_disp]` per axis. A dense displacement field comes from uniform
//! cubic B-spline blending of the node displacements (approximating, not
//! interpolating: field values are convex blends of nearby nodes, which
//! bounds the field by the node bound). Images warp backwards with
//! bicubic sampling, label masks with nearest-neighbor sampling.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::imagedata::{GrayImage, InstanceMask};
use crate::seed::stream_rng;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("shape mismatch: image {img_h}x{img_w} vs field {field_h}x{field_w}")]
    ShapeMismatch {
        img_h: usize,
        img_w: usize,
        field_h: usize,
        field_w: usize,
    },
    #[error("quarter-turn rotations of non-square images change the size ({h}x{w})")]
    NonSquare { h: usize, w: usize },
    #[error("image {img_h}x{img_w} and mask {mask_h}x{mask_w} differ in size")]
    PairMismatch {
        img_h: usize,
        img_w: usize,
        mask_h: usize,
        mask_w: usize,
    },
}

/// Coarse lattice of displacement vectors covering the image plus one
/// boundary ring. Node (r, c) sits at pixel position
/// `((r - 1) * spacing, (c - 1) * spacing)`.
#[derive(Debug, Clone)]
pub struct ControlGrid {
    pub spacing: usize,
    pub rows: usize,
    pub cols: usize,
    pub max_disp: f32,
    /// Per-node displacements, row-major, `dx[r * cols + c]`.
    pub dx: Vec<f32>,
    pub dy: Vec<f32>,
}

/// Number of grid nodes needed to span `extent` pixels at `spacing`,
/// including the two boundary-ring nodes.
fn node_count(extent: usize, spacing: usize) -> usize {
    extent.div_ceil(spacing) + 1 + 2
}

/// Sample a control grid with independent uniform displacements.
pub fn sample_control_grid(
    height: usize,
    width: usize,
    spacing: usize,
    max_disp: f32,
    rng: &mut ChaCha8Rng,
) -> ControlGrid {
    assert!(spacing > 0, "spacing must be positive");
    assert!(max_disp >= 0.0, "max_disp must be non-negative");
    let rows = node_count(height, spacing);
    let cols = node_count(width, spacing);
    let mut dx = Vec::with_capacity(rows * cols);
    let mut dy = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        if max_disp == 0.0 {
            dx.push(0.0);
            dy.push(0.0);
        } else {
            dx.push(rng.random_range(-max_disp..=max_disp));
            dy.push(rng.random_range(-max_disp..=max_disp));
        }
    }
    ControlGrid {
        spacing,
        rows,
        cols,
        max_disp,
        dx,
        dy,
    }
}

/// Dense per-pixel displacement field (dx, dy) in pixels.
#[derive(Debug, Clone)]
pub struct DeformationField {
    pub height: usize,
    pub width: usize,
    pub dx: Vec<f32>,
    pub dy: Vec<f32>,
}

impl DeformationField {
    pub fn zero(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            dx: vec![0.0; height * width],
            dy: vec![0.0; height * width],
        }
    }

    /// Constant translation field.
    pub fn constant(height: usize, width: usize, dx: f32, dy: f32) -> Self {
        Self {
            height,
            width,
            dx: vec![dx; height * width],
            dy: vec![dy; height * width],
        }
    }

    /// Largest max-norm displacement component in the field.
    pub fn max_norm(&self) -> f32 {
        self.dx
            .iter()
            .chain(&self.dy)
            .fold(0.0f32, |m, &v| m.max(v.abs()))
    }
}

/// Uniform cubic B-spline basis at fractional offset `t` in [0, 1):
/// weights for the four nodes floor(u)-1 .. floor(u)+2.
#[inline]
fn bspline_weights(t: f32) -> [f32; 4] {
    let t = f64::from(t);
    let t2 = t * t;
    let t3 = t2 * t;
    [
        ((1.0 - t).powi(3) / 6.0) as f32,
        ((3.0 * t3 - 6.0 * t2 + 4.0) / 6.0) as f32,
        ((-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0) as f32,
        (t3 / 6.0) as f32,
    ]
}

/// Evaluate the dense displacement field from a control grid.
pub fn grid_to_field(grid: &ControlGrid, height: usize, width: usize) -> DeformationField {
    let s = grid.spacing as f32;
    let mut dx = Vec::with_capacity(height * width);
    let mut dy = Vec::with_capacity(height * width);
    for y in 0..height {
        // Grid coordinate of this pixel row (node 1 sits at pixel 0).
        let v = y as f32 / s + 1.0;
        let r0 = v.floor() as usize - 1;
        let wy = bspline_weights(v - v.floor());
        for x in 0..width {
            let u = x as f32 / s + 1.0;
            let c0 = u.floor() as usize - 1;
            let wx = bspline_weights(u - u.floor());
            let (mut fx, mut fy) = (0.0f32, 0.0f32);
            for (i, &wyi) in wy.iter().enumerate() {
                let row = (r0 + i) * grid.cols;
                for (j, &wxj) in wx.iter().enumerate() {
                    let wgt = wyi * wxj;
                    fx += wgt * grid.dx[row + c0 + j];
                    fy += wgt * grid.dy[row + c0 + j];
                }
            }
            dx.push(fx);
            dy.push(fy);
        }
    }
    DeformationField {
        height,
        width,
        dx,
        dy,
    }
}

fn check_field_shape(
    (img_h, img_w): (usize, usize),
    field: &DeformationField,
) -> Result<(), AugmentError> {
    if (img_h, img_w) != (field.height, field.width) {
        return Err(AugmentError::ShapeMismatch {
            img_h,
            img_w,
            field_h: field.height,
            field_w: field.width,
        });
    }
    Ok(())
}

/// Catmull-Rom cubic kernel weights at fractional offset `t`, for taps
/// at floor(p)-1 .. floor(p)+2. At t = 0 the weights are exactly
/// (0, 1, 0, 0), so a zero field reproduces the input bit-for-bit.
#[inline]
fn catmull_rom_weights(t: f32) -> [f32; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ]
}

/// Bicubic sample with edge clamping; out-of-range results are clamped to
/// the valid intensity range by the caller.
fn bicubic_sample(img: &GrayImage, sx: f32, sy: f32) -> f32 {
    let (h, w) = img.shape();
    let clamp_x = |x: i64| -> usize { x.clamp(0, w as i64 - 1) as usize };
    let clamp_y = |y: i64| -> usize { y.clamp(0, h as i64 - 1) as usize };
    let bx = sx.floor();
    let by = sy.floor();
    let wx = catmull_rom_weights(sx - bx);
    let wy = catmull_rom_weights(sy - by);
    let mut acc = 0.0f32;
    for (i, &wyi) in wy.iter().enumerate() {
        if wyi == 0.0 {
            continue;
        }
        let y = clamp_y(by as i64 - 1 + i as i64);
        let row = img.row(y);
        let mut racc = 0.0f32;
        for (j, &wxj) in wx.iter().enumerate() {
            if wxj == 0.0 {
                continue;
            }
            racc += wxj * row[clamp_x(bx as i64 - 1 + j as i64)];
        }
        acc += wyi * racc;
    }
    acc
}

/// Backward-warp an image: `out(x, y) = img(x + dx, y + dy)` with bicubic
/// sampling, edge clamping, and output clamped to [0, 1].
pub fn warp_image(img: &GrayImage, field: &DeformationField) -> Result<GrayImage, AugmentError> {
    check_field_shape(img.shape(), field)?;
    let (h, w) = img.shape();
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let idx = y * w + x;
            let sx = x as f32 + field.dx[idx];
            let sy = y as f32 + field.dy[idx];
            data.push(bicubic_sample(img, sx, sy).clamp(0.0, 1.0));
        }
    }
    Ok(GrayImage::new_unchecked(h, w, data))
}

/// Backward-warp an instance mask with nearest-neighbor sampling; no new
/// labels can appear.
pub fn warp_mask(mask: &InstanceMask, field: &DeformationField) -> Result<InstanceMask, AugmentError> {
    check_field_shape(mask.shape(), field)?;
    let (h, w) = mask.shape();
    let mut labels = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let idx = y * w + x;
            let sx = (x as f32 + field.dx[idx]).round().clamp(0.0, w as f32 - 1.0) as usize;
            let sy = (y as f32 + field.dy[idx]).round().clamp(0.0, h as f32 - 1.0) as usize;
            labels.push(mask.get(sy, sx));
        }
    }
    Ok(InstanceMask::new(h, w, labels).expect("sized from mask"))
}

/// Either raster kind, so geometric ops apply uniformly to image/mask pairs.
pub trait Raster: Sized {
    fn shape(&self) -> (usize, usize);
    fn map_from(&self, f: impl FnMut(usize, usize) -> (usize, usize)) -> Self;
}

impl Raster for GrayImage {
    fn shape(&self) -> (usize, usize) {
        GrayImage::shape(self)
    }
    fn map_from(&self, mut f: impl FnMut(usize, usize) -> (usize, usize)) -> Self {
        let (h, w) = GrayImage::shape(self);
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = f(y, x);
                data.push(self.get(sy, sx));
            }
        }
        GrayImage::new_unchecked(h, w, data)
    }
}

impl Raster for InstanceMask {
    fn shape(&self) -> (usize, usize) {
        InstanceMask::shape(self)
    }
    fn map_from(&self, mut f: impl FnMut(usize, usize) -> (usize, usize)) -> Self {
        let (h, w) = InstanceMask::shape(self);
        let mut labels = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = f(y, x);
                labels.push(self.get(sy, sx));
            }
        }
        InstanceMask::new(h, w, labels).expect("sized from mask")
    }
}

/// Rotate by `quarter_turns` x 90 degrees counterclockwise, preserving the
/// image size. Odd turn counts require square inputs.
pub fn rotate90<R: Raster>(raster: &R, quarter_turns: u8) -> Result<R, AugmentError> {
    let (h, w) = raster.shape();
    let turns = quarter_turns % 4;
    if turns % 2 == 1 && h != w {
        return Err(AugmentError::NonSquare { h, w });
    }
    Ok(match turns {
        0 => raster.map_from(|y, x| (y, x)),
        1 => raster.map_from(|y, x| (x, w - 1 - y)),
        2 => raster.map_from(|y, x| (h - 1 - y, w - 1 - x)),
        _ => raster.map_from(|y, x| (h - 1 - x, y)),
    })
}

/// Mirror left-right.
pub fn flip_horizontal<R: Raster>(raster: &R) -> R {
    let (_, w) = raster.shape();
    raster.map_from(|y, x| (y, w - 1 - x))
}

#[derive(Debug, Clone)]
pub struct AugmentationConfig {
    /// Elastic deformations per input pair; each yields 8 variants
    /// (4 rotations x 2 flips).
    pub n_deformations: usize,
    pub spacing: usize,
    pub max_disp: f32,
    pub rng_seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            n_deformations: 100,
            spacing: 64,
            max_disp: 15.0,
            rng_seed: 0,
        }
    }
}

/// One augmented variant with the provenance tags used in file names.
#[derive(Debug, Clone)]
pub struct AugmentedPair {
    pub image: GrayImage,
    pub mask: InstanceMask,
    pub deformation: usize,
    pub rotation_degrees: u16,
    pub flipped: bool,
}

impl AugmentedPair {
    /// File-name suffix `_d{i}_r{0|90|180|270}_{f|n}`.
    pub fn suffix(&self) -> String {
        format!(
            "_d{}_r{}_{}",
            self.deformation,
            self.rotation_degrees,
            if self.flipped { "f" } else { "n" }
        )
    }
}

/// Expand one image/groundtruth pair into `n_deformations * 8` variants.
/// Deformation `i` draws from an independent RNG stream `i` of the
/// configured seed, so outputs are reproducible and order-independent.
pub fn augment_pair(
    img: &GrayImage,
    gt: &InstanceMask,
    cfg: &AugmentationConfig,
) -> Result<Vec<AugmentedPair>, AugmentError> {
    let (h, w) = img.shape();
    if (h, w) != gt.shape() {
        let (mask_h, mask_w) = gt.shape();
        return Err(AugmentError::PairMismatch {
            img_h: h,
            img_w: w,
            mask_h,
            mask_w,
        });
    }
    let mut out = Vec::with_capacity(cfg.n_deformations * 8);
    for d in 0..cfg.n_deformations {
        let mut rng = stream_rng(cfg.rng_seed, d as u64);
        let grid = sample_control_grid(h, w, cfg.spacing, cfg.max_disp, &mut rng);
        let field = grid_to_field(&grid, h, w);
        let warped_img = warp_image(img, &field)?;
        let warped_mask = warp_mask(gt, &field)?;
        for turns in 0..4u8 {
            let rot_img = rotate90(&warped_img, turns)?;
            let rot_mask = rotate90(&warped_mask, turns)?;
            for flipped in [false, true] {
                let (image, mask) = if flipped {
                    (flip_horizontal(&rot_img), flip_horizontal(&rot_mask))
                } else {
                    (rot_img.clone(), rot_mask.clone())
                };
                out.push(AugmentedPair {
                    image,
                    mask,
                    deformation: d,
                    rotation_degrees: u16::from(turns) * 90,
                    flipped,
                });
            }
        }
    }
    Ok(out)
}
