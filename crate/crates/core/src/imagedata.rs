//! Core raster types shared by every pipeline stage.
//!
//! Intensities are normalized to [0, 1] when images enter the pipeline and
//! every operation stays in that normalized space. All types are immutable
//! after construction, so they are safe to share across threads.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("data length {got} does not match {height}x{width} = {}", height * width)]
    LengthMismatch {
        height: usize,
        width: usize,
        got: usize,
    },
    #[error("non-finite intensity at index {index}")]
    NonFinite { index: usize },
    #[error("intensity {value} at index {index} is outside [0, 1]")]
    OutOfRange { index: usize, value: f32 },
    #[error("mask value {value} at index {index} is not 0 or 1")]
    NotBinary { index: usize, value: u8 },
    #[error("image stack has no planes")]
    EmptyStack,
    #[error("plane {index} is {got_h}x{got_w}, expected {want_h}x{want_w}")]
    PlaneShapeMismatch {
        index: usize,
        got_h: usize,
        got_w: usize,
        want_h: usize,
        want_w: usize,
    },
}

/// Single-channel floating-point image, row-major, intensities in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl GrayImage {
    /// Build an image, validating length, finiteness and the [0, 1] range.
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self, RasterError> {
        if data.len() != height * width {
            return Err(RasterError::LengthMismatch {
                height,
                width,
                got: data.len(),
            });
        }
        for (index, &value) in data.iter().enumerate() {
            if !value.is_finite() {
                return Err(RasterError::NonFinite { index });
            }
            if !(0.0..=1.0).contains(&value) {
                return Err(RasterError::OutOfRange { index, value });
            }
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Construct without range checks. Callers must guarantee validity.
    pub(crate) fn new_unchecked(height: usize, width: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), height * width);
        debug_assert!(data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        Self {
            height,
            width,
            data,
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::new_unchecked(height, width, vec![0.0; height * width])
    }

    pub fn constant(height: usize, width: usize, value: f32) -> Self {
        assert!((0.0..=1.0).contains(&value) && value.is_finite());
        Self::new_unchecked(height, width, vec![value; height * width])
    }

    /// Evaluate `f(y, x)` at every pixel; values are clamped to [0, 1].
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x).clamp(0.0, 1.0));
            }
        }
        Self::new_unchecked(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, y: usize) -> &[f32] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    /// Mean intensity, accumulated in f64.
    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| f64::from(v)).sum::<f64>() / self.data.len() as f64
    }

    /// Root-mean-square difference to another image of the same shape.
    pub fn rmse(&self, other: &GrayImage) -> f64 {
        assert_eq!(self.shape(), other.shape());
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let d = f64::from(a) - f64::from(b);
                d * d
            })
            .sum();
        (sum / self.data.len() as f64).sqrt()
    }

    /// Threshold at `level`, strictly greater-than maps to foreground.
    pub fn threshold(&self, level: f32) -> BinaryMask {
        let data = self.data.iter().map(|&v| u8::from(v > level)).collect();
        BinaryMask::new_unchecked(self.height, self.width, data)
    }
}

/// Ordered stack of same-sized planes; depth 1 degenerates to a 2D image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageStack {
    planes: Vec<GrayImage>,
}

impl ImageStack {
    pub fn new(planes: Vec<GrayImage>) -> Result<Self, RasterError> {
        let first = planes.first().ok_or(RasterError::EmptyStack)?;
        let (want_h, want_w) = first.shape();
        for (index, plane) in planes.iter().enumerate().skip(1) {
            let (got_h, got_w) = plane.shape();
            if (got_h, got_w) != (want_h, want_w) {
                return Err(RasterError::PlaneShapeMismatch {
                    index,
                    got_h,
                    got_w,
                    want_h,
                    want_w,
                });
            }
        }
        Ok(Self { planes })
    }

    pub fn single(plane: GrayImage) -> Self {
        Self {
            planes: vec![plane],
        }
    }

    pub fn depth(&self) -> usize {
        self.planes.len()
    }

    pub fn height(&self) -> usize {
        self.planes[0].height()
    }

    pub fn width(&self) -> usize {
        self.planes[0].width()
    }

    pub fn planes(&self) -> &[GrayImage] {
        &self.planes
    }

    pub fn plane(&self, p: usize) -> &GrayImage {
        &self.planes[p]
    }

    pub fn into_planes(self) -> Vec<GrayImage> {
        self.planes
    }

    /// Mean over all voxels, accumulated in f64.
    pub fn mean(&self) -> f64 {
        let total: usize = self.planes.iter().map(|p| p.as_slice().len()).sum();
        let sum: f64 = self
            .planes
            .iter()
            .flat_map(|p| p.as_slice())
            .map(|&v| f64::from(v))
            .sum();
        sum / total as f64
    }

    pub fn rmse(&self, other: &ImageStack) -> f64 {
        assert_eq!(self.depth(), other.depth());
        let n: usize = self.planes.iter().map(|p| p.as_slice().len()).sum();
        let sum: f64 = self
            .planes
            .iter()
            .zip(other.planes())
            .map(|(a, b)| {
                let r = a.rmse(b);
                r * r * a.as_slice().len() as f64
            })
            .sum();
        (sum / n as f64).sqrt()
    }
}

/// Binary segmentation mask; 1 marks tubule pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self, RasterError> {
        if data.len() != height * width {
            return Err(RasterError::LengthMismatch {
                height,
                width,
                got: data.len(),
            });
        }
        for (index, &value) in data.iter().enumerate() {
            if value > 1 {
                return Err(RasterError::NotBinary { index, value });
            }
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub(crate) fn new_unchecked(height: usize, width: usize, data: Vec<u8>) -> Self {
        debug_assert_eq!(data.len(), height * width);
        debug_assert!(data.iter().all(|&v| v <= 1));
        Self {
            height,
            width,
            data,
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::new_unchecked(height, width, vec![0; height * width])
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(u8::from(f(y, x)));
            }
        }
        Self::new_unchecked(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn is_set(&self, y: usize, x: usize) -> bool {
        self.get(y, x) == 1
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    pub fn count_foreground(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }
}

/// Integer-labeled instances; 0 is background, labels k >= 1 are objects.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMask {
    height: usize,
    width: usize,
    labels: Vec<u32>,
}

impl InstanceMask {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self, RasterError> {
        if labels.len() != height * width {
            return Err(RasterError::LengthMismatch {
                height,
                width,
                got: labels.len(),
            });
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            labels: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> u32) -> Self {
        let mut labels = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                labels.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            labels,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.labels
    }

    pub fn max_label(&self) -> u32 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Sorted distinct positive labels.
    pub fn label_set(&self) -> Vec<u32> {
        let mut set: Vec<u32> = self.labels.iter().copied().filter(|&l| l > 0).collect();
        set.sort_unstable();
        set.dedup();
        set
    }

    /// Pixel count per positive label, indexed `sizes[label - 1]` after
    /// compaction; for arbitrary masks use together with `label_set`.
    pub fn label_sizes(&self) -> Vec<(u32, usize)> {
        let set = self.label_set();
        let mut counts = vec![0usize; set.len()];
        for &l in &self.labels {
            if l > 0 {
                if let Ok(i) = set.binary_search(&l) {
                    counts[i] += 1;
                }
            }
        }
        set.into_iter().zip(counts).collect()
    }

    /// True when the positive labels are exactly {1..n} for some n.
    pub fn is_compact(&self) -> bool {
        let set = self.label_set();
        set.iter()
            .enumerate()
            .all(|(i, &l)| l == (i + 1) as u32)
    }

    /// Relabel so positive labels become {1..n}, ascending by original
    /// label value; region geometry is untouched.
    pub fn compact(&self) -> InstanceMask {
        let set = self.label_set();
        let labels = self
            .labels
            .iter()
            .map(|&l| {
                if l == 0 {
                    0
                } else {
                    (set.binary_search(&l).unwrap() + 1) as u32
                }
            })
            .collect();
        InstanceMask {
            height: self.height,
            width: self.width,
            labels,
        }
    }

    /// Foreground mask: every positive label maps to 1.
    pub fn binarize(&self) -> BinaryMask {
        let data = self.labels.iter().map(|&l| u8::from(l > 0)).collect();
        BinaryMask::new_unchecked(self.height, self.width, data)
    }
}
