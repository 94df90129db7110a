//! Rank-4 tensors in batch x channel x height x width layout.

use num_traits::Float;

use crate::imagedata::{BinaryMask, GrayImage};

/// Scalar type the network runs on: f32 in production, f64 for
/// finite-difference verification.
pub trait Scalar:
    Float
    + num_traits::NumAssign
    + std::iter::Sum
    + std::fmt::Debug
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Dense rank-4 array, row-major within each (batch, channel) plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![T::zero(); n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "tensor data length mismatch");
        Self { n, c, h, w, data }
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.idx(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.idx(n, c, y, x);
        self.data[i] = v;
    }

    /// Contiguous (batch, channel) plane.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let start = (n * self.c + c) * self.h * self.w;
        &self.data[start..start + self.h * self.w]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let start = (n * self.c + c) * self.h * self.w;
        let len = self.h * self.w;
        &mut self.data[start..start + len]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Single-image tensor (1 x 1 x h x w).
    pub fn from_gray(img: &GrayImage) -> Self {
        let (h, w) = img.shape();
        let data = img.as_slice().iter().map(|&v| T::from_f64(f64::from(v))).collect();
        Self::from_vec(1, 1, h, w, data)
    }

    /// Channel plane of batch item `n` as a clamped grayscale image.
    pub fn to_gray(&self, n: usize, c: usize) -> GrayImage {
        let data = self
            .plane(n, c)
            .iter()
            .map(|&v| (v.to_f64() as f32).clamp(0.0, 1.0))
            .collect();
        GrayImage::new(self.h, self.w, data).expect("clamped plane")
    }

    /// One-channel class tensor from a binary mask (values 0/1).
    pub fn from_mask(mask: &BinaryMask) -> Self {
        let (h, w) = mask.shape();
        let data = mask
            .as_slice()
            .iter()
            .map(|&v| T::from_f64(f64::from(v)))
            .collect();
        Self::from_vec(1, 1, h, w, data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Finite check active in debug builds only.
    #[inline]
    pub fn debug_check_finite(&self, context: &str) {
        debug_assert!(self.all_finite(), "non-finite values after {context}");
        let _ = context;
    }
}
