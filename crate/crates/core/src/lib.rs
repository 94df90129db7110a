//! tubuleseg-core — segmentation and identification of tubular structures
//! in 2D fluorescence-microscopy images.
//!
//! The pipeline stages are:
//!
//! 1. **imagedata** – grayscale raster types, instance masks, PNG/PGM I/O.
//! 2. **inhomogeneity** – multiplicative bias-field estimation and correction.
//! 3. **augment** – elastic deformation on a B-spline control grid plus
//!    right-angle rotations and horizontal flips.
//! 4. **network** – encoder-decoder CNN with pooling-index transfer, written
//!    from first principles (forward, hand-derived backward, SGD training,
//!    checkpointing).
//! 5. **postprocess** – small-object removal and 4-neighbor hole filling.
//! 6. **metrics** – pixel accuracy / error rates, object F1 with a 50%
//!    overlap rule, size-weighted object Dice and object Hausdorff.
//! 7. **phantom** – synthetic tubule images with exact ground truth for
//!    desk-scale training and oracle tests.
//! 8. **pipeline** – the two-stage (training / inference) wiring used by
//!    the command-line interface.

pub mod augment;
pub mod imagedata;
pub mod inhomogeneity;
pub mod io;
pub mod metrics;
pub mod network;
pub mod phantom;
pub mod pipeline;
pub mod postprocess;
pub mod seed;

pub use imagedata::{BinaryMask, GrayImage, ImageStack, InstanceMask};
