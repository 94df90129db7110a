//! Two-stage pipeline wiring: correction -> augmentation -> training, and
//! correction -> prediction -> postprocessing -> evaluation. One master
//! seed derives every stage seed by label hashing, so a single value
//! reproduces the whole run byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::augment::{augment_pair, AugmentationConfig};
use crate::imagedata::{BinaryMask, GrayImage, ImageStack, InstanceMask};
use crate::inhomogeneity::{correct_volume, CorrectionConfig};
use crate::io::{load_gray, load_instance_mask, save_instance_mask, BitDepth, IoError};
use crate::metrics::{evaluate, EvalReport, CSV_HEADER};
use crate::network::{
    load_checkpoint, predict_probabilities, save_checkpoint, train, ModelConfig, ModelParams,
    NetworkError, TrainConfig,
};
use crate::postprocess::{postprocess, HoleFill, PostprocessConfig, PostprocessInput};
use crate::seed::derive_seed;

/// How severe a pipeline failure is, for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureKind {
    /// Bad or missing data, mismatched shapes or architectures.
    Data,
    /// Numeric breakdown (non-finite loss).
    Numeric,
}

#[derive(Debug, Error)]
#[error("{stage} stage: {message}")]
pub struct PipelineError {
    pub stage: &'static str,
    pub kind: FailureKind,
    pub message: String,
}

impl PipelineError {
    fn data(stage: &'static str, message: impl ToString) -> Self {
        Self {
            stage,
            kind: FailureKind::Data,
            message: message.to_string(),
        }
    }

    fn from_network(stage: &'static str, e: NetworkError) -> Self {
        let kind = match e {
            NetworkError::NonFiniteLoss { .. } => FailureKind::Numeric,
            _ => FailureKind::Data,
        };
        Self {
            stage,
            kind,
            message: e.to_string(),
        }
    }
}

/// Model scale selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scale {
    #[default]
    Full,
    Desk,
}

impl Scale {
    pub fn model_config(self) -> ModelConfig {
        match self {
            Scale::Full => ModelConfig::full(),
            Scale::Desk => ModelConfig::desk(),
        }
    }

    pub fn parse(s: &str) -> Result<Self, String> {
        match s {
            "full" => Ok(Scale::Full),
            "desk" => Ok(Scale::Desk),
            other => Err(format!("unknown scale '{other}', expected full or desk")),
        }
    }
}

impl std::fmt::Display for Scale {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scale::Full => "full",
            Scale::Desk => "desk",
        })
    }
}

/// Every knob of the pipeline, loadable from a `key = value` file with
/// command-line overrides applied on top by the caller.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub master_seed: u64,
    /// In-plane smoothing sigma; `None` selects min(h, w) / 8.
    pub correct_sigma: Option<f32>,
    pub correct_iters: usize,
    pub augment_n: usize,
    pub train_lr: f64,
    pub train_momentum: f64,
    pub train_epochs: usize,
    pub scale: Scale,
    /// Small-object threshold; `None` scales the 512-frame default of 100
    /// by the actual image area.
    pub postprocess_gamma: Option<usize>,
    pub flood_fill: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            master_seed: 0,
            correct_sigma: None,
            correct_iters: CorrectionConfig::default().iterations,
            augment_n: 100,
            train_lr: 1e-5,
            train_momentum: 0.9,
            train_epochs: 200,
            scale: Scale::Full,
            postprocess_gamma: None,
            flood_fill: false,
        }
    }
}

impl PipelineConfig {
    /// Parse a plain-text config: one `key = value` per line, `#` starts
    /// a comment, unknown keys are rejected.
    pub fn from_key_values(text: &str) -> Result<Self, String> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key = value", lineno + 1))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |e: &dyn std::fmt::Display| format!("line {}: {key}: {e}", lineno + 1);
            match key {
                "master_seed" => cfg.master_seed = value.parse().map_err(|e| bad(&e))?,
                "correct_sigma" => {
                    cfg.correct_sigma = Some(value.parse().map_err(|e| bad(&e))?)
                }
                "correct_iters" => cfg.correct_iters = value.parse().map_err(|e| bad(&e))?,
                "augment_n" => cfg.augment_n = value.parse().map_err(|e| bad(&e))?,
                "train_lr" => cfg.train_lr = value.parse().map_err(|e| bad(&e))?,
                "train_momentum" => cfg.train_momentum = value.parse().map_err(|e| bad(&e))?,
                "train_epochs" => cfg.train_epochs = value.parse().map_err(|e| bad(&e))?,
                "train_scale" => cfg.scale = Scale::parse(value).map_err(|e| bad(&e))?,
                "postprocess_gamma" => {
                    cfg.postprocess_gamma = Some(value.parse().map_err(|e| bad(&e))?)
                }
                "flood_fill" => cfg.flood_fill = value.parse().map_err(|e| bad(&e))?,
                other => return Err(format!("line {}: unknown key '{other}'", lineno + 1)),
            }
        }
        Ok(cfg)
    }

    pub fn correction_config(&self) -> CorrectionConfig {
        CorrectionConfig {
            smoothing_sigma: self.correct_sigma,
            iterations: self.correct_iters,
            ..CorrectionConfig::default()
        }
    }

    pub fn postprocess_config(&self, image_size: usize) -> PostprocessConfig {
        PostprocessConfig {
            gamma: self
                .postprocess_gamma
                .unwrap_or_else(|| PostprocessConfig::gamma_for_size(image_size)),
            hole_fill: if self.flood_fill {
                HoleFill::FloodFill
            } else {
                HoleFill::FourNeighbor
            },
        }
    }
}

/// A named training pair.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub name: String,
    pub image: GrayImage,
    pub mask: InstanceMask,
}

/// Pair image files with same-stem mask files.
pub fn load_training_pairs(
    images_dir: &Path,
    masks_dir: &Path,
) -> Result<Vec<TrainingPair>, PipelineError> {
    let mut names = list_image_stems(images_dir).map_err(|e| PipelineError::data("training", e))?;
    names.sort();
    if names.is_empty() {
        return Err(PipelineError::data(
            "training",
            format!("no images found in {}", images_dir.display()),
        ));
    }
    names
        .into_iter()
        .map(|(stem, path)| {
            let image = load_gray(&path).map_err(|e| PipelineError::data("training", e))?;
            let mask_path = masks_dir.join(format!("{stem}.png"));
            let mask = load_instance_mask(&mask_path).map_err(|e| match e {
                IoError::MissingFile { .. } => PipelineError::data(
                    "training",
                    format!("missing mask for image '{stem}' in {}", masks_dir.display()),
                ),
                other => PipelineError::data("training", other),
            })?;
            Ok(TrainingPair {
                name: stem,
                image,
                mask,
            })
        })
        .collect()
}

fn list_image_stems(dir: &Path) -> Result<Vec<(String, PathBuf)>, String> {
    let entries = fs::read_dir(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    let mut out = Vec::new();
    for entry in entries.filter_map(|e| e.ok()) {
        let path = entry.path();
        let ext_ok = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png") || e.eq_ignore_ascii_case("pgm"));
        if ext_ok {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push((stem.to_string(), path.clone()));
            }
        }
    }
    Ok(out)
}

/// Correct a single 2D image (depth-1 stack path).
fn correct_plane(img: &GrayImage, cfg: &CorrectionConfig, stage: &'static str) -> Result<GrayImage, PipelineError> {
    let stack = ImageStack::single(img.clone());
    let corrected = correct_volume(&stack, cfg).map_err(|e| PipelineError::data(stage, e))?;
    Ok(corrected.into_planes().remove(0))
}

/// Training-stage artifacts.
#[derive(Debug)]
pub struct TrainingArtifacts {
    pub checkpoint_path: PathBuf,
    pub loss_curve_path: PathBuf,
    pub augmented_count: usize,
    pub final_loss: f64,
}

/// Correct, augment, and train; writes `model.ckpt` and `loss_curve.csv`
/// into `out_dir`.
pub fn run_training_stage(
    cfg: &PipelineConfig,
    pairs: &[TrainingPair],
    out_dir: &Path,
) -> Result<TrainingArtifacts, PipelineError> {
    if pairs.is_empty() {
        return Err(PipelineError::data("training", "no training pairs"));
    }
    fs::create_dir_all(out_dir)
        .map_err(|e| PipelineError::data("training", format!("{}: {e}", out_dir.display())))?;
    let correction = cfg.correction_config();

    log::info!("correcting {} training images", pairs.len());
    let corrected: Vec<TrainingPair> = pairs
        .par_iter()
        .map(|p| {
            Ok(TrainingPair {
                name: p.name.clone(),
                image: correct_plane(&p.image, &correction, "correction")?,
                mask: p.mask.clone(),
            })
        })
        .collect::<Result<_, PipelineError>>()?;

    log::info!("augmenting with {} deformations per pair", cfg.augment_n);
    let mut dataset: Vec<(GrayImage, BinaryMask)> = Vec::new();
    for (i, pair) in corrected.iter().enumerate() {
        let aug_cfg = AugmentationConfig {
            n_deformations: cfg.augment_n,
            rng_seed: derive_seed(cfg.master_seed, &format!("augment/{i}")),
            ..AugmentationConfig::default()
        };
        let variants =
            augment_pair(&pair.image, &pair.mask, &aug_cfg).map_err(|e| PipelineError::data("augmentation", e))?;
        dataset.extend(
            variants
                .into_iter()
                .map(|v| (v.image, v.mask.binarize())),
        );
    }
    let augmented_count = dataset.len();

    let model_cfg = cfg.scale.model_config();
    let model: ModelParams<f32> =
        ModelParams::init(model_cfg, derive_seed(cfg.master_seed, "init"))
            .map_err(|e| PipelineError::from_network("training", e))?;
    let train_cfg = TrainConfig {
        learning_rate: cfg.train_lr,
        momentum: cfg.train_momentum,
        epochs: cfg.train_epochs,
        batch_size: 1,
        rng_seed: derive_seed(cfg.master_seed, "train"),
    };
    log::info!(
        "training {} pairs for {} epochs at lr {}",
        augmented_count,
        train_cfg.epochs,
        train_cfg.learning_rate
    );
    let outcome =
        train(model, &dataset, &train_cfg).map_err(|e| PipelineError::from_network("training", e))?;

    let checkpoint_path = out_dir.join("model.ckpt");
    save_checkpoint(&outcome.model, &checkpoint_path)
        .map_err(|e| PipelineError::data("training", e))?;
    let loss_curve_path = out_dir.join("loss_curve.csv");
    let mut csv = String::from("iteration,loss\n");
    for (i, loss) in outcome.loss_curve.iter().enumerate() {
        csv.push_str(&format!("{i},{loss:.9}\n"));
    }
    write_atomic(&loss_curve_path, csv.as_bytes())
        .map_err(|e| PipelineError::data("training", e))?;

    Ok(TrainingArtifacts {
        checkpoint_path,
        loss_curve_path,
        augmented_count,
        final_loss: *outcome.loss_curve.last().unwrap_or(&f64::NAN),
    })
}

/// Inference-stage artifacts for one image.
#[derive(Debug, Clone)]
pub struct InferenceResult {
    pub name: String,
    pub mask_path: PathBuf,
    pub overlay_path: PathBuf,
    pub instances: usize,
    pub report: Option<EvalReport>,
}

/// Correct, predict, postprocess, and optionally evaluate each image.
/// Writes `{name}_mask.png` and `{name}_overlay.png` per image plus
/// `report.csv` when groundtruth is supplied.
pub fn run_inference_stage(
    cfg: &PipelineConfig,
    checkpoint: &Path,
    images: &[(String, GrayImage)],
    groundtruth: Option<&[(String, InstanceMask)]>,
    out_dir: &Path,
) -> Result<Vec<InferenceResult>, PipelineError> {
    fs::create_dir_all(out_dir)
        .map_err(|e| PipelineError::data("inference", format!("{}: {e}", out_dir.display())))?;
    let model = load_checkpoint(checkpoint).map_err(|e| PipelineError::data("inference", e))?;
    let expected = cfg.scale.model_config();
    if model.arch_hash() != expected.arch_hash() {
        return Err(PipelineError::data(
            "inference",
            format!(
                "checkpoint architecture {:#018x} does not match the configured {} scale {:#018x}",
                model.arch_hash(),
                cfg.scale,
                expected.arch_hash()
            ),
        ));
    }
    let correction = cfg.correction_config();

    let mut results: Vec<InferenceResult> = images
        .par_iter()
        .map(|(name, img)| {
            let corrected = correct_plane(img, &correction, "correction")?;
            let probs = predict_probabilities(&model, &corrected)
                .map_err(|e| PipelineError::from_network("inference", e))?;
            let pp = cfg.postprocess_config(img.height().min(img.width()));
            let inst = postprocess(PostprocessInput::Probabilities(&probs), &pp);
            let mask_path = out_dir.join(format!("{name}_mask.png"));
            save_instance_mask_atomic(&inst, &mask_path)
                .map_err(|e| PipelineError::data("inference", e))?;
            let overlay_path = out_dir.join(format!("{name}_overlay.png"));
            save_overlay(img, &inst, &overlay_path)
                .map_err(|e| PipelineError::data("inference", e))?;
            let report = match groundtruth {
                Some(gt) => {
                    let gt_mask = gt
                        .iter()
                        .find(|(n, _)| n == name)
                        .map(|(_, m)| m)
                        .ok_or_else(|| {
                            PipelineError::data(
                                "evaluation",
                                format!("missing groundtruth for '{name}'"),
                            )
                        })?;
                    Some(
                        evaluate(&inst, gt_mask)
                            .map_err(|e| PipelineError::data("evaluation", e))?,
                    )
                }
                None => None,
            };
            Ok(InferenceResult {
                name: name.clone(),
                mask_path,
                overlay_path,
                instances: inst.label_set().len(),
                report,
            })
        })
        .collect::<Result<_, PipelineError>>()?;
    results.sort_by(|a, b| a.name.cmp(&b.name));

    if groundtruth.is_some() {
        let mut csv = String::from(CSV_HEADER);
        csv.push('\n');
        for r in &results {
            if let Some(report) = &r.report {
                csv.push_str(&report.csv_row(&r.name));
                csv.push('\n');
            }
        }
        write_atomic(&out_dir.join("report.csv"), csv.as_bytes())
            .map_err(|e| PipelineError::data("evaluation", e))?;
    }
    Ok(results)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), String> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| format!("{}: {e}", tmp.display()))?;
    fs::rename(&tmp, path).map_err(|e| format!("{}: {e}", path.display()))
}

fn save_instance_mask_atomic(mask: &InstanceMask, path: &Path) -> Result<(), String> {
    let tmp = path.with_extension("tmp.png");
    save_instance_mask(mask, &tmp).map_err(|e| e.to_string())?;
    fs::rename(&tmp, path).map_err(|e| format!("{}: {e}", path.display()))
}

/// Distinct color per instance label (golden-angle hue walk).
fn label_color(label: u32) -> [u8; 3] {
    let hue = (label as f64 * 137.507_764) % 360.0;
    let (h, s, v) = (hue / 60.0, 0.85f64, 1.0f64);
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [
        ((r + m) * 255.0) as u8,
        ((g + m) * 255.0) as u8,
        ((b + m) * 255.0) as u8,
    ]
}

/// Instances colorized and blended over the grayscale input.
pub fn save_overlay(img: &GrayImage, inst: &InstanceMask, path: &Path) -> Result<(), String> {
    let (h, w) = img.shape();
    let mut rgb = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let g = (img.get(y, x) * 255.0).round() as u8;
            let label = inst.get(y, x);
            if label == 0 {
                rgb.extend_from_slice(&[g, g, g]);
            } else {
                let c = label_color(label);
                // 60/40 blend keeps the underlying texture visible.
                rgb.extend_from_slice(&[
                    ((0.6 * f32::from(c[0]) + 0.4 * f32::from(g)) as u8),
                    ((0.6 * f32::from(c[1]) + 0.4 * f32::from(g)) as u8),
                    ((0.6 * f32::from(c[2]) + 0.4 * f32::from(g)) as u8),
                ]);
            }
        }
    }
    let buf: image::ImageBuffer<image::Rgb<u8>, _> =
        image::ImageBuffer::from_raw(w as u32, h as u32, rgb).expect("sized buffer");
    let tmp = path.with_extension("tmp.png");
    buf.save_with_format(&tmp, image::ImageFormat::Png)
        .map_err(|e| e.to_string())?;
    fs::rename(&tmp, path).map_err(|e| format!("{}: {e}", path.display()))
}

/// Save a grayscale image with the pipeline's standard 16-bit depth.
pub fn save_gray16(img: &GrayImage, path: &Path) -> Result<(), IoError> {
    crate::io::save_gray(img, path, BitDepth::Sixteen)
}
