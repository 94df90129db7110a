//! Command-line interface for the tubule segmentation pipeline.
//!
//! Subcommands mirror the pipeline stages: `correct`, `augment`,
//! `phantom`, `train`, `infer`, `postprocess`, `evaluate`, and `pipeline`
//! for the full phantom-to-report run. Set `TUBULESEG_LOG=debug` (or
//! `info`, `warn`) to control log verbosity.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tubuleseg_core::augment::{augment_pair, AugmentationConfig};
use tubuleseg_core::imagedata::{GrayImage, ImageStack, InstanceMask};
use tubuleseg_core::inhomogeneity::correct_volume;
use tubuleseg_core::io::{
    load_gray, load_instance_mask, load_stack_dir, save_gray, save_instance_mask, BitDepth,
};
use tubuleseg_core::metrics::{evaluate, CSV_HEADER};
use tubuleseg_core::phantom::{generate_dataset, PhantomConfig};
use tubuleseg_core::pipeline::{
    load_training_pairs, run_inference_stage, run_training_stage, save_overlay, FailureKind,
    PipelineConfig, PipelineError, Scale,
};
use tubuleseg_core::postprocess::{postprocess, PostprocessInput};
use tubuleseg_core::seed::derive_seed;

#[derive(Parser)]
#[command(
    name = "tubuleseg",
    about = "Segment and identify tubular structures in fluorescence microscopy images",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Plain-text `key = value` pipeline config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; derives every stage seed (overrides the config file).
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<PipelineConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
                PipelineConfig::from_key_values(&text).map_err(CliError::usage)?
            }
            None => PipelineConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.master_seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Correct intensity inhomogeneity of an image or an ordered stack.
    Correct {
        /// Single image file or a directory treated as an ordered stack.
        #[arg(long, value_name = "dir|file")]
        r#in: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// In-plane smoothing sigma in pixels (default min(h, w) / 8).
        #[arg(long)]
        sigma: Option<f32>,
        /// Reweighting iterations.
        #[arg(long, default_value_t = 5)]
        iters: usize,
    },
    /// Expand image/mask pairs by elastic deformation, rotations, flips.
    Augment {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Deformations per pair (each yields 8 rotation/flip variants).
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate synthetic tubule phantoms with instance groundtruth.
    Phantom {
        #[arg(long, default_value_t = 20)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the segmentation model on paired images and masks.
    Train {
        /// Directory containing `images/` and `masks/` subdirectories.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-5)]
        lr: f64,
        #[arg(long, default_value_t = 0.9)]
        momentum: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "full")]
        scale: String,
        /// Deformations per training pair.
        #[arg(long, default_value_t = 100)]
        augment_n: usize,
    },
    /// Segment images with a trained model.
    Infer {
        #[arg(long)]
        model: PathBuf,
        /// Image file or directory of images.
        #[arg(long, value_name = "img|dir")]
        r#in: PathBuf,
        /// Output mask path (single-image input with a .png out) or a
        /// directory receiving {name}_mask.png plus overlays.
        #[arg(long)]
        out: PathBuf,
        /// Optional groundtruth directory; enables report.csv.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long, default_value = "full")]
        scale: String,
        #[arg(long)]
        gamma: Option<usize>,
    },
    /// Clean a binary mask or probability map into labeled instances.
    Postprocess {
        /// Binary mask (or probability image with --probabilities).
        #[arg(long, value_name = "mask|prob")]
        r#in: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        gamma: usize,
        /// Treat the input as a probability map, thresholding at 0.5.
        #[arg(long)]
        probabilities: bool,
        /// Fill all enclosed background instead of the 4-neighbor rule.
        #[arg(long)]
        flood_fill: bool,
    },
    /// Compare segmentations against groundtruth instance masks.
    Evaluate {
        #[arg(long)]
        seg: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full run: phantoms -> correction -> augmentation -> training ->
    /// inference -> evaluation, driven by one master seed.
    Pipeline {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Training phantoms.
        #[arg(long, default_value_t = 5)]
        train_n: usize,
        /// Held-out test phantoms.
        #[arg(long, default_value_t = 20)]
        test_n: usize,
        /// Phantom image size (desk scale uses 64).
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
}

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn usage(message: impl ToString) -> Self {
        Self {
            code: 1,
            message: message.to_string(),
        }
    }

    fn data(message: impl ToString) -> Self {
        Self {
            code: 2,
            message: message.to_string(),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        Self {
            code: match e.kind {
                FailureKind::Data => 2,
                FailureKind::Numeric => 3,
            },
            message: e.to_string(),
        }
    }
}

macro_rules! data_err {
    ($expr:expr) => {
        $expr.map_err(|e| CliError::data(e))
    };
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("TUBULESEG_LOG")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Keep clap's rendered help/version on stdout with success,
            // everything else is a usage error (exit 1).
            use clap::error::ErrorKind::*;
            let _ = e.print();
            return match e.kind() {
                DisplayHelp | DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Correct {
            r#in,
            out,
            sigma,
            iters,
        } => cmd_correct(&r#in, &out, sigma, iters),
        Command::Augment {
            images,
            masks,
            out,
            n,
            seed,
        } => cmd_augment(&images, &masks, &out, n, seed),
        Command::Phantom { n, size, seed, out } => cmd_phantom(n, size, seed, &out),
        Command::Train {
            data,
            out,
            epochs,
            lr,
            momentum,
            seed,
            scale,
            augment_n,
        } => {
            let cfg = PipelineConfig {
                master_seed: seed,
                train_lr: lr,
                train_momentum: momentum,
                train_epochs: epochs,
                augment_n,
                scale: Scale::parse(&scale).map_err(CliError::usage)?,
                ..PipelineConfig::default()
            };
            let pairs = load_training_pairs(&data.join("images"), &data.join("masks"))?;
            let artifacts = run_training_stage(&cfg, &pairs, &out)?;
            println!(
                "trained on {} augmented pairs; checkpoint {}",
                artifacts.augmented_count,
                artifacts.checkpoint_path.display()
            );
            Ok(())
        }
        Command::Infer {
            model,
            r#in,
            out,
            gt,
            scale,
            gamma,
        } => cmd_infer(&model, &r#in, &out, gt.as_deref(), &scale, gamma),
        Command::Postprocess {
            r#in,
            out,
            gamma,
            probabilities,
            flood_fill,
        } => cmd_postprocess(&r#in, &out, gamma, probabilities, flood_fill),
        Command::Evaluate { seg, gt, out } => cmd_evaluate(&seg, &gt, &out),
        Command::Pipeline {
            config,
            out,
            train_n,
            test_n,
            size,
        } => cmd_pipeline(&config.load()?, &out, train_n, test_n, size),
    }
}

fn cmd_correct(input: &Path, out: &Path, sigma: Option<f32>, iters: usize) -> Result<(), CliError> {
    let cfg = tubuleseg_core::inhomogeneity::CorrectionConfig {
        smoothing_sigma: sigma,
        iterations: iters,
        ..Default::default()
    };
    data_err!(fs::create_dir_all(out))?;
    if input.is_dir() {
        let stack = data_err!(load_stack_dir(input))?;
        let corrected = data_err!(correct_volume(&stack, &cfg))?;
        let mut names: Vec<PathBuf> = data_err!(fs::read_dir(input))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                p.extension()
                    .is_some_and(|e| e.eq_ignore_ascii_case("png") || e.eq_ignore_ascii_case("pgm"))
            })
            .collect();
        names.sort();
        for (path, plane) in names.iter().zip(corrected.planes()) {
            let dest = out.join(path.file_name().expect("listed file"));
            data_err!(save_gray(plane, &dest, BitDepth::Sixteen))?;
        }
        println!("corrected {} planes into {}", corrected.depth(), out.display());
    } else {
        let img = data_err!(load_gray(input))?;
        let corrected = data_err!(correct_volume(&ImageStack::single(img), &cfg))?;
        let dest = out.join(input.file_name().expect("input file name"));
        data_err!(save_gray(corrected.plane(0), &dest, BitDepth::Sixteen))?;
        println!("corrected {} -> {}", input.display(), dest.display());
    }
    Ok(())
}

fn cmd_augment(images: &Path, masks: &Path, out: &Path, n: usize, seed: u64) -> Result<(), CliError> {
    let pairs = load_training_pairs(images, masks)?;
    data_err!(fs::create_dir_all(out))?;
    let mut written = 0usize;
    for (i, pair) in pairs.iter().enumerate() {
        let cfg = AugmentationConfig {
            n_deformations: n,
            rng_seed: derive_seed(seed, &format!("augment/{i}")),
            ..AugmentationConfig::default()
        };
        let variants = data_err!(augment_pair(&pair.image, &pair.mask, &cfg))?;
        for v in variants {
            let stem = format!("{}{}", pair.name, v.suffix());
            data_err!(save_gray(
                &v.image,
                out.join(format!("{stem}.png")),
                BitDepth::Sixteen
            ))?;
            data_err!(save_instance_mask(
                &v.mask,
                out.join(format!("{stem}_mask.png"))
            ))?;
            written += 1;
        }
    }
    println!("wrote {written} augmented pairs to {}", out.display());
    Ok(())
}

fn cmd_phantom(n: usize, size: usize, seed: u64, out: &Path) -> Result<(), CliError> {
    let cfg = PhantomConfig {
        size,
        ..if size <= 96 {
            PhantomConfig::desk()
        } else {
            PhantomConfig::default()
        }
    };
    let samples = data_err!(generate_dataset(n, &cfg, seed))?;
    data_err!(fs::create_dir_all(out.join("images")))?;
    data_err!(fs::create_dir_all(out.join("masks")))?;
    for (i, s) in samples.iter().enumerate() {
        let name = format!("phantom{i:04}");
        data_err!(save_gray(
            &s.observed,
            out.join("images").join(format!("{name}.png")),
            BitDepth::Sixteen
        ))?;
        data_err!(save_instance_mask(
            &s.mask,
            out.join("masks").join(format!("{name}.png"))
        ))?;
    }
    println!("wrote {n} phantoms ({size}x{size}) to {}", out.display());
    Ok(())
}

fn cmd_infer(
    model_path: &Path,
    input: &Path,
    out: &Path,
    gt: Option<&Path>,
    scale: &str,
    gamma: Option<usize>,
) -> Result<(), CliError> {
    let cfg = PipelineConfig {
        scale: Scale::parse(scale).map_err(CliError::usage)?,
        postprocess_gamma: gamma,
        ..PipelineConfig::default()
    };
    let images = if input.is_dir() {
        let mut names: Vec<PathBuf> = data_err!(fs::read_dir(input))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                p.extension()
                    .is_some_and(|e| e.eq_ignore_ascii_case("png") || e.eq_ignore_ascii_case("pgm"))
            })
            .collect();
        names.sort();
        names
            .iter()
            .map(|p| {
                Ok((
                    p.file_stem().unwrap().to_string_lossy().into_owned(),
                    data_err!(load_gray(p))?,
                ))
            })
            .collect::<Result<Vec<_>, CliError>>()?
    } else {
        vec![(
            input.file_stem().unwrap().to_string_lossy().into_owned(),
            data_err!(load_gray(input))?,
        )]
    };
    let groundtruth = match gt {
        Some(dir) => Some(
            images
                .iter()
                .map(|(name, _)| {
                    Ok((
                        name.clone(),
                        data_err!(load_instance_mask(dir.join(format!("{name}.png"))))?,
                    ))
                })
                .collect::<Result<Vec<_>, CliError>>()?,
        ),
        None => None,
    };
    // A .png out path with a single input means "write the mask there".
    let single_mask_out = !input.is_dir()
        && out
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    let out_dir = if single_mask_out {
        out.parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."))
            .to_path_buf()
    } else {
        out.to_path_buf()
    };
    let results = run_inference_stage(&cfg, model_path, &images, groundtruth.as_deref(), &out_dir)?;
    if single_mask_out {
        let produced = &results[0].mask_path;
        if produced != out {
            data_err!(fs::rename(produced, out))?;
        }
        println!("{}: {} instances -> {}", results[0].name, results[0].instances, out.display());
        return Ok(());
    }
    for r in &results {
        println!("{}: {} instances -> {}", r.name, r.instances, r.mask_path.display());
    }
    if groundtruth.is_some() {
        println!("report: {}", out.join("report.csv").display());
    }
    Ok(())
}

fn cmd_postprocess(
    input: &Path,
    out: &Path,
    gamma: usize,
    probabilities: bool,
    flood_fill: bool,
) -> Result<(), CliError> {
    let cfg = tubuleseg_core::postprocess::PostprocessConfig {
        gamma,
        hole_fill: if flood_fill {
            tubuleseg_core::postprocess::HoleFill::FloodFill
        } else {
            tubuleseg_core::postprocess::HoleFill::FourNeighbor
        },
    };
    let inst = if probabilities {
        let prob = data_err!(load_gray(input))?;
        postprocess(PostprocessInput::Probabilities(&prob), &cfg)
    } else {
        let img = data_err!(load_gray(input))?;
        let mask = img.threshold(0.5);
        postprocess(PostprocessInput::Mask(&mask), &cfg)
    };
    data_err!(save_instance_mask(&inst, out))?;
    println!(
        "postprocessed {} -> {} ({} instances)",
        input.display(),
        out.display(),
        inst.label_set().len()
    );
    Ok(())
}

fn cmd_evaluate(seg_dir: &Path, gt_dir: &Path, out: &Path) -> Result<(), CliError> {
    let mut stems: Vec<String> = data_err!(fs::read_dir(seg_dir))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect();
    stems.sort();
    if stems.is_empty() {
        return Err(CliError::data(format!(
            "no segmentation masks in {}",
            seg_dir.display()
        )));
    }
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    for stem in &stems {
        let seg = data_err!(load_instance_mask(seg_dir.join(format!("{stem}.png"))))?;
        // Inference outputs are named `{image}_mask.png`; groundtruth
        // files carry the bare image name.
        let gt_name = stem.strip_suffix("_mask").unwrap_or(stem);
        let gt = data_err!(load_instance_mask(gt_dir.join(format!("{gt_name}.png"))))?;
        let report = data_err!(evaluate(&seg, &gt))?;
        csv.push_str(&report.csv_row(gt_name));
        csv.push('\n');
    }
    data_err!(fs::write(out, csv))?;
    println!("evaluated {} masks -> {}", stems.len(), out.display());
    Ok(())
}

fn cmd_pipeline(
    cfg: &PipelineConfig,
    out: &Path,
    train_n: usize,
    test_n: usize,
    size: usize,
) -> Result<(), CliError> {
    let phantom_cfg = PhantomConfig {
        size,
        ..if size <= 96 {
            PhantomConfig::desk()
        } else {
            PhantomConfig::default()
        }
    };
    log::info!("generating {train_n}+{test_n} phantoms at {size}px");
    let train_set = data_err!(generate_dataset(
        train_n,
        &phantom_cfg,
        derive_seed(cfg.master_seed, "phantom/train")
    ))?;
    let test_set = data_err!(generate_dataset(
        test_n,
        &phantom_cfg,
        derive_seed(cfg.master_seed, "phantom/test")
    ))?;

    let pairs: Vec<tubuleseg_core::pipeline::TrainingPair> = train_set
        .iter()
        .enumerate()
        .map(|(i, s)| tubuleseg_core::pipeline::TrainingPair {
            name: format!("train{i:04}"),
            image: s.observed.clone(),
            mask: s.mask.clone(),
        })
        .collect();
    let artifacts = run_training_stage(cfg, &pairs, &out.join("model"))?;
    println!(
        "training: {} augmented pairs, final loss {:.6}",
        artifacts.augmented_count, artifacts.final_loss
    );

    let images: Vec<(String, GrayImage)> = test_set
        .iter()
        .enumerate()
        .map(|(i, s)| (format!("test{i:04}"), s.observed.clone()))
        .collect();
    let gt: Vec<(String, InstanceMask)> = test_set
        .iter()
        .enumerate()
        .map(|(i, s)| (format!("test{i:04}"), s.mask.clone()))
        .collect();
    let results = run_inference_stage(
        cfg,
        &artifacts.checkpoint_path,
        &images,
        Some(&gt),
        &out.join("segmentation"),
    )?;
    let mean_f1 = results
        .iter()
        .filter_map(|r| r.report.as_ref())
        .map(|r| r.f1)
        .sum::<f64>()
        / results.len().max(1) as f64;
    println!(
        "inference: {} images, mean F1 {mean_f1:.4}, report {}",
        results.len(),
        out.join("segmentation").join("report.csv").display()
    );
    for (i, s) in test_set.iter().enumerate() {
        let name = format!("test{i:04}");
        let overlay = out.join("segmentation").join(format!("{name}_gt_overlay.png"));
        data_err!(save_overlay(&s.observed, &s.mask, &overlay))?;
    }
    Ok(())
}
