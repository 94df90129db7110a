//! Acceptance suite: one test per criterion, each printing a PASS/FAIL
//! line with the measured values (run with `--nocapture` to see them on
//! success).

mod oracles;

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use tubuleseg_core::augment::{
    augment_pair, flip_horizontal, grid_to_field, rotate90, sample_control_grid,
    AugmentationConfig,
};
use tubuleseg_core::imagedata::{BinaryMask, GrayImage, ImageStack, InstanceMask};
use tubuleseg_core::inhomogeneity::{correct_volume, estimate_field, CorrectionConfig};
use tubuleseg_core::metrics::{
    dice, evaluate, f1_score, hausdorff, match_objects, object_dice, object_hausdorff,
    pixel_metrics, MetricsError,
};
use tubuleseg_core::network::{
    batchnorm_backward, batchnorm_forward_train, conv2d_backward, conv2d_forward,
    maxpool2x2_backward, maxpool2x2_forward, maxunpool2x2, maxunpool2x2_backward, relu_backward,
    relu_forward, softmax_cross_entropy, train, BnParams, ConvParams, ModelConfig, ModelParams,
    Scalar, Tensor4, TrainConfig,
};
use tubuleseg_core::phantom::{generate_dataset, generate_phantom, PhantomConfig};
use tubuleseg_core::pipeline::{
    run_inference_stage, run_training_stage, PipelineConfig, Scale, TrainingPair,
};
use tubuleseg_core::postprocess::{
    connected_components, fill_holes, postprocess, remove_small, PostprocessConfig,
    PostprocessInput,
};
use tubuleseg_core::seed::stream_rng;

fn report(n: u32, name: &str, pass: bool, details: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    println!("criterion {n} ({name}): {status} ({details})");
    assert!(pass, "criterion {n} ({name}) failed: {details}");
}

// ---------------------------------------------------------------------
// Finite-difference machinery (f64, central differences).

const FD_STEP: f64 = 1e-5;

fn fd_grad(mut eval: impl FnMut(&[f64]) -> f64, base: &[f64]) -> Vec<f64> {
    let mut work = base.to_vec();
    (0..work.len())
        .map(|i| {
            let orig = work[i];
            work[i] = orig + FD_STEP;
            let fp = eval(&work);
            work[i] = orig - FD_STEP;
            let fm = eval(&work);
            work[i] = orig;
            (fp - fm) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Tensor-scale relative error: max |a - b| / max(inf-norms, 1e-6).
///
/// The 1e-6 floor sits above the central-difference noise floor
/// (machine epsilon times the objective, divided by 2h ~ 1e-11 here):
/// tensors whose true gradient is identically zero - e.g. biases of
/// convolutions feeding batch norm, which cancels any constant shift -
/// would otherwise compare rounding noise against zero.
fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(1e-6f64, |m, &v| m.max(v.abs()));
    analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (&a, &b)| m.max((a - b).abs() / scale))
}

fn random_tensor(shape: (usize, usize, usize, usize), std: f64, rng: &mut ChaCha8Rng) -> Tensor4<f64> {
    let normal = Normal::new(0.0, std).unwrap();
    let (n, c, h, w) = shape;
    let data = (0..n * c * h * w).map(|_| normal.sample(rng)).collect();
    Tensor4::from_vec(n, c, h, w, data)
}

/// Random values bounded away from zero, for layers with a kink there.
fn random_tensor_nonzero(shape: (usize, usize, usize, usize), rng: &mut ChaCha8Rng) -> Tensor4<f64> {
    let (n, c, h, w) = shape;
    let data = (0..n * c * h * w)
        .map(|_| {
            let mag = rng.random_range(0.05..1.0);
            if rng.random_range(0..2) == 0 {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor4::from_vec(n, c, h, w, data)
}

fn project(out: &Tensor4<f64>, r: &Tensor4<f64>) -> f64 {
    out.data().iter().zip(r.data()).map(|(&a, &b)| a * b).sum()
}

// ---------------------------------------------------------------------

#[test]
fn criterion_1_gradient_correctness() {
    let started = Instant::now();
    let mut rng = stream_rng(0xACCE97, 1);
    let mut worst_layer = 0.0f64;

    // conv: input, weight, and bias gradients.
    {
        let x = random_tensor((2, 2, 5, 4), 1.0, &mut rng);
        let p: ConvParams<f64> = ConvParams::init(2, 3, &mut rng);
        let r = random_tensor((2, 3, 5, 4), 1.0, &mut rng);
        let (gx, grads) = conv2d_backward(&x, &p, &r).unwrap();
        let e_x = rel_err(
            gx.data(),
            &fd_grad(
                |v| {
                    let xt = Tensor4::from_vec(2, 2, 5, 4, v.to_vec());
                    project(&conv2d_forward(&xt, &p).unwrap(), &r)
                },
                x.data(),
            ),
        );
        let e_w = rel_err(
            &grads.weight,
            &fd_grad(
                |v| {
                    let pt = ConvParams {
                        weight: v.to_vec(),
                        ..p.clone()
                    };
                    project(&conv2d_forward(&x, &pt).unwrap(), &r)
                },
                &p.weight,
            ),
        );
        let e_b = rel_err(
            &grads.bias,
            &fd_grad(
                |v| {
                    let pt = ConvParams {
                        bias: v.to_vec(),
                        ..p.clone()
                    };
                    project(&conv2d_forward(&x, &pt).unwrap(), &r)
                },
                &p.bias,
            ),
        );
        for e in [e_x, e_w, e_b] {
            assert!(e < 1e-5, "conv rel err {e}");
            worst_layer = worst_layer.max(e);
        }
    }

    // batch norm (train mode): gradients flow through the statistics.
    {
        let x = random_tensor((2, 3, 4, 4), 1.0, &mut rng);
        let mut p: BnParams<f64> = BnParams::new(3);
        for ci in 0..3 {
            p.gamma[ci] = 0.5 + 0.3 * ci as f64;
            p.beta[ci] = -0.2 + 0.1 * ci as f64;
        }
        let r = random_tensor((2, 3, 4, 4), 1.0, &mut rng);
        let (_, cache) = batchnorm_forward_train(&x, &p).unwrap();
        let (gx, grads) = batchnorm_backward(&cache, &p, &r).unwrap();
        let e_x = rel_err(
            gx.data(),
            &fd_grad(
                |v| {
                    let xt = Tensor4::from_vec(2, 3, 4, 4, v.to_vec());
                    project(&batchnorm_forward_train(&xt, &p).unwrap().0, &r)
                },
                x.data(),
            ),
        );
        let e_g = rel_err(
            &grads.gamma,
            &fd_grad(
                |v| {
                    let pt = BnParams {
                        gamma: v.to_vec(),
                        ..p.clone()
                    };
                    project(&batchnorm_forward_train(&x, &pt).unwrap().0, &r)
                },
                &p.gamma,
            ),
        );
        let e_b = rel_err(
            &grads.beta,
            &fd_grad(
                |v| {
                    let pt = BnParams {
                        beta: v.to_vec(),
                        ..p.clone()
                    };
                    project(&batchnorm_forward_train(&x, &pt).unwrap().0, &r)
                },
                &p.beta,
            ),
        );
        for e in [e_x, e_g, e_b] {
            assert!(e < 1e-5, "batchnorm rel err {e}");
            worst_layer = worst_layer.max(e);
        }
    }

    // relu.
    {
        let x = random_tensor_nonzero((1, 2, 4, 4), &mut rng);
        let r = random_tensor((1, 2, 4, 4), 1.0, &mut rng);
        let y = relu_forward(&x);
        let gx = relu_backward(&y, &r);
        let e = rel_err(
            gx.data(),
            &fd_grad(
                |v| {
                    let xt = Tensor4::from_vec(1, 2, 4, 4, v.to_vec());
                    project(&relu_forward(&xt), &r)
                },
                x.data(),
            ),
        );
        assert!(e < 1e-6, "relu rel err {e}");
        worst_layer = worst_layer.max(e);
    }

    // max pooling on a random 1x1x4x4.
    {
        let x = random_tensor((1, 1, 4, 4), 1.0, &mut rng);
        let r = random_tensor((1, 1, 2, 2), 1.0, &mut rng);
        let (_, idx) = maxpool2x2_forward(&x).unwrap();
        let gx = maxpool2x2_backward(&idx, &r).unwrap();
        let e = rel_err(
            gx.data(),
            &fd_grad(
                |v| {
                    let xt = Tensor4::from_vec(1, 1, 4, 4, v.to_vec());
                    project(&maxpool2x2_forward(&xt).unwrap().0, &r)
                },
                x.data(),
            ),
        );
        assert!(e < 1e-6, "maxpool rel err {e}");
        worst_layer = worst_layer.max(e);
    }

    // max unpooling with indices recorded from a pooling pass.
    {
        let src = random_tensor((1, 2, 4, 4), 1.0, &mut rng);
        let (pooled, idx) = maxpool2x2_forward(&src).unwrap();
        let r = random_tensor((1, 2, 4, 4), 1.0, &mut rng);
        let gx = maxunpool2x2_backward(&idx, &r).unwrap();
        let e = rel_err(
            gx.data(),
            &fd_grad(
                |v| {
                    let xt = Tensor4::from_vec(1, 2, 2, 2, v.to_vec());
                    project(&maxunpool2x2(&xt, &idx).unwrap(), &r)
                },
                pooled.data(),
            ),
        );
        assert!(e < 1e-6, "maxunpool rel err {e}");
        worst_layer = worst_layer.max(e);
    }

    // softmax cross-entropy against its loss value.
    {
        let logits = random_tensor((1, 2, 3, 3), 2.0, &mut rng);
        let target = BinaryMask::from_fn(3, 3, |y, x| (y + x) % 2 == 0);
        let (_, grad) = softmax_cross_entropy(&logits, &[&target]).unwrap();
        let e = rel_err(
            grad.data(),
            &fd_grad(
                |v| {
                    let lt = Tensor4::from_vec(1, 2, 3, 3, v.to_vec());
                    softmax_cross_entropy(&lt, &[&target]).unwrap().0
                },
                logits.data(),
            ),
        );
        assert!(e < 1e-6, "softmax-cross-entropy rel err {e}");
        worst_layer = worst_layer.max(e);
    }

    // Full miniature model: every trainable parameter against the loss.
    let mut model: ModelParams<f64> = ModelParams::init(ModelConfig::tiny(), 0xF00D).unwrap();
    let image = GrayImage::from_fn(8, 8, |y, x| ((y * 13 + x * 7) % 11) as f32 / 11.0);
    let target = BinaryMask::from_fn(8, 8, |y, x| y >= 3 && x < 5);
    let x = Tensor4::<f64>::from_gray(&image);
    let (_, cache) = model.forward_train(&x).unwrap();
    let (_, grads) = model.backward(cache, &[&target]).unwrap();
    let analytic: Vec<Vec<f64>> = grads.flat().into_iter().cloned().collect();
    let mut worst_model = 0.0f64;
    let n_tensors = analytic.len();
    let mut param_count = 0usize;
    for t_idx in 0..n_tensors {
        let len = analytic[t_idx].len();
        param_count += len;
        let mut numeric = vec![0.0f64; len];
        for i in 0..len {
            let orig = model.trainable_mut()[t_idx][i];
            model.trainable_mut()[t_idx][i] = orig + FD_STEP;
            let (_, cp) = model.forward_train(&x).unwrap();
            let fp = model.loss(&cp, &[&target]).unwrap();
            model.trainable_mut()[t_idx][i] = orig - FD_STEP;
            let (_, cm) = model.forward_train(&x).unwrap();
            let fm = model.loss(&cm, &[&target]).unwrap();
            model.trainable_mut()[t_idx][i] = orig;
            numeric[i] = (fp - fm) / (2.0 * FD_STEP);
        }
        worst_model = worst_model.max(rel_err(&analytic[t_idx], &numeric));
    }

    let elapsed = started.elapsed();
    let pass = worst_layer < 1e-5 && worst_model < 1e-4 && elapsed.as_secs() < 60;
    report(
        1,
        "gradient correctness",
        pass,
        &format!(
            "worst per-layer rel err {worst_layer:.2e}, full model ({param_count} params) {worst_model:.2e}, {elapsed:.1?}"
        ),
    );
}

#[test]
fn criterion_2_architecture_trace() {
    let full: ModelParams<f32> = ModelParams::init(ModelConfig::full(), 1).unwrap();
    let x = Tensor4::<f32>::zeros(1, 1, 512, 512);
    let (probs, cache) = full.forward_train(&x).unwrap();
    let e2 = cache.enc[1].conv1_in.shape();
    let d1 = cache.dec[0].conv1_in.shape();
    let out = probs.shape();
    let full_ok =
        e2 == (1, 16, 256, 256) && d1 == (1, 256, 32, 32) && out == (1, 2, 512, 512);

    let desk: ModelParams<f32> = ModelParams::init(ModelConfig::desk(), 1).unwrap();
    let xd = Tensor4::<f32>::zeros(1, 1, 64, 64);
    let (probs_d, cache_d) = desk.forward_train(&xd).unwrap();
    let desk_ok = cache_d.enc[1].conv1_in.shape() == (1, 8, 32, 32)
        && cache_d.dec[0].conv1_in.shape() == (1, 128, 4, 4)
        && probs_d.shape() == (1, 2, 64, 64);

    report(
        2,
        "architecture trace",
        full_ok && desk_ok,
        &format!(
            "512px: E2 in {e2:?}, D1 in {d1:?}, out {out:?}; 64px desk trace {}",
            if desk_ok { "matches" } else { "differs" }
        ),
    );
}

#[test]
fn criterion_3_augmentation_count_and_bounds() {
    // 5 pairs x 100 deformations x 8 variants = 4000.
    let mut total = 0usize;
    for i in 0..5u64 {
        let img = GrayImage::from_fn(32, 32, |y, x| ((y * 31 + x * 17 + i as usize) % 23) as f32 / 23.0);
        let gt = InstanceMask::from_fn(32, 32, |y, x| u32::from(y / 8 == (x / 8 + i as usize) % 4));
        let cfg = AugmentationConfig {
            n_deformations: 100,
            rng_seed: 1000 + i,
            ..AugmentationConfig::default()
        };
        total += augment_pair(&img, &gt, &cfg).unwrap().len();
    }
    let count_ok = total == 4000;

    // Group identities, bitwise.
    let img = GrayImage::from_fn(16, 16, |y, x| ((y * 5 + x * 3) % 7) as f32 / 7.0);
    let mut r = img.clone();
    for _ in 0..4 {
        r = rotate90(&r, 1).unwrap();
    }
    let rotations_ok = r == img;
    let flips_ok = flip_horizontal(&flip_horizontal(&img)) == img;

    // Displacement bound over >= 1000 random grids.
    let mut max_disp = 0.0f32;
    for stream in 0..1000u64 {
        let mut rng = stream_rng(0xD15B, stream);
        let grid = sample_control_grid(64, 64, 64, 15.0, &mut rng);
        let field = grid_to_field(&grid, 64, 64);
        max_disp = max_disp.max(field.max_norm());
    }
    let bound_ok = max_disp <= 15.0 + 1e-4;

    report(
        3,
        "augmentation count and bounds",
        count_ok && rotations_ok && flips_ok && bound_ok,
        &format!(
            "5 pairs x 100 deformations -> {total} pairs; group identities bitwise {}; max |disp| {max_disp:.3} over 1000 grids",
            rotations_ok && flips_ok
        ),
    );
}

#[test]
fn criterion_4_inhomogeneity_recovery() {
    let started = Instant::now();
    let cfg = PhantomConfig {
        noise_sigma: 0.0,
        ..PhantomConfig::default()
    };
    let correction = CorrectionConfig::default();
    let mut worst_ratio = 0.0f64;
    let mut worst_mean_dev = 0.0f64;
    for i in 0..50u64 {
        let s = generate_phantom(&cfg, &mut stream_rng(4100 + i, 0)).unwrap();
        let stack = ImageStack::single(s.observed.clone());
        let field = estimate_field(&stack, &correction).unwrap();
        worst_mean_dev = worst_mean_dev.max((field.mean() - 1.0).abs());
        let corrected = correct_volume(&stack, &correction).unwrap();
        let ratio = corrected.plane(0).rmse(&s.clean) / s.observed.rmse(&s.clean);
        worst_ratio = worst_ratio.max(ratio);
    }
    let elapsed = started.elapsed();
    let pass = worst_ratio <= 0.5 && worst_mean_dev <= 1e-6 && elapsed.as_secs() < 60;
    report(
        4,
        "inhomogeneity recovery",
        pass,
        &format!(
            "50 phantoms: worst corrected/uncorrected RMSE ratio {worst_ratio:.3} (<= 0.5), worst |field mean - 1| {worst_mean_dev:.1e}, {elapsed:.1?}"
        ),
    );
}

/// Random instance masks: label the 4-components of random-density noise.
fn random_instance_mask(rng: &mut ChaCha8Rng, max_side: usize) -> InstanceMask {
    let h = rng.random_range(2..=max_side);
    let w = rng.random_range(2..=max_side);
    let density: f64 = rng.random_range(0.2..0.7);
    let mask = BinaryMask::from_fn(h, w, |_, _| rng.random_range(0.0..1.0) < density);
    connected_components(&mask)
}

#[test]
fn criterion_5_metric_oracle_equivalence() {
    let mut rng = stream_rng(0x0E7A1C, 0);
    let mut checked = 0usize;
    let mut worst_od = 0.0f64;
    let mut worst_oh = 0.0f64;
    let mut hausdorff_exact = true;
    for _ in 0..500 {
        let seg = random_instance_mask(&mut rng, 32);
        let (h, w) = seg.shape();
        let density: f64 = rng.random_range(0.2..0.7);
        let gt = connected_components(&BinaryMask::from_fn(h, w, |_, _| {
            rng.random_range(0.0..1.0) < density
        }));

        // Pixel metrics against a direct recount.
        let pm = pixel_metrics(&seg.binarize(), &gt.binarize()).unwrap();
        let mut counts = [0usize; 4];
        for (s, g) in seg.binarize().as_slice().iter().zip(gt.binarize().as_slice()) {
            match (s, g) {
                (1, 1) => counts[0] += 1,
                (0, 0) => counts[1] += 1,
                (1, 0) => counts[2] += 1,
                _ => counts[3] += 1,
            }
        }
        assert_eq!(
            (pm.tp, pm.tn, pm.fp, pm.fn_),
            (counts[0], counts[1], counts[2], counts[3])
        );
        assert!((pm.pa + pm.type1 + pm.type2 - 1.0).abs() < 1e-12);

        // Object matching and F1.
        let m = match_objects(&seg, &gt).unwrap();
        let om = oracles::oracle_match(&seg, &gt);
        assert_eq!((m.tp, m.fp, m.fn_), (om.tp, om.fp, om.fn_));
        let (p, r, f1) = f1_score(&m);
        let (op, or_, of1) = oracles::oracle_f1(&om);
        assert!((p - op).abs() < 1e-12 && (r - or_).abs() < 1e-12 && (f1 - of1).abs() < 1e-12);

        // Object Dice.
        let od = object_dice(&seg, &gt).unwrap();
        let ood = oracles::oracle_object_dice(&seg, &gt);
        worst_od = worst_od.max((od.value - ood).abs());

        // Plain Hausdorff on the binarized masks (skipping empty ones).
        if seg.max_label() > 0 && gt.max_label() > 0 {
            let h_impl = hausdorff(&seg.binarize(), &gt.binarize()).unwrap();
            let h_oracle = oracles::oracle_hausdorff_masks(&seg.binarize(), &gt.binarize());
            hausdorff_exact &= h_impl == h_oracle;

            let oh = object_hausdorff(&seg, &gt).unwrap();
            let ooh = oracles::oracle_object_hausdorff(&seg, &gt).unwrap();
            worst_oh = worst_oh.max((oh - ooh).abs());
        }
        checked += 1;
    }

    // Degenerate conventions.
    let empty = InstanceMask::zeros(8, 8);
    let something = InstanceMask::from_fn(8, 8, |y, x| u32::from(y < 4 && x < 4));
    let m = match_objects(&empty, &something).unwrap();
    let conventions_ok = f1_score(&m) == (0.0, 0.0, 0.0)
        && object_dice(&empty, &something).unwrap().degenerate
        && object_dice(&empty, &something).unwrap().value == 0.0
        && matches!(
            object_hausdorff(&empty, &something),
            Err(MetricsError::EmptyMask)
        )
        && matches!(
            dice(&BinaryMask::zeros(4, 4), &BinaryMask::zeros(4, 4)),
            Err(MetricsError::BothEmpty)
        );
    // Exactly 50% coverage counts as a hit.
    let gt_half = InstanceMask::from_fn(8, 8, |y, _| u32::from(y < 4));
    let seg_half = InstanceMask::from_fn(8, 8, |y, x| u32::from(y < 4 && x < 4));
    let half = match_objects(&seg_half, &gt_half).unwrap();
    let boundary_ok = (half.tp, half.fp, half.fn_) == (1, 0, 0);

    let pass = checked >= 500
        && worst_od < 1e-12
        && worst_oh < 1e-12
        && hausdorff_exact
        && conventions_ok
        && boundary_ok;
    report(
        5,
        "metric oracle equivalence",
        pass,
        &format!(
            "{checked} random pairs: |OD - oracle| <= {worst_od:.1e}, |OH - oracle| <= {worst_oh:.1e}, hausdorff exact {hausdorff_exact}, degenerate conventions {conventions_ok}, 50% boundary {boundary_ok}"
        ),
    );
}

#[test]
fn criterion_6_desk_scale_end_to_end() {
    let started = Instant::now();
    let phantom_cfg = PhantomConfig::desk();
    let correction = CorrectionConfig::default();

    // Five training phantoms, corrected then augmented x32 each.
    let train_samples = generate_dataset(5, &phantom_cfg, 42).unwrap();
    let corrected: Vec<(GrayImage, InstanceMask)> = train_samples
        .iter()
        .map(|s| {
            let stack = ImageStack::single(s.observed.clone());
            (
                correct_volume(&stack, &correction)
                    .unwrap()
                    .into_planes()
                    .remove(0),
                s.mask.clone(),
            )
        })
        .collect();
    let mut dataset: Vec<(GrayImage, BinaryMask)> = Vec::new();
    for (i, (img, mask)) in corrected.iter().enumerate() {
        let aug = AugmentationConfig {
            n_deformations: 4,
            rng_seed: 9000 + i as u64,
            ..AugmentationConfig::default()
        };
        for v in augment_pair(img, mask, &aug).unwrap() {
            dataset.push((v.image, v.mask.binarize()));
        }
    }

    // 12 epochs x 160 pairs = 1920 iterations.
    let model: ModelParams<f32> = ModelParams::init(ModelConfig::desk(), 7).unwrap();
    let train_cfg = TrainConfig {
        learning_rate: 0.1,
        momentum: 0.9,
        epochs: 12,
        batch_size: 1,
        rng_seed: 5,
    };
    let out = train(model, &dataset, &train_cfg).unwrap();
    let iterations = out.loss_curve.len();
    assert!(iterations <= 2000, "trained {iterations} iterations");

    // Loss decreases across 100-iteration windows (5% slack per window).
    let window_means: Vec<f64> = out
        .loss_curve
        .chunks(100)
        .map(|w| w.iter().sum::<f64>() / w.len() as f64)
        .collect();
    let windows_ok = window_means
        .windows(2)
        .all(|p| p[1] <= p[0] * 1.05 + 1e-4)
        && *window_means.last().unwrap() < 0.5 * window_means[0];

    // (a) training pixel accuracy pooled over the training set.
    let mut correct_px = 0usize;
    let mut total_px = 0usize;
    for (img, mask) in &dataset {
        let probs = tubuleseg_core::network::predict_probabilities(&out.model, img).unwrap();
        let pm = pixel_metrics(&probs.threshold(0.5), mask).unwrap();
        correct_px += pm.tp + pm.tn;
        total_px += pm.total;
    }
    let train_acc = correct_px as f64 / total_px as f64;

    // (b) 20 held-out phantoms. Small-object removal at 20 px: the
    // smallest phantom instance is ~50 px, so this strips spurious
    // specks without touching real tubules.
    let held = generate_dataset(20, &phantom_cfg, 31337).unwrap();
    let pp = PostprocessConfig {
        gamma: 20,
        ..PostprocessConfig::default()
    };
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    let mut od_sum = 0.0f64;
    let mut oh_sum = 0.0f64;
    for s in &held {
        let stack = ImageStack::single(s.observed.clone());
        let corrected_img = correct_volume(&stack, &correction)
            .unwrap()
            .into_planes()
            .remove(0);
        let probs =
            tubuleseg_core::network::predict_probabilities(&out.model, &corrected_img).unwrap();
        let inst = postprocess(PostprocessInput::Probabilities(&probs), &pp);
        let rep = evaluate(&inst, &s.mask).unwrap();
        od_sum += rep.object_dice;
        oh_sum += rep.object_hausdorff;
        let m = match_objects(&inst, &s.mask).unwrap();
        tp += m.tp;
        fp += m.fp;
        fn_ += m.fn_;
    }
    let precision = tp as f64 / (tp + fp).max(1) as f64;
    let recall = tp as f64 / (tp + fn_).max(1) as f64;
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    let od = od_sum / held.len() as f64;
    let oh = oh_sum / held.len() as f64;

    let elapsed = started.elapsed();
    let pass = train_acc >= 0.99
        && f1 >= 0.90
        && od >= 0.85
        && oh <= 3.0
        && windows_ok
        && elapsed.as_secs() <= 900;
    report(
        6,
        "desk-scale end-to-end",
        pass,
        &format!(
            "train acc {train_acc:.4} (>= 0.99) in {iterations} iters; held-out F1 {f1:.4} (>= 0.90), OD {od:.4} (>= 0.85), OH {oh:.2}px (<= 3); loss windows decreasing {windows_ok}; {elapsed:.0?} (<= 900s)"
        ),
    );
}

#[test]
fn criterion_7_postprocessing_laws() {
    // Strict-inequality boundary at gamma.
    let mut strict_ok = true;
    {
        let m = BinaryMask::from_fn(25, 10, |y, x| {
            (y < 11 && x < 9 && y * 9 + x < 99) || (y >= 14 && y < 24)
        });
        let inst = connected_components(&m);
        let cleaned = remove_small(&inst, 100);
        strict_ok &= cleaned.label_sizes() == vec![(1, 100)];
        strict_ok &= remove_small(&inst, 0) == inst;
        let again = remove_small(&cleaned, 100);
        strict_ok &= again == cleaned;
    }

    // fill_holes laws on >= 500 random masks.
    let mut rng = stream_rng(0x9057, 0);
    let mut laws_ok = true;
    for _ in 0..500 {
        let h = rng.random_range(2..24);
        let w = rng.random_range(2..24);
        let density: f64 = rng.random_range(0.3..0.8);
        let a = BinaryMask::from_fn(h, w, |_, _| rng.random_range(0.0..1.0) < density);
        // b is a superset of a.
        let b = BinaryMask::from_fn(h, w, |y, x| {
            a.is_set(y, x) || rng.random_range(0.0..1.0) < 0.15
        });
        let fa = fill_holes(&a);
        let fb = fill_holes(&b);
        // Extensive.
        laws_ok &= a
            .as_slice()
            .iter()
            .zip(fa.as_slice())
            .all(|(&x, &y)| x <= y);
        // Idempotent.
        laws_ok &= fill_holes(&fa) == fa;
        // Monotone.
        laws_ok &= fa
            .as_slice()
            .iter()
            .zip(fb.as_slice())
            .all(|(&x, &y)| x <= y);
    }

    // Components equal the union-find oracle as partitions, and labels
    // are first-encounter ordered.
    let mut comp_ok = true;
    for _ in 0..300 {
        let h = rng.random_range(2..24);
        let w = rng.random_range(2..24);
        let density: f64 = rng.random_range(0.2..0.8);
        let m = BinaryMask::from_fn(h, w, |_, _| rng.random_range(0.0..1.0) < density);
        let inst = connected_components(&m);
        let oracle = oracles::oracle_components(&m);
        comp_ok &= oracles::same_partition(inst.as_slice(), &oracle);
        comp_ok &= inst.is_compact();
    }

    let pass = strict_ok && laws_ok && comp_ok;
    report(
        7,
        "postprocessing laws",
        pass,
        &format!(
            "gamma boundary strict {strict_ok}; fill_holes extensive/idempotent/monotone over 500 masks {laws_ok}; components match union-find over 300 masks {comp_ok}"
        ),
    );
}

#[test]
fn criterion_8_pipeline_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig {
        master_seed: 1234,
        augment_n: 1,
        train_lr: 0.05,
        train_epochs: 2,
        scale: Scale::Desk,
        postprocess_gamma: Some(8),
        ..PipelineConfig::default()
    };
    let phantom_cfg = PhantomConfig {
        size: 32,
        n_tubules: (2, 3),
        axis_range: (8.0, 14.0),
        ..PhantomConfig::desk()
    };
    let samples = generate_dataset(3, &phantom_cfg, 777).unwrap();
    let pairs: Vec<TrainingPair> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| TrainingPair {
            name: format!("p{i}"),
            image: s.observed.clone(),
            mask: s.mask.clone(),
        })
        .collect();
    let test_images: Vec<(String, GrayImage)> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| (format!("t{i}"), s.observed.clone()))
        .collect();
    let test_gt: Vec<(String, InstanceMask)> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| (format!("t{i}"), s.mask.clone()))
        .collect();

    let mut artifacts: Vec<Vec<(String, Vec<u8>)>> = Vec::new();
    for run in 0..2 {
        let out = tmp.path().join(format!("run{run}"));
        let training = run_training_stage(&cfg, &pairs, &out.join("model")).unwrap();
        run_inference_stage(
            &cfg,
            &training.checkpoint_path,
            &test_images,
            Some(&test_gt),
            &out.join("seg"),
        )
        .unwrap();
        let mut files: Vec<(String, Vec<u8>)> = Vec::new();
        for name in ["model/model.ckpt", "model/loss_curve.csv", "seg/report.csv"] {
            files.push((name.into(), std::fs::read(out.join(name)).unwrap()));
        }
        for i in 0..test_images.len() {
            let name = format!("seg/t{i}_mask.png");
            files.push((name.clone(), std::fs::read(out.join(&name)).unwrap()));
        }
        artifacts.push(files);
    }
    let mut mismatch: Option<String> = None;
    for (a, b) in artifacts[0].iter().zip(&artifacts[1]) {
        if a.1 != b.1 {
            mismatch = Some(a.0.clone());
            break;
        }
    }
    let details = match &mismatch {
        None => format!(
            "two seeded runs byte-identical across checkpoint, loss curve, {} masks, report",
            test_images.len()
        ),
        Some(name) => format!("{name} differs between seeded runs"),
    };
    report(8, "pipeline determinism", mismatch.is_none(), &details);
}
