//! SGD training with classical momentum, plus thresholded prediction.

use rand::seq::SliceRandom;

use super::model::{ModelGrads, ModelParams};
use super::tensor::{Scalar, Tensor4};
use super::NetworkError;
use crate::imagedata::{BinaryMask, GrayImage};
use crate::seed::stream_rng;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    /// Each training sample forms its own batch.
    pub batch_size: usize,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            momentum: 0.9,
            epochs: 200,
            batch_size: 1,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NetworkError> {
        if !(self.learning_rate > 0.0) {
            return Err(NetworkError::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(NetworkError::InvalidConfig(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size != 1 {
            return Err(NetworkError::InvalidConfig(
                "batch size is fixed at 1".into(),
            ));
        }
        if self.epochs == 0 {
            return Err(NetworkError::InvalidConfig("epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// Classical momentum update: `v <- momentum * v - lr * g; p <- p + v`.
pub fn sgd_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &ModelGrads<T>,
    velocity: &mut ModelGrads<T>,
    learning_rate: f64,
    momentum: f64,
) {
    let lr = T::from_f64(learning_rate);
    let mu = T::from_f64(momentum);
    let p_tensors = params.trainable_mut();
    let g_tensors = grads.flat();
    let v_tensors = velocity.flat_mut();
    debug_assert_eq!(p_tensors.len(), g_tensors.len());
    debug_assert_eq!(p_tensors.len(), v_tensors.len());
    for ((p, g), v) in p_tensors.into_iter().zip(g_tensors).zip(v_tensors) {
        for ((pv, &gv), vv) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
            *vv = mu * *vv - lr * gv;
            *pv += *vv;
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: ModelParams<T>,
    /// Cross-entropy loss per iteration, in execution order.
    pub loss_curve: Vec<f64>,
}

/// Train on (image, mask) pairs. Every epoch visits each pair once in a
/// seeded random order; one pair forms one iteration. Deterministic for a
/// fixed seed and config.
pub fn train<T: Scalar>(
    mut model: ModelParams<T>,
    dataset: &[(GrayImage, BinaryMask)],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>, NetworkError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(NetworkError::EmptyDataset);
    }
    let (want_h, want_w) = dataset[0].0.shape();
    for (index, (img, mask)) in dataset.iter().enumerate() {
        let (got_h, got_w) = img.shape();
        if (got_h, got_w) != (want_h, want_w) || mask.shape() != (want_h, want_w) {
            return Err(NetworkError::HeterogeneousShapes {
                index,
                got_h,
                got_w,
                want_h,
                want_w,
            });
        }
    }
    let divisor = model.cfg.required_divisor();
    if want_h % divisor != 0 || want_w % divisor != 0 {
        return Err(NetworkError::IndivisibleInput {
            h: want_h,
            w: want_w,
            divisor,
        });
    }

    let inputs: Vec<Tensor4<T>> = dataset
        .iter()
        .map(|(img, _)| Tensor4::from_gray(img))
        .collect();
    let mut velocity = ModelGrads::zeros(&model);
    let mut loss_curve = Vec::with_capacity(cfg.epochs * dataset.len());
    let mut iteration = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut rng = stream_rng(cfg.rng_seed, epoch as u64);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        for &i in &order {
            let (_, cache) = model.forward_train(&inputs[i])?;
            model.apply_bn_updates(&cache);
            let (loss, grads) = model.backward(cache, &[&dataset[i].1])?;
            let loss = loss.to_f64();
            if !loss.is_finite() {
                return Err(NetworkError::NonFiniteLoss { iteration });
            }
            sgd_step(
                &mut model,
                &grads,
                &mut velocity,
                cfg.learning_rate,
                cfg.momentum,
            );
            loss_curve.push(loss);
            epoch_loss += loss;
            iteration += 1;
        }
        log::debug!(
            "epoch {epoch}: mean loss {:.6}",
            epoch_loss / dataset.len() as f64
        );
    }
    Ok(TrainOutcome { model, loss_curve })
}

/// Tubule-class probability map from an inference-mode forward pass.
pub fn predict_probabilities<T: Scalar>(
    model: &ModelParams<T>,
    img: &GrayImage,
) -> Result<GrayImage, NetworkError> {
    let x = Tensor4::from_gray(img);
    let probs = model.forward_infer(&x)?;
    Ok(probs.to_gray(0, 1))
}

/// Binary segmentation: tubule where the class probability strictly
/// exceeds 0.5 (a pixel at exactly 0.5 stays background).
pub fn predict<T: Scalar>(
    model: &ModelParams<T>,
    img: &GrayImage,
) -> Result<BinaryMask, NetworkError> {
    Ok(predict_probabilities(model, img)?.threshold(0.5))
}
