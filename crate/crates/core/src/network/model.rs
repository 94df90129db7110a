//! Model assembly: encoder/decoder blocks, the full forward and backward
//! passes, and parameter bookkeeping for the optimizer and checkpointing.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{
    batchnorm_backward, batchnorm_forward_infer, batchnorm_forward_train,
    batchnorm_update_running, conv2d_backward, conv2d_forward, maxpool2x2_backward,
    maxpool2x2_forward, maxunpool2x2, maxunpool2x2_backward, relu_backward, relu_forward,
    softmax2, softmax_cross_entropy, BnCache, BnGrads, BnParams, ConvGrads, ConvParams,
    PoolIndices,
};
use super::tensor::{Scalar, Tensor4};
use super::NetworkError;
use crate::imagedata::BinaryMask;
use crate::seed::fnv1a64;

/// Architecture shape: a stack of encoder stages that double the channel
/// width and halve the spatial size (the deepest stage does not pool),
/// mirrored by decoder stages that unpool with the recorded indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    /// Channel width after the first encoder stage.
    pub base_channels: usize,
    /// Number of encoder stages (equals decoder stages); stages - 1 pools.
    pub stages: usize,
    pub in_channels: usize,
    pub classes: usize,
}

impl ModelConfig {
    /// Full-scale configuration: 16 base channels, 5 stages, 512x512-class
    /// inputs.
    pub fn full() -> Self {
        Self {
            base_channels: 16,
            stages: 5,
            in_channels: 1,
            classes: 2,
        }
    }

    /// Desk-scale configuration: same topology at 8 base channels for
    /// 64x64 inputs.
    pub fn desk() -> Self {
        Self {
            base_channels: 8,
            stages: 5,
            in_channels: 1,
            classes: 2,
        }
    }

    /// Miniature configuration for finite-difference verification: 2 base
    /// channels, 3 stages, accepts 8x8 inputs.
    pub fn tiny() -> Self {
        Self {
            base_channels: 2,
            stages: 3,
            in_channels: 1,
            classes: 2,
        }
    }

    /// Width of encoder stage `k` (0-based): base * 2^k.
    fn stage_channels(&self, k: usize) -> usize {
        self.base_channels << k
    }

    /// Spatial sizes must divide by this (one halving per pooled stage).
    pub fn required_divisor(&self) -> usize {
        1 << (self.stages - 1)
    }

    /// Canonical description of the channel plan; its hash identifies the
    /// architecture in checkpoints.
    pub fn channel_plan(&self) -> String {
        let enc: Vec<String> = (0..self.stages)
            .map(|k| self.stage_channels(k).to_string())
            .collect();
        let dec: Vec<String> = (0..self.stages)
            .map(|j| {
                if j + 1 < self.stages {
                    self.stage_channels(self.stages - 2 - j).to_string()
                } else {
                    format!("{}-{}", self.stage_channels(0), self.classes)
                }
            })
            .collect();
        format!(
            "in={};enc={};dec={};classes={}",
            self.in_channels,
            enc.join(","),
            dec.join(","),
            self.classes
        )
    }

    pub fn arch_hash(&self) -> u64 {
        fnv1a64(self.channel_plan().as_bytes())
    }

    fn validate(&self) -> Result<(), NetworkError> {
        if self.stages < 2 || self.base_channels == 0 || self.in_channels == 0 || self.classes != 2
        {
            return Err(NetworkError::InvalidConfig(format!(
                "unsupported model config {self:?}"
            )));
        }
        Ok(())
    }
}

/// Two conv+bn+relu rounds, then 2x2 pooling everywhere but the deepest
/// stage.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock<T> {
    pub conv1: ConvParams<T>,
    pub bn1: BnParams<T>,
    pub conv2: ConvParams<T>,
    pub bn2: BnParams<T>,
    pub pooled: bool,
}

/// Optional unpooling, one conv+bn+relu round, then either a second
/// conv+bn+relu round or (in the last block) the bare classifier conv.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderBlock<T> {
    pub unpool: bool,
    pub conv1: ConvParams<T>,
    pub bn1: BnParams<T>,
    pub conv2: ConvParams<T>,
    /// `None` marks the classifier conv of the final block (no bn/relu).
    pub bn2: Option<BnParams<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub cfg: ModelConfig,
    pub encoders: Vec<EncoderBlock<T>>,
    pub decoders: Vec<DecoderBlock<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Seeded initialization: He-scaled conv weights, zero biases, unit
    /// batch-norm scale.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self, NetworkError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = cfg.stages;
        let mut encoders = Vec::with_capacity(s);
        let mut in_c = cfg.in_channels;
        for k in 0..s {
            let out_c = cfg.stage_channels(k);
            encoders.push(EncoderBlock {
                conv1: ConvParams::init(in_c, out_c, &mut rng),
                bn1: BnParams::new(out_c),
                conv2: ConvParams::init(out_c, out_c, &mut rng),
                bn2: BnParams::new(out_c),
                pooled: k + 1 < s,
            });
            in_c = out_c;
        }
        let mut decoders = Vec::with_capacity(s);
        for j in 0..s {
            let last = j + 1 == s;
            let out_c = if last {
                cfg.stage_channels(0)
            } else {
                cfg.stage_channels(s - 2 - j)
            };
            if last {
                decoders.push(DecoderBlock {
                    unpool: true,
                    conv1: ConvParams::init(in_c, out_c, &mut rng),
                    bn1: BnParams::new(out_c),
                    conv2: ConvParams::init(out_c, cfg.classes, &mut rng),
                    bn2: None,
                });
            } else {
                decoders.push(DecoderBlock {
                    unpool: j > 0,
                    conv1: ConvParams::init(in_c, out_c, &mut rng),
                    bn1: BnParams::new(out_c),
                    conv2: ConvParams::init(out_c, out_c, &mut rng),
                    bn2: Some(BnParams::new(out_c)),
                });
            }
            in_c = out_c;
        }
        Ok(Self {
            cfg,
            encoders,
            decoders,
        })
    }

    pub fn arch_hash(&self) -> u64 {
        self.cfg.arch_hash()
    }

    /// True once every batch-norm layer has seen a training step.
    pub fn bn_initialized(&self) -> bool {
        self.encoders
            .iter()
            .flat_map(|e| [&e.bn1, &e.bn2])
            .chain(self.decoders.iter().map(|d| &d.bn1))
            .chain(self.decoders.iter().filter_map(|d| d.bn2.as_ref()))
            .all(|bn| bn.initialized)
    }

    fn check_input(&self, x: &Tensor4<T>) -> Result<(), NetworkError> {
        if x.c != self.cfg.in_channels {
            return Err(NetworkError::ChannelMismatch {
                expected: self.cfg.in_channels,
                got: x.c,
            });
        }
        let d = self.cfg.required_divisor();
        if x.h % d != 0 || x.w % d != 0 || x.h == 0 || x.w == 0 {
            return Err(NetworkError::IndivisibleInput {
                h: x.h,
                w: x.w,
                divisor: d,
            });
        }
        Ok(())
    }

    /// Training-mode forward pass. Returns per-pixel class probabilities
    /// along with the cache consumed by [`ModelParams::backward`].
    pub fn forward_train(&self, x: &Tensor4<T>) -> Result<(Tensor4<T>, ModelCache<T>), NetworkError> {
        self.check_input(x)?;
        let mut enc_caches = Vec::with_capacity(self.encoders.len());
        let mut indices: Vec<PoolIndices> = Vec::new();
        let mut cur = x.clone();
        for enc in &self.encoders {
            let conv1_in = cur;
            let a = conv2d_forward(&conv1_in, &enc.conv1)?;
            let (b, bn1) = batchnorm_forward_train(&a, &enc.bn1)?;
            let conv2_in = relu_forward(&b);
            let d = conv2d_forward(&conv2_in, &enc.conv2)?;
            let (e, bn2) = batchnorm_forward_train(&d, &enc.bn2)?;
            let relu2_out = relu_forward(&e);
            let pool_idx = if enc.pooled {
                let (pooled, idx) = maxpool2x2_forward(&relu2_out)?;
                indices.push(idx.clone());
                cur = pooled;
                Some(idx)
            } else {
                cur = relu2_out.clone();
                None
            };
            enc_caches.push(EncBlockCache {
                conv1_in,
                bn1,
                conv2_in,
                bn2,
                relu2_out,
                pool_idx,
            });
        }

        let mut dec_caches = Vec::with_capacity(self.decoders.len());
        for dec in &self.decoders {
            let (conv1_in, used_idx) = if dec.unpool {
                let idx = indices.pop().expect("one recorded index per unpool");
                (maxunpool2x2(&cur, &idx)?, Some(idx))
            } else {
                (cur, None)
            };
            let a = conv2d_forward(&conv1_in, &dec.conv1)?;
            let (b, bn1) = batchnorm_forward_train(&a, &dec.bn1)?;
            let conv2_in = relu_forward(&b);
            let d = conv2d_forward(&conv2_in, &dec.conv2)?;
            let (bn2, relu2_out, next) = match &dec.bn2 {
                Some(bn2p) => {
                    let (e, bn2c) = batchnorm_forward_train(&d, bn2p)?;
                    let r = relu_forward(&e);
                    (Some(bn2c), Some(r.clone()), r)
                }
                None => (None, None, d),
            };
            cur = next;
            dec_caches.push(DecBlockCache {
                unpool_idx: used_idx,
                conv1_in,
                bn1,
                conv2_in,
                bn2,
                relu2_out,
            });
        }

        let logits = cur;
        let probs = softmax2(&logits)?;
        probs.debug_check_finite("softmax");
        Ok((
            probs.clone(),
            ModelCache {
                enc: enc_caches,
                dec: dec_caches,
                logits,
                probs,
            },
        ))
    }

    /// Inference-mode forward pass using batch-norm running statistics.
    pub fn forward_infer(&self, x: &Tensor4<T>) -> Result<Tensor4<T>, NetworkError> {
        self.check_input(x)?;
        if !self.bn_initialized() {
            return Err(NetworkError::RunningStatsUnset);
        }
        let mut indices: Vec<PoolIndices> = Vec::new();
        let mut cur = x.clone();
        for enc in &self.encoders {
            let a = conv2d_forward(&cur, &enc.conv1)?;
            let b = batchnorm_forward_infer(&a, &enc.bn1)?;
            let c = relu_forward(&b);
            let d = conv2d_forward(&c, &enc.conv2)?;
            let e = batchnorm_forward_infer(&d, &enc.bn2)?;
            let f = relu_forward(&e);
            cur = if enc.pooled {
                let (pooled, idx) = maxpool2x2_forward(&f)?;
                indices.push(idx);
                pooled
            } else {
                f
            };
        }
        for dec in &self.decoders {
            if dec.unpool {
                let idx = indices.pop().expect("one recorded index per unpool");
                cur = maxunpool2x2(&cur, &idx)?;
            }
            let a = conv2d_forward(&cur, &dec.conv1)?;
            let b = batchnorm_forward_infer(&a, &dec.bn1)?;
            let c = relu_forward(&b);
            let d = conv2d_forward(&c, &dec.conv2)?;
            cur = match &dec.bn2 {
                Some(bn2p) => relu_forward(&batchnorm_forward_infer(&d, bn2p)?),
                None => d,
            };
        }
        softmax2(&cur)
    }

    /// Cross-entropy loss of a cached forward pass against targets.
    pub fn loss(&self, cache: &ModelCache<T>, targets: &[&BinaryMask]) -> Result<T, NetworkError> {
        let (loss, _) = softmax_cross_entropy(&cache.logits, targets)?;
        Ok(loss)
    }

    /// Full backward pass. Consumes the cache: after a parameter update
    /// the cached activations are stale, so reuse is a compile error.
    pub fn backward(
        &self,
        cache: ModelCache<T>,
        targets: &[&BinaryMask],
    ) -> Result<(T, ModelGrads<T>), NetworkError> {
        let (loss, mut grad) = softmax_cross_entropy(&cache.logits, targets)?;
        let mut dec_grads: Vec<DecBlockGrads<T>> = Vec::with_capacity(self.decoders.len());
        for (dec, dcache) in self.decoders.iter().zip(cache.dec.iter()).rev() {
            let (bn2_grads, mut g) = match (&dec.bn2, &dcache.bn2, &dcache.relu2_out) {
                (Some(bn2p), Some(bn2c), Some(r2)) => {
                    let g = relu_backward(r2, &grad);
                    let (g, bg) = batchnorm_backward(bn2c, bn2p, &g)?;
                    (Some(bg), g)
                }
                _ => (None, grad),
            };
            let (gx2, conv2_grads) = conv2d_backward(&dcache.conv2_in, &dec.conv2, &g)?;
            g = relu_backward(&dcache.conv2_in, &gx2);
            let (g2, bn1_grads) = batchnorm_backward(&dcache.bn1, &dec.bn1, &g)?;
            let (gx1, conv1_grads) = conv2d_backward(&dcache.conv1_in, &dec.conv1, &g2)?;
            grad = match &dcache.unpool_idx {
                Some(idx) => maxunpool2x2_backward(idx, &gx1)?,
                None => gx1,
            };
            dec_grads.push(DecBlockGrads {
                conv1: conv1_grads,
                bn1: bn1_grads,
                conv2: conv2_grads,
                bn2: bn2_grads,
            });
        }
        dec_grads.reverse();

        let mut enc_grads: Vec<EncBlockGrads<T>> = Vec::with_capacity(self.encoders.len());
        for (enc, ecache) in self.encoders.iter().zip(cache.enc.iter()).rev() {
            let mut g = match &ecache.pool_idx {
                Some(idx) => maxpool2x2_backward(idx, &grad)?,
                None => grad,
            };
            g = relu_backward(&ecache.relu2_out, &g);
            let (g2, bn2_grads) = batchnorm_backward(&ecache.bn2, &enc.bn2, &g)?;
            let (gx2, conv2_grads) = conv2d_backward(&ecache.conv2_in, &enc.conv2, &g2)?;
            let g3 = relu_backward(&ecache.conv2_in, &gx2);
            let (g4, bn1_grads) = batchnorm_backward(&ecache.bn1, &enc.bn1, &g3)?;
            let (gx1, conv1_grads) = conv2d_backward(&ecache.conv1_in, &enc.conv1, &g4)?;
            grad = gx1;
            enc_grads.push(EncBlockGrads {
                conv1: conv1_grads,
                bn1: bn1_grads,
                conv2: conv2_grads,
                bn2: bn2_grads,
            });
        }
        enc_grads.reverse();

        Ok((
            loss,
            ModelGrads {
                encoders: enc_grads,
                decoders: dec_grads,
            },
        ))
    }

    /// Fold the batch statistics of a cached forward pass into the
    /// running statistics (momentum update) and mark them initialized.
    pub fn apply_bn_updates(&mut self, cache: &ModelCache<T>) {
        for (enc, ecache) in self.encoders.iter_mut().zip(cache.enc.iter()) {
            batchnorm_update_running(&mut enc.bn1, &ecache.bn1);
            batchnorm_update_running(&mut enc.bn2, &ecache.bn2);
        }
        for (dec, dcache) in self.decoders.iter_mut().zip(cache.dec.iter()) {
            batchnorm_update_running(&mut dec.bn1, &dcache.bn1);
            if let (Some(bn2), Some(bn2c)) = (dec.bn2.as_mut(), dcache.bn2.as_ref()) {
                batchnorm_update_running(bn2, bn2c);
            }
        }
    }

    /// Named views of every trainable tensor, in a fixed global order.
    pub fn trainable_named(&self) -> Vec<(String, &[T], Vec<usize>)> {
        let mut out = Vec::new();
        for (k, e) in self.encoders.iter().enumerate() {
            let p = format!("e{}", k + 1);
            push_conv_named(&mut out, &p, "conv1", &e.conv1);
            push_bn_named(&mut out, &p, "bn1", &e.bn1);
            push_conv_named(&mut out, &p, "conv2", &e.conv2);
            push_bn_named(&mut out, &p, "bn2", &e.bn2);
        }
        for (k, d) in self.decoders.iter().enumerate() {
            let p = format!("d{}", k + 1);
            push_conv_named(&mut out, &p, "conv1", &d.conv1);
            push_bn_named(&mut out, &p, "bn1", &d.bn1);
            push_conv_named(&mut out, &p, "conv2", &d.conv2);
            if let Some(bn2) = &d.bn2 {
                push_bn_named(&mut out, &p, "bn2", bn2);
            }
        }
        out
    }

    /// Mutable references to every trainable tensor, same order as
    /// [`ModelParams::trainable_named`].
    pub fn trainable_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out: Vec<&mut Vec<T>> = Vec::new();
        for e in self.encoders.iter_mut() {
            out.push(&mut e.conv1.weight);
            out.push(&mut e.conv1.bias);
            out.push(&mut e.bn1.gamma);
            out.push(&mut e.bn1.beta);
            out.push(&mut e.conv2.weight);
            out.push(&mut e.conv2.bias);
            out.push(&mut e.bn2.gamma);
            out.push(&mut e.bn2.beta);
        }
        for d in self.decoders.iter_mut() {
            out.push(&mut d.conv1.weight);
            out.push(&mut d.conv1.bias);
            out.push(&mut d.bn1.gamma);
            out.push(&mut d.bn1.beta);
            out.push(&mut d.conv2.weight);
            out.push(&mut d.conv2.bias);
            if let Some(bn2) = d.bn2.as_mut() {
                out.push(&mut bn2.gamma);
                out.push(&mut bn2.beta);
            }
        }
        out
    }
}

fn push_conv_named<'a, T>(
    out: &mut Vec<(String, &'a [T], Vec<usize>)>,
    prefix: &str,
    name: &str,
    conv: &'a ConvParams<T>,
) {
    out.push((
        format!("{prefix}.{name}.weight"),
        &conv.weight,
        vec![conv.c_out, conv.c_in, 3, 3],
    ));
    out.push((format!("{prefix}.{name}.bias"), &conv.bias, vec![conv.c_out]));
}

fn push_bn_named<'a, T>(
    out: &mut Vec<(String, &'a [T], Vec<usize>)>,
    prefix: &str,
    name: &str,
    bn: &'a BnParams<T>,
) {
    let c = bn.gamma.len();
    out.push((format!("{prefix}.{name}.gamma"), &bn.gamma, vec![c]));
    out.push((format!("{prefix}.{name}.beta"), &bn.beta, vec![c]));
}

/// Cached activations of one encoder block.
#[derive(Debug, Clone)]
pub struct EncBlockCache<T> {
    pub conv1_in: Tensor4<T>,
    pub bn1: BnCache<T>,
    pub conv2_in: Tensor4<T>,
    pub bn2: BnCache<T>,
    pub relu2_out: Tensor4<T>,
    pub pool_idx: Option<PoolIndices>,
}

/// Cached activations of one decoder block.
#[derive(Debug, Clone)]
pub struct DecBlockCache<T> {
    pub unpool_idx: Option<PoolIndices>,
    pub conv1_in: Tensor4<T>,
    pub bn1: BnCache<T>,
    pub conv2_in: Tensor4<T>,
    pub bn2: Option<BnCache<T>>,
    pub relu2_out: Option<Tensor4<T>>,
}

/// Everything the backward pass needs from one training forward pass.
#[derive(Debug, Clone)]
pub struct ModelCache<T> {
    pub enc: Vec<EncBlockCache<T>>,
    pub dec: Vec<DecBlockCache<T>>,
    pub logits: Tensor4<T>,
    pub probs: Tensor4<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncBlockGrads<T> {
    pub conv1: ConvGrads<T>,
    pub bn1: BnGrads<T>,
    pub conv2: ConvGrads<T>,
    pub bn2: BnGrads<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecBlockGrads<T> {
    pub conv1: ConvGrads<T>,
    pub bn1: BnGrads<T>,
    pub conv2: ConvGrads<T>,
    pub bn2: Option<BnGrads<T>>,
}

/// Gradients (or optimizer state) with the same shape as the trainable
/// parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads<T> {
    pub encoders: Vec<EncBlockGrads<T>>,
    pub decoders: Vec<DecBlockGrads<T>>,
}

impl<T: Scalar> ModelGrads<T> {
    pub fn zeros(model: &ModelParams<T>) -> Self {
        Self {
            encoders: model
                .encoders
                .iter()
                .map(|e| EncBlockGrads {
                    conv1: ConvGrads::zeros(&e.conv1),
                    bn1: BnGrads::zeros(&e.bn1),
                    conv2: ConvGrads::zeros(&e.conv2),
                    bn2: BnGrads::zeros(&e.bn2),
                })
                .collect(),
            decoders: model
                .decoders
                .iter()
                .map(|d| DecBlockGrads {
                    conv1: ConvGrads::zeros(&d.conv1),
                    bn1: BnGrads::zeros(&d.bn1),
                    conv2: ConvGrads::zeros(&d.conv2),
                    bn2: d.bn2.as_ref().map(BnGrads::zeros),
                })
                .collect(),
        }
    }

    /// Flat tensor views in the same order as
    /// [`ModelParams::trainable_named`] / [`ModelParams::trainable_mut`].
    pub fn flat(&self) -> Vec<&Vec<T>> {
        let mut out: Vec<&Vec<T>> = Vec::new();
        for e in &self.encoders {
            out.extend([
                &e.conv1.weight,
                &e.conv1.bias,
                &e.bn1.gamma,
                &e.bn1.beta,
                &e.conv2.weight,
                &e.conv2.bias,
                &e.bn2.gamma,
                &e.bn2.beta,
            ]);
        }
        for d in &self.decoders {
            out.extend([
                &d.conv1.weight,
                &d.conv1.bias,
                &d.bn1.gamma,
                &d.bn1.beta,
                &d.conv2.weight,
                &d.conv2.bias,
            ]);
            if let Some(bn2) = &d.bn2 {
                out.extend([&bn2.gamma, &bn2.beta]);
            }
        }
        out
    }

    pub fn flat_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out: Vec<&mut Vec<T>> = Vec::new();
        for e in self.encoders.iter_mut() {
            out.push(&mut e.conv1.weight);
            out.push(&mut e.conv1.bias);
            out.push(&mut e.bn1.gamma);
            out.push(&mut e.bn1.beta);
            out.push(&mut e.conv2.weight);
            out.push(&mut e.conv2.bias);
            out.push(&mut e.bn2.gamma);
            out.push(&mut e.bn2.beta);
        }
        for d in self.decoders.iter_mut() {
            out.push(&mut d.conv1.weight);
            out.push(&mut d.conv1.bias);
            out.push(&mut d.bn1.gamma);
            out.push(&mut d.bn1.beta);
            out.push(&mut d.conv2.weight);
            out.push(&mut d.conv2.bias);
            if let Some(bn2) = d.bn2.as_mut() {
                out.push(&mut bn2.gamma);
                out.push(&mut bn2.beta);
            }
        }
        out
    }

    /// Largest absolute entry across all gradients.
    pub fn max_abs(&self) -> f64 {
        self.flat()
            .iter()
            .flat_map(|v| v.iter())
            .fold(0.0f64, |m, &v| m.max(v.to_f64().abs()))
    }
}
