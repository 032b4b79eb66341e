//! Structure-based contrastive learning of prompts.
//!
//! Patch features at positions sharing a structure label are pulled
//! together and features of different structures pushed apart, measured by
//! cosine similarity over unordered pairs of distinct positions. Only the
//! prompts are trained; the encoder stays frozen.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{Encoder, EncoderError, Image, PatchFeatureMap, PromptSet};
use crate::numerics::{GradTape, NumericsError, Tensor, Var};
use crate::segmenter::{downsample_labels, LabelGrid, LabelMap, SegmentError};

/// Added to each norm before dividing.
pub const COSINE_EPS: f64 = 1e-8;

const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum SclError {
    #[error("invalid SCL config: {0}")]
    InvalidConfig(String),
    #[error("feature grid {features:?} does not match label grid {labels:?}")]
    ExtentMismatch {
        features: (usize, usize),
        labels: (usize, usize),
    },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Segment(#[from] SegmentError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SclConfig {
    /// Weight of the different-structure term.
    pub lambda_alpha: f64,
    /// Weight of the same-structure term.
    pub lambda_beta: f64,
    pub learning_rate: f64,
    /// Adam first-moment decay.
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
}

impl Default for SclConfig {
    fn default() -> Self {
        Self {
            lambda_alpha: 1.0,
            lambda_beta: 1.0,
            learning_rate: 0.0005,
            momentum: 0.9,
            epochs: 25,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl SclConfig {
    pub fn validate(&self) -> Result<(), SclError> {
        let bad = |m: &str| Err(SclError::InvalidConfig(m.to_string()));
        if !(self.lambda_alpha >= 0.0 && self.lambda_beta >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if self.epochs < 1 || self.batch_size < 1 {
            return bad("epochs and batch_size must be at least 1");
        }
        if !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad("learning_rate must be >= 0 and momentum in [0, 1)");
        }
        Ok(())
    }
}

/// The two sums of the contrastive loss and their weighted difference.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SclTerms {
    /// Cosine sum over same-label pairs.
    pub positive: f64,
    /// Cosine sum over different-label pairs.
    pub negative: f64,
    pub positive_pairs: usize,
    pub negative_pairs: usize,
    /// `lambda_alpha * negative - lambda_beta * positive`.
    pub total: f64,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    dot / ((na + COSINE_EPS) * (nb + COSINE_EPS))
}

fn check_extents(features: &PatchFeatureMap, labels: &LabelGrid) -> Result<(), SclError> {
    if (features.grid_h, features.grid_w) != (labels.grid_h, labels.grid_w)
        || features.features.rows() != labels.labels.len()
    {
        return Err(SclError::ExtentMismatch {
            features: (features.grid_h, features.grid_w),
            labels: (labels.grid_h, labels.grid_w),
        });
    }
    Ok(())
}

/// Evaluates both pair sums directly.
pub fn scl_terms(features: &PatchFeatureMap, labels: &LabelGrid, cfg: &SclConfig) -> Result<SclTerms, SclError> {
    check_extents(features, labels)?;
    let f = &features.features;
    let n = f.rows();
    let (mut positive, mut negative) = (0.0, 0.0);
    let (mut positive_pairs, mut negative_pairs) = (0, 0);
    for a in 0..n {
        for b in a + 1..n {
            let c = cosine(f.row(a), f.row(b));
            if labels.labels[a] == labels.labels[b] {
                positive += c;
                positive_pairs += 1;
            } else {
                negative += c;
                negative_pairs += 1;
            }
        }
    }
    Ok(SclTerms {
        positive,
        negative,
        positive_pairs,
        negative_pairs,
        total: cfg.lambda_alpha * negative - cfg.lambda_beta * positive,
    })
}

/// Contrastive loss of one feature map (unnormalized).
pub fn scl_loss(features: &PatchFeatureMap, labels: &LabelGrid, cfg: &SclConfig) -> Result<f64, SclError> {
    Ok(scl_terms(features, labels, cfg)?.total)
}

/// Records the loss on a tape. With `normalize`, the result is divided by
/// the number of unordered pairs.
pub fn scl_loss_on_tape(
    tape: &mut GradTape,
    features: Var,
    labels: &LabelGrid,
    cfg: &SclConfig,
    normalize: bool,
) -> Result<Var, NumericsError> {
    let n = labels.labels.len();
    if tape.value(features).rows() != n {
        return Err(NumericsError::ShapeMismatch {
            op: "scl_loss",
            left: tape.value(features).shape().to_vec(),
            right: vec![n],
        });
    }
    let pairs = (n * n.saturating_sub(1) / 2).max(1) as f64;
    let scale = if normalize { 1.0 / pairs } else { 1.0 };
    let mut weights = vec![0.0; n * n];
    for a in 0..n {
        for b in a + 1..n {
            weights[a * n + b] = scale
                * if labels.labels[a] == labels.labels[b] {
                    -cfg.lambda_beta
                } else {
                    cfg.lambda_alpha
                };
        }
    }
    let cos = tape.cosine_matrix(features, COSINE_EPS)?;
    let w = tape.constant(Tensor::matrix(n, n, weights)?);
    let weighted = tape.mul(cos, w)?;
    tape.sum(weighted)
}

/// One training image with its structure labels already on the patch grid.
#[derive(Clone, Debug)]
pub struct SclSample {
    pub image: Image,
    pub labels: LabelGrid,
}

impl SclSample {
    pub fn new(encoder: &Encoder, image: Image, labels: &LabelMap) -> Result<Self, SclError> {
        let p = encoder.config().patch_size;
        let grid = downsample_labels(labels, image.height() / p, image.width() / p)?;
        Ok(Self { image, labels: grid })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub prompts: PromptSet,
    /// Mean per-image normalized loss of each epoch, measured before the
    /// updates of that epoch's batches.
    pub loss_trace: Vec<f64>,
}

impl TrainOutcome {
    pub fn loss_trace_json(&self) -> String {
        serde_json::to_string(&self.loss_trace).expect("f64 list serializes")
    }
}

fn prompt_layers(encoder: &Encoder, prompts: &PromptSet) -> Vec<Tensor> {
    (0..prompts.layers())
        .map(|l| prompts.layer(l, encoder.config().embed_dim))
        .collect()
}

/// Normalized loss of one sample and its gradient with respect to each
/// prompt layer.
fn sample_loss_grad(
    encoder: &Encoder,
    sample: &SclSample,
    layers: &[Tensor],
    cfg: &SclConfig,
) -> Result<(f64, Vec<Tensor>), SclError> {
    let mut tape = GradTape::new();
    let vars: Vec<Var> = layers.iter().map(|t| tape.param(t.clone())).collect();
    let out = encoder.forward(&mut tape, &sample.image, Some(&vars))?;
    let loss = scl_loss_on_tape(&mut tape, out, &sample.labels, cfg, true)?;
    let value = tape.value(loss).item().unwrap_or(0.0);
    let grads = tape.backward(loss)?;
    Ok((value, vars.iter().map(|&v| grads.get(v)).collect()))
}

/// Adam over prompt parameters only.
pub fn train_prompts(
    encoder: &Encoder,
    samples: &[SclSample],
    init: &PromptSet,
    cfg: &SclConfig,
) -> Result<TrainOutcome, SclError> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(SclError::EmptyTrainingSet);
    }
    encoder.check_prompts(init)?;
    let dim = encoder.config().embed_dim;
    let (rows, width) = (init.layers(), init.width());
    let mut params = init.values().data().to_vec();
    let mut m = vec![0.0; params.len()];
    let mut v = vec![0.0; params.len()];
    let mut step = 0i32;
    let beta1 = cfg.momentum;

    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut loss_trace = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let current = PromptSet::new(Tensor::matrix(rows, width, params.clone())?)?;
            let layers = prompt_layers(encoder, &current);
            let results: Vec<(f64, Vec<Tensor>)> = batch
                .par_iter()
                .map(|&i| sample_loss_grad(encoder, &samples[i], &layers, cfg))
                .collect::<Result<_, _>>()?;

            // fixed accumulation order keeps batches deterministic
            let mut g = vec![0.0; params.len()];
            for (loss, grads) in &results {
                epoch_loss += loss;
                let flat = grads.iter().flat_map(|t| t.data().iter());
                g.iter_mut().zip(flat).for_each(|(acc, x)| *acc += x);
            }
            let inv = 1.0 / batch.len() as f64;
            g.iter_mut().for_each(|x| *x *= inv);

            step += 1;
            let bc1 = 1.0 - beta1.powi(step);
            let bc2 = 1.0 - ADAM_BETA2.powi(step);
            for i in 0..params.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                params[i] -= cfg.learning_rate * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
        loss_trace.push(epoch_loss / samples.len() as f64);
    }
    debug_assert_eq!(width % dim, 0);
    Ok(TrainOutcome {
        prompts: PromptSet::new(Tensor::matrix(rows, width, params)?)?,
        loss_trace,
    })
}

/// Mean cosine similarity over same-label and different-label position
/// pairs, pooled over all samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionCosines {
    pub intra: f64,
    pub inter: f64,
}

pub fn region_cosines(encoder: &Encoder, samples: &[SclSample], prompts: Option<&PromptSet>) -> Result<RegionCosines, SclError> {
    let cfg = SclConfig::default();
    let (mut pos, mut neg, mut np, mut nn) = (0.0, 0.0, 0usize, 0usize);
    for s in samples {
        let f = encoder.encode(&s.image, prompts)?;
        let t = scl_terms(&f, &s.labels, &cfg)?;
        pos += t.positive;
        neg += t.negative;
        np += t.positive_pairs;
        nn += t.negative_pairs;
    }
    Ok(RegionCosines {
        intra: if np > 0 { pos / np as f64 } else { 0.0 },
        inter: if nn > 0 { neg / nn as f64 } else { 0.0 },
    })
}
