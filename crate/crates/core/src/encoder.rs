//! A small, seeded vision transformer that stays frozen after construction.
//!
//! Images are cut into square patches, linearly embedded, given fixed
//! sinusoidal positions, and run through pre-norm transformer blocks. The
//! output of block `tap_layer` is the patch feature map used for keys,
//! knowledge, and scoring. Trainable prompts enter at the input of each
//! block up to the tap layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hash::Fnv1a;
use crate::numerics::{GradTape, NumericsError, Tensor, Var};

const LN_EPS: f64 = 1e-5;
const MLP_RATIO: usize = 4;
/// Amplitude of the positional code relative to the patch embedding.
const POS_SCALE: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("image {height}x{width}x{channels} incompatible with encoder: {reason}")]
    ImageShape {
        height: usize,
        width: usize,
        channels: usize,
        reason: String,
    },
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("prompt set has {got_layers}x{got_width}, encoder expects {want_layers}x{want_width}")]
    PromptMismatch {
        got_layers: usize,
        got_width: usize,
        want_layers: usize,
        want_width: usize,
    },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Channel-last image with pixel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self, EncoderError> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(EncoderError::InvalidImage("empty extent".into()));
        }
        if pixels.len() != height * width * channels {
            return Err(EncoderError::InvalidImage(format!(
                "{} pixels for {height}x{width}x{channels}",
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(EncoderError::InvalidImage(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self, EncoderError> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptMode {
    /// One vector per layer, added to every token of that layer's input.
    AdditiveBroadcast,
    /// `prompt_tokens` extra tokens per layer, prepended to that layer's
    /// input and dropped from its output.
    PrependTokens,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    /// 1-based index of the block whose output is tapped.
    pub tap_layer: usize,
    pub prompt_mode: PromptMode,
    /// Tokens per layer in prepend mode; ignored in additive mode.
    pub prompt_tokens: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            channels: 1,
            embed_dim: 64,
            num_layers: 6,
            num_heads: 4,
            tap_layer: 3,
            prompt_mode: PromptMode::AdditiveBroadcast,
            prompt_tokens: 1,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: String| Err(EncoderError::InvalidConfig(m));
        if self.patch_size == 0 || self.channels == 0 || self.embed_dim == 0 {
            return bad("patch_size, channels and embed_dim must be positive".into());
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return bad(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.tap_layer < 1 || self.tap_layer > self.num_layers {
            return bad(format!("tap_layer {} outside 1..={}", self.tap_layer, self.num_layers));
        }
        if self.prompt_mode == PromptMode::PrependTokens && self.prompt_tokens == 0 {
            return bad("prepend mode needs at least one prompt token".into());
        }
        Ok(())
    }

    /// Number of prompt rows per layer.
    pub fn tokens_per_layer(&self) -> usize {
        match self.prompt_mode {
            PromptMode::AdditiveBroadcast => 1,
            PromptMode::PrependTokens => self.prompt_tokens,
        }
    }

    pub fn token_len(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

/// Per-layer prompts, stored as a `[layers, width]` matrix where each row
/// holds `width / embed_dim` prompt tokens back to back.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    values: Tensor,
}

impl PromptSet {
    pub fn new(values: Tensor) -> Result<Self, EncoderError> {
        if values.shape().len() != 2 {
            return Err(EncoderError::InvalidConfig(format!(
                "prompt tensor must be rank 2, got {:?}",
                values.shape()
            )));
        }
        Ok(Self { values })
    }

    /// All-zero prompts shaped for `config`.
    pub fn zeros(config: &EncoderConfig) -> Self {
        let width = config.tokens_per_layer() * config.embed_dim;
        Self {
            values: Tensor::zeros(vec![config.tap_layer, width]),
        }
    }

    pub fn layers(&self) -> usize {
        self.values.rows()
    }

    pub fn width(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    /// Prompt tokens of one layer as a `[tokens, dim]` matrix.
    pub fn layer(&self, layer: usize, dim: usize) -> Tensor {
        let row = self.values.row(layer).to_vec();
        Tensor::from_raw(vec![row.len() / dim, dim], row)
    }
}

/// Patch features of one image in raster order of the patch grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchFeatureMap {
    pub grid_h: usize,
    pub grid_w: usize,
    pub features: Tensor,
}

impl PatchFeatureMap {
    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

#[derive(Clone, Debug)]
struct Block {
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    w1: Tensor,
    w2: Tensor,
}

impl Block {
    fn tensors(&self) -> [&Tensor; 6] {
        [&self.wq, &self.wk, &self.wv, &self.wo, &self.w1, &self.w2]
    }
}

/// Frozen toy ViT.
#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    patch_embed: Tensor,
    blocks: Vec<Block>,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let s = 1.0 / (rows as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-s..s)).collect();
    Tensor::from_raw(vec![rows, cols], data)
}

impl Encoder {
    /// Draws all weights from a generator seeded with `config.seed`.
    pub fn new(config: EncoderConfig) -> Result<Self, EncoderError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let c = config.embed_dim;
        let patch_embed = uniform(&mut rng, config.token_len(), c);
        let blocks = (0..config.num_layers)
            .map(|_| Block {
                wq: uniform(&mut rng, c, c),
                wk: uniform(&mut rng, c, c),
                wv: uniform(&mut rng, c, c),
                wo: uniform(&mut rng, c, c),
                w1: uniform(&mut rng, c, MLP_RATIO * c),
                w2: uniform(&mut rng, MLP_RATIO * c, c),
            })
            .collect();
        Ok(Self {
            config,
            patch_embed,
            blocks,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// FNV-1a hash over every weight and the config that produced them.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv1a::new();
        let cfg = &self.config;
        for v in [
            cfg.patch_size,
            cfg.channels,
            cfg.embed_dim,
            cfg.num_layers,
            cfg.num_heads,
            cfg.tap_layer,
            cfg.tokens_per_layer(),
        ] {
            h.update(&(v as u64).to_le_bytes());
        }
        h.update(&[cfg.prompt_mode as u8]);
        h.update_f64s(self.patch_embed.data());
        for b in &self.blocks {
            for t in b.tensors() {
                h.update_f64s(t.data());
            }
        }
        h.finish()
    }

    fn grid(&self, image: &Image) -> Result<(usize, usize), EncoderError> {
        let p = self.config.patch_size;
        let err = |reason: String| EncoderError::ImageShape {
            height: image.height,
            width: image.width,
            channels: image.channels,
            reason,
        };
        if image.channels != self.config.channels {
            return Err(err(format!("expected {} channels", self.config.channels)));
        }
        if image.height % p != 0 || image.width % p != 0 {
            return Err(err(format!("extents not divisible by patch size {p}")));
        }
        Ok((image.height / p, image.width / p))
    }

    /// Flattened patch tokens, one row per patch in raster order.
    pub fn patchify(&self, image: &Image) -> Result<Tensor, EncoderError> {
        self.grid(image)?;
        Ok(patchify(image, self.config.patch_size)?)
    }

    /// Layer-`tap_layer` features. `None` runs the plain frozen pass.
    pub fn encode(&self, image: &Image, prompts: Option<&PromptSet>) -> Result<PatchFeatureMap, EncoderError> {
        let (grid_h, grid_w) = self.grid(image)?;
        let mut tape = GradTape::new();
        let prompt_vars = match prompts {
            Some(p) => {
                self.check_prompts(p)?;
                Some(self.prompt_constants(&mut tape, p))
            }
            None => None,
        };
        let out = self.forward(&mut tape, image, prompt_vars.as_deref())?;
        let features = tape.value(out).clone();
        Ok(PatchFeatureMap {
            grid_h,
            grid_w,
            features,
        })
    }

    pub fn check_prompts(&self, prompts: &PromptSet) -> Result<(), EncoderError> {
        let want_width = self.config.tokens_per_layer() * self.config.embed_dim;
        if prompts.layers() != self.config.tap_layer || prompts.width() != want_width {
            return Err(EncoderError::PromptMismatch {
                got_layers: prompts.layers(),
                got_width: prompts.width(),
                want_layers: self.config.tap_layer,
                want_width,
            });
        }
        Ok(())
    }

    fn prompt_constants(&self, tape: &mut GradTape, prompts: &PromptSet) -> Vec<Var> {
        (0..prompts.layers())
            .map(|l| tape.constant(prompts.layer(l, self.config.embed_dim)))
            .collect()
    }

    /// Records the forward pass on `tape`. `prompts`, when given, holds one
    /// `[tokens, dim]` variable per layer up to the tap layer.
    pub fn forward(&self, tape: &mut GradTape, image: &Image, prompts: Option<&[Var]>) -> Result<Var, EncoderError> {
        let (grid_h, grid_w) = self.grid(image)?;
        if let Some(p) = prompts {
            if p.len() != self.config.tap_layer {
                return Err(EncoderError::PromptMismatch {
                    got_layers: p.len(),
                    got_width: p.first().map(|v| tape.value(*v).len()).unwrap_or(0),
                    want_layers: self.config.tap_layer,
                    want_width: self.config.tokens_per_layer() * self.config.embed_dim,
                });
            }
        }
        let mut tokens = patchify(image, self.config.patch_size)?.into_data();
        tokens.iter_mut().for_each(|v| *v -= 0.5);
        let n = grid_h * grid_w;
        let tokens = tape.constant(Tensor::from_raw(vec![n, self.config.token_len()], tokens));
        let embed = tape.constant(self.patch_embed.clone());
        let x = tape.matmul(tokens, embed)?;
        let pos = tape.constant(positional(grid_h, grid_w, self.config.embed_dim));
        let mut x = tape.add(x, pos)?;

        for (l, block) in self.blocks.iter().take(self.config.tap_layer).enumerate() {
            x = match (prompts, self.config.prompt_mode) {
                (None, _) => self.block(tape, block, x)?,
                (Some(p), PromptMode::AdditiveBroadcast) => {
                    let xin = tape.add_row(x, p[l])?;
                    self.block(tape, block, xin)?
                }
                (Some(p), PromptMode::PrependTokens) => {
                    let extra = tape.value(p[l]).rows();
                    let xin = tape.concat_rows(&[p[l], x])?;
                    let out = self.block(tape, block, xin)?;
                    tape.slice_rows(out, extra, n)?
                }
            };
        }
        Ok(x)
    }

    fn block(&self, tape: &mut GradTape, w: &Block, x: Var) -> Result<Var, NumericsError> {
        let c = self.config.embed_dim;
        let heads = self.config.num_heads;
        let dh = c / heads;

        let h = tape.layer_norm(x, LN_EPS)?;
        let wq = tape.constant(w.wq.clone());
        let wk = tape.constant(w.wk.clone());
        let wv = tape.constant(w.wv.clone());
        let q = tape.matmul(h, wq)?;
        let k = tape.matmul(h, wk)?;
        let v = tape.matmul(h, wv)?;
        let mut outs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let qh = tape.slice_cols(q, hd * dh, dh)?;
            let kh = tape.slice_cols(k, hd * dh, dh)?;
            let vh = tape.slice_cols(v, hd * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
            let attn = tape.softmax(scores)?;
            outs.push(tape.matmul(attn, vh)?);
        }
        let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        let wo = tape.constant(w.wo.clone());
        let a = tape.matmul(cat, wo)?;
        let x = tape.add(x, a)?;

        let h = tape.layer_norm(x, LN_EPS)?;
        let w1 = tape.constant(w.w1.clone());
        let w2 = tape.constant(w.w2.clone());
        let m = tape.matmul(h, w1)?;
        let m = tape.gelu(m)?;
        let m = tape.matmul(m, w2)?;
        tape.add(x, m)
    }
}

/// Row `r * grid_w + c` holds patch `(r, c)`, pixels row-major, channel last.
pub fn patchify(image: &Image, patch_size: usize) -> Result<Tensor, NumericsError> {
    let p = patch_size;
    let (gh, gw) = (image.height / p, image.width / p);
    let cin = image.channels;
    let mut data = Vec::with_capacity(gh * gw * p * p * cin);
    for r in 0..gh {
        for c in 0..gw {
            for y in 0..p {
                let start = ((r * p + y) * image.width + c * p) * cin;
                data.extend_from_slice(&image.pixels[start..start + p * cin]);
            }
        }
    }
    Tensor::matrix(gh * gw, p * p * cin, data)
}

/// Fixed 2-D sinusoidal code: the first half of the channels encodes the
/// patch row, the second half the column.
fn positional(grid_h: usize, grid_w: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0; grid_h * grid_w * dim];
    for r in 0..grid_h {
        for c in 0..grid_w {
            let row = &mut data[(r * grid_w + c) * dim..(r * grid_w + c + 1) * dim];
            for (offset, pos, width) in [(0, r, half), (half, c, dim - half)] {
                for i in 0..width {
                    let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / width.max(1) as f64);
                    let angle = pos as f64 * freq;
                    row[offset + i] = POS_SCALE * if i % 2 == 0 { angle.sin() } else { angle.cos() };
                }
            }
        }
    }
    Tensor::from_raw(vec![grid_h * grid_w, dim], data)
}
