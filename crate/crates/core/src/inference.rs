//! Task-agnostic test path.
//!
//! A test image is first encoded without prompts and matched against every
//! task key. The winning task's prompts re-encode the image, and each patch
//! is scored by its distance to the nearest knowledge row, re-weighted by
//! how that distance compares with the row's knowledge neighbourhood.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{Encoder, EncoderError, Image, PatchFeatureMap};
use crate::memory::{MemoryError, MemorySpace};
use crate::numerics::{l2, Tensor};
use crate::pgm::Pgm;

pub const DEFAULT_NEIGHBOURS: usize = 3;
pub const DEFAULT_SIGMA: f64 = 4.0;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("memory holds no tasks")]
    EmptyMemory,
    #[error("knowledge bank is empty")]
    EmptyKnowledge,
    #[error("neighbour count {b} outside 2..={k}")]
    NeighbourCount { b: usize, k: usize },
    #[error("no patch scores")]
    NoScores,
    #[error("invalid extents: {0}")]
    Extents(String),
    #[error("sigma must be positive, got {0}")]
    Sigma(f64),
    #[error("feature width {got} does not match memory width {want}")]
    Width { got: usize, want: usize },
    #[error("task {0} not in memory")]
    UnknownTask(usize),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
}

/// Sum over key rows of the distance to the closest test row.
pub fn key_distance(key: &Tensor, test: &Tensor) -> f64 {
    key.iter_rows()
        .map(|k| test.iter_rows().map(|t| l2(k, t)).fold(f64::INFINITY, f64::min))
        .sum()
}

/// Key distance to every task, in task order.
pub fn task_distances(test_frozen: &PatchFeatureMap, memory: &MemorySpace) -> Result<Vec<f64>, InferenceError> {
    if memory.is_empty() {
        return Err(InferenceError::EmptyMemory);
    }
    let want = memory.entries()[0].key.cols();
    if test_frozen.dim() != want {
        return Err(InferenceError::Width {
            got: test_frozen.dim(),
            want,
        });
    }
    Ok(memory
        .entries()
        .iter()
        .map(|e| key_distance(&e.key, &test_frozen.features))
        .collect())
}

/// Index of the smallest value, ties to the smallest index.
fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v < values[best] {
            best = i;
        }
    }
    best
}

/// Task whose key is closest to the prompt-free test features.
pub fn select_task(test_frozen: &PatchFeatureMap, memory: &MemorySpace) -> Result<usize, InferenceError> {
    Ok(argmin(&task_distances(test_frozen, memory)?))
}

/// Per-patch scoring detail.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchScores {
    /// Re-weighted scores.
    pub scores: Vec<f64>,
    /// Distance to the nearest knowledge row.
    pub nearest_distance: Vec<f64>,
    pub nearest_row: Vec<usize>,
    /// Multiplier applied to `nearest_distance`, in `[1 - 1/b, 1)`.
    pub factor: Vec<f64>,
}

/// The `b` knowledge rows nearest to row `anchor`, starting with the anchor.
fn neighbourhood(knowledge: &Tensor, anchor: usize, b: usize) -> Vec<usize> {
    let a = knowledge.row(anchor);
    let mut others: Vec<(f64, usize)> = (0..knowledge.rows())
        .filter(|&j| j != anchor)
        .map(|j| (l2(a, knowledge.row(j)), j))
        .collect();
    others.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
    std::iter::once(anchor)
        .chain(others.into_iter().take(b - 1).map(|(_, j)| j))
        .collect()
}

/// Scores every test patch against a knowledge bank with `b` neighbours.
pub fn patch_scores(test: &Tensor, knowledge: &Tensor, b: usize) -> Result<PatchScores, InferenceError> {
    let k = knowledge.rows();
    if k == 0 || knowledge.is_empty() {
        return Err(InferenceError::EmptyKnowledge);
    }
    if b < 2 || b > k {
        return Err(InferenceError::NeighbourCount { b, k });
    }
    if test.cols() != knowledge.cols() {
        return Err(InferenceError::Width {
            got: test.cols(),
            want: knowledge.cols(),
        });
    }
    let mut cache: Vec<Option<Vec<usize>>> = vec![None; k];
    let n = test.rows();
    let mut out = PatchScores {
        scores: Vec::with_capacity(n),
        nearest_distance: Vec::with_capacity(n),
        nearest_row: Vec::with_capacity(n),
        factor: Vec::with_capacity(n),
    };
    let mut dist = vec![0.0; k];
    for t in test.iter_rows() {
        for (j, d) in dist.iter_mut().enumerate() {
            *d = l2(t, knowledge.row(j));
        }
        let nearest = argmin(&dist);
        let s_star = dist[nearest];
        let hood = cache[nearest].get_or_insert_with(|| neighbourhood(knowledge, nearest, b));
        // exp(s*) / sum exp(d_m) rewritten as 1 / sum exp(d_m - s*): every
        // exponent is >= 0, so the denominator is >= b and cannot overflow
        // for any distance gap that leaves the ratio representable.
        let denom: f64 = hood.iter().map(|&m| (dist[m] - s_star).exp()).sum();
        let factor = 1.0 - 1.0 / denom;
        out.scores.push(factor * s_star);
        out.nearest_distance.push(s_star);
        out.nearest_row.push(nearest);
        out.factor.push(factor);
    }
    Ok(out)
}

pub fn image_score(scores: &[f64]) -> Result<f64, InferenceError> {
    scores
        .iter()
        .copied()
        .reduce(f64::max)
        .ok_or(InferenceError::NoScores)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect()
}

/// Convolves along one axis; weights are renormalized over the taps that
/// fall inside the image.
fn blur_axis(src: &[f64], height: usize, width: usize, kernel: &[f64], horizontal: bool) -> Vec<f64> {
    let radius = (kernel.len() / 2) as isize;
    let mut out = vec![0.0; src.len()];
    for y in 0..height {
        for x in 0..width {
            let (mut acc, mut wsum) = (0.0, 0.0);
            for (ki, &w) in kernel.iter().enumerate() {
                let off = ki as isize - radius;
                let (sy, sx) = if horizontal {
                    (y as isize, x as isize + off)
                } else {
                    (y as isize + off, x as isize)
                };
                if sy < 0 || sx < 0 || sy >= height as isize || sx >= width as isize {
                    continue;
                }
                acc += w * src[sy as usize * width + sx as usize];
                wsum += w;
            }
            out[y * width + x] = acc / wsum;
        }
    }
    out
}

/// Bilinear upsampling of the patch-grid scores (pixel-centre aligned),
/// followed by a truncated Gaussian blur of radius `ceil(3 sigma)`.
pub fn anomaly_map(
    scores: &[f64],
    grid_h: usize,
    grid_w: usize,
    height: usize,
    width: usize,
    sigma: f64,
) -> Result<Vec<f64>, InferenceError> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(InferenceError::Sigma(sigma));
    }
    if grid_h == 0 || grid_w == 0 || height == 0 || width == 0 || scores.len() != grid_h * grid_w {
        return Err(InferenceError::Extents(format!(
            "{} scores for grid {grid_h}x{grid_w}, image {height}x{width}",
            scores.len()
        )));
    }
    let coord = |i: usize, out: usize, inp: usize| -> (usize, usize, f64) {
        let s = ((i as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(inp - 1);
        (lo, hi, s - lo as f64)
    };
    let lerp = |a: f64, b: f64, t: f64| a + t * (b - a);
    let mut up = vec![0.0; height * width];
    for y in 0..height {
        let (y0, y1, ty) = coord(y, height, grid_h);
        for x in 0..width {
            let (x0, x1, tx) = coord(x, width, grid_w);
            let top = lerp(scores[y0 * grid_w + x0], scores[y0 * grid_w + x1], tx);
            let bottom = lerp(scores[y1 * grid_w + x0], scores[y1 * grid_w + x1], tx);
            up[y * width + x] = lerp(top, bottom, ty);
        }
    }
    let kernel = gaussian_kernel(sigma);
    let h = blur_axis(&up, height, width, &kernel, true);
    Ok(blur_axis(&h, height, width, &kernel, false))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalyResult {
    pub selected_task: usize,
    /// Key distance to each task.
    pub task_distances: Vec<f64>,
    pub patch_scores: Vec<f64>,
    pub image_score: f64,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Coarse map: the patch scores on the patch grid, raster order.
    pub coarse_map: Vec<f64>,
    pub height: usize,
    pub width: usize,
    /// Pixel-level map, raster order.
    pub map: Vec<f64>,
}

/// Raw range recorded next to a normalized heatmap.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRange {
    pub min: f64,
    pub max: f64,
}

impl AnomalyResult {
    /// 8-bit heatmap, min-max normalized over this image.
    pub fn heatmap(&self) -> (Pgm, HeatmapRange) {
        let min = self.map.iter().copied().fold(f64::INFINITY, f64::min);
        let max = self.map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = max - min;
        let unit: Vec<f64> = self
            .map
            .iter()
            .map(|v| if span > 0.0 { (v - min) / span } else { 0.0 })
            .collect();
        (Pgm::from_unit(self.width, self.height, &unit), HeatmapRange { min, max })
    }
}

/// Inference knobs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferConfig {
    pub neighbours: usize,
    pub sigma: f64,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            neighbours: DEFAULT_NEIGHBOURS,
            sigma: DEFAULT_SIGMA,
        }
    }
}

/// Full test path: frozen encode, task selection, prompted encode, scoring.
pub fn infer(image: &Image, encoder: &Encoder, memory: &MemorySpace, cfg: &InferConfig) -> Result<AnomalyResult, InferenceError> {
    let frozen = encoder.encode(image, None)?;
    let distances = task_distances(&frozen, memory)?;
    let task = argmin(&distances);
    score_with_task(image, encoder, memory, task, distances, cfg)
}

/// Scores against a given task, skipping key matching. Used for oracle
/// routing.
pub fn infer_with_task(
    image: &Image,
    encoder: &Encoder,
    memory: &MemorySpace,
    task: usize,
    cfg: &InferConfig,
) -> Result<AnomalyResult, InferenceError> {
    score_with_task(image, encoder, memory, task, Vec::new(), cfg)
}

fn score_with_task(
    image: &Image,
    encoder: &Encoder,
    memory: &MemorySpace,
    task: usize,
    task_distances: Vec<f64>,
    cfg: &InferConfig,
) -> Result<AnomalyResult, InferenceError> {
    let entry = memory.get(task).ok_or(InferenceError::UnknownTask(task))?;
    let prompted = encoder.encode(image, Some(&entry.prompts))?;
    let scored = patch_scores(&prompted.features, &entry.knowledge, cfg.neighbours)?;
    let image_score = image_score(&scored.scores)?;
    let map = anomaly_map(
        &scored.scores,
        prompted.grid_h,
        prompted.grid_w,
        image.height(),
        image.width(),
        cfg.sigma,
    )?;
    Ok(AnomalyResult {
        selected_task: task,
        task_distances,
        coarse_map: scored.scores.clone(),
        patch_scores: scored.scores,
        image_score,
        grid_h: prompted.grid_h,
        grid_w: prompted.grid_w,
        height: image.height(),
        width: image.width(),
        map,
    })
}
