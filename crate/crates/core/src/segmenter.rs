//! Structure label maps standing in for a promptable segmentation model,
//! and their reduction onto the patch grid.

use std::collections::VecDeque;
use std::path::Path;

use thiserror::Error;

use crate::encoder::Image;
use crate::harness::scene::SceneSpec;
use crate::pgm::{Pgm, PgmError};

#[derive(Debug, Error)]
pub enum SegmentError {
    #[error("label map {height}x{width} not divisible into a {grid_h}x{grid_w} grid")]
    NotDivisible {
        height: usize,
        width: usize,
        grid_h: usize,
        grid_w: usize,
    },
    #[error("invalid label map: {0}")]
    Invalid(String),
    #[error(transparent)]
    Pgm(#[from] PgmError),
}

/// Per-pixel partition into regions labelled `0..regions`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u32>,
    regions: u32,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self, SegmentError> {
        if labels.len() != height * width || labels.is_empty() {
            return Err(SegmentError::Invalid(format!(
                "{} labels for {height}x{width}",
                labels.len()
            )));
        }
        let regions = labels.iter().max().copied().unwrap_or(0) + 1;
        Ok(Self {
            height,
            width,
            labels,
            regions,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// `1 + max label`.
    pub fn regions(&self) -> u32 {
        self.regions
    }

    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn distinct(&self) -> Vec<u32> {
        let mut v = self.labels.clone();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// 8-bit PGM where gray value = label.
    pub fn to_pgm(&self) -> Result<Pgm, SegmentError> {
        if self.regions > 256 {
            return Err(SegmentError::Invalid(format!("{} regions exceed 8 bits", self.regions)));
        }
        Ok(Pgm {
            width: self.width,
            height: self.height,
            maxval: 255,
            samples: self.labels.iter().map(|&l| l as u16).collect(),
        })
    }

    pub fn from_pgm(pgm: &Pgm) -> Result<Self, SegmentError> {
        Self::new(pgm.height, pgm.width, pgm.samples.iter().map(|&s| u32::from(s)).collect())
    }

    pub fn save(&self, path: &Path) -> Result<(), SegmentError> {
        Ok(self.to_pgm()?.write(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, SegmentError> {
        Self::from_pgm(&Pgm::read(path)?)
    }
}

/// Labels on the patch grid, raster order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelGrid {
    pub grid_h: usize,
    pub grid_w: usize,
    pub labels: Vec<u32>,
}

/// Source of structure labels for training images.
pub trait Segmenter: Sync {
    fn segment(&self, image: &Image, scene: Option<&SceneSpec>) -> Result<LabelMap, SegmentError>;
}

/// Uses the exact decomposition when the scene is known and flood fill
/// otherwise.
#[derive(Clone, Copy, Debug)]
pub struct SyntheticSegmenter {
    pub fallback_levels: usize,
}

impl Default for SyntheticSegmenter {
    fn default() -> Self {
        Self { fallback_levels: 4 }
    }
}

impl Segmenter for SyntheticSegmenter {
    fn segment(&self, image: &Image, scene: Option<&SceneSpec>) -> Result<LabelMap, SegmentError> {
        match scene {
            Some(s) => Ok(segment_synthetic(s)),
            None => segment_flood(image, self.fallback_levels),
        }
    }
}

/// Always flood fills, ignoring any scene description.
#[derive(Clone, Copy, Debug)]
pub struct FloodSegmenter {
    pub quant_levels: usize,
}

impl Segmenter for FloodSegmenter {
    fn segment(&self, image: &Image, _scene: Option<&SceneSpec>) -> Result<LabelMap, SegmentError> {
        segment_flood(image, self.quant_levels)
    }
}

/// Exact region decomposition of a generated scene. Labels follow the
/// order of the scene's regions, skipping regions that cover no pixel.
pub fn segment_synthetic(scene: &SceneSpec) -> LabelMap {
    let (h, w) = (scene.height, scene.width);
    let raw: Vec<usize> = (0..h * w).map(|i| scene.region_at(i / w, i % w)).collect();
    let mut present = vec![false; scene.regions.len().max(1)];
    raw.iter().for_each(|&r| present[r] = true);
    let mut remap = vec![0u32; present.len()];
    let mut next = 0;
    for (r, &p) in present.iter().enumerate() {
        if p {
            remap[r] = next;
            next += 1;
        }
    }
    LabelMap::new(h, w, raw.iter().map(|&r| remap[r]).collect()).expect("scene extents are non-empty")
}

/// Quantizes intensities into `quant_levels` bins and labels each
/// 4-connected component of equal bins, numbering components in order of
/// first raster-scan occurrence.
pub fn segment_flood(image: &Image, quant_levels: usize) -> Result<LabelMap, SegmentError> {
    if quant_levels < 2 {
        return Err(SegmentError::Invalid(format!("quant_levels {quant_levels} < 2")));
    }
    let (h, w, cin) = (image.height(), image.width(), image.channels());
    let q = quant_levels as f64;
    let bins: Vec<Vec<usize>> = (0..h * w)
        .map(|i| {
            image.pixels()[i * cin..(i + 1) * cin]
                .iter()
                .map(|&v| ((v * q).floor() as usize).min(quant_levels - 1))
                .collect()
        })
        .collect();
    const UNSET: u32 = u32::MAX;
    let mut labels = vec![UNSET; h * w];
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if labels[start] != UNSET {
            continue;
        }
        labels[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (y, x) = (i / w, i % w);
            let neighbours = [
                (y > 0).then(|| i - w),
                (y + 1 < h).then(|| i + w),
                (x > 0).then(|| i - 1),
                (x + 1 < w).then(|| i + 1),
            ];
            for j in neighbours.into_iter().flatten() {
                if labels[j] == UNSET && bins[j] == bins[start] {
                    labels[j] = next;
                    queue.push_back(j);
                }
            }
        }
        next += 1;
    }
    LabelMap::new(h, w, labels)
}

/// Majority label of each pixel block; ties go to the smallest label.
pub fn downsample_labels(map: &LabelMap, grid_h: usize, grid_w: usize) -> Result<LabelGrid, SegmentError> {
    let not_div = || SegmentError::NotDivisible {
        height: map.height,
        width: map.width,
        grid_h,
        grid_w,
    };
    if grid_h == 0 || grid_w == 0 || map.height % grid_h != 0 || map.width % grid_w != 0 {
        return Err(not_div());
    }
    let (bh, bw) = (map.height / grid_h, map.width / grid_w);
    let mut counts = vec![0usize; map.regions as usize];
    let mut labels = Vec::with_capacity(grid_h * grid_w);
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            counts.iter_mut().for_each(|c| *c = 0);
            for y in gy * bh..(gy + 1) * bh {
                for x in gx * bw..(gx + 1) * bw {
                    counts[map.get(y, x) as usize] += 1;
                }
            }
            // max_by_key keeps the last maximum, so scan in reverse
            let best = (0..counts.len()).rev().max_by_key(|&l| counts[l]).unwrap_or(0);
            labels.push(best as u32);
        }
    }
    Ok(LabelGrid { grid_h, grid_w, labels })
}
