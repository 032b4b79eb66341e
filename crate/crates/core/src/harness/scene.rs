//! Procedural scenes: a base texture region overlaid with rectangular
//! regions of other textures, optionally carrying one injected anomaly.

use serde::{Deserialize, Serialize};

use crate::encoder::Image;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

impl Rect {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y && y < self.y + self.h && x >= self.x && x < self.x + self.w
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.y < other.y + other.h && other.y < self.y + self.h && self.x < other.x + other.w && other.x < self.x + self.w
    }
}

/// Fully resolved texture parameters; rendering is a pure function of these
/// and the pixel coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Texture {
    Stripes {
        period: f64,
        angle: f64,
        phase: f64,
        contrast: f64,
        #[serde(default = "half")]
        mean: f64,
    },
    Checker {
        cell: f64,
        offset_x: f64,
        offset_y: f64,
        low: f64,
        high: f64,
    },
    Blobs {
        centers: Vec<(f64, f64)>,
        radius: f64,
        background: f64,
        foreground: f64,
    },
    ValueNoise {
        scale: f64,
        seed: u64,
        low: f64,
        high: f64,
    },
    Gradient {
        angle: f64,
        offset: f64,
        slope: f64,
    },
    Flat {
        value: f64,
    },
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn lattice(seed: u64, ix: i64, iy: i64) -> f64 {
    let h = splitmix(seed ^ splitmix((ix as u64).wrapping_mul(0x1f1f_1f1f) ^ (iy as u64).rotate_left(32)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn half() -> f64 {
    0.5
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

impl Texture {
    /// Intensity at pixel centre `(y, x)` of an image of the given size.
    pub fn sample(&self, y: usize, x: usize, height: usize, width: usize) -> f64 {
        let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
        let v = match self {
            Texture::Stripes {
                period,
                angle,
                phase,
                contrast,
                mean,
            } => {
                let t = fx * angle.cos() + fy * angle.sin();
                mean + contrast * (std::f64::consts::TAU * t / period + phase).sin()
            }
            Texture::Checker {
                cell,
                offset_x,
                offset_y,
                low,
                high,
            } => {
                let cx = ((fx + offset_x) / cell).floor() as i64;
                let cy = ((fy + offset_y) / cell).floor() as i64;
                if (cx + cy).rem_euclid(2) == 0 {
                    *low
                } else {
                    *high
                }
            }
            Texture::Blobs {
                centers,
                radius,
                background,
                foreground,
            } => {
                let cover = centers
                    .iter()
                    .map(|&(cy, cx)| {
                        let d = ((fy - cy).powi(2) + (fx - cx).powi(2)).sqrt();
                        // soft edge over the outer half of the radius
                        smooth((2.0 * (1.0 - d / radius)).clamp(0.0, 1.0))
                    })
                    .fold(0.0, f64::max);
                background + (foreground - background) * cover
            }
            Texture::ValueNoise { scale, seed, low, high } => {
                let (u, v) = (fx / scale, fy / scale);
                let (ix, iy) = (u.floor() as i64, v.floor() as i64);
                let (tx, ty) = (smooth(u - u.floor()), smooth(v - v.floor()));
                let a = lattice(*seed, ix, iy);
                let b = lattice(*seed, ix + 1, iy);
                let c = lattice(*seed, ix, iy + 1);
                let d = lattice(*seed, ix + 1, iy + 1);
                let n = a + (b - a) * tx + (c - a) * ty + (a - b - c + d) * tx * ty;
                low + (high - low) * n
            }
            Texture::Gradient { angle, offset, slope } => {
                let size = height.max(width) as f64;
                let t = (fx - width as f64 / 2.0) * angle.cos() + (fy - height as f64 / 2.0) * angle.sin();
                0.5 + offset + slope * t / size
            }
            Texture::Flat { value } => *value,
        };
        v.clamp(0.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    /// `None` for the base region covering the whole image.
    pub rect: Option<Rect>,
    pub texture: Texture,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Anomaly {
    /// A rectangle of foreign texture replacing the scene content.
    Paste { rect: Rect, texture: Texture },
    /// A thick line segment whose pixels are pushed away from their value.
    Scratch {
        from: (f64, f64),
        to: (f64, f64),
        half_width: f64,
        strength: f64,
    },
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dy, dx) = (b.0 - a.0, b.1 - a.1);
    let len2 = dy * dy + dx * dx;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dy + (p.1 - a.1) * dx) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qy, qx) = (a.0 + t * dy, a.1 + t * dx);
    ((p.0 - qy).powi(2) + (p.1 - qx).powi(2)).sqrt()
}

impl Anomaly {
    pub fn covers(&self, y: usize, x: usize) -> bool {
        match self {
            Anomaly::Paste { rect, .. } => rect.contains(y, x),
            Anomaly::Scratch {
                from, to, half_width, ..
            } => segment_distance((y as f64 + 0.5, x as f64 + 0.5), *from, *to) <= *half_width,
        }
    }
}

/// Everything needed to render one image and its ground truth.
///
/// Region 0 is the base and covers the image; later regions are painted on
/// top in order, so each pixel belongs to the last region containing it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub regions: Vec<Region>,
    pub anomaly: Option<Anomaly>,
}

impl SceneSpec {
    /// Index into `regions` of the region owning pixel `(y, x)`.
    pub fn region_at(&self, y: usize, x: usize) -> usize {
        self.regions
            .iter()
            .enumerate()
            .rev()
            .find(|(_, r)| r.rect.map_or(true, |rect| rect.contains(y, x)))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }

    pub fn render(&self) -> Image {
        let (h, w) = (self.height, self.width);
        let mut px = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let base = self.regions[self.region_at(y, x)].texture.sample(y, x, h, w);
                let v = match &self.anomaly {
                    Some(a @ Anomaly::Paste { texture, .. }) if a.covers(y, x) => texture.sample(y, x, h, w),
                    Some(a @ Anomaly::Scratch { strength, .. }) if a.covers(y, x) => {
                        if base < 0.5 {
                            base + strength
                        } else {
                            base - strength
                        }
                    }
                    _ => base,
                };
                px.push(v.clamp(0.0, 1.0));
            }
        }
        Image::new(h, w, 1, px).expect("rendered pixels lie in [0, 1]")
    }

    /// Row-major ground-truth anomaly mask; all false for normal scenes.
    pub fn anomaly_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.height * self.width];
        if let Some(a) = &self.anomaly {
            for y in 0..self.height {
                for x in 0..self.width {
                    mask[y * self.width + x] = a.covers(y, x);
                }
            }
        }
        mask
    }

    pub fn is_anomalous(&self) -> bool {
        self.anomaly.is_some()
    }
}
