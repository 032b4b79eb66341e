//! Task stream configuration and deterministic generation.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scene::{Anomaly, Rect, Region, SceneSpec, Texture};
use super::HarnessError;
use crate::encoder::{EncoderConfig, Image};
use crate::hash::Fnv1a;
use crate::memory::TrainImage;
use crate::scl::SclConfig;

/// Texture family of a task, with its base parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum FamilySpec {
    Stripes { period: f64, angle: f64 },
    Checker { cell: f64 },
    Blobs { count: usize, radius: f64 },
    ValueNoise { scale: f64 },
    Gradient { angle: f64 },
}

impl FamilySpec {
    fn kind(&self) -> &'static str {
        match self {
            FamilySpec::Stripes { .. } => "stripes",
            FamilySpec::Checker { .. } => "checker",
            FamilySpec::Blobs { .. } => "blobs",
            FamilySpec::ValueNoise { .. } => "value-noise",
            FamilySpec::Gradient { .. } => "gradient",
        }
    }

    fn validate(&self) -> Result<(), HarnessError> {
        let ok = match *self {
            FamilySpec::Stripes { period, angle } => period > 1.0 && angle.is_finite(),
            FamilySpec::Checker { cell } => cell >= 2.0,
            FamilySpec::Blobs { count, radius } => count >= 1 && radius > 1.0,
            FamilySpec::ValueNoise { scale } => scale >= 2.0,
            FamilySpec::Gradient { angle } => angle.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(HarnessError::Config(format!("bad {} parameters", self.kind())))
        }
    }

    /// Texture for one region. Variant 0 is the base look of the family;
    /// variant 1 is the contrasting look used for sub-regions.
    fn texture(&self, variant: usize, rng: &mut ChaCha8Rng, height: usize, width: usize) -> Texture {
        let alt = variant % 2 == 1;
        match *self {
            FamilySpec::Stripes { period, angle } => Texture::Stripes {
                period: if alt { period * 0.6 } else { period },
                angle: angle + if alt { FRAC_PI_2 } else { 0.0 } + rng.gen_range(-0.05..0.05),
                phase: rng.gen_range(0.0..2.0 * PI),
                contrast: if alt { 0.2 } else { 0.25 },
                mean: if alt { 0.45 } else { 0.35 },
            },
            FamilySpec::Checker { cell } => {
                let c = if alt { cell / 2.0 } else { cell };
                // half-cell phase steps keep the set of patch appearances small
                Texture::Checker {
                    cell: c,
                    offset_x: rng.gen_range(0..4) as f64 * c / 2.0,
                    offset_y: rng.gen_range(0..4) as f64 * c / 2.0,
                    low: if alt { 0.7 } else { 0.6 },
                    high: if alt { 0.9 } else { 1.0 },
                }
            }
            FamilySpec::Blobs { count, radius } => {
                let r = if alt { radius / 2.0 } else { radius };
                let n = if alt { count * 2 } else { count };
                Texture::Blobs {
                    // centres snap to a half-patch lattice
                    centers: (0..n)
                        .map(|_| {
                            let y = rng.gen_range(0..height / 4) as f64 * 4.0;
                            let x = rng.gen_range(0..width / 4) as f64 * 4.0;
                            (y, x)
                        })
                        .collect(),
                    radius: r * rng.gen_range(0.9..1.1),
                    background: if alt { 0.35 } else { 0.1 },
                    foreground: if alt { 0.15 } else { 0.4 },
                }
            }
            FamilySpec::ValueNoise { scale } => Texture::ValueNoise {
                scale: if alt { scale / 2.0 } else { scale },
                seed: rng.gen(),
                low: if alt { 0.45 } else { 0.35 },
                high: if alt { 0.75 } else { 0.85 },
            },
            FamilySpec::Gradient { angle } => Texture::Gradient {
                angle: angle + if alt { PI } else { 0.0 } + rng.gen_range(-0.1..0.1),
                offset: rng.gen_range(-0.03..0.03) + if alt { 0.05 } else { 0.0 },
                slope: 0.5,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnomalyKind {
    /// Rectangle of a foreign texture.
    Paste,
    /// Thick line pushing intensities away from their value.
    Scratch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalySpec {
    /// Kinds drawn uniformly per anomalous image.
    pub kinds: Vec<AnomalyKind>,
    /// Side length range of pasted rectangles, in pixels; scratches are
    /// 1.5x as long.
    pub min_size: usize,
    pub max_size: usize,
    pub scratch_half_width: f64,
    pub scratch_strength: f64,
}

impl Default for AnomalySpec {
    fn default() -> Self {
        Self {
            kinds: vec![AnomalyKind::Paste, AnomalyKind::Scratch],
            min_size: 12,
            max_size: 20,
            scratch_half_width: 2.0,
            scratch_strength: 0.4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    #[serde(flatten)]
    pub family: FamilySpec,
    pub train: usize,
    pub test_normal: usize,
    pub test_anomalous: usize,
}

impl TaskSpec {
    fn new(name: &str, family: FamilySpec) -> Self {
        Self {
            name: name.into(),
            family,
            train: 20,
            test_normal: 10,
            test_anomalous: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StreamConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub tasks: Vec<TaskSpec>,
    pub anomaly: AnomalySpec,
    /// Knowledge budget as a multiple of the patch count.
    pub knowledge_multiplier: usize,
    pub encoder: EncoderConfig,
    pub scl: SclConfig,
    /// Neighbour count of the score re-weighting.
    pub neighbours: usize,
    /// Gaussian sigma of the pixel map, in pixels.
    pub sigma: f64,
    /// Route every test image to its own task instead of matching keys.
    pub oracle_routing: bool,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            height: 64,
            width: 64,
            tasks: vec![
                TaskSpec::new("stripes", FamilySpec::Stripes { period: 8.0, angle: 0.3 }),
                TaskSpec::new("checker", FamilySpec::Checker { cell: 8.0 }),
                TaskSpec::new("blobs", FamilySpec::Blobs { count: 6, radius: 7.0 }),
                TaskSpec::new("noise", FamilySpec::ValueNoise { scale: 10.0 }),
                TaskSpec::new("gradient", FamilySpec::Gradient { angle: 0.8 }),
            ],
            anomaly: AnomalySpec::default(),
            knowledge_multiplier: 1,
            encoder: EncoderConfig::default(),
            scl: SclConfig::default(),
            neighbours: crate::inference::DEFAULT_NEIGHBOURS,
            sigma: crate::inference::DEFAULT_SIGMA,
            oracle_routing: false,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        self.encoder.validate()?;
        self.scl.validate()?;
        let p = self.encoder.patch_size;
        if self.height < 2 * p || self.width < 2 * p || self.height % p != 0 || self.width % p != 0 {
            return bad(format!(
                "image {}x{} must be a multiple of patch size {p} and at least two patches wide",
                self.height, self.width
            ));
        }
        if self.encoder.channels != 1 {
            return bad("generated scenes are grayscale; encoder.channels must be 1".into());
        }
        if self.tasks.is_empty() {
            return bad("at least one task is required".into());
        }
        for (i, t) in self.tasks.iter().enumerate() {
            t.family.validate()?;
            if t.train == 0 || t.test_normal == 0 || t.test_anomalous == 0 {
                return bad(format!("task {i} ({}) has a zero count", t.name));
            }
            if self.tasks[..i].iter().any(|o| o.family.kind() == t.family.kind()) {
                return bad(format!("task {i} repeats texture family {}", t.family.kind()));
            }
        }
        if ![1, 2, 4].contains(&self.knowledge_multiplier) {
            return bad(format!("knowledge multiplier {} not in {{1, 2, 4}}", self.knowledge_multiplier));
        }
        let a = &self.anomaly;
        if a.kinds.is_empty() || a.min_size == 0 || a.min_size > a.max_size || a.max_size >= self.height.min(self.width) {
            return bad("anomaly size range or kinds invalid".into());
        }
        if !(a.scratch_half_width > 0.0) || !(a.scratch_strength > 0.0 && a.scratch_strength <= 1.0) {
            return bad("scratch parameters invalid".into());
        }
        if self.neighbours < 2 {
            return bad("neighbours must be at least 2".into());
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return bad("sigma must be positive".into());
        }
        Ok(())
    }

    pub fn patches(&self) -> usize {
        (self.height / self.encoder.patch_size) * (self.width / self.encoder.patch_size)
    }

    pub fn knowledge_budget(&self) -> usize {
        self.knowledge_multiplier * self.patches()
    }
}

/// One generated image with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub scene: SceneSpec,
    pub image: Image,
    /// Row-major pixel anomaly mask.
    pub mask: Vec<bool>,
}

impl Sample {
    pub fn is_anomalous(&self) -> bool {
        self.scene.is_anomalous()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub name: String,
    pub train: Vec<Sample>,
    /// Normal samples first, then anomalous ones.
    pub test: Vec<Sample>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stream {
    pub tasks: Vec<TaskData>,
}

#[derive(Clone, Copy)]
enum Split {
    Train = 0,
    TestNormal = 1,
    TestAnomalous = 2,
}

fn sample_rng(seed: u64, task: usize, split: Split, index: usize) -> ChaCha8Rng {
    let mut h = Fnv1a::new();
    for v in [seed, task as u64, split as u64, index as u64] {
        h.update(&v.to_le_bytes());
    }
    ChaCha8Rng::seed_from_u64(h.finish())
}

/// Textures foreign to every family, used by paste anomalies.
fn foreign_texture(rng: &mut ChaCha8Rng) -> Texture {
    match rng.gen_range(0..4) {
        0 => Texture::Stripes {
            period: 3.0,
            angle: rng.gen_range(0.0..PI),
            phase: 0.0,
            contrast: 0.5,
            mean: 0.5,
        },
        1 => Texture::Checker {
            cell: 2.0,
            offset_x: 0.0,
            offset_y: 0.0,
            low: 0.0,
            high: 1.0,
        },
        2 => Texture::Flat {
            value: if rng.gen_bool(0.5) { 0.02 } else { 0.98 },
        },
        _ => Texture::ValueNoise {
            scale: 1.5,
            seed: rng.gen(),
            low: 0.0,
            high: 1.0,
        },
    }
}

fn make_anomaly(cfg: &StreamConfig, rng: &mut ChaCha8Rng) -> Anomaly {
    let a = &cfg.anomaly;
    let (h, w) = (cfg.height, cfg.width);
    match a.kinds[rng.gen_range(0..a.kinds.len())] {
        AnomalyKind::Paste => {
            let rh = rng.gen_range(a.min_size..=a.max_size);
            let rw = rng.gen_range(a.min_size..=a.max_size);
            let rect = Rect {
                y: rng.gen_range(0..=h - rh),
                x: rng.gen_range(0..=w - rw),
                h: rh,
                w: rw,
            };
            Anomaly::Paste {
                rect,
                texture: foreign_texture(rng),
            }
        }
        AnomalyKind::Scratch => {
            let len = 1.5 * rng.gen_range(a.min_size..=a.max_size) as f64;
            let theta = rng.gen_range(0.0..PI);
            let (dy, dx) = (len * theta.sin(), len * theta.cos());
            let margin = 2.0;
            let y0 = rng.gen_range(margin..(h as f64 - dy - margin).max(margin + 1.0));
            let x0 = if dx >= 0.0 {
                rng.gen_range(margin..(w as f64 - dx - margin).max(margin + 1.0))
            } else {
                rng.gen_range((margin - dx)..(w as f64 - margin).max(margin - dx + 1.0))
            };
            Anomaly::Scratch {
                from: (y0, x0),
                to: (y0 + dy, x0 + dx),
                half_width: a.scratch_half_width,
                strength: a.scratch_strength,
            }
        }
    }
}

/// Normal scene: the family's base texture with one to three patch-aligned
/// sub-regions in the contrasting variant.
fn make_scene(cfg: &StreamConfig, family: &FamilySpec, rng: &mut ChaCha8Rng) -> SceneSpec {
    let (h, w, p) = (cfg.height, cfg.width, cfg.encoder.patch_size);
    let mut regions = vec![Region {
        rect: None,
        texture: family.texture(0, rng, h, w),
    }];
    let (gh, gw) = (h / p, w / p);
    let extra = rng.gen_range(1..=3);
    for _ in 0..extra {
        let ch = rng.gen_range(2..=(gh / 2).max(2)).min(gh);
        let cw = rng.gen_range(2..=(gw / 2).max(2)).min(gw);
        let rect = Rect {
            y: rng.gen_range(0..=gh - ch) * p,
            x: rng.gen_range(0..=gw - cw) * p,
            h: ch * p,
            w: cw * p,
        };
        regions.push(Region {
            rect: Some(rect),
            texture: family.texture(1, rng, h, w),
        });
    }
    SceneSpec {
        height: h,
        width: w,
        regions,
        anomaly: None,
    }
}

/// Renders and quantizes to 8 bits so that images survive a PGM round trip
/// unchanged.
pub fn render_sample(scene: SceneSpec) -> Sample {
    let raw = scene.render();
    let px = raw.pixels().iter().map(|v| (v * 255.0).round() / 255.0).collect();
    let image = Image::new(scene.height, scene.width, 1, px).expect("quantized pixels stay in range");
    let mask = scene.anomaly_mask();
    Sample { scene, image, mask }
}

fn gen_one(cfg: &StreamConfig, task: usize, split: Split, index: usize) -> Sample {
    let mut rng = sample_rng(cfg.seed, task, split, index);
    let mut scene = make_scene(cfg, &cfg.tasks[task].family, &mut rng);
    if let Split::TestAnomalous = split {
        // a scratch can be clamped into invisibility on saturated pixels;
        // redraw until the mask is nonempty
        loop {
            scene.anomaly = Some(make_anomaly(cfg, &mut rng));
            if scene.anomaly_mask().iter().any(|&m| m) {
                break;
            }
        }
    }
    render_sample(scene)
}

/// Generates the whole stream. Every sample is a pure function of the seed,
/// task, split, and index.
pub fn gen_stream(cfg: &StreamConfig) -> Result<Stream, HarnessError> {
    cfg.validate()?;
    let tasks = cfg
        .tasks
        .iter()
        .enumerate()
        .map(|(t, spec)| {
            let train = (0..spec.train).map(|i| gen_one(cfg, t, Split::Train, i)).collect();
            let test = (0..spec.test_normal)
                .map(|i| gen_one(cfg, t, Split::TestNormal, i))
                .chain((0..spec.test_anomalous).map(|i| gen_one(cfg, t, Split::TestAnomalous, i)))
                .collect();
            TaskData {
                name: spec.name.clone(),
                train,
                test,
            }
        })
        .collect();
    Ok(Stream { tasks })
}

/// Hands out each task's training set once, in task order, and keeps a log
/// of every request. Training data of a finished task cannot be reached
/// again through the gate.
#[derive(Debug)]
pub struct TrainingGate {
    sets: Vec<Option<Vec<Sample>>>,
    next: usize,
    log: Vec<usize>,
}

impl TrainingGate {
    pub fn new(sets: Vec<Vec<Sample>>) -> Self {
        Self {
            sets: sets.into_iter().map(Some).collect(),
            next: 0,
            log: Vec::new(),
        }
    }

    /// Moves task `task`'s training images out of the gate.
    pub fn checkout(&mut self, task: usize) -> Result<Vec<TrainImage>, HarnessError> {
        self.log.push(task);
        if task != self.next {
            return Err(HarnessError::Rehearsal {
                task,
                reason: format!("expected task {}", self.next),
            });
        }
        let set = self
            .sets
            .get_mut(task)
            .and_then(Option::take)
            .ok_or_else(|| HarnessError::Rehearsal {
                task,
                reason: "no such task".into(),
            })?;
        self.next += 1;
        Ok(set
            .into_iter()
            .map(|s| TrainImage {
                image: s.image,
                scene: Some(s.scene),
            })
            .collect())
    }

    /// Every checkout request so far, including refused ones.
    pub fn log(&self) -> &[usize] {
        &self.log
    }
}

/// Splits a stream into its training gate and the per-task test sets.
pub fn split_stream(stream: Stream) -> (TrainingGate, Vec<(String, Vec<Sample>)>) {
    let mut train = Vec::with_capacity(stream.tasks.len());
    let mut tests = Vec::with_capacity(stream.tasks.len());
    for t in stream.tasks {
        train.push(t.train);
        tests.push((t.name, t.test));
    }
    (TrainingGate::new(train), tests)
}
