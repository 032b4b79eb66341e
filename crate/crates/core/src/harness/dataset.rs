//! On-disk form of a generated stream.
//!
//! ```text
//! manifest.json                 config echo + per-sample scene descriptions
//! task00/train/000.pgm          image
//! task00/train/000_labels.pgm   structure labels
//! task00/test/000.pgm           image
//! task00/test/000_mask.pgm      anomaly mask (0 / 255)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::run::evaluate_task;
use super::scene::SceneSpec;
use super::stream::{Sample, Stream, StreamConfig, TaskData};
use super::HarnessError;
use crate::encoder::{Encoder, Image};
use crate::inference::InferConfig;
use crate::memory::MemorySpace;
use crate::pgm::Pgm;
use crate::segmenter::segment_synthetic;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SampleEntry {
    image: String,
    /// Label map for training images, mask for test images.
    aux: String,
    scene: SceneSpec,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TaskManifest {
    name: String,
    train: Vec<SampleEntry>,
    test: Vec<SampleEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    config: StreamConfig,
    tasks: Vec<TaskManifest>,
}

fn mask_pgm(s: &Sample) -> Pgm {
    let unit: Vec<f64> = s.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    Pgm::from_unit(s.scene.width, s.scene.height, &unit)
}

/// Writes `stream` under `dir`.
pub fn save_stream(cfg: &StreamConfig, stream: &Stream, dir: &Path) -> Result<(), HarnessError> {
    let mut tasks = Vec::with_capacity(stream.tasks.len());
    for (t, task) in stream.tasks.iter().enumerate() {
        let base = PathBuf::from(format!("task{t:02}"));
        fs::create_dir_all(dir.join(&base).join("train"))?;
        fs::create_dir_all(dir.join(&base).join("test"))?;
        let mut train = Vec::with_capacity(task.train.len());
        for (i, s) in task.train.iter().enumerate() {
            let image = base.join("train").join(format!("{i:03}.pgm"));
            let aux = base.join("train").join(format!("{i:03}_labels.pgm"));
            Pgm::from_unit(s.scene.width, s.scene.height, s.image.pixels()).write(&dir.join(&image))?;
            segment_synthetic(&s.scene).save(&dir.join(&aux))?;
            train.push(SampleEntry {
                image: image.to_string_lossy().into_owned(),
                aux: aux.to_string_lossy().into_owned(),
                scene: s.scene.clone(),
            });
        }
        let mut test = Vec::with_capacity(task.test.len());
        for (i, s) in task.test.iter().enumerate() {
            let image = base.join("test").join(format!("{i:03}.pgm"));
            let aux = base.join("test").join(format!("{i:03}_mask.pgm"));
            Pgm::from_unit(s.scene.width, s.scene.height, s.image.pixels()).write(&dir.join(&image))?;
            mask_pgm(s).write(&dir.join(&aux))?;
            test.push(SampleEntry {
                image: image.to_string_lossy().into_owned(),
                aux: aux.to_string_lossy().into_owned(),
                scene: s.scene.clone(),
            });
        }
        tasks.push(TaskManifest {
            name: task.name.clone(),
            train,
            test,
        });
    }
    let manifest = Manifest {
        config: cfg.clone(),
        tasks,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn load_image(path: &Path) -> Result<Image, HarnessError> {
    let pgm = Pgm::read(path)?;
    Ok(Image::new(pgm.height, pgm.width, 1, pgm.to_unit())?)
}

fn load_sample(dir: &Path, e: &SampleEntry, is_test: bool) -> Result<Sample, HarnessError> {
    let image = load_image(&dir.join(&e.image))?;
    let mask = if is_test {
        Pgm::read(&dir.join(&e.aux))?.samples.iter().map(|&v| v > 0).collect()
    } else {
        vec![false; image.height() * image.width()]
    };
    Ok(Sample {
        scene: e.scene.clone(),
        image,
        mask,
    })
}

/// Reads a directory written by [`save_stream`]. Images and masks come from
/// the PGM files.
pub fn load_stream(dir: &Path) -> Result<(StreamConfig, Stream), HarnessError> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let tasks = manifest
        .tasks
        .iter()
        .map(|t| {
            Ok(TaskData {
                name: t.name.clone(),
                train: t.train.iter().map(|e| load_sample(dir, e, false)).collect::<Result<_, HarnessError>>()?,
                test: t.test.iter().map(|e| load_sample(dir, e, true)).collect::<Result<_, HarnessError>>()?,
            })
        })
        .collect::<Result<_, HarnessError>>()?;
    Ok((manifest.config, Stream { tasks }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub name: String,
    pub image_auroc: f64,
    pub pixel_aupr: f64,
    pub selection_accuracy: f64,
}

/// Evaluation of a frozen memory on stored test sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tasks: Vec<TaskScore>,
    pub average_image_auroc: f64,
    pub average_pixel_aupr: f64,
    pub selection_accuracy: f64,
}

/// Evaluates the test sets of the first `memory.len()` tasks of `stream`.
pub fn evaluate_stream(
    encoder: &Encoder,
    memory: &MemorySpace,
    stream: &Stream,
    infer_cfg: &InferConfig,
) -> Result<EvalReport, HarnessError> {
    let n = memory.len().min(stream.tasks.len());
    if n == 0 {
        return Err(HarnessError::Config("nothing to evaluate: empty memory or dataset".into()));
    }
    let (mut tasks, mut correct, mut total) = (Vec::with_capacity(n), 0.0, 0usize);
    for (j, t) in stream.tasks.iter().take(n).enumerate() {
        let e = evaluate_task(encoder, memory, j, &t.test, infer_cfg, false)?;
        correct += e.selection_accuracy * t.test.len() as f64;
        total += t.test.len();
        tasks.push(TaskScore {
            name: t.name.clone(),
            image_auroc: e.image_auroc,
            pixel_aupr: e.pixel_aupr,
            selection_accuracy: e.selection_accuracy,
        });
    }
    Ok(EvalReport {
        average_image_auroc: tasks.iter().map(|t| t.image_auroc).sum::<f64>() / n as f64,
        average_pixel_aupr: tasks.iter().map(|t| t.pixel_aupr).sum::<f64>() / n as f64,
        selection_accuracy: correct / total as f64,
        tasks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::stream::gen_stream;

    #[test]
    fn stream_survives_disk() {
        let mut cfg = StreamConfig::default();
        cfg.tasks.truncate(2);
        for t in &mut cfg.tasks {
            t.train = 2;
            t.test_normal = 1;
            t.test_anomalous = 2;
        }
        let stream = gen_stream(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_stream(&cfg, &stream, dir.path()).unwrap();
        let (back_cfg, back) = load_stream(dir.path()).unwrap();
        assert_eq!(back_cfg, cfg);
        assert_eq!(back, stream);
        assert!(dir.path().join("task01/test/002_mask.pgm").exists());
    }
}
