//! Key–prompt–knowledge memory.
//!
//! Each learned task contributes one immutable [`TaskEntry`]: a key built by
//! farthest point sampling over frozen patch features (used to recognise
//! the task at test time), prompts trained with the contrastive objective,
//! and a knowledge bank built by coreset selection over prompted features.

mod persist;
mod select;

pub use persist::{load, load_for_encoder, persist, read_from, write_to, FORMAT_VERSION, MAGIC};
pub use select::{coreset_select, coverage_radius, fps_select};

use rayon::prelude::*;
use thiserror::Error;

use crate::encoder::{Encoder, EncoderError, Image, PromptSet};
use crate::harness::scene::SceneSpec;
use crate::numerics::{NumericsError, Tensor};
use crate::scl::{train_prompts, SclConfig, SclError, SclSample, TrainOutcome};
use crate::segmenter::{Segmenter, SegmentError};

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("selection size {k} outside 1..={n}")]
    SelectionSize { k: usize, n: usize },
    #[error("no points to select from")]
    EmptyInput,
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("invalid task entry: {0}")]
    InvalidEntry(String),
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("file truncated")]
    Truncated,
    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    ChecksumMismatch { stored: u64, computed: u64 },
    #[error("encoder fingerprint mismatch: memory {stored:#018x}, encoder {encoder:#018x}")]
    FingerprintMismatch { stored: u64, encoder: u64 },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Scl(#[from] SclError),
    #[error(transparent)]
    Segment(#[from] SegmentError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskEntry {
    pub task_id: usize,
    /// `[N_p, C]` frozen-feature key.
    pub key: Tensor,
    pub prompts: PromptSet,
    /// `[min(budget, available), C]` prompted-feature coreset.
    pub knowledge: Tensor,
    pub knowledge_budget: usize,
    pub name: String,
    /// Number of entries that existed when this one was created.
    pub created_at: usize,
}

/// Ordered, append-only collection of task entries built with one encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct MemorySpace {
    entries: Vec<TaskEntry>,
    /// Fingerprint of the encoder all entries were built with, when known.
    fingerprint: Option<u64>,
    version: u32,
}

impl MemorySpace {
    pub fn new(fingerprint: u64) -> Self {
        Self {
            entries: Vec::new(),
            fingerprint: Some(fingerprint),
            version: FORMAT_VERSION,
        }
    }

    pub(crate) fn from_parts(entries: Vec<TaskEntry>, fingerprint: Option<u64>, version: u32) -> Self {
        Self {
            entries,
            fingerprint,
            version,
        }
    }

    pub fn for_encoder(encoder: &Encoder) -> Self {
        Self::new(encoder.fingerprint())
    }

    pub fn entries(&self) -> &[TaskEntry] {
        &self.entries
    }

    pub fn get(&self, task: usize) -> Option<&TaskEntry> {
        self.entries.get(task)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn fingerprint(&self) -> Option<u64> {
        self.fingerprint
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    /// Appends an entry. Its id must be the next index and its key must
    /// match the width and row count of the existing keys.
    pub fn push(&mut self, entry: TaskEntry) -> Result<(), MemoryError> {
        if entry.task_id != self.entries.len() {
            return Err(MemoryError::InvalidEntry(format!(
                "task id {} but {} entries exist",
                entry.task_id,
                self.entries.len()
            )));
        }
        if let Some(first) = self.entries.first() {
            if first.key.shape() != entry.key.shape() || first.knowledge.cols() != entry.knowledge.cols() {
                return Err(MemoryError::InvalidEntry(format!(
                    "key {:?} / knowledge width {} differ from existing {:?} / {}",
                    entry.key.shape(),
                    entry.knowledge.cols(),
                    first.key.shape(),
                    first.knowledge.cols()
                )));
            }
        }
        if entry.key.cols() != entry.knowledge.cols() {
            return Err(MemoryError::InvalidEntry("key and knowledge widths differ".into()));
        }
        self.entries.push(entry);
        Ok(())
    }

    /// Fails if the memory records a fingerprint different from `encoder`'s.
    pub fn check_encoder(&self, encoder: &Encoder) -> Result<(), MemoryError> {
        match self.fingerprint {
            Some(stored) if stored != encoder.fingerprint() => Err(MemoryError::FingerprintMismatch {
                stored,
                encoder: encoder.fingerprint(),
            }),
            _ => Ok(()),
        }
    }
}

/// One normal training image. `scene` is present for generated data and
/// lets the synthetic segmenter return exact structure labels.
#[derive(Clone, Debug)]
pub struct TrainImage {
    pub image: Image,
    pub scene: Option<SceneSpec>,
}

/// Extra output of [`build_task_entry`], kept for reporting.
#[derive(Clone, Debug)]
pub struct BuildTrace {
    pub training: TrainOutcome,
    /// Rows available to the knowledge coreset.
    pub candidate_rows: usize,
}

pub struct TaskBuild<'a> {
    pub task_id: usize,
    pub name: String,
    pub encoder: &'a Encoder,
    pub segmenter: &'a dyn Segmenter,
    pub scl: &'a SclConfig,
    pub knowledge_budget: usize,
}

/// Builds the key, prompts, and knowledge for one task from its training
/// images.
pub fn build_task_entry(spec: &TaskBuild<'_>, train: &[TrainImage]) -> Result<(TaskEntry, BuildTrace), MemoryError> {
    if train.is_empty() {
        return Err(MemoryError::EmptyTrainingSet);
    }
    if spec.knowledge_budget == 0 {
        return Err(MemoryError::InvalidEntry("knowledge budget must be positive".into()));
    }
    let encoder = spec.encoder;

    // Task identification: frozen features, compressed to one image's worth.
    let frozen: Vec<Tensor> = train
        .par_iter()
        .map(|t| encoder.encode(&t.image, None).map(|f| f.features))
        .collect::<Result<_, _>>()?;
    let n_p = frozen[0].rows();
    let all_frozen = Tensor::vstack(&frozen.iter().collect::<Vec<_>>())?;
    let key = all_frozen.select_rows(&fps_select(&all_frozen, n_p)?);

    // Task adaptation: contrastively trained prompts.
    let samples: Vec<SclSample> = train
        .iter()
        .map(|t| {
            let labels = spec.segmenter.segment(&t.image, t.scene.as_ref())?;
            Ok(SclSample::new(encoder, t.image.clone(), &labels)?)
        })
        .collect::<Result<_, MemoryError>>()?;
    let training = train_prompts(encoder, &samples, &PromptSet::zeros(encoder.config()), spec.scl)?;

    // Knowledge: coreset of prompted features.
    let prompted: Vec<Tensor> = train
        .par_iter()
        .map(|t| encoder.encode(&t.image, Some(&training.prompts)).map(|f| f.features))
        .collect::<Result<_, _>>()?;
    let all_prompted = Tensor::vstack(&prompted.iter().collect::<Vec<_>>())?;
    let k = spec.knowledge_budget.min(all_prompted.rows());
    let knowledge = all_prompted.select_rows(&coreset_select(&all_prompted, k)?);

    let entry = TaskEntry {
        task_id: spec.task_id,
        key,
        prompts: training.prompts.clone(),
        knowledge,
        knowledge_budget: spec.knowledge_budget,
        name: spec.name.clone(),
        created_at: spec.task_id,
    };
    let trace = BuildTrace {
        training,
        candidate_rows: all_prompted.rows(),
    };
    Ok((entry, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::segmenter::SyntheticSegmenter;

    fn tiny() -> Encoder {
        Encoder::new(EncoderConfig {
            patch_size: 4,
            embed_dim: 8,
            num_layers: 2,
            num_heads: 2,
            tap_layer: 1,
            ..EncoderConfig::default()
        })
        .unwrap()
    }

    fn images(n: usize) -> Vec<TrainImage> {
        (0..n)
            .map(|s| {
                let px = (0..256).map(|i| (((i * 7 + s * 13) % 17) as f64) / 16.0).collect();
                TrainImage {
                    image: Image::new(16, 16, 1, px).unwrap(),
                    scene: None,
                }
            })
            .collect()
    }

    fn quick_scl() -> SclConfig {
        SclConfig {
            epochs: 1,
            batch_size: 4,
            ..SclConfig::default()
        }
    }

    fn spec<'a>(enc: &'a Encoder, seg: &'a SyntheticSegmenter, scl: &'a SclConfig, budget: usize) -> TaskBuild<'a> {
        TaskBuild {
            task_id: 0,
            name: "t0".into(),
            encoder: enc,
            segmenter: seg,
            scl,
            knowledge_budget: budget,
        }
    }

    #[test]
    fn knowledge_rows_follow_budget() {
        let enc = tiny();
        let seg = SyntheticSegmenter::default();
        let scl = quick_scl();
        let data = images(4);
        for (budget, rows) in [(16, 16), (32, 32), (64, 64), (1000, 64)] {
            let (entry, trace) = build_task_entry(&spec(&enc, &seg, &scl, budget), &data).unwrap();
            assert_eq!(entry.knowledge.rows(), rows);
            assert_eq!(entry.key.shape(), &[16, 8]);
            assert_eq!(trace.candidate_rows, 64);
        }
    }

    #[test]
    fn single_image_key_is_a_permutation_of_its_features() {
        let enc = tiny();
        let seg = SyntheticSegmenter::default();
        let scl = quick_scl();
        let data = images(1);
        let (entry, _) = build_task_entry(&spec(&enc, &seg, &scl, 16), &data).unwrap();
        let feats = enc.encode(&data[0].image, None).unwrap().features;
        let sort = |t: &Tensor| {
            let mut rows: Vec<Vec<u64>> = t.iter_rows().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
            rows.sort();
            rows
        };
        assert_eq!(sort(&entry.key), sort(&feats));
    }

    #[test]
    fn empty_training_set_is_rejected() {
        let enc = tiny();
        let seg = SyntheticSegmenter::default();
        let scl = quick_scl();
        assert!(matches!(
            build_task_entry(&spec(&enc, &seg, &scl, 4), &[]),
            Err(MemoryError::EmptyTrainingSet)
        ));
    }

    #[test]
    fn push_enforces_contiguous_ids_and_shapes() {
        let enc = tiny();
        let seg = SyntheticSegmenter::default();
        let scl = quick_scl();
        let (entry, _) = build_task_entry(&spec(&enc, &seg, &scl, 8), &images(2)).unwrap();
        let mut mem = MemorySpace::for_encoder(&enc);
        let mut skip = entry.clone();
        skip.task_id = 1;
        assert!(mem.push(skip).is_err());
        mem.push(entry.clone()).unwrap();
        let snapshot = mem.entries()[0].clone();
        let mut next = entry.clone();
        next.task_id = 1;
        next.key = Tensor::zeros(vec![3, 8]);
        assert!(mem.push(next).is_err());
        let mut next = entry;
        next.task_id = 1;
        mem.push(next).unwrap();
        assert_eq!(mem.entries()[0], snapshot);
        assert_eq!(mem.len(), 2);
    }

    #[test]
    fn fingerprint_check() {
        let enc = tiny();
        let other = Encoder::new(EncoderConfig {
            seed: 9,
            ..enc.config().clone()
        })
        .unwrap();
        let mem = MemorySpace::for_encoder(&enc);
        assert!(mem.check_encoder(&enc).is_ok());
        assert!(matches!(
            mem.check_encoder(&other),
            Err(MemoryError::FingerprintMismatch { .. })
        ));
    }
}
