//! Continual protocol: train each task once, then evaluate every task seen
//! so far.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::stream::{gen_stream, split_stream, Sample, StreamConfig};
use super::HarnessError;
use crate::encoder::Encoder;
use crate::inference::{infer, infer_with_task, AnomalyResult, InferConfig};
use crate::memory::{build_task_entry, persist, MemorySpace, TaskBuild};
use crate::metrics::{aupr, auroc, avg_fm, PerfMatrix};
use crate::segmenter::SyntheticSegmenter;

/// Metrics of one test set against one memory snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskEval {
    pub image_auroc: f64,
    pub pixel_aupr: f64,
    pub selection_accuracy: f64,
    pub results: Vec<AnomalyResult>,
}

/// Runs inference over one task's test set. `oracle` forces routing to
/// `task` instead of matching keys.
pub fn evaluate_task(
    encoder: &Encoder,
    memory: &MemorySpace,
    task: usize,
    test: &[Sample],
    infer_cfg: &InferConfig,
    oracle: bool,
) -> Result<TaskEval, HarnessError> {
    let results: Vec<AnomalyResult> = test
        .par_iter()
        .map(|s| {
            if oracle {
                infer_with_task(&s.image, encoder, memory, task, infer_cfg)
            } else {
                infer(&s.image, encoder, memory, infer_cfg)
            }
        })
        .collect::<Result<_, _>>()?;
    let labels: Vec<bool> = test.iter().map(Sample::is_anomalous).collect();
    let scores: Vec<f64> = results.iter().map(|r| r.image_score).collect();
    let image_auroc = auroc(&scores, &labels)?;

    // pixels of every test image pooled into one population
    let pixels: Vec<f64> = results.iter().flat_map(|r| r.map.iter().copied()).collect();
    let truth: Vec<bool> = test.iter().flat_map(|s| s.mask.iter().copied()).collect();
    let pixel_aupr = aupr(&pixels, &truth)?;

    let correct = results.iter().filter(|r| r.selected_task == task).count();
    Ok(TaskEval {
        image_auroc,
        pixel_aupr,
        selection_accuracy: correct as f64 / results.len() as f64,
        results,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub name: String,
    pub knowledge_rows: usize,
    /// Mean SCL loss per epoch.
    pub loss_trace: Vec<f64>,
    pub final_image_auroc: f64,
    pub final_pixel_aupr: f64,
    pub final_selection_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: StreamConfig,
    pub tasks: Vec<TaskSummary>,
    pub average_image_auroc: f64,
    pub average_pixel_aupr: f64,
    /// `None` with a single task.
    pub fm_image_auroc: Option<f64>,
    pub fm_pixel_aupr: Option<f64>,
    /// Fraction of all final-stage test images routed to their own task.
    pub selection_accuracy: f64,
    pub image_auroc: PerfMatrix,
    pub pixel_aupr: PerfMatrix,
    pub selection: PerfMatrix,
    /// Order in which training sets were requested.
    pub train_access_log: Vec<usize>,
    pub wall_clock_seconds: f64,
}

/// Final-stage inference result for one test image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub task: usize,
    pub index: usize,
    pub anomalous: bool,
    pub result: AnomalyResult,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub report: MetricsReport,
    pub memory: MemorySpace,
    pub records: Vec<ImageRecord>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Generates the stream and runs the protocol.
pub fn run_continual(cfg: &StreamConfig) -> Result<RunOutput, HarnessError> {
    let start = Instant::now();
    let stream = gen_stream(cfg)?;
    let (mut gate, tests) = split_stream(stream);
    let encoder = Encoder::new(cfg.encoder.clone())?;
    let segmenter = SyntheticSegmenter::default();
    let infer_cfg = InferConfig {
        neighbours: cfg.neighbours,
        sigma: cfg.sigma,
    };
    let n = cfg.tasks.len();
    let mut memory = MemorySpace::for_encoder(&encoder);
    let (mut t_img, mut t_pix, mut t_sel) = (PerfMatrix::with_tasks(n), PerfMatrix::with_tasks(n), PerfMatrix::with_tasks(n));
    let mut traces = Vec::with_capacity(n);
    let mut last_row = Vec::new();

    for t in 0..n {
        let train = gate.checkout(t)?;
        let build = TaskBuild {
            task_id: t,
            name: cfg.tasks[t].name.clone(),
            encoder: &encoder,
            segmenter: &segmenter,
            scl: &cfg.scl,
            knowledge_budget: cfg.knowledge_budget(),
        };
        let (entry, trace) = build_task_entry(&build, &train)?;
        drop(train);
        traces.push((entry.knowledge.rows(), trace.training.loss_trace));
        memory.push(entry)?;

        let row: Vec<TaskEval> = (0..=t)
            .map(|j| evaluate_task(&encoder, &memory, j, &tests[j].1, &infer_cfg, cfg.oracle_routing))
            .collect::<Result<_, _>>()?;
        for (j, e) in row.iter().enumerate() {
            t_img.set(t, j, e.image_auroc);
            t_pix.set(t, j, e.pixel_aupr);
            t_sel.set(t, j, e.selection_accuracy);
        }
        last_row = row;
    }

    let tasks: Vec<TaskSummary> = last_row
        .iter()
        .zip(traces)
        .zip(&cfg.tasks)
        .map(|((e, (rows, trace)), spec)| TaskSummary {
            name: spec.name.clone(),
            knowledge_rows: rows,
            loss_trace: trace,
            final_image_auroc: e.image_auroc,
            final_pixel_aupr: e.pixel_aupr,
            final_selection_accuracy: e.selection_accuracy,
        })
        .collect();
    let fm = |m: &PerfMatrix| if n >= 2 { avg_fm(m, n).map(Some) } else { Ok(None) };
    let total: usize = last_row.iter().map(|e| e.results.len()).sum();
    let correct: usize = last_row
        .iter()
        .enumerate()
        .map(|(j, e)| e.results.iter().filter(|r| r.selected_task == j).count())
        .sum();

    let mut records = Vec::with_capacity(total);
    for (j, e) in last_row.into_iter().enumerate() {
        for (i, result) in e.results.into_iter().enumerate() {
            records.push(ImageRecord {
                task: j,
                index: i,
                anomalous: tests[j].1[i].is_anomalous(),
                result,
            });
        }
    }

    let report = MetricsReport {
        config: cfg.clone(),
        average_image_auroc: mean(tasks.iter().map(|t| t.final_image_auroc)),
        average_pixel_aupr: mean(tasks.iter().map(|t| t.final_pixel_aupr)),
        tasks,
        fm_image_auroc: fm(&t_img)?,
        fm_pixel_aupr: fm(&t_pix)?,
        selection_accuracy: correct as f64 / total as f64,
        image_auroc: t_img,
        pixel_aupr: t_pix,
        selection: t_sel,
        train_access_log: gate.log().to_vec(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    Ok(RunOutput { report, memory, records })
}

/// Sidecar written next to each heatmap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSidecar {
    /// Ground truth, known only for generated test images.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anomalous: Option<bool>,
    pub selected_task: usize,
    pub image_score: f64,
    pub min: f64,
    pub max: f64,
}

/// Writes a heatmap PGM and its JSON sidecar (same stem, `.json`).
pub fn write_heatmap(result: &AnomalyResult, path: &Path, sidecar: &HeatmapSidecar) -> Result<(), HarnessError> {
    let (pgm, _) = result.heatmap();
    pgm.write(path)?;
    fs::write(path.with_extension("json"), serde_json::to_string_pretty(sidecar)?)?;
    Ok(())
}

/// Writes `report.json`, `memory.ucad`, and one heatmap per final-stage
/// test image under `heatmaps/`.
pub fn emit(out: &RunOutput, dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir.join("heatmaps"))?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&out.report)?)?;
    persist(&out.memory, &dir.join("memory.ucad"))?;
    for r in &out.records {
        let (_, range) = r.result.heatmap();
        let sidecar = HeatmapSidecar {
            task: Some(r.task),
            index: Some(r.index),
            anomalous: Some(r.anomalous),
            selected_task: r.result.selected_task,
            image_score: r.result.image_score,
            min: range.min,
            max: range.max,
        };
        let path = dir.join("heatmaps").join(format!("task{:02}_{:03}.pgm", r.task, r.index));
        write_heatmap(&r.result, &path, &sidecar)?;
    }
    Ok(())
}
