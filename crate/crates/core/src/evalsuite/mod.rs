//! Dense-prediction metrics, evaluation protocol and ranking tables.

mod metrics;
mod table;

#[cfg(test)]
mod tests;

use std::collections::BTreeMap;
use std::fmt::Write as _;

pub use metrics::{
    align_affine, connectivity_error, metric_absrel, metric_binary, metric_delta1, metric_matting,
    metric_normal, BinaryMetrics, MattingMetrics, ANGLE_THRESHOLD_DEG, CONN_STEP, DELTA1_THRESHOLD,
    DEPTH_FLOOR, MATTING_SCALE,
};
pub use table::{average_ranks, higher_is_better, render_table};

use crate::datamix::{image_tensor, DEPTH_SCALE};
use crate::error::{Error, Result};
use crate::networks::PredictorState;
use crate::scenegen::{DenseSample, Raster, RasterTag};
use crate::task::Task;

/// Function evaluations of the single-step student: one network, one step.
pub const STUDENT_NFE: &str = "1 × 1";

/// Metric names reported for each task, in report order.
pub fn metric_names(task: Task) -> &'static [&'static str] {
    match task {
        Task::Depth => &["absrel", "delta1"],
        Task::Normal => &["mean_angle", "within_11.25"],
        Task::Matting => &["sad", "mad", "mse", "conn"],
    }
}

/// True for metrics whose values are fractions in `[0, 1]`.
pub fn is_fraction(name: &str) -> bool {
    matches!(name, "delta1" | "within_11.25" | "iou" | "pa" | "dice")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Protocol {
    /// Affine-align depth before AbsRel and δ1.
    pub align: bool,
    /// Images per forward pass during evaluation.
    pub batch_size: usize,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            align: true,
            batch_size: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub task: Task,
    /// Metric name and value, in [`metric_names`] order.
    pub metrics: Vec<(String, f64)>,
    pub samples: usize,
    pub align: bool,
    /// Function evaluations, ensemble × steps.
    pub nfe: String,
}

impl MetricsReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in &self.metrics {
            if !v.is_finite() {
                return Err(Error::Input(format!("metric {name} is not finite: {v}")));
            }
            if is_fraction(name) && !(0.0..=1.0).contains(v) {
                return Err(Error::Range(format!("fraction metric {name} = {v}")));
            }
        }
        Ok(())
    }

    /// Newline-delimited `key=value` records.
    pub fn to_kv(&self) -> String {
        let mut out = format!(
            "task={}\nsamples={}\nalign={}\nnfe={}\ndelta_threshold={DELTA1_THRESHOLD}\nangle_threshold={ANGLE_THRESHOLD_DEG}\nmatting_scale={MATTING_SCALE}\n",
            self.task,
            self.samples,
            if self.align { "on" } else { "off" },
            self.nfe
        );
        for (name, v) in &self.metrics {
            let _ = writeln!(out, "{name}={v}");
        }
        out
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut task = None;
        let mut samples = None;
        let mut align = None;
        let mut nfe = None;
        let mut values = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Input(format!("report line {}: expected key=value", lineno + 1))
            })?;
            match k {
                "task" => task = Some(v.parse::<Task>()?),
                "samples" => {
                    samples = Some(v.parse::<usize>().map_err(|_| {
                        Error::Input(format!("report samples {v:?} is not an integer"))
                    })?)
                }
                "align" => align = Some(v == "on"),
                "nfe" => nfe = Some(v.to_string()),
                "delta_threshold" | "angle_threshold" | "matting_scale" => {}
                name => {
                    let x = v.parse::<f64>().map_err(|_| {
                        Error::Input(format!("report value {name}={v:?} is not a number"))
                    })?;
                    values.insert(name.to_string(), x);
                }
            }
        }
        let task = task.ok_or_else(|| Error::Input("report is missing task".into()))?;
        let metrics = metric_names(task)
            .iter()
            .map(|&n| {
                values
                    .remove(n)
                    .map(|v| (n.to_string(), v))
                    .ok_or_else(|| Error::Input(format!("report is missing metric {n}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(extra) = values.keys().next() {
            return Err(Error::Input(format!("unknown report metric {extra:?}")));
        }
        let report = Self {
            task,
            metrics,
            samples: samples.ok_or_else(|| Error::Input("report is missing samples".into()))?,
            align: align.unwrap_or(true),
            nfe: nfe.unwrap_or_else(|| STUDENT_NFE.to_string()),
        };
        report.validate()?;
        Ok(report)
    }

    /// Aligned two-column text.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "task      {}\nsamples   {}\nalign     {}\nNFE       {}\n",
            self.task,
            self.samples,
            if self.align { "on" } else { "off" },
            self.nfe
        );
        for (name, v) in &self.metrics {
            let _ = writeln!(out, "{name:<12}{v:.4}");
        }
        out
    }
}

/// Per-sample metrics for one prediction map against its ground truth.
pub fn sample_metrics(pred: &Raster, gt: &DenseSample, task: Task, align: bool) -> Result<Vec<f64>> {
    let n = gt.pixels();
    if (pred.width, pred.height) != (gt.width, gt.height) || pred.channels() != task.output_channels() {
        return Err(Error::Shape(format!(
            "{:?} prediction {}x{} does not fit a {task} target {}x{}",
            pred.tag, pred.width, pred.height, gt.width, gt.height
        )));
    }
    let p: Vec<f64> = pred.data.iter().map(|&v| f64::from(v)).collect();
    Ok(match task {
        Task::Depth => {
            let g: Vec<f64> = gt.depth.iter().map(|&v| f64::from(v)).collect();
            vec![
                metric_absrel(&p, &g, &gt.mask, align)?,
                metric_delta1(&p, &g, &gt.mask, align)?,
            ]
        }
        Task::Normal => {
            let vec3 = |d: &[f64]| -> Vec<[f64; 3]> {
                (0..n).map(|i| [d[3 * i], d[3 * i + 1], d[3 * i + 2]]).collect()
            };
            let g: Vec<f64> = gt.normal.iter().map(|&v| f64::from(v)).collect();
            let (mean, within) = metric_normal(&vec3(&p), &vec3(&g), &gt.mask)?;
            vec![mean, within]
        }
        Task::Matting => {
            let g: Vec<f64> = gt.matte.iter().map(|&v| f64::from(v)).collect();
            let m = metric_matting(&p, &g, gt.height, gt.width)?;
            vec![m.sad, m.mad, m.mse, m.conn]
        }
    })
}

/// Average per-sample metrics over a dataset of stored predictions.
pub fn evaluate_maps(
    preds: &[Raster],
    samples: &[DenseSample],
    task: Task,
    protocol: &Protocol,
    nfe: &str,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Input("evaluation dataset is empty".into()));
    }
    if preds.len() != samples.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} samples",
            preds.len(),
            samples.len()
        )));
    }
    let names = metric_names(task);
    let mut sums = vec![0.0; names.len()];
    for (p, s) in preds.iter().zip(samples) {
        for (acc, v) in sums.iter_mut().zip(sample_metrics(p, s, task, protocol.align)?) {
            *acc += v;
        }
    }
    let report = MetricsReport {
        task,
        metrics: names
            .iter()
            .zip(sums)
            .map(|(n, s)| (n.to_string(), s / samples.len() as f64))
            .collect(),
        samples: samples.len(),
        align: protocol.align,
        nfe: nfe.to_string(),
    };
    report.validate()?;
    Ok(report)
}

/// Convert a batched network output `[n, c, h, w]` into per-sample rasters in
/// target units: metres of depth, unit normals or mattes in `[0, 1]`.
pub fn output_rasters(output: &crate::tensor::Tensor, task: Task) -> Vec<Raster> {
    let [n, c, h, w] = output.shape();
    let hw = h * w;
    (0..n)
        .map(|i| {
            let item = output.item(i);
            let (tag, data) = match task {
                Task::Depth => (
                    RasterTag::Depth,
                    item.iter().map(|&v| (f64::from(v) * DEPTH_SCALE) as f32).collect(),
                ),
                Task::Matting => (RasterTag::Matte, item.iter().map(|&v| v.clamp(0.0, 1.0)).collect()),
                Task::Normal => {
                    let mut d = Vec::with_capacity(3 * hw);
                    for j in 0..hw {
                        let v = [0, 1, 2].map(|k| f64::from(item[k * hw + j]));
                        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
                        d.extend(v.map(|x| (x / norm) as f32));
                    }
                    (RasterTag::Normal, d)
                }
            };
            debug_assert_eq!(c, tag.channels());
            Raster {
                width: w,
                height: h,
                tag,
                pseudo: false,
                data,
            }
        })
        .collect()
}

/// Run the student once per batch of images and return one raster per sample.
pub fn predict_rasters(state: &PredictorState, samples: &[DenseSample], batch_size: usize) -> Result<Vec<Raster>> {
    if batch_size == 0 {
        return Err(Error::Config("evaluation batch size must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size) {
        let refs: Vec<&DenseSample> = chunk.iter().collect();
        let y = state.predict(&image_tensor(&refs)?)?;
        out.extend(output_rasters(&y, state.task()));
    }
    Ok(out)
}

/// Predict every sample with the student and score it.
pub fn evaluate(
    state: &PredictorState,
    samples: &[DenseSample],
    task: Task,
    protocol: &Protocol,
) -> Result<MetricsReport> {
    if state.task() != task {
        return Err(Error::Config(format!(
            "model predicts {} but {task} evaluation was requested",
            state.task()
        )));
    }
    if samples.is_empty() {
        return Err(Error::Input("evaluation dataset is empty".into()));
    }
    let preds = predict_rasters(state, samples, protocol.batch_size)?;
    evaluate_maps(&preds, samples, task, protocol, STUDENT_NFE)
}

/// Ground truth of `sample` as a prediction raster.
pub fn ground_truth_raster(sample: &DenseSample, task: Task) -> Raster {
    let (tag, data) = match task {
        Task::Depth => (RasterTag::Depth, sample.depth.clone()),
        Task::Normal => (RasterTag::Normal, sample.normal.clone()),
        Task::Matting => (RasterTag::Matte, sample.matte.clone()),
    };
    Raster {
        width: sample.width,
        height: sample.height,
        tag,
        pseudo: false,
        data,
    }
}
