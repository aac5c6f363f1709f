//! Benchmark protocols over a dataset and their JSON reports.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use partdecode::{full_report, guided_report, iou_at_n_report, DecodeError, Segmenter, CLICK_COUNTS};
use partflow::partdecode;
use partflow::shapeforge::ShapeRecord;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundle::ModelBundle;
use crate::config::EvalConfig;
use crate::segment::FlowSegmenter;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("unknown protocol {0:?} (expected iou_at_n, full or guided_full)")]
    UnknownProtocol(String),
    #[error("sampling needs at least one step")]
    ZeroSteps,
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    IouAtN,
    Full,
    GuidedFull,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::IouAtN => "iou_at_n",
            Protocol::Full => "full",
            Protocol::GuidedFull => "guided_full",
        }
    }
}

impl FromStr for Protocol {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, EvalError> {
        match s {
            "iou_at_n" => Ok(Protocol::IouAtN),
            "full" => Ok(Protocol::Full),
            "guided_full" => Ok(Protocol::GuidedFull),
            other => Err(EvalError::UnknownProtocol(other.into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeMetrics {
    pub id: String,
    /// Mean IoU in `[0, 1]`: after the last click, or of the matched parts.
    pub iou: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iou_by_click: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_parts: Option<u32>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub total_seconds: f64,
    /// Mean wall-clock per shape over the whole protocol.
    pub mean_seconds_per_shape: f64,
    /// Mean wall-clock of a single sampling pass.
    pub mean_seconds_per_inference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub checkpoint: String,
    pub protocol: Protocol,
    pub steps: usize,
    pub seed: u64,
    /// `(N, IoU@N in percent)`; present for `iou_at_n`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iou_at: Option<Vec<(usize, f64)>>,
    /// Mean matched IoU in percent; present for the full protocols.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub full_iou: Option<f64>,
    pub per_shape: Vec<ShapeMetrics>,
    pub timing: Timing,
}

impl MetricsReport {
    pub fn with_source(mut self, dataset: impl Into<String>, checkpoint: impl Into<String>) -> Self {
        self.dataset = dataset.into();
        self.checkpoint = checkpoint.into();
        self
    }

    /// The report with all wall-clock fields zeroed.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.timing = Timing { total_seconds: 0.0, mean_seconds_per_shape: 0.0, mean_seconds_per_inference: 0.0 };
        r.per_shape.iter_mut().for_each(|s| s.seconds = 0.0);
        r
    }

    /// Equality of everything except timing.
    pub fn same_metrics(&self, other: &Self) -> bool {
        self.without_timing() == other.without_timing()
    }

    /// The headline number: IoU@N for the largest N, or full IoU.
    pub fn headline(&self) -> f64 {
        match (&self.iou_at, self.full_iou) {
            (Some(v), _) => v.last().map_or(0.0, |p| p.1),
            (None, Some(f)) => f,
            (None, None) => 0.0,
        }
    }

    /// Plain-text summary table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "protocol {}  steps {}  seed {}  shapes {}", self.protocol.name(), self.steps, self.seed, self.per_shape.len());
        if let Some(iou_at) = &self.iou_at {
            let _ = writeln!(out, "{}", iou_at.iter().map(|(n, _)| format!("{:>8}", format!("IoU@{n}"))).collect::<String>());
            let _ = writeln!(out, "{}", iou_at.iter().map(|(_, v)| format!("{v:>8.2}")).collect::<String>());
        }
        if let Some(f) = self.full_iou {
            let _ = writeln!(out, "full IoU {f:.2}");
        }
        let _ = write!(
            out,
            "time {:.3}s total, {:.3}s per shape, {:.4}s per inference",
            self.timing.total_seconds, self.timing.mean_seconds_per_shape, self.timing.mean_seconds_per_inference
        );
        out
    }
}

/// Runs `protocol` with any segmenter. `steps` is echoed into the report.
pub fn evaluate_segmenter<S: Segmenter + ?Sized>(
    seg: &S,
    shapes: &[ShapeRecord],
    protocol: Protocol,
    steps: usize,
    seed: u64,
    settings: &EvalConfig,
) -> Result<MetricsReport, EvalError> {
    let start = Instant::now();
    let (iou_at, full_iou, per_shape, inferences) = match protocol {
        Protocol::IouAtN => {
            let r = iou_at_n_report(seg, shapes, &CLICK_COUNTS, settings.click_policy, seed)?;
            let per_shape: Vec<ShapeMetrics> = r
                .per_shape
                .into_iter()
                .map(|s| ShapeMetrics {
                    id: s.id,
                    iou: s.mean_iou_by_click.last().copied().unwrap_or(0.0),
                    iou_by_click: Some(s.mean_iou_by_click),
                    predicted_parts: None,
                    seconds: s.seconds,
                })
                .collect();
            let clicks = CLICK_COUNTS[CLICK_COUNTS.len() - 1];
            let inferences: usize = shapes.iter().map(|s| s.num_parts() as usize * clicks).sum();
            (Some(r.iou_at), None, per_shape, inferences)
        }
        Protocol::Full | Protocol::GuidedFull => {
            let r = if protocol == Protocol::Full {
                full_report(seg, shapes, settings.delta_c, seed)?
            } else {
                guided_report(seg, shapes, settings.guidance_view, seed)?
            };
            let per_shape = r
                .per_shape
                .into_iter()
                .map(|s| ShapeMetrics { id: s.id, iou: s.iou, iou_by_click: None, predicted_parts: Some(s.predicted_parts), seconds: s.seconds })
                .collect();
            (None, Some(r.full_iou), per_shape, shapes.len())
        }
    };
    let total_seconds = start.elapsed().as_secs_f64();
    let shape_seconds: f64 = per_shape.iter().map(|s| s.seconds).sum();
    let timing = Timing {
        total_seconds,
        mean_seconds_per_shape: shape_seconds / per_shape.len().max(1) as f64,
        mean_seconds_per_inference: shape_seconds / inferences.max(1) as f64,
    };
    Ok(MetricsReport { dataset: String::new(), checkpoint: String::new(), protocol, steps, seed, iou_at, full_iou, per_shape, timing })
}

/// Evaluates the flow model in `bundle` sampled with `steps` Euler steps.
pub fn evaluate(
    bundle: &ModelBundle,
    shapes: &[ShapeRecord],
    protocol: Protocol,
    steps: usize,
    seed: u64,
    settings: &EvalConfig,
) -> Result<MetricsReport, EvalError> {
    if steps == 0 {
        return Err(EvalError::ZeroSteps);
    }
    evaluate_segmenter(&FlowSegmenter::new(bundle, steps), shapes, protocol, steps, seed, settings)
}
