//! Evaluation flows: supervised, zero-shot and the center-bias baseline.

use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::Sample;
use crate::error::{Error, Result};
use crate::heatmaps::{points_to_target, AffordanceAnnotation, GaussianTargetSpec, Heatmap};
use crate::metrics::{evaluate_at, AucPositives, EvalTarget, MetricReport};
use crate::model::{Afformer, Prediction};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEval {
    pub index: usize,
    pub metrics: MetricReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action_correct: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: MetricReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action_accuracy: Option<f64>,
    pub samples: Vec<SampleEval>,
}

fn positives_for(sample: &Sample, positives: AucPositives) -> AucPositives {
    match (positives, &sample.points) {
        (AucPositives::Points, None) => AucPositives::Thresholded { relative: 0.5 },
        (p, _) => p,
    }
}

/// Scores precomputed predictions. With `AucPositives::Points`, samples
/// without annotation points fall back to half-max thresholding.
pub fn evaluate_predictions(
    samples: &[Sample],
    preds: &[Prediction],
    res: (usize, usize),
    positives: AucPositives,
) -> Result<EvalReport> {
    if samples.is_empty() || samples.len() != preds.len() {
        return Err(Error::Config(format!("{} samples vs {} predictions", samples.len(), preds.len())));
    }
    let per = samples
        .iter()
        .zip(preds)
        .enumerate()
        .map(|(index, (s, p))| {
            let target = EvalTarget {
                heatmap: &s.heatmap,
                points: s.points.as_deref(),
            };
            let metrics = evaluate_at(target, &p.heatmap, res, positives_for(s, positives))?;
            let action_correct = match (s.action, p.action_label()) {
                (Some(a), Some(b)) => Some(a == b),
                _ => None,
            };
            Ok(SampleEval {
                index,
                metrics,
                action_correct,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let metrics = MetricReport::mean(&per.iter().map(|s| s.metrics).collect::<Vec<_>>()).expect("nonempty");
    let flags: Vec<bool> = per.iter().filter_map(|s| s.action_correct).collect();
    let action_accuracy =
        (!flags.is_empty()).then(|| flags.iter().filter(|&&c| c).count() as f64 / flags.len() as f64);
    Ok(EvalReport {
        metrics,
        action_accuracy,
        samples: per,
    })
}

pub fn predict_all(model: &Afformer, samples: &[Sample]) -> Result<Vec<Prediction>> {
    samples.par_iter().map(|s| model.predict(&s.clip, &s.image)).collect()
}

pub fn evaluate(model: &Afformer, samples: &[Sample], res: (usize, usize), positives: AucPositives) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let (h, w) = samples[0].heatmap.dims();
    if res.0 > h || res.1 > w {
        return Err(Error::Config(format!(
            "evaluation resolution {}x{} exceeds native {h}x{w}",
            res.0, res.1
        )));
    }
    let preds = predict_all(model, samples)?;
    evaluate_predictions(samples, &preds, res, positives)
}

/// Heatmap-only evaluation of a pretrained model. Asking for action metrics
/// is an error: the pretrained model has no action head.
pub fn zero_shot_eval(
    model: &Afformer,
    samples: &[Sample],
    res: (usize, usize),
    positives: AucPositives,
    with_action: bool,
) -> Result<MetricReport> {
    if with_action || model.has_action_head() {
        return Err(Error::ActionHeadAbsent);
    }
    Ok(evaluate(model, samples, res, positives)?.metrics)
}

/// The fixed prior: one Gaussian target stamped at the frame center.
pub fn center_bias_map(height: usize, width: usize) -> Result<Heatmap> {
    let c = [(width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0];
    points_to_target(
        &AffordanceAnnotation::new(vec![c], None),
        height,
        width,
        &GaussianTargetSpec::for_frame(height, width),
    )
}

pub fn center_bias_baseline(samples: &[Sample], res: (usize, usize), positives: AucPositives) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let preds = samples
        .iter()
        .map(|s| {
            let (h, w) = s.heatmap.dims();
            Ok(Prediction {
                heatmap: center_bias_map(h, w)?,
                action: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_predictions(samples, &preds, res, positives)
}

/// Per-sample lines followed by one aggregate line.
pub fn write_eval_report(path: &Path, report: &EvalReport) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for s in &report.samples {
        let line = serde_json::to_string(s).map_err(|e| Error::format(path, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    #[derive(Serialize)]
    struct Aggregate<'a> {
        aggregate: &'a MetricReport,
        #[serde(skip_serializing_if = "Option::is_none")]
        action_accuracy: Option<f64>,
        samples: usize,
    }
    let agg = Aggregate {
        aggregate: &report.metrics,
        action_accuracy: report.action_accuracy,
        samples: report.samples.len(),
    };
    let line = serde_json::to_string(&agg).map_err(|e| Error::format(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}
