//! Evaluation of a trained model on a clip set, with an overlap-heavy
//! subset and the inference cost report.

use serde::{Deserialize, Serialize};
use tpr_core::budget::{flops_report, FlopsReport};
use tpr_core::Result;

use crate::data::Clip;
use crate::infer::{infer_clip, ClipPrediction, InferOptions};
use crate::metrics::{evaluate, Metrics};
use crate::model::Model;

/// Box IoU above which two instances count as overlapping.
pub const OVERLAP_IOU: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub all: Metrics,
    /// Clips where two instances overlap in some frame.
    pub overlap: Metrics,
    pub overlap_clips: usize,
    pub flops: FlopsReport,
}

pub fn predict(model: &Model, clips: &[Clip], opts: InferOptions) -> Result<Vec<ClipPrediction>> {
    clips.iter().map(|c| infer_clip(model, &c.frames, opts)).collect()
}

pub fn report(clips: &[Clip], preds: &[ClipPrediction]) -> Result<EvalReport> {
    let gts: Vec<_> = clips.iter().map(|c| c.gt.clone()).collect();
    let idx: Vec<usize> = (0..clips.len()).filter(|&i| gts[i].has_overlap(OVERLAP_IOU)).collect();
    let sub_p: Vec<_> = idx.iter().map(|&i| preds[i].clone()).collect();
    let sub_g: Vec<_> = idx.iter().map(|&i| gts[i].clone()).collect();
    let costs: Vec<Vec<_>> = preds.iter().map(|p| p.frames.iter().map(|f| f.cost).collect()).collect();
    Ok(EvalReport {
        all: evaluate(preds, &gts),
        overlap: evaluate(&sub_p, &sub_g),
        overlap_clips: idx.len(),
        flops: flops_report(&costs)?,
    })
}

pub fn evaluate_model(model: &Model, clips: &[Clip], opts: InferOptions) -> Result<EvalReport> {
    let preds = predict(model, clips, opts)?;
    report(clips, &preds)
}
