//! The training loop: one (query, reference) pair per step, task losses
//! plus the weighted budget loss, SGD with a step schedule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tpr_core::budget::{budget_loss, total_loss, FlopLedger, LedgerMode, LossConfig};
use tpr_core::params::Sgd;
use tpr_core::tracker::{embed_box, tracking_loss};
use tpr_core::{Result, Tape, Tensor, TprError, Var};

use crate::data::{Clip, InstanceGt};
use crate::heads::{build_targets, detection_losses};
use crate::model::{Model, Reference, RunOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainProtocol {
    pub steps: usize,
    pub lr: f64,
    /// Fractions of `steps` at which the rate is multiplied by `lr_gamma`.
    pub lr_milestones: Vec<f64>,
    pub lr_gamma: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm limit; 0 disables clipping.
    pub clip_norm: f64,
    /// Largest `|q - r|` when sampling the reference frame.
    pub ref_range: usize,
    pub loss: LossConfig,
    /// Weights of the cls, box, mask and tracking terms.
    pub task_weights: [f64; 4],
}

impl Default for TrainProtocol {
    fn default() -> Self {
        Self {
            steps: 1500,
            lr: 0.01,
            lr_milestones: vec![0.7, 0.9],
            lr_gamma: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            clip_norm: 5.0,
            ref_range: 3,
            loss: LossConfig::default(),
            task_weights: [1.0; 4],
        }
    }
}

impl TrainProtocol {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.ref_range == 0 {
            return Err(TprError::Invalid("ref_range must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TprError::Invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TprError::Invalid(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(TprError::Invalid(format!("clip_norm must be >= 0, got {}", self.clip_norm)));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let passed = self
            .lr_milestones
            .iter()
            .filter(|&&m| step as f64 >= m * self.steps as f64)
            .count();
        self.lr * self.lr_gamma.powi(passed as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub clip: usize,
    pub query: usize,
    pub reference: usize,
    pub lr: f64,
    pub loss: f64,
    pub task: f64,
    pub cls: f64,
    #[serde(rename = "box")]
    pub bbox: f64,
    pub mask: f64,
    pub track: f64,
    pub budget: f64,
    pub grad_norm: f64,
}

/// Reference index with `0 < |q - r| <= range`, or `q` for a 1-frame clip.
pub fn sample_reference(rng: &mut ChaCha8Rng, q: usize, frames: usize, range: usize) -> usize {
    let lo = q.saturating_sub(range);
    let hi = (q + range).min(frames - 1);
    let choices: Vec<usize> = (lo..=hi).filter(|&r| r != q).collect();
    if choices.is_empty() {
        q
    } else {
        choices[rng.gen_range(0..choices.len())]
    }
}

pub struct StepLosses {
    pub total: Var,
    pub task: Var,
    pub parts: [Var; 4],
    pub budget: Var,
}

/// Builds the full training objective of one (query, reference) pair.
pub fn step_losses(
    tape: &mut Tape,
    model: &Model,
    clip: &Clip,
    q: usize,
    r: usize,
    protocol: &TrainProtocol,
    opts: RunOptions,
) -> Result<StepLosses> {
    let fq = tape.constant(clip.frames[q].clone());
    let fr = tape.constant(clip.frames[r].clone());
    let raw_r = model.pyramid(tape, fr, r)?;
    let mut ledger = FlopLedger::new(LedgerMode::Train);
    let out = model.forward(tape, fq, q, &Reference::Pyramid(raw_r.clone()), &mut ledger, opts)?;
    let shapes = out.refined.shapes(tape);
    let hw = (clip.gt.height, clip.gt.width);
    let targets = build_targets(&clip.gt.frames[q], &shapes, &out.heads.strides, hw, &model.cfg.heads);
    let det = detection_losses(tape, &out.heads, &targets)?;
    let track = track_loss(tape, model, &out.refined, &raw_r, &clip.gt.frames[q], &clip.gt.frames[r])?;
    let parts = [det.cls, det.bbox, det.mask, track];
    let mut weighted = Vec::with_capacity(4);
    for (&p, &w) in parts.iter().zip(&protocol.task_weights) {
        weighted.push(tape.scale(p, w));
    }
    let task = tape.stack(&weighted)?;
    let task = tape.sum(task);
    let budget = if ledger.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        budget_loss(tape, &ledger)?
    };
    let total = total_loss(tape, task, budget, &protocol.loss)?;
    Ok(StepLosses {
        total,
        task,
        parts,
        budget,
    })
}

/// Mean cross-entropy of each query instance against the reference
/// instances (label 0 when its id is absent from the reference frame).
fn track_loss(
    tape: &mut Tape,
    model: &Model,
    refined_q: &tpr_core::pyramid::FeaturePyramid,
    raw_r: &tpr_core::pyramid::FeaturePyramid,
    gt_q: &[InstanceGt],
    gt_r: &[InstanceGt],
) -> Result<Var> {
    if gt_q.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let mut memory = Vec::with_capacity(gt_r.len());
    for inst in gt_r {
        memory.push(embed_box(tape, &model.store, raw_r, &inst.bbox)?);
    }
    let mut terms = Vec::with_capacity(gt_q.len());
    for inst in gt_q {
        let f = embed_box(tape, &model.store, refined_q, &inst.bbox)?;
        let label = gt_r.iter().position(|m| m.id == inst.id).map_or(0, |j| j + 1);
        terms.push(tracking_loss(tape, f, &memory, label)?);
    }
    let s = tape.stack(&terms)?;
    let s = tape.sum(s);
    Ok(tape.scale(s, 1.0 / gt_q.len() as f64))
}

/// Trains `model` in place; `on_step` sees every log record as produced.
pub fn train(
    model: &mut Model,
    protocol: &TrainProtocol,
    clips: &[Clip],
    seed: u64,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Vec<StepLog>> {
    protocol.validate()?;
    if clips.is_empty() {
        return Err(TprError::Invalid("training needs at least one clip".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sgd = Sgd::new(protocol.momentum, protocol.weight_decay, (protocol.clip_norm > 0.0).then_some(protocol.clip_norm));
    let mut log = Vec::with_capacity(protocol.steps);
    for step in 0..protocol.steps {
        let ci = rng.gen_range(0..clips.len());
        let clip = &clips[ci];
        let q = rng.gen_range(0..clip.frames.len());
        let r = sample_reference(&mut rng, q, clip.frames.len(), protocol.ref_range);
        let mut tape = Tape::new();
        let l = step_losses(&mut tape, model, clip, q, r, protocol, RunOptions::default())?;
        let val = |v: Var| tape.value(v).item();
        model.store.zero_grad();
        tape.backward(l.total, Some(&mut model.store))?;
        let rec = StepLog {
            step,
            clip: ci,
            query: q,
            reference: r,
            lr: protocol.lr_at(step),
            loss: val(l.total),
            task: val(l.task),
            cls: val(l.parts[0]),
            bbox: val(l.parts[1]),
            mask: val(l.parts[2]),
            track: val(l.parts[3]),
            budget: val(l.budget),
            grad_norm: model.store.grad_norm(),
        };
        if !rec.loss.is_finite() || !rec.grad_norm.is_finite() {
            return Err(TprError::Diverged {
                step,
                detail: serde_json::to_string(&rec)?,
            });
        }
        sgd.step(&mut model.store, rec.lr);
        on_step(&rec);
        log.push(rec);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..500 {
            let q = rng.gen_range(0..8);
            let r = sample_reference(&mut rng, q, 8, 3);
            assert!(r != q && r.abs_diff(q) <= 3 && r < 8);
        }
        assert_eq!(sample_reference(&mut rng, 0, 1, 3), 0);
    }

    #[test]
    fn schedule() {
        let p = TrainProtocol { steps: 100, lr: 1.0, ..TrainProtocol::default() };
        assert_eq!(p.lr_at(0), 1.0);
        assert!((p.lr_at(70) - 0.1).abs() < 1e-15);
        assert!((p.lr_at(95) - 0.01).abs() < 1e-15);
    }
}
