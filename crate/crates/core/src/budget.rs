//! Compute accounting for gated work and the budget / total losses.
//!
//! Every gate records one ledger entry: `C` is the dense cost of the work
//! the gate controls, `B` the cost over the gate's positive support after
//! expansion by a stride-1 max-pool of width `receptive_field`. In training
//! mode `B` is the sum of the max-pooled gate *values* (differentiable); in
//! inference mode it counts the expanded support.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TprError};
use crate::gate::GateMap;
use crate::kernels;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LedgerMode {
    Train,
    Infer,
}

#[derive(Clone, Debug, Serialize)]
pub struct LedgerEntry {
    pub gate_id: String,
    pub layer_id: String,
    /// `B` in MACs (soft value in train mode, expanded-support count in infer mode).
    pub b: f64,
    /// Expanded-support count times cost, always available.
    pub b_hard: f64,
    pub c: f64,
    #[serde(skip)]
    soft: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct FlopLedger {
    pub mode: LedgerMode,
    entries: Vec<LedgerEntry>,
}

impl FlopLedger {
    pub fn new(mode: LedgerMode) -> Self {
        Self {
            mode,
            entries: Vec::new(),
        }
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// Records the budget term of `gate` controlling work that costs
    /// `cost_per_location` MACs at each of its `H*W` positions.
    pub fn record(
        &mut self,
        tape: &mut Tape,
        gate: &GateMap,
        gate_id: impl Into<String>,
        layer_id: impl Into<String>,
        cost_per_location: f64,
        receptive_field: usize,
    ) -> Result<()> {
        if receptive_field % 2 == 0 {
            return Err(TprError::Invalid(format!(
                "receptive field must be odd, got {receptive_field}"
            )));
        }
        let pad = receptive_field / 2;
        let c = (gate.h * gate.w) as f64 * cost_per_location;
        let support: Vec<f64> = gate.positive.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect();
        let (expanded, ..) = kernels::maxpool_forward(1, gate.h, gate.w, receptive_field, 1, pad, &support);
        let b_hard = expanded.iter().sum::<f64>() * cost_per_location;
        let (b, soft) = match self.mode {
            LedgerMode::Infer => (b_hard, None),
            LedgerMode::Train => {
                let pooled = tape.maxpool2d(gate.values, receptive_field, 1, pad)?;
                let s = tape.sum(pooled);
                let s = tape.scale(s, cost_per_location);
                (tape.value(s).item(), Some(s))
            }
        };
        self.entries.push(LedgerEntry {
            gate_id: gate_id.into(),
            layer_id: layer_id.into(),
            b,
            b_hard,
            c,
            soft,
        });
        Ok(())
    }

    /// Entries sorted by gate id, so sums do not depend on evaluation order.
    fn sorted(&self) -> Vec<&LedgerEntry> {
        let mut v: Vec<&LedgerEntry> = self.entries.iter().collect();
        v.sort_by(|a, b| (&a.gate_id, &a.layer_id).cmp(&(&b.gate_id, &b.layer_id)));
        v
    }

    pub fn total_b(&self) -> f64 {
        self.sorted().iter().map(|e| e.b).sum()
    }

    pub fn total_b_hard(&self) -> f64 {
        self.sorted().iter().map(|e| e.b_hard).sum()
    }

    pub fn total_c(&self) -> f64 {
        self.sorted().iter().map(|e| e.c).sum()
    }

    pub fn table(&self) -> Vec<LedgerRow> {
        self.entries
            .iter()
            .map(|e| LedgerRow {
                gate_id: e.gate_id.clone(),
                layer_id: e.layer_id.clone(),
                b: e.b,
                c: e.c,
                ratio: if e.c > 0.0 { e.b / e.c } else { 0.0 },
            })
            .collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct LedgerRow {
    pub gate_id: String,
    pub layer_id: String,
    pub b: f64,
    pub c: f64,
    pub ratio: f64,
}

/// `sum_l B^l / sum_l C^l` as a single global ratio. Differentiable with
/// respect to the gate values in train mode; a constant in infer mode.
pub fn budget_loss(tape: &mut Tape, ledger: &FlopLedger) -> Result<Var> {
    if ledger.is_empty() {
        return Err(TprError::EmptyLedger);
    }
    let total_c = ledger.total_c();
    if total_c <= 0.0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    match ledger.mode {
        LedgerMode::Infer => Ok(tape.constant(Tensor::scalar(ledger.total_b() / total_c))),
        LedgerMode::Train => {
            let terms: Vec<Var> = ledger.sorted().iter().filter_map(|e| e.soft).collect();
            let stacked = tape.stack(&terms)?;
            let sum = tape.sum(stacked);
            Ok(tape.scale(sum, 1.0 / total_c))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_task: f64,
    pub lambda_budget: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_task: 1.0,
            lambda_budget: 1.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_task < 0.0 || self.lambda_budget < 0.0 || !self.lambda_task.is_finite() || !self.lambda_budget.is_finite() {
            return Err(TprError::Invalid(format!("loss weights must be finite and >= 0, got {self:?}")));
        }
        Ok(())
    }
}

/// `lambda_task * task + lambda_budget * budget`.
pub fn total_loss(tape: &mut Tape, task: Var, budget: Var, cfg: &LossConfig) -> Result<Var> {
    for v in [task, budget] {
        if !tape.value(v).is_scalar() || !tape.value(v).item().is_finite() {
            return Err(TprError::Invalid("total_loss terms must be finite scalars".into()));
        }
    }
    let a = tape.scale(task, cfg.lambda_task);
    let b = tape.scale(budget, cfg.lambda_budget);
    tape.add(a, b)
}

/// Hard-mode cost of one frame: always-executed work plus gated work.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameCost {
    pub static_macs: f64,
    pub dynamic_macs: f64,
}

impl FrameCost {
    pub fn total(&self) -> f64 {
        self.static_macs + self.dynamic_macs
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub min: f64,
    pub avg: f64,
    pub max: f64,
    pub clips: usize,
}

/// Per-clip cost is the mean per-frame total; the report aggregates clips.
pub fn flops_report(clips: &[Vec<FrameCost>]) -> Result<FlopsReport> {
    if clips.is_empty() {
        return Err(TprError::Invalid("flops report needs at least one clip".into()));
    }
    let mut per_clip: Vec<f64> = clips
        .iter()
        .map(|frames| {
            if frames.is_empty() {
                0.0
            } else {
                frames.iter().map(FrameCost::total).sum::<f64>() / frames.len() as f64
            }
        })
        .collect();
    per_clip.sort_by(f64::total_cmp);
    Ok(FlopsReport {
        min: per_clip[0],
        max: per_clip[per_clip.len() - 1],
        avg: per_clip.iter().sum::<f64>() / per_clip.len() as f64,
        clips: per_clip.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gate::GateKind;

    fn gate(tape: &mut Tape, h: usize, w: usize, vals: Vec<f64>) -> GateMap {
        let v = tape.leaf(Tensor::new(vec![1, h, w], vals).unwrap(), true);
        GateMap::new(tape, v, GateKind::Path).unwrap()
    }

    #[test]
    fn closed_gate_costs_nothing() {
        for mode in [LedgerMode::Train, LedgerMode::Infer] {
            let mut tape = Tape::new();
            let g = gate(&mut tape, 4, 4, vec![0.0; 16]);
            let mut l = FlopLedger::new(mode);
            l.record(&mut tape, &g, "g", "l", 10.0, 3).unwrap();
            assert_eq!(l.entries()[0].b, 0.0);
            assert_eq!(budget_loss(&mut tape, &l).map(|v| tape.value(v).item()).unwrap(), 0.0);
        }
    }

    #[test]
    fn fully_open_hard_is_full_cost() {
        let mut tape = Tape::new();
        let g = gate(&mut tape, 4, 4, vec![0.3; 16]);
        let mut l = FlopLedger::new(LedgerMode::Infer);
        l.record(&mut tape, &g, "g", "l", 7.0, 3).unwrap();
        assert_eq!(l.entries()[0].b, l.entries()[0].c);
        let loss = budget_loss(&mut tape, &l).unwrap();
        assert_eq!(tape.value(loss).item(), 1.0);
    }

    #[test]
    fn single_pixel_expands_to_neighbourhood() {
        let mut tape = Tape::new();
        let mut vals = vec![0.0; 16];
        vals[5] = 0.4; // (1, 1), interior
        let g = gate(&mut tape, 4, 4, vals);
        let mut l = FlopLedger::new(LedgerMode::Infer);
        l.record(&mut tape, &g, "g", "l", 3.0, 3).unwrap();
        assert_eq!(l.entries()[0].b, 9.0 * 3.0);
    }

    #[test]
    fn even_receptive_field_rejected() {
        let mut tape = Tape::new();
        let g = gate(&mut tape, 2, 2, vec![0.0; 4]);
        let mut l = FlopLedger::new(LedgerMode::Infer);
        assert!(l.record(&mut tape, &g, "g", "l", 1.0, 2).is_err());
    }

    #[test]
    fn empty_ledger_is_an_error() {
        let mut tape = Tape::new();
        let l = FlopLedger::new(LedgerMode::Train);
        assert!(matches!(budget_loss(&mut tape, &l), Err(TprError::EmptyLedger)));
    }

    #[test]
    fn total_loss_weights() {
        let mut tape = Tape::new();
        let task = tape.constant(Tensor::scalar(2.0));
        let budget = tape.constant(Tensor::scalar(0.5));
        let l = total_loss(&mut tape, task, budget, &LossConfig::default()).unwrap();
        assert_eq!(tape.value(l).item(), 2.75);
        let zero = LossConfig { lambda_budget: 0.0, ..LossConfig::default() };
        let l = total_loss(&mut tape, task, budget, &zero).unwrap();
        assert_eq!(tape.value(l).item(), 2.0);
        let t0 = tape.constant(Tensor::scalar(0.0));
        let l = total_loss(&mut tape, t0, t0, &LossConfig::default()).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn report_single_clip_and_order() {
        let c = |s: f64, d: f64| FrameCost { static_macs: s, dynamic_macs: d };
        let one = flops_report(&[vec![c(10.0, 2.0), c(10.0, 4.0)]]).unwrap();
        assert_eq!((one.min, one.avg, one.max), (13.0, 13.0, 13.0));
        let a = vec![c(10.0, 0.0)];
        let b = vec![c(10.0, 6.0), c(10.0, 0.0)];
        let d = vec![c(10.0, 1.0)];
        let r1 = flops_report(&[a.clone(), b.clone(), d.clone()]).unwrap();
        let r2 = flops_report(&[d, a, b]).unwrap();
        assert_eq!(r1, r2);
        assert_eq!((r1.min, r1.max), (10.0, 13.0));
    }
}
