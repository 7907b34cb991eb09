//! Online inference: each frame uses the previous frame as its only
//! reference, detections are associated against a track memory, and the
//! executed cost is recorded per frame.

use serde::{Deserialize, Serialize};
use tpr_core::budget::{FlopLedger, FrameCost, LedgerMode, LedgerRow};
use tpr_core::gate::GateMap;
use tpr_core::pyramid::FeaturePyramid;
use tpr_core::tracker::{associate, embed_box, Assignment, BBox, TrackMemory, EMBED_DIM};
use tpr_core::{Result, Tape, Tensor};

use crate::heads::{decode, instance_mask};
use crate::model::{Model, Reference, RunOptions};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceMode {
    /// The refined pyramid of frame `t - 1`.
    #[default]
    Refined,
    /// The backbone pyramid of frame `t - 1`.
    Raw,
    /// Every frame is its own reference.
    SelfPair,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct InferOptions {
    pub reference: ReferenceMode,
    pub run: RunOptions,
    pub dump_gates: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredInstance {
    pub id: u64,
    pub class: usize,
    pub score: f64,
    pub bbox: BBox,
    #[serde(skip)]
    pub mask: Vec<bool>,
}

/// An 8-bit gate image for export.
#[derive(Clone, Debug, PartialEq)]
pub struct GateDump {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl GateDump {
    fn from_gate(name: String, g: &GateMap, tape: &Tape) -> Self {
        Self {
            name,
            height: g.h,
            width: g.w,
            pixels: g.to_u8(tape),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FramePrediction {
    pub instances: Vec<PredInstance>,
    pub cost: FrameCost,
    pub ledger: Vec<LedgerRow>,
    /// Hard-mode `Σ B` and `Σ C` of the frame's ledger.
    pub budget_b: f64,
    pub budget_c: f64,
    pub assignments: Vec<Assignment>,
    pub gates: Vec<GateDump>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ClipPrediction {
    pub height: usize,
    pub width: usize,
    pub frames: Vec<FramePrediction>,
}

pub fn infer_clip(model: &Model, frames: &[Tensor], opts: InferOptions) -> Result<ClipPrediction> {
    let mut memory = TrackMemory::new(EMBED_DIM);
    let mut prev: Option<Vec<Tensor>> = None;
    let mut out = ClipPrediction::default();
    for (t, frame) in frames.iter().enumerate() {
        let (_, h, w) = frame.dims3()?;
        out.height = h;
        out.width = w;
        let mut tape = Tape::no_grad();
        let fv = tape.constant(frame.clone());
        let reference = match (&prev, opts.reference) {
            (Some(levels), ReferenceMode::Refined | ReferenceMode::Raw) => {
                Reference::Pyramid(FeaturePyramid::from_tensors(&mut tape, t.saturating_sub(1), levels))
            }
            _ => Reference::SelfPair,
        };
        let mut ledger = FlopLedger::new(LedgerMode::Infer);
        let fwd = model.forward(&mut tape, fv, t, &reference, &mut ledger, opts.run)?;
        let dets = decode(&tape, &fwd.heads, (h, w), &model.cfg.heads)?;
        let mut candidates = Vec::with_capacity(dets.len());
        let mut raw_embeddings = Vec::with_capacity(dets.len());
        for d in &dets {
            let e = embed_box(&mut tape, &model.store, &fwd.refined, &d.bbox)?;
            candidates.push((tape.value(e).data().to_vec(), d.score));
            let r = embed_box(&mut tape, &model.store, &fwd.raw, &d.bbox)?;
            raw_embeddings.push(tape.value(r).data().to_vec());
        }
        let assignments = associate(&candidates, &mut memory, t)?;
        // memory keeps backbone-pyramid embeddings, as in training
        for a in &assignments {
            if let Some(e) = memory.entries.iter_mut().find(|e| e.id == a.id) {
                e.embedding.clone_from(&raw_embeddings[a.candidate]);
            }
        }
        let mut instances = Vec::with_capacity(dets.len());
        for (d, a) in dets.iter().zip(&assignments) {
            instances.push(PredInstance {
                id: a.id,
                class: d.class,
                score: d.score,
                bbox: d.bbox,
                mask: instance_mask(&tape, &fwd.heads, d, (h, w))?,
            });
        }
        let mut gates = Vec::new();
        if opts.dump_gates {
            for (name, o) in &fwd.dacr {
                gates.push(GateDump::from_gate(format!("{name}.inner"), &o.inner, &tape));
                gates.push(GateDump::from_gate(format!("{name}.outer"), &o.outer, &tape));
            }
            for (i, node_gates) in &fwd.routes {
                let node = &model.space.nodes[*i];
                for (d, g) in node_gates {
                    gates.push(GateDump::from_gate(
                        format!("{}.{}", node.prefix(), format!("{d:?}").to_lowercase()),
                        g,
                        &tape,
                    ));
                }
            }
        }
        let masked = tape.masked_macs() as f64;
        out.frames.push(FramePrediction {
            instances,
            cost: FrameCost {
                static_macs: tape.macs() as f64 - masked,
                dynamic_macs: masked,
            },
            ledger: ledger.table(),
            budget_b: ledger.total_b_hard(),
            budget_c: ledger.total_c(),
            assignments,
            gates,
        });
        prev = Some(match opts.reference {
            ReferenceMode::Raw => fwd.raw.to_tensors(&tape),
            _ => fwd.refined.to_tensors(&tape),
        });
    }
    Ok(out)
}
