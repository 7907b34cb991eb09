//! Toy task heads: a shared dense classification / box tower on every
//! level (anchor-free, centre-sampled) and a per-class mask head on the
//! finest level.

use serde::{Deserialize, Serialize};
use tpr_core::kernels;
use tpr_core::pyramid::FeaturePyramid;
use tpr_core::tape::{sigmoid, Tape, Var};
use tpr_core::tracker::{level_for_size, BBox};
use tpr_core::{Init, ParamStore, Result, Tensor, TprError};

use crate::data::{InstanceGt, CLASSES};

/// Box targets are `ltrb / (BOX_SCALE * stride)`.
pub const BOX_SCALE: f64 = 4.0;
/// Mask logits live at `frame / MASK_STRIDE`.
pub const MASK_STRIDE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub top_k: usize,
    pub negative_weight: f64,
    /// Positive sampling radius around a box centre, in strides.
    pub center_radius: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.3,
            nms_iou: 0.5,
            top_k: 8,
            negative_weight: 0.25,
            center_radius: 1.5,
        }
    }
}

pub fn register(store: &mut ParamStore, c: usize) -> Result<()> {
    let fan = |gain: f64| Init::FanIn { fan_in: 9 * c, gain };
    store.register("head.tower.w", &[c, c, 3, 3], fan(6f64.sqrt()))?;
    store.register("head.tower.b", &[c], Init::Zeros)?;
    store.register("head.cls.w", &[CLASSES, c, 3, 3], fan(0.3))?;
    store.register("head.cls.b", &[CLASSES], Init::Const(-2.0))?;
    store.register("head.box.w", &[4, c, 3, 3], fan(0.3))?;
    store.register("head.box.b", &[4], Init::Const(0.5))?;
    store.register("head.mask1.w", &[c, c, 3, 3], fan(6f64.sqrt()))?;
    store.register("head.mask1.b", &[c], Init::Zeros)?;
    store.register("head.mask2.w", &[CLASSES, c, 3, 3], fan(0.3))?;
    store.register("head.mask2.b", &[CLASSES], Init::Zeros)?;
    Ok(())
}

pub struct HeadOutputs {
    /// `[CLASSES, h, w]` logits per level.
    pub cls: Vec<Var>,
    /// `[4, h, w]` normalized ltrb per level.
    pub boxes: Vec<Var>,
    /// `[CLASSES, H/4, W/4]` logits.
    pub mask: Var,
    pub strides: Vec<usize>,
}

pub fn heads_forward(tape: &mut Tape, store: &ParamStore, pyr: &FeaturePyramid) -> Result<HeadOutputs> {
    let p = |tape: &mut Tape, n: &str| tape.param(store, n);
    let (tw, tb) = (p(tape, "head.tower.w")?, p(tape, "head.tower.b")?);
    let (cw, cb) = (p(tape, "head.cls.w")?, p(tape, "head.cls.b")?);
    let (bw, bb) = (p(tape, "head.box.w")?, p(tape, "head.box.b")?);
    let mut cls = Vec::with_capacity(pyr.levels.len());
    let mut boxes = Vec::with_capacity(pyr.levels.len());
    for level in &pyr.levels {
        let t = tape.conv2d(level.var, tw, Some(tb), 1, 1, None)?;
        let t = tape.relu(t);
        cls.push(tape.conv2d(t, cw, Some(cb), 1, 1, None)?);
        boxes.push(tape.conv2d(t, bw, Some(bb), 1, 1, None)?);
    }
    let finest = &pyr.levels[0];
    let (_, h, w) = tape.value(finest.var).dims3()?;
    let scale = finest.stride / MASK_STRIDE;
    let (m1w, m1b) = (p(tape, "head.mask1.w")?, p(tape, "head.mask1.b")?);
    let (m2w, m2b) = (p(tape, "head.mask2.w")?, p(tape, "head.mask2.b")?);
    let m = tape.conv2d(finest.var, m1w, Some(m1b), 1, 1, None)?;
    let m = tape.relu(m);
    let m = tape.upsample_bilinear(m, h * scale, w * scale)?;
    let mask = tape.conv2d(m, m2w, Some(m2b), 1, 1, None)?;
    Ok(HeadOutputs {
        cls,
        boxes,
        mask,
        strides: pyr.levels.iter().map(|l| l.stride).collect(),
    })
}

/// Dense targets of one frame.
pub struct Targets {
    pub cls: Vec<Tensor>,
    pub cls_weight: Vec<Tensor>,
    pub boxes: Vec<Tensor>,
    pub box_weight: Vec<Tensor>,
    pub mask: Tensor,
    pub positives: usize,
}

/// Locations whose centre lies inside the box and within
/// `center_radius` strides of its centre, on the level matching its size.
/// The nearest location is used when none qualifies.
pub fn build_targets(
    insts: &[InstanceGt],
    shapes: &[(usize, usize)],
    strides: &[usize],
    frame_hw: (usize, usize),
    cfg: &HeadConfig,
) -> Targets {
    let levels = shapes.len();
    let mut cls: Vec<Tensor> = shapes.iter().map(|&(h, w)| Tensor::zeros(&[CLASSES, h, w])).collect();
    let mut cls_weight: Vec<Tensor> = shapes
        .iter()
        .map(|&(h, w)| Tensor::full(&[CLASSES, h, w], cfg.negative_weight))
        .collect();
    let mut boxes: Vec<Tensor> = shapes.iter().map(|&(h, w)| Tensor::zeros(&[4, h, w])).collect();
    let mut box_weight: Vec<Tensor> = shapes.iter().map(|&(h, w)| Tensor::zeros(&[4, h, w])).collect();
    // (area of the owning box) per location, smallest box wins
    let mut owner_area: Vec<Vec<f64>> = shapes.iter().map(|&(h, w)| vec![f64::INFINITY; h * w]).collect();
    let mut positives = 0;
    for inst in insts {
        let b = &inst.bbox;
        let l = level_for_size(b.width().max(b.height()), levels);
        let (h, w) = shapes[l];
        let s = strides[l] as f64;
        let (bcx, bcy) = ((b.x0 + b.x1) / 2.0, (b.y0 + b.y1) / 2.0);
        let mut locs = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let (cx, cy) = ((x as f64 + 0.5) * s, (y as f64 + 0.5) * s);
                let inside = cx > b.x0 && cx < b.x1 && cy > b.y0 && cy < b.y1;
                let near = (cx - bcx).abs() <= cfg.center_radius * s && (cy - bcy).abs() <= cfg.center_radius * s;
                if inside && near {
                    locs.push((y, x));
                }
            }
        }
        if locs.is_empty() {
            let y = ((bcy / s) as usize).min(h - 1);
            let x = ((bcx / s) as usize).min(w - 1);
            locs.push((y, x));
        }
        for (y, x) in locs {
            let i = y * w + x;
            if b.area() >= owner_area[l][i] {
                continue;
            }
            if owner_area[l][i].is_infinite() {
                positives += 1;
            }
            owner_area[l][i] = b.area();
            let (cx, cy) = ((x as f64 + 0.5) * s, (y as f64 + 0.5) * s);
            let ltrb = [cx - b.x0, cy - b.y0, b.x1 - cx, b.y1 - cy];
            for c in 0..CLASSES {
                cls[l].data_mut()[(c * h + y) * w + x] = if c == inst.class { 1.0 } else { 0.0 };
                cls_weight[l].data_mut()[(c * h + y) * w + x] = 1.0;
            }
            for (k, v) in ltrb.iter().enumerate() {
                boxes[l].data_mut()[(k * h + y) * w + x] = v.max(0.0) / (BOX_SCALE * s);
                box_weight[l].data_mut()[(k * h + y) * w + x] = 1.0;
            }
        }
    }
    let (fh, fw) = frame_hw;
    let (mh, mw) = (fh / MASK_STRIDE, fw / MASK_STRIDE);
    let mut mask = Tensor::zeros(&[CLASSES, mh, mw]);
    for y in 0..mh {
        for x in 0..mw {
            let (py, px) = (y * MASK_STRIDE + MASK_STRIDE / 2, x * MASK_STRIDE + MASK_STRIDE / 2);
            for inst in insts {
                if inst.mask[py * fw + px] {
                    mask.data_mut()[(inst.class * mh + y) * mw + x] = 1.0;
                }
            }
        }
    }
    Targets {
        cls,
        cls_weight,
        boxes,
        box_weight,
        mask,
        positives,
    }
}

pub struct DetLosses {
    pub cls: Var,
    pub bbox: Var,
    pub mask: Var,
}

pub fn detection_losses(tape: &mut Tape, out: &HeadOutputs, t: &Targets) -> Result<DetLosses> {
    let norm = 1.0 / t.positives.max(1) as f64;
    let mut cls_terms = Vec::with_capacity(out.cls.len());
    let mut box_terms = Vec::with_capacity(out.boxes.len());
    for l in 0..out.cls.len() {
        cls_terms.push(tape.bce_with_logits(out.cls[l], &t.cls[l], &t.cls_weight[l])?);
        box_terms.push(tape.smooth_l1(out.boxes[l], &t.boxes[l], &t.box_weight[l], 0.1)?);
    }
    let cls = tape.stack(&cls_terms)?;
    let cls = tape.sum(cls);
    let cls = tape.scale(cls, norm);
    let bbox = tape.stack(&box_terms)?;
    let bbox = tape.sum(bbox);
    let bbox = tape.scale(bbox, norm);
    let mask = tape.bce_with_logits(out.mask, &t.mask, &balanced_weights(&t.mask))?;
    Ok(DetLosses { cls, bbox, mask })
}

/// Per channel, positives and negatives each carry half of the weight.
fn balanced_weights(target: &Tensor) -> Tensor {
    let c = target.shape()[0];
    let n = target.len() / c;
    let mut w = Tensor::zeros(target.shape());
    for ch in 0..c {
        let t = &target.data()[ch * n..(ch + 1) * n];
        let pos = t.iter().filter(|&&v| v > 0.5).count();
        let (wp, wn) = (0.5 / pos.max(1) as f64, 0.5 / (n - pos).max(1) as f64);
        for (o, &v) in w.data_mut()[ch * n..(ch + 1) * n].iter_mut().zip(t) {
            *o = (if v > 0.5 { wp } else { wn }) / c as f64;
        }
    }
    w
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class: usize,
    pub score: f64,
    pub bbox: BBox,
    pub level: usize,
}

/// Thresholded, per-class NMS-filtered top-k detections, best first.
pub fn decode(tape: &Tape, out: &HeadOutputs, frame_hw: (usize, usize), cfg: &HeadConfig) -> Result<Vec<Detection>> {
    let (fh, fw) = (frame_hw.0 as f64, frame_hw.1 as f64);
    let mut dets = Vec::new();
    for (l, (&cv, &bv)) in out.cls.iter().zip(&out.boxes).enumerate() {
        let (_, h, w) = tape.value(cv).dims3()?;
        let cd = tape.value(cv).data();
        let bd = tape.value(bv).data();
        let s = out.strides[l] as f64;
        for y in 0..h {
            for x in 0..w {
                let (mut best, mut best_c) = (f64::NEG_INFINITY, 0);
                for c in 0..CLASSES {
                    let v = cd[(c * h + y) * w + x];
                    if v > best {
                        best = v;
                        best_c = c;
                    }
                }
                let score = sigmoid(best);
                if score < cfg.score_threshold {
                    continue;
                }
                let d = |k: usize| bd[(k * h + y) * w + x].max(0.0) * BOX_SCALE * s;
                let (cx, cy) = ((x as f64 + 0.5) * s, (y as f64 + 0.5) * s);
                let bbox = BBox {
                    x0: (cx - d(0)).clamp(0.0, fw),
                    y0: (cy - d(1)).clamp(0.0, fh),
                    x1: (cx + d(2)).clamp(0.0, fw),
                    y1: (cy + d(3)).clamp(0.0, fh),
                };
                if bbox.width() >= 1.0 && bbox.height() >= 1.0 {
                    dets.push(Detection {
                        class: best_c,
                        score,
                        bbox,
                        level: l,
                    });
                }
            }
        }
    }
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        if kept.len() == cfg.top_k {
            break;
        }
        if kept.iter().all(|k| k.class != d.class || k.bbox.iou(&d.bbox) <= cfg.nms_iou) {
            kept.push(d);
        }
    }
    Ok(kept)
}

/// Class-channel logits upsampled to the frame, positive inside the box.
pub fn instance_mask(tape: &Tape, out: &HeadOutputs, det: &Detection, frame_hw: (usize, usize)) -> Result<Vec<bool>> {
    let (c, mh, mw) = tape.value(out.mask).dims3()?;
    if det.class >= c {
        return Err(TprError::Invalid(format!("class {} out of {c}", det.class)));
    }
    let (fh, fw) = frame_hw;
    let chan = &tape.value(out.mask).data()[det.class * mh * mw..(det.class + 1) * mh * mw];
    let up = kernels::upsample_bilinear_forward(1, mh, mw, fh, fw, chan);
    let b = &det.bbox;
    Ok((0..fh * fw)
        .map(|i| {
            let (y, x) = ((i / fw) as f64 + 0.5, (i % fw) as f64 + 0.5);
            up[i] > 0.0 && x >= b.x0 && x <= b.x1 && y >= b.y0 && y <= b.y1
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tpr_core::pyramid::FINEST_STRIDE;

    #[test]
    fn zero_pyramid_no_candidates() {
        let mut s = ParamStore::new(0);
        register(&mut s, 4).unwrap();
        let mut t = Tape::new();
        let levels: Vec<Tensor> = [(12, 12), (6, 6), (3, 3), (2, 2)].iter().map(|&(h, w)| Tensor::zeros(&[4, h, w])).collect();
        let p = FeaturePyramid::from_tensors(&mut t, 0, &levels);
        let out = heads_forward(&mut t, &s, &p).unwrap();
        assert!(decode(&t, &out, (96, 96), &HeadConfig::default()).unwrap().is_empty());
        assert_eq!(t.shape(out.mask), &[CLASSES, 24, 24]);
    }

    #[test]
    fn every_instance_gets_a_positive() {
        let (h, w) = (96, 96);
        let mk = |id, class, x0: usize, y0: usize, side: usize| {
            let mut mask = vec![false; h * w];
            for y in y0..y0 + side {
                for x in x0..x0 + side {
                    mask[y * w + x] = true;
                }
            }
            let bbox = BBox { x0: x0 as f64, y0: y0 as f64, x1: (x0 + side) as f64, y1: (y0 + side) as f64 };
            InstanceGt { id, class, mask, bbox }
        };
        let insts = vec![mk(1, 0, 3, 3, 6), mk(2, 2, 30, 30, 50)];
        let shapes = [(12, 12), (6, 6), (3, 3), (2, 2)];
        let strides: Vec<usize> = (0..4).map(|i| FINEST_STRIDE << i).collect();
        let t = build_targets(&insts, &shapes, &strides, (h, w), &HeadConfig::default());
        assert!(t.positives >= 2);
        assert!(t.cls[0].data()[..144].iter().any(|&v| v == 1.0));
        assert!(t.cls[2].data()[2 * 9..].iter().any(|&v| v == 1.0));
        assert!(t.mask.data().iter().any(|&v| v == 1.0));
    }
}
