//! Spatio-temporal mask AP, association accuracy and per-frame mask IoU.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{ClipGroundTruth, CLASSES};
use crate::infer::ClipPrediction;

/// `(50 + 5i) / 100`, i = 0..10.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub st_map: f64,
    pub association_accuracy: f64,
    pub mean_frame_iou: f64,
    pub gt_links: usize,
    pub gt_tubes: usize,
    pub pred_tubes: usize,
}

fn mask_counts(a: &[bool], b: &[bool]) -> (usize, usize) {
    let mut inter = 0;
    let mut union = 0;
    for (&x, &y) in a.iter().zip(b) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    (inter, union)
}

pub fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let (i, u) = mask_counts(a, b);
    if u == 0 {
        0.0
    } else {
        i as f64 / u as f64
    }
}

struct Tube<'a> {
    clip: usize,
    class: usize,
    score: f64,
    masks: BTreeMap<usize, &'a [bool]>,
}

/// `Σ_t |P_t ∩ G_t| / Σ_t |P_t ∪ G_t|`, absent frames counting as empty.
fn tube_iou(p: &Tube, g: &Tube) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    let frames: std::collections::BTreeSet<usize> = p.masks.keys().chain(g.masks.keys()).copied().collect();
    for t in frames {
        match (p.masks.get(&t), g.masks.get(&t)) {
            (Some(a), Some(b)) => {
                let (i, u) = mask_counts(a, b);
                inter += i;
                union += u;
            }
            (Some(m), None) | (None, Some(m)) => union += m.iter().filter(|&&v| v).count(),
            (None, None) => {}
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Tubes in order of first appearance, so ties never depend on id values.
fn pred_tubes(clip: usize, p: &ClipPrediction) -> Vec<Tube<'_>> {
    let mut slot: BTreeMap<u64, usize> = BTreeMap::new();
    let mut groups: Vec<Vec<(usize, usize, f64, &[bool])>> = Vec::new();
    for (t, f) in p.frames.iter().enumerate() {
        for inst in &f.instances {
            let k = *slot.entry(inst.id).or_insert_with(|| {
                groups.push(Vec::new());
                groups.len() - 1
            });
            groups[k].push((t, inst.class, inst.score, &inst.mask));
        }
    }
    groups
        .into_iter()
        .map(|items| {
            let mut votes = [0.0; CLASSES];
            for &(_, c, s, _) in &items {
                votes[c.min(CLASSES - 1)] += s;
            }
            let class = (0..CLASSES).fold(0, |b, c| if votes[c] > votes[b] { c } else { b });
            Tube {
                clip,
                class,
                score: items.iter().map(|i| i.2).sum::<f64>() / items.len() as f64,
                masks: items.iter().map(|&(t, _, _, m)| (t, m)).collect(),
            }
        })
        .collect()
}

fn gt_tubes(clip: usize, g: &ClipGroundTruth) -> Vec<Tube<'_>> {
    let mut by_id: BTreeMap<u64, Tube> = BTreeMap::new();
    for (t, f) in g.frames.iter().enumerate() {
        for inst in f {
            by_id
                .entry(inst.id)
                .or_insert_with(|| Tube {
                    clip,
                    class: inst.class,
                    score: 1.0,
                    masks: BTreeMap::new(),
                })
                .masks
                .insert(t, &inst.mask);
        }
    }
    by_id.into_values().collect()
}

/// 101-point interpolated AP of a ranked TP/FP list.
fn average_precision(hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(hits.len());
    for (k, &h) in hits.iter().enumerate() {
        tp += usize::from(h);
        curve.push((tp as f64 / num_gt as f64, tp as f64 / (k + 1) as f64));
    }
    for i in (0..curve.len().saturating_sub(1)).rev() {
        curve[i].1 = curve[i].1.max(curve[i + 1].1);
    }
    let mut sum = 0.0;
    let mut j = 0;
    for r in 0..=100 {
        let target = r as f64 / 100.0;
        while j < curve.len() && curve[j].0 < target {
            j += 1;
        }
        if j < curve.len() {
            sum += curve[j].1;
        }
    }
    sum / 101.0
}

fn st_map(preds: &[ClipPrediction], gts: &[ClipGroundTruth]) -> (f64, usize, usize) {
    let p: Vec<Tube> = preds.iter().enumerate().flat_map(|(i, p)| pred_tubes(i, p)).collect();
    let g: Vec<Tube> = gts.iter().enumerate().flat_map(|(i, g)| gt_tubes(i, g)).collect();
    let mut per_class = Vec::new();
    for class in 0..CLASSES {
        let gi: Vec<usize> = (0..g.len()).filter(|&i| g[i].class == class).collect();
        if gi.is_empty() {
            continue;
        }
        let mut pi: Vec<usize> = (0..p.len()).filter(|&i| p[i].class == class).collect();
        pi.sort_by(|&a, &b| p[b].score.total_cmp(&p[a].score).then(a.cmp(&b)));
        let ious: Vec<Vec<f64>> = pi
            .iter()
            .map(|&a| gi.iter().map(|&b| if p[a].clip == g[b].clip { tube_iou(&p[a], &g[b]) } else { -1.0 }).collect())
            .collect();
        let mut aps = 0.0;
        for thr in iou_thresholds() {
            let mut taken = vec![false; gi.len()];
            let hits: Vec<bool> = ious
                .iter()
                .map(|row| {
                    let best = (0..gi.len())
                        .filter(|&k| !taken[k] && row[k] >= thr)
                        .fold(None, |b: Option<usize>, k| match b {
                            Some(j) if row[j] >= row[k] => Some(j),
                            _ => Some(k),
                        });
                    if let Some(k) = best {
                        taken[k] = true;
                    }
                    best.is_some()
                })
                .collect();
            aps += average_precision(&hits, gi.len());
        }
        per_class.push(aps / 10.0);
    }
    let m = if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().sum::<f64>() / per_class.len() as f64
    };
    (m, g.len(), p.len())
}

/// One-to-one greedy matching of GT to predicted instances by mask IoU
/// (highest first, IoU >= `min_iou`); returns `(gt index, pred index, iou)`.
fn match_frame(gt: &[&[bool]], pred: &[&[bool]], min_iou: f64) -> Vec<(usize, usize, f64)> {
    let mut pairs = Vec::new();
    for (i, g) in gt.iter().enumerate() {
        for (j, p) in pred.iter().enumerate() {
            let iou = mask_iou(g, p);
            if iou >= min_iou && iou > 0.0 {
                pairs.push((i, j, iou));
            }
        }
    }
    pairs.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
    let (mut gu, mut pu) = (vec![false; gt.len()], vec![false; pred.len()]);
    let mut out = Vec::new();
    for (i, j, iou) in pairs {
        if !gu[i] && !pu[j] {
            gu[i] = true;
            pu[j] = true;
            out.push((i, j, iou));
        }
    }
    out
}

pub const LINK_MATCH_IOU: f64 = 0.5;

/// Metrics over a set of clips. Association accuracy is the fraction of
/// GT links (an id present in consecutive frames) whose two matched
/// predictions carry the same id; with no links at all it is 1.
pub fn evaluate(preds: &[ClipPrediction], gts: &[ClipGroundTruth]) -> Metrics {
    let (st_map, gt_tubes, pred_tubes) = st_map(preds, gts);
    let empty = ClipPrediction::default();
    let (mut links, mut good) = (0usize, 0usize);
    let (mut iou_sum, mut iou_n) = (0.0, 0usize);
    for (ci, g) in gts.iter().enumerate() {
        let p = preds.get(ci).unwrap_or(&empty);
        let mut matched: Vec<BTreeMap<u64, u64>> = Vec::with_capacity(g.frames.len());
        for (t, gf) in g.frames.iter().enumerate() {
            let gm: Vec<&[bool]> = gf.iter().map(|i| i.mask.as_slice()).collect();
            let pf = p.frames.get(t).map(|f| f.instances.as_slice()).unwrap_or(&[]);
            let pm: Vec<&[bool]> = pf.iter().map(|i| i.mask.as_slice()).collect();
            let mut ids = BTreeMap::new();
            for (gi, pi, _) in match_frame(&gm, &pm, LINK_MATCH_IOU) {
                ids.insert(gf[gi].id, pf[pi].id);
            }
            let best = match_frame(&gm, &pm, 0.0);
            iou_sum += best.iter().map(|m| m.2).sum::<f64>();
            iou_n += gf.len();
            matched.push(ids);
        }
        for t in 1..g.frames.len() {
            for inst in &g.frames[t] {
                if !g.frames[t - 1].iter().any(|i| i.id == inst.id) {
                    continue;
                }
                links += 1;
                if let (Some(a), Some(b)) = (matched[t - 1].get(&inst.id), matched[t].get(&inst.id)) {
                    good += usize::from(a == b);
                }
            }
        }
    }
    Metrics {
        st_map,
        association_accuracy: if links == 0 { 1.0 } else { good as f64 / links as f64 },
        mean_frame_iou: if iou_n == 0 { 0.0 } else { iou_sum / iou_n as f64 },
        gt_links: links,
        gt_tubes,
        pred_tubes,
    }
}

/// Predictions that reproduce the ground truth exactly.
pub fn oracle_predictions(gt: &ClipGroundTruth) -> ClipPrediction {
    use crate::infer::{FramePrediction, PredInstance};
    use tpr_core::budget::FrameCost;
    ClipPrediction {
        height: gt.height,
        width: gt.width,
        frames: gt
            .frames
            .iter()
            .map(|f| FramePrediction {
                instances: f
                    .iter()
                    .map(|i| PredInstance {
                        id: i.id,
                        class: i.class,
                        score: 1.0,
                        bbox: i.bbox,
                        mask: i.mask.clone(),
                    })
                    .collect(),
                cost: FrameCost {
                    static_macs: 0.0,
                    dynamic_macs: 0.0,
                },
                ledger: Vec::new(),
                budget_b: 0.0,
                budget_c: 0.0,
                assignments: Vec::new(),
                gates: Vec::new(),
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thresholds_exact() {
        let t = iou_thresholds();
        assert_eq!(t[0], 0.5);
        assert_eq!(t[2], 0.6);
        assert_eq!(t[9], 0.95);
    }

    #[test]
    fn ap_single_hit() {
        assert_eq!(average_precision(&[true], 1), 1.0);
        assert_eq!(average_precision(&[], 1), 0.0);
        assert_eq!(average_precision(&[false, true], 1), 0.5);
    }
}
