//! Instance association: box-pooled embeddings, the softmax assignment over
//! a track memory with an implicit "new track" class, and greedy online
//! id assignment.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TprError};
use crate::params::{Init, ParamStore};
use crate::pyramid::FeaturePyramid;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const EMBED_DIM: usize = 32;
const HIDDEN: usize = 32;

/// Axis-aligned box in frame pixels, `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn width(&self) -> f64 {
        (self.x1 - self.x0).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y1 - self.y0).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn is_empty(&self) -> bool {
        self.width() <= 0.0 || self.height() <= 0.0
    }

    pub fn iou(&self, o: &BBox) -> f64 {
        let w = (self.x1.min(o.x1) - self.x0.max(o.x0)).max(0.0);
        let h = (self.y1.min(o.y1) - self.y0.max(o.y0)).max(0.0);
        let inter = w * h;
        let union = self.area() + o.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }
}

/// Pyramid level responsible for an object whose longer side is `side` px.
pub fn level_for_size(side: f64, levels: usize) -> usize {
    let l = if side < 20.0 {
        0
    } else if side < 40.0 {
        1
    } else if side < 80.0 {
        2
    } else {
        3
    };
    l.min(levels.saturating_sub(1))
}

pub fn register(store: &mut ParamStore, c: usize) -> Result<()> {
    store.register("track.fc1.w", &[HIDDEN, c], Init::FanIn { fan_in: c, gain: 3f64.sqrt() })?;
    store.register("track.fc1.b", &[HIDDEN], Init::Zeros)?;
    store.register("track.fc2.w", &[EMBED_DIM, HIDDEN], Init::FanIn { fan_in: HIDDEN, gain: 3f64.sqrt() })?;
    store.register("track.fc2.b", &[EMBED_DIM], Init::Zeros)?;
    Ok(())
}

/// Mean feature over `bbox` on the level matching its size.
pub fn pool_box(tape: &mut Tape, pyr: &FeaturePyramid, bbox: &BBox) -> Result<Var> {
    if bbox.is_empty() {
        return Err(TprError::Invalid(format!("empty box {bbox:?}")));
    }
    let l = level_for_size(bbox.width().max(bbox.height()), pyr.levels.len());
    let level = &pyr.levels[l];
    let (_, h, w) = tape.value(level.var).dims3()?;
    let s = level.stride as f64;
    let span = |a: f64, b: f64, n: usize| {
        let lo = ((a / s).floor().max(0.0) as usize).min(n - 1);
        let hi = ((b / s).ceil() as usize).clamp(lo + 1, n);
        (lo, hi)
    };
    let (y0, y1) = span(bbox.y0, bbox.y1, h);
    let (x0, x1) = span(bbox.x0, bbox.x1, w);
    tape.crop_mean(level.var, y0, y1, x0, x1)
}

/// Two-layer perceptron on a pooled `[C]` feature; no normalization.
pub fn embed(tape: &mut Tape, store: &ParamStore, feature: Var) -> Result<Var> {
    let w1 = tape.param(store, "track.fc1.w")?;
    let b1 = tape.param(store, "track.fc1.b")?;
    let w2 = tape.param(store, "track.fc2.w")?;
    let b2 = tape.param(store, "track.fc2.b")?;
    let h = tape.linear(feature, w1, Some(b1))?;
    let h = tape.relu(h);
    tape.linear(h, w2, Some(b2))
}

pub fn embed_box(tape: &mut Tape, store: &ParamStore, pyr: &FeaturePyramid, bbox: &BBox) -> Result<Var> {
    let f = pool_box(tape, pyr, bbox)?;
    embed(tape, store, f)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `p(0) = 1 / (1 + Σ_j e^{f·f_j})`, `p(k) = e^{f·f_k} / (1 + Σ_j e^{f·f_j})`.
pub fn assign_probs_from_logits(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(0.0f64, f64::max);
    let z0 = (-m).exp();
    let zs: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let denom = z0 + zs.iter().sum::<f64>();
    std::iter::once(z0).chain(zs).map(|z| z / denom).collect()
}

pub fn assign_probs(f: &[f64], memory: &TrackMemory) -> Result<Vec<f64>> {
    let logits = memory.logits(f)?;
    Ok(assign_probs_from_logits(&logits))
}

/// Differentiable `log p(k)` over `[new, memory...]`.
pub fn assign_log_probs(tape: &mut Tape, f: Var, memory: &[Var]) -> Result<Var> {
    let mut logits = Vec::with_capacity(memory.len() + 1);
    logits.push(tape.constant(Tensor::scalar(0.0)));
    for &m in memory {
        logits.push(tape.dot(f, m)?);
    }
    let v = tape.stack(&logits)?;
    Ok(tape.log_softmax(v))
}

/// Cross-entropy `-log p(gt)`, `gt = 0` meaning a new track.
pub fn tracking_loss(tape: &mut Tape, f: Var, memory: &[Var], gt: usize) -> Result<Var> {
    if gt > memory.len() {
        return Err(TprError::Invalid(format!("label {gt} out of 0..={}", memory.len())));
    }
    let lp = assign_log_probs(tape, f, memory)?;
    let pick = tape.index(lp, gt)?;
    Ok(tape.scale(pick, -1.0))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryUpdate {
    #[default]
    Overwrite,
    /// `m <- a·m + (1-a)·f`.
    Ema(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackEntry {
    pub id: u64,
    pub embedding: Vec<f64>,
    pub last_seen: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackMemory {
    pub dim: usize,
    pub entries: Vec<TrackEntry>,
    pub next_id: u64,
    pub update: MemoryUpdate,
}

impl TrackMemory {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entries: Vec::new(),
            next_id: 1,
            update: MemoryUpdate::Overwrite,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, embedding: Vec<f64>, frame: usize) -> Result<u64> {
        self.check_dim(&embedding)?;
        let id = self.next_id;
        self.next_id += 1;
        self.entries.push(TrackEntry {
            id,
            embedding,
            last_seen: frame,
        });
        Ok(id)
    }

    fn check_dim(&self, f: &[f64]) -> Result<()> {
        if f.len() != self.dim {
            return Err(TprError::Shape {
                op: "track_memory",
                detail: format!("embedding dim {} vs memory dim {}", f.len(), self.dim),
            });
        }
        Ok(())
    }

    pub fn logits(&self, f: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(f)?;
        Ok(self.entries.iter().map(|e| dot(f, &e.embedding)).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub candidate: usize,
    pub id: u64,
    /// Chosen class: 0 for a new track, otherwise 1-based memory slot.
    pub k: usize,
    /// Renormalized probability of the chosen class.
    pub prob: f64,
}

/// Greedy association in descending score order. Each candidate takes the
/// argmax of its distribution over the classes not yet claimed this frame
/// (ties go to the lowest existing id, a new track last). Returned in
/// input order.
pub fn associate(candidates: &[(Vec<f64>, f64)], memory: &mut TrackMemory, frame: usize) -> Result<Vec<Assignment>> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| candidates[b].1.total_cmp(&candidates[a].1).then(a.cmp(&b)));
    let known = memory.len();
    let mut claimed = vec![false; known];
    let mut out = Vec::with_capacity(candidates.len());
    for ci in order {
        let f = &candidates[ci].0;
        let logits = memory.logits(f)?;
        let probs = assign_probs_from_logits(&logits[..known]);
        let open: f64 = probs[0] + (0..known).filter(|&j| !claimed[j]).map(|j| probs[j + 1]).sum::<f64>();
        let mut slots: Vec<usize> = (0..known).filter(|&j| !claimed[j]).collect();
        slots.sort_by_key(|&j| memory.entries[j].id);
        let mut best = (0usize, probs[0]);
        let mut best_slot = None;
        for j in slots {
            let p = probs[j + 1];
            if best_slot.is_none() && p >= best.1 || best_slot.is_some() && p > best.1 {
                best = (j + 1, p);
                best_slot = Some(j);
            }
        }
        let id = match best_slot {
            Some(j) => {
                claimed[j] = true;
                let e = &mut memory.entries[j];
                match memory.update {
                    MemoryUpdate::Overwrite => e.embedding.clone_from(f),
                    MemoryUpdate::Ema(a) => {
                        for (m, v) in e.embedding.iter_mut().zip(f) {
                            *m = a * *m + (1.0 - a) * v;
                        }
                    }
                }
                e.last_seen = frame;
                e.id
            }
            None => memory.insert(f.clone(), frame)?,
        };
        out.push(Assignment {
            candidate: ci,
            id,
            k: best.0,
            prob: best.1 / open,
        });
    }
    out.sort_by_key(|a| a.candidate);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn prob_examples() {
        assert_eq!(assign_probs_from_logits(&[]), vec![1.0]);
        assert!(close(&assign_probs_from_logits(&[0.0, 0.0]), &[1.0 / 3.0; 3], 1e-15));
        assert!(close(&assign_probs_from_logits(&[3f64.ln()]), &[0.25, 0.75], 1e-12));
        let p = assign_probs_from_logits(&[500.0, -500.0, 499.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn loss_examples() {
        let mut t = Tape::new();
        let f = t.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let m1 = t.constant(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let m2 = t.constant(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let l = tracking_loss(&mut t, f, &[m1, m2], 2).unwrap();
        assert!((t.value(l).item() - 3f64.ln()).abs() < 1e-12);
        assert!(tracking_loss(&mut t, f, &[m1, m2], 3).is_err());
        let big = t.constant(Tensor::new(vec![2], vec![100.0, 0.0]).unwrap());
        let g = t.constant(Tensor::new(vec![2], vec![10.0, 0.0]).unwrap());
        let l = tracking_loss(&mut t, big, &[g], 1).unwrap();
        assert!(t.value(l).item() < 1e-12);
    }

    #[test]
    fn associate_examples() {
        let mut m = TrackMemory::new(2);
        let a = associate(&[(vec![0.0, 0.0], 0.9), (vec![1.0, 0.0], 0.8)], &mut m, 0).unwrap();
        assert_eq!(a.iter().map(|x| x.id).collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(m.len(), 2);

        let mut m = TrackMemory::new(2);
        m.insert(vec![10.0, 0.0], 0).unwrap();
        let a = associate(&[(vec![1.0, 0.0], 0.5)], &mut m, 1).unwrap();
        assert_eq!((a[0].id, a[0].k), (1, 1));
        assert_eq!(m.entries[0].embedding, vec![1.0, 0.0]);

        let mut m = TrackMemory::new(2);
        m.insert(vec![5.0, 0.0], 0).unwrap();
        m.insert(vec![0.0, 5.0], 0).unwrap();
        // both prefer id 1; the lower score falls back to id 2
        let low = (vec![1.0, 0.6], 0.4);
        let high = (vec![1.0, 0.0], 0.9);
        let a = associate(&[low, high], &mut m, 1).unwrap();
        assert_eq!((a[0].id, a[1].id), (2, 1));
    }

    #[test]
    fn zero_feature_zero_embedding() {
        let mut s = ParamStore::new(0);
        register(&mut s, 8).unwrap();
        let mut t = Tape::new();
        let z = t.constant(Tensor::zeros(&[8]));
        let e = embed(&mut t, &s, z).unwrap();
        assert!(t.value(e).data().iter().all(|&v| v == 0.0));
        assert_eq!(t.shape(e), &[EMBED_DIM]);
    }

    #[test]
    fn box_levels() {
        assert_eq!(level_for_size(10.0, 4), 0);
        assert_eq!(level_for_size(39.9, 4), 1);
        assert_eq!(level_for_size(79.0, 4), 2);
        assert_eq!(level_for_size(90.0, 4), 3);
        assert_eq!(level_for_size(90.0, 2), 1);
        let b = BBox { x0: 0.0, y0: 0.0, x1: 2.0, y1: 2.0 };
        let c = BBox { x0: 1.0, y0: 0.0, x1: 3.0, y1: 2.0 };
        assert!((b.iou(&c) - 1.0 / 3.0).abs() < 1e-15);
    }
}
