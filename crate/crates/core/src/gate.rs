//! Per-pixel gate maps shared by the temporal cells and the routing space.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    /// Temporal inner gate, `max(0, tanh)`, values in `[0, 1)`.
    Inner,
    /// Temporal outer gate, sigmoid, values in `(0, 1)`.
    Outer,
    /// Routing path gate, `max(0, tanh)`, values in `[0, 1)`.
    Path,
}

/// A `[1, H, W]` gate on the tape together with its positive support.
#[derive(Clone, Debug)]
pub struct GateMap {
    pub values: Var,
    pub kind: GateKind,
    pub positive: Rc<Vec<bool>>,
    pub h: usize,
    pub w: usize,
}

impl GateMap {
    pub fn new(tape: &Tape, values: Var, kind: GateKind) -> Result<Self> {
        let (c, h, w) = tape.value(values).dims3()?;
        if c != 1 {
            return Err(shape_err("gate_map", format!("gate must have one channel, got {c}")));
        }
        let positive = tape.value(values).data().iter().map(|&v| v > 0.0).collect();
        Ok(Self {
            values,
            kind,
            positive: Rc::new(positive),
            h,
            w,
        })
    }

    /// A constant gate (used to force gates open, closed or to a level).
    pub fn constant(tape: &mut Tape, h: usize, w: usize, value: f64, kind: GateKind) -> Result<Self> {
        let v = tape.constant(Tensor::full(&[1, h, w], value));
        Self::new(tape, v, kind)
    }

    pub fn tensor<'t>(&self, tape: &'t Tape) -> &'t Tensor {
        tape.value(self.values)
    }

    pub fn active(&self) -> usize {
        self.positive.iter().filter(|&&b| b).count()
    }

    pub fn is_closed(&self) -> bool {
        self.active() == 0
    }

    /// 8-bit grey levels, `round(255 * value)`.
    pub fn to_u8(&self, tape: &Tape) -> Vec<u8> {
        self.tensor(tape)
            .data()
            .iter()
            .map(|v| (255.0 * v.clamp(0.0, 1.0)).round() as u8)
            .collect()
    }
}

/// Union of positive supports.
pub fn union_mask(gates: &[&GateMap]) -> Rc<Vec<bool>> {
    let n = gates.first().map_or(0, |g| g.positive.len());
    Rc::new((0..n).map(|i| gates.iter().any(|g| g.positive[i])).collect())
}

/// Binary PGM (P5) encoding of an 8-bit image.
pub fn encode_pgm(w: usize, h: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}
