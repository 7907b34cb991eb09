//! Dynamic aligned cell routing: per-scale temporal alignment of a
//! reference feature to the query feature, filtered by an inner gate and
//! blended back into the query by an outer gate.
//!
//! Per scale:
//! 1. one 3x3 conv over `cat(x_q, x_r)` predicts per-location, per-tap
//!    offsets for both frames (zero-initialized);
//! 2. both frames are resampled by a shared 3x3 deformable kernel;
//! 3. the inner gate `m = δ(maxpool3(conv_s2(cat(x̂_q, x̂_r))))`, computed at
//!    half resolution and nearest-upsampled, gates both branch cells
//!    `H = relu(conv3x3(x̂))`, which only run where `m > 0`;
//! 4. `y_merge = conv1x1(cat(H_q·m, H_r·m))`;
//! 5. `G = sigmoid(conv3x3(cat(x_q, y_merge)))`, `ŷ = G·x_q + (1-G)·y_merge`.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::budget::FlopLedger;
use crate::error::Result;
use crate::gate::{GateKind, GateMap};
use crate::kernels::TAPS;
use crate::params::{Init, ParamStore};
use crate::pyramid::FeaturePyramid;
use crate::tape::{Tape, Var};

/// Initial pre-activation of every gate conv, so routing starts open.
pub const GATE_BIAS_INIT: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exec {
    /// Gated cells run as masked convolutions over the positive support.
    #[default]
    Sparse,
    /// Gated cells run densely and are multiplied by the gate afterwards.
    Dense,
}

/// Optional gate overrides, for ablations, bypass checks and the
/// single-frame baseline.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DacrForce {
    pub inner: Option<f64>,
    pub outer: Option<f64>,
}

impl DacrForce {
    pub const BYPASS: DacrForce = DacrForce {
        inner: Some(0.0),
        outer: Some(1.0),
    };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DacrConfig {
    /// Share one cell kernel between the query and reference branches.
    pub shared_cells: bool,
}

impl Default for DacrConfig {
    fn default() -> Self {
        Self { shared_cells: false }
    }
}

pub fn register(store: &mut ParamStore, prefix: &str, c: usize, cfg: &DacrConfig) -> Result<()> {
    let fan = |cin: usize, k: usize, gain: f64| Init::FanIn { fan_in: cin * k * k, gain };
    store.register(&format!("{prefix}.offset.w"), &[2 * 2 * TAPS, 2 * c, 3, 3], Init::Zeros)?;
    store.register(&format!("{prefix}.offset.b"), &[2 * 2 * TAPS], Init::Zeros)?;
    store.register(&format!("{prefix}.deform.w"), &[c, c, 3, 3], Init::Delta { noise: 0.1 })?;
    store.register(&format!("{prefix}.inner_gate.w"), &[1, 2 * c, 3, 3], fan(2 * c, 3, 0.5))?;
    store.register(&format!("{prefix}.inner_gate.b"), &[1], Init::Const(GATE_BIAS_INIT))?;
    store.register(&format!("{prefix}.cell_q.w"), &[c, c, 3, 3], fan(c, 3, 3f64.sqrt()))?;
    if !cfg.shared_cells {
        store.register(&format!("{prefix}.cell_r.w"), &[c, c, 3, 3], fan(c, 3, 3f64.sqrt()))?;
    }
    store.register(&format!("{prefix}.merge.w"), &[c, 2 * c, 1, 1], fan(2 * c, 1, 1.0))?;
    store.register(&format!("{prefix}.outer.w"), &[1, 2 * c, 3, 3], fan(2 * c, 3, 0.5))?;
    store.register(&format!("{prefix}.outer.b"), &[1], Init::Zeros)?;
    Ok(())
}

/// Per-location cost of the gated branch cells (both frames).
pub fn gated_cost_per_location(c: usize) -> f64 {
    (2 * 9 * c * c) as f64
}

/// MACs that run regardless of gating, for one scale of `h x w`.
pub fn static_macs(c: usize, h: usize, w: usize) -> u64 {
    let pos = (h * w) as u64;
    let c = c as u64;
    let half = (h.div_ceil(2) * w.div_ceil(2)) as u64;
    let offsets = pos * 9 * 2 * c * (2 * 2 * TAPS as u64);
    let deform = 2 * pos * c * c * TAPS as u64;
    let inner_gate = half * 9 * 2 * c;
    let merge = pos * 2 * c * c;
    let outer = pos * 9 * 2 * c;
    offsets + deform + inner_gate + merge + outer
}

/// Splits the offset conv output into the query and reference fields,
/// each `[2*9, H, W]` with `[dy_0, dx_0, dy_1, ...]` channel layout.
pub fn predict_offsets(tape: &mut Tape, store: &ParamStore, prefix: &str, x_q: Var, x_r: Var) -> Result<(Var, Var)> {
    let cat = tape.concat_channels(&[x_q, x_r])?;
    let w = tape.param(store, &format!("{prefix}.offset.w"))?;
    let b = tape.param(store, &format!("{prefix}.offset.b"))?;
    let off = tape.conv2d(cat, w, Some(b), 1, 1, None)?;
    let off_q = tape.slice_channels(off, 0, 2 * TAPS)?;
    let off_r = tape.slice_channels(off, 2 * TAPS, 2 * TAPS)?;
    Ok((off_q, off_r))
}

/// `x̂(i) = Σ_n x(i + p_n + off(i, n)) · W(p_n)` with bilinear sampling.
pub fn deform_sample(tape: &mut Tape, x: Var, off: Var, kernel: Var) -> Result<Var> {
    tape.deform_conv(x, off, kernel)
}

pub struct InnerRoute {
    pub y_merge: Var,
    pub gate: GateMap,
    pub h_q: Var,
    pub h_r: Var,
}

/// Inner gate, gated branch cells and the 1x1 merge.
#[allow(clippy::too_many_arguments)]
pub fn inner_route(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    cfg: &DacrConfig,
    xh_q: Var,
    xh_r: Var,
    force: Option<f64>,
    exec: Exec,
) -> Result<InnerRoute> {
    let (c, h, w) = tape.value(xh_q).dims3()?;
    let gate = match force {
        Some(v) => GateMap::constant(tape, h, w, v, GateKind::Inner)?,
        None => {
            let cat = tape.concat_channels(&[xh_q, xh_r])?;
            let gw = tape.param(store, &format!("{prefix}.inner_gate.w"))?;
            let gb = tape.param(store, &format!("{prefix}.inner_gate.b"))?;
            let pre = tape.conv2d(cat, gw, Some(gb), 2, 1, None)?;
            let pooled = tape.maxpool2d(pre, 3, 1, 1)?;
            let half = tape.gate_act(pooled);
            let full = tape.upsample_nearest(half, h, w)?;
            GateMap::new(tape, full, GateKind::Inner)?
        }
    };
    let mask = match exec {
        Exec::Sparse => Some(Rc::clone(&gate.positive)),
        Exec::Dense => None,
    };
    let wq = tape.param(store, &format!("{prefix}.cell_q.w"))?;
    let wr = if cfg.shared_cells {
        wq
    } else {
        tape.param(store, &format!("{prefix}.cell_r.w"))?
    };
    let hq = tape.conv2d(xh_q, wq, None, 1, 1, mask.clone())?;
    let h_q = tape.relu(hq);
    let hr = tape.conv2d(xh_r, wr, None, 1, 1, mask)?;
    let h_r = tape.relu(hr);
    let y_q = tape.mul_gate(h_q, gate.values)?;
    let y_r = tape.mul_gate(h_r, gate.values)?;
    let cat = tape.concat_channels(&[y_q, y_r])?;
    let mw = tape.param(store, &format!("{prefix}.merge.w"))?;
    let y_merge = tape.conv2d(cat, mw, None, 1, 0, None)?;
    debug_assert_eq!(tape.shape(y_merge)[0], c);
    Ok(InnerRoute {
        y_merge,
        gate,
        h_q,
        h_r,
    })
}

/// `G = sigmoid(conv(cat(x_q, y_merge)))`, output `G·x_q + (1-G)·y_merge`.
pub fn outer_fuse(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    x_q: Var,
    y_merge: Var,
    force: Option<f64>,
) -> Result<(Var, GateMap)> {
    let (_, h, w) = tape.value(x_q).dims3()?;
    let gate = match force {
        Some(v) => GateMap::constant(tape, h, w, v, GateKind::Outer)?,
        None => {
            let cat = tape.concat_channels(&[x_q, y_merge])?;
            let ow = tape.param(store, &format!("{prefix}.outer.w"))?;
            let ob = tape.param(store, &format!("{prefix}.outer.b"))?;
            let pre = tape.conv2d(cat, ow, Some(ob), 1, 1, None)?;
            let g = tape.sigmoid(pre);
            GateMap::new(tape, g, GateKind::Outer)?
        }
    };
    let keep = tape.mul_gate(x_q, gate.values)?;
    let inv = tape.one_minus(gate.values);
    let take = tape.mul_gate(y_merge, inv)?;
    let out = tape.add(keep, take)?;
    Ok((out, gate))
}

/// Everything one aligned cell produced at one scale.
pub struct DacrOutputs {
    pub off_q: Var,
    pub off_r: Var,
    pub xh_q: Var,
    pub xh_r: Var,
    pub y_merge: Var,
    pub inner: GateMap,
    pub outer: GateMap,
    pub y_final: Var,
}

/// One aligned cell at one scale; records the inner gate's budget term.
#[allow(clippy::too_many_arguments)]
pub fn dacr_cell(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    cfg: &DacrConfig,
    x_q: Var,
    x_r: Var,
    ledger: &mut FlopLedger,
    receptive_field: usize,
    force: DacrForce,
    exec: Exec,
) -> Result<DacrOutputs> {
    if tape.shape(x_q) != tape.shape(x_r) {
        return Err(crate::error::TprError::Shape {
            op: "dacr",
            detail: format!("query {:?} vs reference {:?}", tape.shape(x_q), tape.shape(x_r)),
        });
    }
    let c = tape.shape(x_q)[0];
    let (off_q, off_r) = predict_offsets(tape, store, prefix, x_q, x_r)?;
    let dw = tape.param(store, &format!("{prefix}.deform.w"))?;
    let xh_q = deform_sample(tape, x_q, off_q, dw)?;
    let xh_r = deform_sample(tape, x_r, off_r, dw)?;
    let inner = inner_route(tape, store, prefix, cfg, xh_q, xh_r, force.inner, exec)?;
    ledger.record(
        tape,
        &inner.gate,
        format!("{prefix}.inner_gate"),
        format!("{prefix}.cells"),
        gated_cost_per_location(c),
        receptive_field,
    )?;
    let (y_final, outer) = outer_fuse(tape, store, prefix, x_q, inner.y_merge, force.outer)?;
    Ok(DacrOutputs {
        off_q,
        off_r,
        xh_q,
        xh_r,
        y_merge: inner.y_merge,
        inner: inner.gate,
        outer,
        y_final,
    })
}

pub fn level_prefix(level: usize) -> String {
    format!("dacr.{level}")
}

/// Applies an aligned cell independently at every scale.
#[allow(clippy::too_many_arguments)]
pub fn dacr_forward(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &DacrConfig,
    pyr_q: &FeaturePyramid,
    pyr_r: &FeaturePyramid,
    ledger: &mut FlopLedger,
    receptive_field: usize,
    force: DacrForce,
    exec: Exec,
) -> Result<(FeaturePyramid, Vec<DacrOutputs>)> {
    pyr_q.check_matches(pyr_r, tape)?;
    let mut outs = Vec::with_capacity(pyr_q.levels.len());
    for (l, (q, r)) in pyr_q.levels.iter().zip(&pyr_r.levels).enumerate() {
        outs.push(dacr_cell(
            tape,
            store,
            &level_prefix(l),
            cfg,
            q.var,
            r.var,
            ledger,
            receptive_field,
            force,
            exec,
        )?);
    }
    let pyr = pyr_q.with_vars(outs.iter().map(|o| o.y_final).collect());
    Ok((pyr, outs))
}
