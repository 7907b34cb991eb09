//! Per-frame feature pyramids from a small bias-free backbone with
//! top-down lateral fusion.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TprError};
use crate::params::{Init, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Stride of the finest pyramid level relative to the frame.
pub const FINEST_STRIDE: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stem_channels: usize,
    pub channels: usize,
    pub levels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            stem_channels: 8,
            channels: 16,
            levels: 4,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(TprError::Invalid(format!("pyramid needs >= 2 levels, got {}", self.levels)));
        }
        if self.channels < 4 {
            return Err(TprError::Invalid(format!("pyramid needs >= 4 channels, got {}", self.channels)));
        }
        Ok(())
    }

    pub fn register(&self, store: &mut ParamStore) -> Result<()> {
        self.validate()?;
        let (i, s, c) = (self.in_channels, self.stem_channels, self.channels);
        let fan = |cin: usize, k: usize| Init::FanIn { fan_in: cin * k * k, gain: 6f64.sqrt() };
        store.register("backbone.stem.w", &[s, i, 3, 3], fan(i, 3))?;
        store.register("backbone.stage2.w", &[c, s, 3, 3], fan(s, 3))?;
        store.register("backbone.stage3.w", &[c, c, 3, 3], fan(c, 3))?;
        for l in 1..self.levels {
            store.register(&format!("backbone.down{l}.w"), &[c, c, 3, 3], fan(c, 3))?;
        }
        for l in 0..self.levels {
            store.register(&format!("fpn.lateral{l}.w"), &[c, c, 1, 1], Init::FanIn { fan_in: c, gain: 3f64.sqrt() })?;
        }
        Ok(())
    }

    /// Spatial size of every level for an `h x w` frame (ceil division).
    pub fn level_shapes(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.levels);
        let (mut lh, mut lw) = (h / FINEST_STRIDE, w / FINEST_STRIDE);
        for _ in 0..self.levels {
            out.push((lh, lw));
            lh = lh.div_ceil(2);
            lw = lw.div_ceil(2);
        }
        out
    }

    /// Convolution MACs of one `build_pyramid` call.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (i, s, c) = (self.in_channels as u64, self.stem_channels as u64, self.channels as u64);
        let (h2, w2) = (h.div_ceil(2) as u64, w.div_ceil(2) as u64);
        let (h4, w4) = (h2.div_ceil(2), w2.div_ceil(2));
        let shapes = self.level_shapes(h, w);
        let mut total = h2 * w2 * s * i * 9 + h4 * w4 * c * s * 9;
        for &(lh, lw) in &shapes {
            let pos = (lh * lw) as u64;
            // stage3 (finest) or down{l}, then the lateral
            total += pos * c * c * 9 + pos * c * c;
        }
        total
    }
}

#[derive(Clone, Debug)]
pub struct Level {
    /// Stride relative to the frame (8, 16, 32, ...).
    pub stride: usize,
    pub var: Var,
}

/// Per-scale feature maps of one frame, finest first.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub frame_index: usize,
    pub levels: Vec<Level>,
}

impl FeaturePyramid {
    pub fn vars(&self) -> Vec<Var> {
        self.levels.iter().map(|l| l.var).collect()
    }

    pub fn shapes(&self, tape: &Tape) -> Vec<(usize, usize)> {
        self.levels.iter().map(|l| (tape.shape(l.var)[1], tape.shape(l.var)[2])).collect()
    }

    pub fn channels(&self, tape: &Tape) -> usize {
        tape.shape(self.levels[0].var)[0]
    }

    pub fn to_tensors(&self, tape: &Tape) -> Vec<Tensor> {
        self.levels.iter().map(|l| tape.value(l.var).clone()).collect()
    }

    /// Places detached level tensors on a tape as constants.
    pub fn from_tensors(tape: &mut Tape, frame_index: usize, levels: &[Tensor]) -> Self {
        Self {
            frame_index,
            levels: levels
                .iter()
                .enumerate()
                .map(|(i, t)| Level {
                    stride: FINEST_STRIDE << i,
                    var: tape.constant(t.clone()),
                })
                .collect(),
        }
    }

    pub fn with_vars(&self, vars: Vec<Var>) -> Self {
        Self {
            frame_index: self.frame_index,
            levels: self
                .levels
                .iter()
                .zip(vars)
                .map(|(l, var)| Level { stride: l.stride, var })
                .collect(),
        }
    }

    pub fn check_matches(&self, other: &FeaturePyramid, tape: &Tape) -> Result<()> {
        if self.levels.len() != other.levels.len() {
            return Err(TprError::Shape {
                op: "pyramid",
                detail: format!("{} levels vs {}", self.levels.len(), other.levels.len()),
            });
        }
        for (i, (a, b)) in self.levels.iter().zip(&other.levels).enumerate() {
            if tape.shape(a.var) != tape.shape(b.var) {
                return Err(TprError::Shape {
                    op: "pyramid",
                    detail: format!("level {i}: {:?} vs {:?}", tape.shape(a.var), tape.shape(b.var)),
                });
            }
        }
        Ok(())
    }
}

/// Builds the pyramid of one `[3, H, W]` frame.
pub fn build_pyramid(
    tape: &mut Tape,
    frame: Var,
    frame_index: usize,
    cfg: &BackboneConfig,
    params: &ParamStore,
) -> Result<FeaturePyramid> {
    cfg.validate()?;
    let (c, h, w) = tape.value(frame).dims3()?;
    if c != cfg.in_channels {
        return Err(TprError::Shape {
            op: "build_pyramid",
            detail: format!("frame has {c} channels, backbone expects {}", cfg.in_channels),
        });
    }
    if h % FINEST_STRIDE != 0 || w % FINEST_STRIDE != 0 || h == 0 || w == 0 {
        return Err(TprError::Invalid(format!(
            "frame {h}x{w} must be a non-empty multiple of {FINEST_STRIDE} in both dimensions"
        )));
    }
    let conv = |tape: &mut Tape, x: Var, name: &str| -> Result<Var> {
        let wv = tape.param(params, name)?;
        let y = tape.conv2d(x, wv, None, 2, 1, None)?;
        Ok(tape.relu(y))
    };
    let x = conv(tape, frame, "backbone.stem.w")?;
    let x = conv(tape, x, "backbone.stage2.w")?;
    let mut bottom_up = vec![conv(tape, x, "backbone.stage3.w")?];
    for l in 1..cfg.levels {
        let prev = bottom_up[l - 1];
        bottom_up.push(conv(tape, prev, &format!("backbone.down{l}.w"))?);
    }
    let mut laterals = Vec::with_capacity(cfg.levels);
    for (l, &c_l) in bottom_up.iter().enumerate() {
        let wv = tape.param(params, &format!("fpn.lateral{l}.w"))?;
        laterals.push(tape.conv2d(c_l, wv, None, 1, 0, None)?);
    }
    let mut out = vec![laterals[cfg.levels - 1]];
    for l in (0..cfg.levels - 1).rev() {
        let (lh, lw) = (tape.shape(laterals[l])[1], tape.shape(laterals[l])[2]);
        let up = tape.upsample_bilinear(*out.last().unwrap(), lh, lw)?;
        out.push(tape.add(laterals[l], up)?);
    }
    out.reverse();
    Ok(FeaturePyramid {
        frame_index,
        levels: out
            .into_iter()
            .enumerate()
            .map(|(i, var)| Level {
                stride: FINEST_STRIDE << i,
                var,
            })
            .collect(),
    })
}

/// Number of factor-2 steps from `from_stride` to `to_stride` (positive =
/// coarser). Errors unless the ratio is a power of two.
pub fn scale_steps(from_stride: usize, to_stride: usize) -> Result<i32> {
    let (a, b) = (from_stride.max(1), to_stride.max(1));
    let (big, small, sign) = if b >= a { (b, a, 1) } else { (a, b, -1) };
    if big % small != 0 || !(big / small).is_power_of_two() {
        return Err(TprError::Invalid(format!(
            "scale ratio {from_stride}:{to_stride} is not a power of two"
        )));
    }
    Ok(sign * (big / small).trailing_zeros() as i32)
}

/// Moves a map from level `from` to level `to`: 2x2 mean-pool reductions
/// going coarser, bilinear x2 upsampling (to the recorded level sizes)
/// going finer.
pub fn resize_to_level(tape: &mut Tape, x: Var, from: usize, to: usize, shapes: &[(usize, usize)]) -> Result<Var> {
    let mut cur = x;
    if to > from {
        for _ in from..to {
            cur = tape.avgpool2(cur)?;
        }
    } else {
        for l in (to..from).rev() {
            let (h, w) = shapes[l];
            cur = tape.upsample_bilinear(cur, h, w)?;
        }
    }
    Ok(cur)
}

/// Stride-based entry point for [`resize_to_level`].
pub fn resize_to_scale(
    tape: &mut Tape,
    x: Var,
    from_stride: usize,
    to_stride: usize,
    shapes: &[(usize, usize)],
) -> Result<Var> {
    let steps = scale_steps(from_stride, to_stride)?;
    let from = scale_steps(FINEST_STRIDE, from_stride)? as usize;
    let to = (from as i32 + steps) as usize;
    resize_to_level(tape, x, from, to, shapes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stride_ratios() {
        assert_eq!(scale_steps(8, 8).unwrap(), 0);
        assert_eq!(scale_steps(8, 32).unwrap(), 2);
        assert_eq!(scale_steps(64, 16).unwrap(), -2);
        assert!(scale_steps(8, 24).is_err());
    }

    #[test]
    fn level_shapes_ceil() {
        let cfg = BackboneConfig::default();
        assert_eq!(cfg.level_shapes(96, 96), vec![(12, 12), (6, 6), (3, 3), (2, 2)]);
    }
}
