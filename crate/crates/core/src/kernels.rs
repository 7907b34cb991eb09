//! Forward and backward kernels for the spatial ops. All inputs are
//! row-major `(C, H, W)` slices; padding is zero unless noted.
//!
//! Each output element accumulates its terms in a fixed order, so results
//! are bit-reproducible and a masked evaluation equals the dense evaluation
//! at every unmasked position.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    pub fn macs_per_position(&self) -> u64 {
        (self.cin * self.cout * self.k * self.k) as u64
    }
}

#[inline]
fn src_index(o: usize, kk: usize, stride: usize, pad: usize, n: usize) -> Option<usize> {
    let i = (o * stride + kk) as isize - pad as isize;
    (i >= 0 && (i as usize) < n).then_some(i as usize)
}

/// Cross-correlation. Positions with `mask[p] == false` are left at exactly 0.
/// Returns the number of multiply-accumulates performed.
pub fn conv2d_forward(
    g: &Conv2dGeom,
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    mask: Option<&[bool]>,
    out: &mut [f64],
) -> u64 {
    let (ho, wo) = g.out_hw();
    let k = g.k;
    for co in 0..g.cout {
        let out_c = &mut out[co * ho * wo..(co + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let p = oy * wo + ox;
                if mask.is_some_and(|m| !m[p]) {
                    continue;
                }
                let mut acc = bias.map_or(0.0, |b| b[co]);
                for ci in 0..g.cin {
                    let xc = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
                    let wc = &w[(co * g.cin + ci) * k * k..(co * g.cin + ci + 1) * k * k];
                    for ky in 0..k {
                        let Some(iy) = src_index(oy, ky, g.stride, g.pad, g.h) else {
                            continue;
                        };
                        let row = &xc[iy * g.w..(iy + 1) * g.w];
                        for kx in 0..k {
                            if let Some(ix) = src_index(ox, kx, g.stride, g.pad, g.w) {
                                acc += wc[ky * k + kx] * row[ix];
                            }
                        }
                    }
                }
                out_c[p] = acc;
            }
        }
    }
    let active = mask.map_or(ho * wo, |m| m.iter().filter(|&&b| b).count());
    active as u64 * g.macs_per_position()
}

/// Accumulates gradients of a (possibly masked) convolution.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    g: &Conv2dGeom,
    x: &[f64],
    w: &[f64],
    mask: Option<&[bool]>,
    dout: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let (ho, wo) = g.out_hw();
    let k = g.k;
    let mut dx = dx;
    let mut dw = dw;
    if let Some(db) = db {
        for co in 0..g.cout {
            for p in 0..ho * wo {
                if mask.is_some_and(|m| !m[p]) {
                    continue;
                }
                db[co] += dout[co * ho * wo + p];
            }
        }
    }
    for co in 0..g.cout {
        for oy in 0..ho {
            for ox in 0..wo {
                let p = oy * wo + ox;
                if mask.is_some_and(|m| !m[p]) {
                    continue;
                }
                let d = dout[co * ho * wo + p];
                if d == 0.0 {
                    continue;
                }
                for ci in 0..g.cin {
                    let wbase = (co * g.cin + ci) * k * k;
                    let xbase = ci * g.h * g.w;
                    for ky in 0..k {
                        let Some(iy) = src_index(oy, ky, g.stride, g.pad, g.h) else {
                            continue;
                        };
                        for kx in 0..k {
                            if let Some(ix) = src_index(ox, kx, g.stride, g.pad, g.w) {
                                let xi = xbase + iy * g.w + ix;
                                let wi = wbase + ky * k + kx;
                                if let Some(dx) = dx.as_deref_mut() {
                                    dx[xi] += w[wi] * d;
                                }
                                if let Some(dw) = dw.as_deref_mut() {
                                    dw[wi] += x[xi] * d;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Bilinear interpolation of one channel plane at fractional `(y, x)` with
/// zero padding outside the map. Also returns `(d/dy, d/dx)`.
pub fn bilinear_with_grad(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> (f64, f64, f64) {
    let y0 = y.floor();
    let x0 = x.floor();
    let ly = y - y0;
    let lx = x - x0;
    let (y0, x0) = (y0 as isize, x0 as isize);
    let at = |yy: isize, xx: isize| -> f64 {
        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
            0.0
        } else {
            plane[yy as usize * w + xx as usize]
        }
    };
    let v00 = at(y0, x0);
    let v01 = at(y0, x0 + 1);
    let v10 = at(y0 + 1, x0);
    let v11 = at(y0 + 1, x0 + 1);
    let val = (1.0 - ly) * (1.0 - lx) * v00 + (1.0 - ly) * lx * v01 + ly * (1.0 - lx) * v10 + ly * lx * v11;
    let dy = (1.0 - lx) * (v10 - v00) + lx * (v11 - v01);
    let dx = (1.0 - ly) * (v01 - v00) + ly * (v11 - v10);
    (val, dy, dx)
}

/// Scatters `g` into the four bilinear neighbours of `(y, x)`.
pub fn bilinear_scatter(plane: &mut [f64], h: usize, w: usize, y: f64, x: f64, g: f64) {
    let y0 = y.floor();
    let x0 = x.floor();
    let ly = y - y0;
    let lx = x - x0;
    let (y0, x0) = (y0 as isize, x0 as isize);
    let mut put = |yy: isize, xx: isize, v: f64| {
        if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize {
            plane[yy as usize * w + xx as usize] += v;
        }
    };
    put(y0, x0, g * (1.0 - ly) * (1.0 - lx));
    put(y0, x0 + 1, g * (1.0 - ly) * lx);
    put(y0 + 1, x0, g * ly * (1.0 - lx));
    put(y0 + 1, x0 + 1, g * ly * lx);
}

/// Geometry of a 3x3, stride-1, pad-1 deformable convolution.
#[derive(Clone, Copy, Debug)]
pub struct DeformGeom {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
}

pub const TAPS: usize = 9;

#[inline]
fn tap_offset(n: usize) -> (f64, f64) {
    ((n / 3) as f64 - 1.0, (n % 3) as f64 - 1.0)
}

/// Offset channel layout: `[dy_0, dx_0, dy_1, dx_1, ...]`, tap `n = ky*3 + kx`.
/// `out[co, i] = sum_{ci, n} w[co, ci, n] * x[ci](i + p_n + off(i, n))`.
pub fn deform_forward(g: &DeformGeom, x: &[f64], off: &[f64], w: &[f64], out: &mut [f64]) -> u64 {
    let hw = g.h * g.w;
    let mut cols = vec![0.0; g.cin * TAPS];
    for oy in 0..g.h {
        for ox in 0..g.w {
            let p = oy * g.w + ox;
            for n in 0..TAPS {
                let (ty, tx) = tap_offset(n);
                let sy = oy as f64 + ty + off[(2 * n) * hw + p];
                let sx = ox as f64 + tx + off[(2 * n + 1) * hw + p];
                for ci in 0..g.cin {
                    cols[ci * TAPS + n] = bilinear_with_grad(&x[ci * hw..(ci + 1) * hw], g.h, g.w, sy, sx).0;
                }
            }
            for co in 0..g.cout {
                let wrow = &w[co * g.cin * TAPS..(co + 1) * g.cin * TAPS];
                let acc: f64 = wrow.iter().zip(&cols).map(|(a, b)| a * b).sum();
                out[co * hw + p] = acc;
            }
        }
    }
    (hw * g.cin * g.cout * TAPS) as u64
}

pub fn deform_backward(
    g: &DeformGeom,
    x: &[f64],
    off: &[f64],
    w: &[f64],
    dout: &[f64],
    mut dx: Option<&mut [f64]>,
    mut doff: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
) {
    let hw = g.h * g.w;
    for oy in 0..g.h {
        for ox in 0..g.w {
            let p = oy * g.w + ox;
            for n in 0..TAPS {
                let (ty, tx) = tap_offset(n);
                let sy = oy as f64 + ty + off[(2 * n) * hw + p];
                let sx = ox as f64 + tx + off[(2 * n + 1) * hw + p];
                for ci in 0..g.cin {
                    let plane = &x[ci * hw..(ci + 1) * hw];
                    let (val, gy, gx) = bilinear_with_grad(plane, g.h, g.w, sy, sx);
                    // d loss / d sampled value
                    let mut dcol = 0.0;
                    for co in 0..g.cout {
                        let d = dout[co * hw + p];
                        let wi = (co * g.cin + ci) * TAPS + n;
                        dcol += w[wi] * d;
                        if let Some(dw) = dw.as_deref_mut() {
                            dw[wi] += val * d;
                        }
                    }
                    if dcol == 0.0 {
                        continue;
                    }
                    if let Some(doff) = doff.as_deref_mut() {
                        doff[(2 * n) * hw + p] += gy * dcol;
                        doff[(2 * n + 1) * hw + p] += gx * dcol;
                    }
                    if let Some(dx) = dx.as_deref_mut() {
                        bilinear_scatter(&mut dx[ci * hw..(ci + 1) * hw], g.h, g.w, sy, sx, dcol);
                    }
                }
            }
        }
    }
}

/// Output extent of a ceil-mode pooling window sweep. A window must start
/// inside the (left-padded) input.
pub fn pool_out(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    let span = (n + 2 * pad).saturating_sub(k);
    let mut out = span.div_ceil(stride) + 1;
    if (out - 1) * stride >= n + pad {
        out -= 1;
    }
    out
}

/// Ceil-mode max pooling; out-of-range cells are ignored. Returns the flat
/// argmax index (into `x`) for every output, first maximum on ties.
pub fn maxpool_forward(
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    x: &[f64],
) -> (Vec<f64>, Vec<usize>, usize, usize) {
    let ho = pool_out(h, k, stride, pad);
    let wo = pool_out(w, k, stride, pad);
    let mut out = vec![0.0; c * ho * wo];
    let mut arg = vec![0; c * ho * wo];
    for ci in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = usize::MAX;
                for ky in 0..k {
                    let Some(iy) = src_index(oy, ky, stride, pad, h) else { continue };
                    for kx in 0..k {
                        let Some(ix) = src_index(ox, kx, stride, pad, w) else { continue };
                        let i = (ci * h + iy) * w + ix;
                        if x[i] > best || best_i == usize::MAX {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                let o = (ci * ho + oy) * wo + ox;
                out[o] = best;
                arg[o] = best_i;
            }
        }
    }
    (out, arg, ho, wo)
}

/// 2x2 stride-2 mean pooling in ceil mode; edge windows average their valid cells.
pub fn avgpool2_forward(c: usize, h: usize, w: usize, x: &[f64]) -> (Vec<f64>, usize, usize) {
    let ho = h.div_ceil(2);
    let wo = w.div_ceil(2);
    let mut out = vec![0.0; c * ho * wo];
    for ci in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                let mut n = 0.0;
                for iy in 2 * oy..(2 * oy + 2).min(h) {
                    for ix in 2 * ox..(2 * ox + 2).min(w) {
                        acc += x[(ci * h + iy) * w + ix];
                        n += 1.0;
                    }
                }
                out[(ci * ho + oy) * wo + ox] = acc / n;
            }
        }
    }
    (out, ho, wo)
}

pub fn avgpool2_backward(c: usize, h: usize, w: usize, dout: &[f64], dx: &mut [f64]) {
    let ho = h.div_ceil(2);
    let wo = w.div_ceil(2);
    for ci in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let ys = 2 * oy..(2 * oy + 2).min(h);
                let xs = 2 * ox..(2 * ox + 2).min(w);
                let n = (ys.len() * xs.len()) as f64;
                let d = dout[(ci * ho + oy) * wo + ox] / n;
                for iy in ys {
                    for ix in xs.clone() {
                        dx[(ci * h + iy) * w + ix] += d;
                    }
                }
            }
        }
    }
}

/// Source sampling table for half-pixel-centred bilinear resizing
/// (edge-clamped): `(i0, i1, frac)` per output coordinate.
fn bilinear_table(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

pub fn upsample_bilinear_forward(c: usize, h: usize, w: usize, ho: usize, wo: usize, x: &[f64]) -> Vec<f64> {
    let ty = bilinear_table(h, ho);
    let tx = bilinear_table(w, wo);
    let mut out = vec![0.0; c * ho * wo];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let v = (1.0 - ly) * ((1.0 - lx) * plane[y0 * w + x0] + lx * plane[y0 * w + x1])
                    + ly * ((1.0 - lx) * plane[y1 * w + x0] + lx * plane[y1 * w + x1]);
                out[(ci * ho + oy) * wo + ox] = v;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn upsample_bilinear_backward(
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    dout: &[f64],
    dx: &mut [f64],
) {
    let ty = bilinear_table(h, ho);
    let tx = bilinear_table(w, wo);
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let d = dout[(ci * ho + oy) * wo + ox];
                plane[y0 * w + x0] += d * (1.0 - ly) * (1.0 - lx);
                plane[y0 * w + x1] += d * (1.0 - ly) * lx;
                plane[y1 * w + x0] += d * ly * (1.0 - lx);
                plane[y1 * w + x1] += d * ly * lx;
            }
        }
    }
}

/// Nearest-neighbour source index for resizing `n_in -> n_out`.
pub fn nearest_src(o: usize, n_in: usize, n_out: usize) -> usize {
    ((o * n_in) / n_out).min(n_in - 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_out_ceil_mode() {
        assert_eq!(pool_out(4, 2, 2, 0), 2);
        assert_eq!(pool_out(3, 2, 2, 0), 2);
        assert_eq!(pool_out(5, 3, 1, 1), 5);
        assert_eq!(pool_out(1, 2, 2, 0), 1);
    }

    #[test]
    fn conv_geometry() {
        let g = Conv2dGeom { cin: 1, cout: 1, h: 3, w: 3, k: 3, stride: 2, pad: 1 };
        assert_eq!(g.out_hw(), (2, 2));
        let g = Conv2dGeom { h: 12, w: 12, ..g };
        assert_eq!(g.out_hw(), (6, 6));
    }

    #[test]
    fn bilinear_ramp_midpoint() {
        let row = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(bilinear_with_grad(&row, 1, 4, 0.0, 1.5).0, 1.5);
    }

    #[test]
    fn bilinear_far_outside_is_zero() {
        let plane = [5.0; 16];
        let (v, dy, dx) = bilinear_with_grad(&plane, 4, 4, -5.0, -5.0);
        assert_eq!((v, dy, dx), (0.0, 0.0, 0.0));
    }
}
