//! Separable 2-D resampling of `H·W × C` grids (bilinear, bicubic, nearest).
//!
//! Coordinates follow the half-pixel convention (`align_corners = false`).
//! Each output sample is written as `x[anchor] + Σ w·(x[tap] − x[anchor])`,
//! which is algebraically the usual weighted sum but reproduces constant
//! grids exactly and is an exact identity when sizes match.

use alloc::vec::Vec;

use crate::linalg::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kernel {
    Nearest,
    Bilinear,
    Bicubic,
}

/// Bicubic convolution coefficient (Keys, a = −0.75).
const CUBIC_A: f64 = -0.75;

#[derive(Clone, Debug, PartialEq)]
struct Tap {
    anchor: usize,
    taps: Vec<(usize, f64)>,
}

/// 1-D resampling plan for one axis.
#[derive(Clone, Debug, PartialEq)]
pub struct AxisPlan {
    src: usize,
    entries: Vec<Tap>,
}

impl AxisPlan {
    pub fn new(src: usize, dst: usize, kernel: Kernel) -> Self {
        assert!(src > 0 && dst > 0, "resample sizes must be positive");
        let scale = src as f64 / dst as f64;
        let clamp = |i: isize| i.clamp(0, src as isize - 1) as usize;
        let entries = (0..dst)
            .map(|o| {
                let x = (o as f64 + 0.5) * scale - 0.5;
                match kernel {
                    Kernel::Nearest => {
                        let i = libm::floor(o as f64 * scale) as usize;
                        let i = i.min(src - 1);
                        Tap { anchor: i, taps: Vec::new() }
                    }
                    Kernel::Bilinear => {
                        let x = x.max(0.0);
                        let i0 = libm::floor(x) as isize;
                        let t = x - i0 as f64;
                        let (a, b) = (clamp(i0), clamp(i0 + 1));
                        Tap { anchor: a, taps: alloc::vec![(b, t)] }
                    }
                    Kernel::Bicubic => {
                        let i0 = libm::floor(x) as isize;
                        let t = x - i0 as f64;
                        let w = cubic_weights(t);
                        let anchor = clamp(i0);
                        let taps = (0..4).map(|k| (clamp(i0 - 1 + k as isize), w[k])).collect();
                        Tap { anchor, taps }
                    }
                }
            })
            .collect();
        AxisPlan { src, entries }
    }

    pub fn dst(&self) -> usize {
        self.entries.len()
    }
}

fn cubic_weights(t: f64) -> [f64; 4] {
    let near = |x: f64| ((CUBIC_A + 2.0) * x - (CUBIC_A + 3.0)) * x * x + 1.0;
    let far = |x: f64| ((CUBIC_A * x - 5.0 * CUBIC_A) * x + 8.0 * CUBIC_A) * x - 4.0 * CUBIC_A;
    [far(t + 1.0), near(t), near(1.0 - t), far(2.0 - t)]
}

/// Separable 2-D plan from `(sh, sw)` to `(dh, dw)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Resample2d {
    pub rows: AxisPlan,
    pub cols: AxisPlan,
}

impl Resample2d {
    pub fn new(src: (usize, usize), dst: (usize, usize), kernel: Kernel) -> Self {
        Resample2d { rows: AxisPlan::new(src.0, dst.0, kernel), cols: AxisPlan::new(src.1, dst.1, kernel) }
    }

    pub fn src_dims(&self) -> (usize, usize) {
        (self.rows.src, self.cols.src)
    }

    pub fn dst_dims(&self) -> (usize, usize) {
        (self.rows.dst(), self.cols.dst())
    }

    /// Resample `x` of shape `(sh·sw) × C` to `(dh·dw) × C`.
    pub fn apply(&self, x: &Matrix) -> Matrix {
        let (sh, sw) = self.src_dims();
        let (dh, dw) = self.dst_dims();
        let c = x.cols;
        assert_eq!(x.rows, sh * sw, "resample input rows");
        // Columns first (width), then rows (height).
        let mut mid = Matrix::zeros(sh * dw, c);
        for r in 0..sh {
            for (o, tap) in self.cols.entries.iter().enumerate() {
                let out = &mut mid.data[(r * dw + o) * c..(r * dw + o + 1) * c];
                combine(out, |i| &x.data[(r * sw + i) * c..(r * sw + i + 1) * c], tap);
            }
        }
        let mut out = Matrix::zeros(dh * dw, c);
        for (o, tap) in self.rows.entries.iter().enumerate() {
            for col in 0..dw {
                let dst = &mut out.data[(o * dw + col) * c..(o * dw + col + 1) * c];
                combine(dst, |i| &mid.data[(i * dw + col) * c..(i * dw + col + 1) * c], tap);
            }
        }
        out
    }

    /// Adjoint of [`apply`](Self::apply): maps an output-space gradient back to the input grid.
    pub fn apply_transpose(&self, g: &Matrix) -> Matrix {
        let (sh, sw) = self.src_dims();
        let (dh, dw) = self.dst_dims();
        let c = g.cols;
        assert_eq!(g.rows, dh * dw, "resample gradient rows");
        let mut mid = Matrix::zeros(sh * dw, c);
        for (o, tap) in self.rows.entries.iter().enumerate() {
            for col in 0..dw {
                let src = &g.data[(o * dw + col) * c..(o * dw + col + 1) * c];
                scatter(&mut mid.data, |i| (i * dw + col) * c, src, tap);
            }
        }
        let mut out = Matrix::zeros(sh * sw, c);
        for r in 0..sh {
            for (o, tap) in self.cols.entries.iter().enumerate() {
                let src = &mid.data[(r * dw + o) * c..(r * dw + o + 1) * c];
                scatter(&mut out.data, |i| (r * sw + i) * c, src, tap);
            }
        }
        out
    }
}

#[inline]
fn combine<'a>(out: &mut [f64], src: impl Fn(usize) -> &'a [f64], tap: &Tap) {
    let base = src(tap.anchor);
    out.copy_from_slice(base);
    for &(i, w) in &tap.taps {
        if i == tap.anchor || w == 0.0 {
            continue;
        }
        for ((o, &v), &b) in out.iter_mut().zip(src(i)).zip(base) {
            *o += w * (v - b);
        }
    }
}

#[inline]
fn scatter(dst: &mut [f64], offset: impl Fn(usize) -> usize, g: &[f64], tap: &Tap) {
    let mut anchor_w = 1.0;
    for &(i, w) in &tap.taps {
        if i == tap.anchor || w == 0.0 {
            continue;
        }
        anchor_w -= w;
        let o = offset(i);
        for (d, &v) in dst[o..o + g.len()].iter_mut().zip(g) {
            *d += w * v;
        }
    }
    let o = offset(tap.anchor);
    for (d, &v) in dst[o..o + g.len()].iter_mut().zip(g) {
        *d += anchor_w * v;
    }
}

/// Nearest-neighbour index map for label resampling: `out[o] = src[map[o]]`.
pub fn nearest_index_map(src: (usize, usize), dst: (usize, usize)) -> Vec<usize> {
    let rows = AxisPlan::new(src.0, dst.0, Kernel::Nearest);
    let cols = AxisPlan::new(src.1, dst.1, Kernel::Nearest);
    let mut out = Vec::with_capacity(dst.0 * dst.1);
    for r in &rows.entries {
        for c in &cols.entries {
            out.push(r.anchor * src.1 + c.anchor);
        }
    }
    out
}
