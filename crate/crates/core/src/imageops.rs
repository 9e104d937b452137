//! Geometric and photometric operations on [`Image`] and [`LabelMask`].
//!
//! Images are resampled bilinearly, masks always with nearest neighbour so
//! label indices are never blended.

use alloc::vec;
use alloc::vec::Vec;

use crate::datamodel::{ClassId, Image, LabelMask};
use crate::linalg::Matrix;
use crate::resample::{nearest_index_map, Kernel, Resample2d};

pub fn image_to_matrix(img: &Image) -> Matrix {
    Matrix::from_vec(img.height * img.width, img.channels, img.data.iter().map(|&v| v as f64).collect())
}

pub fn matrix_to_image(m: &Matrix, height: usize, width: usize) -> Image {
    Image { height, width, channels: m.cols, data: m.data.iter().map(|&v| v as f32).collect() }
}

pub fn resize_image(img: &Image, dims: (usize, usize)) -> Image {
    if img.dims() == dims {
        return img.clone();
    }
    let plan = Resample2d::new(img.dims(), dims, Kernel::Bilinear);
    matrix_to_image(&plan.apply(&image_to_matrix(img)), dims.0, dims.1)
}

pub fn resize_mask(mask: &LabelMask, dims: (usize, usize)) -> LabelMask {
    let map = nearest_index_map(mask.dims(), dims);
    LabelMask { height: dims.0, width: dims.1, data: map.iter().map(|&i| mask.data[i]).collect() }
}

pub fn hflip_image(img: &Image) -> Image {
    let mut out = img.clone();
    for r in 0..img.height {
        for c in 0..img.width {
            out.pixel_mut(r, c).copy_from_slice(img.pixel(r, img.width - 1 - c));
        }
    }
    out
}

pub fn hflip_mask(mask: &LabelMask) -> LabelMask {
    let mut out = mask.clone();
    for row in out.data.chunks_mut(mask.width) {
        row.reverse();
    }
    out
}

/// Place a `(h, w)` window at `offset` (which may be negative, meaning padding).
///
/// Out-of-source pixels are zero in the image and `fill` in the mask.
pub fn window(img: &Image, mask: &LabelMask, offset: (isize, isize), dims: (usize, usize), fill: ClassId) -> (Image, LabelMask) {
    let mut oi = Image::zeros(dims.0, dims.1, img.channels);
    let mut om = LabelMask::filled(dims.0, dims.1, fill);
    for r in 0..dims.0 {
        let sr = r as isize + offset.0;
        if sr < 0 || sr >= img.height as isize {
            continue;
        }
        for c in 0..dims.1 {
            let sc = c as isize + offset.1;
            if sc < 0 || sc >= img.width as isize {
                continue;
            }
            oi.pixel_mut(r, c).copy_from_slice(img.pixel(sr as usize, sc as usize));
            om.set(r, c, mask.get(sr as usize, sc as usize));
        }
    }
    (oi, om)
}

/// Rotate about the image centre by `degrees` (counter-clockwise).
pub fn rotate(img: &Image, mask: &LabelMask, degrees: f64, fill: ClassId) -> (Image, LabelMask) {
    let theta = degrees.to_radians();
    let (s, c) = (libm::sin(theta), libm::cos(theta));
    let (h, w) = img.dims();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut oi = Image::zeros(h, w, img.channels);
    let mut om = LabelMask::filled(h, w, fill);
    for r in 0..h {
        for col in 0..w {
            let (dy, dx) = (r as f64 - cy, col as f64 - cx);
            // Inverse mapping: source = R(−θ)·target.
            let sx = c * dx - s * dy + cx;
            let sy = s * dx + c * dy + cy;
            let (ny, nx) = (libm::round(sy), libm::round(sx));
            if ny >= 0.0 && nx >= 0.0 && (ny as usize) < h && (nx as usize) < w {
                om.set(r, col, mask.get(ny as usize, nx as usize));
            }
            if sy < 0.0 || sx < 0.0 || sy > (h - 1) as f64 || sx > (w - 1) as f64 {
                continue;
            }
            let (y0, x0) = (libm::floor(sy) as usize, libm::floor(sx) as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (ty, tx) = ((sy - y0 as f64) as f32, (sx - x0 as f64) as f32);
            for ch in 0..img.channels {
                let v = img.pixel(y0, x0)[ch] * (1.0 - ty) * (1.0 - tx)
                    + img.pixel(y0, x1)[ch] * (1.0 - ty) * tx
                    + img.pixel(y1, x0)[ch] * ty * (1.0 - tx)
                    + img.pixel(y1, x1)[ch] * ty * tx;
                oi.pixel_mut(r, col)[ch] = v;
            }
        }
    }
    (oi, om)
}

fn clamp01(v: f32) -> f32 {
    v.clamp(0.0, 1.0)
}

fn grayscale(img: &Image) -> Vec<f32> {
    (0..img.height * img.width)
        .map(|i| {
            let p = &img.data[i * img.channels..(i + 1) * img.channels];
            if p.len() >= 3 {
                0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
            } else {
                p[0]
            }
        })
        .collect()
}

/// `degenerate + factor·(img − degenerate)` clamped to `[0, 1]`.
fn blend(img: &Image, degenerate: &[f32], factor: f32, per_pixel: bool) -> Image {
    let mut out = img.clone();
    for (i, v) in out.data.iter_mut().enumerate() {
        let d = if per_pixel { degenerate[i / img.channels] } else { degenerate[0] };
        *v = clamp01(d + factor * (*v - d));
    }
    out
}

pub fn auto_contrast(img: &Image) -> Image {
    let mut out = img.clone();
    for ch in 0..img.channels {
        let vals = img.data.iter().skip(ch).step_by(img.channels);
        let (lo, hi) = vals.fold((f32::MAX, f32::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if hi - lo <= 1e-6 {
            continue;
        }
        for v in out.data.iter_mut().skip(ch).step_by(img.channels) {
            *v = clamp01((*v - lo) / (hi - lo));
        }
    }
    out
}

/// Per-channel histogram equalization on 256 bins.
pub fn equalize(img: &Image) -> Image {
    let mut out = img.clone();
    let n = img.height * img.width;
    for ch in 0..img.channels {
        let mut hist = [0usize; 256];
        let bin = |v: f32| libm::roundf(clamp01(v) * 255.0) as usize;
        for &v in img.data.iter().skip(ch).step_by(img.channels) {
            hist[bin(v)] += 1;
        }
        let mut cdf = [0usize; 256];
        let mut acc = 0;
        for (c, h) in cdf.iter_mut().zip(hist.iter()) {
            acc += h;
            *c = acc;
        }
        let cdf_min = cdf.iter().copied().find(|&c| c > 0).unwrap_or(0);
        if n == cdf_min {
            continue;
        }
        for v in out.data.iter_mut().skip(ch).step_by(img.channels) {
            *v = (cdf[bin(*v)] - cdf_min) as f32 / (n - cdf_min) as f32;
        }
    }
    out
}

/// Saturation: blend with the grayscale image.
pub fn color(img: &Image, factor: f32) -> Image {
    blend(img, &grayscale(img), factor, true)
}

pub fn contrast(img: &Image, factor: f32) -> Image {
    let g = grayscale(img);
    let mean = g.iter().sum::<f32>() / g.len().max(1) as f32;
    blend(img, &[mean], factor, false)
}

pub fn brightness(img: &Image, factor: f32) -> Image {
    blend(img, &[0.0], factor, false)
}

/// Blend with a 3×3 smoothed copy (centre weight 5, border pixels unchanged).
pub fn sharpness(img: &Image, factor: f32) -> Image {
    let (h, w, ch) = (img.height, img.width, img.channels);
    let mut smooth = img.clone();
    if h >= 3 && w >= 3 {
        for r in 1..h - 1 {
            for c in 1..w - 1 {
                for k in 0..ch {
                    let mut acc = 0.0;
                    for dr in 0..3 {
                        for dc in 0..3 {
                            let wgt = if dr == 1 && dc == 1 { 5.0 } else { 1.0 };
                            acc += wgt * img.pixel(r + dr - 1, c + dc - 1)[k];
                        }
                    }
                    smooth.pixel_mut(r, c)[k] = acc / 13.0;
                }
            }
        }
    }
    let mut out = img.clone();
    for (o, (&v, &s)) in out.data.iter_mut().zip(img.data.iter().zip(&smooth.data)) {
        *o = clamp01(s + factor * (v - s));
    }
    out
}

/// Mean absolute value of each channel; used by tests to compare photometric changes.
pub fn channel_means(img: &Image) -> Vec<f32> {
    let mut m = vec![0.0; img.channels];
    for (i, v) in img.data.iter().enumerate() {
        m[i % img.channels] += v;
    }
    let n = (img.height * img.width).max(1) as f32;
    m.iter_mut().for_each(|v| *v /= n);
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(h: usize, w: usize) -> Image {
        let mut img = Image::zeros(h, w, 3);
        for r in 0..h {
            for c in 0..w {
                let p = img.pixel_mut(r, c);
                p[0] = r as f32 / h as f32;
                p[1] = c as f32 / w as f32;
                p[2] = 0.5;
            }
        }
        img
    }

    #[test]
    fn resize_to_own_size_is_identity() {
        let img = gradient_image(5, 7);
        let m = LabelMask::new(5, 7, (0..35).map(|i| (i % 3) as u8).collect()).unwrap();
        assert_eq!(resize_image(&img, (5, 7)), img);
        assert_eq!(resize_mask(&m, (5, 7)), m);
    }

    #[test]
    fn hflip_tracks_a_delta() {
        let mut m = LabelMask::filled(3, 4, 0);
        m.set(1, 0, 1);
        let f = hflip_mask(&m);
        assert_eq!(f.get(1, 3), 1);
        assert_eq!(f.data.iter().filter(|&&v| v == 1).count(), 1);
        let img = gradient_image(3, 4);
        assert_eq!(hflip_image(&img).pixel(0, 0), img.pixel(0, 3));
    }

    #[test]
    fn window_pads_with_fill() {
        let img = gradient_image(2, 2);
        let m = LabelMask::filled(2, 2, 1);
        let (oi, om) = window(&img, &m, (-1, -1), (4, 4), 255);
        assert_eq!(om.get(0, 0), 255);
        assert_eq!(om.get(1, 1), 1);
        assert_eq!(oi.pixel(0, 0), &[0.0, 0.0, 0.0]);
        assert_eq!(oi.pixel(1, 1), img.pixel(0, 0));
    }

    #[test]
    fn zero_rotation_is_identity() {
        let img = gradient_image(6, 5);
        let m = LabelMask::new(6, 5, (0..30).map(|i| (i % 4) as u8).collect()).unwrap();
        let (oi, om) = rotate(&img, &m, 0.0, 255);
        assert_eq!(om, m);
        for (a, b) in oi.data.iter().zip(&img.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn photometric_ops_stay_in_range() {
        let img = gradient_image(8, 8);
        for out in [auto_contrast(&img), equalize(&img), color(&img, 1.8), contrast(&img, 0.2), brightness(&img, 1.9), sharpness(&img, 1.9)] {
            assert_eq!(out.dims(), img.dims());
            assert!(out.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        // Factor 1 is the identity for all blend-style ops.
        assert_eq!(color(&img, 1.0), img);
        assert_eq!(brightness(&img, 1.0), img);
    }
}
