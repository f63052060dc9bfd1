//! Crop, resize and shift helpers shared by patch selection and the baseline.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

/// Crop rectangle in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CropWindow {
    pub y0: usize,
    pub x0: usize,
    pub height: usize,
    pub width: usize,
}

fn taps_1d(start: usize, len: usize, out: usize) -> Vec<(usize, usize, f64)> {
    (0..out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * len as f64 / out as f64 - 0.5).clamp(0.0, (len - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(len - 1);
            (start + lo, start + hi, src - lo as f64)
        })
        .collect()
}

/// Bilinear resize of `window` to `out_h × out_w` (half-pixel centers, edge clamped).
pub fn crop_resize(image: &Array3<f64>, window: CropWindow, out_h: usize, out_w: usize) -> Array3<f64> {
    let ys = taps_1d(window.y0, window.height, out_h);
    let xs = taps_1d(window.x0, window.width, out_w);
    let c = image.dim().0;
    Array3::from_shape_fn((c, out_h, out_w), |(ch, oy, ox)| {
        let (y0, y1, fy) = ys[oy];
        let (x0, x1, fx) = xs[ox];
        let top = image[[ch, y0, x0]] * (1.0 - fx) + image[[ch, y0, x1]] * fx;
        let bottom = image[[ch, y1, x0]] * (1.0 - fx) + image[[ch, y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Adjoint of [`crop_resize`].
pub fn crop_resize_backward(grad: &Array3<f64>, window: CropWindow, in_h: usize, in_w: usize) -> Array3<f64> {
    let (c, out_h, out_w) = grad.dim();
    let ys = taps_1d(window.y0, window.height, out_h);
    let xs = taps_1d(window.x0, window.width, out_w);
    let mut out = Array3::zeros((c, in_h, in_w));
    for ch in 0..c {
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let g = grad[[ch, oy, ox]];
                out[[ch, y0, x0]] += g * (1.0 - fy) * (1.0 - fx);
                out[[ch, y0, x1]] += g * (1.0 - fy) * fx;
                out[[ch, y1, x0]] += g * fy * (1.0 - fx);
                out[[ch, y1, x1]] += g * fy * fx;
            }
        }
    }
    out
}

impl CropWindow {
    pub fn full(height: usize, width: usize) -> Self {
        Self { y0: 0, x0: 0, height, width }
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.height >= 1 && self.width >= 1 && self.y0 + self.height <= height && self.x0 + self.width <= width
    }
}

/// Sliding windows of side `patch` with the given stride; the last row and
/// column are shifted inward so the borders are covered.
pub fn sliding_windows(height: usize, width: usize, patch: usize, stride: usize) -> Vec<CropWindow> {
    let starts = |side: usize| -> Vec<usize> {
        let mut v: Vec<usize> = (0..=side - patch).step_by(stride.max(1)).collect();
        if *v.last().expect("patch fits") != side - patch {
            v.push(side - patch);
        }
        v
    };
    let mut out = Vec::new();
    for y0 in starts(height) {
        for x0 in starts(width) {
            out.push(CropWindow { y0, x0, height: patch, width: patch });
        }
    }
    out
}
