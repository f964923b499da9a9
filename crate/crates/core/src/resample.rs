//! Sparse linear maps between planes: bilinear resizing, rotation, and
//! separable blur. Every map applies the same weights to each channel and
//! exposes its adjoint for backpropagation.

use crate::image::Tensor;

/// Compressed-row sparse matrix taking an `in_h × in_w` plane to an
/// `out_h × out_w` plane.
#[derive(Clone, Debug)]
pub struct PlaneMap {
    pub in_dims: (usize, usize),
    pub out_dims: (usize, usize),
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl PlaneMap {
    fn build(
        in_dims: (usize, usize),
        out_dims: (usize, usize),
        mut taps_for: impl FnMut(usize, usize, &mut Vec<(usize, f64)>),
    ) -> Self {
        let mut row_ptr = Vec::with_capacity(out_dims.0 * out_dims.1 + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        let mut taps = Vec::with_capacity(8);
        row_ptr.push(0);
        for y in 0..out_dims.0 {
            for x in 0..out_dims.1 {
                taps.clear();
                taps_for(y, x, &mut taps);
                for &(c, v) in &taps {
                    if v != 0.0 {
                        cols.push(c);
                        vals.push(v);
                    }
                }
                row_ptr.push(cols.len());
            }
        }
        Self {
            in_dims,
            out_dims,
            row_ptr,
            cols,
            vals,
        }
    }

    pub fn apply_plane(&self, src: &[f64], dst: &mut [f64]) {
        for (r, d) in dst.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.vals[k] * src[self.cols[k]];
            }
            *d = acc;
        }
    }

    pub fn adjoint_plane(&self, grad_out: &[f64], grad_in: &mut [f64]) {
        grad_in.iter_mut().for_each(|v| *v = 0.0);
        for (r, g) in grad_out.iter().enumerate() {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                grad_in[self.cols[k]] += self.vals[k] * g;
            }
        }
    }

    pub fn apply(&self, t: &Tensor) -> Tensor {
        assert_eq!((t.height(), t.width()), self.in_dims, "plane map input");
        let mut out = Tensor::zeros(t.channels(), self.out_dims.0, self.out_dims.1);
        for c in 0..t.channels() {
            self.apply_plane(t.plane(c), out.plane_mut(c));
        }
        out
    }

    pub fn adjoint(&self, g: &Tensor) -> Tensor {
        assert_eq!((g.height(), g.width()), self.out_dims, "plane map gradient");
        let mut out = Tensor::zeros(g.channels(), self.in_dims.0, self.in_dims.1);
        for c in 0..g.channels() {
            self.adjoint_plane(g.plane(c), out.plane_mut(c));
        }
        out
    }
}

/// Bilinear taps at fractional source position `(sy, sx)` with coordinates
/// clamped into the image (replicate border).
fn bilinear_taps(h: usize, w: usize, sy: f64, sx: f64, taps: &mut Vec<(usize, f64)>) {
    let sy = sy.clamp(0.0, (h - 1) as f64);
    let sx = sx.clamp(0.0, (w - 1) as f64);
    let y0 = sy.floor() as usize;
    let x0 = sx.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let ty = sy - y0 as f64;
    let tx = sx - x0 as f64;
    taps.push((y0 * w + x0, (1.0 - ty) * (1.0 - tx)));
    taps.push((y0 * w + x1, (1.0 - ty) * tx));
    taps.push((y1 * w + x0, ty * (1.0 - tx)));
    taps.push((y1 * w + x1, ty * tx));
}

/// Half-pixel-centre bilinear resize.
pub fn bilinear_resize(in_dims: (usize, usize), out_dims: (usize, usize)) -> PlaneMap {
    let (ih, iw) = in_dims;
    let (oh, ow) = out_dims;
    let ry = ih as f64 / oh as f64;
    let rx = iw as f64 / ow as f64;
    PlaneMap::build(in_dims, out_dims, |y, x, taps| {
        let sy = (y as f64 + 0.5) * ry - 0.5;
        let sx = (x as f64 + 0.5) * rx - 0.5;
        bilinear_taps(ih, iw, sy, sx, taps);
    })
}

/// Rotate counter-clockwise by `angle` radians about the image centre.
pub fn rotation(dims: (usize, usize), angle: f64) -> PlaneMap {
    let (h, w) = dims;
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let (sin, cos) = (libm::sin(angle), libm::cos(angle));
    PlaneMap::build(dims, dims, |y, x, taps| {
        let dy = y as f64 - cy;
        let dx = x as f64 - cx;
        let sx = cos * dx + sin * dy + cx;
        let sy = cos * dy - sin * dx + cy;
        bilinear_taps(h, w, sy, sx, taps);
    })
}

pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// One pass of a separable filter along rows (`horizontal`) or columns,
/// replicate border.
pub fn separable_pass(dims: (usize, usize), kernel: &[f64], horizontal: bool) -> PlaneMap {
    let (h, w) = dims;
    let r = (kernel.len() / 2) as isize;
    PlaneMap::build(dims, dims, |y, x, taps| {
        for (i, &kv) in kernel.iter().enumerate() {
            let d = i as isize - r;
            let idx = if horizontal {
                let xx = (x as isize + d).clamp(0, w as isize - 1) as usize;
                y * w + xx
            } else {
                let yy = (y as isize + d).clamp(0, h as isize - 1) as usize;
                yy * w + x
            };
            taps.push((idx, kv));
        }
    })
}
