//! Pixel-domain JPEG round trip: YCbCr transform, 8×8 DCT-II, quantization
//! with the Annex K tables scaled by quality factor, and the inverse path.
//! No entropy coding and no chroma subsampling.

use std::sync::OnceLock;

use crate::image::Tensor;

#[rustfmt::skip]
pub const LUMA_TABLE: [u32; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61,
    12, 12, 14, 19, 26, 58, 60, 55,
    14, 13, 16, 24, 40, 57, 69, 56,
    14, 17, 22, 29, 51, 87, 80, 62,
    18, 22, 37, 56, 68, 109, 103, 77,
    24, 35, 55, 64, 81, 104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103, 99,
];

#[rustfmt::skip]
pub const CHROMA_TABLE: [u32; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99,
    18, 21, 26, 66, 99, 99, 99, 99,
    24, 26, 56, 99, 99, 99, 99, 99,
    47, 66, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
];

/// RGB (0..255) to centred YCbCr, JFIF coefficients.
const RGB_TO_YCC: [[f64; 3]; 3] = [
    [0.299, 0.587, 0.114],
    [-0.168_736, -0.331_264, 0.5],
    [0.5, -0.418_688, -0.081_312],
];

/// libjpeg quality scaling of a base table, clamped to `1..=255`.
pub fn scaled_table(base: &[u32; 64], quality: u32) -> [f64; 64] {
    let q = quality.clamp(1, 100);
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut out = [0.0; 64];
    for (o, &b) in out.iter_mut().zip(base) {
        *o = ((b * scale + 50) / 100).clamp(1, 255) as f64;
    }
    out
}

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut inv = [[0.0; 3]; 3];
    for (i, row) in inv.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
            let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
            *v = (m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]) / det;
        }
    }
    inv
}

fn ycc_to_rgb() -> &'static [[f64; 3]; 3] {
    static INV: OnceLock<[[f64; 3]; 3]> = OnceLock::new();
    INV.get_or_init(|| invert3(&RGB_TO_YCC))
}

/// Orthonormal DCT-II basis, `basis[u][x]`.
fn dct_basis() -> &'static [[f64; 8]; 8] {
    static BASIS: OnceLock<[[f64; 8]; 8]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut b = [[0.0; 8]; 8];
        for (u, row) in b.iter_mut().enumerate() {
            let a = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
            for (x, v) in row.iter_mut().enumerate() {
                *v = a * libm::cos((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI / 16.0);
            }
        }
        b
    })
}

/// `out = B · blk · Bᵀ` (forward) or `Bᵀ · blk · B` (inverse).
fn dct8x8(blk: &[f64; 64], inverse: bool) -> [f64; 64] {
    let b = dct_basis();
    let m = |i: usize, j: usize| if inverse { b[j][i] } else { b[i][j] };
    let mut tmp = [0.0; 64];
    for i in 0..8 {
        for j in 0..8 {
            tmp[i * 8 + j] = (0..8).map(|k| m(i, k) * blk[k * 8 + j]).sum();
        }
    }
    let mut out = [0.0; 64];
    for i in 0..8 {
        for j in 0..8 {
            out[i * 8 + j] = (0..8).map(|k| tmp[i * 8 + k] * m(j, k)).sum();
        }
    }
    out
}

/// Replicate-pad each plane up to multiples of 8.
fn pad8(t: &Tensor) -> Tensor {
    let (c, h, w) = t.shape();
    let ph = h.div_ceil(8) * 8;
    let pw = w.div_ceil(8) * 8;
    Tensor::from_fn(c, ph, pw, |ch, y, x| t.get(ch, y.min(h - 1), x.min(w - 1)))
}

/// Adjoint of `pad8`: padded gradients fold back onto the edge pixels.
fn unpad8_adjoint(g: &Tensor, h: usize, w: usize) -> Tensor {
    let mut out = Tensor::zeros(g.channels(), h, w);
    for c in 0..g.channels() {
        for y in 0..g.height() {
            for x in 0..g.width() {
                let (yy, xx) = (y.min(h - 1), x.min(w - 1));
                let v = out.get(c, yy, xx) + g.get(c, y, x);
                out.set(c, yy, xx, v);
            }
        }
    }
    out
}

fn crop(t: &Tensor, h: usize, w: usize) -> Tensor {
    Tensor::from_fn(t.channels(), h, w, |c, y, x| t.get(c, y, x))
}

/// Per-pixel colour transform on 0..255 planes.
fn colour(t: &Tensor, m: &[[f64; 3]; 3]) -> Tensor {
    if t.channels() == 1 {
        return t.clone();
    }
    let n = t.plane_len();
    let mut out = t.zeros_like();
    for i in 0..n {
        let px = [t.data()[i], t.data()[n + i], t.data()[2 * n + i]];
        for (r, row) in m.iter().enumerate() {
            out.data_mut()[r * n + i] = row[0] * px[0] + row[1] * px[1] + row[2] * px[2];
        }
    }
    out
}

fn transpose3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = m[j][i];
        }
    }
    t
}

fn blockwise(t: &Tensor, mut f: impl FnMut(usize, &[f64; 64]) -> [f64; 64]) -> Tensor {
    let (c, h, w) = t.shape();
    let mut out = t.zeros_like();
    let mut blk = [0.0; 64];
    for ch in 0..c {
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                for i in 0..8 {
                    for j in 0..8 {
                        blk[i * 8 + j] = t.get(ch, by + i, bx + j);
                    }
                }
                let res = f(ch, &blk);
                for i in 0..8 {
                    for j in 0..8 {
                        out.set(ch, by + i, bx + j, res[i * 8 + j]);
                    }
                }
            }
        }
    }
    out
}

/// Round trip before the final clamp. With `round_coefficients == false`
/// the quantizer is skipped entirely, leaving the linear part of the codec.
pub fn roundtrip_unclamped(img: &Tensor, quality: u32, round_coefficients: bool) -> Tensor {
    let (h, w) = (img.height(), img.width());
    let tables = [
        scaled_table(&LUMA_TABLE, quality),
        scaled_table(&CHROMA_TABLE, quality),
    ];
    let padded = pad8(img).map(|v| v * 255.0);
    let ycc = colour(&padded, &RGB_TO_YCC);
    // Y is level shifted; Cb/Cr are already centred by the matrix.
    let shifted = {
        let mut s = ycc;
        s.plane_mut(0).iter_mut().for_each(|v| *v -= 128.0);
        s
    };
    let recon = blockwise(&shifted, |ch, blk| {
        let mut coef = dct8x8(blk, false);
        if round_coefficients {
            let q = &tables[(ch > 0) as usize];
            for (v, qv) in coef.iter_mut().zip(q) {
                *v = (*v / qv).round() * qv;
            }
        }
        dct8x8(&coef, true)
    });
    let mut unshifted = recon;
    unshifted.plane_mut(0).iter_mut().for_each(|v| *v += 128.0);
    let rgb = colour(&unshifted, ycc_to_rgb());
    crop(&rgb, h, w).map(|v| v / 255.0)
}

/// Adjoint of the linear part of the codec (rounding treated as identity).
pub fn linear_adjoint(grad: &Tensor) -> Tensor {
    let (h, w) = (grad.height(), grad.width());
    let g = pad_zero8(grad).map(|v| v / 255.0);
    let g = colour(&g, &transpose3(ycc_to_rgb()));
    // adjoint of inverse DCT is the forward DCT and vice versa
    let g = blockwise(&g, |_, blk| dct8x8(&dct8x8(blk, false), true));
    let g = colour(&g, &transpose3(&RGB_TO_YCC)).map(|v| v * 255.0);
    unpad8_adjoint(&g, h, w)
}

/// Adjoint of `crop`: zero-extend to the padded size.
fn pad_zero8(t: &Tensor) -> Tensor {
    let (c, h, w) = t.shape();
    let ph = h.div_ceil(8) * 8;
    let pw = w.div_ceil(8) * 8;
    Tensor::from_fn(c, ph, pw, |ch, y, x| if y < h && x < w { t.get(ch, y, x) } else { 0.0 })
}
